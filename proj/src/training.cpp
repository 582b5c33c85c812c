#include "mlman/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "mlman/errors.hpp"

namespace mlman {

using ordered_json = nlohmann::ordered_json;

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Forward and losses

EpisodeScores episode_forward(const Episode& episode, const Model& model,
                              const EmbeddingTable& words, const MatchVariant& variant,
                              double dropout_rate, bool training, std::mt19937_64& rng) {
    const std::size_t n = episode.ways();
    if (n == 0 || episode.shots() == 0 || episode.queries.empty()) {
        throw ContractError("episode_forward: episode needs classes, supports and queries");
    }
    auto encode = [&](const Instance& inst) {
        return encode_context(embed(inst, words, model.encoder), model.encoder, dropout_rate,
                              training, rng);
    };
    std::vector<std::vector<Tensor>> support(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (episode.support[i].size() != episode.shots()) {
            throw ContractError("episode_forward: classes have different shot counts");
        }
        for (const auto& inst : episode.support[i]) {
            support[i].push_back(encode(inst));
        }
    }

    EpisodeScores out;
    for (const auto& query : episode.queries) {
        if (query.label >= n) {
            throw ContractError("episode_forward: query label outside the episode");
        }
        Tensor q = encode(query.instance);
        QueryScores qs;
        qs.label = query.label;
        std::vector<Tensor> class_scores;
        for (std::size_t i = 0; i < n; ++i) {
            auto pair = encode_pair(q, support[i], model.match, variant, dropout_rate, training,
                                    rng);
            class_scores.push_back(pair.score);
            qs.bundles.push_back(std::move(pair.support));
        }
        qs.scores = concat_cols(class_scores);
        qs.probabilities = softmax(qs.scores, 0);
        auto s = qs.scores.values();
        for (std::size_t i = 1; i < n; ++i) {
            if (s[i] > s[qs.predicted]) {
                qs.predicted = i;
            }
        }
        out.queries.push_back(std::move(qs));
    }
    return out;
}

Tensor loss_match(const EpisodeScores& scores, LossForm form) {
    if (scores.queries.empty()) {
        throw ContractError("loss_match: no queries");
    }
    Tensor total;
    for (const auto& q : scores.queries) {
        if (q.label >= q.probabilities.size()) {
            throw ContractError("loss_match: label outside the episode");
        }
        Tensor p = slice_cols(q.probabilities, q.label, 1);
        Tensor term = form == LossForm::nll ? log(p) : p;
        total = total.defined() ? add(total, term) : term;
    }
    return scale(total, -1.0 / static_cast<double>(scores.queries.size()));
}

Tensor loss_incon(std::span<const SupportBundle> bundles) {
    if (bundles.empty()) {
        throw ContractError("loss_incon: no classes");
    }
    Tensor total;
    std::size_t count = 0;
    for (const auto& b : bundles) {
        for (const auto& s : b.instances) {
            Tensor d = sq_l2(sub(s, b.prototype));
            total = total.defined() ? add(total, d) : d;
            ++count;
        }
    }
    if (count == 0) {
        throw ContractError("loss_incon: classes have no supports");
    }
    return scale(total, 1.0 / static_cast<double>(count));
}

Tensor loss_incon(const EpisodeScores& scores) {
    if (scores.queries.empty()) {
        throw ContractError("loss_incon: no queries");
    }
    Tensor total;
    for (const auto& q : scores.queries) {
        Tensor term = loss_incon(q.bundles);
        total = total.defined() ? add(total, term) : term;
    }
    return scale(total, 1.0 / static_cast<double>(scores.queries.size()));
}

double lr_at(const TrainConfig& config, std::size_t step) {
    return config.lr * std::pow(config.decay, static_cast<double>(step / config.decay_every));
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(const TrainConfig& config, Model model, const EmbeddingTable& words,
                 std::uint64_t seed)
    : config_(config),
      model_(std::move(model)),
      params_(model_.parameters()),
      words_(&words),
      variant_(config.variant()),
      rng_(seed) {
    if (!variant_.tied && !model_.match.has_untied()) {
        throw ContractError("untied variant needs a model with its own instance scorer");
    }
}

StepMetrics Trainer::step(const Episode& episode) {
    auto scores = episode_forward(episode, model_, *words_, variant_, config_.dropout, true, rng_);
    Tensor jm = loss_match(scores, config_.loss_form);
    Tensor ji = loss_incon(scores);
    const double lambda = config_.effective_lambda();
    Tensor j = lambda == 0.0 ? jm : add(jm, scale(ji, lambda));

    StepMetrics m;
    m.step = step_;
    m.lr = lr_at(config_, step_);
    m.j_match = jm.item();
    m.j_incon = ji.item();
    m.j = j.item();
    if (!std::isfinite(m.j)) {
        std::ostringstream msg;
        msg << "non-finite loss at step " << step_ << " (J_match=" << m.j_match
            << ", J_incon=" << m.j_incon << "); parameter norms:";
        for (const auto& [name, t] : params_.entries()) {
            double sq = 0.0;
            for (double v : t.values()) sq += v * v;
            msg << "\n  " << name << " " << shape_str(t.shape()) << " " << std::sqrt(sq);
        }
        throw RuntimeFailure(msg.str());
    }
    backward(j);
    sgd_step(params_, m.lr);
    ++step_;
    return m;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

const Model& with_scorers_for(const Model& model, const MatchVariant& variant,
                              std::optional<Model>& storage) {
    if (variant.tied || model.match.has_untied()) {
        return model;
    }
    storage = model.clone();
    storage->match.ensure_untied();
    return *storage;
}

}  // namespace

EvalResult evaluate(const Model& model, const EmbeddingTable& words, const Corpus& corpus,
                    const MatchVariant& variant, std::size_t n_way, std::size_t k_shot,
                    std::size_t episodes, std::uint64_t seed) {
    std::optional<Model> storage;
    const Model& m = with_scorers_for(model, variant, storage);
    std::mt19937_64 sampler(seed);
    std::mt19937_64 unused(seed);
    EvalResult result;
    result.records.reserve(episodes);
    std::size_t correct = 0;
    for (std::size_t e = 0; e < episodes; ++e) {
        Episode ep = sample_episode(corpus, n_way, k_shot, 1, sampler);
        auto scores = episode_forward(ep, m, words, variant, 0.0, false, unused);
        const auto& q = scores.queries.front();
        EvalRecord rec;
        rec.label = q.label;
        rec.predicted = q.predicted;
        rec.scores.assign(q.scores.values().begin(), q.scores.values().end());
        correct += rec.label == rec.predicted ? 1 : 0;
        result.records.push_back(std::move(rec));
    }
    result.accuracy =
        episodes == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(episodes);
    return result;
}

double pairwise_distance(std::span<const SupportBundle> bundles) {
    if (bundles.empty()) {
        throw ContractError("pairwise distance needs at least one class");
    }
    const std::size_t k = bundles.front().instances.size();
    if (k < 2) {
        throw ContractError("pairwise distance needs K >= 2 supports per class");
    }
    double total = 0.0;
    for (const auto& b : bundles) {
        if (b.instances.size() != k) {
            throw ContractError("pairwise distance: classes have different shot counts");
        }
        for (std::size_t a = 0; a < k; ++a) {
            for (std::size_t c = a + 1; c < k; ++c) {
                auto x = b.instances[a].values();
                auto y = b.instances[c].values();
                for (std::size_t j = 0; j < x.size(); ++j) {
                    total += (x[j] - y[j]) * (x[j] - y[j]);
                }
            }
        }
    }
    const double n = static_cast<double>(bundles.size());
    const double kk = static_cast<double>(k);
    return 2.0 * total / (n * kk * (kk - 1.0));
}

double support_distance(const Model& model, const EmbeddingTable& words, const Corpus& corpus,
                        const MatchVariant& variant, std::size_t n_way, std::size_t k_shot,
                        std::size_t sets, std::uint64_t seed) {
    if (k_shot < 2) {
        throw ContractError("distance needs K >= 2 supports per class");
    }
    if (sets == 0) {
        throw ContractError("distance needs at least one support set");
    }
    std::optional<Model> storage;
    const Model& m = with_scorers_for(model, variant, storage);
    std::mt19937_64 sampler(seed);
    std::mt19937_64 unused(seed);
    double total = 0.0;
    for (std::size_t s = 0; s < sets; ++s) {
        Episode ep = sample_episode(corpus, n_way, k_shot, 1, sampler);
        auto scores = episode_forward(ep, m, words, variant, 0.0, false, unused);
        total += pairwise_distance(scores.queries.front().bundles);
    }
    return total / static_cast<double>(sets);
}

// ---------------------------------------------------------------------------
// Training runs

const Corpus& TrainData::final_corpus() const {
    if (test) return *test;
    if (dev) return *dev;
    throw ConfigError("no test or dev corpus for the final evaluation");
}

TrainData load_train_data(const TrainConfig& config) {
    if (config.train_path.empty()) {
        throw ConfigError("train_path is not set");
    }
    if (config.embeddings_path.empty()) {
        throw ConfigError("embeddings_path is not set");
    }
    TrainData data;
    data.train = load_corpus(config.train_path, Split::train);
    if (!config.dev_path.empty()) data.dev = load_corpus(config.dev_path, Split::dev);
    if (!config.test_path.empty()) data.test = load_corpus(config.test_path, Split::test);

    std::vector<const Corpus*> all{&data.train};
    if (data.dev) all.push_back(&*data.dev);
    if (data.test) all.push_back(&*data.test);
    check_disjoint(all);

    Vocabulary vocab;
    for (const Corpus* c : all) vocab.add_corpus(*c);
    data.words = load_embeddings(config.embeddings_path, &vocab, config.dims.word_dim);
    return data;
}

namespace {

ordered_json step_record(std::size_t rep, const StepMetrics& m) {
    ordered_json rec;
    rec["rep"] = rep;
    rec["step"] = m.step;
    rec["lr"] = m.lr;
    rec["J_match"] = m.j_match;
    rec["J_incon"] = m.j_incon;
    rec["J"] = m.j;
    return rec;
}

}  // namespace

TrainOutcome train(const TrainConfig& config, const TrainData& data, std::uint64_t seed,
                   std::ostream* metrics, std::size_t rep) {
    config.validate();
    const MatchVariant variant = config.variant();
    std::mt19937_64 init_rng(derive_seed(seed, 0));
    Trainer trainer(config, Model::init(config.dims, variant, init_rng), data.words,
                    derive_seed(seed, 1));
    std::mt19937_64 sampler(derive_seed(seed, 2));
    const std::uint64_t dev_seed = derive_seed(seed, 3);
    const bool validate = data.dev.has_value() && config.eval_every > 0;

    TrainOutcome outcome;
    for (std::size_t s = 0; s < config.max_steps; ++s) {
        Episode ep = sample_episode(data.train, config.n_train, config.k_shot, config.queries,
                                    sampler);
        StepMetrics m = trainer.step(ep);
        const bool last = s + 1 == config.max_steps;
        const bool eval_now = validate && ((s + 1) % config.eval_every == 0 || last);
        std::optional<double> acc;
        if (eval_now) {
            acc = evaluate(trainer.model(), data.words, *data.dev, variant, config.n_eval,
                           config.k_shot, config.eval_episodes, dev_seed)
                      .accuracy;
            if (*acc > outcome.best_dev_accuracy) {
                outcome.best_dev_accuracy = *acc;
                outcome.best_step = s;
                outcome.model = trainer.model().clone();
            }
        }
        if (metrics && (s % config.log_every == 0 || eval_now || last)) {
            auto rec = step_record(rep, m);
            if (acc) rec["eval_accuracy"] = *acc;
            *metrics << rec.dump() << '\n';
        }
    }
    if (!outcome.model.encoder.filters.defined()) {
        outcome.model = trainer.model().clone();
        outcome.best_step = config.max_steps == 0 ? 0 : config.max_steps - 1;
    }
    return outcome;
}

std::pair<double, double> mean_and_stddev(std::span<const double> values) {
    if (values.empty()) {
        throw ContractError("mean_and_stddev: no values");
    }
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    if (values.size() == 1) {
        return {mean, 0.0};
    }
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return {mean, std::sqrt(ss / static_cast<double>(values.size() - 1))};
}

std::string RepetitionReport::to_json(const TrainConfig& config) const {
    ordered_json rec;
    rec["ablation"] = config.ablation_id;
    rec["label"] = config.preset().label;
    rec["n_way"] = config.n_eval;
    rec["k_shot"] = config.k_shot;
    rec["repetitions"] = accuracies.size();
    rec["accuracies"] = accuracies;
    rec["mean"] = mean;
    rec["std"] = stddev;
    return rec.dump();
}

RepetitionReport run_repetitions(const TrainConfig& config, const TrainData& data,
                                 std::ostream* metrics) {
    config.validate();
    const Corpus& final_corpus = data.final_corpus();
    RepetitionReport report;
    for (std::size_t r = 0; r < config.repetitions; ++r) {
        const std::uint64_t seed = config.seed + r;
        auto outcome = train(config, data, seed, metrics, r);
        auto result = evaluate(outcome.model, data.words, final_corpus, config.variant(),
                               config.n_eval, config.k_shot, config.test_episodes,
                               derive_seed(seed, 4));
        report.accuracies.push_back(result.accuracy);
        report.models.push_back(std::move(outcome.model));
    }
    std::tie(report.mean, report.stddev) = mean_and_stddev(report.accuracies);
    return report;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr const char* kMagic = "mlman-checkpoint 1";

}  // namespace

void write_checkpoint(std::ostream& out, const TrainConfig& config, const Model& model) {
    const std::string cfg = serialize_config(config);
    std::size_t lines = 0;
    for (char c : cfg) lines += c == '\n' ? 1 : 0;
    out << kMagic << '\n' << "config " << lines << '\n' << cfg;
    const ParameterSet params = model.parameters();
    out << "parameters " << params.size() << '\n';
    char buf[32];
    for (const auto& [name, t] : params.entries()) {
        out << name << ' ' << t.rank();
        for (std::size_t d : t.shape()) out << ' ' << d;
        out << '\n';
        bool first = true;
        for (double v : t.values()) {
            std::snprintf(buf, sizeof buf, "%.17g", v);
            out << (first ? "" : " ") << buf;
            first = false;
        }
        out << '\n';
    }
}

void save_checkpoint(const std::filesystem::path& path, const TrainConfig& config,
                     const Model& model) {
    std::ofstream out(path);
    if (!out) {
        throw CheckpointError("cannot write checkpoint " + path.string());
    }
    write_checkpoint(out, config, model);
    if (!out) {
        throw CheckpointError("failed writing checkpoint " + path.string());
    }
}

Checkpoint read_checkpoint(std::istream& in, const std::string& source) {
    auto fail = [&](const std::string& what) -> CheckpointError {
        return CheckpointError(source + ": " + what);
    };
    std::string line;
    if (!std::getline(in, line) || line != kMagic) {
        throw fail("not a checkpoint file");
    }
    std::string word;
    std::size_t count = 0;
    if (!std::getline(in, line) || !(std::istringstream(line) >> word >> count) ||
        word != "config") {
        throw fail("missing config block");
    }
    std::string cfg_text;
    for (std::size_t i = 0; i < count; ++i) {
        if (!std::getline(in, line)) throw fail("truncated config block");
        cfg_text += line + '\n';
    }
    Checkpoint ck;
    try {
        ck.config = parse_config(cfg_text);
        ck.config.validate();
    } catch (const ConfigError& e) {
        throw fail(std::string("bad config block: ") + e.what());
    }
    std::mt19937_64 rng(0);
    ck.model = Model::init(ck.config.dims, ck.config.variant(), rng);

    if (!std::getline(in, line) || !(std::istringstream(line) >> word >> count) ||
        word != "parameters") {
        throw fail("missing parameter block");
    }
    std::map<std::string, bool> seen;
    for (std::size_t p = 0; p < count; ++p) {
        if (!std::getline(in, line)) throw fail("truncated parameter block");
        std::istringstream header(line);
        std::string name;
        std::size_t rank = 0;
        if (!(header >> name >> rank)) throw fail("bad parameter header '" + line + "'");
        Shape shape(rank);
        for (auto& d : shape) {
            if (!(header >> d)) throw fail("bad shape for " + name);
        }
        if (name.rfind("match.instance_scorer", 0) == 0) {
            ck.model.match.ensure_untied();
        }
        const ParameterSet params = ck.model.parameters();
        if (!params.contains(name)) throw fail("unknown parameter " + name);
        Tensor target = params.get(name);
        if (target.shape() != shape) {
            throw fail("shape mismatch for " + name + ": file has " + shape_str(shape) +
                       ", model expects " + shape_str(target.shape()));
        }
        if (!std::getline(in, line)) throw fail("missing values for " + name);
        std::istringstream values(line);
        auto out = target.mutable_values();
        for (auto& v : out) {
            if (!(values >> v)) throw fail("too few values for " + name);
        }
        if (values >> word) throw fail("too many values for " + name);
        seen[name] = true;
    }
    const ParameterSet final_params = ck.model.parameters();
    for (const auto& [name, t] : final_params.entries()) {
        if (!seen.count(name)) throw fail("missing parameter " + name);
    }
    return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw CheckpointError("cannot open checkpoint " + path.string());
    }
    return read_checkpoint(in, path.string());
}

}  // namespace mlman
