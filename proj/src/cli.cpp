#include "mlman/cli.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "mlman/errors.hpp"
#include "mlman/synthetic.hpp"
#include "mlman/training.hpp"

namespace mlman {

// ---------------------------------------------------------------------------
// Heatmaps

HeatmapRecord compute_heatmap(const Model& model, const MatchVariant& variant,
                              const EmbeddingTable& words, const Instance& query,
                              const Instance& support) {
    if (variant.local == LocalMatching::no_local_match) {
        throw ContractError("heatmap: this variant skips local matching, so it has no attention");
    }
    MatchParams match = model.match;
    if (!variant.tied) match.ensure_untied();
    std::mt19937_64 unused(0);
    auto encode = [&](const Instance& inst) {
        return encode_context(embed(inst, words, model.encoder), model.encoder, 0.0, false,
                              unused);
    };
    const Tensor q = encode(query);
    const std::vector<Tensor> s{encode(support)};
    auto pair = encode_pair(q, s, match, variant, 0.0, false, unused);
    const Tensor& a = pair.support.attention.at(0);

    HeatmapRecord h;
    h.query_tokens = query.tokens;
    h.support_tokens = support.tokens;
    h.weights.assign(a.rows(), std::vector<double>(a.cols()));
    for (std::size_t r = 0; r < a.rows(); ++r) {
        for (std::size_t c = 0; c < a.cols(); ++c) {
            h.weights[r][c] = a.rank() == 1 ? a.at(c) : a.at(r, c);
        }
    }
    return h;
}

std::string heatmap_to_tsv(const HeatmapRecord& heatmap) {
    std::string out;
    for (const auto& t : heatmap.support_tokens) out += '\t' + t;
    out += '\n';
    char buf[32];
    for (std::size_t r = 0; r < heatmap.weights.size(); ++r) {
        out += heatmap.query_tokens.at(r);
        for (double w : heatmap.weights[r]) {
            std::snprintf(buf, sizeof buf, "%.17g", w);
            out += '\t';
            out += buf;
        }
        out += '\n';
    }
    return out;
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
        auto tab = line.find('\t', start);
        cells.push_back(line.substr(start, tab - start));
        if (tab == std::string::npos) break;
        start = tab + 1;
    }
    return cells;
}

}  // namespace

HeatmapRecord parse_heatmap_tsv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) {
        throw DataError("heatmap: empty file");
    }
    HeatmapRecord h;
    auto header = split_tabs(line);
    if (header.empty() || !header.front().empty()) {
        throw DataError("heatmap: header must start with an empty corner cell");
    }
    h.support_tokens.assign(header.begin() + 1, header.end());
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto cells = split_tabs(line);
        if (cells.size() != h.support_tokens.size() + 1) {
            throw DataError("heatmap line " + std::to_string(line_no) + ": expected " +
                            std::to_string(h.support_tokens.size() + 1) + " cells");
        }
        h.query_tokens.push_back(cells.front());
        std::vector<double> row;
        for (std::size_t c = 1; c < cells.size(); ++c) {
            try {
                std::size_t used = 0;
                row.push_back(std::stod(cells[c], &used));
                if (used != cells[c].size()) throw std::invalid_argument("trailing");
            } catch (const std::exception&) {
                throw DataError("heatmap line " + std::to_string(line_no) + ": bad number '" +
                                cells[c] + "'");
            }
        }
        h.weights.push_back(std::move(row));
    }
    return h;
}

void write_heatmap_pgm(const HeatmapRecord& heatmap, const std::filesystem::path& path,
                       std::size_t cell) {
    const std::size_t rows = heatmap.weights.size();
    const std::size_t cols = rows == 0 ? 0 : heatmap.weights.front().size();
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
    out << "P5\n" << cols * cell << ' ' << rows * cell << "\n255\n";
    for (std::size_t r = 0; r < rows * cell; ++r) {
        for (std::size_t c = 0; c < cols * cell; ++c) {
            double w = std::clamp(heatmap.weights[r / cell][c / cell], 0.0, 1.0);
            out.put(static_cast<char>(255 - static_cast<int>(std::lround(255.0 * w))));
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic task files

void write_synthetic_task(const std::filesystem::path& dir, std::uint64_t seed) {
    SyntheticSpec spec;
    spec.seed = seed;
    save_synthetic(make_synthetic(spec), dir);
    std::ofstream cfg(dir / "config.txt");
    if (!cfg) {
        throw DataError("cannot write " + (dir / "config.txt").string());
    }
    cfg << "# Synthetic trigger-word task; small model, 2,000 steps.\n"
        << serialize_config(synthetic_config(dir));
}

// ---------------------------------------------------------------------------
// Commands

namespace {

using ordered_json = nlohmann::ordered_json;

std::ofstream open_out(const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path);
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
    return out;
}

// Flags for every config key; values are applied over the config file.
struct ConfigFlags {
    std::string config_path;
    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option*> options;

    void attach(CLI::App& cmd) {
        cmd.add_option("--config", config_path, "flat key = value config file");
        for (const auto& k : config_keys()) {
            options[k.name] = cmd.add_option("--" + k.name, values[k.name], k.help);
        }
    }

    TrainConfig resolve() const {
        TrainConfig c = config_path.empty() ? TrainConfig{} : load_config(config_path);
        for (const auto& [name, opt] : options) {
            if (opt->count() > 0) set_config_value(c, name, values.at(name));
        }
        c.validate();
        return c;
    }
};

EmbeddingTable words_for(const std::string& embeddings_path,
                         std::initializer_list<const Corpus*> corpora, std::size_t dim) {
    if (embeddings_path.empty()) {
        throw ConfigError("no embeddings path given");
    }
    Vocabulary vocab;
    for (const Corpus* c : corpora) vocab.add_corpus(*c);
    return load_embeddings(embeddings_path, &vocab, dim);
}

std::string pick_corpus(const std::string& flag, const TrainConfig& config) {
    if (!flag.empty()) return flag;
    if (!config.test_path.empty()) return config.test_path;
    if (!config.dev_path.empty()) return config.dev_path;
    throw ConfigError("no evaluation corpus: pass --corpus or set test_path/dev_path");
}

std::string fixed(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

int cmd_train(const ConfigFlags& flags, std::ostream& out) {
    TrainConfig config = flags.resolve();
    TrainData data = load_train_data(config);
    data.final_corpus();
    const std::filesystem::path dir = config.output_dir;
    std::filesystem::create_directories(dir);
    auto metrics = open_out(dir / "metrics.jsonl");
    auto report = run_repetitions(config, data, &metrics);
    for (std::size_t r = 0; r < report.models.size(); ++r) {
        TrainConfig rc = config;
        rc.seed = config.seed + r;
        rc.repetitions = 1;
        save_checkpoint(dir / ("model-rep" + std::to_string(r) + ".ckpt"), rc, report.models[r]);
    }
    const std::string json = report.to_json(config);
    open_out(dir / "report.json") << json << '\n';
    out << json << '\n';
    return exit_ok;
}

struct EvalArgs {
    std::string checkpoint;
    std::string corpus;
    std::string embeddings;
    std::string records;
    std::size_t n_way = 5;
    std::size_t k_shot = 1;
    std::size_t episodes = 1000;
    std::uint64_t seed = 1;
    int ablation = 0;  // 0: the checkpoint's own variant
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
    auto ck = load_checkpoint(a.checkpoint);
    Corpus corpus = load_corpus(pick_corpus(a.corpus, ck.config), Split::test);
    auto words = words_for(a.embeddings.empty() ? ck.config.embeddings_path : a.embeddings,
                           {&corpus}, ck.config.dims.word_dim);
    const MatchVariant variant = a.ablation == 0 ? ck.config.variant() : ablation(a.ablation).variant;
    auto result = evaluate(ck.model, words, corpus, variant, a.n_way, a.k_shot, a.episodes, a.seed);
    const std::filesystem::path records =
        a.records.empty() ? a.checkpoint + ".eval.jsonl" : a.records;
    auto rec_out = open_out(records);
    for (std::size_t e = 0; e < result.records.size(); ++e) {
        const auto& r = result.records[e];
        ordered_json j;
        j["episode"] = e;
        j["label"] = r.label;
        j["predicted"] = r.predicted;
        j["correct"] = r.label == r.predicted;
        j["scores"] = r.scores;
        rec_out << j.dump() << '\n';
    }
    ordered_json summary;
    summary["n_way"] = a.n_way;
    summary["k_shot"] = a.k_shot;
    summary["episodes"] = a.episodes;
    summary["seed"] = a.seed;
    summary["accuracy"] = result.accuracy;
    out << summary.dump() << '\n';
    return exit_ok;
}

std::vector<int> parse_ids(const std::string& text) {
    std::vector<int> ids;
    std::stringstream in(text);
    std::string part;
    while (std::getline(in, part, ',')) {
        if (part.empty()) continue;
        auto dash = part.find('-');
        try {
            if (dash != std::string::npos) {
                int lo = std::stoi(part.substr(0, dash));
                int hi = std::stoi(part.substr(dash + 1));
                for (int i = lo; i <= hi; ++i) ids.push_back(i);
            } else {
                ids.push_back(std::stoi(part));
            }
        } catch (const std::logic_error&) {
            throw ConfigError("bad ablation id list '" + text + "'");
        }
    }
    if (ids.empty()) throw ConfigError("empty ablation id list");
    for (int id : ids) ablation(id);
    return ids;
}

struct AblateArgs {
    std::string ids = "1-10";
    std::string checkpoint;  // evaluate one checkpoint under each variant
    std::string corpus;
    std::size_t episodes = 1000;
};

int cmd_ablate(const ConfigFlags& flags, const AblateArgs& a, std::ostream& out) {
    const auto ids = parse_ids(a.ids);
    std::string table;
    if (!a.checkpoint.empty()) {
        // Same parameters, different forward paths.
        auto ck = load_checkpoint(a.checkpoint);
        TrainConfig cfg = ck.config;
        for (const auto& [name, opt] : flags.options) {
            if (opt->count() > 0) set_config_value(cfg, name, flags.values.at(name));
        }
        Corpus corpus = load_corpus(pick_corpus(a.corpus, cfg), Split::test);
        auto words = words_for(cfg.embeddings_path, {&corpus}, cfg.dims.word_dim);
        table = "id\tlabel\taccuracy\tmax_score_diff\n";
        std::vector<EvalRecord> reference;
        for (int id : ids) {
            auto r = evaluate(ck.model, words, corpus, ablation(id).variant, cfg.n_eval,
                              cfg.k_shot, a.episodes, cfg.seed);
            if (reference.empty()) reference = r.records;
            double diff = 0.0;
            for (std::size_t e = 0; e < r.records.size(); ++e) {
                for (std::size_t i = 0; i < r.records[e].scores.size(); ++i) {
                    diff = std::max(diff, std::abs(r.records[e].scores[i] -
                                                   reference[e].scores[i]));
                }
            }
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.3g", diff);
            table += std::to_string(id) + '\t' + ablation(id).label + '\t' +
                     fixed(100.0 * r.accuracy, 2) + '\t' + buf + '\n';
        }
        out << table;
        return exit_ok;
    }

    TrainConfig base = flags.resolve();
    TrainData data = load_train_data(base);
    data.final_corpus();
    const std::filesystem::path dir = base.output_dir;
    std::filesystem::create_directories(dir);
    auto reports = open_out(dir / "ablation.jsonl");
    table = "id\tlabel\tmean\tstd\trepetitions\n";
    for (int id : ids) {
        TrainConfig c = base;
        c.ablation_id = id;
        auto metrics = open_out(dir / ("metrics-ablation" + std::to_string(id) + ".jsonl"));
        auto report = run_repetitions(c, data, &metrics);
        reports << report.to_json(c) << '\n';
        table += std::to_string(id) + '\t' + ablation(id).label + '\t' +
                 fixed(100.0 * report.mean, 2) + '\t' + fixed(100.0 * report.stddev, 2) + '\t' +
                 std::to_string(report.accuracies.size()) + '\n';
    }
    open_out(dir / "ablation.tsv") << table;
    out << table;
    return exit_ok;
}

struct DistanceArgs {
    std::string checkpoint;
    std::string corpus;
    std::size_t n_way = 5;
    std::size_t k_shot = 5;
    std::size_t sets = 20000;
    std::uint64_t seed = 1;
};

int cmd_distance(const DistanceArgs& a, std::ostream& out) {
    if (a.k_shot < 2) {
        throw ContractError("distance needs K >= 2 supports per class");
    }
    auto ck = load_checkpoint(a.checkpoint);
    Corpus corpus = load_corpus(pick_corpus(a.corpus, ck.config), Split::test);
    auto words = words_for(ck.config.embeddings_path, {&corpus}, ck.config.dims.word_dim);
    double d = support_distance(ck.model, words, corpus, ck.config.variant(), a.n_way, a.k_shot,
                                a.sets, a.seed);
    ordered_json j;
    j["n_way"] = a.n_way;
    j["k_shot"] = a.k_shot;
    j["sets"] = a.sets;
    j["seed"] = a.seed;
    j["D"] = d;
    out << j.dump() << '\n';
    return exit_ok;
}

struct HeatmapArgs {
    std::string checkpoint;
    std::string query;
    std::string support;
    std::string out = "heatmap.tsv";
    std::string pgm;
};

Instance read_instance(const std::string& arg, const std::string& what) {
    std::string text = arg;
    if (!arg.empty() && arg.front() == '@') {
        std::ifstream in(arg.substr(1));
        if (!in) throw DataError("cannot open " + arg.substr(1));
        std::stringstream buf;
        buf << in.rdbuf();
        text = buf.str();
    }
    nlohmann::json record;
    try {
        record = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(what + " is not valid JSON: " + e.what());
    }
    return parse_instance(record, 0, what);
}

int cmd_heatmap(const HeatmapArgs& a, std::ostream& out) {
    auto ck = load_checkpoint(a.checkpoint);
    Instance q = read_instance(a.query, "query");
    Instance s = read_instance(a.support, "support");
    Vocabulary vocab;
    for (const auto& t : q.tokens) vocab.add(t);
    for (const auto& t : s.tokens) vocab.add(t);
    auto words = load_embeddings(ck.config.embeddings_path, &vocab, ck.config.dims.word_dim);
    auto h = compute_heatmap(ck.model, ck.config.variant(), words, q, s);
    open_out(a.out) << heatmap_to_tsv(h);
    if (!a.pgm.empty()) write_heatmap_pgm(h, a.pgm);
    out << "wrote " << a.out << (a.pgm.empty() ? "" : " and " + a.pgm) << '\n';
    return exit_ok;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Multi-level matching and aggregation network for few-shot relation "
                 "classification"};
    app.require_subcommand(1);

    ConfigFlags train_flags;
    auto* train_cmd = app.add_subcommand("train", "train config.repetitions models and report");
    train_flags.attach(*train_cmd);

    EvalArgs eval_args;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on N-way K-shot episodes");
    eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "checkpoint file")->required();
    eval_cmd->add_option("--corpus", eval_args.corpus, "corpus (default: test_path, dev_path)");
    eval_cmd->add_option("--embeddings", eval_args.embeddings, "word vectors override");
    eval_cmd->add_option("--records", eval_args.records, "per-episode output (JSON lines)");
    eval_cmd->add_option("--n", eval_args.n_way, "ways");
    eval_cmd->add_option("--k", eval_args.k_shot, "shots");
    eval_cmd->add_option("--episodes", eval_args.episodes, "single-query episodes");
    eval_cmd->add_option("--seed", eval_args.seed, "sampling seed");
    eval_cmd->add_option("--ablation", eval_args.ablation, "forward path of preset 1..10");

    ConfigFlags ablate_flags;
    AblateArgs ablate_args;
    auto* ablate_cmd = app.add_subcommand("ablate", "compare ablation presets");
    ablate_flags.attach(*ablate_cmd);
    ablate_cmd->add_option("--ids", ablate_args.ids, "ids, e.g. 1-7 or 8,10");
    ablate_cmd->add_option("--checkpoint", ablate_args.checkpoint,
                           "evaluate this checkpoint under each preset instead of training");
    ablate_cmd->add_option("--corpus", ablate_args.corpus, "corpus for --checkpoint mode");
    ablate_cmd->add_option("--episodes", ablate_args.episodes, "episodes for --checkpoint mode");

    DistanceArgs dist_args;
    auto* dist_cmd = app.add_subcommand("distance", "mean pairwise support distance D");
    dist_cmd->add_option("--checkpoint", dist_args.checkpoint, "checkpoint file")->required();
    dist_cmd->add_option("--corpus", dist_args.corpus, "corpus (default: test_path, dev_path)");
    dist_cmd->add_option("--n", dist_args.n_way, "ways");
    dist_cmd->add_option("--k", dist_args.k_shot, "shots (>= 2)");
    dist_cmd->add_option("--sets", dist_args.sets, "sampled support sets");
    dist_cmd->add_option("--seed", dist_args.seed, "sampling seed");

    HeatmapArgs heat_args;
    auto* heat_cmd = app.add_subcommand("heatmap", "export query/support attention weights");
    heat_cmd->add_option("--checkpoint", heat_args.checkpoint, "checkpoint file")->required();
    heat_cmd->add_option("--query", heat_args.query, "query record as JSON or @file")->required();
    heat_cmd->add_option("--support", heat_args.support, "support record as JSON or @file")
        ->required();
    heat_cmd->add_option("--out", heat_args.out, "TSV output");
    heat_cmd->add_option("--pgm", heat_args.pgm, "optional greyscale raster");

    std::string synth_dir = "synthetic";
    std::uint64_t synth_seed = 7;
    auto* synth_cmd = app.add_subcommand("synth", "write the synthetic trigger-word task");
    synth_cmd->add_option("--out", synth_dir, "output directory");
    synth_cmd->add_option("--seed", synth_seed, "generator seed");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        app.exit(e, out, err);
        return exit_ok;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return exit_usage;
    }

    try {
        if (*train_cmd) return cmd_train(train_flags, out);
        if (*eval_cmd) return cmd_eval(eval_args, out);
        if (*ablate_cmd) return cmd_ablate(ablate_flags, ablate_args, out);
        if (*dist_cmd) return cmd_distance(dist_args, out);
        if (*heat_cmd) return cmd_heatmap(heat_args, out);
        if (*synth_cmd) {
            write_synthetic_task(synth_dir, synth_seed);
            out << "wrote " << synth_dir << '\n';
            return exit_ok;
        }
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return exit_config;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << '\n';
        return exit_data;
    } catch (const CheckpointError& e) {
        err << "checkpoint error: " << e.what() << '\n';
        return exit_checkpoint;
    } catch (const Error& e) {
        err << "runtime error: " << e.what() << '\n';
        return exit_runtime;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "data error: " << e.what() << '\n';
        return exit_data;
    }
    return exit_usage;
}

}  // namespace mlman
