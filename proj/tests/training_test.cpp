#include "mlman/training.hpp"

#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "mlman/errors.hpp"
#include "mlman/synthetic.hpp"

using namespace mlman;

namespace {

SyntheticData tiny_synthetic() {
    SyntheticSpec spec;
    spec.train_relations = 6;
    spec.eval_relations = 5;
    spec.instances_per_relation = 8;
    spec.word_dim = 6;
    spec.min_length = 5;
    spec.max_length = 7;
    return make_synthetic(spec);
}

TrainConfig tiny_config() {
    TrainConfig c;
    c.dims = {6, 2, 10, 3, 5, 3};
    c.n_train = 3;
    c.n_eval = 3;
    c.k_shot = 2;
    c.queries = 2;
    c.max_steps = 4;
    c.eval_every = 2;
    c.eval_episodes = 5;
    c.test_episodes = 6;
    return c;
}

TrainData tiny_data(const SyntheticData& syn, bool with_dev = true) {
    TrainData d;
    d.train = syn.train;
    if (with_dev) d.dev = syn.eval;
    d.words = syn.words;
    return d;
}

QueryScores probs_only(std::vector<double> p, std::size_t label) {
    QueryScores q;
    q.probabilities = Tensor::vector(std::move(p), true);
    q.label = label;
    return q;
}

SupportBundle bundle(std::vector<std::vector<double>> instances, std::vector<double> prototype) {
    SupportBundle b;
    for (auto& v : instances) b.instances.push_back(Tensor::vector(v));
    b.prototype = Tensor::vector(std::move(prototype));
    return b;
}

}  // namespace

// --- episode_forward ---------------------------------------------------------

TEST(EpisodeForward, ZeroOutputWeightsGiveUniformProbabilities) {
    auto syn = tiny_synthetic();
    auto cfg = tiny_config();
    std::mt19937_64 rng(1);
    Model m = Model::init(cfg.dims, cfg.variant(), rng);
    for (auto& v : m.match.scorer_out.mutable_values()) v = 0.0;
    auto ep = sample_episode(syn.train, 4, 2, 3, rng);
    auto s = episode_forward(ep, m, syn.words, cfg.variant(), 0.0, false, rng);
    ASSERT_EQ(s.queries.size(), 3u);
    for (const auto& q : s.queries) {
        for (std::size_t i = 0; i < 4; ++i) {
            EXPECT_EQ(q.scores.at(i), 0.0);
            EXPECT_NEAR(q.probabilities.at(i), 0.25, 1e-15);
        }
    }
}

TEST(EpisodeForward, IdenticalClassSupportsSplitEvenly) {
    auto syn = tiny_synthetic();
    auto cfg = tiny_config();
    std::mt19937_64 rng(2);
    Model m = Model::init(cfg.dims, cfg.variant(), rng);
    auto ep = sample_episode(syn.train, 2, 2, 2, rng);
    ep.support[1] = ep.support[0];
    auto s = episode_forward(ep, m, syn.words, cfg.variant(), 0.0, false, rng);
    for (const auto& q : s.queries) {
        EXPECT_NEAR(q.probabilities.at(0), 0.5, 1e-12);
        EXPECT_NEAR(q.probabilities.at(1), 0.5, 1e-12);
    }
}

TEST(EpisodeForward, ProbabilitiesSumToOneAndArgmaxIsConsistent) {
    auto syn = tiny_synthetic();
    auto cfg = tiny_config();
    std::mt19937_64 rng(3);
    Model m = Model::init(cfg.dims, cfg.variant(), rng);
    auto ep = sample_episode(syn.train, 5, 2, 4, rng);
    auto s = episode_forward(ep, m, syn.words, cfg.variant(), 0.0, false, rng);
    for (const auto& q : s.queries) {
        double total = 0.0;
        std::size_t best = 0;
        for (std::size_t i = 0; i < 5; ++i) {
            total += q.probabilities.at(i);
            if (q.scores.at(i) > q.scores.at(best)) best = i;
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
        EXPECT_EQ(q.predicted, best);
        EXPECT_EQ(q.bundles.size(), 5u);
        // Shifting every score leaves the probabilities unchanged.
        auto shifted = softmax(add_scalar(q.scores, 37.5), 0);
        for (std::size_t i = 0; i < 5; ++i) {
            EXPECT_NEAR(shifted.at(i), q.probabilities.at(i), 1e-12);
        }
    }
}

// --- losses --------------------------------------------------------------------

TEST(LossMatch, PerfectConfidence) {
    EpisodeScores s;
    s.queries.push_back(probs_only({0.0, 1.0}, 1));
    s.queries.push_back(probs_only({1.0, 0.0}, 0));
    EXPECT_EQ(loss_match(s, LossForm::as_written).item(), -1.0);
    EXPECT_EQ(loss_match(s, LossForm::nll).item(), 0.0);
}

TEST(LossMatch, UniformFiveWay) {
    EpisodeScores s;
    s.queries.push_back(probs_only({0.2, 0.2, 0.2, 0.2, 0.2}, 3));
    EXPECT_NEAR(loss_match(s, LossForm::as_written).item(), -0.2, 1e-15);
    EXPECT_NEAR(loss_match(s, LossForm::nll).item(), std::log(5.0), 1e-15);
}

TEST(LossMatch, TwoQueriesHandArithmetic) {
    EpisodeScores s;
    s.queries.push_back(probs_only({0.5, 0.5}, 0));
    s.queries.push_back(probs_only({0.75, 0.25}, 1));
    EXPECT_DOUBLE_EQ(loss_match(s, LossForm::as_written).item(), -0.375);
}

TEST(LossIncon, IdenticalSupportsContributeZero) {
    std::vector<SupportBundle> b{bundle({{1, 2}, {1, 2}, {1, 2}}, {1, 2})};
    EXPECT_EQ(loss_incon(b).item(), 0.0);
}

TEST(LossIncon, SingleShotIsZero) {
    std::vector<SupportBundle> b{bundle({{3, -1}}, {3, -1}), bundle({{0.5, 2}}, {0.5, 2})};
    EXPECT_EQ(loss_incon(b).item(), 0.0);
}

TEST(LossIncon, HandArithmetic) {
    std::vector<SupportBundle> b{bundle({{0.0}, {2.0}}, {1.0})};
    EXPECT_DOUBLE_EQ(loss_incon(b).item(), 1.0);
}

TEST(LossIncon, NonNegativeOnRealEpisodes) {
    auto syn = tiny_synthetic();
    auto cfg = tiny_config();
    std::mt19937_64 rng(4);
    Model m = Model::init(cfg.dims, cfg.variant(), rng);
    auto ep = sample_episode(syn.train, 3, 3, 2, rng);
    auto s = episode_forward(ep, m, syn.words, cfg.variant(), 0.0, false, rng);
    EXPECT_GT(loss_incon(s).item(), 0.0);
}

// --- schedule and steps --------------------------------------------------------

TEST(Schedule, DecaysTenfoldEveryTwentyThousandSteps) {
    TrainConfig c;
    EXPECT_EQ(lr_at(c, 0), 0.1);
    EXPECT_EQ(lr_at(c, 19999), 0.1);
    EXPECT_DOUBLE_EQ(lr_at(c, 20000), 0.01);
    EXPECT_DOUBLE_EQ(lr_at(c, 45000), 0.001);
}

TEST(TrainStep, LambdaZeroObjectiveIsMatchOnly) {
    auto syn = tiny_synthetic();
    auto cfg = tiny_config();
    cfg.ablation_id = 2;
    std::mt19937_64 rng(5);
    Trainer t(cfg, Model::init(cfg.dims, cfg.variant(), rng), syn.words, 9);
    auto ep = sample_episode(syn.train, 3, 2, 2, rng);
    auto m = t.step(ep);
    EXPECT_EQ(m.j, m.j_match);
    EXPECT_GT(m.j_incon, 0.0);
    EXPECT_EQ(m.lr, 0.1);
    EXPECT_EQ(t.steps_taken(), 1u);
}

TEST(TrainStep, JointObjectiveAddsWeightedIncon) {
    auto syn = tiny_synthetic();
    auto cfg = tiny_config();
    cfg.lambda = 1.0;
    std::mt19937_64 rng(6);
    Trainer t(cfg, Model::init(cfg.dims, cfg.variant(), rng), syn.words, 9);
    auto ep = sample_episode(syn.train, 3, 2, 2, rng);
    auto m = t.step(ep);
    EXPECT_DOUBLE_EQ(m.j, m.j_match + m.j_incon);
}

TEST(TrainStep, UpdateMatchesManualSgd) {
    auto syn = tiny_synthetic();
    auto cfg = tiny_config();
    cfg.dropout = 0.0;
    std::mt19937_64 rng(7);
    Model init = Model::init(cfg.dims, cfg.variant(), rng);
    auto ep = sample_episode(syn.train, 3, 2, 2, rng);

    Model manual = init.clone();
    std::mt19937_64 unused(0);
    auto s = episode_forward(ep, manual, syn.words, cfg.variant(), 0.0, true, unused);
    backward(add(loss_match(s, cfg.loss_form), scale(loss_incon(s), cfg.lambda)));
    const ParameterSet mp = manual.parameters();

    Trainer t(cfg, init.clone(), syn.words, 1);
    t.step(ep);
    const ParameterSet tp = t.model().parameters();
    ASSERT_EQ(mp.size(), tp.size());
    for (std::size_t p = 0; p < mp.size(); ++p) {
        const auto& a = mp.entries()[p].second;
        const auto& b = tp.entries()[p].second;
        for (std::size_t i = 0; i < a.size(); ++i) {
            EXPECT_EQ(b.values()[i], a.values()[i] - 0.1 * a.grad()[i]) << mp.entries()[p].first;
        }
    }
}

TEST(TrainStep, BitReproducible) {
    auto syn = tiny_synthetic();
    auto cfg = tiny_config();
    auto run = [&] {
        std::mt19937_64 rng(8);
        Trainer t(cfg, Model::init(cfg.dims, cfg.variant(), rng), syn.words, 3);
        auto ep = sample_episode(syn.train, 3, 2, 2, rng);
        auto m = t.step(ep);
        std::ostringstream out;
        write_checkpoint(out, cfg, t.model());
        return std::pair{m.j, out.str()};
    };
    auto a = run();
    auto b = run();
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(a.second, b.second);
}

TEST(TrainStep, NonFiniteLossAbortsWithNorms) {
    auto syn = tiny_synthetic();
    auto cfg = tiny_config();
    cfg.loss_form = LossForm::nll;
    std::mt19937_64 rng(9);
    Model m = Model::init(cfg.dims, cfg.variant(), rng);
    for (auto& v : m.match.scorer_out.mutable_values()) v = 1e300;
    Trainer t(cfg, m, syn.words, 1);
    auto ep = sample_episode(syn.train, 3, 2, 2, rng);
    try {
        t.step(ep);
        FAIL() << "expected a runtime failure";
    } catch (const RuntimeFailure& e) {
        EXPECT_NE(std::string(e.what()).find("match.scorer_out"), std::string::npos);
    }
}

TEST(TrainStep, UntiedVariantNeedsUntiedModel) {
    auto syn = tiny_synthetic();
    auto cfg = tiny_config();
    std::mt19937_64 rng(10);
    Model tied = Model::init(cfg.dims, cfg.variant(), rng);
    cfg.ablation_id = 3;
    EXPECT_THROW(Trainer(cfg, tied, syn.words, 1), ContractError);
    EXPECT_NO_THROW(Trainer(cfg, Model::init(cfg.dims, cfg.variant(), rng), syn.words, 1));
}

TEST(TrainStep, GradientOfJointObjective) {
    auto syn = tiny_synthetic();
    auto cfg = tiny_config();
    std::mt19937_64 rng(11);
    Model m = Model::init(cfg.dims, cfg.variant(), rng);
    auto ep = sample_episode(syn.train, 2, 2, 1, rng);
    auto loss = [&] {
        std::mt19937_64 unused(0);
        auto s = episode_forward(ep, m, syn.words, cfg.variant(), 0.0, false, unused);
        return add(loss_match(s, LossForm::nll), loss_incon(s));
    };
    const ParameterSet ps = m.parameters();
    std::vector<Tensor> inputs;
    for (const auto& [name, t] : ps.entries()) inputs.push_back(t);
    auto r = mlman::testing::grad_check(inputs, loss);
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

// --- evaluation -----------------------------------------------------------------

TEST(Evaluate, OneWayIsAlwaysCorrect) {
    auto syn = tiny_synthetic();
    auto cfg = tiny_config();
    std::mt19937_64 rng(12);
    Model m = Model::init(cfg.dims, cfg.variant(), rng);
    auto r = evaluate(m, syn.words, syn.eval, cfg.variant(), 1, 1, 20, 3);
    EXPECT_EQ(r.accuracy, 1.0);
    EXPECT_EQ(r.records.size(), 20u);
}

TEST(Evaluate, SameSeedSameResult) {
    auto syn = tiny_synthetic();
    auto cfg = tiny_config();
    std::mt19937_64 rng(13);
    Model m = Model::init(cfg.dims, cfg.variant(), rng);
    auto a = evaluate(m, syn.words, syn.eval, cfg.variant(), 5, 1, 30, 4);
    auto b = evaluate(m, syn.words, syn.eval, cfg.variant(), 5, 1, 30, 4);
    EXPECT_EQ(a.accuracy, b.accuracy);
    for (std::size_t e = 0; e < 30; ++e) {
        EXPECT_EQ(a.records[e].scores, b.records[e].scores);
    }
}

TEST(Evaluate, SingleEpisodeAccuracyIsZeroOrOne) {
    auto syn = tiny_synthetic();
    auto cfg = tiny_config();
    std::mt19937_64 rng(14);
    Model m = Model::init(cfg.dims, cfg.variant(), rng);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        double acc = evaluate(m, syn.words, syn.eval, cfg.variant(), 5, 1, 1, seed).accuracy;
        EXPECT_TRUE(acc == 0.0 || acc == 1.0);
    }
}

TEST(Evaluate, UntiedVariantBorrowsSharedScorer) {
    auto syn = tiny_synthetic();
    auto cfg = tiny_config();
    std::mt19937_64 rng(15);
    Model m = Model::init(cfg.dims, cfg.variant(), rng);
    auto tied = evaluate(m, syn.words, syn.eval, ablation(1).variant, 5, 1, 10, 2);
    auto untied = evaluate(m, syn.words, syn.eval, ablation(3).variant, 5, 1, 10, 2);
    for (std::size_t e = 0; e < 10; ++e) {
        EXPECT_EQ(tied.records[e].scores, untied.records[e].scores);
    }
}

// --- distance ---------------------------------------------------------------------

TEST(Distance, IdenticalSupportsGiveZero) {
    std::vector<SupportBundle> b{bundle({{1, 2}, {1, 2}}, {1, 2}), bundle({{0, 1}, {0, 1}}, {0, 1})};
    EXPECT_EQ(pairwise_distance(b), 0.0);
}

TEST(Distance, HandArithmetic) {
    std::vector<SupportBundle> b{bundle({{0.0}, {2.0}}, {1.0})};
    EXPECT_DOUBLE_EQ(pairwise_distance(b), 4.0);
}

TEST(Distance, NeedsTwoShots) {
    std::vector<SupportBundle> b{bundle({{0.0}}, {0.0})};
    EXPECT_THROW(pairwise_distance(b), ContractError);
    auto syn = tiny_synthetic();
    auto cfg = tiny_config();
    std::mt19937_64 rng(16);
    Model m = Model::init(cfg.dims, cfg.variant(), rng);
    EXPECT_THROW(support_distance(m, syn.words, syn.eval, cfg.variant(), 5, 1, 3, 1),
                 ContractError);
    EXPECT_GE(support_distance(m, syn.words, syn.eval, cfg.variant(), 5, 2, 3, 1), 0.0);
}

// --- runs ---------------------------------------------------------------------------

TEST(MeanAndStddev, SingleValueHasZeroSpread) {
    std::vector<double> v{0.7};
    auto [m, s] = mean_and_stddev(v);
    EXPECT_EQ(m, 0.7);
    EXPECT_EQ(s, 0.0);
}

TEST(MeanAndStddev, SampleStandardDeviation) {
    std::vector<double> v{0.6, 0.8};
    auto [m, s] = mean_and_stddev(v);
    EXPECT_DOUBLE_EQ(m, 0.7);
    EXPECT_NEAR(s, std::sqrt(0.02), 1e-15);
}

TEST(Train, EmitsOneRecordPerStepWithValidation) {
    auto syn = tiny_synthetic();
    auto cfg = tiny_config();
    std::ostringstream metrics;
    auto out = train(cfg, tiny_data(syn), 1, &metrics);
    std::istringstream in(metrics.str());
    std::string line;
    std::size_t lines = 0, evals = 0;
    while (std::getline(in, line)) {
        ++lines;
        for (const char* key : {"\"step\"", "\"lr\"", "\"J_match\"", "\"J_incon\"", "\"J\""}) {
            EXPECT_NE(line.find(key), std::string::npos) << line;
        }
        evals += line.find("\"eval_accuracy\"") != std::string::npos ? 1 : 0;
    }
    EXPECT_EQ(lines, 4u);
    EXPECT_EQ(evals, 2u);
    EXPECT_GE(out.best_dev_accuracy, 0.0);
    EXPECT_TRUE(out.best_step == 1 || out.best_step == 3);
}

TEST(Train, SameSeedSameMetrics) {
    auto syn = tiny_synthetic();
    auto cfg = tiny_config();
    std::ostringstream a, b;
    train(cfg, tiny_data(syn), 5, &a);
    train(cfg, tiny_data(syn), 5, &b);
    EXPECT_EQ(a.str(), b.str());
}

TEST(RunRepetitions, ReportsMeanOfRuns) {
    auto syn = tiny_synthetic();
    auto cfg = tiny_config();
    cfg.repetitions = 2;
    auto report = run_repetitions(cfg, tiny_data(syn), nullptr);
    ASSERT_EQ(report.accuracies.size(), 2u);
    EXPECT_DOUBLE_EQ(report.mean, (report.accuracies[0] + report.accuracies[1]) / 2);
    EXPECT_EQ(report.models.size(), 2u);
    auto json = report.to_json(cfg);
    EXPECT_NE(json.find("\"mean\""), std::string::npos);
    EXPECT_NE(json.find("\"std\""), std::string::npos);

    cfg.repetitions = 1;
    EXPECT_EQ(run_repetitions(cfg, tiny_data(syn), nullptr).stddev, 0.0);
}

TEST(RunRepetitions, NeedsAFinalCorpus) {
    auto syn = tiny_synthetic();
    auto cfg = tiny_config();
    EXPECT_THROW(run_repetitions(cfg, tiny_data(syn, false), nullptr), ConfigError);
}

// --- checkpoints ----------------------------------------------------------------------

TEST(Checkpoint, ExactRoundTrip) {
    for (int id : {1, 3, 9}) {
        auto cfg = tiny_config();
        cfg.ablation_id = id;
        std::mt19937_64 rng(17);
        Model m = Model::init(cfg.dims, cfg.variant(), rng);
        std::stringstream buf;
        write_checkpoint(buf, cfg, m);
        auto ck = read_checkpoint(buf);
        EXPECT_EQ(serialize_config(ck.config), serialize_config(cfg));
        const ParameterSet a = m.parameters();
        const ParameterSet b = ck.model.parameters();
        ASSERT_EQ(a.size(), b.size());
        for (std::size_t p = 0; p < a.size(); ++p) {
            EXPECT_EQ(a.entries()[p].first, b.entries()[p].first);
            EXPECT_EQ(a.entries()[p].second.shape(), b.entries()[p].second.shape());
            auto x = a.entries()[p].second.values();
            auto y = b.entries()[p].second.values();
            for (std::size_t i = 0; i < x.size(); ++i) {
                EXPECT_EQ(x[i], y[i]);
            }
        }
        std::stringstream again;
        write_checkpoint(again, ck.config, ck.model);
        std::stringstream first;
        write_checkpoint(first, cfg, m);
        EXPECT_EQ(again.str(), first.str());
    }
}

TEST(Checkpoint, ShapeMismatchIsCheckpointError) {
    auto cfg = tiny_config();
    std::mt19937_64 rng(18);
    Model m = Model::init(cfg.dims, cfg.variant(), rng);
    std::stringstream buf;
    write_checkpoint(buf, cfg, m);
    std::string text = buf.str();
    // Claim a different hidden size in the config block.
    auto pos = text.find("hidden = 3");
    ASSERT_NE(pos, std::string::npos);
    text.replace(pos, 10, "hidden = 4");
    std::istringstream in(text);
    try {
        read_checkpoint(in);
        FAIL() << "expected a checkpoint error";
    } catch (const CheckpointError& e) {
        EXPECT_NE(std::string(e.what()).find("shape mismatch"), std::string::npos);
    }
}

TEST(Checkpoint, MalformedFilesAreCheckpointErrors) {
    std::istringstream empty("");
    EXPECT_THROW(read_checkpoint(empty), CheckpointError);
    std::istringstream wrong("hello\n");
    EXPECT_THROW(read_checkpoint(wrong), CheckpointError);
    EXPECT_THROW(load_checkpoint("/nonexistent/model.ckpt"), CheckpointError);

    auto cfg = tiny_config();
    std::mt19937_64 rng(19);
    Model m = Model::init(cfg.dims, cfg.variant(), rng);
    std::stringstream buf;
    write_checkpoint(buf, cfg, m);
    std::string text = buf.str();
    std::istringstream truncated(text.substr(0, text.size() / 2));
    EXPECT_THROW(read_checkpoint(truncated), CheckpointError);
}

// --- synthetic corpus ---------------------------------------------------------------

TEST(Synthetic, DefaultTaskShape) {
    SyntheticSpec spec;
    auto syn = make_synthetic(spec);
    EXPECT_EQ(syn.train.label_count(), 20u);
    EXPECT_EQ(syn.eval.label_count(), 5u);
    EXPECT_LE(spec.vocabulary_size(), 200u);
    EXPECT_EQ(syn.words.size(), spec.vocabulary_size() + 1);
    std::vector<const Corpus*> both{&syn.train, &syn.eval};
    EXPECT_NO_THROW(check_disjoint(both));
    for (const Corpus* c : both) {
        for (std::size_t r = 0; r < c->label_count(); ++r) {
            for (const auto& inst : c->by_label[r]) {
                ASSERT_LT(inst.head_pos, inst.tail_pos);
                // Exactly one trigger token, and it lies between the entities.
                std::size_t triggers = 0;
                for (std::size_t t = 0; t < inst.tokens.size(); ++t) {
                    if (inst.tokens[t].rfind("rel", 0) == 0) {
                        ++triggers;
                        EXPECT_GT(t, inst.head_pos);
                        EXPECT_LT(t, inst.tail_pos);
                    }
                }
                EXPECT_EQ(triggers, 1u);
            }
        }
    }
}

TEST(Synthetic, SameSeedSameCorpus) {
    SyntheticSpec spec;
    spec.instances_per_relation = 5;
    auto a = make_synthetic(spec);
    auto b = make_synthetic(spec);
    EXPECT_EQ(corpus_to_json(a.train), corpus_to_json(b.train));
    EXPECT_EQ(a.words.tokens(), b.words.tokens());
}
