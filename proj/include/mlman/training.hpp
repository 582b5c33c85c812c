#pragma once

// Episodic objective, inconsistency regularizer, SGD loop, evaluation and
// checkpoints.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mlman/config.hpp"
#include "mlman/data.hpp"
#include "mlman/model.hpp"

namespace mlman {

// Independent, reproducible sub-seed for one purpose (splitmix64 mix).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

struct QueryScores {
    Tensor scores;         // N class scores
    Tensor probabilities;  // softmax of scores
    std::size_t predicted = 0;
    std::size_t label = 0;
    std::vector<SupportBundle> bundles;  // one per class, conditioned on this query
};

struct EpisodeScores {
    std::vector<QueryScores> queries;
};

// Encodes every sentence of the episode once, then matches each query against
// each class. Dropout is active only when `training` is set.
EpisodeScores episode_forward(const Episode& episode, const Model& model,
                              const EmbeddingTable& words, const MatchVariant& variant,
                              double dropout_rate, bool training, std::mt19937_64& rng);

// as_written: -(1/R) sum P(l_j); nll: -(1/R) sum log P(l_j).
Tensor loss_match(const EpisodeScores& scores, LossForm form);
// (1/(N K)) sum_i sum_k ||s_k^i - s^i||^2 for one query's bundles.
Tensor loss_incon(std::span<const SupportBundle> bundles);
// loss_incon averaged over the queries of an episode.
Tensor loss_incon(const EpisodeScores& scores);

// lr * decay^floor(step / decay_every).
double lr_at(const TrainConfig& config, std::size_t step);

struct StepMetrics {
    std::size_t step = 0;
    double lr = 0.0;
    double j_match = 0.0;
    double j_incon = 0.0;
    double j = 0.0;
};

// One SGD update on one episode. Owns the model during training.
class Trainer {
public:
    Trainer(const TrainConfig& config, Model model, const EmbeddingTable& words,
            std::uint64_t seed);

    // Throws RuntimeFailure, listing parameter norms, if the loss is not finite.
    StepMetrics step(const Episode& episode);

    const Model& model() const { return model_; }
    std::size_t steps_taken() const { return step_; }
    std::mt19937_64& rng() { return rng_; }

private:
    TrainConfig config_;
    Model model_;
    ParameterSet params_;
    const EmbeddingTable* words_;
    MatchVariant variant_;
    std::mt19937_64 rng_;
    std::size_t step_ = 0;
};

struct EvalRecord {
    std::size_t label = 0;
    std::size_t predicted = 0;
    std::vector<double> scores;
};

struct EvalResult {
    double accuracy = 0.0;
    std::vector<EvalRecord> records;
};

// Single-query N-way K-shot episodes with dropout off. An untied variant on a
// model without its own instance scorer borrows the shared one.
EvalResult evaluate(const Model& model, const EmbeddingTable& words, const Corpus& corpus,
                    const MatchVariant& variant, std::size_t n_way, std::size_t k_shot,
                    std::size_t episodes, std::uint64_t seed);

// Eq.-16-style mean pairwise squared distance between support instance vectors
// of each class, averaged over sampled support sets. Requires K >= 2.
double support_distance(const Model& model, const EmbeddingTable& words, const Corpus& corpus,
                        const MatchVariant& variant, std::size_t n_way, std::size_t k_shot,
                        std::size_t sets, std::uint64_t seed);
// The same statistic for a single class bundle list.
double pairwise_distance(std::span<const SupportBundle> bundles);

struct TrainData {
    Corpus train;
    std::optional<Corpus> dev;
    std::optional<Corpus> test;
    EmbeddingTable words{1, {}, {}};

    const Corpus& final_corpus() const;
};

// Reads the corpora and the embeddings restricted to their vocabulary.
TrainData load_train_data(const TrainConfig& config);

struct TrainOutcome {
    Model model;  // best on validation, or the last one without a dev set
    double best_dev_accuracy = -1.0;
    std::size_t best_step = 0;
};

// Full training run. One JSON record per logged step is written to `metrics`
// when given; `rep` tags those records.
TrainOutcome train(const TrainConfig& config, const TrainData& data, std::uint64_t seed,
                   std::ostream* metrics, std::size_t rep = 0);

struct RepetitionReport {
    std::vector<double> accuracies;
    double mean = 0.0;
    double stddev = 0.0;  // sample standard deviation; 0 for one run
    std::vector<Model> models;

    std::string to_json(const TrainConfig& config) const;
};

std::pair<double, double> mean_and_stddev(std::span<const double> values);

// Trains config.repetitions models with seeds seed+0.. and evaluates each on
// the final corpus.
RepetitionReport run_repetitions(const TrainConfig& config, const TrainData& data,
                                 std::ostream* metrics);

// Text checkpoint: the config followed by every parameter with a shape header.
void write_checkpoint(std::ostream& out, const TrainConfig& config, const Model& model);
void save_checkpoint(const std::filesystem::path& path, const TrainConfig& config,
                     const Model& model);

struct Checkpoint {
    TrainConfig config;
    Model model;
};

// Throws CheckpointError on malformed files or shape mismatches.
Checkpoint read_checkpoint(std::istream& in, const std::string& source = "checkpoint");
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mlman
