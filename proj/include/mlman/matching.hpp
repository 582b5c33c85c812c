#pragma once

// Query/support matching: token-level soft alignment between a query and the
// concatenated support set, BLSTM aggregation into instance vectors, query-
// aware attention over support instances, and class scoring.

#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mlman/tensor.hpp"

namespace mlman {

enum class InstanceAggregation { attention, max, mean };
enum class LocalMatching { full, no_concat, no_local_match };
enum class ClassMetric { mlp, euclidean };

std::string to_string(InstanceAggregation mode);
std::string to_string(LocalMatching mode);
std::string to_string(ClassMetric metric);
InstanceAggregation parse_instance_aggregation(const std::string& text);
LocalMatching parse_local_matching(const std::string& text);
ClassMetric parse_class_metric(const std::string& text);

// Forward-path switches. The defaults are the complete model.
struct MatchVariant {
    bool tied = true;
    InstanceAggregation aggregation = InstanceAggregation::attention;
    LocalMatching local = LocalMatching::full;
    ClassMetric metric = ClassMetric::mlp;
};

struct MatchParams {
    Tensor fusion;             // 4*d_c x d_h
    LstmWeights forward;       // input width d_h (d_c when local matching is skipped)
    LstmWeights backward;
    Tensor scorer;             // d_h x 8*d_h
    Tensor scorer_out;         // d_h
    // Separate instance-level scorer, present only for untied models.
    Tensor instance_scorer;
    Tensor instance_scorer_out;

    static MatchParams init(std::size_t context_dim, std::size_t hidden, std::size_t lstm_input,
                            bool untied, std::mt19937_64& rng);

    std::size_t hidden() const { return scorer_out.size(); }
    bool has_untied() const { return instance_scorer.defined(); }
    // Gives an untied scorer initialised from the shared one, if missing.
    void ensure_untied();
    void register_into(ParameterSet& params) const;
};

struct SupportConcat {
    Tensor matrix;                     // T_s x d
    std::vector<std::size_t> lengths;  // T_1..T_K
};

SupportConcat concat_support(std::span<const Tensor> contexts);
std::vector<Tensor> split_rows(const Tensor& matrix, std::span<const std::size_t> lengths);

struct LocalMatch {
    Tensor query_matched;    // T_q x d, rows mix support rows
    Tensor support_matched;  // T_s x d, rows mix query rows
    Tensor alignment;        // T_q x T_s raw dot products
    Tensor query_weights;    // alignment softmaxed along each row
    Tensor support_weights;  // alignment softmaxed down each column
};

LocalMatch local_match(const Tensor& query, const Tensor& support);

// ReLU([X; X~; |X - X~|; X * X~] W1), no bias.
Tensor fuse(const Tensor& original, const Tensor& matched, const Tensor& fusion);

// Single-layer bidirectional LSTM with zero initial states; row t is
// [forward h_t; backward h_t]. Dropout is applied to the input when training.
Tensor blstm_encode(const Tensor& input, const LstmWeights& forward, const LstmWeights& backward,
                    double dropout_rate, bool training, std::mt19937_64& rng);

// [column max; column mean].
Tensor local_aggregate(const Tensor& encoded);

// v . ReLU(W2 [a; b]) as a scalar tensor.
Tensor match_score(const Tensor& a, const Tensor& b, const Tensor& scorer, const Tensor& scorer_out);

struct Prototype {
    Tensor vector;
    Tensor weights;  // softmaxed instance scores; undefined unless attention
};

Prototype aggregate_prototype(std::span<const Tensor> instances, const Tensor& query,
                              const Tensor& scorer, const Tensor& scorer_out,
                              InstanceAggregation mode);

// mlp: match_score(prototype, query); euclidean: -||prototype - query||^2.
Tensor class_score(const Tensor& prototype, const Tensor& query, const Tensor& scorer,
                   const Tensor& scorer_out, ClassMetric metric);

struct SupportBundle {
    std::vector<Tensor> instances;     // s^_k
    Tensor prototype;                  // s^
    Tensor weights;                    // attention weights, when defined
    std::vector<std::size_t> lengths;  // token counts per support instance
    // Column-normalized query/support alignment for each support instance
    // (T_q x T_k); empty when local matching is skipped.
    std::vector<Tensor> attention;
};

struct PairEncoding {
    Tensor query;  // q^
    SupportBundle support;
    Tensor score;  // class score f
};

// Matches one query against the K supports of one class and scores it.
PairEncoding encode_pair(const Tensor& query_context, std::span<const Tensor> support_contexts,
                         const MatchParams& params, const MatchVariant& variant,
                         double dropout_rate, bool training, std::mt19937_64& rng);

}  // namespace mlman
