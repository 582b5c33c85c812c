#include "mlman/matching.hpp"

#include <cmath>

#include "mlman/errors.hpp"

namespace mlman {

std::string to_string(InstanceAggregation mode) {
    switch (mode) {
        case InstanceAggregation::attention:
            return "attention";
        case InstanceAggregation::max:
            return "max";
        case InstanceAggregation::mean:
            return "mean";
    }
    return "attention";
}

std::string to_string(LocalMatching mode) {
    switch (mode) {
        case LocalMatching::full:
            return "full";
        case LocalMatching::no_concat:
            return "no_concat";
        case LocalMatching::no_local_match:
            return "no_local_match";
    }
    return "full";
}

std::string to_string(ClassMetric metric) {
    return metric == ClassMetric::mlp ? "mlp" : "euclidean";
}

InstanceAggregation parse_instance_aggregation(const std::string& text) {
    if (text == "attention") return InstanceAggregation::attention;
    if (text == "max") return InstanceAggregation::max;
    if (text == "mean") return InstanceAggregation::mean;
    throw ConfigError("unknown instance aggregation '" + text + "'");
}

LocalMatching parse_local_matching(const std::string& text) {
    if (text == "full") return LocalMatching::full;
    if (text == "no_concat") return LocalMatching::no_concat;
    if (text == "no_local_match") return LocalMatching::no_local_match;
    throw ConfigError("unknown local matching variant '" + text + "'");
}

ClassMetric parse_class_metric(const std::string& text) {
    if (text == "mlp") return ClassMetric::mlp;
    if (text == "euclidean") return ClassMetric::euclidean;
    throw ConfigError("unknown class metric '" + text + "'");
}

// ---------------------------------------------------------------------------

namespace {

double xavier_bound(std::size_t fan_in, std::size_t fan_out) {
    return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

LstmWeights init_lstm(std::size_t input, std::size_t hidden, std::mt19937_64& rng) {
    const double b = 1.0 / std::sqrt(static_cast<double>(hidden));
    return {Tensor::uniform({input, 4 * hidden}, -b, b, rng, true),
            Tensor::uniform({hidden, 4 * hidden}, -b, b, rng, true),
            Tensor::uniform({4 * hidden}, -b, b, rng, true)};
}

}  // namespace

MatchParams MatchParams::init(std::size_t context_dim, std::size_t hidden, std::size_t lstm_input,
                              bool untied, std::mt19937_64& rng) {
    MatchParams p;
    const double wf = xavier_bound(4 * context_dim, hidden);
    p.fusion = Tensor::uniform({4 * context_dim, hidden}, -wf, wf, rng, true);
    p.forward = init_lstm(lstm_input, hidden, rng);
    p.backward = init_lstm(lstm_input, hidden, rng);
    const double ws = xavier_bound(8 * hidden, hidden);
    const double wv = 1.0 / std::sqrt(static_cast<double>(hidden));
    p.scorer = Tensor::uniform({hidden, 8 * hidden}, -ws, ws, rng, true);
    p.scorer_out = Tensor::uniform({hidden}, -wv, wv, rng, true);
    if (untied) {
        p.instance_scorer = Tensor::uniform({hidden, 8 * hidden}, -ws, ws, rng, true);
        p.instance_scorer_out = Tensor::uniform({hidden}, -wv, wv, rng, true);
    }
    return p;
}

void MatchParams::ensure_untied() {
    if (!has_untied()) {
        instance_scorer = scorer.clone();
        instance_scorer_out = scorer_out.clone();
    }
}

void MatchParams::register_into(ParameterSet& params) const {
    params.add("match.fusion", fusion);
    params.add("match.forward.input", forward.input);
    params.add("match.forward.recurrent", forward.recurrent);
    params.add("match.forward.bias", forward.bias);
    params.add("match.backward.input", backward.input);
    params.add("match.backward.recurrent", backward.recurrent);
    params.add("match.backward.bias", backward.bias);
    params.add("match.scorer", scorer);
    params.add("match.scorer_out", scorer_out);
    if (has_untied()) {
        params.add("match.instance_scorer", instance_scorer);
        params.add("match.instance_scorer_out", instance_scorer_out);
    }
}

// ---------------------------------------------------------------------------

SupportConcat concat_support(std::span<const Tensor> contexts) {
    if (contexts.empty()) {
        throw ContractError("concat_support: no support instances");
    }
    SupportConcat out;
    for (const auto& c : contexts) {
        if (c.rank() != 2) {
            throw DimensionError("concat_support: context must be a matrix, got " +
                                 shape_str(c.shape()));
        }
        out.lengths.push_back(c.rows());
    }
    out.matrix = contexts.size() == 1 ? contexts.front() : concat_rows(contexts);
    return out;
}

std::vector<Tensor> split_rows(const Tensor& matrix, std::span<const std::size_t> lengths) {
    if (lengths.size() == 1) {
        if (lengths.front() != matrix.rows()) {
            throw DimensionError("split_rows: segment lengths do not cover the matrix");
        }
        return {matrix};
    }
    std::vector<Tensor> parts;
    std::size_t offset = 0;
    for (auto len : lengths) {
        parts.push_back(slice_rows(matrix, offset, len));
        offset += len;
    }
    if (offset != matrix.rows()) {
        throw DimensionError("split_rows: segment lengths do not cover the matrix");
    }
    return parts;
}

LocalMatch local_match(const Tensor& query, const Tensor& support) {
    if (query.rank() != 2 || support.rank() != 2 || query.cols() != support.cols()) {
        throw DimensionError("local_match: widths differ, " + shape_str(query.shape()) + " vs " +
                             shape_str(support.shape()));
    }
    LocalMatch m;
    m.alignment = matmul(query, transpose(support));
    m.query_weights = softmax(m.alignment, 1);
    m.support_weights = softmax(m.alignment, 0);
    m.query_matched = matmul(m.query_weights, support);
    m.support_matched = matmul(transpose(m.support_weights), query);
    return m;
}

Tensor fuse(const Tensor& original, const Tensor& matched, const Tensor& fusion) {
    auto features = concat_cols(
        {original, matched, abs(sub(original, matched)), mul(original, matched)});
    return relu(matmul(features, fusion));
}

Tensor blstm_encode(const Tensor& input, const LstmWeights& forward, const LstmWeights& backward,
                    double dropout_rate, bool training, std::mt19937_64& rng) {
    if (input.rank() != 2) {
        throw DimensionError("blstm_encode: expected a T x d matrix, got " +
                             shape_str(input.shape()));
    }
    const std::size_t T = input.rows();
    const std::size_t d = forward.hidden();
    auto x = dropout(input, dropout_rate, training, rng);

    auto run = [&](const LstmWeights& w, bool reverse) {
        auto projected = matmul(x, w.input);
        std::vector<Tensor> hs(T);
        LstmState s{Tensor::zeros({d}), Tensor::zeros({d})};
        for (std::size_t i = 0; i < T; ++i) {
            const std::size_t t = reverse ? T - 1 - i : i;
            s = lstm_cell(row(projected, t), s.h, s.c, w.recurrent, w.bias);
            hs[t] = s.h;
        }
        return concat_rows(hs);
    };
    return concat_cols({run(forward, false), run(backward, true)});
}

Tensor local_aggregate(const Tensor& encoded) {
    return concat_cols({pool_max_rows(encoded), pool_mean_rows(encoded)});
}

Tensor match_score(const Tensor& a, const Tensor& b, const Tensor& scorer,
                   const Tensor& scorer_out) {
    if (a.rank() != 1 || b.rank() != 1 || a.size() + b.size() != scorer.cols()) {
        throw DimensionError("match_score: inputs " + shape_str(a.shape()) + ", " +
                             shape_str(b.shape()) + " do not fit scorer " +
                             shape_str(scorer.shape()));
    }
    auto hidden = relu(matmul(scorer, concat_cols({a, b})));
    return matmul(scorer_out, hidden);
}

Prototype aggregate_prototype(std::span<const Tensor> instances, const Tensor& query,
                              const Tensor& scorer, const Tensor& scorer_out,
                              InstanceAggregation mode) {
    if (instances.empty()) {
        throw ContractError("aggregate_prototype: empty support");
    }
    Prototype out;
    switch (mode) {
        case InstanceAggregation::attention: {
            std::vector<Tensor> scores;
            for (const auto& s : instances) {
                scores.push_back(match_score(s, query, scorer, scorer_out));
            }
            out.weights = softmax(concat_cols(scores), 0);
            out.vector = matmul(out.weights, concat_rows(instances));
            break;
        }
        case InstanceAggregation::max:
            out.vector = elementwise_max(instances);
            break;
        case InstanceAggregation::mean:
            out.vector = elementwise_mean(instances);
            break;
    }
    return out;
}

Tensor class_score(const Tensor& prototype, const Tensor& query, const Tensor& scorer,
                   const Tensor& scorer_out, ClassMetric metric) {
    if (metric == ClassMetric::euclidean) {
        return scale(sq_l2(sub(prototype, query)), -1.0);
    }
    return match_score(prototype, query, scorer, scorer_out);
}

PairEncoding encode_pair(const Tensor& query_context, std::span<const Tensor> support_contexts,
                         const MatchParams& params, const MatchVariant& variant,
                         double dropout_rate, bool training, std::mt19937_64& rng) {
    if (support_contexts.empty()) {
        throw ContractError("encode_pair: empty support set");
    }
    if (!variant.tied && !params.has_untied()) {
        throw ContractError("encode_pair: untied variant needs a separate instance scorer");
    }
    const Tensor& inst_scorer = variant.tied ? params.scorer : params.instance_scorer;
    const Tensor& inst_out = variant.tied ? params.scorer_out : params.instance_scorer_out;
    auto encode = [&](const Tensor& x) {
        return local_aggregate(
            blstm_encode(x, params.forward, params.backward, dropout_rate, training, rng));
    };

    PairEncoding out;
    auto& bundle = out.support;
    for (const auto& s : support_contexts) {
        bundle.lengths.push_back(s.rows());
    }

    switch (variant.local) {
        case LocalMatching::full: {
            auto concat = concat_support(support_contexts);
            auto m = local_match(query_context, concat.matrix);
            auto query_fused = fuse(query_context, m.query_matched, params.fusion);
            auto support_fused = fuse(concat.matrix, m.support_matched, params.fusion);
            out.query = encode(query_fused);
            std::size_t offset = 0;
            for (const auto& seg : split_rows(support_fused, concat.lengths)) {
                bundle.instances.push_back(encode(seg));
                bundle.attention.push_back(
                    concat.lengths.size() == 1
                        ? m.support_weights
                        : slice_cols(m.support_weights, offset, seg.rows()));
                offset += seg.rows();
            }
            auto proto = aggregate_prototype(bundle.instances, out.query, inst_scorer, inst_out,
                                             variant.aggregation);
            bundle.prototype = proto.vector;
            bundle.weights = proto.weights;
            break;
        }
        case LocalMatching::no_concat: {
            std::vector<Tensor> queries;
            for (const auto& s : support_contexts) {
                auto m = local_match(query_context, s);
                queries.push_back(encode(fuse(query_context, m.query_matched, params.fusion)));
                bundle.instances.push_back(encode(fuse(s, m.support_matched, params.fusion)));
                bundle.attention.push_back(m.support_weights);
            }
            out.query = elementwise_mean(queries);
            bundle.prototype = elementwise_mean(bundle.instances);
            break;
        }
        case LocalMatching::no_local_match: {
            out.query = encode(query_context);
            for (const auto& s : support_contexts) {
                bundle.instances.push_back(encode(s));
            }
            auto proto = aggregate_prototype(bundle.instances, out.query, inst_scorer, inst_out,
                                             variant.aggregation);
            bundle.prototype = proto.vector;
            bundle.weights = proto.weights;
            break;
        }
    }
    out.score = class_score(bundle.prototype, out.query, params.scorer, params.scorer_out,
                            variant.metric);
    return out;
}

}  // namespace mlman
