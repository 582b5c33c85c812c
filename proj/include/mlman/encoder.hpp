#pragma once

#include <cstddef>
#include <random>

#include "mlman/data.hpp"
#include "mlman/tensor.hpp"

namespace mlman {

// Learnable parts of the context encoder. Word vectors are frozen and live in
// the EmbeddingTable instead.
struct EncoderParams {
    Tensor head_positions;  // (2*max_distance + 1) x d_p
    Tensor tail_positions;  // (2*max_distance + 1) x d_p
    Tensor filters;         // window x (d_w + 2*d_p) x d_c
    Tensor bias;            // d_c

    // Position tables uniform in [-0.1, 0.1]; filters uniform in
    // +-1/sqrt(window * input width); bias zero.
    static EncoderParams init(std::size_t word_dim, std::size_t position_dim,
                              std::size_t max_distance, std::size_t window, std::size_t filters,
                              std::mt19937_64& rng);

    std::size_t max_distance() const { return (head_positions.rows() - 1) / 2; }
    std::size_t output_dim() const { return bias.size(); }
    void register_into(ParameterSet& params) const;
};

// Rows [e_t; p_1t; p_2t] for every token.
Tensor embed(const Instance& instance, const EmbeddingTable& words, const EncoderParams& params);

// dropout -> same-padded CNN -> ReLU. Output is T x d_c.
Tensor encode_context(const Tensor& word_rep, const EncoderParams& params, double dropout_rate,
                      bool training, std::mt19937_64& rng);

}  // namespace mlman
