#include "mlman/encoder.hpp"

#include <cmath>

#include "mlman/errors.hpp"

namespace mlman {

EncoderParams EncoderParams::init(std::size_t word_dim, std::size_t position_dim,
                                  std::size_t max_distance, std::size_t window,
                                  std::size_t filters, std::mt19937_64& rng) {
    if (window % 2 == 0) {
        throw ConfigError("CNN window must be odd, got " + std::to_string(window));
    }
    const std::size_t rows = 2 * max_distance + 1;
    const std::size_t in = word_dim + 2 * position_dim;
    const double bound = 1.0 / std::sqrt(static_cast<double>(window * in));
    EncoderParams p;
    p.head_positions = Tensor::uniform({rows, position_dim}, -0.1, 0.1, rng, true);
    p.tail_positions = Tensor::uniform({rows, position_dim}, -0.1, 0.1, rng, true);
    p.filters = Tensor::uniform({window, in, filters}, -bound, bound, rng, true);
    p.bias = Tensor::zeros({filters}, true);
    return p;
}

void EncoderParams::register_into(ParameterSet& params) const {
    params.add("encoder.head_positions", head_positions);
    params.add("encoder.tail_positions", tail_positions);
    params.add("encoder.filters", filters);
    params.add("encoder.bias", bias);
}

Tensor embed(const Instance& instance, const EmbeddingTable& words, const EncoderParams& params) {
    const std::size_t T = instance.tokens.size();
    std::vector<std::size_t> rows(T);
    for (std::size_t t = 0; t < T; ++t) {
        rows[t] = words.lookup(instance.tokens[t]);
    }
    auto pos = position_indices(T, instance.head_pos, instance.tail_pos, params.max_distance());
    return concat_cols({gather_rows(words.matrix(), rows),
                        gather_rows(params.head_positions, pos.head),
                        gather_rows(params.tail_positions, pos.tail)});
}

Tensor encode_context(const Tensor& word_rep, const EncoderParams& params, double dropout_rate,
                      bool training, std::mt19937_64& rng) {
    auto x = dropout(word_rep, dropout_rate, training, rng);
    return relu(conv1d_same(x, params.filters, params.bias));
}

}  // namespace mlman
