#pragma once

#include <cstddef>
#include <random>

#include "mlman/encoder.hpp"
#include "mlman/matching.hpp"

namespace mlman {

// Network sizes. Defaults are the full-scale settings.
struct ModelDims {
    std::size_t word_dim = 50;
    std::size_t position_dim = 5;
    std::size_t max_distance = 40;
    std::size_t window = 3;
    std::size_t filters = 200;  // d_c
    std::size_t hidden = 100;   // d_h
};

struct Model {
    EncoderParams encoder;
    MatchParams match;

    // LSTM input width follows the variant: d_h after fusion, d_c when local
    // matching is skipped.
    static Model init(const ModelDims& dims, const MatchVariant& variant, std::mt19937_64& rng);

    ParameterSet parameters() const;
    // Deep copy with fresh storage.
    Model clone() const;
};

}  // namespace mlman
