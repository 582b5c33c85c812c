#pragma once

// Generated pseudo-relation corpus: each relation is signalled by one trigger
// token placed between the head and tail entities, surrounded by filler.

#include <cstdint>
#include <filesystem>

#include "mlman/config.hpp"
#include "mlman/data.hpp"

namespace mlman {

struct SyntheticSpec {
    std::size_t train_relations = 20;
    std::size_t eval_relations = 5;
    std::size_t instances_per_relation = 40;
    std::size_t filler_words = 120;
    std::size_t entity_words = 40;
    std::size_t min_length = 6;
    std::size_t max_length = 12;
    // Kept below the number of training triggers so that the training
    // vectors span the space the held-out triggers live in.
    std::size_t word_dim = 16;
    // Per-component spread of the random word vectors.
    double vector_stddev = 1.0;
    std::uint64_t seed = 7;

    std::size_t vocabulary_size() const {
        return train_relations + eval_relations + filler_words + entity_words;
    }
};

struct SyntheticData {
    Corpus train;
    Corpus eval;  // relations disjoint from train
    EmbeddingTable words{1, {}, {}};
};

SyntheticData make_synthetic(const SyntheticSpec& spec);

// Writes train.json, eval.json and vectors.txt into `dir`.
void save_synthetic(const SyntheticData& data, const std::filesystem::path& dir);

// Small-model settings that learn the default synthetic task within 2,000
// steps on one CPU core. Paths point at the files written by save_synthetic.
TrainConfig synthetic_config(const std::filesystem::path& dir);

}  // namespace mlman
