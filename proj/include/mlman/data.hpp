#pragma once

#include <cstddef>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "mlman/tensor.hpp"

namespace mlman {

// A tokenized sentence with two entity anchors and its relation label.
struct Instance {
    std::vector<std::string> tokens;
    std::size_t head_pos = 0;
    std::size_t tail_pos = 0;
    std::size_t relation = 0;
    // Head and tail spans share a token in the source record.
    bool overlapping = false;
};

enum class Split { train, dev, test };

std::string_view split_name(Split split);
Split parse_split(std::string_view name);

struct Corpus {
    Split split = Split::train;
    std::vector<std::string> relation_names;         // label id -> name
    std::vector<std::vector<Instance>> by_label;     // label id -> instances

    std::size_t label_count() const { return by_label.size(); }
    std::size_t instance_count() const;
};

// FewRel layout: {"<relation>": [{"tokens": [...], "h": [name, id, [[i, ...], ...]],
// "t": [...]}, ...], ...}. Entity anchors are the first token of the first span.
Corpus parse_corpus(const nlohmann::json& doc, Split split);
Corpus load_corpus(const std::filesystem::path& path, Split split);
Instance parse_instance(const nlohmann::json& record, std::size_t relation,
                        std::string_view context = "instance");
nlohmann::json instance_to_json(const Instance& instance);
nlohmann::json corpus_to_json(const Corpus& corpus);
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);

// Throws DataError when any two corpora share a relation name.
void check_disjoint(std::span<const Corpus* const> corpora);

// Lookup key for pretrained vectors.
std::string normalize_token(std::string_view token);

// Normalized token types seen in a set of corpora.
class Vocabulary {
public:
    void add(std::string_view token);
    void add_corpus(const Corpus& corpus);
    bool contains(std::string_view token) const;
    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }

private:
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<std::string> tokens_;
};

// Frozen word vectors. Row 0 is the all-zero UNK vector.
class EmbeddingTable {
public:
    EmbeddingTable(std::size_t dim, std::vector<std::string> tokens,
                   std::vector<std::vector<double>> vectors);

    std::size_t dim() const { return dim_; }
    std::size_t size() const { return matrix_.rows(); }
    // Row index after normalization; 0 when the token is unknown.
    std::size_t lookup(std::string_view token) const;
    std::span<const double> vector(std::string_view token) const;
    // Never tracks gradients.
    const Tensor& matrix() const { return matrix_; }
    const std::vector<std::string>& tokens() const { return tokens_; }

    static constexpr std::size_t unk = 0;

private:
    std::size_t dim_;
    std::vector<std::string> tokens_;  // tokens_[row - 1]
    std::unordered_map<std::string, std::size_t> rows_;
    Tensor matrix_;
};

// One token followed by exactly `dim` numbers per line. Only tokens in
// `vocab` are kept when it is given.
EmbeddingTable load_embeddings(const std::filesystem::path& path, const Vocabulary* vocab,
                               std::size_t dim = 50);
void save_embeddings(const EmbeddingTable& table, const std::filesystem::path& path);

// clip(t - p, -max_distance, max_distance) + max_distance.
std::size_t relative_position_index(std::size_t t, std::size_t p, std::size_t max_distance);

struct PositionIndices {
    std::vector<std::size_t> head;
    std::vector<std::size_t> tail;
};

PositionIndices position_indices(std::size_t length, std::size_t head_pos, std::size_t tail_pos,
                                 std::size_t max_distance = 40);

struct Query {
    Instance instance;
    std::size_t label = 0;  // index into Episode::labels
};

struct Episode {
    std::vector<std::size_t> labels;               // corpus label ids, one per way
    std::vector<std::vector<Instance>> support;    // [way][shot]
    std::vector<Query> queries;

    std::size_t ways() const { return labels.size(); }
    std::size_t shots() const { return support.empty() ? 0 : support.front().size(); }
};

// N distinct classes, K supports each, then R queries drawn uniformly from the
// pooled remaining instances of those classes.
Episode sample_episode(const Corpus& corpus, std::size_t n_way, std::size_t k_shot,
                       std::size_t queries, std::mt19937_64& rng);

}  // namespace mlman
