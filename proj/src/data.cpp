#include "mlman/data.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "mlman/errors.hpp"

namespace mlman {

using nlohmann::json;

std::string_view split_name(Split split) {
    switch (split) {
        case Split::train:
            return "train";
        case Split::dev:
            return "dev";
        case Split::test:
            return "test";
    }
    return "train";
}

Split parse_split(std::string_view name) {
    if (name == "train") return Split::train;
    if (name == "dev" || name == "val") return Split::dev;
    if (name == "test") return Split::test;
    throw ConfigError("unknown split '" + std::string(name) + "'");
}

std::size_t Corpus::instance_count() const {
    std::size_t n = 0;
    for (const auto& v : by_label) {
        n += v.size();
    }
    return n;
}

// ---------------------------------------------------------------------------
// Corpus JSON

namespace {

std::vector<std::size_t> entity_tokens(const json& entity, std::size_t length,
                                       std::string_view context, const char* which) {
    auto fail = [&](const std::string& why) {
        return DataError(std::string(context) + ": " + which + " entity " + why);
    };
    if (!entity.is_array() || entity.size() < 3 || !entity[2].is_array() || entity[2].empty()) {
        throw fail("must be [name, id, [[token indices], ...]]");
    }
    std::vector<std::size_t> all;
    for (const auto& span : entity[2]) {
        if (!span.is_array() || span.empty()) {
            throw fail("has an empty or malformed span");
        }
        for (const auto& idx : span) {
            if (!idx.is_number_integer()) {
                throw fail("span index is not an integer");
            }
            auto v = idx.get<long long>();
            if (v < 0 || static_cast<std::size_t>(v) >= length) {
                throw fail("span index " + std::to_string(v) + " outside sentence of " +
                           std::to_string(length) + " tokens");
            }
            all.push_back(static_cast<std::size_t>(v));
        }
    }
    return all;
}

}  // namespace

Instance parse_instance(const json& record, std::size_t relation, std::string_view context) {
    if (!record.is_object() || !record.contains("tokens") || !record["tokens"].is_array()) {
        throw DataError(std::string(context) + ": missing token list");
    }
    Instance inst;
    inst.relation = relation;
    for (const auto& tok : record["tokens"]) {
        if (!tok.is_string()) {
            throw DataError(std::string(context) + ": token is not a string");
        }
        inst.tokens.push_back(tok.get<std::string>());
    }
    if (inst.tokens.empty()) {
        throw DataError(std::string(context) + ": empty sentence");
    }
    if (!record.contains("h") || !record.contains("t")) {
        throw DataError(std::string(context) + ": missing entity record 'h' or 't'");
    }
    auto head = entity_tokens(record["h"], inst.tokens.size(), context, "head");
    auto tail = entity_tokens(record["t"], inst.tokens.size(), context, "tail");
    inst.head_pos = head.front();
    inst.tail_pos = tail.front();
    std::set<std::size_t> head_set(head.begin(), head.end());
    inst.overlapping = std::any_of(tail.begin(), tail.end(),
                                   [&](std::size_t t) { return head_set.count(t) > 0; });
    return inst;
}

Corpus parse_corpus(const json& doc, Split split) {
    if (!doc.is_object()) {
        throw DataError("corpus must be a JSON object mapping relation names to instance lists");
    }
    Corpus corpus;
    corpus.split = split;
    for (const auto& [name, list] : doc.items()) {
        if (!list.is_array()) {
            throw DataError("relation " + name + ": instance list expected");
        }
        const std::size_t label = corpus.relation_names.size();
        corpus.relation_names.push_back(name);
        auto& bucket = corpus.by_label.emplace_back();
        for (std::size_t i = 0; i < list.size(); ++i) {
            bucket.push_back(
                parse_instance(list[i], label, "relation " + name + " instance " + std::to_string(i)));
        }
    }
    return corpus;
}

Corpus load_corpus(const std::filesystem::path& path, Split split) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open corpus file " + path.string());
    }
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw DataError("corpus file " + path.string() + " does not parse: " + e.what());
    }
    return parse_corpus(doc, split);
}

json instance_to_json(const Instance& instance) {
    return json{{"tokens", instance.tokens},
                {"h", json::array({instance.tokens[instance.head_pos], "",
                                   json::array({json::array({instance.head_pos})})})},
                {"t", json::array({instance.tokens[instance.tail_pos], "",
                                   json::array({json::array({instance.tail_pos})})})}};
}

json corpus_to_json(const Corpus& corpus) {
    json doc = json::object();
    for (std::size_t l = 0; l < corpus.label_count(); ++l) {
        json list = json::array();
        for (const auto& inst : corpus.by_label[l]) {
            list.push_back(instance_to_json(inst));
        }
        doc[corpus.relation_names[l]] = std::move(list);
    }
    return doc;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) {
        throw DataError("cannot write corpus file " + path.string());
    }
    out << corpus_to_json(corpus).dump() << '\n';
}

void check_disjoint(std::span<const Corpus* const> corpora) {
    std::unordered_map<std::string, Split> owner;
    for (const Corpus* c : corpora) {
        for (const auto& name : c->relation_names) {
            auto [it, inserted] = owner.emplace(name, c->split);
            if (!inserted) {
                throw DataError("relation " + name + " appears in both " +
                                std::string(split_name(it->second)) + " and " +
                                std::string(split_name(c->split)) + " splits");
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Vocabulary and embeddings

std::string normalize_token(std::string_view token) {
    std::string out(token);
    for (auto& ch : out) {
        ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
    return out;
}

void Vocabulary::add(std::string_view token) {
    auto key = normalize_token(token);
    if (index_.emplace(key, tokens_.size()).second) {
        tokens_.push_back(std::move(key));
    }
}

void Vocabulary::add_corpus(const Corpus& corpus) {
    for (const auto& bucket : corpus.by_label) {
        for (const auto& inst : bucket) {
            for (const auto& tok : inst.tokens) {
                add(tok);
            }
        }
    }
}

bool Vocabulary::contains(std::string_view token) const {
    return index_.count(normalize_token(token)) > 0;
}

EmbeddingTable::EmbeddingTable(std::size_t dim, std::vector<std::string> tokens,
                               std::vector<std::vector<double>> vectors)
    : dim_(dim), tokens_(std::move(tokens)) {
    if (dim_ == 0) {
        throw ConfigError("embedding dimension must be positive");
    }
    if (tokens_.size() != vectors.size()) {
        throw DataError("embedding table: token and vector counts differ");
    }
    std::vector<double> flat(dim_, 0.0);  // UNK
    flat.reserve((tokens_.size() + 1) * dim_);
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (vectors[i].size() != dim_) {
            throw DataError("embedding for '" + tokens_[i] + "' has " +
                            std::to_string(vectors[i].size()) + " values, expected " +
                            std::to_string(dim_));
        }
        tokens_[i] = normalize_token(tokens_[i]);
        if (!rows_.emplace(tokens_[i], i + 1).second) {
            throw DataError("duplicate embedding for '" + tokens_[i] + "'");
        }
        flat.insert(flat.end(), vectors[i].begin(), vectors[i].end());
    }
    matrix_ = Tensor({tokens_.size() + 1, dim_}, std::move(flat), false);
}

std::size_t EmbeddingTable::lookup(std::string_view token) const {
    auto it = rows_.find(normalize_token(token));
    return it == rows_.end() ? unk : it->second;
}

std::span<const double> EmbeddingTable::vector(std::string_view token) const {
    return matrix_.values().subspan(lookup(token) * dim_, dim_);
}

EmbeddingTable load_embeddings(const std::filesystem::path& path, const Vocabulary* vocab,
                               std::size_t dim) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open embedding file " + path.string());
    }
    std::vector<std::string> tokens;
    std::vector<std::vector<double>> vectors;
    std::set<std::string> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::istringstream fields(line);
        std::string token;
        if (!(fields >> token)) {
            continue;  // blank line
        }
        std::vector<double> values;
        std::string field;
        while (fields >> field) {
            double v = 0.0;
            auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
            if (ec != std::errc() || ptr != field.data() + field.size()) {
                throw DataError(path.string() + ":" + std::to_string(line_no) +
                                ": not a number: '" + field + "'");
            }
            values.push_back(v);
        }
        if (values.size() != dim) {
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                            std::to_string(dim) + " values after the token, found " +
                            std::to_string(values.size()));
        }
        auto key = normalize_token(token);
        if (vocab && !vocab->contains(key)) {
            continue;
        }
        // First occurrence wins when casing variants collide.
        if (!seen.insert(key).second) {
            continue;
        }
        tokens.push_back(std::move(key));
        vectors.push_back(std::move(values));
    }
    return EmbeddingTable(dim, std::move(tokens), std::move(vectors));
}

void save_embeddings(const EmbeddingTable& table, const std::filesystem::path& path) {
    std::FILE* f = std::fopen(path.string().c_str(), "w");
    if (!f) {
        throw DataError("cannot write embedding file " + path.string());
    }
    auto values = table.matrix().values();
    for (std::size_t i = 0; i < table.tokens().size(); ++i) {
        std::fputs(table.tokens()[i].c_str(), f);
        for (std::size_t j = 0; j < table.dim(); ++j) {
            std::fprintf(f, " %.17g", values[(i + 1) * table.dim() + j]);
        }
        std::fputc('\n', f);
    }
    std::fclose(f);
}

// ---------------------------------------------------------------------------
// Position features

std::size_t relative_position_index(std::size_t t, std::size_t p, std::size_t max_distance) {
    const auto d = static_cast<long long>(t) - static_cast<long long>(p);
    const auto m = static_cast<long long>(max_distance);
    return static_cast<std::size_t>(std::clamp(d, -m, m) + m);
}

PositionIndices position_indices(std::size_t length, std::size_t head_pos, std::size_t tail_pos,
                                 std::size_t max_distance) {
    if (head_pos >= length || tail_pos >= length) {
        throw ContractError("entity position outside sentence of length " +
                            std::to_string(length));
    }
    PositionIndices out;
    out.head.reserve(length);
    out.tail.reserve(length);
    for (std::size_t t = 0; t < length; ++t) {
        out.head.push_back(relative_position_index(t, head_pos, max_distance));
        out.tail.push_back(relative_position_index(t, tail_pos, max_distance));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Episode sampling

namespace {

// First `count` entries of `items` become a uniform sample without replacement.
template <class T>
void partial_shuffle(std::vector<T>& items, std::size_t count, std::mt19937_64& rng) {
    for (std::size_t i = 0; i < count; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, items.size() - 1);
        std::swap(items[i], items[pick(rng)]);
    }
}

}  // namespace

Episode sample_episode(const Corpus& corpus, std::size_t n_way, std::size_t k_shot,
                       std::size_t queries, std::mt19937_64& rng) {
    if (n_way == 0 || k_shot == 0) {
        throw ContractError("episodes need at least one way and one shot");
    }
    if (corpus.label_count() < n_way) {
        throw DataError("cannot sample " + std::to_string(n_way) + "-way episodes from " +
                        std::to_string(corpus.label_count()) + " relations");
    }
    const std::size_t per_class_queries = (queries + n_way - 1) / n_way;
    for (std::size_t l = 0; l < corpus.label_count(); ++l) {
        if (corpus.by_label[l].size() < k_shot + per_class_queries) {
            throw DataError("relation " + corpus.relation_names[l] + " has " +
                            std::to_string(corpus.by_label[l].size()) + " instances, needs " +
                            std::to_string(k_shot + per_class_queries));
        }
    }

    std::vector<std::size_t> labels(corpus.label_count());
    std::iota(labels.begin(), labels.end(), 0);
    partial_shuffle(labels, n_way, rng);
    labels.resize(n_way);

    Episode ep;
    ep.labels = labels;
    std::vector<std::pair<std::size_t, std::size_t>> pool;  // (way, instance index)
    for (std::size_t way = 0; way < n_way; ++way) {
        const auto& bucket = corpus.by_label[labels[way]];
        std::vector<std::size_t> idx(bucket.size());
        std::iota(idx.begin(), idx.end(), 0);
        partial_shuffle(idx, k_shot, rng);
        auto& shots = ep.support.emplace_back();
        for (std::size_t k = 0; k < k_shot; ++k) {
            shots.push_back(bucket[idx[k]]);
        }
        for (std::size_t k = k_shot; k < idx.size(); ++k) {
            pool.emplace_back(way, idx[k]);
        }
    }
    partial_shuffle(pool, queries, rng);
    for (std::size_t j = 0; j < queries; ++j) {
        const auto [way, i] = pool[j];
        ep.queries.push_back({corpus.by_label[labels[way]][i], way});
    }
    return ep;
}

}  // namespace mlman
