#include "mlman/data.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "mlman/errors.hpp"

using namespace mlman;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
    auto dir = fs::temp_directory_path() / "mlman_data_test";
    fs::create_directories(dir);
    return dir / name;
}

json record(std::vector<std::string> tokens, std::vector<int> head, std::vector<int> tail) {
    return json{{"tokens", tokens},
                {"h", json::array({"h", "Q1", json::array({head})})},
                {"t", json::array({"t", "Q2", json::array({tail})})}};
}

// `labels` relations with `per_label` uniquely tokenized instances each.
Corpus synthetic_corpus(std::size_t labels, std::size_t per_label) {
    json doc;
    for (std::size_t l = 0; l < labels; ++l) {
        json list = json::array();
        for (std::size_t i = 0; i < per_label; ++i) {
            list.push_back(record({"id" + std::to_string(l) + "_" + std::to_string(i), "x", "y"},
                                  {0}, {2}));
        }
        doc["R" + std::to_string(100 + l)] = list;
    }
    return parse_corpus(doc, Split::train);
}

}  // namespace

TEST(LoadCorpus, TwoRelationToyFile) {
    json doc;
    for (const char* rel : {"P1", "P2"}) {
        doc[rel] = json::array({record({"a", "b", "c"}, {0}, {2}),
                                record({"d", "e", "f", "g"}, {1, 2}, {3}),
                                record({"h", "i"}, {1}, {0})});
    }
    auto path = temp_file("toy.json");
    std::ofstream(path) << doc.dump();
    auto corpus = load_corpus(path, Split::train);
    EXPECT_EQ(corpus.label_count(), 2u);
    EXPECT_EQ(corpus.by_label[0].size(), 3u);
    EXPECT_EQ(corpus.by_label[1].size(), 3u);
    EXPECT_EQ(corpus.relation_names[1], "P2");
    // Multi-token span anchors at its first token.
    EXPECT_EQ(corpus.by_label[0][1].head_pos, 1u);
    EXPECT_EQ(corpus.by_label[1][2].tail_pos, 0u);
    EXPECT_EQ(corpus.by_label[1][2].relation, 1u);
}

TEST(LoadCorpus, SpanOutOfRangeIsValidationError) {
    json doc;
    doc["P1"] = json::array({record({"a", "b", "c", "d", "e"}, {4, 5}, {0})});
    try {
        parse_corpus(doc, Split::train);
        FAIL();
    } catch (const DataError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("P1"), std::string::npos);
        EXPECT_NE(msg.find("instance 0"), std::string::npos);
    }
}

TEST(LoadCorpus, MalformedRecordNamesRelationAndIndex) {
    json doc;
    doc["P9"] = json::array({record({"a", "b"}, {0}, {1}), json{{"tokens", {"a"}}}});
    try {
        parse_corpus(doc, Split::dev);
        FAIL();
    } catch (const DataError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("relation P9 instance 1"), std::string::npos) << msg;
    }
}

TEST(LoadCorpus, OverlappingSpansAreFlagged) {
    json doc;
    doc["P1"] = json::array({record({"a", "b", "c"}, {0, 1}, {1, 2})});
    auto c = parse_corpus(doc, Split::train);
    EXPECT_TRUE(c.by_label[0][0].overlapping);
}

TEST(LoadCorpus, JsonRoundTrip) {
    auto c = synthetic_corpus(3, 4);
    auto back = parse_corpus(corpus_to_json(c), Split::train);
    ASSERT_EQ(back.label_count(), 3u);
    EXPECT_EQ(back.by_label[2][3].tokens, c.by_label[2][3].tokens);
    EXPECT_EQ(back.by_label[2][3].tail_pos, 2u);
}

TEST(LoadCorpus, SplitsMustBeDisjoint) {
    auto a = synthetic_corpus(2, 1);
    auto b = synthetic_corpus(3, 1);
    b.split = Split::dev;
    const Corpus* both[] = {&a, &b};
    EXPECT_THROW(check_disjoint(both), DataError);
    b.relation_names = {"X1", "X2", "X3"};
    EXPECT_NO_THROW(check_disjoint(both));
}

// ---------------------------------------------------------------------------

TEST(Embeddings, RoundTripAndUnknownIsZero) {
    auto path = temp_file("vec3.txt");
    std::ofstream(path) << "the 0.5 -1.25 3\nlondon 1e-3 2 -0\nof 7 8 9\n";
    auto table = load_embeddings(path, nullptr, 3);
    EXPECT_EQ(table.size(), 4u);  // UNK + 3
    auto v = table.vector("of");
    EXPECT_EQ(v[0], 7.0);
    EXPECT_EQ(v[2], 9.0);
    EXPECT_EQ(table.vector("the")[1], -1.25);
    for (double x : table.vector("absent")) {
        EXPECT_EQ(x, 0.0);
    }
    EXPECT_EQ(table.lookup("absent"), EmbeddingTable::unk);
    EXPECT_FALSE(table.matrix().requires_grad());

    auto copy = temp_file("vec3_copy.txt");
    save_embeddings(table, copy);
    auto again = load_embeddings(copy, nullptr, 3);
    for (std::size_t i = 0; i < table.matrix().size(); ++i) {
        EXPECT_EQ(again.matrix().values()[i], table.matrix().values()[i]);
    }
}

TEST(Embeddings, LookupLowercasesTokens) {
    auto path = temp_file("case.txt");
    std::ofstream(path) << "london 1 2\n";
    auto table = load_embeddings(path, nullptr, 2);
    EXPECT_EQ(table.lookup("London"), table.lookup("london"));
    EXPECT_NE(table.lookup("LONDON"), EmbeddingTable::unk);
}

TEST(Embeddings, WrongWidthReportsLine) {
    auto path = temp_file("bad.txt");
    std::ofstream(path) << "a 1 2 3\nb 1 2\n";
    try {
        load_embeddings(path, nullptr, 3);
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
    }
}

TEST(Embeddings, VocabularyFiltersRows) {
    auto path = temp_file("filter.txt");
    std::ofstream(path) << "a 1\nb 2\nc 3\n";
    Vocabulary vocab;
    vocab.add("B");
    auto table = load_embeddings(path, &vocab, 1);
    EXPECT_EQ(table.size(), 2u);
    EXPECT_EQ(table.vector("b")[0], 2.0);
    EXPECT_EQ(table.lookup("a"), EmbeddingTable::unk);
}

// ---------------------------------------------------------------------------

TEST(PositionIndices, AnchorAndClipping) {
    EXPECT_EQ(relative_position_index(7, 7, 40), 40u);
    EXPECT_EQ(relative_position_index(100, 0, 40), 80u);
    EXPECT_EQ(relative_position_index(0, 41, 40), 0u);
    EXPECT_EQ(relative_position_index(0, 40, 40), 0u);
    EXPECT_EQ(relative_position_index(3, 1, 40), 42u);
}

TEST(PositionIndices, ImageWithinWindow) {
    for (std::size_t T : {1u, 5u, 120u}) {
        for (std::size_t p = 0; p < T; p += 7) {
            auto pos = position_indices(T, p, T - 1);
            for (std::size_t t = 0; t < T; ++t) {
                EXPECT_LE(pos.head[t], 80u);
                EXPECT_EQ(pos.head[t] == 40u, t == p);
                EXPECT_EQ(pos.tail[t] == 40u, t == T - 1);
            }
        }
    }
}

// ---------------------------------------------------------------------------

TEST(SampleEpisode, ContractHolds) {
    auto corpus = synthetic_corpus(20, 10);
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        auto ep = sample_episode(corpus, 5, 3, 5, rng);
        ASSERT_EQ(ep.ways(), 5u);
        ASSERT_EQ(std::set<std::size_t>(ep.labels.begin(), ep.labels.end()).size(), 5u);
        std::set<std::string> support_ids;
        for (std::size_t w = 0; w < 5; ++w) {
            ASSERT_EQ(ep.support[w].size(), 3u);
            for (const auto& s : ep.support[w]) {
                EXPECT_EQ(s.relation, ep.labels[w]);
                support_ids.insert(s.tokens[0]);
            }
        }
        EXPECT_EQ(support_ids.size(), 15u);
        ASSERT_EQ(ep.queries.size(), 5u);
        std::set<std::string> query_ids;
        for (const auto& q : ep.queries) {
            ASSERT_LT(q.label, 5u);
            EXPECT_EQ(q.instance.relation, ep.labels[q.label]);
            EXPECT_EQ(support_ids.count(q.instance.tokens[0]), 0u);
            query_ids.insert(q.instance.tokens[0]);
        }
        EXPECT_EQ(query_ids.size(), 5u);
    }
}

TEST(SampleEpisode, OneShotSupportsNeverQueried) {
    auto corpus = synthetic_corpus(8, 3);
    std::mt19937_64 rng(11);
    auto ep = sample_episode(corpus, 5, 1, 5, rng);
    for (const auto& q : ep.queries) {
        for (const auto& shots : ep.support) {
            EXPECT_NE(q.instance.tokens, shots[0].tokens);
        }
    }
}

TEST(SampleEpisode, DeterministicGivenSeed) {
    auto corpus = synthetic_corpus(20, 10);
    std::mt19937_64 a(99), b(99);
    auto e1 = sample_episode(corpus, 5, 2, 4, a);
    auto e2 = sample_episode(corpus, 5, 2, 4, b);
    EXPECT_EQ(e1.labels, e2.labels);
    for (std::size_t j = 0; j < 4; ++j) {
        EXPECT_EQ(e1.queries[j].instance.tokens, e2.queries[j].instance.tokens);
    }
}

TEST(SampleEpisode, ClassesSampledUniformly) {
    auto corpus = synthetic_corpus(20, 4);
    std::mt19937_64 rng(2024);
    std::vector<std::size_t> hits(20, 0);
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
        auto ep = sample_episode(corpus, 5, 1, 1, rng);
        for (auto l : ep.labels) {
            ++hits[l];
        }
    }
    for (auto h : hits) {
        EXPECT_NEAR(static_cast<double>(h) / draws, 0.25, 0.02);
    }
}

TEST(SampleEpisode, InsufficientDataIsError) {
    auto corpus = synthetic_corpus(4, 2);
    std::mt19937_64 rng(1);
    EXPECT_THROW(sample_episode(corpus, 5, 1, 1, rng), DataError);
    EXPECT_THROW(sample_episode(corpus, 2, 2, 1, rng), DataError);
    EXPECT_NO_THROW(sample_episode(corpus, 2, 1, 2, rng));
}
