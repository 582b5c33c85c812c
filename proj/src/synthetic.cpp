#include "mlman/synthetic.hpp"

#include <random>

#include "mlman/errors.hpp"

namespace mlman {

namespace {

Corpus make_split(const SyntheticSpec& spec, Split split, std::size_t first_trigger,
                  std::size_t relations, std::mt19937_64& rng) {
    auto pick = [&](std::size_t n) {
        return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    };
    auto filler = [&] { return "w" + std::to_string(pick(spec.filler_words)); };
    auto entity = [&] { return "ent" + std::to_string(pick(spec.entity_words)); };

    Corpus c;
    c.split = split;
    for (std::size_t r = 0; r < relations; ++r) {
        const std::string trigger = "rel" + std::to_string(first_trigger + r);
        c.relation_names.push_back("R" + std::to_string(first_trigger + r));
        std::vector<Instance> instances;
        for (std::size_t i = 0; i < spec.instances_per_relation; ++i) {
            const std::size_t length =
                spec.min_length +
                std::uniform_int_distribution<std::size_t>(0, spec.max_length - spec.min_length)(
                    rng);
            // head [gap] trigger [gap] tail, with gaps of 0..1 fillers.
            const std::size_t gap1 = pick(2);
            const std::size_t gap2 = pick(2);
            const std::size_t core = 3 + gap1 + gap2;
            const std::size_t start = pick(length - core + 1);
            Instance inst;
            inst.relation = r;
            inst.tokens.resize(length);
            for (auto& t : inst.tokens) t = filler();
            inst.head_pos = start;
            inst.tail_pos = start + core - 1;
            inst.tokens[inst.head_pos] = entity();
            inst.tokens[start + 1 + gap1] = trigger;
            inst.tokens[inst.tail_pos] = entity();
            instances.push_back(std::move(inst));
        }
        c.by_label.push_back(std::move(instances));
    }
    return c;
}

}  // namespace

SyntheticData make_synthetic(const SyntheticSpec& spec) {
    if (spec.min_length < 5 || spec.max_length < spec.min_length || spec.filler_words == 0 ||
        spec.entity_words == 0 || spec.word_dim == 0 || spec.instances_per_relation == 0) {
        throw ConfigError("synthetic spec: need min_length >= 5, max_length >= min_length and "
                          "positive sizes");
    }
    std::mt19937_64 rng(spec.seed);
    SyntheticData data;
    data.train = make_split(spec, Split::train, 0, spec.train_relations, rng);
    data.eval = make_split(spec, Split::test, spec.train_relations, spec.eval_relations, rng);

    std::vector<std::string> tokens;
    for (std::size_t i = 0; i < spec.train_relations + spec.eval_relations; ++i) {
        tokens.push_back("rel" + std::to_string(i));
    }
    for (std::size_t i = 0; i < spec.filler_words; ++i) tokens.push_back("w" + std::to_string(i));
    for (std::size_t i = 0; i < spec.entity_words; ++i) tokens.push_back("ent" + std::to_string(i));
    std::normal_distribution<double> normal(0.0, spec.vector_stddev);
    std::vector<std::vector<double>> vectors(tokens.size(), std::vector<double>(spec.word_dim));
    for (auto& v : vectors) {
        for (auto& x : v) x = normal(rng);
    }
    data.words = EmbeddingTable(spec.word_dim, std::move(tokens), std::move(vectors));
    return data;
}

void save_synthetic(const SyntheticData& data, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    save_corpus(data.train, dir / "train.json");
    save_corpus(data.eval, dir / "eval.json");
    save_embeddings(data.words, dir / "vectors.txt");
}

TrainConfig synthetic_config(const std::filesystem::path& dir) {
    TrainConfig c;
    c.train_path = (dir / "train.json").string();
    c.test_path = (dir / "eval.json").string();
    c.embeddings_path = (dir / "vectors.txt").string();
    c.output_dir = (dir / "run").string();
    c.dims.word_dim = SyntheticSpec{}.word_dim;
    c.dims.filters = 32;
    c.dims.hidden = 16;
    c.n_train = 20;
    c.n_eval = 5;
    c.k_shot = 1;
    c.queries = 5;
    c.lr = 0.1;
    c.decay_every = 1000;
    c.loss_form = LossForm::nll;
    c.max_steps = 2000;
    c.eval_every = 0;
    c.test_episodes = 1000;
    return c;
}

}  // namespace mlman
