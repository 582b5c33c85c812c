#include "mlman/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mlman/errors.hpp"

namespace mlman {

std::string to_string(LossForm form) { return form == LossForm::nll ? "nll" : "as_written"; }

LossForm parse_loss_form(const std::string& text) {
    if (text == "as_written") return LossForm::as_written;
    if (text == "nll") return LossForm::nll;
    throw ConfigError("unknown loss_form '" + text + "' (expected as_written or nll)");
}

// ---------------------------------------------------------------------------
// Ablation presets

namespace {

AblationSpec preset(int id, bool incon, bool tied, InstanceAggregation agg, LocalMatching lm,
                    ClassMetric cm, std::string label) {
    AblationSpec s;
    s.id = id;
    s.use_incon = incon;
    s.variant = {tied, agg, lm, cm};
    s.label = std::move(label);
    return s;
}

}  // namespace

const std::vector<AblationSpec>& ablation_table() {
    using IA = InstanceAggregation;
    using LM = LocalMatching;
    using CM = ClassMetric;
    static const std::vector<AblationSpec> table{
        preset(1, true, true, IA::attention, LM::full, CM::mlp, "MLMAN"),
        preset(2, false, true, IA::attention, LM::full, CM::mlp, "-J_incon"),
        preset(3, true, false, IA::attention, LM::full, CM::mlp, "IM(shared->untied)"),
        preset(4, true, true, IA::max, LM::full, CM::mlp, "IA(att.->max.)"),
        preset(5, true, true, IA::mean, LM::full, CM::mlp, "IA(att.->ave.)"),
        preset(6, false, true, IA::mean, LM::full, CM::mlp, "IA(att.->ave.) -J_incon"),
        preset(7, false, true, IA::mean, LM::no_concat, CM::mlp, "LM(-concatenation)"),
        preset(8, false, true, IA::mean, LM::full, CM::euclidean, "CM(MLP->ED)"),
        preset(9, false, true, IA::mean, LM::no_local_match, CM::mlp, "-LM"),
        preset(10, false, true, IA::mean, LM::no_local_match, CM::euclidean, "-LM CM(MLP->ED)"),
    };
    return table;
}

const AblationSpec& ablation(int id) {
    if (id < 1 || id > 10) {
        throw ConfigError("ablation id must be in 1..10, got " + std::to_string(id));
    }
    return ablation_table()[static_cast<std::size_t>(id - 1)];
}

// ---------------------------------------------------------------------------
// Keys

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::size_t to_size(const std::string& key, const std::string& v) {
    std::size_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
        throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    }
    return out;
}

double to_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
    return out;
}

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

ConfigKey size_key(std::string name, std::string help, std::size_t TrainConfig::*field) {
    return {name, std::move(help),
            [field](const TrainConfig& c) { return std::to_string(c.*field); },
            [field, name](TrainConfig& c, const std::string& v) { c.*field = to_size(name, v); }};
}

ConfigKey dim_key(std::string name, std::string help, std::size_t ModelDims::*field) {
    return {name, std::move(help),
            [field](const TrainConfig& c) { return std::to_string(c.dims.*field); },
            [field, name](TrainConfig& c, const std::string& v) {
                c.dims.*field = to_size(name, v);
            }};
}

ConfigKey double_key(std::string name, std::string help, double TrainConfig::*field) {
    return {name, std::move(help), [field](const TrainConfig& c) { return fmt_double(c.*field); },
            [field, name](TrainConfig& c, const std::string& v) {
                c.*field = to_double(name, v);
            }};
}

ConfigKey string_key(std::string name, std::string help, std::string TrainConfig::*field) {
    return {name, std::move(help), [field](const TrainConfig& c) { return c.*field; },
            [field](TrainConfig& c, const std::string& v) { c.*field = v; }};
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys{
        string_key("train_path", "training corpus (JSON)", &TrainConfig::train_path),
        string_key("dev_path", "validation corpus for checkpoint selection",
                   &TrainConfig::dev_path),
        string_key("test_path", "corpus for the final evaluation", &TrainConfig::test_path),
        string_key("embeddings_path", "pretrained word vectors", &TrainConfig::embeddings_path),
        string_key("output_dir", "directory for checkpoints, metrics and reports",
                   &TrainConfig::output_dir),
        dim_key("word_dim", "word vector width d_w", &ModelDims::word_dim),
        dim_key("position_dim", "position embedding width d_p", &ModelDims::position_dim),
        dim_key("max_distance", "relative distance clip", &ModelDims::max_distance),
        dim_key("window", "CNN window (odd)", &ModelDims::window),
        dim_key("filters", "CNN filters d_c", &ModelDims::filters),
        dim_key("hidden", "LSTM hidden size d_h", &ModelDims::hidden),
        size_key("n_train", "ways per training episode", &TrainConfig::n_train),
        size_key("n_eval", "ways per evaluation episode", &TrainConfig::n_eval),
        size_key("k_shot", "support instances per class", &TrainConfig::k_shot),
        size_key("queries", "queries per training episode (R)", &TrainConfig::queries),
        double_key("lr", "initial SGD learning rate", &TrainConfig::lr),
        double_key("decay", "learning-rate decay factor", &TrainConfig::decay),
        size_key("decay_every", "steps between decays", &TrainConfig::decay_every),
        double_key("lambda", "weight of the inconsistency term", &TrainConfig::lambda),
        double_key("dropout", "dropout rate before CNN and LSTM", &TrainConfig::dropout),
        size_key("max_steps", "training steps", &TrainConfig::max_steps),
        size_key("eval_every", "steps between validation passes (0 = never)",
                 &TrainConfig::eval_every),
        size_key("eval_episodes", "episodes per validation pass", &TrainConfig::eval_episodes),
        size_key("test_episodes", "episodes in the final evaluation",
                 &TrainConfig::test_episodes),
        size_key("log_every", "steps between metric records", &TrainConfig::log_every),
        size_key("repetitions", "independent training runs", &TrainConfig::repetitions),
        {"seed", "base random seed",
         [](const TrainConfig& c) { return std::to_string(c.seed); },
         [](TrainConfig& c, const std::string& v) { c.seed = to_size("seed", v); }},
        {"loss_form", "as_written (-mean P) or nll (-mean log P)",
         [](const TrainConfig& c) { return to_string(c.loss_form); },
         [](TrainConfig& c, const std::string& v) { c.loss_form = parse_loss_form(v); }},
        {"ablation", "ablation preset 1..10",
         [](const TrainConfig& c) { return std::to_string(c.ablation_id); },
         [](TrainConfig& c, const std::string& v) {
             auto id = to_size("ablation", v);
             ablation(static_cast<int>(std::min<std::size_t>(id, 1000)));
             c.ablation_id = static_cast<int>(id);
         }},
    };
    return keys;
}

void set_config_value(TrainConfig& config, const std::string& key, const std::string& value) {
    for (const auto& k : config_keys()) {
        if (k.name == key) {
            k.set(config, value);
            return;
        }
    }
    throw ConfigError("unknown config key '" + key + "'");
}

void TrainConfig::validate() const {
    ablation(ablation_id);
    if (dims.window % 2 == 0) {
        throw ConfigError("window must be odd");
    }
    for (auto [name, v] : {std::pair{"word_dim", dims.word_dim}, {"position_dim", dims.position_dim},
                           {"filters", dims.filters}, {"hidden", dims.hidden},
                           {"n_train", n_train}, {"n_eval", n_eval}, {"k_shot", k_shot},
                           {"queries", queries}, {"decay_every", decay_every},
                           {"repetitions", repetitions}, {"log_every", log_every}}) {
        if (v == 0) {
            throw ConfigError(std::string(name) + " must be positive");
        }
    }
    if (!(lr > 0.0) || !(decay > 0.0) || lambda < 0.0) {
        throw ConfigError("lr and decay must be positive and lambda non-negative");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) {
        throw ConfigError("dropout must lie in [0, 1)");
    }
}

TrainConfig parse_config(const std::string& text, TrainConfig base) {
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos) {
            line.resize(hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        }
        set_config_value(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return base;
}

TrainConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config file " + path.string());
    }
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

std::string serialize_config(const TrainConfig& config) {
    std::string out;
    for (const auto& k : config_keys()) {
        out += k.name + " = " + k.get(config) + "\n";
    }
    return out;
}

}  // namespace mlman
