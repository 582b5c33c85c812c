#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mlman/matching.hpp"
#include "mlman/model.hpp"

namespace mlman {

enum class LossForm { as_written, nll };

std::string to_string(LossForm form);
LossForm parse_loss_form(const std::string& text);

// One row of the ablation table.
struct AblationSpec {
    int id = 1;
    bool use_incon = true;  // lambda on/off
    MatchVariant variant;
    std::string label;
};

// Presets 1..10; throws ConfigError outside that range.
const AblationSpec& ablation(int id);
const std::vector<AblationSpec>& ablation_table();

struct TrainConfig {
    // Data.
    std::string train_path;
    std::string dev_path;   // optional; enables best-on-validation selection
    std::string test_path;  // final evaluation; falls back to dev
    std::string embeddings_path;
    std::string output_dir = "run";

    ModelDims dims;

    std::size_t n_train = 20;
    std::size_t n_eval = 5;
    std::size_t k_shot = 1;
    std::size_t queries = 5;
    double lr = 0.1;
    double decay = 0.1;
    std::size_t decay_every = 20000;
    double lambda = 1.0;
    double dropout = 0.2;
    std::size_t max_steps = 50000;
    std::size_t eval_every = 1000;      // 0 disables validation
    std::size_t eval_episodes = 1000;   // per validation pass
    std::size_t test_episodes = 20000;  // final single-query episodes
    std::size_t log_every = 1;
    std::size_t repetitions = 1;
    std::uint64_t seed = 1;
    LossForm loss_form = LossForm::as_written;
    int ablation_id = 1;

    const AblationSpec& preset() const { return ablation(ablation_id); }
    MatchVariant variant() const { return preset().variant; }
    double effective_lambda() const { return preset().use_incon ? lambda : 0.0; }

    // Throws ConfigError on inconsistent values.
    void validate() const;
};

// Accessors for every flat config key, in serialization order.
struct ConfigKey {
    std::string name;
    std::string help;
    std::function<std::string(const TrainConfig&)> get;
    std::function<void(TrainConfig&, const std::string&)> set;
};

const std::vector<ConfigKey>& config_keys();
void set_config_value(TrainConfig& config, const std::string& key, const std::string& value);

// "key = value" lines; '#' starts a comment.
TrainConfig parse_config(const std::string& text, TrainConfig base = {});
TrainConfig load_config(const std::filesystem::path& path);
std::string serialize_config(const TrainConfig& config);

}  // namespace mlman
