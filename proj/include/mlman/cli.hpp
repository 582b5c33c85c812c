#pragma once

// Command-line front end: train / eval / ablate / distance / heatmap / synth.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "mlman/config.hpp"
#include "mlman/data.hpp"
#include "mlman/model.hpp"

namespace mlman {

// Process exit statuses.
enum ExitCode : int {
    exit_ok = 0,
    exit_usage = 1,       // unknown command or malformed flags
    exit_config = 2,      // invalid configuration values or files
    exit_data = 3,        // unreadable or malformed corpora / embeddings
    exit_checkpoint = 4,  // unreadable or mismatched checkpoints
    exit_runtime = 5,     // non-finite training, violated contracts
};

// Query-by-support attention for one support instance; each column is a
// distribution over query tokens.
struct HeatmapRecord {
    std::vector<std::string> query_tokens;
    std::vector<std::string> support_tokens;
    std::vector<std::vector<double>> weights;  // query rows x support columns
};

HeatmapRecord compute_heatmap(const Model& model, const MatchVariant& variant,
                              const EmbeddingTable& words, const Instance& query,
                              const Instance& support);
// First row: support tokens; first column: query tokens.
std::string heatmap_to_tsv(const HeatmapRecord& heatmap);
HeatmapRecord parse_heatmap_tsv(const std::string& text);
// Binary greyscale PGM, one cell per pixel block, darker = larger weight.
void write_heatmap_pgm(const HeatmapRecord& heatmap, const std::filesystem::path& path,
                       std::size_t cell = 16);

// Writes the synthetic task plus a matching config into `dir`.
void write_synthetic_task(const std::filesystem::path& dir, std::uint64_t seed);

// Entry point shared by the executable and the tests.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mlman
