#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "amr/cascade.hpp"
#include "amr/evaluation.hpp"
#include "amr/synthgen.hpp"
#include "amr/training.hpp"
#include "json.hpp"

namespace amr {

/// Exit codes shared by every subcommand.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Defaults < JSON config file < command-line flags. The file holds optional
/// "seed", "generate", "train" and "pipeline" objects.
struct CliConfig {
  std::uint64_t seed = 0;
  GenConfig generate;
  TrainConfig train;
  PipelineConfig pipeline;
};

/// Reads a config file; a missing section leaves the defaults in place.
CliConfig load_cli_config(const std::filesystem::path& file, ModelKind model = ModelKind::detector);

/// Image files (png, jpg, jpeg, bmp) directly inside `dir`, sorted by name.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

/// Runs the cascade over images with `workers` model instances. Records are
/// written to `out` in input order by a single writer.
void infer_images(const std::vector<std::filesystem::path>& images, const std::filesystem::path& model_dir,
                  const PipelineConfig& cfg, int workers, std::ostream& out);

/// Sweep rates as fractions from a comma list of percentages ("0,5,10").
std::vector<double> parse_sweep(const std::string& text);

/// One-row table: header "0%,5%,..." and recognition rates on the next line.
std::string sweep_row_csv(const std::vector<RejectionPoint>& curve);

/// Entry point of the command-line tool; returns the process exit code.
int run_cli(int argc, char** argv);

}  // namespace amr
