#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "bayeslayers/bayes.hpp"
#include "bayeslayers/datasets.hpp"
#include "bayeslayers/network.hpp"
#include "bayeslayers/scoring.hpp"
#include "bayeslayers/training.hpp"

namespace bayeslayers::app {

struct DatasetSpec {
  enum class Source { blobs, shapes, manifest, idx };
  Source source = Source::blobs;
  BlobsParams blobs;
  ShapesParams shapes;
  std::filesystem::path manifest;
  std::filesystem::path idx_images;
  std::filesystem::path idx_labels;
  std::set<std::size_t> id_labels;
};

// Everything a command needs. Built from one JSON document; unknown keys and
// out-of-range values raise ConfigError.
struct RunConfig {
  DatasetSpec dataset;
  Architecture architecture = Architecture::micro_mlp;
  TrainConfig train;
  SelectionPolicy policy;
  double alpha = kDefaultAlpha;
  double epsilon_quantile = kDefaultEpsilonQuantile;
  std::size_t mc_samples = 30;
  std::optional<std::size_t> max_rejection_attempts;
  ScoringConfig scoring;
  double tpr_target = 0.95;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::filesystem::path out_dir = ".";
  std::optional<std::filesystem::path> model_path;

  std::filesystem::path resolved_model_path() const { return model_path.value_or(out_dir / "model.blyr"); }
  void validate() const;
};

// Relative paths inside the document resolve against base_dir.
RunConfig parse_run_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = ".");
RunConfig load_run_config(const std::filesystem::path& path);

// The fields that define an experiment (everything except seed, threads and
// output locations), as echoed into reports.
nlohmann::json config_echo(const RunConfig& config);

BenchmarkPairing load_dataset(const DatasetSpec& spec);

}  // namespace bayeslayers::app
