#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bayeslayers/metrics.hpp"
#include "bayeslayers/scoring.hpp"
#include "run_config.hpp"

namespace bayeslayers::app {

// Process exit codes.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitIo = 3,
  kExitDivergence = 4,
  kExitSamplerExhausted = 5,
};

// Maps the exception currently being handled to an exit code.
int exit_code_for_current_exception();

// Writes the dataset files and manifest.json into config.out_dir.
nlohmann::json cmd_gen_data(const RunConfig& config);

struct TrainOutcome {
  Model model;
  std::vector<EpochStats> curve;
  double train_accuracy = 0.0;
  nlohmann::json summary;
};

// Trains the configured preset on id_train and writes the model
// (resolved_model_path), loss_curve.csv and train.json.
TrainOutcome cmd_train(const RunConfig& config);

struct EvalOutcome {
  nlohmann::json report;
  std::vector<OodScoreRecord> records;  // id_test first, then ood_test
  ScoreSet scores;
  std::vector<RocPoint> roc;
  std::vector<std::string> selected_layers;
};

// Monte-Carlo evaluation of the model at resolved_model_path. Writes
// report.json, roc.csv and scores.csv into config.out_dir.
EvalOutcome cmd_eval(const RunConfig& config);

// Threshold from id_test only; writes calibration.json.
nlohmann::json cmd_calibrate(const RunConfig& config);

struct AblationRow {
  PolicyKind policy = PolicyKind::none;
  std::uint64_t seed = 0;
  EvalOutcome eval;
};

// cmd_eval once per policy in kAllPolicies order, policy i using seed
// config.seed + i, each into out_dir/ablation/<policy>/. Writes
// ablation.csv and ablation.json into out_dir.
std::vector<AblationRow> cmd_ablate_layers(const RunConfig& config);

// Mean and sample standard deviation of every metric across reports that
// share one configuration. Writes summary.json and summary.csv into out_dir
// and returns the summary.
nlohmann::json cmd_report(const std::vector<std::filesystem::path>& reports, const std::filesystem::path& out_dir);

// Human-readable rendering of a cmd_report summary.
std::string format_summary(const nlohmann::json& summary);

// Entry point used by the bayeslayers binary.
int run_cli(int argc, char** argv);

}  // namespace bayeslayers::app
