#include "commands.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <iterator>
#include <sstream>

#include <CLI11.hpp>

#include "bayeslayers/bayes.hpp"
#include "bayeslayers/errors.hpp"
#include "bayeslayers/model_io.hpp"
#include "bayeslayers/parallel.hpp"

namespace bayeslayers::app {

using nlohmann::json;

namespace {

constexpr const char* kReportSchema = "bayeslayers.report/1";
constexpr const char* kSummarySchema = "bayeslayers.summary/1";

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

void require_directory(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("output directory '" + dir.string() + "' does not exist");
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

// Dataset provenance without its seed, so runs over re-seeded copies of one
// generator still count as the same configuration.
json unseeded(json provenance) {
  if (provenance.is_object()) provenance.erase("seed");
  return provenance;
}

Model load_model_checked(const std::filesystem::path& path) {
  try {
    return load_model(path);
  } catch (const FormatError& e) {
    throw FormatError("model '" + path.string() + "': " + e.what());
  }
}

Model& set_box_bias(Model& model, const SampleSet& train) {
  if (!model.has_box_head || train.empty() || !train.front().box) return model;
  Tensor mean({4});
  for (const auto& s : train) {
    for (std::size_t j = 0; j < 4; ++j) mean[j] += (*s.box)[j];
  }
  Tensor& bias = model.layers.back().params[1];
  for (std::size_t j = 0; j < 4; ++j) bias[model.class_count + j] = mean[j] / static_cast<double>(train.size());
  return model;
}

struct Evaluation {
  EvalOutcome outcome;
  double sampling_seconds = 0.0;
  double scoring_seconds = 0.0;
};

Evaluation evaluate(const RunConfig& config, const Model& model, const BenchmarkPairing& data) {
  if (data.id_test.empty() || data.ood_test.empty()) throw std::invalid_argument("evaluation needs ID and OOD test sets");
  if (data.class_count != model.class_count) {
    throw std::invalid_argument("model has " + std::to_string(model.class_count) + " classes but the dataset has " +
                                std::to_string(data.class_count));
  }
  Evaluation ev;
  EvalOutcome& out = ev.outcome;
  auto t0 = Clock::now();
  try {
    out.selected_layers = select_layers(model, config.policy);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const auto posteriors = build_posteriors(model, out.selected_layers, config.alpha, config.epsilon_quantile);
  const EnsembleConfig ensemble_config{config.mc_samples, config.seed, config.max_rejection_attempts};
  std::optional<MonteCarloEnsemble> ensemble;
  if (!posteriors.empty()) ensemble.emplace(model, posteriors, ensemble_config, config.threads);
  ev.sampling_seconds = seconds_since(t0);

  t0 = Clock::now();
  std::vector<const LabeledSample*> tests;
  for (const auto& s : data.id_test) tests.push_back(&s);
  for (const auto& s : data.ood_test) tests.push_back(&s);
  const std::size_t n_id = data.id_test.size();
  out.records.resize(tests.size());
  std::vector<double> true_label_prob(tests.size(), 1.0);
  parallel_for(tests.size(), config.threads, [&](std::size_t i) {
    const LabeledSample& s = *tests[i];
    std::vector<Prediction> samples;
    if (ensemble) {
      samples = ensemble->predict(s.input);
    } else {
      samples.assign(config.mc_samples, forward(model, s.input));
    }
    OodScoreRecord r = score_ensemble(samples, config.scoring);
    r.sample_id = i;
    r.is_id_truth = i < n_id;
    if (r.is_id_truth) true_label_prob[i] = predictive_mean(samples).mean_probabilities[s.label];
    out.records[i] = std::move(r);
  });
  ev.scoring_seconds = seconds_since(t0);

  std::vector<IdPrediction> id_predictions;
  std::vector<IdTruth> id_truths;
  std::vector<std::pair<Tensor, std::size_t>> nll_terms;
  std::size_t positive_std = 0;
  for (std::size_t i = 0; i < tests.size(); ++i) {
    const OodScoreRecord& r = out.records[i];
    if (r.score_std > 0.0) ++positive_std;
    if (r.is_id_truth) {
      out.scores.id_scores.push_back(r.score);
      id_predictions.push_back({r.predicted_class, r.predicted_box});
      id_truths.push_back({tests[i]->label, tests[i]->box});
      nll_terms.emplace_back(Tensor::vector({true_label_prob[i]}), 0);
    } else {
      out.scores.ood_scores.push_back(r.score);
    }
  }
  const double gamma = calibrate_gamma(out.scores.id_scores, config.tpr_target);
  const IdTaskMetrics task = id_task_metrics(id_predictions, id_truths);
  out.roc = roc_curve(out.scores);
  auto mean_of = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  std::size_t id_kept = 0, ood_flagged = 0;
  for (double s : out.scores.id_scores) id_kept += classify(s, gamma) == OodDecision::in_distribution;
  for (double s : out.scores.ood_scores) ood_flagged += classify(s, gamma) == OodDecision::out_of_distribution;

  json metrics = {
      {"fpr95", fpr_at_tpr(out.scores, config.tpr_target)},
      {"auroc", auroc(out.scores)},
      {"id_accuracy", task.accuracy},
      {"gamma", gamma},
      {"id_nll", nll(nll_terms)},
      {"id_mean_score", mean_of(out.scores.id_scores)},
      {"ood_mean_score", mean_of(out.scores.ood_scores)},
      {"id_retained_fraction", static_cast<double>(id_kept) / static_cast<double>(n_id)},
      {"ood_rejected_fraction", static_cast<double>(ood_flagged) / static_cast<double>(out.scores.ood_scores.size())},
      {"positive_score_std_fraction", static_cast<double>(positive_std) / static_cast<double>(tests.size())},
      {"n_id", n_id},
      {"n_ood", out.scores.ood_scores.size()},
  };
  metrics["box_iou_accuracy"] = task.detection_accuracy ? json(*task.detection_accuracy) : json(nullptr);

  json cfg = config_echo(config);
  cfg["selected_layers"] = out.selected_layers;
  cfg["dataset"] = unseeded(data.provenance);
  cfg["model_fnv1a64"] = hex64(fnv1a64(serialize_model(model)));
  out.report = {
      {"schema", kReportSchema},
      {"metrics", metrics},
      {"config", cfg},
      {"seed", config.seed},
      {"dataset_seed", data.provenance.value("seed", json(nullptr))},
  };
  return ev;
}

void write_eval_outputs(const EvalOutcome& out, const std::filesystem::path& dir) {
  write_text(dir / "report.json", out.report.dump(2) + "\n");
  std::ostringstream roc;
  write_roc_csv(roc, out.roc);
  write_text(dir / "roc.csv", roc.str());

  std::ostringstream csv;
  csv << "sample_id,is_id,energy_mean,score,score_std,predicted_class,box_x_min,box_y_min,box_x_max,box_y_max\n";
  for (const auto& r : out.records) {
    csv << r.sample_id << ',' << (r.is_id_truth ? 1 : 0) << ',' << fmt("%.17g", r.energy_mean) << ','
        << fmt("%.17g", r.score) << ',' << fmt("%.17g", r.score_std) << ',' << r.predicted_class;
    for (std::size_t j = 0; j < 4; ++j) csv << ',' << (r.predicted_box ? fmt("%.9g", (*r.predicted_box)[j]) : "");
    csv << '\n';
  }
  write_text(dir / "scores.csv", csv.str());
}

json timings_block(double total, const Evaluation& ev, std::size_t threads) {
  return {{"total_seconds", total},
          {"sampling_seconds", ev.sampling_seconds},
          {"scoring_seconds", ev.scoring_seconds},
          {"threads", threads}};
}

}  // namespace

int exit_code_for_current_exception() {
  try {
    throw;
  } catch (const ConfigError&) {
    return kExitConfig;
  } catch (const IoError&) {
    return kExitIo;
  } catch (const FormatError&) {
    return kExitIo;
  } catch (const DivergenceError&) {
    return kExitDivergence;
  } catch (const SamplerExhaustedError&) {
    return kExitSamplerExhausted;
  } catch (const std::invalid_argument&) {
    return kExitConfig;
  } catch (const std::out_of_range&) {
    return kExitConfig;
  } catch (...) {
    return kExitFailure;
  }
}

json cmd_gen_data(const RunConfig& config) {
  require_directory(config.out_dir);
  const BenchmarkPairing data = load_dataset(config.dataset);
  return write_pairing(data, config.out_dir);
}

TrainOutcome cmd_train(const RunConfig& config) {
  const auto t0 = Clock::now();
  require_directory(config.out_dir);
  const BenchmarkPairing data = load_dataset(config.dataset);
  if (data.id_train.empty()) throw std::invalid_argument("training split is empty");
  const LabeledSample& first = data.id_train.front();
  Model model = make_preset(config.architecture, first.input.shape(), data.class_count, first.box.has_value(),
                            config.seed);
  set_box_bias(model, data.id_train);

  TrainResult trained = train_sgd(std::move(model), data.id_train, config.train);
  round_to_storage_precision(trained.model);
  const auto model_path = config.resolved_model_path();
  save_model(trained.model, model_path);

  TrainOutcome out;
  out.curve = std::move(trained.curve);
  out.train_accuracy = classification_accuracy(trained.model, data.id_train);

  std::ostringstream csv;
  csv << "epoch,loss,accuracy\n";
  for (const auto& e : out.curve) csv << e.epoch << ',' << fmt("%.17g", e.loss) << ',' << fmt("%.17g", e.accuracy) << '\n';
  write_text(config.out_dir / "loss_curve.csv", csv.str());

  out.summary = {
      {"schema", "bayeslayers.train/1"},
      {"train_accuracy", out.train_accuracy},
      {"final_loss", out.curve.back().loss},
      {"model", model_path.filename().string()},
      {"model_fnv1a64", hex64(fnv1a64(serialize_model(trained.model)))},
      {"config", config_echo(config)},
      {"dataset", data.provenance},
      {"seed", config.seed},
      {"timings", {{"total_seconds", seconds_since(t0)}}},
  };
  write_text(config.out_dir / "train.json", out.summary.dump(2) + "\n");
  out.model = std::move(trained.model);
  return out;
}

EvalOutcome cmd_eval(const RunConfig& config) {
  const auto t0 = Clock::now();
  require_directory(config.out_dir);
  const Model model = load_model_checked(config.resolved_model_path());
  const BenchmarkPairing data = load_dataset(config.dataset);
  Evaluation ev = evaluate(config, model, data);
  ev.outcome.report["timings"] = timings_block(seconds_since(t0), ev, config.threads);
  write_eval_outputs(ev.outcome, config.out_dir);
  return std::move(ev.outcome);
}

json cmd_calibrate(const RunConfig& config) {
  require_directory(config.out_dir);
  const Model model = load_model_checked(config.resolved_model_path());
  BenchmarkPairing data = load_dataset(config.dataset);
  // Calibration never looks at OOD scores; a single placeholder keeps the
  // shared evaluation path happy and is dropped again below.
  if (data.ood_test.empty()) data.ood_test.push_back(data.id_test.at(0));
  data.ood_test.resize(1);
  const Evaluation ev = evaluate(config, model, data);
  const json calibration = {
      {"schema", "bayeslayers.calibration/1"},
      {"gamma", ev.outcome.report["metrics"]["gamma"]},
      {"tpr_target", config.tpr_target},
      {"n_id", ev.outcome.scores.id_scores.size()},
      {"id_retained_fraction", ev.outcome.report["metrics"]["id_retained_fraction"]},
      {"config", ev.outcome.report["config"]},
      {"seed", config.seed},
  };
  write_text(config.out_dir / "calibration.json", calibration.dump(2) + "\n");
  return calibration;
}

std::vector<AblationRow> cmd_ablate_layers(const RunConfig& config) {
  require_directory(config.out_dir);
  const Model model = load_model_checked(config.resolved_model_path());
  const BenchmarkPairing data = load_dataset(config.dataset);
  std::vector<AblationRow> rows;
  json table = json::array();
  std::ostringstream csv;
  csv << "policy,seed,selected_layers,fpr95,auroc,id_accuracy,box_iou_accuracy,gamma\n";
  for (std::size_t i = 0; i < kAllPolicies.size(); ++i) {
    const auto t0 = Clock::now();
    RunConfig rc = config;
    rc.policy = SelectionPolicy{kAllPolicies[i], {}};
    rc.seed = config.seed + i;
    rc.out_dir = config.out_dir / "ablation" / std::string(to_string(kAllPolicies[i]));
    std::filesystem::create_directories(rc.out_dir);
    Evaluation ev = evaluate(rc, model, data);
    ev.outcome.report["timings"] = timings_block(seconds_since(t0), ev, rc.threads);
    write_eval_outputs(ev.outcome, rc.out_dir);

    const json& m = ev.outcome.report["metrics"];
    std::string layers;
    for (const auto& name : ev.outcome.selected_layers) layers += (layers.empty() ? "" : ";") + name;
    csv << to_string(kAllPolicies[i]) << ',' << rc.seed << ',' << layers << ',' << fmt("%.9g", m["fpr95"].get<double>())
        << ',' << fmt("%.9g", m["auroc"].get<double>()) << ',' << fmt("%.9g", m["id_accuracy"].get<double>()) << ','
        << (m["box_iou_accuracy"].is_null() ? "" : fmt("%.9g", m["box_iou_accuracy"].get<double>())) << ','
        << fmt("%.9g", m["gamma"].get<double>()) << '\n';
    table.push_back({{"policy", std::string(to_string(kAllPolicies[i]))},
                     {"seed", rc.seed},
                     {"selected_layers", ev.outcome.selected_layers},
                     {"metrics", m}});
    rows.push_back({kAllPolicies[i], rc.seed, std::move(ev.outcome)});
  }
  write_text(config.out_dir / "ablation.csv", csv.str());
  write_text(config.out_dir / "ablation.json", json{{"schema", "bayeslayers.ablation/1"}, {"rows", table}}.dump(2) + "\n");
  return rows;
}

json cmd_report(const std::vector<std::filesystem::path>& reports, const std::filesystem::path& out_dir) {
  if (reports.empty()) throw ConfigError("report needs at least one report file");
  require_directory(out_dir);
  std::vector<json> docs;
  for (const auto& path : reports) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open report '" + path.string() + "'");
    json doc;
    try {
      doc = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError("report '" + path.string() + "' is not valid JSON: " + e.what());
    }
    if (!doc.is_object() || doc.value("schema", "") != kReportSchema || !doc.contains("metrics") ||
        !doc["metrics"].is_object() || !doc.contains("config")) {
      throw ConfigError("report '" + path.string() + "' does not follow schema " + kReportSchema);
    }
    if (!docs.empty() && doc["config"] != docs.front()["config"]) {
      std::string where;
      for (const auto& [key, value] : docs.front()["config"].items()) {
        if (!doc["config"].contains(key) || doc["config"][key] != value) where += (where.empty() ? "" : ", ") + key;
      }
      throw ConfigError("report '" + path.string() + "' has a different configuration (" + where + ")");
    }
    docs.push_back(std::move(doc));
  }

  json summary = {{"schema", kSummarySchema}, {"n_reports", docs.size()}, {"config", docs.front()["config"]}};
  json seeds = json::array();
  for (const auto& d : docs) seeds.push_back(d.value("seed", json(nullptr)));
  summary["seeds"] = seeds;
  std::ostringstream csv;
  csv << "metric,mean,std,n\n";
  json metrics = json::object();
  for (const auto& [name, first] : docs.front()["metrics"].items()) {
    std::vector<double> values;
    json raw = json::array();
    for (const auto& d : docs) {
      const json& v = d["metrics"].contains(name) ? d["metrics"][name] : json(nullptr);
      if (!v.is_null() && !v.is_number()) throw ConfigError("metric '" + name + "' is not numeric");
      raw.push_back(v);
      if (v.is_number()) values.push_back(v.get<double>());
    }
    json entry = {{"values", raw}, {"n", values.size()}};
    if (values.empty()) {
      entry["mean"] = nullptr;
      entry["std"] = nullptr;
    } else {
      double sum = 0.0;
      for (double v : values) sum += v;
      const double mean = sum / static_cast<double>(values.size());
      double ss = 0.0;
      for (double v : values) ss += (v - mean) * (v - mean);
      const double sd = values.size() > 1 ? std::sqrt(ss / static_cast<double>(values.size() - 1)) : 0.0;
      entry["mean"] = mean;
      entry["std"] = sd;
      csv << name << ',' << fmt("%.17g", mean) << ',' << fmt("%.17g", sd) << ',' << values.size() << '\n';
    }
    metrics[name] = entry;
  }
  summary["metrics"] = metrics;
  write_text(out_dir / "summary.json", summary.dump(2) + "\n");
  write_text(out_dir / "summary.csv", csv.str());
  return summary;
}

std::string format_summary(const json& summary) {
  std::ostringstream os;
  os << "reports: " << summary["n_reports"].get<std::size_t>() << "\n";
  char line[160];
  for (const auto& [name, entry] : summary["metrics"].items()) {
    if (entry["mean"].is_null()) {
      std::snprintf(line, sizeof line, "  %-28s %12s\n", name.c_str(), "n/a");
    } else {
      std::snprintf(line, sizeof line, "  %-28s %12.6f +- %.6f\n", name.c_str(), entry["mean"].get<double>(),
                    entry["std"].get<double>());
    }
    os << line;
  }
  return os.str();
}

int run_cli(int argc, char** argv) {
  CLI::App cli{"Post-hoc Bayesian layers for out-of-distribution detection", "bayeslayers"};
  cli.require_subcommand(1);
  cli.set_help_all_flag("--help-all", "Show help for every subcommand");

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::optional<std::string> out_dir;
  std::optional<std::string> model_path;
  std::optional<std::string> policy;
  std::vector<std::string> report_paths;

  auto add_common = [&](CLI::App* sub, bool needs_config) {
    auto* opt = sub->add_option("--config", config_path, "Run configuration (JSON)");
    if (needs_config) opt->required();
    sub->add_option("--seed", seed, "Override the configured seed");
    sub->add_option("--threads", threads, "Worker threads (default: BAYESLAYERS_THREADS or all cores)")
        ->check(CLI::PositiveNumber);
    sub->add_option("--out", out_dir, "Output directory (must exist)");
  };
  auto* gen = cli.add_subcommand("gen-data", "Materialize the configured dataset and its manifest");
  auto* train = cli.add_subcommand("train", "Train the configured preset on the ID training split");
  auto* eval = cli.add_subcommand("eval", "Monte-Carlo OOD evaluation with the configured Bayesian layers");
  auto* calibrate = cli.add_subcommand("calibrate", "Calibrate the ID/OOD threshold on ID test data");
  auto* ablate = cli.add_subcommand("ablate-layers", "Evaluate every layer-selection policy");
  auto* report = cli.add_subcommand("report", "Aggregate reports into mean +- std");
  for (auto* sub : {gen, train, eval, calibrate, ablate}) add_common(sub, true);
  for (auto* sub : {eval, calibrate, ablate}) {
    sub->add_option("--model", model_path, "Model file (default: <out>/model.blyr)");
  }
  eval->add_option("--policy", policy, "Override the selection policy");
  report->add_option("reports", report_paths, "report.json files")->required();
  report->add_option("--out", out_dir, "Output directory for summary files");

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = cli.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (report->parsed()) {
      std::vector<std::filesystem::path> paths(report_paths.begin(), report_paths.end());
      const json summary = cmd_report(paths, out_dir.value_or("."));
      std::cout << format_summary(summary);
      return kExitOk;
    }
    RunConfig config = load_run_config(config_path);
    if (seed) {
      config.seed = *seed;
      config.train.seed = *seed;
    }
    if (threads) config.threads = *threads;
    if (out_dir) config.out_dir = *out_dir;
    if (model_path) config.model_path = *model_path;
    if (policy) {
      try {
        config.policy = SelectionPolicy{parse_policy(*policy), {}};
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
    }
    config.validate();

    if (gen->parsed()) {
      const json manifest = cmd_gen_data(config);
      std::cout << "wrote dataset " << manifest["digest"].get<std::string>() << " to " << config.out_dir.string()
                << "\n";
    } else if (train->parsed()) {
      const TrainOutcome t = cmd_train(config);
      std::cout << "trained " << to_string(config.architecture) << ": train accuracy "
                << fmt("%.4f", t.train_accuracy) << ", final loss " << fmt("%.6f", t.curve.back().loss) << "\n";
    } else if (eval->parsed()) {
      const EvalOutcome e = cmd_eval(config);
      const json& m = e.report["metrics"];
      std::cout << "policy " << to_string(config.policy.kind) << ": FPR95 " << fmt("%.4f", m["fpr95"].get<double>())
                << ", AUROC " << fmt("%.4f", m["auroc"].get<double>()) << ", ID accuracy "
                << fmt("%.4f", m["id_accuracy"].get<double>()) << "\n";
    } else if (calibrate->parsed()) {
      const json c = cmd_calibrate(config);
      std::cout << "gamma " << fmt("%.9g", c["gamma"].get<double>()) << "\n";
    } else if (ablate->parsed()) {
      for (const auto& row : cmd_ablate_layers(config)) {
        const json& m = row.eval.report["metrics"];
        std::printf("%-16s FPR95 %.4f  AUROC %.4f\n", std::string(to_string(row.policy)).c_str(),
                    m["fpr95"].get<double>(), m["auroc"].get<double>());
      }
    }
    return kExitOk;
  } catch (const std::exception& e) {
    std::cerr << "bayeslayers: " << e.what() << "\n";
    return exit_code_for_current_exception();
  }
}

}  // namespace bayeslayers::app
