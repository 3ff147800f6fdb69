#include "run_config.hpp"

#include <cmath>
#include <cstdio>
#include <iterator>
#include <fstream>

#include "bayeslayers/errors.hpp"
#include "bayeslayers/idx.hpp"
#include "bayeslayers/parallel.hpp"

namespace bayeslayers::app {

namespace {

using nlohmann::json;

void reject_unknown(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <class T>
void read(const json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("bad value for '" + std::string(key) + "' in " + where);
  }
}

std::size_t read_count(const json& obj, const char* key, std::size_t fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ConfigError("'" + std::string(key) + "' in " + where + " must be a non-negative integer");
  }
  return v.get<std::size_t>();
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

DatasetSpec parse_dataset(const json& d, const std::filesystem::path& base) {
  DatasetSpec spec;
  if (!d.is_object()) throw ConfigError("'dataset' must be an object");
  if (d.contains("manifest")) {
    reject_unknown(d, {"manifest"}, "dataset");
    spec.source = DatasetSpec::Source::manifest;
    spec.manifest = resolve(base, d.at("manifest").get<std::string>());
    return spec;
  }
  if (d.contains("idx_images")) {
    reject_unknown(d, {"idx_images", "idx_labels", "id_labels"}, "dataset");
    spec.source = DatasetSpec::Source::idx;
    try {
      spec.idx_images = resolve(base, d.at("idx_images").get<std::string>());
      spec.idx_labels = resolve(base, d.at("idx_labels").get<std::string>());
      spec.id_labels = d.at("id_labels").get<std::set<std::size_t>>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("idx dataset needs idx_images, idx_labels and id_labels: ") + e.what());
    }
    return spec;
  }
  const std::string generator = d.value("generator", "");
  if (generator == "blobs") {
    reject_unknown(d, {"generator", "seed", "class_count", "n_per_class", "dim", "id_center_scale", "ood_offset"},
                   "dataset");
    auto& p = spec.blobs;
    spec.source = DatasetSpec::Source::blobs;
    read(d, "seed", p.seed, "dataset");
    p.class_count = read_count(d, "class_count", p.class_count, "dataset");
    p.n_per_class = read_count(d, "n_per_class", p.n_per_class, "dataset");
    p.dim = read_count(d, "dim", p.dim, "dataset");
    read(d, "id_center_scale", p.id_center_scale, "dataset");
    read(d, "ood_offset", p.ood_offset, "dataset");
    if (p.class_count < 2 || p.dim < 2 || p.n_per_class == 0 || !(p.id_center_scale > 0.0) ||
        !(p.ood_offset >= 0.0)) {
      throw ConfigError("blobs dataset parameters out of range");
    }
    return spec;
  }
  if (generator == "shapes") {
    reject_unknown(d, {"generator", "seed", "image_size", "n_per_class", "min_extent", "max_extent"}, "dataset");
    auto& p = spec.shapes;
    spec.source = DatasetSpec::Source::shapes;
    read(d, "seed", p.seed, "dataset");
    p.image_size = read_count(d, "image_size", p.image_size, "dataset");
    p.n_per_class = read_count(d, "n_per_class", p.n_per_class, "dataset");
    p.min_extent = read_count(d, "min_extent", p.min_extent, "dataset");
    p.max_extent = read_count(d, "max_extent", p.max_extent, "dataset");
    if (p.image_size < 16 || p.n_per_class == 0 || p.min_extent < 3 || p.min_extent > p.max_extent ||
        p.max_extent > p.image_size) {
      throw ConfigError("shapes dataset parameters out of range");
    }
    return spec;
  }
  throw ConfigError("dataset needs 'generator' (blobs|shapes), 'manifest', or 'idx_images'");
}

std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(bytes)));
  return buf;
}

}  // namespace

void RunConfig::validate() const {
  try {
    train.validate();
    scoring.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be positive");
  if (!(epsilon_quantile >= 0.0 && epsilon_quantile < 1.0)) throw ConfigError("epsilon_quantile must lie in [0, 1)");
  if (mc_samples == 0) throw ConfigError("mc_samples must be positive");
  if (max_rejection_attempts && *max_rejection_attempts == 0) throw ConfigError("max_rejection_attempts must be positive");
  if (!(tpr_target > 0.0 && tpr_target <= 1.0)) throw ConfigError("tpr_target must lie in (0, 1]");
  if (threads == 0) throw ConfigError("threads must be positive");
}

RunConfig parse_run_config(const json& doc, const std::filesystem::path& base_dir) {
  reject_unknown(doc,
                 {"dataset", "architecture", "train", "policy", "layers", "alpha", "epsilon_quantile", "mc_samples",
                  "max_rejection_attempts", "temperature", "phi", "aggregation", "tpr_target", "seed", "threads",
                  "out", "model"},
                 "config");
  RunConfig c;
  c.threads = default_thread_count();
  if (!doc.contains("dataset")) throw ConfigError("config needs a 'dataset' section");
  c.dataset = parse_dataset(doc.at("dataset"), base_dir);
  try {
    if (doc.contains("architecture")) c.architecture = parse_architecture(doc.at("architecture").get<std::string>());
    if (doc.contains("policy")) c.policy.kind = parse_policy(doc.at("policy").get<std::string>());
    if (doc.contains("aggregation")) c.scoring.aggregation = parse_aggregation(doc.at("aggregation").get<std::string>());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  } catch (const json::exception& e) {
    throw ConfigError(e.what());
  }
  read(doc, "layers", c.policy.explicit_layers, "config");
  if (doc.contains("train")) {
    const json& t = doc.at("train");
    reject_unknown(t, {"learning_rate", "momentum", "weight_decay", "epochs", "batch_size", "box_loss_weight"},
                   "train");
    read(t, "learning_rate", c.train.learning_rate, "train");
    read(t, "momentum", c.train.momentum, "train");
    read(t, "weight_decay", c.train.weight_decay, "train");
    c.train.epochs = read_count(t, "epochs", c.train.epochs, "train");
    c.train.batch_size = read_count(t, "batch_size", c.train.batch_size, "train");
    read(t, "box_loss_weight", c.train.box_loss_weight, "train");
  }
  read(doc, "alpha", c.alpha, "config");
  read(doc, "epsilon_quantile", c.epsilon_quantile, "config");
  c.mc_samples = read_count(doc, "mc_samples", c.mc_samples, "config");
  if (doc.contains("max_rejection_attempts")) {
    c.max_rejection_attempts = read_count(doc, "max_rejection_attempts", 0, "config");
  }
  read(doc, "temperature", c.scoring.temperature, "config");
  read(doc, "phi", c.scoring.phi, "config");
  read(doc, "tpr_target", c.tpr_target, "config");
  read(doc, "seed", c.seed, "config");
  c.threads = read_count(doc, "threads", c.threads, "config");
  if (doc.contains("out")) c.out_dir = resolve(base_dir, doc.at("out").get<std::string>());
  if (doc.contains("model")) c.model_path = resolve(base_dir, doc.at("model").get<std::string>());
  c.train.seed = c.seed;
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return parse_run_config(doc, path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path());
}

json config_echo(const RunConfig& c) {
  json layers = c.policy.explicit_layers;
  json echo = {
      {"architecture", std::string(to_string(c.architecture))},
      {"policy", std::string(to_string(c.policy.kind))},
      {"explicit_layers", layers},
      {"alpha", c.alpha},
      {"epsilon_quantile", c.epsilon_quantile},
      {"mc_samples", c.mc_samples},
      {"temperature", c.scoring.temperature},
      {"phi", c.scoring.phi},
      {"aggregation", std::string(to_string(c.scoring.aggregation))},
      {"tpr_target", c.tpr_target},
      {"train",
       {{"learning_rate", c.train.learning_rate},
        {"momentum", c.train.momentum},
        {"weight_decay", c.train.weight_decay},
        {"epochs", c.train.epochs},
        {"batch_size", c.train.batch_size},
        {"box_loss_weight", c.train.box_loss_weight}}},
  };
  echo["max_rejection_attempts"] = c.max_rejection_attempts ? json(*c.max_rejection_attempts) : json(nullptr);
  return echo;
}

BenchmarkPairing load_dataset(const DatasetSpec& spec) {
  switch (spec.source) {
    case DatasetSpec::Source::blobs: return gen_blobs(spec.blobs);
    case DatasetSpec::Source::shapes: return gen_shapes(spec.shapes);
    case DatasetSpec::Source::manifest: return read_pairing(spec.manifest);
    case DatasetSpec::Source::idx: {
      BenchmarkPairing p = split_by_label(load_idx(spec.idx_images, spec.idx_labels), spec.id_labels);
      p.provenance["images"] = {{"file", spec.idx_images.filename().string()}, {"fnv1a64", file_digest(spec.idx_images)}};
      p.provenance["labels"] = {{"file", spec.idx_labels.filename().string()}, {"fnv1a64", file_digest(spec.idx_labels)}};
      return p;
    }
  }
  throw ConfigError("unknown dataset source");
}

}  // namespace bayeslayers::app
