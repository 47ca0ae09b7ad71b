#include "advcon/pipeline.hpp"

#include "advcon/anatomy.hpp"
#include "advcon/metrics.hpp"
#include "advcon/model_io.hpp"
#include "advcon/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>
#include <set>

namespace fs = std::filesystem;

namespace advcon {

std::vector<std::pair<int, int>> AttackGrid::resolved_pairs() const {
  if (!pairs.empty()) return pairs;
  std::vector<std::pair<int, int>> out;
  for (int o : classes) {
    for (int t : classes) {
      if (o != t) out.emplace_back(o, t);
    }
  }
  return out;
}

std::vector<double> AnalysisConfig::gammas() const {
  std::vector<double> g;
  const auto n = static_cast<int>(std::floor((gamma_stop - gamma_start) / gamma_step + 1e-9));
  for (int i = 0; i <= n; ++i) g.push_back(gamma_start + gamma_step * i);
  return g;
}

std::vector<LayerSpec> toy_cnn_layers(int num_classes) {
  return {LayerSpec::conv2d("conv1", 8, 3, 1, 1),  LayerSpec::relu("relu1"), LayerSpec::maxpool2d("pool1"),
          LayerSpec::conv2d("conv2", 16, 3, 1, 1), LayerSpec::relu("relu2"), LayerSpec::maxpool2d("pool2"),
          LayerSpec::conv2d("conv3", 32, 3, 1, 1), LayerSpec::relu("relu3"), LayerSpec::conv2d("conv4", 32, 3, 1, 1),
          LayerSpec::relu("relu4"),                LayerSpec::global_avg_pool("gap"), LayerSpec::dense("fc", num_classes)};
}

namespace {

std::vector<AttackConfig> default_attacks() {
  AttackConfig bim_cfg;
  bim_cfg.kind = AttackKind::bim;
  AttackConfig pgd_cfg;
  pgd_cfg.kind = AttackKind::pgd;
  AttackConfig cw_cfg;
  cw_cfg.kind = AttackKind::cw;
  cw_cfg.steps = 200;
  cw_cfg.beta = 1.0;
  cw_cfg.cw_lr = 0.01;
  AttackConfig patch_cfg;
  patch_cfg.kind = AttackKind::patch;
  patch_cfg.alpha = 0.05;
  patch_cfg.steps = 200;
  patch_cfg.patch = {2, 2, 8};
  return {bim_cfg, pgd_cfg, cw_cfg, patch_cfg};
}

std::vector<int> all_classes(int n) {
  std::vector<int> c(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) c[static_cast<std::size_t>(i)] = i;
  return c;
}

}  // namespace

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.layers = toy_cnn_layers(c.dataset.shapes.num_classes);
  c.grid.classes = all_classes(c.dataset.shapes.num_classes);
  c.grid.attacks = default_attacks();
  return c;
}

void ExperimentConfig::validate() const {
  if (dataset.kind == "shapes") {
    dataset.shapes.validate();
  } else if (dataset.kind == "idx") {
    if (dataset.idx_images.empty() || dataset.idx_labels.empty()) {
      throw ConfigError("dataset kind idx needs idx_images and idx_labels");
    }
  } else {
    throw ConfigError("dataset kind must be 'shapes' or 'idx'");
  }
  if (!(dataset.train_fraction > 0.0 && dataset.train_fraction < 1.0)) {
    throw ConfigError("train_fraction must be in (0, 1)");
  }
  if (layers.empty()) throw ConfigError("model has no layers");
  std::set<std::string> names;
  for (const auto& l : layers) {
    if (!names.insert(l.name).second) throw ConfigError("duplicate layer name '" + l.name + "'");
  }
  train.validate();
  if (!(min_accuracy >= 0.0 && min_accuracy <= 1.0)) throw ConfigError("min_accuracy must be in [0, 1]");

  if (grid.images_per_class < 1) throw ConfigError("images_per_class must be >= 1");
  if (grid.attacks.empty()) throw ConfigError("attack grid has no attacks");
  std::set<AttackKind> kinds;
  for (const auto& a : grid.attacks) {
    if (!kinds.insert(a.kind).second) throw ConfigError("attack kind listed twice: " + std::string(to_string(a.kind)));
  }
  const auto pairs = grid.resolved_pairs();
  if (pairs.empty()) throw ConfigError("attack grid has no (origin, target) pairs");
  for (const auto& [o, t] : pairs) {
    if (o == t) throw ConfigError("attack pair with origin == target (" + std::to_string(o) + ")");
    if (o < 0 || t < 0) throw ConfigError("negative class index in attack grid");
    if (dataset.kind == "shapes" && (o >= dataset.shapes.num_classes || t >= dataset.shapes.num_classes)) {
      throw ConfigError("attack grid class index out of range");
    }
  }

  if (!names.count(analysis.discovery_layer)) {
    throw ConfigError("discovery layer '" + analysis.discovery_layer + "' is not a model layer");
  }
  for (const auto& l : analysis.profile_layers) {
    if (!names.count(l)) throw ConfigError("profile layer '" + l + "' is not a model layer");
  }
  for (auto k : analysis.kinds) {
    if (!kinds.count(k)) throw ConfigError("analysis kind '" + std::string(to_string(k)) + "' is not in the attack grid");
  }
  if (analysis.concepts < 1 || analysis.perturbation_concepts < 1) throw ConfigError("concept counts must be >= 1");
  if (!(analysis.iou_quantile > 0.0 && analysis.iou_quantile < 1.0)) throw ConfigError("iou_quantile must be in (0, 1)");
  for (double t : analysis.change_thresholds) {
    if (!(t >= 0.0 && t <= 100.0)) throw ConfigError("change thresholds are IoU percentages in [0, 100]");
  }
  if (!(analysis.confidence > 0.0 && analysis.confidence < 1.0)) throw ConfigError("confidence must be in (0, 1)");
  if (analysis.variance_levels.empty()) throw ConfigError("variance_levels is empty");
  for (double v : analysis.variance_levels) {
    if (!(v > 0.0 && v <= 1.0)) throw ConfigError("variance levels must be in (0, 1]");
  }
  if (!(analysis.gamma_step > 0.0) || !(analysis.gamma_stop >= analysis.gamma_start)) {
    throw ConfigError("gamma grid needs step > 0 and stop >= start");
  }
  if (analysis.nmf_max_iters < 1 || !(analysis.nmf_tol >= 0.0)) throw ConfigError("invalid NMF stopping rule");
}

// ---------------------------------------------------------------- config JSON

namespace {

Json layer_to_json(const LayerSpec& l) {
  Json j{{"name", l.name}, {"kind", to_string(l.kind)}};
  switch (l.kind) {
    case LayerKind::conv2d:
      j["units"] = l.units;
      j["kernel"] = l.kernel;
      j["stride"] = l.stride;
      j["pad"] = l.pad;
      break;
    case LayerKind::maxpool2d:
      j["kernel"] = l.kernel;
      j["stride"] = l.stride;
      break;
    case LayerKind::dense:
      j["units"] = l.units;
      break;
    default:
      break;
  }
  return j;
}

void check_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw ConfigError("unknown key '" + key + "' in " + where);
    }
  }
}

LayerSpec layer_from_json(const Json& j) {
  check_keys(j, {"name", "kind", "units", "kernel", "stride", "pad"}, "layer");
  const auto kind = parse_layer_kind(j.at("kind").get<std::string>());
  LayerSpec l;
  l.kind = kind;
  l.name = j.at("name").get<std::string>();
  if (kind == LayerKind::maxpool2d) {
    l.kernel = 2;
    l.stride = 2;
  }
  l.units = j.value("units", l.units);
  l.kernel = j.value("kernel", l.kernel);
  l.stride = j.value("stride", l.stride);
  l.pad = j.value("pad", l.pad);
  return l;
}

}  // namespace

Json to_json(const ExperimentConfig& c) {
  const auto& s = c.dataset.shapes;
  Json dataset{{"kind", c.dataset.kind},
               {"num_classes", s.num_classes},
               {"samples_per_class", s.samples_per_class},
               {"height", s.height},
               {"width", s.width},
               {"channels", s.channels},
               {"noise_std", s.noise_std},
               {"color_jitter", s.color_jitter},
               {"contrast", s.contrast},
               {"seed", s.seed},
               {"idx_images", c.dataset.idx_images.generic_string()},
               {"idx_labels", c.dataset.idx_labels.generic_string()},
               {"train_fraction", c.dataset.train_fraction}};
  Json layers = Json::array();
  for (const auto& l : c.layers) layers.push_back(layer_to_json(l));
  Json train{{"epochs", c.train.epochs},
             {"batch_size", c.train.batch_size},
             {"learning_rate", c.train.learning_rate},
             {"momentum", c.train.momentum},
             {"seed", c.train.seed},
             {"optimizer", to_string(c.train.optimizer)}};
  Json pairs = Json::array();
  for (const auto& [o, t] : c.grid.pairs) pairs.push_back({o, t});
  Json attacks = Json::array();
  for (const auto& a : c.grid.attacks) attacks.push_back(to_json(a));
  Json kinds = Json::array();
  for (auto k : c.analysis.kinds) kinds.push_back(to_string(k));
  const auto& a = c.analysis;
  return Json{{"seed", c.seed},
              {"output_dir", c.output_dir.generic_string()},
              {"dataset", dataset},
              {"model", {{"layers", layers}, {"train", train}, {"min_accuracy", c.min_accuracy}}},
              {"attacks",
               {{"classes", c.grid.classes},
                {"pairs", pairs},
                {"images_per_class", c.grid.images_per_class},
                {"configs", attacks}}},
              {"analysis",
               {{"profile_layers", a.profile_layers},
                {"discovery_layer", a.discovery_layer},
                {"kinds", kinds},
                {"concepts", a.concepts},
                {"perturbation_concepts", a.perturbation_concepts},
                {"iou_quantile", a.iou_quantile},
                {"change_thresholds", a.change_thresholds},
                {"confidence", a.confidence},
                {"variance_levels", a.variance_levels},
                {"gamma_start", a.gamma_start},
                {"gamma_stop", a.gamma_stop},
                {"gamma_step", a.gamma_step},
                {"nmf_max_iters", a.nmf_max_iters},
                {"nmf_tol", a.nmf_tol}}}};
}

ExperimentConfig config_from_json(const Json& j) {
  ExperimentConfig c = default_config();
  try {
    check_keys(j, {"seed", "output_dir", "dataset", "model", "attacks", "analysis"}, "config");
    c.seed = j.value("seed", c.seed);
    // sub-seeds follow the experiment seed unless given explicitly
    c.dataset.shapes.seed = c.seed;
    c.train.seed = c.seed;
    if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();

    if (j.contains("dataset")) {
      const Json& d = j.at("dataset");
      check_keys(d,
                 {"kind", "num_classes", "samples_per_class", "height", "width", "channels", "noise_std",
                  "color_jitter", "contrast", "seed", "idx_images", "idx_labels", "train_fraction"},
                 "dataset");
      auto& s = c.dataset.shapes;
      c.dataset.kind = d.value("kind", c.dataset.kind);
      s.num_classes = d.value("num_classes", s.num_classes);
      s.samples_per_class = d.value("samples_per_class", s.samples_per_class);
      s.height = d.value("height", s.height);
      s.width = d.value("width", s.width);
      s.channels = d.value("channels", s.channels);
      s.noise_std = d.value("noise_std", s.noise_std);
      s.color_jitter = d.value("color_jitter", s.color_jitter);
      s.contrast = d.value("contrast", s.contrast);
      s.seed = d.value("seed", s.seed);
      c.dataset.idx_images = d.value("idx_images", std::string());
      c.dataset.idx_labels = d.value("idx_labels", std::string());
      c.dataset.train_fraction = d.value("train_fraction", c.dataset.train_fraction);
    }
    const int num_classes = c.dataset.shapes.num_classes;
    c.layers = toy_cnn_layers(num_classes);
    c.grid.classes = all_classes(num_classes);

    if (j.contains("model")) {
      const Json& m = j.at("model");
      check_keys(m, {"layers", "train", "min_accuracy"}, "model");
      if (m.contains("layers")) {
        c.layers.clear();
        for (const auto& l : m.at("layers")) c.layers.push_back(layer_from_json(l));
      }
      if (m.contains("train")) {
        const Json& t = m.at("train");
        check_keys(t, {"epochs", "batch_size", "learning_rate", "momentum", "seed", "optimizer"}, "train");
        c.train.epochs = t.value("epochs", c.train.epochs);
        c.train.batch_size = t.value("batch_size", c.train.batch_size);
        c.train.learning_rate = t.value("learning_rate", c.train.learning_rate);
        c.train.momentum = t.value("momentum", c.train.momentum);
        c.train.seed = t.value("seed", c.train.seed);
        if (t.contains("optimizer")) c.train.optimizer = parse_optimizer(t.at("optimizer").get<std::string>());
      }
      c.min_accuracy = m.value("min_accuracy", c.min_accuracy);
    }

    if (j.contains("attacks")) {
      const Json& a = j.at("attacks");
      check_keys(a, {"classes", "pairs", "images_per_class", "configs"}, "attacks");
      if (a.contains("classes")) c.grid.classes = a.at("classes").get<std::vector<int>>();
      if (a.contains("pairs")) {
        for (const auto& p : a.at("pairs")) {
          const auto v = p.get<std::vector<int>>();
          if (v.size() != 2) throw ConfigError("attack pairs are [origin, target]");
          c.grid.pairs.emplace_back(v[0], v[1]);
        }
      }
      c.grid.images_per_class = a.value("images_per_class", c.grid.images_per_class);
      if (a.contains("configs")) {
        // each entry overrides the default settings of its kind
        const auto defaults = default_attacks();
        c.grid.attacks.clear();
        for (const auto& e : a.at("configs")) {
          check_keys(e,
                     {"kind", "target", "epsilon", "alpha", "steps", "beta", "cw_lr", "patch", "seed", "norm",
                      "random_start", "confirm_steps"},
                     "attack config");
          const auto kind = parse_attack_kind(e.at("kind").get<std::string>());
          Json merged = to_json(*std::find_if(defaults.begin(), defaults.end(),
                                              [&](const AttackConfig& d) { return d.kind == kind; }));
          merged.update(e);
          c.grid.attacks.push_back(attack_config_from_json(merged));
        }
      }
    }

    if (j.contains("analysis")) {
      const Json& a = j.at("analysis");
      check_keys(a,
                 {"profile_layers", "discovery_layer", "kinds", "concepts", "perturbation_concepts", "iou_quantile",
                  "change_thresholds", "confidence", "variance_levels", "gamma_start", "gamma_stop", "gamma_step",
                  "nmf_max_iters", "nmf_tol"},
                 "analysis");
      auto& an = c.analysis;
      an.profile_layers = a.value("profile_layers", an.profile_layers);
      an.discovery_layer = a.value("discovery_layer", an.discovery_layer);
      if (a.contains("kinds")) {
        an.kinds.clear();
        for (const auto& k : a.at("kinds")) an.kinds.push_back(parse_attack_kind(k.get<std::string>()));
      }
      an.concepts = a.value("concepts", an.concepts);
      an.perturbation_concepts = a.value("perturbation_concepts", an.perturbation_concepts);
      an.iou_quantile = a.value("iou_quantile", an.iou_quantile);
      an.change_thresholds = a.value("change_thresholds", an.change_thresholds);
      an.confidence = a.value("confidence", an.confidence);
      an.variance_levels = a.value("variance_levels", an.variance_levels);
      an.gamma_start = a.value("gamma_start", an.gamma_start);
      an.gamma_stop = a.value("gamma_stop", an.gamma_stop);
      an.gamma_step = a.value("gamma_step", an.gamma_step);
      an.nmf_max_iters = a.value("nmf_max_iters", an.nmf_max_iters);
      an.nmf_tol = a.value("nmf_tol", an.nmf_tol);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  Json j;
  try {
    j = Json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  return config_from_json(j);
}

std::uint64_t config_hash(const ExperimentConfig& config) {
  Json j = to_json(config);
  j.erase("output_dir");
  return fnv1a(j.dump());
}

namespace {

// Hash of the settings a stage's outputs depend on; later stages check it so
// that changing, say, the analysis options does not force a retrain.
std::string dependency_hash(const ExperimentConfig& config, bool with_attacks) {
  const Json full = to_json(config);
  Json j{{"seed", full.at("seed")}, {"dataset", full.at("dataset")}, {"model", full.at("model")}};
  if (with_attacks) j["attacks"] = full.at("attacks");
  return hex64(fnv1a(j.dump()));
}

}  // namespace

int worker_count() {
  if (const char* env = std::getenv("ADVCON_WORKERS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || n < 1) throw ConfigError("ADVCON_WORKERS must be a positive integer");
    return static_cast<int>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

std::string_view to_string(DissectStage stage) {
  switch (stage) {
    case DissectStage::layers: return "layers";
    case DissectStage::mine: return "mine";
    case DissectStage::anatomy: return "anatomy";
  }
  return "unknown";
}

DissectStage parse_dissect_stage(std::string_view name) {
  for (auto s : {DissectStage::layers, DissectStage::mine, DissectStage::anatomy}) {
    if (to_string(s) == name) return s;
  }
  throw ConfigError("unknown dissect stage '" + std::string(name) + "'");
}

fs::path stage_dir(const ExperimentConfig& config, std::string_view stage) { return config.output_dir / stage; }

std::string group_name(int origin, int target, AttackKind kind) {
  return std::to_string(origin) + "_" + std::to_string(target) + "_" + std::string(to_string(kind));
}

std::pair<LabeledImages, LabeledImages> load_experiment_data(const ExperimentConfig& config) {
  LabeledImages data;
  if (config.dataset.kind == "idx") {
    data = load_idx(config.dataset.idx_images, config.dataset.idx_labels);
  } else {
    data = generate_shapes(config.dataset.shapes);
  }
  return stratified_split(data, config.dataset.train_fraction, config.seed);
}

// ---------------------------------------------------------------- outputs

namespace {

std::string fmt(double v) { return format_double(v); }

// Writes files below one stage directory, each with a metadata sidecar.
class StageWriter {
 public:
  StageWriter(const ExperimentConfig& config, std::string stage, bool clear = true)
      : root_(stage_dir(config, stage)), hash_(hex64(config_hash(config))), stage_(std::move(stage)) {
    // stale files from an earlier run with other settings would survive otherwise
    if (clear) fs::remove_all(root_);
    fs::create_directories(root_);
  }

  const std::string& hash() const { return hash_; }

  void text(const std::string& rel, const std::string& body, Json extra = Json::object()) {
    write_text(root_ / rel, body);
    sidecar(rel, std::move(extra));
  }
  void json(const std::string& rel, const Json& j, Json extra = Json::object()) {
    text(rel, j.dump(2) + "\n", std::move(extra));
  }
  void tensors(const std::string& rel, const std::vector<Tensor>& t, Json extra = Json::object()) {
    fs::create_directories((root_ / rel).parent_path());
    save_tensors(root_ / rel, t);
    sidecar(rel, std::move(extra));
  }
  void pgm(const std::string& rel, const Matrix& map) {
    fs::create_directories((root_ / rel).parent_path());
    const auto [lo, hi] = write_pgm(root_ / rel, map);
    sidecar(rel, {{"min", lo}, {"max", hi}});
  }
  void model(const std::string& rel, const Model& m) {
    save_model(m, root_ / rel);
    sidecar(rel, {{"model_checksum", hex64(m.checksum())}});
  }

 private:
  void sidecar(const std::string& rel, Json extra) {
    Json meta{{"config_hash", hash_}, {"stage", stage_}, {"file", rel}};
    for (auto& [k, v] : extra.items()) meta[k] = v;
    write_text(root_ / (rel + ".meta.json"), meta.dump(2) + "\n");
  }

  fs::path root_;
  std::string hash_;
  std::string stage_;
};

Json require_json(const fs::path& path, const std::string& hint) {
  if (!fs::exists(path)) throw ConfigError("missing " + path.string() + " (" + hint + ")");
  try {
    return read_json(path);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void require_same_config(const Json& j, const std::string& key, const std::string& expected, const fs::path& path) {
  if (j.value(key, std::string()) != expected) {
    throw ConfigError(path.string() + " was produced with a different configuration; rerun the earlier stages");
  }
}

Model load_trained_model(const ExperimentConfig& config) {
  const fs::path dir = stage_dir(config, "train");
  const Json metrics = require_json(dir / "metrics.json", "run `train` first");
  require_same_config(metrics, "train_hash", dependency_hash(config, false), dir / "metrics.json");
  if (!fs::exists(dir / "model.bin")) throw ConfigError("missing " + (dir / "model.bin").string() + " (run `train` first)");
  Model model = load_model(dir / "model.bin");
  if (hex64(model.checksum()) != metrics.at("model_checksum").get<std::string>()) {
    throw InvariantError("model.bin does not match the checksum recorded at training time");
  }
  return model;
}

struct SampleRecord {
  std::string file;
  Index image_index = 0;
  bool success = false;
  int predicted = -1;
  double target_prob = 0.0;
  double origin_prob = 0.0;
};

struct GroupRecord {
  int origin = 0;
  int target = 0;
  AttackKind kind = AttackKind::pgd;
  std::string dir;
  std::vector<SampleRecord> samples;
};

std::vector<GroupRecord> load_manifest(const ExperimentConfig& config) {
  const fs::path path = stage_dir(config, "attack") / "manifest.json";
  const Json m = require_json(path, "run `attack` first");
  require_same_config(m, "attack_hash", dependency_hash(config, true), path);
  std::vector<GroupRecord> groups;
  for (const auto& g : m.at("groups")) {
    GroupRecord r;
    r.origin = g.at("origin").get<int>();
    r.target = g.at("target").get<int>();
    r.kind = parse_attack_kind(g.at("kind").get<std::string>());
    r.dir = g.at("dir").get<std::string>();
    for (const auto& s : g.at("samples")) {
      r.samples.push_back({s.at("file").get<std::string>(), s.at("image_index").get<Index>(), s.at("success").get<bool>(),
                           s.at("predicted").get<int>(), s.at("target_prob").get<double>(),
                           s.at("origin_prob").get<double>()});
    }
    groups.push_back(std::move(r));
  }
  return groups;
}

struct GroupTensors {
  Tensor clean;        // (n, C, H, W)
  Tensor adversarial;  // (n, C, H, W)
};

GroupTensors load_group(const ExperimentConfig& config, const GroupRecord& g, bool successful_only = false) {
  std::vector<Tensor> xs, advs;
  for (const auto& s : g.samples) {
    if (successful_only && !s.success) continue;
    const auto t = load_tensors(stage_dir(config, "attack") / s.file);
    if (t.size() != 3) throw IoError(s.file + ": expected [x, x_adv, delta]");
    xs.push_back(t[0]);
    advs.push_back(t[1]);
  }
  if (xs.empty()) return {};
  return {concat_batch(xs), concat_batch(advs)};
}

bool has_kind(const std::vector<AttackKind>& kinds, AttackKind k) {
  return std::find(kinds.begin(), kinds.end(), k) != kinds.end();
}

std::uint64_t group_seed(const ExperimentConfig& config, std::size_t group, std::uint64_t salt) {
  return Rng::stream(config.seed ^ salt, group).next();
}

}  // namespace

// ---------------------------------------------------------------- train

void run_train(const ExperimentConfig& config) {
  config.validate();
  auto [train_set, test_set] = load_experiment_data(config);
  const Shape input{train_set.images.dim(1), train_set.images.dim(2), train_set.images.dim(3)};
  Model model(input, config.layers, config.seed);
  if (model.num_classes() != train_set.num_classes) {
    throw ConfigError("model head has " + std::to_string(model.num_classes()) + " outputs but the dataset has " +
                      std::to_string(train_set.num_classes) + " classes");
  }
  const TrainResult result = train(model, train_set, config.train);
  const double train_acc = accuracy(model, train_set);
  const double test_acc = accuracy(model, test_set);

  StageWriter out(config, "train");
  out.model("model.bin", model);
  Json metrics{{"config_hash", out.hash()},
               {"train_hash", dependency_hash(config, false)},
               {"model_checksum", hex64(model.checksum())},
               {"train_accuracy", train_acc},
               {"test_accuracy", test_acc},
               {"num_train", train_set.size()},
               {"num_test", test_set.size()},
               {"loss_history", result.loss_history}};
  out.json("metrics.json", metrics);
  CsvTable loss({"epoch", "loss"});
  for (std::size_t e = 0; e < result.loss_history.size(); ++e) loss.add_row({std::to_string(e + 1), fmt(result.loss_history[e])});
  out.text("loss.csv", loss.str());
}

// ---------------------------------------------------------------- attack

namespace {

void check_attack_contract(const AttackResult& r, const Tensor& x) {
  const double lo = r.x_adv.array().minCoeff(), hi = r.x_adv.array().maxCoeff();
  if (lo < 0.0 || hi > 1.0) throw InvariantError("attack left the pixel box [0, 1]");
  const auto& c = r.config;
  if ((c.kind == AttackKind::bim || c.kind == AttackKind::pgd) && c.norm == BallNorm::linf &&
      r.linf() > c.epsilon + 1e-9) {
    throw InvariantError("attack perturbation exceeds its L-inf budget");
  }
  if (c.kind == AttackKind::patch) {
    const Tensor mask = patch_mask(x.shape(), c.patch);
    for (Index i = 0; i < mask.size(); ++i) {
      if (mask[i] == 0.0 && r.delta[i] != 0.0) throw InvariantError("patch attack touched pixels outside its mask");
    }
  }
}

}  // namespace

void run_attack(const ExperimentConfig& config) {
  config.validate();
  const Model model = load_trained_model(config);
  const Json metrics = read_json(stage_dir(config, "train") / "metrics.json");
  const double acc = metrics.at("test_accuracy").get<double>();
  if (acc < config.min_accuracy) {
    throw InvariantError("clean test accuracy " + fmt(acc) + " is below " + fmt(config.min_accuracy) +
                         "; refusing to attack an unreliable model");
  }
  const auto [train_set, test_set] = load_experiment_data(config);
  const auto pairs = config.grid.resolved_pairs();
  const auto n_img = static_cast<std::size_t>(config.grid.images_per_class);

  std::map<int, std::vector<Index>> chosen;
  for (const auto& [o, t] : pairs) {
    if (chosen.count(o)) continue;
    auto idx = test_set.indices_of(o);
    if (idx.size() < n_img) {
      throw ConfigError("class " + std::to_string(o) + " has only " + std::to_string(idx.size()) +
                        " test images, need " + std::to_string(n_img));
    }
    idx.resize(n_img);
    chosen[o] = idx;
  }

  struct Job {
    std::size_t group;
    std::size_t sample;
    int origin;
    AttackConfig cfg;
    Index image;
  };
  std::vector<Job> jobs;
  std::vector<GroupRecord> groups;
  for (const auto& base : config.grid.attacks) {
    for (const auto& [o, t] : pairs) {
      GroupRecord g{o, t, base.kind, group_name(o, t, base.kind), {}};
      for (std::size_t i = 0; i < n_img; ++i) {
        AttackConfig c = base;
        c.target = t;
        c.seed = Rng::stream(config.seed, jobs.size()).next();
        jobs.push_back({groups.size(), i, o, c, chosen[o][i]});
      }
      groups.push_back(std::move(g));
    }
  }

  std::vector<AttackResult> results(jobs.size());
  std::vector<Eigen::RowVectorXd> probs(jobs.size());
  parallel_for(jobs.size(), worker_count(), [&](std::size_t j) {
    const Tensor x = test_set.images.item(jobs[j].image);
    results[j] = run_attack(model, x, jobs[j].cfg);
    check_attack_contract(results[j], x);
    probs[j] = predict_proba(model, results[j].x_adv).row(0);
  });

  StageWriter out(config, "attack");
  Json manifest_groups = Json::array();
  std::map<AttackKind, std::vector<const AttackResult*>> by_kind;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    auto& g = groups[gi];
    Json samples = Json::array();
    double succ = 0.0, linf = 0.0, l2 = 0.0;
    for (std::size_t j = 0; j < jobs.size(); ++j) {
      if (jobs[j].group != gi) continue;
      const auto& r = results[j];
      const Tensor x = test_set.images.item(jobs[j].image);
      const std::string file = g.dir + "/sample_" + std::to_string(jobs[j].sample) + ".bin";
      const double tp = probs[j](g.target), op = probs[j](g.origin);
      Json info{{"origin", g.origin},     {"target", g.target},          {"kind", to_string(g.kind)},
                {"image_index", jobs[j].image}, {"success", r.success}, {"predicted", r.predicted},
                {"steps_used", r.steps_used},   {"linf", r.linf()},     {"l2", r.l2()},
                {"target_prob", tp},            {"origin_prob", op},    {"confidence_trace", r.confidence_trace},
                {"attack", to_json(r.config)}};
      out.tensors(file, {x, r.x_adv, r.delta}, info);
      samples.push_back({{"file", file},       {"image_index", jobs[j].image}, {"success", r.success},
                         {"predicted", r.predicted}, {"linf", r.linf()},        {"l2", r.l2()},
                         {"target_prob", tp},  {"origin_prob", op}});
      succ += r.success;
      linf += r.linf();
      l2 += r.l2();
      by_kind[g.kind].push_back(&r);
    }
    const double n = static_cast<double>(samples.size());
    manifest_groups.push_back({{"origin", g.origin},
                               {"target", g.target},
                               {"kind", to_string(g.kind)},
                               {"dir", g.dir},
                               {"success_rate", succ / n},
                               {"mean_linf", linf / n},
                               {"mean_l2", l2 / n},
                               {"samples", samples}});
  }
  Json kinds = Json::object();
  for (const auto& base : config.grid.attacks) {
    const auto& rs = by_kind[base.kind];
    double succ = 0.0, linf = 0.0, l2 = 0.0;
    for (const auto* r : rs) {
      succ += r->success;
      linf += r->linf();
      l2 += r->l2();
    }
    const double n = static_cast<double>(rs.size());
    kinds[std::string(to_string(base.kind))] = {
        {"samples", rs.size()}, {"success_rate", succ / n}, {"mean_linf", linf / n}, {"mean_l2", l2 / n}};
  }
  out.json("manifest.json", {{"config_hash", out.hash()},
                             {"attack_hash", dependency_hash(config, true)},
                             {"model_checksum", metrics.at("model_checksum")},
                             {"kinds", kinds},
                             {"groups", manifest_groups}});
}

// ---------------------------------------------------------------- dissect: layers

namespace {

void dissect_layers(const ExperimentConfig& config, const Model& model, const std::vector<GroupRecord>& groups) {
  const auto& layers = config.analysis.profile_layers;
  std::vector<LayerProfile> profiles(groups.size());
  parallel_for(groups.size(), worker_count(), [&](std::size_t i) {
    const GroupTensors t = load_group(config, groups[i]);
    profiles[i] = layer_profile(model, layers, t.clean, t.adversarial);
  });

  StageWriter out(config, "layers");
  std::map<AttackKind, std::vector<const LayerProfile*>> by_kind;
  std::vector<Tensor> all_clean;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    CsvTable csv({"layer", "mean_cosine", "std_cosine"});
    for (std::size_t l = 0; l < layers.size(); ++l) {
      csv.add_row({layers[l], fmt(profiles[i].mean_sim[l]), fmt(profiles[i].std_sim[l])});
    }
    out.text(groups[i].dir + "/profile.csv", csv.str());
    by_kind[groups[i].kind].push_back(&profiles[i]);
  }

  // control: every clean probe image against itself
  for (const auto& g : groups) {
    if (g.kind != groups.front().kind) break;
    all_clean.push_back(load_group(config, g).clean);
  }
  const Tensor clean = concat_batch(all_clean);
  const LayerProfile control = layer_profile(model, layers, clean, clean);
  CsvTable control_csv({"layer", "mean_cosine", "std_cosine"});
  for (std::size_t l = 0; l < layers.size(); ++l) {
    control_csv.add_row({layers[l], fmt(control.mean_sim[l]), fmt(control.std_sim[l])});
  }
  out.text("control_profile.csv", control_csv.str());

  CsvTable summary({"kind", "layer", "mean_cosine", "std_across_groups"});
  Json kinds = Json::object();
  for (const auto& [kind, ps] : by_kind) {
    std::vector<double> means, stds;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      double m = 0.0;
      for (const auto* p : ps) m += p->mean_sim[l];
      m /= static_cast<double>(ps.size());
      double v = 0.0;
      for (const auto* p : ps) v += (p->mean_sim[l] - m) * (p->mean_sim[l] - m);
      means.push_back(m);
      stds.push_back(std::sqrt(v / static_cast<double>(ps.size())));
      summary.add_row({std::string(to_string(kind)), layers[l], fmt(means.back()), fmt(stds.back())});
    }
    kinds[std::string(to_string(kind))] = {{"groups", ps.size()}, {"mean_cosine", means}, {"std_across_groups", stds}};
  }
  out.text("summary.csv", summary.str());
  out.json("summary.json", {{"layers", layers}, {"kinds", kinds}, {"control_mean_cosine", control.mean_sim}});
}

// ---------------------------------------------------------------- dissect: mine

struct MineResult {
  ConceptBasis clean;
  ConceptBasis adversarial;
  SimilarityMatrix iou;
  SimilarityMatrix cosine;
  Matching matching;
  std::vector<int> changes;
  Vector importance_clean;
  Vector importance_adversarial;
  bool correlated = false;
  Correlations correlations;
  std::vector<SaliencyMap> saliency_clean;
  std::vector<SaliencyMap> saliency_adversarial;
};

// Importance of each concept; a component NMF drove to zero gets 0.
Vector safe_importance(const Model& model, const std::string& layer, const ConceptBasis& basis, int cls) {
  const Vector v = class_direction(model, layer, cls);
  Vector out(basis.components.rows());
  for (Index i = 0; i < out.size(); ++i) {
    const double n = basis.components.row(i).norm();
    out(i) = n > 0.0 ? v.dot(basis.components.row(i).transpose()) / n : 0.0;
  }
  return out;
}

MineResult mine_group(const ExperimentConfig& config, const Model& model, const GroupRecord& g, std::uint64_t seed) {
  const auto& an = config.analysis;
  const GroupTensors t = load_group(config, g);
  const ActivationBatch a_clean = relu(collect_activations(model, an.discovery_layer, t.clean));
  const ActivationBatch a_adv = relu(collect_activations(model, an.discovery_layer, t.adversarial));
  const NmfOptions opts{an.nmf_max_iters, an.nmf_tol, seed};

  MineResult r;
  r.clean = nmf_fit(a_clean, an.concepts, opts).basis;
  r.adversarial = nmf_fit(a_adv, an.concepts, opts).basis;
  const Index h = t.clean.dim(2), w = t.clean.dim(3);
  std::vector<ActivationBatch> probes_clean, probes_adv;
  for (Index s = 0; s < a_clean.batch; ++s) {
    probes_clean.push_back(a_clean.sample(s));
    probes_adv.push_back(a_adv.sample(s));
  }
  const std::string origin = std::to_string(g.origin);
  const auto rows = concept_labels(origin, "clean", an.concepts);
  const auto cols = concept_labels(origin, std::string(to_string(g.kind)), an.concepts);
  r.iou = iou_similarity_matrix(r.clean, r.adversarial, probes_clean, probes_adv, h, w, an.iou_quantile, rows, cols);
  r.iou.values *= 100.0;
  r.cosine.values = Matrix::Zero(an.concepts, an.concepts);
  for (Index i = 0; i < an.concepts; ++i) {
    for (Index j = 0; j < an.concepts; ++j) {
      const double ni = r.clean.components.row(i).norm(), nj = r.adversarial.components.row(j).norm();
      if (ni > 0.0 && nj > 0.0) r.cosine.values(i, j) = cosine(r.clean.components.row(i), r.adversarial.components.row(j));
    }
  }
  r.cosine.row_labels = rows;
  r.cosine.col_labels = cols;
  r.matching = match_concepts(r.iou.values);
  for (double th : an.change_thresholds) r.changes.push_back(count_changes(r.matching.diagonal, th));

  r.importance_clean = safe_importance(model, an.discovery_layer, r.clean, g.origin);
  r.importance_adversarial = safe_importance(model, an.discovery_layer, r.adversarial, g.origin);
  std::vector<double> matched_clean, matched_adv;
  for (Index i = 0; i < an.concepts; ++i) {
    matched_clean.push_back(r.importance_clean(i));
    matched_adv.push_back(r.importance_adversarial(r.matching.permutation[static_cast<std::size_t>(i)]));
  }
  if (an.concepts >= 3) {
    try {
      r.correlations = weight_correlations(matched_clean, matched_adv);
      r.correlated = true;
    } catch (const NumericError&) {
      r.correlated = false;  // constant importances: correlation undefined
    }
  }
  r.saliency_clean = project_saliency(probes_clean.front(), r.clean, h, w);
  r.saliency_adversarial = project_saliency(probes_adv.front(), r.adversarial, h, w);
  return r;
}

std::string basis_csv(const ConceptBasis& b, const std::vector<std::string>& labels) {
  std::vector<std::string> channels;
  for (Index c = 0; c < b.channels(); ++c) channels.push_back("ch" + std::to_string(c));
  return matrix_csv(b.components, labels, channels, "concept");
}

void dissect_mine(const ExperimentConfig& config, const Model& model, const std::vector<GroupRecord>& all) {
  const auto& an = config.analysis;
  std::vector<const GroupRecord*> groups;
  for (const auto& g : all) {
    if (has_kind(an.kinds, g.kind)) groups.push_back(&g);
  }
  std::vector<MineResult> results(groups.size());
  parallel_for(groups.size(), worker_count(), [&](std::size_t i) {
    results[i] = mine_group(config, model, *groups[i], group_seed(config, i, 0x6d696e65));
  });

  StageWriter out(config, "mine");
  std::map<AttackKind, std::vector<std::vector<double>>> changes_by_kind;  // [kind][threshold] -> per group
  std::map<AttackKind, std::vector<double>> pearson_by_kind, spearman_by_kind;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const auto& g = *groups[i];
    const auto& r = results[i];
    out.text(g.dir + "/basis_clean.csv", basis_csv(r.clean, r.iou.row_labels));
    out.text(g.dir + "/basis_adversarial.csv", basis_csv(r.adversarial, r.iou.col_labels));
    out.text(g.dir + "/iou.csv", matrix_csv(r.iou.values, r.iou.row_labels, r.iou.col_labels));
    out.text(g.dir + "/cosine.csv", matrix_csv(r.cosine.values, r.cosine.row_labels, r.cosine.col_labels));
    for (std::size_t s = 0; s < r.saliency_clean.size(); ++s) {
      out.pgm(g.dir + "/saliency_clean_" + std::to_string(s) + ".pgm", r.saliency_clean[s].upscaled);
      out.pgm(g.dir + "/saliency_adversarial_" + std::to_string(s) + ".pgm", r.saliency_adversarial[s].upscaled);
    }
    Json changes = Json::object();
    auto& per_kind = changes_by_kind[g.kind];
    per_kind.resize(an.change_thresholds.size());
    for (std::size_t k = 0; k < an.change_thresholds.size(); ++k) {
      changes[fmt(an.change_thresholds[k])] = r.changes[k];
      per_kind[k].push_back(r.changes[k]);
    }
    Json matched_pairs = Json::array();
    for (std::size_t k = 0; k < r.matching.permutation.size(); ++k) {
      matched_pairs.push_back({{"clean", r.iou.row_labels[k]},
                               {"adversarial", r.iou.col_labels[static_cast<std::size_t>(r.matching.permutation[k])]},
                               {"iou_percent", r.matching.diagonal[k]}});
    }
    Json corr = nullptr;
    if (r.correlated) {
      corr = {{"pearson", r.correlations.pearson}, {"spearman", r.correlations.spearman}};
      pearson_by_kind[g.kind].push_back(r.correlations.pearson);
      spearman_by_kind[g.kind].push_back(r.correlations.spearman);
    }
    const std::vector<double> imp_c(r.importance_clean.data(), r.importance_clean.data() + r.importance_clean.size());
    const std::vector<double> imp_a(r.importance_adversarial.data(),
                                    r.importance_adversarial.data() + r.importance_adversarial.size());
    out.json(g.dir + "/matching.json", {{"origin", g.origin},
                                        {"target", g.target},
                                        {"kind", to_string(g.kind)},
                                        {"permutation", r.matching.permutation},
                                        {"pairs", matched_pairs},
                                        {"trace", r.matching.trace},
                                        {"changes", changes},
                                        {"importance_clean", imp_c},
                                        {"importance_adversarial", imp_a},
                                        {"correlations", corr}});
  }

  CsvTable csv({"kind", "threshold", "mean_changes", "ci_lower", "ci_upper", "groups"});
  Json kinds = Json::object();
  for (const auto& [kind, per_threshold] : changes_by_kind) {
    Json th = Json::object();
    for (std::size_t k = 0; k < per_threshold.size(); ++k) {
      const Interval iv = student_t_interval(per_threshold[k], an.confidence);
      th[fmt(an.change_thresholds[k])] = {{"mean", iv.mean}, {"lower", iv.lower}, {"upper", iv.upper}, {"n", iv.n}};
      csv.add_row({std::string(to_string(kind)), fmt(an.change_thresholds[k]), fmt(iv.mean), fmt(iv.lower),
                   fmt(iv.upper), std::to_string(iv.n)});
    }
    const auto mean_of = [](const std::vector<double>& v) -> Json {
      if (v.empty()) return nullptr;
      double s = 0.0;
      for (double x : v) s += x;
      return s / static_cast<double>(v.size());
    };
    kinds[std::string(to_string(kind))] = {{"changes", th},
                                           {"mean_pearson", mean_of(pearson_by_kind[kind])},
                                           {"mean_spearman", mean_of(spearman_by_kind[kind])},
                                           {"correlated_groups", pearson_by_kind[kind].size()}};
  }
  out.text("changes.csv", csv.str());
  out.json("summary.json", {{"confidence", an.confidence}, {"kinds", kinds}});
}

// ---------------------------------------------------------------- dissect: anatomy

struct SampleCurves {
  std::size_t sample = 0;
  std::vector<InterpolationCurve> curves;  // full_delta first, then one per component
  double endpoint_error = 0.0;
  bool component_helps = false;
};

struct AnatomyGroup {
  std::vector<LatentPerturbation> perturbations;
  bool has_concepts = false;
  PerturbationConcepts concepts;
  std::vector<SampleCurves> samples;
};

std::size_t nearest(const std::vector<double>& grid, double v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (std::abs(grid[i] - v) < std::abs(grid[best] - v)) best = i;
  }
  return best;
}

AnatomyGroup anatomy_group(const ExperimentConfig& config, const Model& model, const GroupRecord& g,
                           std::uint64_t seed) {
  const auto& an = config.analysis;
  AnatomyGroup out;
  std::vector<std::size_t> sample_ids;
  std::vector<Tensor> clean;
  for (std::size_t s = 0; s < g.samples.size(); ++s) {
    if (!g.samples[s].success) continue;
    const auto t = load_tensors(stage_dir(config, "attack") / g.samples[s].file);
    LatentPerturbation p = latent_delta(model, an.discovery_layer, t[0], t[1]);
    p.origin_class = g.origin;
    p.target_class = g.target;
    p.attack_kind = g.kind;
    p.sample_id = g.samples[s].file;
    out.perturbations.push_back(std::move(p));
    sample_ids.push_back(s);
    clean.push_back(t[0]);
  }
  if (out.perturbations.empty()) return out;
  const bool positive = std::any_of(out.perturbations.begin(), out.perturbations.end(),
                                    [](const LatentPerturbation& p) { return p.delta_tilde.array().maxCoeff() > 0.0; });
  if (positive) {
    out.concepts = nmf_perturbation_basis(out.perturbations, an.perturbation_concepts,
                                          NmfOptions{an.nmf_max_iters, an.nmf_tol, seed});
    out.has_concepts = true;
  }

  const auto gammas = an.gammas();
  const std::size_t g0 = nearest(gammas, 0.0), g1 = nearest(gammas, 1.0);
  for (std::size_t i = 0; i < out.perturbations.size(); ++i) {
    const auto& p = out.perturbations[i];
    const auto& rec = g.samples[sample_ids[i]];
    SampleCurves sc;
    sc.sample = sample_ids[i];
    sc.curves.push_back(interpolate(model, an.discovery_layer, clean[i], p.delta_tilde, gammas, g.origin, g.target,
                                    "full_delta"));
    const auto& full = sc.curves.front();
    const Matrix p_clean = predict_proba(model, clean[i]);
    sc.endpoint_error = std::max({std::abs(full.conf_target[g1] - rec.target_prob),
                                  std::abs(full.conf_original[g1] - rec.origin_prob),
                                  std::abs(full.conf_target[g0] - p_clean(0, g.target)),
                                  std::abs(full.conf_original[g0] - p_clean(0, g.origin))});
    if (out.has_concepts) {
      for (Index k = 0; k < out.concepts.directions.rows(); ++k) {
        const Vector m = out.concepts.directions.row(k).transpose();
        if (!(m.norm() > 0.0)) continue;
        sc.curves.push_back(interpolate(model, an.discovery_layer, clean[i], project_component(p.delta_tilde, m), gammas,
                                        g.origin, g.target, "component_" + std::to_string(k)));
        const auto& c = sc.curves.back();
        if (c.conf_target[g1] > c.conf_target[g0]) sc.component_helps = true;
      }
    }
    out.samples.push_back(std::move(sc));
  }
  return out;
}

void dissect_anatomy(const ExperimentConfig& config, const Model& model, const std::vector<GroupRecord>& all) {
  const auto& an = config.analysis;
  std::vector<const GroupRecord*> groups;
  for (const auto& g : all) {
    if (has_kind(an.kinds, g.kind)) groups.push_back(&g);
  }
  std::vector<AnatomyGroup> results(groups.size());
  parallel_for(groups.size(), worker_count(), [&](std::size_t i) {
    results[i] = anatomy_group(config, model, *groups[i], group_seed(config, i, 0x616e6174));
  });

  StageWriter out(config, "anatomy");
  std::vector<std::string> channel_labels;
  const Index channels = model.output_shape(an.discovery_layer).front();
  for (Index c = 0; c < channels; ++c) channel_labels.push_back("ch" + std::to_string(c));

  std::map<AttackKind, std::vector<LatentPerturbation>> by_kind;
  std::map<AttackKind, std::array<std::size_t, 2>> helps;  // (helped, total)
  double max_endpoint = 0.0;
  std::size_t endpoint_samples = 0;
  std::vector<Vector> concept_rows;
  std::vector<int> concept_targets;
  std::vector<std::string> concept_names;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const auto& g = *groups[i];
    const auto& r = results[i];
    for (const auto& p : r.perturbations) by_kind[g.kind].push_back(p);
    if (r.has_concepts) {
      std::vector<std::string> labels;
      for (Index k = 0; k < r.concepts.directions.rows(); ++k) {
        labels.push_back(std::to_string(g.origin) + "-" + std::string(to_string(g.kind)) + "-" + std::to_string(k));
        if (r.concepts.directions.row(k).norm() > 0.0) {
          concept_rows.push_back(r.concepts.directions.row(k).transpose());
          concept_targets.push_back(g.target);
          concept_names.push_back(labels.back());
        }
      }
      out.text(g.dir + "/concepts.csv", matrix_csv(r.concepts.directions, labels, channel_labels, "concept"));
    }
    for (const auto& sc : r.samples) {
      CsvTable csv({"direction", "gamma", "conf_origin", "conf_target"});
      for (const auto& c : sc.curves) {
        for (std::size_t k = 0; k < c.gammas.size(); ++k) {
          csv.add_row({c.direction, fmt(c.gammas[k]), fmt(c.conf_original[k]), fmt(c.conf_target[k])});
        }
      }
      out.text(g.dir + "/curves_sample_" + std::to_string(sc.sample) + ".csv", csv.str());
      max_endpoint = std::max(max_endpoint, sc.endpoint_error);
      ++endpoint_samples;
      auto& h = helps[g.kind];
      h[0] += sc.component_helps;
      h[1] += 1;
    }
  }

  Json kinds = Json::object();
  for (const auto& [kind, perts] : by_kind) {
    Json entry{{"successful_samples", perts.size()}};
    std::set<std::pair<int, int>> pairs;
    for (const auto& p : perts) pairs.insert({p.origin_class, p.target_class});
    std::optional<VarianceProfile> profile;
    try {
      if (perts.size() >= 2) profile = variance_profile(perts, an.variance_levels);
    } catch (const NumericError&) {
      // every successful perturbation is zero, so there is nothing to decompose
    }
    entry["variance_profile"] = nullptr;
    if (profile) {
      const VarianceProfile& v = *profile;
      CsvTable csv({"retained_variance", "component_percent_mean", "component_percent_std"});
      for (std::size_t l = 0; l < v.retained_levels.size(); ++l) {
        csv.add_row({fmt(v.retained_levels[l]), fmt(v.component_fraction_mean[l]), fmt(v.component_fraction_std[l])});
      }
      out.text("variance_" + std::string(to_string(kind)) + ".csv", csv.str());
      entry["variance_profile"] = {{"levels", v.retained_levels},
                                   {"component_percent_mean", v.component_fraction_mean},
                                   {"component_percent_std", v.component_fraction_std},
                                   {"groups", v.groups}};
    }
    const auto& h = helps[kind];
    entry["interpolation"] = {{"samples", h[1]},
                              {"component_helps", h[0]},
                              {"component_helps_fraction", h[1] ? static_cast<double>(h[0]) / static_cast<double>(h[1]) : 0.0}};
    kinds[std::string(to_string(kind))] = entry;
  }

  std::set<int> targets(concept_targets.begin(), concept_targets.end());
  Json clustermaps = Json::object();
  for (int t : targets) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < concept_targets.size(); ++i) {
      if (concept_targets[i] == t) idx.push_back(i);
    }
    if (idx.size() < 2) continue;
    Matrix m(static_cast<Index>(idx.size()), channels);
    std::vector<std::string> labels;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      m.row(static_cast<Index>(i)) = concept_rows[idx[i]].transpose();
      labels.push_back(concept_names[idx[i]]);
    }
    const Clustermap cm = clustermap(m, labels);
    const std::string name = "clustermap_target_" + std::to_string(t);
    out.text(name + ".csv", matrix_csv(cm.matrix.values, cm.matrix.row_labels, cm.matrix.col_labels, "concept"));
    CsvTable link({"cluster_a", "cluster_b", "distance", "size"});
    for (const auto& row : cm.linkage) {
      link.add_row({fmt(row[0]), fmt(row[1]), fmt(row[2]), fmt(row[3])});
    }
    out.text(name + "_linkage.csv", link.str());
    clustermaps[std::to_string(t)] = idx.size();
  }

  Json specificity = nullptr;
  if (concept_rows.size() >= 2) {
    Matrix m(static_cast<Index>(concept_rows.size()), channels);
    for (std::size_t i = 0; i < concept_rows.size(); ++i) m.row(static_cast<Index>(i)) = concept_rows[i].transpose();
    const TargetSpecificity ts = target_specificity(m, concept_targets);
    std::set<int> origins;
    for (const auto* g : groups) origins.insert(g->origin);
    specificity = {{"same_target_mean_cosine", ts.same_target_mean},
                   {"cross_target_mean_cosine", ts.cross_target_mean},
                   {"same_pairs", ts.same_pairs},
                   {"cross_pairs", ts.cross_pairs},
                   {"targets", targets.size()},
                   {"origins", origins.size()}};
  }
  out.json("summary.json", {{"layer", an.discovery_layer},
                            {"channels", channels},
                            {"kinds", kinds},
                            {"endpoint_samples", endpoint_samples},
                            {"max_endpoint_error", max_endpoint},
                            {"clustermaps", clustermaps},
                            {"target_specificity", specificity}});
}

}  // namespace

void run_dissect(const ExperimentConfig& config, DissectStage stage) {
  config.validate();
  const Model model = load_trained_model(config);
  const auto groups = load_manifest(config);
  switch (stage) {
    case DissectStage::layers: dissect_layers(config, model, groups); break;
    case DissectStage::mine: dissect_mine(config, model, groups); break;
    case DissectStage::anatomy: dissect_anatomy(config, model, groups); break;
  }
}

// ---------------------------------------------------------------- report

void run_report(const ExperimentConfig& config) {
  config.validate();
  const std::string hash = hex64(config_hash(config));
  const auto load = [&](const std::string& stage, const std::string& file, bool required) -> Json {
    const fs::path path = stage_dir(config, stage) / file;
    if (!fs::exists(path)) {
      if (required) throw ConfigError("missing " + path.string() + " (run `" + stage + "` first)");
      return nullptr;
    }
    const Json meta = require_json(fs::path(path.string() + ".meta.json"), "metadata sidecar");
    require_same_config(meta, "config_hash", hash, path);
    return read_json(path);
  };
  const Json metrics = load("train", "metrics.json", true);
  const Json manifest = load("attack", "manifest.json", true);
  const Json layers = load("layers", "summary.json", false);
  const Json mine = load("mine", "summary.json", false);
  const Json anatomy = load("anatomy", "summary.json", false);

  Json trends = Json::object();
  if (!layers.is_null()) {
    Json snowball = Json::object();
    for (const auto& [kind, v] : layers.at("kinds").items()) {
      const auto& m = v.at("mean_cosine");
      snowball[kind] = m.back().get<double>() < m.front().get<double>();
    }
    trends["deepest_layer_less_similar"] = snowball;
  }
  if (!mine.is_null()) {
    // mean change count at the middle threshold per kind
    const auto& an = config.analysis;
    const std::string key = fmt(an.change_thresholds[an.change_thresholds.size() / 2]);
    Json changes = Json::object();
    for (const auto& [kind, v] : mine.at("kinds").items()) changes[kind] = v.at("changes").at(key).at("mean");
    trends["mean_changes_at_" + key] = changes;
  }
  if (!anatomy.is_null()) {
    Json concentration = Json::object();
    for (const auto& [kind, v] : anatomy.at("kinds").items()) {
      if (!v.at("variance_profile").is_null()) concentration[kind] = v.at("variance_profile").at("component_percent_mean");
    }
    trends["variance_component_percent"] = concentration;
    trends["target_specificity"] = anatomy.at("target_specificity");
  }

  StageWriter out(config, "report");
  out.json("summary.json", {{"config_hash", hash},
                            {"model_checksum", metrics.at("model_checksum")},
                            {"train_accuracy", metrics.at("train_accuracy")},
                            {"test_accuracy", metrics.at("test_accuracy")},
                            {"attacks", manifest.at("kinds")},
                            {"layers", layers},
                            {"mine", mine},
                            {"anatomy", anatomy},
                            {"trends", trends}});
}

}  // namespace advcon
