#pragma once

// Grid runner: backbone x strategy x shots x seed trials with per-trial
// files, results tables, plot data and an offline verifier.
//
// Output directory layout:
//   config.json            effective experiment config
//   grid.json              every cell of the Cartesian product
//   backbones/<id>.ckpt    frozen base backbones
//   plans/seed<seed>.json  shot plans, shared by every cell of a seed
//   records/<cell>.json    one immutable TrialRecord per cell
//   histories/<cell>.jsonl training histories
//   checkpoints/<cell>.ckpt strategy deltas
//   results.csv, results_pivot.csv, roc/, boxplot/  report outputs

#include "fsvlm/adaptation.hpp"
#include "fsvlm/archive.hpp"
#include "fsvlm/backbone.hpp"
#include "fsvlm/dataset.hpp"
#include "fsvlm/errors.hpp"
#include "fsvlm/fewshot.hpp"
#include "fsvlm/metrics.hpp"
#include "fsvlm/trainer.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

namespace fsvlm {

namespace fs = std::filesystem;

inline const std::vector<int> kDefaultGridShots = {0, 1, 2, 4, 8, 16, 32};

// --------------------------------------------------------------------------
// Config

struct DatasetSpec {
  std::optional<fs::path> manifest;  // real patches; otherwise synthetic
  int n_per_class = 100;
  int image_side = 32;
  std::uint64_t seed = 7;
};

struct BackboneSpec {
  std::optional<fs::path> checkpoint;  // saved base; otherwise a toy config
  BackboneConfig toy;
  std::string id;  // filled from the config or the checkpoint
};

struct ExperimentConfig {
  DatasetSpec dataset;
  std::vector<BackboneSpec> backbones;
  std::vector<Strategy> strategies = {Strategy::kVanilla, Strategy::kLora, Strategy::kAdapter,
                                      Strategy::kClassifier};
  std::vector<int> shots = kDefaultGridShots;
  std::vector<int> plan_levels = kDefaultShotLevels;
  std::vector<std::uint64_t> seeds = {kDefaultSeed};
  /// Overlays keyed by "default" or a strategy name; the strategy entry is
  /// applied on top of "default".
  std::map<std::string, nlohmann::json> adaptation;
  std::map<std::string, nlohmann::json> train;
  fs::path output_dir = "runs/default";

  /// Adaptation for one cell. A classifier in_dim that does not match the
  /// backbone fails the trial; it is never adjusted silently.
  AdaptationSpec adaptation_for(Strategy s, std::uint64_t seed) const {
    AdaptationSpec spec;
    for (const std::string& key : {std::string("default"), to_string(s)})
      if (auto it = adaptation.find(key); it != adaptation.end()) spec = adaptation_spec_from_json(it->second, spec);
    spec.strategy = s;
    spec.seed = seed;
    return spec;
  }

  TrainConfig train_for(Strategy s, std::uint64_t seed) const {
    TrainConfig c = default_train_config(s);
    for (const std::string& key : {std::string("default"), to_string(s)})
      if (auto it = train.find(key); it != train.end()) c = train_config_from_json(it->second, c);
    c.seed = seed;
    return c;
  }

  void validate() const {
    if (backbones.empty()) throw std::invalid_argument("experiment: no backbones");
    if (strategies.empty()) throw std::invalid_argument("experiment: no strategies");
    if (shots.empty()) throw std::invalid_argument("experiment: no shot levels");
    if (seeds.empty()) throw std::invalid_argument("experiment: no seeds");
    std::set<std::string> ids;
    for (const auto& b : backbones) {
      if (b.id.empty() || b.id.find_first_of("/\\ ,") != std::string::npos)
        throw std::invalid_argument("experiment: backbone id '" + b.id + "' is not a plain name");
      if (!ids.insert(b.id).second) throw std::invalid_argument("experiment: duplicate backbone id " + b.id);
    }
    if (std::set<Strategy>(strategies.begin(), strategies.end()).size() != strategies.size())
      throw std::invalid_argument("experiment: duplicate strategy");
    if (std::set<int>(shots.begin(), shots.end()).size() != shots.size())
      throw std::invalid_argument("experiment: duplicate shot level");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
      throw std::invalid_argument("experiment: duplicate seed");
    for (int s : shots)
      if (s != 0 && std::find(plan_levels.begin(), plan_levels.end(), s) == plan_levels.end())
        throw std::invalid_argument("experiment: shot level " + std::to_string(s) + " is not a plan level");
    for (const auto* overlays : {&adaptation, &train})
      for (const auto& [key, _] : *overlays)
        if (key != "default") strategy_from_string(key);
    // Parse every overlay once so errors surface before any trial runs.
    for (Strategy s : strategies) {
      (void)adaptation_for(s, 0);
      train_for(s, 0).validate();
    }
  }
};

namespace experiment_detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                           const std::string& where) {
  if (!j.is_object()) throw FormatError(where + " must be an object");
  for (const auto& [key, _] : j.items())
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw FormatError("unknown key '" + key + "' in " + where);
}

inline fs::path resolve(const fs::path& p, const fs::path& base) {
  return p.is_absolute() ? p : fs::weakly_canonical(base / p);
}

inline std::map<std::string, nlohmann::json> overlay_map(const nlohmann::json& j, const std::string& where) {
  if (!j.is_object()) throw FormatError(where + " must be an object");
  std::map<std::string, nlohmann::json> out;
  for (const auto& [key, value] : j.items()) out[key] = value;
  return out;
}

}  // namespace experiment_detail

/// Strict parse. Relative paths resolve against `base_dir`.
inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j, const fs::path& base_dir = ".") {
  using experiment_detail::reject_unknown;
  using experiment_detail::resolve;
  reject_unknown(j, {"dataset", "backbones", "strategies", "shots", "plan_levels", "seeds", "adaptation", "train",
                     "output_dir"},
                 "experiment config");
  ExperimentConfig c;
  try {
    if (j.contains("dataset")) {
      const auto& d = j["dataset"];
      reject_unknown(d, {"synthetic", "manifest"}, "dataset");
      if (d.contains("synthetic") == d.contains("manifest"))
        throw FormatError("dataset needs exactly one of 'synthetic' or 'manifest'");
      if (d.contains("manifest")) {
        c.dataset.manifest = resolve(d["manifest"].get<std::string>(), base_dir);
      } else {
        const auto& s = d["synthetic"];
        reject_unknown(s, {"n_per_class", "image_side", "seed"}, "dataset.synthetic");
        c.dataset.n_per_class = s.value("n_per_class", c.dataset.n_per_class);
        c.dataset.image_side = s.value("image_side", c.dataset.image_side);
        c.dataset.seed = s.value("seed", c.dataset.seed);
      }
    }
    if (j.contains("backbones")) {
      if (!j["backbones"].is_array()) throw FormatError("backbones must be an array");
      for (const auto& b : j["backbones"]) {
        reject_unknown(b, {"toy", "checkpoint"}, "backbone");
        if (b.contains("toy") == b.contains("checkpoint"))
          throw FormatError("backbone needs exactly one of 'toy' or 'checkpoint'");
        BackboneSpec spec;
        if (b.contains("toy")) {
          spec.toy = backbone_config_from_json(b["toy"]);
          spec.id = spec.toy.id;
        } else {
          spec.checkpoint = resolve(b["checkpoint"].get<std::string>(), base_dir);
          const Archive a = read_archive(*spec.checkpoint);
          spec.toy = backbone_config_from_json(a.metadata.at("config"));
          spec.id = spec.toy.id;
        }
        c.backbones.push_back(std::move(spec));
      }
    } else {
      BackboneSpec spec;
      spec.id = spec.toy.id;
      c.backbones.push_back(spec);
    }
    if (j.contains("strategies")) {
      c.strategies.clear();
      for (const auto& s : j["strategies"]) c.strategies.push_back(strategy_from_string(s.get<std::string>()));
    }
    if (j.contains("shots")) c.shots = j["shots"].get<std::vector<int>>();
    if (j.contains("plan_levels")) c.plan_levels = j["plan_levels"].get<std::vector<int>>();
    if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    if (j.contains("adaptation")) c.adaptation = experiment_detail::overlay_map(j["adaptation"], "adaptation");
    if (j.contains("train")) c.train = experiment_detail::overlay_map(j["train"], "train");
    if (j.contains("output_dir")) c.output_dir = resolve(j["output_dir"].get<std::string>(), base_dir);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("experiment config: ") + e.what());
  }
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(e.what());
  }
  return c;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json dataset;
  if (c.dataset.manifest) {
    dataset["manifest"] = c.dataset.manifest->string();
  } else {
    dataset["synthetic"] = {{"n_per_class", c.dataset.n_per_class},
                            {"image_side", c.dataset.image_side},
                            {"seed", c.dataset.seed}};
  }
  nlohmann::json backbones = nlohmann::json::array();
  for (const auto& b : c.backbones) {
    if (b.checkpoint) backbones.push_back({{"checkpoint", b.checkpoint->string()}});
    else backbones.push_back({{"toy", to_json(b.toy)}});
  }
  nlohmann::json strategies = nlohmann::json::array();
  for (Strategy s : c.strategies) strategies.push_back(to_string(s));
  return {{"dataset", dataset},
          {"backbones", backbones},
          {"strategies", strategies},
          {"shots", c.shots},
          {"plan_levels", c.plan_levels},
          {"seeds", c.seeds},
          {"adaptation", c.adaptation},
          {"train", c.train},
          {"output_dir", c.output_dir.string()}};
}

inline ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return experiment_config_from_json(j, fs::absolute(path).parent_path());
}

inline std::vector<PatchSample> load_dataset(const DatasetSpec& d) {
  if (d.manifest) return read_patch_set(*d.manifest);
  return generate_synthetic_dataset(d.n_per_class, d.image_side, d.seed);
}

inline Backbone load_base_backbone(const BackboneSpec& b) {
  return b.checkpoint ? load_backbone(*b.checkpoint) : build_toy_backbone(b.toy);
}

// --------------------------------------------------------------------------
// Cells and records

struct Cell {
  std::string backbone;
  std::string strategy;
  int shots = 0;
  std::uint64_t seed = 0;

  auto key() const { return std::tie(backbone, strategy, shots, seed); }
  bool operator<(const Cell& o) const { return key() < o.key(); }
  bool operator==(const Cell& o) const { return key() == o.key(); }

  std::string stem() const {
    return backbone + "__" + strategy + "__shots" + std::to_string(shots) + "__seed" + std::to_string(seed);
  }
};

inline std::vector<Cell> grid_cells(const ExperimentConfig& c) {
  std::vector<Cell> out;
  for (const auto& b : c.backbones)
    for (Strategy s : c.strategies)
      for (int shots : c.shots)
        for (std::uint64_t seed : c.seeds) out.push_back({b.id, to_string(s), shots, seed});
  return out;
}

/// `--only` filter: comma-separated key=value terms. Repeating a key
/// allows several values for it; absent keys match everything.
struct CellFilter {
  std::map<std::string, std::set<std::string>> terms;

  static CellFilter parse(const std::string& text) {
    CellFilter f;
    std::stringstream ss(text);
    std::string term;
    while (std::getline(ss, term, ',')) {
      if (term.empty()) continue;
      const auto eq = term.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("filter term without '=': " + term);
      const std::string key = term.substr(0, eq);
      if (key != "backbone" && key != "strategy" && key != "shots" && key != "seed")
        throw std::invalid_argument("unknown filter key: " + key);
      f.terms[key].insert(term.substr(eq + 1));
    }
    return f;
  }

  bool matches(const Cell& c) const {
    auto ok = [&](const char* key, const std::string& value) {
      auto it = terms.find(key);
      return it == terms.end() || it->second.count(value) > 0;
    };
    return ok("backbone", c.backbone) && ok("strategy", c.strategy) && ok("shots", std::to_string(c.shots)) &&
           ok("seed", std::to_string(c.seed));
  }
};

struct TrialRecord {
  Cell cell;
  bool ok = false;
  std::string error;
  std::optional<EvalResult> eval;
  std::string history;     // path relative to the run directory, empty for zero-shot
  std::string checkpoint;  // idem
  std::string base_hash;
  std::string validation_hash;
  std::size_t train_size = 0;
  std::size_t validation_size = 0;
  std::size_t trainable_parameters = 0;
  double duration_s = 0.0;
};

inline nlohmann::json to_json(const TrialRecord& r) {
  return {{"backbone", r.cell.backbone},
          {"strategy", r.cell.strategy},
          {"shots", r.cell.shots},
          {"seed", r.cell.seed},
          {"status", r.ok ? "ok" : "failed"},
          {"error", r.error},
          {"eval", r.eval ? to_json(*r.eval) : nlohmann::json()},
          {"history", r.history},
          {"checkpoint", r.checkpoint},
          {"base_hash", r.base_hash},
          {"validation_hash", r.validation_hash},
          {"train_size", r.train_size},
          {"validation_size", r.validation_size},
          {"trainable_parameters", r.trainable_parameters},
          {"duration_s", r.duration_s}};
}

inline TrialRecord trial_record_from_json(const nlohmann::json& j) {
  try {
    TrialRecord r;
    r.cell = {j.at("backbone").get<std::string>(), j.at("strategy").get<std::string>(), j.at("shots").get<int>(),
              j.at("seed").get<std::uint64_t>()};
    r.ok = j.at("status").get<std::string>() == "ok";
    r.error = j.at("error").get<std::string>();
    if (!j.at("eval").is_null()) r.eval = eval_result_from_json(j.at("eval"));
    r.history = j.at("history").get<std::string>();
    r.checkpoint = j.at("checkpoint").get<std::string>();
    r.base_hash = j.at("base_hash").get<std::string>();
    r.validation_hash = j.at("validation_hash").get<std::string>();
    r.train_size = j.at("train_size").get<std::size_t>();
    r.validation_size = j.at("validation_size").get<std::size_t>();
    r.trainable_parameters = j.at("trainable_parameters").get<std::size_t>();
    r.duration_s = j.at("duration_s").get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed trial record: ") + e.what());
  }
}

namespace experiment_detail {

inline void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << text;
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline nlohmann::json read_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline std::string index_hash(const std::vector<std::size_t>& indices) {
  std::string text;
  for (std::size_t i : indices) text += std::to_string(i) + ",";
  return to_hex(sha256(text.data(), text.size()));
}

/// Shortest text that parses back to the same double.
inline std::string exact(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string fixed4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace experiment_detail

inline fs::path record_path(const fs::path& run_dir, const Cell& c) {
  return run_dir / "records" / (c.stem() + ".json");
}

inline void write_record(const fs::path& run_dir, const TrialRecord& r) {
  experiment_detail::write_text(record_path(run_dir, r.cell), to_json(r).dump(1) + "\n");
}

/// Every record in `<run_dir>/records`, sorted by cell.
inline std::vector<TrialRecord> load_records(const fs::path& run_dir) {
  const fs::path dir = run_dir / "records";
  if (!fs::is_directory(dir)) throw IoError("no records directory in " + run_dir.string());
  std::vector<TrialRecord> out;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.path().extension() == ".json")
      out.push_back(trial_record_from_json(experiment_detail::read_json(entry.path())));
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.cell < b.cell; });
  return out;
}

/// Accepts either a run directory or its records/ subdirectory.
inline fs::path run_dir_of(fs::path p) {
  p = p.lexically_normal();
  if (p.filename().empty()) p = p.parent_path();
  if (!fs::is_directory(p / "records") && p.filename() == "records") return p.parent_path();
  return p;
}

// --------------------------------------------------------------------------
// Trials

/// Read-only state shared by every trial of one backbone and seed.
struct TrialContext {
  const ExperimentConfig* config = nullptr;
  const std::vector<PatchSample>* dataset = nullptr;
  const Backbone* base = nullptr;
  std::string base_hash;
  const ShotPlan* plan = nullptr;
  fs::path run_dir;
};

inline EvalResult evaluate_model(AdaptedModel& model, const std::vector<PatchSample>& validation) {
  std::vector<const Image*> images;
  images.reserve(validation.size());
  for (const auto& s : validation) images.push_back(&s.pixels);
  return evaluate(model.predict_probabilities(images), labels_of(validation));
}

/// Run one cell. Errors are captured in the returned record.
inline TrialRecord run_trial(const TrialContext& ctx, const Cell& cell) {
  const auto t0 = std::chrono::steady_clock::now();
  TrialRecord r;
  r.cell = cell;
  r.base_hash = ctx.base_hash;
  r.validation_hash = experiment_detail::index_hash(ctx.plan->validation);
  try {
    const Split split = materialize(*ctx.plan, cell.shots, *ctx.dataset);
    r.train_size = split.train.size();
    r.validation_size = split.validation.size();
    if (cell.shots == 0) {
      AdaptedModel model = AdaptedModel::zero_shot(*ctx.base);
      r.eval = evaluate_model(model, split.validation);
    } else {
      const Strategy s = strategy_from_string(cell.strategy);
      const AdaptationSpec spec = ctx.config->adaptation_for(s, cell.seed);
      AdaptedModel model = AdaptedModel::adapt(*ctx.base, spec);
      r.trainable_parameters = model.trainable_parameters().scalar_count();
      const TrainingHistory history = train(model, split.train, split.validation, ctx.config->train_for(s, cell.seed));
      r.history = "histories/" + cell.stem() + ".jsonl";
      fs::create_directories(ctx.run_dir / "histories");
      write_history(ctx.run_dir / r.history, history);
      r.checkpoint = "checkpoints/" + cell.stem() + ".ckpt";
      fs::create_directories(ctx.run_dir / "checkpoints");
      save_adapted(ctx.run_dir / r.checkpoint, model, ctx.base_hash);
      r.eval = evaluate_model(model, split.validation);
    }
    r.ok = true;
  } catch (const std::exception& e) {
    r.ok = false;
    r.eval.reset();
    r.error = e.what();
  }
  r.duration_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

/// Worker count from FSVLM_NUM_WORKERS, else the hardware thread count.
inline unsigned worker_count() {
  if (const char* env = std::getenv("FSVLM_NUM_WORKERS"); env != nullptr && *env != '\0') {
    int n = 0;
    const auto res = std::from_chars(env, env + std::strlen(env), n);
    if (res.ec != std::errc() || *res.ptr != '\0' || n < 1)
      throw std::invalid_argument(std::string("FSVLM_NUM_WORKERS must be a positive integer, got '") + env + "'");
    return static_cast<unsigned>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

struct RunOptions {
  CellFilter only;
  unsigned workers = 0;  // 0: worker_count()
  bool quiet = false;
};

struct GridResult {
  std::vector<TrialRecord> records;  // cells selected for this run, sorted
  std::size_t executed = 0;          // trials run now rather than reused
  std::size_t failed() const {
    return static_cast<std::size_t>(std::count_if(records.begin(), records.end(), [](const auto& r) { return !r.ok; }));
  }
};

/// Runs every selected cell whose record does not exist yet. Existing
/// records are reused untouched, so reruns only fill gaps.
inline GridResult run_grid(const ExperimentConfig& config, const RunOptions& options = {}) {
  using namespace experiment_detail;
  config.validate();
  const fs::path run_dir = config.output_dir;
  fs::create_directories(run_dir / "records");

  const std::string config_text = to_json(config).dump(1) + "\n";
  if (fs::exists(run_dir / "config.json")) {
    if (read_text(run_dir / "config.json") != config_text)
      throw std::invalid_argument("output directory " + run_dir.string() + " holds a different experiment");
  } else {
    write_text(run_dir / "config.json", config_text);
  }
  nlohmann::json grid = nlohmann::json::array();
  for (const Cell& c : grid_cells(config))
    grid.push_back({{"backbone", c.backbone}, {"strategy", c.strategy}, {"shots", c.shots}, {"seed", c.seed}});
  write_text(run_dir / "grid.json", grid.dump(1) + "\n");

  const std::vector<PatchSample> dataset = load_dataset(config.dataset);
  const std::vector<int> labels = labels_of(dataset);

  std::map<std::string, Backbone> bases;
  std::map<std::string, std::string> hashes;
  for (const auto& spec : config.backbones) {
    Backbone b = load_base_backbone(spec);
    const fs::path path = run_dir / "backbones" / (spec.id + ".ckpt");
    const std::string hash = parameter_hash(b.parameters());
    if (fs::exists(path)) {
      Backbone saved = load_backbone(path);
      if (parameter_hash(saved.parameters()) != hash)
        throw IntegrityError("stored base backbone " + path.string() + " differs from the configured one");
    } else {
      fs::create_directories(path.parent_path());
      save_backbone(path, b);
    }
    hashes[spec.id] = hash;
    bases.emplace(spec.id, std::move(b));
  }

  std::map<std::uint64_t, ShotPlan> plans;
  for (std::uint64_t seed : config.seeds) {
    ShotPlan plan = build_shot_plan(labels, config.plan_levels, seed);
    const fs::path path = run_dir / "plans" / ("seed" + std::to_string(seed) + ".json");
    if (fs::exists(path)) {
      if (!(load_shot_plan(path) == plan)) throw IntegrityError("stored shot plan differs: " + path.string());
    } else {
      fs::create_directories(path.parent_path());
      save_shot_plan(path, plan);
    }
    plans.emplace(seed, std::move(plan));
  }

  GridResult result;
  std::vector<Cell> pending;
  for (const Cell& c : grid_cells(config)) {
    if (!options.only.matches(c)) continue;
    if (fs::exists(record_path(run_dir, c))) result.records.push_back(trial_record_from_json(read_json(record_path(run_dir, c))));
    else pending.push_back(c);
  }

  std::mutex mu;
  std::atomic<std::size_t> next{0};
  std::size_t done = 0;
  auto worker = [&] {
    for (std::size_t i = next++; i < pending.size(); i = next++) {
      const Cell& cell = pending[i];
      TrialContext ctx{&config, &dataset, &bases.at(cell.backbone), hashes.at(cell.backbone), &plans.at(cell.seed),
                       run_dir};
      TrialRecord rec = run_trial(ctx, cell);
      write_record(run_dir, rec);
      std::lock_guard lock(mu);
      ++done;
      if (!options.quiet) {
        std::cerr << "[" << done << "/" << pending.size() << "] " << cell.stem() << " ";
        if (rec.ok) std::cerr << "acc=" << fixed4(rec.eval->accuracy) << " auc=" << fixed4(rec.eval->macro_auc);
        else std::cerr << "FAILED: " << rec.error;
        std::cerr << " (" << fixed4(rec.duration_s) << " s)\n";
      }
      result.records.push_back(std::move(rec));
    }
  };
  const unsigned n_workers =
      std::min<unsigned>(options.workers > 0 ? options.workers : worker_count(),
                         static_cast<unsigned>(std::max<std::size_t>(1, pending.size())));
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned i = 0; i < n_workers; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  result.executed = pending.size();
  std::sort(result.records.begin(), result.records.end(), [](const auto& a, const auto& b) { return a.cell < b.cell; });
  return result;
}

// --------------------------------------------------------------------------
// Reports. Every output is a pure function of the records.

inline constexpr const char* kResultsHeader = "backbone,strategy,shots,seed,accuracy,macro_auc,macro_f1";

/// Flat table of successful trials, sorted by cell.
inline std::string emit_results_table(std::vector<TrialRecord> records) {
  using experiment_detail::fixed4;
  std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) { return a.cell < b.cell; });
  std::string out = std::string(kResultsHeader) + "\n";
  for (const auto& r : records) {
    if (!r.ok || !r.eval) continue;
    out += r.cell.backbone + "," + r.cell.strategy + "," + std::to_string(r.cell.shots) + "," +
           std::to_string(r.cell.seed) + "," + fixed4(r.eval->accuracy) + "," + fixed4(r.eval->macro_auc) + "," +
           fixed4(r.eval->macro_f1) + "\n";
  }
  return out;
}

struct ResultRow {
  Cell cell;
  double accuracy = 0.0;
  double macro_auc = 0.0;
  double macro_f1 = 0.0;
};

inline std::vector<ResultRow> parse_results_table(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kResultsHeader) throw FormatError("results table header mismatch");
  std::vector<ResultRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string field; std::getline(ss, field, ',');) f.push_back(field);
    if (f.size() != 7) throw FormatError("results row needs 7 fields: " + line);
    try {
      rows.push_back({{f[0], f[1], std::stoi(f[2]), std::stoull(f[3])}, std::stod(f[4]), std::stod(f[5]),
                      std::stod(f[6])});
    } catch (const std::logic_error&) {
      throw FormatError("bad number in results row: " + line);
    }
  }
  return rows;
}

/// Companion view: one row per (backbone, strategy, metric), one column per
/// shot level, values averaged over seeds.
inline std::string emit_results_pivot(const std::vector<TrialRecord>& records) {
  using experiment_detail::fixed4;
  std::set<int> shots;
  std::map<std::pair<std::string, std::string>, std::map<int, std::vector<const EvalResult*>>> cells;
  for (const auto& r : records) {
    if (!r.ok || !r.eval) continue;
    shots.insert(r.cell.shots);
    cells[{r.cell.backbone, r.cell.strategy}][r.cell.shots].push_back(&*r.eval);
  }
  std::string out = "backbone,strategy,metric";
  for (int s : shots) out += ",shots_" + std::to_string(s);
  out += "\n";
  const std::pair<const char*, double EvalResult::*> metrics[] = {
      {"accuracy", &EvalResult::accuracy}, {"macro_auc", &EvalResult::macro_auc}, {"macro_f1", &EvalResult::macro_f1}};
  for (const auto& [key, by_shots] : cells) {
    for (const auto& [name, member] : metrics) {
      out += key.first + "," + key.second + "," + name;
      for (int s : shots) {
        out += ",";
        auto it = by_shots.find(s);
        if (it == by_shots.end()) continue;
        double sum = 0.0;
        for (const EvalResult* e : it->second) sum += e->*member;
        out += fixed4(sum / static_cast<double>(it->second.size()));
      }
      out += "\n";
    }
  }
  return out;
}

inline std::string roc_csv(const EvalResult& e) {
  using experiment_detail::exact;
  std::string out = "class,fpr,tpr,threshold\n";
  for (std::size_t c = 0; c < e.roc.size(); ++c)
    for (const auto& p : e.roc[c])
      out += std::to_string(c) + "," + exact(p.fpr) + "," + exact(p.tpr) + "," + exact(p.threshold) + "\n";
  return out;
}

/// One file per successful trial under `dir`. Returns the paths written.
inline std::vector<fs::path> emit_roc_data(const std::vector<TrialRecord>& records, const fs::path& dir) {
  std::vector<fs::path> written;
  for (const auto& r : records) {
    if (!r.ok || !r.eval) continue;
    written.push_back(dir / (r.cell.stem() + ".csv"));
    experiment_detail::write_text(written.back(), roc_csv(*r.eval));
  }
  return written;
}

/// Per (backbone, strategy, seed): rows of true-class probability box
/// statistics by shots and class, plus an "overall" row per shot level.
inline std::map<std::string, std::string> boxplot_tables(std::vector<TrialRecord> records) {
  using experiment_detail::exact;
  std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) { return a.cell < b.cell; });
  std::map<std::string, std::string> tables;
  auto row = [](int shots, const std::string& cls, const BoxStats& s) {
    return std::to_string(shots) + "," + cls + "," + exact(s.median) + "," + exact(s.q1) + "," + exact(s.q3) + "," +
           exact(s.lo) + "," + exact(s.hi) + "," + std::to_string(s.outliers.size()) + "\n";
  };
  for (const auto& r : records) {
    if (!r.ok || !r.eval) continue;
    const std::string name = r.cell.backbone + "__" + r.cell.strategy + "__seed" + std::to_string(r.cell.seed);
    std::string& t = tables[name];
    if (t.empty()) t = "shots,class,median,q1,q3,lo,hi,n_outliers\n";
    const auto& box = r.eval->boxplot;
    for (std::size_t c = 0; c < box.per_class.size(); ++c) t += row(r.cell.shots, std::to_string(c), box.per_class[c]);
    t += row(r.cell.shots, "overall", box.overall);
  }
  return tables;
}

inline std::vector<fs::path> emit_boxplot_data(const std::vector<TrialRecord>& records, const fs::path& dir) {
  std::vector<fs::path> written;
  for (const auto& [name, text] : boxplot_tables(records)) {
    written.push_back(dir / (name + ".csv"));
    experiment_detail::write_text(written.back(), text);
  }
  return written;
}

inline void write_results_tables(const fs::path& run_dir, const std::vector<TrialRecord>& records) {
  experiment_detail::write_text(run_dir / "results.csv", emit_results_table(records));
  experiment_detail::write_text(run_dir / "results_pivot.csv", emit_results_pivot(records));
}

// --------------------------------------------------------------------------
// Verification

/// Rebuild the trained model of a record from its run directory. Zero-shot
/// records yield the untouched base.
inline AdaptedModel checkpoint_roundtrip(const fs::path& run_dir, const TrialRecord& r) {
  Backbone base = load_backbone(run_dir / "backbones" / (r.cell.backbone + ".ckpt"));
  if (parameter_hash(base.parameters()) != r.base_hash)
    throw IntegrityError("base backbone of " + r.cell.stem() + " changed since the trial ran");
  if (r.checkpoint.empty()) return AdaptedModel::zero_shot(std::move(base));
  return load_adapted(run_dir / r.checkpoint, std::move(base));
}

struct VerifyReport {
  std::size_t records = 0;
  std::size_t reevaluated = 0;
  std::vector<std::string> failures;
  bool ok() const { return failures.empty(); }
};

/// Re-checks a finished run: grid completeness, trial status, validation
/// set identity per seed, zero-shot invariance, checkpoint integrity with
/// exact re-evaluation, history presence and report reproducibility.
inline VerifyReport verify(const fs::path& run_dir_in) {
  using namespace experiment_detail;
  const fs::path run_dir = run_dir_of(run_dir_in);
  VerifyReport rep;
  auto fail = [&](std::string msg) { rep.failures.push_back(std::move(msg)); };

  const ExperimentConfig config = experiment_config_from_json(read_json(run_dir / "config.json"), run_dir);
  const std::vector<TrialRecord> records = load_records(run_dir);
  rep.records = records.size();

  std::set<Cell> expected;
  for (const Cell& c : grid_cells(config)) expected.insert(c);
  std::set<Cell> present;
  for (const auto& r : records) {
    if (!present.insert(r.cell).second) fail("duplicate record " + r.cell.stem());
    if (!expected.count(r.cell)) fail("record outside the configured grid: " + r.cell.stem());
    if (!r.ok) fail("trial failed: " + r.cell.stem() + ": " + r.error);
  }
  for (const Cell& c : expected)
    if (!present.count(c)) fail("missing record " + c.stem());

  const std::vector<PatchSample> dataset = load_dataset(config.dataset);
  std::map<std::uint64_t, ShotPlan> plans;
  for (std::uint64_t seed : config.seeds) {
    const fs::path path = run_dir / "plans" / ("seed" + std::to_string(seed) + ".json");
    try {
      ShotPlan stored = load_shot_plan(path);
      if (!(stored == build_shot_plan(labels_of(dataset), config.plan_levels, seed)))
        fail("shot plan does not match its seed: " + path.string());
      plans.emplace(seed, std::move(stored));
    } catch (const std::exception& e) {
      fail(e.what());
    }
  }

  std::map<std::tuple<std::string, std::uint64_t>, const TrialRecord*> zero_shot_ref;
  for (const auto& r : records) {
    if (!r.ok) continue;
    auto plan = plans.find(r.cell.seed);
    if (plan != plans.end() && r.validation_hash != index_hash(plan->second.validation))
      fail("validation set differs from the seed's plan: " + r.cell.stem());
    if (r.cell.shots == 0) {
      auto [it, inserted] = zero_shot_ref.try_emplace({r.cell.backbone, r.cell.seed}, &r);
      if (!inserted && to_json(*it->second->eval) != to_json(*r.eval))
        fail("zero-shot results differ across strategies: " + r.cell.stem() + " vs " + it->second->cell.stem());
    } else if (r.history.empty() || !fs::exists(run_dir / r.history)) {
      fail("missing history for " + r.cell.stem());
    } else {
      try {
        (void)read_history(run_dir / r.history);
      } catch (const std::exception& e) {
        fail("unreadable history for " + r.cell.stem() + ": " + e.what());
      }
    }
    if (plan == plans.end()) continue;
    try {
      AdaptedModel model = checkpoint_roundtrip(run_dir, r);
      const Split split = materialize(plan->second, 0, dataset);
      const EvalResult again = evaluate_model(model, split.validation);
      ++rep.reevaluated;
      if (to_json(again) != to_json(*r.eval)) fail("re-evaluation differs from the record: " + r.cell.stem());
    } catch (const std::exception& e) {
      fail("checkpoint of " + r.cell.stem() + " rejected: " + e.what());
    }
  }

  for (const auto& [name, expected_text] :
       {std::pair<const char*, std::string>{"results.csv", emit_results_table(records)},
        std::pair<const char*, std::string>{"results_pivot.csv", emit_results_pivot(records)}}) {
    if (fs::exists(run_dir / name) && read_text(run_dir / name) != expected_text)
      fail(std::string(name) + " is not reproducible from the records");
  }
  if (fs::is_directory(run_dir / "boxplot"))
    for (const auto& [name, text] : boxplot_tables(records))
      if (!fs::exists(run_dir / "boxplot" / (name + ".csv")) ||
          read_text(run_dir / "boxplot" / (name + ".csv")) != text)
        fail("boxplot/" + name + ".csv is not reproducible from the records");
  if (fs::is_directory(run_dir / "roc"))
    for (const auto& r : records)
      if (r.ok && r.eval) {
        const fs::path p = run_dir / "roc" / (r.cell.stem() + ".csv");
        if (!fs::exists(p) || read_text(p) != roc_csv(*r.eval))
          fail("roc/" + r.cell.stem() + ".csv is not reproducible from the records");
      }
  return rep;
}

}  // namespace fsvlm
