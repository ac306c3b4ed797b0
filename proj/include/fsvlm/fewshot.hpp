#pragma once

#include "fsvlm/dataset.hpp"
#include "fsvlm/errors.hpp"
#include "fsvlm/random.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace fsvlm {

inline const std::vector<int> kDefaultShotLevels = {1, 2, 4, 8, 16, 32};

/// Strictly nested per-class training pools plus a disjoint validation set.
/// Level s takes the first min(s, |class|) entries of each class's seeded
/// permutation, so every smaller level is a prefix of every larger one.
struct ShotPlan {
  std::uint64_t seed = kDefaultSeed;
  std::vector<int> levels;
  std::vector<std::vector<std::size_t>> per_class_order;
  std::vector<std::size_t> validation;  // ascending
  /// Classes with fewer samples than the largest level.
  std::vector<int> undersized_classes;

  int max_level() const { return levels.empty() ? 0 : levels.back(); }
  bool has_level(int level) const {
    return level == 0 || std::find(levels.begin(), levels.end(), level) != levels.end();
  }

  /// Class-major training indices for `level` (0 yields none).
  std::vector<std::size_t> train_indices(int level) const {
    if (!has_level(level)) throw std::invalid_argument("unknown shot level " + std::to_string(level));
    std::vector<std::size_t> out;
    for (const auto& order : per_class_order) {
      const auto take = std::min<std::size_t>(static_cast<std::size_t>(level), order.size());
      out.insert(out.end(), order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take));
    }
    return out;
  }

  bool operator==(const ShotPlan&) const = default;
};

inline ShotPlan build_shot_plan(const std::vector<int>& labels, std::vector<int> levels,
                                std::uint64_t seed, int num_classes = kNumClasses) {
  if (levels.empty()) throw std::invalid_argument("build_shot_plan: no shot levels");
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (levels[i] < 1) throw std::invalid_argument("build_shot_plan: shot levels must be >= 1");
    if (i > 0 && levels[i] <= levels[i - 1])
      throw std::invalid_argument("build_shot_plan: shot levels must be strictly increasing");
  }
  ShotPlan plan;
  plan.seed = seed;
  plan.levels = std::move(levels);
  plan.per_class_order.resize(static_cast<std::size_t>(num_classes));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= num_classes) throw std::out_of_range("build_shot_plan: label out of range");
    plan.per_class_order[static_cast<std::size_t>(y)].push_back(i);
  }
  Rng rng(seed);
  const auto cap = static_cast<std::size_t>(plan.max_level());
  std::vector<bool> selected(labels.size(), false);
  for (int c = 0; c < num_classes; ++c) {
    auto& order = plan.per_class_order[static_cast<std::size_t>(c)];
    if (order.empty())
      throw std::invalid_argument("build_shot_plan: class " + std::to_string(c) + " has no samples");
    rng.shuffle(order);
    if (order.size() < cap) plan.undersized_classes.push_back(c);
    for (std::size_t k = 0; k < std::min(cap, order.size()); ++k) selected[order[k]] = true;
  }
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (!selected[i]) plan.validation.push_back(i);
  return plan;
}

struct Split {
  std::vector<PatchSample> train;
  std::vector<PatchSample> validation;
};

inline Split materialize(const ShotPlan& plan, int level, const std::vector<PatchSample>& dataset) {
  if (!plan.has_level(level))
    throw std::invalid_argument("materialize: level " + std::to_string(level) + " not in plan");
  Split out;
  for (std::size_t i : plan.train_indices(level)) out.train.push_back(dataset.at(i));
  for (std::size_t i : plan.validation) out.validation.push_back(dataset.at(i));
  return out;
}

inline nlohmann::json to_json(const ShotPlan& plan) {
  return nlohmann::json{{"seed", plan.seed},
                        {"levels", plan.levels},
                        {"per_class_order", plan.per_class_order},
                        {"validation", plan.validation},
                        {"undersized_classes", plan.undersized_classes}};
}

inline ShotPlan shot_plan_from_json(const nlohmann::json& j) {
  try {
    ShotPlan plan;
    plan.seed = j.at("seed").get<std::uint64_t>();
    plan.levels = j.at("levels").get<std::vector<int>>();
    plan.per_class_order = j.at("per_class_order").get<std::vector<std::vector<std::size_t>>>();
    plan.validation = j.at("validation").get<std::vector<std::size_t>>();
    plan.undersized_classes = j.at("undersized_classes").get<std::vector<int>>();
    return plan;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed shot plan: ") + e.what());
  }
}

inline void save_shot_plan(const std::filesystem::path& path, const ShotPlan& plan) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write shot plan " + path.string());
  out << to_json(plan).dump(1) << '\n';
}

inline ShotPlan load_shot_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read shot plan " + path.string());
  try {
    return shot_plan_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("malformed shot plan: ") + e.what());
  }
}

}  // namespace fsvlm
