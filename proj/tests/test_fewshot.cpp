#include "test_support.hpp"

#include <gtest/gtest.h>

#include <set>

#include <unistd.h>

using namespace fsvlm;

namespace {

std::vector<int> balanced_labels(int per_class) {
  std::vector<int> out;
  for (int c = 0; c < kNumClasses; ++c)
    for (int i = 0; i < per_class; ++i) out.push_back(c);
  return out;
}

std::set<std::size_t> as_set(const std::vector<std::size_t>& v) { return {v.begin(), v.end()}; }

}  // namespace

TEST(ShotPlan, ValidationIsComplementOfLargestPool) {
  const auto plan = build_shot_plan(balanced_labels(40), kDefaultShotLevels, 42);
  EXPECT_EQ(plan.validation.size(), 40u);
  EXPECT_TRUE(std::is_sorted(plan.validation.begin(), plan.validation.end()));
  EXPECT_TRUE(plan.undersized_classes.empty());
}

TEST(ShotPlan, EachLevelAddsExactlyTheDifferencePerClass) {
  const auto labels = balanced_labels(40);
  const auto plan = build_shot_plan(labels, kDefaultShotLevels, 42);
  for (std::size_t i = 1; i < kDefaultShotLevels.size(); ++i) {
    const auto small = plan.train_indices(kDefaultShotLevels[i - 1]);
    const auto large = plan.train_indices(kDefaultShotLevels[i]);
    const auto small_set = as_set(small);
    std::vector<int> added(kNumClasses, 0);
    for (std::size_t idx : large)
      if (!small_set.count(idx)) ++added[static_cast<std::size_t>(labels[idx])];
    for (int c = 0; c < kNumClasses; ++c)
      EXPECT_EQ(added[static_cast<std::size_t>(c)], kDefaultShotLevels[i] - kDefaultShotLevels[i - 1]);
  }
}

TEST(ShotPlan, DeterministicInSeed) {
  const auto labels = balanced_labels(40);
  EXPECT_EQ(build_shot_plan(labels, kDefaultShotLevels, 42), build_shot_plan(labels, kDefaultShotLevels, 42));
  EXPECT_FALSE(build_shot_plan(labels, kDefaultShotLevels, 42) == build_shot_plan(labels, kDefaultShotLevels, 43));
}

TEST(ShotPlan, NestingDisjointnessAndBalanceOverSeeds) {
  Rng meta(2024);
  for (int trial = 0; trial < 100; ++trial) {
    // Uneven classes, some smaller than the largest level.
    std::vector<int> labels;
    std::vector<int> sizes(kNumClasses);
    for (int c = 0; c < kNumClasses; ++c) {
      sizes[static_cast<std::size_t>(c)] = 1 + static_cast<int>(meta.below(60));
      for (int i = 0; i < sizes[static_cast<std::size_t>(c)]; ++i) labels.push_back(c);
    }
    meta.shuffle(labels);
    const std::uint64_t seed = meta.next();
    const auto plan = build_shot_plan(labels, kDefaultShotLevels, seed);
    const auto val = as_set(plan.validation);
    std::set<std::size_t> prev;
    for (int level : kDefaultShotLevels) {
      const auto cur = as_set(plan.train_indices(level));
      for (std::size_t i : prev) ASSERT_TRUE(cur.count(i));
      for (std::size_t i : cur) ASSERT_FALSE(val.count(i));
      std::vector<int> per_class(kNumClasses, 0);
      for (std::size_t i : cur) ++per_class[static_cast<std::size_t>(labels[i])];
      for (int c = 0; c < kNumClasses; ++c)
        ASSERT_EQ(per_class[static_cast<std::size_t>(c)], std::min(level, sizes[static_cast<std::size_t>(c)]));
      prev = cur;
    }
    EXPECT_EQ(prev.size() + val.size(), labels.size());
  }
}

TEST(ShotPlan, UndersizedClassIsFlagged) {
  std::vector<int> labels = balanced_labels(40);
  labels.erase(labels.begin(), labels.begin() + 30);  // class 0 keeps 10
  const auto plan = build_shot_plan(labels, kDefaultShotLevels, 1);
  EXPECT_EQ(plan.undersized_classes, std::vector<int>{0});
  EXPECT_EQ(plan.train_indices(32).size(), 10u + 4 * 32);
  for (std::size_t i : plan.validation) EXPECT_NE(labels[i], 0);
}

TEST(ShotPlan, RejectsBadInput) {
  const auto labels = balanced_labels(5);
  EXPECT_THROW(build_shot_plan(labels, {}, 1), std::invalid_argument);
  EXPECT_THROW(build_shot_plan(labels, {2, 1}, 1), std::invalid_argument);
  EXPECT_THROW(build_shot_plan(labels, {0, 1}, 1), std::invalid_argument);
  EXPECT_THROW(build_shot_plan({0, 1, 2, 3}, {1}, 1), std::invalid_argument);  // class 4 absent
  EXPECT_THROW(build_shot_plan({0, 1, 2, 3, 7}, {1}, 1), std::out_of_range);
}

TEST(Materialize, ZeroShotAndNestedLevels) {
  const auto data = generate_synthetic_dataset(40, 16, 3);
  const auto plan = build_shot_plan(labels_of(data), kDefaultShotLevels, 42);
  const Split zero = materialize(plan, 0, data);
  EXPECT_TRUE(zero.train.empty());
  EXPECT_EQ(zero.validation.size(), plan.validation.size());
  const Split two = materialize(plan, 2, data);
  const Split four = materialize(plan, 4, data);
  EXPECT_EQ(two.train.size(), 10u);
  EXPECT_EQ(four.train.size(), 20u);
  for (const auto& s : two.train) {
    const bool found = std::any_of(four.train.begin(), four.train.end(),
                                   [&](const PatchSample& o) { return o.pixels == s.pixels; });
    EXPECT_TRUE(found);
  }
  EXPECT_THROW(materialize(plan, 3, data), std::invalid_argument);
}

TEST(ShotPlan, SerialisationRoundTripsExactly) {
  const auto plan = build_shot_plan(balanced_labels(37), {1, 2, 4, 8, 16, 32}, 99);
  const auto path = std::filesystem::temp_directory_path() / ("fsvlm_plan_" + std::to_string(::getpid()) + ".json");
  save_shot_plan(path, plan);
  EXPECT_EQ(load_shot_plan(path), plan);
  std::filesystem::remove(path);
  EXPECT_THROW(load_shot_plan(path), IoError);
  EXPECT_THROW(shot_plan_from_json(nlohmann::json{{"seed", 1}}), FormatError);
}
