#include "test_support.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <numeric>
#include <set>

#include <unistd.h>

using namespace fsvlm;
namespace fs = std::filesystem;

namespace {

const Rect kLargeSlide{0, 0, 10000, 10000};

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fsvlm_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

/// Nearest-centroid accuracy in raw pixel space, centroids from `train`.
double nearest_centroid_accuracy(const std::vector<PatchSample>& train, const std::vector<PatchSample>& test) {
  const std::size_t dim = train.front().pixels.data.size();
  std::vector<std::vector<double>> centroid(kNumClasses, std::vector<double>(dim, 0.0));
  std::vector<int> count(kNumClasses, 0);
  for (const auto& s : train) {
    auto& c = centroid[static_cast<std::size_t>(s.label.index())];
    for (std::size_t j = 0; j < dim; ++j) c[j] += s.pixels.data[j];
    ++count[static_cast<std::size_t>(s.label.index())];
  }
  for (int k = 0; k < kNumClasses; ++k)
    for (double& v : centroid[static_cast<std::size_t>(k)]) v /= count[static_cast<std::size_t>(k)];
  int hits = 0;
  for (const auto& s : test) {
    int best = 0;
    double best_d = 1e300;
    for (int k = 0; k < kNumClasses; ++k) {
      double d = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        const double diff = s.pixels.data[j] - centroid[static_cast<std::size_t>(k)][j];
        d += diff * diff;
      }
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    hits += best == s.label.index();
  }
  return static_cast<double>(hits) / static_cast<double>(test.size());
}

}  // namespace

TEST(ExpandAndSquarify, MarginThenGrowShorterSide) {
  const auto r = expand_and_squarify({100, 120, 300, 280}, 50, kLargeSlide);
  EXPECT_EQ(r.rect, (Rect{50, 50, 350, 350}));
  EXPECT_FALSE(r.clamped);
}

TEST(ExpandAndSquarify, AlreadySquareNoMargin) {
  EXPECT_EQ(expand_and_squarify({0, 0, 100, 100}, 0, kLargeSlide).rect, (Rect{0, 0, 100, 100}));
}

TEST(ExpandAndSquarify, TranslatesInsideSlide) {
  const auto r = expand_and_squarify({10, 10, 110, 60}, 0, {0, 0, 120, 120});
  EXPECT_EQ(r.rect, (Rect{10, 0, 110, 100}));
  EXPECT_FALSE(r.clamped);
}

TEST(ExpandAndSquarify, ClampsOnlyWhenSlideTooSmall) {
  const auto r = expand_and_squarify({10, 10, 90, 30}, 10, {0, 0, 200, 50});
  EXPECT_TRUE(r.clamped);
  EXPECT_EQ(r.rect.y0, 0);
  EXPECT_EQ(r.rect.y1, 50);
  EXPECT_EQ(r.rect.width(), 100);
}

TEST(ExpandAndSquarify, SquareAndMonotoneOverRandomBoxes) {
  Rng rng(9);
  const Rect slide{0, 0, 2000, 1500};
  for (int i = 0; i < 2000; ++i) {
    const int x0 = static_cast<int>(rng.below(1800)), y0 = static_cast<int>(rng.below(1300));
    const Rect box{x0, y0, x0 + 1 + static_cast<int>(rng.below(150)), y0 + 1 + static_cast<int>(rng.below(150))};
    const int m1 = static_cast<int>(rng.below(60));
    const int m2 = m1 + static_cast<int>(rng.below(60));
    const auto a = expand_and_squarify(box, m1, slide);
    const auto b = expand_and_squarify(box, m2, slide);
    ASSERT_FALSE(a.clamped);
    EXPECT_EQ(a.rect.width(), a.rect.height());
    EXPECT_TRUE(slide.contains(a.rect));
    EXPECT_TRUE(a.rect.contains(box));
    EXPECT_GE(b.rect.width(), a.rect.width());
  }
}

TEST(ExpandAndSquarify, RejectsInvalidInput) {
  EXPECT_THROW(expand_and_squarify({10, 10, 10, 20}, 5, kLargeSlide), std::invalid_argument);
  EXPECT_THROW(expand_and_squarify({10, 10, 20, 20}, -1, kLargeSlide), std::invalid_argument);
  EXPECT_THROW(expand_and_squarify({10, 10, 20, 20}, 0, {0, 0, 0, 0}), std::invalid_argument);
  EXPECT_THROW(expand_and_squarify({10, 10, 20, 20}, 0, {0, 0, 15, 15}), std::invalid_argument);
}

TEST(ExtractPatch, CropsSquareFromSlide) {
  Image slide(200, 300, 3);
  for (int y = 0; y < 200; ++y)
    for (int x = 0; x < 300; ++x) slide.at(y, x, 0) = (x + 1000 * y) / 1e6;
  InMemorySlide src("s1", slide);
  const AnnotatedInstance inst{"s1", {100, 120, 140, 150}, ClassLabel::from_index(2)};
  const PatchSample p = extract_patch(src, inst, 10);
  EXPECT_TRUE(p.pixels.square());
  EXPECT_EQ(p.pixels.width, 60);
  EXPECT_EQ(p.label.index(), 2);
  EXPECT_EQ(p.source.slide_id, "s1");
  EXPECT_EQ(p.source.region, (Rect{90, 105, 150, 165}));
  EXPECT_DOUBLE_EQ(p.pixels.at(0, 0, 0), slide.at(105, 90, 0));
}

TEST(ExtractPatch, UnreadableRegionNamesSlideAndRect) {
  InMemorySlide src("slideX", Image(50, 50, 3));
  try {
    (void)src.read({40, 40, 60, 60});
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("slideX"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("40,40,60,60"), std::string::npos);
  }
}

TEST(Prompts, TemplateAndDistinctness) {
  EXPECT_EQ(build_prompt(ClassLabel::from_name("viable glomerulus")), "A histopathology image of viable glomerulus.");
  EXPECT_EQ(build_prompt(ClassLabel::from_index(0)), build_prompt(ClassLabel::from_index(0)));
  const auto prompts = class_prompts();
  EXPECT_EQ(std::set<std::string>(prompts.begin(), prompts.end()).size(), 5u);
}

TEST(ClassLabels, CaseInsensitiveNames) {
  EXPECT_EQ(ClassLabel::from_name("Global Glomerulosclerosis").index(), 0);
  EXPECT_EQ(ClassLabel::from_name("ATUBULAR GLOMERULUS").index(), 4);
  EXPECT_THROW(ClassLabel::from_name("glomerulus"), FormatError);
  EXPECT_THROW(ClassLabel::from_index(5), std::out_of_range);
}

TEST(SyntheticDataset, DeterministicAndBalanced) {
  const auto a = generate_synthetic_dataset(2, 32, 7);
  const auto b = generate_synthetic_dataset(2, 32, 7);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].pixels, b[i].pixels);
  const auto c = generate_synthetic_dataset(10, 32, 7);
  EXPECT_EQ(c.size(), 50u);
  std::vector<int> counts(kNumClasses, 0);
  for (const auto& s : c) {
    ++counts[static_cast<std::size_t>(s.label.index())];
    EXPECT_TRUE(s.pixels.square());
    EXPECT_EQ(s.pixels.width, 32);
  }
  EXPECT_EQ(counts, std::vector<int>(kNumClasses, 10));
  EXPECT_THROW(generate_synthetic_dataset(0, 32, 7), std::invalid_argument);
  EXPECT_THROW(generate_synthetic_dataset(1, 15, 7), std::invalid_argument);
}

TEST(SyntheticDataset, NearestCentroidBeatsChance) {
  const auto data = generate_synthetic_dataset(100, 32, 7);
  // Even indices build centroids, odd indices are scored.
  std::vector<PatchSample> train, test;
  for (std::size_t i = 0; i < data.size(); ++i) (i % 2 == 0 ? train : test).push_back(data[i]);
  EXPECT_GT(nearest_centroid_accuracy(train, test), 0.5);
}

TEST(Annotations, ParsesJsonLinesAndRejectsUnknownLabels) {
  const fs::path dir = temp_dir("ann");
  {
    std::ofstream out(dir / "a.jsonl");
    out << R"({"slide_id":"s1","x0":1,"y0":2,"x1":30,"y1":40,"label_name":"Viable Glomerulus"})" << "\n\n"
        << R"({"slide_id":"s2","x0":5,"y0":5,"x1":9,"y1":9,"label_name":"ischemic glomerulus"})" << "\n";
  }
  const auto inst = read_annotations(dir / "a.jsonl");
  ASSERT_EQ(inst.size(), 2u);
  EXPECT_EQ(inst[0].slide_id, "s1");
  EXPECT_EQ(inst[0].bbox, (Rect{1, 2, 30, 40}));
  EXPECT_EQ(inst[0].label.index(), 1);
  EXPECT_EQ(inst[1].label.index(), 2);
  {
    std::ofstream out(dir / "bad.jsonl");
    out << R"({"slide_id":"s1","x0":1,"y0":2,"x1":30,"y1":40,"label_name":"tubule"})" << "\n";
  }
  EXPECT_THROW(read_annotations(dir / "bad.jsonl"), FormatError);
  EXPECT_THROW(read_annotations(dir / "missing.jsonl"), IoError);
  fs::remove_all(dir);
}

TEST(PatchFiles, NamingAndManifestRoundTrip) {
  EXPECT_EQ(patch_file_name("slideA", 12, ClassLabel::from_index(3)), "slideA_12_3.png");
  const fs::path dir = temp_dir("patches");
  const auto data = generate_synthetic_dataset(2, 32, 3);
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  write_patch_set(dir, data, idx);
  EXPECT_TRUE(fs::exists(dir / "synthetic_0_0.png"));
  const auto back = read_patch_set(dir / "manifest.csv");
  ASSERT_EQ(back.size(), data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_EQ(back[i].label, data[i].label);
    EXPECT_EQ(back[i].source.region, data[i].source.region);
    ASSERT_EQ(back[i].pixels.data.size(), data[i].pixels.data.size());
    // PNG stores 8 bits per channel.
    for (std::size_t j = 0; j < data[i].pixels.data.size(); ++j)
      ASSERT_NEAR(back[i].pixels.data[j], data[i].pixels.data[j], 0.5 / 255 + 1e-12);
  }
  // A second write of the decoded patches reproduces the same bytes.
  const fs::path dir2 = temp_dir("patches2");
  write_patch_set(dir2, back, idx);
  const auto again = read_patch_set(dir2 / "manifest.csv");
  for (std::size_t i = 0; i < back.size(); ++i) EXPECT_EQ(again[i].pixels, back[i].pixels);
  fs::remove_all(dir);
  fs::remove_all(dir2);
}
