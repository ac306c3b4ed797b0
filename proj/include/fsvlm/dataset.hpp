#pragma once

// Patch extraction from annotated slides, class prompts, and a seeded
// five-family synthetic dataset standing in for clinical data.

#include "fsvlm/errors.hpp"
#include "fsvlm/image.hpp"
#include "fsvlm/random.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace fsvlm {

inline constexpr int kNumClasses = 5;

inline constexpr std::array<std::string_view, kNumClasses> kClassNames = {
    "global glomerulosclerosis", "viable glomerulus", "ischemic glomerulus",
    "segmental glomerulosclerosis", "atubular glomerulus"};

class ClassLabel {
 public:
  ClassLabel() = default;

  static ClassLabel from_index(int index) {
    if (index < 0 || index >= kNumClasses)
      throw std::out_of_range("class index out of range: " + std::to_string(index));
    return ClassLabel(index);
  }

  /// Case-insensitive match against the five fixed names.
  static ClassLabel from_name(std::string_view name) {
    auto lower = [](std::string_view s) {
      std::string out(s);
      std::transform(out.begin(), out.end(), out.begin(),
                     [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
      return out;
    };
    const std::string key = lower(name);
    for (int i = 0; i < kNumClasses; ++i)
      if (kClassNames[static_cast<std::size_t>(i)] == key) return ClassLabel(i);
    throw FormatError("unknown class name: " + std::string(name));
  }

  int index() const { return index_; }
  std::string_view name() const { return kClassNames[static_cast<std::size_t>(index_)]; }
  bool operator==(const ClassLabel&) const = default;

 private:
  explicit ClassLabel(int index) : index_(index) {}
  int index_ = 0;
};

struct AnnotatedInstance {
  std::string slide_id;
  Rect bbox;
  ClassLabel label;
};

/// Where a patch came from: a slide region, or a synthetic draw.
struct PatchSource {
  std::string slide_id;
  Rect region;
  bool clamped = false;
  std::optional<std::uint64_t> synthetic_seed;
};

struct PatchSample {
  Image pixels;
  ClassLabel label;
  PatchSource source;
};

std::string build_prompt(ClassLabel label);

// --------------------------------------------------------------------------
// Geometry

struct SquareRegion {
  Rect rect;
  /// Slide smaller than the square side on some axis; rect is not square.
  bool clamped = false;
};

/// Expand `bbox` by `margin` on every side, grow the shorter side
/// symmetrically to a square, then translate (never shrink) it inside
/// `slide`. Odd growth puts the extra pixel after the box.
inline SquareRegion expand_and_squarify(const Rect& bbox, int margin, const Rect& slide) {
  if (bbox.empty()) throw std::invalid_argument("expand_and_squarify: degenerate bounding box");
  if (margin < 0) throw std::invalid_argument("expand_and_squarify: negative margin");
  if (slide.empty()) throw std::invalid_argument("expand_and_squarify: empty slide extent");
  if (!slide.contains(bbox))
    throw std::invalid_argument("expand_and_squarify: bounding box outside slide extent");

  Rect e{bbox.x0 - margin, bbox.y0 - margin, bbox.x1 + margin, bbox.y1 + margin};
  const int side = std::max(e.width(), e.height());
  const int grow_x = side - e.width();
  const int grow_y = side - e.height();
  Rect sq{e.x0 - grow_x / 2, e.y0 - grow_y / 2, 0, 0};
  sq.x1 = sq.x0 + side;
  sq.y1 = sq.y0 + side;

  bool clamped = false;
  auto fit = [&clamped](int& lo, int& hi, int min, int max) {
    if (hi - lo > max - min) {
      lo = min;
      hi = max;
      clamped = true;
      return;
    }
    if (lo < min) {
      hi += min - lo;
      lo = min;
    }
    if (hi > max) {
      lo -= hi - max;
      hi = max;
    }
  };
  fit(sq.x0, sq.x1, slide.x0, slide.x1);
  fit(sq.y0, sq.y1, slide.y0, slide.y1);
  return {sq, clamped};
}

// --------------------------------------------------------------------------
// Slide access

/// Read-only slide accessor. Implementations must be safe to call
/// concurrently from several extraction workers.
class SlideSource {
 public:
  virtual ~SlideSource() = default;
  virtual const std::string& id() const = 0;
  virtual Rect extent() const = 0;
  /// Pixels of `region` in [0, 1]; throws IoError when unreadable.
  virtual Image read(const Rect& region) const = 0;
};

class InMemorySlide final : public SlideSource {
 public:
  InMemorySlide(std::string id, Image image) : id_(std::move(id)), image_(std::move(image)) {}

  const std::string& id() const override { return id_; }
  Rect extent() const override { return {0, 0, image_.width, image_.height}; }
  Image read(const Rect& region) const override {
    if (region.empty() || !extent().contains(region)) {
      std::ostringstream msg;
      msg << "slide " << id_ << ": region (" << region.x0 << "," << region.y0 << "," << region.x1
          << "," << region.y1 << ") unreadable";
      throw IoError(msg.str());
    }
    return image_.crop(region);
  }

 private:
  std::string id_;
  Image image_;
};

inline PatchSample extract_patch(const SlideSource& slide, const AnnotatedInstance& instance,
                                 int margin) {
  const SquareRegion region = expand_and_squarify(instance.bbox, margin, slide.extent());
  PatchSample out;
  out.pixels = slide.read(region.rect);
  out.label = instance.label;
  out.source = PatchSource{instance.slide_id, region.rect, region.clamped, std::nullopt};
  return out;
}

// --------------------------------------------------------------------------
// Prompts

inline std::string build_prompt(ClassLabel label) {
  std::string out = "A histopathology image of ";
  out += label.name();
  out += '.';
  return out;
}

inline std::vector<std::string> class_prompts() {
  std::vector<std::string> out;
  for (int k = 0; k < kNumClasses; ++k) out.push_back(build_prompt(ClassLabel::from_index(k)));
  return out;
}

// --------------------------------------------------------------------------
// Synthetic data
//
// Each class is a glomerulus-like disk on a pink background with its own
// parametric family:
//   0 global sclerosis   dense homogeneous tuft, few nuclei
//   1 viable             lobulated tuft with many small dark nuclei
//   2 ischemic           thick dark capsule ring, pale wrinkled interior
//   3 segmental          sector of the tuft scarred, remainder cellular
//   4 atubular           small shrunken tuft inside a wide empty space

namespace synthetic_detail {

using Rgb = std::array<double, 3>;

inline Rgb jitter(const Rgb& c, Rng& rng, double amount) {
  return {c[0] + rng.uniform(-amount, amount), c[1] + rng.uniform(-amount, amount),
          c[2] + rng.uniform(-amount, amount)};
}

struct Blob {
  double x, y, r;
};

inline Image render(int cls, int side, Rng& rng) {
  const double s = side;
  Image img(side, side, 3);
  const Rgb background = jitter({0.93, 0.82, 0.88}, rng, 0.03);
  const double grad_angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double grad_strength = rng.uniform(0.0, 0.06);

  const double cx = s / 2 + rng.uniform(-0.06, 0.06) * s;
  const double cy = s / 2 + rng.uniform(-0.06, 0.06) * s;
  const double radius = s * 0.33 * rng.uniform(0.9, 1.1);

  // Each family carries its own stain balance on top of the morphology, the
  // way sclerotic matrix stains more eosinophilic than a cellular tuft.
  static constexpr std::array<Rgb, 5> kTint = {{{0.10, -0.06, -0.10},
                                                {-0.10, -0.06, 0.10},
                                                {0.04, 0.10, 0.04},
                                                {0.08, -0.10, 0.04},
                                                {-0.06, 0.06, 0.10}}};
  const Rgb& tint = kTint[static_cast<std::size_t>(cls)];
  auto tinted = [&](Rgb c) {
    for (std::size_t ch = 0; ch < 3; ++ch) c[ch] += tint[ch];
    return c;
  };
  const Rgb tuft_cellular = tinted(jitter({0.82, 0.62, 0.80}, rng, 0.03));
  const Rgb tuft_sclerotic = tinted(jitter({0.72, 0.45, 0.66}, rng, 0.03));
  const Rgb nucleus = tinted(jitter({0.38, 0.24, 0.55}, rng, 0.03));
  const Rgb capsule = tinted(jitter({0.62, 0.40, 0.62}, rng, 0.03));
  const Rgb space = jitter({0.98, 0.95, 0.98}, rng, 0.01);

  std::vector<Blob> nuclei;
  int n_nuclei = 0;
  switch (cls) {
    case 0: n_nuclei = static_cast<int>(rng.below(3)); break;
    case 1: n_nuclei = 14 + static_cast<int>(rng.below(8)); break;
    case 2: n_nuclei = 2 + static_cast<int>(rng.below(3)); break;
    case 3: n_nuclei = 8 + static_cast<int>(rng.below(5)); break;
    default: n_nuclei = 4 + static_cast<int>(rng.below(3)); break;
  }
  const double tuft_radius = cls == 4 ? radius * rng.uniform(0.45, 0.55) : radius;
  for (int i = 0; i < n_nuclei; ++i) {
    const double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double d = std::sqrt(rng.uniform()) * tuft_radius * 0.85;
    nuclei.push_back({cx + d * std::cos(a), cy + d * std::sin(a), s * rng.uniform(0.025, 0.04)});
  }
  const double sector_start = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double sector_width = rng.uniform(0.55, 0.8) * std::numbers::pi;
  const double ring_thickness = radius * rng.uniform(0.22, 0.3);
  const double wrinkle_freq = rng.uniform(5.0, 8.0);
  const double wrinkle_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const double dx = px - cx, dy = py - cy;
      const double dist = std::hypot(dx, dy);
      const double ramp = grad_strength * (std::cos(grad_angle) * (px / s - 0.5) +
                                           std::sin(grad_angle) * (py / s - 0.5));
      Rgb c = {background[0] + ramp, background[1] + ramp, background[2] + ramp};

      switch (cls) {
        case 0:
          if (dist < radius) c = tuft_sclerotic;
          break;
        case 1: {
          const double lobes = 1.0 + 0.08 * std::cos(4.0 * std::atan2(dy, dx) + wrinkle_phase);
          if (dist < radius * lobes) c = tuft_cellular;
          break;
        }
        case 2:
          if (dist < radius && dist > radius - ring_thickness) {
            c = capsule;
          } else if (dist <= radius - ring_thickness) {
            const double w = 0.05 * std::sin(wrinkle_freq * std::atan2(dy, dx) + wrinkle_phase);
            c = {space[0] - 0.08 + w, space[1] - 0.12 + w, space[2] - 0.08 + w};
          }
          break;
        case 3:
          if (dist < radius) {
            double a = std::atan2(dy, dx) - sector_start;
            a = std::fmod(a + 4.0 * std::numbers::pi, 2.0 * std::numbers::pi);
            c = a < sector_width ? tuft_sclerotic : tuft_cellular;
          }
          break;
        default:
          if (dist < tuft_radius) {
            c = tuft_cellular;
          } else if (dist < radius) {
            c = space;
          } else if (dist < radius + s * 0.03) {
            c = capsule;
          }
          break;
      }
      for (const Blob& b : nuclei) {
        if (std::hypot(px - b.x, py - b.y) < b.r) c = nucleus;
      }
      for (int ch = 0; ch < 3; ++ch)
        img.at(y, x, ch) = std::clamp(c[static_cast<std::size_t>(ch)] + rng.normal(0.0, 0.04), 0.0, 1.0);
    }
  }
  return img;
}

}  // namespace synthetic_detail

/// 5 * n_per_class square RGB patches ordered class-major; deterministic in
/// (n_per_class, image_side, seed).
inline std::vector<PatchSample> generate_synthetic_dataset(int n_per_class, int image_side,
                                                           std::uint64_t seed) {
  if (n_per_class < 1) throw std::invalid_argument("generate_synthetic_dataset: n_per_class < 1");
  if (image_side < 16) throw std::invalid_argument("generate_synthetic_dataset: image_side < 16");
  std::vector<PatchSample> out;
  out.reserve(static_cast<std::size_t>(n_per_class) * kNumClasses);
  for (int cls = 0; cls < kNumClasses; ++cls) {
    for (int i = 0; i < n_per_class; ++i) {
      const std::uint64_t sample_seed =
          Rng::mix(seed ^ Rng::mix(static_cast<std::uint64_t>(cls) * 1000003ULL + i));
      Rng rng(sample_seed);
      PatchSample p;
      p.pixels = synthetic_detail::render(cls, image_side, rng);
      p.label = ClassLabel::from_index(cls);
      p.source.slide_id = "synthetic";
      p.source.region = Rect{0, 0, image_side, image_side};
      p.source.synthetic_seed = sample_seed;
      out.push_back(std::move(p));
    }
  }
  return out;
}

// --------------------------------------------------------------------------
// Files

/// One JSON object per line: {slide_id, x0, y0, x1, y1, label_name}.
inline std::vector<AnnotatedInstance> read_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open annotation file " + path.string());
  std::vector<AnnotatedInstance> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      AnnotatedInstance inst;
      inst.slide_id = j.at("slide_id").get<std::string>();
      inst.bbox = Rect{j.at("x0").get<int>(), j.at("y0").get<int>(), j.at("x1").get<int>(),
                       j.at("y1").get<int>()};
      inst.label = ClassLabel::from_name(j.at("label_name").get<std::string>());
      if (inst.bbox.empty()) throw FormatError("degenerate bounding box");
      out.push_back(std::move(inst));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline std::string patch_file_name(const std::string& slide_id, std::size_t instance_index,
                                   ClassLabel label) {
  return slide_id + "_" + std::to_string(instance_index) + "_" + std::to_string(label.index()) +
         ".png";
}

/// Writes PNGs plus `manifest.csv` (path,label,slide_id,x0,y0,x1,y1,clamped).
/// `instance_indices[i]` is the annotation index that produced patches[i].
inline void write_patch_set(const std::filesystem::path& dir, const std::vector<PatchSample>& patches,
                            const std::vector<std::size_t>& instance_indices) {
  if (patches.size() != instance_indices.size())
    throw std::invalid_argument("write_patch_set: index list size mismatch");
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.csv");
  if (!manifest) throw IoError("cannot write manifest in " + dir.string());
  manifest << "path,label,slide_id,x0,y0,x1,y1,clamped\n";
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const auto& p = patches[i];
    const std::string name = patch_file_name(p.source.slide_id, instance_indices[i], p.label);
    write_png(dir / name, p.pixels);
    const Rect& r = p.source.region;
    manifest << name << ',' << p.label.index() << ',' << p.source.slide_id << ',' << r.x0 << ','
             << r.y0 << ',' << r.x1 << ',' << r.y1 << ',' << (p.source.clamped ? 1 : 0) << '\n';
  }
}

/// Loads a manifest written by write_patch_set; paths resolve relative to
/// the manifest's directory.
inline std::vector<PatchSample> read_patch_set(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open manifest " + manifest_path.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("path,label", 0) != 0) throw FormatError("manifest header missing");
  std::vector<PatchSample> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (fields.size() != 8) throw FormatError("manifest row has wrong field count: " + line);
    PatchSample p;
    p.pixels = read_png(manifest_path.parent_path() / fields[0]);
    p.label = ClassLabel::from_index(std::stoi(fields[1]));
    p.source.slide_id = fields[2];
    p.source.region = Rect{std::stoi(fields[3]), std::stoi(fields[4]), std::stoi(fields[5]),
                           std::stoi(fields[6])};
    p.source.clamped = fields[7] == "1";
    out.push_back(std::move(p));
  }
  return out;
}

inline std::vector<int> labels_of(const std::vector<PatchSample>& samples) {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.label.index());
  return out;
}

}  // namespace fsvlm
