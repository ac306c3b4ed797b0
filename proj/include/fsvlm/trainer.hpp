#pragma once

#include "fsvlm/adaptation.hpp"
#include "fsvlm/autograd.hpp"
#include "fsvlm/backbone.hpp"
#include "fsvlm/dataset.hpp"
#include "fsvlm/errors.hpp"
#include "fsvlm/random.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace fsvlm {

struct TrainConfig {
  double base_lr = 1e-3;
  double weight_decay = 1e-4;
  int batch_size = 0;     // 0: min(32, train size)
  int max_epochs = 100;
  int warmup_steps = -1;  // -1: 10% of total_steps, at least 1
  int total_steps = 0;    // 0: max_epochs * batches per epoch
  int patience = 5;
  double min_delta = 1e-3;
  std::uint64_t seed = kDefaultSeed;
  bool augment = true;
  std::string monitor = "val_loss";  // the only supported monitor

  void validate() const {
    if (monitor != "val_loss") throw std::invalid_argument("train config: unsupported monitor " + monitor);
    if (!(base_lr >= 0.0) || !(weight_decay >= 0.0))
      throw std::invalid_argument("train config: base_lr and weight_decay must be >= 0");
    if (batch_size < 0 || max_epochs < 1) throw std::invalid_argument("train config: bad batch_size/max_epochs");
    if (patience < 1) throw std::invalid_argument("train config: patience must be >= 1");
    if (!(min_delta >= 0.0)) throw std::invalid_argument("train config: min_delta must be >= 0");
  }
};

/// Defaults per strategy: a conservative rate when unfreezing whole blocks.
inline TrainConfig default_train_config(Strategy s) {
  TrainConfig c;
  c.base_lr = s == Strategy::kVanilla ? 1e-4 : 1e-3;
  return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"base_lr", c.base_lr},       {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size}, {"max_epochs", c.max_epochs},
          {"warmup_steps", c.warmup_steps}, {"total_steps", c.total_steps},
          {"patience", c.patience},     {"min_delta", c.min_delta},
          {"seed", c.seed},             {"augment", c.augment},
          {"monitor", c.monitor}};
}

/// Overlay `j` onto `base`; unknown keys are rejected.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  if (!j.is_object()) throw FormatError("train config must be an object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "base_lr") c.base_lr = v.get<double>();
      else if (key == "weight_decay") c.weight_decay = v.get<double>();
      else if (key == "batch_size") c.batch_size = v.get<int>();
      else if (key == "max_epochs") c.max_epochs = v.get<int>();
      else if (key == "warmup_steps") c.warmup_steps = v.get<int>();
      else if (key == "total_steps") c.total_steps = v.get<int>();
      else if (key == "patience") c.patience = v.get<int>();
      else if (key == "min_delta") c.min_delta = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "augment") c.augment = v.get<bool>();
      else if (key == "monitor") c.monitor = v.get<std::string>();
      else throw FormatError("unknown train config key: " + key);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

/// Schedule bounds after resolving the automatic values for a train set.
struct Schedule {
  double base_lr = 0.0;
  int warmup_steps = 0;
  int total_steps = 0;
};

inline Schedule resolve_schedule(const TrainConfig& c, int batches_per_epoch) {
  Schedule s;
  s.base_lr = c.base_lr;
  s.total_steps = c.total_steps > 0 ? c.total_steps : c.max_epochs * batches_per_epoch;
  // The automatic warm-up stays below total_steps even for one-step runs.
  s.warmup_steps = c.warmup_steps >= 0 ? c.warmup_steps : std::min(std::max(1, s.total_steps / 10), s.total_steps - 1);
  if (s.warmup_steps >= s.total_steps)
    throw std::invalid_argument("train config: warmup_steps must be < total_steps");
  return s;
}

/// Linear warm-up to base_lr, then linear decay to zero at total_steps.
inline double lr_at(int step, const Schedule& s) {
  if (step < 0 || step > s.total_steps) throw std::out_of_range("lr_at: step outside schedule");
  if (step < s.warmup_steps) return s.base_lr * step / s.warmup_steps;
  return s.base_lr * static_cast<double>(s.total_steps - step) / (s.total_steps - s.warmup_steps);
}

/// Config form; needs an explicit total_steps since batches are unknown here.
inline double lr_at(int step, const TrainConfig& c) {
  if (c.total_steps <= 0) throw std::invalid_argument("lr_at: config has no explicit total_steps");
  return lr_at(step, resolve_schedule(c, 1));
}

// --------------------------------------------------------------------------
// Loss

/// Mean cross-entropy of temperature-scaled cosine logits. Inputs are
/// unit-norm rows: B image embeddings and K class anchors.
inline ag::Var contrastive_loss(ag::Var image_embeddings, ag::Var anchors, const std::vector<int>& labels,
                                double temperature) {
  for (int y : labels)
    if (y < 0 || y >= anchors.rows()) throw std::out_of_range("contrastive_loss: label out of range");
  return ag::cross_entropy(similarity_logits(image_embeddings, anchors, temperature), labels);
}

// --------------------------------------------------------------------------
// Augmentation

struct AugmentParams {
  bool hflip = false;
  bool vflip = false;
  double angle_deg = 0.0;
  double brightness = 1.0;
  double contrast = 1.0;
};

inline constexpr double kFlipProbability = 0.5;
inline constexpr double kMaxRotationDeg = 15.0;
inline constexpr double kJitter = 0.1;

inline AugmentParams sample_augment(Rng& rng) {
  AugmentParams p;
  p.hflip = rng.bernoulli(kFlipProbability);
  p.vflip = rng.bernoulli(kFlipProbability);
  p.angle_deg = rng.uniform(-kMaxRotationDeg, kMaxRotationDeg);
  p.brightness = rng.uniform(1.0 - kJitter, 1.0 + kJitter);
  p.contrast = rng.uniform(1.0 - kJitter, 1.0 + kJitter);
  return p;
}

/// Identity parameters leave the pixels bit-identical.
inline Image apply_augment(const Image& src, const AugmentParams& p) {
  Image img = src;
  const int h = img.height, w = img.width, ch = img.channels;
  if (p.hflip || p.vflip) {
    Image flipped(h, w, ch);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < ch; ++c)
          flipped.at(y, x, c) = img.at(p.vflip ? h - 1 - y : y, p.hflip ? w - 1 - x : x, c);
    img = std::move(flipped);
  }
  if (p.angle_deg != 0.0) {
    const double a = p.angle_deg * std::numbers::pi / 180.0;
    const double cs = std::cos(a), sn = std::sin(a);
    const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
    Image rotated(h, w, ch);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double dx = x - cx, dy = y - cy;
        const double sx = cs * dx + sn * dy + cx;
        const double sy = -sn * dx + cs * dy + cy;
        for (int c = 0; c < ch; ++c) rotated.at(y, x, c) = sample_bilinear(img, sx, sy, c);
      }
    img = std::move(rotated);
  }
  if (p.brightness != 1.0 || p.contrast != 1.0) {
    const double mean = std::accumulate(img.data.begin(), img.data.end(), 0.0) /
                        static_cast<double>(img.data.size());
    for (double& v : img.data) v = std::clamp(((v * p.brightness) - mean * p.brightness) * p.contrast +
                                                  mean * p.brightness,
                                              0.0, 1.0);
  }
  return img;
}

inline PatchSample augment(const PatchSample& patch, Rng& rng) {
  PatchSample out = patch;
  out.pixels = apply_augment(patch.pixels, sample_augment(rng));
  return out;
}

// --------------------------------------------------------------------------
// Early stopping

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_monitor = 0.0;
  double lr = 0.0;
  bool operator==(const EpochRecord&) const = default;
};

enum class StopReason { kEarlyStopped, kMaxEpochs };

inline std::string to_string(StopReason r) {
  return r == StopReason::kEarlyStopped ? "early_stopped" : "max_epochs";
}

struct TrainingHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  StopReason stop_reason = StopReason::kMaxEpochs;
  bool operator==(const TrainingHistory&) const = default;
};

/// Tracks a minimised monitor. An epoch improves only when it beats the
/// best value by more than min_delta; `patience` consecutive epochs without
/// improvement stop training.
class EarlyStopping {
 public:
  EarlyStopping(int patience, double min_delta) : patience_(patience), min_delta_(min_delta) {}

  /// Feed the next epoch's monitor; returns true when training should stop.
  bool update(double value) {
    ++epoch_;
    if (best_epoch_ == 0 || value < best_ - min_delta_) {
      best_ = value;
      best_epoch_ = epoch_;
      wait_ = 0;
      return false;
    }
    return ++wait_ >= patience_;
  }

  bool improved_last() const { return best_epoch_ == epoch_; }
  int best_epoch() const { return best_epoch_; }
  double best_value() const { return best_; }

 private:
  int patience_;
  double min_delta_;
  int epoch_ = 0;
  int best_epoch_ = 0;
  int wait_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

struct EarlyStopDecision {
  bool stop = false;
  int stop_epoch = 0;  // epoch after which training stops, 0 if never
  int best_epoch = 0;
};

/// Replay the rule over a monitor sequence.
inline EarlyStopDecision early_stop(const std::vector<double>& monitor, int patience, double min_delta) {
  if (monitor.empty()) throw std::invalid_argument("early_stop: empty history");
  EarlyStopping es(patience, min_delta);
  EarlyStopDecision d;
  for (std::size_t i = 0; i < monitor.size(); ++i) {
    if (es.update(monitor[i])) {
      d.stop = true;
      d.stop_epoch = static_cast<int>(i) + 1;
      break;
    }
  }
  d.best_epoch = es.best_epoch();
  return d;
}

// --------------------------------------------------------------------------
// Optimiser

/// Adam with L2 weight decay folded into the gradient.
class Adam {
 public:
  Adam(ParameterList params, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const Parameter* p : params_) {
      m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
  }

  void zero_grad() { params_.zero_grad(); }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_);
    const double c2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter& p = params_[i];
      if (p.grad.size() == 0) p.zero_grad();
      Matrix g = p.grad;
      if (wd_ > 0.0) g += wd_ * p.value;
      m_[i] = b1_ * m_[i] + (1.0 - b1_) * g;
      v_[i] = b2_ * v_[i] + (1.0 - b2_) * g.cwiseAbs2();
      if (lr == 0.0) continue;
      p.value.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
    }
  }

 private:
  ParameterList params_;
  double wd_, b1_, b2_, eps_;
  int t_ = 0;
  std::vector<Matrix> m_, v_;
};

// --------------------------------------------------------------------------
// Training loop

namespace trainer_detail {

struct Snapshot {
  std::vector<Matrix> values;
  RowVector running_mean, running_var;
};

inline Snapshot take(AdaptedModel& model, const ParameterList& params) {
  Snapshot s;
  for (const Parameter* p : params) s.values.push_back(p->value);
  if (auto& h = model.head(); h && h->bn_affine) {
    s.running_mean = h->running_mean;
    s.running_var = h->running_var;
  }
  return s;
}

inline void restore(AdaptedModel& model, const ParameterList& params, const Snapshot& s) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i].value = s.values[i];
  if (auto& h = model.head(); h && h->bn_affine) {
    h->running_mean = s.running_mean;
    h->running_var = s.running_var;
  }
}

inline std::vector<const Image*> pixels_of(const std::vector<PatchSample>& samples) {
  std::vector<const Image*> out;
  for (const auto& s : samples) out.push_back(&s.pixels);
  return out;
}

}  // namespace trainer_detail

/// Mean cross-entropy of evaluation-mode predictions.
inline double evaluation_loss(AdaptedModel& model, const std::vector<PatchSample>& samples) {
  const Matrix logits = model.predict_logits(trainer_detail::pixels_of(samples));
  ag::Tape tape(false);
  return ag::scalar(ag::cross_entropy(tape.constant(logits), labels_of(samples)));
}

/// Train the model's trainable parameters in place and restore the weights
/// of the best validation epoch. Throws DivergenceError on a non-finite loss.
inline TrainingHistory train(AdaptedModel& model, const std::vector<PatchSample>& train_set,
                             const std::vector<PatchSample>& validation_set, const TrainConfig& config) {
  config.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  if (validation_set.empty()) throw std::invalid_argument("train: empty validation set");
  const ParameterList params = model.trainable_parameters();
  if (params.empty()) throw std::invalid_argument("train: no trainable parameters");

  const int n = static_cast<int>(train_set.size());
  const int batch = config.batch_size > 0 ? std::min(config.batch_size, n) : std::min(32, n);
  const int batches_per_epoch = (n + batch - 1) / batch;
  const Schedule schedule = resolve_schedule(config, batches_per_epoch);

  Rng rng(config.seed);
  Adam adam(params, config.weight_decay);
  EarlyStopping stopper(config.patience, config.min_delta);
  TrainingHistory history;
  trainer_detail::Snapshot best = trainer_detail::take(model, params);

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  int step = 0;
  for (int epoch = 1; epoch <= config.max_epochs && step < schedule.total_steps; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    double lr = 0.0;
    for (int b = 0; b < batches_per_epoch && step < schedule.total_steps; ++b) {
      const int start = b * batch;
      const int end = std::min(n, start + batch);
      std::vector<Image> images;
      std::vector<int> labels;
      for (int i = start; i < end; ++i) {
        const PatchSample& s = train_set[order[static_cast<std::size_t>(i)]];
        images.push_back(config.augment ? apply_augment(s.pixels, sample_augment(rng)) : s.pixels);
        labels.push_back(s.label.index());
      }
      std::vector<const Image*> ptrs;
      for (const auto& img : images) ptrs.push_back(&img);

      ag::Tape tape;
      ag::Var loss = ag::cross_entropy(model.logits(tape, ptrs, true, &rng), labels);
      const double value = ag::scalar(loss);
      if (!std::isfinite(value))
        throw DivergenceError("non-finite training loss at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(step + 1));
      adam.zero_grad();
      tape.backward(loss);
      ++step;
      lr = lr_at(step, schedule);
      adam.step(lr);
      loss_sum += value * (end - start);
    }
    model.invalidate_cache();

    const double val = evaluation_loss(model, validation_set);
    if (!std::isfinite(val))
      throw DivergenceError("non-finite validation loss at epoch " + std::to_string(epoch));
    history.epochs.push_back({epoch, loss_sum / n, val, lr});
    const bool stop = stopper.update(val);
    if (stopper.improved_last()) best = trainer_detail::take(model, params);
    if (stop) {
      history.stop_reason = StopReason::kEarlyStopped;
      break;
    }
  }
  history.best_epoch = stopper.best_epoch();
  trainer_detail::restore(model, params, best);
  model.invalidate_cache();
  return history;
}

// --------------------------------------------------------------------------
// History export: one JSON object per epoch, then a terminal record.

inline void write_history(const std::filesystem::path& path, const TrainingHistory& h) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write history " + path.string());
  for (const auto& e : h.epochs)
    out << nlohmann::json{{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_monitor", e.val_monitor},
                          {"lr", e.lr}}
               .dump()
        << '\n';
  out << nlohmann::json{{"stop_reason", to_string(h.stop_reason)},
                        {"best_epoch", h.best_epoch},
                        {"epochs_run", h.epochs.size()}}
             .dump()
      << '\n';
}

inline TrainingHistory read_history(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read history " + path.string());
  TrainingHistory h;
  std::string line;
  bool terminal = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (j.contains("stop_reason")) {
      h.stop_reason = j["stop_reason"] == "early_stopped" ? StopReason::kEarlyStopped : StopReason::kMaxEpochs;
      h.best_epoch = j.at("best_epoch").get<int>();
      terminal = true;
    } else {
      h.epochs.push_back({j.at("epoch").get<int>(), j.at("train_loss").get<double>(),
                          j.at("val_monitor").get<double>(), j.at("lr").get<double>()});
    }
  }
  if (!terminal) throw FormatError("history has no terminal record: " + path.string());
  return h;
}

}  // namespace fsvlm
