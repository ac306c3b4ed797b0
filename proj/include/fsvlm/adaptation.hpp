#pragma once

// The four adaptation strategies as transformations of a Backbone:
//   vanilla     unfreeze the top blocks (and output heads) of both towers
//   lora        low-rank deltas on attention projections of the same blocks
//   adapter     residual bottlenecks after attention and in the MLP path of
//               the image tower
//   classifier  frozen backbone, trainable head over image embeddings
// Each strategy freezes everything it does not own. A handle accepts one
// strategy only.

#include "fsvlm/archive.hpp"
#include "fsvlm/autograd.hpp"
#include "fsvlm/backbone.hpp"
#include "fsvlm/dataset.hpp"
#include "fsvlm/errors.hpp"
#include "fsvlm/random.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace fsvlm {

enum class Strategy { kVanilla, kLora, kAdapter, kClassifier };

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kVanilla: return "vanilla";
    case Strategy::kLora: return "lora";
    case Strategy::kAdapter: return "adapter";
    case Strategy::kClassifier: return "classifier";
  }
  return "unknown";
}

inline Strategy strategy_from_string(const std::string& s) {
  if (s == "vanilla") return Strategy::kVanilla;
  if (s == "lora") return Strategy::kLora;
  if (s == "adapter") return Strategy::kAdapter;
  if (s == "classifier") return Strategy::kClassifier;
  throw FormatError("unknown strategy: " + s);
}

enum class HeadKind { kLinear, kMlp, kMlpBn };

inline std::string to_string(HeadKind k) {
  switch (k) {
    case HeadKind::kLinear: return "linear";
    case HeadKind::kMlp: return "mlp";
    case HeadKind::kMlpBn: return "mlp_bn";
  }
  return "unknown";
}

inline HeadKind head_kind_from_string(const std::string& s) {
  if (s == "linear") return HeadKind::kLinear;
  if (s == "mlp") return HeadKind::kMlp;
  if (s == "mlp_bn") return HeadKind::kMlpBn;
  throw std::invalid_argument("unknown classifier head kind: " + s);
}

struct AdaptationSpec {
  Strategy strategy = Strategy::kVanilla;
  std::uint64_t seed = kDefaultSeed;

  struct Vanilla {
    int top_n = 2;
  } vanilla;

  struct Lora {
    int rank = 4;
    double alpha = 8.0;
    int top_n = 2;
    std::vector<std::string> targets = {"q", "v"};
  } lora;

  struct Adapter {
    int bottleneck = 0;      // 0 selects embed_dim / 8
    std::vector<int> blocks;  // empty selects every image block
  } adapter;

  struct Classifier {
    HeadKind kind = HeadKind::kMlp;
    int in_dim = 512;
    int hidden_dim = 256;
    double dropout = 0.5;
  } classifier;
};

inline nlohmann::json to_json(const AdaptationSpec& s) {
  return {{"strategy", to_string(s.strategy)},
          {"seed", s.seed},
          {"vanilla", {{"top_n", s.vanilla.top_n}}},
          {"lora",
           {{"rank", s.lora.rank},
            {"alpha", s.lora.alpha},
            {"top_n", s.lora.top_n},
            {"targets", s.lora.targets}}},
          {"adapter", {{"bottleneck", s.adapter.bottleneck}, {"blocks", s.adapter.blocks}}},
          {"classifier",
           {{"kind", to_string(s.classifier.kind)},
            {"in_dim", s.classifier.in_dim},
            {"hidden_dim", s.classifier.hidden_dim},
            {"dropout", s.classifier.dropout}}}};
}

namespace adaptation_detail {
inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                           const std::string& where) {
  if (!j.is_object()) throw FormatError(where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw FormatError("unknown key '" + key + "' in " + where);
  }
}
}  // namespace adaptation_detail

/// Overlay `j` onto `base`; unknown keys are rejected.
inline AdaptationSpec adaptation_spec_from_json(const nlohmann::json& j, AdaptationSpec base = {}) {
  using adaptation_detail::reject_unknown;
  reject_unknown(j, {"strategy", "seed", "vanilla", "lora", "adapter", "classifier"}, "adaptation");
  try {
    if (j.contains("strategy")) base.strategy = strategy_from_string(j["strategy"].get<std::string>());
    if (j.contains("seed")) base.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("vanilla")) {
      reject_unknown(j["vanilla"], {"top_n"}, "vanilla");
      base.vanilla.top_n = j["vanilla"].value("top_n", base.vanilla.top_n);
    }
    if (j.contains("lora")) {
      const auto& l = j["lora"];
      reject_unknown(l, {"rank", "alpha", "top_n", "targets"}, "lora");
      base.lora.rank = l.value("rank", base.lora.rank);
      base.lora.alpha = l.value("alpha", base.lora.alpha);
      base.lora.top_n = l.value("top_n", base.lora.top_n);
      base.lora.targets = l.value("targets", base.lora.targets);
    }
    if (j.contains("adapter")) {
      const auto& a = j["adapter"];
      reject_unknown(a, {"bottleneck", "blocks"}, "adapter");
      base.adapter.bottleneck = a.value("bottleneck", base.adapter.bottleneck);
      base.adapter.blocks = a.value("blocks", base.adapter.blocks);
    }
    if (j.contains("classifier")) {
      const auto& c = j["classifier"];
      reject_unknown(c, {"kind", "in_dim", "hidden_dim", "dropout"}, "classifier");
      if (c.contains("kind")) base.classifier.kind = head_kind_from_string(c["kind"].get<std::string>());
      base.classifier.in_dim = c.value("in_dim", base.classifier.in_dim);
      base.classifier.hidden_dim = c.value("hidden_dim", base.classifier.hidden_dim);
      base.classifier.dropout = c.value("dropout", base.classifier.dropout);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("adaptation spec: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("adaptation spec: ") + e.what());
  }
  return base;
}

// --------------------------------------------------------------------------
// Vanilla

/// Unfreeze the top `top_n` blocks of both towers plus their final norm and
/// projection; at full depth the input stems are unfrozen too.
inline ParameterList apply_vanilla(Backbone& backbone, int top_n) {
  if (top_n == 0) throw std::invalid_argument("apply_vanilla: top_n == 0 is zero-shot, not tuning");
  if (top_n < 0 || top_n > backbone.depth())
    throw std::invalid_argument("apply_vanilla: top_n exceeds encoder depth");
  backbone.mark_strategy(to_string(Strategy::kVanilla));
  backbone.parameters().set_trainable(false);
  ParameterList selected;
  for (Tower t : {Tower::kImage, Tower::kText}) {
    if (top_n == backbone.depth()) selected.append(backbone.stem_parameters(t));
    for (int i = backbone.depth() - top_n; i < backbone.depth(); ++i)
      selected.append(backbone.block_parameters(t, i));
    selected.append(backbone.head_parameters(t));
  }
  selected.set_trainable(true);
  return selected;
}

// --------------------------------------------------------------------------
// LoRA

/// Attach a (rank x d_in, d_out x rank) pair to `linear`. A is drawn from
/// U(-1/sqrt(d_in), 1/sqrt(d_in)); B starts at zero.
inline void attach_lora(Linear& linear, int rank, double alpha, Rng& rng) {
  if (rank < 1 || rank > std::min(linear.in_dim(), linear.out_dim()))
    throw std::invalid_argument("inject_lora: rank exceeds projection dimensions");
  if (!(alpha > 0.0)) throw std::invalid_argument("inject_lora: alpha must be > 0");
  const std::string base = linear.weight.name.substr(0, linear.weight.name.rfind('.'));
  const double bound = 1.0 / std::sqrt(static_cast<double>(linear.in_dim()));
  Matrix a(rank, linear.in_dim());
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = rng.uniform(-bound, bound);
  LoraPair pair{Parameter(base + ".lora_a", std::move(a)),
                Parameter(base + ".lora_b", Matrix::Zero(linear.out_dim(), rank)),
                alpha / rank};
  pair.a.trainable = true;
  pair.b.trainable = true;
  linear.lora = std::move(pair);
}

inline Backbone& inject_lora(Backbone& backbone, const AdaptationSpec& spec) {
  const auto& opt = spec.lora;
  if (opt.top_n < 1 || opt.top_n > backbone.depth())
    throw std::invalid_argument("inject_lora: top_n out of range");
  if (opt.targets.empty()) throw std::invalid_argument("inject_lora: no target projections");
  for (const auto& name : opt.targets)
    if (backbone.block(Tower::kImage, 0).projection(name) == nullptr)
      throw std::invalid_argument("inject_lora: unknown attention projection '" + name + "'");
  if (opt.rank < 1 || opt.rank > backbone.embed_dim())
    throw std::invalid_argument("inject_lora: rank exceeds projection dimensions");

  backbone.mark_strategy(to_string(Strategy::kLora));
  backbone.parameters().set_trainable(false);
  Rng rng(spec.seed);
  for (Tower t : {Tower::kImage, Tower::kText})
    for (int i = backbone.depth() - opt.top_n; i < backbone.depth(); ++i)
      for (const auto& name : opt.targets)
        attach_lora(*backbone.block(t, i).projection(name), opt.rank, opt.alpha, rng);
  return backbone;
}

// --------------------------------------------------------------------------
// Adapters

inline AdapterBlock make_adapter(const std::string& name, int dim, int bottleneck, Rng& rng) {
  AdapterBlock a;
  a.down = Linear(name + ".down", dim, bottleneck, rng);
  a.up = Linear(name + ".up", bottleneck, dim, rng);
  a.up.weight.value.setZero();
  for (Parameter* p : {&a.down.weight, &a.down.bias, &a.up.weight, &a.up.bias}) p->trainable = true;
  return a;
}

inline int adapter_bottleneck(const AdaptationSpec& spec, int embed_dim) {
  return spec.adapter.bottleneck > 0 ? spec.adapter.bottleneck : std::max(1, embed_dim / 8);
}

inline Backbone& inject_adapters(Backbone& backbone, const AdaptationSpec& spec) {
  const int dim = backbone.embed_dim();
  const int bottleneck = adapter_bottleneck(spec, dim);
  if (bottleneck >= dim) throw std::invalid_argument("inject_adapters: bottleneck must be < embed_dim");
  std::vector<int> blocks = spec.adapter.blocks;
  if (blocks.empty())
    for (int i = 0; i < backbone.depth(); ++i) blocks.push_back(i);
  for (int i : blocks)
    if (i < 0 || i >= backbone.depth()) throw std::invalid_argument("inject_adapters: block out of range");

  backbone.mark_strategy(to_string(Strategy::kAdapter));
  backbone.parameters().set_trainable(false);
  Rng rng(spec.seed);
  for (int i : blocks) {
    TransformerBlock& blk = backbone.block(Tower::kImage, i);
    const std::string name = "image.blocks." + std::to_string(i);
    blk.adapter_attn = make_adapter(name + ".adapter_attn", dim, bottleneck, rng);
    blk.adapter_mlp = make_adapter(name + ".adapter_mlp", dim, bottleneck, rng);
  }
  return backbone;
}

// --------------------------------------------------------------------------
// Classifier heads

struct ClassifierHead {
  HeadKind kind = HeadKind::kMlp;
  double dropout = 0.5;
  Linear fc1;  // the only layer for kLinear
  std::optional<LayerNorm> bn_affine;  // gamma/beta of the batch norm
  RowVector running_mean;
  RowVector running_var;
  std::optional<Linear> fc2;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  int out_dim() const { return fc2 ? fc2->out_dim() : fc1.out_dim(); }
  int in_dim() const { return fc1.in_dim(); }

  void collect(ParameterList& out) {
    fc1.collect(out);
    if (bn_affine) bn_affine->collect(out);
    if (fc2) fc2->collect(out);
  }

  ParameterList parameters() {
    ParameterList out;
    collect(out);
    return out;
  }

  /// Training mode applies dropout from `rng` and batch statistics;
  /// evaluation mode uses running statistics and no dropout.
  ag::Var forward(ag::Tape& tape, ag::Var x, bool training, Rng* rng) {
    ag::Var h = fc1.forward(tape, x);
    if (!fc2) return h;
    if (bn_affine) {
      if (training) {
        RowVector mean, var;
        h = ag::batch_norm_train(h, tape.param(bn_affine->gamma), tape.param(bn_affine->beta),
                                 bn_eps, mean, var);
        const double n = static_cast<double>(x.rows());
        const RowVector unbiased = n > 1 ? RowVector(var * (n / (n - 1.0))) : var;
        running_mean = (1.0 - bn_momentum) * running_mean + bn_momentum * mean;
        running_var = (1.0 - bn_momentum) * running_var + bn_momentum * unbiased;
      } else {
        // Inference batch norm is affine: fold it into a scale and shift.
        const RowVector inv_std = (running_var.array() + bn_eps).rsqrt().matrix();
        const RowVector g = bn_affine->gamma.value.row(0).cwiseProduct(inv_std);
        const RowVector shift =
            bn_affine->beta.value.row(0) - running_mean.cwiseProduct(g);
        Matrix scaled = h.value().array().rowwise() * g.array();
        scaled.rowwise() += shift;
        h = tape.constant(std::move(scaled));
      }
    }
    h = ag::relu(h);
    if (training && dropout > 0.0) {
      if (rng == nullptr) throw std::invalid_argument("ClassifierHead: training needs an rng");
      Matrix mask(h.rows(), h.cols());
      const double keep = 1.0 - dropout;
      for (Eigen::Index i = 0; i < mask.size(); ++i)
        mask.data()[i] = rng->bernoulli(keep) ? 1.0 / keep : 0.0;
      h = ag::mul_constant(h, mask);
    }
    return fc2->forward(tape, h);
  }
};

inline ClassifierHead build_classifier_head(const AdaptationSpec& spec, int n_classes) {
  const auto& opt = spec.classifier;
  if (opt.in_dim < 1 || n_classes < 2) throw std::invalid_argument("classifier head: bad dimensions");
  if (opt.kind != HeadKind::kLinear && (opt.hidden_dim < 1 || opt.dropout < 0.0 || opt.dropout >= 1.0))
    throw std::invalid_argument("classifier head: bad hidden_dim or dropout");
  Rng rng(spec.seed);
  ClassifierHead head;
  head.kind = opt.kind;
  head.dropout = opt.kind == HeadKind::kLinear ? 0.0 : opt.dropout;
  if (opt.kind == HeadKind::kLinear) {
    head.fc1 = Linear("head.fc", opt.in_dim, n_classes, rng);
  } else {
    head.fc1 = Linear("head.fc1", opt.in_dim, opt.hidden_dim, rng);
    if (opt.kind == HeadKind::kMlpBn) {
      head.bn_affine = LayerNorm("head.bn", opt.hidden_dim);
      head.running_mean = RowVector::Zero(opt.hidden_dim);
      head.running_var = RowVector::Ones(opt.hidden_dim);
    }
    head.fc2 = Linear("head.fc2", opt.hidden_dim, n_classes, rng);
  }
  head.parameters().set_trainable(true);
  return head;
}

// --------------------------------------------------------------------------
// Adapted model

/// A backbone plus the strategy applied to it. Without a strategy it is the
/// zero-shot model: prompt-anchored prediction with nothing trainable.
class AdaptedModel {
 public:
  static AdaptedModel zero_shot(Backbone backbone, std::vector<std::string> prompts = class_prompts()) {
    return AdaptedModel(std::move(backbone), std::nullopt, std::move(prompts));
  }

  static AdaptedModel adapt(Backbone backbone, const AdaptationSpec& spec,
                            std::vector<std::string> prompts = class_prompts()) {
    AdaptedModel m(std::move(backbone), spec, std::move(prompts));
    switch (spec.strategy) {
      case Strategy::kVanilla: apply_vanilla(m.backbone_, spec.vanilla.top_n); break;
      case Strategy::kLora: inject_lora(m.backbone_, spec); break;
      case Strategy::kAdapter: inject_adapters(m.backbone_, spec); break;
      case Strategy::kClassifier:
        if (spec.classifier.in_dim != m.backbone_.embed_dim())
          throw std::invalid_argument("classifier head in_dim " + std::to_string(spec.classifier.in_dim) +
                                      " does not match backbone embed_dim " +
                                      std::to_string(m.backbone_.embed_dim()));
        m.backbone_.mark_strategy(to_string(Strategy::kClassifier));
        m.backbone_.parameters().set_trainable(false);
        m.head_ = build_classifier_head(spec, static_cast<int>(m.prompts_.size()));
        break;
    }
    return m;
  }

  Backbone& backbone() { return backbone_; }
  const std::optional<AdaptationSpec>& spec() const { return spec_; }
  std::optional<ClassifierHead>& head() { return head_; }
  const std::vector<std::string>& prompts() const { return prompts_; }
  int num_classes() const { return static_cast<int>(prompts_.size()); }

  bool uses_prompts() const { return !head_.has_value(); }

  /// Backbone then head, registry order.
  ParameterList parameters() {
    ParameterList out = backbone_.parameters();
    if (head_) out.append(head_->parameters());
    return out;
  }

  ParameterList trainable_parameters() { return parameters().trainable(); }

  /// B x K logits for a batch of images.
  ag::Var logits(ag::Tape& tape, const std::vector<const Image*>& images, bool training, Rng* rng) {
    ag::Var emb = backbone_.encode_images(tape, images);
    if (head_) return head_->forward(tape, emb, training, rng);
    return similarity_logits(emb, anchors(tape), backbone_.temperature());
  }

  /// Class-prompt embeddings. Recomputed on the tape while the text tower
  /// has trainable parameters, otherwise served from a cache.
  ag::Var anchors(ag::Tape& tape) {
    if (text_tower_trainable()) return backbone_.encode_texts(tape, prompts_);
    if (!anchor_cache_) anchor_cache_ = backbone_.embed_texts(prompts_);
    return tape.constant(*anchor_cache_);
  }

  void invalidate_cache() { anchor_cache_.reset(); }

  /// Evaluation-mode logits in fixed chunks; deterministic.
  Matrix predict_logits(const std::vector<const Image*>& images, std::size_t chunk = 64) {
    Matrix out(static_cast<Eigen::Index>(images.size()), num_classes());
    for (std::size_t start = 0; start < images.size(); start += chunk) {
      const std::size_t end = std::min(images.size(), start + chunk);
      ag::Tape tape(false);
      std::vector<const Image*> part(images.begin() + static_cast<std::ptrdiff_t>(start),
                                     images.begin() + static_cast<std::ptrdiff_t>(end));
      out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(end - start)) =
          logits(tape, part, false, nullptr).value();
    }
    return out;
  }

  Matrix predict_probabilities(const std::vector<const Image*>& images) {
    Matrix z = predict_logits(images);
    for (Eigen::Index i = 0; i < z.rows(); ++i) z.row(i) = predict_probs(z.row(i));
    return z;
  }

 private:
  AdaptedModel(Backbone backbone, std::optional<AdaptationSpec> spec, std::vector<std::string> prompts)
      : backbone_(std::move(backbone)), spec_(std::move(spec)), prompts_(std::move(prompts)) {
    if (prompts_.size() < 2) throw std::invalid_argument("AdaptedModel: need at least two classes");
    if (!spec_) {
      backbone_.parameters().set_trainable(false);
    }
  }

  bool text_tower_trainable() {
    for (const Parameter* p : backbone_.stem_parameters(Tower::kText))
      if (p->trainable) return true;
    for (const Parameter* p : backbone_.tower_parameters(Tower::kText))
      if (p->trainable) return true;
    return false;
  }

  Backbone backbone_;
  std::optional<AdaptationSpec> spec_;
  std::vector<std::string> prompts_;
  std::optional<ClassifierHead> head_;
  std::optional<Matrix> anchor_cache_;
};

inline ParameterList trainable_parameters(AdaptedModel& model) { return model.trainable_parameters(); }

// --------------------------------------------------------------------------
// Strategy checkpoints: trainable delta + hash of the frozen base.

inline void save_adapted(const std::filesystem::path& path, AdaptedModel& model,
                         const std::string& base_hash) {
  if (!model.spec()) throw std::logic_error("save_adapted: zero-shot model has no delta");
  Archive a;
  a.metadata = {{"kind", "delta"},
                {"spec", to_json(*model.spec())},
                {"base_hash", base_hash},
                {"num_classes", model.num_classes()},
                {"prompts", model.prompts()}};
  for (const Parameter* p : model.trainable_parameters()) a.entries.push_back({p->name, p->value});
  if (auto& head = model.head(); head && head->bn_affine) {
    a.entries.push_back({"head.bn.running_mean", head->running_mean});
    a.entries.push_back({"head.bn.running_var", head->running_var});
  }
  write_archive(path, a);
}

/// Rebuild an adapted model on top of `base`. Rejects archives whose base
/// hash does not match `base`.
inline AdaptedModel load_adapted(const std::filesystem::path& path, Backbone base) {
  const Archive a = read_archive(path);
  if (a.metadata.value("kind", "") != "delta") throw FormatError("archive is not a strategy delta");
  const std::string expected = a.metadata.at("base_hash").get<std::string>();
  if (parameter_hash(base.parameters()) != expected)
    throw IntegrityError("strategy checkpoint was trained on a different base backbone");
  const AdaptationSpec spec = adaptation_spec_from_json(a.metadata.at("spec"));
  AdaptedModel model = AdaptedModel::adapt(std::move(base), spec,
                                           a.metadata.at("prompts").get<std::vector<std::string>>());
  const ParameterList trainable = model.trainable_parameters();
  std::size_t matched = 0;
  for (const auto& e : a.entries) {
    if (e.name == "head.bn.running_mean" || e.name == "head.bn.running_var") {
      auto& head = model.head();
      if (!head || !head->bn_affine) throw FormatError("delta has batch-norm stats but no bn head");
      (e.name == "head.bn.running_mean" ? head->running_mean : head->running_var) = e.value.row(0);
      continue;
    }
    Parameter* p = trainable.find(e.name);
    if (p == nullptr || p->value.rows() != e.value.rows() || p->value.cols() != e.value.cols())
      throw FormatError("delta entry does not match the strategy: " + e.name);
    p->value = e.value;
    ++matched;
  }
  if (matched != trainable.size()) throw FormatError("delta is missing trainable parameters");
  return model;
}

}  // namespace fsvlm
