#pragma once

// Contrastive vision-language backbone: a patch-embedding image tower and a
// character-level text tower, each a stack of pre-LN transformer blocks,
// mean-pooled and projected into a shared unit-norm embedding space.
// Prediction compares an image embedding with the class-prompt embeddings
// by temperature-scaled cosine similarity.
//
// The toy configuration is small enough to train on a CPU. Pretrained
// ViT/Transformer weights of the same layout can be loaded through
// load_backbone() from an archive whose entries follow the registry names.

#include "fsvlm/archive.hpp"
#include "fsvlm/autograd.hpp"
#include "fsvlm/errors.hpp"
#include "fsvlm/image.hpp"
#include "fsvlm/parameters.hpp"
#include "fsvlm/random.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace fsvlm {

using Embedding = RowVector;

enum class Tower { kImage, kText };

inline std::string_view tower_name(Tower t) { return t == Tower::kImage ? "image" : "text"; }

// --------------------------------------------------------------------------
// Layers

inline Matrix random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, stddev);
  return m;
}

/// x -> x W^T + (alpha/r) (x A^T) B^T; W is frozen while the pair trains.
struct LoraPair {
  Parameter a;  // r x d_in
  Parameter b;  // d_out x r, zero at injection
  double scale = 1.0;
};

/// y = x W^T + b with W stored d_out x d_in.
struct Linear {
  Parameter weight;
  Parameter bias;
  std::optional<LoraPair> lora;

  Linear() = default;
  Linear(const std::string& name, int d_in, int d_out, Rng& rng)
      : weight(name + ".weight", random_normal(d_out, d_in, 1.0 / std::sqrt(d_in), rng)),
        bias(name + ".bias", Matrix::Zero(1, d_out)) {}

  int in_dim() const { return static_cast<int>(weight.value.cols()); }
  int out_dim() const { return static_cast<int>(weight.value.rows()); }

  ag::Var forward(ag::Tape& tape, ag::Var x) {
    ag::Var y = ag::add_row(ag::matmul_nt(x, tape.param(weight)), tape.param(bias));
    if (lora) {
      ag::Var low = ag::matmul_nt(x, tape.param(lora->a));
      y = ag::add(y, ag::scale(ag::matmul_nt(low, tape.param(lora->b)), lora->scale));
    }
    return y;
  }

  void collect(ParameterList& out) {
    out.add(weight);
    out.add(bias);
    if (lora) {
      out.add(lora->a);
      out.add(lora->b);
    }
  }
};

struct LayerNorm {
  Parameter gamma;
  Parameter beta;

  LayerNorm() = default;
  LayerNorm(const std::string& name, int dim)
      : gamma(name + ".gamma", Matrix::Ones(1, dim)), beta(name + ".beta", Matrix::Zero(1, dim)) {}

  ag::Var forward(ag::Tape& tape, ag::Var x) {
    return ag::layer_norm(x, tape.param(gamma), tape.param(beta));
  }
  void collect(ParameterList& out) {
    out.add(gamma);
    out.add(beta);
  }
};

/// Residual bottleneck x + up(gelu(down(x))); `up` starts at zero.
struct AdapterBlock {
  Linear down;
  Linear up;

  ag::Var forward(ag::Tape& tape, ag::Var x) {
    return ag::add(x, up.forward(tape, ag::gelu(down.forward(tape, x))));
  }
  void collect(ParameterList& out) {
    down.collect(out);
    up.collect(out);
  }
};

struct TransformerBlock {
  int heads = 1;
  LayerNorm ln_attn;
  Linear q, k, v, o;
  LayerNorm ln_mlp;
  Linear fc1, fc2;
  std::optional<AdapterBlock> adapter_attn;
  std::optional<AdapterBlock> adapter_mlp;

  TransformerBlock() = default;
  TransformerBlock(const std::string& name, int dim, int heads_, int mlp_hidden, Rng& rng)
      : heads(heads_),
        ln_attn(name + ".ln_attn", dim),
        q(name + ".attn.q", dim, dim, rng),
        k(name + ".attn.k", dim, dim, rng),
        v(name + ".attn.v", dim, dim, rng),
        o(name + ".attn.o", dim, dim, rng),
        ln_mlp(name + ".ln_mlp", dim),
        fc1(name + ".mlp.fc1", dim, mlp_hidden, rng),
        fc2(name + ".mlp.fc2", mlp_hidden, dim, rng) {}

  Linear* projection(std::string_view which) {
    if (which == "q") return &q;
    if (which == "k") return &k;
    if (which == "v") return &v;
    if (which == "o") return &o;
    return nullptr;
  }

  /// x holds B sequences of seq_len rows each.
  ag::Var forward(ag::Tape& tape, ag::Var x, Eigen::Index seq_len) {
    ag::Var h = ln_attn.forward(tape, x);
    ag::Var attn = ag::multi_head_attention(q.forward(tape, h), k.forward(tape, h),
                                            v.forward(tape, h), seq_len, heads);
    attn = o.forward(tape, attn);
    if (adapter_attn) attn = adapter_attn->forward(tape, attn);
    x = ag::add(x, attn);
    ag::Var m = fc2.forward(tape, ag::gelu(fc1.forward(tape, ln_mlp.forward(tape, x))));
    if (adapter_mlp) m = adapter_mlp->forward(tape, m);
    return ag::add(x, m);
  }

  void collect(ParameterList& out) {
    ln_attn.collect(out);
    q.collect(out);
    k.collect(out);
    v.collect(out);
    o.collect(out);
    ln_mlp.collect(out);
    fc1.collect(out);
    fc2.collect(out);
    if (adapter_attn) adapter_attn->collect(out);
    if (adapter_mlp) adapter_mlp->collect(out);
  }
};

// --------------------------------------------------------------------------
// Tokenizer

/// Fixed 64-symbol character vocabulary; letters are case-folded.
inline constexpr std::string_view kVocabulary =
    " abcdefghijklmnopqrstuvwxyz0123456789.,;:'\"!?-()/&+%*=<>[]#@_${}";
static_assert(kVocabulary.size() == 64);

inline std::vector<int> tokenize(std::string_view text, int max_len) {
  if (text.empty()) throw std::invalid_argument("tokenize: empty prompt");
  if (static_cast<int>(text.size()) > max_len)
    throw std::invalid_argument("tokenize: prompt longer than " + std::to_string(max_len));
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char ch : text) {
    const char folded = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    const auto pos = kVocabulary.find(folded);
    if (pos == std::string_view::npos)
      throw std::invalid_argument(std::string("tokenize: symbol not in vocabulary: '") + ch + "'");
    ids.push_back(static_cast<int>(pos));
  }
  return ids;
}

// --------------------------------------------------------------------------
// Backbone

struct BackboneConfig {
  std::string id = "toy";
  int image_side = 32;   // input patches are resampled to this side
  int token_patch = 8;   // image tokens are token_patch x token_patch pixels
  int channels = 3;
  int embed_dim = 64;
  int depth = 2;
  int heads = 4;
  int mlp_hidden = 128;
  int max_text_len = 96;
  double temperature = 0.01;
  std::uint64_t seed = 0;
  std::array<double, 3> pixel_mean = {0.5, 0.5, 0.5};
  std::array<double, 3> pixel_std = {0.25, 0.25, 0.25};

  int tokens_per_image() const {
    const int n = image_side / token_patch;
    return n * n;
  }

  void validate() const {
    if (image_side <= 0 || token_patch <= 0 || image_side % token_patch != 0)
      throw std::invalid_argument("backbone config: image_side must be a multiple of token_patch");
    if (channels != 3) throw std::invalid_argument("backbone config: channels must be 3");
    if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0)
      throw std::invalid_argument("backbone config: embed_dim must be divisible by heads");
    if (depth < 1 || mlp_hidden < 1 || max_text_len < 1)
      throw std::invalid_argument("backbone config: depth, mlp_hidden, max_text_len must be >= 1");
    if (!(temperature > 0.0)) throw std::invalid_argument("backbone config: temperature must be > 0");
    for (double s : pixel_std)
      if (!(s > 0.0)) throw std::invalid_argument("backbone config: pixel_std must be > 0");
  }

  bool operator==(const BackboneConfig&) const = default;
};

using ToyBackboneConfig = BackboneConfig;

inline nlohmann::json to_json(const BackboneConfig& c) {
  return {{"id", c.id},
          {"image_side", c.image_side},
          {"token_patch", c.token_patch},
          {"channels", c.channels},
          {"embed_dim", c.embed_dim},
          {"depth", c.depth},
          {"heads", c.heads},
          {"mlp_hidden", c.mlp_hidden},
          {"max_text_len", c.max_text_len},
          {"temperature", c.temperature},
          {"seed", c.seed},
          {"pixel_mean", c.pixel_mean},
          {"pixel_std", c.pixel_std}};
}

/// Strict: unknown keys are rejected, missing keys keep their defaults.
inline BackboneConfig backbone_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw FormatError("backbone config must be an object");
  BackboneConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "id") c.id = value.get<std::string>();
    else if (key == "image_side") c.image_side = value.get<int>();
    else if (key == "token_patch") c.token_patch = value.get<int>();
    else if (key == "channels") c.channels = value.get<int>();
    else if (key == "embed_dim") c.embed_dim = value.get<int>();
    else if (key == "depth") c.depth = value.get<int>();
    else if (key == "heads") c.heads = value.get<int>();
    else if (key == "mlp_hidden") c.mlp_hidden = value.get<int>();
    else if (key == "max_text_len") c.max_text_len = value.get<int>();
    else if (key == "temperature") c.temperature = value.get<double>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "pixel_mean") c.pixel_mean = value.get<std::array<double, 3>>();
    else if (key == "pixel_std") c.pixel_std = value.get<std::array<double, 3>>();
    else throw FormatError("unknown backbone config key: " + key);
  }
  c.validate();
  return c;
}

class Backbone {
 public:
  struct TowerLayers {
    std::vector<TransformerBlock> blocks;
    LayerNorm ln_final;
    Parameter projection;  // embed_dim x embed_dim
  };

  explicit Backbone(BackboneConfig config) : config_(std::move(config)) {
    config_.validate();
    Rng rng(config_.seed);
    const int d = config_.embed_dim;
    const int patch_dim = config_.token_patch * config_.token_patch * config_.channels;
    patch_embed_ = Linear("image.patch_embed", patch_dim, d, rng);
    image_positional_ = Parameter("image.positional",
                                  random_normal(config_.tokens_per_image(), d, 0.1, rng));
    token_embed_ = Parameter("text.token_embed",
                             random_normal(static_cast<Eigen::Index>(kVocabulary.size()), d, 1.0, rng));
    text_positional_ = Parameter("text.positional", random_normal(config_.max_text_len, d, 0.1, rng));
    for (Tower t : {Tower::kImage, Tower::kText}) {
      TowerLayers& tl = tower(t);
      const std::string prefix(tower_name(t));
      for (int i = 0; i < config_.depth; ++i)
        tl.blocks.emplace_back(prefix + ".blocks." + std::to_string(i), d, config_.heads,
                               config_.mlp_hidden, rng);
      tl.ln_final = LayerNorm(prefix + ".ln_final", d);
      tl.projection = Parameter(prefix + ".projection", random_normal(d, d, 1.0 / std::sqrt(d), rng));
    }
  }

  const BackboneConfig& config() const { return config_; }
  double temperature() const { return config_.temperature; }
  int depth() const { return config_.depth; }
  int embed_dim() const { return config_.embed_dim; }

  TransformerBlock& block(Tower t, int index) { return tower(t).blocks.at(static_cast<std::size_t>(index)); }
  TowerLayers& tower(Tower t) { return t == Tower::kImage ? image_ : text_; }

  /// Name of the adaptation applied to this handle, empty when none.
  const std::string& strategy() const { return strategy_; }
  void mark_strategy(std::string name) {
    if (!strategy_.empty())
      throw std::logic_error("backbone already adapted with strategy '" + strategy_ + "'");
    strategy_ = std::move(name);
  }

  /// Every parameter, in a stable registry order.
  ParameterList parameters() {
    ParameterList out;
    out.append(stem_parameters(Tower::kImage));
    out.append(tower_parameters(Tower::kImage));
    out.append(stem_parameters(Tower::kText));
    out.append(tower_parameters(Tower::kText));
    return out;
  }

  ParameterList stem_parameters(Tower t) {
    ParameterList out;
    if (t == Tower::kImage) {
      patch_embed_.collect(out);
      out.add(image_positional_);
    } else {
      out.add(token_embed_);
      out.add(text_positional_);
    }
    return out;
  }

  ParameterList block_parameters(Tower t, int index) {
    ParameterList out;
    block(t, index).collect(out);
    return out;
  }

  /// Final LayerNorm and projection of a tower.
  ParameterList head_parameters(Tower t) {
    ParameterList out;
    TowerLayers& tl = tower(t);
    tl.ln_final.collect(out);
    out.add(tl.projection);
    return out;
  }

  ParameterList tower_parameters(Tower t) {
    ParameterList out;
    for (int i = 0; i < config_.depth; ++i) out.append(block_parameters(t, i));
    out.append(head_parameters(t));
    return out;
  }

  /// Resample, check channels and normalise; the backbone-specific hook.
  Image preprocess(const Image& img) const {
    if (img.channels != config_.channels)
      throw std::invalid_argument("encode_image: expected " + std::to_string(config_.channels) +
                                  " channels, got " + std::to_string(img.channels));
    Image out = resize_square(img, config_.image_side);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
      const std::size_t c = i % 3;
      out.data[i] = (out.data[i] - config_.pixel_mean[c]) / config_.pixel_std[c];
    }
    return out;
  }

  /// Rows: token_patch^2 * channels pixel values of each token, row-major.
  Matrix patchify(const Image& pre) const {
    const int p = config_.token_patch;
    const int per_side = config_.image_side / p;
    Matrix tokens(per_side * per_side, p * p * config_.channels);
    for (int ty = 0; ty < per_side; ++ty)
      for (int tx = 0; tx < per_side; ++tx) {
        Eigen::Index col = 0;
        for (int y = 0; y < p; ++y)
          for (int x = 0; x < p; ++x)
            for (int c = 0; c < config_.channels; ++c)
              tokens(ty * per_side + tx, col++) = pre.at(ty * p + y, tx * p + x, c);
      }
    return tokens;
  }

  /// B x embed_dim unit-norm image embeddings.
  ag::Var encode_images(ag::Tape& tape, const std::vector<const Image*>& images) {
    if (images.empty()) throw std::invalid_argument("encode_images: empty batch");
    const int t = config_.tokens_per_image();
    Matrix tokens(static_cast<Eigen::Index>(images.size()) * t,
                  config_.token_patch * config_.token_patch * config_.channels);
    for (std::size_t i = 0; i < images.size(); ++i)
      tokens.middleRows(static_cast<Eigen::Index>(i) * t, t) = patchify(preprocess(*images[i]));
    ag::Var x = patch_embed_.forward(tape, tape.constant(std::move(tokens)));
    x = ag::add_tiled(x, tape.param(image_positional_));
    return finish(tape, Tower::kImage, x, t);
  }

  /// K x embed_dim unit-norm text embeddings, one row per prompt.
  ag::Var encode_texts(ag::Tape& tape, const std::vector<std::string>& prompts) {
    if (prompts.empty()) throw std::invalid_argument("encode_texts: no prompts");
    std::vector<ag::Var> rows;
    for (const auto& prompt : prompts) {
      std::vector<int> ids = tokenize(prompt, config_.max_text_len);
      const auto len = static_cast<Eigen::Index>(ids.size());
      ag::Var x = ag::gather_rows(tape.param(token_embed_), std::move(ids));
      x = ag::add(x, ag::slice_rows(tape.param(text_positional_), 0, len));
      rows.push_back(finish(tape, Tower::kText, x, len));
    }
    return ag::concat_rows(rows);
  }

  /// Evaluation-mode embeddings in fixed-size chunks; no gradients.
  Matrix embed_images(const std::vector<const Image*>& images, std::size_t chunk = 64) {
    Matrix out(static_cast<Eigen::Index>(images.size()), config_.embed_dim);
    for (std::size_t start = 0; start < images.size(); start += chunk) {
      const std::size_t end = std::min(images.size(), start + chunk);
      ag::Tape tape(false);
      std::vector<const Image*> part(images.begin() + static_cast<std::ptrdiff_t>(start),
                                     images.begin() + static_cast<std::ptrdiff_t>(end));
      out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(end - start)) =
          encode_images(tape, part).value();
    }
    return out;
  }

  Matrix embed_texts(const std::vector<std::string>& prompts) {
    ag::Tape tape(false);
    return encode_texts(tape, prompts).value();
  }

  Embedding encode_image(const Image& img) { return embed_images({&img}).row(0); }
  Embedding encode_text(const std::string& prompt) { return embed_texts({prompt}).row(0); }

 private:
  ag::Var finish(ag::Tape& tape, Tower t, ag::Var x, Eigen::Index seq_len) {
    TowerLayers& tl = tower(t);
    for (auto& blk : tl.blocks) x = blk.forward(tape, x, seq_len);
    x = tl.ln_final.forward(tape, x);
    x = ag::group_mean_rows(x, seq_len);
    x = ag::matmul_nt(x, tape.param(tl.projection));
    return ag::l2_normalize_rows(x);
  }

  BackboneConfig config_;
  Linear patch_embed_;
  Parameter image_positional_;
  Parameter token_embed_;
  Parameter text_positional_;
  TowerLayers image_;
  TowerLayers text_;
  std::string strategy_;
};

using BackboneHandle = Backbone;

inline Backbone build_toy_backbone(const ToyBackboneConfig& config) { return Backbone(config); }

// --------------------------------------------------------------------------
// Prediction

/// logit_k = <img, anchor_k> / temperature for K anchor rows.
inline RowVector similarity_logits(const Embedding& img, const Matrix& anchors, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("similarity_logits: temperature must be > 0");
  if (anchors.cols() != img.size())
    throw std::invalid_argument("similarity_logits: embedding dimension mismatch");
  return (anchors * img.transpose()).transpose() / temperature;
}

inline ag::Var similarity_logits(ag::Var images, ag::Var anchors, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("similarity_logits: temperature must be > 0");
  return ag::scale(ag::matmul_nt(images, anchors), 1.0 / temperature);
}

/// Max-subtracted softmax.
inline RowVector predict_probs(const RowVector& logits) {
  if (!logits.allFinite()) throw std::invalid_argument("predict_probs: non-finite logits");
  RowVector e = (logits.array() - logits.maxCoeff()).exp().matrix();
  return e / e.sum();
}

/// Index of the largest entry; ties go to the lowest index.
inline int argmax(const RowVector& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = i;
  return static_cast<int>(best);
}

// --------------------------------------------------------------------------
// Checkpoints

inline Archive backbone_archive(Backbone& backbone) {
  Archive a;
  a.metadata = {{"kind", "backbone"}, {"config", to_json(backbone.config())}};
  for (const Parameter* p : backbone.parameters()) a.entries.push_back({p->name, p->value});
  return a;
}

inline void save_backbone(const std::filesystem::path& path, Backbone& backbone) {
  if (!backbone.strategy().empty())
    throw std::logic_error("save_backbone: only unadapted backbones are saved whole");
  write_archive(path, backbone_archive(backbone));
}

inline Backbone backbone_from_archive(const Archive& a) {
  if (a.metadata.value("kind", "") != "backbone") throw FormatError("archive is not a backbone");
  Backbone b(backbone_config_from_json(a.metadata.at("config")));
  const ParameterList params = b.parameters();
  if (params.size() != a.entries.size()) throw FormatError("backbone archive: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = a.entries[i];
    Parameter& p = params[i];
    if (e.name != p.name || e.value.rows() != p.value.rows() || e.value.cols() != p.value.cols())
      throw FormatError("backbone archive: unexpected entry " + e.name);
    p.value = e.value;
  }
  return b;
}

inline Backbone load_backbone(const std::filesystem::path& path) {
  return backbone_from_archive(read_archive(path));
}

}  // namespace fsvlm
