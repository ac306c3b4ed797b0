#include "test_support.hpp"

#include <gtest/gtest.h>

#include <fstream>

#include <unistd.h>

using namespace fsvlm;
using namespace fsvlm::testing;

namespace {

Backbone small_backbone() { return build_toy_backbone(BackboneConfig{}); }

Matrix orthonormal_rows(int k, int d) {
  Matrix m = Matrix::Zero(k, d);
  for (int i = 0; i < k; ++i) m(i, i) = 1.0;
  return m;
}

}  // namespace

TEST(Backbone, SameSeedGivesIdenticalParameters) {
  Backbone a = small_backbone();
  Backbone b = small_backbone();
  const auto pa = a.parameters();
  const auto pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    EXPECT_TRUE(bitwise_equal(pa[i].value, pb[i].value)) << pa[i].name;
  }
  BackboneConfig other;
  other.seed = 1;
  EXPECT_NE(parameter_hash(a.parameters()), parameter_hash(build_toy_backbone(other).parameters()));
}

TEST(Backbone, ImageEmbeddingsAreUnitNormAndDeterministic) {
  Backbone b = small_backbone();
  Rng rng(4);
  const auto images = random_images(10, 32, rng);
  for (const auto& img : images) {
    const Embedding e1 = b.encode_image(img);
    const Embedding e2 = b.encode_image(img);
    EXPECT_EQ(e1, e2);
    EXPECT_NEAR(e1.norm(), 1.0, 1e-6);
    EXPECT_EQ(e1.size(), 64);
  }
  // Batched and single encodes agree.
  const Matrix batch = b.embed_images(pointers(images));
  EXPECT_LT((batch.row(3) - b.encode_image(images[3])).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Backbone, ResamplesOtherSidesAndRejectsWrongChannels) {
  Backbone b = small_backbone();
  Rng rng(4);
  const auto big = random_images(1, 48, rng);
  EXPECT_NEAR(b.encode_image(big[0]).norm(), 1.0, 1e-6);
  EXPECT_THROW(b.encode_image(Image(32, 32, 1, 0.5)), std::invalid_argument);
}

TEST(Backbone, TextEmbeddingsFormAnchorMatrix) {
  Backbone b = small_backbone();
  const Matrix anchors = b.embed_texts(class_prompts());
  EXPECT_EQ(anchors.rows(), 5);
  for (Eigen::Index k = 0; k < 5; ++k) EXPECT_NEAR(anchors.row(k).norm(), 1.0, 1e-6);
  EXPECT_EQ(b.encode_text(class_prompts()[2]), b.encode_text(class_prompts()[2]));
  EXPECT_THROW(b.encode_text(""), std::invalid_argument);
  EXPECT_THROW(b.encode_text("tilde ~ is not in the vocabulary"), std::invalid_argument);
  EXPECT_THROW(b.encode_text(std::string(200, 'a')), std::invalid_argument);
}

TEST(SimilarityLogits, OrthonormalAnchorsAndTemperature) {
  const Matrix anchors = orthonormal_rows(5, 8);
  const RowVector img = anchors.row(0);
  const RowVector at1 = similarity_logits(img, anchors, 1.0);
  EXPECT_EQ(at1, (RowVector(5) << 1, 0, 0, 0, 0).finished());
  const RowVector at_half = similarity_logits(img, anchors, 0.5);
  EXPECT_EQ(at_half, 2.0 * at1);
  Rng rng(8);
  for (int i = 0; i < 50; ++i) {
    const RowVector v = random_normal(1, 8, 1.0, rng).normalized();
    const Matrix a = random_normal(5, 8, 1.0, rng).rowwise().normalized();
    EXPECT_EQ(argmax(similarity_logits(v, a, 1.0)), argmax(similarity_logits(v, a, 0.01)));
  }
  EXPECT_THROW(similarity_logits(img, anchors, 0.0), std::invalid_argument);
  EXPECT_THROW(similarity_logits(RowVector::Ones(4), anchors, 1.0), std::invalid_argument);
}

TEST(PredictProbs, ClosedFormsAndInvariances) {
  const RowVector uniform = predict_probs(RowVector::Zero(5));
  for (Eigen::Index i = 0; i < 5; ++i) EXPECT_NEAR(uniform(i), 0.2, 1e-15);
  const RowVector two = predict_probs((RowVector(2) << 1.0, 0.0).finished());
  EXPECT_NEAR(two(0), std::exp(1.0) / (std::exp(1.0) + 1.0), 1e-15);
  EXPECT_NEAR(two(0), 0.7311, 1e-4);
  Rng rng(6);
  for (int i = 0; i < 200; ++i) {
    const RowVector z = random_normal(1, 5, 30.0, rng);
    const RowVector p = predict_probs(z);
    EXPECT_NEAR(p.sum(), 1.0, 1e-9);
    EXPECT_GE(p.minCoeff(), 0.0);
    const RowVector shifted = predict_probs((z.array() + 123.456).matrix());
    EXPECT_LT((p - shifted).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(argmax(p), argmax(z));
  }
  EXPECT_THROW(predict_probs((RowVector(2) << 1.0, std::nan("")).finished()), std::invalid_argument);
  EXPECT_EQ(argmax((RowVector(4) << 0.1, 0.7, 0.7, 0.2).finished()), 1);
}

TEST(Backbone, EveryParameterReceivesGradient) {
  Backbone b = small_backbone();
  b.parameters().set_trainable(true);
  b.parameters().zero_grad();
  Rng rng(2);
  const auto images = random_images(4, 32, rng);
  ag::Tape tape;
  const ag::Var img = b.encode_images(tape, pointers(images));
  const ag::Var txt = b.encode_texts(tape, class_prompts());
  tape.backward(contrastive_loss(img, txt, {0, 1, 2, 3}, b.temperature()));
  std::size_t scalars = 0;
  for (const Parameter* p : b.parameters()) {
    EXPECT_GT(p->grad.cwiseAbs().maxCoeff(), 0.0) << p->name;
    scalars += p->size();
  }
  EXPECT_EQ(scalars, b.parameters().scalar_count());
}

TEST(Backbone, GradientsMatchFiniteDifferences) {
  Backbone b = small_backbone();
  auto params = b.parameters();
  params.set_trainable(true);
  Rng rng(12);
  const auto images = random_images(3, 32, rng);
  const std::vector<int> labels = {4, 0, 2};
  auto loss = [&](ag::Tape& tape) {
    return contrastive_loss(b.encode_images(tape, pointers(images)), b.encode_texts(tape, class_prompts()), labels,
                            b.temperature());
  };
  std::vector<Parameter*> chosen;
  for (std::size_t i = 0; i < params.size(); i += 3) chosen.push_back(&params[i]);
  const auto r = check_gradients(loss, chosen, 2, rng);
  EXPECT_GE(r.checked, 20);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(BackboneCheckpoint, RoundTripsBitExactly) {
  BackboneConfig cfg;
  cfg.seed = 77;
  cfg.temperature = 0.05;
  Backbone b = build_toy_backbone(cfg);
  const auto path = std::filesystem::temp_directory_path() / ("fsvlm_bb_" + std::to_string(::getpid()) + ".ckpt");
  save_backbone(path, b);
  const Archive a = read_archive(path);
  EXPECT_EQ(a.metadata.at("config").at("embed_dim"), 64);
  EXPECT_EQ(a.metadata.at("config").at("depth"), 2);
  EXPECT_EQ(a.metadata.at("config").at("temperature"), 0.05);
  EXPECT_EQ(a.metadata.at("config").at("seed"), 77);
  Backbone back = load_backbone(path);
  EXPECT_EQ(back.config(), cfg);
  const auto p1 = b.parameters(), p2 = back.parameters();
  for (std::size_t i = 0; i < p1.size(); ++i) EXPECT_TRUE(bitwise_equal(p1[i].value, p2[i].value));

  // Flip one payload byte.
  std::vector<char> bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  bytes[bytes.size() / 2] ^= 0x01;
  {
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  EXPECT_THROW(load_backbone(path), IntegrityError);
  std::filesystem::remove(path);
}

TEST(BackboneConfigJson, StrictAndValidated) {
  EXPECT_EQ(backbone_config_from_json(to_json(BackboneConfig{})), BackboneConfig{});
  EXPECT_THROW(backbone_config_from_json({{"embed_dimm", 64}}), FormatError);
  EXPECT_ANY_THROW(backbone_config_from_json({{"temperature", 0.0}}));
  EXPECT_ANY_THROW(backbone_config_from_json({{"embed_dim", 30}, {"heads", 4}}));
}

TEST(Backbone, StrategyExclusivity) {
  Backbone b = small_backbone();
  b.mark_strategy("lora");
  EXPECT_THROW(b.mark_strategy("adapter"), std::logic_error);
  EXPECT_THROW(save_backbone(std::filesystem::temp_directory_path() / "never.ckpt", b), std::logic_error);
}
