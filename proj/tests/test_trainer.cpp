#include "test_support.hpp"

#include <gtest/gtest.h>

#include <unistd.h>

using namespace fsvlm;
using namespace fsvlm::testing;
namespace fs = std::filesystem;

namespace {

Backbone base() { return build_toy_backbone(BackboneConfig{}); }

AdaptationSpec spec_for(Strategy s) {
  AdaptationSpec spec;
  spec.strategy = s;
  spec.classifier.in_dim = 64;
  return spec;
}

struct Data {
  std::vector<PatchSample> train, validation;
};

Data few_shot(int shots, int per_class = 60) {
  const auto all = generate_synthetic_dataset(per_class, 32, 7);
  const auto plan = build_shot_plan(labels_of(all), {shots}, 42);
  const Split split = materialize(plan, shots, all);
  return {split.train, split.validation};
}

TrainConfig fast_config(int steps) {
  TrainConfig c;
  c.base_lr = 0.01;
  c.batch_size = 8;
  c.max_epochs = 100;
  c.total_steps = steps;
  c.patience = 1000;
  return c;
}

double accuracy(AdaptedModel& m, const std::vector<PatchSample>& data) {
  const Matrix logits = m.predict_logits(pointers(data));
  int hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i)
    hits += argmax(RowVector(logits.row(static_cast<Eigen::Index>(i)))) == data[i].label.index();
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

}  // namespace

TEST(ContrastiveLoss, ClosedForms) {
  ag::Tape tape(false);
  Matrix anchors5 = Matrix::Zero(5, 6);
  for (int k = 0; k < 5; ++k) anchors5(k, k) = 1.0;
  Matrix img = Matrix::Zero(1, 6);
  img(0, 5) = 1.0;
  for (int label = 0; label < 5; ++label)
    EXPECT_NEAR(ag::scalar(contrastive_loss(tape.constant(img), tape.constant(anchors5), {label}, 1.0)),
                std::log(5.0), 1e-12);

  const Matrix anchors2{{1.0, 0.0}, {0.0, 1.0}};
  const double loss = ag::scalar(contrastive_loss(tape.constant(Matrix{{1.0, 0.0}}), tape.constant(anchors2), {0}, 1.0));
  EXPECT_NEAR(loss, std::log(1.0 + std::exp(-1.0)), 1e-12);
  EXPECT_NEAR(loss, 0.3133, 1e-4);
  EXPECT_THROW(contrastive_loss(tape.constant(img), tape.constant(anchors5), {5}, 1.0), std::out_of_range);
}

TEST(ContrastiveLoss, PermutationInvariantOverBatch) {
  Rng rng(4);
  const Matrix emb = random_normal(6, 8, 1.0, rng).rowwise().normalized();
  const Matrix anchors = random_normal(5, 8, 1.0, rng).rowwise().normalized();
  const std::vector<int> labels = {0, 3, 1, 4, 2, 2};
  const std::vector<int> perm = {5, 2, 0, 4, 1, 3};
  Matrix shuffled(6, 8);
  std::vector<int> shuffled_labels;
  for (int i = 0; i < 6; ++i) {
    shuffled.row(i) = emb.row(perm[static_cast<std::size_t>(i)]);
    shuffled_labels.push_back(labels[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]);
  }
  ag::Tape tape(false);
  const double a = ag::scalar(contrastive_loss(tape.constant(emb), tape.constant(anchors), labels, 0.1));
  const double b = ag::scalar(contrastive_loss(tape.constant(shuffled), tape.constant(anchors), shuffled_labels, 0.1));
  EXPECT_NEAR(a, b, 1e-12);
}

TEST(ContrastiveLoss, LoraGradientMatchesFiniteDifferences) {
  AdaptedModel m = AdaptedModel::adapt(base(), spec_for(Strategy::kLora));
  Rng rng(21);
  perturb_zero_inits(m, rng);
  const auto images = random_images(3, 32, rng);
  const std::vector<int> labels = {1, 4, 0};
  auto loss = [&](ag::Tape& tape) {
    return contrastive_loss(m.backbone().encode_images(tape, pointers(images)),
                            m.backbone().encode_texts(tape, class_prompts()), labels, m.backbone().temperature());
  };
  std::vector<Parameter*> params;
  for (Parameter* p : m.trainable_parameters()) params.push_back(p);
  const auto r = check_gradients(loss, params, 2, rng);
  EXPECT_GE(r.checked, 20);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(LrSchedule, WarmupThenLinearDecay) {
  TrainConfig c;
  c.base_lr = 1e-3;
  c.warmup_steps = 10;
  c.total_steps = 100;
  EXPECT_DOUBLE_EQ(lr_at(5, c), 5e-4);
  EXPECT_DOUBLE_EQ(lr_at(10, c), 1e-3);
  EXPECT_DOUBLE_EQ(lr_at(100, c), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(0, c), 0.0);
  EXPECT_NEAR(lr_at(55, c), 5e-4, 1e-18);
  EXPECT_THROW(lr_at(101, c), std::out_of_range);
  EXPECT_THROW(lr_at(-1, c), std::out_of_range);
  c.warmup_steps = 100;
  EXPECT_THROW(lr_at(5, c), std::invalid_argument);

  // Automatic warm-up is 10% of the run, at least one step, always short of the end.
  TrainConfig a;
  a.max_epochs = 50;
  EXPECT_EQ(resolve_schedule(a, 4).warmup_steps, 20);
  a.max_epochs = 1;
  EXPECT_EQ(resolve_schedule(a, 3).warmup_steps, 1);
  EXPECT_EQ(resolve_schedule(a, 1).warmup_steps, 0);
}

TEST(EarlyStop, HandSimulatedSequences) {
  const auto d = early_stop({1.0, 0.9, 0.895, 0.894}, 2, 0.01);
  EXPECT_TRUE(d.stop);
  EXPECT_EQ(d.stop_epoch, 4);
  EXPECT_EQ(d.best_epoch, 2);

  std::vector<double> falling;
  for (int i = 0; i < 100; ++i) falling.push_back(10.0 - i * 2 * 0.01);
  EXPECT_FALSE(early_stop(falling, 1, 0.01).stop);

  const auto flat = early_stop({0.5, 0.5, 0.5, 0.5}, 1, 0.0);
  EXPECT_TRUE(flat.stop);
  EXPECT_EQ(flat.stop_epoch, 2);
  EXPECT_EQ(flat.best_epoch, 1);

  // An improvement of exactly min_delta does not count.
  EXPECT_TRUE(early_stop({1.0, 0.75}, 1, 0.25).stop);
}

TEST(Augment, DeterministicIdentityAndFlipRate) {
  const auto data = generate_synthetic_dataset(1, 32, 3);
  Rng a(5), b(5);
  const PatchSample x = augment(data[0], a);
  const PatchSample y = augment(data[0], b);
  EXPECT_EQ(x.pixels, y.pixels);
  EXPECT_EQ(x.label, data[0].label);
  EXPECT_TRUE(x.pixels.square());
  EXPECT_EQ(x.pixels.width, 32);

  EXPECT_EQ(apply_augment(data[0].pixels, AugmentParams{}), data[0].pixels);

  Rng rng(77);
  int hflips = 0, vflips = 0;
  for (int i = 0; i < 1000; ++i) {
    const AugmentParams p = sample_augment(rng);
    hflips += p.hflip;
    vflips += p.vflip;
    EXPECT_LE(std::abs(p.angle_deg), 15.0);
    EXPECT_NEAR(p.brightness, 1.0, 0.1 + 1e-12);
    EXPECT_NEAR(p.contrast, 1.0, 0.1 + 1e-12);
  }
  EXPECT_NEAR(hflips / 1000.0, 0.5, 0.05);
  EXPECT_NEAR(vflips / 1000.0, 0.5, 0.05);

  // A horizontal flip alone mirrors columns.
  AugmentParams flip;
  flip.hflip = true;
  const Image f = apply_augment(data[0].pixels, flip);
  EXPECT_DOUBLE_EQ(f.at(3, 0, 1), data[0].pixels.at(3, 31, 1));
}

TEST(Adam, ZeroLearningRateChangesNothing) {
  Rng rng(1);
  Parameter p = trainable("p", random_normal(3, 4, 1.0, rng));
  p.grad = random_normal(3, 4, 1.0, rng);
  const Matrix before = p.value;
  ParameterList list;
  list.add(p);
  Adam adam(list, 1e-4);
  adam.step(0.0);
  EXPECT_TRUE(bitwise_equal(p.value, before));
  adam.step(1e-2);
  EXPECT_FALSE(bitwise_equal(p.value, before));
}

TEST(Train, FrozenParametersAreBitwiseUnchanged) {
  const Data d = few_shot(8, 20);
  for (Strategy s : {Strategy::kClassifier, Strategy::kLora, Strategy::kAdapter}) {
    AdaptedModel m = AdaptedModel::adapt(base(), spec_for(s));
    const ParameterList frozen = m.parameters().frozen();
    const auto before = snapshot(frozen);
    const auto trainable_before = snapshot(m.trainable_parameters());
    const TrainingHistory h = train(m, d.train, d.validation, fast_config(50));
    const auto after = snapshot(frozen);
    for (std::size_t i = 0; i < before.size(); ++i) EXPECT_TRUE(bitwise_equal(before[i], after[i])) << frozen[i].name;
    const auto trainable_after = snapshot(m.trainable_parameters());
    bool moved = false;
    for (std::size_t i = 0; i < trainable_before.size(); ++i)
      moved = moved || !bitwise_equal(trainable_before[i], trainable_after[i]);
    EXPECT_TRUE(moved) << to_string(s);
    EXPECT_LE(h.epochs.size(), 100u);
  }
}

TEST(Train, DeterministicGivenSeeds) {
  const Data d = few_shot(4, 20);
  TrainConfig c = fast_config(20);
  AdaptedModel a = AdaptedModel::adapt(base(), spec_for(Strategy::kLora));
  AdaptedModel b = AdaptedModel::adapt(base(), spec_for(Strategy::kLora));
  EXPECT_EQ(train(a, d.train, d.validation, c), train(b, d.train, d.validation, c));
  const auto pa = a.trainable_parameters(), pb = b.trainable_parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(bitwise_equal(pa[i].value, pb[i].value));
}

TEST(Train, ClassifierOverfitsThirtyTwoShots) {
  const Data d = few_shot(32);
  AdaptedModel m = AdaptedModel::adapt(base(), spec_for(Strategy::kClassifier));
  TrainConfig c;
  c.base_lr = 0.01;
  c.max_epochs = 30;
  c.patience = 30;
  train(m, d.train, d.validation, c);
  EXPECT_GE(accuracy(m, d.train), 0.95);
}

TEST(Train, BestEpochWithinMinDeltaOfStopEpochAndHistoryRoundTrips) {
  const Data d = few_shot(4, 20);
  for (Strategy s : {Strategy::kVanilla, Strategy::kLora, Strategy::kAdapter, Strategy::kClassifier}) {
    AdaptedModel m = AdaptedModel::adapt(base(), spec_for(s));
    TrainConfig c;
    c.base_lr = 0.01;
    c.max_epochs = 15;
    c.patience = 2;
    c.min_delta = 1e-3;
    const TrainingHistory h = train(m, d.train, d.validation, c);
    ASSERT_FALSE(h.epochs.empty());
    ASSERT_GE(h.best_epoch, 1);
    const double best = h.epochs[static_cast<std::size_t>(h.best_epoch - 1)].val_monitor;
    EXPECT_LE(best, h.epochs.back().val_monitor + c.min_delta) << to_string(s);
    // The restored weights reproduce the best epoch's monitor.
    EXPECT_NEAR(evaluation_loss(m, d.validation), best, 1e-12) << to_string(s);

    const fs::path path = fs::temp_directory_path() / ("fsvlm_hist_" + std::to_string(::getpid()) + ".jsonl");
    write_history(path, h);
    EXPECT_EQ(read_history(path), h);
    fs::remove(path);
  }
}

TEST(Train, RejectsEmptyInputsAndBadConfig) {
  const Data d = few_shot(1, 20);
  AdaptedModel m = AdaptedModel::adapt(base(), spec_for(Strategy::kLora));
  EXPECT_THROW(train(m, {}, d.validation, TrainConfig{}), std::invalid_argument);
  AdaptedModel zero = AdaptedModel::zero_shot(base());
  EXPECT_THROW(train(zero, d.train, d.validation, TrainConfig{}), std::invalid_argument);
  TrainConfig bad;
  bad.monitor = "val_accuracy";
  EXPECT_THROW(train(m, d.train, d.validation, bad), std::invalid_argument);
  EXPECT_THROW(train_config_from_json({{"lr", 0.1}}, TrainConfig{}), FormatError);
}

TEST(Train, TrainedEmbeddingsClusterByClass) {
  const Data d = few_shot(16, 40);
  AdaptedModel m = AdaptedModel::adapt(base(), spec_for(Strategy::kLora));
  TrainConfig c;
  c.base_lr = 0.01;
  c.max_epochs = 15;
  train(m, d.train, d.validation, c);
  std::vector<PatchSample> two;
  for (const auto& s : d.validation)
    if (s.label.index() <= 1) two.push_back(s);
  const Matrix emb = m.backbone().embed_images(pointers(two));
  double within = 0.0, between = 0.0;
  int nw = 0, nb = 0;
  for (std::size_t i = 0; i < two.size(); ++i)
    for (std::size_t j = i + 1; j < two.size(); ++j) {
      const double cos = emb.row(static_cast<Eigen::Index>(i)).dot(emb.row(static_cast<Eigen::Index>(j)));
      if (two[i].label == two[j].label) {
        within += cos;
        ++nw;
      } else {
        between += cos;
        ++nb;
      }
    }
  EXPECT_GT(within / nw, between / nb);
}
