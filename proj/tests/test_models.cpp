#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "support.hpp"
#include "tes/data.hpp"
#include "tes/io.hpp"
#include "tes/models.hpp"

namespace {

using namespace tes;
using namespace tes::models;

data::DomainSpec tiny_source() {
  data::DomainSpec s = data::default_source_spec(5);
  s.train_per_class = 12;
  s.test_per_class = 6;
  return s;
}

data::DomainSpec tiny_target() {
  data::DomainSpec s = data::default_target_specs(5)[0];
  s.train_per_class = 12;
  s.test_per_class = 6;
  return s;
}

std::vector<double> random_image(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> x(data::kSide * data::kSide);
  for (double& v : x) v = u(rng);
  return x;
}

std::size_t body_feature_dim(ArchId arch) {
  const auto layers = architecture(arch, 7);
  return layers.back().in;
}

// ---- architectures ------------------------------------------------------------------

TEST(Architecture, BodyIndependentOfClassCount) {
  for (ArchId arch : {ArchId::ConvA, ArchId::ConvB}) {
    auto a = architecture(arch, 10), b = architecture(arch, 5);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i + 1 < a.size(); ++i) {
      EXPECT_EQ(a[i].name, b[i].name);
      EXPECT_EQ(a[i].in, b[i].in);
      EXPECT_EQ(a[i].out, b[i].out);
    }
    EXPECT_EQ(a.back().out, 10u);
    EXPECT_EQ(b.back().out, 5u);
  }
  EXPECT_EQ(body_feature_dim(ArchId::ConvA), 64u);
  EXPECT_EQ(body_feature_dim(ArchId::ConvB), 24u * 4 * 4);
}

TEST(Architecture, NamesRoundTrip) {
  EXPECT_EQ(arch_from_string(to_string(ArchId::ConvB)), ArchId::ConvB);
  EXPECT_EQ(mode_from_string(to_string(AttackMode::targeted)), AttackMode::targeted);
  EXPECT_THROW(arch_from_string("VGG16"), std::invalid_argument);
}

TEST(Classifier, LogitsAndScoresAreConsistent) {
  std::mt19937_64 rng(1);
  for (ArchId arch : {ArchId::ConvA, ArchId::ConvB}) {
    const Classifier m = init_classifier(arch, 10, 3);
    for (int i = 0; i < 20; ++i) {
      const auto x = random_image(rng);
      const auto logits = predict_logits(m, x);
      const auto scores = predict_scores(m, x);
      ASSERT_EQ(logits.size(), 10u);
      EXPECT_NEAR(std::accumulate(scores.begin(), scores.end(), 0.0), 1.0, 1e-12);
      EXPECT_EQ(argmax(scores), argmax(logits));
      EXPECT_EQ(predict_label(m, x), argmax(logits));
    }
  }
}

TEST(Classifier, BatchLogitsMatchSingleImageLogits) {
  std::mt19937_64 rng(2);
  const Classifier m = init_classifier(ArchId::ConvA, 5, 4);
  std::vector<std::vector<double>> xs;
  for (int i = 0; i < 5; ++i) xs.push_back(random_image(rng));
  const auto batch = m.batch_logits(xs);
  for (int i = 0; i < 5; ++i) {
    const auto single = predict_logits(m, xs[i]);
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(batch[i][j], single[j], 1e-12);
  }
}

// ---- training -----------------------------------------------------------------------

TEST(Training, ZeroEpochsIsChanceLevel) {
  auto spec = data::default_source_spec(0);
  spec.train_per_class = 1;
  spec.test_per_class = 100;
  const auto d = data::generate_domain(spec);
  TrainOptions o;
  o.epochs = 0;
  TrainReport r;
  train_classifier(d, ArchId::ConvA, o, &r);
  // 1000 balanced test samples; 4 binomial standard deviations around 1/10.
  EXPECT_NEAR(r.test_accuracy, 0.1, 4.0 * std::sqrt(0.1 * 0.9 / 1000.0));
}

TEST(Training, SameSeedSameWeights) {
  const auto d = data::generate_domain(tiny_source());
  TrainOptions o;
  o.epochs = 1;
  o.seed = 9;
  const auto a = train_classifier(d, ArchId::ConvB, o);
  const auto b = train_classifier(d, ArchId::ConvB, o);
  EXPECT_EQ(encode_classifier(a), encode_classifier(b));
  o.seed = 10;
  EXPECT_NE(encode_classifier(a), encode_classifier(train_classifier(d, ArchId::ConvB, o)));
}

TEST(Training, NonFiniteInputAbortsWithPosition) {
  auto d = data::generate_domain(tiny_source());
  d.train[3].pixels[0] = std::numeric_limits<double>::quiet_NaN();
  TrainOptions o;
  o.epochs = 1;
  try {
    train_classifier(d, ArchId::ConvA, o);
    FAIL() << "expected TrainingDiverged";
  } catch (const TrainingDiverged& e) {
    EXPECT_EQ(e.epoch, 0u);
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TEST(Finetune, InitialBodyEqualsSourceBitExactly) {
  const Classifier src = init_classifier(ArchId::ConvA, 10, 1);
  const Classifier ft = finetune_init(src, 5, 2);
  EXPECT_EQ(ft.label_space_size, 5u);
  EXPECT_EQ(ft.source_digest, model_digest(src));
  EXPECT_TRUE(ft.fine_tuned());
  EXPECT_FALSE(src.fine_tuned());
  for (const auto& p : ft.params.items()) {
    if (Classifier::is_head_param(p.name)) continue;
    EXPECT_EQ(p.value, src.params.at(p.name)) << p.name;
  }
  EXPECT_EQ(ft.params.at("head.weight").shape(), (Shape{body_feature_dim(ArchId::ConvA), 5}));
  EXPECT_EQ(ft.params.at("head.bias").shape(), (Shape{5}));
}

TEST(Finetune, UpdatesEveryParameter) {
  const auto src_data = data::generate_domain(tiny_source());
  const auto tgt_data = data::generate_domain(tiny_target());
  TrainOptions o;
  o.epochs = 1;
  const Classifier src = train_classifier(src_data, ArchId::ConvA, o);
  FinetuneOptions fo;
  fo.epochs = 1;
  const Classifier ft = finetune(src, tgt_data, fo);
  const Classifier start = finetune_init(src, 5, fo.seed);
  EXPECT_EQ(ft.source_digest, model_digest(src));
  for (const auto& p : ft.params.items()) EXPECT_NE(p.value, start.params.at(p.name)) << p.name;
}

// ---- generator ----------------------------------------------------------------------

TEST(Generator, PerturbationStaysInBallAndUnitRange) {
  GeneratorSpec spec;
  const auto g = init_generator(spec, 4);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 3.0);
  for (int i = 0; i < 500; ++i) {
    const auto x = random_image(rng);
    std::vector<double> z(spec.latent_dim);
    for (double& v : z) v = n(rng);
    const auto adv = g.decode_perturb(x, z);
    for (std::size_t p = 0; p < x.size(); ++p) {
      ASSERT_LE(std::abs(adv[p] - x[p]), spec.epsilon);
      ASSERT_GE(adv[p], std::max(0.0, x[p] - spec.epsilon));
      ASSERT_LE(adv[p], std::min(1.0, x[p] + spec.epsilon));
    }
  }
}

TEST(Generator, StrictlyInsideBallForModerateLatents) {
  GeneratorSpec spec;
  const auto g = init_generator(spec, 4);
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0.0, 0.5);
  // Interior pixels so clipping cannot touch the bound.
  std::vector<double> x(data::kSide * data::kSide, 0.5);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> z(spec.latent_dim);
    for (double& v : z) v = n(rng);
    const auto adv = g.decode_perturb(x, z);
    for (std::size_t p = 0; p < x.size(); ++p) ASSERT_LT(std::abs(adv[p] - x[p]), spec.epsilon);
  }
}

TEST(Generator, EncodeDecodeDeterministic) {
  const auto g = init_generator(GeneratorSpec{}, 7);
  std::mt19937_64 rng(8);
  const auto x = random_image(rng);
  EXPECT_EQ(g.encode(x), g.encode(x));
  EXPECT_EQ(g.generate(x), g.generate(x));
  EXPECT_EQ(g.generate(x), g.decode_perturb(x, g.encode(x)));
}

TEST(Generator, WrongLatentDimensionRejected) {
  const auto g = init_generator(GeneratorSpec{}, 7);
  std::vector<double> x(data::kSide * data::kSide, 0.5), z(5, 0.0);
  EXPECT_THROW(g.decode_perturb(x, z), ShapeError);
}

TEST(Generator, ZeroBudgetLeavesImagesAndFoolsOnlyErrors) {
  GeneratorSpec spec;
  spec.epsilon = 0.0;
  const auto g = init_generator(spec, 1);
  const auto d = data::generate_domain(tiny_source());
  for (const auto& s : d.test) EXPECT_EQ(g.generate(s.pixels), s.pixels);
  TrainOptions o;
  o.epochs = 1;
  const Classifier m = train_classifier(d, ArchId::ConvA, o);
  EXPECT_DOUBLE_EQ(generator_fool_rate(g, m, d.test), 1.0 - accuracy(m, d.test));
}

TEST(Generator, TrainingFreezesSurrogateAndIsDeterministic) {
  const auto d = data::generate_domain(tiny_source());
  TrainOptions o;
  o.epochs = 1;
  const Classifier m = train_classifier(d, ArchId::ConvA, o);
  const auto before = encode_classifier(m);
  GeneratorTrainOptions go;
  go.epochs = 1;
  GeneratorReport r1, r2;
  const auto g1 = train_generator(m, d, go, &r1);
  const auto g2 = train_generator(m, d, go, &r2);
  EXPECT_EQ(encode_classifier(m), before);
  EXPECT_EQ(encode_generator(g1), encode_generator(g2));
  EXPECT_DOUBLE_EQ(r1.white_box_fool_rate, generator_fool_rate(g1, m, d.test));
}

// ---- weight files -------------------------------------------------------------------

std::size_t layout_size(const Classifier& m) {
  std::size_t n = 4 + 4 + 2 + to_string(m.arch).size() + 4 + 32 + 4;
  for (const auto& p : m.params.items()) n += 2 + p.name.size() + 1 + 4 * p.value.rank() + 8 * p.value.size();
  return n;
}

TEST(WeightFile, RoundTripGivesIdenticalPredictions) {
  tes::testing::TempDir dir("weights");
  const Classifier m = init_classifier(ArchId::ConvB, 10, 11);
  save_classifier(m, dir.path() / "m.tesw");
  const Classifier back = load_classifier(dir.path() / "m.tesw");
  EXPECT_EQ(back.params, m.params);
  std::mt19937_64 rng(12);
  for (int i = 0; i < 100; ++i) {
    const auto x = random_image(rng);
    ASSERT_EQ(predict_scores(back, x), predict_scores(m, x));
  }
}

TEST(WeightFile, SizeMatchesLayout) {
  const Classifier a = init_classifier(ArchId::ConvA, 10, 1);
  const Classifier b = finetune_init(a, 5, 2);
  EXPECT_EQ(encode_classifier(a).size(), layout_size(a));
  EXPECT_EQ(encode_classifier(b).size(), layout_size(b));
}

TEST(WeightFile, CorruptionRejected) {
  auto bytes = encode_classifier(init_classifier(ArchId::ConvA, 10, 1));
  auto bad = bytes;
  bad[1] = 'X';
  EXPECT_THROW(decode_classifier(bad), FormatError);
  bad = bytes;
  bad[4] = 9;
  EXPECT_THROW(decode_classifier(bad), FormatError);
  bad = bytes;
  bad.resize(bad.size() - 3);
  try {
    decode_classifier(bad);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }
}

TEST(WeightFile, ArchAndProvenanceChecksOnLoad) {
  tes::testing::TempDir dir("weights-check");
  const Classifier src = init_classifier(ArchId::ConvA, 10, 1);
  const Classifier ft = finetune_init(src, 5, 2);
  save_classifier(ft, dir.path() / "ft.tesw");
  EXPECT_NO_THROW(load_classifier(dir.path() / "ft.tesw", ArchId::ConvA, model_digest(src)));
  EXPECT_THROW(load_classifier(dir.path() / "ft.tesw", ArchId::ConvB), std::invalid_argument);
  const Classifier other = init_classifier(ArchId::ConvA, 10, 3);
  EXPECT_THROW(load_classifier(dir.path() / "ft.tesw", ArchId::ConvA, model_digest(other)),
               std::invalid_argument);
}

TEST(WeightFile, GeneratorRoundTripKeepsSpec) {
  tes::testing::TempDir dir("generator");
  GeneratorSpec spec;
  spec.mode = AttackMode::targeted;
  spec.target_class = 3;
  spec.margin = 0.25;
  spec.epsilon = 0.05;
  const auto g = init_generator(spec, 5);
  save_generator(g, dir.path() / "g.tesw");
  const auto back = load_generator(dir.path() / "g.tesw");
  EXPECT_EQ(back.params, g.params);
  EXPECT_EQ(back.spec.mode, AttackMode::targeted);
  EXPECT_EQ(back.spec.target_class, 3u);
  EXPECT_EQ(back.spec.margin, 0.25);
  EXPECT_EQ(back.spec.epsilon, 0.05);
  EXPECT_THROW(decode_classifier(encode_generator(g)), FormatError);
  EXPECT_THROW(decode_generator(encode_classifier(init_classifier(ArchId::ConvA, 3, 1))), FormatError);
}

}  // namespace
