#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "mdunet/dataset.hpp"
#include "mdunet/executor.hpp"
#include "mdunet/inq.hpp"
#include "mdunet/train.hpp"

using namespace mdunet;

namespace {

ArchConfig tiny(int depth = 3, std::int64_t base = 8) {
  ArchConfig c;
  c.depth = depth;
  c.base_channels = base;
  return c;
}

Dataset blobs(std::int64_t count, std::uint64_t seed, std::int64_t size = 32) {
  SyntheticSpec s;
  s.count = count;
  s.size = size;
  s.seed = seed;
  return synth_dataset(s);
}

}  // namespace

TEST(LrAt, MilestoneSchedule) {
  TrainConfig c;
  EXPECT_DOUBLE_EQ(lr_at(0, c), 0.005);
  c.lr_milestones = {10000, 20000};
  EXPECT_DOUBLE_EQ(lr_at(9999, c), 0.005);
  EXPECT_NEAR(lr_at(10000, c), 0.0005, 1e-15);
  EXPECT_NEAR(lr_at(25000, c), 0.00005, 1e-15);
  std::set<double> plateaus;
  double prev = lr_at(0, c);
  for (std::int64_t it = 0; it < 30000; it += 7) {
    const double lr = lr_at(it, c);
    EXPECT_LE(lr, prev);
    prev = lr;
    plateaus.insert(lr);
  }
  EXPECT_EQ(plateaus.size(), c.lr_milestones.size() + 1);
}

TEST(SgdStep, UpdateFrozenAndNoop) {
  std::vector<Parameter> params;
  params.emplace_back("w", Tensor(Shape{2, 1, 1, 1}, 1.0f), 1);
  params[0].frozen_mask[1] = 1;
  params[0].tensor.grad()[0] = 0.5f;
  params[0].tensor.grad()[1] = 0.5f;
  sgd_step(params, 0.1);
  EXPECT_FLOAT_EQ(params[0].tensor[0], 0.95f);
  EXPECT_EQ(params[0].tensor[1], 1.0f);
  EXPECT_EQ(params[0].tensor.grad()[0], 0.0f);

  const std::vector<std::vector<float>> grads{{3.0f, 3.0f}};
  sgd_step(params, grads, 0.0);
  EXPECT_FLOAT_EQ(params[0].tensor[0], 0.95f);
  const std::vector<std::vector<float>> wrong{{1.0f}};
  EXPECT_THROW(sgd_step(params, wrong, 0.1), ShapeError);
}

TEST(TrainLoop, ConvergesOnBlobs) {
  ModelGraph g = build_unet(tiny(), 0);
  SyntheticSpec spec;
  const Dataset d = synth_dataset(spec);
  TrainConfig c;
  c.max_iterations = 200;
  const auto r = train_loop(g, d, c);
  ASSERT_EQ(r.history.size(), 200U);
  EXPECT_LT(r.history.back().loss, 0.15 * r.history.front().loss);
}

TEST(TrainLoop, SameSeedSameHistory) {
  const Dataset d = blobs(8, 3);
  TrainConfig c;
  c.max_iterations = 6;
  c.seed = 9;
  ModelGraph a = build_unet(tiny(2, 4), 2);
  ModelGraph b = build_unet(tiny(2, 4), 2);
  const auto ra = train_loop(a, d, c);
  const auto rb = train_loop(b, d, c);
  ASSERT_EQ(ra.history.size(), rb.history.size());
  for (std::size_t i = 0; i < ra.history.size(); ++i) EXPECT_EQ(ra.history[i].loss, rb.history[i].loss);
  for (std::size_t i = 0; i < a.parameters().size(); ++i) EXPECT_EQ(a.parameters()[i].tensor, b.parameters()[i].tensor);
}

TEST(TrainLoop, SingleSampleIsRepeatedIntoBatch) {
  const Dataset d = blobs(1, 4);
  ModelGraph g = build_unet(tiny(2, 4), 3);
  TrainConfig c;
  c.epochs = 2;
  const auto r = train_loop(g, d, c);
  EXPECT_EQ(r.history.size(), 2U);
}

TEST(TrainLoop, PartialFinalBatch) {
  const Dataset d = blobs(6, 4);
  ModelGraph g = build_unet(tiny(2, 4), 3);
  TrainConfig c;
  c.epochs = 1;
  EXPECT_EQ(train_loop(g, d, c).history.size(), 2U);
}

TEST(TrainLoop, EmptyDatasetRejected) {
  ModelGraph g = build_unet(tiny(2, 4), 3);
  EXPECT_THROW(train_loop(g, Dataset{}, TrainConfig{}), std::invalid_argument);
}

TEST(TrainLoop, DivergenceIsReported) {
  const Dataset d = blobs(4, 4);
  ModelGraph g = build_unet(tiny(2, 4), 3);
  TrainConfig c;
  c.base_lr = 1e30;
  c.max_iterations = 20;
  EXPECT_THROW(train_loop(g, d, c), NumericError);
}

TEST(TrainLoop, FixedBatchLossDecreasesOverFirstSteps) {
  const Dataset d = blobs(4, 11);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ModelGraph g = build_unet(tiny(2, 4), seed);
    Executor<float> exec(g);
    Tensor images;
    LabelMask labels;
    const std::vector<std::size_t> idx{0, 1, 2, 3};
    assemble_batch(d, idx, images, labels);
    double prev = 1e9;
    for (int step = 0; step < 10; ++step) {
      const auto loss = softmax_cross_entropy(exec.forward(images, Mode::Train), labels);
      EXPECT_LT(loss.loss, prev) << "seed " << seed << " step " << step;
      prev = loss.loss;
      exec.backward(loss.grad);
      sgd_step(g.parameters(), 0.005);
    }
  }
}

TEST(TrainLoop, FrozenWeightsSurviveTraining) {
  const Dataset d = blobs(8, 2);
  ModelGraph g = build_mdunet(tiny(2, 4), 5);
  QuantConfig q;
  auto params = quantizable_parameters(g, q);
  apply_quant_step(params, QuantState{q.bits, {}}, 0.5);
  const std::vector<const Parameter*> view(params.begin(), params.end());
  const auto before = frozen_checksum(view);
  TrainConfig c;
  c.max_iterations = 25;
  train_loop(g, d, c);
  EXPECT_EQ(frozen_checksum(view), before);
}

TEST(Metrics, PairArithmetic) {
  const std::vector<std::uint8_t> a{1, 1, 0, 0};
  EXPECT_EQ(metrics_pair(a, a).iou, 1.0);
  const std::vector<std::uint8_t> none(4, 0);
  EXPECT_EQ(metrics_pair(none, none).dice, 1.0);
  EXPECT_EQ(metrics_pair(none, a).iou, 0.0);
  EXPECT_EQ(metrics_pair(none, a).dice, 0.0);
  const std::vector<std::uint8_t> disjoint{0, 0, 1, 1};
  EXPECT_EQ(metrics_pair(a, disjoint).dice, 0.0);
  const std::vector<std::uint8_t> p2{1, 1, 0, 0};
  const std::vector<std::uint8_t> g2{0, 1, 1, 0};
  EXPECT_DOUBLE_EQ(metrics_pair(p2, g2).iou, 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(metrics_pair(p2, g2).dice, 0.5);
  const std::vector<std::uint8_t> p{1, 1, 1, 1, 0, 0, 0, 0, 0, 0};
  const std::vector<std::uint8_t> g{1, 1, 1, 0, 1, 1, 1, 0, 0, 0};
  EXPECT_DOUBLE_EQ(metrics_pair(p, g).iou, 3.0 / 7.0);
  EXPECT_DOUBLE_EQ(metrics_pair(p, g).dice, 0.6);
  EXPECT_THROW(metrics_pair(p, a), ShapeError);
}

TEST(Metrics, DiceIouIdentity) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 200; ++t) {
    std::vector<std::uint8_t> p(50);
    std::vector<std::uint8_t> g(50);
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = static_cast<std::uint8_t>(rng() % 2);
      g[i] = static_cast<std::uint8_t>(rng() % 2);
    }
    const auto m = metrics_pair(p, g);
    EXPECT_NEAR(m.dice, 2.0 * m.iou / (1.0 + m.iou), 1e-12);
    EXPECT_GE(m.dice, m.iou);
  }
}

TEST(Metrics, EvaluatePerfectModelOutput) {
  // Head bias decides every pixel: background everywhere matches empty masks.
  ModelGraph g = build_unet(tiny(2, 2), 1);
  for (auto& p : g.parameters()) {
    if (p.name == "head.weight") std::fill(p.tensor.values().begin(), p.tensor.values().end(), 0.0f);
    if (p.name == "head.bias") p.tensor[0] = 1.0f;
  }
  Dataset d;
  d.samples.push_back({"empty", Tensor(Shape{1, 1, 4, 4}, 0.3f), LabelMask(1, 4, 4)});
  const Metrics m = evaluate(g, d);
  EXPECT_EQ(m.mean_iou, 1.0);
  EXPECT_EQ(m.dice, 1.0);
  EXPECT_EQ(format_metrics(m), "mean_iou: 1.000000\ndice: 1.000000\n");
}

TEST(History, CsvHeaderAndRows) {
  std::ostringstream os;
  const std::vector<TrainRecord> h{{0, 0.005, 0.7}, {1, 0.005, 0.6}};
  write_history_csv(os, h);
  EXPECT_EQ(os.str(), "iteration,lr,loss\n0,0.005,0.7\n1,0.005,0.6\n");
}
