#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <thread>

#include <dispick/raster.hpp>
#include <dispick/segnet/checkpoint.hpp>
#include <dispick/segnet/train.hpp>

#include "support/gradcheck.hpp"

using namespace dispick;
using namespace dispick::segnet;
namespace fs = std::filesystem;

namespace {

std::vector<Sample> raster_samples(std::size_t n, std::uint64_t seed) {
  std::vector<Sample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = rasterize(generate_curveset(Domain::sim, seed, i, n));
    Sample s{Tensor<float>({64, 64, 1}), {}};
    for (int k = 0; k < kPixels; ++k) s.input[static_cast<std::size_t>(k)] = r.image.pixels.v[static_cast<std::size_t>(k)] / 255.0f;
    s.target.assign(r.mask.classes.v.begin(), r.mask.classes.v.end());
    out.push_back(std::move(s));
  }
  return out;
}

// Small 16x16 crops keep training tests quick.
std::vector<Sample> crops(const std::vector<Sample>& full, std::size_t row0, std::size_t col0) {
  std::vector<Sample> out;
  for (const auto& s : full) {
    Sample c{Tensor<float>({16, 16, 1}), std::vector<std::uint8_t>(256)};
    for (std::size_t r = 0; r < 16; ++r)
      for (std::size_t q = 0; q < 16; ++q) {
        c.input.at(r, q, 0) = s.input.at(row0 + r, col0 + q, 0);
        c.target[r * 16 + q] = s.target[(row0 + r) * 64 + col0 + q];
      }
    out.push_back(std::move(c));
  }
  return out;
}

fs::path scratch(const std::string& name) { return fs::temp_directory_path() / ("dispick_segnet_" + name); }

}  // namespace

TEST(Conv2d, DeltaKernelIsIdentity) {
  Rng rng(1);
  const auto x = gradcheck::random_tensor({5, 7, 1}, rng);
  Tensor<double> k({3, 3, 1, 1});
  k[4] = 1.0;
  EXPECT_EQ(conv2d(x, k, Tensor<double>({1})), x);
}

TEST(Conv2d, OnesKernelSumsNeighbourhood) {
  const Tensor<double> x({5, 5, 1}, 1.0);
  const Tensor<double> k({3, 3, 1, 1}, 1.0);
  const Tensor<double> b({1}, 0.5);
  const auto y = conv2d(x, k, b);
  EXPECT_EQ(y.at(2, 2, 0), 9.5);
  EXPECT_EQ(y.at(0, 2, 0), 6.5);
  EXPECT_EQ(y.at(0, 0, 0), 4.5);
}

TEST(Conv2d, ShapeMismatchIsStructural) {
  const Tensor<double> x({4, 4, 2});
  EXPECT_THROW(conv2d(x, Tensor<double>({3, 3, 3, 1}), Tensor<double>({1})), StructuralError);
  EXPECT_THROW(conv2d(x, Tensor<double>({3, 3, 2, 1}), Tensor<double>({2})), StructuralError);
  EXPECT_THROW(conv2d(x, Tensor<double>({2, 2, 2, 1}), Tensor<double>({1})), StructuralError);
}

TEST(Conv2d, FiniteDifferences) {
  Rng rng(2);
  for (int i = 0; i < 5; ++i) EXPECT_LT(gradcheck::conv2d(rng).max_rel, 1e-4);
  EXPECT_LT(gradcheck::conv2d(rng, 4, 5, 3, 2, 1).max_rel, 1e-4);
}

TEST(MaxPool, ConstantStaysConstant) {
  const Tensor<double> x({4, 6, 2}, 3.0);
  const auto y = maxpool2(x);
  EXPECT_EQ(y.shape(), (Tensor<double>::Shape{2, 3, 2}));
  for (double v : y.values()) EXPECT_EQ(v, 3.0);
}

TEST(MaxPool, TiesRouteToFirstInScanOrder) {
  Tensor<double> x({2, 2, 1}, 1.0);
  std::vector<std::uint32_t> arg;
  maxpool2(x, &arg);
  const auto dx = maxpool2_backward(Tensor<double>({1, 1, 1}, 5.0), arg, x.shape());
  EXPECT_EQ(dx.at(0, 0, 0), 5.0);
  EXPECT_EQ(dx.at(0, 1, 0) + dx.at(1, 0, 0) + dx.at(1, 1, 0), 0.0);
  x.at(1, 0, 0) = 2.0;
  x.at(1, 1, 0) = 2.0;
  maxpool2(x, &arg);
  const auto dx2 = maxpool2_backward(Tensor<double>({1, 1, 1}, 5.0), arg, x.shape());
  EXPECT_EQ(dx2.at(1, 0, 0), 5.0);
  EXPECT_EQ(dx2.at(1, 1, 0), 0.0);
}

TEST(MaxPool, OddDimensionsRejected) { EXPECT_THROW(maxpool2(Tensor<double>({5, 4, 1})), StructuralError); }

TEST(MaxPool, FiniteDifferences) {
  Rng rng(3);
  for (int i = 0; i < 5; ++i) EXPECT_LT(gradcheck::maxpool2(rng).max_rel, 1e-4);
}

TEST(TransposeConv, SinglePixelScattersBlock) {
  const Tensor<double> x({1, 1, 1}, 2.5);
  const auto y = transpose_conv2(x, Tensor<double>({2, 2, 1, 1}, 1.0), Tensor<double>({1}));
  EXPECT_EQ(y.shape(), (Tensor<double>::Shape{2, 2, 1}));
  for (double v : y.values()) EXPECT_EQ(v, 2.5);
}

TEST(TransposeConv, DoublesSpatialDims) {
  const auto y = transpose_conv2(Tensor<double>({3, 5, 4}), Tensor<double>({2, 2, 4, 6}), Tensor<double>({6}));
  EXPECT_EQ(y.shape(), (Tensor<double>::Shape{6, 10, 6}));
  EXPECT_THROW(transpose_conv2(Tensor<double>({3, 5, 4}), Tensor<double>({2, 2, 3, 6}), Tensor<double>({6})),
               StructuralError);
}

TEST(TransposeConv, FiniteDifferences) {
  Rng rng(4);
  for (int i = 0; i < 5; ++i) EXPECT_LT(gradcheck::transpose_conv2(rng).max_rel, 1e-4);
}

TEST(SoftmaxCE, ZeroLogitsUniform) {
  const Tensor<double> z({4, 4, 3});
  const std::vector<std::uint8_t> t(16, 1);
  const auto r = softmax_ce(z, std::span<const std::uint8_t>(t));
  EXPECT_NEAR(r.loss, std::log(3.0), 1e-15);
  EXPECT_NEAR(r.loss, 1.0986, 1e-4);
  for (double p : r.probs.values()) EXPECT_NEAR(p, 1.0 / 3.0, 1e-15);
}

TEST(SoftmaxCE, ProbabilitiesSumToOneUnderLargeLogits) {
  Rng rng(5);
  const auto z = gradcheck::random_tensor({8, 8, 3}, rng, -500, 500);
  const std::vector<std::uint8_t> t(64, 0);
  const auto r = softmax_ce(z, std::span<const std::uint8_t>(t));
  EXPECT_TRUE(std::isfinite(r.loss));
  for (std::size_t i = 0; i < 64; ++i) EXPECT_NEAR(r.probs[3 * i] + r.probs[3 * i + 1] + r.probs[3 * i + 2], 1.0, 1e-12);
}

TEST(SoftmaxCE, FiniteDifferences) {
  Rng rng(6);
  for (int i = 0; i < 5; ++i) {
    double abs_err = 0;
    EXPECT_LT(gradcheck::softmax_ce(rng, &abs_err).max_rel, 1e-4);
    EXPECT_LT(abs_err, 1e-5);
  }
}

TEST(SoftmaxCE, TargetSizeChecked) {
  const std::vector<std::uint8_t> t(15, 0);
  EXPECT_THROW(softmax_ce(Tensor<double>({4, 4, 3}), std::span<const std::uint8_t>(t)), StructuralError);
}

TEST(UNet, ParameterCountOracle) {
  // depth 3, base 16, K input channels, 3 classes, written out layer by layer.
  auto count = [](std::size_t K) {
    auto conv = [](std::size_t k, std::size_t i, std::size_t o) { return k * k * i * o + o; };
    return conv(3, K, 16) + conv(3, 16, 16) + conv(3, 16, 32) + conv(3, 32, 32) + conv(3, 32, 64) + conv(3, 64, 64) +
           conv(3, 64, 128) + conv(3, 128, 128) + conv(2, 128, 64) + conv(3, 128, 64) + conv(3, 64, 64) +
           conv(2, 64, 32) + conv(3, 64, 32) + conv(3, 32, 32) + conv(2, 32, 16) + conv(3, 32, 16) +
           conv(3, 16, 16) + conv(1, 16, 3);
  };
  EXPECT_EQ(parameter_count({}), count(1));
  EXPECT_EQ(parameter_count({}), 481779u);
  for (std::size_t K : {4, 8}) {
    UNetConfig c;
    c.in_channels = K;
    EXPECT_EQ(parameter_count(c), count(K));
    const auto a = layer_specs({}), b = layer_specs(c);
    for (std::size_t i = 1; i < a.size(); ++i) EXPECT_EQ(a[i].kernel, b[i].kernel);
    EXPECT_EQ(parameter_count(c) - parameter_count({}), 9 * 16 * (K - 1));
    EXPECT_EQ(init_params<float>(c, 1).count(), parameter_count(c));
  }
}

TEST(UNet, OutputShapeAndSimplex) {
  for (std::size_t K : {1, 3, 8}) {
    UNetConfig c;
    c.in_channels = K;
    c.base_channels = 4;
    const auto p = init_params<float>(c, 7);
    Rng rng(K);
    const auto x = gradcheck::random_tensor({64, 64, K}, rng, 0, 1).cast<float>();
    const auto y = unet_forward(p, x);
    EXPECT_EQ(y.shape(), (Tensor<float>::Shape{64, 64, 3}));
    for (std::size_t i = 0; i < 64 * 64; ++i) {
      const double s = static_cast<double>(y[3 * i]) + y[3 * i + 1] + y[3 * i + 2];
      EXPECT_NEAR(s, 1.0, 1e-6);
      for (std::size_t c2 = 0; c2 < 3; ++c2) EXPECT_GE(y[3 * i + c2], 0.0f);
    }
  }
  const auto pd = init_params<double>({2, 3, 1, 3}, 1);
  Rng rng(1);
  const auto yd = unet_forward(pd, gradcheck::random_tensor({16, 16, 1}, rng));
  for (std::size_t i = 0; i < 256; ++i) EXPECT_NEAR(yd[3 * i] + yd[3 * i + 1] + yd[3 * i + 2], 1.0, 1e-9);
}

TEST(UNet, ZeroHeadGivesUniformProbabilities) {
  const auto p = init_params<float>({}, 3, true);
  const auto y = unet_forward(p, Tensor<float>({64, 64, 1}, 0.5f));
  for (float v : y.values()) EXPECT_FLOAT_EQ(v, 1.0f / 3.0f);
}

TEST(UNet, StructuralErrorsNameTheProblem) {
  auto p = init_params<float>({2, 4, 1, 3}, 1);
  EXPECT_THROW(unet_forward(p, Tensor<float>({16, 16, 2})), StructuralError);
  EXPECT_THROW(unet_forward(p, Tensor<float>({18, 16, 1})), StructuralError);
  p.tensors[6] = Tensor<float>({3, 3, 8, 9});
  try {
    unet_forward(p, Tensor<float>({16, 16, 1}));
    FAIL();
  } catch (const StructuralError& e) {
    EXPECT_NE(std::string(e.what()).find("enc1.conv_b"), std::string::npos) << e.what();
  }
}

TEST(UNet, FiniteDifferences) {
  Rng rng(7);
  for (int i = 0; i < 4; ++i) {
    const auto r = gradcheck::unet(rng, {2, 3, 2, 3});
    EXPECT_LT(r.max_rel, 1e-4);
    EXPECT_GT(r.checked, 10 * r.skipped);
  }
}

TEST(UNet, InitIsSeededHe) {
  const auto a = init_params<float>({}, 5), b = init_params<float>({}, 5), c = init_params<float>({}, 6);
  EXPECT_EQ(a.tensors, b.tensors);
  EXPECT_NE(a.tensors, c.tensors);
  // enc1.conv_b: fan-in 9 * 32, std sqrt(2 / 288).
  double ss = 0;
  for (float v : a.tensors[6].values()) ss += static_cast<double>(v) * v;
  EXPECT_NEAR(std::sqrt(ss / static_cast<double>(a.tensors[6].size())), std::sqrt(2.0 / 288.0), 0.01);
  for (std::size_t i = 1; i < a.tensors.size(); i += 2)
    for (float v : a.tensors[i].values()) EXPECT_EQ(v, 0.0f);
}

TEST(UNet, ConcurrentInferenceMatchesSerial) {
  const auto p = init_params<float>({2, 4, 1, 3}, 2);
  Rng rng(2);
  std::vector<Tensor<float>> xs;
  for (int i = 0; i < 4; ++i) xs.push_back(gradcheck::random_tensor({32, 32, 1}, rng, 0, 1).cast<float>());
  std::vector<Tensor<float>> serial, parallel(4);
  for (const auto& x : xs) serial.push_back(unet_forward(p, x));
  {
    std::vector<std::jthread> pool;
    for (std::size_t i = 0; i < 4; ++i) pool.emplace_back([&, i] { parallel[i] = unet_forward(p, xs[i]); });
  }
  EXPECT_EQ(serial, parallel);
}

TEST(Predict, ArgmaxAndThreshold) {
  Tensor<float> probs({1, 3, 3});
  const float v[] = {0.2f, 0.5f, 0.3f, 0.6f, 0.3f, 0.1f, 0.1f, 0.2f, 0.7f};
  std::copy(std::begin(v), std::end(v), probs.data());
  EXPECT_EQ(predict_classes(probs), (std::vector<std::uint8_t>{1, 0, 2}));
  EXPECT_EQ(predict_classes(probs, 0.6), (std::vector<std::uint8_t>{0, 0, 2}));
}

TEST(Adam, FirstStepMovesByLearningRate) {
  std::vector<Tensor<double>> p = {Tensor<double>({1}, 1.0)};
  auto s = AdamState<double>::zeros_for(p);
  AdamConfig cfg;
  for (double g : {0.5, -2e-3, 30.0}) {
    p[0][0] = 1.0;
    s = AdamState<double>::zeros_for(p);
    adam_step(p, {Tensor<double>({1}, g)}, s, cfg);
    EXPECT_EQ(s.t, 1);
    // m_hat = g, v_hat = g^2, so the step is lr * |g| / (|g| + eps).
    EXPECT_NEAR(std::abs(p[0][0] - 1.0), cfg.learning_rate * std::abs(g) / (std::abs(g) + cfg.epsilon), 1e-15);
    EXPECT_NEAR(std::abs(p[0][0] - 1.0), cfg.learning_rate, 1e-8);
    EXPECT_EQ(p[0][0] < 1.0, g > 0);
  }
}

TEST(Adam, ZeroGradientNoChange) {
  std::vector<Tensor<double>> p = {Tensor<double>({3}, 0.7)};
  auto s = AdamState<double>::zeros_for(p);
  adam_step(p, {Tensor<double>({3})}, s, AdamConfig{});
  for (double v : p[0].values()) EXPECT_EQ(v, 0.7);
}

TEST(Adam, MatchesReferenceRecurrence) {
  std::vector<Tensor<double>> p = {Tensor<double>({1}, 0.0)};
  auto s = AdamState<double>::zeros_for(p);
  double th = 0, m = 0, v = 0;
  const AdamConfig c;
  for (int t = 1; t <= 20; ++t) {
    const double g = std::sin(t) + 0.3;
    adam_step(p, {Tensor<double>({1}, g)}, s, c);
    m = c.beta1 * m + (1 - c.beta1) * g;
    v = c.beta2 * v + (1 - c.beta2) * g * g;
    th -= c.learning_rate * (m / (1 - std::pow(c.beta1, t))) / (std::sqrt(v / (1 - std::pow(c.beta2, t))) + c.epsilon);
    EXPECT_NEAR(p[0][0], th, 1e-15);
  }
}

TEST(Adam, NonFiniteGradientAbortsUntouched) {
  std::vector<Tensor<double>> p = {Tensor<double>({2}, 1.0), Tensor<double>({2}, 2.0)};
  auto s = AdamState<double>::zeros_for(p);
  std::vector<Tensor<double>> g = {Tensor<double>({2}, 0.1), Tensor<double>({2}, 0.1)};
  g[1][1] = std::nan("");
  const std::vector<std::string> names = {"a.kernel", "a.bias"};
  try {
    adam_step(p, g, s, AdamConfig{}, &names);
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("a.bias"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("element 1"), std::string::npos);
  }
  EXPECT_EQ(s.t, 0);
  EXPECT_EQ(p[0][0], 1.0);
  EXPECT_EQ(p[1][1], 2.0);
}

TEST(EarlyStopping, PlateauTrace) {
  EarlyStopper s(3);
  const double val[] = {1.0, 0.8, 0.8, 0.85, 0.81, 0.7};
  std::size_t stopped = 0;
  for (std::size_t e = 1; e <= 6 && !stopped; ++e) {
    s.observe(e, val[e - 1]);
    if (s.should_stop()) stopped = e;
  }
  EXPECT_EQ(stopped, 5u);
  EXPECT_EQ(s.best_epoch(), 2u);
  EXPECT_EQ(s.best_loss(), 0.8);
}

TEST(Train, ConfigAndInputValidation) {
  const auto p = init_params<float>({1, 2, 1, 3}, 1);
  const auto data = crops(raster_samples(2, 1), 24, 0);
  TrainConfig c;
  EXPECT_THROW(train(p, {}, data, c), DataError);
  EXPECT_THROW(train(p, data, {}, c), DataError);
  c.batch_size = 0;
  EXPECT_THROW(train(p, data, data, c), ConfigError);
  c = {};
  c.patience = 0;
  EXPECT_THROW(train(p, data, data, c), ConfigError);
}

TEST(Train, ReturnsBestEpochParameters) {
  const auto full = raster_samples(12, 3);
  const auto tr = crops({full.begin(), full.begin() + 8}, 24, 8);
  const auto va = crops({full.begin() + 8, full.end()}, 24, 8);
  TrainConfig c;
  c.batch_size = 4;
  c.max_epochs = 12;
  c.patience = 2;
  c.adam.learning_rate = 3e-2;
  const auto r = train(init_params<float>({2, 4, 1, 3}, 9), tr, va, c);
  ASSERT_FALSE(r.history.empty());
  std::size_t best = 1;
  for (const auto& e : r.history)
    if (e.val_loss < r.history[best - 1].val_loss) best = e.epoch;
  EXPECT_EQ(r.best_epoch, best);
  EXPECT_EQ(evaluate_set(r.params, va).loss, r.history[best - 1].val_loss);
  if (r.stopped_early) {
    EXPECT_EQ(r.history.size(), best + c.patience);
  }
}

TEST(Train, FlushDenormalsIsScoped) {
  volatile float tiny = std::numeric_limits<float>::min();
  volatile float half = 0.5f;
  EXPECT_GT(tiny * half, 0.0f);
  {
    const FlushDenormals ftz;
    EXPECT_EQ(tiny * half, 0.0f);
  }
  EXPECT_GT(tiny * half, 0.0f);
}

TEST(Train, DeterministicAndThreadInvariant) {
  const auto full = raster_samples(10, 4);
  const auto tr = crops({full.begin(), full.begin() + 7}, 24, 16);
  const auto va = crops({full.begin() + 7, full.end()}, 24, 16);
  TrainConfig c;
  c.batch_size = 3;
  c.max_epochs = 3;
  c.seed = 11;
  const auto p0 = init_params<float>({2, 4, 1, 3}, 2);
  const auto a = train(p0, tr, va, c);
  const auto b = train(p0, tr, va, c);
  c.threads = 3;
  const auto t = train(p0, tr, va, c);
  EXPECT_EQ(a.params.tensors, b.params.tensors);
  EXPECT_EQ(a.params.tensors, t.params.tensors);
  EXPECT_EQ(history_csv(a.history), history_csv(t.history));
  c.threads = 1;
  c.seed = 12;
  EXPECT_NE(train(p0, tr, va, c).params.tensors, a.params.tensors);
}

TEST(Train, CancelViaCallback) {
  const auto data = crops(raster_samples(3, 5), 24, 0);
  TrainConfig c;
  c.max_epochs = 10;
  std::size_t seen = 0;
  const auto r = train(init_params<float>({1, 2, 1, 3}, 1), data, data, c, [&](const EpochRecord&) { return ++seen < 2; });
  EXPECT_TRUE(r.cancelled);
  EXPECT_EQ(r.history.size(), 2u);
}

TEST(Train, NonFiniteLossAbortsWithLastGood) {
  auto data = crops(raster_samples(3, 6), 24, 0);
  data[1].input[5] = std::numeric_limits<float>::quiet_NaN();
  const auto p0 = init_params<float>({1, 2, 1, 3}, 1);
  TrainConfig c;
  c.batch_size = 1;
  const auto r = train(p0, data, {data[0]}, c);
  ASSERT_TRUE(r.aborted);
  EXPECT_NE(r.aborted->find("non-finite"), std::string::npos);
  for (const auto& t : r.params.tensors) EXPECT_TRUE(t.all_finite());
}

TEST(Train, HistoryCsv) {
  EXPECT_EQ(history_csv({{1, 0.5, 0.25}, {2, 0.125, 0.0625}}), "epoch,train_loss,val_loss\n1,0.5,0.25\n2,0.125,0.0625\n");
}

// Eight images, one batch, 200 epochs without early stopping.
TEST(Train, OverfitsEightImages) {
  const auto data = raster_samples(8, 2024);
  TrainConfig c;
  c.max_epochs = 200;
  c.early_stopping = false;
  const auto r = train(init_params<float>({}, 1), data, data, c);
  ASSERT_EQ(r.history.size(), 200u);
  for (std::size_t e = 1; e < 10; ++e) EXPECT_LT(r.history[e].train_loss, r.history[e - 1].train_loss) << e;
  EXPECT_GE(evaluate_set(r.params, data).pixel_accuracy, 0.99);
}

TEST(Checkpoint, RoundTripWithAdamState) {
  const auto path = scratch("rt.ckpt");
  auto p = init_params<float>({2, 4, 3, 3}, 4);
  auto s = AdamState<float>::zeros_for(p.tensors);
  s.t = 17;
  for (auto& m : s.m) m.fill(0.25f);
  for (auto& v : s.v) v.fill(0.5f);
  save_checkpoint(path, p, &s);
  const auto ck = load_checkpoint(path);
  EXPECT_EQ(ck.params.config, p.config);
  EXPECT_EQ(ck.params.tensors, p.tensors);
  EXPECT_EQ(ck.adam.t, 17);
  EXPECT_EQ(ck.adam.m, s.m);
  EXPECT_EQ(ck.adam.v, s.v);
  const auto bytes = io::read_text(path);
  EXPECT_EQ(bytes.substr(0, 8), "DSPKNET1");
  EXPECT_EQ(bytes.size(), 8 + 16 + 8 + 4 + 3 * 4 * p.count());
  fs::remove(path);
}

TEST(Checkpoint, CorruptionDetected) {
  const auto path = scratch("bad.ckpt");
  EXPECT_THROW(load_checkpoint(scratch("missing.ckpt")), DataError);
  save_checkpoint(path, init_params<float>({1, 2, 1, 3}, 1));
  const auto good = io::read_text(path);
  auto write = [&](const std::string& b) { io::write_text(path, b); };
  write("XSPKNET1" + good.substr(8));
  EXPECT_THROW(load_checkpoint(path), DataError);
  write(good.substr(0, good.size() - 3));
  EXPECT_THROW(load_checkpoint(path), DataError);
  write(good + "x");
  EXPECT_THROW(load_checkpoint(path), DataError);
  auto nan = good;
  const float q = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(nan.data() + 36, &q, 4);
  write(nan);
  EXPECT_THROW(load_checkpoint(path), DataError);
  write(good);
  EXPECT_NO_THROW(load_checkpoint(path));
  fs::remove(path);
}
