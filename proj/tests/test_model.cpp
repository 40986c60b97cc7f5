#include <gtest/gtest.h>

#include "fer/model.hpp"
#include "fer/optim.hpp"
#include "test_util.hpp"

namespace {

using fer::LayerSpec;
using fer::Mode;
using fer::Model;
using fer::Model64;
using fer::Rng;
using fer::Shape;
using fer::Tensor;
using fer::Tensor64;

// 2 conv channels and 8 dense units on a small input.
std::vector<LayerSpec> tiny_specs() {
  return {LayerSpec::conv2d(1, 2), LayerSpec::batchnorm(2),  LayerSpec::relu(),     LayerSpec::maxpool2d(),
          LayerSpec::dropout(0.25), LayerSpec::flatten(),    LayerSpec::dense(32, 8), LayerSpec::batchnorm(8),
          LayerSpec::relu(),       LayerSpec::dropout(0.5),  LayerSpec::dense(8, 7), LayerSpec::softmax()};
}

void expect_rows_sum_to_one(const Tensor& probs) {
  for (std::size_t r = 0; r < probs.dim(0); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < probs.dim(1); ++c) s += probs[r * probs.dim(1) + c];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Model, ReferenceArchitectureShape) {
  Rng rng(1);
  const auto model = Model::build(fer::preset_layers("fer-ref-v1"), rng);
  Rng in(2);
  const auto x = fer::tensor_cast<float>(fer::testing::random_tensor(in, {1, 1, 48, 48}, 0, 1));
  const auto p = model.infer(x);
  EXPECT_EQ(p.shape(), (Shape{1, 7}));
  expect_rows_sum_to_one(p);
}

TEST(Model, TinyPresetRowsSumAndInferIsDeterministic) {
  Rng rng(3);
  const auto model = Model::build(fer::preset_layers("fer-tiny"), rng);
  Rng in(4);
  const auto x = fer::tensor_cast<float>(fer::testing::random_tensor(in, {5, 1, 48, 48}, 0, 1));
  const auto a = model.infer(x);
  const auto b = model.infer(x);
  EXPECT_EQ(a, b);
  expect_rows_sum_to_one(a);
}

TEST(Model, CompositionErrorsNameTheLayer) {
  Rng rng(0);
  auto specs = fer::preset_layers("fer-tiny");
  specs[0] = LayerSpec::conv2d(3, 8);
  try {
    Model::build(specs, rng);
    FAIL() << "expected ModelError";
  } catch (const fer::ModelError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 0"), std::string::npos) << e.what();
  }
  auto no_softmax = fer::preset_layers("fer-tiny");
  no_softmax.pop_back();
  EXPECT_THROW(Model::build(no_softmax, rng), fer::ModelError);
  auto mid_softmax = fer::preset_layers("fer-tiny");
  mid_softmax.insert(mid_softmax.begin() + 2, LayerSpec::softmax());
  EXPECT_THROW(Model::build(mid_softmax, rng), fer::ModelError);
  EXPECT_THROW(fer::preset_layers("resnet"), fer::ModelError);

  const auto model = Model::build(fer::preset_layers("fer-tiny"), rng);
  EXPECT_THROW(model.infer(Tensor({1, 1, 47, 48})), fer::ModelError);
}

TEST(Model, TrainForwardKeepsCachesInferDoesNot) {
  Rng rng(5);
  auto model = Model::build(fer::preset_layers("fer-tiny"), rng);
  const Tensor x({2, 1, 48, 48}, 0.5f);
  Rng drop(1);
  EXPECT_TRUE(model.forward(x, Mode::infer, drop).caches.empty());
  const auto pass = model.forward(x, Mode::train, drop);
  EXPECT_EQ(pass.caches.size(), model.num_layers() - 1);
  EXPECT_EQ(pass.probs.shape(), (Shape{2, 7}));
}

TEST(Model, BackwardShapesAndLinearity) {
  Rng rng(6);
  auto model = Model::build(fer::preset_layers("fer-tiny"), rng);
  Rng in(7);
  const auto x = fer::tensor_cast<float>(fer::testing::random_tensor(in, {3, 1, 48, 48}, 0, 1));
  Rng drop(8);
  const auto pass = model.forward(x, Mode::train, drop);
  const auto grads = model.backward(pass.caches, Tensor({3, 7}));
  const auto params = model.parameters();
  ASSERT_EQ(grads.size(), params.size());
  for (std::size_t i = 0; i < grads.size(); ++i) {
    EXPECT_EQ(grads[i].shape(), params[i]->shape());
    for (float g : grads[i].data()) EXPECT_EQ(g, 0.0f);
  }
  EXPECT_THROW(model.backward({}, Tensor({3, 7})), fer::ModelError);
}

TEST(Model, CopiesAreDeep) {
  Rng rng(9);
  auto model = Model::build(fer::preset_layers("fer-tiny"), rng);
  const auto copy = model;
  for (auto* p : model.mutable_parameters()) p->fill(0.0f);
  EXPECT_NE(*copy.parameters()[0], *model.parameters()[0]);
}

TEST(Model, TinyEndToEndGradientsMatchFiniteDifferences) {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    auto model = Model64::build(tiny_specs(), rng, {1, 8, 8});
    const auto x = fer::testing::random_tensor(rng, {4, 1, 8, 8});
    std::vector<int> labels(4);
    for (auto& l : labels) l = static_cast<int>(rng.uniform_index(7));
    const auto weights = fer::compute_class_weights({1, 2, 3, 4, 5, 6, 7});
    const auto r = fer::testing::check_model_gradients(model, x, labels, weights, seed, 24);
    EXPECT_LE(r.max_error(), 1e-6) << "seed " << seed;
    EXPECT_LE(r.max_zero_abs_error, 1e-8) << "seed " << seed;
    worst = std::max(worst, r.max_error());
  }
  RecordProperty("max_rel_err", std::to_string(worst));
}

TEST(Model, CastPreservesOutputs) {
  Rng rng(10);
  const auto model = Model::build(fer::preset_layers("fer-tiny"), rng);
  const auto wide = model.cast<double>();
  const auto back = wide.cast<float>();
  Rng in(11);
  const auto x = fer::tensor_cast<float>(fer::testing::random_tensor(in, {2, 1, 48, 48}, 0, 1));
  EXPECT_EQ(back.infer(x), model.infer(x));
  const auto p64 = wide.infer(fer::tensor_cast<double>(x));
  const auto p32 = model.infer(x);
  for (std::size_t i = 0; i < p32.size(); ++i) EXPECT_NEAR(p64[i], p32[i], 1e-4);
}

}  // namespace
