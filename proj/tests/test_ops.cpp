#include <cmath>
#include <numeric>

#include "bcnn/ops.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace bcnn;

namespace {

double inner(const Tensor& a, const Tensor& b) {
  double acc = 0;
  for (Index i = 0; i < a.size(); ++i) acc += double(a.values()[i]) * double(b.values()[i]);
  return acc;
}

}  // namespace

TEST_CASE("conv: 1x1 kernel scales the input") {
  Tensor in = Tensor::from_values({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor w = Tensor::from_values({1, 1, 1, 1}, {2});
  Tensor b = Tensor::zeros({1});
  Tensor out = conv_forward(in, w, b, ConvSpec::uniform(1, 2, 1));
  CHECK(out.shape() == Shape{1, 1, 2, 2});
  CHECK(out.values()[0] == 2);
  CHECK(out.values()[1] == 4);
  CHECK(out.values()[2] == 6);
  CHECK(out.values()[3] == 8);
}

TEST_CASE("conv: full window sums") {
  Tensor in = Tensor::full({1, 1, 3, 3}, 1);
  Tensor w = Tensor::full({1, 1, 3, 3}, 1);
  Tensor b = Tensor::zeros({1});
  Tensor out = conv_forward(in, w, b, ConvSpec::uniform(1, 2, 3));
  CHECK(out.shape() == Shape{1, 1, 1, 1});
  CHECK(out.values()[0] == 9);
}

TEST_CASE("conv: dilation reaches across the row") {
  Tensor in = Tensor::from_values({1, 1, 1, 5}, {1, 0, 0, 0, 1});
  Tensor w = Tensor::from_values({1, 1, 1, 2}, {1, 1});
  Tensor b = Tensor::zeros({1});
  ConvSpec spec;
  spec.out_channels = 1;
  spec.kernel = {1, 2};
  spec.stride = {1, 1};
  spec.dilation = {1, 4};
  spec.padding = {0, 0};
  Tensor out = conv_forward(in, w, b, spec);
  CHECK(out.shape() == Shape{1, 1, 1, 1});
  CHECK(out.values()[0] == 2);
}

TEST_CASE("conv: output extent formula and shape errors name the axis") {
  ConvSpec spec = ConvSpec::uniform(4, 2, 3, /*stride=*/2, /*dilation=*/2, /*padding=*/1);
  CHECK(spec.output_extents({11, 9}) == std::vector<Index>{5, 4});
  Tensor in = Tensor::zeros({1, 2, 8, 8});
  Tensor w_bad = Tensor::zeros({4, 3, 3, 3});
  CHECK_THROWS_AS(conv_forward(in, w_bad, Tensor::zeros({4}), spec), ShapeError);
  CHECK_THROWS_WITH_AS(conv_forward(in, Tensor::zeros({4, 2, 3, 3}), Tensor::zeros({3}), spec),
                       doctest::Contains("bias"), ShapeError);
}

TEST_CASE("conv gradcheck 2d and 3d") {
  RngStream rng(11);
  SUBCASE("2d stride+dilation+padding") {
    Tensor in = test::random_tensor({2, 2, 6, 5}, rng);
    Tensor w = test::random_tensor({3, 2, 2, 3}, rng);
    Tensor b = test::random_tensor({3}, rng);
    ConvSpec spec;
    spec.out_channels = 3;
    spec.kernel = {2, 3};
    spec.stride = {2, 1};
    spec.dilation = {1, 2};
    spec.padding = {1, 2};
    CHECK(test::gradcheck({in, w, b}, [&] {
            return test::probe_loss(conv_forward(in, w, b, spec));
          }) < 1e-4);
  }
  SUBCASE("3d") {
    Tensor in = test::random_tensor({1, 2, 4, 3, 4}, rng);
    Tensor w = test::random_tensor({2, 2, 3, 3, 3}, rng);
    Tensor b = test::random_tensor({2}, rng);
    ConvSpec spec = ConvSpec::uniform(2, 3, 3, 1, 1, 1);
    CHECK(test::gradcheck({in, w, b}, [&] {
            return test::probe_loss(conv_forward(in, w, b, spec));
          }) < 1e-4);
  }
}

TEST_CASE("conv_transpose: single tap broadcast") {
  Tensor in = Tensor::from_values({1, 1, 1, 1}, {1});
  Tensor w = Tensor::full({1, 1, 2, 2}, 1);
  Tensor b = Tensor::zeros({1});
  Tensor out = conv_transpose_forward(in, w, b, ConvSpec::uniform(1, 2, 2, 2));
  CHECK(out.shape() == Shape{1, 1, 2, 2});
  for (Index i = 0; i < 4; ++i) CHECK(out.values()[i] == 1);
}

TEST_CASE("conv_transpose: disjoint tiles") {
  Tensor in = Tensor::from_values({1, 1, 1, 2}, {1, 2});
  Tensor w = Tensor::full({1, 1, 2, 2}, 1);
  Tensor b = Tensor::zeros({1});
  Tensor out = conv_transpose_forward(in, w, b, ConvSpec::uniform(1, 2, 2, 2));
  CHECK(out.shape() == Shape{1, 1, 2, 4});
  std::vector<real> expect{1, 1, 2, 2, 1, 1, 2, 2};
  for (Index i = 0; i < 8; ++i) CHECK(out.values()[i] == expect[i]);
}

TEST_CASE("conv_transpose rejects kernel != stride") {
  Tensor in = Tensor::zeros({1, 1, 2, 2});
  Tensor w = Tensor::zeros({1, 1, 2, 2});
  CHECK_THROWS_AS(conv_transpose_forward(in, w, Tensor::zeros({1}),
                                         ConvSpec::uniform(1, 2, 2, /*stride=*/1)),
                  ContractError);
}

TEST_CASE("conv_transpose is the adjoint of conv for the same weights") {
  RngStream rng(5);
  // x: [1, ca, 4, 4]; ConvT_W maps ca -> cb; Conv_W maps cb -> ca.
  const Index ca = 2, cb = 3;
  Tensor w = test::random_tensor({ca, cb, 2, 2}, rng, -1, 1, false);
  Tensor x = test::random_tensor({1, ca, 4, 4}, rng, -1, 1, false);
  Tensor y = test::random_tensor({1, cb, 8, 8}, rng, -1, 1, false);
  Tensor zb = Tensor::zeros({cb});
  Tensor za = Tensor::zeros({ca});
  ConvSpec spec = ConvSpec::uniform(cb, 2, 2, 2);
  Tensor tx = conv_transpose_forward(x, w, zb, spec);

  ConvSpec conv_spec = ConvSpec::uniform(ca, 2, 2, 2);
  Tensor w_conv = Tensor::from_values({ca, cb, 2, 2},
                                      {w.values().begin(), w.values().end()});
  Tensor cy = conv_forward(y, w_conv, za, conv_spec);
  CHECK(inner(tx, y) == doctest::Approx(inner(x, cy)).epsilon(1e-10));
}

TEST_CASE("conv_transpose gradcheck") {
  RngStream rng(13);
  Tensor in = test::random_tensor({2, 2, 3, 2}, rng);
  Tensor w = test::random_tensor({2, 3, 2, 2}, rng);
  Tensor b = test::random_tensor({3}, rng);
  ConvSpec spec = ConvSpec::uniform(3, 2, 2, 2);
  CHECK(test::gradcheck({in, w, b}, [&] {
          return test::probe_loss(conv_transpose_forward(in, w, b, spec));
        }) < 1e-4);
}

TEST_CASE("max_pool examples") {
  SUBCASE("2x2 window") {
    Tensor in = Tensor::from_values({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor out = max_pool_forward(in, {2, 2});
    CHECK(out.shape() == Shape{1, 1, 1, 1});
    CHECK(out.values()[0] == 4);
  }
  SUBCASE("ties route gradient to the first element in scan order") {
    Tensor in = Tensor::full({1, 1, 2, 2}, 3, true);
    Tensor out = max_pool_forward(in, {2, 2});
    CHECK(out.values()[0] == 3);
    backward(sum(out));
    CHECK(in.grad()[0] == 1);
    CHECK(in.grad()[1] == 0);
    CHECK(in.grad()[2] == 0);
    CHECK(in.grad()[3] == 0);
  }
  SUBCASE("4x4 ramp") {
    std::vector<real> ramp(16);
    std::iota(ramp.begin(), ramp.end(), real(0));
    Tensor in = Tensor::from_values({1, 1, 4, 4}, ramp);
    Tensor out = max_pool_forward(in, {2, 2});
    CHECK(out.shape() == Shape{1, 1, 2, 2});
    CHECK(out.values()[0] == 5);
    CHECK(out.values()[1] == 7);
    CHECK(out.values()[2] == 13);
    CHECK(out.values()[3] == 15);
  }
  SUBCASE("non-divisible extent") {
    CHECK_THROWS_AS(max_pool_forward(Tensor::zeros({1, 1, 3, 4}), {2, 2}), ShapeError);
  }
}

TEST_CASE("max_pool gradcheck (distinct values)") {
  RngStream rng(17);
  // Well-separated values so finite differences do not cross argmax ties.
  std::vector<real> vals(2 * 2 * 4 * 4);
  std::vector<size_t> perm(vals.size());
  std::iota(perm.begin(), perm.end(), size_t(0));
  for (size_t i = vals.size(); i > 1; --i)
    std::swap(perm[i - 1], perm[rng.next_index(i)]);
  for (size_t i = 0; i < vals.size(); ++i) vals[i] = real(perm[i]) * real(0.01);
  Tensor in = Tensor::from_values({2, 2, 4, 4}, vals, true);
  CHECK(test::gradcheck({in}, [&] {
          return test::probe_loss(max_pool_forward(in, {2, 2}));
        }) < 1e-4);
}

TEST_CASE("batch_norm: two-point batch normalizes to +-1/sqrt(1+eps)") {
  Tensor in = Tensor::from_values({2, 1}, {-1, 1});
  Tensor scale = Tensor::full({1}, 1);
  Tensor shift = Tensor::zeros({1});
  BatchNormState state;
  const real eps = real(1e-5);
  Tensor out = batch_norm_forward(in, scale, shift, state, BatchNormMode::Train, eps);
  const double expect = 1.0 / std::sqrt(1.0 + double(eps));
  CHECK(out.values()[0] == doctest::Approx(-expect).epsilon(1e-12));
  CHECK(out.values()[1] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("batch_norm: zero scale collapses to shift") {
  RngStream rng(3);
  Tensor in = test::random_tensor({4, 2, 3, 3}, rng, -2, 2, false);
  Tensor scale = Tensor::zeros({2});
  Tensor shift = Tensor::from_values({2}, {0.25, -0.5});
  BatchNormState state;
  Tensor out = batch_norm_forward(in, scale, shift, state, BatchNormMode::Train);
  for (Index b = 0; b < 4; ++b)
    for (Index c = 0; c < 2; ++c)
      for (Index i = 0; i < 9; ++i)
        CHECK(out.values()[(b * 2 + c) * 9 + i] == shift.values()[c]);
}

TEST_CASE("batch_norm: output batch statistics are 0/1 pre scale-shift") {
  RngStream rng(9);
  Tensor in = test::random_tensor({16, 3, 4, 4}, rng, -3, 5, false);
  Tensor scale = Tensor::full({3}, 1);
  Tensor shift = Tensor::zeros({3});
  BatchNormState state;
  Tensor out = batch_norm_forward(in, scale, shift, state, BatchNormMode::Train);
  const Index n = 16 * 16;
  for (Index c = 0; c < 3; ++c) {
    double s = 0, s2 = 0;
    for (Index b = 0; b < 16; ++b)
      for (Index i = 0; i < 16; ++i) {
        double v = out.values()[(b * 3 + c) * 16 + i];
        s += v;
        s2 += v * v;
      }
    double m = s / n;
    double var = s2 / n - m * m;
    CHECK(std::abs(m) < 1e-8);
    CHECK(std::abs(var - 1.0) < 1e-4);  // off by eps/(var+eps) only
  }
}

TEST_CASE("batch_norm: batch of one errors in train mode, works in eval") {
  Tensor in = Tensor::zeros({1, 2});
  Tensor scale = Tensor::full({2}, 1);
  Tensor shift = Tensor::zeros({2});
  BatchNormState state;
  CHECK_THROWS_AS(batch_norm_forward(in, scale, shift, state, BatchNormMode::Train),
                  NumericError);
  Tensor out = batch_norm_forward(in, scale, shift, state, BatchNormMode::Eval);
  CHECK(out.size() == 2);
}

TEST_CASE("batch_norm: eval uses running stats") {
  RngStream rng(21);
  Tensor scale = Tensor::full({2}, 1);
  Tensor shift = Tensor::zeros({2});
  BatchNormState state;
  for (int i = 0; i < 50; ++i) {
    Tensor in = test::random_tensor({8, 2}, rng, 1, 3, false);
    batch_norm_forward(in, scale, shift, state, BatchNormMode::Train);
  }
  // Mean of U(1,3) is 2; a value at the running mean maps to ~0.
  Tensor probe = Tensor::from_values({1, 2}, {state.running_mean[0], state.running_mean[1]});
  Tensor out = batch_norm_forward(probe, scale, shift, state, BatchNormMode::Eval);
  CHECK(out.values()[0] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(state.running_mean[0] == doctest::Approx(2.0).epsilon(0.2));
}

TEST_CASE("batch_norm gradcheck (train and eval)") {
  RngStream rng(23);
  Tensor in = test::random_tensor({3, 2, 2, 2}, rng);
  Tensor scale = test::random_tensor({2}, rng, 0.5, 1.5);
  Tensor shift = test::random_tensor({2}, rng);
  SUBCASE("train") {
    CHECK(test::gradcheck({in, scale, shift}, [&] {
            BatchNormState state;  // fresh state: running stats are a side channel
            return test::probe_loss(
                batch_norm_forward(in, scale, shift, state, BatchNormMode::Train));
          }) < 1e-4);
  }
  SUBCASE("eval") {
    BatchNormState state;
    state.running_mean = {0.1, -0.2};
    state.running_var = {0.9, 1.3};
    CHECK(test::gradcheck({in, scale, shift}, [&] {
            return test::probe_loss(
                batch_norm_forward(in, scale, shift, state, BatchNormMode::Eval));
          }) < 1e-4);
  }
}

TEST_CASE("activation examples") {
  Tensor z2 = Tensor::zeros({1, 2});
  CHECK(activation(ActKind::Softplus, Tensor::scalar(0)).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  Tensor sm = activation(ActKind::Softmax, z2, 1);
  CHECK(sm.values()[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(sm.values()[1] == doctest::Approx(0.5).epsilon(1e-12));
  Tensor ns = activation(ActKind::NormalizedSoftplus, z2, 1);
  CHECK(ns.values()[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(ns.values()[1] == doctest::Approx(0.5).epsilon(1e-12));
  Tensor r = activation(ActKind::Relu, Tensor::from_values({2}, {-1, 2}));
  CHECK(r.values()[0] == 0);
  CHECK(r.values()[1] == 2);
}

TEST_CASE("normalizing activations sum to 1 along the class axis") {
  RngStream rng(31);
  for (ActKind kind : {ActKind::Softmax, ActKind::NormalizedSoftplus}) {
    Tensor in = test::random_tensor({2, 5, 3}, rng, -4, 4, false);
    Tensor out = activation(kind, in, 1);
    for (Index b = 0; b < 2; ++b)
      for (Index i = 0; i < 3; ++i) {
        double s = 0;
        for (Index c = 0; c < 5; ++c) {
          double v = out.values()[(b * 5 + c) * 3 + i];
          CHECK(v >= 0);
          s += v;
        }
        CHECK(std::abs(s - 1.0) < 1e-12);
      }
  }
}

TEST_CASE("softmax is stable for large logits") {
  Tensor in = Tensor::from_values({1, 3}, {1000, 1001, 999});
  Tensor out = activation(ActKind::Softmax, in, 1);
  double s = 0;
  for (Index c = 0; c < 3; ++c) {
    CHECK(std::isfinite(out.values()[c]));
    s += out.values()[c];
  }
  CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("activation gradchecks") {
  RngStream rng(37);
  Tensor in = test::random_tensor({2, 4, 3}, rng, -2, 2);
  for (ActKind kind : {ActKind::Softplus, ActKind::Softmax, ActKind::NormalizedSoftplus}) {
    INFO(to_string(kind));
    CHECK(test::gradcheck({in}, [&] {
            return test::probe_loss(activation(kind, in, 1));
          }) < 1e-4);
  }
  // relu checked away from the kink
  Tensor rin = Tensor::from_values({4}, {-1.5, -0.5, 0.5, 1.5}, true);
  CHECK(test::gradcheck({rin}, [&] {
          return test::probe_loss(activation(ActKind::Relu, rin));
        }) < 1e-4);
}

TEST_CASE("dense examples") {
  SUBCASE("identity weights") {
    Tensor in = Tensor::from_values({2, 2}, {1, 2, 3, 4});
    Tensor w = Tensor::from_values({2, 2}, {1, 0, 0, 1});
    Tensor out = dense_forward(in, w, Tensor::zeros({2}));
    for (Index i = 0; i < 4; ++i) CHECK(out.values()[i] == in.values()[i]);
  }
  SUBCASE("zero weights give bias rows") {
    Tensor in = Tensor::from_values({3, 2}, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor::from_values({2}, {7, 8});
    Tensor out = dense_forward(in, Tensor::zeros({2, 2}), b);
    for (Index r = 0; r < 3; ++r) {
      CHECK(out.values()[r * 2 + 0] == 7);
      CHECK(out.values()[r * 2 + 1] == 8);
    }
  }
  SUBCASE("hand arithmetic") {
    Tensor in = Tensor::from_values({1, 2}, {1, 2});
    Tensor w = Tensor::from_values({2, 2}, {1, 0, 0, 1});
    Tensor b = Tensor::from_values({2}, {1, 1});
    Tensor out = dense_forward(in, w, b);
    CHECK(out.values()[0] == 2);
    CHECK(out.values()[1] == 3);
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(
        dense_forward(Tensor::zeros({1, 3}), Tensor::zeros({2, 2}), Tensor::zeros({2})),
        ShapeError);
  }
}

TEST_CASE("dense gradcheck") {
  RngStream rng(41);
  Tensor in = test::random_tensor({3, 4}, rng);
  Tensor w = test::random_tensor({4, 2}, rng);
  Tensor b = test::random_tensor({2}, rng);
  CHECK(test::gradcheck({in, w, b}, [&] {
          return test::probe_loss(dense_forward(in, w, b));
        }) < 1e-4);
}

TEST_CASE("concat_channels doubles channels and splits gradient") {
  RngStream rng(43);
  Tensor a = test::random_tensor({2, 2, 3}, rng);
  Tensor b = test::random_tensor({2, 3, 3}, rng);
  Tensor out = concat_channels(a, b);
  CHECK(out.shape() == Shape{2, 5, 3});
  CHECK(out.values()[0] == a.values()[0]);
  CHECK(out.values()[2 * 3] == b.values()[0]);
  CHECK(test::gradcheck({a, b}, [&] {
          return test::probe_loss(concat_channels(a, b));
        }) < 1e-4);
  CHECK_THROWS_AS(concat_channels(a, Tensor::zeros({2, 3, 4})), ShapeError);
}

TEST_CASE("conv forward is bit-identical across calls") {
  RngStream rng(47);
  Tensor in = test::random_tensor({2, 3, 8, 8}, rng, -1, 1, false);
  Tensor w = test::random_tensor({4, 3, 3, 3}, rng, -1, 1, false);
  Tensor b = test::random_tensor({4}, rng, -1, 1, false);
  ConvSpec spec = ConvSpec::uniform(4, 2, 3, 1, 1, 1);
  Tensor o1 = conv_forward(in, w, b, spec);
  Tensor o2 = conv_forward(in, w, b, spec);
  for (Index i = 0; i < o1.size(); ++i) CHECK(o1.values()[i] == o2.values()[i]);
}
