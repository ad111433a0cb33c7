#include <catch2/catch_amalgamated.hpp>

#include "steadv/autograd.hpp"
#include "test_util.hpp"

using namespace steadv;

namespace {

// Six plain loops, written independently of the im2col implementation.
Array<double> conv2d_direct(const Array<double>& x, const Array<double>& w,
                            const Array<double>* bias, int stride, int pad) {
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int F = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  int oh = (H + 2 * pad - kh) / stride + 1;
  int ow = (W + 2 * pad - kw) / stride + 1;
  Array<double> out(Shape{N, F, oh, ow});
  for (int n = 0; n < N; ++n)
    for (int f = 0; f < F; ++f)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          double acc = bias ? (*bias)[f] : 0.0;
          for (int c = 0; c < C; ++c)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                int iy = oy * stride + ky - pad;
                int ix = ox * stride + kx - pad;
                if (iy >= 0 && iy < H && ix >= 0 && ix < W)
                  acc += x.at(n, c, iy, ix) * w.at(f, c, ky, kx);
              }
          out.at(n, f, oy, ox) = acc;
        }
  return out;
}

// Gradient of a scalar-valued graph w.r.t. one chosen leaf, against central
// finite differences.
void check_leaf_gradient(
    const std::function<Tensor<double>(Tape<double>&, Tensor<double>)>& graph,
    const Array<double>& x0, double h = 1e-4, double tol = 1e-3) {
  Tape<double> tape;
  Tensor<double> x = tape.leaf(x0, true);
  Tensor<double> loss = graph(tape, x);
  tape.backward(loss);
  Array<double> analytic = x.grad();

  auto eval = [&](const Array<double>& probe) {
    Tape<double> tp;
    return graph(tp, tp.leaf(probe)).value()[0];
  };
  Array<double> numeric = testutil::finite_diff(eval, x0, h);
  INFO("max rel error " << testutil::max_rel_error(analytic, numeric));
  REQUIRE(testutil::max_rel_error(analytic, numeric) < tol);
}

}  // namespace

TEST_CASE("conv2d matches the direct six-loop computation") {
  Rng rng(21);
  Array<double> x = testutil::random_array<double>({1, 3, 5, 5}, rng);
  Array<double> w = testutil::random_array<double>({2, 3, 3, 3}, rng);
  Array<double> b = testutil::random_array<double>({2}, rng);

  for (auto [stride, pad] : {std::pair{1, 0}, std::pair{1, 1}, std::pair{2, 1}}) {
    Array<double> expect = conv2d_direct(x, w, &b, stride, pad);
    Array<double> got = kernels::conv2d(x, w, &b, stride, pad);
    REQUIRE(got.same_shape(expect));
    for (std::int64_t i = 0; i < got.size(); ++i)
      REQUIRE(got[i] == Catch::Approx(expect[i]).margin(1e-6));
  }

  Array<float> xf = x.cast<float>();
  Array<float> wf = w.cast<float>();
  Array<float> bf = b.cast<float>();
  Array<float> gotf = kernels::conv2d(xf, wf, &bf, 1, 0);
  Array<double> expectf = conv2d_direct(x, w, &b, 1, 0);
  for (std::int64_t i = 0; i < gotf.size(); ++i)
    REQUIRE(static_cast<double>(gotf[i]) == Catch::Approx(expectf[i]).margin(1e-6));
}

TEST_CASE("elementwise op gradients match finite differences") {
  Rng rng(31);
  Array<double> x0 = testutil::random_array<double>({3, 4}, rng);
  Array<double> other = testutil::random_array<double>({3, 4}, rng);

  check_leaf_gradient(
      [&](Tape<double>& tp, Tensor<double> x) { return sum(add(x, tp.leaf(other))); }, x0);
  check_leaf_gradient(
      [&](Tape<double>& tp, Tensor<double> x) { return sum(sub(tp.leaf(other), x)); }, x0);
  check_leaf_gradient(
      [&](Tape<double>& tp, Tensor<double> x) { return sum(mul(x, tp.leaf(other))); }, x0);
  check_leaf_gradient(
      [&](Tape<double>&, Tensor<double> x) { return sum(mul_scalar(add_scalar(x, 0.3), -1.7)); },
      x0);
  check_leaf_gradient([&](Tape<double>&, Tensor<double> x) { return mean(mul(x, x)); }, x0);
}

TEST_CASE("relu and clamp gradients match finite differences away from kinks") {
  Rng rng(32);
  Array<double> x0(Shape{20});
  for (std::int64_t i = 0; i < x0.size(); ++i) {
    double v = rng.uniform(0.1, 0.9);
    x0[i] = (rng.uniform() < 0.5 ? -1 : 1) * v;  // keep |x| >= 0.1, away from 0
  }
  check_leaf_gradient([&](Tape<double>&, Tensor<double> x) { return sum(relu(x)); }, x0);
  check_leaf_gradient(
      [&](Tape<double>&, Tensor<double> x) { return sum(clamp(x, -0.5, 0.5)); }, x0);
}

TEST_CASE("matmul and bias_add gradients match finite differences") {
  Rng rng(33);
  Array<double> a0 = testutil::random_array<double>({3, 5}, rng);
  Array<double> b0 = testutil::random_array<double>({5, 2}, rng);
  Array<double> bias0 = testutil::random_array<double>({2}, rng);

  check_leaf_gradient(
      [&](Tape<double>& tp, Tensor<double> x) {
        return sum(bias_add(matmul(x, tp.leaf(b0)), tp.leaf(bias0)));
      },
      a0);
  check_leaf_gradient(
      [&](Tape<double>& tp, Tensor<double> x) {
        return sum(mul(matmul(tp.leaf(a0), x), matmul(tp.leaf(a0), x)));
      },
      b0);
  check_leaf_gradient(
      [&](Tape<double>& tp, Tensor<double> x) {
        return mean(bias_add(matmul(tp.leaf(a0), tp.leaf(b0)), x));
      },
      bias0);
}

TEST_CASE("conv2d gradients match finite differences") {
  Rng rng(34);
  Array<double> x0 = testutil::random_array<double>({2, 2, 6, 6}, rng);
  Array<double> w0 = testutil::random_array<double>({3, 2, 3, 3}, rng);
  Array<double> b0 = testutil::random_array<double>({3}, rng);

  check_leaf_gradient(
      [&](Tape<double>& tp, Tensor<double> x) {
        return sum(mul(conv2d(x, tp.leaf(w0), tp.leaf(b0), 1, 1),
                       conv2d(x, tp.leaf(w0), tp.leaf(b0), 1, 1)));
      },
      x0);
  check_leaf_gradient(
      [&](Tape<double>& tp, Tensor<double> x) {
        Tensor<double> y = conv2d(tp.leaf(x0), x, tp.leaf(b0), 2, 0);
        return sum(mul(y, y));
      },
      w0);
  check_leaf_gradient(
      [&](Tape<double>& tp, Tensor<double> x) {
        Tensor<double> y = conv2d(tp.leaf(x0), tp.leaf(w0), x, 1, 1);
        return mean(mul(y, y));
      },
      b0);
}

TEST_CASE("max_pool2 gradient matches finite differences on distinct values") {
  Array<double> x0(Shape{1, 2, 4, 4});
  for (std::int64_t i = 0; i < x0.size(); ++i)
    x0[i] = static_cast<double>((i * 7919) % 97) / 10.0;  // all distinct
  check_leaf_gradient(
      [&](Tape<double>&, Tensor<double> x) { return sum(mul(max_pool2(x), max_pool2(x))); }, x0,
      1e-5);
}

TEST_CASE("softmax_cross_entropy gradient matches finite differences") {
  Rng rng(35);
  Array<double> logits0 = testutil::random_array<double>({4, 5}, rng, -2, 2);
  check_leaf_gradient(
      [&](Tape<double>&, Tensor<double> x) {
        return softmax_cross_entropy(x, {0, 3, 2, 4});
      },
      logits0, 1e-4);
}

TEST_CASE("reshape and permute gradients match finite differences") {
  Rng rng(36);
  Array<double> x0 = testutil::random_array<double>({2, 3, 2, 3}, rng);  // NHWC
  check_leaf_gradient(
      [&](Tape<double>&, Tensor<double> x) {
        Tensor<double> nchw = nhwc_to_nchw(x);
        Tensor<double> flat = reshape(nchw, Shape{2, 18});
        return sum(mul(flat, flat));
      },
      x0);
}
