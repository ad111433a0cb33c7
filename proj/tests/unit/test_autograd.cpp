#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "steadv/autograd.hpp"
#include "test_util.hpp"

using namespace steadv;

TEST_CASE("stop_gradient forward is a bit-exact identity") {
  Rng rng(1);
  Tape<float> tape;
  Array<float> v = testutil::random_array<float>({2, 5}, rng, -10, 10);
  Tensor<float> t = tape.leaf(v, true);
  Tensor<float> s = stop_gradient(t);
  REQUIRE(s.value().bit_equal(v));
}

TEST_CASE("stop_gradient blocks the gradient") {
  Tape<float> tape;
  Tensor<float> t = tape.leaf(Array<float>({2}, {3.0f, 5.0f}), true);
  Tensor<float> loss = sum(stop_gradient(t));
  tape.backward(loss);
  REQUIRE(t.grad()[0] == 0.0f);
  REQUIRE(t.grad()[1] == 0.0f);
}

TEST_CASE("straight-through composition: exact forward, identity backward") {
  // h(t) = t + sg[round1(t) - t] with round1 = round to one decimal
  Tape<float> tape;
  Tensor<float> t = tape.leaf(Array<float>({1}, {0.26f}), true);
  Array<float> rounded({1}, {std::round(0.26f * 10.0f) / 10.0f});
  Tensor<float> h = straight_through(t, rounded);
  REQUIRE(h.value()[0] == 0.3f);
  tape.backward(sum(h));
  REQUIRE(t.grad()[0] == 1.0f);
}

TEST_CASE("literal t + sg[q - t] composition also backpropagates identity") {
  Tape<float> tape;
  Tensor<float> t = tape.leaf(Array<float>({1}, {0.26f}), true);
  Tensor<float> q = tape.leaf(Array<float>({1}, {0.3f}));
  Tensor<float> h = add(t, stop_gradient(sub(q, t)));
  REQUIRE(h.value()[0] == Catch::Approx(0.3).margin(1e-6));
  tape.backward(sum(h));
  REQUIRE(t.grad()[0] == 1.0f);
}

TEST_CASE("straight-through with arbitrary lookup tables") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Tape<float> tape;
    Array<float> v = testutil::random_array<float>({3, 4}, rng, 0, 1);
    Array<float> lut = testutil::random_array<float>({3, 4}, rng, 0, 1);
    Tensor<float> t = tape.leaf(v, true);
    Tensor<float> g = straight_through(t, lut);
    REQUIRE(g.value().bit_equal(lut));
    tape.backward(sum(g));
    for (std::int64_t i = 0; i < v.size(); ++i) REQUIRE(t.grad()[i] == 1.0f);
  }
}

TEST_CASE("sum of t*t gradient") {
  Tape<float> tape;
  Tensor<float> t = tape.leaf(Array<float>({3}, {1, 2, 3}), true);
  tape.backward(sum(mul(t, t)));
  REQUIRE(t.grad()[0] == 2.0f);
  REQUIRE(t.grad()[1] == 4.0f);
  REQUIRE(t.grad()[2] == 6.0f);
}

TEST_CASE("backward rejects non-scalar loss and double invocation") {
  Tape<float> tape;
  Tensor<float> t = tape.leaf(Array<float>({2}, {1, 2}), true);
  Tensor<float> doubled = mul_scalar(t, 2.0f);
  REQUIRE_THROWS_AS(tape.backward(doubled), AutogradError);
  Tensor<float> loss = sum(doubled);
  tape.backward(loss);
  REQUIRE_THROWS_AS(tape.backward(loss), AutogradError);
}

TEST_CASE("tape replay determinism") {
  Rng rng(3);
  Array<float> v = testutil::random_array<float>({4, 4}, rng);
  Array<float> w = testutil::random_array<float>({4, 4}, rng);
  auto run = [&](Array<float>* grad_out) {
    Tape<float> tape;
    Tensor<float> a = tape.leaf(v, true);
    Tensor<float> b = tape.leaf(w);
    Tensor<float> loss = mean(relu(mul(add(a, b), a)));
    tape.backward(loss);
    *grad_out = a.grad();
    return loss.value()[0];
  };
  Array<float> g1, g2;
  float l1 = run(&g1);
  float l2 = run(&g2);
  REQUIRE(l1 == l2);
  REQUIRE(g1.bit_equal(g2));
}

TEST_CASE("conv2d with a 1x1 identity kernel is the identity") {
  Rng rng(5);
  Tape<float> tape;
  Array<float> img = testutil::random_array<float>({1, 3, 6, 6}, rng, 0, 1);
  Array<float> kernel({3, 3, 1, 1});
  for (int f = 0; f < 3; ++f) kernel.at(f, f, 0, 0) = 1.0f;
  Tensor<float> out = conv2d(tape.leaf(img), tape.leaf(kernel), 1, 0);
  REQUIRE(out.value().bit_equal(img));
}

TEST_CASE("uniform logits cross-entropy is ln K") {
  Tape<float> tape;
  Tensor<float> logits = tape.leaf(Array<float>({1, 4}, {0.7f, 0.7f, 0.7f, 0.7f}), true);
  for (int label = 0; label < 4; ++label) {
    Tape<float> tp;
    Tensor<float> lg = tp.leaf(Array<float>({1, 4}, {0.7f, 0.7f, 0.7f, 0.7f}));
    Tensor<float> loss = softmax_cross_entropy(lg, {label});
    REQUIRE(loss.value()[0] == Catch::Approx(std::log(4.0)).epsilon(1e-6));
  }
  (void)logits;
}

TEST_CASE("shape mismatches produce structured errors") {
  Tape<float> tape;
  Tensor<float> a = tape.leaf(Array<float>({2, 3}));
  Tensor<float> b = tape.leaf(Array<float>({3}));
  REQUIRE_THROWS_WITH(add(a, b), Catch::Matchers::ContainsSubstring("add") &&
                                     Catch::Matchers::ContainsSubstring("[2,3]") &&
                                     Catch::Matchers::ContainsSubstring("[3]"));
  Tensor<float> m = tape.leaf(Array<float>({2, 3}));
  REQUIRE_THROWS_AS(matmul(m, m), ShapeError);
  Tensor<float> x = tape.leaf(Array<float>({1, 2, 4, 4}));
  Tensor<float> w = tape.leaf(Array<float>({1, 3, 3, 3}));
  REQUIRE_THROWS_AS(conv2d(x, w, 1, 1), ShapeError);
  Tensor<float> logits = tape.leaf(Array<float>({1, 4}));
  REQUIRE_THROWS_AS(softmax_cross_entropy(logits, {7}), ShapeError);
}

TEST_CASE("clamp subgradient: boundary counts as inside") {
  Tape<float> tape;
  Tensor<float> t = tape.leaf(Array<float>({4}, {-0.5f, 0.0f, 0.5f, 1.5f}), true);
  tape.backward(sum(clamp(t, 0.0f, 1.0f)));
  REQUIRE(t.grad()[0] == 0.0f);
  REQUIRE(t.grad()[1] == 1.0f);  // at the lower boundary
  REQUIRE(t.grad()[2] == 1.0f);
  REQUIRE(t.grad()[3] == 0.0f);
}

TEST_CASE("max_pool2 ties route gradient to the first element in scan order") {
  Tape<float> tape;
  Tensor<float> t = tape.leaf(Array<float>({1, 1, 2, 2}, {1, 1, 1, 1}), true);
  tape.backward(sum(max_pool2(t)));
  REQUIRE(t.grad()[0] == 1.0f);
  REQUIRE(t.grad()[1] == 0.0f);
  REQUIRE(t.grad()[2] == 0.0f);
  REQUIRE(t.grad()[3] == 0.0f);
}

TEST_CASE("three-layer MLP gradient matches finite differences") {
  Rng rng(11);
  Array<double> x0 = testutil::random_array<double>({1, 6}, rng);
  Array<double> w1 = testutil::random_array<double>({6, 8}, rng, -0.7, 0.7);
  Array<double> b1 = testutil::random_array<double>({8}, rng, -0.2, 0.2);
  Array<double> w2 = testutil::random_array<double>({8, 8}, rng, -0.7, 0.7);
  Array<double> b2 = testutil::random_array<double>({8}, rng, -0.2, 0.2);
  Array<double> w3 = testutil::random_array<double>({8, 3}, rng, -0.7, 0.7);

  auto loss_at = [&](const Array<double>& x) {
    Tape<double> tape;
    Tensor<double> h1 = relu(bias_add(matmul(tape.leaf(x), tape.leaf(w1)), tape.leaf(b1)));
    Tensor<double> h2 = relu(bias_add(matmul(h1, tape.leaf(w2)), tape.leaf(b2)));
    Tensor<double> logits = matmul(h2, tape.leaf(w3));
    return softmax_cross_entropy(logits, {1}).value()[0];
  };

  Tape<double> tape;
  Tensor<double> x = tape.leaf(x0, true);
  Tensor<double> h1 = relu(bias_add(matmul(x, tape.leaf(w1)), tape.leaf(b1)));
  Tensor<double> h2 = relu(bias_add(matmul(h1, tape.leaf(w2)), tape.leaf(b2)));
  Tensor<double> loss = softmax_cross_entropy(matmul(h2, tape.leaf(w3)), {1});
  tape.backward(loss);

  Array<double> numeric = testutil::finite_diff(loss_at, x0);
  REQUIRE(testutil::max_rel_error(x.grad(), numeric) < 1e-3);
}
