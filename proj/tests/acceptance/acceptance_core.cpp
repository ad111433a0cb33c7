// Structural criteria: forward exactness of the substitution, bit-exact
// gradient factorization, 64-bit finite-difference checks, and gradient-sign
// fidelity on monotone chains.

#include <cmath>
#include <functional>
#include <vector>

#include "steadv/ste.hpp"
#include "accept_util.hpp"

using namespace steadv;

namespace {

Rng g_rng(20240817);

template <typename T>
Array<T> random_array(Shape shape, double lo, double hi) {
  Array<T> out(std::move(shape));
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(g_rng.uniform(lo, hi));
  return out;
}

Scene make_scene(int index) {
  auto scenes = generate_scene_set(5000 + static_cast<std::uint64_t>(index), 1, 4);
  return scenes[0];
}

// --------------------------------------------------------------------------
// criterion 1: substituted forward == physical forward, bit for bit
// --------------------------------------------------------------------------
void criterion_forward_exactness(accept::Checker& ck) {
  accept::Stopwatch sw;
  Cnn<float> global_model(32, 32, 3, {8, 16, 32}, 4, 101);
  Cnn<float> scene_model(64, 64, 3, {8, 16, 32}, 4, 102);
  DistortionChain chain = DistortionChain::standard(11);

  int mismatches = 0;
  GlobalStePipeline global_pipe(global_model, chain, PipelineMode::ste);
  for (int i = 0; i < 100; ++i) {
    Image x = random_array<float>({32, 32, 3}, 0, 1);
    Image d0 = random_array<float>({32, 32, 3}, -0.06, 0.06);
    Tape<float> tape;
    Tensor<float> d = tape.leaf(d0, true);
    Tensor<float> logits = global_pipe.forward(tape, x, d, i);
    if (!logits.value().bit_equal(global_pipe.forward_physical(x, d0, i))) ++mismatches;
  }

  std::vector<Scene> scenes;
  for (int s = 0; s < 10; ++s) scenes.push_back(make_scene(s));
  for (int i = 0; i < 100; ++i) {
    const Scene& scene = scenes[static_cast<std::size_t>(i % 10)];
    PatchStePipeline pipe(scene_model, chain, scene, PipelineMode::ste);
    Image d0 = random_array<float>({kPatchSize, kPatchSize, 3}, -0.06, 0.06);
    Tape<float> tape;
    Tensor<float> d = tape.leaf(d0, true);
    Tensor<float> logits = pipe.forward(tape, d, i);
    if (!logits.value().bit_equal(pipe.forward_physical(d0, i))) ++mismatches;
  }

  double secs = sw.seconds();
  ck.check("1 substituted-forward exactness",
           mismatches == 0 && secs < 30.0,
           "200 images, both pipelines, bit-identical logits; mismatches=" +
               accept::str(mismatches) + ", runtime=" + accept::str(secs) + "s (limit 30)");
}

// --------------------------------------------------------------------------
// criterion 2: gradient factorization, bit for bit
// --------------------------------------------------------------------------
void criterion_gradient_factorization(accept::Checker& ck) {
  accept::Stopwatch sw;
  Cnn<float> global_model(32, 32, 3, {8, 16, 32}, 4, 103);
  Cnn<float> scene_model(64, 64, 3, {8, 16, 32}, 4, 104);
  DistortionChain chain = DistortionChain::standard(12);
  int mismatches = 0;

  GlobalStePipeline global_pipe(global_model, chain, PipelineMode::ste);
  for (int i = 0; i < 25; ++i) {
    Image x = random_array<float>({32, 32, 3}, 0.2, 0.8);
    Image d0 = random_array<float>({32, 32, 3}, -0.05, 0.05);
    Tape<float> tape;
    Tensor<float> d = tape.leaf(d0, true);
    tape.backward(softmax_cross_entropy(global_pipe.forward(tape, x, d, i), {i % 4}));

    Image z(x.shape());
    for (std::int64_t k = 0; k < z.size(); ++k) z[k] = x[k] + d0[k];
    Image distorted = chain.apply(kernels::clamp(z, 0.0f, 1.0f), i);
    Tape<float> oracle;
    Tensor<float> din = oracle.leaf(distorted, true);
    oracle.backward(softmax_cross_entropy(
        global_model.forward(oracle, reshape(din, Shape{1, 32, 32, 3})), {i % 4}));
    if (!d.grad().bit_equal(din.grad())) ++mismatches;
  }

  for (int i = 0; i < 25; ++i) {
    Scene scene = make_scene(100 + i);
    PatchStePipeline pipe(scene_model, chain, scene, PipelineMode::ste);
    Image d0 = random_array<float>({kPatchSize, kPatchSize, 3}, -0.05, 0.05);
    Tape<float> tape;
    Tensor<float> d = tape.leaf(d0, true);
    tape.backward(softmax_cross_entropy(pipe.forward(tape, d, i), {scene.label}));

    Image z(d0.shape());
    for (std::int64_t k = 0; k < z.size(); ++k) z[k] = scene.base_patch[k] + d0[k];
    Image composite = chain.apply_patch_pipeline(scene, kernels::clamp(z, 0.0f, 1.0f), i);
    Tape<float> oracle;
    Tensor<float> cin = oracle.leaf(composite, true);
    oracle.backward(softmax_cross_entropy(
        scene_model.forward(oracle, reshape(cin, Shape{1, 64, 64, 3})), {scene.label}));
    Array<float> pulled = warp_grad_to_patch(cin.grad(), d0.shape(), pipe.homography());
    if (!d.grad().bit_equal(pulled)) ++mismatches;
  }

  double secs = sw.seconds();
  ck.check("2 substituted-gradient factorization",
           mismatches == 0 && secs < 30.0,
           "50 cases match the direct-substitution / warp-backward oracles bit-exactly; "
           "mismatches=" + accept::str(mismatches) + ", runtime=" + accept::str(secs) +
               "s (limit 30)");
}

// --------------------------------------------------------------------------
// criterion 3: 64-bit finite-difference checks
// --------------------------------------------------------------------------
double fd_check(const std::function<Tensor<double>(Tape<double>&, Tensor<double>)>& graph,
                const Array<double>& x0, double h = 1e-4) {
  Tape<double> tape;
  Tensor<double> x = tape.leaf(x0, true);
  tape.backward(graph(tape, x));
  Array<double> analytic = x.grad();

  Array<double> probe = x0;
  double worst = 0.0;
  for (std::int64_t i = 0; i < x0.size(); ++i) {
    probe[i] = x0[i] + h;
    Tape<double> t1;
    double up = graph(t1, t1.leaf(probe)).value()[0];
    probe[i] = x0[i] - h;
    Tape<double> t2;
    double down = graph(t2, t2.leaf(probe)).value()[0];
    probe[i] = x0[i];
    double numeric = (up - down) / (2 * h);
    double a = analytic[i];
    if (std::fabs(a) + std::fabs(numeric) < 1e-8) continue;
    worst = std::max(worst, std::fabs(a - numeric) / std::max(std::fabs(a), std::fabs(numeric)));
  }
  return worst;
}

void criterion_gradient_checks(accept::Checker& ck) {
  double worst = 0.0;
  std::string worst_op = "none";
  auto track = [&](const char* op, double err) {
    if (err > worst) {
      worst = err;
      worst_op = op;
    }
  };

  Array<double> v = random_array<double>({3, 4}, -1, 1);
  Array<double> other = random_array<double>({3, 4}, -1, 1);
  track("add", fd_check([&](Tape<double>& tp, Tensor<double> x) {
          return sum(add(x, tp.leaf(other)));
        }, v));
  track("sub", fd_check([&](Tape<double>& tp, Tensor<double> x) {
          return sum(sub(tp.leaf(other), x));
        }, v));
  track("mul", fd_check([&](Tape<double>& tp, Tensor<double> x) {
          return sum(mul(x, tp.leaf(other)));
        }, v));
  track("scalar", fd_check([&](Tape<double>&, Tensor<double> x) {
          return mean(mul_scalar(add_scalar(x, 0.7), -2.1));
        }, v));

  Array<double> safe(Shape{24});
  for (std::int64_t i = 0; i < safe.size(); ++i)
    safe[i] = (g_rng.uniform() < 0.5 ? -1 : 1) * g_rng.uniform(0.1, 0.9);
  track("relu", fd_check([&](Tape<double>&, Tensor<double> x) { return sum(relu(x)); }, safe));
  track("clamp", fd_check([&](Tape<double>&, Tensor<double> x) {
          return sum(clamp(x, -0.5, 0.5));
        }, safe));

  Array<double> a0 = random_array<double>({3, 5}, -1, 1);
  Array<double> b0 = random_array<double>({5, 2}, -1, 1);
  Array<double> bias0 = random_array<double>({2}, -1, 1);
  track("matmul+bias", fd_check([&](Tape<double>& tp, Tensor<double> x) {
          Tensor<double> y = bias_add(matmul(x, tp.leaf(b0)), tp.leaf(bias0));
          return sum(mul(y, y));
        }, a0));

  Array<double> cx = random_array<double>({1, 2, 6, 6}, -1, 1);
  Array<double> cw = random_array<double>({3, 2, 3, 3}, -1, 1);
  Array<double> cb = random_array<double>({3}, -1, 1);
  track("conv2d(x)", fd_check([&](Tape<double>& tp, Tensor<double> x) {
          Tensor<double> y = conv2d(x, tp.leaf(cw), tp.leaf(cb), 1, 1);
          return sum(mul(y, y));
        }, cx));
  track("conv2d(w)", fd_check([&](Tape<double>& tp, Tensor<double> x) {
          Tensor<double> y = conv2d(tp.leaf(cx), x, tp.leaf(cb), 2, 0);
          return sum(mul(y, y));
        }, cw));

  Array<double> px(Shape{1, 2, 4, 4});
  for (std::int64_t i = 0; i < px.size(); ++i) px[i] = static_cast<double>((i * 131) % 97) / 9.0;
  track("max_pool2", fd_check([&](Tape<double>&, Tensor<double> x) {
          return sum(mul(max_pool2(x), max_pool2(x)));
        }, px, 1e-5));

  Array<double> logits0 = random_array<double>({3, 5}, -2, 2);
  track("softmax_ce", fd_check([&](Tape<double>&, Tensor<double> x) {
          return softmax_cross_entropy(x, {0, 4, 2});
        }, logits0));

  Array<double> nhwc = random_array<double>({2, 2, 3, 3}, -1, 1);
  track("permute+reshape", fd_check([&](Tape<double>&, Tensor<double> x) {
          Tensor<double> y = reshape(nhwc_to_nchw(x), Shape{2, 18});
          return sum(mul(y, y));
        }, nhwc));

  // warp_into w.r.t. patch pixels under a mild perspective
  Array<double> patch0 = random_array<double>({4, 4, 3}, 0, 1);
  Array<double> bg0 = random_array<double>({10, 10, 3}, 0, 1);
  Array<double> wsum = random_array<double>({10, 10, 3}, -1, 1);
  Homography h = solve_homography(rect_corners(4, 4),
                                  {Vec2{1.4, 2.2}, Vec2{8.7, 1.6}, Vec2{9.1, 8.5}, Vec2{2.1, 7.8}});
  track("warp_into", fd_check([&](Tape<double>& tp, Tensor<double> x) {
          return sum(mul(warp_into(x, tp.leaf(bg0), h), tp.leaf(wsum)));
        }, patch0));

  // CNN end to end, input and parameters
  Cnn<double> cnn(8, 8, 3, {3, 4}, 4, 105);
  Array<double> img0 = random_array<double>({1, 8, 8, 3}, 0.1, 0.9);
  track("cnn(input)", fd_check([&](Tape<double>& tp, Tensor<double> x) {
          return softmax_cross_entropy(cnn.forward(tp, x), {1});
        }, img0));
  {
    // parameter gradients through training-style leaves
    Tape<double> tape;
    std::vector<Tensor<double>> leaves;
    Tensor<double> loss =
        softmax_cross_entropy(cnn.forward(tape, tape.leaf(img0), &leaves), {2});
    tape.backward(loss);
    auto params = cnn.parameters();
    double worst_param = 0.0;
    for (std::size_t pi : {std::size_t{0}, params.size() - 2}) {  // first conv w, fc w
      Array<double> saved = *params[pi];
      const Array<double>& analytic = leaves[pi].grad();
      for (std::int64_t k = 0; k < std::min<std::int64_t>(saved.size(), 40); ++k) {
        (*params[pi])[k] = saved[k] + 1e-4;
        Tape<double> t1;
        double up = softmax_cross_entropy(cnn.forward(t1, t1.leaf(img0)), {2}).value()[0];
        (*params[pi])[k] = saved[k] - 1e-4;
        Tape<double> t2;
        double down = softmax_cross_entropy(cnn.forward(t2, t2.leaf(img0)), {2}).value()[0];
        (*params[pi])[k] = saved[k];
        double numeric = (up - down) / 2e-4;
        double a = analytic[k];
        if (std::fabs(a) + std::fabs(numeric) < 1e-8) continue;
        worst_param =
            std::max(worst_param, std::fabs(a - numeric) / std::max(std::fabs(a), std::fabs(numeric)));
      }
    }
    track("cnn(params)", worst_param);
  }

  ck.check("3 finite-difference gradient checks", worst < 1e-3,
           "max relative error " + accept::str(worst) + " (worst op: " + worst_op +
               ", limit 1e-3)");
}

// --------------------------------------------------------------------------
// criterion 4: gradient-sign fidelity on monotone pixelwise chains
// --------------------------------------------------------------------------
void criterion_sign_fidelity(accept::Checker& ck) {
  std::int64_t checked = 0, agree = 0;
  const float h = 1.0f / 255;
  for (int trial = 0; trial < 12; ++trial) {
    DistortionChain chain = DistortionChain::monotone(300 + static_cast<std::uint64_t>(trial));
    Image x = random_array<float>({32, 32, 3}, 0.1, 0.9);
    Image w = random_array<float>({32, 32, 3}, -1, 1);
    Image up(x.shape()), down(x.shape());
    for (std::int64_t i = 0; i < x.size(); ++i) {
      up[i] = std::min(1.0f, x[i] + h);
      down[i] = std::max(0.0f, x[i] - h);
    }
    Image cu = chain.apply(up, trial);
    Image cd = chain.apply(down, trial);
    for (std::int64_t i = 0; i < x.size(); ++i) {
      float slope = cu[i] - cd[i];  // >= 0 by monotonicity
      if (slope == 0.0f || w[i] == 0.0f) continue;  // quantization plateau
      ++checked;
      // substituted gradient of w.chain(z) w.r.t. z is w itself
      if ((w[i] * slope > 0) == (w[i] > 0)) ++agree;
    }
  }
  double frac = static_cast<double>(agree) / static_cast<double>(checked);
  ck.check("4 gradient-sign fidelity on monotone chains", frac >= 0.99,
           accept::str(agree) + "/" + accept::str(checked) + " non-plateau pixels agree (" +
               accept::str(frac) + ", limit 0.99)");
}

}  // namespace

int main() {
  accept::Checker ck;
  criterion_forward_exactness(ck);
  criterion_gradient_factorization(ck);
  criterion_gradient_checks(ck);
  criterion_sign_fidelity(ck);
  return ck.finish("acceptance_core");
}
