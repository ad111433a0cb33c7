#pragma once

#include <cstdint>
#include <vector>

#include "steadv/attacks.hpp"
#include "steadv/autograd.hpp"
#include "steadv/distortion.hpp"
#include "steadv/model.hpp"
#include "steadv/render.hpp"

namespace steadv {

enum class PipelineMode { ste, digital, physical_eval };

inline const char* mode_name(PipelineMode m) {
  switch (m) {
    case PipelineMode::ste: return "ste";
    case PipelineMode::digital: return "digital";
    case PipelineMode::physical_eval: return "physical-eval";
  }
  return "?";
}

namespace detail {

// x + delta followed by the clamp kernel, matching the recorded ops bit for
// bit so the tape-free evaluation agrees with the tape exactly.
inline Image clamped_sum(const Image& x, const Image& delta) {
  check_same_shape("pipeline", x, delta);
  Image z(x.shape());
  for (std::int64_t i = 0; i < z.size(); ++i) z[i] = x[i] + delta[i];
  return kernels::clamp(z, 0.0f, 1.0f);
}

template <typename T>
Tensor<T> as_batch(const Tensor<T>& hwc) {
  const Shape& s = hwc.value().shape();
  return reshape(hwc, Shape{1, s[0], s[1], s[2]});
}

inline Array<float> as_batch_array(const Image& hwc) {
  Array<float> out(Shape{1, hwc.dim(0), hwc.dim(1), hwc.dim(2)});
  for (std::int64_t i = 0; i < hwc.size(); ++i) out[i] = hwc[i];
  return out;
}

}  // namespace detail

// Global threat model: the adversary perturbs every pixel; the image then
// passes through the non-differentiable chain before the model sees it.
//
//   ste      : f(sg-substitute(clamp(x+delta), chain(clamp(x+delta))))
//   digital  : f(clamp(x+delta)), chain ignored
//   physical : f(chain(clamp(x+delta))), tape-free ground truth
class GlobalStePipeline {
 public:
  GlobalStePipeline(const Cnn<float>& model, const DistortionChain& chain, PipelineMode mode)
      : model_(&model), chain_(&chain), mode_(mode) {}

  PipelineMode mode() const { return mode_; }
  const Cnn<float>& model() const { return *model_; }
  const DistortionChain& chain() const { return *chain_; }

  // delta must be a leaf on `tape`. Returns {1,K} logits.
  Tensor<float> forward(Tape<float>& tape, const Image& x, const Tensor<float>& delta,
                        int image_index) const {
    if (mode_ == PipelineMode::physical_eval)
      throw AutogradError("pipeline: physical-eval mode records no tape; use forward_physical");
    Tensor<float> z = clamp(add(tape.leaf(x), delta), 0.0f, 1.0f);
    Tensor<float> model_in = z;
    if (mode_ == PipelineMode::ste) {
      Image distorted = chain_->apply(z.value(), image_index);
      model_in = straight_through(z, distorted);
    }
    return model_->forward(tape, detail::as_batch(model_in));
  }

  Array<float> forward_physical(const Image& x, const Image& delta, int image_index) const {
    Image distorted = chain_->apply(detail::clamped_sum(x, delta), image_index);
    return model_->forward_no_tape(detail::as_batch_array(distorted));
  }

  Array<float> forward_digital(const Image& x, const Image& delta) const {
    return model_->forward_no_tape(detail::as_batch_array(detail::clamped_sum(x, delta)));
  }

 private:
  const Cnn<float>* model_;
  const DistortionChain* chain_;
  PipelineMode mode_;
};

// Patch threat model: only the billboard patch is attackable. The true
// composite uses the printer/camera chain with nearest-neighbor rendering;
// the differentiable surrogate is the bilinear warp.
//
//   ste      : f(sg-substitute(warp(clamp(x+delta)), chain_composite(clamp(x+delta))))
//   digital  : f(warp(clamp(x+delta))), chain ignored
//   physical : f(chain_composite(clamp(x+delta))), tape-free ground truth
class PatchStePipeline {
 public:
  PatchStePipeline(const Cnn<float>& model, const DistortionChain& chain, const Scene& scene,
                   PipelineMode mode)
      : model_(&model), chain_(&chain), scene_(&scene), mode_(mode),
        homography_(solve_homography(
            rect_corners(scene.base_patch.dim(1), scene.base_patch.dim(0)),
            scene.billboard_corners)) {}

  PipelineMode mode() const { return mode_; }
  const Homography& homography() const { return homography_; }
  const Scene& scene() const { return *scene_; }

  Tensor<float> forward(Tape<float>& tape, const Tensor<float>& delta, int image_index) const {
    if (mode_ == PipelineMode::physical_eval)
      throw AutogradError("pipeline: physical-eval mode records no tape; use forward_physical");
    Tensor<float> zp = clamp(add(tape.leaf(scene_->base_patch), delta), 0.0f, 1.0f);
    Tensor<float> rendered = warp_into(zp, tape.leaf(scene_->background), homography_);
    Tensor<float> model_in = rendered;
    if (mode_ == PipelineMode::ste) {
      Image composite = chain_->apply_patch_pipeline(*scene_, zp.value(), image_index);
      model_in = straight_through(rendered, composite);
    }
    return model_->forward(tape, detail::as_batch(model_in));
  }

  Array<float> forward_physical(const Image& delta, int image_index) const {
    Image z = detail::clamped_sum(scene_->base_patch, delta);
    Image composite = chain_->apply_patch_pipeline(*scene_, z, image_index);
    return model_->forward_no_tape(detail::as_batch_array(composite));
  }

  Array<float> forward_digital(const Image& delta) const {
    Image z = detail::clamped_sum(scene_->base_patch, delta);
    Image rendered = warp_bilinear(z, scene_->background, homography_);
    return model_->forward_no_tape(detail::as_batch_array(rendered));
  }

 private:
  const Cnn<float>* model_;
  const DistortionChain* chain_;
  const Scene* scene_;
  PipelineMode mode_;
  Homography homography_;
};

// ---------------------------------------------------------------------------
// Attack problems over the pipelines
// ---------------------------------------------------------------------------

namespace detail {

inline TracePoint trace_from_logits(const Array<float>& digital_logits,
                                    const Array<float>& physical_logits, int true_label) {
  std::vector<int> labels{true_label};
  TracePoint t;
  t.loss_digital =
      kernels::softmax_cross_entropy<float>(digital_logits, labels, nullptr);
  t.loss_physical =
      kernels::softmax_cross_entropy<float>(physical_logits, labels, nullptr);
  t.loss_ste = t.loss_physical;  // forward identity of the substitution
  t.correct_digital = kernels::argmax_row(digital_logits, 0) == true_label;
  t.correct_physical = kernels::argmax_row(physical_logits, 0) == true_label;
  return t;
}

}  // namespace detail

class GlobalAttackProblem : public AttackProblem {
 public:
  GlobalAttackProblem(const GlobalStePipeline& pipeline, const Image& x, int label,
                      int image_index, bool targeted = false, int target_label = 0)
      : pipeline_(&pipeline), x_(&x), label_(label), image_index_(image_index),
        attack_label_(targeted ? target_label : label) {}

  Shape delta_shape() const override { return x_->shape(); }
  const Image& base() const override { return *x_; }

  float loss_and_grad(const Image& delta, Image& grad) override {
    Tape<float> tape;
    Tensor<float> d = tape.leaf(delta, true);
    Tensor<float> logits = pipeline_->forward(tape, *x_, d, image_index_);
    Tensor<float> loss = softmax_cross_entropy(logits, std::vector<int>{attack_label_});
    tape.backward(loss);
    grad = d.grad();
    return loss.value()[0];
  }

  TracePoint trace(const Image& delta) override {
    return detail::trace_from_logits(pipeline_->forward_digital(*x_, delta),
                                     pipeline_->forward_physical(*x_, delta, image_index_),
                                     label_);
  }

 private:
  const GlobalStePipeline* pipeline_;
  const Image* x_;
  int label_;
  int image_index_;
  int attack_label_;
};

class PatchAttackProblem : public AttackProblem {
 public:
  PatchAttackProblem(const PatchStePipeline& pipeline, int label, int image_index,
                     bool targeted = false, int target_label = 0)
      : pipeline_(&pipeline), label_(label), image_index_(image_index),
        attack_label_(targeted ? target_label : label) {}

  Shape delta_shape() const override { return pipeline_->scene().base_patch.shape(); }
  const Image& base() const override { return pipeline_->scene().base_patch; }

  float loss_and_grad(const Image& delta, Image& grad) override {
    Tape<float> tape;
    Tensor<float> d = tape.leaf(delta, true);
    Tensor<float> logits = pipeline_->forward(tape, d, image_index_);
    Tensor<float> loss = softmax_cross_entropy(logits, std::vector<int>{attack_label_});
    tape.backward(loss);
    grad = d.grad();
    return loss.value()[0];
  }

  TracePoint trace(const Image& delta) override {
    return detail::trace_from_logits(pipeline_->forward_digital(delta),
                                     pipeline_->forward_physical(delta, image_index_), label_);
  }

 private:
  const PatchStePipeline* pipeline_;
  int label_;
  int image_index_;
  int attack_label_;
};

}  // namespace steadv
