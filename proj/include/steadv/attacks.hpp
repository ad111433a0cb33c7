#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "steadv/image.hpp"
#include "steadv/optim.hpp"
#include "steadv/rng.hpp"

namespace steadv {

struct AttackConfig {
  std::string algorithm = "pgd";               // "fgsm" | "pgd" | "adam"
  std::optional<float> epsilon = 8.0f / 255;   // nullopt = unbounded
  int steps = 12;
  float step_size = 1.0f / 255;                // pgd step / adam learning rate
  bool random_init = false;
  bool targeted = false;                       // default: maximize CE of the true label
  int target_label = 0;
  std::uint64_t seed = 0;
  float adam_beta1 = 0.9f;
  float adam_beta2 = 0.999f;
  float adam_eps = 1e-8f;
};

inline void validate(const AttackConfig& c) {
  if (c.algorithm != "fgsm" && c.algorithm != "pgd" && c.algorithm != "adam")
    throw ConfigError("attack: unknown algorithm \"" + c.algorithm + "\"");
  if (c.epsilon.has_value() && (*c.epsilon < 0 || *c.epsilon > 1))
    throw ConfigError("attack: epsilon must be in [0,1] or unbounded");
  if (c.steps < 1) throw ConfigError("attack: steps must be >= 1");
  if (c.step_size < 0) throw ConfigError("attack: step_size must be >= 0");
}

// Losses and correctness of the current delta under all three evaluations.
// loss_ste always equals loss_physical by the forward identity of the
// straight-through substitution; both columns are kept for the reports.
struct TracePoint {
  float loss_ste = 0;
  float loss_digital = 0;
  float loss_physical = 0;
  bool correct_digital = false;
  bool correct_physical = false;
};

struct IterationRecord {
  int iter = 0;
  TracePoint t;
  float delta_linf = 0;
  float xpd_min = 0;  // min/max of x + delta, for the validity audit
  float xpd_max = 0;
};

struct AttackReport {
  AttackConfig config;
  std::vector<IterationRecord> iters;  // steps + 1; index 0 is post-init
  Image final_delta;
  double seconds = 0;
};

// One attacked instance: gradients in the pipeline's mode, plus the three
// trace evaluations. Concrete implementations wrap the STE pipelines; tests
// substitute analytic toys.
class AttackProblem {
 public:
  virtual ~AttackProblem() = default;
  virtual Shape delta_shape() const = 0;
  virtual const Image& base() const = 0;  // x, for the validity projection
  virtual float loss_and_grad(const Image& delta, Image& grad) = 0;
  virtual TracePoint trace(const Image& delta) = 0;
};

namespace detail {

inline float sign0(float v) { return v > 0 ? 1.0f : (v < 0 ? -1.0f : 0.0f); }

// epsilon ball first, then the validity box; both are elementwise. The ulp
// nudge keeps x + delta inside [0,1] in float arithmetic, since fl(1 - x) can
// round so that fl(x + fl(1 - x)) > 1.
inline void project(Image& delta, const Image& x, const std::optional<float>& eps) {
  for (std::int64_t i = 0; i < delta.size(); ++i) {
    float d = delta[i];
    if (eps.has_value()) d = std::min(*eps, std::max(-*eps, d));
    d = std::min(1.0f - x[i], std::max(-x[i], d));
    while (x[i] + d > 1.0f) d = std::nextafter(d, -2.0f);
    while (x[i] + d < 0.0f) d = std::nextafter(d, 2.0f);
    delta[i] = d;
  }
}

inline IterationRecord make_record(AttackProblem& problem, const Image& delta, int iter) {
  IterationRecord rec;
  rec.iter = iter;
  rec.t = problem.trace(delta);
  rec.delta_linf = max_abs(delta);
  const Image& x = problem.base();
  float lo = 1e30f, hi = -1e30f;
  for (std::int64_t i = 0; i < delta.size(); ++i) {
    float v = x[i] + delta[i];
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  rec.xpd_min = lo;
  rec.xpd_max = hi;
  return rec;
}

inline Image init_delta(AttackProblem& problem, const AttackConfig& config) {
  Image delta(problem.delta_shape());
  if (config.random_init && config.epsilon.has_value() && *config.epsilon > 0) {
    Rng rng(config.seed);
    for (std::int64_t i = 0; i < delta.size(); ++i)
      delta[i] = static_cast<float>(rng.uniform(-*config.epsilon, *config.epsilon));
  }
  project(delta, problem.base(), config.epsilon);
  return delta;
}

}  // namespace detail

// Single-step sign attack: delta = eps * sign(grad), then the validity box.
inline AttackReport fgsm(AttackProblem& problem, const AttackConfig& config) {
  validate(config);
  if (!config.epsilon.has_value()) throw ConfigError("fgsm: epsilon must be finite");
  auto t0 = std::chrono::steady_clock::now();
  float direction = config.targeted ? -1.0f : 1.0f;
  AttackReport report;
  report.config = config;

  Image delta(problem.delta_shape());
  report.iters.push_back(detail::make_record(problem, delta, 0));
  Image grad(problem.delta_shape());
  problem.loss_and_grad(delta, grad);
  for (std::int64_t i = 0; i < delta.size(); ++i)
    delta[i] = *config.epsilon * detail::sign0(direction * grad[i]);
  detail::project(delta, problem.base(), config.epsilon);
  report.iters.push_back(detail::make_record(problem, delta, 1));

  report.final_delta = std::move(delta);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// Iterative sign ascent with projection onto the epsilon ball and the
// validity box after every step.
inline AttackReport pgd(AttackProblem& problem, const AttackConfig& config) {
  validate(config);
  if (!config.epsilon.has_value()) throw ConfigError("pgd: epsilon must be finite");
  auto t0 = std::chrono::steady_clock::now();
  float direction = config.targeted ? -1.0f : 1.0f;
  AttackReport report;
  report.config = config;

  Image delta = detail::init_delta(problem, config);
  report.iters.push_back(detail::make_record(problem, delta, 0));
  Image grad(problem.delta_shape());
  for (int step = 1; step <= config.steps; ++step) {
    problem.loss_and_grad(delta, grad);
    for (std::int64_t i = 0; i < delta.size(); ++i)
      delta[i] += config.step_size * detail::sign0(direction * grad[i]);
    detail::project(delta, problem.base(), config.epsilon);
    report.iters.push_back(detail::make_record(problem, delta, step));
  }

  report.final_delta = std::move(delta);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// Adam ascent on the loss; supports bounded and unbounded budgets.
inline AttackReport adam_attack(AttackProblem& problem, const AttackConfig& config) {
  validate(config);
  auto t0 = std::chrono::steady_clock::now();
  float direction = config.targeted ? -1.0f : 1.0f;
  AttackReport report;
  report.config = config;

  Image delta = detail::init_delta(problem, config);
  report.iters.push_back(detail::make_record(problem, delta, 0));
  Image grad(problem.delta_shape());
  AdamState<float> adam;
  adam.beta1 = config.adam_beta1;
  adam.beta2 = config.adam_beta2;
  adam.eps = config.adam_eps;
  for (int step = 1; step <= config.steps; ++step) {
    problem.loss_and_grad(delta, grad);
    for (std::int64_t i = 0; i < grad.size(); ++i) grad[i] = -direction * grad[i];  // ascend
    adam.step(delta, grad, config.step_size);
    detail::project(delta, problem.base(), config.epsilon);
    report.iters.push_back(detail::make_record(problem, delta, step));
  }

  report.final_delta = std::move(delta);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

inline AttackReport run_attack(AttackProblem& problem, const AttackConfig& config) {
  if (config.algorithm == "fgsm") return fgsm(problem, config);
  if (config.algorithm == "pgd") return pgd(problem, config);
  if (config.algorithm == "adam") return adam_attack(problem, config);
  throw ConfigError("attack: unknown algorithm \"" + config.algorithm + "\"");
}

// ---------------------------------------------------------------------------
// Report serialization
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt_float(float v) {
  char buf[48];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace detail

inline const char* kReportCsvHeader =
    "iter,loss_ste,loss_digital,loss_physical,correct_digital,correct_physical,"
    "delta_linf,xpd_min,xpd_max";

inline void write_report_csv(std::ostream& os, const AttackReport& report) {
  os << kReportCsvHeader << "\n";
  for (const IterationRecord& r : report.iters) {
    os << r.iter << "," << detail::fmt_float(r.t.loss_ste) << ","
       << detail::fmt_float(r.t.loss_digital) << "," << detail::fmt_float(r.t.loss_physical)
       << "," << (r.t.correct_digital ? 1 : 0) << "," << (r.t.correct_physical ? 1 : 0) << ","
       << detail::fmt_float(r.delta_linf) << "," << detail::fmt_float(r.xpd_min) << ","
       << detail::fmt_float(r.xpd_max) << "\n";
  }
}

inline void write_report_csv(const std::string& path, const AttackReport& report) {
  std::ofstream os(path);
  if (!os) throw IoError("report: cannot open for write: " + path);
  write_report_csv(os, report);
  if (!os) throw IoError("report: write failed: " + path);
}

inline std::vector<IterationRecord> read_report_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("report: cannot open: " + path);
  std::string line;
  if (!std::getline(is, line) || line != kReportCsvHeader)
    throw IoError("report: unexpected CSV header in " + path);
  std::vector<IterationRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ls, field, ',')) fields.push_back(field);
    if (fields.size() != 9) throw IoError("report: malformed row in " + path);
    IterationRecord r;
    r.iter = std::stoi(fields[0]);
    r.t.loss_ste = std::stof(fields[1]);
    r.t.loss_digital = std::stof(fields[2]);
    r.t.loss_physical = std::stof(fields[3]);
    r.t.correct_digital = fields[4] == "1";
    r.t.correct_physical = fields[5] == "1";
    r.delta_linf = std::stof(fields[6]);
    r.xpd_min = std::stof(fields[7]);
    r.xpd_max = std::stof(fields[8]);
    out.push_back(r);
  }
  return out;
}

}  // namespace steadv
