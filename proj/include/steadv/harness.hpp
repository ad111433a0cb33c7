#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "steadv/attacks.hpp"
#include "steadv/config.hpp"
#include "steadv/dataset.hpp"
#include "steadv/distortion.hpp"
#include "steadv/model.hpp"
#include "steadv/ste.hpp"
#include "steadv/svg_plot.hpp"
#include "steadv/tensor_io.hpp"

namespace steadv {

// Deterministic fan-out: work is indexed, results land by index, so thread
// count never changes the outcome.
template <typename Fn>
void parallel_for(int n, Fn&& fn) {
  int threads = static_cast<int>(std::thread::hardware_concurrency());
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr first_error = nullptr;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

// ---------------------------------------------------------------------------
// Sweep cells
// ---------------------------------------------------------------------------

struct SweepCellSpec {
  std::string algorithm = "pgd";
  std::optional<float> epsilon = 8.0f / 255;
  bool ste = true;
  int steps = 12;
  float step_size = 1.0f / 255;
  bool random_init = true;
};

namespace detail {

inline std::string fmt_num(double v) {
  double snapped = std::round(v * 10000.0) / 10000.0;  // absorb float->double noise
  double r = std::round(snapped);
  if (snapped == r) return std::to_string(static_cast<long long>(r));
  return fmt_double(snapped);
}

}  // namespace detail

inline std::string eps_token(const std::optional<float>& eps) {
  if (!eps.has_value()) return "unb";
  return detail::fmt_num(static_cast<double>(*eps) * 255.0);
}

// "[Optimizer]-[Iterations]-[LearningRate]", learning rate in /255 units.
inline std::string attack_display_name(const SweepCellSpec& s) {
  std::string algo = s.algorithm == "fgsm" ? "FGSM" : (s.algorithm == "pgd" ? "PGD" : "Adam");
  return algo + "-" + std::to_string(s.steps) + "-" +
         detail::fmt_num(static_cast<double>(s.step_size) * 255.0);
}

inline std::string cell_dir_name(const SweepCellSpec& s) {
  return s.algorithm + "-" + std::to_string(s.steps) + "-" +
         detail::fmt_num(static_cast<double>(s.step_size) * 255.0) + "_eps" + eps_token(s.epsilon) +
         (s.ste ? "_ste" : "_digital");
}

inline AttackConfig to_attack_config(const SweepCellSpec& s, std::uint64_t seed) {
  AttackConfig c;
  c.algorithm = s.algorithm;
  c.epsilon = s.epsilon;
  c.steps = s.steps;
  c.step_size = s.step_size;
  c.random_init = s.random_init;
  c.seed = seed;
  return c;
}

// "pgd eps=8/255 steps=12 alpha=1/255 ste=on random_init=on"
inline SweepCellSpec parse_attack_line(const std::string& line) {
  std::istringstream is(line);
  SweepCellSpec spec;
  if (!(is >> spec.algorithm))
    throw ConfigError("attack line: empty");
  if (spec.algorithm != "fgsm" && spec.algorithm != "pgd" && spec.algorithm != "adam")
    throw ConfigError("attack line: unknown algorithm \"" + spec.algorithm + "\"");
  spec.random_init = spec.algorithm == "pgd";
  std::string tok;
  while (is >> tok) {
    auto eq = tok.find('=');
    if (eq == std::string::npos)
      throw ConfigError("attack line: expected key=value, got \"" + tok + "\"");
    std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
    if (key == "eps" || key == "epsilon") {
      if (val == "unbounded" || val == "inf")
        spec.epsilon = std::nullopt;
      else
        spec.epsilon = static_cast<float>(ConfigFile::parse_fraction(val));
    } else if (key == "steps" || key == "iters") {
      spec.steps = std::stoi(val);
    } else if (key == "alpha" || key == "lr" || key == "step_size") {
      spec.step_size = static_cast<float>(ConfigFile::parse_fraction(val));
    } else if (key == "ste") {
      spec.ste = val == "on" || val == "true" || val == "1";
    } else if (key == "random_init") {
      spec.random_init = val == "on" || val == "true" || val == "1";
    } else {
      throw ConfigError("attack line: unknown key \"" + key + "\"");
    }
  }
  return spec;
}

// FGSM and 12-step PGD (step 1/255), four budgets, with and without the
// straight-through substitution.
inline std::vector<SweepCellSpec> default_global_grid() {
  std::vector<SweepCellSpec> cells;
  for (float e255 : {2.0f, 4.0f, 8.0f, 16.0f})
    for (bool ste : {false, true}) {
      SweepCellSpec f;
      f.algorithm = "fgsm";
      f.epsilon = e255 / 255;
      f.ste = ste;
      f.steps = 1;
      f.step_size = e255 / 255;
      f.random_init = false;
      cells.push_back(f);
      SweepCellSpec p;
      p.algorithm = "pgd";
      p.epsilon = e255 / 255;
      p.ste = ste;
      p.steps = 12;
      p.step_size = 1.0f / 255;
      p.random_init = true;
      cells.push_back(p);
    }
  return cells;
}

// Adam patch attacks: bounded budgets with the substitution, plus bounded-free
// runs with and without it.
inline std::vector<SweepCellSpec> default_patch_grid() {
  std::vector<SweepCellSpec> cells;
  SweepCellSpec non_ste;
  non_ste.algorithm = "adam";
  non_ste.epsilon = std::nullopt;
  non_ste.ste = false;
  non_ste.steps = 500;
  non_ste.step_size = 12.75f / 255;
  non_ste.random_init = false;
  cells.push_back(non_ste);
  struct Row { float e255; int steps; float lr255; };
  for (Row r : {Row{2, 200, 1}, Row{4, 200, 2}, Row{8, 200, 2}}) {
    SweepCellSpec s;
    s.algorithm = "adam";
    s.epsilon = r.e255 / 255;
    s.ste = true;
    s.steps = r.steps;
    s.step_size = r.lr255 / 255;
    s.random_init = false;
    cells.push_back(s);
  }
  SweepCellSpec unb = non_ste;
  unb.ste = true;
  cells.push_back(unb);
  return cells;
}

// ---------------------------------------------------------------------------
// Experiment runs
// ---------------------------------------------------------------------------

struct CellOutcome {
  SweepCellSpec spec;
  std::string display_name;
  std::string dir_name;
  double acc_digital = 0;
  double acc_physical = 0;
  std::vector<AttackReport> reports;  // one per image, in index order
};

struct GlobalRunResult {
  double clean_acc = 0;             // benign, no distortion
  double benign_physical_acc = 0;   // benign through the chain
  std::vector<CellOutcome> cells;
  double seconds = 0;
};

struct PatchRunResult {
  double benign_digital_acc = 0;  // base patch, bilinear render, no chain
  double benign_acc = 0;          // base patch through the chain
  double green_digital_acc = 0;
  double green_acc = 0;           // green placeholder through the chain
  std::vector<CellOutcome> cells;
  double seconds = 0;
};

inline GlobalRunResult run_global_experiment(const Cnn<float>& model,
                                             const std::vector<LabeledImage>& test_set,
                                             const DistortionChain& chain,
                                             const std::vector<SweepCellSpec>& grid,
                                             std::uint64_t seed, std::ostream* log = nullptr) {
  auto t0 = std::chrono::steady_clock::now();
  int n = static_cast<int>(test_set.size());
  GlobalRunResult result;

  GlobalStePipeline eval_pipe(model, chain, PipelineMode::physical_eval);
  std::vector<int> clean_ok(static_cast<std::size_t>(n)), phys_ok(static_cast<std::size_t>(n));
  parallel_for(n, [&](int i) {
    const LabeledImage& s = test_set[static_cast<std::size_t>(i)];
    Image zero(s.image.shape());
    Array<float> dl = eval_pipe.forward_digital(s.image, zero);
    Array<float> pl = eval_pipe.forward_physical(s.image, zero, i);
    clean_ok[static_cast<std::size_t>(i)] = kernels::argmax_row(dl, 0) == s.label ? 1 : 0;
    phys_ok[static_cast<std::size_t>(i)] = kernels::argmax_row(pl, 0) == s.label ? 1 : 0;
  });
  int c0 = 0, c1 = 0;
  for (int i = 0; i < n; ++i) {
    c0 += clean_ok[static_cast<std::size_t>(i)];
    c1 += phys_ok[static_cast<std::size_t>(i)];
  }
  result.clean_acc = static_cast<double>(c0) / n;
  result.benign_physical_acc = static_cast<double>(c1) / n;
  if (log) *log << "benign: digital=" << result.clean_acc
                << " physical=" << result.benign_physical_acc << "\n";

  for (std::size_t ci = 0; ci < grid.size(); ++ci) {
    CellOutcome cell;
    cell.spec = grid[ci];
    cell.display_name = attack_display_name(cell.spec);
    cell.dir_name = cell_dir_name(cell.spec);
    cell.reports.resize(static_cast<std::size_t>(n));
    GlobalStePipeline pipe(model, chain,
                           cell.spec.ste ? PipelineMode::ste : PipelineMode::digital);
    parallel_for(n, [&](int i) {
      const LabeledImage& s = test_set[static_cast<std::size_t>(i)];
      GlobalAttackProblem problem(pipe, s.image, s.label, i);
      AttackConfig acfg = to_attack_config(cell.spec, mix_seed(seed, 0xA7 + ci, i));
      cell.reports[static_cast<std::size_t>(i)] = run_attack(problem, acfg);
    });
    int okd = 0, okp = 0;
    for (const AttackReport& r : cell.reports) {
      okd += r.iters.back().t.correct_digital ? 1 : 0;
      okp += r.iters.back().t.correct_physical ? 1 : 0;
    }
    cell.acc_digital = static_cast<double>(okd) / n;
    cell.acc_physical = static_cast<double>(okp) / n;
    if (log) *log << cell.dir_name << ": digital=" << cell.acc_digital
                  << " physical=" << cell.acc_physical << "\n";
    result.cells.push_back(std::move(cell));
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

inline PatchRunResult run_patch_experiment(const Cnn<float>& model,
                                           const std::vector<Scene>& scenes,
                                           const DistortionChain& chain,
                                           const std::vector<SweepCellSpec>& grid,
                                           std::uint64_t seed, std::ostream* log = nullptr) {
  auto t0 = std::chrono::steady_clock::now();
  int n = static_cast<int>(scenes.size());
  PatchRunResult result;

  std::vector<std::array<int, 4>> benign_ok(static_cast<std::size_t>(n));
  parallel_for(n, [&](int i) {
    const Scene& scene = scenes[static_cast<std::size_t>(i)];
    PatchStePipeline pipe(model, chain, scene, PipelineMode::physical_eval);
    Image zero(scene.base_patch.shape());
    Image green = green_placeholder_patch(scene.base_patch.dim(0), scene.base_patch.dim(1));
    Image green_delta(green.shape());
    for (std::int64_t k = 0; k < green.size(); ++k)
      green_delta[k] = green[k] - scene.base_patch[k];
    auto& ok = benign_ok[static_cast<std::size_t>(i)];
    ok[0] = kernels::argmax_row(pipe.forward_digital(zero), 0) == scene.label ? 1 : 0;
    ok[1] = kernels::argmax_row(pipe.forward_physical(zero, i), 0) == scene.label ? 1 : 0;
    ok[2] = kernels::argmax_row(pipe.forward_digital(green_delta), 0) == scene.label ? 1 : 0;
    ok[3] = kernels::argmax_row(pipe.forward_physical(green_delta, i), 0) == scene.label ? 1 : 0;
  });
  int sums[4] = {0, 0, 0, 0};
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < 4; ++k) sums[k] += benign_ok[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
  result.benign_digital_acc = static_cast<double>(sums[0]) / n;
  result.benign_acc = static_cast<double>(sums[1]) / n;
  result.green_digital_acc = static_cast<double>(sums[2]) / n;
  result.green_acc = static_cast<double>(sums[3]) / n;
  if (log) *log << "benign=" << result.benign_acc << " green=" << result.green_acc << "\n";

  for (std::size_t ci = 0; ci < grid.size(); ++ci) {
    CellOutcome cell;
    cell.spec = grid[ci];
    cell.display_name = attack_display_name(cell.spec);
    cell.dir_name = cell_dir_name(cell.spec);
    cell.reports.resize(static_cast<std::size_t>(n));
    parallel_for(n, [&](int i) {
      const Scene& scene = scenes[static_cast<std::size_t>(i)];
      PatchStePipeline pipe(model, chain, scene,
                            cell.spec.ste ? PipelineMode::ste : PipelineMode::digital);
      PatchAttackProblem problem(pipe, scene.label, i);
      AttackConfig acfg = to_attack_config(cell.spec, mix_seed(seed, 0xB7 + ci, i));
      cell.reports[static_cast<std::size_t>(i)] = run_attack(problem, acfg);
    });
    int okd = 0, okp = 0;
    for (const AttackReport& r : cell.reports) {
      okd += r.iters.back().t.correct_digital ? 1 : 0;
      okp += r.iters.back().t.correct_physical ? 1 : 0;
    }
    cell.acc_digital = static_cast<double>(okd) / n;
    cell.acc_physical = static_cast<double>(okp) / n;
    if (log) *log << cell.dir_name << ": digital=" << cell.acc_digital
                  << " physical=" << cell.acc_physical << "\n";
    result.cells.push_back(std::move(cell));
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

// Training corpus for the scene classifier: billboard content is randomized
// (paintings, the green screen, occasionally the benign art), so the label
// signal lives only in the background.
inline std::vector<LabeledImage> scene_training_corpus(const std::vector<Scene>& scenes,
                                                       std::uint64_t seed) {
  std::vector<LabeledImage> out;
  out.reserve(scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const Scene& scene = scenes[i];
    Rng rng(mix_seed(seed, 0x9a, i));
    double pick = rng.uniform();
    Image patch;
    if (pick < 0.7)
      patch = random_painting(rng, scene.base_patch.dim(0), scene.base_patch.dim(1));
    else if (pick < 0.85)
      patch = green_placeholder_patch(scene.base_patch.dim(0), scene.base_patch.dim(1));
    else
      patch = scene.base_patch;
    Homography h = solve_homography(rect_corners(patch.dim(1), patch.dim(0)),
                                    scene.billboard_corners);
    out.push_back(LabeledImage{composite_nearest(patch, scene.background, h), scene.label});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

struct RunMeta {
  std::string kind;  // "global" | "patch"
  std::uint64_t seed = 0;
  std::uint64_t dataset_seed = 0;
  int dataset_count = 0;
  int classes = 0;
  std::string model_spec;
  std::string model_path;
  std::string chain_stage_list;
  std::string chain_resolved;
  std::uint64_t chain_seed = 0;
};

namespace detail {

inline std::string img_name(int i, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img_%03d.%s", i, ext);
  return buf;
}

inline std::vector<double> mean_curve(const std::vector<AttackReport>& reports,
                                      float TracePoint::*field) {
  if (reports.empty()) return {};
  std::size_t len = reports[0].iters.size();
  std::vector<double> out(len, 0.0);
  for (const AttackReport& r : reports)
    for (std::size_t t = 0; t < len && t < r.iters.size(); ++t)
      out[t] += static_cast<double>(r.iters[t].t.*field);
  for (double& v : out) v /= static_cast<double>(reports.size());
  return out;
}

// Lowest mean substituted-model loss among iterations where no image
// survives the physical evaluation; absent when accuracy never hits zero.
inline std::optional<double> zero_accuracy_loss_threshold(const std::vector<AttackReport>& reports) {
  if (reports.empty()) return std::nullopt;
  std::size_t len = reports[0].iters.size();
  std::optional<double> best;
  for (std::size_t t = 0; t < len; ++t) {
    bool all_wrong = true;
    double mean_loss = 0;
    for (const AttackReport& r : reports) {
      if (t >= r.iters.size() || r.iters[t].t.correct_physical) {
        all_wrong = false;
        break;
      }
      mean_loss += static_cast<double>(r.iters[t].t.loss_ste);
    }
    if (!all_wrong) continue;
    mean_loss /= static_cast<double>(reports.size());
    if (!best || mean_loss < *best) best = mean_loss;
  }
  return best;
}

inline const CellOutcome* find_cell(const std::vector<CellOutcome>& cells,
                                    const std::string& eps_tok, bool ste,
                                    const char* prefer_algorithm) {
  const CellOutcome* found = nullptr;
  for (const CellOutcome& c : cells) {
    if (eps_token(c.spec.epsilon) != eps_tok || c.spec.ste != ste) continue;
    if (c.spec.algorithm == prefer_algorithm) return &c;
    if (!found) found = &c;
  }
  return found;
}

inline void write_cell_files(const std::string& out_dir, const CellOutcome& cell) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir + "/curves/" + cell.dir_name);
  fs::create_directories(out_dir + "/deltas/" + cell.dir_name);
  for (std::size_t i = 0; i < cell.reports.size(); ++i) {
    const AttackReport& r = cell.reports[i];
    write_report_csv(out_dir + "/curves/" + cell.dir_name + "/" + img_name(static_cast<int>(i), "csv"), r);
    save_tensor(out_dir + "/deltas/" + cell.dir_name + "/" + img_name(static_cast<int>(i), "stt"),
                r.final_delta);
  }
}

inline void write_loss_plots(const std::string& out_dir, const std::vector<CellOutcome>& cells) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir + "/plots");
  std::vector<std::string> eps_seen;
  for (const CellOutcome& c : cells) {
    std::string tok = eps_token(c.spec.epsilon);
    bool seen = false;
    for (const auto& e : eps_seen) seen = seen || e == tok;
    if (seen) continue;
    eps_seen.push_back(tok);

    const CellOutcome* ste_cell = find_cell(cells, tok, true, "pgd");
    const CellOutcome* dig_cell = find_cell(cells, tok, false, "pgd");
    if (!ste_cell && !dig_cell) continue;
    std::vector<PlotSeries> series;
    if (ste_cell) {
      PlotSeries s;
      s.label = "substituted attack loss";
      s.color = "royalblue";
      s.marker = "circle";
      s.css_class = "pt-ste";
      s.values = mean_curve(ste_cell->reports, &TracePoint::loss_ste);
      series.push_back(std::move(s));
    }
    const CellOutcome* src = dig_cell ? dig_cell : ste_cell;
    PlotSeries d;
    d.label = "digital attack loss";
    d.color = "seagreen";
    d.marker = "square";
    d.dash = "2,3";
    d.css_class = "pt-digital";
    d.values = mean_curve(src->reports, &TracePoint::loss_digital);
    series.push_back(std::move(d));
    PlotSeries p;
    p.label = "digital attack, physical eval";
    p.color = "darkorange";
    p.marker = "triangle";
    p.css_class = "pt-physical";
    p.values = mean_curve(src->reports, &TracePoint::loss_physical);
    series.push_back(std::move(p));

    std::optional<double> threshold =
        ste_cell ? zero_accuracy_loss_threshold(ste_cell->reports) : std::nullopt;
    write_line_plot_svg(out_dir + "/plots/loss_eps" + tok + ".svg",
                        "mean loss curves, eps=" + tok + "/255", series, threshold);
  }
}

inline nlohmann::json meta_json(const RunMeta& meta) {
  nlohmann::json j;
  j["kind"] = meta.kind;
  j["seed"] = meta.seed;
  j["dataset"] = {{"seed", meta.dataset_seed}, {"count", meta.dataset_count},
                  {"classes", meta.classes}};
  j["model"] = {{"spec", meta.model_spec}, {"path", meta.model_path}};
  j["chain"] = {{"stages", meta.chain_stage_list}, {"resolved", meta.chain_resolved},
                {"seed", meta.chain_seed}};
  j["metric"] = "classification accuracy (scene-level for patch runs)";
  return j;
}

inline nlohmann::json cell_json(const CellOutcome& cell) {
  nlohmann::json j;
  j["name"] = cell.display_name;
  j["dir"] = cell.dir_name;
  j["algorithm"] = cell.spec.algorithm;
  if (cell.spec.epsilon.has_value())
    j["epsilon"] = static_cast<double>(*cell.spec.epsilon);
  else
    j["epsilon"] = nullptr;
  j["epsilon_label"] = eps_token(cell.spec.epsilon);
  j["ste"] = cell.spec.ste;
  j["steps"] = cell.spec.steps;
  j["step_size"] = static_cast<double>(cell.spec.step_size);
  j["random_init"] = cell.spec.random_init;
  j["acc_digital"] = cell.acc_digital;
  j["acc_physical"] = cell.acc_physical;
  return j;
}

inline void write_summary_csv_header(std::ostream& os) {
  os << "name,algorithm,epsilon,ste,steps,step_size,random_init,acc_digital,acc_physical\n";
}

inline void write_summary_csv_cell(std::ostream& os, const CellOutcome& cell) {
  os << cell.display_name << "," << cell.spec.algorithm << "," << eps_token(cell.spec.epsilon)
     << "," << (cell.spec.ste ? 1 : 0) << "," << cell.spec.steps << ","
     << fmt_float(cell.spec.step_size) << "," << (cell.spec.random_init ? 1 : 0) << ","
     << fmt_double(cell.acc_digital) << "," << fmt_double(cell.acc_physical) << "\n";
}

}  // namespace detail

inline void emit_global_report(const GlobalRunResult& result, const RunMeta& meta,
                               const std::vector<LabeledImage>& test_set,
                               const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("report: cannot create output directory " + out_dir);

  std::ofstream summary(out_dir + "/summary.csv");
  if (!summary) throw IoError("report: cannot write " + out_dir + "/summary.csv");
  detail::write_summary_csv_header(summary);
  summary << "Benign,-,0,-,0,0,-," << detail::fmt_double(result.clean_acc) << ","
          << detail::fmt_double(result.benign_physical_acc) << "\n";
  for (const CellOutcome& cell : result.cells) detail::write_summary_csv_cell(summary, cell);
  summary.close();

  for (const CellOutcome& cell : result.cells) {
    detail::write_cell_files(out_dir, cell);
    fs::create_directories(out_dir + "/adv/" + cell.dir_name);
    for (std::size_t i = 0; i < cell.reports.size(); ++i) {
      const Image& x = test_set[i].image;
      const Image& d = cell.reports[i].final_delta;
      Image adv(x.shape());
      for (std::int64_t k = 0; k < adv.size(); ++k)
        adv[k] = std::min(1.0f, std::max(0.0f, x[k] + d[k]));
      write_ppm(out_dir + "/adv/" + cell.dir_name + "/" + detail::img_name(static_cast<int>(i), "ppm"), adv);
    }
  }
  detail::write_loss_plots(out_dir, result.cells);

  nlohmann::json j = detail::meta_json(meta);
  j["benign"] = {{"acc_digital", result.clean_acc}, {"acc_physical", result.benign_physical_acc}};
  j["cells"] = nlohmann::json::array();
  for (const CellOutcome& cell : result.cells) j["cells"].push_back(detail::cell_json(cell));
  nlohmann::json thresholds = nlohmann::json::object();
  for (const CellOutcome& cell : result.cells) {
    if (!cell.spec.ste) continue;
    auto th = detail::zero_accuracy_loss_threshold(cell.reports);
    if (th) thresholds[cell.dir_name] = *th;
  }
  j["zero_accuracy_loss_thresholds"] = thresholds;
  j["runtime_seconds"] = result.seconds;
  std::ofstream js(out_dir + "/summary.json");
  if (!js) throw IoError("report: cannot write " + out_dir + "/summary.json");
  js << j.dump(2) << "\n";
}

inline void emit_patch_report(const PatchRunResult& result, const RunMeta& meta,
                              const std::vector<Scene>& scenes, const DistortionChain& chain,
                              const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("report: cannot create output directory " + out_dir);

  std::ofstream summary(out_dir + "/summary.csv");
  if (!summary) throw IoError("report: cannot write " + out_dir + "/summary.csv");
  detail::write_summary_csv_header(summary);
  summary << "Benign,-,0,-,0,0,-," << detail::fmt_double(result.benign_digital_acc) << ","
          << detail::fmt_double(result.benign_acc) << "\n";
  summary << "GreenScreen,-,0,-,0,0,-," << detail::fmt_double(result.green_digital_acc) << ","
          << detail::fmt_double(result.green_acc) << "\n";
  for (const CellOutcome& cell : result.cells) detail::write_summary_csv_cell(summary, cell);
  summary.close();

  for (const CellOutcome& cell : result.cells) {
    detail::write_cell_files(out_dir, cell);
    fs::create_directories(out_dir + "/adv/" + cell.dir_name);
    for (std::size_t i = 0; i < cell.reports.size(); ++i) {
      const Scene& scene = scenes[i];
      const Image& d = cell.reports[i].final_delta;
      Image patch(scene.base_patch.shape());
      for (std::int64_t k = 0; k < patch.size(); ++k)
        patch[k] = std::min(1.0f, std::max(0.0f, scene.base_patch[k] + d[k]));
      write_ppm(out_dir + "/adv/" + cell.dir_name + "/" +
                    "patch_" + detail::img_name(static_cast<int>(i), "ppm"), patch);
      write_ppm(out_dir + "/adv/" + cell.dir_name + "/" +
                    "scene_" + detail::img_name(static_cast<int>(i), "ppm"),
                chain.apply_patch_pipeline(scene, patch, static_cast<int>(i)));
    }
  }
  detail::write_loss_plots(out_dir, result.cells);

  nlohmann::json j = detail::meta_json(meta);
  j["benign"] = {{"acc_digital", result.benign_digital_acc}, {"acc_physical", result.benign_acc}};
  j["green"] = {{"acc_digital", result.green_digital_acc}, {"acc_physical", result.green_acc}};
  j["cells"] = nlohmann::json::array();
  for (const CellOutcome& cell : result.cells) j["cells"].push_back(detail::cell_json(cell));
  j["runtime_seconds"] = result.seconds;
  std::ofstream js(out_dir + "/summary.json");
  if (!js) throw IoError("report: cannot write " + out_dir + "/summary.json");
  js << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Post-hoc verification: constraints are re-checked from files, not memory.
// ---------------------------------------------------------------------------

struct VerifyResult {
  int cells = 0;
  int images = 0;
  int violations = 0;
  std::vector<std::string> messages;
};

inline VerifyResult verify_run(const std::string& run_dir) {
  VerifyResult vr;
  std::ifstream js(run_dir + "/summary.json");
  if (!js) throw IoError("verify: cannot open " + run_dir + "/summary.json");
  nlohmann::json j = nlohmann::json::parse(js);

  std::string kind = j.at("kind");
  std::uint64_t dseed = j.at("dataset").at("seed");
  int dcount = j.at("dataset").at("count");
  int classes = j.at("dataset").at("classes");
  std::vector<Image> bases;
  if (kind == "global") {
    for (auto& li : generate_classification_set(dseed, dcount, classes))
      bases.push_back(std::move(li.image));
  } else {
    for (auto& scene : generate_scene_set(dseed, dcount, classes))
      bases.push_back(std::move(scene.base_patch));
  }

  const float tol = 0.0f;  // constraints hold exactly, by construction
  for (const auto& cell : j.at("cells")) {
    ++vr.cells;
    std::string dir = cell.at("dir");
    std::optional<float> eps;
    if (!cell.at("epsilon").is_null()) eps = cell.at("epsilon").get<float>();
    for (std::size_t i = 0; i < bases.size(); ++i) {
      ++vr.images;
      std::string curve = run_dir + "/curves/" + dir + "/" + detail::img_name(static_cast<int>(i), "csv");
      for (const IterationRecord& r : read_report_csv(curve)) {
        if (eps && r.delta_linf > *eps + tol) {
          ++vr.violations;
          vr.messages.push_back(dir + " img " + std::to_string(i) + " iter " +
                                std::to_string(r.iter) + ": delta_linf " +
                                std::to_string(r.delta_linf) + " exceeds epsilon");
        }
        if (r.xpd_min < 0.0f || r.xpd_max > 1.0f) {
          ++vr.violations;
          vr.messages.push_back(dir + " img " + std::to_string(i) + " iter " +
                                std::to_string(r.iter) + ": x+delta outside [0,1]");
        }
      }
      Image delta = load_tensor(run_dir + "/deltas/" + dir + "/" +
                                detail::img_name(static_cast<int>(i), "stt"));
      if (eps && max_abs(delta) > *eps + tol) {
        ++vr.violations;
        vr.messages.push_back(dir + " img " + std::to_string(i) + ": stored delta exceeds epsilon");
      }
      const Image& x = bases[i];
      if (!delta.same_shape(x)) {
        ++vr.violations;
        vr.messages.push_back(dir + " img " + std::to_string(i) + ": stored delta shape mismatch");
        continue;
      }
      for (std::int64_t k = 0; k < delta.size(); ++k) {
        float v = x[k] + delta[k];
        if (v < 0.0f || v > 1.0f) {
          ++vr.violations;
          vr.messages.push_back(dir + " img " + std::to_string(i) + ": stored x+delta outside [0,1]");
          break;
        }
      }
    }
  }
  return vr;
}

// ---------------------------------------------------------------------------
// Settings shared by the CLI subcommands
// ---------------------------------------------------------------------------

struct ExperimentSettings {
  std::uint64_t seed = 7;
  std::string out_dir = "runs/out";
  std::string dataset_kind = "classification";  // or "scenes"
  int classes = 4;
  int train_count = 4000;
  int test_count = 50;
  int scene_train_count = 1500;
  int scene_count = 20;
  std::vector<int> channels = {8, 16, 32};
  TrainConfig train;
  std::string model_path = "runs/model.stw";
  std::vector<StageSpec> chain_stages;
  std::vector<SweepCellSpec> cells;

  std::uint64_t train_data_seed() const { return seed; }
  std::uint64_t test_data_seed() const { return mix_seed(seed, 0x7357); }
  std::uint64_t scene_train_seed() const { return mix_seed(seed, 0x5c); }
  std::uint64_t scene_eval_seed() const { return mix_seed(seed, 0x5ce); }
  std::uint64_t model_init_seed() const { return mix_seed(seed, 0x30d); }
  std::uint64_t chain_seed() const { return mix_seed(seed, 0xd1); }
  std::uint64_t attack_seed() const { return mix_seed(seed, 0xa77); }

  std::string chain_stage_list() const {
    std::string out;
    for (std::size_t i = 0; i < chain_stages.size(); ++i) {
      if (i) out += ",";
      out += stage_name(chain_stages[i].kind);
    }
    return out;
  }
};

inline std::vector<StageSpec> parse_chain_stages(const ConfigFile& cfg) {
  std::string list =
      cfg.get_or("chain.stages", "colorshift,gamma,palette,blur,noise,recapture,quantize8");
  std::vector<StageSpec> stages;
  if (list == "none" || list == "empty" || list.empty()) return stages;
  std::istringstream is(list);
  std::string name;
  while (std::getline(is, name, ',')) {
    name = detail::trim(name);
    if (name == "colorshift") {
      stages.push_back(StageSpec::color_shift());
    } else if (name == "gamma") {
      stages.push_back(StageSpec::gamma());
    } else if (name == "palette") {
      stages.push_back(StageSpec::printer_palette(cfg.get_int("chain.palette.colors", 512),
                                                  cfg.get_bool("chain.palette.dither", true)));
    } else if (name == "blur") {
      stages.push_back(StageSpec::lens_blur(cfg.get_int("chain.blur.passes", 2)));
    } else if (name == "noise") {
      stages.push_back(StageSpec::sensor_noise(cfg.get_double("chain.noise.sigma", 0.01)));
    } else if (name == "quantize8") {
      stages.push_back(StageSpec::quantize8());
    } else if (name == "recapture") {
      stages.push_back(
          StageSpec::perspective_recapture(cfg.get_double("chain.recapture.jitter", 1.0)));
    } else {
      throw ConfigError("chain.stages: unknown stage \"" + name + "\"");
    }
  }
  return stages;
}

inline ExperimentSettings parse_settings(const ConfigFile& cfg, const std::string& kind) {
  ExperimentSettings s;
  s.seed = cfg.get_u64("seed", 7);
  s.out_dir = cfg.get_or("out", "runs/out");
  s.dataset_kind = cfg.get_or("dataset.kind", kind == "patch" ? "scenes" : "classification");
  s.classes = cfg.get_int("dataset.classes", 4);
  s.train_count = cfg.get_int("dataset.count", 4000);
  s.test_count = cfg.get_int("dataset.test_count", 50);
  s.scene_train_count = cfg.get_int("scenes.train_count", 1500);
  s.scene_count = cfg.get_int("scenes.count", 20);
  s.model_path = cfg.get_or("model.path", "runs/model.stw");
  if (cfg.has("model.channels")) {
    s.channels.clear();
    std::istringstream is(cfg.get("model.channels"));
    std::string item;
    while (std::getline(is, item, ',')) s.channels.push_back(std::stoi(detail::trim(item)));
  }
  s.train.epochs = cfg.get_int("train.epochs", 5);
  s.train.batch_size = cfg.get_int("train.batch", 32);
  s.train.learning_rate = cfg.get_double("train.lr", 1e-3);
  s.train.optimizer = cfg.get_or("train.optimizer", "adam");
  s.train.val_fraction = cfg.get_double("train.val_fraction", 0.1);
  s.train.label_smoothing = cfg.get_double("train.label_smoothing", 0.0);
  s.train.seed = cfg.get_u64("train.seed", mix_seed(s.seed, 0x7a));
  s.chain_stages = parse_chain_stages(cfg);
  for (const std::string& line : cfg.get_all("attack"))
    s.cells.push_back(parse_attack_line(line));
  if (s.cells.empty())
    s.cells = kind == "patch" ? default_patch_grid() : default_global_grid();
  return s;
}

}  // namespace steadv
