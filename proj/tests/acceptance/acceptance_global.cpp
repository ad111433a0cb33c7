// Desk-scale reproduction of the printout experiment: accuracy table
// orderings and thresholds, loss-curve properties, the constraint audit from
// serialized files, and end-to-end determinism.

#include <filesystem>
#include <fstream>
#include <sstream>

#include "steadv/harness.hpp"
#include "accept_util.hpp"

using namespace steadv;

namespace {

namespace fs = std::filesystem;

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

const CellOutcome* find_pgd(const GlobalRunResult& r, float e255, bool ste) {
  for (const CellOutcome& c : r.cells)
    if (c.spec.algorithm == "pgd" && c.spec.ste == ste && c.spec.epsilon.has_value() &&
        std::fabs(*c.spec.epsilon * 255 - e255) < 1e-4)
      return &c;
  return nullptr;
}

double mean_loss_at(const CellOutcome& cell, std::size_t t, float TracePoint::*field) {
  double acc = 0;
  for (const AttackReport& r : cell.reports) acc += static_cast<double>(r.iters[t].t.*field);
  return acc / static_cast<double>(cell.reports.size());
}

}  // namespace

int main() {
  accept::Checker ck;
  const std::uint64_t seed = 7;

  // model: train once on the procedural classification corpus
  accept::Stopwatch train_sw;
  auto corpus = generate_classification_set(seed, 4000, 4);
  Cnn<float> model(kClassImageSize, kClassImageSize, 3, {8, 16, 32}, 4,
                   mix_seed(seed, 0x30d));
  TrainConfig tc;
  tc.epochs = 5;
  tc.batch_size = 32;
  tc.learning_rate = 1e-3;
  tc.seed = mix_seed(seed, 0x7a);
  TrainReport tr = train(model, corpus, tc);
  std::cout << "model: held-out accuracy " << tr.final_val_acc << " after "
            << train_sw.seconds() << "s" << std::endl;
  ck.check("5pre trained model quality", tr.final_val_acc >= 0.95,
           "held-out accuracy " + accept::str(tr.final_val_acc) + " (limit 0.95)");

  auto test_set = generate_classification_set(mix_seed(seed, 0x7357), 50, 4);
  DistortionChain chain(parse_chain_stages(ConfigFile()), mix_seed(seed, 0xd1));
  std::vector<SweepCellSpec> grid = default_global_grid();

  accept::Stopwatch run_sw;
  GlobalRunResult run = run_global_experiment(model, test_set, chain, grid,
                                              mix_seed(seed, 0xa77), &std::cout);
  double run_secs = run_sw.seconds();

  // ----- criterion 5: accuracy table orderings and thresholds -----
  {
    bool ok_a = std::fabs(run.benign_physical_acc - run.clean_acc) <= 0.03 + 1e-9;
    const CellOutcome* dig8 = find_pgd(run, 8, false);
    const CellOutcome* ste8 = find_pgd(run, 8, true);
    bool ok_b = dig8 && dig8->acc_physical >= 0.5 * run.clean_acc - 1e-9;
    bool ok_c = ste8 && ste8->acc_physical <= 0.05 + 1e-9;
    bool ok_d = true;
    std::string d_detail;
    for (float e : {2.0f, 4.0f, 8.0f, 16.0f}) {
      const CellOutcome* s = find_pgd(run, e, true);
      const CellOutcome* d = find_pgd(run, e, false);
      bool cell_ok = s && d && s->acc_physical <= d->acc_physical + 1e-9;
      ok_d = ok_d && cell_ok;
      d_detail += " eps" + accept::str(e) + ":" + accept::str(s ? s->acc_physical : -1) + "<=" +
                  accept::str(d ? d->acc_physical : -1);
    }
    bool ok_rt = run_secs < 600.0;
    ck.check("5a benign physical accuracy matches clean", ok_a,
             "clean=" + accept::str(run.clean_acc) +
                 " physical=" + accept::str(run.benign_physical_acc) + " (within 3 points)");
    ck.check("5b distortions destroy vanilla digital perturbations", ok_b,
             "digital PGD eps=8/255 evaluated physically: " +
                 accept::str(dig8 ? dig8->acc_physical : -1) + " >= 0.5*clean=" +
                 accept::str(0.5 * run.clean_acc));
    ck.check("5c substituted PGD eps=8/255 forces near-zero physical accuracy", ok_c,
             "physical accuracy " + accept::str(ste8 ? ste8->acc_physical : -1) +
                 " (limit 0.05)");
    ck.check("5d substitution never hurts at any budget", ok_d, d_detail);
    ck.check("5e sweep runtime", ok_rt,
             accept::str(run_secs) + "s for the 16-cell sweep (limit 600)");
  }

  // ----- criterion 7: loss-curve properties -----
  {
    bool ok = true;
    std::string detail;
    for (float e : {2.0f, 4.0f, 8.0f, 16.0f}) {
      const CellOutcome* s = find_pgd(run, e, true);
      const CellOutcome* d = find_pgd(run, e, false);
      if (!s || !d) {
        ok = false;
        continue;
      }
      std::size_t last = s->reports[0].iters.size() - 1;
      double ste_first = mean_loss_at(*s, 0, &TracePoint::loss_ste);
      double ste_final = mean_loss_at(*s, last, &TracePoint::loss_ste);
      double dig_phys_final = mean_loss_at(*d, last, &TracePoint::loss_physical);
      bool cell_ok = ste_final > ste_first && ste_final > dig_phys_final;
      ok = ok && cell_ok;
      detail += " eps" + accept::str(e) + ":[" + accept::str(ste_first) + "->" +
                accept::str(ste_final) + " vs " + accept::str(dig_phys_final) + "]";
    }
    ck.check("7 substituted loss curves dominate", ok, detail);
  }

  // ----- criterion 8 + 9: emit, audit from files, byte-identical rerun -----
  {
    std::string dir_a = (fs::temp_directory_path() / "steadv_accept_a").string();
    std::string dir_b = (fs::temp_directory_path() / "steadv_accept_b").string();
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
    RunMeta meta;
    meta.kind = "global";
    meta.seed = seed;
    meta.dataset_seed = mix_seed(seed, 0x7357);
    meta.dataset_count = 50;
    meta.classes = 4;
    meta.model_spec = model.spec_string();
    meta.model_path = "(in-memory)";
    meta.chain_stage_list = "colorshift,gamma,palette,noise,recapture,quantize8";
    meta.chain_resolved = chain.describe();
    meta.chain_seed = mix_seed(seed, 0xd1);
    emit_global_report(run, meta, test_set, dir_a);

    VerifyResult vr = verify_run(dir_a);
    ck.check("8 constraint audit from serialized reports", vr.violations == 0,
             accept::str(vr.images) + " images x " + accept::str(vr.cells) +
                 " cells re-checked from files; violations=" + accept::str(vr.violations));

    GlobalRunResult rerun = run_global_experiment(model, test_set, chain, grid,
                                                  mix_seed(seed, 0xa77));
    emit_global_report(rerun, meta, test_set, dir_b);
    int compared = 0, differing = 0;
    for (const auto& entry : fs::recursive_directory_iterator(dir_a)) {
      if (!entry.is_regular_file()) continue;
      std::string rel = fs::relative(entry.path(), dir_a).string();
      if (rel == "summary.json") continue;  // carries wall-clock runtime
      ++compared;
      if (slurp(entry.path().string()) != slurp(dir_b + "/" + rel)) ++differing;
    }
    ck.check("9 byte-identical outputs across reruns", compared > 100 && differing == 0,
             accept::str(compared) + " files compared, " + accept::str(differing) +
                 " differ");
  }

  return ck.finish("acceptance_global");
}
