#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "steadv/harness.hpp"

namespace {

using namespace steadv;

std::string resolve_out(const std::string& flag_value, const std::string& fallback) {
  if (!flag_value.empty()) return flag_value;
  if (const char* env = std::getenv("STEADV_OUT"); env && *env) return env;
  return fallback;
}

ConfigFile load_config(const std::string& path) {
  if (path.empty()) return ConfigFile();
  return ConfigFile::parse_file(path);
}

ExperimentSettings settings_for(const ConfigFile& cfg, const std::string& kind,
                                std::uint64_t seed_override, bool seed_set) {
  ExperimentSettings s = parse_settings(cfg, kind);
  if (seed_set) {
    s.seed = seed_override;
    if (!cfg.has("train.seed")) s.train.seed = mix_seed(s.seed, 0x7a);
  }
  return s;
}

int cmd_gen_data(const std::string& kind, std::uint64_t seed, int count, int classes,
                 const std::string& out) {
  if (kind == "classification") {
    export_classification_set(out, generate_classification_set(seed, count, classes));
  } else if (kind == "scenes") {
    export_scene_set(out, generate_scene_set(seed, count, classes));
  } else {
    throw ConfigError("gen-data: kind must be classification or scenes");
  }
  std::cout << "wrote " << count << " " << kind << " samples to " << out << "\n";
  return 0;
}

int cmd_train(const ConfigFile& cfg, std::uint64_t seed_override, bool seed_set,
              const std::string& out_override) {
  ExperimentSettings s = settings_for(cfg, "global", seed_override, seed_set);
  std::vector<LabeledImage> corpus;
  Cnn<float> model;
  if (s.dataset_kind == "classification") {
    corpus = generate_classification_set(s.train_data_seed(), s.train_count, s.classes);
    model = Cnn<float>(kClassImageSize, kClassImageSize, 3, s.channels, s.classes,
                       s.model_init_seed());
  } else if (s.dataset_kind == "scenes") {
    std::vector<Scene> scenes =
        generate_scene_set(s.scene_train_seed(), s.scene_train_count, s.classes);
    corpus = scene_training_corpus(scenes, mix_seed(s.seed, 0x99));
    model = Cnn<float>(kSceneSize, kSceneSize, 3, s.channels, s.classes, s.model_init_seed());
  } else {
    throw ConfigError("train: dataset.kind must be classification or scenes");
  }
  std::cout << "training " << model.spec_string() << " on " << corpus.size() << " samples\n";
  TrainReport report = train(model, corpus, s.train);
  for (std::size_t e = 0; e < report.epochs.size(); ++e)
    std::cout << "epoch " << e << ": loss=" << report.epochs[e].train_loss
              << " train_acc=" << report.epochs[e].train_acc
              << " val_acc=" << report.epochs[e].val_acc << "\n";
  std::string path = out_override.empty() ? s.model_path : out_override;
  std::filesystem::path parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  model.save_weights(path);
  std::cout << "held-out accuracy " << report.final_val_acc << ", weights saved to " << path
            << "\n";
  return 0;
}

void print_summary(const std::vector<CellOutcome>& cells) {
  for (const CellOutcome& c : cells)
    std::cout << "  " << c.display_name << " eps=" << eps_token(c.spec.epsilon)
              << (c.spec.ste ? " [ste]" : "      ") << "  digital=" << c.acc_digital
              << " physical=" << c.acc_physical << "\n";
}

int cmd_attack_global(const ConfigFile& cfg, std::uint64_t seed_override, bool seed_set,
                      const std::string& out_override) {
  ExperimentSettings s = settings_for(cfg, "global", seed_override, seed_set);
  std::string out = resolve_out(out_override, s.out_dir);
  Cnn<float> model = Cnn<float>::load(s.model_path);
  if (model.num_classes() != s.classes)
    throw ConfigError("attack-global: model has " + std::to_string(model.num_classes()) +
                      " classes, config expects " + std::to_string(s.classes));
  if (model.input_h() != kClassImageSize || model.input_w() != kClassImageSize)
    throw ConfigError("attack-global: model input is not " + std::to_string(kClassImageSize) +
                      "x" + std::to_string(kClassImageSize) + "; train with dataset.kind = classification");
  std::vector<LabeledImage> test_set =
      generate_classification_set(s.test_data_seed(), s.test_count, s.classes);
  DistortionChain chain(s.chain_stages, s.chain_seed());
  std::cout << "chain: " << chain.describe() << "\n";
  GlobalRunResult result =
      run_global_experiment(model, test_set, chain, s.cells, s.attack_seed(), &std::cout);
  RunMeta meta;
  meta.kind = "global";
  meta.seed = s.seed;
  meta.dataset_seed = s.test_data_seed();
  meta.dataset_count = s.test_count;
  meta.classes = s.classes;
  meta.model_spec = model.spec_string();
  meta.model_path = s.model_path;
  meta.chain_stage_list = s.chain_stage_list();
  meta.chain_resolved = chain.describe();
  meta.chain_seed = s.chain_seed();
  emit_global_report(result, meta, test_set, out);
  std::cout << "benign digital=" << result.clean_acc
            << " physical=" << result.benign_physical_acc << "\n";
  print_summary(result.cells);
  std::cout << "report written to " << out << "\n";
  return 0;
}

int cmd_attack_patch(const ConfigFile& cfg, std::uint64_t seed_override, bool seed_set,
                     const std::string& out_override) {
  ExperimentSettings s = settings_for(cfg, "patch", seed_override, seed_set);
  std::string out = resolve_out(out_override, s.out_dir);
  Cnn<float> model = Cnn<float>::load(s.model_path);
  if (model.num_classes() != s.classes)
    throw ConfigError("attack-patch: model has " + std::to_string(model.num_classes()) +
                      " classes, config expects " + std::to_string(s.classes));
  if (model.input_h() != kSceneSize || model.input_w() != kSceneSize)
    throw ConfigError("attack-patch: model input is not " + std::to_string(kSceneSize) + "x" +
                      std::to_string(kSceneSize) + "; train with dataset.kind = scenes");
  std::vector<Scene> scenes = generate_scene_set(s.scene_eval_seed(), s.scene_count, s.classes);
  DistortionChain chain(s.chain_stages, s.chain_seed());
  std::cout << "chain: " << chain.describe() << "\n";
  PatchRunResult result =
      run_patch_experiment(model, scenes, chain, s.cells, s.attack_seed(), &std::cout);
  RunMeta meta;
  meta.kind = "patch";
  meta.seed = s.seed;
  meta.dataset_seed = s.scene_eval_seed();
  meta.dataset_count = s.scene_count;
  meta.classes = s.classes;
  meta.model_spec = model.spec_string();
  meta.model_path = s.model_path;
  meta.chain_stage_list = s.chain_stage_list();
  meta.chain_resolved = chain.describe();
  meta.chain_seed = s.chain_seed();
  emit_patch_report(result, meta, scenes, chain, out);
  std::cout << "benign=" << result.benign_acc << " green=" << result.green_acc << "\n";
  print_summary(result.cells);
  std::cout << "report written to " << out << "\n";
  return 0;
}

int cmd_report(const std::string& run_dir) {
  VerifyResult vr = verify_run(run_dir);
  for (const std::string& m : vr.messages) std::cout << "violation: " << m << "\n";
  std::cout << "verified " << vr.cells << " cells, " << vr.images << " images: "
            << (vr.violations == 0 ? "all constraints hold" :
                                     std::to_string(vr.violations) + " violations")
            << "\n";
  return vr.violations == 0 ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"straight-through adversarial attacks against simulated imaging pipelines"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "generate a procedural corpus and export PPM + manifest");
  std::string gen_kind = "classification", gen_out = "data";
  std::uint64_t gen_seed = 7;
  int gen_count = 100, gen_classes = 4;
  gen->add_option("--kind", gen_kind, "classification | scenes");
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--count", gen_count, "number of samples");
  gen->add_option("--classes", gen_classes, "number of classes");
  gen->add_option("--out", gen_out, "output directory");

  std::string cfg_path, out_override, run_dir;
  std::uint64_t seed_override = 0;

  auto* tr = app.add_subcommand("train", "train the classifier and save weights");
  tr->add_option("--config", cfg_path, "config file");
  auto* tr_seed = tr->add_option("--seed", seed_override, "seed override");
  tr->add_option("--out", out_override, "weights output path override");

  auto* ag = app.add_subcommand("attack-global", "run the global-perturbation sweep");
  ag->add_option("--config", cfg_path, "config file");
  auto* ag_seed = ag->add_option("--seed", seed_override, "seed override");
  ag->add_option("--out", out_override, "output directory override");

  auto* ap = app.add_subcommand("attack-patch", "run the rendered-patch sweep");
  ap->add_option("--config", cfg_path, "config file");
  auto* ap_seed = ap->add_option("--seed", seed_override, "seed override");
  ap->add_option("--out", out_override, "output directory override");

  auto* rp = app.add_subcommand("report", "re-verify a run directory from its files");
  rp->add_option("--run", run_dir, "run directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(gen_kind, gen_seed, gen_count, gen_classes,
                                           resolve_out(gen_out == "data" ? "" : gen_out, gen_out));
    ConfigFile cfg = load_config(cfg_path);
    if (tr->parsed()) return cmd_train(cfg, seed_override, tr_seed->count() > 0, out_override);
    if (ag->parsed())
      return cmd_attack_global(cfg, seed_override, ag_seed->count() > 0, out_override);
    if (ap->parsed())
      return cmd_attack_patch(cfg, seed_override, ap_seed->count() > 0, out_override);
    if (rp->parsed()) return cmd_report(run_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
