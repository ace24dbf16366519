#include "cmssl/cli.hpp"

#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "cmssl/config.hpp"
#include "cmssl/eval.hpp"

namespace cmssl {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
}

struct CommonFlags {
  std::string config, schedule, method, preset, filter, out, name;
  std::optional<std::uint64_t> seed;
  std::optional<int> ood_count, labels_per_class;
  std::vector<std::string> ablate, overrides;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "Experiment config (JSON)");
  cmd->add_option("--schedule", f.schedule, "Default schedule")->check(CLI::IsMember({"full-scale", "desk"}));
  cmd->add_option("--method", f.method, "Named variant (full, supervised, uda, uda-ss, confidence, ...)");
  cmd->add_option("--dataset-preset", f.preset, "Dataset preset");
  cmd->add_option("--seed", f.seed, "Training seed");
  cmd->add_option("--ood-count", f.ood_count, "OOD images in the unlabeled pool");
  cmd->add_option("--labels-per-class", f.labels_per_class, "Labeled images per ID class");
  cmd->add_option("--ablate", f.ablate, "Ablations")->check(CLI::IsMember({"no-ss", "no-warmup", "no-cmu"}));
  cmd->add_option("--filter", f.filter, "Unlabeled filter")->check(CLI::IsMember({"matching", "confidence", "none"}));
  cmd->add_option("--out", f.out, "Output directory for runs");
  cmd->add_option("--name", f.name, "Run name (subdirectory of --out)");
  cmd->add_option("--set", f.overrides, "Override a config key: path.to.key=value");
}

ExperimentConfig resolve_config(const CommonFlags& f) {
  json file = json::object();
  if (!f.config.empty()) file = read_json_file(f.config);
  auto pick = [&](const std::string& flag, const char* key, const std::string& fallback) {
    if (!flag.empty()) return flag;
    if (file.contains(key) && file[key].is_string()) return file[key].get<std::string>();
    return fallback;
  };
  const std::string schedule = pick(f.schedule, "schedule", "full-scale");
  const std::string method = pick(f.method, "method", "full");
  std::string preset = f.preset;
  if (preset.empty() && file.contains("dataset") && file["dataset"].contains("name"))
    preset = file["dataset"]["name"].get<std::string>();
  if (preset.empty()) preset = "mnist-id5";

  json cli = json::object();
  cli["schedule"] = schedule;
  cli["method"] = method;
  if (!f.preset.empty()) cli["dataset"]["name"] = f.preset;
  if (f.seed) cli["train"]["seed"] = *f.seed;
  if (f.ood_count) cli["dataset"]["n_ood"] = *f.ood_count;
  if (f.labels_per_class) cli["dataset"]["labels_per_class"] = *f.labels_per_class;
  for (const auto& a : f.ablate) {
    if (a == "no-ss") cli["train"]["enable_rotation"] = false;
    if (a == "no-warmup") cli["train"]["enable_warmup"] = false;
    if (a == "no-cmu") cli["train"]["enable_cm_u"] = false;
  }
  if (!f.filter.empty()) cli["train"]["filter_mode"] = f.filter;
  if (!f.out.empty()) cli["out_dir"] = f.out;
  if (!f.name.empty()) cli["run_name"] = f.name;
  std::vector<json> layers{file, cli};
  for (const auto& o : f.overrides) layers.push_back(parse_override(o));
  ExperimentConfig cfg = merge_config(to_json(default_experiment(schedule, method, preset)), layers);
  cfg.train.validate();
  return cfg;
}

OpenSetDataset load_dataset(const ExperimentConfig& cfg) {
  if (!cfg.manifest_dir.empty()) return read_manifests(cfg.manifest_dir);
  return build_openset_dataset(cfg.dataset, data_root());
}

void print_summary(const OpenSetDataset& ds, std::ostream& out) {
  std::size_t ood = 0;
  for (const auto& t : ds.unlabeled_tags.read_all()) ood += t.provenance == Provenance::kOod;
  out << "classes " << ds.num_classes << "\n"
      << "labeled " << ds.labeled.size() << "\n"
      << "unlabeled " << ds.unlabeled.size() << " (" << ds.unlabeled.size() - ood << " id, " << ood
      << " ood)\n"
      << "val " << ds.val.size() << "\n"
      << "test " << ds.test.size() << "\n"
      << "ood_val " << ds.ood_val.size() << "\n"
      << "ood_test " << ds.ood_test.size() << "\n";
}

int cmd_prepare(const CommonFlags& f, const std::string& dest) {
  ExperimentConfig cfg = resolve_config(f);
  const OpenSetDataset ds = build_openset_dataset(cfg.dataset, data_root());
  const fs::path dir = dest.empty() ? data_root() / "prepared" / cfg.dataset.name : fs::path(dest);
  if (fs::exists(dir)) fs::remove_all(dir);
  write_manifests(ds, dir);
  print_summary(ds, std::cout);
  std::cout << "manifests " << dir.string() << "\n";
  return 0;
}

int cmd_train(const CommonFlags& f, const std::string& resume, std::optional<std::uint64_t> until,
              bool force) {
  const ExperimentConfig cfg = resolve_config(f);
  const fs::path run_dir = fs::path(cfg.out_dir) / cfg.run_name;
  if (resume.empty() && fs::exists(run_dir / "metrics.jsonl")) {
    if (!force)
      throw ConfigError("run directory " + run_dir.string() +
                        " already holds a run; pass --resume latest, --force, or another --name");
    fs::remove_all(run_dir);
  }
  fs::create_directories(run_dir);
  {
    std::ofstream out(run_dir / "config.json");
    out << to_json(cfg).dump(2) << '\n';
  }
  const OpenSetDataset ds = load_dataset(cfg);
  Trainer trainer(cfg.train, ds, run_dir);
  if (!resume.empty()) {
    fs::path ckpt = resume;
    if (resume == "latest") {
      const auto all = list_checkpoints(run_dir);
      if (all.empty()) throw InputError("--resume: no checkpoint under " + (run_dir / "checkpoints").string());
      ckpt = all.back();
    }
    if (!fs::exists(ckpt / "meta.json")) throw InputError("--resume: no checkpoint at " + ckpt.string());
    trainer.resume(ckpt);
    std::cerr << "resumed from " << ckpt.string() << " at iteration " << trainer.iteration() << "\n";
  }
  trainer.run(until);
  if (trainer.iteration() < cfg.train.total_iters()) {
    std::cout << "stopped at iteration " << trainer.iteration() << "\n";
    return 0;
  }
  const MetricReport report = evaluate_run(run_dir, cfg.train, ds, cfg.train.eval_avg_last);
  std::ofstream(run_dir / "report.json") << to_json(report).dump(2) << '\n';
  std::cout << to_json(report).dump(2) << '\n';
  return 0;
}

int cmd_eval(const std::string& run, int last, bool embeddings) {
  const fs::path run_dir = run;
  if (!fs::exists(run_dir / "config.json")) throw InputError("no archived config in " + run_dir.string());
  const ExperimentConfig cfg = experiment_from_json(read_json_file((run_dir / "config.json").string()));
  if (list_checkpoints(run_dir).empty())
    throw InputError("no checkpoints in " + (run_dir / "checkpoints").string());
  const OpenSetDataset ds = load_dataset(cfg);
  const MetricReport report = evaluate_run(run_dir, cfg.train, ds, last);
  std::ofstream(run_dir / "eval_report.json") << to_json(report).dump(2) << '\n';
  if (embeddings) {
    const auto model = load_checkpoint_model(list_checkpoints(run_dir).back(), cfg.train);
    std::vector<Image> images = ds.test;
    images.insert(images.end(), ds.ood_test.begin(), ds.ood_test.end());
    std::vector<std::string> ids, prov;
    for (std::size_t i = 0; i < ds.test.size(); ++i) {
      ids.push_back("test/" + std::to_string(i));
      prov.push_back("id");
    }
    for (std::size_t i = 0; i < ds.ood_test.size(); ++i) {
      ids.push_back("ood_test/" + std::to_string(i));
      prov.push_back("ood");
    }
    auto rows = export_embeddings(model, images, ids, prov, {});
    for (std::size_t i = 0; i < ds.test.size(); ++i) rows[i].label = ds.test_labels[i];
    std::ofstream out(run_dir / "embeddings.tsv");
    write_embeddings(out, rows);
  }
  std::cout << to_json(report).dump(2) << '\n';
  return 0;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Open-set semi-supervised training with rotation pretext and matching-score filtering"};
  app.require_subcommand(1);

  CommonFlags prep_flags, train_flags, init_flags;
  std::string prep_dest;
  auto* prep = app.add_subcommand("prepare", "Build split manifests for a dataset preset");
  add_common(prep, prep_flags);
  prep->add_option("--manifest-out", prep_dest, "Manifest directory (default $CMSSL_DATA_ROOT/prepared/<preset>)");

  std::string resume;
  std::optional<std::uint64_t> until;
  bool force = false;
  auto* train = app.add_subcommand("train", "Run both training stages");
  add_common(train, train_flags);
  train->add_option("--resume", resume, "Checkpoint directory, or 'latest'");
  train->add_option("--until", until, "Stop once this many iterations are done");
  train->add_flag("--force", force, "Replace an existing run directory");

  std::string run;
  int last = 20;
  bool no_embeddings = false;
  auto* eval = app.add_subcommand("eval", "Evaluate a finished run");
  eval->add_option("--run", run, "Run directory")->required();
  eval->add_option("--last", last, "Checkpoints to average")->check(CLI::PositiveNumber);
  eval->add_flag("--no-embeddings", no_embeddings, "Skip the embedding export");

  auto* init = app.add_subcommand("init-config", "Print the resolved default config");
  add_common(init, init_flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  try {
    if (*prep) return cmd_prepare(prep_flags, prep_dest);
    if (*train) return cmd_train(train_flags, resume, until, force);
    if (*eval) return cmd_eval(run, last, !no_embeddings);
    if (*init) {
      std::cout << to_json(resolve_config(init_flags)).dump(2) << '\n';
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace cmssl
