// Criterion 5: desk-scale trends over three seeds on the MNIST-ID-5 preset.
//
// Finished runs are cached under the work directory and reused when their
// archived config matches the current one exactly.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>

#include "acceptance.hpp"
#include "cmssl/config.hpp"

namespace cmssl::acceptance {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct RunResult {
  double accuracy = 0, auroc = 0;
  std::optional<double> first_ood_kept, last_ood_kept;
};

json result_json(const RunResult& r) {
  json j{{"accuracy", r.accuracy}, {"auroc", r.auroc}};
  j["first_ood_kept"] = r.first_ood_kept ? json(*r.first_ood_kept) : json(nullptr);
  j["last_ood_kept"] = r.last_ood_kept ? json(*r.last_ood_kept) : json(nullptr);
  return j;
}

RunResult result_from(const json& j) {
  RunResult r;
  r.accuracy = j.at("accuracy");
  r.auroc = j.at("auroc");
  if (!j.at("first_ood_kept").is_null()) r.first_ood_kept = j.at("first_ood_kept").get<double>();
  if (!j.at("last_ood_kept").is_null()) r.last_ood_kept = j.at("last_ood_kept").get<double>();
  return r;
}

RunResult run_or_load(const ExperimentConfig& cfg, const OpenSetDataset& data, const fs::path& dir) {
  const std::string cfg_text = to_json(cfg).dump(2);
  if (fs::exists(dir / "result.json") && fs::exists(dir / "config.json")) {
    std::ifstream in(dir / "config.json");
    const std::string archived((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (archived == cfg_text + "\n") {
      std::ifstream r(dir / "result.json");
      return result_from(json::parse(r));
    }
  }
  if (fs::exists(dir)) fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "config.json") << cfg_text << '\n';

  Timer timer;
  Trainer trainer(cfg.train, data, dir);
  trainer.run();
  const MetricReport report = evaluate_run(dir, cfg.train, data, cfg.train.eval_avg_last);
  RunResult r;
  r.accuracy = report.accuracy_mean;
  r.auroc = report.auroc_mean;
  if (!report.cleaning.empty()) {
    r.first_ood_kept = report.cleaning.front().ood_kept_fraction;
    r.last_ood_kept = report.cleaning.back().ood_kept_fraction;
  }
  std::ofstream(dir / "report.json") << to_json(report).dump(2) << '\n';
  std::ofstream(dir / "result.json") << result_json(r).dump(2) << '\n';
  std::printf("  trained %s in %.0f s\n", dir.filename().c_str(), timer.seconds());
  std::fflush(stdout);
  return r;
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0 : s / static_cast<double>(v.size());
}

}  // namespace

bool run_trend(const fs::path& work_dir) {
  const std::vector<std::pair<std::string, std::string>> methods{
      {"M-8", "full"}, {"M-1", "supervised"}, {"M-3", "uda"}, {"M-4", "uda-ss"}, {"M-5", "confidence"}};
  const std::vector<std::uint64_t> seeds{0, 1, 2};

  const ExperimentConfig base = default_experiment("desk", "full", "mnist-id5");
  const OpenSetDataset data = build_openset_dataset(base.dataset, data_root());

  Timer total;
  std::map<std::string, std::vector<RunResult>> results;
  for (const auto& [tag, method] : methods) {
    for (const auto seed : seeds) {
      ExperimentConfig cfg = default_experiment("desk", method, "mnist-id5");
      cfg.train.seed = seed;
      cfg.run_name = method + "-s" + std::to_string(seed);
      cfg.out_dir = work_dir.string();
      results[tag].push_back(run_or_load(cfg, data, work_dir / cfg.run_name));
    }
  }

  auto accs = [&](const std::string& tag) {
    std::vector<double> v;
    for (const auto& r : results[tag]) v.push_back(r.accuracy);
    return v;
  };
  auto fmt = [](const std::vector<double>& v) {
    std::string s;
    char buf[32];
    for (double x : v) {
      std::snprintf(buf, sizeof buf, "%s%.4f", s.empty() ? "" : " ", x);
      s += buf;
    }
    return s;
  };
  for (const auto& [tag, method] : methods)
    std::printf("  %s %-10s acc %s (mean %.4f)\n", tag.c_str(), method.c_str(), fmt(accs(tag)).c_str(),
                mean(accs(tag)));

  bool ok = true;
  const double m1 = mean(accs("M-1")), m3 = mean(accs("M-3")), m4 = mean(accs("M-4")),
               m5 = mean(accs("M-5")), m8 = mean(accs("M-8"));
  char detail[256];

  std::snprintf(detail, sizeof detail, "full %.4f vs supervised %.4f, gap %.2f points (need >= 5)", m8, m1,
                100 * (m8 - m1));
  ok &= report("5a", m8 - m1 >= 0.05 - 1e-12, detail);

  std::snprintf(detail, sizeof detail, "uda+ss %.4f vs uda %.4f, gain %.2f points (need >= 1)", m4, m3,
                100 * (m4 - m3));
  ok &= report("5b", m4 - m3 >= 0.01 - 1e-12, detail);

  std::snprintf(detail, sizeof detail, "matching %.4f vs confidence %.4f", m8, m5);
  ok &= report("5c", m8 > m5, detail);

  std::vector<double> aurocs;
  for (const auto& r : results["M-8"]) aurocs.push_back(r.auroc);
  std::snprintf(detail, sizeof detail, "full-method AUROC %s (mean %.4f, need >= 0.80)", fmt(aurocs).c_str(),
                mean(aurocs));
  ok &= report("5d", mean(aurocs) >= 0.80, detail);

  std::vector<double> first, last;
  bool have = true;
  for (const auto& r : results["M-8"]) {
    if (!r.first_ood_kept || !r.last_ood_kept) {
      have = false;
      break;
    }
    first.push_back(*r.first_ood_kept);
    last.push_back(*r.last_ood_kept);
  }
  std::snprintf(detail, sizeof detail, "OOD kept fraction first cycle %s -> last cycle %s",
                fmt(first).c_str(), fmt(last).c_str());
  ok &= report("5e", have && mean(last) < mean(first), detail);

  std::printf("  trend suite wall time %.0f s\n", total.seconds());
  return ok;
}

}  // namespace cmssl::acceptance
