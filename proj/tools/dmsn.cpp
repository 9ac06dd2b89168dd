// Copyright 2026 The DMSN Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "dmsn/checkpoint.hpp"
#include "dmsn/errors.hpp"
#include "dmsn/eval.hpp"
#include "dmsn/synth.hpp"
#include "dmsn/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<dmsn::DomainSpec> default_specs(int num_domains, int images, int size) {
  // fixed appearance recipes, cycled if more domains are asked for
  struct Recipe {
    std::vector<std::array<double, 3>> palette;
    double brightness, noise, hue;
  };
  const std::vector<Recipe> recipes = {
      {{{0.16, 0.32, 0.12}, {0.26, 0.42, 0.18}}, 0.00, 0.010, 0.0},
      {{{0.30, 0.30, 0.42}, {0.10, 0.10, 0.22}}, -0.12, 0.030, 140.0},
      {{{0.46, 0.38, 0.26}, {0.60, 0.52, 0.38}}, 0.15, 0.020, 40.0},
      {{{0.12, 0.20, 0.34}, {0.20, 0.32, 0.48}}, -0.05, 0.015, 250.0},
      {{{0.40, 0.18, 0.18}, {0.55, 0.30, 0.26}}, 0.08, 0.025, 320.0},
  };
  std::vector<dmsn::DomainSpec> specs;
  for (int d = 0; d < num_domains; ++d) {
    const Recipe& r = recipes[static_cast<size_t>(d) % recipes.size()];
    dmsn::DomainSpec s;
    s.domain_id = d;
    s.appearance = {r.palette, r.brightness, r.noise, r.hue};
    s.num_images = images;
    s.image_h = s.image_w = size;
    s.classes = {"circle", "square", "triangle"};
    specs.push_back(s);
  }
  return specs;
}

int run_gen(const std::string& out, int domains, int images, int test_images, int size,
            uint64_t seed) {
  auto train_specs = default_specs(domains, images, size);
  auto test_specs = default_specs(domains, test_images, size);
  dmsn::save_dataset(dmsn::generate_dataset(train_specs, seed), train_specs, out + "/train");
  dmsn::save_dataset(dmsn::generate_dataset(test_specs, seed + 1), test_specs, out + "/test");
  std::cout << "wrote " << out << "/train and " << out << "/test\n";
  return 0;
}

int run_train(const std::string& config_path, const std::string& out,
              const std::string& resume) {
  dmsn::TrainConfig cfg = dmsn::TrainConfig::from_file(config_path);
  dmsn::LoadedDataset data = dmsn::load_dataset(cfg.data_root + "/" + cfg.train_split);
  dmsn::Trainer trainer(cfg, std::move(data));
  if (!resume.empty()) trainer.resume_from(resume);
  dmsn::TrainSummary s = trainer.run(out);
  std::cout << "steps=" << s.total_steps << " faulted=" << s.faulted_steps
            << " status=" << (s.failed ? "failed" : "ok") << "\n"
            << "checkpoint: " << s.final_checkpoint << "\n";
  return s.failed ? 1 : 0;
}

int run_eval(const std::string& ckpt, const std::string& data_root, const std::string& split,
             const std::string& out, int domain, bool score_average, bool include_empty) {
  dmsn::DetectorModel model = dmsn::DetectorModel::load_checkpoint(ckpt);
  dmsn::LoadedDataset data = dmsn::load_dataset(data_root + "/" + split);
  std::vector<dmsn::ImageSample> samples;
  for (const auto& [id, v] : data.data) {
    if (domain >= 0 && id != domain) continue;
    samples.insert(samples.end(), v.begin(), v.end());
  }
  if (samples.empty()) throw dmsn::ConfigError("no samples selected for evaluation");
  dmsn::EvalConfig ecfg;
  ecfg.score_average_fusion = score_average;
  ecfg.include_empty_classes = include_empty;
  dmsn::EvalReport rep = dmsn::evaluate(model, samples, data.classes, ecfg);
  json j = rep.to_json();
  j["checkpoint"] = ckpt;
  j["split"] = split;
  j["domain"] = domain;
  std::ofstream f(out);
  if (!f) throw dmsn::IoError("cannot write " + out);
  f << j.dump(2) << "\n";
  std::cout << "map=" << rep.map << " images=" << rep.num_images << " -> " << out << "\n";
  return 0;
}

// minimal line-plot rendering, one PNG per figure
void plot_series(const std::string& path, const std::string& title,
                 const std::vector<std::pair<std::string, std::vector<double>>>& series) {
  const int W = 720, H = 420, ml = 60, mr = 20, mt = 40, mb = 40;
  cv::Mat img(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
  double lo = 1e300, hi = -1e300;
  size_t n = 0;
  for (const auto& [name, v] : series) {
    for (double x : v) {
      if (std::isfinite(x)) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
      }
    }
    n = std::max(n, v.size());
  }
  if (n < 2 || hi < lo) return;
  if (hi == lo) hi = lo + 1;
  const std::vector<cv::Scalar> colors = {{180, 60, 30}, {30, 120, 40}, {20, 50, 200},
                                          {160, 30, 160}, {30, 160, 200}};
  auto px = [&](size_t i) { return ml + static_cast<int>((W - ml - mr) * double(i) / (n - 1)); };
  auto py = [&](double v) {
    return mt + static_cast<int>((H - mt - mb) * (1.0 - (v - lo) / (hi - lo)));
  };
  cv::rectangle(img, {ml, mt}, {W - mr, H - mb}, cv::Scalar(120, 120, 120));
  cv::putText(img, title, {ml, 25}, cv::FONT_HERSHEY_SIMPLEX, 0.6, cv::Scalar(0, 0, 0), 1);
  std::ostringstream lof, hif;
  lof.precision(4);
  hif.precision(4);
  lof << lo;
  hif << hi;
  cv::putText(img, hif.str(), {4, mt + 10}, cv::FONT_HERSHEY_SIMPLEX, 0.4, cv::Scalar(0, 0, 0), 1);
  cv::putText(img, lof.str(), {4, H - mb}, cv::FONT_HERSHEY_SIMPLEX, 0.4, cv::Scalar(0, 0, 0), 1);
  for (size_t s = 0; s < series.size(); ++s) {
    const auto& v = series[s].second;
    const cv::Scalar c = colors[s % colors.size()];
    for (size_t i = 1; i < v.size(); ++i) {
      if (!std::isfinite(v[i - 1]) || !std::isfinite(v[i])) continue;
      cv::line(img, {px(i - 1), py(v[i - 1])}, {px(i), py(v[i])}, c, 1, cv::LINE_AA);
    }
    cv::putText(img, series[s].first, {ml + 8 + static_cast<int>(s) * 130, H - 12},
                cv::FONT_HERSHEY_SIMPLEX, 0.45, c, 1);
  }
  cv::imwrite(path, img);
}

std::map<std::string, std::vector<double>> read_csv(const std::string& path) {
  std::ifstream f(path);
  std::map<std::string, std::vector<double>> cols;
  std::string line;
  if (!f || !std::getline(f, line)) return cols;
  std::vector<std::string> headers;
  {
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) headers.push_back(tok);
  }
  while (std::getline(f, line)) {
    std::stringstream ss(line);
    std::string tok;
    size_t i = 0;
    while (std::getline(ss, tok, ',') && i < headers.size())
      cols[headers[i++]].push_back(std::stod(tok));
  }
  return cols;
}

int run_report(const std::string& runs_dir) {
  std::ofstream md(runs_dir + "/report.md");
  md << "# Training runs\n\n";
  std::vector<fs::path> run_dirs;
  for (const auto& e : fs::directory_iterator(runs_dir)) {
    if (e.is_directory() && fs::exists(e.path() / "summary.json")) run_dirs.push_back(e.path());
  }
  std::sort(run_dirs.begin(), run_dirs.end());
  if (run_dirs.empty() && fs::exists(fs::path(runs_dir) / "summary.json"))
    run_dirs.push_back(runs_dir);
  for (const auto& dir : run_dirs) {
    json s;
    std::ifstream(dir / "summary.json") >> s;
    md << "## " << dir.filename().string() << "\n\n"
       << "- mode: " << s.value("mode", "?") << "\n"
       << "- status: " << s.value("status", "?") << "\n"
       << "- steps: " << s.value("total_steps", 0)
       << " (faulted " << s.value("faulted_steps", 0) << ")\n";
    if (s.contains("final_beta")) md << "- final beta: " << s["final_beta"].dump() << "\n";
    md << "- phase-1 probe peak/final: " << s.value("phase1_probe_peak", 0.0) << " / "
       << s.value("phase1_probe_final", 0.0) << "\n";

    auto cols = read_csv((dir / "training_log.csv").string());
    if (!cols.empty()) {
      const std::string base = dir.filename().string();
      plot_series((fs::path(runs_dir) / (base + "_loss.png")).string(), "loss decomposition",
                  {{"total", cols["total"]},
                   {"l_det", cols["l_det"]},
                   {"l_low", cols["l_low"]},
                   {"l_high", cols["l_high"]},
                   {"l_con", cols["l_con"]}});
      std::vector<std::pair<std::string, std::vector<double>>> betas;
      for (int i = 0; i < 8; ++i) {
        auto it = cols.find("beta" + std::to_string(i));
        if (it == cols.end()) break;
        betas.push_back({"beta" + std::to_string(i), it->second});
      }
      if (!betas.empty())
        plot_series((fs::path(runs_dir) / (base + "_beta.png")).string(), "source weights", betas);
      // probe accuracy rows are sparse; drop the -1 sentinels
      std::vector<double> probe;
      for (double v : cols["probe_acc"]) {
        if (v >= 0) probe.push_back(v);
      }
      if (probe.size() > 1)
        plot_series((fs::path(runs_dir) / (base + "_probe.png")).string(),
                    "domain probe accuracy", {{"probe_acc", probe}});
      md << "- plots: " << base << "_loss.png";
      if (!betas.empty()) md << ", " << base << "_beta.png";
      if (probe.size() > 1) md << ", " << base << "_probe.png";
      md << "\n";
    }
    if (fs::exists(dir / "report.json")) {
      json r;
      std::ifstream(dir / "report.json") >> r;
      md << "- eval map: " << r.value("map", 0.0) << "\n";
    }
    md << "\n";
  }
  std::cout << "wrote " << runs_dir << "/report.md (" << run_dirs.size() << " runs)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"divide-and-merge spindle network toolkit"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen", "generate a synthetic multi-domain dataset");
  std::string gen_out;
  int gen_domains = 3, gen_images = 60, gen_test_images = 30, gen_size = 64;
  uint64_t gen_seed = 7;
  gen->add_option("--out", gen_out, "dataset root")->required();
  gen->add_option("--domains", gen_domains);
  gen->add_option("--images", gen_images, "train images per domain");
  gen->add_option("--test-images", gen_test_images);
  gen->add_option("--size", gen_size);
  gen->add_option("--seed", gen_seed);

  auto* train = app.add_subcommand("train", "run a training job");
  std::string tr_config, tr_out, tr_resume;
  train->add_option("--config", tr_config)->required();
  train->add_option("--out", tr_out)->required();
  train->add_option("--resume", tr_resume, "epoch checkpoint to resume from");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  std::string ev_ckpt, ev_data, ev_split = "test", ev_out = "report.json";
  int ev_domain = -1;
  bool ev_avg = false, ev_empty = false;
  eval->add_option("--ckpt", ev_ckpt)->required();
  eval->add_option("--data", ev_data)->required();
  eval->add_option("--split", ev_split);
  eval->add_option("--out", ev_out);
  eval->add_option("--domain", ev_domain, "restrict to one domain id (-1 = all)");
  eval->add_flag("--score-average", ev_avg, "average scores across fused clusters");
  eval->add_flag("--include-empty-classes", ev_empty);

  auto* report = app.add_subcommand("report", "summarize finished runs");
  std::string rp_runs;
  report->add_option("--runs", rp_runs)->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (gen->parsed())
      return run_gen(gen_out, gen_domains, gen_images, gen_test_images, gen_size, gen_seed);
    if (train->parsed()) return run_train(tr_config, tr_out, tr_resume);
    if (eval->parsed())
      return run_eval(ev_ckpt, ev_data, ev_split, ev_out, ev_domain, ev_avg, ev_empty);
    if (report->parsed()) return run_report(rp_runs);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
