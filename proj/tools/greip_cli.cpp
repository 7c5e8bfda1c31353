#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "greip/greip.hpp"

namespace fs = std::filesystem;
using namespace greip;

namespace {

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    std::size_t pos = 0;
    int v = 0;
    try {
      v = std::stoi(tok, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != tok.size())
      throw std::runtime_error("bad integer list element: '" + tok + "'");
    out.push_back(v);
  }
  if (out.empty()) throw std::runtime_error("empty integer list: '" + s + "'");
  return out;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  std::vector<std::uint64_t> out;
  for (int v : parse_int_list(s)) {
    if (v < 0) throw std::runtime_error("seeds must be non-negative");
    out.push_back(static_cast<std::uint64_t>(v));
  }
  return out;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
  return f;
}

void print_report_line(const char* label, const HrReport& r) {
  std::printf("%-9s mae=%.4f  rmse=%.4f  sd=%.4f  r=%.4f  n=%d\n", label, r.mae,
              r.rmse, r.sd, r.pearson_r, r.n);
}

int run_synth(const std::string& preset, int n, int rois, int frames, double hr_lo,
              double hr_hi, std::uint64_t seed, const std::string& out_dir) {
  if (preset.size() != 1 || preset[0] < 'A' || preset[0] > 'D')
    throw std::runtime_error("synth: preset must be one of A, B, C, D");
  const int domain_id = preset[0] - 'A';
  const DomainProfile profile = domain_preset(preset[0]);
  fs::create_directories(out_dir);
  std::ofstream manifest = open_out(fs::path(out_dir) / "manifest.csv");
  manifest << "path,domain_id,hr_bpm\n";
  for (int i = 0; i < n; ++i) {
    Sample s =
        generate_domain_sample(profile, seed, domain_id, i, hr_lo, hr_hi, rois, frames);
    char name[32];
    std::snprintf(name, sizeof(name), "sample_%05d.stm1", i);
    write_stm1((fs::path(out_dir) / name).string(), s);
    manifest << name << ',' << s.domain_id << ',' << detail::g17(s.hr_bpm) << '\n';
  }
  std::printf("synth: wrote %d windows (preset %s) and manifest.csv to %s\n", n,
              preset.c_str(), out_dir.c_str());
  return 0;
}

int run_augment(const std::string& in_path, const AugmentationPolicy& policy,
                std::uint64_t seed, const std::string& out_dir) {
  std::vector<fs::path> files;
  const fs::path in(in_path);
  if (fs::is_directory(in)) {
    for (const auto& entry : fs::directory_iterator(in))
      if (entry.is_regular_file() && entry.path().extension() == ".stm1")
        files.push_back(entry.path());
    std::sort(files.begin(), files.end());
  } else if (fs::is_regular_file(in)) {
    files.push_back(in);
  }
  if (files.empty())
    throw std::runtime_error("augment: no .stm1 inputs at " + in_path);

  fs::create_directories(out_dir);
  std::ofstream tags = open_out(fs::path(out_dir) / "tags.csv");
  tags << "sample,branch,params\n";
  for (std::size_t i = 0; i < files.size(); ++i) {
    Sample s = read_stm1(files[i].string());
    Rng rng(derive_seed(seed, "augment", i));
    std::string params;
    Sample a = apply_policy(s, policy, rng, &params);
    const std::string name = files[i].stem().string() + "_aug.stm1";
    write_stm1((fs::path(out_dir) / name).string(), a);
    tags << name << ',' << a.augment_tag << ',' << params << '\n';
  }
  std::printf("augment: wrote %zu augmented windows and tags.csv to %s\n",
              files.size(), out_dir.c_str());
  return 0;
}

int run_train(TrainConfig cfg, const RunManifest& manifest) {
  TrainResult res = train(cfg, manifest);
  std::printf("train: %lld iterations, final loss %.6f\n", res.iterations_run,
              res.final_loss);
  std::printf("train: checkpoint %s\n", res.checkpoint_path.c_str());
  std::printf("train: loss log   %s\n", res.loss_log_path.c_str());
  return 0;
}

int run_eval(const TrainConfig& cfg, const std::string& checkpoint,
             const RunManifest& manifest, int batch, const std::string& out_dir) {
  GreipModel model(cfg.model, 0);
  model.load(checkpoint);
  SamplePool pool = build_target_pool(cfg, manifest);
  const bool noise_branch = cfg.use_implicit || cfg.use_fusion;
  EvalReport rep = evaluate(model, pool, batch > 0 ? batch : cfg.batch_size,
                            noise_branch, cfg.use_fusion);

  fs::create_directories(out_dir);
  const fs::path csv_path = fs::path(out_dir) / "eval.csv";
  std::ofstream csv = open_out(csv_path);
  csv << "metric,head,spectral\n";
  csv << "mae," << detail::g17(rep.head.mae) << ',' << detail::g17(rep.spectral.mae)
      << '\n';
  csv << "rmse," << detail::g17(rep.head.rmse) << ',' << detail::g17(rep.spectral.rmse)
      << '\n';
  csv << "sd," << detail::g17(rep.head.sd) << ',' << detail::g17(rep.spectral.sd)
      << '\n';
  csv << "pearson_r," << detail::g17(rep.head.pearson_r) << ','
      << detail::g17(rep.spectral.pearson_r) << '\n';
  csv << "n," << rep.head.n << ',' << rep.spectral.n << '\n';

  std::printf("eval: domain %d, %d windows\n", manifest.target_domain,
              manifest.eval_count);
  print_report_line("head", rep.head);
  print_report_line("spectral", rep.spectral);
  std::printf("eval: report %s\n", csv_path.string().c_str());
  return 0;
}

int run_msdg_cmd(const TrainConfig& base, const RunManifest& manifest,
                 const std::vector<std::uint64_t>& seeds) {
  std::vector<MsdgRow> rows = run_msdg(base, manifest, seeds);
  fs::create_directories(manifest.out_dir);
  const fs::path csv_path = fs::path(manifest.out_dir) / "comparison.csv";
  write_msdg_csv(csv_path.string(), rows);
  std::printf("msdg: target domain %d, %zu seeds\n", manifest.target_domain,
              seeds.size());
  for (const AblationArm& arm : ablation_arms())
    std::printf("%-9s mean head mae=%.4f\n", arm.name.c_str(),
                mean_head_mae(rows, arm.name));
  std::printf("msdg: comparison %s\n", csv_path.string().c_str());
  return 0;
}

int run_gradcheck(std::uint64_t seed, int points, double tol) {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<GradCheckResult> results = gradient_check_suite(seed, points);
  bool ok = true;
  for (const GradCheckResult& r : results) {
    const bool pass = r.max_rel_err < tol;
    ok = ok && pass;
    std::printf("%-14s max_rel_err=%.3e  coords=%d skipped=%d  %s\n", r.name.c_str(),
                r.max_rel_err, r.checked, r.skipped, pass ? "ok" : "FAIL");
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("gradcheck: %zu cases, %d points each, %.1f s, tol %.1e: %s\n",
              results.size(), points, secs, tol, ok ? "pass" : "FAIL");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Greip: domain-generalized remote photoplethysmography on STMaps"};
  app.require_subcommand(1);

  std::uint64_t seed = 1;
  std::string out_dir = "greip_out";
  std::string config_path;
  app.add_option("--seed", seed, "Master seed for every derived random stream");
  app.add_option("--out", out_dir, "Output directory (default greip_out)");
  app.add_option("--config", config_path,
                 "Training config file, key = value lines (train/eval/msdg)");

  auto* synth_cmd = app.add_subcommand("synth", "Generate synthetic STMap windows");
  synth_cmd->fallthrough();
  std::string preset = "A";
  int n_windows = 0, rois = 64, frames = 256;
  double hr_lo = 50.0, hr_hi = 110.0;
  synth_cmd->add_option("--preset", preset, "Domain preset A, B, C, or D")->required();
  synth_cmd->add_option("--n", n_windows, "Number of windows")
      ->required()
      ->check(CLI::PositiveNumber);
  synth_cmd->add_option("--rois", rois, "Rows per map");
  synth_cmd->add_option("--frames", frames, "Frames per map");
  synth_cmd->add_option("--hr-lo", hr_lo, "Heart-rate range low (bpm)");
  synth_cmd->add_option("--hr-hi", hr_hi, "Heart-rate range high (bpm)");

  auto* aug_cmd =
      app.add_subcommand("augment", "Apply one augmentation branch per input window");
  aug_cmd->fallthrough();
  std::string in_path, aug_preset;
  double p_gamma = 0.0, p_framerate = 0.0, p_delay = 0.0, p_lighting = 0.0,
         p_motion = 0.0;
  aug_cmd->add_option("--in", in_path, "STM1 file or directory of .stm1 files")
      ->required();
  auto* preset_opt = aug_cmd->add_option(
      "--preset", aug_preset, "Policy preset (VIPL-HR, V4V, BUAA, UBFC, PURE)");
  auto* pg = aug_cmd->add_option("--p-gamma", p_gamma, "Gamma branch probability");
  auto* pf =
      aug_cmd->add_option("--p-framerate", p_framerate, "Framerate branch probability");
  auto* pd = aug_cmd->add_option("--p-delay", p_delay, "Delay branch probability");
  auto* pl =
      aug_cmd->add_option("--p-lighting", p_lighting, "Lighting branch probability");
  auto* pm = aug_cmd->add_option("--p-motion", p_motion, "Motion branch probability");
  preset_opt->excludes(pg, pf, pd, pl, pm);

  auto* train_cmd =
      app.add_subcommand("train", "Train on pooled synthetic source domains");
  train_cmd->fallthrough();
  std::string sources = "0,1,2";
  int target = 3, per_domain = 420, eval_count = 140;
  train_cmd->add_option("--sources", sources, "Comma-separated source domain ids");
  train_cmd->add_option("--target", target, "Held-out target domain id");
  train_cmd->add_option("--train-per-domain", per_domain,
                        "Training windows per source domain");

  auto* eval_cmd =
      app.add_subcommand("eval", "Score a checkpoint on a synthetic target domain");
  eval_cmd->fallthrough();
  std::string checkpoint;
  int eval_domain = 3, eval_n = 140, eval_batch = 0;
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--domain", eval_domain, "Target domain id");
  eval_cmd->add_option("--n", eval_n, "Evaluation window count");
  eval_cmd->add_option("--batch", eval_batch, "Evaluation batch size");

  auto* msdg_cmd = app.add_subcommand(
      "msdg", "Leave-one-domain-out comparison over the four ablation arms");
  msdg_cmd->fallthrough();
  std::string msdg_sources = "0,1,2", seeds_str = "1,2,3";
  int msdg_target = 3, msdg_per_domain = 420, msdg_eval = 140;
  msdg_cmd->add_option("--sources", msdg_sources, "Comma-separated source domain ids");
  msdg_cmd->add_option("--target", msdg_target, "Held-out target domain id");
  msdg_cmd->add_option("--train-per-domain", msdg_per_domain,
                       "Training windows per source domain");
  msdg_cmd->add_option("--eval-count", msdg_eval, "Evaluation window count");
  msdg_cmd->add_option("--seeds", seeds_str, "Comma-separated seeds");

  auto* gc_cmd = app.add_subcommand(
      "gradcheck", "Finite-difference verification of every gradient path");
  gc_cmd->fallthrough();
  int gc_points = 10;
  double gc_tol = 1e-4;
  gc_cmd->add_option("--points", gc_points, "Random points per case")
      ->check(CLI::PositiveNumber);
  gc_cmd->add_option("--tol", gc_tol, "Max relative error allowed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    const bool seed_given = app.count("--seed") > 0;
    const auto need_config = [&](const char* cmd) {
      if (config_path.empty())
        throw std::runtime_error(std::string(cmd) + ": --config is required");
      TrainConfig cfg = load_train_config(config_path);
      if (seed_given) cfg.seed = seed;
      return cfg;
    };

    if (app.got_subcommand(synth_cmd))
      return run_synth(preset, n_windows, rois, frames, hr_lo, hr_hi, seed, out_dir);

    if (app.got_subcommand(aug_cmd)) {
      AugmentationPolicy policy;
      if (preset_opt->count() > 0) {
        policy = preset_policy(aug_preset);
      } else {
        policy.p_gamma = p_gamma;
        policy.p_framerate = p_framerate;
        policy.p_delay = p_delay;
        policy.p_lighting = p_lighting;
        policy.p_motion = p_motion;
        policy.validate();
      }
      return run_augment(in_path, policy, seed, out_dir);
    }

    if (app.got_subcommand(train_cmd)) {
      TrainConfig cfg = need_config("train");
      RunManifest m;
      m.source_domains = parse_int_list(sources);
      m.target_domain = target;
      m.train_per_domain = per_domain;
      m.out_dir = out_dir;
      return run_train(cfg, m);
    }

    if (app.got_subcommand(eval_cmd)) {
      TrainConfig cfg = need_config("eval");
      RunManifest m;
      m.source_domains = {};
      m.target_domain = eval_domain;
      m.eval_count = eval_n;
      return run_eval(cfg, checkpoint, m, eval_batch, out_dir);
    }

    if (app.got_subcommand(msdg_cmd)) {
      TrainConfig base = need_config("msdg");
      RunManifest m;
      m.source_domains = parse_int_list(msdg_sources);
      m.target_domain = msdg_target;
      m.train_per_domain = msdg_per_domain;
      m.eval_count = msdg_eval;
      m.out_dir = out_dir;
      return run_msdg_cmd(base, m, parse_seed_list(seeds_str));
    }

    if (app.got_subcommand(gc_cmd)) return run_gradcheck(seed, gc_points, gc_tol);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "greip: %s\n", e.what());
    return 1;
  }
  return 0;
}
