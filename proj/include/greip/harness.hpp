#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "greip/augment.hpp"
#include "greip/metrics.hpp"
#include "greip/model.hpp"
#include "greip/objectives.hpp"
#include "greip/optim.hpp"
#include "greip/synth.hpp"

namespace greip {

namespace detail {

inline std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

// Compact sample storage: values and waveforms kept as 32-bit floats so a
// few thousand windows fit comfortably in memory, widened on access.
class SamplePool {
 public:
  SamplePool(int n_rois, int n_frames) : n_rois_(n_rois), n_frames_(n_frames) {}

  void add(const Sample& s) {
    if (s.stmap.n_rois != n_rois_ || s.stmap.n_frames != n_frames_ ||
        s.stmap.n_channels != 3)
      throw std::invalid_argument("pool: sample dims do not match pool");
    if (!s.has_hr() || !s.has_bvp())
      throw std::invalid_argument("pool: training samples need hr and bvp labels");
    Item item;
    item.values.reserve(s.stmap.values.size());
    for (double v : s.stmap.values) item.values.push_back(static_cast<float>(v));
    item.bvp.reserve(s.bvp.size());
    for (double v : s.bvp) item.bvp.push_back(static_cast<float>(v));
    item.hr = s.hr_bpm;
    item.domain_id = s.domain_id;
    items_.push_back(std::move(item));
  }

  Sample get(std::size_t i) const {
    const Item& item = items_.at(i);
    Sample s;
    s.stmap.n_rois = n_rois_;
    s.stmap.n_frames = n_frames_;
    s.stmap.n_channels = 3;
    s.stmap.values.assign(item.values.begin(), item.values.end());
    s.bvp.assign(item.bvp.begin(), item.bvp.end());
    s.hr_bpm = item.hr;
    s.domain_id = item.domain_id;
    return s;
  }

  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  int n_rois() const { return n_rois_; }
  int n_frames() const { return n_frames_; }

 private:
  struct Item {
    std::vector<float> values;
    std::vector<float> bvp;
    double hr = 0.0;
    int domain_id = -1;
  };
  int n_rois_;
  int n_frames_;
  std::vector<Item> items_;
};

struct TrainConfig {
  ModelConfig model;
  int batch_size = 32;
  long long iterations = 3000;
  double lr = 0.001;
  LossWeights weights;
  int queue_capacity = kQueueCapacity;
  std::string policy;  // augmentation preset name, required when use_explicit
  std::uint64_t seed = 1;
  bool use_explicit = false;
  bool use_implicit = false;
  bool use_fusion = false;
  bool dann_shift = false;

  void validate() const {
    model.validate();
    weights.validate();
    if (batch_size <= 0) throw std::invalid_argument("config: batch_size must be positive");
    if (iterations <= 0) throw std::invalid_argument("config: iterations must be positive");
    if (lr <= 0.0) throw std::invalid_argument("config: lr must be positive");
    if (queue_capacity <= 0)
      throw std::invalid_argument("config: queue_capacity must be positive");
    if (use_explicit && policy.empty())
      throw std::invalid_argument("config: use_explicit needs a policy preset");
    if (!policy.empty()) preset_policy(policy);
  }
};

namespace detail {

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config: bad boolean for " + key + ": " + v);
}

}  // namespace detail

// Flat `key = value` text; '#' starts a comment; unknown keys are errors.
inline TrainConfig parse_train_config(const std::string& text) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const auto strip = [](std::string s) {
      const std::size_t a = s.find_first_not_of(" \t\r");
      if (a == std::string::npos) return std::string();
      const std::size_t b = s.find_last_not_of(" \t\r");
      return s.substr(a, b - a + 1);
    };
    const std::string stripped = strip(line);
    if (stripped.empty()) continue;
    const std::size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: line " + std::to_string(line_no) +
                                  " is not key = value");
    const std::string key = strip(stripped.substr(0, eq));
    const std::string value = strip(stripped.substr(eq + 1));
    if (key.empty() || value.empty())
      throw std::invalid_argument("config: line " + std::to_string(line_no) +
                                  " has an empty key or value");
    const auto bad_value = [&key, &value]() {
      return std::invalid_argument("config: bad value for " + key + ": " + value);
    };
    const auto to_int = [&](auto convert) {
      try {
        std::size_t used = 0;
        auto r = convert(value, &used);
        if (used != value.size()) throw bad_value();
        return r;
      } catch (const std::exception&) {
        throw bad_value();
      }
    };
    const auto as_int = [&] { return to_int([](const std::string& v, std::size_t* p) { return std::stoi(v, p); }); };
    const auto as_ll = [&] { return to_int([](const std::string& v, std::size_t* p) { return std::stoll(v, p); }); };
    const auto as_u64 = [&] { return to_int([](const std::string& v, std::size_t* p) { return std::stoull(v, p); }); };
    const auto as_double = [&] { return to_int([](const std::string& v, std::size_t* p) { return std::stod(v, p); }); };

    if (key == "dim") cfg.model.dim = as_int();
    else if (key == "n_rois") cfg.model.n_rois = as_int();
    else if (key == "n_frames") cfg.model.n_frames = as_int();
    else if (key == "batch_size") cfg.batch_size = as_int();
    else if (key == "iterations") cfg.iterations = as_ll();
    else if (key == "lr") cfg.lr = as_double();
    else if (key == "seed") cfg.seed = as_u64();
    else if (key == "queue_capacity") cfg.queue_capacity = as_int();
    else if (key == "policy") cfg.policy = value;
    else if (key == "k_bvp") cfg.weights.k_bvp = as_double();
    else if (key == "k_hr") cfg.weights.k_hr = as_double();
    else if (key == "k_con") cfg.weights.k_con = as_double();
    else if (key == "k_ort") cfg.weights.k_ort = as_double();
    else if (key == "temperature_v") cfg.weights.v = as_double();
    else if (key == "floor_t") cfg.weights.t = as_double();
    else if (key == "use_explicit") cfg.use_explicit = detail::parse_bool(value, key);
    else if (key == "use_implicit") cfg.use_implicit = detail::parse_bool(value, key);
    else if (key == "use_fusion") cfg.use_fusion = detail::parse_bool(value, key);
    else if (key == "dann_shift") cfg.dann_shift = detail::parse_bool(value, key);
    else throw std::invalid_argument("config: unknown key " + key);
  }
  cfg.validate();
  return cfg;
}

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str());
}

inline std::string format_train_config(const TrainConfig& cfg) {
  std::string out;
  const auto put = [&out](const std::string& k, const std::string& v) {
    out += k + " = " + v + "\n";
  };
  put("dim", std::to_string(cfg.model.dim));
  put("n_rois", std::to_string(cfg.model.n_rois));
  put("n_frames", std::to_string(cfg.model.n_frames));
  put("batch_size", std::to_string(cfg.batch_size));
  put("iterations", std::to_string(cfg.iterations));
  put("lr", detail::g17(cfg.lr));
  put("seed", std::to_string(cfg.seed));
  put("queue_capacity", std::to_string(cfg.queue_capacity));
  if (!cfg.policy.empty()) put("policy", cfg.policy);
  put("k_bvp", detail::g17(cfg.weights.k_bvp));
  put("k_hr", detail::g17(cfg.weights.k_hr));
  put("k_con", detail::g17(cfg.weights.k_con));
  put("k_ort", detail::g17(cfg.weights.k_ort));
  put("temperature_v", detail::g17(cfg.weights.v));
  put("floor_t", detail::g17(cfg.weights.t));
  put("use_explicit", cfg.use_explicit ? "true" : "false");
  put("use_implicit", cfg.use_implicit ? "true" : "false");
  put("use_fusion", cfg.use_fusion ? "true" : "false");
  put("dann_shift", cfg.dann_shift ? "true" : "false");
  return out;
}

// Leave-one-domain-out protocol description. Domain ids index the synthetic
// presets: 0 = A, 1 = B, 2 = C, 3 = D.
struct RunManifest {
  std::vector<int> source_domains;
  int target_domain = 3;
  int train_per_domain = 420;
  int eval_count = 140;
  std::string out_dir = "runs";

  void validate() const {
    if (source_domains.empty())
      throw std::invalid_argument("manifest: need at least one source domain");
    for (int d : source_domains) {
      if (d < 0 || d > 3) throw std::invalid_argument("manifest: domain ids are 0..3");
      if (d == target_domain)
        throw std::invalid_argument("manifest: target domain must not be a source");
    }
    if (target_domain < 0 || target_domain > 3)
      throw std::invalid_argument("manifest: domain ids are 0..3");
    for (std::size_t i = 0; i < source_domains.size(); ++i)
      for (std::size_t j = i + 1; j < source_domains.size(); ++j)
        if (source_domains[i] == source_domains[j])
          throw std::invalid_argument("manifest: duplicate source domain");
    if (train_per_domain <= 0 || eval_count <= 0)
      throw std::invalid_argument("manifest: sample counts must be positive");
  }
};

inline DomainProfile domain_profile_by_id(int id) {
  return domain_preset(static_cast<char>('A' + id));
}

// Streams windows straight into the pool so only the compact form is held.
inline void fill_domain_pool(SamplePool& pool, int domain_id, int count,
                             std::uint64_t data_seed, int n_rois, int n_frames) {
  const DomainProfile profile = domain_profile_by_id(domain_id);
  profile.validate();
  for (int i = 0; i < count; ++i)
    pool.add(generate_domain_sample(profile, data_seed, domain_id, i, 50.0, 110.0,
                                    n_rois, n_frames));
}

inline SamplePool build_source_pool(const TrainConfig& cfg, const RunManifest& m) {
  SamplePool pool(cfg.model.n_rois, cfg.model.n_frames);
  for (int d : m.source_domains)
    fill_domain_pool(pool, d, m.train_per_domain,
                     derive_seed(cfg.seed, "data", static_cast<std::uint64_t>(d)),
                     cfg.model.n_rois, cfg.model.n_frames);
  return pool;
}

inline SamplePool build_target_pool(const TrainConfig& cfg, const RunManifest& m) {
  SamplePool pool(cfg.model.n_rois, cfg.model.n_frames);
  fill_domain_pool(pool, m.target_domain, m.eval_count,
                   derive_seed(cfg.seed, "eval",
                               static_cast<std::uint64_t>(m.target_domain)),
                   cfg.model.n_rois, cfg.model.n_frames);
  return pool;
}

struct TrainResult {
  std::string checkpoint_path;
  std::string loss_log_path;
  double final_loss = 0.0;
  long long iterations_run = 0;
};

// One full optimization run over a pooled source set. Per iteration: draw a
// batch with replacement; when use_explicit, append one augmented copy per
// sample (labels shared); forward; waveform and rate losses always, queue
// losses when use_implicit; fusion bypassed unless use_fusion; combine on
// the ramp; Adam step; then push detached features into the queue. Every
// random choice comes from a stream derived from config.seed, so the loss
// log and checkpoint are bit-reproducible. Queue state is deliberately not
// part of the checkpoint; a resumed run rebuilds it from its own seed.
inline TrainResult train_on_pool(const TrainConfig& cfg, const SamplePool& pool,
                                 const std::string& out_dir) {
  cfg.validate();
  if (pool.empty()) throw std::invalid_argument("train: source pool is empty");
  if (pool.n_rois() != cfg.model.n_rois || pool.n_frames() != cfg.model.n_frames)
    throw std::invalid_argument("train: pool dims do not match model config");

  std::filesystem::create_directories(out_dir);
  const std::string log_path = out_dir + "/loss_log.csv";
  const std::string ckpt_path = out_dir + "/model.grck";
  std::ofstream log(log_path);
  if (!log) throw std::runtime_error("train: cannot write " + log_path);
  log << "iter,lambda,loss_bvp,loss_hr,loss_con,loss_ort,loss_total\n";

  GreipModel model(cfg.model, derive_seed(cfg.seed, "model"));
  std::vector<Tensor> params = model.parameters();
  AdamState adam;
  FeatureQueue queue(cfg.model.dim, cfg.queue_capacity, derive_seed(cfg.seed, "queue"));
  Rng rng_batch(derive_seed(cfg.seed, "train"));
  Rng rng_aug(derive_seed(cfg.seed, "augment"));
  AugmentationPolicy policy;
  if (cfg.use_explicit) policy = preset_policy(cfg.policy);
  const bool noise_branch = cfg.use_implicit || cfg.use_fusion;

  const int b = cfg.batch_size;
  TrainResult result;
  result.checkpoint_path = ckpt_path;
  result.loss_log_path = log_path;

  for (long long it = 0; it < cfg.iterations; ++it) {
    std::vector<Sample> batch;
    batch.reserve(static_cast<std::size_t>(cfg.use_explicit ? 2 * b : b));
    for (int i = 0; i < b; ++i)
      batch.push_back(pool.get(static_cast<std::size_t>(
          rng_batch.uniform_int(0, static_cast<int>(pool.size()) - 1))));
    if (cfg.use_explicit)
      for (int i = 0; i < b; ++i)
        batch.push_back(apply_policy(batch[static_cast<std::size_t>(i)], policy, rng_aug));

    const int n = static_cast<int>(batch.size());
    std::vector<const Sample*> ptrs;
    ptrs.reserve(static_cast<std::size_t>(n));
    for (const Sample& s : batch) ptrs.push_back(&s);
    std::vector<double> bvp_flat, hr_flat;
    bvp_flat.reserve(static_cast<std::size_t>(n) * cfg.model.n_frames);
    for (const Sample& s : batch) {
      bvp_flat.insert(bvp_flat.end(), s.bvp.begin(), s.bvp.end());
      hr_flat.push_back(s.hr_bpm);
    }
    Tensor bvp_target({n, cfg.model.n_frames}, std::move(bvp_flat));
    Tensor hr_target({n}, hr_flat);

    try {
      Tensor x = model.input_from_samples(ptrs);
      Prediction pred = model.predict(x, noise_branch, cfg.use_fusion);
      LossParts parts;
      parts.bvp = pearson_bvp_loss(pred.bvp, bvp_target);
      parts.hr = hr_l1_loss(pred.hr, hr_target);
      if (cfg.use_implicit) {
        parts.con = continuity_loss(pred.rppg.vec, hr_flat, queue, cfg.weights.v);
        parts.ort = orthogonality_loss(pred.noise.vec, pred.noise.pooled_raw, queue,
                                       cfg.weights.t);
      }
      Tensor loss =
          overall_loss(parts, cfg.weights, it, cfg.iterations, cfg.dann_shift);

      model.zero_grad();
      backward(loss);
      adam_step(params, adam, cfg.lr);
      if (cfg.use_implicit)
        queue.push(pred.rppg.vec, pred.rppg.pooled_raw, pred.noise.vec,
                   pred.noise.pooled_raw, hr_flat);

      const double lam = lambda_schedule(it, cfg.iterations, cfg.dann_shift);
      log << it << ',' << detail::g17(lam) << ',' << detail::g17(parts.bvp.item())
          << ',' << detail::g17(parts.hr.item()) << ','
          << detail::g17(cfg.use_implicit ? parts.con.item() : 0.0) << ','
          << detail::g17(cfg.use_implicit ? parts.ort.item() : 0.0) << ','
          << detail::g17(loss.item()) << '\n';
      result.final_loss = loss.item();
    } catch (const std::exception& e) {
      throw std::runtime_error("train: aborted at iteration " + std::to_string(it) +
                               ": " + e.what());
    }
    result.iterations_run = it + 1;
  }

  log.close();
  model.save(ckpt_path);
  {
    std::ofstream cfg_out(out_dir + "/config.txt");
    cfg_out << format_train_config(cfg);
  }
  return result;
}

inline TrainResult train(const TrainConfig& cfg, const RunManifest& manifest) {
  cfg.validate();
  manifest.validate();
  SamplePool pool = build_source_pool(cfg, manifest);
  return train_on_pool(cfg, pool, manifest.out_dir);
}

struct EvalReport {
  HrReport head;      // the scalar rate head
  HrReport spectral;  // rate read off the predicted waveform's spectrum
};

inline EvalReport evaluate(const GreipModel& model, const SamplePool& pool,
                           int batch_size, bool noise_branch, bool use_fusion) {
  if (pool.empty()) throw std::invalid_argument("evaluate: pool is empty");
  NoGradGuard guard;
  std::vector<double> head_pred, spec_pred, gt;
  for (std::size_t start = 0; start < pool.size();
       start += static_cast<std::size_t>(batch_size)) {
    const std::size_t stop =
        std::min(pool.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<Sample> batch;
    for (std::size_t i = start; i < stop; ++i) batch.push_back(pool.get(i));
    std::vector<const Sample*> ptrs;
    for (const Sample& s : batch) ptrs.push_back(&s);
    Prediction pred =
        model.predict(model.input_from_samples(ptrs), noise_branch, use_fusion);
    const int n = static_cast<int>(batch.size());
    const int t = pool.n_frames();
    for (int i = 0; i < n; ++i) {
      head_pred.push_back(pred.hr.data()[static_cast<std::size_t>(i)]);
      std::vector<double> wave(pred.bvp.data().begin() + static_cast<std::size_t>(i) * t,
                               pred.bvp.data().begin() +
                                   static_cast<std::size_t>(i + 1) * t);
      double spec = 0.0;
      try {
        spec = hr_from_bvp(wave, batch[static_cast<std::size_t>(i)].stmap.frame_rate_hz);
      } catch (const std::exception&) {
        // a flat predicted waveform has no spectral peak; score it as zero
      }
      spec_pred.push_back(spec);
      gt.push_back(batch[static_cast<std::size_t>(i)].hr_bpm);
    }
  }
  EvalReport report;
  report.head = hr_report(head_pred, gt);
  report.spectral = hr_report(spec_pred, gt);
  return report;
}

// The four rows of the ablation protocol.
struct AblationArm {
  std::string name;
  bool use_explicit;
  bool use_implicit;
  bool use_fusion;
};

inline std::vector<AblationArm> ablation_arms() {
  return {{"baseline", false, false, false},
          {"ex_prior", true, false, false},
          {"im_prior", false, true, true},
          {"full", true, true, true}};
}

struct MsdgRow {
  std::string config_name;
  std::uint64_t seed = 0;
  EvalReport report;
};

// Leave-one-domain-out comparison: trains every ablation arm per seed on the
// pooled sources and scores the held-out target domain.
inline std::vector<MsdgRow> run_msdg(const TrainConfig& base,
                                     const RunManifest& manifest,
                                     const std::vector<std::uint64_t>& seeds) {
  manifest.validate();
  if (seeds.empty()) throw std::invalid_argument("msdg: need at least one seed");
  std::vector<MsdgRow> rows;
  for (std::uint64_t seed : seeds) {
    TrainConfig seeded = base;
    seeded.seed = seed;
    SamplePool sources = build_source_pool(seeded, manifest);
    SamplePool target = build_target_pool(seeded, manifest);
    for (const AblationArm& arm : ablation_arms()) {
      TrainConfig cfg = seeded;
      cfg.use_explicit = arm.use_explicit;
      cfg.use_implicit = arm.use_implicit;
      cfg.use_fusion = arm.use_fusion;
      if (!cfg.use_explicit) cfg.policy.clear();
      cfg.validate();
      const std::string arm_dir =
          manifest.out_dir + "/" + arm.name + "_seed" + std::to_string(seed);
      train_on_pool(cfg, sources, arm_dir);
      GreipModel model(cfg.model, 0);
      model.load(arm_dir + "/model.grck");
      MsdgRow row;
      row.config_name = arm.name;
      row.seed = seed;
      row.report = evaluate(model, target, cfg.batch_size,
                            cfg.use_implicit || cfg.use_fusion, cfg.use_fusion);
      rows.push_back(row);
    }
  }
  return rows;
}

inline void write_msdg_csv(const std::string& path, const std::vector<MsdgRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("msdg: cannot write " + path);
  out << "config,seed,head_mae,head_rmse,head_sd,head_r,"
         "spec_mae,spec_rmse,spec_sd,spec_r\n";
  const auto put_row = [&out](const std::string& name, const std::string& seed,
                              const EvalReport& r) {
    out << name << ',' << seed << ',' << detail::g17(r.head.mae) << ','
        << detail::g17(r.head.rmse) << ',' << detail::g17(r.head.sd) << ','
        << detail::g17(r.head.pearson_r) << ',' << detail::g17(r.spectral.mae) << ','
        << detail::g17(r.spectral.rmse) << ',' << detail::g17(r.spectral.sd) << ','
        << detail::g17(r.spectral.pearson_r) << '\n';
  };
  for (const MsdgRow& row : rows)
    put_row(row.config_name, std::to_string(row.seed), row.report);
  for (const AblationArm& arm : ablation_arms()) {
    EvalReport mean;
    int n = 0;
    for (const MsdgRow& row : rows) {
      if (row.config_name != arm.name) continue;
      mean.head.mae += row.report.head.mae;
      mean.head.rmse += row.report.head.rmse;
      mean.head.sd += row.report.head.sd;
      mean.head.pearson_r += row.report.head.pearson_r;
      mean.spectral.mae += row.report.spectral.mae;
      mean.spectral.rmse += row.report.spectral.rmse;
      mean.spectral.sd += row.report.spectral.sd;
      mean.spectral.pearson_r += row.report.spectral.pearson_r;
      ++n;
    }
    if (n == 0) continue;
    mean.head.mae /= n;
    mean.head.rmse /= n;
    mean.head.sd /= n;
    mean.head.pearson_r /= n;
    mean.spectral.mae /= n;
    mean.spectral.rmse /= n;
    mean.spectral.sd /= n;
    mean.spectral.pearson_r /= n;
    put_row(arm.name, "mean", mean);
  }
}

inline double mean_head_mae(const std::vector<MsdgRow>& rows, const std::string& name) {
  double acc = 0.0;
  int n = 0;
  for (const MsdgRow& row : rows)
    if (row.config_name == name) {
      acc += row.report.head.mae;
      ++n;
    }
  if (n == 0) throw std::invalid_argument("msdg: no rows named " + name);
  return acc / n;
}

}  // namespace greip
