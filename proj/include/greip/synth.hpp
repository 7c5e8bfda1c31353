#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "greip/interp.hpp"
#include "greip/rng.hpp"
#include "greip/stmap.hpp"

namespace greip {

// Blood volume pulse generator parameters. The waveform is a phase
// accumulated sinusoid with a second harmonic; hrv modulates the
// instantaneous frequency.
struct BvpParams {
  double hr_bpm = 75.0;
  double harmonic_ratio = 0.3;
  double hrv_depth = 0.0;
  double hrv_freq_hz = 0.1;
  double noise_std = 0.0;

  void validate() const {
    if (!(hr_bpm >= 40.0 && hr_bpm <= 180.0))
      throw std::invalid_argument("bvp: hr_bpm outside [40,180]");
    if (harmonic_ratio < 0.0 || hrv_depth < 0.0 || hrv_freq_hz < 0.0 ||
        noise_std < 0.0)
      throw std::invalid_argument("bvp: negative parameter");
  }
};

// Recording-condition description for one synthetic domain.
struct DomainProfile {
  std::string name;
  double camera_gamma = 1.0;
  double native_fps = 30.0;
  std::array<double, 9> lighting_matrix = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  std::array<double, 3> skin_weights = {0.3, 0.5, 0.2};
  double motion_event_rate = 0.0;
  double sensor_noise_std = 0.0;
  int delay_frames = 0;

  void validate() const {
    if (!(camera_gamma > 0.0))
      throw std::invalid_argument("domain: camera_gamma must be positive");
    if (!(native_fps > 0.0))
      throw std::invalid_argument("domain: native_fps must be positive");
    if (motion_event_rate < 0.0 || motion_event_rate > 1.0)
      throw std::invalid_argument("domain: motion_event_rate outside [0,1]");
    if (sensor_noise_std < 0.0)
      throw std::invalid_argument("domain: negative sensor noise");
    if (delay_frames < 0)
      throw std::invalid_argument("domain: negative delay");
    if (!(skin_weights[1] > skin_weights[0] && skin_weights[1] > skin_weights[2]))
      throw std::invalid_argument("domain: green skin weight must dominate");
  }
};

struct BvpTrace {
  std::vector<double> samples;
  double mean_hr_bpm = 0.0;
};

// Waveform plus the exact mean of the instantaneous heart rate over the
// generated stretch. f(k) = (hr/60) * (1 + depth * sin(2*pi*f_hrv*k/fs)).
inline BvpTrace generate_bvp_trace(const BvpParams& p, int n, double fs, Rng& rng) {
  p.validate();
  if (n <= 0 || !(fs > 0.0))
    throw std::invalid_argument("generate_bvp: bad length or rate");
  BvpTrace out;
  out.samples.resize(static_cast<std::size_t>(n));
  double phase = rng.uniform(0.0, 2.0 * M_PI);
  double hr_acc = 0.0;
  for (int k = 0; k < n; ++k) {
    const double f = (p.hr_bpm / 60.0) *
                     (1.0 + p.hrv_depth * std::sin(2.0 * M_PI * p.hrv_freq_hz *
                                                   static_cast<double>(k) / fs));
    hr_acc += 60.0 * f;
    double v = std::sin(phase) + p.harmonic_ratio * std::sin(2.0 * phase);
    if (p.noise_std > 0.0) v += rng.normal(0.0, p.noise_std);
    out.samples[static_cast<std::size_t>(k)] = v;
    phase += 2.0 * M_PI * f / fs;
  }
  out.mean_hr_bpm = hr_acc / static_cast<double>(n);
  return out;
}

inline std::vector<double> generate_bvp(const BvpParams& p, int n, double fs,
                                        Rng& rng) {
  return generate_bvp_trace(p, n, fs, rng).samples;
}

// Renders one labelled window. Pipeline: per-roi affine traces of the
// (delayed) pulse on the camera's native clock, sensor noise, 3x3 lighting
// mix, cubic resample to 30 fps, global rescale to [0,1], gamma, optional
// motion row shuffle, per-row min-max normalization. The label keeps the
// undelayed pulse on the output clock and the mean instantaneous heart rate.
inline Sample render_stmap(const BvpParams& bvp_params,
                           const DomainProfile& profile, int n_rois,
                           int n_frames, std::uint64_t seed) {
  profile.validate();
  if (n_rois <= 0 || n_frames <= 1)
    throw std::invalid_argument("render_stmap: bad dimensions");
  constexpr double kOutFps = 30.0;
  constexpr int kChannels = 3;

  Rng rng_bvp(derive_seed(seed, "bvp"));
  Rng rng_base(derive_seed(seed, "base"));
  Rng rng_noise(derive_seed(seed, "noise"));
  Rng rng_motion(derive_seed(seed, "motion"));

  const double duration = static_cast<double>(n_frames - 1) / kOutFps;
  const int native_n =
      static_cast<int>(std::ceil(duration * profile.native_fps)) + 2;
  const int total_n = native_n + profile.delay_frames;
  const BvpTrace trace = generate_bvp_trace(bvp_params, total_n,
                                            profile.native_fps, rng_bvp);

  std::vector<double> base(static_cast<std::size_t>(n_rois));
  std::vector<double> amp(static_cast<std::size_t>(n_rois));
  for (int i = 0; i < n_rois; ++i) {
    base[static_cast<std::size_t>(i)] = rng_base.uniform(0.4, 0.7);
    amp[static_cast<std::size_t>(i)] = rng_base.uniform(0.05, 0.15);
  }

  // Traces on the native clock, already lighting-mixed.
  std::vector<double> native(
      static_cast<std::size_t>(n_rois) * native_n * kChannels);
  std::vector<double> raw(kChannels);
  for (int i = 0; i < n_rois; ++i) {
    for (int k = 0; k < native_n; ++k) {
      const double pulse =
          trace.samples[static_cast<std::size_t>(k + profile.delay_frames)];
      for (int c = 0; c < kChannels; ++c) {
        double v = base[static_cast<std::size_t>(i)] +
                   profile.skin_weights[static_cast<std::size_t>(c)] *
                       amp[static_cast<std::size_t>(i)] * pulse;
        if (profile.sensor_noise_std > 0.0)
          v += rng_noise.normal(0.0, profile.sensor_noise_std);
        raw[static_cast<std::size_t>(c)] = v;
      }
      for (int c = 0; c < kChannels; ++c) {
        double m = 0.0;
        for (int d = 0; d < kChannels; ++d)
          m += profile.lighting_matrix[static_cast<std::size_t>(c * 3 + d)] *
               raw[static_cast<std::size_t>(d)];
        native[static_cast<std::size_t>((i * native_n + k) * kChannels + c)] = m;
      }
    }
  }

  // Cubic resample of every trace to the 30 fps output clock.
  std::vector<double> xs(static_cast<std::size_t>(native_n));
  for (int k = 0; k < native_n; ++k)
    xs[static_cast<std::size_t>(k)] = static_cast<double>(k) / profile.native_fps;
  std::vector<double> queries(static_cast<std::size_t>(n_frames));
  for (int j = 0; j < n_frames; ++j)
    queries[static_cast<std::size_t>(j)] = static_cast<double>(j) / kOutFps;

  STMap map(n_rois, n_frames, kChannels, kOutFps);
  std::vector<double> ys(static_cast<std::size_t>(native_n));
  for (int i = 0; i < n_rois; ++i) {
    for (int c = 0; c < kChannels; ++c) {
      for (int k = 0; k < native_n; ++k)
        ys[static_cast<std::size_t>(k)] =
            native[static_cast<std::size_t>((i * native_n + k) * kChannels + c)];
      CubicInterpolant ci(xs, ys);
      for (int j = 0; j < n_frames; ++j)
        map.at(i, j, c) = ci(queries[static_cast<std::size_t>(j)]);
    }
  }

  // Global rescale to [0,1], then the camera's gamma curve.
  double lo = map.values[0], hi = map.values[0];
  for (double v : map.values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi == lo) {
    for (double& v : map.values) v = 0.5;
  } else {
    for (double& v : map.values) v = (v - lo) / (hi - lo);
  }
  if (profile.camera_gamma != 1.0) {
    for (double& v : map.values) v = std::pow(v, profile.camera_gamma);
  }

  const double motion_draw = rng_motion.uniform();
  if (motion_draw < profile.motion_event_rate) {
    const std::vector<int> perm = rng_motion.permutation(n_rois);
    STMap shuffled = map;
    for (int i = 0; i < n_rois; ++i)
      for (int t = 0; t < n_frames; ++t)
        for (int c = 0; c < kChannels; ++c)
          shuffled.at(i, t, c) = map.at(perm[static_cast<std::size_t>(i)], t, c);
    map = std::move(shuffled);
  }

  Sample s;
  s.stmap = normalize_rows(map);
  s.stmap.validate();

  // Undelayed pulse label on the output clock.
  std::vector<double> label_xs(static_cast<std::size_t>(native_n));
  std::vector<double> label_ys(static_cast<std::size_t>(native_n));
  for (int k = 0; k < native_n; ++k) {
    label_xs[static_cast<std::size_t>(k)] =
        static_cast<double>(k) / profile.native_fps;
    label_ys[static_cast<std::size_t>(k)] =
        trace.samples[static_cast<std::size_t>(k)];
  }
  s.bvp = resample_cubic(label_xs, label_ys, queries);

  double hr_acc = 0.0;
  {
    // Mean instantaneous rate over the undelayed native stretch.
    const BvpParams& p = bvp_params;
    for (int k = 0; k < native_n; ++k) {
      hr_acc += p.hr_bpm * (1.0 + p.hrv_depth *
                                      std::sin(2.0 * M_PI * p.hrv_freq_hz *
                                               static_cast<double>(k) /
                                               profile.native_fps));
    }
  }
  s.hr_bpm = hr_acc / static_cast<double>(native_n);
  return s;
}

// ---------------------------------------------------------------------------
// Domain presets. A is a clean reference camera; B a high-gamma dim-light
// sensor; C a low-framerate noisy sensor; D a high-motion delayed sensor,
// the usual held-out target.
// ---------------------------------------------------------------------------

inline DomainProfile domain_preset(char which) {
  DomainProfile p;
  switch (which) {
    case 'A':
      p.name = "A";
      break;
    case 'B':
      p.name = "B";
      p.camera_gamma = 1.8;
      p.lighting_matrix = {0.55, 0.05, 0.02, 0.05, 0.60, 0.05, 0.02, 0.05, 0.50};
      p.sensor_noise_std = 0.004;
      p.motion_event_rate = 0.1;
      break;
    case 'C':
      p.name = "C";
      p.native_fps = 15.0;
      p.sensor_noise_std = 0.02;
      p.motion_event_rate = 0.1;
      break;
    case 'D':
      p.name = "D";
      p.camera_gamma = 1.25;
      p.lighting_matrix = {0.9, 0.08, 0.02, 0.06, 0.88, 0.06, 0.02, 0.08, 0.9};
      p.motion_event_rate = 0.8;
      p.sensor_noise_std = 0.01;
      p.delay_frames = 6;
      break;
    default:
      throw std::invalid_argument("domain_preset: unknown preset");
  }
  p.validate();
  return p;
}

// Independent identically distributed labelled windows for one domain.
// Per-sample substreams keep the draw for sample i independent of n.
// One window of a domain, addressable by index so callers can stream large
// datasets without holding them all at once.
inline Sample generate_domain_sample(const DomainProfile& profile,
                                     std::uint64_t master_seed, int domain_id,
                                     int index, double hr_lo = 50.0,
                                     double hr_hi = 110.0, int n_rois = 64,
                                     int n_frames = 256) {
  if (index < 0) throw std::invalid_argument("generate_domain: negative index");
  if (!(hr_lo >= 40.0 && hr_hi <= 180.0 && hr_lo < hr_hi))
    throw std::invalid_argument("generate_domain: hr range outside [40,180]");
  const std::uint64_t s =
      derive_seed(master_seed, "sample", static_cast<std::uint64_t>(index));
  Rng rng_params(derive_seed(s, "params"));
  BvpParams bp;
  bp.hr_bpm = rng_params.uniform(hr_lo, hr_hi);
  bp.harmonic_ratio = rng_params.uniform(0.2, 0.4);
  bp.hrv_depth = rng_params.uniform(0.02, 0.08);
  bp.hrv_freq_hz = rng_params.uniform(0.06, 0.3);
  bp.noise_std = rng_params.uniform(0.0, 0.03);
  Sample sample = render_stmap(bp, profile, n_rois, n_frames, s);
  sample.domain_id = domain_id;
  return sample;
}

inline std::vector<Sample> generate_domain(const DomainProfile& profile, int n,
                                           std::uint64_t master_seed,
                                           int domain_id, double hr_lo = 50.0,
                                           double hr_hi = 110.0, int n_rois = 64,
                                           int n_frames = 256) {
  profile.validate();
  if (n <= 0) throw std::invalid_argument("generate_domain: n must be positive");
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    out.push_back(generate_domain_sample(profile, master_seed, domain_id, i,
                                         hr_lo, hr_hi, n_rois, n_frames));
  return out;
}

}  // namespace greip
