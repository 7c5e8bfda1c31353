#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "greip/interp.hpp"
#include "greip/rng.hpp"
#include "greip/stmap.hpp"

namespace greip {

// Gamma curve per value. The map stays in [0,1], so no renormalization;
// gamma == 1 is an exact identity.
inline STMap gamma_augment(const STMap& in, double gamma) {
  if (!(gamma > 0.0)) throw std::invalid_argument("gamma_augment: gamma <= 0");
  STMap out = in;
  if (gamma == 1.0) return out;
  for (double& v : out.values) v = std::pow(v, gamma);
  return out;
}

// Emulates a lower capture rate: keep every factor-th frame (plus the final
// frame as an anchor) and cubic-interpolate back onto the original frame
// grid. Overshoot outside [0,1] is clamped, so constant and linear traces
// round-trip exactly.
inline STMap framerate_augment(const STMap& in, int factor) {
  if (factor < 2) throw std::invalid_argument("framerate_augment: factor < 2");
  if (in.n_frames <= factor)
    throw std::invalid_argument("framerate_augment: too few frames");
  std::vector<double> xs;
  for (int t = 0; t < in.n_frames; t += factor) xs.push_back(static_cast<double>(t));
  if (xs.back() != static_cast<double>(in.n_frames - 1))
    xs.push_back(static_cast<double>(in.n_frames - 1));

  STMap out = in;
  std::vector<double> ys(xs.size());
  std::vector<double> queries(static_cast<std::size_t>(in.n_frames));
  for (int t = 0; t < in.n_frames; ++t)
    queries[static_cast<std::size_t>(t)] = static_cast<double>(t);
  for (int r = 0; r < in.n_rois; ++r) {
    for (int c = 0; c < in.n_channels; ++c) {
      for (std::size_t k = 0; k < xs.size(); ++k)
        ys[k] = in.at(r, static_cast<int>(xs[k]), c);
      CubicInterpolant ci(xs, ys);
      for (int t = 0; t < in.n_frames; ++t) {
        const double v = ci(queries[static_cast<std::size_t>(t)]);
        out.at(r, t, c) = std::min(1.0, std::max(0.0, v));
      }
    }
  }
  return out;
}

// Circular shift of the frame axis by d (positive shifts content later in
// time). Exactly inverted by shifting back by -d.
inline STMap delay_augment(const STMap& in, int d) {
  const int t_count = in.n_frames;
  STMap out = in;
  const int shift = ((d % t_count) + t_count) % t_count;
  if (shift == 0) return out;
  for (int r = 0; r < in.n_rois; ++r)
    for (int t = 0; t < t_count; ++t) {
      const int src = (t - shift + t_count) % t_count;
      for (int c = 0; c < in.n_channels; ++c) out.at(r, t, c) = in.at(r, src, c);
    }
  return out;
}

// Mixes channels with a 3x3 matrix, then renormalizes per row because the
// mix can leave [0,1]. On a row-normalized map, 0.5 * I is a fixpoint.
inline STMap lighting_augment(const STMap& in, const std::array<double, 9>& m) {
  STMap out = in;
  for (int r = 0; r < in.n_rois; ++r)
    for (int t = 0; t < in.n_frames; ++t) {
      const double v0 = in.at(r, t, 0), v1 = in.at(r, t, 1), v2 = in.at(r, t, 2);
      out.at(r, t, 0) = m[0] * v0 + m[1] * v1 + m[2] * v2;
      out.at(r, t, 1) = m[3] * v0 + m[4] * v1 + m[5] * v2;
      out.at(r, t, 2) = m[6] * v0 + m[7] * v1 + m[8] * v2;
    }
  return normalize_rows(out);
}

// Reorders roi rows: out row i takes input row perm[i].
inline STMap motion_augment(const STMap& in, const std::vector<int>& perm) {
  if (static_cast<int>(perm.size()) != in.n_rois)
    throw std::invalid_argument("motion_augment: permutation size mismatch");
  std::vector<bool> hit(perm.size(), false);
  for (int p : perm) {
    if (p < 0 || p >= in.n_rois || hit[static_cast<std::size_t>(p)])
      throw std::invalid_argument("motion_augment: not a permutation");
    hit[static_cast<std::size_t>(p)] = true;
  }
  STMap out = in;
  for (int r = 0; r < in.n_rois; ++r) {
    const int src = perm[static_cast<std::size_t>(r)];
    for (int t = 0; t < in.n_frames; ++t)
      for (int c = 0; c < in.n_channels; ++c) out.at(r, t, c) = in.at(src, t, c);
  }
  return out;
}

inline STMap motion_augment(const STMap& in, Rng& rng) {
  return motion_augment(in, rng.permutation(in.n_rois));
}

// ---------------------------------------------------------------------------
// Scheduling policy: exactly one branch fires per draw, with probabilities
// that must sum to 1. Branch order for the cumulative thresholds is gamma,
// framerate, delay, lighting, motion.
// ---------------------------------------------------------------------------

struct AugmentationPolicy {
  double p_gamma = 0.0;
  double p_framerate = 0.0;
  double p_delay = 0.0;
  double p_lighting = 0.0;
  double p_motion = 0.0;

  double gamma_lo = 0.8;
  double gamma_hi = 2.2;
  std::vector<int> down_factors = {2, 3, 4};
  int delay_max = 15;
  double light_lo = -0.5;
  double light_hi = 0.5;

  void validate() const {
    const double probs[5] = {p_gamma, p_framerate, p_delay, p_lighting, p_motion};
    double s = 0.0;
    for (double p : probs) {
      if (p < 0.0 || p > 1.0)
        throw std::invalid_argument("policy: probability outside [0,1]");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-9)
      throw std::invalid_argument("policy: probabilities must sum to 1");
    if (!(gamma_lo > 0.0 && gamma_lo < gamma_hi))
      throw std::invalid_argument("policy: bad gamma range");
    if (down_factors.empty())
      throw std::invalid_argument("policy: empty down factor set");
    for (int f : down_factors)
      if (f < 2) throw std::invalid_argument("policy: down factor < 2");
    if (delay_max < 1) throw std::invalid_argument("policy: delay_max < 1");
    if (!(light_lo < light_hi))
      throw std::invalid_argument("policy: bad lighting range");
  }
};

// Branch mixtures mimicking the recording artifacts of the datasets the
// policy names: (motion, lighting, gamma, framerate, delay) percentages
// 30/20/30/20/0, 40/30/0/0/30, 15/15/25/15/30, 20/15/10/40/15, 40/30/20/10/0.
inline AugmentationPolicy preset_policy(const std::string& name) {
  AugmentationPolicy p;
  if (name == "VIPL-HR") {
    p.p_motion = 0.30;
    p.p_lighting = 0.20;
    p.p_gamma = 0.30;
    p.p_framerate = 0.20;
    p.p_delay = 0.0;
  } else if (name == "V4V") {
    p.p_motion = 0.40;
    p.p_lighting = 0.30;
    p.p_gamma = 0.0;
    p.p_framerate = 0.0;
    p.p_delay = 0.30;
  } else if (name == "BUAA") {
    p.p_motion = 0.15;
    p.p_lighting = 0.15;
    p.p_gamma = 0.25;
    p.p_framerate = 0.15;
    p.p_delay = 0.30;
  } else if (name == "UBFC") {
    p.p_motion = 0.20;
    p.p_lighting = 0.15;
    p.p_gamma = 0.10;
    p.p_framerate = 0.40;
    p.p_delay = 0.15;
  } else if (name == "PURE") {
    p.p_motion = 0.40;
    p.p_lighting = 0.30;
    p.p_gamma = 0.20;
    p.p_framerate = 0.10;
    p.p_delay = 0.0;
  } else {
    throw std::invalid_argument(
        "preset_policy: unknown preset '" + name +
        "' (expected VIPL-HR, V4V, BUAA, UBFC, or PURE)");
  }
  p.validate();
  return p;
}

// Applies exactly one augmentation branch chosen by the policy. Labels are
// copied unchanged; the returned sample carries the branch tag.
inline Sample apply_policy(const Sample& in, const AugmentationPolicy& policy,
                           Rng& rng, std::string* params_out = nullptr) {
  policy.validate();
  const double u = rng.uniform();
  const double probs[5] = {policy.p_gamma, policy.p_framerate, policy.p_delay,
                           policy.p_lighting, policy.p_motion};
  static const char* kTags[5] = {"gamma", "framerate", "delay", "lighting",
                                 "motion"};
  int branch = -1;
  double cum = 0.0;
  for (int i = 0; i < 5; ++i) {
    cum += probs[i];
    if (probs[i] > 0.0 && u <= cum) {
      branch = i;
      break;
    }
  }
  if (branch < 0) {
    for (int i = 4; i >= 0; --i)
      if (probs[i] > 0.0) {
        branch = i;
        break;
      }
  }

  const auto fmt = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };

  Sample out = in;
  out.augment_tag = kTags[branch];
  std::string params;
  switch (branch) {
    case 0: {
      const double g = rng.uniform(policy.gamma_lo, policy.gamma_hi);
      out.stmap = gamma_augment(in.stmap, g);
      params = "gamma=" + fmt(g);
      break;
    }
    case 1: {
      const int idx =
          rng.uniform_int(0, static_cast<int>(policy.down_factors.size()) - 1);
      const int factor = policy.down_factors[static_cast<std::size_t>(idx)];
      out.stmap = framerate_augment(in.stmap, factor);
      params = "factor=" + std::to_string(factor);
      break;
    }
    case 2: {
      const int d = rng.uniform_int(-policy.delay_max, policy.delay_max);
      out.stmap = delay_augment(in.stmap, d);
      params = "delay=" + std::to_string(d);
      break;
    }
    case 3: {
      std::array<double, 9> m;
      for (double& v : m) v = rng.uniform(policy.light_lo, policy.light_hi);
      out.stmap = lighting_augment(in.stmap, m);
      params = "matrix=";
      for (std::size_t i = 0; i < m.size(); ++i) {
        if (i) params += ';';
        params += fmt(m[i]);
      }
      break;
    }
    case 4: {
      const std::vector<int> perm = rng.permutation(in.stmap.n_rois);
      out.stmap = motion_augment(in.stmap, perm);
      params = "perm=";
      for (std::size_t i = 0; i < perm.size(); ++i) {
        if (i) params += ';';
        params += std::to_string(perm[i]);
      }
      break;
    }
  }
  if (params_out) *params_out = params;
  return out;
}

}  // namespace greip
