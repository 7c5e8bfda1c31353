#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "greip/tensor.hpp"

namespace greip {

// Adam with bias correction. State is kept per parameter slot and validated
// against the parameter list on every step.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  long long step = 0;
};

inline void adam_step(std::vector<Tensor>& params, AdamState& state, double lr,
                      double beta1 = 0.9, double beta2 = 0.999,
                      double eps = 1e-8) {
  if (state.step == 0 && state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(static_cast<std::size_t>(params[i].numel()), 0.0);
      state.v[i].assign(static_cast<std::size_t>(params[i].numel()), 0.0);
    }
  }
  if (state.m.size() != params.size())
    throw std::invalid_argument("adam_step: state does not match parameter list");
  state.step += 1;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (!p.requires_grad())
      throw std::invalid_argument("adam_step: parameter without gradient slot");
    const std::vector<double>& g = p.grad();
    if (state.m[i].size() != g.size())
      throw std::invalid_argument("adam_step: state shape drifted from parameter");
    std::vector<double>& val = p.mutable_data();
    std::vector<double>& m = state.m[i];
    std::vector<double>& v = state.v[i];
    for (std::size_t j = 0; j < g.size(); ++j) {
      const double gj = g[j];
      if (!std::isfinite(gj))
        throw std::runtime_error("adam_step: non-finite gradient");
      m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
      v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
      const double mh = m[j] / c1;
      const double vh = v[j] / c2;
      val[j] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

// Central-difference check of a scalar-valued function at one point.
// Returns max over coordinates of |analytic - numeric| / max(1, |numeric|).
// kink_hit reports whether any piecewise op evaluated within kink_window of
// its kink during any of the evaluations; such results are unreliable and
// the caller should resample. The default window is deliberately generous;
// pass something like 10 * step when f pushes thousands of values through
// piecewise ops, otherwise nearly every point is rejected for proximity
// that central differences do not actually feel.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& x, double step, bool& kink_hit,
                         double kink_window = kKinkWindow) {
  Tensor xg(x.shape(), x.data(), true);
  const bool prev_armed = KinkTracker::armed();
  const bool prev_hit = KinkTracker::hit();
  const double prev_window = KinkTracker::window();
  KinkTracker::armed() = true;
  KinkTracker::hit() = false;
  KinkTracker::window() = kink_window;

  Tensor y = f(xg);
  if (y.numel() != 1)
    throw std::invalid_argument("grad_check: function must return a scalar");
  backward(y);
  std::vector<double> analytic = xg.grad();

  double max_err = 0.0;
  {
    NoGradGuard ng;
    std::vector<double> probe(x.data());
    for (std::size_t i = 0; i < probe.size(); ++i) {
      const double orig = probe[i];
      probe[i] = orig + step;
      const double fp = f(Tensor(x.shape(), probe)).item();
      probe[i] = orig - step;
      const double fm = f(Tensor(x.shape(), probe)).item();
      probe[i] = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      const double err =
          std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
      max_err = std::max(max_err, err);
    }
  }

  kink_hit = KinkTracker::hit();
  KinkTracker::armed() = prev_armed;
  KinkTracker::hit() = prev_hit;
  KinkTracker::window() = prev_window;
  return max_err;
}

inline double grad_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& x, double step = 1e-5) {
  bool hit = false;
  return grad_check(f, x, step, hit);
}

// Runs grad_check at n_points random points drawn from `sampler`, resampling
// any point whose evaluation strays within kink_window of a piecewise kink.
// Returns the max relative error over all accepted points.
inline double grad_check_sampled(const std::function<Tensor(const Tensor&)>& f,
                                 const std::function<Tensor()>& sampler,
                                 int n_points, double step = 1e-5,
                                 int max_resamples = 200,
                                 double kink_window = kKinkWindow) {
  double worst = 0.0;
  int budget = max_resamples;
  for (int i = 0; i < n_points; ++i) {
    for (;;) {
      Tensor x = sampler();
      bool hit = false;
      const double err = grad_check(f, x, step, hit, kink_window);
      if (!hit) {
        worst = std::max(worst, err);
        break;
      }
      if (--budget < 0)
        throw std::runtime_error(
            "grad_check_sampled: could not find kink-free sample points");
    }
  }
  return worst;
}

struct MaskedGradCheck {
  double max_err = 0.0;
  int checked = 0;
  int skipped = 0;
};

// Central-difference check that validates each coordinate independently.
// Point rejection breaks down on large compositions: with thousands of
// values flowing through piecewise ops, some element sits near a kink in
// nearly every evaluation, yet that only corrupts the difference for the
// coordinates that actually push it across. So instead of proximity, this
// compares the branch signature of the two endpoint evaluations and skips
// exactly the coordinates where some piecewise op changed branch; everywhere
// else the composition is smooth along the probed segment and the central
// difference is reliable. When max_coords > 0, at most that many
// stride-sampled coordinates are probed, with `offset` rotating the sample.
inline MaskedGradCheck grad_check_masked(
    const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
    double step = 1e-5, int max_coords = 0, int offset = 0) {
  Tensor xg(x.shape(), x.data(), true);
  Tensor y = f(xg);
  if (y.numel() != 1)
    throw std::invalid_argument("grad_check_masked: function must return a scalar");
  backward(y);
  const std::vector<double> analytic = xg.grad();

  const std::size_t n = analytic.size();
  std::size_t stride = 1;
  if (max_coords > 0 && n > static_cast<std::size_t>(max_coords))
    stride = (n + static_cast<std::size_t>(max_coords) - 1) /
             static_cast<std::size_t>(max_coords);

  const bool prev_armed = KinkTracker::armed();
  const bool prev_hit = KinkTracker::hit();
  const bool prev_rec = KinkTracker::recording();
  const double prev_window = KinkTracker::window();
  KinkTracker::armed() = true;
  KinkTracker::recording() = true;
  KinkTracker::window() = 0.0;

  MaskedGradCheck out;
  {
    NoGradGuard ng;
    std::vector<double> probe(x.data());
    for (std::size_t i = stride > 1 ? static_cast<std::size_t>(offset) % stride : 0;
         i < n; i += stride) {
      const double orig = probe[i];
      KinkTracker::signature() = 1469598103934665603ULL;
      probe[i] = orig + step;
      const double fp = f(Tensor(x.shape(), probe)).item();
      const std::uint64_t sig_p = KinkTracker::signature();
      KinkTracker::signature() = 1469598103934665603ULL;
      probe[i] = orig - step;
      const double fm = f(Tensor(x.shape(), probe)).item();
      const std::uint64_t sig_m = KinkTracker::signature();
      probe[i] = orig;
      if (sig_p != sig_m) {
        ++out.skipped;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * step);
      const double err =
          std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
      out.max_err = std::max(out.max_err, err);
      ++out.checked;
    }
  }

  KinkTracker::armed() = prev_armed;
  KinkTracker::hit() = prev_hit;
  KinkTracker::recording() = prev_rec;
  KinkTracker::window() = prev_window;
  return out;
}

}  // namespace greip
