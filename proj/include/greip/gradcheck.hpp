#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "greip/model.hpp"
#include "greip/objectives.hpp"
#include "greip/optim.hpp"
#include "greip/rng.hpp"
#include "greip/tensor.hpp"

namespace greip {

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  int checked = 0;  // coordinate comparisons that survived the branch mask
  int skipped = 0;  // coordinates where a piecewise op changed branch
};

namespace detail {

inline Tensor random_tensor(Rng& rng, const Shape& shape, double lo, double hi,
                            bool requires_grad = true) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(shape, std::move(v), requires_grad);
}

// A queue whose rows and labels are varied enough to make the relational
// losses non-degenerate: one full push of random features on top of the
// random initial state.
inline FeatureQueue seeded_queue(int dim, int capacity, std::uint64_t seed) {
  Rng rng(seed);
  FeatureQueue q(dim, capacity, derive_seed(seed, "queue"));
  Tensor r_raw = random_tensor(rng, {capacity, dim}, -1.0, 1.0, false);
  Tensor n_raw = random_tensor(rng, {capacity, dim}, -1.0, 1.0, false);
  std::vector<double> labels(static_cast<std::size_t>(capacity));
  for (double& l : labels) l = rng.uniform(55.0, 105.0);
  q.push(l2_normalize_rows(r_raw), r_raw, l2_normalize_rows(n_raw), n_raw, labels);
  return q;
}

}  // namespace detail

// Finite-difference verification of every differentiable piece the training
// objective composes: the four loss terms, AdaIN against both its content and
// style inputs, the interference-statistics and fusion blocks, and a
// scalarized end-to-end prediction. Each case compares reverse-mode gradients
// against central differences at `points` random inputs, resampling any point
// that lands within the kink window of a piecewise operation.
inline std::vector<GradCheckResult> gradient_check_suite(std::uint64_t seed,
                                                         int points = 10,
                                                         double step = 1e-5) {
  using detail::random_tensor;
  std::vector<GradCheckResult> results;
  const auto run_limited = [&](const std::string& name,
                               const std::function<Tensor(const Tensor&)>& f,
                               const std::function<Tensor()>& sampler,
                               int max_coords) {
    GradCheckResult r;
    r.name = name;
    for (int p = 0; p < points; ++p) {
      const MaskedGradCheck c = grad_check_masked(f, sampler(), step, max_coords, p);
      r.max_rel_err = std::max(r.max_rel_err, c.max_err);
      r.checked += c.checked;
      r.skipped += c.skipped;
    }
    if (r.checked == 0)
      throw std::runtime_error("gradient_check_suite: no checkable coordinates in " +
                               name);
    results.push_back(r);
  };
  const auto run = [&](const std::string& name,
                       const std::function<Tensor(const Tensor&)>& f,
                       const std::function<Tensor()>& sampler) {
    run_limited(name, f, sampler, 0);
  };

  {
    Rng rng(derive_seed(seed, "pearson"));
    Tensor target = random_tensor(rng, {3, 24}, -1.0, 1.0, false);
    run(
        "pearson_bvp", [&](const Tensor& x) { return pearson_bvp_loss(x, target); },
        [&] { return random_tensor(rng, {3, 24}, -1.0, 1.0); });
  }

  {
    Rng rng(derive_seed(seed, "hr_l1"));
    Tensor target = random_tensor(rng, {5}, 55.0, 105.0, false);
    run(
        "hr_l1", [&](const Tensor& x) { return hr_l1_loss(x, target); },
        [&] { return random_tensor(rng, {5}, 50.0, 110.0); });
  }

  {
    const std::uint64_t s = derive_seed(seed, "continuity");
    Rng rng(s);
    FeatureQueue q = detail::seeded_queue(8, 16, s);
    std::vector<double> hr(4);
    for (double& v : hr) v = rng.uniform(55.0, 105.0);
    run(
        "continuity",
        [&](const Tensor& x) {
          return continuity_loss(l2_normalize_rows(x), hr, q, kContinuityBandwidth);
        },
        [&] { return random_tensor(rng, {4, 8}, -1.0, 1.0); });
  }

  {
    const std::uint64_t s = derive_seed(seed, "orthogonality");
    Rng rng(s);
    FeatureQueue q = detail::seeded_queue(8, 16, s);
    run(
        "orthogonality",
        [&](const Tensor& x) {
          return orthogonality_loss(l2_normalize_rows(x), x, q, kOrthThreshold);
        },
        [&] { return random_tensor(rng, {3, 8}, -1.0, 1.0); });
  }

  {
    Rng rng(derive_seed(seed, "adain"));
    Tensor gamma = random_tensor(rng, {2, 4}, 0.5, 1.5, false);
    Tensor beta = random_tensor(rng, {2, 4}, -0.5, 0.5, false);
    Tensor content = random_tensor(rng, {2, 4, 3, 5}, 0.0, 1.0, false);
    run(
        "adain_content",
        [&](const Tensor& x) { return mean(adain(x, gamma, beta)); },
        [&] { return random_tensor(rng, {2, 4, 3, 5}, 0.0, 1.0); });
    run(
        "adain_style",
        [&](const Tensor& g) { return mean(adain(content, g, beta)); },
        [&] { return random_tensor(rng, {2, 4}, 0.5, 1.5); });
  }

  // Small enough for fast finite differences, but with a 1x2 feature map so
  // instance statistics stay non-degenerate. The interference MLP's output
  // layer starts at zero by design, which would make the style path constant;
  // the check perturbs it so every branch carries signal.
  ModelConfig tiny;
  tiny.n_rois = 16;
  tiny.n_frames = 32;
  tiny.dim = 8;
  GreipModel model(tiny, derive_seed(seed, "model"));
  {
    Rng rng(derive_seed(seed, "style-weights"));
    for (const char* name : {"nfel.w2", "nfel.b2"}) {
      Tensor p = model.parameter(name);
      for (double& v : p.mutable_data()) v = rng.uniform(-0.3, 0.3);
    }
  }

  {
    Rng rng(derive_seed(seed, "nfel"));
    run(
        "nfel",
        [&](const Tensor& x) {
          auto [gamma, beta] = model.nfel(x);
          return mean(add(gamma, beta));
        },
        [&] { return random_tensor(rng, {2, 8, 2, 4}, -1.0, 1.0); });
  }

  {
    Rng rng(derive_seed(seed, "nol"));
    Tensor z_phy = random_tensor(rng, {2, 8, 2, 4}, -1.0, 1.0, false);
    Tensor z_n = random_tensor(rng, {2, 8, 2, 4}, -1.0, 1.0, false);
    run(
        "nol_content", [&](const Tensor& x) { return mean(model.nol(x, z_n)); },
        [&] { return random_tensor(rng, {2, 8, 2, 4}, -1.0, 1.0); });
    run(
        "nol_style", [&](const Tensor& x) { return mean(model.nol(z_phy, x)); },
        [&] { return random_tensor(rng, {2, 8, 2, 4}, -1.0, 1.0); });
  }

  {
    Rng rng(derive_seed(seed, "predict"));
    run_limited(
        "predict",
        [&](const Tensor& x) {
          Prediction p = model.predict(x, true, true);
          return add(mean(p.bvp), scale(mean(p.hr), 0.01));
        },
        [&] { return random_tensor(rng, {1, 3, 16, 32}, 0.0, 1.0); }, 192);
  }

  return results;
}

}  // namespace greip
