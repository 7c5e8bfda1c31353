#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <vector>

#include "greip/augment.hpp"
#include "greip/rng.hpp"
#include "greip/synth.hpp"

using namespace greip;

namespace {

STMap random_normalized_map(Rng& rng, int rois, int frames) {
  STMap m(rois, frames, 3);
  for (double& v : m.values) v = rng.uniform();
  return normalize_rows(m);
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  return cov / std::sqrt(va * vb);
}

// Least-squares slope of y against x; exact for affine traces.
double slope(const std::vector<double>& y, const std::vector<double>& x) {
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double cov = 0.0, vx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    cov += (x[i] - mx) * (y[i] - my);
    vx += (x[i] - mx) * (x[i] - mx);
  }
  return cov / vx;
}

std::vector<double> channel_trace(const STMap& m, int roi, int channel) {
  std::vector<double> out(static_cast<std::size_t>(m.n_frames));
  for (int t = 0; t < m.n_frames; ++t)
    out[static_cast<std::size_t>(t)] = m.at(roi, t, channel);
  return out;
}

}  // namespace

TEST_CASE("gamma 1 is an exact identity and gamma 2 squares values") {
  Rng rng(21);
  STMap m = random_normalized_map(rng, 6, 32);
  REQUIRE(gamma_augment(m, 1.0).values == m.values);
  STMap g = gamma_augment(m, 2.0);
  for (std::size_t i = 0; i < m.values.size(); ++i)
    REQUIRE(g.values[i] == m.values[i] * m.values[i]);
  REQUIRE_THROWS_AS(gamma_augment(m, 0.0), std::invalid_argument);
}

TEST_CASE("delay then its negation restores the map bit for bit") {
  Rng rng(22);
  STMap m = random_normalized_map(rng, 6, 64);
  for (int d : {1, 7, 15, -4, -15, 64, 0}) {
    STMap shifted = delay_augment(m, d);
    STMap back = delay_augment(shifted, -d);
    REQUIRE(back.values == m.values);
    if (d % 64 != 0) REQUIRE(shifted.values != m.values);
  }
}

TEST_CASE("delay moves content later in time") {
  STMap m(1, 8, 3);
  for (int t = 0; t < 8; ++t)
    for (int c = 0; c < 3; ++c) m.at(0, t, c) = t / 10.0;
  STMap s = delay_augment(m, 2);
  REQUIRE(s.at(0, 2, 0) == m.at(0, 0, 0));
  REQUIRE(s.at(0, 0, 0) == m.at(0, 6, 0));
}

TEST_CASE("framerate round trip is exact on constant and linear maps") {
  for (int factor : {2, 3, 4}) {
    STMap constant(4, 256, 3);
    for (double& v : constant.values) v = 0.7;
    STMap rc = framerate_augment(constant, factor);
    for (double v : rc.values) REQUIRE(v == Catch::Approx(0.7).margin(1e-9));

    STMap linear(2, 256, 3);
    for (int r = 0; r < 2; ++r)
      for (int t = 0; t < 256; ++t)
        for (int c = 0; c < 3; ++c) linear.at(r, t, c) = t / 255.0;
    STMap rl = framerate_augment(linear, factor);
    for (int t = 0; t < 256; ++t)
      REQUIRE(rl.at(0, t, 0) == Catch::Approx(t / 255.0).margin(1e-9));
  }
}

TEST_CASE("framerate output stays in range and differs on wavy maps") {
  BvpParams p;
  p.hr_bpm = 90.0;
  Sample s = render_stmap(p, domain_preset('A'), 8, 256, 31337);
  STMap out = framerate_augment(s.stmap, 4);
  REQUIRE_NOTHROW(out.validate());
  REQUIRE(out.values != s.stmap.values);
  REQUIRE_THROWS_AS(framerate_augment(s.stmap, 1), std::invalid_argument);
}

TEST_CASE("lighting with half identity is a fixpoint on normalized maps") {
  Rng rng(23);
  STMap m = random_normalized_map(rng, 6, 32);
  const std::array<double, 9> half_identity = {0.5, 0, 0, 0, 0.5, 0, 0, 0, 0.5};
  STMap out = lighting_augment(m, half_identity);
  REQUIRE(out.values == m.values);
}

TEST_CASE("lighting flips the pulse correlation iff the mixed slope is negative") {
  BvpParams p;
  p.hr_bpm = 70.0;
  p.harmonic_ratio = 0.2;
  Sample s = render_stmap(p, domain_preset('A'), 6, 256, 2024);

  Rng rng(24);
  int tested = 0;
  while (tested < 12) {
    std::array<double, 9> m;
    for (double& v : m) v = rng.uniform(-0.5, 0.5);
    // Independent prediction: each normalized trace is affine in the pulse,
    // so the mixed green slope is the lighting row applied to the per
    // channel regression slopes.
    bool informative = true;
    for (int roi = 0; roi < s.stmap.n_rois && informative; ++roi) {
      double eff = 0.0;
      for (int d = 0; d < 3; ++d)
        eff += m[static_cast<std::size_t>(3 + d)] *
               slope(channel_trace(s.stmap, roi, d), s.bvp);
      if (std::abs(eff) < 0.05) {
        informative = false;
        break;
      }
      STMap mixed = lighting_augment(s.stmap, m);
      const double rho = pearson(channel_trace(mixed, roi, 1), s.bvp);
      REQUIRE(rho * eff > 0.0);
    }
    if (informative) ++tested;
  }
}

TEST_CASE("motion applies exactly the requested permutation") {
  Rng rng(25);
  STMap m = random_normalized_map(rng, 5, 16);
  const std::vector<int> perm = {3, 0, 4, 1, 2};
  STMap out = motion_augment(m, perm);
  for (int r = 0; r < 5; ++r)
    for (int t = 0; t < 16; ++t)
      for (int c = 0; c < 3; ++c)
        REQUIRE(out.at(r, t, c) == m.at(perm[static_cast<std::size_t>(r)], t, c));
  REQUIRE_THROWS_AS(motion_augment(m, std::vector<int>{0, 0, 1, 2, 3}),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(motion_augment(m, std::vector<int>{0, 1}),
                    std::invalid_argument);
}

TEST_CASE("motion keeps the row multiset") {
  Rng rng(26);
  STMap m = random_normalized_map(rng, 16, 32);
  STMap out = motion_augment(m, rng);
  auto rows_of = [](const STMap& map) {
    std::vector<std::vector<double>> rows;
    for (int r = 0; r < map.n_rois; ++r) {
      std::vector<double> row;
      for (int t = 0; t < map.n_frames; ++t)
        for (int c = 0; c < map.n_channels; ++c) row.push_back(map.at(r, t, c));
      rows.push_back(std::move(row));
    }
    std::sort(rows.begin(), rows.end());
    return rows;
  };
  REQUIRE(rows_of(m) == rows_of(out));
}

TEST_CASE("policy presets are valid mixtures with the tabulated weights") {
  const std::map<std::string, std::array<double, 5>> expected = {
      // (gamma, framerate, delay, lighting, motion)
      {"VIPL-HR", {0.30, 0.20, 0.00, 0.20, 0.30}},
      {"V4V", {0.00, 0.00, 0.30, 0.30, 0.40}},
      {"BUAA", {0.25, 0.15, 0.30, 0.15, 0.15}},
      {"UBFC", {0.10, 0.40, 0.15, 0.15, 0.20}},
      {"PURE", {0.20, 0.10, 0.00, 0.30, 0.40}},
  };
  for (const auto& [name, probs] : expected) {
    AugmentationPolicy p = preset_policy(name);
    REQUIRE(p.p_gamma == Catch::Approx(probs[0]));
    REQUIRE(p.p_framerate == Catch::Approx(probs[1]));
    REQUIRE(p.p_delay == Catch::Approx(probs[2]));
    REQUIRE(p.p_lighting == Catch::Approx(probs[3]));
    REQUIRE(p.p_motion == Catch::Approx(probs[4]));
    REQUIRE_NOTHROW(p.validate());
  }
  REQUIRE_THROWS_AS(preset_policy("NOPE"), std::invalid_argument);
}

TEST_CASE("policy validation rejects a broken mixture") {
  AugmentationPolicy p = preset_policy("V4V");
  p.p_motion = 0.5;
  REQUIRE_THROWS_AS(p.validate(), std::invalid_argument);
  AugmentationPolicy q = preset_policy("V4V");
  q.delay_max = 0;
  REQUIRE_THROWS_AS(q.validate(), std::invalid_argument);
}

TEST_CASE("apply_policy draws the branch the cumulative thresholds dictate") {
  AugmentationPolicy policy = preset_policy("BUAA");
  Rng rng(27);
  STMap m = random_normalized_map(rng, 8, 64);
  Sample s;
  s.stmap = m;
  s.hr_bpm = 75.0;
  s.bvp.assign(64, 0.1);

  // Reimplementation of just the threshold walk, fed by the same stream.
  auto predict = [&policy](std::uint64_t seed) {
    Rng r(seed);
    const double u = r.uniform();
    const double probs[5] = {policy.p_gamma, policy.p_framerate, policy.p_delay,
                             policy.p_lighting, policy.p_motion};
    static const char* tags[5] = {"gamma", "framerate", "delay", "lighting",
                                  "motion"};
    double cum = 0.0;
    for (int i = 0; i < 5; ++i) {
      cum += probs[i];
      if (probs[i] > 0.0 && u <= cum) return std::string(tags[i]);
    }
    return std::string("motion");
  };

  for (std::uint64_t seed = 100; seed < 300; ++seed) {
    Rng r(seed);
    Sample out = apply_policy(s, policy, r);
    REQUIRE(out.augment_tag == predict(seed));
    REQUIRE(out.hr_bpm == s.hr_bpm);
    REQUIRE(out.bvp == s.bvp);
  }
}

TEST_CASE("apply_policy branch frequencies match the mixture") {
  AugmentationPolicy policy = preset_policy("VIPL-HR");
  Rng rng(28);
  STMap m = random_normalized_map(rng, 8, 64);
  Sample s;
  s.stmap = m;

  std::map<std::string, int> counts;
  const int n = 10000;
  Rng draw(90210);
  for (int i = 0; i < n; ++i) {
    Sample out = apply_policy(s, policy, draw);
    counts[out.augment_tag] += 1;
  }
  REQUIRE(counts["delay"] == 0);
  REQUIRE(std::abs(counts["gamma"] / double(n) - 0.30) < 0.02);
  REQUIRE(std::abs(counts["framerate"] / double(n) - 0.20) < 0.02);
  REQUIRE(std::abs(counts["lighting"] / double(n) - 0.20) < 0.02);
  REQUIRE(std::abs(counts["motion"] / double(n) - 0.30) < 0.02);
}

TEST_CASE("apply_policy output maps stay valid") {
  AugmentationPolicy policy = preset_policy("UBFC");
  Rng rng(29);
  BvpParams p;
  p.hr_bpm = 85.0;
  Sample s = render_stmap(p, domain_preset('A'), 16, 256, 777);
  for (int i = 0; i < 50; ++i) {
    Sample out = apply_policy(s, policy, rng);
    REQUIRE_FALSE(out.augment_tag.empty());
    REQUIRE_NOTHROW(out.stmap.validate());
  }
}
