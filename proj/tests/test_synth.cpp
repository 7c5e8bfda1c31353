#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "greip/metrics.hpp"
#include "greip/rng.hpp"
#include "greip/synth.hpp"

using namespace greip;

namespace {

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

std::vector<double> channel_trace(const STMap& m, int roi, int channel) {
  std::vector<double> out(static_cast<std::size_t>(m.n_frames));
  for (int t = 0; t < m.n_frames; ++t)
    out[static_cast<std::size_t>(t)] = m.at(roi, t, channel);
  return out;
}

}  // namespace

TEST_CASE("pulse generator puts its spectral peak at the requested rate") {
  Rng rng(31);
  BvpParams p;
  p.hr_bpm = 72.0;
  p.harmonic_ratio = 0.3;
  auto bvp = generate_bvp(p, 1800, 30.0, rng);
  REQUIRE(hr_from_bvp(bvp, 30.0) == Catch::Approx(72.0).margin(0.5));
}

TEST_CASE("pulse generator reports the exact mean instantaneous rate") {
  Rng rng(32);
  BvpParams p;
  p.hr_bpm = 90.0;
  auto t = generate_bvp_trace(p, 512, 30.0, rng);
  REQUIRE(t.mean_hr_bpm == 90.0);
  p.hrv_depth = 0.05;
  p.hrv_freq_hz = 0.1;
  auto t2 = generate_bvp_trace(p, 512, 30.0, rng);
  REQUIRE(std::abs(t2.mean_hr_bpm - 90.0) <= 90.0 * 0.05);
  REQUIRE(t2.mean_hr_bpm != 90.0);
}

TEST_CASE("pulse generator validates parameters") {
  Rng rng(33);
  BvpParams p;
  p.hr_bpm = 200.0;
  REQUIRE_THROWS_AS(generate_bvp(p, 256, 30.0, rng), std::invalid_argument);
  BvpParams q;
  REQUIRE_THROWS_AS(generate_bvp(q, 0, 30.0, rng), std::invalid_argument);
}

TEST_CASE("clean renders are affine images of the pulse in every trace") {
  BvpParams p;
  p.hr_bpm = 66.0;
  p.harmonic_ratio = 0.25;
  Sample s = render_stmap(p, domain_preset('A'), 16, 256, 977);
  REQUIRE(s.has_bvp());
  REQUIRE(s.has_hr());
  REQUIRE(s.hr_bpm == Catch::Approx(66.0));
  for (int r = 0; r < s.stmap.n_rois; ++r) {
    for (int c = 0; c < 3; ++c) {
      const double rho = pearson(channel_trace(s.stmap, r, c), s.bvp);
      REQUIRE(std::abs(rho) >= 0.999);
      REQUIRE(rho > 0.0);
    }
  }
}

TEST_CASE("sensor delay shifts traces but not labels") {
  BvpParams p;
  p.hr_bpm = 75.0;
  DomainProfile clean = domain_preset('A');
  DomainProfile delayed = clean;
  delayed.delay_frames = 6;

  Sample a = render_stmap(p, clean, 8, 256, 1234);
  Sample b = render_stmap(p, delayed, 8, 256, 1234);
  REQUIRE(a.bvp == b.bvp);
  REQUIRE(a.hr_bpm == b.hr_bpm);
  REQUIRE(a.stmap.values != b.stmap.values);

  // Native clock is 30 fps, so the shifted trace must line up with the
  // undelayed one six frames later.
  auto ta = channel_trace(a.stmap, 3, 1);
  auto tb = channel_trace(b.stmap, 3, 1);
  std::vector<double> head(tb.begin(), tb.end() - 6);
  std::vector<double> tail(ta.begin() + 6, ta.end());
  REQUIRE(pearson(head, tail) >= 0.999);
}

TEST_CASE("a certain motion event permutes rows without changing their content") {
  BvpParams p;
  p.hr_bpm = 80.0;
  DomainProfile still = domain_preset('A');
  DomainProfile moving = still;
  moving.motion_event_rate = 1.0;

  Sample a = render_stmap(p, still, 12, 128, 555);
  Sample b = render_stmap(p, moving, 12, 128, 555);

  auto rows_of = [](const STMap& m) {
    std::vector<std::vector<double>> rows;
    for (int r = 0; r < m.n_rois; ++r) {
      std::vector<double> row;
      for (int t = 0; t < m.n_frames; ++t)
        for (int c = 0; c < m.n_channels; ++c) row.push_back(m.at(r, t, c));
      rows.push_back(std::move(row));
    }
    return rows;
  };
  auto ra = rows_of(a.stmap);
  auto rb = rows_of(b.stmap);
  REQUIRE(ra != rb);
  std::sort(ra.begin(), ra.end());
  std::sort(rb.begin(), rb.end());
  REQUIRE(ra == rb);
}

TEST_CASE("domain presets satisfy the profile contract") {
  for (char d : {'A', 'B', 'C', 'D'}) {
    DomainProfile p = domain_preset(d);
    REQUIRE(p.name == std::string(1, d));
    REQUIRE_NOTHROW(p.validate());
  }
  REQUIRE(domain_preset('A').camera_gamma == 1.0);
  REQUIRE(domain_preset('B').camera_gamma > 1.5);
  REQUIRE(domain_preset('C').native_fps < 30.0);
  REQUIRE(domain_preset('D').motion_event_rate >= 0.5);
  REQUIRE(domain_preset('D').delay_frames > 0);
  REQUIRE_THROWS_AS(domain_preset('E'), std::invalid_argument);
}

TEST_CASE("profile validation catches bad fields") {
  DomainProfile p = domain_preset('A');
  p.skin_weights = {0.5, 0.3, 0.2};
  REQUIRE_THROWS_AS(p.validate(), std::invalid_argument);
  DomainProfile q = domain_preset('A');
  q.motion_event_rate = 1.5;
  REQUIRE_THROWS_AS(q.validate(), std::invalid_argument);
}

TEST_CASE("generate_domain is deterministic with per-sample substreams") {
  DomainProfile prof = domain_preset('B');
  auto d1 = generate_domain(prof, 6, 42, 1, 50.0, 110.0, 16, 64);
  auto d2 = generate_domain(prof, 6, 42, 1, 50.0, 110.0, 16, 64);
  auto d3 = generate_domain(prof, 3, 42, 1, 50.0, 110.0, 16, 64);
  REQUIRE(d1.size() == 6);
  for (std::size_t i = 0; i < d1.size(); ++i) {
    REQUIRE(d1[i].stmap.values == d2[i].stmap.values);
    REQUIRE(d1[i].hr_bpm == d2[i].hr_bpm);
  }
  for (std::size_t i = 0; i < d3.size(); ++i)
    REQUIRE(d1[i].stmap.values == d3[i].stmap.values);

  bool all_same_hr = true;
  for (const Sample& s : d1) {
    REQUIRE(s.domain_id == 1);
    REQUIRE(s.hr_bpm >= 50.0);
    REQUIRE(s.hr_bpm <= 110.0);
    REQUIRE(s.has_bvp());
    if (s.hr_bpm != d1[0].hr_bpm) all_same_hr = false;
    REQUIRE_NOTHROW(s.stmap.validate());
  }
  REQUIRE_FALSE(all_same_hr);
}

TEST_CASE("different master seeds give different domains") {
  DomainProfile prof = domain_preset('A');
  auto d1 = generate_domain(prof, 2, 1, 0, 50.0, 110.0, 8, 64);
  auto d2 = generate_domain(prof, 2, 2, 0, 50.0, 110.0, 8, 64);
  REQUIRE(d1[0].stmap.values != d2[0].stmap.values);
}
