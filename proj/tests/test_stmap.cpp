#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>

#include "greip/rng.hpp"
#include "greip/stmap.hpp"

using namespace greip;

namespace {

STMap random_map(Rng& rng, int rois, int frames) {
  STMap m(rois, frames, 3);
  for (double& v : m.values) v = rng.uniform();
  return m;
}

std::string temp_path(const char* name) {
  return std::string("/tmp/greip_test_") + name;
}

}  // namespace

TEST_CASE("normalize_rows maps each trace to [0,1] and constants to 0.5") {
  STMap m(2, 4, 3);
  for (int t = 0; t < 4; ++t) {
    m.at(0, t, 0) = 0.2 + 0.1 * t;  // 0.2 .. 0.5
    m.at(0, t, 1) = 0.7;            // constant
    m.at(0, t, 2) = 1.0 - 0.25 * t;
    for (int c = 0; c < 3; ++c) m.at(1, t, c) = 0.3;
  }
  STMap n = normalize_rows(m);
  REQUIRE(n.at(0, 0, 0) == Catch::Approx(0.0).margin(1e-15));
  REQUIRE(n.at(0, 3, 0) == Catch::Approx(1.0));
  REQUIRE(n.at(0, 1, 0) == Catch::Approx(1.0 / 3.0));
  for (int t = 0; t < 4; ++t) {
    REQUIRE(n.at(0, t, 1) == 0.5);
    REQUIRE(n.at(1, t, 0) == 0.5);
  }
  REQUIRE(n.at(0, 0, 2) == 1.0);
  REQUIRE(n.at(0, 3, 2) == 0.0);
}

TEST_CASE("normalize_rows is idempotent bit for bit") {
  Rng rng(3);
  STMap m = random_map(rng, 8, 32);
  STMap once = normalize_rows(m);
  STMap twice = normalize_rows(once);
  REQUIRE(once.values == twice.values);
}

TEST_CASE("window crops the frame axis") {
  Rng rng(4);
  STMap m = random_map(rng, 4, 40);
  STMap w = window(m, 10, 16);
  REQUIRE(w.n_frames == 16);
  REQUIRE(w.n_rois == 4);
  for (int r = 0; r < 4; ++r)
    for (int t = 0; t < 16; ++t)
      for (int c = 0; c < 3; ++c) REQUIRE(w.at(r, t, c) == m.at(r, 10 + t, c));
  REQUIRE_THROWS_AS(window(m, 30, 16), std::invalid_argument);
  REQUIRE_THROWS_AS(window(m, -1, 16), std::invalid_argument);
}

TEST_CASE("sliding window starts advance by the step") {
  REQUIRE(sliding_window_starts(270, 256, 5) == std::vector<int>{0, 5, 10});
  REQUIRE(sliding_window_starts(255, 256, 5).empty());
  REQUIRE(sliding_window_starts(256, 256, 5) == std::vector<int>{0});
}

TEST_CASE("stm1 round trip preserves payload and flags") {
  Rng rng(5);
  Sample s;
  s.stmap = random_map(rng, 6, 20);
  s.hr_bpm = 71.25;
  s.bvp.resize(20);
  for (double& v : s.bvp) v = rng.uniform(-1.0, 1.0);

  const std::string path = temp_path("roundtrip.stm1");
  write_stm1(path, s);
  Sample r = read_stm1(path);
  REQUIRE(r.stmap.n_rois == 6);
  REQUIRE(r.stmap.n_frames == 20);
  REQUIRE(r.stmap.n_channels == 3);
  REQUIRE(r.stmap.frame_rate_hz == Catch::Approx(30.0));
  REQUIRE(r.has_hr());
  REQUIRE(r.hr_bpm == Catch::Approx(71.25).margin(1e-5));
  REQUIRE(r.has_bvp());
  REQUIRE(r.bvp.size() == 20);
  for (std::size_t i = 0; i < s.stmap.values.size(); ++i)
    REQUIRE(r.stmap.values[i] ==
            Catch::Approx(s.stmap.values[i]).margin(1e-6));
  for (std::size_t i = 0; i < s.bvp.size(); ++i)
    REQUIRE(r.bvp[i] == Catch::Approx(s.bvp[i]).margin(1e-6));

  Sample bare;
  bare.stmap = random_map(rng, 2, 8);
  write_stm1(path, bare);
  Sample rb = read_stm1(path);
  REQUIRE_FALSE(rb.has_hr());
  REQUIRE_FALSE(rb.has_bvp());
}

TEST_CASE("stm1 reader rejects corrupt files") {
  const std::string path = temp_path("corrupt.stm1");
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOPE";
  }
  REQUIRE_THROWS_AS(read_stm1(path), std::runtime_error);

  Rng rng(6);
  Sample s;
  s.stmap = random_map(rng, 2, 8);
  write_stm1(path, s);
  {
    std::ifstream in(path, std::ios::binary);
    std::string data((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    data.resize(data.size() - 3);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << data;
  }
  REQUIRE_THROWS_AS(read_stm1(path), std::runtime_error);
  REQUIRE_THROWS_AS(read_stm1("/tmp/greip_does_not_exist.stm1"),
                    std::runtime_error);
}

TEST_CASE("csv export writes one line per roi channel pair") {
  Rng rng(7);
  STMap m = random_map(rng, 3, 5);
  const std::string path = temp_path("map.csv");
  write_stmap_csv(path, m);
  std::ifstream in(path);
  REQUIRE(in.good());
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  REQUIRE(lines == 1 + 3 * 3);
}

TEST_CASE("stmap validation rejects out-of-range values") {
  STMap m(1, 4, 3);
  m.at(0, 0, 0) = 1.5;
  REQUIRE_THROWS_AS(m.validate(), std::invalid_argument);
  STMap two_channel;
  two_channel.n_rois = 1;
  two_channel.n_frames = 4;
  two_channel.n_channels = 2;
  two_channel.values.assign(8, 0.5);
  REQUIRE_THROWS_AS(two_channel.validate(), std::invalid_argument);
}

TEST_CASE("stm1 rejects bvp length mismatch") {
  Rng rng(8);
  Sample s;
  s.stmap = random_map(rng, 2, 8);
  s.bvp.assign(5, 0.0);
  REQUIRE_THROWS_AS(write_stm1(temp_path("mismatch.stm1"), s),
                    std::invalid_argument);
}
