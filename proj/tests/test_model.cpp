#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "greip/model.hpp"
#include "greip/synth.hpp"

using namespace greip;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n_rois = 16;
  cfg.n_frames = 16;
  cfg.dim = 8;
  return cfg;
}

Tensor random_input(Rng& rng, const ModelConfig& cfg, int batch) {
  std::vector<double> v(static_cast<std::size_t>(batch) * cfg.channels * cfg.n_rois *
                        cfg.n_frames);
  for (double& x : v) x = rng.uniform();
  return Tensor({batch, cfg.channels, cfg.n_rois, cfg.n_frames}, std::move(v));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (long long i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(a.data()[static_cast<std::size_t>(i)] -
                             b.data()[static_cast<std::size_t>(i)]));
  return m;
}

std::string temp_path(const char* name) {
  return std::string("/tmp/greip_model_test_") + name;
}

}  // namespace

TEST_CASE("parameter count matches the layer arithmetic", "[model]") {
  GreipModel m(ModelConfig{}, 7);
  // Two encoders of four 3x3 conv blocks (3->16->32->64->128), the
  // statistics MLP, two fusion kernels, the upsampling head and the scalar
  // head, summed by hand.
  const long long enc = (16 * 3 * 9 + 16) + (32 * 16 * 9 + 32) + (64 * 32 * 9 + 64) +
                        (128 * 64 * 9 + 128);
  const long long nfel = 128 * 128 + 128 + 128 * 256 + 256;
  const long long nol = 2 * 128 * 128 * 9;
  const long long bvp = (64 * 128 * 9 + 64) + (32 * 64 * 9 + 32) + (16 * 32 * 9 + 16) +
                        (8 * 16 * 9 + 8) + (1 * 8 * 9 + 1);
  const long long hr = 128 + 1;
  REQUIRE(m.param_count() == 2 * enc + nfel + nol + bvp + hr);
  REQUIRE(m.param_count() < 2'000'000);
}

TEST_CASE("config validation", "[model]") {
  ModelConfig cfg;
  cfg.n_rois = 24;
  REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = ModelConfig{};
  cfg.n_frames = 100;
  REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = ModelConfig{};
  cfg.channels = 1;
  REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = ModelConfig{};
  cfg.dim = 2;
  REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("predict shapes and bundle normalization", "[model]") {
  const ModelConfig cfg = tiny_config();
  GreipModel m(cfg, 11);
  Rng rng(3);
  Tensor x = random_input(rng, cfg, 2);

  Prediction p = m.predict(x, true, true);
  REQUIRE(p.bvp.shape() == Shape{2, cfg.n_frames});
  REQUIRE(p.hr.shape() == Shape{2});
  REQUIRE(p.rppg.map.shape() == Shape{2, cfg.dim, 1, 1});
  REQUIRE(p.rppg.pooled_raw.shape() == Shape{2, cfg.dim});
  REQUIRE(p.noise.map.defined());
  for (int b = 0; b < 2; ++b) {
    double s = 0.0;
    for (int c = 0; c < cfg.dim; ++c) {
      const double v = p.rppg.vec.data()[static_cast<std::size_t>(b * cfg.dim + c)];
      s += v * v;
    }
    REQUIRE(std::abs(std::sqrt(s) - 1.0) < 1e-12);
  }

  Prediction solo = m.predict(x, false, false);
  REQUIRE_FALSE(solo.noise.map.defined());
  REQUIRE(solo.bvp.shape() == Shape{2, cfg.n_frames});
}

TEST_CASE("larger temporal extent upsamples back to the input length", "[model]") {
  ModelConfig cfg;
  cfg.n_rois = 16;
  cfg.n_frames = 256;
  cfg.dim = 16;
  GreipModel m(cfg, 5);
  Rng rng(9);
  Tensor x = random_input(rng, cfg, 1);
  Prediction p = m.predict(x, false, false);
  REQUIRE(p.rppg.map.shape() == Shape{1, 16, 1, 16});
  REQUIRE(p.bvp.shape() == Shape{1, 256});
}

TEST_CASE("adain matches per-channel reference", "[model]") {
  Rng rng(21);
  const int b_count = 2, c_count = 3, h = 4, w = 5;
  std::vector<double> xv(b_count * c_count * h * w), gv(b_count * c_count),
      bv(b_count * c_count);
  for (double& v : xv) v = rng.uniform(-1.0, 1.0);
  for (double& v : gv) v = rng.uniform(0.5, 1.5);
  for (double& v : bv) v = rng.uniform(-0.5, 0.5);
  Tensor x({b_count, c_count, h, w}, xv);
  Tensor gamma({b_count, c_count}, gv);
  Tensor beta({b_count, c_count}, bv);
  Tensor y = adain(x, gamma, beta);

  for (int b = 0; b < b_count; ++b)
    for (int c = 0; c < c_count; ++c) {
      const std::size_t off = static_cast<std::size_t>((b * c_count + c) * h * w);
      double mu = 0.0;
      for (int i = 0; i < h * w; ++i) mu += xv[off + static_cast<std::size_t>(i)];
      mu /= h * w;
      double var = 0.0;
      for (int i = 0; i < h * w; ++i) {
        const double d = xv[off + static_cast<std::size_t>(i)] - mu;
        var += d * d;
      }
      var /= h * w;
      const double sigma = std::sqrt(var + kInstanceNormEps);
      for (int i = 0; i < h * w; ++i) {
        const double want =
            gv[static_cast<std::size_t>(b * c_count + c)] *
                (xv[off + static_cast<std::size_t>(i)] - mu) / sigma +
            bv[static_cast<std::size_t>(b * c_count + c)];
        REQUIRE(std::abs(y.data()[off + static_cast<std::size_t>(i)] - want) < 1e-12);
      }
    }
}

TEST_CASE("adain with matching statistics inverts itself", "[model]") {
  Rng rng(33);
  const int b_count = 2, c_count = 4, h = 3, w = 6;
  std::vector<double> xv(b_count * c_count * h * w);
  for (double& v : xv) v = rng.uniform(-1.0, 1.0);
  Tensor x({b_count, c_count, h, w}, xv);
  std::vector<double> gv(b_count * c_count), bv(b_count * c_count);
  for (int b = 0; b < b_count; ++b)
    for (int c = 0; c < c_count; ++c) {
      const std::size_t off = static_cast<std::size_t>((b * c_count + c) * h * w);
      double mu = 0.0;
      for (int i = 0; i < h * w; ++i) mu += xv[off + static_cast<std::size_t>(i)];
      mu /= h * w;
      double var = 0.0;
      for (int i = 0; i < h * w; ++i) {
        const double d = xv[off + static_cast<std::size_t>(i)] - mu;
        var += d * d;
      }
      gv[static_cast<std::size_t>(b * c_count + c)] = std::sqrt(var / (h * w));
      bv[static_cast<std::size_t>(b * c_count + c)] = mu;
    }
  Tensor y = adain(x, Tensor({b_count, c_count}, gv), Tensor({b_count, c_count}, bv));
  for (long long i = 0; i < x.numel(); ++i)
    REQUIRE(std::abs(y.data()[static_cast<std::size_t>(i)] -
                     x.data()[static_cast<std::size_t>(i)]) < 1e-3);

  // and with gamma = 1, beta = mu, each output plane's mean is beta
  Tensor z = adain(x, Tensor::full({b_count, c_count}, 1.0),
                   Tensor({b_count, c_count}, bv));
  for (int b = 0; b < b_count; ++b)
    for (int c = 0; c < c_count; ++c) {
      const std::size_t off = static_cast<std::size_t>((b * c_count + c) * h * w);
      double mu = 0.0;
      for (int i = 0; i < h * w; ++i) mu += z.data()[off + static_cast<std::size_t>(i)];
      mu /= h * w;
      REQUIRE(std::abs(mu - bv[static_cast<std::size_t>(b * c_count + c)]) < 1e-12);
    }
}

TEST_CASE("zeroed scalar head weights leave only the bias", "[model]") {
  const ModelConfig cfg = tiny_config();
  GreipModel m(cfg, 29);
  Tensor w = m.parameter("hr.w");
  std::fill(w.mutable_data().begin(), w.mutable_data().end(), 0.0);
  Rng rng(14);
  Tensor x = random_input(rng, cfg, 3);
  Prediction p = m.predict(x, false, false);
  for (int b = 0; b < 3; ++b)
    REQUIRE(p.hr.data()[static_cast<std::size_t>(b)] == 80.0);
}

TEST_CASE("fusion with zeroed second kernel and statistics mlp is exact identity",
          "[model]") {
  const ModelConfig cfg = tiny_config();
  GreipModel m(cfg, 13);
  for (const char* name : {"nol.k2", "nfel.w2", "nfel.b2"}) {
    Tensor t = m.parameter(name);
    std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
  }
  Rng rng(4);
  Tensor x = random_input(rng, cfg, 2);
  FeatureBundle phy = m.encode(x, GreipModel::Branch::kRppg);
  FeatureBundle noi = m.encode(x, GreipModel::Branch::kNoise);
  Tensor fused = m.nol(phy.map, noi.map);
  REQUIRE(max_abs_diff(fused, phy.map) == 0.0);
}

TEST_CASE("statistics mlp starts neutral", "[model]") {
  const ModelConfig cfg = tiny_config();
  GreipModel m(cfg, 17);
  Rng rng(6);
  Tensor x = random_input(rng, cfg, 1);
  FeatureBundle noi = m.encode(x, GreipModel::Branch::kNoise);
  auto [gamma, beta] = m.nfel(noi.map);
  for (long long i = 0; i < gamma.numel(); ++i) {
    REQUIRE(gamma.data()[static_cast<std::size_t>(i)] == 1.0);
    REQUIRE(beta.data()[static_cast<std::size_t>(i)] == 0.0);
  }
}

TEST_CASE("input layout maps roi rows to height and frames to width", "[model]") {
  const ModelConfig cfg = tiny_config();
  GreipModel m(cfg, 19);
  Sample s;
  s.stmap.n_rois = cfg.n_rois;
  s.stmap.n_frames = cfg.n_frames;
  s.stmap.n_channels = 3;
  s.stmap.values.resize(static_cast<std::size_t>(cfg.n_rois) * cfg.n_frames * 3);
  Rng rng(8);
  for (double& v : s.stmap.values) v = rng.uniform();
  Tensor x = m.input_from_samples({&s});
  REQUIRE(x.shape() == Shape{1, 3, cfg.n_rois, cfg.n_frames});
  for (int c = 0; c < 3; ++c)
    for (int r = 0; r < cfg.n_rois; r += 5)
      for (int t = 0; t < cfg.n_frames; t += 3) {
        const std::size_t idx = static_cast<std::size_t>(
            (c * cfg.n_rois + r) * cfg.n_frames + t);
        REQUIRE(x.data()[idx] == s.stmap.at(r, t, c));
      }

  Sample bad = s;
  bad.stmap.n_frames = 32;
  bad.stmap.values.resize(static_cast<std::size_t>(cfg.n_rois) * 32 * 3, 0.0);
  REQUIRE_THROWS_AS(m.input_from_samples({&bad}), std::invalid_argument);
  REQUIRE_THROWS_AS(m.input_from_samples({}), std::invalid_argument);
}

TEST_CASE("seed determinism of initialization", "[model]") {
  const ModelConfig cfg = tiny_config();
  GreipModel a(cfg, 42), b(cfg, 42), c(cfg, 43);
  const auto& pa = a.named_parameters();
  const auto& pb = b.named_parameters();
  const auto& pc = c.named_parameters();
  bool any_diff_c = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    REQUIRE(pa[i].first == pb[i].first);
    REQUIRE(pa[i].second.data() == pb[i].second.data());
    if (pa[i].second.data() != pc[i].second.data()) any_diff_c = true;
  }
  REQUIRE(any_diff_c);
}

TEST_CASE("scalar head bias starts at resting rate", "[model]") {
  GreipModel m(tiny_config(), 3);
  REQUIRE(m.parameter("hr.b").data()[0] == 80.0);
  REQUIRE_THROWS_AS(m.parameter("no.such"), std::invalid_argument);
}

TEST_CASE("single-branch prediction leaves the twin branch untouched", "[model]") {
  const ModelConfig cfg = tiny_config();
  GreipModel m(cfg, 23);
  Rng rng(12);
  Tensor x = random_input(rng, cfg, 2);
  Prediction p = m.predict(x, false, false);
  Tensor loss = add(sum(p.bvp), sum(p.hr));
  backward(loss);
  double enc_rppg_grad = 0.0;
  for (const auto& [name, t] : m.named_parameters()) {
    double g = 0.0;
    if (t.node->grad.empty()) continue;
    for (double v : t.node->grad) g += std::abs(v);
    if (name.rfind("enc_noise.", 0) == 0 || name.rfind("nfel.", 0) == 0 ||
        name.rfind("nol.", 0) == 0) {
      REQUIRE(g == 0.0);
    }
    if (name == "enc_rppg.block1.w") enc_rppg_grad = g;
  }
  REQUIRE(enc_rppg_grad > 0.0);
}

TEST_CASE("checkpoint round trip is bit exact", "[model]") {
  const ModelConfig cfg = tiny_config();
  GreipModel a(cfg, 100), b(cfg, 200);
  bool differ = false;
  for (std::size_t i = 0; i < a.named_parameters().size(); ++i)
    if (a.named_parameters()[i].second.data() != b.named_parameters()[i].second.data())
      differ = true;
  REQUIRE(differ);

  const std::string path = temp_path("roundtrip.grck");
  a.save(path);
  b.load(path);
  for (std::size_t i = 0; i < a.named_parameters().size(); ++i) {
    REQUIRE(a.named_parameters()[i].first == b.named_parameters()[i].first);
    REQUIRE(a.named_parameters()[i].second.data() ==
            b.named_parameters()[i].second.data());
  }
  std::remove(path.c_str());
}

TEST_CASE("checkpoint rejects wrong configuration and corrupt files", "[model]") {
  const ModelConfig cfg = tiny_config();
  GreipModel a(cfg, 100);
  const std::string path = temp_path("guard.grck");
  a.save(path);

  ModelConfig other = cfg;
  other.dim = 16;
  GreipModel c(other, 100);
  REQUIRE_THROWS_WITH(c.load(path),
                      Catch::Matchers::ContainsSubstring("different model configuration"));

  const std::string data = detail::read_file(path);
  detail::write_file(path, data.substr(0, data.size() / 2));
  GreipModel b(cfg, 5);
  REQUIRE_THROWS_AS(b.load(path), std::runtime_error);

  detail::write_file(path, std::string("NOPE") + data.substr(4));
  REQUIRE_THROWS_WITH(b.load(path), Catch::Matchers::ContainsSubstring("bad magic"));

  detail::write_file(path, data + "xx");
  REQUIRE_THROWS_WITH(b.load(path), Catch::Matchers::ContainsSubstring("trailing"));
  std::remove(path.c_str());
}
