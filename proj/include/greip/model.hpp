#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "greip/rng.hpp"
#include "greip/stmap.hpp"
#include "greip/tensor.hpp"

namespace greip {

struct ModelConfig {
  int n_rois = 64;
  int n_frames = 256;
  int channels = 3;
  int dim = 128;

  void validate() const {
    if (channels != 3) throw std::invalid_argument("model: channels must be 3");
    if (n_rois <= 0 || n_rois % 16 != 0)
      throw std::invalid_argument("model: n_rois must be a positive multiple of 16");
    if (n_frames <= 0 || n_frames % 16 != 0)
      throw std::invalid_argument("model: n_frames must be a positive multiple of 16");
    if (dim < 4) throw std::invalid_argument("model: dim must be at least 4");
  }

  std::string canonical() const {
    return "n_rois=" + std::to_string(n_rois) +
           ";n_frames=" + std::to_string(n_frames) +
           ";channels=" + std::to_string(channels) + ";dim=" + std::to_string(dim);
  }
  std::uint64_t hash() const { return fnv1a64(canonical()); }
};

// Feature-map output of one encoder branch plus its pooled vector, both the
// raw pooled values and the unit-norm version used against the queues.
struct FeatureBundle {
  Tensor map;         // [B, dim, H/16, T/16]
  Tensor pooled_raw;  // [B, dim]
  Tensor vec;         // [B, dim], rows L2-normalized
};

struct Prediction {
  Tensor bvp;  // [B, T]
  Tensor hr;   // [B]
  FeatureBundle rppg;
  FeatureBundle noise;  // empty tensors when the noise branch is off
};

// Adaptive instance normalization: renormalize each (batch, channel) plane
// of `content` and rescale with per-(batch, channel) gamma and beta.
inline Tensor adain(const Tensor& content, const Tensor& gamma,
                    const Tensor& beta) {
  auto [mu, sigma] = channel_instance_stats(content);
  Tensor normalized = div_per_row(sub_per_row(content, mu), sigma);
  return add_per_row(mul_per_row(normalized, gamma), beta);
}

// Dual-branch disentangling network. One encoder extracts the pulse
// representation, a twin encoder extracts the interference representation,
// and a noise-conditioned fusion block re-injects interference statistics
// into the pulse features before the regression heads.
class GreipModel {
 public:
  explicit GreipModel(const ModelConfig& cfg, std::uint64_t seed)
      : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(seed, "model-init"));
    const std::array<int, 5> enc = {cfg_.channels, 16, 32, 64, cfg_.dim};
    for (int i = 0; i < 4; ++i) {
      enc_rppg_[static_cast<std::size_t>(i)] =
          conv_block("enc_rppg.block" + std::to_string(i + 1), enc, i, rng);
    }
    for (int i = 0; i < 4; ++i) {
      enc_noise_[static_cast<std::size_t>(i)] =
          conv_block("enc_noise.block" + std::to_string(i + 1), enc, i, rng);
    }
    const int d = cfg_.dim;
    nfel_w1_ = make_param("nfel.w1", {d, d}, rng, he_std(d));
    nfel_b1_ = make_param("nfel.b1", {d}, rng, 0.0);
    nfel_w2_ = make_param("nfel.w2", {d, 2 * d}, rng, 0.0);
    nfel_b2_ = make_param("nfel.b2", {2 * d}, rng, 0.0);
    nol_k1_ = make_param("nol.k1", {d, d, 3, 3}, rng, he_std(d * 9));
    nol_k2_ = make_param("nol.k2", {d, d, 3, 3}, rng, he_std(d * 9));

    int prev = d;
    for (int i = 0; i < 4; ++i) {
      const int width = std::max(d >> (i + 1), 4);
      bvp_up_[static_cast<std::size_t>(i)].w =
          make_param("bvp.up" + std::to_string(i + 1) + ".w", {width, prev, 3, 3},
                     rng, he_std(prev * 9));
      bvp_up_[static_cast<std::size_t>(i)].b =
          make_param("bvp.up" + std::to_string(i + 1) + ".b", {width}, rng, 0.0);
      prev = width;
    }
    bvp_out_w_ = make_param("bvp.out.w", {1, prev, 3, 3}, rng, he_std(prev * 9));
    bvp_out_b_ = make_param("bvp.out.b", {1}, rng, 0.0);

    hr_w_ = make_param("hr.w", {d, 1}, rng, he_std(d));
    hr_b_ = make_param("hr.b", {1}, rng, 0.0);
    hr_b_.mutable_data()[0] = 80.0;
  }

  const ModelConfig& config() const { return cfg_; }

  enum class Branch { kRppg, kNoise };

  // Stacks samples into the network input layout [B, C, n_rois, n_frames].
  Tensor input_from_samples(const std::vector<const Sample*>& batch) const {
    if (batch.empty()) throw std::invalid_argument("model: empty batch");
    const int b_count = static_cast<int>(batch.size());
    std::vector<double> buf(static_cast<std::size_t>(b_count) * cfg_.channels *
                            cfg_.n_rois * cfg_.n_frames);
    for (int b = 0; b < b_count; ++b) {
      const STMap& m = batch[static_cast<std::size_t>(b)]->stmap;
      if (m.n_rois != cfg_.n_rois || m.n_frames != cfg_.n_frames ||
          m.n_channels != cfg_.channels)
        throw std::invalid_argument("model: sample dims do not match config");
      for (int c = 0; c < cfg_.channels; ++c)
        for (int r = 0; r < cfg_.n_rois; ++r)
          for (int t = 0; t < cfg_.n_frames; ++t)
            buf[static_cast<std::size_t>(
                ((b * cfg_.channels + c) * cfg_.n_rois + r) * cfg_.n_frames + t)] =
                m.at(r, t, c);
    }
    return Tensor({b_count, cfg_.channels, cfg_.n_rois, cfg_.n_frames},
                  std::move(buf));
  }

  // Four stride-2 conv blocks, then pooled descriptors. Input values are
  // expected in [0,1]; the branch centers them itself.
  FeatureBundle encode(const Tensor& x, Branch which) const {
    const auto& blocks = which == Branch::kRppg ? enc_rppg_ : enc_noise_;
    Tensor h = add_scalar(x, -0.5);
    for (const ConvBlock& blk : blocks) h = relu(conv2d(h, blk.w, blk.b, 2));
    FeatureBundle out;
    out.map = h;
    out.pooled_raw = global_average_pool(h);
    out.vec = l2_normalize_rows(out.pooled_raw);
    return out;
  }

  // Interference statistics: gamma = 1 + tanh(.), beta unconstrained, both
  // produced by a two-layer MLP over the pooled noise features.
  std::pair<Tensor, Tensor> nfel(const Tensor& z_n_map) const {
    Tensor pooled = global_average_pool(z_n_map);
    Tensor h = relu(add_per_col(matmul(pooled, nfel_w1_), nfel_b1_));
    Tensor o = add_per_col(matmul(h, nfel_w2_), nfel_b2_);
    Tensor gamma = add_scalar(tanh(slice_last(o, 0, cfg_.dim)), 1.0);
    Tensor beta = slice_last(o, cfg_.dim, 2 * cfg_.dim);
    return {gamma, beta};
  }

  // Fusion: two bias-free convolutions, each followed by AdaIN with the
  // interference statistics, with a residual path back to the pulse map.
  // With nol.k2 and the nfel MLP zeroed this is exactly the identity.
  Tensor nol(const Tensor& z_phy, const Tensor& z_n_map) const {
    auto [gamma, beta] = nfel(z_n_map);
    Tensor z1 = conv2d(z_phy, nol_k1_, Tensor(), 1);
    Tensor zmid = relu(adain(z1, gamma, beta));
    Tensor z2 = conv2d(zmid, nol_k2_, Tensor(), 1);
    return add(adain(z2, gamma, beta), z_phy);
  }

  Tensor bvp_head(const Tensor& feature_map) const {
    Tensor h = mean_over_height(feature_map);
    for (const ConvBlock& blk : bvp_up_)
      h = relu(conv2d(upsample2_last(h), blk.w, blk.b, 1));
    Tensor out = conv2d(h, bvp_out_w_, bvp_out_b_, 1);
    return reshape(out, {feature_map.dim(0), cfg_.n_frames});
  }

  Tensor hr_head(const Tensor& feature_map) const {
    Tensor pooled = global_average_pool(feature_map);
    Tensor hr = add_per_col(matmul(pooled, hr_w_), hr_b_);
    return reshape(hr, {feature_map.dim(0)});
  }

  Prediction predict(const Tensor& x, bool use_noise_branch,
                     bool use_fusion) const {
    Prediction out;
    out.rppg = encode(x, Branch::kRppg);
    Tensor fused = out.rppg.map;
    if (use_noise_branch) {
      out.noise = encode(x, Branch::kNoise);
      if (use_fusion) fused = nol(out.rppg.map, out.noise.map);
    }
    out.bvp = bvp_head(fused);
    out.hr = hr_head(fused);
    return out;
  }

  std::vector<Tensor> parameters() {
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (auto& [name, t] : params_) out.push_back(t);
    return out;
  }
  const std::vector<std::pair<std::string, Tensor>>& named_parameters() const {
    return params_;
  }
  Tensor parameter(const std::string& name) const {
    for (const auto& [n, t] : params_)
      if (n == name) return t;
    throw std::invalid_argument("model: no parameter named " + name);
  }
  long long param_count() const {
    long long n = 0;
    for (const auto& [name, t] : params_) n += t.numel();
    return n;
  }
  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  // -------------------------------------------------------------------------
  // Checkpoint container: "GRCK" | u32 version | u64 config hash | u32 count
  // | entries of {u32 name_len, name, u32 ndim, u32 dims..., f64 values}.
  // Everything little-endian; values are raw IEEE-754 bit patterns, so a
  // save/load round trip is bit-exact.
  // -------------------------------------------------------------------------

  void save(const std::string& path) const {
    std::string buf;
    buf += "GRCK";
    detail::put_u32(buf, 1);
    put_u64(buf, cfg_.hash());
    detail::put_u32(buf, static_cast<std::uint32_t>(params_.size()));
    for (const auto& [name, t] : params_) {
      detail::put_u32(buf, static_cast<std::uint32_t>(name.size()));
      buf += name;
      detail::put_u32(buf, static_cast<std::uint32_t>(t.shape().size()));
      for (int d : t.shape()) detail::put_u32(buf, static_cast<std::uint32_t>(d));
      for (double v : t.data()) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        put_u64(buf, bits);
      }
    }
    detail::write_file(path, buf);
  }

  void load(const std::string& path) {
    const std::string data = detail::read_file(path);
    detail::ByteReader r(data, path);
    r.magic("GRCK");
    const std::uint32_t version = r.u32();
    if (version != 1)
      throw std::runtime_error(path + ": unsupported checkpoint version " +
                               std::to_string(version));
    const std::uint64_t hash = read_u64(r);
    if (hash != cfg_.hash())
      throw std::runtime_error(
          path + ": checkpoint was written for a different model configuration");
    const std::uint32_t count = r.u32();
    std::map<std::string, std::pair<Shape, std::vector<double>>> entries;
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::uint32_t name_len = r.u32();
      std::string name;
      for (std::uint32_t k = 0; k < name_len; ++k)
        name.push_back(static_cast<char>(r.u8()));
      const std::uint32_t ndim = r.u32();
      Shape shape;
      long long numel = 1;
      for (std::uint32_t k = 0; k < ndim; ++k) {
        shape.push_back(static_cast<int>(r.u32()));
        numel *= shape.back();
      }
      std::vector<double> values(static_cast<std::size_t>(numel));
      for (double& v : values) {
        const std::uint64_t bits = read_u64(r);
        std::memcpy(&v, &bits, 8);
      }
      entries[name] = {std::move(shape), std::move(values)};
    }
    r.done();
    if (entries.size() != params_.size())
      throw std::runtime_error(path + ": checkpoint parameter count mismatch");
    for (auto& [name, t] : params_) {
      auto it = entries.find(name);
      if (it == entries.end())
        throw std::runtime_error(path + ": checkpoint missing parameter " + name);
      if (it->second.first != t.shape())
        throw std::runtime_error(path + ": shape mismatch for parameter " + name);
      t.mutable_data() = it->second.second;
    }
  }

 private:
  struct ConvBlock {
    Tensor w, b;
  };

  static double he_std(int fan_in) { return std::sqrt(2.0 / fan_in); }

  Tensor make_param(const std::string& name, const Shape& shape, Rng& rng,
                    double stddev) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    if (stddev > 0.0) {
      for (double& x : v) x = rng.normal(0.0, stddev);
    }
    Tensor t(shape, std::move(v), true);
    params_.emplace_back(name, t);
    return t;
  }

  ConvBlock conv_block(const std::string& prefix, const std::array<int, 5>& enc,
                       int i, Rng& rng) {
    const int cin = enc[static_cast<std::size_t>(i)];
    const int cout = enc[static_cast<std::size_t>(i + 1)];
    ConvBlock blk;
    blk.w = make_param(prefix + ".w", {cout, cin, 3, 3}, rng, he_std(cin * 9));
    blk.b = make_param(prefix + ".b", {cout}, rng, 0.0);
    return blk;
  }

  static void put_u64(std::string& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i)
      buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  static std::uint64_t read_u64(detail::ByteReader& r) {
    std::uint64_t lo = r.u32();
    std::uint64_t hi = r.u32();
    return lo | (hi << 32);
  }

  ModelConfig cfg_;
  std::vector<std::pair<std::string, Tensor>> params_;
  std::array<ConvBlock, 4> enc_rppg_;
  std::array<ConvBlock, 4> enc_noise_;
  Tensor nfel_w1_, nfel_b1_, nfel_w2_, nfel_b2_;
  Tensor nol_k1_, nol_k2_;
  std::array<ConvBlock, 4> bvp_up_;
  Tensor bvp_out_w_, bvp_out_b_;
  Tensor hr_w_, hr_b_;
};

}  // namespace greip
