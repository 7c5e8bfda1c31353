#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "greip/rng.hpp"
#include "greip/tensor.hpp"

namespace greip {

inline constexpr int kQueueCapacity = 5120;
inline constexpr double kQueueInitLabel = 75.0;
inline constexpr double kContinuityBandwidth = 1.0;
inline constexpr double kOrthThreshold = 1.5e-3;
inline constexpr double kPearsonGuard = 1e-16;

struct LossWeights {
  double k_bvp = 1.0;
  double k_hr = 0.1;
  double k_con = 0.001;
  double k_ort = 0.01;
  double v = kContinuityBandwidth;  // continuity temperature
  double t = kOrthThreshold;        // orthogonality floor

  void validate() const {
    if (k_bvp <= 0 || k_hr <= 0 || k_con <= 0 || k_ort <= 0 || v <= 0 || t <= 0)
      throw std::invalid_argument("loss weights: all entries must be positive");
  }
};

// Ramp used to phase in the regularizers: 2 / (1 + exp(-10 r)) over training
// progress r in [0,1], so it starts at 1 and saturates just below 2. With
// `shifted` the curve is lowered by 1 to start at 0 instead.
inline double lambda_schedule(double progress, bool shifted = false) {
  const double v = 2.0 / (1.0 + std::exp(-10.0 * progress));
  return shifted ? v - 1.0 : v;
}

inline double lambda_schedule(long long iter_current, long long iter_total,
                              bool shifted = false) {
  if (iter_total <= 0 || iter_current < 0 || iter_current > iter_total)
    throw std::invalid_argument("lambda: need 0 <= iter_current <= iter_total");
  return lambda_schedule(static_cast<double>(iter_current) / iter_total, shifted);
}

// Ring buffer of past encoder outputs. Rows are stored L2-normalized with
// their pre-normalization norms kept alongside; entries carry the heart rate
// of the sample they came from. Everything in the queue is detached: pushes
// copy values out of the graph, and the row tensors handed back to the
// losses are constants.
class FeatureQueue {
 public:
  FeatureQueue(int dim, int capacity, std::uint64_t seed) : dim_(dim), capacity_(capacity) {
    if (dim <= 0) throw std::invalid_argument("queue: dim must be positive");
    if (capacity <= 0) throw std::invalid_argument("queue: capacity must be positive");
    rppg_.assign(static_cast<std::size_t>(capacity) * dim, 0.0);
    noise_.assign(static_cast<std::size_t>(capacity) * dim, 0.0);
    rppg_raw_norm_.assign(static_cast<std::size_t>(capacity), 1.0);
    noise_raw_norm_.assign(static_cast<std::size_t>(capacity), 1.0);
    labels_.assign(static_cast<std::size_t>(capacity), kQueueInitLabel);
    Rng rng(seed);
    fill_random_rows(rppg_, rng);
    fill_random_rows(noise_, rng);
  }

  int dim() const { return dim_; }
  int capacity() const { return capacity_; }

  // Oldest-first replacement. Both branches and the labels advance in
  // lockstep, so row j of every array refers to the same past sample.
  void push(const Tensor& z_r_vec, const Tensor& z_r_raw, const Tensor& z_n_vec,
            const Tensor& z_n_raw, const std::vector<double>& hr_labels) {
    const int b = check_batch(z_r_vec, "z_r_vec");
    if (check_batch(z_r_raw, "z_r_raw") != b || check_batch(z_n_vec, "z_n_vec") != b ||
        check_batch(z_n_raw, "z_n_raw") != b)
      throw std::invalid_argument("queue: branch batch sizes differ");
    if (static_cast<int>(hr_labels.size()) != b)
      throw std::invalid_argument("queue: label count does not match batch");
    if (b > capacity_) throw std::invalid_argument("queue: batch larger than capacity");
    for (int i = 0; i < b; ++i) {
      const std::size_t dst = static_cast<std::size_t>(cursor_) * dim_;
      const std::size_t src = static_cast<std::size_t>(i) * dim_;
      std::copy_n(z_r_vec.data().begin() + src, dim_, rppg_.begin() + dst);
      std::copy_n(z_n_vec.data().begin() + src, dim_, noise_.begin() + dst);
      rppg_raw_norm_[static_cast<std::size_t>(cursor_)] = row_norm(z_r_raw, i);
      noise_raw_norm_[static_cast<std::size_t>(cursor_)] = row_norm(z_n_raw, i);
      labels_[static_cast<std::size_t>(cursor_)] = hr_labels[static_cast<std::size_t>(i)];
      cursor_ = (cursor_ + 1) % capacity_;
    }
  }

  Tensor rppg_rows() const { return Tensor({capacity_, dim_}, rppg_); }
  Tensor noise_rows() const { return Tensor({capacity_, dim_}, noise_); }
  const std::vector<double>& labels() const { return labels_; }
  const std::vector<double>& rppg_raw_norms() const { return rppg_raw_norm_; }
  const std::vector<double>& noise_raw_norms() const { return noise_raw_norm_; }
  int cursor() const { return cursor_; }

 private:
  int check_batch(const Tensor& t, const char* what) const {
    if (t.ndim() != 2 || t.dim(1) != dim_)
      throw std::invalid_argument(std::string("queue: ") + what + " must be [B, dim]");
    return t.dim(0);
  }
  double row_norm(const Tensor& raw, int row) const {
    double s = 0.0;
    const std::size_t off = static_cast<std::size_t>(row) * dim_;
    for (int c = 0; c < dim_; ++c) {
      const double v = raw.data()[off + static_cast<std::size_t>(c)];
      s += v * v;
    }
    return std::sqrt(s);
  }
  void fill_random_rows(std::vector<double>& store, Rng& rng) {
    for (int k = 0; k < capacity_; ++k) {
      double s = 0.0;
      const std::size_t off = static_cast<std::size_t>(k) * dim_;
      for (int c = 0; c < dim_; ++c) {
        const double v = rng.normal();
        store[off + static_cast<std::size_t>(c)] = v;
        s += v * v;
      }
      const double norm = std::max(std::sqrt(s), kL2NormEps);
      for (int c = 0; c < dim_; ++c) store[off + static_cast<std::size_t>(c)] /= norm;
    }
  }

  int dim_;
  int capacity_;
  int cursor_ = 0;
  std::vector<double> rppg_;
  std::vector<double> noise_;
  std::vector<double> rppg_raw_norm_;
  std::vector<double> noise_raw_norm_;
  std::vector<double> labels_;
};

// Label-affinity weights for the continuity loss: row-wise softmax of
// -|hr_i - q_label_j| / bandwidth. Each row sums to 1. Plain doubles, kept
// out of the graph on purpose.
inline std::vector<double> continuity_weights(const std::vector<double>& hr_labels,
                                              const std::vector<double>& queue_labels,
                                              double bandwidth) {
  if (bandwidth <= 0.0) throw std::invalid_argument("continuity: bandwidth must be positive");
  const std::size_t b = hr_labels.size();
  const std::size_t k = queue_labels.size();
  std::vector<double> w(b * k);
  for (std::size_t i = 0; i < b; ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) {
      const double a = -std::abs(hr_labels[i] - queue_labels[j]) / bandwidth;
      w[i * k + j] = a;
      best = std::max(best, a);
    }
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      w[i * k + j] = std::exp(w[i * k + j] - best);
      denom += w[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) w[i * k + j] /= denom;
  }
  return w;
}

// Pulls the pulse embedding of each sample toward queue entries with nearby
// heart rates: cross entropy between the label-affinity weights and the
// softmax over embedding similarities, summed over the batch.
inline Tensor continuity_loss(const Tensor& z_r_vec, const std::vector<double>& hr_labels,
                              const FeatureQueue& q,
                              double bandwidth = kContinuityBandwidth) {
  if (z_r_vec.ndim() != 2 || z_r_vec.dim(1) != q.dim())
    throw std::invalid_argument("continuity: embeddings must be [B, dim]");
  if (static_cast<int>(hr_labels.size()) != z_r_vec.dim(0))
    throw std::invalid_argument("continuity: label count does not match batch");
  Tensor sims = matmul(z_r_vec, q.rppg_rows(), false, true);
  Tensor weights({z_r_vec.dim(0), q.capacity()},
                 continuity_weights(hr_labels, q.labels(), bandwidth));
  return neg(sum(mul(weights, log(softmax_last(sims)))));
}

// Pushes the interference embedding away from the pulse queue and keeps both
// raw embeddings near unit length. Average of three mean-square terms,
// floored at `threshold` so there is no gradient once it is small enough.
inline Tensor orthogonality_loss(const Tensor& z_n_vec, const Tensor& z_n_raw,
                                 const FeatureQueue& q,
                                 double threshold = kOrthThreshold) {
  if (z_n_vec.ndim() != 2 || z_n_vec.dim(1) != q.dim())
    throw std::invalid_argument("orthogonality: embeddings must be [B, dim]");
  if (z_n_raw.ndim() != 2 || z_n_raw.dim(1) != q.dim() || z_n_raw.dim(0) != z_n_vec.dim(0))
    throw std::invalid_argument("orthogonality: raw embeddings must match [B, dim]");
  Tensor sims = matmul(z_n_vec, q.rppg_rows(), false, true);
  Tensor cross = mean(square(sims));
  Tensor batch_norms = sqrt(sum_last(square(z_n_raw)));
  Tensor batch_term = mean(square(add_scalar(batch_norms, -1.0)));
  double queue_term = 0.0;
  for (double n : q.rppg_raw_norms()) queue_term += (n - 1.0) * (n - 1.0);
  queue_term /= q.capacity();
  Tensor raw = scale(add(add(cross, batch_term), Tensor::scalar(queue_term)), 1.0 / 3.0);
  return hinge_floor(raw, threshold);
}

// 1 - mean Pearson correlation across the batch, one correlation per row.
// A tiny guard inside each square root keeps flat signals finite.
inline Tensor pearson_bvp_loss(const Tensor& pred, const Tensor& target) {
  if (pred.ndim() != 2 || target.ndim() != 2 || pred.shape() != target.shape())
    throw std::invalid_argument("pearson: pred and target must both be [B, T]");
  Tensor xc = sub_per_row(pred, mean_last(pred));
  Tensor yc = sub_per_row(target, mean_last(target));
  Tensor num = sum_last(mul(xc, yc));
  Tensor den = mul(sqrt(add_scalar(sum_last(square(xc)), kPearsonGuard)),
                   sqrt(add_scalar(sum_last(square(yc)), kPearsonGuard)));
  return sub(Tensor::scalar(1.0), mean(div(num, den)));
}

inline Tensor hr_l1_loss(const Tensor& pred_hr, const Tensor& target_hr) {
  if (pred_hr.ndim() != 1 || target_hr.ndim() != 1 || pred_hr.dim(0) != target_hr.dim(0))
    throw std::invalid_argument("hr_l1: pred and target must both be [B]");
  return mean(abs(sub(pred_hr, target_hr)));
}

struct LossParts {
  Tensor bvp;
  Tensor hr;
  Tensor con;
  Tensor ort;
};

// k_bvp * L_bvp + lambda * (k_hr * L_hr + k_con * L_con + k_ort * L_ort).
// Absent regularizer parts count as zero so ablations can drop them.
inline Tensor overall_loss(const LossParts& parts, const LossWeights& w,
                           long long iter_current, long long iter_total,
                           bool shifted = false) {
  w.validate();
  const double lam = lambda_schedule(iter_current, iter_total, shifted);
  auto checked = [](const Tensor& t, const char* what) {
    if (t.defined() && !std::isfinite(t.item()))
      throw std::invalid_argument(std::string("overall loss: non-finite ") + what);
    return t;
  };
  Tensor reg = Tensor::scalar(0.0);
  if (parts.hr.defined()) reg = add(reg, scale(checked(parts.hr, "hr part"), w.k_hr));
  if (parts.con.defined()) reg = add(reg, scale(checked(parts.con, "continuity part"), w.k_con));
  if (parts.ort.defined()) reg = add(reg, scale(checked(parts.ort, "orthogonality part"), w.k_ort));
  if (!parts.bvp.defined()) throw std::invalid_argument("overall loss: bvp part is required");
  return add(scale(checked(parts.bvp, "bvp part"), w.k_bvp), scale(reg, lam));
}

}  // namespace greip
