#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <stdexcept>
#include <vector>

#include "greip/interp.hpp"

namespace greip {

namespace detail {

inline std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

// Iterative radix-2 FFT, in place. Size must be a power of two.
inline void fft_radix2(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0)
    throw std::invalid_argument("fft: size must be a power of two");
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * M_PI / static_cast<double>(len);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> u = a[i + k];
        const std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

// Magnitude spectrum of the Hann-windowed, mean-removed signal, zero padded
// to at least min_bins.
inline std::vector<double> hann_spectrum(const std::vector<double>& x,
                                         std::size_t min_bins,
                                         std::size_t& n_fft) {
  const std::size_t n = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  n_fft = next_pow2(std::max(min_bins, n));
  std::vector<std::complex<double>> buf(n_fft, {0.0, 0.0});
  for (std::size_t k = 0; k < n; ++k) {
    const double w =
        0.5 * (1.0 - std::cos(2.0 * M_PI * static_cast<double>(k) /
                              static_cast<double>(n - 1)));
    buf[k] = {(x[k] - mean) * w, 0.0};
  }
  fft_radix2(buf);
  std::vector<double> mag(n_fft / 2 + 1);
  for (std::size_t k = 0; k < mag.size(); ++k) mag[k] = std::abs(buf[k]);
  return mag;
}

}  // namespace detail

// Heart rate in bpm from a pulse waveform: spectral peak of the Hann
// windowed signal, zero padded to 4096 bins, searched in [0.7, 3.0] Hz,
// with parabolic refinement of the peak bin.
inline double hr_from_bvp(const std::vector<double>& bvp, double fs) {
  if (bvp.size() < 8) throw std::invalid_argument("hr_from_bvp: signal too short");
  if (!(fs > 0.0)) throw std::invalid_argument("hr_from_bvp: bad sample rate");
  const auto [lo, hi] = std::minmax_element(bvp.begin(), bvp.end());
  if (*lo == *hi) throw std::invalid_argument("hr_from_bvp: constant signal");

  std::size_t n_fft = 0;
  const std::vector<double> mag = detail::hann_spectrum(bvp, 4096, n_fft);
  const double bin_hz = fs / static_cast<double>(n_fft);
  const std::size_t k_lo =
      static_cast<std::size_t>(std::ceil(0.7 / bin_hz));
  const std::size_t k_hi = std::min(
      mag.size() - 1, static_cast<std::size_t>(std::floor(3.0 / bin_hz)));
  if (k_lo >= k_hi) throw std::invalid_argument("hr_from_bvp: band unresolvable");

  std::size_t peak = k_lo;
  for (std::size_t k = k_lo + 1; k <= k_hi; ++k)
    if (mag[k] > mag[peak]) peak = k;

  double refined = static_cast<double>(peak);
  if (peak > k_lo && peak < k_hi) {
    const double a = mag[peak - 1], b = mag[peak], c = mag[peak + 1];
    const double denom = a - 2.0 * b + c;
    if (denom < 0.0) {
      const double delta = 0.5 * (a - c) / denom;
      if (std::abs(delta) <= 0.5) refined += delta;
    }
  }
  return 60.0 * refined * bin_hz;
}

// Standard agreement statistics between predicted and reference heart
// rates. sd is the population standard deviation of the signed error;
// pearson_r is 0 when either side is constant.
struct HrReport {
  double mae = 0.0;
  double rmse = 0.0;
  double sd = 0.0;
  double pearson_r = 0.0;
  int n = 0;
};

inline HrReport hr_report(const std::vector<double>& pred,
                          const std::vector<double>& gt) {
  if (pred.empty() || pred.size() != gt.size())
    throw std::invalid_argument("hr_report: size mismatch or empty input");
  const auto n = static_cast<double>(pred.size());
  HrReport rep;
  rep.n = static_cast<int>(pred.size());
  double err_mean = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - gt[i];
    rep.mae += std::abs(e);
    rep.rmse += e * e;
    err_mean += e;
  }
  rep.mae /= n;
  rep.rmse = std::sqrt(rep.rmse / n);
  err_mean /= n;
  double var = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = (pred[i] - gt[i]) - err_mean;
    var += d * d;
  }
  rep.sd = std::sqrt(var / n);

  double mp = 0.0, mg = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    mp += pred[i];
    mg += gt[i];
  }
  mp /= n;
  mg /= n;
  double cov = 0.0, vp = 0.0, vg = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    cov += (pred[i] - mp) * (gt[i] - mg);
    vp += (pred[i] - mp) * (pred[i] - mp);
    vg += (gt[i] - mg) * (gt[i] - mg);
  }
  rep.pearson_r = (vp > 0.0 && vg > 0.0) ? cov / std::sqrt(vp * vg) : 0.0;
  return rep;
}

// Low/high frequency balance of the beat-to-beat interval series.
// defined == false when the band powers are both negligible.
struct HrvReport {
  double lf_power = 0.0;
  double hf_power = 0.0;
  double lf_nu = 0.0;
  double hf_nu = 0.0;
  int n_beats = 0;
  bool defined = false;
};

// Peak instants of the waveform: strict local maxima separated by at least
// the 0.35 s refractory interval.
inline std::vector<int> detect_peaks(const std::vector<double>& bvp, double fs) {
  const int refractory = static_cast<int>(std::ceil(0.35 * fs));
  std::vector<int> peaks;
  for (int k = 1; k + 1 < static_cast<int>(bvp.size()); ++k) {
    const std::size_t i = static_cast<std::size_t>(k);
    if (bvp[i] > bvp[i - 1] && bvp[i] > bvp[i + 1]) {
      if (peaks.empty() || k - peaks.back() >= refractory) peaks.push_back(k);
    }
  }
  return peaks;
}

inline HrvReport hrv_report(const std::vector<double>& bvp, double fs) {
  if (!(fs > 0.0)) throw std::invalid_argument("hrv_report: bad sample rate");
  const std::vector<int> peaks = detect_peaks(bvp, fs);
  HrvReport rep;
  rep.n_beats = static_cast<int>(peaks.size());
  if (peaks.size() < 4)
    throw std::invalid_argument("hrv_report: fewer than 4 beats detected");

  // Interval series anchored at the later beat of each pair, resampled to a
  // uniform 4 Hz clock.
  std::vector<double> xs(peaks.size() - 1);
  std::vector<double> ibi(peaks.size() - 1);
  for (std::size_t j = 0; j + 1 < peaks.size(); ++j) {
    xs[j] = static_cast<double>(peaks[j + 1]) / fs;
    ibi[j] = static_cast<double>(peaks[j + 1] - peaks[j]) / fs;
  }
  constexpr double kIbiFs = 4.0;
  const double t0 = xs.front(), t1 = xs.back();
  const int m = static_cast<int>(std::floor((t1 - t0) * kIbiFs)) + 1;
  if (m < 8)
    throw std::invalid_argument("hrv_report: interval series too short");
  std::vector<double> grid(static_cast<std::size_t>(m));
  for (int j = 0; j < m; ++j)
    grid[static_cast<std::size_t>(j)] = t0 + static_cast<double>(j) / kIbiFs;
  const std::vector<double> series = resample_cubic(xs, ibi, grid);

  std::size_t n_fft = 0;
  const std::vector<double> mag = detail::hann_spectrum(series, 1024, n_fft);
  const double bin_hz = kIbiFs / static_cast<double>(n_fft);
  for (std::size_t k = 1; k < mag.size(); ++k) {
    const double f = static_cast<double>(k) * bin_hz;
    const double p = mag[k] * mag[k];
    if (f >= 0.04 && f < 0.15)
      rep.lf_power += p;
    else if (f >= 0.15 && f <= 0.4)
      rep.hf_power += p;
  }
  const double total = rep.lf_power + rep.hf_power;
  if (total < 1e-12) return rep;
  rep.defined = true;
  rep.lf_nu = rep.lf_power / total;
  rep.hf_nu = rep.hf_power / total;
  return rep;
}

}  // namespace greip
