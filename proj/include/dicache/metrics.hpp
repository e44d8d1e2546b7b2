#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dicache/error.hpp"
#include "dicache/tensor.hpp"

namespace dicache {

// Relative L1 distance ||a - b||_1 / ||b||_1 over the flattened tensors.
// Sums accumulate in double.
inline double l1_rel(const Tensor2D& a, const Tensor2D& b) {
  require_same_shape(a, b, "l1_rel");
  auto x = a.flat();
  auto y = b.flat();
  double diff = 0.0;
  double norm = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    diff += std::fabs(static_cast<double>(x[i]) - static_cast<double>(y[i]));
    norm += std::fabs(static_cast<double>(y[i]));
  }
  if (norm == 0.0) {
    throw Error(ErrorKind::ZeroReferenceNorm, "l1_rel reference has zero L1 norm");
  }
  return diff / norm;
}

// Fractional ranks (1-based); tied values share the mean of their positions.
inline std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return values[i] < values[j]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i + 1;
    while (j < n && values[order[j]] == values[order[i]]) ++j;
    // positions i..j-1 (0-based) -> mean 1-based rank
    double rank = 0.5 * static_cast<double>(i + j + 1);
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = rank;
    i = j;
  }
  return ranks;
}

namespace detail {

inline void check_pair(std::span<const double> x, std::span<const double> y, const char* where) {
  if (x.size() != y.size()) {
    throw Error(ErrorKind::LengthMismatch, std::string(where) + ": lengths " +
                                               std::to_string(x.size()) + " and " +
                                               std::to_string(y.size()));
  }
  if (x.size() < 2) {
    throw Error(ErrorKind::LengthMismatch, std::string(where) + ": need at least 2 samples");
  }
  for (auto s : {x, y}) {
    for (double v : s) {
      if (!std::isfinite(v)) throw Error(ErrorKind::NonFinite, std::string(where) + ": non-finite");
    }
    if (std::all_of(s.begin(), s.end(), [&](double v) { return v == s.front(); })) {
      throw Error(ErrorKind::DegenerateSequence, std::string(where) + ": constant sequence");
    }
  }
}

inline double pearson_unchecked(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  // sqrt(fl(a*a)) == |a| in binary floating point, so identical inputs give
  // exactly 1.
  const double r = sxy / std::sqrt(sxx * syy);
  return std::clamp(r, -1.0, 1.0);
}

}  // namespace detail

inline double pearson(std::span<const double> x, std::span<const double> y) {
  detail::check_pair(x, y, "pearson");
  return detail::pearson_unchecked(x, y);
}

// Spearman rank correlation with average-rank tie handling.
inline double spearman(std::span<const double> x, std::span<const double> y) {
  detail::check_pair(x, y, "spearman");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return detail::pearson_unchecked(rx, ry);
}

inline double dynamic_range(const Tensor2D& t) {
  auto [lo, hi] = std::minmax_element(t.flat().begin(), t.flat().end());
  return static_cast<double>(*hi) - static_cast<double>(*lo);
}

// PSNR in dB with peak = dynamic range of the reference. Identical inputs
// return +infinity.
inline double psnr(const Tensor2D& a, const Tensor2D& ref) {
  require_same_shape(a, ref, "psnr");
  if (ref.empty()) throw Error(ErrorKind::ShapeMismatch, "psnr: empty tensor");
  auto x = a.flat();
  auto y = ref.flat();
  double sq = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x[i]) - static_cast<double>(y[i]);
    sq += d * d;
  }
  const double mse = sq / static_cast<double>(x.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  const double peak = dynamic_range(ref);
  if (peak == 0.0) {
    throw Error(ErrorKind::DegenerateReference, "psnr: constant reference with nonzero error");
  }
  return 10.0 * std::log10(peak * peak / mse);
}

struct SsimOptions {
  std::size_t grid_h = 8;
  std::size_t grid_w = 8;
  std::size_t window = 3;
};

// Mean SSIM over every valid window x window patch of the token grid, per
// channel, then averaged over channels. Uniform window, population moments,
// C1 = (0.01 L)^2 and C2 = (0.03 L)^2 with L the reference dynamic range.
inline double ssim(const Tensor2D& a, const Tensor2D& ref, const SsimOptions& opt = {}) {
  require_same_shape(a, ref, "ssim");
  if (opt.grid_h * opt.grid_w != ref.rows() || opt.grid_h == 0 || opt.grid_w == 0) {
    throw Error(ErrorKind::BadGrid, "ssim: grid " + std::to_string(opt.grid_h) + "x" +
                                        std::to_string(opt.grid_w) + " does not cover " +
                                        std::to_string(ref.rows()) + " tokens");
  }
  if (opt.window == 0 || opt.window % 2 == 0 || opt.window > std::min(opt.grid_h, opt.grid_w)) {
    throw Error(ErrorKind::BadGrid, "ssim: window must be odd and fit the grid");
  }
  const double range = dynamic_range(ref);
  if (range == 0.0) {
    if (bit_equal(a, ref)) return 1.0;
    throw Error(ErrorKind::DegenerateReference, "ssim: constant reference");
  }
  const double c1 = (0.01 * range) * (0.01 * range);
  const double c2 = (0.03 * range) * (0.03 * range);
  const std::size_t w = opt.window;
  const double count = static_cast<double>(w * w);

  double total = 0.0;
  for (std::size_t ch = 0; ch < ref.cols(); ++ch) {
    double channel_sum = 0.0;
    std::size_t patches = 0;
    for (std::size_t top = 0; top + w <= opt.grid_h; ++top) {
      for (std::size_t left = 0; left + w <= opt.grid_w; ++left) {
        double sa = 0.0, sb = 0.0;
        for (std::size_t i = 0; i < w; ++i) {
          for (std::size_t j = 0; j < w; ++j) {
            const std::size_t tok = (top + i) * opt.grid_w + (left + j);
            sa += a(tok, ch);
            sb += ref(tok, ch);
          }
        }
        const double ma = sa / count;
        const double mb = sb / count;
        double vaa = 0.0, vbb = 0.0, vab = 0.0;
        for (std::size_t i = 0; i < w; ++i) {
          for (std::size_t j = 0; j < w; ++j) {
            const std::size_t tok = (top + i) * opt.grid_w + (left + j);
            const double da = a(tok, ch) - ma;
            const double db = ref(tok, ch) - mb;
            vaa += da * da;
            vbb += db * db;
            vab += da * db;
          }
        }
        vaa /= count;
        vbb /= count;
        vab /= count;
        channel_sum += ((2.0 * ma * mb + c1) * (2.0 * vab + c2)) /
                       ((ma * ma + mb * mb + c1) * (vaa + vbb + c2));
        ++patches;
      }
    }
    total += channel_sum / static_cast<double>(patches);
  }
  return total / static_cast<double>(ref.cols());
}

}  // namespace dicache
