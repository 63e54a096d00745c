#include "cape/metrics.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace cape {

double psnr(const Tensor& a, const Tensor& b, double peak) {
  if (!a.same_shape(b)) throw std::invalid_argument("psnr: shape mismatch");
  if (a.numel() == 0) throw std::invalid_argument("psnr: empty image");
  double sq = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a.at(i)) - static_cast<double>(b.at(i));
    sq += d * d;
  }
  const double mse = sq / static_cast<double>(a.numel());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

double ssim(const Tensor& a, const Tensor& b, double peak) {
  if (!a.same_shape(b)) throw std::invalid_argument("ssim: shape mismatch");
  if (a.rank() != 3 || a.dim(0) != 3) throw std::invalid_argument("ssim: expected [3,H,W] images");
  const int h = static_cast<int>(a.dim(1));
  const int w = static_cast<int>(a.dim(2));
  constexpr int kWin = 8;
  if (h < kWin || w < kWin) throw std::invalid_argument("ssim: image smaller than the window");

  const int hw = h * w;
  std::vector<double> ga(static_cast<std::size_t>(hw)), gb(static_cast<std::size_t>(hw));
  for (int px = 0; px < hw; ++px) {
    ga[static_cast<std::size_t>(px)] =
        (static_cast<double>(a.at(px)) + a.at(hw + px) + a.at(2 * hw + px)) / 3.0;
    gb[static_cast<std::size_t>(px)] =
        (static_cast<double>(b.at(px)) + b.at(hw + px) + b.at(2 * hw + px)) / 3.0;
  }

  const double c1 = (0.01 * peak) * (0.01 * peak);
  const double c2 = (0.03 * peak) * (0.03 * peak);
  const double n = kWin * kWin;

  double total = 0.0;
  int windows = 0;
  for (int y = 0; y + kWin <= h; ++y) {
    for (int x = 0; x + kWin <= w; ++x) {
      double ma = 0, mb = 0;
      for (int i = 0; i < kWin; ++i)
        for (int j = 0; j < kWin; ++j) {
          ma += ga[static_cast<std::size_t>((y + i) * w + x + j)];
          mb += gb[static_cast<std::size_t>((y + i) * w + x + j)];
        }
      ma /= n;
      mb /= n;
      double va = 0, vb = 0, cov = 0;
      for (int i = 0; i < kWin; ++i)
        for (int j = 0; j < kWin; ++j) {
          const double da = ga[static_cast<std::size_t>((y + i) * w + x + j)] - ma;
          const double db = gb[static_cast<std::size_t>((y + i) * w + x + j)] - mb;
          va += da * da;
          vb += db * db;
          cov += da * db;
        }
      va /= n;
      vb /= n;
      cov /= n;
      const double num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
      const double den = (ma * ma + mb * mb + c1) * (va + vb + c2);
      total += num / den;
      ++windows;
    }
  }
  return total / windows;
}

double MetricReport::mean_psnr(int n_refs) const {
  double sum = 0;
  int count = 0;
  for (const auto& r : rows) {
    if (r.n_refs != n_refs || std::isinf(r.psnr_db)) continue;
    sum += r.psnr_db;
    ++count;
  }
  return count ? sum / count : 0.0;
}

double MetricReport::mean_ssim(int n_refs) const {
  double sum = 0;
  int count = 0;
  for (const auto& r : rows) {
    if (r.n_refs != n_refs) continue;
    sum += r.ssim_score;
    ++count;
  }
  return count ? sum / count : 0.0;
}

void MetricReport::write_csv(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open report for writing: " + path);
  os << "scene,n_refs,view,psnr_db,ssim\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%d,%.6f,%.6f\n", r.scene, r.n_refs, r.view, r.psnr_db,
                  r.ssim_score);
    os << buf;
  }
}

}  // namespace cape
