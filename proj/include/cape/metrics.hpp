#pragma once

#include <string>
#include <vector>

#include "cape/tensor.hpp"

namespace cape {

/// Peak signal-to-noise ratio in dB over all pixels and channels.
/// Identical images return +infinity; callers exclude those from means.
double psnr(const Tensor& a, const Tensor& b, double peak = 1.0);

/// Uniform 8x8 sliding-window SSIM on the channel-mean grayscale image,
/// constants C1 = (0.01 peak)^2, C2 = (0.03 peak)^2.
double ssim(const Tensor& a, const Tensor& b, double peak = 1.0);

struct MetricRow {
  int scene = 0;
  int n_refs = 0;
  int view = 0;
  double psnr_db = 0.0;
  double ssim_score = 0.0;
};

struct MetricReport {
  std::vector<MetricRow> rows;

  void add(int scene, int n_refs, int view, double p, double s) {
    rows.push_back({scene, n_refs, view, p, s});
  }
  /// Mean PSNR over rows with the given reference count, excluding infinite
  /// values (identical-image sentinel).
  double mean_psnr(int n_refs) const;
  double mean_ssim(int n_refs) const;

  /// Column order: scene,n_refs,view,psnr_db,ssim
  void write_csv(const std::string& path) const;
};

}  // namespace cape
