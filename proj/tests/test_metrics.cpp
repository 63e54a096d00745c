#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "cape/metrics.hpp"

using namespace cape;

namespace {

// Independent direct-formula reimplementations used as oracles.

double psnr_oracle(const Tensor& a, const Tensor& b, double peak) {
  long double acc = 0.0L;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const long double d = static_cast<long double>(a.at(i)) - static_cast<long double>(b.at(i));
    acc += d * d;
  }
  const long double mse = acc / a.numel();
  return static_cast<double>(10.0L * std::log10(static_cast<long double>(peak) * peak / mse));
}

double ssim_oracle(const Tensor& a, const Tensor& b, double peak) {
  const int h = static_cast<int>(a.dim(1)), w = static_cast<int>(a.dim(2));
  const int hw = h * w;
  auto gray = [&](const Tensor& t, int y, int x) {
    const int px = y * w + x;
    return (static_cast<double>(t.at(px)) + t.at(hw + px) + t.at(2 * hw + px)) / 3.0;
  };
  const double c1 = 0.0001 * peak * peak, c2 = 0.0009 * peak * peak;
  double total = 0;
  int n = 0;
  for (int y = 0; y + 8 <= h; ++y) {
    for (int x = 0; x + 8 <= w; ++x) {
      double ma = 0, mb = 0, va = 0, vb = 0, cov = 0;
      for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) {
          ma += gray(a, y + i, x + j);
          mb += gray(b, y + i, x + j);
        }
      ma /= 64;
      mb /= 64;
      for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) {
          const double da = gray(a, y + i, x + j) - ma;
          const double db = gray(b, y + i, x + j) - mb;
          va += da * da;
          vb += db * db;
          cov += da * db;
        }
      va /= 64;
      vb /= 64;
      cov /= 64;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++n;
    }
  }
  return total / n;
}

Tensor random_image(Rng& rng, int side) { return Tensor::uniform({3, side, side}, rng, 0, 1); }

}  // namespace

TEST_CASE("psnr: sentinel, closed form, oracle agreement, symmetry") {
  Rng rng(51);
  const Tensor x = random_image(rng, 16);
  CHECK(std::isinf(psnr(x, x)));

  // Constant offset of 0.1 -> MSE 0.01 -> 20 dB.
  Tensor a({3, 16, 16}), b({3, 16, 16});
  a.fill(0.1f);
  b.fill(0.0f);
  CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-7));
  // In 64-bit from exact inputs the identity is tight.
  Tensor ad({3, 16, 16}), bd({3, 16, 16});
  ad.fill(0.25f);
  bd.fill(0.0f);
  CHECK(psnr(ad, bd) == doctest::Approx(10.0 * std::log10(1.0 / 0.0625)).epsilon(1e-12));

  for (int it = 0; it < 50; ++it) {
    const Tensor u = random_image(rng, 16);
    const Tensor v = random_image(rng, 16);
    CHECK(psnr(u, v) == doctest::Approx(psnr_oracle(u, v, 1.0)).epsilon(1e-9));
    CHECK(psnr(u, v) == doctest::Approx(psnr(v, u)).epsilon(1e-12));
  }

  Tensor wrong({3, 8, 8});
  CHECK_THROWS_AS(psnr(a, wrong), std::invalid_argument);
}

TEST_CASE("ssim: self-score, anti-correlation, oracle agreement, symmetry") {
  Rng rng(52);
  const Tensor x = random_image(rng, 16);
  CHECK(ssim(x, x) == 1.0);

  // Half-black/half-white image against its negation scores negative.
  Tensor h({3, 16, 16}), inv({3, 16, 16});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 16; ++y)
      for (int xx = 0; xx < 16; ++xx) {
        const float v = y < 8 ? 0.0f : 1.0f;
        h.at(c * 256 + y * 16 + xx) = v;
        inv.at(c * 256 + y * 16 + xx) = 1.0f - v;
      }
  CHECK(ssim(h, inv) < 0.0);

  for (int it = 0; it < 50; ++it) {
    const Tensor u = random_image(rng, 16);
    const Tensor v = random_image(rng, 16);
    CHECK(ssim(u, v) == doctest::Approx(ssim_oracle(u, v, 1.0)).epsilon(1e-9));
    CHECK(ssim(u, v) == doctest::Approx(ssim(v, u)).epsilon(1e-12));
    CHECK(ssim(u, v) >= -1.0);
    CHECK(ssim(u, v) <= 1.0);
  }

  Tensor tiny({3, 4, 4});
  CHECK_THROWS_AS(ssim(tiny, tiny), std::invalid_argument);
}

TEST_CASE("psnr decreases along a noise-amplitude ladder") {
  Rng rng(53);
  const Tensor clean = random_image(rng, 16);
  Tensor noise({3, 16, 16});
  for (std::int64_t i = 0; i < noise.numel(); ++i) noise.at(i) = static_cast<float>(rng.normal());
  double prev = std::numeric_limits<double>::infinity();
  for (double amp : {0.01, 0.02, 0.05, 0.1, 0.2, 0.4}) {
    Tensor noisy = clean;
    for (std::int64_t i = 0; i < noisy.numel(); ++i) {
      noisy.at(i) = static_cast<float>(noisy.at(i) + amp * noise.at(i));
    }
    const double p = psnr(clean, noisy);
    CHECK(p < prev);
    prev = p;
  }
}

TEST_CASE("metric report aggregates and CSV layout") {
  MetricReport report;
  report.add(0, 1, 0, 20.0, 0.8);
  report.add(0, 1, 1, 22.0, 0.9);
  report.add(1, 3, 0, 30.0, 0.95);
  report.add(1, 1, 0, std::numeric_limits<double>::infinity(), 1.0);  // excluded from the mean
  CHECK(report.mean_psnr(1) == doctest::Approx(21.0));
  CHECK(report.mean_psnr(3) == doctest::Approx(30.0));
  CHECK(report.mean_ssim(3) == doctest::Approx(0.95));

  namespace fs = std::filesystem;
  const auto path = fs::temp_directory_path() / "cape_report.csv";
  report.write_csv(path.string());
  std::ifstream is(path);
  std::string header;
  std::getline(is, header);
  CHECK(header == "scene,n_refs,view,psnr_db,ssim");
  std::string line;
  int rows = 0;
  while (std::getline(is, line)) {
    if (!line.empty()) ++rows;
  }
  CHECK(rows == 4);
  fs::remove(path);
}
