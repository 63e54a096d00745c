#pragma once

#include <cassert>
#include <cstdint>
#include <cstdlib>
#include <new>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cape/rng.hpp"

namespace cape {

/// 64-byte aligned allocator. Keeping every tensor buffer identically aligned
/// makes vectorized kernels take the same code path on every call, so results
/// are bit-reproducible regardless of heap layout.
template <typename T>
struct AlignedAlloc {
  using value_type = T;
  static constexpr std::size_t alignment = 64;

  AlignedAlloc() noexcept = default;
  template <typename U>
  AlignedAlloc(const AlignedAlloc<U>&) noexcept {}

  T* allocate(std::size_t n) {
    if (n == 0) return nullptr;
    void* p = std::aligned_alloc(alignment, ((n * sizeof(T) + alignment - 1) / alignment) * alignment);
    if (!p) throw std::bad_alloc();
    return static_cast<T*>(p);
  }
  void deallocate(T* p, std::size_t) noexcept { std::free(p); }

  template <typename U>
  bool operator==(const AlignedAlloc<U>&) const noexcept {
    return true;
  }
};

/// Dense row-major tensor. S is float for the production path and double for
/// the gradient-check instantiations.
template <typename S>
struct TensorT {
  std::vector<std::int64_t> shape;
  std::vector<S, AlignedAlloc<S>> data;

  TensorT() = default;
  explicit TensorT(std::vector<std::int64_t> sh) : shape(std::move(sh)) {
    data.assign(static_cast<std::size_t>(count(shape)), S(0));
  }

  static std::int64_t count(const std::vector<std::int64_t>& sh) {
    std::int64_t n = 1;
    for (auto d : sh) {
      if (d < 0) throw std::invalid_argument("negative tensor dimension");
      n *= d;
    }
    return n;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  std::int64_t dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  S* ptr() { return data.data(); }
  const S* ptr() const { return data.data(); }
  std::span<S> flat() { return {data.data(), data.size()}; }
  std::span<const S> flat() const { return {data.data(), data.size()}; }

  S& at(std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  const S& at(std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  void fill(S v) { std::fill(data.begin(), data.end(), v); }

  template <typename T>
  TensorT<T> cast() const {
    TensorT<T> out(shape);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T>(data[i]);
    return out;
  }

  static TensorT zeros(std::vector<std::int64_t> sh) { return TensorT(std::move(sh)); }

  static TensorT randn(std::vector<std::int64_t> sh, Rng& rng) {
    TensorT t(std::move(sh));
    for (auto& v : t.data) v = static_cast<S>(rng.normal());
    return t;
  }

  static TensorT uniform(std::vector<std::int64_t> sh, Rng& rng, double lo, double hi) {
    TensorT t(std::move(sh));
    for (auto& v : t.data) v = static_cast<S>(rng.uniform(lo, hi));
    return t;
  }
};

using Tensor = TensorT<float>;

template <typename S>
std::string shape_string(const TensorT<S>& t) {
  std::string s = "[";
  for (int i = 0; i < t.rank(); ++i) {
    if (i) s += ",";
    s += std::to_string(t.dim(i));
  }
  return s + "]";
}

}  // namespace cape
