#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "cape/model.hpp"

namespace cape {

namespace {

constexpr char kMagic[8] = {'C', 'A', 'P', 'E', 'M', 'D', 'L', '1'};

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_f64(std::ostream& os, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

double read_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

void write_f32(std::ostream& os, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  write_u32(os, u);
}

float read_f32(std::istream& is) {
  const std::uint32_t u = read_u32(is);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const DenoiserT<float>& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  os.write(kMagic, 8);
  const ModelConfig& cfg = model.config();
  write_u32(os, static_cast<std::uint32_t>(cfg.image_side));
  write_u32(os, static_cast<std::uint32_t>(cfg.base_channels));
  write_u32(os, static_cast<std::uint32_t>(cfg.token_dim));
  write_u32(os, static_cast<std::uint32_t>(cfg.heads));
  write_u32(os, cfg.cape.mode == PoseMode::FourDoF ? 0u : 1u);
  write_u32(os, cfg.cape.radius_encoding == RadiusEncoding::LogNormalized ? 0u : 1u);
  write_f64(os, cfg.cape.bounds.r_min);
  write_f64(os, cfg.cape.bounds.r_max);
  write_f64(os, cfg.cape.translation_scale);

  const auto& store = model.params();
  write_u32(os, static_cast<std::uint32_t>(store.count()));
  for (int i = 0; i < store.count(); ++i) {
    const std::string& name = store.name(i);
    write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    const auto& v = store.value(i);
    write_u32(os, static_cast<std::uint32_t>(v.rank()));
    for (int r = 0; r < v.rank(); ++r) write_u32(os, static_cast<std::uint32_t>(v.dim(r)));
    for (std::int64_t k = 0; k < v.numel(); ++k) write_f32(os, v.at(k));
  }
  if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

DenoiserT<float> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0) {
    throw std::runtime_error("not a model checkpoint (bad magic): " + path);
  }
  ModelConfig cfg;
  cfg.image_side = static_cast<int>(read_u32(is));
  cfg.base_channels = static_cast<int>(read_u32(is));
  cfg.token_dim = static_cast<int>(read_u32(is));
  cfg.heads = static_cast<int>(read_u32(is));
  const std::uint32_t mode = read_u32(is);
  const std::uint32_t renc = read_u32(is);
  const double r_min = read_f64(is);
  const double r_max = read_f64(is);
  const double s = read_f64(is);
  cfg.cape = CapeConfig(mode == 0 ? PoseMode::FourDoF : PoseMode::SixDoF,
                        RadiusBounds(r_min, r_max), s,
                        renc == 0 ? RadiusEncoding::LogNormalized : RadiusEncoding::ScaledLog);

  ParamStoreT<float> store;
  const std::uint32_t count = read_u32(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = read_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const std::uint32_t rank = read_u32(is);
    std::vector<std::int64_t> dims(rank);
    for (auto& d : dims) d = static_cast<std::int64_t>(read_u32(is));
    TensorT<float> v(dims);
    for (std::int64_t k = 0; k < v.numel(); ++k) v.at(k) = read_f32(is);
    if (!is) throw std::runtime_error("truncated checkpoint: " + path);
    store.add(name, std::move(v));
  }
  return DenoiserT<float>(cfg, std::move(store));
}

}  // namespace cape
