#include "cape/manifest.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace cape {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

void Manifest::set(const std::string& key, double value) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.17g", value);
  entries_[key] = buf;
}

void Manifest::set(const std::string& key, std::int64_t value) {
  entries_[key] = std::to_string(value);
}

const std::string& Manifest::get(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw std::invalid_argument("manifest: missing key '" + key + "'");
  return it->second;
}

std::string Manifest::get_or(const std::string& key, const std::string& fallback) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? fallback : it->second;
}

Manifest Manifest::read(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config file: " + path);
  Manifest m;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) +
                               ": expected 'key = value', got '" + line + "'");
    }
    m.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return m;
}

void Manifest::write(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write manifest: " + path);
  for (const auto& [key, value] : entries_) os << key << " = " << value << "\n";
}

}  // namespace cape
