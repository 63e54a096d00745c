#pragma once

#include <map>
#include <string>

namespace cape {

/// Human-readable key=value run configuration. Flags override file values;
/// the resolved set is written next to every run's outputs.
class Manifest {
 public:
  void set(const std::string& key, const std::string& value) { entries_[key] = value; }
  void set(const std::string& key, double value);
  void set(const std::string& key, std::int64_t value);

  bool has(const std::string& key) const { return entries_.count(key) > 0; }
  const std::string& get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;

  const std::map<std::string, std::string>& entries() const { return entries_; }

  /// Lines of "key = value"; '#' starts a comment.
  static Manifest read(const std::string& path);
  void write(const std::string& path) const;

 private:
  std::map<std::string, std::string> entries_;
};

}  // namespace cape
