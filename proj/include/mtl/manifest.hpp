#pragma once

// Flat key=value text files used for run manifests and --config inputs.
// '#' lines are comments; parsing ignores them, so a manifest can carry
// non-reproducibility metadata (timestamp, tool version) without affecting
// a re-run.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace mtl {

class KvFile {
 public:
  void set(const std::string& key, const std::string& value);
  void comment(const std::string& text);
  std::optional<std::string> get(const std::string& key) const;

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  std::string serialize() const;
  void write(const std::filesystem::path& path) const;

  static KvFile parse_text(const std::string& text, const std::string& origin = "<string>");
  static KvFile parse(const std::filesystem::path& path);

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
  std::vector<std::pair<size_t, std::string>> comments_;  // position -> text
};

}  // namespace mtl
