#include "mtl/manifest.hpp"

#include <fstream>
#include <sstream>

#include "mtl/phantom.hpp"  // io_error

namespace mtl {

void KvFile::set(const std::string& key, const std::string& value) {
  for (auto& e : entries_)
    if (e.first == key) {
      e.second = value;
      return;
    }
  entries_.emplace_back(key, value);
}

void KvFile::comment(const std::string& text) {
  comments_.emplace_back(entries_.size(), text);
}

std::optional<std::string> KvFile::get(const std::string& key) const {
  for (const auto& e : entries_)
    if (e.first == key) return e.second;
  return std::nullopt;
}

std::string KvFile::serialize() const {
  std::ostringstream os;
  size_t ci = 0;
  for (size_t i = 0; i <= entries_.size(); ++i) {
    while (ci < comments_.size() && comments_[ci].first == i) os << "# " << comments_[ci++].second << "\n";
    if (i < entries_.size()) os << entries_[i].first << "=" << entries_[i].second << "\n";
  }
  return os.str();
}

void KvFile::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot write " + path.string());
  out << serialize();
  if (!out) throw io_error("short write: " + path.string());
}

KvFile KvFile::parse_text(const std::string& text, const std::string& origin) {
  KvFile kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t start = line.find_first_not_of(" \t\r");
    if (start == std::string::npos) continue;
    if (line[start] == '#') continue;
    size_t eq = line.find('=', start);
    if (eq == std::string::npos)
      throw io_error(origin + ":" + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    std::string key = line.substr(start, eq - start);
    std::string val = line.substr(eq + 1);
    while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
    while (!val.empty() && (val.back() == '\r' || val.back() == ' ' || val.back() == '\t')) val.pop_back();
    size_t vs = val.find_first_not_of(" \t");
    if (vs != std::string::npos) val = val.substr(vs);
    kv.set(key, val);
  }
  return kv;
}

KvFile KvFile::parse(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_text(buf.str(), path.string());
}

}  // namespace mtl
