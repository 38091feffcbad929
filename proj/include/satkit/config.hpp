#pragma once

// "key = value" text files. '#' starts a comment; later keys win.

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "satkit/tensor.hpp"

namespace satkit {

class KeyValues {
 public:
  static KeyValues parse(std::istream& is, const std::string& origin = "<stream>") {
    KeyValues kv;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      const auto eq = line.find('=');
      const auto key = trim(line.substr(0, eq));
      if (key.empty()) continue;
      if (eq == std::string::npos)
        throw Error(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
      kv.values_[key] = trim(line.substr(eq + 1));
    }
    return kv;
  }

  static KeyValues load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot read config file: " + path);
    return parse(f, path);
  }

  bool has(const std::string& k) const { return values_.count(k) > 0; }
  const std::string& get(const std::string& k) const {
    auto it = values_.find(k);
    if (it == values_.end()) throw Error("config: missing key '" + k + "'");
    return it->second;
  }
  std::string get_or(const std::string& k, const std::string& dflt) const { return has(k) ? get(k) : dflt; }
  int get_int(const std::string& k, int dflt) const { return has(k) ? std::stoi(get(k)) : dflt; }
  double get_double(const std::string& k, double dflt) const { return has(k) ? std::stod(get(k)) : dflt; }
  void set(const std::string& k, const std::string& v) { values_[k] = v; }
  const std::map<std::string, std::string>& items() const { return values_; }

  std::string str() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << " = " << v << '\n';
    return os.str();
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace satkit
