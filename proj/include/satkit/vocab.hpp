#pragma once

#include <map>
#include <string>
#include <vector>

#include "satkit/tensor.hpp"

namespace satkit {

// Token inventory. Index 0 is blank, 1 start-of-sequence, 2 unknown; label
// tokens follow in insertion order.
class Vocab {
 public:
  static constexpr int kBlank = 0;
  static constexpr int kSos = 1;
  static constexpr int kUnk = 2;
  static constexpr int kNumReserved = 3;

  Vocab() : tokens_{"<blank>", "<sos>", "<unk>"} { reindex(); }

  explicit Vocab(const std::vector<std::string>& labels) : Vocab() {
    for (const auto& t : labels) add(t);
  }

  // Labels "t0".."t{n-1}", as used by the synthetic tasks.
  static Vocab synthetic(int n_labels) {
    Vocab v;
    for (int i = 0; i < n_labels; ++i) v.add("t" + std::to_string(i));
    return v;
  }

  int add(const std::string& token) {
    auto it = index_.find(token);
    if (it != index_.end()) return it->second;
    if (token.empty() || token.find_first_of(" \t\n") != std::string::npos)
      throw Error("vocab: invalid token '" + token + "'");
    tokens_.push_back(token);
    index_[token] = static_cast<int>(tokens_.size()) - 1;
    return index_[token];
  }

  // Unknown strings map to <unk>.
  int id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& token) const { return index_.count(token) > 0; }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  static bool is_label(int id) { return id >= kNumReserved; }

  std::vector<int> encode(const std::vector<std::string>& toks) const {
    std::vector<int> out;
    out.reserve(toks.size());
    for (const auto& t : toks) out.push_back(id(t));
    return out;
  }
  std::vector<std::string> decode(const std::vector<int>& ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int i : ids) out.push_back(token(i));
    return out;
  }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = static_cast<int>(i);
  }

  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
};

}  // namespace satkit
