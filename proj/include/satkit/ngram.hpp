#pragma once

// Character n-gram language model with absolute discounting and backoff.
//
//   P(w|h) = (c(h,w) - d) / c(h)        if c(h,w) > 0
//          = alpha(h) * P(w|h')          otherwise, h' = h without its oldest token
//
// alpha(h) hands the discounted mass d * N1+(h.) / c(h) to the tokens unseen
// after h, in proportion to their lower-order probability. The unigram level
// is proportional to counts; when some vocabulary tokens were never seen it
// reserves d * (#seen types) pseudo-counts and spreads them uniformly over them.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "satkit/tensor.hpp"

namespace satkit {

class NgramModel {
 public:
  static constexpr const char* kBos = "<s>";
  static constexpr const char* kEos = "</s>";
  static constexpr const char* kUnk = "<unk>";

  using Sentence = std::vector<std::string>;

  static NgramModel train(const std::vector<Sentence>& corpus, int order, double discount = 0.75,
                          const std::vector<std::string>& extra_vocab = {}) {
    if (order < 1) throw Error("ngram: order must be >= 1");
    if (discount <= 0 || discount >= 1) throw Error("ngram: discount must be in (0, 1)");
    bool any = false;
    for (const auto& s : corpus) any = any || !s.empty();
    if (!any) throw Error("ngram: empty training corpus");

    NgramModel m;
    m.order_ = order;
    m.discount_ = discount;
    m.intern(kBos);
    m.intern(kEos);
    m.intern(kUnk);
    for (const auto& s : corpus)
      for (const auto& w : s) m.intern(w);
    for (const auto& w : extra_vocab) m.intern(w);

    // counts[k][context][w] for n-gram order k (context length k-1)
    std::vector<std::map<std::vector<int>, std::map<int, double>>> counts(static_cast<std::size_t>(order) + 1);
    for (const auto& s : corpus) {
      if (s.empty()) continue;
      std::vector<int> seq{m.id(kBos)};
      for (const auto& w : s) seq.push_back(m.id(w));
      seq.push_back(m.id(kEos));
      for (std::size_t i = 1; i < seq.size(); ++i)
        for (int k = 1; k <= order; ++k) {
          if (i + 1 < static_cast<std::size_t>(k)) break;
          std::vector<int> ctx(seq.begin() + static_cast<long>(i) - (k - 1), seq.begin() + static_cast<long>(i));
          counts[static_cast<std::size_t>(k)][ctx][seq[i]] += 1;
        }
    }

    m.tables_.assign(static_cast<std::size_t>(order) + 1, {});
    // Unigram level.
    {
      const auto& uni = counts[1][{}];
      double total = 0;
      for (const auto& [w, c] : uni) total += c;
      std::vector<int> unseen;
      for (int w = 0; w < static_cast<int>(m.vocab_.size()); ++w)
        if (w != m.id(kBos) && !uni.count(w)) unseen.push_back(w);
      const double reserve = unseen.empty() ? 0.0 : discount * static_cast<double>(uni.size());
      auto& ctx = m.tables_[1][{}];
      for (const auto& [w, c] : uni) ctx.logp[w] = std::log(c / (total + reserve));
      for (int w : unseen)
        ctx.logp[w] = std::log(reserve / (total + reserve) / static_cast<double>(unseen.size()));
    }
    for (int k = 2; k <= order; ++k) {
      for (const auto& [h, next] : counts[static_cast<std::size_t>(k)]) {
        double ch = 0;
        for (const auto& [w, c] : next) ch += c;
        const std::vector<int> lower(h.begin() + 1, h.end());
        double lower_seen = 0;
        for (const auto& [w, c] : next) lower_seen += std::exp(m.score_from(k - 1, lower, w));
        auto& ctx = m.tables_[static_cast<std::size_t>(k)][h];
        const double rest = 1.0 - lower_seen;
        if (rest <= 1e-12) {
          // Everything predictable already follows h: maximum likelihood.
          for (const auto& [w, c] : next) ctx.logp[w] = std::log(c / ch);
          ctx.log_backoff = 0;
          continue;
        }
        for (const auto& [w, c] : next) ctx.logp[w] = std::log((c - discount) / ch);
        const double mass = discount * static_cast<double>(next.size()) / ch;
        ctx.log_backoff = std::log(mass / rest);
        ctx.has_backoff = true;
      }
    }
    return m;
  }

  int order() const { return order_; }
  double discount() const { return discount_; }

  // Id of a token; anything outside the vocabulary is <unk>.
  int id(const std::string& w) const {
    auto it = index_.find(w);
    return it == index_.end() ? index_.at(kUnk) : it->second;
  }
  const std::string& token(int id) const { return vocab_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& vocab() const { return vocab_; }

  // Tokens that can be predicted (everything except <s>).
  std::vector<int> predictable() const {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(vocab_.size()); ++i)
      if (vocab_[static_cast<std::size_t>(i)] != kBos) out.push_back(i);
    return out;
  }

  // ln P(next | <s> context...). Unknown tokens score as <unk>; <s> as next
  // is treated as unknown too.
  double score(const std::vector<std::string>& context, const std::string& next) const {
    std::vector<int> ids;
    ids.reserve(context.size());
    for (const auto& w : context) ids.push_back(id(w));
    return score_ids(ids, id(next));
  }

  double score_ids(const std::vector<int>& context, int next) const {
    if (next == index_.at(kBos)) next = index_.at(kUnk);
    // Last order-1 tokens of "<s> context".
    const std::size_t keep = static_cast<std::size_t>(order_ - 1);
    const std::size_t total = context.size() + 1;
    std::vector<int> hist;
    hist.reserve(keep);
    for (std::size_t i = total - std::min(keep, total); i < total; ++i)
      hist.push_back(i == 0 ? index_.at(kBos) : context[i - 1]);
    return score_from(static_cast<int>(hist.size()) + 1, hist, next);
  }

  // Sum of ln P over the sentence including </s>.
  double sentence_logprob(const Sentence& s) const {
    std::vector<int> ctx;
    double lp = 0;
    for (const auto& w : s) {
      lp += score_ids(ctx, id(w));
      ctx.push_back(id(w));
    }
    return lp + score_ids(ctx, id(kEos));
  }

  double perplexity(const std::vector<Sentence>& corpus) const {
    double lp = 0;
    std::size_t n = 0;
    for (const auto& s : corpus) {
      lp += sentence_logprob(s);
      n += s.size() + 1;
    }
    return std::exp(-lp / static_cast<double>(n));
  }

  // Every stored context with its order; used by normalization checks.
  std::vector<std::pair<int, std::vector<int>>> contexts() const {
    std::vector<std::pair<int, std::vector<int>>> out;
    for (std::size_t k = 1; k < tables_.size(); ++k)
      for (const auto& [h, c] : tables_[k])
        if (!c.logp.empty()) out.emplace_back(static_cast<int>(k), h);
    return out;
  }

  // ln P(next | h) with h exactly the given context at order k (|h| = k-1).
  double score_context(int k, const std::vector<int>& h, int next) const { return score_from(k, h, next); }

  // Text table, one n-gram per line, sorted:
  //   <context tokens or "-"> TAB <token> TAB <ln prob> TAB <ln backoff of context+token, or "-">
  void save(std::ostream& os) const {
    os << "satkit-ngram 1\n";
    os << "order " << order_ << "\n";
    os << std::setprecision(17) << "discount " << discount_ << "\n";
    os << "vocab";
    for (const auto& w : vocab_) os << ' ' << w;
    os << "\n";
    std::vector<std::tuple<int, std::string, std::string, std::string>> lines;
    for (std::size_t k = 1; k < tables_.size(); ++k)
      for (const auto& [h, ctx] : tables_[k])
        for (const auto& [w, lp] : ctx.logp) {
          std::vector<int> ext = h;
          ext.push_back(w);
          std::string bo = "-";
          if (k + 1 < tables_.size()) {
            auto it = tables_[k + 1].find(ext);
            if (it != tables_[k + 1].end() && it->second.has_backoff) bo = fmt(it->second.log_backoff);
          }
          lines.emplace_back(static_cast<int>(k), join(h), token(w), fmt(lp) + "\t" + bo);
        }
    // <s> never gets predicted but still needs a line to carry its backoff.
    if (tables_.size() > 2) {
      auto it = tables_[2].find({index_.at(kBos)});
      if (it != tables_[2].end() && it->second.has_backoff)
        lines.emplace_back(1, "-", kBos, "-inf\t" + fmt(it->second.log_backoff));
    }
    std::sort(lines.begin(), lines.end());
    os << "entries " << lines.size() << "\n";
    for (const auto& [k, h, w, rest] : lines) os << h << '\t' << w << '\t' << rest << '\n';
  }

  static NgramModel load(std::istream& is) {
    NgramModel m;
    std::string line, key;
    auto expect = [&](const std::string& k) {
      if (!std::getline(is, line)) throw Error("ngram file: truncated before '" + k + "'");
      std::istringstream ls(line);
      ls >> key;
      if (key != k) throw Error("ngram file: expected '" + k + "', got '" + key + "'");
      return ls.str().substr(std::min(line.size(), k.size() + 1));
    };
    if (!std::getline(is, line) || line != "satkit-ngram 1") throw Error("ngram file: bad magic line");
    m.order_ = std::stoi(expect("order"));
    m.discount_ = std::stod(expect("discount"));
    {
      std::istringstream vs(expect("vocab"));
      std::string w;
      while (vs >> w) m.intern(w);
    }
    if (!m.index_.count(kUnk) || !m.index_.count(kBos)) throw Error("ngram file: vocabulary lacks <s>/<unk>");
    const std::size_t n = std::stoul(expect("entries"));
    m.tables_.assign(static_cast<std::size_t>(m.order_) + 1, {});
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::getline(is, line)) throw Error("ngram file: truncated entries");
      std::vector<std::string> f;
      std::istringstream ls(line);
      std::string cell;
      while (std::getline(ls, cell, '\t')) f.push_back(cell);
      if (f.size() != 4) throw Error("ngram file: malformed line: " + line);
      std::vector<int> h;
      if (f[0] != "-") {
        std::istringstream hs(f[0]);
        std::string w;
        while (hs >> w) h.push_back(m.id(w));
      }
      const int w = m.id(f[1]);
      const std::size_t k = h.size() + 1;
      if (k >= m.tables_.size()) throw Error("ngram file: n-gram longer than order");
      if (f[2] != "-inf") m.tables_[k][h].logp[w] = std::stod(f[2]);
      if (f[3] != "-" && k + 1 < m.tables_.size()) {
        std::vector<int> ext = h;
        ext.push_back(w);
        auto& c = m.tables_[k + 1][ext];
        c.log_backoff = std::stod(f[3]);
        c.has_backoff = true;
      }
    }
    return m;
  }

 private:
  struct Context {
    std::map<int, double> logp;
    double log_backoff = 0;
    bool has_backoff = false;
  };

  int intern(const std::string& w) {
    auto it = index_.find(w);
    if (it != index_.end()) return it->second;
    vocab_.push_back(w);
    return index_[w] = static_cast<int>(vocab_.size()) - 1;
  }

  // Backoff evaluation starting at order k with context h (|h| = k-1).
  double score_from(int k, std::vector<int> h, int w) const {
    double acc = 0;
    for (; k >= 1; --k) {
      const auto& table = tables_[static_cast<std::size_t>(k)];
      auto it = table.find(h);
      if (it != table.end()) {
        auto jt = it->second.logp.find(w);
        if (jt != it->second.logp.end()) return acc + jt->second;
        acc += it->second.log_backoff;
      }
      if (!h.empty()) h.erase(h.begin());
    }
    return -std::numeric_limits<double>::infinity();
  }

  std::string join(const std::vector<int>& h) const {
    if (h.empty()) return "-";
    std::string s;
    for (std::size_t i = 0; i < h.size(); ++i) s += (i ? " " : "") + token(h[i]);
    return s;
  }
  static std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
  }

  int order_ = 0;
  double discount_ = 0.75;
  std::vector<std::string> vocab_;
  std::map<std::string, int> index_;
  std::vector<std::map<std::vector<int>, Context>> tables_;
};

}  // namespace satkit
