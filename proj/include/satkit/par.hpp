#pragma once

// Path-aware regularization: a cross-entropy restricted to one alignment path
// through the lattice, each node weighted by w = 1 - p(blank|t,u), added to
// the transducer loss with weight beta.

#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "satkit/lattice.hpp"

namespace satkit {

class AlignmentMismatch : public Error {
 public:
  using Error::Error;
};

inline const std::string kSilenceToken = "sil";

// Per-frame tokens with silence already mapped to blank.
struct FrameAlignment {
  std::vector<int> tokens;
  std::size_t size() const { return tokens.size(); }
};

struct PathStep {
  std::size_t t = 0;
  std::size_t u = 0;
  int target = Vocab::kBlank;
  friend bool operator==(const PathStep&, const PathStep&) = default;
};

using AlignmentPath = std::vector<PathStep>;

struct ParConfig {
  double beta = 10.0;
  bool detach_weight = true;
  bool labels_only = false;
};

// Scans the alignment left to right. A blank frame contributes (t, u, blank);
// a frame aligned to l_u contributes (t, u, l_u) followed by (t, u+1, blank).
// Repeated labels are consumed greedily in order.
inline AlignmentPath build_path(const FrameAlignment& a, const std::vector<int>& targets) {
  AlignmentPath path;
  path.reserve(a.size() + targets.size());
  std::size_t u = 0;
  for (std::size_t t = 0; t < a.size(); ++t) {
    const int tok = a.tokens[t];
    if (tok == Vocab::kBlank) {
      path.push_back({t, u, Vocab::kBlank});
      continue;
    }
    if (u >= targets.size() || tok != targets[u]) {
      std::ostringstream os;
      os << "alignment mismatch at frame " << t << ": aligned token " << tok << ", expected ";
      if (u < targets.size())
        os << "target " << targets[u] << " (position " << u << ")";
      else
        os << "no further labels";
      throw AlignmentMismatch(os.str());
    }
    path.push_back({t, u, tok});
    ++u;
    path.push_back({t, u, Vocab::kBlank});
  }
  if (u != targets.size())
    throw AlignmentMismatch("alignment mismatch: only " + std::to_string(u) + " of " +
                            std::to_string(targets.size()) + " targets aligned");
  if (a.size() == 0) throw AlignmentMismatch("alignment mismatch: empty alignment");
  return path;
}

// L_par = -sum_{path} w_{t,u} log p(target|t,u). Nodes with w = 0 add nothing.
template <class Real>
Tensor<Real> par_loss(const PosteriorLattice<Real>& lat, const AlignmentPath& path, const ParConfig& cfg) {
  std::vector<std::size_t> tgt_idx, blank_idx;
  for (const auto& s : path) {
    if (s.t >= lat.T || s.u > lat.U || s.target < 0 || static_cast<std::size_t>(s.target) >= lat.K)
      throw Error("par_loss: path step (" + std::to_string(s.t) + "," + std::to_string(s.u) +
                  ") outside lattice");
    if (cfg.labels_only && s.target == Vocab::kBlank) continue;
    tgt_idx.push_back(lat.index(s.t, s.u, static_cast<std::size_t>(s.target)));
    blank_idx.push_back(lat.index(s.t, s.u, Vocab::kBlank));
  }
  if (tgt_idx.empty()) return Tensor<Real>::scalar(Real(0));
  auto p_blank = exp(take(lat.log_probs, blank_idx));
  auto w = add_scalar(scale(p_blank, Real(-1)), Real(1));
  if (cfg.detach_weight) w = w.detach();
  // Drop w == 0 nodes so that a -inf log-probability there cannot produce NaN.
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < tgt_idx.size(); ++i)
    if (w[i] != Real(0)) keep.push_back(i);
  if (keep.empty()) return Tensor<Real>::scalar(Real(0));
  if (keep.size() != tgt_idx.size()) {
    std::vector<std::size_t> t2;
    for (auto i : keep) t2.push_back(tgt_idx[i]);
    tgt_idx = std::move(t2);
    w = take(w, keep);
  }
  return scale(sum(mul(w, take(lat.log_probs, tgt_idx))), Real(-1));
}

// Same sum with caller-supplied per-step weights held constant.
template <class Real>
Tensor<Real> par_loss_fixed_weights(const PosteriorLattice<Real>& lat, const AlignmentPath& path,
                                    const std::vector<Real>& weights) {
  if (weights.size() != path.size()) throw Error("par_loss_fixed_weights: weight count mismatch");
  std::vector<std::size_t> idx;
  std::vector<Real> w;
  for (std::size_t i = 0; i < path.size(); ++i) {
    if (weights[i] == Real(0)) continue;
    idx.push_back(lat.index(path[i].t, path[i].u, static_cast<std::size_t>(path[i].target)));
    w.push_back(weights[i]);
  }
  if (idx.empty()) return Tensor<Real>::scalar(Real(0));
  const std::size_t n = w.size();
  return scale(sum(mul(Tensor<Real>({n}, std::move(w)), take(lat.log_probs, idx))), Real(-1));
}

template <class Real>
struct JointLoss {
  Tensor<Real> total;  // graph-connected
  double transducer = 0;
  double par = 0;
};

// L = L_transducer + beta * L_par. With beta = 0 the total is the transducer
// loss node itself, so values and gradients match it exactly.
template <class Real>
JointLoss<Real> joint_loss(const PosteriorLattice<Real>& lat, const AlignmentPath* path, const ParConfig& cfg) {
  JointLoss<Real> out;
  auto tl = transducer_loss_tensor(lat);
  out.transducer = static_cast<double>(tl.item());
  if (path == nullptr) {
    out.total = tl;
    return out;
  }
  if (cfg.beta == 0.0) {
    NoGradGuard ng;
    out.par = static_cast<double>(par_loss(lat, *path, cfg).item());
    out.total = tl;
    return out;
  }
  auto pl = par_loss(lat, *path, cfg);
  out.par = static_cast<double>(pl.item());
  out.total = add(tl, scale(pl, static_cast<Real>(cfg.beta)));
  return out;
}

// Alignment file: "utt_id tok tok ..." per line; "sil" becomes blank.
inline FrameAlignment alignment_from_tokens(const std::vector<std::string>& toks, const Vocab& vocab) {
  FrameAlignment a;
  a.tokens.reserve(toks.size());
  for (const auto& t : toks) {
    if (t == kSilenceToken || t == vocab.token(Vocab::kBlank)) {
      a.tokens.push_back(Vocab::kBlank);
      continue;
    }
    if (!vocab.contains(t)) throw Error("alignment: token '" + t + "' not in vocabulary");
    a.tokens.push_back(vocab.id(t));
  }
  return a;
}

inline std::map<std::string, FrameAlignment> read_alignments(std::istream& is, const Vocab& vocab) {
  std::map<std::string, FrameAlignment> out;
  std::string line;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string id, tok;
    if (!(ls >> id)) continue;
    std::vector<std::string> toks;
    while (ls >> tok) toks.push_back(tok);
    out[id] = alignment_from_tokens(toks, vocab);
  }
  return out;
}

inline void write_alignment(std::ostream& os, const std::string& id, const FrameAlignment& a, const Vocab& vocab) {
  os << id;
  for (int t : a.tokens) os << ' ' << (t == Vocab::kBlank ? kSilenceToken : vocab.token(t));
  os << '\n';
}

}  // namespace satkit
