#pragma once

// Greedy and frame-synchronous beam search over transducer outputs, n-gram
// shallow fusion, streaming decoding and character error rate.

#include <algorithm>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "satkit/data.hpp"
#include "satkit/lattice.hpp"
#include "satkit/model.hpp"
#include "satkit/ngram.hpp"

namespace satkit {

enum class DecodeMode { kOffline, kStreaming };

inline std::string to_string(DecodeMode m) { return m == DecodeMode::kOffline ? "offline" : "streaming"; }
inline DecodeMode decode_mode_from_string(const std::string& s) {
  if (s == "offline") return DecodeMode::kOffline;
  if (s == "streaming") return DecodeMode::kStreaming;
  throw Error("unknown decode mode: " + s);
}

struct DecodeConfig {
  int beam_width = 5;
  double lm_weight = 0.2;
  int max_symbols_per_frame = 10;
  DecodeMode mode = DecodeMode::kOffline;
  std::optional<ChunkSpec> chunk;  // overrides the model's chunk when set

  void validate() const {
    if (beam_width < 1) throw Error("decode: beam width must be >= 1, got " + std::to_string(beam_width));
    if (lm_weight < 0) throw Error("decode: LM weight must be >= 0");
    if (max_symbols_per_frame < 1) throw Error("decode: max symbols per frame must be >= 1");
  }
};

// Per-utterance scoring state: projected encoder rows plus a cache of
// projected prediction-network rows keyed by label prefix. Rows can be
// appended as they become available.
template <class Real = double>
class ModelScorer {
 public:
  explicit ModelScorer(const SatModel<Real>& model) : model_(model) {}

  void add_frames(const Tensor<Real>& f) {
    NoGradGuard ng;
    const auto pf = model_.joint_network().project_frames(f);
    const std::size_t d = pf.dim(1);
    for (std::size_t t = 0; t < pf.dim(0); ++t) {
      const auto v = pf.values();
      frames_.emplace_back(v.begin() + static_cast<long>(t * d), v.begin() + static_cast<long>((t + 1) * d));
    }
  }

  std::size_t frames() const { return frames_.size(); }
  int vocab_size() const { return model_.vocab().size(); }

  // log p(.|t, prefix) over the full output vocabulary.
  std::vector<double> log_probs(std::size_t t, const std::vector<int>& prefix) {
    NoGradGuard ng;
    const auto& pg = label_row(prefix);
    const auto& pf = frames_.at(t);
    const auto& net = model_.joint_network();
    const Tensor<Real> a({1, pf.size()}, pf), b({1, pg.size()}, pg);
    const auto lp = net.log_probs(a, b).values();
    return {lp.begin(), lp.end()};
  }

 private:
  const std::vector<Real>& label_row(const std::vector<int>& prefix) {
    auto it = cache_.find(prefix);
    if (it != cache_.end()) return it->second;
    // Causal prediction network: the last row for this prefix equals row
    // |prefix| of any longer sequence, so rows are computed once per prefix.
    const auto g = model_.predict(prefix);
    const auto last = slice(g, 0, g.dim(0) - 1, g.dim(0));
    const auto v = model_.joint_network().project_labels(last).values();
    return cache_.emplace(prefix, std::vector<Real>(v.begin(), v.end())).first->second;
  }

  const SatModel<Real>& model_;
  std::vector<std::vector<Real>> frames_;
  std::map<std::vector<int>, std::vector<Real>> cache_;
};

// Maps model label ids onto an n-gram model's ids; the LM sees the emitted
// prefix as history.
class LmScorer {
 public:
  LmScorer(const NgramModel& lm, const Vocab& vocab) : lm_(lm) {
    for (int i = 0; i < vocab.size(); ++i) map_.push_back(lm.id(vocab.token(i)));
  }
  double score(const std::vector<int>& prefix, int next) const {
    std::vector<int> ctx;
    ctx.reserve(prefix.size());
    for (int p : prefix) ctx.push_back(map_[static_cast<std::size_t>(p)]);
    return lm_.score_ids(ctx, map_[static_cast<std::size_t>(next)]);
  }

 private:
  const NgramModel& lm_;
  std::vector<int> map_;
};

struct Hypothesis {
  std::vector<int> prefix;
  double trans_score = 0;
  double lm_score = 0;
  double combined = 0;
};

// Labels a search may emit: everything except blank and the start symbol.
inline bool emittable(int k) { return k != Vocab::kBlank && k != Vocab::kSos; }

struct GreedyStep {
  std::size_t t = 0;
  std::size_t u = 0;
  int chosen = 0;
  const std::vector<double>* log_probs = nullptr;
};

struct GreedyResult {
  std::vector<int> labels;
  double score = 0;
  std::size_t blank_transitions = 0;
  std::size_t forced_advances = 0;
};

// Frame-by-frame argmax search; feed rows with advance() as they arrive.
template <class Scorer>
class GreedySearch {
 public:
  GreedySearch(Scorer& scorer, int max_symbols, std::function<void(const GreedyStep&)> trace = {})
      : scorer_(scorer), max_symbols_(max_symbols), trace_(std::move(trace)) {}

  void advance() {
    const std::size_t t = next_++;
    for (int s = 0;; ++s) {
      const auto lp = scorer_.log_probs(t, res_.labels);
      // Ranks running-score sums rather than raw log-probs so that ties
      // resolve exactly as in a width-1 beam.
      int best = Vocab::kBlank;
      double best_score = res_.score + lp[Vocab::kBlank];
      if (s < max_symbols_) {
        for (int k = 0; k < static_cast<int>(lp.size()); ++k) {
          if (!emittable(k)) continue;
          const double sc = res_.score + lp[static_cast<std::size_t>(k)];
          if (sc > best_score) {
            best = k;
            best_score = sc;
          }
        }
      } else {
        ++res_.forced_advances;
      }
      if (trace_) trace_({t, res_.labels.size(), best, &lp});
      res_.score = best_score;
      if (best == Vocab::kBlank) {
        ++res_.blank_transitions;
        return;
      }
      res_.labels.push_back(best);
    }
  }

  std::size_t frames_consumed() const { return next_; }
  const GreedyResult& result() const { return res_; }

 private:
  Scorer& scorer_;
  int max_symbols_;
  std::function<void(const GreedyStep&)> trace_;
  std::size_t next_ = 0;
  GreedyResult res_;
};

// Frame-synchronous beam. Within a frame, hypotheses expand up to
// max_symbols times; a blank expansion finishes the frame for that prefix.
// Candidates sharing a prefix and state are merged by log-adding their
// transducer scores, and pruning keeps the beam_width best combined scores.
template <class Scorer>
class BeamSearch {
 public:
  BeamSearch(Scorer& scorer, const DecodeConfig& cfg, const LmScorer* lm = nullptr)
      : scorer_(scorer), cfg_(cfg), lm_(cfg.lm_weight > 0 ? lm : nullptr) {
    cfg_.validate();
    beam_.push_back(Hypothesis{});
  }

  void advance() {
    const std::size_t t = next_++;
    const auto W = static_cast<std::size_t>(cfg_.beam_width);
    std::vector<Hypothesis> done;
    std::map<std::vector<int>, std::size_t> done_index;
    std::vector<Hypothesis> active = beam_;
    for (int s = 0; s <= cfg_.max_symbols_per_frame && !active.empty(); ++s) {
      std::vector<Cand> cands;
      std::map<std::pair<std::vector<int>, bool>, std::size_t> seen;
      auto push = [&](std::vector<int> prefix, bool finished, double trans, double lm) {
        auto key = std::make_pair(prefix, finished);
        if (auto it = seen.find(key); it != seen.end()) {
          auto& c = cands[it->second].h;
          c.trans_score = log_add(c.trans_score, trans);
          c.combined = c.trans_score + cfg_.lm_weight * c.lm_score;
          return;
        }
        seen.emplace(std::move(key), cands.size());
        Hypothesis h{std::move(prefix), trans, lm, 0};
        h.combined = lm_ ? trans + cfg_.lm_weight * lm : trans;
        cands.push_back({std::move(h), finished});
      };
      for (const auto& h : active) {
        const auto lp = scorer_.log_probs(t, h.prefix);
        push(h.prefix, true, h.trans_score + lp[Vocab::kBlank], h.lm_score);
        if (s == cfg_.max_symbols_per_frame) continue;
        for (int k = 0; k < static_cast<int>(lp.size()); ++k) {
          if (!emittable(k)) continue;
          auto p = h.prefix;
          p.push_back(k);
          const double lm = lm_ ? h.lm_score + lm_->score(h.prefix, k) : 0.0;
          push(std::move(p), false, h.trans_score + lp[static_cast<std::size_t>(k)], lm);
        }
      }
      std::stable_sort(cands.begin(), cands.end(),
                       [](const Cand& a, const Cand& b) { return a.h.combined > b.h.combined; });
      if (cands.size() > W) cands.resize(W);
      active.clear();
      for (auto& c : cands) {
        if (!c.finished) {
          active.push_back(std::move(c.h));
          continue;
        }
        auto it = done_index.find(c.h.prefix);
        if (it == done_index.end()) {
          done_index.emplace(c.h.prefix, done.size());
          done.push_back(std::move(c.h));
        } else {
          auto& d = done[it->second];
          d.trans_score = log_add(d.trans_score, c.h.trans_score);
          d.combined = lm_ ? d.trans_score + cfg_.lm_weight * d.lm_score : d.trans_score;
        }
      }
    }
    std::stable_sort(done.begin(), done.end(),
                     [](const Hypothesis& a, const Hypothesis& b) { return a.combined > b.combined; });
    if (done.size() > W) done.resize(W);
    beam_ = std::move(done);
  }

  std::size_t frames_consumed() const { return next_; }
  // Current beam, best first.
  const std::vector<Hypothesis>& hypotheses() const { return beam_; }
  const Hypothesis& best() const { return beam_.front(); }

 private:
  struct Cand {
    Hypothesis h;
    bool finished;
  };

  Scorer& scorer_;
  DecodeConfig cfg_;
  const LmScorer* lm_;
  std::size_t next_ = 0;
  std::vector<Hypothesis> beam_;
};

template <class Real>
ChunkSpec effective_chunk(const SatModel<Real>& model, const DecodeConfig& cfg) {
  return cfg.chunk ? *cfg.chunk : model.config().chunk;
}

template <class Real>
GreedyResult greedy_decode(const SatModel<Real>& model, const Tensor<Real>& features, int max_symbols = 10,
                           std::function<void(const GreedyStep&)> trace = {},
                           std::optional<ChunkSpec> chunk = std::nullopt) {
  NoGradGuard ng;
  ModelScorer<Real> scorer(model);
  scorer.add_frames(model.encode(features, chunk ? *chunk : model.config().chunk));
  GreedySearch<ModelScorer<Real>> search(scorer, max_symbols, std::move(trace));
  while (search.frames_consumed() < scorer.frames()) search.advance();
  return search.result();
}

template <class Real>
std::vector<Hypothesis> beam_decode(const SatModel<Real>& model, const Tensor<Real>& features,
                                    const NgramModel* lm, const DecodeConfig& cfg) {
  cfg.validate();
  NoGradGuard ng;
  ModelScorer<Real> scorer(model);
  scorer.add_frames(model.encode(features, effective_chunk(model, cfg)));
  std::optional<LmScorer> lms;
  if (lm) lms.emplace(*lm, model.vocab());
  BeamSearch<ModelScorer<Real>> search(scorer, cfg, lms ? &*lms : nullptr);
  while (search.frames_consumed() < scorer.frames()) search.advance();
  return search.hypotheses();
}

// Incremental decoder for chunk-masked encoders. Frames are buffered until
// the receptive field of the next output row is complete; each ready span is
// encoded from a window holding exactly that field, so the rows (and hence
// the search) match offline chunk-masked decoding bit for bit.
template <class Real = double>
class StreamDecoder {
 public:
  StreamDecoder(const SatModel<Real>& model, const DecodeConfig& cfg, const NgramModel* lm = nullptr,
                std::optional<StreamingStacker> stacker = std::nullopt)
      : model_(model), cfg_(cfg), chunk_(effective_chunk(model, cfg)), scorer_(model),
        stacker_(std::move(stacker)) {
    cfg_.validate();
    if (!chunk_.right) throw Error("streaming decode requires a bounded right context; chunk is " +
                                   chunk_side_str(chunk_.left) + "/" + chunk_side_str(chunk_.right));
    const std::size_t B = model.num_enc_blocks();
    lookahead_ = B * static_cast<std::size_t>(*chunk_.right);
    if (chunk_.left) lookback_ = B * static_cast<std::size_t>(*chunk_.left);
    if (lm) lm_.emplace(*lm, model.vocab());
    if (cfg_.beam_width == 1 && !lm_)
      greedy_.emplace(scorer_, cfg_.max_symbols_per_frame);
    else
      beam_.emplace(scorer_, cfg_, lm_ ? &*lm_ : nullptr);
  }

  // Frames of lookahead before an input frame's output can be emitted.
  std::size_t latency_frames() const {
    return lookahead_ + (stacker_ ? static_cast<std::size_t>(stacker_->right_context()) : 0);
  }

  // Accepts one input frame (raw if a stacker is attached); returns the
  // current best label sequence.
  std::vector<int> push(std::span<const double> frame) {
    if (stacker_) {
      for (auto& f : stacker_->push(frame)) append(f);
    } else {
      append(frame);
    }
    run(false);
    return best();
  }

  std::vector<int> finish() {
    if (stacker_)
      for (auto& f : stacker_->finish()) append(f);
    run(true);
    return best();
  }

  std::vector<int> best() const {
    if (greedy_) return greedy_->result().labels;
    return beam_->best().prefix;
  }
  std::vector<Hypothesis> hypotheses() const {
    if (greedy_) return {Hypothesis{greedy_->result().labels, greedy_->result().score, 0, greedy_->result().score}};
    return beam_->hypotheses();
  }
  std::size_t frames_encoded() const { return scorer_.frames(); }

 private:
  void append(std::span<const double> f) {
    if (dim_ == 0) dim_ = f.size();
    if (f.size() != dim_) throw Error("stream: frame width changed");
    buffer_.insert(buffer_.end(), f.begin(), f.end());
    ++received_;
  }

  void run(bool final) {
    const std::size_t done = scorer_.frames();
    std::size_t ready_end = received_;  // exclusive
    if (!final) ready_end = received_ > lookahead_ ? received_ - lookahead_ : 0;
    if (ready_end > done) {
      const std::size_t lo = lookback_ ? (done > *lookback_ ? done - *lookback_ : 0) : 0;
      const std::size_t hi = std::min(received_, ready_end + lookahead_);
      const std::size_t n = hi - lo;
      std::vector<Real> win(n * dim_);
      for (std::size_t i = 0; i < n * dim_; ++i)
        win[i] = static_cast<Real>(buffer_[(lo - base_) * dim_ + i]);
      NoGradGuard ng;
      const auto f = model_.encode(Tensor<Real>({n, dim_}, std::move(win)), chunk_, lo);
      scorer_.add_frames(slice(f, 0, done - lo, ready_end - lo));
      // Drop frames no future output row can reach.
      if (lookback_) {
        const std::size_t keep = ready_end > *lookback_ ? ready_end - *lookback_ : 0;
        if (keep > base_) {
          buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<long>((keep - base_) * dim_));
          base_ = keep;
        }
      }
    }
    while (consumed() < scorer_.frames()) {
      if (greedy_)
        greedy_->advance();
      else
        beam_->advance();
    }
  }

  std::size_t consumed() const { return greedy_ ? greedy_->frames_consumed() : beam_->frames_consumed(); }

  const SatModel<Real>& model_;
  DecodeConfig cfg_;
  ChunkSpec chunk_;
  ModelScorer<Real> scorer_;
  std::optional<StreamingStacker> stacker_;
  std::optional<LmScorer> lm_;
  std::optional<GreedySearch<ModelScorer<Real>>> greedy_;
  std::optional<BeamSearch<ModelScorer<Real>>> beam_;
  std::size_t lookahead_ = 0;
  std::optional<std::size_t> lookback_;
  std::size_t dim_ = 0;
  std::size_t received_ = 0;
  std::size_t base_ = 0;
  std::vector<double> buffer_;
};

// Offline decode of one utterance: greedy at width 1 without an LM, beam
// otherwise. Returns hypotheses best first.
template <class Real>
std::vector<Hypothesis> decode_offline(const SatModel<Real>& model, const Tensor<Real>& features,
                                       const NgramModel* lm, const DecodeConfig& cfg) {
  cfg.validate();
  if (cfg.beam_width == 1 && (!lm || cfg.lm_weight == 0)) {
    const auto g = greedy_decode(model, features, cfg.max_symbols_per_frame, {}, effective_chunk(model, cfg));
    return {Hypothesis{g.labels, g.score, 0, g.score}};
  }
  return beam_decode(model, features, lm, cfg);
}

template <class Real>
std::vector<Hypothesis> decode_streaming(const SatModel<Real>& model, const FeatureMatrix& features,
                                         const NgramModel* lm, const DecodeConfig& cfg) {
  StreamDecoder<Real> sd(model, cfg, lm);
  for (std::size_t t = 0; t < features.frames; ++t) sd.push(features.row(t));
  sd.finish();
  return sd.hypotheses();
}

template <class T>
std::size_t edit_distance(const std::vector<T>& a, const std::vector<T>& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

template <class T>
double cer(const std::vector<T>& ref, const std::vector<T>& hyp) {
  if (ref.empty()) throw Error("cer: empty reference");
  return static_cast<double>(edit_distance(ref, hyp)) / static_cast<double>(ref.size());
}

// Corpus-level rate: total edits over total reference length.
struct ErrorCount {
  std::size_t edits = 0;
  std::size_t ref_len = 0;
  double rate() const { return ref_len ? static_cast<double>(edits) / static_cast<double>(ref_len) : 0.0; }
};

template <class T>
void accumulate_errors(ErrorCount& ec, const std::vector<T>& ref, const std::vector<T>& hyp) {
  ec.edits += edit_distance(ref, hyp);
  ec.ref_len += ref.size();
}

inline void write_hypothesis(std::ostream& os, const std::string& utt, const std::vector<int>& labels,
                             const Vocab& vocab) {
  os << utt << '\t';
  for (std::size_t i = 0; i < labels.size(); ++i) os << (i ? " " : "") << vocab.token(labels[i]);
  os << '\n';
}

inline void write_nbest(std::ostream& os, const std::string& utt, const std::vector<Hypothesis>& hyps,
                        const Vocab& vocab, double lm_weight) {
  for (std::size_t r = 0; r < hyps.size(); ++r) {
    const auto& h = hyps[r];
    nlohmann::json j;
    j["utt"] = utt;
    j["rank"] = r;
    j["tokens"] = vocab.decode(h.prefix);
    j["transducer"] = h.trans_score;
    j["lm"] = h.lm_score;
    j["lm_weight"] = lm_weight;
    j["combined"] = h.combined;
    os << j.dump() << '\n';
  }
}

}  // namespace satkit
