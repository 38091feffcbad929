#pragma once

// Feature pipeline, synthetic transduction tasks, batching and dataset files.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <span>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "satkit/checkpoint.hpp"
#include "satkit/par.hpp"
#include "satkit/vocab.hpp"

namespace satkit {

struct FeatureMatrix {
  std::size_t frames = 0;
  std::size_t dim = 0;
  std::vector<double> values;

  FeatureMatrix() = default;
  FeatureMatrix(std::size_t f, std::size_t d) : frames(f), dim(d), values(f * d, 0.0) {}

  double& at(std::size_t t, std::size_t j) { return values[t * dim + j]; }
  double at(std::size_t t, std::size_t j) const { return values[t * dim + j]; }
  std::span<const double> row(std::size_t t) const { return {values.data() + t * dim, dim}; }

  template <class Real = double>
  Tensor<Real> to_tensor() const {
    return Tensor<Real>({frames, dim}, std::vector<Real>(values.begin(), values.end()));
  }

  friend bool operator==(const FeatureMatrix&, const FeatureMatrix&) = default;
};

// Frame t becomes [x_{t-left} .. x_{t+right}] with edge frames replicated;
// then every factor-th stacked frame is kept, starting at 0.
inline FeatureMatrix stack_downsample(const FeatureMatrix& x, int left = 3, int right = 1, int factor = 3) {
  if (x.frames == 0) throw Error("stack_downsample: no frames");
  if (left < 0 || right < 0 || factor < 1) throw Error("stack_downsample: invalid window");
  const std::size_t width = static_cast<std::size_t>(left + right + 1);
  const std::size_t out_frames = (x.frames + static_cast<std::size_t>(factor) - 1) / static_cast<std::size_t>(factor);
  FeatureMatrix out(out_frames, x.dim * width);
  const long last = static_cast<long>(x.frames) - 1;
  for (std::size_t o = 0; o < out_frames; ++o) {
    const long t = static_cast<long>(o) * factor;
    for (long c = -left; c <= right; ++c) {
      const auto src = static_cast<std::size_t>(std::clamp(t + c, 0L, last));
      std::copy_n(x.values.data() + src * x.dim, x.dim,
                  out.values.data() + o * out.dim + static_cast<std::size_t>(c + left) * x.dim);
    }
  }
  return out;
}

// Incremental stack_downsample: emits each output frame once its right
// context has arrived; finish() flushes the tail with edge replication.
class StreamingStacker {
 public:
  StreamingStacker(int left = 3, int right = 1, int factor = 3) : left_(left), right_(right), factor_(factor) {
    if (left < 0 || right < 0 || factor < 1) throw Error("stacker: invalid window");
  }

  std::vector<std::vector<double>> push(std::span<const double> frame) {
    if (dim_ == 0) dim_ = frame.size();
    if (frame.size() != dim_) throw Error("stacker: frame width changed");
    frames_.emplace_back(frame.begin(), frame.end());
    ++received_;
    return drain(false);
  }
  std::vector<std::vector<double>> finish() { return drain(true); }

  int right_context() const { return right_; }

 private:
  std::vector<std::vector<double>> drain(bool final) {
    std::vector<std::vector<double>> out;
    while (true) {
      const long t = static_cast<long>(next_) * factor_;
      if (received_ == 0 || t > static_cast<long>(received_) - 1) break;
      if (!final && t + right_ > static_cast<long>(received_) - 1) break;
      std::vector<double> v;
      v.reserve(dim_ * static_cast<std::size_t>(left_ + right_ + 1));
      const long last = static_cast<long>(received_) - 1;
      for (long c = -left_; c <= right_; ++c) {
        const long src = std::clamp(t + c, 0L, last);
        const auto& fr = frames_[static_cast<std::size_t>(src - base_)];
        v.insert(v.end(), fr.begin(), fr.end());
      }
      out.push_back(std::move(v));
      ++next_;
      // Keep only frames a later output can still reach.
      const long keep_from = std::max(0L, static_cast<long>(next_) * factor_ - left_);
      while (base_ < keep_from && base_ < last) {
        frames_.pop_front();
        ++base_;
      }
    }
    return out;
  }

  int left_, right_, factor_;
  std::size_t dim_ = 0;
  std::size_t received_ = 0;
  std::size_t next_ = 0;
  long base_ = 0;
  std::deque<std::vector<double>> frames_;
};

// Per-dimension zero mean and unit variance; constant dimensions become 0.
inline void normalize(std::vector<FeatureMatrix*> group) {
  if (group.empty()) return;
  const std::size_t d = group[0]->dim;
  std::vector<double> mean(d, 0.0), var(d, 0.0);
  std::size_t n = 0;
  for (const auto* m : group) {
    if (m->dim != d) throw Error("normalize: feature widths differ within a scope");
    for (std::size_t t = 0; t < m->frames; ++t)
      for (std::size_t j = 0; j < d; ++j) mean[j] += m->at(t, j);
    n += m->frames;
  }
  if (n == 0) throw Error("normalize: no frames");
  for (auto& v : mean) v /= static_cast<double>(n);
  for (const auto* m : group)
    for (std::size_t t = 0; t < m->frames; ++t)
      for (std::size_t j = 0; j < d; ++j) var[j] += (m->at(t, j) - mean[j]) * (m->at(t, j) - mean[j]);
  for (auto& v : var) v /= static_cast<double>(n);
  for (auto* m : group)
    for (std::size_t t = 0; t < m->frames; ++t)
      for (std::size_t j = 0; j < d; ++j) {
        const double sd = std::sqrt(var[j]);
        m->at(t, j) = sd > 1e-12 * (1.0 + std::abs(mean[j])) ? (m->at(t, j) - mean[j]) / sd : 0.0;
      }
}

inline void normalize(FeatureMatrix& m) { normalize(std::vector<FeatureMatrix*>{&m}); }

struct Utterance {
  std::string id;
  std::string speaker;
  FeatureMatrix features;
  std::vector<int> targets;
  std::optional<FrameAlignment> alignment;
};

struct Dataset {
  Vocab vocab;
  std::vector<Utterance> utterances;
};

enum class NormScope { kPerUtterance, kPerSpeaker };

inline void normalize(std::vector<Utterance>& utts, NormScope scope) {
  if (scope == NormScope::kPerUtterance) {
    for (auto& u : utts) normalize(u.features);
    return;
  }
  std::map<std::string, std::vector<FeatureMatrix*>> groups;
  for (auto& u : utts) groups[u.speaker].push_back(&u.features);
  for (auto& [spk, g] : groups) normalize(g);
}

// Checks the alignment against its utterance; throws AlignmentMismatch.
inline void validate_alignment(const Utterance& u) {
  if (!u.alignment) return;
  if (u.alignment->size() != u.features.frames)
    throw AlignmentMismatch("utterance " + u.id + ": alignment has " + std::to_string(u.alignment->size()) +
                            " frames, features have " + std::to_string(u.features.frames));
  (void)build_path(*u.alignment, u.targets);
}

enum class TaskKind { kDelayedCopy, kSegmentClassify };

inline std::string to_string(TaskKind k) { return k == TaskKind::kDelayedCopy ? "delayed-copy" : "segment-classify"; }
inline TaskKind task_kind_from_string(const std::string& s) {
  if (s == "delayed-copy") return TaskKind::kDelayedCopy;
  if (s == "segment-classify") return TaskKind::kSegmentClassify;
  throw Error("unknown task kind: " + s);
}

struct TaskSpec {
  TaskKind kind = TaskKind::kDelayedCopy;
  int vocab_size = 16;  // label tokens
  int feature_dim = 16;
  int num_utterances = 100;
  int min_labels = 1;
  int max_labels = 6;
  int min_segment = 2;
  int max_segment = 4;
  int fixed_segment = 3;  // segment-classify
  int min_gap = 1;
  int max_gap = 2;
  double noise = 0.0;
  std::uint64_t seed = 1;
  std::uint64_t template_seed = 1234;  // shared by splits of one task
};

// Token templates are unit-variance Gaussian vectors fixed by template_seed;
// silence frames are zero. Each label occupies one segment, segments are
// separated by silence, and the oracle alignment marks each segment's last
// frame with its label.
inline Dataset generate_task(const TaskSpec& spec) {
  if (spec.vocab_size < 2) throw Error("generate_task: vocab size must be >= 2");
  if (spec.feature_dim < 1 || spec.num_utterances < 0) throw Error("generate_task: invalid sizes");
  if (spec.min_labels < 0 || spec.max_labels < spec.min_labels) throw Error("generate_task: bad label range");
  if (spec.min_segment < 1 || spec.max_segment < spec.min_segment) throw Error("generate_task: bad segment range");
  if (spec.min_gap < 1 || spec.max_gap < spec.min_gap) throw Error("generate_task: bad gap range");
  if (spec.noise < 0) throw Error("generate_task: negative noise");

  Dataset ds;
  ds.vocab = Vocab::synthetic(spec.vocab_size);
  const auto d = static_cast<std::size_t>(spec.feature_dim);
  std::vector<std::vector<double>> templ(static_cast<std::size_t>(spec.vocab_size), std::vector<double>(d));
  {
    std::mt19937_64 trng(spec.template_seed);
    std::normal_distribution<double> n01(0.0, 1.0);
    for (auto& t : templ)
      for (auto& v : t) v = n01(trng);
  }
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  auto uniform = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  for (int n = 0; n < spec.num_utterances; ++n) {
    Utterance u;
    std::ostringstream id;
    id << "utt" << std::setw(6) << std::setfill('0') << n;
    u.id = id.str();
    u.speaker = "spk" + std::to_string(n % 8);
    const int U = uniform(spec.min_labels, spec.max_labels);
    std::vector<int> frame_token;
    std::vector<int> frame_label;  // -1 silence, else label index
    auto silence = [&](int len) {
      for (int i = 0; i < len; ++i) {
        frame_token.push_back(Vocab::kBlank);
        frame_label.push_back(-1);
      }
    };
    silence(uniform(spec.min_gap, spec.max_gap));
    for (int i = 0; i < U; ++i) {
      const int lab = uniform(0, spec.vocab_size - 1);
      const int id_tok = Vocab::kNumReserved + lab;
      u.targets.push_back(id_tok);
      const int len = spec.kind == TaskKind::kDelayedCopy ? uniform(spec.min_segment, spec.max_segment)
                                                          : spec.fixed_segment;
      for (int f = 0; f < len; ++f) {
        frame_token.push_back(f == len - 1 ? id_tok : Vocab::kBlank);
        frame_label.push_back(lab);
      }
      silence(uniform(spec.min_gap, spec.max_gap));
    }
    u.features = FeatureMatrix(frame_token.size(), d);
    for (std::size_t t = 0; t < frame_token.size(); ++t)
      for (std::size_t j = 0; j < d; ++j) {
        const double base = frame_label[t] < 0 ? 0.0 : templ[static_cast<std::size_t>(frame_label[t])][j];
        u.features.at(t, j) = base + (spec.noise > 0 ? spec.noise * noise(rng) : 0.0);
      }
    u.alignment = FrameAlignment{frame_token};
    ds.utterances.push_back(std::move(u));
  }
  return ds;
}

struct Batch {
  std::vector<std::size_t> indices;  // into the utterance list
  std::vector<std::size_t> lengths;
  std::size_t max_frames = 0;
  std::size_t dim = 0;
  std::vector<double> padded;  // batch x max_frames x dim, zero padded
  std::vector<char> mask;      // batch x max_frames, 1 on valid frames

  std::size_t padding() const {
    std::size_t p = 0;
    for (auto l : lengths) p += max_frames - l;
    return p;
  }

  // Valid frames of member i; padding never leaves the batch.
  FeatureMatrix member(std::size_t i) const {
    FeatureMatrix m(lengths[i], dim);
    std::copy_n(padded.data() + i * max_frames * dim, lengths[i] * dim, m.values.data());
    return m;
  }
};

// Groups consecutive utterances (after an optional stable sort by frame
// count) into batches of at most batch_size.
inline std::vector<Batch> make_batches(const std::vector<Utterance>& utts, std::size_t batch_size,
                                       bool sort_by_length) {
  if (batch_size < 1) throw Error("batch: batch size must be >= 1");
  std::vector<std::size_t> order(utts.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (sort_by_length)
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return utts[a].features.frames < utts[b].features.frames;
    });
  std::vector<Batch> out;
  for (std::size_t s = 0; s < order.size(); s += batch_size) {
    Batch b;
    for (std::size_t i = s; i < std::min(order.size(), s + batch_size); ++i) {
      b.indices.push_back(order[i]);
      b.lengths.push_back(utts[order[i]].features.frames);
      b.max_frames = std::max(b.max_frames, utts[order[i]].features.frames);
    }
    b.dim = utts[b.indices[0]].features.dim;
    b.padded.assign(b.indices.size() * b.max_frames * b.dim, 0.0);
    b.mask.assign(b.indices.size() * b.max_frames, 0);
    for (std::size_t i = 0; i < b.indices.size(); ++i) {
      const auto& f = utts[b.indices[i]].features;
      if (f.dim != b.dim) throw Error("batch: feature widths differ");
      std::copy(f.values.begin(), f.values.end(), b.padded.begin() + static_cast<long>(i * b.max_frames * b.dim));
      std::fill_n(b.mask.begin() + static_cast<long>(i * b.max_frames), f.frames, 1);
    }
    out.push_back(std::move(b));
  }
  return out;
}

inline std::size_t padding_waste(const std::vector<Batch>& batches) {
  std::size_t p = 0;
  for (const auto& b : batches) p += b.padding();
  return p;
}

// Feature archive: "SATFEAT1", u32 count, then per utterance u32 id length,
// id bytes, u32 frames, u32 dim, frames*dim little-endian f32 values.
inline void write_features(const std::string& path, const std::vector<Utterance>& utts) {
  std::string out("SATFEAT1");
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(utts.size()));
  for (const auto& u : utts) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(u.id.size()));
    out += u.id;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(u.features.frames));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(u.features.dim));
    for (double v : u.features.values) detail::put_le<float>(out, static_cast<float>(v));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write features: " + path);
  f << out;
}

inline std::vector<std::pair<std::string, FeatureMatrix>> read_features(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot read features: " + path);
  std::string b((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  std::size_t p = 0;
  auto need = [&](std::size_t n) {
    if (p + n > b.size()) throw Error("features: truncated file " + path);
  };
  need(12);
  if (b.compare(0, 8, "SATFEAT1") != 0) throw Error("features: bad magic in " + path);
  p = 8;
  const auto count = detail::get_le<std::uint32_t>(b.data() + p);
  p += 4;
  std::vector<std::pair<std::string, FeatureMatrix>> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    need(4);
    const auto idlen = detail::get_le<std::uint32_t>(b.data() + p);
    p += 4;
    need(idlen + 8);
    std::string id = b.substr(p, idlen);
    p += idlen;
    const auto frames = detail::get_le<std::uint32_t>(b.data() + p);
    const auto dim = detail::get_le<std::uint32_t>(b.data() + p + 4);
    p += 8;
    need(static_cast<std::size_t>(frames) * dim * 4);
    FeatureMatrix m(frames, dim);
    for (auto& v : m.values) {
      v = static_cast<double>(detail::get_le<float>(b.data() + p));
      p += 4;
    }
    out.emplace_back(std::move(id), std::move(m));
  }
  return out;
}

// Transcript: "utt_id tok tok ..." per line.
inline void write_transcripts(std::ostream& os, const std::vector<Utterance>& utts, const Vocab& vocab) {
  for (const auto& u : utts) {
    os << u.id;
    for (int t : u.targets) os << ' ' << vocab.token(t);
    os << '\n';
  }
}

inline std::map<std::string, std::vector<std::string>> read_transcripts(std::istream& is) {
  std::map<std::string, std::vector<std::string>> out;
  std::string line;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string id, t;
    if (!(ls >> id)) continue;
    auto& v = out[id];
    while (ls >> t) v.push_back(t);
  }
  return out;
}

// Directory layout: feats.bin, text, vocab (one label per line), utt2spk,
// optional align.
inline void save_dataset(const std::string& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  write_features(dir + "/feats.bin", ds.utterances);
  std::ofstream text(dir + "/text");
  write_transcripts(text, ds.utterances, ds.vocab);
  std::ofstream voc(dir + "/vocab");
  for (int i = Vocab::kNumReserved; i < ds.vocab.size(); ++i) voc << ds.vocab.token(i) << '\n';
  std::ofstream spk(dir + "/utt2spk");
  for (const auto& u : ds.utterances)
    if (!u.speaker.empty()) spk << u.id << ' ' << u.speaker << '\n';
  bool any_align = false;
  for (const auto& u : ds.utterances) any_align = any_align || u.alignment.has_value();
  if (any_align) {
    std::ofstream al(dir + "/align");
    for (const auto& u : ds.utterances)
      if (u.alignment) write_alignment(al, u.id, *u.alignment, ds.vocab);
  }
  if (!text || !voc) throw Error("cannot write dataset into " + dir);
}

inline Vocab read_vocab_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot read vocabulary: " + path);
  std::vector<std::string> labels;
  std::string t;
  while (f >> t) labels.push_back(t);
  return Vocab(labels);
}

// Loads a dataset directory; `vocab` (when given) overrides the stored one.
inline Dataset load_dataset(const std::string& dir, const Vocab* vocab = nullptr) {
  Dataset ds;
  ds.vocab = vocab ? *vocab : read_vocab_file(dir + "/vocab");
  auto feats = read_features(dir + "/feats.bin");
  std::map<std::string, std::vector<std::string>> text;
  {
    std::ifstream f(dir + "/text");
    if (f) text = read_transcripts(f);
  }
  std::map<std::string, std::string> speakers;
  if (std::ifstream f(dir + "/utt2spk"); f) {
    std::string id, spk;
    while (f >> id >> spk) speakers[id] = spk;
  }
  std::map<std::string, FrameAlignment> align;
  if (std::ifstream f(dir + "/align"); f) align = read_alignments(f, ds.vocab);
  for (auto& [id, m] : feats) {
    Utterance u;
    u.id = id;
    u.features = std::move(m);
    if (auto it = speakers.find(id); it != speakers.end()) u.speaker = it->second;
    if (auto it = text.find(id); it != text.end()) u.targets = ds.vocab.encode(it->second);
    if (auto it = align.find(id); it != align.end()) u.alignment = it->second;
    ds.utterances.push_back(std::move(u));
  }
  return ds;
}

}  // namespace satkit
