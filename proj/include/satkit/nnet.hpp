#pragma once

// Self-attention building blocks: sinusoidal positions, (windowed) scaled
// dot-product attention, multi-head attention, the position-wise FFN and the
// post-norm residual block, plus the encoder and prediction-network stacks.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "satkit/ops.hpp"
#include "satkit/params.hpp"

namespace satkit {

struct AttentionConfig {
  int d_m = 512;
  int n_h = 8;
  int d_ff = 1024;
  int n_enc_blocks = 6;
  int n_pred_blocks = 4;
  double dropout_rate = 0.1;

  int d_head() const { return d_m / n_h; }

  void validate() const {
    if (d_m < 1 || n_h < 1 || d_ff < 1) throw Error("attention config: widths must be positive");
    if (d_m % n_h != 0)
      throw Error("attention config: d_m " + std::to_string(d_m) + " not divisible by n_h " +
                  std::to_string(n_h));
    if (n_enc_blocks < 0 || n_pred_blocks < 0) throw Error("attention config: negative block count");
    if (dropout_rate < 0 || dropout_rate >= 1) throw Error("attention config: dropout outside [0,1)");
  }
};

// Attention window: a query at t may look at keys in [t - left, t + right].
// An empty optional means unbounded on that side.
struct ChunkSpec {
  std::optional<int> left;
  std::optional<int> right;

  static ChunkSpec unbounded() { return {}; }
  static ChunkSpec window(int l, int r) {
    if (l < 0 || r < 0) throw Error("chunk: context sizes must be non-negative");
    return {l, r};
  }
  static ChunkSpec causal() { return {std::nullopt, 0}; }

  bool bounded() const { return left.has_value() && right.has_value(); }
  bool is_unbounded() const { return !left.has_value() && !right.has_value(); }
  // N_l + N_r + 1 for a bounded window.
  int length() const {
    if (!bounded()) throw Error("chunk: length of an unbounded window");
    return *left + *right + 1;
  }
  bool allows(long query, long key) const {
    if (left && key < query - *left) return false;
    if (right && key > query + *right) return false;
    return true;
  }

  friend bool operator==(const ChunkSpec&, const ChunkSpec&) = default;
};

inline std::string chunk_side_str(const std::optional<int>& v) {
  return v ? std::to_string(*v) : std::string("inf");
}
inline std::optional<int> parse_chunk_side(const std::string& s) {
  if (s == "inf" || s == "unbounded") return std::nullopt;
  const int v = std::stoi(s);
  if (v < 0) throw Error("chunk: context sizes must be non-negative");
  return v;
}

// allowed[i * nk + j] for queries at absolute positions q0.. and keys at k0..
inline std::vector<char> attention_mask(long q0, std::size_t nq, long k0, std::size_t nk,
                                        const ChunkSpec& chunk) {
  std::vector<char> m(nq * nk);
  for (std::size_t i = 0; i < nq; ++i)
    for (std::size_t j = 0; j < nk; ++j)
      m[i * nk + j] = chunk.allows(q0 + static_cast<long>(i), k0 + static_cast<long>(j));
  return m;
}

// PE(pos, 2i) = sin(pos / 10000^(2i/d)), PE(pos, 2i+1) = cos(same), for
// pos = offset .. offset+length-1.
template <class Real = double>
Tensor<Real> positional_encoding(std::size_t length, std::size_t d_m, std::size_t offset = 0) {
  if (length < 1) throw Error("positional_encoding: length must be >= 1");
  if (d_m % 2 != 0) throw Error("positional_encoding: d_m must be even, got " + std::to_string(d_m));
  std::vector<Real> v(length * d_m);
  for (std::size_t p = 0; p < length; ++p) {
    const double pos = static_cast<double>(p + offset);
    for (std::size_t i = 0; i < d_m / 2; ++i) {
      const double angle = pos / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d_m));
      v[p * d_m + 2 * i] = static_cast<Real>(std::sin(angle));
      v[p * d_m + 2 * i + 1] = static_cast<Real>(std::cos(angle));
    }
  }
  return Tensor<Real>({length, d_m}, std::move(v));
}

struct ForwardOptions {
  bool training = false;
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;
};

template <class Real>
Tensor<Real> maybe_dropout(const Tensor<Real>& x, const ForwardOptions& opt) {
  if (!opt.training || opt.dropout <= 0.0 || opt.rng == nullptr) return x;
  return dropout(x, static_cast<Real>(opt.dropout), *opt.rng);
}

// softmax(Q K^T / sqrt(d_k)) restricted by `mask` (nullptr: everything visible).
template <class Real>
Tensor<Real> attention_weights(const Tensor<Real>& q, const Tensor<Real>& k, const std::vector<char>* mask) {
  if (q.rank() != 2 || k.rank() != 2 || q.dim(1) != k.dim(1))
    shape_mismatch("self_attention", q.shape(), k.shape());
  const Real inv = Real(1) / std::sqrt(static_cast<Real>(k.dim(1)));
  auto scores = scale(matmul(q, transpose(k)), inv);
  return mask ? masked_softmax_lastdim(scores, *mask) : softmax_lastdim(scores);
}

template <class Real>
Tensor<Real> self_attention(const Tensor<Real>& q, const Tensor<Real>& k, const Tensor<Real>& v,
                            const std::vector<char>* mask = nullptr) {
  if (k.rank() != 2 || v.rank() != 2 || k.dim(0) != v.dim(0))
    shape_mismatch("self_attention", k.shape(), v.shape());
  return matmul(attention_weights(q, k, mask), v);
}

template <class Real = double>
struct BlockParams {
  Tensor<Real> wq, wk, wv, wo;
  Tensor<Real> w1, b1, w2, b2;
  Tensor<Real> ln1_g, ln1_b, ln2_g, ln2_b;

  template <class Rng>
  static BlockParams create(ParameterStore<Real>& store, const std::string& prefix,
                            const AttentionConfig& cfg, Rng& rng) {
    const auto dm = static_cast<std::size_t>(cfg.d_m), dff = static_cast<std::size_t>(cfg.d_ff);
    store.add_matrix(prefix + ".wq", dm, dm, rng);
    store.add_matrix(prefix + ".wk", dm, dm, rng);
    store.add_matrix(prefix + ".wv", dm, dm, rng);
    store.add_matrix(prefix + ".wo", dm, dm, rng);
    store.add_matrix(prefix + ".w1", dm, dff, rng);
    store.add_vector(prefix + ".b1", dff, Real(0));
    store.add_matrix(prefix + ".w2", dff, dm, rng);
    store.add_vector(prefix + ".b2", dm, Real(0));
    store.add_vector(prefix + ".ln1_g", dm, Real(1));
    store.add_vector(prefix + ".ln1_b", dm, Real(0));
    store.add_vector(prefix + ".ln2_g", dm, Real(1));
    store.add_vector(prefix + ".ln2_b", dm, Real(0));
    return bind(store, prefix);
  }

  static BlockParams bind(ParameterStore<Real>& s, const std::string& p) {
    return {s.get(p + ".wq"), s.get(p + ".wk"), s.get(p + ".wv"), s.get(p + ".wo"),
            s.get(p + ".w1"), s.get(p + ".b1"), s.get(p + ".w2"), s.get(p + ".b2"),
            s.get(p + ".ln1_g"), s.get(p + ".ln1_b"), s.get(p + ".ln2_g"), s.get(p + ".ln2_b")};
  }
};

// Concat(h_1..h_nh) W^O with h_i = Attn(xq W^Q_i, xkv W^K_i, xkv W^V_i); head i
// owns column block i of the projection matrices.
template <class Real>
Tensor<Real> multi_head(const Tensor<Real>& xq, const Tensor<Real>& xkv, const BlockParams<Real>& p,
                        int n_h, const std::vector<char>* mask) {
  const auto q = matmul(xq, p.wq);
  const auto k = matmul(xkv, p.wk);
  const auto v = matmul(xkv, p.wv);
  const std::size_t dm = q.dim(1);
  if (n_h < 1 || dm % static_cast<std::size_t>(n_h) != 0)
    throw ShapeError("multi_head: " + std::to_string(n_h) + " heads do not divide width " +
                     std::to_string(dm));
  const std::size_t dk = dm / static_cast<std::size_t>(n_h);
  if (n_h == 1) return matmul(self_attention(q, k, v, mask), p.wo);
  std::vector<Tensor<Real>> heads;
  heads.reserve(static_cast<std::size_t>(n_h));
  for (std::size_t h = 0; h < static_cast<std::size_t>(n_h); ++h) {
    const std::size_t b = h * dk, e = b + dk;
    heads.push_back(self_attention(slice(q, 1, b, e), slice(k, 1, b, e), slice(v, 1, b, e), mask));
  }
  return matmul(concat(heads, 1), p.wo);
}

// max(0, x W1 + b1) W2 + b2
template <class Real>
Tensor<Real> ffn(const Tensor<Real>& x, const BlockParams<Real>& p) {
  return add_bias(matmul(relu(add_bias(matmul(x, p.w1), p.b1)), p.w2), p.b2);
}

// y = LN(x + MHA(x)); out = LN(y + FFN(y))
template <class Real>
Tensor<Real> sa_block(const Tensor<Real>& x, const BlockParams<Real>& p, int n_h,
                      const std::vector<char>* mask, const ForwardOptions& opt = {}) {
  const auto y = layer_norm(add(x, maybe_dropout(multi_head(x, x, p, n_h, mask), opt)), p.ln1_g, p.ln1_b);
  return layer_norm(add(y, maybe_dropout(ffn(y, p), opt)), p.ln2_g, p.ln2_b);
}

// Encoder: input projection, positions, then the block stack under `chunk`.
// `position_offset` is the absolute index of the first row, so a window cut
// from a longer stream sees the same positions and mask as the full sequence.
template <class Real = double>
struct EncoderStack {
  Tensor<Real> w_in, b_in;
  std::vector<BlockParams<Real>> blocks;
  int n_h = 1;

  template <class Rng>
  static EncoderStack create(ParameterStore<Real>& store, std::size_t d_in, const AttentionConfig& cfg,
                             Rng& rng) {
    store.add_matrix("enc.in.w", d_in, static_cast<std::size_t>(cfg.d_m), rng);
    store.add_vector("enc.in.b", static_cast<std::size_t>(cfg.d_m), Real(0));
    for (int b = 0; b < cfg.n_enc_blocks; ++b)
      BlockParams<Real>::create(store, "enc." + std::to_string(b), cfg, rng);
    return bind(store, cfg);
  }
  static EncoderStack bind(ParameterStore<Real>& store, const AttentionConfig& cfg) {
    EncoderStack e;
    e.w_in = store.get("enc.in.w");
    e.b_in = store.get("enc.in.b");
    for (int b = 0; b < cfg.n_enc_blocks; ++b)
      e.blocks.push_back(BlockParams<Real>::bind(store, "enc." + std::to_string(b)));
    e.n_h = cfg.n_h;
    return e;
  }

  Tensor<Real> forward(const Tensor<Real>& features, const ChunkSpec& chunk, std::size_t position_offset = 0,
                       const ForwardOptions& opt = {}) const {
    if (features.rank() != 2 || features.dim(0) == 0) throw Error("encode: empty feature input");
    if (features.dim(1) != w_in.dim(0)) shape_mismatch("encode", features.shape(), w_in.shape());
    const std::size_t T = features.dim(0), dm = w_in.dim(1);
    auto x = add(add_bias(matmul(features, w_in), b_in), positional_encoding<Real>(T, dm, position_offset));
    x = maybe_dropout(x, opt);
    std::vector<char> mask;
    const std::vector<char>* mp = nullptr;
    if (!chunk.is_unbounded()) {
      const long p0 = static_cast<long>(position_offset);
      mask = attention_mask(p0, T, p0, T, chunk);
      mp = &mask;
    }
    for (const auto& b : blocks) x = sa_block(x, b, n_h, mp, opt);
    return x;
  }
};

// Prediction network over [sos, l_0, .., l_{U-1}] with a causal mask, so row u
// depends on labels before u only.
template <class Real = double>
struct PredictionStack {
  Tensor<Real> embed;
  std::vector<BlockParams<Real>> blocks;
  int n_h = 1;
  int sos = 1;

  template <class Rng>
  static PredictionStack create(ParameterStore<Real>& store, std::size_t vocab, int sos_id,
                                const AttentionConfig& cfg, Rng& rng) {
    store.add_matrix("pred.embed", vocab, static_cast<std::size_t>(cfg.d_m), rng);
    for (int b = 0; b < cfg.n_pred_blocks; ++b)
      BlockParams<Real>::create(store, "pred." + std::to_string(b), cfg, rng);
    return bind(store, sos_id, cfg);
  }
  static PredictionStack bind(ParameterStore<Real>& store, int sos_id, const AttentionConfig& cfg) {
    PredictionStack p;
    p.embed = store.get("pred.embed");
    for (int b = 0; b < cfg.n_pred_blocks; ++b)
      p.blocks.push_back(BlockParams<Real>::bind(store, "pred." + std::to_string(b)));
    p.n_h = cfg.n_h;
    p.sos = sos_id;
    return p;
  }

  Tensor<Real> forward(const std::vector<int>& labels, const ForwardOptions& opt = {}) const {
    std::vector<int> ids;
    ids.reserve(labels.size() + 1);
    ids.push_back(sos);
    ids.insert(ids.end(), labels.begin(), labels.end());
    const std::size_t n = ids.size(), dm = embed.dim(1);
    auto x = add(scale(gather_rows(embed, ids), std::sqrt(static_cast<Real>(dm))),
                 positional_encoding<Real>(n, dm));
    x = maybe_dropout(x, opt);
    const auto mask = attention_mask(0, n, 0, n, ChunkSpec::causal());
    for (const auto& b : blocks) x = sa_block(x, b, n_h, &mask, opt);
    return x;
  }
};

}  // namespace satkit
