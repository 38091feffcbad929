#pragma once

// Training loop: length-sorted batches in a per-epoch shuffled order, joint
// transducer + path loss, dev evaluation, metrics CSV and resumable
// checkpoints.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "satkit/checkpoint.hpp"
#include "satkit/data.hpp"
#include "satkit/decoder.hpp"
#include "satkit/optim.hpp"
#include "satkit/par.hpp"

namespace satkit {

struct TrainConfig {
  int epochs = 30;
  int batch_size = 16;
  std::uint64_t seed = 1;
  bool sort_by_length = true;
  OptimizerConfig optimizer;
  ParConfig par{0.0};
  std::optional<double> target_cer;  // stop once dev CER reaches this
  std::size_t max_dev_utterances = 0;  // 0 = all
  int max_symbols_per_frame = 10;
  KeyValues extra;  // pipeline settings recorded alongside (data paths, decoding, ...)

  // Keys a resumed run must agree on.
  static const std::vector<std::string>& pinned_keys() {
    static const std::vector<std::string> keys{
        "batch_size", "seed",     "sort_by_length", "optimizer",        "learning_rate",     "momentum",
        "halving_patience", "min_lr", "lr_factor",   "warmup_steps",    "adaptive_moments", "par_beta",
        "par_detach_weight", "par_labels_only"};
    return keys;
  }

  KeyValues to_kv() const {
    KeyValues kv = extra;
    auto num = [](double v) {
      std::ostringstream os;
      os.precision(17);
      os << v;
      return os.str();
    };
    kv.set("epochs", std::to_string(epochs));
    kv.set("batch_size", std::to_string(batch_size));
    kv.set("seed", std::to_string(seed));
    kv.set("sort_by_length", sort_by_length ? "1" : "0");
    kv.set("optimizer", to_string(optimizer.kind));
    kv.set("learning_rate", num(optimizer.learning_rate));
    kv.set("momentum", num(optimizer.momentum));
    kv.set("halving_patience", std::to_string(optimizer.halving_patience));
    kv.set("min_lr", num(optimizer.min_lr));
    kv.set("lr_factor", num(optimizer.lr_factor));
    kv.set("warmup_steps", std::to_string(optimizer.warmup_steps));
    kv.set("adaptive_moments", optimizer.adaptive_moments ? "1" : "0");
    kv.set("par_beta", num(par.beta));
    kv.set("par_detach_weight", par.detach_weight ? "1" : "0");
    kv.set("par_labels_only", par.labels_only ? "1" : "0");
    if (target_cer) kv.set("target_cer", num(*target_cer));
    kv.set("max_dev_utterances", std::to_string(max_dev_utterances));
    kv.set("max_symbols_per_frame", std::to_string(max_symbols_per_frame));
    return kv;
  }

  static TrainConfig from_kv(const KeyValues& kv) {
    TrainConfig c;
    c.epochs = kv.get_int("epochs", c.epochs);
    c.batch_size = kv.get_int("batch_size", c.batch_size);
    c.seed = std::stoull(kv.get_or("seed", std::to_string(c.seed)));
    c.sort_by_length = kv.get_int("sort_by_length", 1) != 0;
    auto& o = c.optimizer;
    o.kind = optimizer_kind_from_string(kv.get_or("optimizer", to_string(o.kind)));
    o.learning_rate = kv.get_double("learning_rate", o.learning_rate);
    o.momentum = kv.get_double("momentum", o.momentum);
    o.halving_patience = kv.get_int("halving_patience", o.halving_patience);
    o.min_lr = kv.get_double("min_lr", o.min_lr);
    o.lr_factor = kv.get_double("lr_factor", o.lr_factor);
    o.warmup_steps = kv.get_int("warmup_steps", o.warmup_steps);
    o.adaptive_moments = kv.get_int("adaptive_moments", 1) != 0;
    c.par.beta = kv.get_double("par_beta", c.par.beta);
    c.par.detach_weight = kv.get_int("par_detach_weight", 1) != 0;
    c.par.labels_only = kv.get_int("par_labels_only", 0) != 0;
    if (kv.has("target_cer")) c.target_cer = kv.get_double("target_cer", 0);
    c.max_dev_utterances = static_cast<std::size_t>(kv.get_int("max_dev_utterances", 0));
    c.max_symbols_per_frame = kv.get_int("max_symbols_per_frame", c.max_symbols_per_frame);
    const auto known = TrainConfig{}.to_kv();
    for (const auto& [k, v] : kv.items())
      if (!known.has(k) && k != "target_cer") c.extra.set(k, v);
    return c;
  }
};

struct StepMetrics {
  long step = 0;
  double lr = 0;
  double transducer_loss = 0;
  double par_loss = 0;
  double joint_loss = 0;
};

struct DevMetrics {
  double cer = 0;
  double transducer_loss = 0;
  double emission_entropy = 0;  // nats, mean over greedy emission steps
  std::size_t emissions = 0;
};

struct EpochSummary {
  int epoch = 0;  // 1-based
  double train_transducer_loss = 0;
  double train_par_loss = 0;
  double train_joint_loss = 0;
  DevMetrics dev;
  double seconds = 0;
};

inline void write_metrics_header(std::ostream& os) { os << "step,lr,transducer_loss,par_loss,joint_loss,dev_cer\n"; }

inline std::string format_metric(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

template <class Real>
DevMetrics evaluate(const SatModel<Real>& model, const std::vector<Utterance>& dev, int max_symbols,
                    std::size_t limit = 0) {
  DevMetrics m;
  ErrorCount ec;
  double loss = 0, entropy = 0;
  std::size_t n = 0;
  NoGradGuard ng;
  for (const auto& u : dev) {
    if (limit && n >= limit) break;
    ++n;
    const auto x = u.features.template to_tensor<Real>();
    const auto f = model.encode(x);
    ModelScorer<Real> scorer(model);
    scorer.add_frames(f);
    GreedySearch<ModelScorer<Real>> search(scorer, max_symbols, [&](const GreedyStep& s) {
      if (s.chosen == Vocab::kBlank) return;
      double h = 0;
      for (double lp : *s.log_probs)
        if (lp > -700) h -= std::exp(lp) * lp;
      entropy += h;
      ++m.emissions;
    });
    while (search.frames_consumed() < scorer.frames()) search.advance();
    accumulate_errors(ec, u.targets, search.result().labels);
    loss += transducer_loss(joint(f, model.predict(u.targets), model.joint_network(), u.targets)).loss;
  }
  m.cer = ec.rate();
  m.transducer_loss = n ? loss / static_cast<double>(n) : 0.0;
  m.emission_entropy = m.emissions ? entropy / static_cast<double>(m.emissions) : 0.0;
  return m;
}

template <class Real = double>
class Trainer {
 public:
  Trainer(SatModel<Real>& model, const std::vector<Utterance>& train, const std::vector<Utterance>& dev,
          TrainConfig cfg)
      : model_(model), train_(train), dev_(dev), cfg_(std::move(cfg)), opt_(cfg_.optimizer),
        halving_(cfg_.optimizer.learning_rate, cfg_.optimizer.halving_patience, cfg_.optimizer.min_lr) {
    if (cfg_.batch_size < 1) throw Error("train: batch size must be >= 1");
    if (cfg_.epochs < 0) throw Error("train: epochs must be >= 0");
    if (train_.empty()) throw Error("train: no training utterances");
    if (cfg_.par.beta < 0) throw Error("train: PAR weight must be >= 0");
    if (cfg_.par.beta > 0)
      for (const auto& u : train_)
        if (!u.alignment) throw AlignmentMismatch("train: utterance " + u.id + " has no alignment");
    paths_.resize(train_.size());
    for (std::size_t i = 0; i < train_.size(); ++i)
      if (train_[i].alignment) {
        validate_alignment(train_[i]);
        paths_[i] = build_path(*train_[i].alignment, train_[i].targets);
      }
    batches_ = make_batches(train_, static_cast<std::size_t>(cfg_.batch_size), cfg_.sort_by_length);
  }

  void set_metrics_stream(std::ostream* os) {
    metrics_ = os;
    if (metrics_ && step_ == 0) write_metrics_header(*metrics_);
  }
  void set_epoch_callback(std::function<bool(const EpochSummary&)> cb) { on_epoch_ = std::move(cb); }

  long step() const { return step_; }
  int epoch() const { return epoch_; }
  const Optimizer<Real>& optimizer() const { return opt_; }
  const std::vector<EpochSummary>& history() const { return history_; }

  // Batch visiting order for an epoch (0-based).
  std::vector<std::size_t> epoch_order(int epoch) const {
    std::vector<std::size_t> order(batches_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(cfg_.seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
  }

  // Mean joint loss over a batch, with gradients left in the parameters.
  StepMetrics batch_loss(const Batch& b, long step, bool training = true) {
    std::mt19937_64 rng(cfg_.seed ^ (0xD1B54A32D192ED03ULL * static_cast<std::uint64_t>(step + 1)));
    ForwardOptions fo{training, model_.config().attn.dropout_rate, &rng};
    const Real inv = Real(1) / static_cast<Real>(b.indices.size());
    StepMetrics m;
    std::optional<Tensor<Real>> total;
    for (std::size_t i = 0; i < b.indices.size(); ++i) {
      const auto idx = b.indices[i];
      const auto& u = train_[idx];
      const auto lat = model_.lattice(b.member(i).template to_tensor<Real>(), u.targets, fo);
      const AlignmentPath* path = paths_[idx] ? &*paths_[idx] : nullptr;
      auto jl = joint_loss(lat, path, cfg_.par);
      m.transducer_loss += jl.transducer / static_cast<double>(b.indices.size());
      m.par_loss += jl.par / static_cast<double>(b.indices.size());
      auto term = scale(jl.total, inv);
      total = total ? add(*total, term) : term;
    }
    m.joint_loss = static_cast<double>(total->item());
    m.step = step;
    model_.params().zero_grad();
    total->backward();
    return m;
  }

  StepMetrics train_step(const Batch& b) {
    const long s = step_ + 1;
    auto m = batch_loss(b, s);
    m.lr = opt_.step(model_.params(), s);
    step_ = s;
    ++batch_in_epoch_;
    return m;
  }

  // Runs until cfg.epochs, early stop, or the SGD learning-rate floor.
  void run() {
    while (epoch_ < cfg_.epochs && !stopped_) run_epoch();
  }

  EpochSummary run_epoch() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto order = epoch_order(epoch_);
    EpochSummary es;
    es.epoch = epoch_ + 1;
    std::size_t n = 0;
    for (; batch_in_epoch_ < order.size();) {
      const auto m = train_step(batches_[order[batch_in_epoch_]]);
      es.train_transducer_loss += m.transducer_loss;
      es.train_par_loss += m.par_loss;
      es.train_joint_loss += m.joint_loss;
      ++n;
      const bool last = batch_in_epoch_ == order.size();
      if (last) es.dev = evaluate(model_, dev_, cfg_.max_symbols_per_frame, cfg_.max_dev_utterances);
      if (metrics_) {
        *metrics_ << m.step << ',' << format_metric(m.lr) << ',' << format_metric(m.transducer_loss) << ','
                  << format_metric(m.par_loss) << ',' << format_metric(m.joint_loss) << ','
                  << (last && !dev_.empty() ? format_metric(es.dev.cer) : "") << '\n';
      }
    }
    if (n) {
      es.train_transducer_loss /= static_cast<double>(n);
      es.train_par_loss /= static_cast<double>(n);
      es.train_joint_loss /= static_cast<double>(n);
    }
    ++epoch_;
    batch_in_epoch_ = 0;
    if (cfg_.optimizer.kind == OptimizerKind::kSgdMomentum) {
      opt_.set_sgd_lr(halving_.report(es.dev.transducer_loss));
      if (halving_.stop()) stopped_ = true;
    }
    if (cfg_.target_cer && !dev_.empty() && es.dev.cer <= *cfg_.target_cer) stopped_ = true;
    es.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history_.push_back(es);
    if (on_epoch_ && !on_epoch_(es)) stopped_ = true;
    return es;
  }

  bool stopped() const { return stopped_; }

  void save(const std::string& path) {
    Checkpoint ck;
    store_model(ck, model_);
    store_optimizer(ck, model_, opt_);
    ck.run_config = cfg_.to_kv();
    ck.meta.set("step", std::to_string(step_));
    ck.meta.set("epoch", std::to_string(epoch_));
    ck.meta.set("batch_in_epoch", std::to_string(batch_in_epoch_));
    ck.meta.set("sgd_lr", format_exact(opt_.sgd_lr()));
    ck.meta.set("stopped", stopped_ ? "1" : "0");
    write_checkpoint(path, ck);
  }

  // Restores model, optimizer and loop position from a checkpoint written by
  // save(); training then continues with the step that would have followed.
  void resume(const std::string& path) {
    const auto ck = read_checkpoint(path);
    const auto ours = cfg_.to_kv();
    for (const auto& k : TrainConfig::pinned_keys()) {
      const std::string was = ck.run_config.get_or(k, "unset"), now = ours.get_or(k, "unset");
      if (was != now)
        throw Error("resume: run config key '" + k + "' is " + was + " in " + path + ", " + now + " now");
    }
    load_model(ck, model_);
    load_optimizer(ck, model_, opt_);
    step_ = std::stol(ck.meta.get("step"));
    epoch_ = ck.meta.get_int("epoch", 0);
    batch_in_epoch_ = static_cast<std::size_t>(ck.meta.get_int("batch_in_epoch", 0));
    opt_.set_sgd_lr(std::stod(ck.meta.get_or("sgd_lr", format_exact(cfg_.optimizer.learning_rate))));
    stopped_ = ck.meta.get_int("stopped", 0) != 0;
  }

  const std::vector<Batch>& batches() const { return batches_; }

 private:
  static std::string format_exact(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  }

  SatModel<Real>& model_;
  const std::vector<Utterance>& train_;
  const std::vector<Utterance>& dev_;
  TrainConfig cfg_;
  Optimizer<Real> opt_;
  LrHalving halving_;
  std::vector<std::optional<AlignmentPath>> paths_;
  std::vector<Batch> batches_;
  std::ostream* metrics_ = nullptr;
  std::function<bool(const EpochSummary&)> on_epoch_;
  std::vector<EpochSummary> history_;
  long step_ = 0;
  int epoch_ = 0;
  std::size_t batch_in_epoch_ = 0;
  bool stopped_ = false;
};

}  // namespace satkit
