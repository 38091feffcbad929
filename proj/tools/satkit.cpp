// satkit command-line tool: data generation, LM and model training, decoding,
// scoring, lattice inspection and encoder benchmarks.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "satkit/satkit.hpp"

namespace fs = std::filesystem;
using namespace satkit;

namespace {

const std::vector<std::string> kModelKeys{"d_in",          "d_m",     "n_h",   "d_ff",       "n_enc_blocks",
                                          "n_pred_blocks", "dropout", "d_joint", "joint",    "chunk_left",
                                          "chunk_right",   "vocab_size"};
const std::vector<std::string> kRunKeys{"epochs",           "batch_size",        "seed",
                                        "sort_by_length",   "optimizer",         "learning_rate",
                                        "momentum",         "halving_patience",  "min_lr",
                                        "lr_factor",        "warmup_steps",      "adaptive_moments",
                                        "par_beta",         "par_detach_weight", "par_labels_only",
                                        "target_cer",       "max_dev_utterances", "max_symbols_per_frame"};
const std::vector<std::string> kPipelineKeys{"stack", "normalize"};
const std::vector<std::string> kDecodeKeys{"beam_width", "lm_weight", "max_symbols_per_frame", "mode",
                                           "chunk_left", "chunk_right"};

std::string dashed(std::string k) {
  std::replace(k.begin(), k.end(), '_', '-');
  return k;
}

// Config-key flags: --foo-bar sets key foo_bar. Values given on the command
// line override those from files.
class KeyFlags {
 public:
  void add(CLI::App* app, const std::vector<std::string>& keys, const std::string& group) {
    for (const auto& k : keys) {
      if (opts_.count(k)) continue;
      opts_[k] = app->add_option("--" + dashed(k), values_[k], "config key " + k)->group(group);
    }
  }
  void apply(KeyValues& kv, const std::vector<std::string>& keys) const {
    for (const auto& k : keys) {
      auto it = opts_.find(k);
      if (it != opts_.end() && it->second->count() > 0) kv.set(k, values_.at(k));
    }
  }
  bool given(const std::string& k) const {
    auto it = opts_.find(k);
    return it != opts_.end() && it->second->count() > 0;
  }

 private:
  std::map<std::string, CLI::Option*> opts_;
  std::map<std::string, std::string> values_;
};

void merge_into(KeyValues& dst, const KeyValues& src) {
  for (const auto& [k, v] : src.items()) dst.set(k, v);
}

std::ofstream open_out(const std::string& path) {
  if (const auto dir = fs::path(path).parent_path(); !dir.empty()) fs::create_directories(dir);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write " + path);
  return f;
}

// Feature pipeline applied identically in training and decoding.
struct Pipeline {
  bool stack = false;
  std::string normalize = "none";

  static Pipeline from_kv(const KeyValues& kv) {
    Pipeline p;
    p.stack = kv.get_int("stack", 0) != 0;
    p.normalize = kv.get_or("normalize", "none");
    if (p.normalize != "none" && p.normalize != "utterance" && p.normalize != "speaker")
      throw Error("normalize must be none, utterance or speaker, got " + p.normalize);
    return p;
  }
  void to_kv(KeyValues& kv) const {
    kv.set("stack", stack ? "1" : "0");
    kv.set("normalize", normalize);
  }
  void apply(std::vector<Utterance>& utts) const {
    if (stack)
      for (auto& u : utts) u.features = stack_downsample(u.features);
    if (normalize == "utterance") satkit::normalize(utts, NormScope::kPerUtterance);
    if (normalize == "speaker") satkit::normalize(utts, NormScope::kPerSpeaker);
    for (const auto& u : utts) validate_alignment(u);
  }
};

Dataset load_data(const std::string& dir, const Vocab* vocab, const Pipeline& p) {
  if (!fs::is_directory(dir)) throw Error("data directory not found: " + dir);
  auto ds = load_dataset(dir, vocab);
  p.apply(ds.utterances);
  return ds;
}

std::vector<Utterance> select(const std::vector<Utterance>& utts, const std::vector<std::string>& ids) {
  if (ids.empty()) return utts;
  std::vector<Utterance> out;
  for (const auto& id : ids) {
    auto it = std::find_if(utts.begin(), utts.end(), [&](const Utterance& u) { return u.id == id; });
    if (it == utts.end()) throw Error("utterance not found: " + id);
    out.push_back(*it);
  }
  return out;
}

// ---------------------------------------------------------------- gen-data

void setup_gen_data(CLI::App& app) {
  auto* cmd = app.add_subcommand("gen-data", "Generate a synthetic transduction task");
  auto spec = std::make_shared<TaskSpec>();
  auto out = std::make_shared<std::string>();
  auto kind = std::make_shared<std::string>("delayed-copy");
  cmd->add_option("--out", *out, "output dataset directory")->required();
  cmd->add_option("--kind", *kind, "delayed-copy or segment-classify");
  cmd->add_option("--vocab-size", spec->vocab_size);
  cmd->add_option("--feature-dim", spec->feature_dim);
  cmd->add_option("--num-utterances", spec->num_utterances);
  cmd->add_option("--min-labels", spec->min_labels);
  cmd->add_option("--max-labels", spec->max_labels);
  cmd->add_option("--min-segment", spec->min_segment);
  cmd->add_option("--max-segment", spec->max_segment);
  cmd->add_option("--fixed-segment", spec->fixed_segment);
  cmd->add_option("--min-gap", spec->min_gap);
  cmd->add_option("--max-gap", spec->max_gap);
  cmd->add_option("--noise", spec->noise);
  cmd->add_option("--seed", spec->seed);
  cmd->add_option("--template-seed", spec->template_seed, "shared by the splits of one task");
  cmd->callback([=] {
    spec->kind = task_kind_from_string(*kind);
    const auto ds = generate_task(*spec);
    save_dataset(*out, ds);
    std::size_t frames = 0, labels = 0;
    for (const auto& u : ds.utterances) {
      frames += u.features.frames;
      labels += u.targets.size();
    }
    std::cout << "wrote " << ds.utterances.size() << " utterances (" << frames << " frames, " << labels
              << " labels) to " << *out << '\n';
  });
}

// ---------------------------------------------------------------- lm-train

void setup_lm_train(CLI::App& app) {
  auto* cmd = app.add_subcommand("lm-train", "Train a backoff n-gram LM on transcripts");
  struct Opts {
    std::string text, out, vocab;
    int order = 5;
    double discount = 0.75;
    bool no_ids = false;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--text", o->text, "transcript file, one utterance per line")->required();
  cmd->add_option("--out", o->out, "output model file")->required();
  cmd->add_option("--order", o->order);
  cmd->add_option("--discount", o->discount);
  cmd->add_option("--vocab", o->vocab, "vocabulary file; listed tokens join the LM vocabulary");
  cmd->add_flag("--no-ids", o->no_ids, "lines carry tokens only, without a leading utterance id");
  cmd->callback([o] {
    std::ifstream f(o->text);
    if (!f) throw Error("cannot read transcripts: " + o->text);
    std::vector<NgramModel::Sentence> corpus;
    std::string line;
    while (std::getline(f, line)) {
      std::istringstream ls(line);
      NgramModel::Sentence s;
      std::string tok;
      if (!o->no_ids && !(ls >> tok)) continue;
      while (ls >> tok) s.push_back(tok);
      corpus.push_back(std::move(s));
    }
    std::vector<std::string> extra;
    if (!o->vocab.empty()) {
      const auto v = read_vocab_file(o->vocab);
      for (int i = Vocab::kNumReserved; i < v.size(); ++i) extra.push_back(v.token(i));
    }
    const auto lm = NgramModel::train(corpus, o->order, o->discount, extra);
    auto out = open_out(o->out);
    lm.save(out);
    std::cout << "order " << o->order << " LM over " << corpus.size() << " sentences, training perplexity "
              << std::setprecision(6) << lm.perplexity(corpus) << '\n';
  });
}

// ---------------------------------------------------------------- train

void setup_train(CLI::App& app) {
  auto* cmd = app.add_subcommand("train", "Train a self-attention transducer");
  struct Opts {
    std::string config, model_config, train, dev, ckpt_dir, metrics, resume;
    int threads = 1;
    bool quiet = false;
    KeyFlags keys;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--config", o->config, "run config file (key = value)");
  cmd->add_option("--model-config", o->model_config, "model config file (key = value)");
  cmd->add_option("--train", o->train, "training dataset directory")->required();
  cmd->add_option("--dev", o->dev, "dev dataset directory");
  cmd->add_option("--checkpoint-dir", o->ckpt_dir, "where checkpoints and metrics go")->required();
  cmd->add_option("--metrics", o->metrics, "metrics CSV (default: <checkpoint-dir>/metrics.csv)");
  cmd->add_option("--resume", o->resume, "checkpoint to continue from");
  cmd->add_option("--threads", o->threads, "worker threads for matrix kernels");
  cmd->add_flag("--quiet", o->quiet, "no per-epoch report");
  o->keys.add(cmd, kModelKeys, "Model");
  o->keys.add(cmd, kRunKeys, "Run");
  o->keys.add(cmd, kPipelineKeys, "Features");
  cmd->callback([o] {
    set_num_threads(o->threads);
    std::optional<Checkpoint> ck;
    if (!o->resume.empty()) ck = read_checkpoint(o->resume);

    KeyValues run = ck ? ck->run_config : KeyValues{};
    if (!o->config.empty()) merge_into(run, KeyValues::load(o->config));
    o->keys.apply(run, kRunKeys);
    o->keys.apply(run, kPipelineKeys);
    const auto pipe = Pipeline::from_kv(run);

    const auto train = load_data(o->train, nullptr, pipe);
    if (train.utterances.empty()) throw Error("no utterances in " + o->train);
    Dataset dev;
    if (!o->dev.empty()) dev = load_data(o->dev, &train.vocab, pipe);

    KeyValues mkv = ck ? ck->model_config : KeyValues{};
    if (!ck) {
      mkv.set("d_in", std::to_string(train.utterances[0].features.dim));
      std::string labels;
      for (int i = Vocab::kNumReserved; i < train.vocab.size(); ++i)
        labels += (labels.empty() ? "" : " ") + train.vocab.token(i);
      mkv.set("vocab", labels);
    }
    if (!o->model_config.empty()) merge_into(mkv, KeyValues::load(o->model_config));
    o->keys.apply(mkv, kModelKeys);
    if (o->keys.given("vocab_size")) throw Error("train: the vocabulary comes from the training data");
    const auto mcfg = ModelConfig::from_kv(mkv);
    if (!(mcfg.vocab() == train.vocab))
      throw Error("train: model vocabulary differs from the vocabulary of " + o->train);

    auto tcfg = TrainConfig::from_kv(run);
    tcfg.optimizer.model_dim = mcfg.attn.d_m;
    pipe.to_kv(tcfg.extra);
    tcfg.extra.set("train", o->train);
    tcfg.extra.set("dev", o->dev);
    tcfg.extra.set("checkpoint_dir", o->ckpt_dir);
    const std::string metrics_path = o->metrics.empty() ? o->ckpt_dir + "/metrics.csv" : o->metrics;
    tcfg.extra.set("metrics", metrics_path);
    if (!o->model_config.empty()) tcfg.extra.set("model_config", o->model_config);
    {
      const DecodeConfig dc;
      tcfg.extra.set("beam_width", std::to_string(dc.beam_width));
      std::ostringstream w;
      w << dc.lm_weight;
      tcfg.extra.set("lm_weight", w.str());
    }

    SatModel<double> model(mcfg, tcfg.seed);
    Trainer<double> trainer(model, train.utterances, dev.utterances, tcfg);
    if (ck) trainer.resume(o->resume);

    fs::create_directories(o->ckpt_dir);
    std::ofstream metrics(metrics_path, ck ? std::ios::app : std::ios::trunc);
    if (!metrics) throw Error("cannot write metrics: " + metrics_path);
    trainer.set_metrics_stream(&metrics);
    trainer.set_epoch_callback([&](const EpochSummary& es) {
      std::ostringstream name;
      name << o->ckpt_dir << "/epoch-" << std::setw(3) << std::setfill('0') << es.epoch << ".ckpt";
      trainer.save(name.str());
      trainer.save(o->ckpt_dir + "/last.ckpt");
      metrics.flush();
      if (!o->quiet) {
        std::cout << "epoch " << es.epoch << "  train_loss " << format_metric(es.train_transducer_loss)
                  << "  par_loss " << format_metric(es.train_par_loss);
        if (!dev.utterances.empty())
          std::cout << "  dev_loss " << format_metric(es.dev.transducer_loss) << "  dev_cer "
                    << format_metric(es.dev.cer) << "  dev_entropy " << format_metric(es.dev.emission_entropy);
        std::cout << "  lr " << format_metric(trainer.optimizer().lr_at(std::max(1L, trainer.step())))
                  << "  " << std::fixed << std::setprecision(1) << es.seconds << "s" << std::defaultfloat
                  << std::endl;
      }
      return true;
    });
    trainer.run();
    if (trainer.step() == 0) trainer.save(o->ckpt_dir + "/last.ckpt");
    if (!o->quiet) std::cout << "finished after " << trainer.epoch() << " epochs, " << trainer.step() << " steps\n";
  });
}

// ---------------------------------------------------------------- decode

struct LoadedModel {
  Checkpoint ck;
  std::unique_ptr<SatModel<double>> model;
  Pipeline pipe;
};

LoadedModel load_checkpoint_model(const std::string& path) {
  LoadedModel lm;
  lm.ck = read_checkpoint(path);
  const auto cfg = ModelConfig::from_kv(lm.ck.model_config);
  lm.model = std::make_unique<SatModel<double>>(cfg, 0);
  load_model(lm.ck, *lm.model);
  lm.pipe = Pipeline::from_kv(lm.ck.run_config);
  return lm;
}

void setup_decode(CLI::App& app) {
  auto* cmd = app.add_subcommand("decode", "Decode a dataset with a trained model");
  struct Opts {
    std::string checkpoint, data, lm, out, nbest, config;
    std::vector<std::string> utts;
    int threads = 1;
    KeyFlags keys;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--checkpoint", o->checkpoint)->required();
  cmd->add_option("--data", o->data, "dataset directory")->required();
  cmd->add_option("--out", o->out, "hypothesis file: utt_id<TAB>tokens")->required();
  cmd->add_option("--lm", o->lm, "n-gram LM for shallow fusion");
  cmd->add_option("--nbest", o->nbest, "n-best JSON-lines output");
  cmd->add_option("--config", o->config, "decode config file (key = value)");
  cmd->add_option("--utt", o->utts, "restrict to these utterance ids");
  cmd->add_option("--threads", o->threads);
  o->keys.add(cmd, kDecodeKeys, "Decoding");
  cmd->callback([o] {
    set_num_threads(o->threads);
    const auto lmodel = load_checkpoint_model(o->checkpoint);
    const auto& model = *lmodel.model;
    KeyValues kv;
    if (!o->config.empty()) kv = KeyValues::load(o->config);
    o->keys.apply(kv, kDecodeKeys);
    DecodeConfig cfg;
    cfg.beam_width = kv.get_int("beam_width", cfg.beam_width);
    cfg.lm_weight = kv.get_double("lm_weight", cfg.lm_weight);
    cfg.max_symbols_per_frame = kv.get_int("max_symbols_per_frame", cfg.max_symbols_per_frame);
    cfg.mode = decode_mode_from_string(kv.get_or("mode", "offline"));
    if (kv.has("chunk_left") || kv.has("chunk_right")) {
      auto c = model.config().chunk;
      if (kv.has("chunk_left")) c.left = parse_chunk_side(kv.get("chunk_left"));
      if (kv.has("chunk_right")) c.right = parse_chunk_side(kv.get("chunk_right"));
      cfg.chunk = c;
    }
    cfg.validate();
    const auto chunk = effective_chunk(model, cfg);
    if (cfg.mode == DecodeMode::kStreaming && !chunk.right)
      throw Error("streaming decode requires a bounded right context (set --chunk-right or train with one)");

    std::optional<NgramModel> lm;
    if (!o->lm.empty()) {
      std::ifstream f(o->lm);
      if (!f) throw Error("cannot read LM: " + o->lm);
      lm = NgramModel::load(f);
    }
    const auto ds = load_data(o->data, &model.vocab(), lmodel.pipe);
    const auto utts = select(ds.utterances, o->utts);

    auto out = open_out(o->out);
    std::optional<std::ofstream> nb;
    if (!o->nbest.empty()) nb = open_out(o->nbest);
    ErrorCount ec;
    std::size_t with_ref = 0;
    for (const auto& u : utts) {
      const auto hyps = cfg.mode == DecodeMode::kStreaming
                            ? decode_streaming(model, u.features, lm ? &*lm : nullptr, cfg)
                            : decode_offline(model, u.features.to_tensor(), lm ? &*lm : nullptr, cfg);
      write_hypothesis(out, u.id, hyps.front().prefix, model.vocab());
      if (nb) write_nbest(*nb, u.id, hyps, model.vocab(), cfg.lm_weight);
      if (!u.targets.empty()) {
        accumulate_errors(ec, u.targets, hyps.front().prefix);
        ++with_ref;
      }
    }
    if (!out) throw Error("failed writing " + o->out);
    std::cout << "decoded " << utts.size() << " utterances (" << to_string(cfg.mode) << ", beam "
              << cfg.beam_width << ")\n";
    if (with_ref)
      std::cout << "CER " << std::fixed << std::setprecision(4) << ec.rate() << " (" << ec.edits << " / "
                << ec.ref_len << ")\n";
  });
}

// ---------------------------------------------------------------- eval-cer

void setup_eval_cer(CLI::App& app) {
  auto* cmd = app.add_subcommand("eval-cer", "Score a hypothesis file against reference transcripts");
  auto ref = std::make_shared<std::string>(), hyp = std::make_shared<std::string>();
  cmd->add_option("--ref", *ref, "reference transcripts: utt_id tokens")->required();
  cmd->add_option("--hyp", *hyp, "hypotheses: utt_id<TAB>tokens")->required();
  cmd->callback([=] {
    auto read = [](const std::string& p) {
      std::ifstream f(p);
      if (!f) throw Error("cannot read " + p);
      return read_transcripts(f);
    };
    const auto refs = read(*ref), hyps = read(*hyp);
    ErrorCount ec;
    std::size_t missing = 0;
    for (const auto& [id, r] : refs) {
      auto it = hyps.find(id);
      if (it == hyps.end()) ++missing;
      accumulate_errors(ec, r, it == hyps.end() ? std::vector<std::string>{} : it->second);
    }
    if (ec.ref_len == 0) throw Error("eval-cer: references contain no tokens");
    if (missing) std::cerr << "warning: " << missing << " utterances have no hypothesis; scored as empty\n";
    std::cout << "CER " << std::fixed << std::setprecision(4) << ec.rate() << " (" << ec.edits << " / "
              << ec.ref_len << ", " << refs.size() << " utterances)\n";
  });
}

// ---------------------------------------------------------------- plot-lattice

void write_heatmap(const std::string& path, const std::vector<std::vector<double>>& rows, int scale,
                   const std::vector<bool>& marks) {
  const std::size_t frames = rows.size(), tokens = rows.empty() ? 0 : rows[0].size();
  const std::size_t W = frames * static_cast<std::size_t>(scale), H = tokens * static_cast<std::size_t>(scale);
  std::string px(W * H * 3, '\0');
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t t = x / static_cast<std::size_t>(scale), k = y / static_cast<std::size_t>(scale);
      const auto g = static_cast<unsigned char>(std::lround(255.0 * std::clamp(rows[t][k], 0.0, 1.0)));
      unsigned char* p = reinterpret_cast<unsigned char*>(&px[(y * W + x) * 3]);
      p[0] = p[1] = p[2] = g;
      if (!marks.empty() && marks[t] && x % static_cast<std::size_t>(scale) == 0) {
        p[0] = 255;
        p[1] = p[2] = static_cast<unsigned char>(g / 3);
      }
    }
  auto f = open_out(path);
  f << "P6\n" << W << ' ' << H << "\n255\n";
  f.write(px.data(), static_cast<std::streamsize>(px.size()));
}

void setup_plot_lattice(CLI::App& app) {
  auto* cmd = app.add_subcommand("plot-lattice", "Label posteriors of one utterance as CSV and PPM heatmap");
  struct Opts {
    std::string checkpoint, data, utt, out, alignment, lattice;
    bool full_vocab = false;
    int scale = 4;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--checkpoint", o->checkpoint)->required();
  cmd->add_option("--data", o->data, "dataset directory")->required();
  cmd->add_option("--utt", o->utt, "utterance id (default: first)");
  cmd->add_option("--out", o->out, "output prefix; writes <out>.csv and <out>.ppm")->required();
  cmd->add_option("--alignment", o->alignment, "alignment file to overlay (default: the dataset's)");
  cmd->add_option("--lattice", o->lattice, "also dump p(k|t,u) over the reference lattice as CSV");
  cmd->add_option("--scale", o->scale, "pixels per cell")->check(CLI::Range(1, 64));
  cmd->add_flag("--full-vocab", o->full_vocab, "plot every token, not just blank and emitted labels");
  cmd->callback([o] {
    const auto lmodel = load_checkpoint_model(o->checkpoint);
    const auto& model = *lmodel.model;
    const auto& vocab = model.vocab();
    const auto ds = load_data(o->data, &vocab, lmodel.pipe);
    if (ds.utterances.empty()) throw Error("no utterances in " + o->data);
    const auto u = o->utt.empty() ? ds.utterances.front() : select(ds.utterances, {o->utt}).front();

    // First greedy step of every frame: the distribution the search sees on
    // entering the frame.
    std::vector<std::vector<double>> at_frame(u.features.frames);
    std::vector<int> emitted_at(u.features.frames, Vocab::kBlank);
    std::vector<std::size_t> u_at(u.features.frames, 0);
    const auto res = greedy_decode(model, u.features.to_tensor(), 10, [&](const GreedyStep& s) {
      if (at_frame[s.t].empty()) {
        for (double lp : *s.log_probs) at_frame[s.t].push_back(std::exp(lp));
        u_at[s.t] = s.u;
      }
      if (s.chosen != Vocab::kBlank && emitted_at[s.t] == Vocab::kBlank) emitted_at[s.t] = s.chosen;
    });

    std::vector<int> cols;
    if (o->full_vocab) {
      for (int k = 0; k < vocab.size(); ++k) cols.push_back(k);
    } else {
      cols.push_back(Vocab::kBlank);
      std::vector<int> seen(res.labels.begin(), res.labels.end());
      std::sort(seen.begin(), seen.end());
      seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
      cols.insert(cols.end(), seen.begin(), seen.end());
    }

    std::vector<std::vector<double>> rows;
    auto csv = open_out(o->out + ".csv");
    csv << "frame,u,emitted";
    for (int k : cols) csv << ',' << vocab.token(k);
    csv << '\n';
    csv << std::setprecision(17);
    for (std::size_t t = 0; t < at_frame.size(); ++t) {
      std::vector<double> r;
      for (int k : cols) r.push_back(at_frame[t][static_cast<std::size_t>(k)]);
      csv << t << ',' << u_at[t] << ',' << (emitted_at[t] == Vocab::kBlank ? "" : vocab.token(emitted_at[t]));
      for (double v : r) csv << ',' << v;
      csv << '\n';
      rows.push_back(std::move(r));
    }

    std::optional<FrameAlignment> align = u.alignment;
    if (!o->alignment.empty()) {
      std::ifstream f(o->alignment);
      if (!f) throw Error("cannot read alignment file: " + o->alignment);
      const auto all = read_alignments(f, vocab);
      auto it = all.find(u.id);
      if (it == all.end()) throw Error("no alignment for " + u.id + " in " + o->alignment);
      align = it->second;
    }
    std::vector<bool> marks;
    if (align) {
      if (align->size() != u.features.frames)
        throw AlignmentMismatch("alignment of " + u.id + " has " + std::to_string(align->size()) +
                                " frames, features have " + std::to_string(u.features.frames));
      for (int tok : align->tokens) marks.push_back(tok != Vocab::kBlank);
    }
    write_heatmap(o->out + ".ppm", rows, o->scale, marks);

    if (!o->lattice.empty()) {
      if (u.targets.empty()) throw Error("--lattice needs a reference transcript for " + u.id);
      NoGradGuard ng;
      const auto lat = model.lattice(u.features.to_tensor(), u.targets);
      auto f = open_out(o->lattice);
      f << "t,u";
      for (int k = 0; k < vocab.size(); ++k) f << ',' << vocab.token(k);
      f << '\n' << std::setprecision(17);
      for (std::size_t t = 0; t < lat.T; ++t)
        for (std::size_t uu = 0; uu <= lat.U; ++uu) {
          f << t << ',' << uu;
          for (std::size_t k = 0; k < lat.K; ++k) f << ',' << std::exp(lat.logp(t, uu, static_cast<int>(k)));
          f << '\n';
        }
    }
    std::cout << u.id << ": " << rows.size() << " frames x " << cols.size() << " tokens, hypothesis";
    for (int l : res.labels) std::cout << ' ' << vocab.token(l);
    std::cout << '\n';
  });
}

// ---------------------------------------------------------------- bench

// Sequential-scan reference: h_t = tanh(x_t W + h_{t-1} V + b). Each step
// depends on the previous one, so extra threads only help inside a step.
Tensor<double> rnn_scan(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& v,
                        const Tensor<double>& b) {
  NoGradGuard ng;
  const auto xw = add_bias(matmul(x, w), b);
  const std::size_t T = x.dim(0), d = w.dim(1);
  std::vector<double> h(d, 0.0), out(T * d);
  std::vector<double> next(d);
  const auto& xv = xw.values();
  const auto& vv = v.values();
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t j = 0; j < d; ++j) {
      double s = xv[t * d + j];
      for (std::size_t i = 0; i < d; ++i) s += h[i] * vv[i * d + j];
      next[j] = std::tanh(s);
    }
    h = next;
    std::copy(h.begin(), h.end(), out.begin() + static_cast<long>(t * d));
  }
  return Tensor<double>({T, d}, std::move(out));
}

void setup_bench(CLI::App& app) {
  auto* cmd = app.add_subcommand("bench", "Encoder forward throughput vs length and threads");
  struct Opts {
    std::vector<std::size_t> lengths{100, 400, 1600};
    std::vector<int> threads{1, 2, 4};
    int repeats = 1;
    std::uint64_t seed = 1;
    bool no_rnn = false;
    KeyFlags keys;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--lengths", o->lengths)->delimiter(',');
  cmd->add_option("--threads", o->threads)->delimiter(',');
  cmd->add_option("--repeats", o->repeats)->check(CLI::PositiveNumber);
  cmd->add_option("--seed", o->seed);
  cmd->add_flag("--no-rnn", o->no_rnn, "skip the sequential-scan baseline");
  o->keys.add(cmd, kModelKeys, "Model");
  cmd->callback([o] {
    KeyValues kv;
    kv.set("d_in", "200");
    kv.set("d_m", "256");
    kv.set("n_h", "4");
    kv.set("d_ff", "1024");
    kv.set("n_enc_blocks", "2");
    kv.set("n_pred_blocks", "1");
    kv.set("vocab_size", "16");
    o->keys.apply(kv, kModelKeys);
    const auto cfg = ModelConfig::from_kv(kv);
    SatModel<double> model(cfg, o->seed);
    std::mt19937_64 rng(o->seed);
    std::normal_distribution<double> n01(0, 1);
    const auto dm = static_cast<std::size_t>(cfg.attn.d_m);
    auto rand_t = [&](std::size_t r, std::size_t c, double s) {
      std::vector<double> v(r * c);
      for (auto& x : v) x = s * n01(rng);
      return Tensor<double>({r, c}, std::move(v));
    };
    const auto rw = rand_t(static_cast<std::size_t>(cfg.d_in), dm, 1.0 / std::sqrt(cfg.d_in));
    const auto rv = rand_t(dm, dm, 1.0 / std::sqrt(static_cast<double>(dm)));
    const auto rb = Tensor<double>::zeros({dm});

    std::cout << "encoder d_m " << cfg.attn.d_m << ", " << cfg.attn.n_enc_blocks << " blocks, d_ff "
              << cfg.attn.d_ff << ", hardware threads " << std::thread::hardware_concurrency() << '\n';
    std::cout << "model      frames  threads   seconds   frames/s  speedup  identical\n";
    for (const std::string name : {"self-attn", "rnn-scan"}) {
      if (name == "rnn-scan" && o->no_rnn) continue;
      for (auto T : o->lengths) {
        const auto x = rand_t(T, static_cast<std::size_t>(cfg.d_in), 1.0);
        std::optional<std::vector<double>> ref;
        double base = 0;
        for (int th : o->threads) {
          set_num_threads(th);
          double best = 1e300;
          std::vector<double> vals;
          for (int r = 0; r < o->repeats; ++r) {
            NoGradGuard ng;
            const auto t0 = std::chrono::steady_clock::now();
            const auto y = name == "self-attn" ? model.encode(x) : rnn_scan(x, rw, rv, rb);
            best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
            vals = y.values();
          }
          if (!ref) {
            ref = vals;
            base = best;
          }
          std::cout << std::left << std::setw(10) << name << std::right << std::setw(7) << T << std::setw(9) << th
                    << std::fixed << std::setprecision(4) << std::setw(10) << best << std::setprecision(0)
                    << std::setw(11) << static_cast<double>(T) / best << std::setprecision(2) << std::setw(9)
                    << base / best << std::setw(11) << (vals == *ref ? "yes" : "NO") << std::defaultfloat << '\n';
        }
      }
    }
    set_num_threads(1);
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"satkit: self-attention transducer toolkit"};
  app.require_subcommand(1);
  setup_gen_data(app);
  setup_lm_train(app);
  setup_train(app);
  setup_decode(app);
  setup_eval_cer(app);
  setup_plot_lattice(app);
  setup_bench(app);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "satkit: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
