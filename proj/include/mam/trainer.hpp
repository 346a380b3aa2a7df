#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mam/decoding.hpp"
#include "mam/errors.hpp"
#include "mam/manifest.hpp"
#include "mam/model.hpp"
#include "mam/objectives.hpp"
#include "mam/vocab.hpp"

namespace mam {

struct TrainConfig {
  std::string mode = "st";
  int steps = 100;
  int batch_size = 8;
  int max_frames = 3000;
  double lr_peak = 1e-3;
  int warmup_steps = 100;
  int checkpoint_every = 50;
  int keep_last = 5;
  uint64_t seed = 0;
  std::string init_from;
  std::string train_manifest;
  std::string out_dir = "run";

  void validate() const {
    if (steps <= 0) throw ConfigError("steps must be > 0");
    if (warmup_steps < 1) throw ConfigError("warmup_steps must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
    if (keep_last < 1) throw ConfigError("keep_last must be >= 1");
    if (train_manifest.empty()) throw ConfigError("train_manifest is required");
    mode_from_string(mode);
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"mode", c.mode},
                     {"steps", c.steps},
                     {"batch_size", c.batch_size},
                     {"max_frames", c.max_frames},
                     {"lr_peak", c.lr_peak},
                     {"warmup_steps", c.warmup_steps},
                     {"checkpoint_every", c.checkpoint_every},
                     {"keep_last", c.keep_last},
                     {"seed", c.seed},
                     {"init_from", c.init_from},
                     {"train_manifest", c.train_manifest},
                     {"out_dir", c.out_dir}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.mode = j.value("mode", d.mode);
  c.steps = j.value("steps", d.steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.max_frames = j.value("max_frames", d.max_frames);
  c.lr_peak = j.value("lr_peak", d.lr_peak);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.keep_last = j.value("keep_last", d.keep_last);
  c.seed = j.value("seed", d.seed);
  c.init_from = j.value("init_from", d.init_from);
  c.train_manifest = j.value("train_manifest", d.train_manifest);
  c.out_dir = j.value("out_dir", d.out_dir);
}

// Linear warmup then inverse-sqrt decay; peaks exactly at step == warmup.
inline double lr_schedule(int step, double lr_peak, int warmup) {
  if (step < 1) throw ConfigError("lr_schedule: step must be >= 1");
  double s = static_cast<double>(step), w = static_cast<double>(warmup);
  return lr_peak * std::min(s / w, std::sqrt(w / s));
}

// Drops utterances longer than max_frames (strict inequality).
inline std::vector<ManifestEntry> filter_long(
    const std::vector<ManifestEntry>& entries, int max_frames,
    int* dropped = nullptr) {
  std::vector<ManifestEntry> kept;
  int n_dropped = 0;
  for (const auto& e : entries) {
    if (e.frames > max_frames)
      ++n_dropped;
    else
      kept.push_back(e);
  }
  if (dropped != nullptr) *dropped = n_dropped;
  return kept;
}

namespace detail {

// Adam with bias correction; moments keyed by tensor name.
struct Adam {
  double beta1 = 0.9, beta2 = 0.98, eps = 1e-9;
  std::map<std::string, std::vector<double>> m, v;
  int64_t t = 0;

  void step(Params& params, const Bindings<float>& grads, double lr) {
    ++t;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (auto& [name, grad] : grads) {
      auto& p = params.tensors.at(name);
      auto& mv = m[name];
      auto& vv = v[name];
      if (mv.empty()) mv.assign(p.data.size(), 0.0);
      if (vv.empty()) vv.assign(p.data.size(), 0.0);
      for (size_t i = 0; i < p.data.size(); ++i) {
        double gi = grad.data[i];
        mv[i] = beta1 * mv[i] + (1.0 - beta1) * gi;
        vv[i] = beta2 * vv[i] + (1.0 - beta2) * gi * gi;
        double update = lr * (mv[i] / bc1) / (std::sqrt(vv[i] / bc2) + eps);
        p.data[i] = static_cast<float>(p.data[i] - update);
      }
    }
  }
};

inline void clip_global_norm(Bindings<float>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads)
    for (float v : g.data) sq += static_cast<double>(v) * v;
  double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0.0) return;
  float factor = static_cast<float>(max_norm / norm);
  for (auto& [name, g] : grads)
    for (auto& v : g.data) v *= factor;
}

// Shuffle per epoch, then sort by length inside windows of 64 so batches stay
// roughly uniform; fully deterministic given (seed, epoch).
inline std::vector<std::vector<int>> make_batches(
    const std::vector<int>& frames, int batch_size, uint64_t seed,
    int epoch) {
  std::vector<int> order(frames.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  SplitMix64 rng(derive_seed(seed, 0x5u, static_cast<uint64_t>(epoch)));
  for (size_t i = 0; i + 1 < order.size(); ++i) {
    size_t j = i + rng.uniform_int(order.size() - i);
    std::swap(order[i], order[j]);
  }
  const size_t window = 64;
  for (size_t start = 0; start < order.size(); start += window) {
    size_t end = std::min(start + window, order.size());
    std::stable_sort(order.begin() + static_cast<int64_t>(start),
                     order.begin() + static_cast<int64_t>(end),
                     [&](int a, int b) {
                       if (frames[static_cast<size_t>(a)] !=
                           frames[static_cast<size_t>(b)])
                         return frames[static_cast<size_t>(a)] <
                                frames[static_cast<size_t>(b)];
                       return a < b;
                     });
  }
  std::vector<std::vector<int>> batches;
  for (size_t start = 0; start < order.size();
       start += static_cast<size_t>(batch_size))
    batches.emplace_back(
        order.begin() + static_cast<int64_t>(start),
        order.begin() +
            static_cast<int64_t>(std::min(order.size(),
                                          start + static_cast<size_t>(batch_size))));
  return batches;
}

}  // namespace detail

struct TrainResult {
  std::vector<std::string> checkpoints;  // retained, oldest first
  LossReport last_report;
  int steps_run = 0;
};

// In-memory training data: specs plus tokenized annotations.
struct TrainSet {
  std::vector<Spectrogram> specs;
  std::vector<std::optional<std::vector<int>>> y_star;  // with <eos>
  std::vector<std::optional<std::vector<int>>> z_star;  // with <eos>
  std::vector<std::string> ids;
  std::vector<int> frames;
};

// Loads features and applies tokenization; vocab tables must already sit in
// the model config.
inline TrainSet load_train_set(const std::vector<ManifestEntry>& entries,
                               const std::string& manifest_path,
                               const ModelConfig& mc) {
  TrainSet ts;
  std::optional<Vocab> st_vocab, asr_vocab;
  if (!mc.st_tokens.empty()) st_vocab = Vocab::from_tokens(mc.st_tokens);
  if (!mc.asr_tokens.empty()) asr_vocab = Vocab::from_tokens(mc.asr_tokens);
  for (const auto& e : entries) {
    if (e.feat.empty())
      throw DataError("utterance " + e.id + " has no feature file");
    Spectrogram s = read_spec(resolve_path(manifest_path, e.feat));
    if (s.bins() != mc.d_x)
      throw DataError("utterance " + e.id + " has " +
                      std::to_string(s.bins()) + " bins, model expects " +
                      std::to_string(mc.d_x));
    ts.frames.push_back(s.n());
    ts.specs.push_back(std::move(s));
    ts.ids.push_back(e.id);
    if (!e.translation.empty() && st_vocab) {
      auto ids = st_vocab->encode(e.translation);
      ids.push_back(Vocab::kEos);
      ts.y_star.emplace_back(std::move(ids));
    } else {
      ts.y_star.emplace_back(std::nullopt);
    }
    if (!e.transcript.empty() && asr_vocab) {
      auto ids = asr_vocab->encode(e.transcript);
      ids.push_back(Vocab::kEos);
      ts.z_star.emplace_back(std::move(ids));
    } else {
      ts.z_star.emplace_back(std::nullopt);
    }
  }
  return ts;
}

// Completes vocab tables and head flags from the manifest and mode.
inline void prepare_model_config(ModelConfig& mc, Mode mode,
                                 const std::vector<ManifestEntry>& entries) {
  if (mode == Mode::kPretrain) {
    mc.with_st = mc.with_asr = mc.with_ctc = false;
    mc.with_rec = true;
    mc.vocab_st = mc.vocab_asr = 0;
    mc.st_tokens.clear();
    mc.asr_tokens.clear();
    return;
  }
  if (mc.st_tokens.empty()) {
    std::vector<std::string> texts;
    for (const auto& e : entries)
      if (!e.translation.empty()) texts.push_back(e.translation);
    mc.st_tokens = Vocab::build(texts).id_to_tok;
  }
  if (mc.asr_tokens.empty()) {
    std::vector<std::string> texts;
    for (const auto& e : entries)
      if (!e.transcript.empty()) texts.push_back(e.transcript);
    mc.asr_tokens = Vocab::build(texts).id_to_tok;
  }
  mc.vocab_st = static_cast<int>(mc.st_tokens.size());
  mc.vocab_asr = static_cast<int>(mc.asr_tokens.size());
  mc.with_st = mc.with_asr = mc.with_ctc = mc.with_rec = true;
}

// Fresh init, then overwrite every tensor the checkpoint provides. Tensors
// absent from the checkpoint (e.g. decoders after encoder-only pre-training)
// keep their fresh initialization.
inline Params init_from_checkpoint(const ModelConfig& mc,
                                   const std::string& ckpt_path) {
  Params fresh = init_params(mc, mc.seed);
  ModelConfig ck_cfg;
  Params loaded = load_checkpoint(ckpt_path, &ck_cfg);
  for (const auto& [name, t] : loaded.tensors) {
    auto it = fresh.tensors.find(name);
    if (it == fresh.tensors.end()) continue;
    if (it->second.dims != t.dims)
      throw DataError("init_from: tensor " + name + " has shape " +
                      dims_str(t.dims) + ", model expects " +
                      dims_str(it->second.dims));
    it->second = t;
  }
  return fresh;
}

// The optimization loop for every training mode, including encoder-only
// pre-training. Deterministic end to end: batch order, masks, and dropout
// all derive from the config seeds.
inline TrainResult train(const TrainConfig& tc, ModelConfig mc,
                         const std::vector<ManifestEntry>& manifest_entries,
                         const std::string& manifest_path,
                         std::ostream* info = nullptr) {
  tc.validate();
  Mode mode = mode_from_string(tc.mode);

  std::vector<ManifestEntry> entries = manifest_entries;
  for (auto& e : entries)
    if (e.frames < 0 && !e.feat.empty())
      e.frames = spec_frame_count(resolve_path(manifest_path, e.feat));
  int dropped = 0;
  entries = filter_long(entries, tc.max_frames, &dropped);
  if (info != nullptr && dropped > 0)
    *info << "filtered " << dropped << " utterances over " << tc.max_frames
          << " frames\n";
  if (entries.empty()) throw DataError("no training utterances left");

  prepare_model_config(mc, mode, entries);
  mc.validate();
  TrainSet ts = load_train_set(entries, manifest_path, mc);

  Params params = tc.init_from.empty() ? init_params(mc, mc.seed)
                                       : init_from_checkpoint(mc, tc.init_from);

  // eps is drawn at init and never trained.
  std::set<std::string> trainable;
  for (const auto& [name, t] : params.tensors)
    if (name != "eps") trainable.insert(name);

  std::filesystem::create_directories(tc.out_dir);
  std::ofstream log_file(std::filesystem::path(tc.out_dir) / "train_log.jsonl");
  if (!log_file) throw DataError("cannot write training log in " + tc.out_dir);

  detail::Adam adam;
  TrainResult result;
  std::vector<std::vector<int>> batches;
  size_t batch_cursor = 0;
  int epoch = -1;

  auto save_ckpt = [&](int step) {
    char name[64];
    std::snprintf(name, sizeof(name), "ckpt_%06d.mamc", step);
    std::string path = (std::filesystem::path(tc.out_dir) / name).string();
    save_checkpoint(path, mc, params);
    result.checkpoints.push_back(path);
    while (static_cast<int>(result.checkpoints.size()) > tc.keep_last) {
      std::filesystem::remove(result.checkpoints.front());
      result.checkpoints.erase(result.checkpoints.begin());
    }
  };

  for (int step = 1; step <= tc.steps; ++step) {
    if (batch_cursor >= batches.size()) {
      ++epoch;
      batches = detail::make_batches(ts.frames, tc.batch_size, tc.seed, epoch);
      batch_cursor = 0;
    }
    const auto& idx = batches[batch_cursor++];

    std::vector<Spectrogram> specs;
    std::vector<std::optional<std::vector<int>>> ys, zs;
    std::vector<MaskPlan> plans;
    std::vector<std::string> ids;
    for (int u : idx) {
      specs.push_back(ts.specs[static_cast<size_t>(u)]);
      ys.push_back(ts.y_star[static_cast<size_t>(u)]);
      zs.push_back(ts.z_star[static_cast<size_t>(u)]);
      ids.push_back(ts.ids[static_cast<size_t>(u)]);
      // Fresh masks each epoch: the stream mixes (seed, utterance, epoch).
      uint64_t mask_seed = derive_seed(tc.seed, static_cast<uint64_t>(u),
                                       static_cast<uint64_t>(epoch));
      int n = ts.frames[static_cast<size_t>(u)];
      if (mc.mask_strategy == "span")
        plans.push_back(mask_span(n, mc.lambda, mask_seed, mc.span_width_mean));
      else
        plans.push_back(mask_frame(n, mc.lambda, mask_seed));
    }
    Batch batch = Batch::from_utterances(specs, std::move(ys), std::move(zs),
                                         std::move(plans), std::move(ids));

    Graph<float> g;
    SplitMix64 drop_rng(derive_seed(tc.seed, 0xD0u, static_cast<uint64_t>(step)));
    detail::Dropout<float> drop;
    drop.rate = mc.dropout;
    drop.rng = &drop_rng;
    detail::build_loss_graph(g, mc, batch, mode, drop, params.epsilon());

    EvalResult<float> ev;
    try {
      ev = evaluate_with_gradients(g, params.tensors, trainable, "total");
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(step) + ": " + e.what());
    }

    detail::clip_global_norm(ev.grads, 5.0);
    double lr = lr_schedule(step, tc.lr_peak, tc.warmup_steps);
    adam.step(params, ev.grads, lr);

    LossReport report;
    report.mode = mode;
    auto pick = [&](const char* k) -> std::optional<double> {
      auto it = ev.outputs.find(k);
      if (it == ev.outputs.end()) return std::nullopt;
      return static_cast<double>(it->second.data[0]);
    };
    report.l_st = pick("l_st");
    report.l_asr = pick("l_asr");
    report.l_ctc = pick("l_ctc");
    report.l_rec = pick("l_rec");
    report.total = ev.outputs.at("total").data[0];
    log_file << report.to_json(step, lr).dump() << "\n";
    result.last_report = report;
    result.steps_run = step;

    if (step % tc.checkpoint_every == 0) save_ckpt(step);
  }
  if (tc.steps % tc.checkpoint_every != 0) save_ckpt(tc.steps);
  log_file.flush();
  return result;
}

// Fine-tuning is training initialized from a checkpoint: encoder, epsilon and
// reconstruction head come from the file, decoders start fresh.
inline TrainResult fine_tune(const TrainConfig& tc, ModelConfig mc,
                             const std::vector<ManifestEntry>& entries,
                             const std::string& manifest_path,
                             std::ostream* info = nullptr) {
  if (tc.init_from.empty())
    throw ConfigError("fine_tune requires init_from");
  return train(tc, mc, entries, manifest_path, info);
}

}  // namespace mam
