#pragma once

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mam/decoding.hpp"
#include "mam/errors.hpp"
#include "mam/features.hpp"
#include "mam/manifest.hpp"
#include "mam/model.hpp"
#include "mam/objectives.hpp"
#include "mam/pgm.hpp"
#include "mam/toydata.hpp"
#include "mam/trainer.hpp"

// Command drivers shared by the CLI binary and the test suites. Each driver
// does the work of one subcommand; the CLI maps exceptions to exit codes.
namespace mam::pipeline {

inline uint64_t default_seed() {
  const char* env = std::getenv("MAM_SEED");
  if (env == nullptr || *env == '\0') return 0;
  return std::strtoull(env, nullptr, 10);
}

// --- features ---------------------------------------------------------------

struct FeaturesResult {
  int processed = 0;
  std::vector<std::string> failed_ids;
};

// Extracts log-mel features for every manifest entry with an audio file and
// writes a feature-backed manifest to out_dir/manifest.jsonl. Per-file
// failures are collected, not fatal.
inline FeaturesResult run_features(const std::string& manifest_path,
                                   const std::string& out_dir, int bins,
                                   int win_ms, int hop_ms, bool apply_cmvn,
                                   std::ostream& err = std::cerr) {
  auto entries = read_manifest(manifest_path);
  std::filesystem::create_directories(out_dir);
  FeaturesResult result;
  std::vector<ManifestEntry> out_entries;
  for (auto e : entries) {
    try {
      Spectrogram spec;
      if (!e.audio.empty()) {
        AudioBuffer audio = read_wav(resolve_path(manifest_path, e.audio));
        spec = stft_logmel(audio, bins, win_ms, hop_ms);
        if (apply_cmvn && spec.n() >= 2) spec = cmvn(spec);
      } else if (!e.feat.empty()) {
        spec = read_spec(resolve_path(manifest_path, e.feat));
      } else {
        throw DataError("entry has neither audio nor feat");
      }
      std::string rel = e.id + ".mamf";
      write_spec(spec, (std::filesystem::path(out_dir) / rel).string());
      e.feat = rel;
      out_entries.push_back(std::move(e));
      ++result.processed;
    } catch (const std::exception& ex) {
      err << "features: " << e.id << ": " << ex.what() << "\n";
      result.failed_ids.push_back(e.id);
    }
  }
  write_manifest(
      (std::filesystem::path(out_dir) / "manifest.jsonl").string(),
      out_entries);
  return result;
}

// --- training ---------------------------------------------------------------

struct TrainFileConfig {
  ModelConfig model;
  TrainConfig train;
};

inline TrainFileConfig read_train_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  TrainFileConfig cfg;
  try {
    if (j.contains("model")) cfg.model = j.at("model").get<ModelConfig>();
    if (j.contains("train")) cfg.train = j.at("train").get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  if (!j.contains("model") || !j["model"].contains("seed"))
    cfg.model.seed = default_seed();
  if (!j.contains("train") || !j["train"].contains("seed"))
    cfg.train.seed = cfg.model.seed;
  return cfg;
}

// kind: "train" accepts any mode, "pretrain" forces pretrain, "finetune"
// requires init_from.
inline TrainResult run_train(const std::string& config_path,
                             const std::string& kind,
                             std::ostream* info = nullptr) {
  TrainFileConfig cfg = read_train_config(config_path);
  if (kind == "pretrain") {
    if (cfg.train.mode != "pretrain" && cfg.train.mode != "st")
      throw ConfigError("pretrain command requires mode \"pretrain\", got \"" +
                        cfg.train.mode + "\"");
    cfg.train.mode = "pretrain";
  } else if (kind == "finetune") {
    if (cfg.train.init_from.empty())
      throw ConfigError("finetune requires train.init_from");
  }
  cfg.train.validate();
  // Config-internal paths resolve against the working directory; paths inside
  // a manifest resolve against the manifest's own location.
  std::string manifest_path = cfg.train.train_manifest;
  auto entries = read_manifest(manifest_path);
  if (kind == "finetune")
    return fine_tune(cfg.train, cfg.model, entries, manifest_path, info);
  return train(cfg.train, cfg.model, entries, manifest_path, info);
}

// --- translation ------------------------------------------------------------

// Averages the last `average_last` checkpoints (sorted by path), then beam
// decodes every manifest entry in order; one token line per utterance.
inline std::vector<std::string> run_translate(
    std::vector<std::string> checkpoints, const std::string& manifest_path,
    int beam, double alpha, int average_last, int max_len,
    const std::string& out_path) {
  if (checkpoints.empty()) throw ConfigError("translate: no checkpoints");
  std::sort(checkpoints.begin(), checkpoints.end());
  if (average_last < 1) throw ConfigError("translate: --average-last < 1");
  int k = std::min<int>(average_last, static_cast<int>(checkpoints.size()));
  std::vector<std::string> last(checkpoints.end() - k, checkpoints.end());

  ModelConfig cfg;
  Params params = average_checkpoints(last, &cfg);
  if (!cfg.with_st || cfg.st_tokens.empty())
    throw DataError("checkpoint has no ST decoder vocabulary");
  Vocab vocab = Vocab::from_tokens(cfg.st_tokens);

  auto entries = read_manifest(manifest_path);
  std::vector<std::string> lines;
  for (const auto& e : entries) {
    if (e.feat.empty()) throw DataError("utterance " + e.id + " has no feat");
    Spectrogram spec = read_spec(resolve_path(manifest_path, e.feat));
    int cap = max_len > 0 ? max_len
                          : 2 * ModelConfig::time_after_conv(spec.n()) + 10;
    std::vector<Hypothesis> hyps = beam_search(cfg, params, spec, beam, alpha,
                                               cap);
    lines.push_back(vocab.decode(hyps.at(0).tokens));
  }
  if (!out_path.empty()) {
    std::string tmp = out_path + ".tmp";
    {
      std::ofstream f(tmp);
      if (!f) throw DataError("cannot write: " + out_path);
      for (const auto& line : lines) f << line << "\n";
    }
    std::filesystem::rename(tmp, out_path);
  }
  return lines;
}

// --- rendering (Fig. 2 / Fig. 3 analogues) ------------------------------------

struct RenderArgs {
  std::string feat;        // MAMF input
  std::string checkpoint;  // required for masked/reconstructed/attention
  std::string what = "original";
  double lambda = -1.0;    // -1 = use checkpoint config
  std::string strategy;    // empty = use checkpoint config
  uint64_t seed = 0;
  int layer = -1;          // -1 = last
  int head = 0;
  std::string out;
};

inline MaskPlan render_plan(const ModelConfig& cfg, const RenderArgs& args,
                            int n) {
  double lambda = args.lambda >= 0.0 ? args.lambda : cfg.lambda;
  std::string strategy =
      args.strategy.empty() ? cfg.mask_strategy : args.strategy;
  if (strategy == "span")
    return mask_span(n, lambda, args.seed, cfg.span_width_mean);
  if (strategy == "frame") return mask_frame(n, lambda, args.seed);
  throw ConfigError("unknown mask strategy: " + strategy);
}

inline void run_render(const RenderArgs& args) {
  Spectrogram spec = read_spec(args.feat);
  if (args.what == "original") {
    write_pgm(spec.frames, args.out);
    return;
  }
  if (args.checkpoint.empty())
    throw ConfigError("render --what " + args.what + " needs --checkpoint");
  ModelConfig cfg;
  Params params = load_checkpoint(args.checkpoint, &cfg);
  if (spec.bins() != cfg.d_x)
    throw DataError("feature bins do not match the checkpoint");

  if (args.what == "masked") {
    MaskPlan plan = render_plan(cfg, args, spec.n());
    write_pgm(apply_plan(spec, plan, params.epsilon()).frames, args.out);
    return;
  }
  if (args.what == "reconstructed") {
    MaskPlan plan = render_plan(cfg, args, spec.n());
    Spectrogram masked = apply_plan(spec, plan, params.epsilon());
    EncoderOutput enc = encode(cfg, params, masked);
    write_pgm(reconstruct(cfg, params, enc, spec.n(), cfg.d_x).frames,
              args.out);
    return;
  }
  if (args.what == "attention") {
    EncoderOutput enc = encode(cfg, params, spec, /*keep_attn=*/true);
    int layer = args.layer < 0 ? cfg.enc_layers - 1 : args.layer;
    if (layer < 0 || layer >= static_cast<int>(enc.attn.size()))
      throw ConfigError("attention layer out of range: " +
                        std::to_string(layer));
    if (args.head < 0 || args.head >= cfg.n_heads)
      throw ConfigError("attention head out of range: " +
                        std::to_string(args.head));
    write_pgm(enc.attn[static_cast<size_t>(layer)][static_cast<size_t>(args.head)],
              args.out);
    return;
  }
  throw ConfigError("unknown render target: " + args.what);
}

// --- evaluation ---------------------------------------------------------------

// Scores a checkpoint on a manifest. With --hyp-file, BLEU scores the given
// hypothesis lines instead of decoding.
inline double run_eval(const std::string& checkpoint,
                       const std::string& manifest_path,
                       const std::string& metric, int beam, double alpha,
                       int max_len, const std::string& hyp_file = "") {
  auto entries = read_manifest(manifest_path);
  if (entries.empty()) throw DataError("empty manifest");

  if (metric == "bleu") {
    std::vector<std::vector<std::string>> hyps, refs;
    for (const auto& e : entries) {
      if (e.translation.empty())
        throw DataError("utterance " + e.id + " has no reference translation");
      refs.push_back(split_ws(e.translation));
    }
    if (!hyp_file.empty()) {
      std::ifstream f(hyp_file);
      if (!f) throw DataError("cannot open hyp file: " + hyp_file);
      std::string line;
      while (std::getline(f, line)) hyps.push_back(split_ws(line));
    } else {
      auto lines = run_translate({checkpoint}, manifest_path, beam, alpha, 1,
                                 max_len, "");
      for (const auto& line : lines) hyps.push_back(split_ws(line));
    }
    return bleu(hyps, refs);
  }

  if (metric == "token-accuracy") {
    ModelConfig cfg;
    Params params = load_checkpoint(checkpoint, &cfg);
    if (cfg.st_tokens.empty())
      throw DataError("checkpoint has no ST vocabulary");
    Vocab vocab = Vocab::from_tokens(cfg.st_tokens);
    std::vector<Spectrogram> specs;
    std::vector<std::optional<std::vector<int>>> ys, zs;
    for (const auto& e : entries) {
      if (e.translation.empty())
        throw DataError("utterance " + e.id + " has no reference translation");
      specs.push_back(read_spec(resolve_path(manifest_path, e.feat)));
      auto ids = vocab.encode(e.translation);
      ids.push_back(Vocab::kEos);
      ys.emplace_back(std::move(ids));
      zs.emplace_back(std::nullopt);
    }
    Batch batch = Batch::from_utterances(specs, std::move(ys), std::move(zs), {});
    return token_accuracy(cfg, params, batch);
  }
  throw ConfigError("unknown metric: " + metric);
}

// --- gradient checking ---------------------------------------------------------

// Builds a little synthetic batch for the configured model and checks
// loss_total gradients for one mode against central differences.
inline GradCheckReport run_gradcheck(const ModelConfig& cfg_in, Mode mode,
                                     double tolerance, uint64_t seed,
                                     int max_probes_per_leaf = 8) {
  ModelConfig cfg = cfg_in;
  if (mode == Mode::kPretrain) {
    cfg.with_st = cfg.with_asr = cfg.with_ctc = false;
    cfg.with_rec = true;
    cfg.vocab_st = cfg.vocab_asr = 0;
  } else {
    if (cfg.vocab_st < 3) cfg.vocab_st = 8;
    if (cfg.vocab_asr < 3) cfg.vocab_asr = 8;
  }
  cfg.dropout = 0.0;
  cfg.validate();

  SplitMix64 rng(seed);
  std::vector<Spectrogram> specs;
  std::vector<std::optional<std::vector<int>>> ys, zs;
  std::vector<MaskPlan> plans;
  for (int u = 0; u < 2; ++u) {
    int n = 8 + 4 * u;
    Spectrogram s;
    s.frames = TensorF({n, cfg.d_x});
    for (auto& v : s.frames.data)
      v = static_cast<float>(rng.normal());
    specs.push_back(std::move(s));
    // CTC needs the target to fit in n' frames, with no adjacent repeats.
    int n_prime = ModelConfig::time_after_conv(n);
    auto tokens = [&](int vocab) {
      std::vector<int> t;
      int len = std::min(2 + u, n_prime);
      for (int i = 0; i < len; ++i) {
        int tok;
        do {
          tok = 3 + static_cast<int>(
                        rng.uniform_int(static_cast<uint64_t>(vocab - 3)));
        } while (!t.empty() && tok == t.back());
        t.push_back(tok);
      }
      t.push_back(Vocab::kEos);
      return t;
    };
    if (mode != Mode::kPretrain) {
      ys.emplace_back(tokens(cfg.vocab_st));
      zs.emplace_back(tokens(cfg.vocab_asr));
    } else {
      ys.emplace_back(std::nullopt);
      zs.emplace_back(std::nullopt);
    }
    plans.push_back(mask_frame(n, cfg.lambda, rng.next()));
  }
  Batch batch = Batch::from_utterances(specs, std::move(ys), std::move(zs),
                                       std::move(plans));

  Params params = init_params(cfg, seed);
  Graph<double> g;
  detail::Dropout<double> no_drop;
  detail::build_loss_graph(g, cfg, batch, mode, no_drop, params.epsilon());

  std::set<std::string> wrt;
  for (const auto& [name, t] : params.tensors)
    if (name != "eps") wrt.insert(name);

  GradCheckOptions opts;
  opts.tolerance = tolerance;
  opts.max_probes_per_leaf = max_probes_per_leaf;
  return grad_check(g, params_as_bindings<double>(params), wrt, "total", opts);
}

// --- averaging ------------------------------------------------------------------

inline void run_average(const std::vector<std::string>& checkpoints,
                        const std::string& out_path) {
  ModelConfig cfg;
  Params params = average_checkpoints(checkpoints, &cfg);
  save_checkpoint(out_path, cfg, params);
}

}  // namespace mam::pipeline
