#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mam/errors.hpp"
#include "mam/features.hpp"
#include "mam/manifest.hpp"
#include "mam/rng.hpp"

namespace mam {

// Deterministic synthetic (speech-like spectrogram, transcript, translation)
// triplets. Each source symbol renders as a fixed Gaussian bump over mel
// bins; the translation relabels symbols by a fixed bijection and swaps each
// adjacent pair, so the task needs genuine local reordering.
struct ToySpec {
  int src_vocab = 12;        // K
  int frames_per_symbol = 4;
  int d_x = 20;
  double noise_sigma = 0.05;
  int min_len = 3, max_len = 8;
  int n_train = 200, n_dev = 50, n_test = 50;
  uint64_t seed = 0;

  void validate() const {
    if (src_vocab < 2) throw ConfigError("toy: src_vocab must be >= 2");
    if (frames_per_symbol < 1)
      throw ConfigError("toy: frames_per_symbol must be >= 1");
    if (min_len < 1 || max_len < min_len)
      throw ConfigError("toy: bad utterance length range");
    if (d_x < 2) throw ConfigError("toy: d_x must be >= 2");
  }
};

// Noise-free template: a Gaussian bump centered at bin (symbol mod d_x) with
// a symbol-dependent width, repeated over frames_per_symbol rows.
inline TensorF symbol_template(int symbol, const ToySpec& toy) {
  if (symbol < 0 || symbol >= toy.src_vocab)
    throw ConfigError("toy: symbol " + std::to_string(symbol) +
                      " out of range");
  int center = symbol % toy.d_x;
  double sigma = 1.0 + 0.1 * symbol;
  TensorF t({toy.frames_per_symbol, toy.d_x});
  for (int r = 0; r < toy.frames_per_symbol; ++r)
    for (int b = 0; b < toy.d_x; ++b) {
      double d = b - center;
      t.at(r, b) = static_cast<float>(std::exp(-d * d / (2.0 * sigma * sigma)));
    }
  return t;
}

// Relabel by s -> (s + shift) mod K, then swap each adjacent pair.
inline std::vector<int> toy_translate(const std::vector<int>& z, int k,
                                      int shift) {
  std::vector<int> y(z.size());
  for (size_t i = 0; i < z.size(); ++i)
    y[i] = (z[i] + shift) % k;
  for (size_t i = 0; i + 1 < y.size(); i += 2) std::swap(y[i], y[i + 1]);
  return y;
}

struct ToyUtterance {
  std::string id;
  Spectrogram spec;
  std::vector<int> transcript;   // source symbols
  std::vector<int> translation;  // relabeled + swapped
};

namespace detail {

inline uint64_t split_tag(const std::string& split) {
  if (split == "train") return 1;
  if (split == "dev") return 2;
  if (split == "test") return 3;
  throw ConfigError("unknown split: " + split);
}

}  // namespace detail

// Fully deterministic per (seed, split, index); dev/test streams never
// intersect train's.
inline ToyUtterance gen_utterance(const ToySpec& toy, const std::string& split,
                                  int index) {
  toy.validate();
  SplitMix64 rng(derive_seed(toy.seed, detail::split_tag(split),
                             static_cast<uint64_t>(index)));
  int len = toy.min_len + static_cast<int>(rng.uniform_int(
                              static_cast<uint64_t>(toy.max_len - toy.min_len + 1)));
  ToyUtterance utt;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%04d", split.c_str(), index);
  utt.id = buf;
  utt.transcript.resize(static_cast<size_t>(len));
  // No adjacent repeats: with 4x downsampling the encoder emits one state
  // per symbol, and a repeated label would make the CTC target unalignable.
  for (size_t i = 0; i < utt.transcript.size(); ++i) {
    int s;
    do {
      s = static_cast<int>(
          rng.uniform_int(static_cast<uint64_t>(toy.src_vocab)));
    } while (i > 0 && s == utt.transcript[i - 1]);
    utt.transcript[i] = s;
  }
  utt.translation = toy_translate(utt.transcript, toy.src_vocab,
                                  toy.src_vocab / 2);
  utt.spec.frames = TensorF({len * toy.frames_per_symbol, toy.d_x});
  for (int s = 0; s < len; ++s) {
    TensorF tmpl = symbol_template(utt.transcript[static_cast<size_t>(s)], toy);
    for (int r = 0; r < toy.frames_per_symbol; ++r)
      for (int b = 0; b < toy.d_x; ++b)
        utt.spec.frames.at(s * toy.frames_per_symbol + r, b) = tmpl.at(r, b);
  }
  for (auto& v : utt.spec.frames.data)
    v += static_cast<float>(rng.normal() * toy.noise_sigma);
  return utt;
}

inline std::string toy_tokens_to_text(const std::vector<int>& toks) {
  std::string s;
  for (size_t i = 0; i < toks.size(); ++i) {
    if (i) s += " ";
    s += std::to_string(toks[i]);
  }
  return s;
}

// Writes feats/<id>.mamf plus one manifest per split under out_dir.
inline void gen_corpus(const ToySpec& toy, const std::string& out_dir) {
  toy.validate();
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_dir) / "feats");
  const std::pair<std::string, int> splits[] = {
      {"train", toy.n_train}, {"dev", toy.n_dev}, {"test", toy.n_test}};
  for (const auto& [split, count] : splits) {
    std::vector<ManifestEntry> entries;
    for (int i = 0; i < count; ++i) {
      ToyUtterance utt = gen_utterance(toy, split, i);
      std::string rel = "feats/" + utt.id + ".mamf";
      write_spec(utt.spec, (fs::path(out_dir) / rel).string());
      ManifestEntry e;
      e.id = utt.id;
      e.feat = rel;
      e.transcript = toy_tokens_to_text(utt.transcript);
      e.translation = toy_tokens_to_text(utt.translation);
      entries.push_back(std::move(e));
    }
    write_manifest((fs::path(out_dir) / (split + ".jsonl")).string(), entries);
  }
}

}  // namespace mam
