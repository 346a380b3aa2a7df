#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mam/errors.hpp"
#include "mam/model.hpp"
#include "mam/objectives.hpp"

namespace mam {

// A finished decode: tokens always end in <eos>; score is the logprob
// normalized by lp(L) = ((5+L)/6)^alpha with L counting every token.
struct Hypothesis {
  std::vector<int> tokens;
  double logprob = 0.0;
  double score = 0.0;
};

inline double length_penalty(int len, double alpha) {
  return std::pow((5.0 + len) / 6.0, alpha);
}

namespace detail {

inline bool better(const Hypothesis& a, const Hypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.tokens < b.tokens;  // deterministic tie-break
}

}  // namespace detail

// Greedy chain-rule decoding over an arbitrary step function
// prefix -> log-prob row. At max_len the end-of-sequence token is forced so
// every hypothesis terminates.
template <typename StepFn>
Hypothesis greedy_decode_fn(StepFn&& step, int max_len, double alpha = 0.0,
                            int eos = Vocab::kEos) {
  if (max_len < 1) throw ConfigError("max_len must be >= 1");
  Hypothesis hyp;
  for (int t = 1; t <= max_len; ++t) {
    std::vector<double> row = step(hyp.tokens);
    int tok = eos;
    if (t < max_len) {
      tok = 0;
      for (int v = 1; v < static_cast<int>(row.size()); ++v)
        if (row[static_cast<size_t>(v)] > row[static_cast<size_t>(tok)])
          tok = v;
    }
    hyp.logprob += row[static_cast<size_t>(tok)];
    hyp.tokens.push_back(tok);
    if (tok == eos) break;
  }
  hyp.score = hyp.logprob /
              length_penalty(static_cast<int>(hyp.tokens.size()), alpha);
  return hyp;
}

// Beam search: each step keeps the `beam` best continuations by accumulated
// logprob; ending in <eos> freezes a hypothesis, which then competes by
// length-penalized score. Search stops when no active hypothesis could still
// beat the worst kept finished score, or at max_len (where <eos> is forced).
// With beam=1 this reduces exactly to greedy_decode_fn.
template <typename StepFn>
std::vector<Hypothesis> beam_search_fn(StepFn&& step, int beam, double alpha,
                                       int max_len, int eos = Vocab::kEos) {
  if (beam < 1) throw ConfigError("beam must be >= 1");
  if (max_len < 1) throw ConfigError("max_len must be >= 1");

  std::vector<Hypothesis> active = {Hypothesis{}};
  std::vector<Hypothesis> finished;

  auto keep_finished = [&](Hypothesis h) {
    h.score = h.logprob /
              length_penalty(static_cast<int>(h.tokens.size()), alpha);
    finished.push_back(std::move(h));
    std::sort(finished.begin(), finished.end(), detail::better);
    if (static_cast<int>(finished.size()) > beam) finished.resize(beam);
  };

  for (int t = 1; t <= max_len && !active.empty(); ++t) {
    struct Cand {
      size_t parent;
      int token;
      double logprob;
    };
    std::vector<Cand> cands;
    for (size_t p = 0; p < active.size(); ++p) {
      std::vector<double> row = step(active[p].tokens);
      if (t == max_len) {
        cands.push_back({p, eos, active[p].logprob +
                                     row[static_cast<size_t>(eos)]});
      } else {
        for (int v = 0; v < static_cast<int>(row.size()); ++v)
          cands.push_back({p, v, active[p].logprob +
                                     row[static_cast<size_t>(v)]});
      }
    }
    std::sort(cands.begin(), cands.end(), [&](const Cand& a, const Cand& b) {
      if (a.logprob != b.logprob) return a.logprob > b.logprob;
      if (a.parent != b.parent) return a.parent < b.parent;
      return a.token < b.token;
    });
    if (static_cast<int>(cands.size()) > beam) cands.resize(beam);

    std::vector<Hypothesis> next;
    for (const auto& cand : cands) {
      Hypothesis h = active[cand.parent];
      h.tokens.push_back(cand.token);
      h.logprob = cand.logprob;
      if (cand.token == eos)
        keep_finished(std::move(h));
      else
        next.push_back(std::move(h));
    }
    active = std::move(next);

    // lp(L) grows with L for alpha >= 0, so logprob/lp(max_len) bounds any
    // continuation's score from above.
    if (alpha >= 0.0 && static_cast<int>(finished.size()) >= beam &&
        !active.empty()) {
      double best_ub = -std::numeric_limits<double>::infinity();
      for (const auto& h : active)
        best_ub =
            std::max(best_ub, h.logprob / length_penalty(max_len, alpha));
      if (best_ub <= finished.back().score) break;
    }
  }
  return finished;
}

// --- model-backed decoding ---------------------------------------------------

// Inference never applies masking: the spectrogram goes through the clean
// encoder path regardless of the configured lambda.
inline Hypothesis greedy_decode(const ModelConfig& c, const Params& params,
                                const Spectrogram& spec, int max_len) {
  EncoderOutput enc = encode(c, params, spec);
  return greedy_decode_fn(
      [&](const std::vector<int>& prefix) {
        return decode_step(c, params, enc, prefix, DecoderHead::kSt);
      },
      max_len);
}

inline std::vector<Hypothesis> beam_search(const ModelConfig& c,
                                           const Params& params,
                                           const Spectrogram& spec, int beam,
                                           double alpha, int max_len) {
  EncoderOutput enc = encode(c, params, spec);
  return beam_search_fn(
      [&](const std::vector<int>& prefix) {
        return decode_step(c, params, enc, prefix, DecoderHead::kSt);
      },
      beam, alpha, max_len);
}

// --- corpus BLEU -------------------------------------------------------------

// n-grams 1..4, uniform weights, brevity penalty, no smoothing.
inline double bleu(const std::vector<std::vector<std::string>>& hyps,
                   const std::vector<std::vector<std::string>>& refs) {
  if (hyps.size() != refs.size())
    throw ConfigError("bleu: hypothesis/reference count mismatch");
  if (refs.empty()) throw ConfigError("bleu: empty corpus");

  int64_t hyp_len = 0, ref_len = 0;
  int64_t matched[4] = {0, 0, 0, 0};
  int64_t total[4] = {0, 0, 0, 0};

  auto ngram_counts = [](const std::vector<std::string>& toks, int n) {
    std::map<std::string, int64_t> counts;
    for (size_t i = 0; i + n <= toks.size(); ++i) {
      std::string key;
      for (int k = 0; k < n; ++k) {
        key += toks[i + static_cast<size_t>(k)];
        key += '\x1f';
      }
      ++counts[key];
    }
    return counts;
  };

  for (size_t i = 0; i < hyps.size(); ++i) {
    hyp_len += static_cast<int64_t>(hyps[i].size());
    ref_len += static_cast<int64_t>(refs[i].size());
    for (int n = 1; n <= 4; ++n) {
      auto hc = ngram_counts(hyps[i], n);
      auto rc = ngram_counts(refs[i], n);
      for (const auto& [key, count] : hc) {
        total[n - 1] += count;
        auto it = rc.find(key);
        if (it != rc.end()) matched[n - 1] += std::min(count, it->second);
      }
    }
  }

  if (hyp_len == 0) return 0.0;
  double log_prec = 0.0;
  for (int n = 0; n < 4; ++n) {
    if (total[n] == 0) continue;  // corpus too short for this order
    if (matched[n] == 0) return 0.0;
    log_prec += 0.25 * std::log(static_cast<double>(matched[n]) /
                                static_cast<double>(total[n]));
  }
  double bp = hyp_len >= ref_len
                  ? 1.0
                  : std::exp(1.0 - static_cast<double>(ref_len) /
                                       static_cast<double>(hyp_len));
  return bp * std::exp(log_prec);
}

// Teacher-forced argmax accuracy against gold translations; desk-scale proxy
// for BLEU.
inline double token_accuracy(const ModelConfig& c, const Params& params,
                             const Batch& batch) {
  if (batch.size() == 0) throw ConfigError("token_accuracy: empty batch");
  int64_t correct = 0, count = 0;
  for (int i = 0; i < batch.size(); ++i) {
    if (!batch.y_star[static_cast<size_t>(i)])
      throw ConfigError("token_accuracy requires y_star");
    const auto& y = *batch.y_star[static_cast<size_t>(i)];
    EncoderOutput enc = encode(c, params, batch.utt_spec(i));
    std::vector<int> input = {Vocab::kBos};
    input.insert(input.end(), y.begin(), y.end() - 1);
    TensorF lp = decoder_logprobs(c, params, enc, input, DecoderHead::kSt);
    for (size_t t = 0; t < y.size(); ++t) {
      int arg = 0;
      for (int v = 1; v < lp.cols(); ++v)
        if (lp.at(static_cast<int>(t), v) > lp.at(static_cast<int>(t), arg))
          arg = v;
      if (arg == y[t]) ++correct;
      ++count;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(count);
}

// --- checkpoint averaging ----------------------------------------------------

// Elementwise mean of the last-k parameter sets; configs must match exactly.
inline Params average_checkpoints(const std::vector<std::string>& paths,
                                  ModelConfig* config_out) {
  if (paths.empty()) throw ConfigError("average_checkpoints: no paths");
  ModelConfig first_cfg;
  Params acc = load_checkpoint(paths[0], &first_cfg);
  std::string first_js = nlohmann::json(first_cfg).dump();
  std::map<std::string, std::vector<double>> sums;
  for (const auto& [name, t] : acc.tensors)
    sums[name].assign(t.data.begin(), t.data.end());

  for (size_t i = 1; i < paths.size(); ++i) {
    ModelConfig cfg;
    Params p = load_checkpoint(paths[i], &cfg);
    if (nlohmann::json(cfg).dump() != first_js)
      throw DataError("average_checkpoints: config mismatch in " + paths[i]);
    if (p.tensors.size() != acc.tensors.size())
      throw DataError("average_checkpoints: tensor set mismatch in " +
                      paths[i]);
    for (const auto& [name, t] : p.tensors) {
      auto it = acc.tensors.find(name);
      if (it == acc.tensors.end() || it->second.dims != t.dims)
        throw DataError("average_checkpoints: tensor " + name +
                        " mismatch in " + paths[i]);
      auto& sum = sums[name];
      for (size_t k = 0; k < t.data.size(); ++k) sum[k] += t.data[k];
    }
  }
  double inv = 1.0 / static_cast<double>(paths.size());
  for (auto& [name, t] : acc.tensors) {
    const auto& sum = sums[name];
    for (size_t k = 0; k < t.data.size(); ++k)
      t.data[k] = static_cast<float>(sum[k] * inv);
  }
  if (config_out != nullptr) *config_out = first_cfg;
  return acc;
}

}  // namespace mam
