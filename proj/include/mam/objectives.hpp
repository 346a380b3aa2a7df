#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mam/errors.hpp"
#include "mam/graph.hpp"
#include "mam/masking.hpp"
#include "mam/model.hpp"
#include "mam/vocab.hpp"

namespace mam {

enum class Mode { kSt, kMtl, kMam, kMamMtl, kPretrain };

inline Mode mode_from_string(const std::string& s) {
  if (s == "st") return Mode::kSt;
  if (s == "mtl") return Mode::kMtl;
  if (s == "mam") return Mode::kMam;
  if (s == "mam_mtl") return Mode::kMamMtl;
  if (s == "pretrain") return Mode::kPretrain;
  throw ConfigError("unknown mode: " + s);
}

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::kSt: return "st";
    case Mode::kMtl: return "mtl";
    case Mode::kMam: return "mam";
    case Mode::kMamMtl: return "mam_mtl";
    case Mode::kPretrain: return "pretrain";
  }
  return "?";
}

// Padded utterance batch. Annotations carry the end-of-sequence token;
// computation always slices back to the true lengths, so padding can never
// leak into a loss.
struct Batch {
  TensorF padded;  // [B, n_max, d_x]
  std::vector<int> lengths;
  std::vector<std::optional<std::vector<int>>> y_star;  // with <eos>
  std::vector<std::optional<std::vector<int>>> z_star;  // with <eos>
  std::vector<MaskPlan> plans;
  std::vector<std::string> ids;

  int size() const { return static_cast<int>(lengths.size()); }

  Spectrogram utt_spec(int i) const {
    int n = lengths[static_cast<size_t>(i)];
    int d = padded.dims[2];
    Spectrogram s;
    s.frames = TensorF({n, d});
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < d; ++c) s.frames.at(r, c) = padded.at3(i, r, c);
    return s;
  }

  static Batch from_utterances(
      const std::vector<Spectrogram>& specs,
      std::vector<std::optional<std::vector<int>>> ys,
      std::vector<std::optional<std::vector<int>>> zs,
      std::vector<MaskPlan> mask_plans, std::vector<std::string> utt_ids = {}) {
    if (specs.empty()) throw ConfigError("empty batch");
    Batch b;
    int n_max = 0, d = specs[0].bins();
    for (const auto& s : specs) {
      if (s.bins() != d) throw ShapeError("batch: inconsistent bin counts");
      n_max = std::max(n_max, s.n());
      b.lengths.push_back(s.n());
    }
    b.padded = TensorF({static_cast<int>(specs.size()), n_max, d});
    for (size_t i = 0; i < specs.size(); ++i)
      for (int r = 0; r < specs[i].n(); ++r)
        for (int c = 0; c < d; ++c)
          b.padded.at3(static_cast<int>(i), r, c) = specs[i].frames.at(r, c);
    auto check_eos = [](const std::optional<std::vector<int>>& t,
                        const char* what) {
      if (t && (t->empty() || t->back() != Vocab::kEos))
        throw ConfigError(std::string(what) +
                          " must end with the end-of-sequence token");
    };
    b.y_star = std::move(ys);
    b.z_star = std::move(zs);
    b.y_star.resize(specs.size());
    b.z_star.resize(specs.size());
    for (const auto& y : b.y_star) check_eos(y, "y_star");
    for (const auto& z : b.z_star) check_eos(z, "z_star");
    b.plans = std::move(mask_plans);
    b.plans.resize(specs.size());
    b.ids = std::move(utt_ids);
    b.ids.resize(specs.size());
    return b;
  }
};

// Per-step loss summary; inactive components stay unset.
struct LossReport {
  Mode mode = Mode::kSt;
  std::optional<double> l_st, l_asr, l_ctc, l_rec;
  double total = 0.0;

  nlohmann::json to_json(int step, double lr) const {
    nlohmann::json j;
    j["step"] = step;
    j["mode"] = to_string(mode);
    if (l_st) j["l_st"] = *l_st;
    if (l_asr) j["l_asr"] = *l_asr;
    if (l_ctc) j["l_ctc"] = *l_ctc;
    if (l_rec) j["l_rec"] = *l_rec;
    j["total"] = total;
    j["lr"] = lr;
    return j;
  }
};

namespace detail {

struct LossComponents {
  bool st = false, asr = false, ctc = false, rec = false;
  // Corrupt the encoder input with each utterance's MaskPlan.
  bool mask_input = false;
};

inline LossComponents components_for(Mode mode) {
  switch (mode) {
    case Mode::kSt: return {true, false, false, false, false};
    case Mode::kMtl: return {true, true, true, false, false};
    case Mode::kMam: return {true, false, false, true, true};
    case Mode::kMamMtl: return {true, true, true, true, true};
    case Mode::kPretrain: return {false, false, false, true, true};
  }
  return {};
}

// Cross-entropy over gold tokens via a one-hot constant; returns the
// per-utterance negative log-likelihood sum.
template <typename S>
typename Graph<S>::Id nll_sum(Graph<S>& g, typename Graph<S>::Id logprobs,
                              const std::vector<int>& targets) {
  int t_len = static_cast<int>(targets.size());
  int vocab = g.dims(logprobs)[1];
  TensorT<S> onehot({t_len, vocab});
  for (int t = 0; t < t_len; ++t) {
    if (targets[static_cast<size_t>(t)] < 0 ||
        targets[static_cast<size_t>(t)] >= vocab)
      throw ShapeError("target token id out of range");
    onehot.at(t, targets[static_cast<size_t>(t)]) = S(1);
  }
  return g.scale(g.reduce_sum(g.mul(logprobs, g.constant(std::move(onehot)))),
                 -1.0);
}

template <typename S>
typename Graph<S>::Id sum_nodes(Graph<S>& g,
                                const std::vector<typename Graph<S>::Id>& xs) {
  typename Graph<S>::Id acc = xs.at(0);
  for (size_t i = 1; i < xs.size(); ++i) acc = g.add(acc, xs[i]);
  return acc;
}

// Builds the multi-task graph for one batch. Active components are marked as
// outputs ("l_st", "l_asr", "l_ctc", "l_rec") along with their weighted sum
// "total". Every model parameter is declared as a leaf, so gradients come
// back as exact zeros for parameters a component set never touches.
template <typename S>
void build_loss_graph(Graph<S>& g, const ModelConfig& c, const Batch& batch,
                      const LossComponents& comp, const Dropout<S>& drop,
                      const Epsilon& eps, const std::string& mode_name = "loss") {
  if (comp.st && !c.with_st)
    throw ConfigError(mode_name + " needs an ST decoder");
  if ((comp.asr && !c.with_asr) || (comp.ctc && !c.with_ctc))
    throw ConfigError(mode_name + " needs the ASR/CTC heads");
  if (comp.rec && !c.with_rec)
    throw ConfigError(mode_name + " needs the reconstruction head");

  auto gp = GraphParams<S>::declare(g, c);
  std::vector<typename Graph<S>::Id> st_terms, asr_terms, ctc_terms, rec_terms;
  int64_t st_tokens = 0, asr_tokens = 0, rec_elems = 0;

  for (int i = 0; i < batch.size(); ++i) {
    Spectrogram clean = batch.utt_spec(i);
    const auto& plan = batch.plans[static_cast<size_t>(i)];
    bool masked = comp.mask_input && !plan.empty();

    auto clean_x = g.constant(clean.frames.template cast<S>());
    typename Graph<S>::Id enc_in = clean_x;
    if (masked)
      enc_in =
          g.constant(apply_plan(clean, plan, eps).frames.template cast<S>());

    auto enc = build_encoder(g, c, gp, enc_in, /*keep_attn=*/false, drop);
    typename Graph<S>::Id dec_states = enc.states;
    if (masked && c.st_on_clean)
      dec_states =
          build_encoder(g, c, gp, clean_x, /*keep_attn=*/false, drop).states;

    auto require = [&](const std::optional<std::vector<int>>& t,
                       const char* field) -> const std::vector<int>& {
      if (!t)
        throw ConfigError(mode_name + " requires " + field +
                          " but utterance " + std::to_string(i) + " has none");
      return *t;
    };

    if (comp.st) {
      const auto& y = require(batch.y_star[static_cast<size_t>(i)], "y_star");
      std::vector<int> input = {Vocab::kBos};
      input.insert(input.end(), y.begin(), y.end() - 1);
      auto lp = build_decoder(g, c, gp, "dec.st.", dec_states, input, drop);
      st_terms.push_back(nll_sum(g, lp, y));
      st_tokens += static_cast<int64_t>(y.size());
    }
    if (comp.asr) {
      const auto& z = require(batch.z_star[static_cast<size_t>(i)], "z_star");
      std::vector<int> input = {Vocab::kBos};
      input.insert(input.end(), z.begin(), z.end() - 1);
      auto lp = build_decoder(g, c, gp, "dec.asr.", enc.states, input, drop);
      asr_terms.push_back(nll_sum(g, lp, z));
      asr_tokens += static_cast<int64_t>(z.size());
    }
    if (comp.ctc) {
      const auto& z = require(batch.z_star[static_cast<size_t>(i)], "z_star");
      std::vector<int> labels(z.begin(), z.end() - 1);  // drop <eos>
      auto logits = g.add_row(g.matmul(enc.states, gp("ctc.w")), gp("ctc.b"));
      ctc_terms.push_back(g.ctc(g.log_softmax(logits), labels));
    }
    if (comp.rec) {
      auto recon = build_recon(g, c, gp, enc.states, clean.n(), c.d_x);
      if (c.rec_masked_only && masked) {
        TensorT<S> m({clean.n(), c.d_x});
        for (int f : plan.masked_frames())
          for (int col = 0; col < c.d_x; ++col) m.at(f, col) = S(1);
        auto mask_const = g.constant(std::move(m));
        rec_terms.push_back(
            g.sse(g.mul(recon, mask_const), g.mul(clean_x, mask_const)));
        rec_elems += static_cast<int64_t>(plan.total_masked()) * c.d_x;
      } else {
        rec_terms.push_back(g.sse(recon, clean_x));
        rec_elems += static_cast<int64_t>(clean.n()) * c.d_x;
      }
    }
  }

  std::vector<typename Graph<S>::Id> weighted;
  if (comp.st) {
    auto l =
        g.scale(sum_nodes(g, st_terms), 1.0 / static_cast<double>(st_tokens));
    g.mark_output("l_st", l);
    weighted.push_back(g.scale(l, c.w_st));
  }
  if (comp.asr) {
    auto l = g.scale(sum_nodes(g, asr_terms),
                     1.0 / static_cast<double>(asr_tokens));
    g.mark_output("l_asr", l);
    weighted.push_back(g.scale(l, c.w_asr));
  }
  if (comp.ctc) {
    auto l = g.scale(sum_nodes(g, ctc_terms),
                     1.0 / static_cast<double>(batch.size()));
    g.mark_output("l_ctc", l);
    weighted.push_back(g.scale(l, c.w_ctc));
  }
  if (comp.rec) {
    auto l = g.scale(
        sum_nodes(g, rec_terms),
        1.0 / static_cast<double>(std::max<int64_t>(rec_elems, 1)));
    g.mark_output("l_rec", l);
    weighted.push_back(g.scale(l, c.w_rec));
  }
  g.mark_output("total", sum_nodes(g, weighted));
}

template <typename S>
void build_loss_graph(Graph<S>& g, const ModelConfig& c, const Batch& batch,
                      Mode mode, const Dropout<S>& drop, const Epsilon& eps) {
  build_loss_graph(g, c, batch, components_for(mode), drop, eps,
                   "mode " + to_string(mode));
}

template <typename S>
double eval_single_loss(const ModelConfig& c, const Params& params,
                        const Batch& batch, const LossComponents& comp,
                        const char* key) {
  Graph<float> g;
  Dropout<float> no_drop;
  build_loss_graph(g, c, batch, comp, no_drop, params.epsilon(), key);
  return evaluate(g, params.tensors).at(key).data[0];
}

}  // namespace detail

// Every loss the mode activates plus the weighted total (no dropout).
// Reductions are per-token / per-element means so the weights stay
// comparable across utterance lengths.
inline LossReport loss_total(const ModelConfig& c, const Params& params,
                             const Batch& batch, Mode mode) {
  Graph<float> g;
  detail::Dropout<float> no_drop;
  detail::build_loss_graph(g, c, batch, mode, no_drop, params.epsilon());
  auto out = evaluate(g, params.tensors);
  LossReport r;
  r.mode = mode;
  auto pick = [&](const char* k) -> std::optional<double> {
    auto it = out.find(k);
    if (it == out.end()) return std::nullopt;
    return static_cast<double>(it->second.data[0]);
  };
  r.l_st = pick("l_st");
  r.l_asr = pick("l_asr");
  r.l_ctc = pick("l_ctc");
  r.l_rec = pick("l_rec");
  r.total = out.at("total").data[0];
  return r;
}

// Translation loss: mean over gold tokens of -log p(y_t | x, y_<t),
// teacher-forced on the clean pathway.
inline double loss_st(const ModelConfig& c, const Params& params,
                      const Batch& batch) {
  detail::LossComponents comp;
  comp.st = true;
  return detail::eval_single_loss<float>(c, params, batch, comp, "l_st");
}

// Recognition loss: the same contract through the ASR decoder against
// the transcript.
inline double loss_asr(const ModelConfig& c, const Params& params,
                       const Batch& batch) {
  detail::LossComponents comp;
  comp.asr = true;
  return detail::eval_single_loss<float>(c, params, batch, comp, "l_asr");
}

// Hybrid CTC companion: -log of the forward-algorithm alignment sum, mean
// per utterance.
inline double loss_ctc(const ModelConfig& c, const Params& params,
                       const Batch& batch) {
  detail::LossComponents comp;
  comp.ctc = true;
  return detail::eval_single_loss<float>(c, params, batch, comp, "l_ctc");
}

// Reconstruction loss on the masked pathway: mean over non-padding
// frames and bins of
// (x - phi(f(x_hat)))^2.
inline double loss_rec(const ModelConfig& c, const Params& params,
                       const Batch& batch) {
  detail::LossComponents comp;
  comp.rec = true;
  comp.mask_input = true;
  return detail::eval_single_loss<float>(c, params, batch, comp, "l_rec");
}

}  // namespace mam
