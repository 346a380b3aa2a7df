#pragma once

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mam/errors.hpp"
#include "mam/features.hpp"
#include "mam/graph.hpp"
#include "mam/masking.hpp"
#include "mam/rng.hpp"
#include "mam/tensor.hpp"
#include "mam/vocab.hpp"

namespace mam {

// Architecture and objective hyperparameters. Vocab sizes include the three
// specials; the token tables travel with the config so checkpoints are
// self-contained.
struct ModelConfig {
  int d_model = 256;
  int n_heads = 4;
  int ffn_dim = 2048;
  int enc_layers = 12;
  int dec_layers = 6;
  int d_x = 80;
  int vocab_st = 0;
  int vocab_asr = 0;
  double lambda = 0.3;
  std::string mask_strategy = "frame";  // frame | span
  double span_width_mean = 3.0;
  double w_st = 1.0, w_asr = 1.0, w_ctc = 0.3, w_rec = 1.0;
  double dropout = 0.1;
  uint64_t seed = 0;
  bool rec_masked_only = false;  // reconstruction MSE covers the full signal by default
  bool st_on_clean = false;      // masked pathway feeds the ST loss by default
  bool with_st = true, with_asr = true, with_ctc = true, with_rec = true;
  std::vector<std::string> st_tokens, asr_tokens;

  int head_dim() const { return d_model / n_heads; }
  int conv_mid_channels() const { return d_model / 4; }
  // Frequency width after the two stride-2 convolutions.
  int freq_after_conv() const { return ((d_x + 1) / 2 + 1) / 2; }
  static int time_after_conv(int n) { return ((n + 1) / 2 + 1) / 2; }

  void validate() const {
    if (d_model <= 0 || n_heads <= 0 || ffn_dim <= 0 || d_x <= 0)
      throw ConfigError("model dims must be positive");
    if (enc_layers < 0 || dec_layers < 0)
      throw ConfigError("layer counts must be >= 0");
    if (d_model % n_heads != 0)
      throw ConfigError("d_model (" + std::to_string(d_model) +
                        ") must be divisible by n_heads (" +
                        std::to_string(n_heads) + ")");
    if (d_model % 4 != 0)
      throw ConfigError("d_model must be divisible by 4 for the conv stack");
    if (mask_strategy != "frame" && mask_strategy != "span")
      throw ConfigError("unknown mask strategy: " + mask_strategy);
    if (!(lambda >= 0.0 && lambda <= 1.0))
      throw ConfigError("lambda must be in [0,1]");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"d_model", c.d_model},
                     {"n_heads", c.n_heads},
                     {"ffn_dim", c.ffn_dim},
                     {"enc_layers", c.enc_layers},
                     {"dec_layers", c.dec_layers},
                     {"d_x", c.d_x},
                     {"vocab_st", c.vocab_st},
                     {"vocab_asr", c.vocab_asr},
                     {"lambda", c.lambda},
                     {"mask_strategy", c.mask_strategy},
                     {"span_width_mean", c.span_width_mean},
                     {"w_st", c.w_st},
                     {"w_asr", c.w_asr},
                     {"w_ctc", c.w_ctc},
                     {"w_rec", c.w_rec},
                     {"dropout", c.dropout},
                     {"seed", c.seed},
                     {"rec_masked_only", c.rec_masked_only},
                     {"st_on_clean", c.st_on_clean},
                     {"with_st", c.with_st},
                     {"with_asr", c.with_asr},
                     {"with_ctc", c.with_ctc},
                     {"with_rec", c.with_rec},
                     {"st_tokens", c.st_tokens},
                     {"asr_tokens", c.asr_tokens}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.d_model = j.value("d_model", d.d_model);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.ffn_dim = j.value("ffn_dim", d.ffn_dim);
  c.enc_layers = j.value("enc_layers", d.enc_layers);
  c.dec_layers = j.value("dec_layers", d.dec_layers);
  c.d_x = j.value("d_x", d.d_x);
  c.vocab_st = j.value("vocab_st", d.vocab_st);
  c.vocab_asr = j.value("vocab_asr", d.vocab_asr);
  c.lambda = j.value("lambda", d.lambda);
  c.mask_strategy = j.value("mask_strategy", d.mask_strategy);
  c.span_width_mean = j.value("span_width_mean", d.span_width_mean);
  c.w_st = j.value("w_st", d.w_st);
  c.w_asr = j.value("w_asr", d.w_asr);
  c.w_ctc = j.value("w_ctc", d.w_ctc);
  c.w_rec = j.value("w_rec", d.w_rec);
  c.dropout = j.value("dropout", d.dropout);
  c.seed = j.value("seed", d.seed);
  c.rec_masked_only = j.value("rec_masked_only", d.rec_masked_only);
  c.st_on_clean = j.value("st_on_clean", d.st_on_clean);
  c.with_st = j.value("with_st", d.with_st);
  c.with_asr = j.value("with_asr", d.with_asr);
  c.with_ctc = j.value("with_ctc", d.with_ctc);
  c.with_rec = j.value("with_rec", d.with_rec);
  c.st_tokens = j.value("st_tokens", d.st_tokens);
  c.asr_tokens = j.value("asr_tokens", d.asr_tokens);
}

// --- parameter set ----------------------------------------------------------

struct Params {
  std::map<std::string, TensorF> tensors;

  const TensorF& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw DataError("missing parameter: " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return tensors.count(name) > 0; }

  Epsilon epsilon() const {
    Epsilon e;
    e.vector = at("eps").data;
    return e;
  }
};

namespace detail {

inline void attention_shapes(
    const std::string& prefix, int d_model, int n_heads,
    std::vector<std::pair<std::string, std::vector<int>>>* out) {
  int dk = d_model / n_heads;
  for (int h = 0; h < n_heads; ++h) {
    std::string hp = prefix + "h" + std::to_string(h) + ".";
    out->push_back({hp + "wq", {d_model, dk}});
    out->push_back({hp + "bq", {dk}});
    out->push_back({hp + "wk", {d_model, dk}});
    out->push_back({hp + "bk", {dk}});
    out->push_back({hp + "wv", {d_model, dk}});
    out->push_back({hp + "bv", {dk}});
    out->push_back({hp + "wo", {dk, d_model}});
  }
  out->push_back({prefix + "bo", {d_model}});
}

inline void ffn_shapes(
    const std::string& prefix, int d_model, int ffn_dim,
    std::vector<std::pair<std::string, std::vector<int>>>* out) {
  out->push_back({prefix + "w1", {d_model, ffn_dim}});
  out->push_back({prefix + "b1", {ffn_dim}});
  out->push_back({prefix + "w2", {ffn_dim, d_model}});
  out->push_back({prefix + "b2", {d_model}});
}

inline void norm_shapes(
    const std::string& prefix, int d_model,
    std::vector<std::pair<std::string, std::vector<int>>>* out) {
  out->push_back({prefix + "g", {d_model}});
  out->push_back({prefix + "b", {d_model}});
}

inline void decoder_shapes(
    const std::string& prefix, const ModelConfig& c, int vocab,
    std::vector<std::pair<std::string, std::vector<int>>>* out) {
  out->push_back({prefix + "embed", {vocab, c.d_model}});
  for (int l = 0; l < c.dec_layers; ++l) {
    std::string lp = prefix + "l" + std::to_string(l) + ".";
    norm_shapes(lp + "ln1.", c.d_model, out);
    attention_shapes(lp + "self.", c.d_model, c.n_heads, out);
    norm_shapes(lp + "ln2.", c.d_model, out);
    attention_shapes(lp + "cross.", c.d_model, c.n_heads, out);
    norm_shapes(lp + "ln3.", c.d_model, out);
    ffn_shapes(lp + "ffn.", c.d_model, c.ffn_dim, out);
  }
  if (c.dec_layers > 0) norm_shapes(prefix + "ln_f.", c.d_model, out);
  out->push_back({prefix + "out.w", {c.d_model, vocab}});
  out->push_back({prefix + "out.b", {vocab}});
}

}  // namespace detail

// Canonical parameter list: every tensor name with its shape, in init order.
inline std::vector<std::pair<std::string, std::vector<int>>> param_shapes(
    const ModelConfig& c) {
  c.validate();
  std::vector<std::pair<std::string, std::vector<int>>> out;
  out.push_back({"eps", {c.d_x}});

  int c1 = c.conv_mid_channels();
  out.push_back({"enc.conv0.w", {c1, 1, 3, 3}});
  out.push_back({"enc.conv0.b", {c1}});
  out.push_back({"enc.conv1.w", {c.d_model, c1, 3, 3}});
  out.push_back({"enc.conv1.b", {c.d_model}});
  out.push_back({"enc.proj.w", {c.d_model * c.freq_after_conv(), c.d_model}});
  out.push_back({"enc.proj.b", {c.d_model}});
  for (int l = 0; l < c.enc_layers; ++l) {
    std::string lp = "enc.l" + std::to_string(l) + ".";
    detail::norm_shapes(lp + "ln1.", c.d_model, &out);
    detail::attention_shapes(lp + "attn.", c.d_model, c.n_heads, &out);
    detail::norm_shapes(lp + "ln2.", c.d_model, &out);
    detail::ffn_shapes(lp + "ffn.", c.d_model, c.ffn_dim, &out);
  }
  if (c.enc_layers > 0) detail::norm_shapes("enc.ln_f.", c.d_model, &out);

  if (c.with_st) {
    if (c.vocab_st < 3) throw ConfigError("vocab_st must be >= 3");
    detail::decoder_shapes("dec.st.", c, c.vocab_st, &out);
  }
  if (c.with_asr) {
    if (c.vocab_asr < 3) throw ConfigError("vocab_asr must be >= 3");
    detail::decoder_shapes("dec.asr.", c, c.vocab_asr, &out);
  }
  if (c.with_ctc) {
    if (c.vocab_asr < 3) throw ConfigError("vocab_asr must be >= 3");
    out.push_back({"ctc.w", {c.d_model, c.vocab_asr + 1}});
    out.push_back({"ctc.b", {c.vocab_asr + 1}});
  }
  if (c.with_rec) {
    int lat = c.d_model * c.freq_after_conv();
    out.push_back({"rec.proj.w", {c.d_model, lat}});
    out.push_back({"rec.proj.b", {lat}});
    out.push_back({"rec.tconv0.w", {c.d_model, c.d_model, 3, 3}});
    out.push_back({"rec.tconv0.b", {c.d_model}});
    out.push_back({"rec.tconv1.w", {c.d_model, 1, 3, 3}});
    out.push_back({"rec.tconv1.b", {1}});
  }
  return out;
}

// Scaled-normal init (0.02) for weights, zeros for biases, ones for norm
// gains; a single seeded stream in canonical order.
inline Params init_params(const ModelConfig& c, uint64_t seed) {
  Params p;
  SplitMix64 rng(seed);
  for (const auto& [name, dims] : param_shapes(c)) {
    TensorF t(dims);
    std::string leafname = name.substr(name.rfind('.') + 1);
    if (leafname == "g") {
      std::fill(t.data.begin(), t.data.end(), 1.0f);
    } else if (leafname[0] == 'b') {
      // zeros
    } else {
      for (auto& v : t.data)
        v = static_cast<float>(rng.normal() * 0.02);
    }
    p.tensors.emplace(name, std::move(t));
  }
  return p;
}

// --- parameter counting (Table 1) -------------------------------------------

struct ParamCounts {
  int64_t encoder = 0;
  int64_t st_decoder = 0;
  int64_t asr_decoder = 0;
  int64_t ctc = 0;
  int64_t recon = 0;
  int64_t epsilon = 0;

  int64_t total() const {
    return encoder + st_decoder + asr_decoder + ctc + recon + epsilon;
  }
  double recon_overhead() const {
    return static_cast<double>(recon) /
           static_cast<double>(encoder + st_decoder);
  }
};

inline ParamCounts count_parameters(const ModelConfig& c) {
  ParamCounts counts;
  for (const auto& [name, dims] : param_shapes(c)) {
    int64_t n = TensorF::numel_of(dims);
    if (name.rfind("enc.", 0) == 0)
      counts.encoder += n;
    else if (name.rfind("dec.st.", 0) == 0)
      counts.st_decoder += n;
    else if (name.rfind("dec.asr.", 0) == 0)
      counts.asr_decoder += n;
    else if (name.rfind("ctc.", 0) == 0)
      counts.ctc += n;
    else if (name.rfind("rec.", 0) == 0)
      counts.recon += n;
    else
      counts.epsilon += n;
  }
  return counts;
}

// --- checkpoint files --------------------------------------------------------
//
// magic "MAMC", u32 LE version=1, u32 json length + ModelConfig JSON (UTF-8),
// u32 tensor count, then per tensor: u16 name length, name bytes, u8 rank,
// u32 dims, f32 LE payload. Tensors are sorted by name.

inline void save_checkpoint(const std::string& path, const ModelConfig& config,
                            const Params& params) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw DataError("cannot write checkpoint: " + path);
    f.write("MAMC", 4);
    detail::put_u32(f, 1);
    std::string js = nlohmann::json(config).dump();
    detail::put_u32(f, static_cast<uint32_t>(js.size()));
    f.write(js.data(), static_cast<std::streamsize>(js.size()));
    detail::put_u32(f, static_cast<uint32_t>(params.tensors.size()));
    for (const auto& [name, t] : params.tensors) {
      uint16_t len = static_cast<uint16_t>(name.size());
      char lb[2] = {static_cast<char>(len), static_cast<char>(len >> 8)};
      f.write(lb, 2);
      f.write(name.data(), len);
      char rank = static_cast<char>(t.rank());
      f.write(&rank, 1);
      for (int d : t.dims) detail::put_u32(f, static_cast<uint32_t>(d));
      f.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * 4));
    }
    if (!f) throw DataError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Params load_checkpoint(const std::string& path, ModelConfig* config) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "MAMC", 4) != 0)
    throw DataError("bad magic in " + path);
  uint32_t version = detail::get_u32(f, "version");
  if (version != 1)
    throw DataError("unsupported checkpoint version " +
                    std::to_string(version));
  uint32_t js_len = detail::get_u32(f, "config length");
  std::string js(js_len, '\0');
  f.read(js.data(), js_len);
  if (!f) throw DataError("truncated config in " + path);
  try {
    *config = nlohmann::json::parse(js).get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad config in " + path + ": " + e.what());
  }
  uint32_t count = detail::get_u32(f, "tensor count");
  Params p;
  for (uint32_t i = 0; i < count; ++i) {
    unsigned char lb[2];
    f.read(reinterpret_cast<char*>(lb), 2);
    if (!f) throw DataError("truncated tensor header in " + path);
    uint16_t len = static_cast<uint16_t>(lb[0] | (lb[1] << 8));
    std::string name(len, '\0');
    f.read(name.data(), len);
    char rank_c = 0;
    f.read(&rank_c, 1);
    if (!f) throw DataError("truncated tensor header in " + path);
    std::vector<int> dims(static_cast<size_t>(rank_c));
    for (auto& d : dims)
      d = static_cast<int>(detail::get_u32(f, "tensor dim"));
    TensorF t(dims);
    f.read(reinterpret_cast<char*>(t.data.data()),
           static_cast<std::streamsize>(t.data.size() * 4));
    if (static_cast<size_t>(f.gcount()) != t.data.size() * 4)
      throw DataError("truncated tensor payload in " + path);
    p.tensors.emplace(std::move(name), std::move(t));
  }
  return p;
}

// --- graph builders ----------------------------------------------------------

template <typename S>
Bindings<S> params_as_bindings(const Params& p) {
  Bindings<S> b;
  for (const auto& [name, t] : p.tensors) b[name] = t.template cast<S>();
  return b;
}

template <>
inline Bindings<float> params_as_bindings<float>(const Params& p) {
  return p.tensors;
}

namespace detail {

// Optional multiplicative dropout, drawn from a dedicated stream so graphs
// without dropout are unaffected.
template <typename S>
struct Dropout {
  double rate = 0.0;
  SplitMix64* rng = nullptr;

  typename Graph<S>::Id apply(Graph<S>& g, typename Graph<S>::Id x) const {
    if (rate <= 0.0 || rng == nullptr) return x;
    TensorT<S> mask(g.dims(x));
    S keep = static_cast<S>(1.0 / (1.0 - rate));
    for (auto& v : mask.data)
      v = (rng->uniform01() >= rate) ? keep : S(0);
    return g.mul(x, g.constant(std::move(mask)));
  }
};

template <typename S>
TensorT<S> sinusoid_table(int len, int d_model) {
  TensorT<S> pe({len, d_model});
  for (int t = 0; t < len; ++t)
    for (int i = 0; i < d_model; ++i) {
      double angle =
          t / std::pow(10000.0, 2.0 * (i / 2) / static_cast<double>(d_model));
      pe.at(t, i) =
          static_cast<S>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  return pe;
}

template <typename S>
struct GraphParams {
  std::map<std::string, typename Graph<S>::Id> ids;

  static GraphParams declare(Graph<S>& g, const ModelConfig& c) {
    GraphParams gp;
    for (const auto& [name, dims] : param_shapes(c))
      gp.ids[name] = g.leaf(name, dims);
    return gp;
  }
  typename Graph<S>::Id operator()(const std::string& name) const {
    auto it = ids.find(name);
    if (it == ids.end()) throw ShapeError("unknown parameter: " + name);
    return it->second;
  }
};

template <typename S>
typename Graph<S>::Id layer_norm_p(Graph<S>& g, const GraphParams<S>& gp,
                                   const std::string& prefix,
                                   typename Graph<S>::Id x) {
  return g.layer_norm(x, gp(prefix + "g"), gp(prefix + "b"));
}

// Pre-norm multi-head attention. Keys/values come from `kv` (already
// normalized when self-attending); an additive mask constant enforces
// causality. Returns the residual-added output.
template <typename S>
typename Graph<S>::Id attention_p(Graph<S>& g, const ModelConfig& c,
                                  const GraphParams<S>& gp,
                                  const std::string& prefix,
                                  typename Graph<S>::Id residual,
                                  typename Graph<S>::Id q_in,
                                  typename Graph<S>::Id kv, bool causal,
                                  const Dropout<S>& drop,
                                  std::vector<typename Graph<S>::Id>* attn_out =
                                      nullptr) {
  int dk = c.head_dim();
  int n_q = g.dims(q_in)[0];
  int n_k = g.dims(kv)[0];
  typename Graph<S>::Id mask = -1;
  if (causal) {
    TensorT<S> m({n_q, n_k});
    for (int i = 0; i < n_q; ++i)
      for (int j = 0; j < n_k; ++j)
        m.at(i, j) = (j > i) ? static_cast<S>(-1e9) : S(0);
    mask = g.constant(std::move(m));
  }
  typename Graph<S>::Id summed = -1;
  for (int h = 0; h < c.n_heads; ++h) {
    std::string hp = prefix + "h" + std::to_string(h) + ".";
    auto q = g.add_row(g.matmul(q_in, gp(hp + "wq")), gp(hp + "bq"));
    auto k = g.add_row(g.matmul(kv, gp(hp + "wk")), gp(hp + "bk"));
    auto v = g.add_row(g.matmul(kv, gp(hp + "wv")), gp(hp + "bv"));
    auto scores = g.scale(g.matmul(q, g.transpose(k)), 1.0 / std::sqrt(dk));
    if (causal) scores = g.add(scores, mask);
    auto attn = g.softmax(scores);
    if (attn_out != nullptr) attn_out->push_back(attn);
    auto ctx = g.matmul(attn, v);
    auto out_h = g.matmul(ctx, gp(hp + "wo"));
    summed = (summed < 0) ? out_h : g.add(summed, out_h);
  }
  auto out = g.add_row(summed, gp(prefix + "bo"));
  return g.add(residual, drop.apply(g, out));
}

template <typename S>
typename Graph<S>::Id ffn_p(Graph<S>& g, const GraphParams<S>& gp,
                            const std::string& ln_prefix,
                            const std::string& ffn_prefix,
                            typename Graph<S>::Id x, const Dropout<S>& drop) {
  auto sub = layer_norm_p(g, gp, ln_prefix, x);
  auto h = g.relu(g.add_row(g.matmul(sub, gp(ffn_prefix + "w1")),
                            gp(ffn_prefix + "b1")));
  auto out =
      g.add_row(g.matmul(h, gp(ffn_prefix + "w2")), gp(ffn_prefix + "b2"));
  return g.add(x, drop.apply(g, out));
}

template <typename S>
struct EncoderNodes {
  typename Graph<S>::Id states = -1;
  int n_prime = 0;
  // attn[layer][head], kept only on request
  std::vector<std::vector<typename Graph<S>::Id>> attn;
};

// Conv downsampling (2 layers, kernel 3, stride 2) -> linear projection ->
// sinusoidal positions -> pre-norm transformer stack.
template <typename S>
EncoderNodes<S> build_encoder(Graph<S>& g, const ModelConfig& c,
                              const GraphParams<S>& gp,
                              typename Graph<S>::Id x, bool keep_attn,
                              const Dropout<S>& drop) {
  int n = g.dims(x)[0];
  EncoderNodes<S> enc;
  enc.n_prime = ModelConfig::time_after_conv(n);

  auto img = g.reshape(x, {1, n, c.d_x});
  auto c0 = g.relu(g.conv2d(img, gp("enc.conv0.w"), gp("enc.conv0.b"), 2));
  auto c1 = g.relu(g.conv2d(c0, gp("enc.conv1.w"), gp("enc.conv1.b"), 2));
  auto flat = g.reshape(g.permute102(c1),
                        {enc.n_prime, c.d_model * c.freq_after_conv()});
  auto h = g.add_row(g.matmul(flat, gp("enc.proj.w")), gp("enc.proj.b"));
  h = g.add(h, g.constant(sinusoid_table<S>(enc.n_prime, c.d_model)));
  h = drop.apply(g, h);

  for (int l = 0; l < c.enc_layers; ++l) {
    std::string lp = "enc.l" + std::to_string(l) + ".";
    auto sub = layer_norm_p(g, gp, lp + "ln1.", h);
    std::vector<typename Graph<S>::Id> attn_ids;
    h = attention_p(g, c, gp, lp + "attn.", h, sub, sub, /*causal=*/false,
                    drop, keep_attn ? &attn_ids : nullptr);
    if (keep_attn) enc.attn.push_back(std::move(attn_ids));
    h = ffn_p(g, gp, lp + "ln2.", lp + "ffn.", h, drop);
  }
  if (c.enc_layers > 0) h = layer_norm_p(g, gp, "enc.ln_f.", h);
  enc.states = h;
  return enc;
}

// Teacher-forced decoder: returns log-probabilities [T, vocab] for the given
// input token ids (normally <bos> + shifted targets).
template <typename S>
typename Graph<S>::Id build_decoder(Graph<S>& g, const ModelConfig& c,
                                    const GraphParams<S>& gp,
                                    const std::string& prefix,
                                    typename Graph<S>::Id enc_states,
                                    const std::vector<int>& input_tokens,
                                    const Dropout<S>& drop) {
  int t_len = static_cast<int>(input_tokens.size());
  auto e = g.embed(gp(prefix + "embed"), input_tokens);
  e = g.scale(e, std::sqrt(static_cast<double>(c.d_model)));
  e = g.add(e, g.constant(sinusoid_table<S>(t_len, c.d_model)));
  auto h = drop.apply(g, e);

  for (int l = 0; l < c.dec_layers; ++l) {
    std::string lp = prefix + "l" + std::to_string(l) + ".";
    auto sub = layer_norm_p(g, gp, lp + "ln1.", h);
    h = attention_p(g, c, gp, lp + "self.", h, sub, sub, /*causal=*/true,
                    drop);
    auto q = layer_norm_p(g, gp, lp + "ln2.", h);
    h = attention_p(g, c, gp, lp + "cross.", h, q, enc_states,
                    /*causal=*/false, drop);
    h = ffn_p(g, gp, lp + "ln3.", lp + "ffn.", h, drop);
  }
  if (c.dec_layers > 0) h = layer_norm_p(g, gp, prefix + "ln_f.", h);
  auto logits =
      g.add_row(g.matmul(h, gp(prefix + "out.w")), gp(prefix + "out.b"));
  return g.log_softmax(logits);
}

// Reconstruction head phi: linear projection to the conv-output latent map,
// two stride-2 transposed convolutions, center crop to the target size.
template <typename S>
typename Graph<S>::Id build_recon(Graph<S>& g, const ModelConfig& c,
                                  const GraphParams<S>& gp,
                                  typename Graph<S>::Id enc_states,
                                  int target_n, int target_d) {
  if (target_n < 1 || target_d < 1)
    throw ConfigError("reconstruct: target must be at least 1x1");
  int n_prime = g.dims(enc_states)[0];
  int fprime = c.freq_after_conv();
  auto lat = g.add_row(g.matmul(enc_states, gp("rec.proj.w")),
                       gp("rec.proj.b"));
  auto grid = g.permute102(g.reshape(lat, {n_prime, c.d_model, fprime}));
  auto u0 =
      g.relu(g.tconv2d(grid, gp("rec.tconv0.w"), gp("rec.tconv0.b"), 2));
  auto u1 = g.tconv2d(u0, gp("rec.tconv1.w"), gp("rec.tconv1.b"), 2);
  int full_n = 4 * n_prime, full_d = 4 * fprime;
  if (full_n < target_n || full_d < target_d)
    throw ShapeError("reconstruct: target " + std::to_string(target_n) + "x" +
                     std::to_string(target_d) + " exceeds upsampled " +
                     std::to_string(full_n) + "x" + std::to_string(full_d));
  auto flat = g.reshape(u1, {full_n, full_d});
  int r0 = (full_n - target_n) / 2;
  int c0 = (full_d - target_d) / 2;
  return g.slice(flat, r0, r0 + target_n, c0, c0 + target_d);
}

}  // namespace detail

// --- inference-time entry points ---------------------------------------------

struct EncoderOutput {
  TensorF states;  // [n', d_model]
  std::vector<std::vector<TensorF>> attn;  // [layer][head], n' x n'
  int n_prime = 0;
};

inline EncoderOutput encode(const ModelConfig& c, const Params& params,
                            const Spectrogram& spec, bool keep_attn = false) {
  if (spec.bins() != c.d_x)
    throw ShapeError("encode: spectrogram has " + std::to_string(spec.bins()) +
                     " bins, model expects " + std::to_string(c.d_x));
  Graph<float> g;
  auto gp = detail::GraphParams<float>::declare(g, c);
  detail::Dropout<float> no_drop;
  auto x = g.constant(spec.frames);
  auto enc = detail::build_encoder(g, c, gp, x, keep_attn, no_drop);
  g.mark_output("h", enc.states);
  for (size_t l = 0; l < enc.attn.size(); ++l)
    for (size_t h = 0; h < enc.attn[l].size(); ++h)
      g.mark_output("attn." + std::to_string(l) + "." + std::to_string(h),
                    enc.attn[l][h]);
  auto out = evaluate(g, params_as_bindings<float>(params));
  EncoderOutput res;
  res.states = out.at("h");
  res.n_prime = enc.n_prime;
  if (keep_attn) {
    res.attn.resize(enc.attn.size());
    for (size_t l = 0; l < enc.attn.size(); ++l)
      for (size_t h = 0; h < enc.attn[l].size(); ++h)
        res.attn[l].push_back(
            out.at("attn." + std::to_string(l) + "." + std::to_string(h)));
  }
  return res;
}

enum class DecoderHead { kSt, kAsr };

namespace detail {

inline std::string head_prefix(const ModelConfig& c, DecoderHead head) {
  if (head == DecoderHead::kSt) {
    if (!c.with_st) throw ConfigError("model has no ST decoder");
    return "dec.st.";
  }
  if (!c.with_asr) throw ConfigError("model has no ASR decoder");
  return "dec.asr.";
}

}  // namespace detail

// Log-probabilities [T, vocab] for teacher-forced input tokens.
inline TensorF decoder_logprobs(const ModelConfig& c, const Params& params,
                                const EncoderOutput& enc,
                                const std::vector<int>& input_tokens,
                                DecoderHead head) {
  std::string prefix = detail::head_prefix(c, head);
  Graph<float> g;
  auto gp = detail::GraphParams<float>::declare(g, c);
  detail::Dropout<float> no_drop;
  auto states = g.constant(enc.states);
  auto lp = detail::build_decoder(g, c, gp, prefix, states, input_tokens,
                                  no_drop);
  g.mark_output("logprobs", lp);
  return evaluate(g, params_as_bindings<float>(params)).at("logprobs");
}

// Next-token log-probability row after the given prefix.
inline std::vector<double> decode_step(const ModelConfig& c,
                                       const Params& params,
                                       const EncoderOutput& enc,
                                       const std::vector<int>& prefix,
                                       DecoderHead head) {
  std::vector<int> input = {Vocab::kBos};
  input.insert(input.end(), prefix.begin(), prefix.end());
  TensorF lp = decoder_logprobs(c, params, enc, input, head);
  int t = lp.rows() - 1;
  std::vector<double> row(static_cast<size_t>(lp.cols()));
  for (int v = 0; v < lp.cols(); ++v) row[static_cast<size_t>(v)] = lp.at(t, v);
  return row;
}

inline Spectrogram reconstruct(const ModelConfig& c, const Params& params,
                               const EncoderOutput& enc, int target_n,
                               int target_d) {
  Graph<float> g;
  auto gp = detail::GraphParams<float>::declare(g, c);
  auto states = g.constant(enc.states);
  auto rec = detail::build_recon(g, c, gp, states, target_n, target_d);
  g.mark_output("recon", rec);
  Spectrogram out;
  out.frames = evaluate(g, params_as_bindings<float>(params)).at("recon");
  return out;
}

}  // namespace mam
