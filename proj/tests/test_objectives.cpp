#include <catch_amalgamated.hpp>

#include <cmath>

#include "helpers.hpp"
#include "mam/objectives.hpp"
#include "mam/pipeline.hpp"

using namespace mam;
using Catch::Approx;

namespace {

ModelConfig toy_config() {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.ffn_dim = 32;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.d_x = 10;
  c.vocab_st = 8;
  c.vocab_asr = 8;
  c.dropout = 0.0;
  return c;
}

Spectrogram random_spec(int n, int d, uint64_t seed) {
  SplitMix64 rng(seed);
  Spectrogram s;
  s.frames = testutil::random_tensor<float>({n, d}, rng);
  return s;
}

Batch one_utt_batch(const Spectrogram& spec,
                    std::optional<std::vector<int>> y,
                    std::optional<std::vector<int>> z,
                    MaskPlan plan = {}) {
  return Batch::from_utterances({spec}, {std::move(y)}, {std::move(z)},
                                {std::move(plan)});
}

Params zeroed(const ModelConfig& c) {
  Params p = init_params(c, 1);
  for (auto& [name, t] : p.tensors)
    std::fill(t.data.begin(), t.data.end(), 0.0f);
  return p;
}

// log-softmax of a small row, computed independently.
std::vector<double> lsm_oracle(const std::vector<double>& row) {
  double mx = row[0];
  for (double v : row) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : row) z += std::exp(v - mx);
  std::vector<double> out;
  for (double v : row) out.push_back(v - mx - std::log(z));
  return out;
}

}  // namespace

TEST_CASE("batch: annotations must end with <eos>") {
  Spectrogram s = random_spec(6, 10, 1);
  CHECK_THROWS_AS(one_utt_batch(s, std::vector<int>{3, 4}, std::nullopt),
                  ConfigError);
  CHECK_NOTHROW(one_utt_batch(s, std::vector<int>{3, 4, Vocab::kEos},
                              std::nullopt));
}

TEST_CASE("loss_st: rigged certainty, uniform logits, hand oracle") {
  ModelConfig c = toy_config();

  // Near-certain gold: huge bias on <eos>, single-token target.
  Params certain = zeroed(c);
  certain.tensors.at("dec.st.out.b").data[Vocab::kEos] = 60.0f;
  Batch b1 = one_utt_batch(random_spec(6, c.d_x, 2),
                           std::vector<int>{Vocab::kEos}, std::nullopt);
  CHECK(loss_st(c, certain, b1) == Approx(0.0).margin(1e-9));

  // All-zero parameters give uniform rows: ln(V) per token.
  Params uniform = zeroed(c);
  Batch b2 = one_utt_batch(random_spec(6, c.d_x, 3),
                           std::vector<int>{3, 5, Vocab::kEos}, std::nullopt);
  CHECK(loss_st(c, uniform, b2) == Approx(std::log(8.0)).margin(1e-6));

  // Hand-specified logit rows via the output bias.
  Params crafted = zeroed(c);
  std::vector<double> bias = {0.1, -0.4, 0.0, 1.2, -2.0, 0.7, 0.3, -0.9};
  auto& bdata = crafted.tensors.at("dec.st.out.b").data;
  for (size_t i = 0; i < bias.size(); ++i)
    bdata[i] = static_cast<float>(bias[i]);
  std::vector<int> target = {5, Vocab::kEos};
  Batch b3 = one_utt_batch(random_spec(6, c.d_x, 4), target, std::nullopt);
  auto lsm = lsm_oracle(bias);
  double expected = -(lsm[5] + lsm[Vocab::kEos]) / 2.0;
  CHECK(loss_st(c, crafted, b3) == Approx(expected).margin(1e-6));

  // Missing annotation is a structured error.
  Batch no_y = one_utt_batch(random_spec(6, c.d_x, 5), std::nullopt,
                             std::nullopt);
  CHECK_THROWS_WITH(loss_st(c, zeroed(c), no_y),
                    Catch::Matchers::ContainsSubstring("y_star"));
}

TEST_CASE("loss_asr mirrors loss_st through the ASR decoder") {
  ModelConfig c = toy_config();
  Params certain = zeroed(c);
  certain.tensors.at("dec.asr.out.b").data[Vocab::kEos] = 60.0f;
  Batch b1 = one_utt_batch(random_spec(6, c.d_x, 2), std::nullopt,
                           std::vector<int>{Vocab::kEos});
  CHECK(loss_asr(c, certain, b1) == Approx(0.0).margin(1e-9));

  Batch b2 = one_utt_batch(random_spec(6, c.d_x, 3), std::nullopt,
                           std::vector<int>{4, 6, Vocab::kEos});
  CHECK(loss_asr(c, zeroed(c), b2) == Approx(std::log(8.0)).margin(1e-6));

  Params crafted = zeroed(c);
  std::vector<double> bias = {-0.2, 0.9, 0.0, 0.4, 1.1, -1.5, 0.6, 0.2};
  auto& bdata = crafted.tensors.at("dec.asr.out.b").data;
  for (size_t i = 0; i < bias.size(); ++i)
    bdata[i] = static_cast<float>(bias[i]);
  Batch b3 = one_utt_batch(random_spec(6, c.d_x, 4), std::nullopt,
                           std::vector<int>{4, Vocab::kEos});
  auto lsm = lsm_oracle(bias);
  double expected = -(lsm[4] + lsm[Vocab::kEos]) / 2.0;
  CHECK(loss_asr(c, crafted, b3) == Approx(expected).margin(1e-6));
}

TEST_CASE("loss_ctc: single path, enumeration, unalignable") {
  ModelConfig c = toy_config();

  // n' = 1 and a single label: -log softmax(bias)[z0].
  Params crafted = zeroed(c);
  std::vector<double> bias(static_cast<size_t>(c.vocab_asr + 1));
  SplitMix64 rng(9);
  for (auto& v : bias) v = rng.normal();
  auto& bdata = crafted.tensors.at("ctc.b").data;
  for (size_t i = 0; i < bias.size(); ++i)
    bdata[i] = static_cast<float>(bias[i]);

  Batch b1 = one_utt_batch(random_spec(3, c.d_x, 2), std::nullopt,
                           std::vector<int>{5, Vocab::kEos});
  auto lsm = lsm_oracle(bias);
  CHECK(loss_ctc(c, crafted, b1) == Approx(-lsm[5]).margin(1e-5));

  // n' = 2: brute-force path enumeration over the blank-augmented alphabet.
  Batch b2 = one_utt_batch(random_spec(7, c.d_x, 3), std::nullopt,
                           std::vector<int>{5, Vocab::kEos});
  TensorD logprobs({2, c.vocab_asr + 1});
  for (int t = 0; t < 2; ++t)
    for (int v = 0; v < c.vocab_asr + 1; ++v)
      logprobs.at(t, v) = lsm[static_cast<size_t>(v)];
  double expected = testutil::ctc_bruteforce(logprobs, {5});
  CHECK(loss_ctc(c, crafted, b2) == Approx(expected).margin(1e-5));

  // Repeated label at an impossible length.
  Batch b3 = one_utt_batch(random_spec(7, c.d_x, 4), std::nullopt,
                           std::vector<int>{5, 5, Vocab::kEos});
  CHECK_THROWS_AS(loss_ctc(c, crafted, b3), UnalignableError);
}

TEST_CASE("loss_rec: exact zero case, exact unit offset, loop oracle") {
  ModelConfig c = toy_config();

  // Zero signal and zero parameters: phi(f(x)) == x == 0, so exactly 0.
  Spectrogram zero_spec;
  zero_spec.frames = TensorF({8, c.d_x});
  Params p0 = zeroed(c);
  Batch b0 = one_utt_batch(zero_spec, std::nullopt, std::nullopt);
  CHECK(loss_rec(c, p0, b0) == 0.0);

  // Reconstruction == x + 1 everywhere via the last deconv bias: exactly 1.
  Params p1 = zeroed(c);
  p1.tensors.at("rec.tconv1.b").data[0] = 1.0f;
  CHECK(loss_rec(c, p1, b0) == 1.0);

  // Random x against a constant reconstruction: direct two-loop sum.
  Spectrogram x = random_spec(3, c.d_x, 7);
  Params pc = zeroed(c);
  pc.tensors.at("rec.tconv1.b").data[0] = 0.25f;
  double acc = 0.0;
  for (int r = 0; r < 3; ++r)
    for (int col = 0; col < c.d_x; ++col) {
      double d = x.frames.at(r, col) - 0.25;
      acc += d * d;
    }
  double expected = acc / (3.0 * c.d_x);
  Batch bx = one_utt_batch(x, std::nullopt, std::nullopt);
  CHECK(loss_rec(c, pc, bx) == Approx(expected).margin(1e-6));
}

TEST_CASE("loss_rec: padding length never changes the value") {
  ModelConfig c = toy_config();
  Params p = init_params(c, 11);
  Spectrogram a = random_spec(6, c.d_x, 21);
  Spectrogram b = random_spec(14, c.d_x, 22);  // forces padding for `a`
  double la = loss_rec(c, p, one_utt_batch(a, std::nullopt, std::nullopt));
  double lb = loss_rec(c, p, one_utt_batch(b, std::nullopt, std::nullopt));
  Batch mixed = Batch::from_utterances({a, b}, {std::nullopt, std::nullopt},
                                       {std::nullopt, std::nullopt}, {});
  double expected = (la * 6 * c.d_x + lb * 14 * c.d_x) / ((6 + 14) * c.d_x);
  CHECK(loss_rec(c, p, mixed) == Approx(expected).margin(1e-5));
}

TEST_CASE("loss_total: mode contracts and the weighted sum") {
  ModelConfig c = toy_config();
  c.w_ctc = 0.3;
  Params p = init_params(c, 13);
  Spectrogram s1 = random_spec(9, c.d_x, 31);
  Spectrogram s2 = random_spec(6, c.d_x, 32);
  auto y1 = std::vector<int>{3, 6, Vocab::kEos};
  auto y2 = std::vector<int>{4, Vocab::kEos};
  auto z1 = std::vector<int>{5, Vocab::kEos};
  auto z2 = std::vector<int>{7, 3, Vocab::kEos};
  Batch batch = Batch::from_utterances(
      {s1, s2}, {y1, y2}, {z1, z2},
      {mask_frame(9, 0.3, 1), mask_frame(6, 0.3, 2)});

  LossReport st = loss_total(c, p, batch, Mode::kSt);
  REQUIRE(st.l_st.has_value());
  CHECK_FALSE(st.l_asr.has_value());
  CHECK_FALSE(st.l_ctc.has_value());
  CHECK_FALSE(st.l_rec.has_value());
  CHECK(st.total == Approx(c.w_st * *st.l_st).margin(1e-6));

  LossReport mtl = loss_total(c, p, batch, Mode::kMtl);
  REQUIRE((mtl.l_st && mtl.l_asr && mtl.l_ctc));
  CHECK_FALSE(mtl.l_rec.has_value());
  CHECK(mtl.total == Approx(c.w_st * *mtl.l_st + c.w_asr * *mtl.l_asr +
                            c.w_ctc * *mtl.l_ctc)
                         .margin(1e-6));

  LossReport mam = loss_total(c, p, batch, Mode::kMam);
  REQUIRE((mam.l_st && mam.l_rec));
  CHECK(mam.total ==
        Approx(c.w_st * *mam.l_st + c.w_rec * *mam.l_rec).margin(1e-6));

  LossReport all = loss_total(c, p, batch, Mode::kMamMtl);
  REQUIRE((all.l_st && all.l_asr && all.l_ctc && all.l_rec));
  CHECK(all.total == Approx(c.w_st * *all.l_st + c.w_asr * *all.l_asr +
                            c.w_ctc * *all.l_ctc + c.w_rec * *all.l_rec)
                         .margin(1e-6));

  // Custom weights shift the total exactly as the weighted-sum contract says.
  ModelConfig cw = c;
  cw.w_st = 2.0;
  cw.w_asr = 0.5;
  cw.w_ctc = 0.25;
  cw.w_rec = 3.0;
  LossReport weighted = loss_total(cw, p, batch, Mode::kMamMtl);
  CHECK(weighted.total ==
        Approx(2.0 * *weighted.l_st + 0.5 * *weighted.l_asr +
               0.25 * *weighted.l_ctc + 3.0 * *weighted.l_rec)
            .margin(1e-6));

  // Component values are unweighted, so they match across weight choices.
  CHECK(*weighted.l_st == Approx(*all.l_st).margin(1e-6));

  // Every loss is non-negative and finite.
  for (const auto& r : {st, mtl, mam, all}) {
    CHECK(std::isfinite(r.total));
    for (auto v : {r.l_st, r.l_asr, r.l_ctc, r.l_rec})
      if (v) CHECK(*v >= 0.0);
  }

  // A mode whose annotations are missing names the absent field.
  Batch no_z = Batch::from_utterances({s1}, {y1}, {std::nullopt}, {});
  CHECK_THROWS_WITH(loss_total(c, p, no_z, Mode::kMtl),
                    Catch::Matchers::ContainsSubstring("z_star"));
}

TEST_CASE("loss_total: pretrain touches only encoder and recon head") {
  ModelConfig c = toy_config();
  c.with_st = c.with_asr = c.with_ctc = false;
  c.vocab_st = c.vocab_asr = 0;
  Params p = init_params(c, 17);
  for (const auto& [name, t] : p.tensors) {
    CHECK(name.rfind("dec.", 0) != 0);
    CHECK(name.rfind("ctc.", 0) != 0);
  }
  Spectrogram s = random_spec(8, c.d_x, 41);
  Batch batch = one_utt_batch(s, std::nullopt, std::nullopt,
                              mask_frame(8, 0.3, 3));
  LossReport r = loss_total(c, p, batch, Mode::kPretrain);
  REQUIRE(r.l_rec.has_value());
  CHECK_FALSE(r.l_st.has_value());
  CHECK(r.total == Approx(c.w_rec * *r.l_rec).margin(1e-6));
}

TEST_CASE("parameter isolation: st-mode gradients of unused heads are zero") {
  ModelConfig c = toy_config();
  Params p = init_params(c, 19);
  Spectrogram s = random_spec(9, c.d_x, 51);
  Batch batch = one_utt_batch(s, std::vector<int>{3, Vocab::kEos},
                              std::nullopt);
  Graph<float> g;
  detail::Dropout<float> no_drop;
  detail::build_loss_graph(g, c, batch, Mode::kSt, no_drop, p.epsilon());
  std::set<std::string> wrt;
  for (const auto& [name, t] : p.tensors) wrt.insert(name);
  auto grads = gradients(g, p.tensors, wrt, "total");
  bool st_nonzero = false;
  for (const auto& [name, grad] : grads) {
    bool isolated = name.rfind("dec.asr.", 0) == 0 ||
                    name.rfind("ctc.", 0) == 0 || name.rfind("rec.", 0) == 0 ||
                    name == "eps";
    for (float v : grad.data) {
      if (isolated) CHECK(v == 0.0f);
      if (name.rfind("dec.st.", 0) == 0 && v != 0.0f) st_nonzero = true;
    }
  }
  CHECK(st_nonzero);
}

TEST_CASE("MAM feeds the ST loss through the masked pathway") {
  ModelConfig c = toy_config();
  Params p = init_params(c, 23);
  // Amplify the input path so corrupting frames visibly moves the loss;
  // at 0.02-scale init the encoder output is dominated by the positions.
  for (auto& [name, t] : p.tensors)
    if (name.rfind("enc.conv", 0) == 0 || name == "enc.proj.w")
      for (auto& v : t.data) v *= 30.0f;
  Spectrogram s = random_spec(10, c.d_x, 61);
  auto y = std::vector<int>{4, 5, Vocab::kEos};
  MaskPlan plan = mask_frame(10, 0.5, 9);
  Batch masked_batch = one_utt_batch(s, y, std::nullopt, plan);
  Batch clean_batch = one_utt_batch(s, y, std::nullopt);

  double clean_st = loss_st(c, p, clean_batch);
  LossReport mam = loss_total(c, p, masked_batch, Mode::kMam);
  CHECK(*mam.l_st != Approx(clean_st).margin(1e-9));

  ModelConfig c_clean = c;
  c_clean.st_on_clean = true;
  LossReport mam_clean = loss_total(c_clean, p, masked_batch, Mode::kMam);
  CHECK(*mam_clean.l_st == Approx(clean_st).margin(1e-6));
}

TEST_CASE("masked-only reconstruction option") {
  ModelConfig c = toy_config();
  c.rec_masked_only = true;
  Params p = zeroed(c);
  p.tensors.at("rec.tconv1.b").data[0] = 1.0f;
  // x == 0, recon == 1 everywhere: the masked-cell mean is also 1, just over
  // a different denominator than the full-signal default.
  Spectrogram zero_spec;
  zero_spec.frames = TensorF({8, c.d_x});
  MaskPlan plan = mask_frame(8, 0.25, 3);  // 2 of 8 frames
  Batch batch = one_utt_batch(zero_spec, std::nullopt, std::nullopt, plan);
  CHECK(loss_rec(c, p, batch) == Approx(1.0));
  ModelConfig full = c;
  full.rec_masked_only = false;
  CHECK(loss_rec(full, p, batch) == Approx(1.0));
}

TEST_CASE("full-model gradient check on a 2-utterance toy batch") {
  ModelConfig c;
  c.d_model = 32;
  c.n_heads = 2;
  c.ffn_dim = 64;
  c.enc_layers = 2;
  c.dec_layers = 2;
  c.d_x = 20;
  auto report = pipeline::run_gradcheck(c, Mode::kMamMtl, 1e-4, 1, 6);
  INFO(report.to_string());
  CHECK(report.pass);
}
