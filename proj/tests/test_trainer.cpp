#include <catch_amalgamated.hpp>

#include <fstream>

#include "helpers.hpp"
#include "mam/toydata.hpp"
#include "mam/trainer.hpp"

using namespace mam;
using Catch::Approx;

namespace {

std::string read_all(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.ffn_dim = 32;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.d_x = 20;
  c.dropout = 0.0;
  c.lambda = 0.3;
  return c;
}

// A small on-disk toy corpus shared by the trainer tests.
struct Corpus {
  std::filesystem::path dir;
  std::string manifest;
  std::vector<ManifestEntry> entries;
};

Corpus make_corpus(const std::string& name, int n_train = 12) {
  ToySpec toy;
  toy.seed = 3;
  toy.n_train = n_train;
  toy.n_dev = 2;
  toy.n_test = 2;
  toy.max_len = 5;
  Corpus c;
  c.dir = testutil::temp_dir(name);
  gen_corpus(toy, c.dir.string());
  c.manifest = (c.dir / "train.jsonl").string();
  c.entries = read_manifest(c.manifest);
  return c;
}

}  // namespace

TEST_CASE("filter_long: strict threshold") {
  std::vector<ManifestEntry> entries(3);
  entries[0].id = "a";
  entries[0].frames = 2999;
  entries[1].id = "b";
  entries[1].frames = 3000;
  entries[2].id = "c";
  entries[2].frames = 3001;
  int dropped = 0;
  auto kept = filter_long(entries, 3000, &dropped);
  REQUIRE(kept.size() == 2);
  CHECK(dropped == 1);
  CHECK(kept[1].id == "b");  // n == max_frames is kept

  auto kept10 = filter_long({entries[0]}, 10, &dropped);
  CHECK(kept10.empty());
  entries[0].frames = 10;
  CHECK(filter_long({entries[0]}, 10, &dropped).size() == 1);
}

TEST_CASE("lr_schedule: ramp, peak, and inverse-sqrt decay") {
  CHECK(lr_schedule(100, 2.0, 100) == Approx(2.0));
  CHECK(lr_schedule(50, 2.0, 100) == Approx(1.0));
  CHECK(lr_schedule(400, 2.0, 100) == Approx(1.0));
  CHECK_THROWS_AS(lr_schedule(0, 2.0, 100), ConfigError);
}

TEST_CASE("train: identical seeds give byte-identical checkpoints") {
  Corpus corpus = make_corpus("trainer_det");
  ModelConfig mc = tiny_model();
  mc.dropout = 0.1;  // exercise the dropout stream too
  TrainConfig tc;
  tc.mode = "mam";
  tc.steps = 8;
  tc.batch_size = 4;
  tc.lr_peak = 1e-3;
  tc.warmup_steps = 4;
  tc.checkpoint_every = 4;
  tc.keep_last = 2;
  tc.seed = 21;
  tc.train_manifest = corpus.manifest;

  tc.out_dir = (corpus.dir / "run1").string();
  auto r1 = train(tc, mc, corpus.entries, corpus.manifest);
  tc.out_dir = (corpus.dir / "run2").string();
  auto r2 = train(tc, mc, corpus.entries, corpus.manifest);
  REQUIRE(r1.checkpoints.size() == 2);
  REQUIRE(r2.checkpoints.size() == 2);
  CHECK(read_all(r1.checkpoints.back()) == read_all(r2.checkpoints.back()));
}

TEST_CASE("train: st mode runs without transcripts") {
  Corpus corpus = make_corpus("trainer_no_z");
  for (auto& e : corpus.entries) e.transcript.clear();
  ModelConfig mc = tiny_model();
  TrainConfig tc;
  tc.mode = "st";
  tc.steps = 3;
  tc.batch_size = 4;
  tc.warmup_steps = 2;
  tc.checkpoint_every = 3;
  tc.seed = 5;
  tc.train_manifest = corpus.manifest;
  tc.out_dir = (corpus.dir / "run").string();
  auto result = train(tc, mc, corpus.entries, corpus.manifest);
  CHECK(result.steps_run == 3);
  CHECK(std::isfinite(result.last_report.total));
}

TEST_CASE("train: st mode leaves unused heads bit-identical") {
  Corpus corpus = make_corpus("trainer_isolation");
  ModelConfig mc = tiny_model();
  TrainConfig tc;
  tc.mode = "st";
  tc.steps = 5;
  tc.batch_size = 4;
  tc.warmup_steps = 2;
  tc.checkpoint_every = 5;
  tc.seed = 9;
  tc.train_manifest = corpus.manifest;
  tc.out_dir = (corpus.dir / "run").string();
  auto result = train(tc, mc, corpus.entries, corpus.manifest);

  // Rebuild the same init to compare against the trained result.
  ModelConfig prepared = mc;
  prepare_model_config(prepared, Mode::kSt, corpus.entries);
  Params init = init_params(prepared, prepared.seed);
  ModelConfig ck_cfg;
  Params trained = load_checkpoint(result.checkpoints.back(), &ck_cfg);
  bool st_changed = false;
  for (const auto& [name, t] : trained.tensors) {
    const auto& t0 = init.tensors.at(name);
    bool same = std::memcmp(t.data.data(), t0.data.data(),
                            t.data.size() * 4) == 0;
    bool isolated = name.rfind("dec.asr.", 0) == 0 ||
                    name.rfind("ctc.", 0) == 0 ||
                    name.rfind("rec.", 0) == 0 || name == "eps";
    if (isolated) CHECK(same);
    if (name.rfind("dec.st.", 0) == 0 && !same) st_changed = true;
  }
  CHECK(st_changed);
}

TEST_CASE("train: pretrain creates no decoder tensors") {
  Corpus corpus = make_corpus("trainer_pretrain");
  ModelConfig mc = tiny_model();
  TrainConfig tc;
  tc.mode = "pretrain";
  tc.steps = 4;
  tc.batch_size = 4;
  tc.warmup_steps = 2;
  tc.checkpoint_every = 2;
  tc.keep_last = 5;
  tc.seed = 13;
  tc.train_manifest = corpus.manifest;
  tc.out_dir = (corpus.dir / "run").string();
  auto result = train(tc, mc, corpus.entries, corpus.manifest);
  ModelConfig ck_cfg;
  Params p = load_checkpoint(result.checkpoints.back(), &ck_cfg);
  CHECK_FALSE(ck_cfg.with_st);
  for (const auto& [name, t] : p.tensors) {
    CHECK(name.rfind("dec.", 0) != 0);
    CHECK(name.rfind("ctc.", 0) != 0);
  }
  CHECK(p.has("eps"));
  CHECK(p.has("rec.tconv0.w"));
}

TEST_CASE("train: loss log lists every step exactly once") {
  Corpus corpus = make_corpus("trainer_log");
  ModelConfig mc = tiny_model();
  TrainConfig tc;
  tc.mode = "mam_mtl";
  tc.steps = 6;
  tc.batch_size = 4;
  tc.warmup_steps = 2;
  tc.checkpoint_every = 6;
  tc.seed = 17;
  tc.train_manifest = corpus.manifest;
  tc.out_dir = (corpus.dir / "run").string();
  train(tc, mc, corpus.entries, corpus.manifest);

  std::ifstream log(std::filesystem::path(tc.out_dir) / "train_log.jsonl");
  REQUIRE(log);
  std::string line;
  int expected_step = 1;
  while (std::getline(log, line)) {
    auto j = nlohmann::json::parse(line);
    CHECK(j.at("step").get<int>() == expected_step);
    CHECK(j.contains("l_st"));
    CHECK(j.contains("l_asr"));
    CHECK(j.contains("l_ctc"));
    CHECK(j.contains("l_rec"));
    CHECK(j.contains("total"));
    CHECK(j.contains("lr"));
    CHECK(j.at("mode").get<std::string>() == "mam_mtl");
    ++expected_step;
  }
  CHECK(expected_step == 7);
}

TEST_CASE("train: masks differ across epochs for the same utterance") {
  // 4 utterances, batch 4: one batch per epoch, so 2 steps span 2 epochs.
  uint64_t seed = 31;
  uint64_t u = 2;
  auto plan_epoch0 = mask_frame(16, 0.3, derive_seed(seed, u, 0));
  auto plan_epoch1 = mask_frame(16, 0.3, derive_seed(seed, u, 1));
  CHECK(plan_epoch0.spans != plan_epoch1.spans);
}

TEST_CASE("fine_tune: load fidelity and shape mismatch") {
  Corpus corpus = make_corpus("trainer_ft");
  ModelConfig mc = tiny_model();

  TrainConfig tc;
  tc.mode = "mam";
  tc.steps = 4;
  tc.batch_size = 4;
  tc.warmup_steps = 2;
  tc.checkpoint_every = 4;
  tc.seed = 7;
  tc.train_manifest = corpus.manifest;
  tc.out_dir = (corpus.dir / "src_run").string();
  auto source = train(tc, mc, corpus.entries, corpus.manifest);
  std::string ckpt = source.checkpoints.back();

  // Loading the identical full model reproduces its loss exactly.
  ModelConfig ck_cfg;
  Params source_params = load_checkpoint(ckpt, &ck_cfg);
  Params reloaded = init_from_checkpoint(ck_cfg, ckpt);
  for (const auto& [name, t] : source_params.tensors) {
    const auto& r = reloaded.tensors.at(name);
    CHECK(std::memcmp(t.data.data(), r.data.data(), t.data.size() * 4) == 0);
  }

  // Mismatched width names the offending tensor.
  ModelConfig wide = ck_cfg;
  wide.d_model = 32;
  wide.ffn_dim = 64;
  try {
    init_from_checkpoint(wide, ckpt);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("tensor") != std::string::npos);
    CHECK(std::string(e.what()).find("shape") != std::string::npos);
  }

  // Fine-tuning from a pretrain checkpoint starts the decoders fresh.
  TrainConfig pre = tc;
  pre.mode = "pretrain";
  pre.out_dir = (corpus.dir / "pre_run").string();
  auto pre_result = train(pre, mc, corpus.entries, corpus.manifest);

  TrainConfig ft = tc;
  ft.mode = "mam";
  ft.init_from = pre_result.checkpoints.back();
  ft.out_dir = (corpus.dir / "ft_run").string();
  auto ft_result = fine_tune(ft, mc, corpus.entries, corpus.manifest);
  CHECK(ft_result.steps_run == ft.steps);

  CHECK_THROWS_AS(
      fine_tune(tc, mc, corpus.entries, corpus.manifest),  // no init_from
      ConfigError);
}

TEST_CASE("train: aborts with the step number on non-finite loss") {
  Corpus corpus = make_corpus("trainer_blowup");
  ModelConfig mc = tiny_model();
  TrainConfig tc;
  tc.mode = "st";
  tc.steps = 30;
  tc.batch_size = 4;
  tc.lr_peak = 1e18;  // guaranteed blow-up
  tc.warmup_steps = 1;
  tc.checkpoint_every = 30;
  tc.seed = 3;
  tc.train_manifest = corpus.manifest;
  tc.out_dir = (corpus.dir / "run").string();
  try {
    train(tc, mc, corpus.entries, corpus.manifest);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}
