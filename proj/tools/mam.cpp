// Command-line surface for the MAM speech translation pipeline.
//
// Exit codes: 0 success, 1 internal/numeric error, 2 user or config error.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mam/pipeline.hpp"

namespace {

int run(CLI::App& app, int argc, char** argv) {
  using namespace mam;

  // features
  auto* features = app.add_subcommand(
      "features", "Extract log-mel features for a manifest");
  std::string feat_manifest, feat_out;
  int bins = 80, win_ms = 25, hop_ms = 10;
  bool no_cmvn = false;
  features->add_option("--manifest", feat_manifest)->required();
  features->add_option("--out-dir", feat_out)->required();
  features->add_option("--bins", bins);
  features->add_option("--win-ms", win_ms);
  features->add_option("--hop-ms", hop_ms);
  features->add_flag("--no-cmvn", no_cmvn, "Skip per-utterance CMVN");

  // pretrain / train / finetune
  std::string cfg_pretrain, cfg_train, cfg_finetune;
  auto* pretrain = app.add_subcommand(
      "pretrain", "Encoder-only reconstruction pre-training");
  pretrain->add_option("config", cfg_pretrain, "JSON config file")->required();
  auto* train_cmd =
      app.add_subcommand("train", "Train in any mode (st|mtl|mam|mam_mtl)");
  train_cmd->add_option("config", cfg_train, "JSON config file")->required();
  auto* finetune = app.add_subcommand(
      "finetune", "Train starting from a pre-trained checkpoint");
  finetune->add_option("config", cfg_finetune, "JSON config file")->required();

  // translate
  auto* translate = app.add_subcommand("translate", "Beam-decode a manifest");
  std::vector<std::string> tr_ckpts;
  std::string tr_manifest, tr_out;
  int tr_beam = 5, tr_avg = 5, tr_max_len = 0;
  double tr_alpha = 0.6;
  translate->add_option("checkpoints", tr_ckpts)->required();
  translate->add_option("--manifest", tr_manifest)->required();
  translate->add_option("--out", tr_out)->required();
  translate->add_option("--beam", tr_beam);
  translate->add_option("--length-penalty", tr_alpha);
  translate->add_option("--average-last", tr_avg);
  translate->add_option("--max-len", tr_max_len);

  // render
  auto* render = app.add_subcommand(
      "render", "Write a spectrogram or attention view as a PGM image");
  pipeline::RenderArgs render_args;
  render_args.seed = pipeline::default_seed();
  render->add_option("--feat", render_args.feat)->required();
  render->add_option("--checkpoint", render_args.checkpoint);
  render
      ->add_option("--what", render_args.what,
                   "original|masked|reconstructed|attention")
      ->required();
  render->add_option("--lambda", render_args.lambda);
  render->add_option("--strategy", render_args.strategy, "frame|span");
  render->add_option("--seed", render_args.seed);
  render->add_option("--layer", render_args.layer);
  render->add_option("--head", render_args.head);
  render->add_option("--out", render_args.out)->required();

  // eval
  auto* eval = app.add_subcommand("eval", "Score a checkpoint on a manifest");
  std::string ev_ckpt, ev_manifest, ev_metric = "bleu", ev_hyp;
  int ev_beam = 5, ev_max_len = 0;
  double ev_alpha = 0.6;
  eval->add_option("--checkpoint", ev_ckpt);
  eval->add_option("--manifest", ev_manifest)->required();
  eval->add_option("--metric", ev_metric, "bleu|token-accuracy");
  eval->add_option("--beam", ev_beam);
  eval->add_option("--length-penalty", ev_alpha);
  eval->add_option("--max-len", ev_max_len);
  eval->add_option("--hyp-file", ev_hyp,
                   "Score these hypothesis lines instead of decoding");

  // gradcheck
  auto* gradcheck = app.add_subcommand(
      "gradcheck", "Finite-difference check of the loss gradients");
  std::string gc_config;
  double gc_tol = 1e-4;
  uint64_t gc_seed = 1;
  int gc_probes = 8;
  gradcheck->add_option("--config", gc_config, "Model JSON (default: toy)");
  gradcheck->add_option("--tolerance", gc_tol);
  gradcheck->add_option("--seed", gc_seed);
  gradcheck->add_option("--probes", gc_probes, "Probed components per tensor");

  // gen-toy
  auto* gen_toy =
      app.add_subcommand("gen-toy", "Generate the synthetic triplet corpus");
  ToySpec toy;
  toy.seed = pipeline::default_seed();
  std::string toy_out;
  gen_toy->add_option("--out", toy_out)->required();
  gen_toy->add_option("--seed", toy.seed);
  gen_toy->add_option("--vocab", toy.src_vocab);
  gen_toy->add_option("--frames-per-symbol", toy.frames_per_symbol);
  gen_toy->add_option("--bins", toy.d_x);
  gen_toy->add_option("--noise", toy.noise_sigma);
  gen_toy->add_option("--min-len", toy.min_len);
  gen_toy->add_option("--max-len", toy.max_len);
  gen_toy->add_option("--train", toy.n_train);
  gen_toy->add_option("--dev", toy.n_dev);
  gen_toy->add_option("--test", toy.n_test);

  // average
  auto* average =
      app.add_subcommand("average", "Elementwise-average checkpoints");
  std::vector<std::string> avg_in;
  std::string avg_out;
  average->add_option("checkpoints", avg_in)->required();
  average->add_option("--out", avg_out)->required();

  app.require_subcommand(1);
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  if (features->parsed()) {
    auto result = pipeline::run_features(feat_manifest, feat_out, bins, win_ms,
                                         hop_ms, !no_cmvn);
    std::cout << "extracted " << result.processed << " utterances\n";
    return result.failed_ids.empty() ? 0 : 2;
  }
  if (pretrain->parsed()) {
    pipeline::run_train(cfg_pretrain, "pretrain", &std::cerr);
    return 0;
  }
  if (train_cmd->parsed()) {
    pipeline::run_train(cfg_train, "train", &std::cerr);
    return 0;
  }
  if (finetune->parsed()) {
    pipeline::run_train(cfg_finetune, "finetune", &std::cerr);
    return 0;
  }
  if (translate->parsed()) {
    pipeline::run_translate(tr_ckpts, tr_manifest, tr_beam, tr_alpha, tr_avg,
                            tr_max_len, tr_out);
    return 0;
  }
  if (render->parsed()) {
    pipeline::run_render(render_args);
    return 0;
  }
  if (eval->parsed()) {
    if (ev_ckpt.empty() && ev_hyp.empty())
      throw ConfigError("eval needs --checkpoint or --hyp-file");
    double value = pipeline::run_eval(ev_ckpt, ev_manifest, ev_metric, ev_beam,
                                      ev_alpha, ev_max_len, ev_hyp);
    std::printf("%.4f\n", value);
    return 0;
  }
  if (gradcheck->parsed()) {
    ModelConfig cfg;
    if (!gc_config.empty()) {
      std::ifstream f(gc_config);
      if (!f) throw ConfigError("cannot open config: " + gc_config);
      nlohmann::json j = nlohmann::json::parse(f);
      cfg = (j.contains("model") ? j["model"] : j).get<ModelConfig>();
    } else {
      cfg.d_model = 32;
      cfg.n_heads = 2;
      cfg.ffn_dim = 64;
      cfg.enc_layers = 2;
      cfg.dec_layers = 2;
      cfg.d_x = 20;
    }
    bool all_pass = true;
    double worst = 0.0;
    for (Mode mode : {Mode::kSt, Mode::kMtl, Mode::kMam, Mode::kMamMtl,
                      Mode::kPretrain}) {
      auto report = pipeline::run_gradcheck(cfg, mode, gc_tol, gc_seed,
                                            gc_probes);
      std::printf("%-8s %-4s max_rel_err=%.3e\n", to_string(mode).c_str(),
                  report.pass ? "PASS" : "FAIL", report.max_rel_err);
      all_pass = all_pass && report.pass;
      worst = std::max(worst, report.max_rel_err);
    }
    std::printf("%s max_rel_err=%.3e tolerance=%.1e\n",
                all_pass ? "PASS" : "FAIL", worst, gc_tol);
    return all_pass ? 0 : 1;
  }
  if (gen_toy->parsed()) {
    gen_corpus(toy, toy_out);
    std::cout << "wrote " << (toy.n_train + toy.n_dev + toy.n_test)
              << " utterances to " << toy_out << "\n";
    return 0;
  }
  if (average->parsed()) {
    pipeline::run_average(avg_in, avg_out);
    return 0;
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked acoustic modeling for end-to-end speech translation"};
  try {
    return run(app, argc, argv);
  } catch (const mam::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const mam::DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
}
