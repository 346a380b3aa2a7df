#include <catch_amalgamated.hpp>

#include <algorithm>
#include <fstream>

#include "helpers.hpp"
#include "mam/toydata.hpp"
#include "mam/vocab.hpp"

using namespace mam;
using Catch::Approx;

TEST_CASE("symbol_template: deterministic, centered, bounded") {
  ToySpec toy;
  TensorF a = symbol_template(3, toy);
  TensorF b = symbol_template(3, toy);
  CHECK(a.data == b.data);

  // Distinct symbols peak at distinct bins when K <= d_x.
  std::vector<int> argmaxes;
  for (int s = 0; s < toy.src_vocab; ++s) {
    TensorF t = symbol_template(s, toy);
    int arg = 0;
    for (int bcol = 1; bcol < toy.d_x; ++bcol)
      if (t.at(0, bcol) > t.at(0, arg)) arg = bcol;
    argmaxes.push_back(arg);
  }
  std::sort(argmaxes.begin(), argmaxes.end());
  CHECK(std::adjacent_find(argmaxes.begin(), argmaxes.end()) ==
        argmaxes.end());

  // Symbol 0 peaks at bin 0 in every row.
  TensorF zero = symbol_template(0, toy);
  for (int r = 0; r < toy.frames_per_symbol; ++r) {
    int arg = 0;
    for (int bcol = 1; bcol < toy.d_x; ++bcol)
      if (zero.at(r, bcol) > zero.at(r, arg)) arg = bcol;
    CHECK(arg == 0);
  }

  CHECK_THROWS_AS(symbol_template(-1, toy), ConfigError);
  CHECK_THROWS_AS(symbol_template(toy.src_vocab, toy), ConfigError);
}

TEST_CASE("toy_translate: relabel plus adjacent swap") {
  // Identity bijection (shift 0): only the swap remains.
  CHECK(toy_translate({2, 7}, 12, 0) == std::vector<int>{7, 2});
  CHECK(toy_translate({1, 2, 3, 4, 5}, 12, 0) ==
        std::vector<int>{2, 1, 4, 3, 5});
  // Shift by K/2 relabels, then swaps.
  CHECK(toy_translate({2, 7}, 12, 6) == std::vector<int>{1, 8});
}

TEST_CASE("gen_utterance: deterministic and shape-consistent") {
  ToySpec toy;
  toy.seed = 99;
  ToyUtterance a = gen_utterance(toy, "train", 4);
  ToyUtterance b = gen_utterance(toy, "train", 4);
  CHECK(a.spec.frames.data == b.spec.frames.data);
  CHECK(a.transcript == b.transcript);
  CHECK(a.translation == b.translation);

  // Frame count == symbols * frames_per_symbol; lengths in range.
  for (int i = 0; i < 20; ++i) {
    ToyUtterance u = gen_utterance(toy, "train", i);
    int len = static_cast<int>(u.transcript.size());
    CHECK(len >= toy.min_len);
    CHECK(len <= toy.max_len);
    CHECK(u.spec.n() == len * toy.frames_per_symbol);
    // Translation is a permutation-plus-relabel of the transcript.
    REQUIRE(u.translation.size() == u.transcript.size());
    std::vector<int> relabeled;
    for (int s : u.transcript)
      relabeled.push_back((s + toy.src_vocab / 2) % toy.src_vocab);
    std::sort(relabeled.begin(), relabeled.end());
    std::vector<int> translated = u.translation;
    std::sort(translated.begin(), translated.end());
    CHECK(relabeled == translated);
  }
}

TEST_CASE("gen_utterance: splits draw from disjoint streams") {
  ToySpec toy;
  toy.seed = 5;
  bool any_difference = false;
  for (int i = 0; i < 10; ++i) {
    ToyUtterance train = gen_utterance(toy, "train", i);
    ToyUtterance dev = gen_utterance(toy, "dev", i);
    ToyUtterance test = gen_utterance(toy, "test", i);
    if (train.transcript != dev.transcript ||
        dev.transcript != test.transcript)
      any_difference = true;
  }
  CHECK(any_difference);
}

TEST_CASE("gen_corpus: byte-identical reruns, readable manifests") {
  ToySpec toy;
  toy.seed = 11;
  toy.n_train = 6;
  toy.n_dev = 3;
  toy.n_test = 2;
  auto dir1 = testutil::temp_dir("toy1");
  auto dir2 = testutil::temp_dir("toy2");
  gen_corpus(toy, dir1.string());
  gen_corpus(toy, dir2.string());

  for (const std::string split : {"train", "dev", "test"}) {
    auto read_all = [](const std::filesystem::path& p) {
      std::ifstream f(p, std::ios::binary);
      return std::string(std::istreambuf_iterator<char>(f), {});
    };
    CHECK(read_all(dir1 / (split + ".jsonl")) ==
          read_all(dir2 / (split + ".jsonl")));
  }

  auto entries = read_manifest((dir1 / "train.jsonl").string());
  REQUIRE(entries.size() == 6);
  for (const auto& e : entries) {
    Spectrogram s =
        read_spec(resolve_path((dir1 / "train.jsonl").string(), e.feat));
    CHECK(s.bins() == toy.d_x);
    CHECK(s.n() == static_cast<int>(split_ws(e.transcript).size()) *
                       toy.frames_per_symbol);
    // Byte-identical feature files across the two runs.
    auto read_all = [](const std::string& p) {
      std::ifstream f(p, std::ios::binary);
      return std::string(std::istreambuf_iterator<char>(f), {});
    };
    CHECK(read_all(resolve_path((dir1 / "train.jsonl").string(), e.feat)) ==
          read_all(resolve_path((dir2 / "train.jsonl").string(), e.feat)));
  }
}
