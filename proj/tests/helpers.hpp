#pragma once

// Shared test oracles. Everything here is independent of the library's
// implementation path: plain loops and enumerations only.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "mam/rng.hpp"
#include "mam/tensor.hpp"

namespace testutil {

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("mam_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

template <typename S>
mam::TensorT<S> random_tensor(std::vector<int> dims, mam::SplitMix64& rng,
                              double scale = 1.0) {
  mam::TensorT<S> t(std::move(dims));
  for (auto& v : t.data) v = static_cast<S>(rng.normal() * scale);
  return t;
}

// Direct nested-loop 2-D convolution with SAME padding (pad_begin =
// floor(pad_total/2)) and the given stride; the reference for conv2d.
template <typename S>
mam::TensorT<S> conv2d_oracle(const mam::TensorT<S>& x,
                              const mam::TensorT<S>& k,
                              const mam::TensorT<S>& b, int stride) {
  int cin = x.dims[0], h = x.dims[1], w = x.dims[2];
  int cout = k.dims[0], kh = k.dims[2], kw = k.dims[3];
  int oh = (h + stride - 1) / stride;
  int ow = (w + stride - 1) / stride;
  int pb_h = std::max((oh - 1) * stride + kh - h, 0) / 2;
  int pb_w = std::max((ow - 1) * stride + kw - w, 0) / 2;
  mam::TensorT<S> out({cout, oh, ow});
  for (int co = 0; co < cout; ++co)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        double acc = b.data[static_cast<size_t>(co)];
        for (int ci = 0; ci < cin; ++ci)
          for (int dh = 0; dh < kh; ++dh)
            for (int dw = 0; dw < kw; ++dw) {
              int xi = i * stride + dh - pb_h;
              int xj = j * stride + dw - pb_w;
              if (xi < 0 || xi >= h || xj < 0 || xj >= w) continue;
              acc += static_cast<double>(
                         k.data[((static_cast<size_t>(co) * cin + ci) * kh +
                                 dh) *
                                    kw +
                                dw]) *
                     x.at3(ci, xi, xj);
            }
        out.at3(co, i, j) = static_cast<S>(acc);
      }
  return out;
}

// Brute-force CTC: enumerate every length-T path over the V-symbol alphabet
// (blank = V-1), keep the ones that collapse to `target`, and sum their
// probabilities. log_probs is [T, V].
inline double ctc_bruteforce(const mam::TensorT<double>& log_probs,
                             const std::vector<int>& target) {
  int t_len = log_probs.dims[0];
  int vocab = log_probs.dims[1];
  int blank = vocab - 1;
  double total = 0.0;
  std::vector<int> path(static_cast<size_t>(t_len), 0);
  auto collapse = [&]() {
    std::vector<int> out;
    int prev = -1;
    for (int s : path) {
      if (s != blank && s != prev) out.push_back(s);
      prev = s;
    }
    return out;
  };
  for (;;) {
    if (collapse() == target) {
      double lp = 0.0;
      for (int t = 0; t < t_len; ++t)
        lp += log_probs.at(t, path[static_cast<size_t>(t)]);
      total += std::exp(lp);
    }
    int pos = t_len - 1;
    while (pos >= 0 && path[static_cast<size_t>(pos)] == vocab - 1) {
      path[static_cast<size_t>(pos)] = 0;
      --pos;
    }
    if (pos < 0) break;
    ++path[static_cast<size_t>(pos)];
  }
  return -std::log(total);
}

}  // namespace testutil
