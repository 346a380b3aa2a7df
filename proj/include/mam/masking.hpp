#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mam/errors.hpp"
#include "mam/features.hpp"
#include "mam/rng.hpp"

namespace mam {

// The shared corruption vector: one instance per model, written over every
// masked frame. Drawn once at init, never trained.
struct Epsilon {
  std::vector<float> vector;
};

// Realized corruption: which frames get replaced. Spans are disjoint
// [start, len) intervals sorted by start; the frame strategy stores
// width-1 spans.
struct MaskPlan {
  enum class Strategy { kFrame, kSpan };
  Strategy strategy = Strategy::kFrame;
  double lambda = 0.0;
  uint64_t seed = 0;
  std::vector<std::pair<int, int>> spans;

  int total_masked() const {
    int t = 0;
    for (auto& [s, w] : spans) t += w;
    return t;
  }
  std::vector<int> masked_frames() const {
    std::vector<int> out;
    for (auto& [s, w] : spans)
      for (int i = 0; i < w; ++i) out.push_back(s + i);
    return out;
  }
  bool empty() const { return spans.empty(); }
};

namespace detail {

inline int mask_count(double lambda, int n) {
  return static_cast<int>(std::lround(lambda * n));
}

inline void check_lambda(double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0))
    throw ConfigError("lambda must be in [0,1], got " + std::to_string(lambda));
}

}  // namespace detail

// Single-frame masking: exactly round(lambda*n) distinct frames, chosen by a
// partial Fisher-Yates shuffle driven by the splitmix64 stream.
inline MaskPlan mask_frame(int n, double lambda, uint64_t seed) {
  detail::check_lambda(lambda);
  if (n < 1) throw ConfigError("mask_frame: n must be >= 1");
  MaskPlan plan;
  plan.strategy = MaskPlan::Strategy::kFrame;
  plan.lambda = lambda;
  plan.seed = seed;
  int k = detail::mask_count(lambda, n);
  if (k == 0) return plan;
  SplitMix64 rng(seed);
  std::vector<int> idx(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  for (int i = 0; i < k; ++i) {
    int j = i + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n - i)));
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  std::vector<int> chosen(idx.begin(), idx.begin() + k);
  std::sort(chosen.begin(), chosen.end());
  for (int i : chosen) plan.spans.emplace_back(i, 1);
  return plan;
}

inline MaskPlan mask_frame(const Spectrogram& spec, double lambda,
                           uint64_t seed) {
  return mask_frame(spec.n(), lambda, seed);
}

// Span masking: per draw, sample a geometric width (mean width_mean, clamped
// to [1,10]) and place it uniformly among the starts that keep spans
// disjoint; when the drawn width has no legal start the width shrinks until
// one fits. Placement stops once the total reaches round(lambda*n) or the
// signal is fully masked.
inline MaskPlan mask_span(int n, double lambda, uint64_t seed,
                          double width_mean = 3.0) {
  detail::check_lambda(lambda);
  if (n < 1) throw ConfigError("mask_span: n must be >= 1");
  if (width_mean < 1.0) throw ConfigError("mask_span: width_mean must be >= 1");
  MaskPlan plan;
  plan.strategy = MaskPlan::Strategy::kSpan;
  plan.lambda = lambda;
  plan.seed = seed;
  int target = detail::mask_count(lambda, n);
  if (target == 0) return plan;

  SplitMix64 rng(seed);
  std::vector<char> masked(static_cast<size_t>(n), 0);
  int total = 0;
  while (total < target) {
    int w0 = std::clamp(rng.geometric(width_mean), 1, 10);
    w0 = std::min(w0, n);
    bool placed = false;
    for (int w = w0; w >= 1 && !placed; --w) {
      std::vector<int> starts;
      for (int s = 0; s + w <= n; ++s) {
        bool free = true;
        for (int i = s; i < s + w; ++i)
          if (masked[static_cast<size_t>(i)]) {
            free = false;
            break;
          }
        if (free) starts.push_back(s);
      }
      if (starts.empty()) continue;
      int s = starts[static_cast<size_t>(
          rng.uniform_int(static_cast<uint64_t>(starts.size())))];
      for (int i = s; i < s + w; ++i) masked[static_cast<size_t>(i)] = 1;
      plan.spans.emplace_back(s, w);
      total += w;
      placed = true;
    }
    if (!placed) break;  // fully masked
  }
  std::sort(plan.spans.begin(), plan.spans.end());
  return plan;
}

inline MaskPlan mask_span(const Spectrogram& spec, double lambda,
                          uint64_t seed, double width_mean = 3.0) {
  return mask_span(spec.n(), lambda, seed, width_mean);
}

// Corruption step: masked frames become the shared epsilon row, everything
// else is copied bit-exactly.
inline Spectrogram apply_plan(const Spectrogram& spec, const MaskPlan& plan,
                              const Epsilon& eps) {
  if (static_cast<int>(eps.vector.size()) != spec.bins())
    throw ShapeError("apply_plan: epsilon has " +
                     std::to_string(eps.vector.size()) + " dims, expected " +
                     std::to_string(spec.bins()));
  Spectrogram out = spec;
  for (auto& [start, width] : plan.spans) {
    if (start < 0 || start + width > spec.n())
      throw ShapeError("apply_plan: span [" + std::to_string(start) + "," +
                       std::to_string(start + width) + ") out of range for " +
                       std::to_string(spec.n()) + " frames");
    for (int r = start; r < start + width; ++r)
      for (int c = 0; c < spec.bins(); ++c)
        out.frames.at(r, c) = eps.vector[static_cast<size_t>(c)];
  }
  return out;
}

}  // namespace mam
