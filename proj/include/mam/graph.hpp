#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "mam/errors.hpp"
#include "mam/rng.hpp"
#include "mam/tensor.hpp"

namespace mam {

// Reverse-mode computation graph over dense tensors.
//
// Nodes are appended in construction order, so ids are already a topological
// order and the graph is acyclic by construction. Leaves are named and bound
// at evaluation time; constants are embedded. Every op checks shapes when the
// node is built and checks for non-finite values when it is evaluated.
template <typename S>
class Graph {
 public:
  using Id = int32_t;

  enum class Op {
    kLeaf,
    kConst,
    kAdd,        // elementwise, same dims
    kAddRow,     // [n,d] + [d], broadcast over rows
    kMul,        // elementwise, same dims
    kScale,      // x * sattr
    kMatmul,     // [n,k] x [k,m]
    kTranspose,  // [n,m] -> [m,n]
    kRelu,
    kSoftmax,     // per row of a 2-D tensor
    kLogSoftmax,  // per row of a 2-D tensor
    kLayerNorm,   // x [n,d], gamma [d], beta [d]
    kConv2d,      // x [Cin,H,W], k [Cout,Cin,KH,KW], b [Cout]; SAME, stride
    kTConv2d,     // x [Cin,H,W], k [Cin,Cout,KH,KW], b [Cout]; out [Cout,sH,sW]
    kEmbed,       // table [V,d], ids in iattr -> [T,d]
    kSlice,       // 2-D, iattr = {r0,r1,c0,c1}
    kConcatRows,  // [n1,d] + [n2,d] -> [n1+n2,d]
    kReshape,
    kPermute102,  // [a,b,c] -> [b,a,c]
    kReduceSum,   // -> [1]
    kReduceMean,  // -> [1]
    kSSE,         // sum((a-b)^2) -> [1]
    kCtc,         // log-probs [T,V] (blank = V-1), targets in iattr -> [1]
  };

  struct Node {
    Op op;
    std::vector<Id> in;
    std::vector<int> dims;
    std::vector<int> iattr;
    double sattr = 0.0;
    std::string name;    // leaf name
    TensorT<S> value;    // constant payload
  };

  // --- builders ---------------------------------------------------------

  Id leaf(const std::string& name, std::vector<int> dims) {
    if (leaf_ids_.count(name))
      throw ShapeError("duplicate leaf name: " + name);
    Node n;
    n.op = Op::kLeaf;
    n.dims = std::move(dims);
    n.name = name;
    Id id = push(std::move(n));
    leaf_ids_[name] = id;
    return id;
  }

  Id constant(TensorT<S> value) {
    Node n;
    n.op = Op::kConst;
    n.dims = value.dims;
    n.value = std::move(value);
    return push(std::move(n));
  }

  Id add(Id a, Id b) {
    require_same(a, b, "add");
    return unary(Op::kAdd, {a, b}, dims(a));
  }

  Id add_row(Id m, Id v) {
    require_rank(m, 2, "add_row");
    require_rank(v, 1, "add_row");
    if (dims(m)[1] != dims(v)[0])
      throw ShapeError("add_row: " + dims_str(dims(m)) + " vs " +
                       dims_str(dims(v)));
    return unary(Op::kAddRow, {m, v}, dims(m));
  }

  Id mul(Id a, Id b) {
    require_same(a, b, "mul");
    return unary(Op::kMul, {a, b}, dims(a));
  }

  Id scale(Id a, double s) {
    Node n;
    n.op = Op::kScale;
    n.in = {a};
    n.dims = dims(a);
    n.sattr = s;
    return push(std::move(n));
  }

  Id matmul(Id a, Id b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    if (dims(a)[1] != dims(b)[0])
      throw ShapeError("matmul: " + dims_str(dims(a)) + " x " +
                       dims_str(dims(b)));
    return unary(Op::kMatmul, {a, b}, {dims(a)[0], dims(b)[1]});
  }

  Id transpose(Id a) {
    require_rank(a, 2, "transpose");
    return unary(Op::kTranspose, {a}, {dims(a)[1], dims(a)[0]});
  }

  Id relu(Id a) { return unary(Op::kRelu, {a}, dims(a)); }

  Id softmax(Id a) {
    require_rank(a, 2, "softmax");
    return unary(Op::kSoftmax, {a}, dims(a));
  }

  Id log_softmax(Id a) {
    require_rank(a, 2, "log_softmax");
    return unary(Op::kLogSoftmax, {a}, dims(a));
  }

  Id layer_norm(Id x, Id gamma, Id beta) {
    require_rank(x, 2, "layer_norm");
    require_rank(gamma, 1, "layer_norm");
    require_rank(beta, 1, "layer_norm");
    if (dims(gamma)[0] != dims(x)[1] || dims(beta)[0] != dims(x)[1])
      throw ShapeError("layer_norm: gain/bias must match row width");
    return unary(Op::kLayerNorm, {x, gamma, beta}, dims(x));
  }

  // SAME padding: output is ceil(in/stride) per spatial axis, pad_begin is
  // floor(pad_total/2). Matches the nested-loop oracle in the tests.
  Id conv2d(Id x, Id k, Id b, int stride) {
    require_rank(x, 3, "conv2d");
    require_rank(k, 4, "conv2d");
    require_rank(b, 1, "conv2d");
    auto xd = dims(x), kd = dims(k);
    if (kd[1] != xd[0])
      throw ShapeError("conv2d: kernel in-channels " + dims_str(kd) +
                       " vs input " + dims_str(xd));
    if (dims(b)[0] != kd[0]) throw ShapeError("conv2d: bias size");
    int oh = (xd[1] + stride - 1) / stride;
    int ow = (xd[2] + stride - 1) / stride;
    Node n;
    n.op = Op::kConv2d;
    n.in = {x, k, b};
    n.dims = {kd[0], oh, ow};
    n.iattr = {stride};
    return push(std::move(n));
  }

  // Adjoint of conv2d with SAME padding; output is exactly stride*H by
  // stride*W, to be center-cropped by the caller.
  Id tconv2d(Id x, Id k, Id b, int stride) {
    require_rank(x, 3, "tconv2d");
    require_rank(k, 4, "tconv2d");
    require_rank(b, 1, "tconv2d");
    auto xd = dims(x), kd = dims(k);
    if (kd[0] != xd[0])
      throw ShapeError("tconv2d: kernel in-channels " + dims_str(kd) +
                       " vs input " + dims_str(xd));
    if (dims(b)[0] != kd[1]) throw ShapeError("tconv2d: bias size");
    Node n;
    n.op = Op::kTConv2d;
    n.in = {x, k, b};
    n.dims = {kd[1], stride * xd[1], stride * xd[2]};
    n.iattr = {stride};
    return push(std::move(n));
  }

  Id embed(Id table, const std::vector<int>& ids) {
    require_rank(table, 2, "embed");
    if (ids.empty()) throw ShapeError("embed: empty id sequence");
    for (int id : ids)
      if (id < 0 || id >= dims(table)[0])
        throw ShapeError("embed: token id " + std::to_string(id) +
                         " out of range for table " + dims_str(dims(table)));
    Node n;
    n.op = Op::kEmbed;
    n.in = {table};
    n.dims = {static_cast<int>(ids.size()), dims(table)[1]};
    n.iattr = ids;
    return push(std::move(n));
  }

  Id slice(Id x, int r0, int r1, int c0, int c1) {
    require_rank(x, 2, "slice");
    auto xd = dims(x);
    if (!(0 <= r0 && r0 < r1 && r1 <= xd[0] && 0 <= c0 && c0 < c1 &&
          c1 <= xd[1]))
      throw ShapeError("slice: bounds out of range for " + dims_str(xd));
    Node n;
    n.op = Op::kSlice;
    n.in = {x};
    n.dims = {r1 - r0, c1 - c0};
    n.iattr = {r0, r1, c0, c1};
    return push(std::move(n));
  }

  Id concat_rows(Id a, Id b) {
    require_rank(a, 2, "concat_rows");
    require_rank(b, 2, "concat_rows");
    if (dims(a)[1] != dims(b)[1])
      throw ShapeError("concat_rows: column mismatch");
    return unary(Op::kConcatRows, {a, b}, {dims(a)[0] + dims(b)[0], dims(a)[1]});
  }

  Id reshape(Id x, std::vector<int> new_dims) {
    if (TensorT<S>::numel_of(new_dims) != TensorT<S>::numel_of(dims(x)))
      throw ShapeError("reshape: element count mismatch " +
                       dims_str(dims(x)) + " -> " + dims_str(new_dims));
    Node n;
    n.op = Op::kReshape;
    n.in = {x};
    n.dims = std::move(new_dims);
    return push(std::move(n));
  }

  Id permute102(Id x) {
    require_rank(x, 3, "permute102");
    auto xd = dims(x);
    return unary(Op::kPermute102, {x}, {xd[1], xd[0], xd[2]});
  }

  Id reduce_sum(Id x) { return unary(Op::kReduceSum, {x}, {1}); }
  Id reduce_mean(Id x) { return unary(Op::kReduceMean, {x}, {1}); }

  Id sse(Id a, Id b) {
    require_same(a, b, "sse");
    return unary(Op::kSSE, {a, b}, {1});
  }

  // targets must exclude the blank label (the last column of log_probs).
  // Throws UnalignableError when the target cannot fit in T frames.
  Id ctc(Id log_probs, const std::vector<int>& targets) {
    require_rank(log_probs, 2, "ctc");
    int t_len = dims(log_probs)[0];
    int vocab = dims(log_probs)[1];
    int required = static_cast<int>(targets.size());
    for (size_t i = 0; i < targets.size(); ++i) {
      if (targets[i] < 0 || targets[i] >= vocab - 1)
        throw ShapeError("ctc: target id out of range");
      if (i > 0 && targets[i] == targets[i - 1]) ++required;
    }
    if (t_len < required) throw UnalignableError(t_len, required);
    Node n;
    n.op = Op::kCtc;
    n.in = {log_probs};
    n.dims = {1};
    n.iattr = targets;
    return push(std::move(n));
  }

  void mark_output(const std::string& name, Id id) {
    check_id(id);
    outputs_[name] = id;
  }

  // --- introspection ----------------------------------------------------

  const std::vector<int>& dims(Id id) const { return node(id).dims; }
  const Node& node(Id id) const {
    check_id(id);
    return nodes_[static_cast<size_t>(id)];
  }
  size_t size() const { return nodes_.size(); }
  const std::map<std::string, Id>& outputs() const { return outputs_; }
  const std::map<std::string, Id>& leaves() const { return leaf_ids_; }

 private:
  Id push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size() - 1);
  }
  Id unary(Op op, std::vector<Id> in, std::vector<int> d) {
    for (Id i : in) check_id(i);
    Node n;
    n.op = op;
    n.in = std::move(in);
    n.dims = std::move(d);
    return push(std::move(n));
  }
  void check_id(Id id) const {
    if (id < 0 || static_cast<size_t>(id) >= nodes_.size())
      throw ShapeError("graph: node id out of range");
  }
  void require_rank(Id id, int r, const char* op) const {
    if (node(id).dims.size() != static_cast<size_t>(r))
      throw ShapeError(std::string(op) + ": expected rank " +
                       std::to_string(r) + ", got " + dims_str(dims(id)));
  }
  void require_same(Id a, Id b, const char* op) const {
    if (dims(a) != dims(b))
      throw ShapeError(std::string(op) + ": " + dims_str(dims(a)) + " vs " +
                       dims_str(dims(b)));
  }

  std::vector<Node> nodes_;
  std::map<std::string, Id> leaf_ids_;
  std::map<std::string, Id> outputs_;
};

namespace detail {

inline double logadd(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  double m = std::max(a, b);
  return m + std::log1p(std::exp(std::min(a, b) - m));
}

// CTC forward-backward over the blank-extended state graph (Graves 2006).
// log_probs is T x V with blank fixed to column V-1. Fills the posterior
// marginal gamma[t][s] and returns -log P(targets | log_probs).
template <typename S>
double ctc_forward_backward(const TensorT<S>& log_probs,
                            const std::vector<int>& targets,
                            std::vector<std::vector<double>>* gamma) {
  const double kNegInf = -std::numeric_limits<double>::infinity();
  int t_len = log_probs.dims[0];
  int vocab = log_probs.dims[1];
  int blank = vocab - 1;
  int l = static_cast<int>(targets.size());
  int states = 2 * l + 1;
  auto ext = [&](int s) { return (s % 2 == 0) ? blank : targets[s / 2]; };
  auto lp = [&](int t, int k) { return static_cast<double>(log_probs.at(t, k)); };
  auto skip_ok = [&](int s) {
    return s >= 2 && ext(s) != blank && ext(s) != ext(s - 2);
  };

  std::vector<std::vector<double>> alpha(t_len,
                                         std::vector<double>(states, kNegInf));
  alpha[0][0] = lp(0, ext(0));
  if (states > 1) alpha[0][1] = lp(0, ext(1));
  for (int t = 1; t < t_len; ++t) {
    for (int s = 0; s < states; ++s) {
      double a = alpha[t - 1][s];
      if (s >= 1) a = logadd(a, alpha[t - 1][s - 1]);
      if (skip_ok(s)) a = logadd(a, alpha[t - 1][s - 2]);
      if (a != kNegInf) alpha[t][s] = a + lp(t, ext(s));
    }
  }
  double log_p = alpha[t_len - 1][states - 1];
  if (states > 1) log_p = logadd(log_p, alpha[t_len - 1][states - 2]);

  if (gamma != nullptr) {
    std::vector<std::vector<double>> beta(t_len,
                                          std::vector<double>(states, kNegInf));
    beta[t_len - 1][states - 1] = 0.0;
    if (states > 1) beta[t_len - 1][states - 2] = 0.0;
    for (int t = t_len - 2; t >= 0; --t) {
      for (int s = 0; s < states; ++s) {
        double b = kNegInf;
        if (beta[t + 1][s] != kNegInf)
          b = logadd(b, beta[t + 1][s] + lp(t + 1, ext(s)));
        if (s + 1 < states && beta[t + 1][s + 1] != kNegInf)
          b = logadd(b, beta[t + 1][s + 1] + lp(t + 1, ext(s + 1)));
        if (s + 2 < states && skip_ok(s + 2) && beta[t + 1][s + 2] != kNegInf)
          b = logadd(b, beta[t + 1][s + 2] + lp(t + 1, ext(s + 2)));
        beta[t][s] = b;
      }
    }
    gamma->assign(t_len, std::vector<double>(states, 0.0));
    for (int t = 0; t < t_len; ++t)
      for (int s = 0; s < states; ++s)
        if (alpha[t][s] != kNegInf && beta[t][s] != kNegInf)
          (*gamma)[t][s] = std::exp(alpha[t][s] + beta[t][s] - log_p);
  }
  return -log_p;
}

}  // namespace detail

// --- evaluation ---------------------------------------------------------

template <typename S>
using Bindings = std::map<std::string, TensorT<S>>;

namespace detail {

template <typename S>
void conv_pads(const std::vector<int>& in_dims, int kh, int kw, int stride,
               int* pb_h, int* pb_w) {
  int oh = (in_dims[1] + stride - 1) / stride;
  int ow = (in_dims[2] + stride - 1) / stride;
  int pad_h = std::max((oh - 1) * stride + kh - in_dims[1], 0);
  int pad_w = std::max((ow - 1) * stride + kw - in_dims[2], 0);
  *pb_h = pad_h / 2;
  *pb_w = pad_w / 2;
}

template <typename S>
void forward_node(const Graph<S>& g, typename Graph<S>::Id id,
                  const Bindings<S>& bindings,
                  std::vector<TensorT<S>>& vals) {
  using Op = typename Graph<S>::Op;
  const auto& n = g.node(id);
  auto& out = vals[static_cast<size_t>(id)];
  auto in = [&](int i) -> const TensorT<S>& {
    return vals[static_cast<size_t>(n.in[static_cast<size_t>(i)])];
  };

  switch (n.op) {
    case Op::kLeaf: {
      auto it = bindings.find(n.name);
      if (it == bindings.end())
        throw NumericError("unbound leaf: " + n.name);
      if (it->second.dims != n.dims)
        throw ShapeError("leaf " + n.name + ": bound " +
                         dims_str(it->second.dims) + ", declared " +
                         dims_str(n.dims));
      out = it->second;
      break;
    }
    case Op::kConst:
      out = n.value;
      break;
    case Op::kAdd: {
      out = in(0);
      const auto& b = in(1);
      for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
      break;
    }
    case Op::kAddRow: {
      out = in(0);
      const auto& v = in(1);
      int rows = out.dims[0], cols = out.dims[1];
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) out.at(r, c) += v.data[c];
      break;
    }
    case Op::kMul: {
      out = in(0);
      const auto& b = in(1);
      for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.data[i];
      break;
    }
    case Op::kScale: {
      out = in(0);
      S s = static_cast<S>(n.sattr);
      for (auto& v : out.data) v *= s;
      break;
    }
    case Op::kMatmul: {
      const auto& a = in(0);
      const auto& b = in(1);
      out = TensorT<S>(n.dims);
      int rows = a.dims[0], inner = a.dims[1], cols = b.dims[1];
      for (int i = 0; i < rows; ++i) {
        const S* arow = &a.data[static_cast<size_t>(i) * inner];
        S* crow = &out.data[static_cast<size_t>(i) * cols];
        for (int k = 0; k < inner; ++k) {
          S aik = arow[k];
          if (aik == S(0)) continue;
          const S* brow = &b.data[static_cast<size_t>(k) * cols];
          for (int j = 0; j < cols; ++j) crow[j] += aik * brow[j];
        }
      }
      break;
    }
    case Op::kTranspose: {
      const auto& a = in(0);
      out = TensorT<S>(n.dims);
      for (int i = 0; i < a.dims[0]; ++i)
        for (int j = 0; j < a.dims[1]; ++j) out.at(j, i) = a.at(i, j);
      break;
    }
    case Op::kRelu: {
      out = in(0);
      for (auto& v : out.data) v = std::max(v, S(0));
      break;
    }
    case Op::kSoftmax:
    case Op::kLogSoftmax: {
      const auto& a = in(0);
      out = TensorT<S>(n.dims);
      int rows = a.dims[0], cols = a.dims[1];
      for (int r = 0; r < rows; ++r) {
        S mx = a.at(r, 0);
        for (int c = 1; c < cols; ++c) mx = std::max(mx, a.at(r, c));
        double denom = 0.0;
        for (int c = 0; c < cols; ++c)
          denom += std::exp(static_cast<double>(a.at(r, c) - mx));
        if (n.op == Op::kSoftmax) {
          for (int c = 0; c < cols; ++c)
            out.at(r, c) = static_cast<S>(
                std::exp(static_cast<double>(a.at(r, c) - mx)) / denom);
        } else {
          double lz = std::log(denom);
          for (int c = 0; c < cols; ++c)
            out.at(r, c) =
                static_cast<S>(static_cast<double>(a.at(r, c) - mx) - lz);
        }
      }
      break;
    }
    case Op::kLayerNorm: {
      const auto& x = in(0);
      const auto& gamma = in(1);
      const auto& beta = in(2);
      out = TensorT<S>(n.dims);
      int rows = x.dims[0], cols = x.dims[1];
      for (int r = 0; r < rows; ++r) {
        double mean = 0.0;
        for (int c = 0; c < cols; ++c) mean += x.at(r, c);
        mean /= cols;
        double var = 0.0;
        for (int c = 0; c < cols; ++c) {
          double d = x.at(r, c) - mean;
          var += d * d;
        }
        var /= cols;
        double inv = 1.0 / std::sqrt(var + 1e-5);
        for (int c = 0; c < cols; ++c)
          out.at(r, c) = static_cast<S>(
              (x.at(r, c) - mean) * inv * gamma.data[c] + beta.data[c]);
      }
      break;
    }
    case Op::kConv2d: {
      const auto& x = in(0);
      const auto& k = in(1);
      const auto& b = in(2);
      int stride = n.iattr[0];
      int kh = k.dims[2], kw = k.dims[3];
      int pb_h, pb_w;
      conv_pads<S>(x.dims, kh, kw, stride, &pb_h, &pb_w);
      out = TensorT<S>(n.dims);
      int cout = n.dims[0], oh = n.dims[1], ow = n.dims[2];
      int cin = x.dims[0], h = x.dims[1], w = x.dims[2];
      for (int co = 0; co < cout; ++co) {
        for (int i = 0; i < oh; ++i)
          for (int j = 0; j < ow; ++j) out.at3(co, i, j) = b.data[co];
        for (int ci = 0; ci < cin; ++ci)
          for (int dh = 0; dh < kh; ++dh)
            for (int dw = 0; dw < kw; ++dw) {
              S kv = k.data[((static_cast<size_t>(co) * cin + ci) * kh + dh) *
                                kw +
                            dw];
              if (kv == S(0)) continue;
              for (int i = 0; i < oh; ++i) {
                int xi = i * stride + dh - pb_h;
                if (xi < 0 || xi >= h) continue;
                for (int j = 0; j < ow; ++j) {
                  int xj = j * stride + dw - pb_w;
                  if (xj < 0 || xj >= w) continue;
                  out.at3(co, i, j) += kv * x.at3(ci, xi, xj);
                }
              }
            }
      }
      break;
    }
    case Op::kTConv2d: {
      const auto& x = in(0);
      const auto& k = in(1);
      const auto& b = in(2);
      int stride = n.iattr[0];
      int kh = k.dims[2], kw = k.dims[3];
      out = TensorT<S>(n.dims);
      int pb_h, pb_w;
      conv_pads<S>(n.dims, kh, kw, stride, &pb_h, &pb_w);
      int cout = n.dims[0], oh = n.dims[1], ow = n.dims[2];
      int cin = x.dims[0], h = x.dims[1], w = x.dims[2];
      for (int co = 0; co < cout; ++co)
        for (int i = 0; i < oh; ++i)
          for (int j = 0; j < ow; ++j) out.at3(co, i, j) = b.data[co];
      for (int ci = 0; ci < cin; ++ci)
        for (int co = 0; co < cout; ++co)
          for (int dh = 0; dh < kh; ++dh)
            for (int dw = 0; dw < kw; ++dw) {
              S kv = k.data[((static_cast<size_t>(ci) * cout + co) * kh + dh) *
                                kw +
                            dw];
              if (kv == S(0)) continue;
              for (int hi = 0; hi < h; ++hi) {
                int oi = hi * stride + dh - pb_h;
                if (oi < 0 || oi >= oh) continue;
                for (int wi = 0; wi < w; ++wi) {
                  int oj = wi * stride + dw - pb_w;
                  if (oj < 0 || oj >= ow) continue;
                  out.at3(co, oi, oj) += kv * x.at3(ci, hi, wi);
                }
              }
            }
      break;
    }
    case Op::kEmbed: {
      const auto& table = in(0);
      out = TensorT<S>(n.dims);
      int cols = table.dims[1];
      for (size_t t = 0; t < n.iattr.size(); ++t)
        std::copy_n(&table.data[static_cast<size_t>(n.iattr[t]) * cols], cols,
                    &out.data[t * cols]);
      break;
    }
    case Op::kSlice: {
      const auto& x = in(0);
      out = TensorT<S>(n.dims);
      int r0 = n.iattr[0], c0 = n.iattr[2];
      for (int r = 0; r < n.dims[0]; ++r)
        for (int c = 0; c < n.dims[1]; ++c)
          out.at(r, c) = x.at(r0 + r, c0 + c);
      break;
    }
    case Op::kConcatRows: {
      const auto& a = in(0);
      const auto& b = in(1);
      out = TensorT<S>(n.dims);
      std::copy(a.data.begin(), a.data.end(), out.data.begin());
      std::copy(b.data.begin(), b.data.end(),
                out.data.begin() + static_cast<int64_t>(a.data.size()));
      break;
    }
    case Op::kReshape:
      out = in(0);
      out.dims = n.dims;
      break;
    case Op::kPermute102: {
      const auto& x = in(0);
      out = TensorT<S>(n.dims);
      for (int i = 0; i < x.dims[0]; ++i)
        for (int j = 0; j < x.dims[1]; ++j)
          for (int c = 0; c < x.dims[2]; ++c)
            out.at3(j, i, c) = x.at3(i, j, c);
      break;
    }
    case Op::kReduceSum:
    case Op::kReduceMean: {
      const auto& x = in(0);
      double acc = 0.0;
      for (S v : x.data) acc += v;
      if (n.op == Op::kReduceMean) acc /= static_cast<double>(x.numel());
      out = TensorT<S>({1}, {static_cast<S>(acc)});
      break;
    }
    case Op::kSSE: {
      const auto& a = in(0);
      const auto& b = in(1);
      double acc = 0.0;
      for (size_t i = 0; i < a.data.size(); ++i) {
        double d = static_cast<double>(a.data[i]) - b.data[i];
        acc += d * d;
      }
      out = TensorT<S>({1}, {static_cast<S>(acc)});
      break;
    }
    case Op::kCtc: {
      double loss = ctc_forward_backward(in(0), n.iattr, nullptr);
      out = TensorT<S>({1}, {static_cast<S>(loss)});
      break;
    }
  }
  if (!out.all_finite())
    throw NumericError("non-finite value at node " + std::to_string(id));
}

template <typename S>
void backward_node(const Graph<S>& g, typename Graph<S>::Id id,
                   const std::vector<TensorT<S>>& vals,
                   std::vector<TensorT<S>>& adj) {
  using Op = typename Graph<S>::Op;
  const auto& n = g.node(id);
  const auto& gout = adj[static_cast<size_t>(id)];
  if (gout.data.empty()) return;  // no downstream use
  auto in = [&](int i) -> const TensorT<S>& {
    return vals[static_cast<size_t>(n.in[static_cast<size_t>(i)])];
  };
  auto gin = [&](int i) -> TensorT<S>& {
    auto& t = adj[static_cast<size_t>(n.in[static_cast<size_t>(i)])];
    if (t.data.empty()) t = TensorT<S>(in(i).dims);
    return t;
  };

  switch (n.op) {
    case Op::kLeaf:
    case Op::kConst:
      break;
    case Op::kAdd: {
      auto& ga = gin(0);
      auto& gb = gin(1);
      for (size_t i = 0; i < gout.data.size(); ++i) {
        ga.data[i] += gout.data[i];
        gb.data[i] += gout.data[i];
      }
      break;
    }
    case Op::kAddRow: {
      auto& gm = gin(0);
      auto& gv = gin(1);
      int rows = n.dims[0], cols = n.dims[1];
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
          gm.at(r, c) += gout.at(r, c);
          gv.data[c] += gout.at(r, c);
        }
      break;
    }
    case Op::kMul: {
      const auto& a = in(0);
      const auto& b = in(1);
      auto& ga = gin(0);
      auto& gb = gin(1);
      for (size_t i = 0; i < gout.data.size(); ++i) {
        ga.data[i] += gout.data[i] * b.data[i];
        gb.data[i] += gout.data[i] * a.data[i];
      }
      break;
    }
    case Op::kScale: {
      auto& ga = gin(0);
      S s = static_cast<S>(n.sattr);
      for (size_t i = 0; i < gout.data.size(); ++i)
        ga.data[i] += s * gout.data[i];
      break;
    }
    case Op::kMatmul: {
      const auto& a = in(0);
      const auto& b = in(1);
      auto& ga = gin(0);
      auto& gb = gin(1);
      int rows = a.dims[0], inner = a.dims[1], cols = b.dims[1];
      // dA = G B^T, dB = A^T G
      for (int i = 0; i < rows; ++i)
        for (int k = 0; k < inner; ++k) {
          double acc = 0.0;
          const S* grow = &gout.data[static_cast<size_t>(i) * cols];
          const S* brow = &b.data[static_cast<size_t>(k) * cols];
          for (int j = 0; j < cols; ++j) acc += grow[j] * brow[j];
          ga.at(i, k) += static_cast<S>(acc);
        }
      for (int i = 0; i < rows; ++i) {
        const S* arow = &a.data[static_cast<size_t>(i) * inner];
        const S* grow = &gout.data[static_cast<size_t>(i) * cols];
        for (int k = 0; k < inner; ++k) {
          S aik = arow[k];
          if (aik == S(0)) continue;
          S* gbrow = &gb.data[static_cast<size_t>(k) * cols];
          for (int j = 0; j < cols; ++j) gbrow[j] += aik * grow[j];
        }
      }
      break;
    }
    case Op::kTranspose: {
      auto& ga = gin(0);
      for (int i = 0; i < n.dims[0]; ++i)
        for (int j = 0; j < n.dims[1]; ++j) ga.at(j, i) += gout.at(i, j);
      break;
    }
    case Op::kRelu: {
      const auto& a = in(0);
      auto& ga = gin(0);
      for (size_t i = 0; i < gout.data.size(); ++i)
        if (a.data[i] > S(0)) ga.data[i] += gout.data[i];
      break;
    }
    case Op::kSoftmax: {
      const auto& y = vals[static_cast<size_t>(id)];
      auto& ga = gin(0);
      int rows = n.dims[0], cols = n.dims[1];
      for (int r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (int c = 0; c < cols; ++c) dot += gout.at(r, c) * y.at(r, c);
        for (int c = 0; c < cols; ++c)
          ga.at(r, c) += static_cast<S>(y.at(r, c) * (gout.at(r, c) - dot));
      }
      break;
    }
    case Op::kLogSoftmax: {
      const auto& y = vals[static_cast<size_t>(id)];
      auto& ga = gin(0);
      int rows = n.dims[0], cols = n.dims[1];
      for (int r = 0; r < rows; ++r) {
        double gsum = 0.0;
        for (int c = 0; c < cols; ++c) gsum += gout.at(r, c);
        for (int c = 0; c < cols; ++c)
          ga.at(r, c) += static_cast<S>(
              gout.at(r, c) -
              std::exp(static_cast<double>(y.at(r, c))) * gsum);
      }
      break;
    }
    case Op::kLayerNorm: {
      const auto& x = in(0);
      const auto& gamma = in(1);
      auto& gx = gin(0);
      auto& ggamma = gin(1);
      auto& gbeta = gin(2);
      int rows = x.dims[0], cols = x.dims[1];
      for (int r = 0; r < rows; ++r) {
        double mean = 0.0;
        for (int c = 0; c < cols; ++c) mean += x.at(r, c);
        mean /= cols;
        double var = 0.0;
        for (int c = 0; c < cols; ++c) {
          double d = x.at(r, c) - mean;
          var += d * d;
        }
        var /= cols;
        double inv = 1.0 / std::sqrt(var + 1e-5);
        double m1 = 0.0, m2 = 0.0;  // mean(ghat), mean(ghat * xhat)
        for (int c = 0; c < cols; ++c) {
          double xhat = (x.at(r, c) - mean) * inv;
          double ghat = static_cast<double>(gout.at(r, c)) * gamma.data[c];
          ggamma.data[c] += static_cast<S>(gout.at(r, c) * xhat);
          gbeta.data[c] += gout.at(r, c);
          m1 += ghat;
          m2 += ghat * xhat;
        }
        m1 /= cols;
        m2 /= cols;
        for (int c = 0; c < cols; ++c) {
          double xhat = (x.at(r, c) - mean) * inv;
          double ghat = static_cast<double>(gout.at(r, c)) * gamma.data[c];
          gx.at(r, c) += static_cast<S>((ghat - m1 - xhat * m2) * inv);
        }
      }
      break;
    }
    case Op::kConv2d: {
      const auto& x = in(0);
      const auto& k = in(1);
      auto& gx = gin(0);
      auto& gk = gin(1);
      auto& gb = gin(2);
      int stride = n.iattr[0];
      int kh = k.dims[2], kw = k.dims[3];
      int pb_h, pb_w;
      conv_pads<S>(x.dims, kh, kw, stride, &pb_h, &pb_w);
      int cout = n.dims[0], oh = n.dims[1], ow = n.dims[2];
      int cin = x.dims[0], h = x.dims[1], w = x.dims[2];
      for (int co = 0; co < cout; ++co) {
        for (int i = 0; i < oh; ++i)
          for (int j = 0; j < ow; ++j) gb.data[co] += gout.at3(co, i, j);
        for (int ci = 0; ci < cin; ++ci)
          for (int dh = 0; dh < kh; ++dh)
            for (int dw = 0; dw < kw; ++dw) {
              size_t kidx =
                  ((static_cast<size_t>(co) * cin + ci) * kh + dh) * kw + dw;
              S kv = k.data[kidx];
              double gkacc = 0.0;
              for (int i = 0; i < oh; ++i) {
                int xi = i * stride + dh - pb_h;
                if (xi < 0 || xi >= h) continue;
                for (int j = 0; j < ow; ++j) {
                  int xj = j * stride + dw - pb_w;
                  if (xj < 0 || xj >= w) continue;
                  S go = gout.at3(co, i, j);
                  gkacc += static_cast<double>(go) * x.at3(ci, xi, xj);
                  gx.at3(ci, xi, xj) += kv * go;
                }
              }
              gk.data[kidx] += static_cast<S>(gkacc);
            }
      }
      break;
    }
    case Op::kTConv2d: {
      const auto& x = in(0);
      const auto& k = in(1);
      auto& gx = gin(0);
      auto& gk = gin(1);
      auto& gb = gin(2);
      int stride = n.iattr[0];
      int kh = k.dims[2], kw = k.dims[3];
      int pb_h, pb_w;
      conv_pads<S>(n.dims, kh, kw, stride, &pb_h, &pb_w);
      int cout = n.dims[0], oh = n.dims[1], ow = n.dims[2];
      int cin = x.dims[0], h = x.dims[1], w = x.dims[2];
      for (int co = 0; co < cout; ++co)
        for (int i = 0; i < oh; ++i)
          for (int j = 0; j < ow; ++j) gb.data[co] += gout.at3(co, i, j);
      for (int ci = 0; ci < cin; ++ci)
        for (int co = 0; co < cout; ++co)
          for (int dh = 0; dh < kh; ++dh)
            for (int dw = 0; dw < kw; ++dw) {
              size_t kidx =
                  ((static_cast<size_t>(ci) * cout + co) * kh + dh) * kw + dw;
              S kv = k.data[kidx];
              double gkacc = 0.0;
              for (int hi = 0; hi < h; ++hi) {
                int oi = hi * stride + dh - pb_h;
                if (oi < 0 || oi >= oh) continue;
                for (int wi = 0; wi < w; ++wi) {
                  int oj = wi * stride + dw - pb_w;
                  if (oj < 0 || oj >= ow) continue;
                  S go = gout.at3(co, oi, oj);
                  gkacc += static_cast<double>(go) * x.at3(ci, hi, wi);
                  gx.at3(ci, hi, wi) += kv * go;
                }
              }
              gk.data[kidx] += static_cast<S>(gkacc);
            }
      break;
    }
    case Op::kEmbed: {
      auto& gt = gin(0);
      int cols = n.dims[1];
      for (size_t t = 0; t < n.iattr.size(); ++t)
        for (int c = 0; c < cols; ++c)
          gt.data[static_cast<size_t>(n.iattr[t]) * cols + c] +=
              gout.data[t * cols + c];
      break;
    }
    case Op::kSlice: {
      auto& gx = gin(0);
      int r0 = n.iattr[0], c0 = n.iattr[2];
      for (int r = 0; r < n.dims[0]; ++r)
        for (int c = 0; c < n.dims[1]; ++c)
          gx.at(r0 + r, c0 + c) += gout.at(r, c);
      break;
    }
    case Op::kConcatRows: {
      auto& ga = gin(0);
      auto& gb = gin(1);
      for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += gout.data[i];
      for (size_t i = 0; i < gb.data.size(); ++i)
        gb.data[i] += gout.data[ga.data.size() + i];
      break;
    }
    case Op::kReshape: {
      auto& gx = gin(0);
      for (size_t i = 0; i < gout.data.size(); ++i) gx.data[i] += gout.data[i];
      break;
    }
    case Op::kPermute102: {
      const auto& x = in(0);
      auto& gx = gin(0);
      for (int i = 0; i < x.dims[0]; ++i)
        for (int j = 0; j < x.dims[1]; ++j)
          for (int c = 0; c < x.dims[2]; ++c)
            gx.at3(i, j, c) += gout.at3(j, i, c);
      break;
    }
    case Op::kReduceSum: {
      auto& gx = gin(0);
      S go = gout.data[0];
      for (auto& v : gx.data) v += go;
      break;
    }
    case Op::kReduceMean: {
      auto& gx = gin(0);
      S go = static_cast<S>(gout.data[0] /
                            static_cast<double>(in(0).numel()));
      for (auto& v : gx.data) v += go;
      break;
    }
    case Op::kSSE: {
      const auto& a = in(0);
      const auto& b = in(1);
      auto& ga = gin(0);
      auto& gb = gin(1);
      S go = gout.data[0];
      for (size_t i = 0; i < a.data.size(); ++i) {
        S d = S(2) * (a.data[i] - b.data[i]) * go;
        ga.data[i] += d;
        gb.data[i] -= d;
      }
      break;
    }
    case Op::kCtc: {
      const auto& lp = in(0);
      auto& glp = gin(0);
      std::vector<std::vector<double>> gamma;
      detail::ctc_forward_backward(lp, n.iattr, &gamma);
      int t_len = lp.dims[0];
      int vocab = lp.dims[1];
      int blank = vocab - 1;
      int states = 2 * static_cast<int>(n.iattr.size()) + 1;
      S go = gout.data[0];
      for (int t = 0; t < t_len; ++t)
        for (int s = 0; s < states; ++s) {
          int k = (s % 2 == 0) ? blank : n.iattr[s / 2];
          glp.at(t, k) -= static_cast<S>(gamma[t][s]) * go;
        }
      break;
    }
  }
}

template <typename S>
void forward_all(const Graph<S>& g, const Bindings<S>& bindings,
                 std::vector<TensorT<S>>& vals) {
  vals.resize(g.size());
  for (typename Graph<S>::Id id = 0; id < static_cast<int32_t>(g.size()); ++id)
    forward_node(g, id, bindings, vals);
}

}  // namespace detail

// Deterministic forward evaluation of all marked outputs.
template <typename S>
Bindings<S> evaluate(const Graph<S>& g, const Bindings<S>& bindings) {
  std::vector<TensorT<S>> vals;
  detail::forward_all(g, bindings, vals);
  Bindings<S> out;
  for (const auto& [name, id] : g.outputs())
    out[name] = vals[static_cast<size_t>(id)];
  return out;
}

// Reverse-mode gradients of a scalar output with respect to named leaves.
// Leaves that do not influence the output get exact zeros.
template <typename S>
struct EvalResult {
  Bindings<S> outputs;
  Bindings<S> grads;
};

template <typename S>
EvalResult<S> evaluate_with_gradients(const Graph<S>& g,
                                      const Bindings<S>& bindings,
                                      const std::set<std::string>& wrt,
                                      const std::string& scalar_output) {
  auto out_it = g.outputs().find(scalar_output);
  if (out_it == g.outputs().end())
    throw ShapeError("gradients: unknown output " + scalar_output);
  typename Graph<S>::Id out_id = out_it->second;
  if (g.dims(out_id) != std::vector<int>{1})
    throw ShapeError("gradients: output " + scalar_output + " is not scalar");
  for (const auto& name : wrt)
    if (!g.leaves().count(name))
      throw ShapeError("gradients: wrt name absent: " + name);

  std::vector<TensorT<S>> vals;
  detail::forward_all(g, bindings, vals);

  std::vector<TensorT<S>> adj(g.size());
  adj[static_cast<size_t>(out_id)] = TensorT<S>({1}, {S(1)});
  for (typename Graph<S>::Id id = out_id; id >= 0; --id)
    detail::backward_node(g, id, vals, adj);

  EvalResult<S> res;
  for (const auto& [name, id] : g.outputs())
    res.outputs[name] = vals[static_cast<size_t>(id)];
  for (const auto& name : wrt) {
    typename Graph<S>::Id id = g.leaves().at(name);
    auto& grad = adj[static_cast<size_t>(id)];
    if (grad.data.empty()) grad = TensorT<S>(g.dims(id));
    res.grads[name] = std::move(grad);
  }
  return res;
}

template <typename S>
Bindings<S> gradients(const Graph<S>& g, const Bindings<S>& bindings,
                      const std::set<std::string>& wrt,
                      const std::string& scalar_output) {
  return evaluate_with_gradients(g, bindings, wrt, scalar_output).grads;
}

// --- finite-difference gradient checking --------------------------------

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;
  // 0 probes every component; otherwise a seeded sample per leaf.
  int max_probes_per_leaf = 0;
  uint64_t probe_seed = 0x5eedc0de;
};

struct GradCheckLeaf {
  std::string name;
  double max_rel_err = 0.0;
  int checked = 0;
  int skipped = 0;  // probes that crossed a relu kink
};

struct GradCheckReport {
  std::vector<GradCheckLeaf> leaves;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  // Set when any probe stepped across a relu kink; those probes are skipped
  // (finite differences are meaningless there) and counted per leaf.
  bool kink_warning = false;

  std::string to_string() const {
    std::string s;
    for (const auto& l : leaves) {
      s += l.name + ": max_rel_err=" + std::to_string(l.max_rel_err) +
           " (checked " + std::to_string(l.checked);
      if (l.skipped > 0) s += ", skipped " + std::to_string(l.skipped);
      s += ")\n";
    }
    if (kink_warning)
      s += "warning: probes crossing a relu kink were skipped\n";
    s += std::string(pass ? "PASS" : "FAIL") +
         " max_rel_err=" + std::to_string(max_rel_err) + "\n";
    return s;
  }
};

// Central-difference check of analytic gradients, in double precision.
inline GradCheckReport grad_check(const Graph<double>& g,
                                  const Bindings<double>& bindings,
                                  const std::set<std::string>& wrt,
                                  const std::string& scalar_output,
                                  const GradCheckOptions& opts = {}) {
  GradCheckReport report;
  report.tolerance = opts.tolerance;

  auto analytic = gradients(g, bindings, wrt, scalar_output);

  auto out_id = g.outputs().at(scalar_output);
  std::vector<typename Graph<double>::Id> relu_inputs;
  for (typename Graph<double>::Id id = 0; id < static_cast<int32_t>(g.size());
       ++id)
    if (g.node(id).op == Graph<double>::Op::kRelu)
      relu_inputs.push_back(g.node(id).in[0]);

  Bindings<double> work = bindings;
  for (const auto& name : wrt) {
    auto& tensor = work.at(name);
    int64_t numel = tensor.numel();

    std::vector<int64_t> probes;
    if (opts.max_probes_per_leaf <= 0 || numel <= opts.max_probes_per_leaf) {
      probes.resize(static_cast<size_t>(numel));
      for (int64_t i = 0; i < numel; ++i) probes[static_cast<size_t>(i)] = i;
    } else {
      // Seeded partial Fisher-Yates over component indices.
      std::vector<int64_t> idx(static_cast<size_t>(numel));
      for (int64_t i = 0; i < numel; ++i) idx[static_cast<size_t>(i)] = i;
      uint64_t h = 1469598103934665603ull;
      for (char c : name) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ull;
      SplitMix64 rng(opts.probe_seed ^ h);
      for (int i = 0; i < opts.max_probes_per_leaf; ++i) {
        int64_t j = i + static_cast<int64_t>(
                            rng.uniform_int(static_cast<uint64_t>(numel - i)));
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
      }
      probes.assign(idx.begin(), idx.begin() + opts.max_probes_per_leaf);
    }

    GradCheckLeaf leaf;
    leaf.name = name;
    std::vector<TensorD> vals_p, vals_m;
    for (int64_t ci : probes) {
      double saved = tensor.data[static_cast<size_t>(ci)];
      tensor.data[static_cast<size_t>(ci)] = saved + opts.step;
      detail::forward_all(g, work, vals_p);
      tensor.data[static_cast<size_t>(ci)] = saved - opts.step;
      detail::forward_all(g, work, vals_m);
      tensor.data[static_cast<size_t>(ci)] = saved;

      // A probe whose +/-h evaluations land on opposite sides of a relu
      // kink has no usable central difference; skip it, loudly.
      bool crossed = false;
      for (auto rid : relu_inputs) {
        const auto& vp = vals_p[static_cast<size_t>(rid)];
        const auto& vm = vals_m[static_cast<size_t>(rid)];
        for (size_t k = 0; k < vp.data.size() && !crossed; ++k)
          if (vp.data[k] * vm.data[k] < 0.0) crossed = true;
        if (crossed) break;
      }
      if (crossed) {
        ++leaf.skipped;
        report.kink_warning = true;
        continue;
      }

      double fp = vals_p[static_cast<size_t>(out_id)].data[0];
      double fm = vals_m[static_cast<size_t>(out_id)].data[0];
      double numeric = (fp - fm) / (2.0 * opts.step);
      double a = analytic.at(name).data[static_cast<size_t>(ci)];
      double rel = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      leaf.max_rel_err = std::max(leaf.max_rel_err, rel);
      ++leaf.checked;
    }
    report.max_rel_err = std::max(report.max_rel_err, leaf.max_rel_err);
    report.leaves.push_back(std::move(leaf));
  }
  report.pass = report.max_rel_err <= opts.tolerance;
  return report;
}

}  // namespace mam
