#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "mexit/tensor.hpp"

namespace mexit {

struct Conv2d {
  Index c_in = 1, c_out = 1, k_h = 3, k_w = 3, stride = 1, pad = 0;
  bool bias = true;
};

struct Dense {
  Index n_in = 1, n_out = 1;
  bool bias = true;
};

struct Relu {};

struct MaxPool {
  Index k = 2, stride = 2;
};

struct GlobalAvgPool {};

using LayerKind = std::variant<Conv2d, Dense, Relu, MaxPool, GlobalAvgPool>;

template <class... Fs>
struct Overloaded : Fs... {
  using Fs::operator()...;
};
template <class... Fs>
Overloaded(Fs...) -> Overloaded<Fs...>;

inline std::string kind_name(const LayerKind& kind) {
  return std::visit(Overloaded{[](const Conv2d&) { return "conv2d"; },
                               [](const Dense&) { return "dense"; },
                               [](const Relu&) { return "relu"; },
                               [](const MaxPool&) { return "maxpool"; },
                               [](const GlobalAvgPool&) { return "globalavgpool"; }},
                    kind);
}

/// Per-sample output shape (no batch dimension). Throws ConfigError on mismatch.
inline Shape layer_output_shape(const LayerKind& kind, const Shape& in) {
  auto need_chw = [&](const char* what) {
    if (in.size() != 3) throw ConfigError(std::string(what) + " expects CxHxW input, got " + shape_string(in));
  };
  return std::visit(
      Overloaded{
          [&](const Conv2d& c) -> Shape {
            need_chw("conv2d");
            if (in[0] != c.c_in)
              throw ConfigError("conv2d expects " + std::to_string(c.c_in) + " channels, got " + shape_string(in));
            const Index h = (in[1] + 2 * c.pad - c.k_h) / c.stride + 1;
            const Index w = (in[2] + 2 * c.pad - c.k_w) / c.stride + 1;
            if (in[1] + 2 * c.pad < c.k_h || in[2] + 2 * c.pad < c.k_w || h <= 0 || w <= 0)
              throw ConfigError("conv2d kernel larger than input " + shape_string(in));
            return {c.c_out, h, w};
          },
          [&](const Dense& d) -> Shape {
            if (shape_size(in) != d.n_in)
              throw ConfigError("dense expects " + std::to_string(d.n_in) + " inputs, got " + shape_string(in));
            return {d.n_out};
          },
          [&](const Relu&) -> Shape { return in; },
          [&](const MaxPool& p) -> Shape {
            need_chw("maxpool");
            if (in[1] < p.k || in[2] < p.k) throw ConfigError("maxpool window larger than input " + shape_string(in));
            return {in[0], (in[1] - p.k) / p.stride + 1, (in[2] - p.k) / p.stride + 1};
          },
          [&](const GlobalAvgPool&) -> Shape {
            need_chw("globalavgpool");
            return {in[0]};
          }},
      kind);
}

/// FLOPs for one sample: a multiply-accumulate is 2 FLOPs, each bias add is 1,
/// pooling and ReLU are 1 per output element.
inline std::int64_t count_layer_flops(const LayerKind& kind, const Shape& in) {
  const Shape out = layer_output_shape(kind, in);
  const std::int64_t out_elems = shape_size(out);
  return std::visit(Overloaded{[&](const Conv2d& c) -> std::int64_t {
                                 const std::int64_t macs = c.k_h * c.k_w * c.c_in * out_elems;
                                 return 2 * macs + (c.bias ? out_elems : 0);
                               },
                               [&](const Dense& d) -> std::int64_t {
                                 return 2 * d.n_in * d.n_out + (d.bias ? d.n_out : 0);
                               },
                               [&](const auto&) -> std::int64_t { return out_elems; }},
                    kind);
}

inline std::int64_t count_layer_params(const LayerKind& kind) {
  return std::visit(Overloaded{[](const Conv2d& c) -> std::int64_t {
                                 return c.c_out * c.c_in * c.k_h * c.k_w + (c.bias ? c.c_out : 0);
                               },
                               [](const Dense& d) -> std::int64_t { return d.n_out * d.n_in + (d.bias ? d.n_out : 0); },
                               [](const auto&) -> std::int64_t { return 0; }},
                    kind);
}

inline Shape weight_shape(const LayerKind& kind) {
  return std::visit(Overloaded{[](const Conv2d& c) -> Shape { return {c.c_out, c.c_in, c.k_h, c.k_w}; },
                               [](const Dense& d) -> Shape { return {d.n_out, d.n_in}; },
                               [](const auto&) -> Shape { return {}; }},
                    kind);
}

inline Shape bias_shape(const LayerKind& kind) {
  return std::visit(Overloaded{[](const Conv2d& c) -> Shape { return c.bias ? Shape{c.c_out} : Shape{}; },
                               [](const Dense& d) -> Shape { return d.bias ? Shape{d.n_out} : Shape{}; },
                               [](const auto&) -> Shape { return {}; }},
                    kind);
}

/// A layer together with its parameters. Parameter tensors are empty for
/// parameter-free kinds.
template <typename Scalar>
struct Layer {
  LayerKind kind;
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;

  Layer() = default;
  explicit Layer(LayerKind k) : kind(k) {
    if (auto s = weight_shape(kind); !s.empty()) weight = Tensor<Scalar>(s);
    if (auto s = bias_shape(kind); !s.empty()) bias = Tensor<Scalar>(s);
  }

  bool has_params() const { return !weight.empty(); }

  template <typename Other>
  Layer<Other> cast() const {
    Layer<Other> l;
    l.kind = kind;
    if (!weight.empty()) l.weight = weight.template cast<Other>();
    if (!bias.empty()) l.bias = bias.template cast<Other>();
    return l;
  }
};

/// Parameter-shaped gradient (or momentum) storage for one layer.
template <typename Scalar>
struct LayerGrads {
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;

  static LayerGrads zeros_like(const Layer<Scalar>& layer) {
    LayerGrads g;
    if (!layer.weight.empty()) g.weight = Tensor<Scalar>(layer.weight.shape());
    if (!layer.bias.empty()) g.bias = Tensor<Scalar>(layer.bias.shape());
    return g;
  }

  void add(const LayerGrads& other) {
    if (!weight.empty()) weight.vec() += other.weight.vec();
    if (!bias.empty()) bias.vec() += other.bias.vec();
  }

  bool all_finite() const {
    return (weight.empty() || weight.all_finite()) && (bias.empty() || bias.all_finite());
  }
};

/// He-normal weights, zero biases.
template <typename Scalar, typename Rng>
void init_layer(Layer<Scalar>& layer, Rng& rng) {
  if (!layer.has_params()) return;
  const Shape ws = layer.weight.shape();
  const Index fan_in = shape_size(ws) / ws[0];
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (Index i = 0; i < layer.weight.size(); ++i) layer.weight[i] = static_cast<Scalar>(normal(rng));
  if (!layer.bias.empty()) layer.bias.vec().setZero();
}

/// Activation record from forward_layer, consumed by backward_layer.
template <typename Scalar>
struct LayerCache {
  std::size_t kind_index = std::variant_npos;
  Tensor<Scalar> input;
  std::vector<Index> argmax;  // maxpool only
};

namespace detail {

template <typename Scalar>
RowMatrix<Scalar> im2col(const Scalar* x, const Conv2d& c, Index h, Index w, Index ho, Index wo) {
  RowMatrix<Scalar> cols(c.c_in * c.k_h * c.k_w, ho * wo);
  for (Index ci = 0; ci < c.c_in; ++ci)
    for (Index kh = 0; kh < c.k_h; ++kh)
      for (Index kw = 0; kw < c.k_w; ++kw) {
        Scalar* row = cols.data() + ((ci * c.k_h + kh) * c.k_w + kw) * ho * wo;
        for (Index oh = 0; oh < ho; ++oh) {
          const Index ih = oh * c.stride - c.pad + kh;
          for (Index ow = 0; ow < wo; ++ow) {
            const Index iw = ow * c.stride - c.pad + kw;
            row[oh * wo + ow] = (ih >= 0 && ih < h && iw >= 0 && iw < w) ? x[(ci * h + ih) * w + iw] : Scalar(0);
          }
        }
      }
  return cols;
}

template <typename Scalar>
void col2im_add(const RowMatrix<Scalar>& cols, const Conv2d& c, Index h, Index w, Index ho, Index wo, Scalar* gx) {
  for (Index ci = 0; ci < c.c_in; ++ci)
    for (Index kh = 0; kh < c.k_h; ++kh)
      for (Index kw = 0; kw < c.k_w; ++kw) {
        const Scalar* row = cols.data() + ((ci * c.k_h + kh) * c.k_w + kw) * ho * wo;
        for (Index oh = 0; oh < ho; ++oh) {
          const Index ih = oh * c.stride - c.pad + kh;
          if (ih < 0 || ih >= h) continue;
          for (Index ow = 0; ow < wo; ++ow) {
            const Index iw = ow * c.stride - c.pad + kw;
            if (iw >= 0 && iw < w) gx[(ci * h + ih) * w + iw] += row[oh * wo + ow];
          }
        }
      }
}

inline Shape sample_shape(const Shape& batched) { return Shape(batched.begin() + 1, batched.end()); }

inline Shape batched(Index n, const Shape& per_sample) {
  Shape s{n};
  s.insert(s.end(), per_sample.begin(), per_sample.end());
  return s;
}

}  // namespace detail

template <typename Scalar>
struct ForwardResult {
  Tensor<Scalar> output;
  LayerCache<Scalar> cache;
};

/// Forward over a batch (leading dimension). Every sample is computed
/// independently, so results do not depend on batch composition.
template <typename Scalar>
ForwardResult<Scalar> forward_layer(const Layer<Scalar>& layer, const Tensor<Scalar>& input, bool keep_cache = true) {
  if (input.rank() < 2) throw ConfigError("layer input needs a batch dimension, got " + shape_string(input.shape()));
  const Index n = input.dim(0);
  const Shape in = detail::sample_shape(input.shape());
  const Shape out_shape = layer_output_shape(layer.kind, in);
  Tensor<Scalar> out(detail::batched(n, out_shape));
  LayerCache<Scalar> cache;
  cache.kind_index = layer.kind.index();

  std::visit(
      Overloaded{
          [&](const Conv2d& c) {
            const Index ho = out_shape[1], wo = out_shape[2];
            Eigen::Map<const RowMatrix<Scalar>> wmat(layer.weight.data(), c.c_out, c.c_in * c.k_h * c.k_w);
            for (Index s = 0; s < n; ++s) {
              RowMatrix<Scalar> cols = detail::im2col(input.slice(s).data(), c, in[1], in[2], ho, wo);
              Eigen::Map<RowMatrix<Scalar>> o(out.slice(s).data(), c.c_out, ho * wo);
              o.noalias() = wmat * cols;
              if (c.bias) o.colwise() += layer.bias.vec();
            }
          },
          [&](const Dense& d) {
            Eigen::Map<const RowMatrix<Scalar>> wmat(layer.weight.data(), d.n_out, d.n_in);
            for (Index s = 0; s < n; ++s) {
              auto o = out.slice(s);
              o.noalias() = wmat * input.slice(s);
              if (d.bias) o += layer.bias.vec();
            }
          },
          [&](const Relu&) { out.vec() = input.vec().cwiseMax(Scalar(0)); },
          [&](const MaxPool& p) {
            const Index c = in[0], h = in[1], w = in[2], ho = out_shape[1], wo = out_shape[2];
            cache.argmax.resize(static_cast<std::size_t>(out.size()));
            for (Index s = 0; s < n; ++s) {
              const Scalar* x = input.slice(s).data();
              Scalar* y = out.slice(s).data();
              for (Index ch = 0; ch < c; ++ch)
                for (Index oh = 0; oh < ho; ++oh)
                  for (Index ow = 0; ow < wo; ++ow) {
                    Index best = (ch * h + oh * p.stride) * w + ow * p.stride;
                    for (Index kh = 0; kh < p.k; ++kh)
                      for (Index kw = 0; kw < p.k; ++kw) {
                        const Index idx = (ch * h + oh * p.stride + kh) * w + ow * p.stride + kw;
                        if (x[idx] > x[best]) best = idx;
                      }
                    const Index o = (ch * ho + oh) * wo + ow;
                    y[o] = x[best];
                    cache.argmax[static_cast<std::size_t>(s * c * ho * wo + o)] = best;
                  }
            }
          },
          [&](const GlobalAvgPool&) {
            const Index c = in[0], hw = in[1] * in[2];
            for (Index s = 0; s < n; ++s) {
              Eigen::Map<const RowMatrix<Scalar>> x(input.slice(s).data(), c, hw);
              out.slice(s) = x.rowwise().mean();
            }
          }},
      layer.kind);

  if (keep_cache) cache.input = input;
  return {std::move(out), std::move(cache)};
}

template <typename Scalar>
struct BackwardResult {
  Tensor<Scalar> grad_input;  // empty when not requested
  LayerGrads<Scalar> grads;
};

/// Gradients of a batch. Parameter gradients are summed over samples in
/// index order.
template <typename Scalar>
BackwardResult<Scalar> backward_layer(const Layer<Scalar>& layer, const Tensor<Scalar>& grad_out,
                                      const LayerCache<Scalar>& cache, bool need_grad_input = true) {
  if (cache.kind_index != layer.kind.index() || cache.input.empty())
    throw InternalError("backward_layer: cache missing or produced by a different layer kind");
  const Tensor<Scalar>& input = cache.input;
  const Index n = input.dim(0);
  const Shape in = detail::sample_shape(input.shape());
  const Shape out_shape = layer_output_shape(layer.kind, in);
  if (grad_out.shape() != detail::batched(n, out_shape))
    throw InternalError("backward_layer: gradient shape " + shape_string(grad_out.shape()) +
                        " does not match forward output");

  BackwardResult<Scalar> r;
  r.grads = LayerGrads<Scalar>::zeros_like(layer);
  if (need_grad_input) r.grad_input = Tensor<Scalar>(input.shape());

  std::visit(
      Overloaded{
          [&](const Conv2d& c) {
            const Index ho = out_shape[1], wo = out_shape[2], ckk = c.c_in * c.k_h * c.k_w;
            Eigen::Map<const RowMatrix<Scalar>> wmat(layer.weight.data(), c.c_out, ckk);
            Eigen::Map<RowMatrix<Scalar>> gw(r.grads.weight.data(), c.c_out, ckk);
            for (Index s = 0; s < n; ++s) {
              RowMatrix<Scalar> cols = detail::im2col(input.slice(s).data(), c, in[1], in[2], ho, wo);
              Eigen::Map<const RowMatrix<Scalar>> g(grad_out.slice(s).data(), c.c_out, ho * wo);
              gw.noalias() += g * cols.transpose();
              if (c.bias) r.grads.bias.vec() += g.rowwise().sum();
              if (need_grad_input) {
                RowMatrix<Scalar> gcols = wmat.transpose() * g;
                detail::col2im_add(gcols, c, in[1], in[2], ho, wo, r.grad_input.slice(s).data());
              }
            }
          },
          [&](const Dense& d) {
            Eigen::Map<const RowMatrix<Scalar>> wmat(layer.weight.data(), d.n_out, d.n_in);
            Eigen::Map<RowMatrix<Scalar>> gw(r.grads.weight.data(), d.n_out, d.n_in);
            for (Index s = 0; s < n; ++s) {
              auto g = grad_out.slice(s);
              gw.noalias() += g * input.slice(s).transpose();
              if (d.bias) r.grads.bias.vec() += g;
              if (need_grad_input) r.grad_input.slice(s).noalias() = wmat.transpose() * g;
            }
          },
          [&](const Relu&) {
            if (need_grad_input)
              r.grad_input.vec() =
                  (input.vec().array() > Scalar(0)).select(grad_out.vec(), Vector<Scalar>::Zero(input.size()));
          },
          [&](const MaxPool&) {
            if (!need_grad_input) return;
            if (cache.argmax.size() != static_cast<std::size_t>(grad_out.size()))
              throw InternalError("backward_layer: maxpool cache has no argmax record");
            const Index per_out = grad_out.slice_size();
            for (Index s = 0; s < n; ++s) {
              Scalar* gx = r.grad_input.slice(s).data();
              const Scalar* g = grad_out.slice(s).data();
              for (Index o = 0; o < per_out; ++o) gx[cache.argmax[static_cast<std::size_t>(s * per_out + o)]] += g[o];
            }
          },
          [&](const GlobalAvgPool&) {
            if (!need_grad_input) return;
            const Index c = in[0], hw = in[1] * in[2];
            for (Index s = 0; s < n; ++s) {
              Eigen::Map<RowMatrix<Scalar>> gx(r.grad_input.slice(s).data(), c, hw);
              gx = (grad_out.slice(s) / static_cast<Scalar>(hw)).replicate(1, hw);
            }
          }},
      layer.kind);
  return r;
}

/// SGD with momentum: v <- momentum * v + g; p <- p - lr * v.
template <typename Scalar>
void sgd_step(Layer<Scalar>& layer, const LayerGrads<Scalar>& grads, LayerGrads<Scalar>& velocity, double lr,
              double momentum) {
  if (!(lr > 0.0)) throw ConfigError("sgd_step: learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("sgd_step: momentum must be in [0, 1)");
  if (!grads.all_finite()) throw TrainingError("sgd_step: non-finite gradient in " + kind_name(layer.kind) + " layer");
  const auto mu = static_cast<Scalar>(momentum);
  const auto eta = static_cast<Scalar>(lr);
  auto update = [&](Tensor<Scalar>& p, const Tensor<Scalar>& g, Tensor<Scalar>& v) {
    if (p.empty()) return;
    if (v.empty()) v = Tensor<Scalar>(p.shape());
    v.vec() = mu * v.vec() + g.vec();
    p.vec() -= eta * v.vec();
  };
  update(layer.weight, grads.weight, velocity.weight);
  update(layer.bias, grads.bias, velocity.bias);
}

/// Temperature softmax with max subtraction.
template <typename Derived>
Vector<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits, double temperature = 1.0) {
  using Scalar = typename Derived::Scalar;
  if (!(temperature > 0.0)) throw ConfigError("softmax: temperature must be positive");
  if (logits.size() < 1) throw ConfigError("softmax: empty logits");
  const Vector<Scalar> z = logits / static_cast<Scalar>(temperature);
  Vector<Scalar> e = (z.array() - z.maxCoeff()).exp();
  return e / e.sum();
}

/// Index of the largest value; ties go to the lowest index.
template <typename Derived>
Index argmax(const Eigen::MatrixBase<Derived>& v) {
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace mexit
