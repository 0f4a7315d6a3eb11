#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mexit/layers.hpp"

namespace mexit {

template <typename Scalar>
using LayerStack = std::vector<Layer<Scalar>>;

/// Early-exit classifier attached after backbone block `block` (0-based).
template <typename Scalar>
struct ExitHead {
  Index block = 0;
  LayerStack<Scalar> layers;
};

/// Chain backbone with M early exits. Exit ordinals are 1-based: exits
/// 1..M are the attached heads, exit M+1 is the backbone's own classifier.
template <typename Scalar_>
struct ModelGraph {
  using Scalar = Scalar_;

  Shape input_shape;  // per sample, CxHxW
  Index num_classes = 0;
  std::vector<LayerStack<Scalar>> blocks;
  LayerStack<Scalar> classifier;
  std::vector<ExitHead<Scalar>> exits;

  Index num_exits() const { return static_cast<Index>(exits.size()); }
  Index final_exit() const { return num_exits() + 1; }

  template <typename Other>
  ModelGraph<Other> cast() const {
    ModelGraph<Other> m;
    m.input_shape = input_shape;
    m.num_classes = num_classes;
    auto conv = [](const LayerStack<Scalar>& s) {
      LayerStack<Other> o;
      for (const auto& l : s) o.push_back(l.template cast<Other>());
      return o;
    };
    for (const auto& b : blocks) m.blocks.push_back(conv(b));
    m.classifier = conv(classifier);
    for (const auto& e : exits) m.exits.push_back({e.block, conv(e.layers)});
    return m;
  }
};

using Model = ModelGraph<float>;

/// Per-sample output shape of a layer stack.
inline Shape stack_output_shape(const std::vector<LayerKind>& kinds, Shape shape) {
  for (const auto& k : kinds) shape = layer_output_shape(k, shape);
  return shape;
}

template <typename Scalar>
std::vector<LayerKind> kinds_of(const LayerStack<Scalar>& stack) {
  std::vector<LayerKind> k;
  for (const auto& l : stack) k.push_back(l.kind);
  return k;
}

template <typename Scalar>
std::int64_t stack_flops(const LayerStack<Scalar>& stack, Shape shape) {
  std::int64_t total = 0;
  for (const auto& l : stack) {
    total += count_layer_flops(l.kind, shape);
    shape = layer_output_shape(l.kind, shape);
  }
  return total;
}

template <typename Scalar>
std::int64_t stack_params(const LayerStack<Scalar>& stack) {
  std::int64_t total = 0;
  for (const auto& l : stack) total += count_layer_params(l.kind);
  return total;
}

/// Output shape after every backbone block; element 0 is the input shape.
template <typename Scalar>
std::vector<Shape> block_shapes(const ModelGraph<Scalar>& m) {
  std::vector<Shape> shapes{m.input_shape};
  for (const auto& b : m.blocks) shapes.push_back(stack_output_shape(kinds_of(b), shapes.back()));
  return shapes;
}

template <typename Scalar>
std::vector<std::int64_t> block_flops(const ModelGraph<Scalar>& m) {
  const auto shapes = block_shapes(m);
  std::vector<std::int64_t> f;
  for (std::size_t b = 0; b < m.blocks.size(); ++b) f.push_back(stack_flops(m.blocks[b], shapes[b]));
  return f;
}

/// Structural validation; throws ConfigError.
template <typename Scalar>
void validate(const ModelGraph<Scalar>& m) {
  if (m.blocks.empty()) throw ConfigError("model has no backbone blocks");
  if (m.num_classes < 1) throw ConfigError("model needs at least one class");
  const auto shapes = block_shapes(m);
  auto ends_in_k = [&](const LayerStack<Scalar>& s, const Shape& in) {
    const Shape out = stack_output_shape(kinds_of(s), in);
    return !s.empty() && std::holds_alternative<Dense>(s.back().kind) && out == Shape{m.num_classes};
  };
  if (!ends_in_k(m.classifier, shapes.back())) throw ConfigError("final classifier must end in dense(->K)");
  Index prev = -1;
  for (const auto& e : m.exits) {
    if (e.block <= prev || e.block >= static_cast<Index>(m.blocks.size()))
      throw ConfigError("exit placements must be strictly increasing and inside the backbone");
    if (!ends_in_k(e.layers, shapes[static_cast<std::size_t>(e.block) + 1]))
      throw ConfigError("exit head must end in dense(->K)");
    prev = e.block;
  }
}

/// FLOPs of exit i's own head (i = M+1 is the final classifier).
template <typename Scalar>
std::int64_t head_flops(const ModelGraph<Scalar>& m, Index exit) {
  const auto shapes = block_shapes(m);
  if (exit == m.final_exit()) return stack_flops(m.classifier, shapes.back());
  const auto& e = m.exits.at(static_cast<std::size_t>(exit - 1));
  return stack_flops(e.layers, shapes[static_cast<std::size_t>(e.block) + 1]);
}

template <typename Scalar>
std::int64_t head_params(const ModelGraph<Scalar>& m, Index exit) {
  if (exit == m.final_exit()) return stack_params(m.classifier);
  return stack_params(m.exits.at(static_cast<std::size_t>(exit - 1)).layers);
}

/// Backbone FLOPs up to (and including) the block exit i hangs off.
template <typename Scalar>
std::int64_t backbone_prefix_flops(const ModelGraph<Scalar>& m, Index exit) {
  const auto f = block_flops(m);
  const std::size_t end =
      exit == m.final_exit() ? f.size() : static_cast<std::size_t>(m.exits.at(static_cast<std::size_t>(exit - 1)).block) + 1;
  std::int64_t total = 0;
  for (std::size_t b = 0; b < end; ++b) total += f[b];
  return total;
}

template <typename Scalar>
std::int64_t backbone_params(const ModelGraph<Scalar>& m) {
  std::int64_t total = 0;
  for (const auto& b : m.blocks) total += stack_params(b);
  return total;
}

/// Parameters needed to produce exit i: backbone prefix plus its head.
template <typename Scalar>
std::int64_t params_to_exit(const ModelGraph<Scalar>& m, Index exit) {
  const std::size_t end = exit == m.final_exit() ? m.blocks.size()
                                                 : static_cast<std::size_t>(m.exits.at(static_cast<std::size_t>(exit - 1)).block) + 1;
  std::int64_t total = head_params(m, exit);
  for (std::size_t b = 0; b < end; ++b) total += stack_params(m.blocks[b]);
  return total;
}

/// Work done by an early-exit pass that stops at `exit`, evaluating the heads
/// in `selected` (ascending exit ordinals, final excluded) along the way.
template <typename Scalar>
std::int64_t flops_to_exit(const ModelGraph<Scalar>& m, Index exit, const std::vector<Index>& selected) {
  std::int64_t total = backbone_prefix_flops(m, exit);
  for (Index s : selected)
    if (s <= exit && s != m.final_exit()) total += head_flops(m, s);
  if (exit == m.final_exit()) total += head_flops(m, exit);
  return total;
}

/// Exit i (1-based) goes after the block whose cumulative FLOPs are nearest to
/// i/(M+1) of the backbone total. Returns 0-based block indices.
inline std::vector<Index> place_exits(const std::vector<std::int64_t>& block_flops, Index num_exits) {
  const auto n = static_cast<Index>(block_flops.size());
  if (num_exits < 1) throw ConfigError("place_exits: need at least one exit");
  if (n < num_exits)
    throw ConfigError("place_exits: backbone has " + std::to_string(n) + " blocks, cannot host " +
                      std::to_string(num_exits) + " exits");
  // Distances are compared as |cum_b * (M+1) - total * i| in integers so the
  // choice is exact and invariant to rescaling all block FLOPs.
  std::vector<std::int64_t> cumulative;
  std::int64_t total = 0;
  for (auto f : block_flops) cumulative.push_back(total += f);
  auto distance = [&](Index b, Index i) {
    const std::int64_t d = cumulative[static_cast<std::size_t>(b)] * (num_exits + 1) - total * i;
    return d < 0 ? -d : d;
  };
  std::vector<Index> placement;
  for (Index i = 1; i <= num_exits; ++i) {
    Index best = 0;
    for (Index b = 1; b < n; ++b)  // strict < keeps the earlier block on ties
      if (distance(b, i) < distance(best, i)) best = b;
    if (!placement.empty() && best <= placement.back()) best = placement.back() + 1;
    if (best >= n) throw ConfigError("place_exits: backbone too small for " + std::to_string(num_exits) + " distinct exits");
    placement.push_back(best);
  }
  return placement;
}

/// Two stride-2 3x3 conv+ReLU stages (each skipped when the map is smaller
/// than 3 in either dimension), global average pooling and dense(->K).
/// Conv width is min(C, max_channels).
inline std::vector<LayerKind> build_exit_head(const Shape& feature_shape, Index num_classes, Index max_channels = 16) {
  if (feature_shape.size() != 3) throw ConfigError("build_exit_head expects a CxHxW feature shape");
  std::vector<LayerKind> head;
  Shape s = feature_shape;
  const Index width = std::min(feature_shape[0], max_channels);
  for (int stage = 0; stage < 2; ++stage) {
    if (s[1] < 3 || s[2] < 3) continue;
    head.emplace_back(Conv2d{s[0], width, 3, 3, 2, 0, true});
    head.emplace_back(Relu{});
    s = stack_output_shape({head.end() - 2, head.end()}, s);
  }
  head.emplace_back(GlobalAvgPool{});
  head.emplace_back(Dense{s[0], num_classes, true});
  return head;
}

struct BackboneSpec {
  Shape input_shape{1, 28, 28};
  Index num_classes = 10;
  std::vector<Index> widths{16, 16, 32, 32, 64, 64, 128, 128};
  std::vector<Index> pool_after{2, 4, 6};  // 1-based block numbers
};

/// Chain CNN: each block is conv3x3(pad 1)+ReLU, optionally followed by
/// 2x2 max pooling; the classifier is global average pooling + dense.
template <typename Scalar = float>
ModelGraph<Scalar> make_backbone(const BackboneSpec& spec, std::uint64_t seed) {
  if (spec.input_shape.size() != 3) throw ConfigError("backbone input must be CxHxW");
  if (spec.widths.empty()) throw ConfigError("backbone needs at least one block");
  ModelGraph<Scalar> m;
  m.input_shape = spec.input_shape;
  m.num_classes = spec.num_classes;
  std::mt19937_64 rng(seed);
  Index c = spec.input_shape[0];
  for (std::size_t b = 0; b < spec.widths.size(); ++b) {
    LayerStack<Scalar> block;
    block.emplace_back(Conv2d{c, spec.widths[b], 3, 3, 1, 1, true});
    block.emplace_back(Relu{});
    if (std::find(spec.pool_after.begin(), spec.pool_after.end(), static_cast<Index>(b + 1)) != spec.pool_after.end())
      block.emplace_back(MaxPool{2, 2});
    for (auto& l : block) init_layer(l, rng);
    m.blocks.push_back(std::move(block));
    c = spec.widths[b];
  }
  m.classifier.emplace_back(GlobalAvgPool{});
  m.classifier.emplace_back(Dense{c, spec.num_classes, true});
  for (auto& l : m.classifier) init_layer(l, rng);
  validate(m);
  return m;
}

/// Attach M FLOP-equidistant exit heads. Heads draw from their own RNG
/// stream so the backbone initialisation does not depend on M.
template <typename Scalar>
void attach_exits(ModelGraph<Scalar>& m, Index num_exits, std::uint64_t seed, Index head_channels = 16) {
  const auto placement = place_exits(block_flops(m), num_exits);
  const auto shapes = block_shapes(m);
  std::seed_seq seq{seed, std::uint64_t{0x68656164}};
  std::mt19937_64 rng(seq);
  m.exits.clear();
  for (Index b : placement) {
    ExitHead<Scalar> e{b, {}};
    for (const auto& k : build_exit_head(shapes[static_cast<std::size_t>(b) + 1], m.num_classes, head_channels)) {
      e.layers.emplace_back(k);
      init_layer(e.layers.back(), rng);
    }
    m.exits.push_back(std::move(e));
  }
  validate(m);
}

namespace detail {
inline std::atomic<std::uint64_t> forward_samples{0};
}  // namespace detail

/// Samples pushed through forward_all_exits since process start.
inline std::uint64_t forward_sample_count() { return detail::forward_samples.load(); }

template <typename Scalar>
Tensor<Scalar> run_stack(const LayerStack<Scalar>& stack, Tensor<Scalar> x) {
  for (const auto& l : stack) x = forward_layer(l, x, false).output;
  return x;
}

template <typename Scalar>
void check_input(const ModelGraph<Scalar>& m, const Tensor<Scalar>& input) {
  if (input.rank() != 4 || detail::sample_shape(input.shape()) != m.input_shape)
    throw ConfigError("model expects Nx" + shape_string(m.input_shape) + " input, got " + shape_string(input.shape()));
}

/// Wall-clock seconds spent per backbone block and per head (exits 1..M+1).
struct ForwardTimings {
  std::vector<double> block_seconds;
  std::vector<double> head_seconds;
};

/// Logits (N x K) of every exit, 1..M+1, sharing one backbone pass.
template <typename Scalar>
std::vector<Tensor<Scalar>> forward_all_exits(const ModelGraph<Scalar>& m, const Tensor<Scalar>& input,
                                              ForwardTimings* timings = nullptr) {
  using Clock = std::chrono::steady_clock;
  check_input(m, input);
  detail::forward_samples += static_cast<std::uint64_t>(input.dim(0));
  if (timings) {
    timings->block_seconds.assign(m.blocks.size(), 0.0);
    timings->head_seconds.assign(static_cast<std::size_t>(m.final_exit()), 0.0);
  }
  auto timed = [&](double* slot, auto&& fn) {
    const auto t0 = Clock::now();
    auto r = fn();
    if (timings) *slot += std::chrono::duration<double>(Clock::now() - t0).count();
    return r;
  };
  std::vector<Tensor<Scalar>> out;
  out.reserve(static_cast<std::size_t>(m.final_exit()));
  Tensor<Scalar> x = input;
  std::size_t next = 0;
  double sink = 0.0;
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    x = timed(timings ? &timings->block_seconds[b] : &sink, [&] { return run_stack(m.blocks[b], std::move(x)); });
    for (; next < m.exits.size() && m.exits[next].block == static_cast<Index>(b); ++next)
      out.push_back(timed(timings ? &timings->head_seconds[next] : &sink, [&] { return run_stack(m.exits[next].layers, x); }));
  }
  out.push_back(timed(timings ? &timings->head_seconds.back() : &sink, [&] { return run_stack(m.classifier, std::move(x)); }));
  return out;
}

/// Logits of exit i only, computing just the backbone prefix it needs.
template <typename Scalar>
Tensor<Scalar> forward_to_exit(const ModelGraph<Scalar>& m, const Tensor<Scalar>& input, Index exit) {
  if (exit < 1 || exit > m.final_exit())
    throw ConfigError("exit " + std::to_string(exit) + " out of range 1.." + std::to_string(m.final_exit()));
  check_input(m, input);
  const bool final = exit == m.final_exit();
  const std::size_t end = final ? m.blocks.size() : static_cast<std::size_t>(m.exits[static_cast<std::size_t>(exit - 1)].block) + 1;
  Tensor<Scalar> x = input;
  for (std::size_t b = 0; b < end; ++b) x = run_stack(m.blocks[b], std::move(x));
  return run_stack(final ? m.classifier : m.exits[static_cast<std::size_t>(exit - 1)].layers, std::move(x));
}

/// Flattened copy of every parameter in declaration order.
template <typename Scalar>
std::vector<Scalar> backbone_parameters(const ModelGraph<Scalar>& m, bool include_classifier = true) {
  std::vector<Scalar> out;
  auto append = [&](const LayerStack<Scalar>& s) {
    for (const auto& l : s) {
      out.insert(out.end(), l.weight.data(), l.weight.data() + l.weight.size());
      out.insert(out.end(), l.bias.data(), l.bias.data() + l.bias.size());
    }
  };
  for (const auto& b : m.blocks) append(b);
  if (include_classifier) append(m.classifier);
  return out;
}

}  // namespace mexit
