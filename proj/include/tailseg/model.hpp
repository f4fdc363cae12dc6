#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "tailseg/autodiff.hpp"
#include "tailseg/rng.hpp"
#include "tailseg/serialize.hpp"
#include "tailseg/synthdata.hpp"
#include "tailseg/tensor.hpp"

namespace tailseg {

// Point model: a small MLP backbone over K-NN-augmented coordinates plus a
// linear classifier head. The two parameter groups train independently, so
// graph builders take a trainable flag per group; a frozen group enters the
// tape as constants and cannot receive updates by construction.

inline constexpr std::size_t kPointFeatureDim = 6;  // xyz ++ mean neighbor xyz

using NeighborIndex = std::vector<std::vector<std::size_t>>;

/// Exact K nearest neighbors by Euclidean distance, self excluded, ties by
/// lower point index. K is clamped to N-1 on tiny scenes.
inline NeighborIndex build_knn(const Scene& scene, std::size_t K) {
  const std::size_t N = scene.point_count();
  if (K == 0) throw std::invalid_argument("knn: K must be positive");
  if (N < 2) throw std::invalid_argument("knn: need at least 2 points");
  const std::size_t k = std::min(K, N - 1);

  NeighborIndex nn(N);
  std::vector<std::pair<double, std::size_t>> dists;
  dists.reserve(N - 1);
  for (std::size_t i = 0; i < N; ++i) {
    dists.clear();
    for (std::size_t j = 0; j < N; ++j) {
      if (j == i) continue;
      double d2 = 0.0;
      for (std::size_t d = 0; d < 3; ++d) {
        const double diff = scene.points(i, d) - scene.points(j, d);
        d2 += diff * diff;
      }
      dists.emplace_back(d2, j);
    }
    std::partial_sort(dists.begin(), dists.begin() + static_cast<long>(k),
                      dists.end());
    nn[i].reserve(k);
    for (std::size_t m = 0; m < k; ++m) nn[i].push_back(dists[m].second);
  }
  return nn;
}

/// Per-point model input: own coordinates followed by the mean of the
/// neighbors' coordinates.
inline Tensor augmented_inputs(const Scene& scene, const NeighborIndex& nn) {
  const std::size_t N = scene.point_count();
  if (nn.size() != N)
    throw std::invalid_argument("model: neighbor index size " +
                                std::to_string(nn.size()) + " for " +
                                std::to_string(N) + " points");
  Tensor aug(N, kPointFeatureDim);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t d = 0; d < 3; ++d) aug(i, d) = scene.points(i, d);
    if (nn[i].empty())
      throw std::invalid_argument("model: point " + std::to_string(i) +
                                  " has no neighbors");
    double mean[3] = {0, 0, 0};
    for (std::size_t j : nn[i])
      for (std::size_t d = 0; d < 3; ++d) mean[d] += scene.points(j, d);
    for (std::size_t d = 0; d < 3; ++d)
      aug(i, 3 + d) = mean[d] / static_cast<double>(nn[i].size());
  }
  return aug;
}

struct BackboneParams {
  Tensor W1{0, 0}, b1{0, 0}, W2{0, 0}, b2{0, 0};

  std::size_t hidden_width() const { return W1.cols(); }

  void validate() const {
    const std::size_t H = W1.cols();
    if (W1.rows() != kPointFeatureDim || b1.rows() != 1 || b1.cols() != H ||
        W2.rows() != H || W2.cols() != H || b2.rows() != 1 || b2.cols() != H)
      throw std::invalid_argument("backbone: inconsistent parameter shapes");
    if (!W1.all_finite() || !b1.all_finite() || !W2.all_finite() ||
        !b2.all_finite())
      throw std::invalid_argument("backbone: non-finite parameters");
  }
};

struct ClassifierParams {
  Tensor Wc{0, 0}, bc{0, 0};

  std::size_t class_count() const { return Wc.cols(); }

  void validate(std::size_t hidden) const {
    if (Wc.rows() != hidden || bc.rows() != 1 || bc.cols() != Wc.cols())
      throw std::invalid_argument("classifier: inconsistent parameter shapes");
    if (!Wc.all_finite() || !bc.all_finite())
      throw std::invalid_argument("classifier: non-finite parameters");
  }
};

struct ModelParams {
  BackboneParams backbone;
  ClassifierParams classifier;

  void validate() const {
    backbone.validate();
    classifier.validate(backbone.hidden_width());
  }
};

namespace detail {

inline Tensor glorot_uniform(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor w(fan_in, fan_out);
  for (double& v : w.values()) v = rng.uniform(-a, a);
  return w;
}

}  // namespace detail

/// Fresh parameters: Glorot-uniform weights, zero biases.
inline ModelParams init_model(std::size_t class_count, std::size_t hidden,
                              std::uint64_t seed) {
  if (class_count < 2) throw std::invalid_argument("model: need >= 2 classes");
  if (hidden < 1) throw std::invalid_argument("model: hidden width must be >= 1");
  Rng rng(derive_seed(seed, "init"));
  ModelParams p;
  p.backbone.W1 = detail::glorot_uniform(rng, kPointFeatureDim, hidden);
  p.backbone.b1 = Tensor(1, hidden);
  p.backbone.W2 = detail::glorot_uniform(rng, hidden, hidden);
  p.backbone.b2 = Tensor(1, hidden);
  p.classifier.Wc = detail::glorot_uniform(rng, hidden, class_count);
  p.classifier.bc = Tensor(1, class_count);
  return p;
}

inline std::vector<Tensor> backbone_tensors(const BackboneParams& p) {
  return {p.W1, p.b1, p.W2, p.b2};
}

inline std::vector<Tensor> classifier_tensors(const ClassifierParams& p) {
  return {p.Wc, p.bc};
}

/// Appends the backbone to the tape and returns the N x H feature node.
/// When trainable, W1, b1, W2, b2 become input leaves (bind them via
/// backbone_tensors in forward order) and their node ids land in param_ids.
inline NodeId append_backbone(Tape& tape, const Tensor& aug,
                              const BackboneParams& p, bool trainable,
                              std::vector<NodeId>* param_ids = nullptr) {
  p.validate();
  if (aug.cols() != kPointFeatureDim)
    throw std::invalid_argument("backbone: input width " +
                                std::to_string(aug.cols()) + ", expected " +
                                std::to_string(kPointFeatureDim));
  const NodeId x = tape.add_constant(aug);
  NodeId w1, b1, w2, b2;
  if (trainable) {
    w1 = tape.add_parameter(p.W1.shape());
    b1 = tape.add_parameter(p.b1.shape());
    w2 = tape.add_parameter(p.W2.shape());
    b2 = tape.add_parameter(p.b2.shape());
    if (param_ids) {
      param_ids->push_back(w1);
      param_ids->push_back(b1);
      param_ids->push_back(w2);
      param_ids->push_back(b2);
    }
  } else {
    w1 = tape.add_constant(p.W1);
    b1 = tape.add_constant(p.b1);
    w2 = tape.add_constant(p.W2);
    b2 = tape.add_constant(p.b2);
  }
  const NodeId h1 = tape.relu(tape.row_broadcast_add(tape.matmul(x, w1), b1));
  return tape.relu(tape.row_broadcast_add(tape.matmul(h1, w2), b2));
}

/// Appends the linear classifier head; returns the N x C logit node.
inline NodeId append_classifier(Tape& tape, NodeId features,
                                const ClassifierParams& p, bool trainable,
                                std::vector<NodeId>* param_ids = nullptr) {
  p.validate(tape.shape_of(features).cols);
  NodeId wc, bc;
  if (trainable) {
    wc = tape.add_parameter(p.Wc.shape());
    bc = tape.add_parameter(p.bc.shape());
    if (param_ids) {
      param_ids->push_back(wc);
      param_ids->push_back(bc);
    }
  } else {
    wc = tape.add_constant(p.Wc);
    bc = tape.add_constant(p.bc);
  }
  return tape.row_broadcast_add(tape.matmul(features, wc), bc);
}

/// Plain evaluation of the backbone: N x H features.
inline Tensor extract_features(const BackboneParams& p, const Scene& scene,
                               const NeighborIndex& nn) {
  Tape tape;
  append_backbone(tape, augmented_inputs(scene, nn), p, false);
  return tape.forward({});
}

/// Row-softmax class probabilities from precomputed features.
inline Tensor predict_probs(const ClassifierParams& p, const Tensor& features) {
  Tape tape;
  const NodeId f = tape.add_constant(features);
  tape.row_softmax(append_classifier(tape, f, p, false));
  return tape.forward({});
}

// Checkpoint format: magic "TSEGCKPT", version byte, u32 C, u32 H, u32 K,
// then W1, b1, W2, b2, Wc, bc as little-endian 64-bit floats in that order.

inline constexpr std::string_view kCheckpointMagic = "TSEGCKPT";
inline constexpr std::uint8_t kCheckpointVersion = 1;

inline std::vector<std::uint8_t> checkpoint_bytes(const ModelParams& params,
                                                  std::size_t K) {
  params.validate();
  const std::size_t H = params.backbone.hidden_width();
  const std::size_t C = params.classifier.class_count();
  std::vector<std::uint8_t> out;
  for (char c : kCheckpointMagic) out.push_back(static_cast<std::uint8_t>(c));
  put_u8(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(C));
  put_u32(out, static_cast<std::uint32_t>(H));
  put_u32(out, static_cast<std::uint32_t>(K));
  put_tensor(out, params.backbone.W1);
  put_tensor(out, params.backbone.b1);
  put_tensor(out, params.backbone.W2);
  put_tensor(out, params.backbone.b2);
  put_tensor(out, params.classifier.Wc);
  put_tensor(out, params.classifier.bc);
  return out;
}

inline ModelParams checkpoint_from_bytes(std::span<const std::uint8_t> bytes,
                                         std::size_t* K_out = nullptr) {
  ByteReader r(bytes);
  r.expect_bytes(kCheckpointMagic, "checkpoint magic");
  const std::uint8_t version = r.u8();
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint version " + std::to_string(version) +
                             " unsupported");
  const std::size_t C = r.u32();
  const std::size_t H = r.u32();
  const std::size_t K = r.u32();
  if (C < 2 || H < 1 || K < 1)
    throw std::runtime_error("checkpoint header has degenerate dimensions");
  ModelParams p;
  p.backbone.W1 = r.tensor(kPointFeatureDim, H);
  p.backbone.b1 = r.tensor(1, H);
  p.backbone.W2 = r.tensor(H, H);
  p.backbone.b2 = r.tensor(1, H);
  p.classifier.Wc = r.tensor(H, C);
  p.classifier.bc = r.tensor(1, C);
  p.validate();
  if (K_out) *K_out = K;
  return p;
}

inline void save_checkpoint(const std::string& path, const ModelParams& params,
                            std::size_t K) {
  write_file_bytes(path, checkpoint_bytes(params, K));
}

inline ModelParams load_checkpoint(const std::string& path,
                                   std::size_t* K_out = nullptr) {
  const auto bytes = read_file_bytes(path);
  return checkpoint_from_bytes(bytes, K_out);
}

}  // namespace tailseg
