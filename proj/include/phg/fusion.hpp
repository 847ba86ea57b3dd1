#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "phg/tensor.hpp"

namespace phg {

enum class Activation { identity, relu, sigmoid };

bool zero_preserving(Activation a);

struct ConvLayer {
  Tensor kernels;  // [Co, Ci, kh, kw]
  Tensor bias;     // [Co], or empty for no bias
  std::size_t padding = 0;
  Activation activation = Activation::identity;

  std::size_t out_channels() const { return kernels.dim(0); }
  std::size_t in_channels() const { return kernels.dim(1); }
};

Tensor apply_activation(Tensor x, Activation a);
Tensor conv_layer_forward(const ConvLayer& layer, const Tensor& input);

struct SourceSpec {
  std::string name;
  std::size_t channels = 0;
};

// Single-hop edge or hyper-edge: sources -> target through a conv stack. The
// first layer consumes the sources stacked in the listed order.
struct EdgeNet {
  std::vector<SourceSpec> sources;
  std::string target;
  std::vector<ConvLayer> layers;

  std::size_t input_channels() const;
  void validate() const;
};

Tensor edge_forward(const EdgeNet& edge, const Tensor& stacked_sources);

struct EdgeSelector {
  // Rows of the fused input space read by the edge, in the edge's own order.
  std::vector<std::size_t> input_rows;
  // Per layer, the fused output rows [first, second) owned by the edge.
  std::vector<std::pair<std::size_t, std::size_t>> out_rows;
};

struct FusedNet {
  // Ordered union of all edge sources; fixes the stacked input layout.
  std::vector<SourceSpec> input_space;
  std::vector<ConvLayer> layers;
  std::vector<EdgeSelector> selectors;

  std::size_t input_channels() const;
  std::size_t edge_count() const { return selectors.size(); }
};

// Embeds the edges block-diagonally. Throws DataError for inconsistent channel
// chains, differing layer counts or kernel geometry, non zero-preserving
// activations, conflicting source declarations, or two-hop edges.
FusedNet fuse_conv_edges(const std::vector<EdgeNet>& edges);

// Stacks named modality tensors into the fused input space.
Tensor stack_input_space(const FusedNet& fused, const std::map<std::string, Tensor>& modalities);

Tensor fused_forward(const FusedNet& fused, const Tensor& stacked_input);

// Zeroes every input row outside the edge, runs the fused network and slices
// the edge's output rows.
Tensor recover_edge(const FusedNet& fused, std::size_t edge_index, const Tensor& stacked_input);

// 1 where a fused kernel entry lies inside some edge's block, 0 elsewhere.
Tensor edge_block_mask(const FusedNet& fused, std::size_t layer);

// Kernel weights only; biases are counted separately so that zero_fraction
// reflects the block structure.
struct FusionCost {
  std::size_t params_separate = 0;
  std::size_t params_fused = 0;
  std::size_t bias_separate = 0;
  std::size_t bias_fused = 0;
  double zero_fraction = 0.0;
};

FusionCost fusion_cost(const std::vector<EdgeNet>& edges);

}  // namespace phg
