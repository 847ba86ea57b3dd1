#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "phg/io.hpp"
#include "phg/rng.hpp"
#include "phg/tensor.hpp"

namespace phg {

// Source taxonomy of the simulated semantic experts. Consecutive pairs map
// onto the eight target classes.
inline constexpr std::size_t kSourceClasses = 16;
inline constexpr std::array<const char*, kSourceClasses> kSourceClassNames{
    "grass", "dirt", "tree",  "bush",  "building", "roof",  "road",     "sidewalk",
    "car",   "person", "river", "lake", "sky",      "cloud", "mountain", "rock"};

std::optional<std::uint8_t> source_class_index(const std::string& name);
std::optional<std::uint8_t> target_class_index(const std::string& name);
std::vector<std::uint8_t> default_conversion_table();

enum class DeriveKind {
  convert,
  binarize,
  binarize_median,
  median,
  normals_svd,
  safe_landing_geometric,
  safe_landing_semantic,
  buildings_nearby,
  match_distribution,
};

const char* kind_name(DeriveKind kind);
DeriveKind parse_kind(const std::string& name);

struct DistributionStats {
  double mean = 0.0;
  double std = 1.0;
};

struct SafeLandingParams {
  std::size_t up_channel = 2;  // normal channel read as v2
  double up_min = 0.8;         // v2 > up_min
  double side_max = 1.2;       // v1 + v3 < side_max
  double depth_max = 0.9;      // depth <= depth_max
};

struct DerivationNode {
  std::string name;
  DeriveKind kind = DeriveKind::convert;
  std::vector<std::string> deps;
  std::vector<std::uint8_t> class_set;  // binarize kinds, safe_landing_semantic
  std::vector<std::uint8_t> table;      // convert: source index -> target class
  std::size_t window = 5;               // normals_svd
  double z_scale = 0.0;                 // normals_svd; 0 selects max(H, W)
  SafeLandingParams landing;
  double near_depth = 0.3;  // buildings_nearby: depth < near_depth
  DistributionStats source_stats, target_stats;

  // Canonical text of every parameter; part of the output content hash.
  std::string params_key() const;
  void validate() const;
};

// Kahn's algorithm; among ready nodes the smallest name goes first, or a random
// one when `shuffle` is given. Dependencies that name no node are external.
// Throws DataError naming the cycle.
std::vector<std::size_t> topo_order(const std::vector<DerivationNode>& nodes, Rng* shuffle = nullptr);

// [1,H,W] map, 1 where the class is in the set.
Tensor binarize(const LabelMap& map, const std::vector<std::uint8_t>& class_set);
LabelMap convert_classes(const LabelMap& map, const std::vector<std::uint8_t>& table);
// Per-pixel median of class indices over an odd number of maps.
LabelMap median_of_experts(const std::vector<LabelMap>& maps);
Tensor binary_median(const std::vector<Tensor>& maps);

// Plane fit per pixel over a window of points (x, y, depth * z_scale); the
// window is clipped at the borders. Returns (n + 1) / 2 with n_z >= 0, channels
// (x, y, z). z_scale <= 0 selects max(H, W).
Tensor normals_from_depth_svd(const Tensor& depth, std::size_t window, double z_scale = 0.0);
Tensor safe_landing_geometric(const Tensor& normals, const Tensor& depth, const SafeLandingParams& p = {});
Tensor buildings_nearby(const Tensor& buildings, const Tensor& depth, double near_depth = 0.3);
Tensor binary_and(const Tensor& a, const Tensor& b);

DistributionStats compute_stats(const Tensor& x);
Tensor match_distribution(const Tensor& x, const DistributionStats& source, const DistributionStats& target);

// The full graph: three converted semantic experts, SVD normals, eight binary
// maps and the semantic median.
std::vector<DerivationNode> default_derivation_graph();
std::vector<DerivationNode> nodes_from_config(const Config& config);

struct PipelineOptions {
  std::size_t jobs = 1;
  std::optional<std::uint64_t> shuffle_seed;  // randomize order among ready nodes
};

struct PipelineResult {
  std::size_t written = 0;
  std::size_t skipped = 0;
};

// Materializes every node for every rgb frame of the scene. Outputs whose
// sidecar hash matches the node parameters and dependency bytes are skipped.
PipelineResult run_pipeline(const fs::path& scene, const std::vector<DerivationNode>& nodes,
                            const PipelineOptions& options = {});

}  // namespace phg
