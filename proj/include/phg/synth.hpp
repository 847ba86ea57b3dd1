#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "phg/io.hpp"
#include "phg/tensor.hpp"

namespace phg {

struct ExpertNoise {
  double flip_rate = 0.12;  // target fraction of pixels inside corruption blobs
  double blob_min = 2.0;    // blob radius range in pixels
  double blob_max = 6.0;
};

struct SyntheticSceneSpec {
  std::string name = "scene";
  std::uint64_t seed = 0;
  std::size_t frames = 12;
  std::size_t height = 64;
  std::size_t width = 96;
  int vx = 1;  // camera translation per frame, pixels
  int vy = 1;

  std::size_t octaves = 3;
  double feature_scale = 32.0;  // coarsest noise period, pixels
  std::size_t buildings = 7;
  std::size_t roads = 2;
  std::size_t cars = 10;
  std::size_t persons = 8;
  double water_quantile = 0.12;
  double hill_quantile = 0.85;
  double forest_threshold = 0.55;
  double sky_rows = 7.0;
  double sky_wave = 3.0;

  double rgb_noise = 0.06;
  double texture = 0.10;
  double color_cast = 0.12;

  std::array<ExpertNoise, 3> experts{ExpertNoise{0.10}, ExpertNoise{0.15}, ExpertNoise{0.20}};
  // Per-frame multiplier on every expert's flip rate, exp(U(-j, j)).
  double noise_jitter = 0.9;
  double depth_noise = 0.03;
  double depth_noise_scale = 10.0;
  double depth_bias = 0.04;

  void validate() const;
};

// Reads [gen] defaults and optional [scene.<name>] overrides. Without scene
// sections, gen.scenes scenes named <prefix>-<i> are produced with seeds mixed
// from gen.seed.
std::vector<SyntheticSceneSpec> scene_specs_from_config(const Config& config);

struct RenderedFrame {
  Tensor rgb;          // [3,H,W]
  LabelMap fine;       // source taxonomy
  LabelMap semantic;   // target classes
  Tensor depth;        // [1,H,W] in [0,1]
  Tensor normals;      // [3,H,W] encoded (n+1)/2
  Tensor flow_fwd;     // [2,H,W], t -> t+1
  Tensor flow_bwd;     // [2,H,W], t -> t-1
  std::vector<std::uint8_t> border;  // [H*W], 1 within one pixel of a depth step
};

struct RenderedScene {
  SyntheticSceneSpec spec;
  std::vector<RenderedFrame> frames;
};

RenderedScene gen_scene(const SyntheticSceneSpec& spec);

struct ExpertFrame {
  std::array<LabelMap, 3> semantic;  // source taxonomy
  Tensor depth;                      // [1,H,W]
  double noise_scale = 1.0;          // per-frame flip-rate multiplier
};

std::vector<ExpertFrame> simulate_experts(const RenderedScene& scene);

// Writes rgb, gt-*, flow-* and the raw expert modalities under dir.
void write_scene(const fs::path& dir, const RenderedScene& scene, const std::vector<ExpertFrame>& experts);

}  // namespace phg
