#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "phg/tensor.hpp"

namespace phg {

inline constexpr std::size_t kSemanticClasses = 8;
inline constexpr std::array<const char*, kSemanticClasses> kClassNames{
    "land", "forest", "residential", "road", "little-objects", "water", "sky", "hill"};

struct ClassWeights {
  std::vector<double> values;

  // Fixed benchmark weights for the eight semantic classes.
  static ClassWeights dronescapes();
  static ClassWeights uniform(std::size_t classes);
  // Throws DataError unless the weights are non-negative and sum to 1 within 1e-6.
  void validate() const;
};

// One-vs-rest counts per class, summed over every pixel accumulated.
struct ConfusionAccumulator {
  std::size_t classes = 0;
  std::vector<std::uint64_t> tp, fp, tn, fn;
  std::uint64_t pixels = 0;
  std::uint64_t frames = 0;

  explicit ConfusionAccumulator(std::size_t k = kSemanticClasses);
  // Throws DataError on shape mismatch or labels >= classes.
  void add(const LabelMap& pred, const LabelMap& gt);
  void merge(const ConfusionAccumulator& other);
};

enum class EmptyClassRule {
  zero,  // classes absent from prediction and ground truth score IoU 0
  skip,  // such classes are dropped and the remaining weights renormalized
};

// Per-class IoU; nullopt where tp+fp+fn == 0.
std::vector<std::optional<double>> class_iou(const ConfusionAccumulator& acc);

// 100 * sum_c w_c IoU_c.
double weighted_miou_scene(const ConfusionAccumulator& acc, const ClassWeights& weights,
                           EmptyClassRule rule = EmptyClassRule::zero);

struct SceneScore {
  std::string scene;
  std::uint64_t frames = 0;
  std::vector<std::optional<double>> iou;
  double score = 0.0;
};

SceneScore score_scene(const std::string& scene, const ConfusionAccumulator& acc, const ClassWeights& weights,
                       EmptyClassRule rule = EmptyClassRule::zero);

struct SceneFrames {
  std::string scene;
  std::vector<LabelMap> pred;
  std::vector<LabelMap> gt;
};

struct BenchmarkReport {
  std::vector<SceneScore> scenes;
  double final_score = 0.0;
};

// Each scene accumulates all of its frames into one confusion matrix; the final
// score is the unweighted mean of scene scores.
BenchmarkReport benchmark(const std::vector<SceneFrames>& scenes, const ClassWeights& weights,
                          EmptyClassRule rule = EmptyClassRule::zero);
double mean_scene_score(const std::vector<SceneScore>& scenes);

// 100 * mean squared error over the channels of valid pixels. `valid` is an
// optional [H*W] pixel mask.
double l2_metric(const Tensor& pred, const Tensor& gt, const std::vector<std::uint8_t>* valid = nullptr);

struct ConsistencyParams {
  bool occlusion_check = true;
  double fb_threshold = 1.0;  // pixels
};

struct FrameTemporalScore {
  std::size_t frame = 0;
  std::size_t valid_pixels = 0;
  double score = 0.0;  // mean of per-pixel m/2 in [0,1]
  bool skipped = false;
  Tensor score_map;  // [H,W]; m/2 for valid pixels, -1 for dropped ones
};

struct ConsistencyReport {
  double score = 0.0;  // 100 * mean over scored interior frames
  std::vector<FrameTemporalScore> frames;
  std::vector<std::string> warnings;
};

// `flow_bwd[t]` maps frame t to t-1 and `flow_fwd[t]` maps t to t+1, each
// [2,H,W] holding (dx, dy). Entries that are never consulted may be empty.
// A pixel is dropped when either warp leaves the image or, with the occlusion
// check on, fails the forward-backward round trip by more than the threshold.
ConsistencyReport temporal_consistency(const std::vector<LabelMap>& maps, const std::vector<Tensor>& flow_bwd,
                                       const std::vector<Tensor>& flow_fwd, const ConsistencyParams& params = {});

}  // namespace phg
