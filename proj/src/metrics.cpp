#include "phg/metrics.hpp"

#include <cmath>

#include "phg/error.hpp"

namespace phg {

ClassWeights ClassWeights::dronescapes() {
  return ClassWeights{{0.28172092, 0.30589653, 0.13341699, 0.05937348, 0.00474491, 0.05987466, 0.08660721,
                       0.06836531}};
}

ClassWeights ClassWeights::uniform(std::size_t classes) {
  return ClassWeights{std::vector<double>(classes, 1.0 / static_cast<double>(classes))};
}

void ClassWeights::validate() const {
  if (values.empty()) throw DataError("empty class weights");
  double s = 0.0;
  for (double w : values) {
    if (!(w >= 0.0)) throw DataError("class weights must be non-negative");
    s += w;
  }
  if (std::abs(s - 1.0) > 1e-6) throw DataError("class weights sum to " + std::to_string(s) + ", expected 1");
}

ConfusionAccumulator::ConfusionAccumulator(std::size_t k) : classes(k), tp(k), fp(k), tn(k), fn(k) {}

void ConfusionAccumulator::add(const LabelMap& pred, const LabelMap& gt) {
  if (pred.height != gt.height || pred.width != gt.width || pred.size() != gt.size())
    throw DataError("prediction and ground truth differ in shape");
  std::vector<std::uint64_t> dtp(classes), dfp(classes), dfn(classes);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const std::size_t p = pred.labels[i], g = gt.labels[i];
    if (p >= classes || g >= classes) throw DataError("class index out of range in confusion accumulation");
    if (p == g) {
      ++dtp[p];
    } else {
      ++dfp[p];
      ++dfn[g];
    }
  }
  const std::uint64_t n = pred.size();
  for (std::size_t c = 0; c < classes; ++c) {
    tp[c] += dtp[c];
    fp[c] += dfp[c];
    fn[c] += dfn[c];
    tn[c] += n - dtp[c] - dfp[c] - dfn[c];
  }
  pixels += n;
  ++frames;
}

void ConfusionAccumulator::merge(const ConfusionAccumulator& other) {
  if (other.classes != classes) throw DataError("cannot merge accumulators with different class counts");
  for (std::size_t c = 0; c < classes; ++c) {
    tp[c] += other.tp[c];
    fp[c] += other.fp[c];
    tn[c] += other.tn[c];
    fn[c] += other.fn[c];
  }
  pixels += other.pixels;
  frames += other.frames;
}

std::vector<std::optional<double>> class_iou(const ConfusionAccumulator& acc) {
  std::vector<std::optional<double>> iou(acc.classes);
  for (std::size_t c = 0; c < acc.classes; ++c) {
    const std::uint64_t denom = acc.tp[c] + acc.fp[c] + acc.fn[c];
    if (denom > 0) iou[c] = static_cast<double>(acc.tp[c]) / static_cast<double>(denom);
  }
  return iou;
}

double weighted_miou_scene(const ConfusionAccumulator& acc, const ClassWeights& weights, EmptyClassRule rule) {
  if (weights.values.size() != acc.classes) throw DataError("class weight count does not match class count");
  if (acc.pixels == 0) throw DataError("empty confusion accumulator");
  const auto iou = class_iou(acc);
  double score = 0.0, mass = 0.0;
  for (std::size_t c = 0; c < acc.classes; ++c) {
    if (!iou[c] && rule == EmptyClassRule::skip) continue;
    score += weights.values[c] * iou[c].value_or(0.0);
    mass += weights.values[c];
  }
  if (rule == EmptyClassRule::skip) score = mass > 0.0 ? score / mass : 0.0;
  return 100.0 * score;
}

SceneScore score_scene(const std::string& scene, const ConfusionAccumulator& acc, const ClassWeights& weights,
                       EmptyClassRule rule) {
  return SceneScore{scene, acc.frames, class_iou(acc), weighted_miou_scene(acc, weights, rule)};
}

double mean_scene_score(const std::vector<SceneScore>& scenes) {
  if (scenes.empty()) throw DataError("benchmark needs at least one scene");
  double s = 0.0;
  for (const auto& sc : scenes) s += sc.score;
  return s / static_cast<double>(scenes.size());
}

BenchmarkReport benchmark(const std::vector<SceneFrames>& scenes, const ClassWeights& weights, EmptyClassRule rule) {
  BenchmarkReport report;
  for (const SceneFrames& sf : scenes) {
    if (sf.pred.size() != sf.gt.size()) throw DataError("scene " + sf.scene + " has unpaired frames");
    ConfusionAccumulator acc(weights.values.size());
    for (std::size_t i = 0; i < sf.pred.size(); ++i) acc.add(sf.pred[i], sf.gt[i]);
    report.scenes.push_back(score_scene(sf.scene, acc, weights, rule));
  }
  report.final_score = mean_scene_score(report.scenes);
  return report;
}

double l2_metric(const Tensor& pred, const Tensor& gt, const std::vector<std::uint8_t>* valid) {
  if (pred.shape() != gt.shape()) throw DataError("l2 metric shape mismatch");
  if (pred.rank() != 3) throw DataError("l2 metric expects [C,H,W]");
  const std::size_t plane = pred.dim(1) * pred.dim(2);
  if (valid && valid->size() != plane) throw DataError("valid mask does not match the image size");
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t c = 0; c < pred.dim(0); ++c)
    for (std::size_t i = 0; i < plane; ++i) {
      if (valid && !(*valid)[i]) continue;
      const double d = static_cast<double>(pred[c * plane + i]) - gt[c * plane + i];
      sum += d * d;
      ++count;
    }
  if (count == 0) throw DataError("l2 metric over an empty valid mask");
  return 100.0 * sum / static_cast<double>(count);
}

namespace {

struct Warp {
  bool ok = false;
  std::size_t y = 0, x = 0;
};

Warp warp(const Tensor& flow, std::size_t y, std::size_t x, std::size_t h, std::size_t w) {
  const double tx = std::round(x + static_cast<double>(flow.at(0, y, x)));
  const double ty = std::round(y + static_cast<double>(flow.at(1, y, x)));
  if (tx < 0 || ty < 0 || tx >= static_cast<double>(w) || ty >= static_cast<double>(h)) return {};
  return {true, static_cast<std::size_t>(ty), static_cast<std::size_t>(tx)};
}

// Round trip of `there` (t -> t') followed by `back` (t' -> t) at the landing pixel.
bool round_trip_ok(const Tensor& there, const Tensor& back, std::size_t y, std::size_t x, const Warp& to,
                   double threshold) {
  const double ex = static_cast<double>(there.at(0, y, x)) + back.at(0, to.y, to.x);
  const double ey = static_cast<double>(there.at(1, y, x)) + back.at(1, to.y, to.x);
  return std::hypot(ex, ey) <= threshold;
}

void check_flow(const std::vector<Tensor>& flows, std::size_t t, std::size_t h, std::size_t w, const char* what) {
  if (t >= flows.size() || flows[t].empty())
    throw DataError(std::string("missing ") + what + " flow for frame " + std::to_string(t));
  if (flows[t].shape() != Shape{2, h, w}) throw DataError(std::string(what) + " flow has wrong shape");
  ensure_finite(flows[t], "optical flow");
}

}  // namespace

ConsistencyReport temporal_consistency(const std::vector<LabelMap>& maps, const std::vector<Tensor>& flow_bwd,
                                       const std::vector<Tensor>& flow_fwd, const ConsistencyParams& params) {
  if (maps.size() < 3) throw DataError("temporal consistency needs at least 3 frames");
  const std::size_t h = maps[0].height, w = maps[0].width;
  for (const auto& m : maps)
    if (m.height != h || m.width != w) throw DataError("frames differ in size");

  ConsistencyReport report;
  double total = 0.0;
  std::size_t scored = 0;
  for (std::size_t t = 1; t + 1 < maps.size(); ++t) {
    check_flow(flow_bwd, t, h, w, "backward");
    check_flow(flow_fwd, t, h, w, "forward");
    if (params.occlusion_check) {
      check_flow(flow_fwd, t - 1, h, w, "forward");
      check_flow(flow_bwd, t + 1, h, w, "backward");
    }
    FrameTemporalScore fc;
    fc.frame = t;
    fc.score_map = Tensor({h, w}, -1.0f);
    double sum = 0.0;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const Warp prev = warp(flow_bwd[t], y, x, h, w);
        const Warp next = warp(flow_fwd[t], y, x, h, w);
        if (!prev.ok || !next.ok) continue;
        if (params.occlusion_check &&
            (!round_trip_ok(flow_bwd[t], flow_fwd[t - 1], y, x, prev, params.fb_threshold) ||
             !round_trip_ok(flow_fwd[t], flow_bwd[t + 1], y, x, next, params.fb_threshold)))
          continue;
        const std::uint8_t c = maps[t].at(y, x);
        const int m = (maps[t - 1].at(prev.y, prev.x) == c) + (maps[t + 1].at(next.y, next.x) == c);
        fc.score_map[y * w + x] = static_cast<float>(m) / 2.0f;
        sum += m / 2.0;
        ++fc.valid_pixels;
      }
    if (fc.valid_pixels == 0) {
      fc.skipped = true;
      report.warnings.push_back("frame " + std::to_string(t) + " has no valid pixels and was skipped");
    } else {
      fc.score = sum / static_cast<double>(fc.valid_pixels);
      total += fc.score;
      ++scored;
    }
    report.frames.push_back(std::move(fc));
  }
  if (scored == 0) throw DataError("no interior frame has valid pixels");
  report.score = 100.0 * total / static_cast<double>(scored);
  return report;
}

}  // namespace phg
