#include "phg/distill.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "phg/error.hpp"

namespace phg {

FrameConsistency frame_consistency(const CandidateSet& cands, const ClassWeights& weights, const std::string& output,
                                   Similarity similarity) {
  if (cands.candidates.size() < 2) throw DataError("frame consistency needs at least 2 candidates");
  if (cands.output(output).classes == 0) throw DataError("frame consistency needs a categorical output");
  const LabelMap ensemble = aggregate_all(cands).labels.at(output);
  double sum = 0.0;
  for (const Candidate& c : cands.candidates)
    sum += map_similarity(argmax_channels(c.outputs.at(output)), ensemble, similarity, weights);
  return {cands.scene, cands.frame, sum / static_cast<double>(cands.candidates.size()), std::nullopt};
}

SelectionMode parse_selection_mode(const std::string& name) {
  if (name == "global") return SelectionMode::global;
  if (name == "per-scene" || name == "per_scene") return SelectionMode::per_scene;
  throw DataError("unknown selection policy '" + name + "' (expected global or per-scene)");
}

void SelectionPolicy::validate() const {
  if (!(keep_percent > 0.0 && keep_percent <= 100.0)) throw DataError("keep percentage must be in (0,100]");
}

namespace {

void keep_top(const std::vector<FrameConsistency>& frames, std::vector<std::size_t> pool, double percent,
              std::vector<std::size_t>& kept) {
  std::stable_sort(pool.begin(), pool.end(),
                   [&](std::size_t a, std::size_t b) { return frames[a].similarity > frames[b].similarity; });
  // Rounded first so that e.g. 25% of 8 is exactly 2 despite binary fractions.
  const double exact = std::round(percent / 100.0 * static_cast<double>(pool.size()) * 1e9) / 1e9;
  const auto count = std::min(pool.size(), static_cast<std::size_t>(std::ceil(exact)));
  kept.insert(kept.end(), pool.begin(), pool.begin() + static_cast<long>(count));
}

}  // namespace

std::vector<std::size_t> select_pseudolabels(const std::vector<FrameConsistency>& frames, const SelectionPolicy& policy) {
  policy.validate();
  if (frames.empty()) throw DataError("no frames to select from");
  std::vector<std::size_t> kept;
  if (policy.mode == SelectionMode::global) {
    std::vector<std::size_t> all(frames.size());
    std::iota(all.begin(), all.end(), 0);
    keep_top(frames, all, policy.keep_percent, kept);
  } else {
    std::vector<std::string> scenes;
    for (const auto& f : frames)
      if (std::find(scenes.begin(), scenes.end(), f.scene) == scenes.end()) scenes.push_back(f.scene);
    for (const auto& s : scenes) {
      std::vector<std::size_t> pool;
      for (std::size_t i = 0; i < frames.size(); ++i)
        if (frames[i].scene == s) pool.push_back(i);
      keep_top(frames, pool, policy.keep_percent, kept);
    }
  }
  std::sort(kept.begin(), kept.end());
  return kept;
}

std::optional<double> pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw DataError("correlation of series with different lengths");
  if (x.size() < 3) throw DataError("correlation needs at least 3 points");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n, my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

CorrelationReport correlation_report(const std::vector<FrameConsistency>& frames) {
  std::vector<double> x, y;
  CorrelationReport r;
  r.csv = "scene,frame,similarity,gt_score\n";
  for (const auto& f : frames) {
    if (!f.gt_score) throw DataError(fmt::format("frame {}/{} has no ground-truth score", f.scene, f.frame));
    x.push_back(f.similarity);
    y.push_back(*f.gt_score);
    r.csv += fmt::format("{},{},{:.6f},{:.6f}\n", f.scene, f.frame, f.similarity, *f.gt_score);
  }
  r.points = frames.size();
  r.pearson_r = pearson(x, y);
  return r;
}

ModalitySet student_modalities(const ModalitySet& teacher, const std::string& output) {
  std::vector<ModalitySpec> specs;
  for (std::size_t i : teacher.inputs()) specs.push_back(teacher[i]);
  const ModalitySpec& o = teacher.get(output);
  if (o.role != Role::output || !o.categorical()) throw DataError("'" + output + "' is not a categorical output of the teacher");
  specs.push_back(o);
  return ModalitySet(std::move(specs));
}

Tensor teacher_logits(const PhgModel& teacher, const ModalityBundle& bundle, const DistillConfig& config, Rng& rng) {
  return aggregate_logits(nrand_predict(teacher, bundle, config.teacher_n, config.teacher_p_visible, rng), config.output);
}

Tensor aggregate_logits(const CandidateSet& cands, const std::string& output) {
  Tensor probs = aggregate_all(cands).values.at(output);
  for (float& v : probs.data()) v = std::log(std::max(v, 1e-8f));
  return probs;
}

DistillResult distill_from_targets(const ModalitySet& student_set, const std::vector<ModalityBundle>& frames,
                                   const std::vector<Tensor>& targets, const DistillConfig& config) {
  if (frames.empty()) throw DataError("distillation needs at least one frame");
  if (targets.size() != frames.size()) throw DataError("one teacher target per frame required");
  if (config.batch_size == 0) throw DataError("batch size must be positive");
  if (!student_set.intermediates().empty()) throw DataError("the student takes input modalities only");
  const TrainingScope scope;
  DistillResult result{PhgModel(student_set, config.width, config.seed), {}};
  PhgModel& student = result.student;
  Rng rng(mix_seed(config.seed, 0xd157));
  OptimizerState state(config.optimizer, student.parameters());
  const std::string target_key = "distill-target";
  std::vector<std::size_t> order(frames.size());
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double epoch_loss = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<Tensor> grads;
      double batch_loss = 0.0;
      for (std::size_t s = start; s < end; ++s) {
        ModalityBundle b;
        b.scene = frames[order[s]].scene;
        b.frame = frames[order[s]].frame;
        for (std::size_t i : student_set.inputs()) b.maps.emplace(student_set[i].name, frames[order[s]].at(student_set[i].name));
        b.maps.emplace(target_key, targets[order[s]]);
        if (config.crop_fraction > 0.0 && rng.bernoulli(config.augment_probability)) b = augment(b, config.crop_fraction, rng);
        Tape tape;
        const auto preds = student.forward(tape, apply_mask(student_set, b, HyperEdgeMask{}));
        const Var loss = ad::kl_logits(tape, preds.at(config.output), b.at(target_key));
        const double value = tape.value(loss)[0];
        if (!std::isfinite(value)) throw NumericError(fmt::format("non-finite distillation loss at step {}", state.step));
        batch_loss += value;
        auto g = tape.gradients(loss, student.parameters());
        if (grads.empty()) {
          grads = std::move(g);
        } else {
          for (std::size_t i = 0; i < grads.size(); ++i)
            for (std::size_t k = 0; k < grads[i].size(); ++k) grads[i][k] += g[i][k];
        }
      }
      const float inv = 1.0f / static_cast<float>(end - start);
      for (Tensor& g : grads)
        for (float& v : g.data()) v *= inv;
      adamw_step(student.parameters(), grads, state);
      epoch_loss += batch_loss / static_cast<double>(end - start);
      ++steps;
    }
    result.epoch_loss.push_back(epoch_loss / static_cast<double>(steps));
  }
  return result;
}

DistillResult distill(const PhgModel& teacher, const std::vector<ModalityBundle>& frames, const DistillConfig& config) {
  const ModalitySet student_set = student_modalities(teacher.modalities(), config.output);
  std::vector<Tensor> targets(frames.size());
  const Rng base(mix_seed(config.seed, 0x7eac4e7));
  parallel_for(frames.size(), config.jobs, [&](std::size_t i) {
    Rng rng = base.split(i);
    targets[i] = teacher_logits(teacher, frames[i], config, rng);
  });
  return distill_from_targets(student_set, frames, targets, config);
}

double distillation_gap(const PhgModel& student, const std::vector<ModalityBundle>& frames,
                        const std::vector<Tensor>& targets, const std::string& output) {
  if (frames.empty() || frames.size() != targets.size()) throw DataError("one teacher target per frame required");
  double sum = 0.0;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const auto preds = student.forward(apply_mask(student.modalities(), frames[i], HyperEdgeMask{}));
    sum += loss_kl_logits(preds.at(output), targets[i]);
  }
  return sum / static_cast<double>(frames.size());
}

}  // namespace phg
