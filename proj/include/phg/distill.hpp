#pragma once

#include <optional>
#include <string>
#include <vector>

#include "phg/ensemble.hpp"

namespace phg {

struct FrameConsistency {
  std::string scene;
  std::size_t frame = 0;
  double similarity = 0.0;  // mean candidate-to-ensemble similarity in [0,1]
  std::optional<double> gt_score;
};

// Mean similarity of every candidate's argmax to the argmax of the aggregate
// over all candidates.
FrameConsistency frame_consistency(const CandidateSet& cands, const ClassWeights& weights, const std::string& output,
                                   Similarity similarity = Similarity::weighted_iou);

enum class SelectionMode { global, per_scene };

SelectionMode parse_selection_mode(const std::string& name);

struct SelectionPolicy {
  SelectionMode mode = SelectionMode::per_scene;
  double keep_percent = 25.0;  // in (0,100]
  void validate() const;
};

// Indices into `frames` of the kept ones, in input order. Frames are ranked by
// similarity (ties to the earlier frame) and the top ceil(N% of the pool) kept,
// the pool being all frames or each scene on its own.
std::vector<std::size_t> select_pseudolabels(const std::vector<FrameConsistency>& frames, const SelectionPolicy& policy);

struct CorrelationReport {
  std::optional<double> pearson_r;  // empty when either variable has zero variance
  std::size_t points = 0;
  std::string csv;  // scene,frame,similarity,gt_score
};

CorrelationReport correlation_report(const std::vector<FrameConsistency>& frames);
std::optional<double> pearson(const std::vector<double>& x, const std::vector<double>& y);

struct DistillConfig {
  std::size_t teacher_n = 20;
  double teacher_p_visible = 0.5;
  std::size_t width = 15;
  std::size_t epochs = 20;
  std::size_t batch_size = 4;
  double crop_fraction = 0.5;
  double augment_probability = 0.5;
  std::uint64_t seed = 0;
  AdamWConfig optimizer;
  std::size_t jobs = 1;
  std::string output = "gt-semantic";
};

// Teacher targets for one frame: the log of the NRand-aggregated class
// probabilities, usable as logits.
Tensor teacher_logits(const PhgModel& teacher, const ModalityBundle& bundle, const DistillConfig& config, Rng& rng);
// The same targets from candidates already drawn.
Tensor aggregate_logits(const CandidateSet& cands, const std::string& output);

struct DistillResult {
  PhgModel student;
  std::vector<double> epoch_loss;
};

// Trains an RGB-only student on the teacher's aggregated categorical targets
// with KL(teacher || student) only. Bundles need the teacher's inputs and
// intermediates; outputs are never read.
DistillResult distill(const PhgModel& teacher, const std::vector<ModalityBundle>& frames, const DistillConfig& config);

// Student targets precomputed by teacher_logits, one per frame.
DistillResult distill_from_targets(const ModalitySet& student_set, const std::vector<ModalityBundle>& frames,
                                   const std::vector<Tensor>& targets, const DistillConfig& config);

// Mean KL(teacher || student) over frames.
double distillation_gap(const PhgModel& student, const std::vector<ModalityBundle>& frames,
                        const std::vector<Tensor>& targets, const std::string& output);

// Student modality set: the teacher's inputs and the one categorical output.
ModalitySet student_modalities(const ModalitySet& teacher, const std::string& output);

}  // namespace phg
