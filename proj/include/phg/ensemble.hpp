#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "phg/metrics.hpp"
#include "phg/model.hpp"

namespace phg {

struct OutputInfo {
  std::string name;
  std::size_t classes = 0;  // 0 for continuous outputs
  friend bool operator==(const OutputInfo&, const OutputInfo&) = default;
};

struct Candidate {
  HyperEdgeMask mask;
  // Class probabilities [K,H,W] for categorical outputs, values otherwise.
  std::map<std::string, Tensor> outputs;
};

struct CandidateSet {
  std::string scene;
  std::size_t frame = 0;
  std::vector<OutputInfo> outputs;
  std::vector<Candidate> candidates;

  const OutputInfo& output(const std::string& name) const;
  // Shapes agree across candidates and probabilities sum to 1 within 1e-5.
  void validate() const;
};

std::vector<OutputInfo> output_infos(const ModalitySet& set);

// One candidate per mask; categorical logits are turned into probabilities.
CandidateSet predict_masks(const PhgModel& model, const ModalityBundle& bundle, const std::vector<HyperEdgeMask>& masks,
                           std::size_t jobs = 1);
// N independently sampled masks, drawn in order from rng before any forward.
CandidateSet nrand_predict(const PhgModel& model, const ModalityBundle& bundle, std::size_t n, double p_visible, Rng& rng,
                           std::size_t jobs = 1);

enum class AggregationRule { probability_mean, majority_vote };

struct Aggregate {
  std::map<std::string, Tensor> values;     // mean probabilities / vote shares / mean values
  std::map<std::string, LabelMap> labels;   // categorical outputs only
};

// Mean over the subset (all candidates when empty is not allowed; pass every
// index). Categorical argmax ties go to the lowest class index.
Aggregate aggregate(const CandidateSet& cands, const std::vector<std::size_t>& subset,
                    AggregationRule rule = AggregationRule::probability_mean);
Aggregate aggregate_all(const CandidateSet& cands, AggregationRule rule = AggregationRule::probability_mean);
std::vector<std::size_t> all_indices(const CandidateSet& cands);

// Entry n-2 is the fraction of pixels whose aggregated class changes between
// the prefixes of length n-1 and n, for n = 2..N.
std::vector<double> convergence_curve(const CandidateSet& cands, const std::string& output);

enum class Similarity { accuracy, weighted_iou };

Similarity parse_similarity(const std::string& name);

// Similarity in [0,1] of a prediction to a reference map treated as ground
// truth.
double map_similarity(const LabelMap& pred, const LabelMap& reference, Similarity kind, const ClassWeights& weights);

struct SelectionReport {
  std::vector<std::size_t> ks;      // 1..N
  std::vector<double> scores;       // score of the top-K aggregate for each K
  std::vector<std::size_t> order;   // candidate indices, best first
  std::vector<double> masked_frequency;  // per intermediate, over the reported top performers
};

// Oracle: ranks candidates by their own weighted IoU against gt and scores the
// aggregate of every top-K prefix. Evaluation only.
SelectionReport greedy_topk_oracle(const CandidateSet& cands, const LabelMap& gt, const ClassWeights& weights,
                                   const std::string& output);

struct OracleBenchmark {
  std::vector<std::size_t> ks;
  std::vector<double> topk_scores;  // benchmark with every frame using its top-K aggregate
  std::vector<std::size_t> best_k;  // per frame, the K chosen by Greedy-BestK
  double bestk_score = 0.0;
  double simple_average = 0.0;      // benchmark of the aggregate over all candidates
  double topk_max() const;
};

// Frames are grouped into scenes by CandidateSet::scene for the global
// benchmark. All frames need the same candidate count. Evaluation only.
OracleBenchmark oracle_benchmark(const std::vector<CandidateSet>& frames, const std::vector<LabelMap>& gts,
                                 const ClassWeights& weights, const std::string& output);
double greedy_bestk_oracle(const std::vector<CandidateSet>& frames, const std::vector<LabelMap>& gts,
                           const ClassWeights& weights, const std::string& output);

struct MeanSimilarityOptions {
  std::size_t reference_count = 0;  // 0 uses every candidate
  Similarity similarity = Similarity::weighted_iou;
  std::size_t k = 1;
  bool include_reference = false;
};

// Reference aggregate from reference_count randomly drawn candidates, then the
// aggregate of the K candidates closest to it (ties to the lower index),
// optionally joined with the reference candidates. `chosen` receives the
// selected indices when given.
Aggregate mean_similarity_select(const CandidateSet& cands, const MeanSimilarityOptions& options,
                                 const ClassWeights& weights, const std::string& output, Rng& rng,
                                 std::vector<std::size_t>* chosen = nullptr);

// Per-intermediate fraction of masks in which it was masked.
std::vector<double> masking_distribution(const std::vector<HyperEdgeMask>& masks);
// Each intermediate masked with its frequency.
HyperEdgeMask weighted_sample(const std::vector<double>& masked_frequency, Rng& rng);

// PHGC persistence, one file per frame.
void save_candidates(const fs::path& path, const CandidateSet& cands);
CandidateSet load_candidates(const fs::path& path);

}  // namespace phg
