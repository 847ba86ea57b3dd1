#include "phg/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "phg/error.hpp"

namespace phg {

const OutputInfo& CandidateSet::output(const std::string& name) const {
  for (const auto& o : outputs)
    if (o.name == name) return o;
  throw DataError("candidate set has no output '" + name + "'");
}

void CandidateSet::validate() const {
  if (candidates.empty()) throw DataError("candidate set is empty");
  for (const OutputInfo& o : outputs) {
    const Shape& shape = candidates.front().outputs.at(o.name).shape();
    for (const Candidate& c : candidates) {
      const auto it = c.outputs.find(o.name);
      if (it == c.outputs.end()) throw DataError("candidate lacks output '" + o.name + "'");
      if (it->second.shape() != shape) throw DataError("candidate shapes differ for '" + o.name + "'");
      if (o.classes == 0) continue;
      const Tensor& p = it->second;
      const std::size_t plane = p.dim(1) * p.dim(2);
      for (std::size_t i = 0; i < plane; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < o.classes; ++k) s += p[k * plane + i];
        if (std::abs(s - 1.0) > 1e-5) throw DataError("candidate probabilities for '" + o.name + "' do not sum to 1");
      }
    }
  }
  const std::size_t k = candidates.front().mask.visible.size();
  for (const Candidate& c : candidates)
    if (c.mask.visible.size() != k) throw DataError("candidate masks differ in length");
}

std::vector<OutputInfo> output_infos(const ModalitySet& set) {
  std::vector<OutputInfo> out;
  for (std::size_t o : set.outputs()) out.push_back({set[o].name, set[o].classes});
  return out;
}

CandidateSet predict_masks(const PhgModel& model, const ModalityBundle& bundle, const std::vector<HyperEdgeMask>& masks,
                           std::size_t jobs) {
  CandidateSet set;
  set.scene = bundle.scene;
  set.frame = bundle.frame;
  set.outputs = output_infos(model.modalities());
  set.candidates.resize(masks.size());
  parallel_for(masks.size(), jobs, [&](std::size_t i) {
    Candidate& c = set.candidates[i];
    c.mask = masks[i];
    c.outputs = model.forward(bundle, masks[i]);
    for (const OutputInfo& o : set.outputs)
      if (o.classes) c.outputs[o.name] = softmax_channels(c.outputs[o.name]);
  });
  return set;
}

CandidateSet nrand_predict(const PhgModel& model, const ModalityBundle& bundle, std::size_t n, double p_visible, Rng& rng,
                           std::size_t jobs) {
  if (n == 0) throw DataError("ensemble size must be at least 1");
  std::vector<HyperEdgeMask> masks;
  for (std::size_t i = 0; i < n; ++i) masks.push_back(sample_mask(model.modalities(), p_visible, rng));
  return predict_masks(model, bundle, masks, jobs);
}

std::vector<std::size_t> all_indices(const CandidateSet& cands) {
  std::vector<std::size_t> idx(cands.candidates.size());
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

Aggregate aggregate(const CandidateSet& cands, const std::vector<std::size_t>& subset, AggregationRule rule) {
  if (subset.empty()) throw DataError("aggregate of an empty subset");
  for (std::size_t i : subset)
    if (i >= cands.candidates.size()) throw DataError("candidate index out of range");
  Aggregate out;
  const double inv = 1.0 / static_cast<double>(subset.size());
  for (const OutputInfo& o : cands.outputs) {
    const Tensor& first = cands.candidates[subset.front()].outputs.at(o.name);
    std::vector<double> acc(first.size(), 0.0);
    if (o.classes && rule == AggregationRule::majority_vote) {
      const std::size_t plane = first.dim(1) * first.dim(2);
      for (std::size_t i : subset) {
        const LabelMap votes = argmax_channels(cands.candidates[i].outputs.at(o.name));
        for (std::size_t p = 0; p < plane; ++p) acc[votes.labels[p] * plane + p] += 1.0;
      }
    } else {
      for (std::size_t i : subset) {
        const Tensor& t = cands.candidates[i].outputs.at(o.name);
        if (t.shape() != first.shape()) throw DataError("candidate shapes differ for '" + o.name + "'");
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += t[k];
      }
    }
    Tensor mean(first.shape());
    for (std::size_t k = 0; k < acc.size(); ++k) mean[k] = static_cast<float>(acc[k] * inv);
    if (o.classes) out.labels.emplace(o.name, argmax_channels(mean));
    out.values.emplace(o.name, std::move(mean));
  }
  return out;
}

Aggregate aggregate_all(const CandidateSet& cands, AggregationRule rule) { return aggregate(cands, all_indices(cands), rule); }

namespace {

LabelMap argmax_planes(const std::vector<double>& scores, std::size_t classes, std::size_t h, std::size_t w) {
  const std::size_t plane = h * w;
  LabelMap out(h, w);
  for (std::size_t p = 0; p < plane; ++p) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c)
      if (scores[c * plane + p] > scores[best * plane + p]) best = c;
    out.labels[p] = static_cast<std::uint8_t>(best);
  }
  return out;
}

}  // namespace

std::vector<double> convergence_curve(const CandidateSet& cands, const std::string& output) {
  const OutputInfo& o = cands.output(output);
  if (o.classes == 0) throw DataError("convergence curve needs a categorical output, '" + output + "' is continuous");
  if (cands.candidates.size() < 2) throw DataError("convergence curve needs at least 2 candidates");
  const Tensor& first = cands.candidates.front().outputs.at(output);
  const std::size_t h = first.dim(1), w = first.dim(2);
  std::vector<double> sum(first.size(), 0.0);
  std::vector<double> curve;
  LabelMap previous;
  for (std::size_t n = 0; n < cands.candidates.size(); ++n) {
    const Tensor& t = cands.candidates[n].outputs.at(output);
    if (t.shape() != first.shape()) throw DataError("candidate shapes differ for '" + output + "'");
    for (std::size_t k = 0; k < sum.size(); ++k) sum[k] += t[k];
    LabelMap current = argmax_planes(sum, o.classes, h, w);
    if (n > 0) {
      std::size_t changed = 0;
      for (std::size_t p = 0; p < current.labels.size(); ++p) changed += current.labels[p] != previous.labels[p];
      curve.push_back(static_cast<double>(changed) / static_cast<double>(current.labels.size()));
    }
    previous = std::move(current);
  }
  return curve;
}

Similarity parse_similarity(const std::string& name) {
  if (name == "accuracy") return Similarity::accuracy;
  if (name == "weighted-iou" || name == "weighted_iou" || name == "iou") return Similarity::weighted_iou;
  throw DataError("unknown similarity '" + name + "' (expected accuracy or weighted-iou)");
}

double map_similarity(const LabelMap& pred, const LabelMap& reference, Similarity kind, const ClassWeights& weights) {
  if (pred.height != reference.height || pred.width != reference.width) throw DataError("similarity of maps with different shapes");
  if (kind == Similarity::accuracy) {
    std::size_t same = 0;
    for (std::size_t i = 0; i < pred.labels.size(); ++i) same += pred.labels[i] == reference.labels[i];
    return static_cast<double>(same) / static_cast<double>(pred.labels.size());
  }
  ConfusionAccumulator acc(weights.values.size());
  acc.add(pred, reference);
  return weighted_miou_scene(acc, weights) / 100.0;
}

namespace {

void require_evaluation_context(const char* what) {
  if (TrainingScope::active())
    throw std::logic_error(std::string(what) + " reads test ground truth and is evaluation-only; refusing inside training");
}

double frame_score(const LabelMap& pred, const LabelMap& gt, const ClassWeights& weights) {
  ConfusionAccumulator acc(weights.values.size());
  acc.add(pred, gt);
  return weighted_miou_scene(acc, weights);
}

std::vector<std::size_t> rank_by_gt(const CandidateSet& cands, const LabelMap& gt, const ClassWeights& weights,
                                    const std::string& output) {
  std::vector<double> score(cands.candidates.size());
  for (std::size_t i = 0; i < score.size(); ++i)
    score[i] = frame_score(argmax_channels(cands.candidates[i].outputs.at(output)), gt, weights);
  std::vector<std::size_t> order = all_indices(cands);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  return order;
}

// Labels of the aggregate of every prefix of `order`.
std::vector<LabelMap> prefix_labels(const CandidateSet& cands, const std::vector<std::size_t>& order, const std::string& output) {
  const OutputInfo& o = cands.output(output);
  const Tensor& first = cands.candidates.front().outputs.at(output);
  std::vector<double> sum(first.size(), 0.0);
  std::vector<LabelMap> out;
  for (std::size_t i : order) {
    const Tensor& t = cands.candidates[i].outputs.at(output);
    for (std::size_t k = 0; k < sum.size(); ++k) sum[k] += t[k];
    out.push_back(argmax_planes(sum, o.classes, first.dim(1), first.dim(2)));
  }
  return out;
}

void require_categorical(const CandidateSet& cands, const std::string& output) {
  if (cands.candidates.empty()) throw DataError("candidate set is empty");
  if (cands.output(output).classes == 0) throw DataError("output '" + output + "' is not categorical");
}

}  // namespace

SelectionReport greedy_topk_oracle(const CandidateSet& cands, const LabelMap& gt, const ClassWeights& weights,
                                   const std::string& output) {
  require_evaluation_context("Greedy-TopK");
  require_categorical(cands, output);
  if (gt.labels.empty()) throw DataError("Greedy-TopK needs ground truth");
  SelectionReport r;
  r.order = rank_by_gt(cands, gt, weights, output);
  const auto labels = prefix_labels(cands, r.order, output);
  for (std::size_t k = 0; k < labels.size(); ++k) {
    r.ks.push_back(k + 1);
    r.scores.push_back(frame_score(labels[k], gt, weights));
  }
  for (bool v : cands.candidates[r.order.front()].mask.visible) r.masked_frequency.push_back(v ? 0.0 : 1.0);
  return r;
}

double OracleBenchmark::topk_max() const {
  if (topk_scores.empty()) throw DataError("empty oracle benchmark");
  return *std::max_element(topk_scores.begin(), topk_scores.end());
}

OracleBenchmark oracle_benchmark(const std::vector<CandidateSet>& frames, const std::vector<LabelMap>& gts,
                                 const ClassWeights& weights, const std::string& output) {
  require_evaluation_context("Greedy-BestK");
  if (frames.empty()) throw DataError("oracle benchmark needs at least one frame");
  if (gts.size() != frames.size()) throw DataError("oracle benchmark needs one ground-truth map per frame");
  const std::size_t n = frames.front().candidates.size();
  std::vector<std::vector<LabelMap>> prefixes;
  std::vector<LabelMap> simple;
  OracleBenchmark r;
  for (std::size_t f = 0; f < frames.size(); ++f) {
    require_categorical(frames[f], output);
    if (frames[f].candidates.size() != n) throw DataError("frames hold different candidate counts");
    prefixes.push_back(prefix_labels(frames[f], rank_by_gt(frames[f], gts[f], weights, output), output));
    simple.push_back(aggregate_all(frames[f]).labels.at(output));
    std::size_t best = 0;
    double best_score = -1.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double s = frame_score(prefixes.back()[k], gts[f], weights);
      if (s > best_score) {
        best_score = s;
        best = k;
      }
    }
    r.best_k.push_back(best + 1);
  }
  auto score = [&](auto pick) {
    std::vector<SceneFrames> scenes;
    for (std::size_t f = 0; f < frames.size(); ++f) {
      auto it = std::find_if(scenes.begin(), scenes.end(), [&](const SceneFrames& s) { return s.scene == frames[f].scene; });
      if (it == scenes.end()) {
        scenes.push_back({frames[f].scene, {}, {}});
        it = scenes.end() - 1;
      }
      it->pred.push_back(pick(f));
      it->gt.push_back(gts[f]);
    }
    return benchmark(scenes, weights).final_score;
  };
  for (std::size_t k = 0; k < n; ++k) {
    r.ks.push_back(k + 1);
    r.topk_scores.push_back(score([&](std::size_t f) { return prefixes[f][k]; }));
  }
  r.bestk_score = score([&](std::size_t f) { return prefixes[f][r.best_k[f] - 1]; });
  r.simple_average = score([&](std::size_t f) { return simple[f]; });
  return r;
}

double greedy_bestk_oracle(const std::vector<CandidateSet>& frames, const std::vector<LabelMap>& gts,
                           const ClassWeights& weights, const std::string& output) {
  return oracle_benchmark(frames, gts, weights, output).bestk_score;
}

Aggregate mean_similarity_select(const CandidateSet& cands, const MeanSimilarityOptions& options,
                                 const ClassWeights& weights, const std::string& output, Rng& rng,
                                 std::vector<std::size_t>* chosen) {
  require_categorical(cands, output);
  const std::size_t n = cands.candidates.size();
  if (options.k == 0 || options.k > n) throw DataError(fmt::format("K must be in [1,{}], got {}", n, options.k));
  const std::size_t refs = options.reference_count == 0 ? n : options.reference_count;
  if (refs > n) throw DataError(fmt::format("reference count {} exceeds {} candidates", refs, n));
  std::vector<std::size_t> pool = all_indices(cands);
  for (std::size_t i = 0; i < refs; ++i) std::swap(pool[i], pool[i + rng.below(n - i)]);
  std::vector<std::size_t> reference(pool.begin(), pool.begin() + static_cast<long>(refs));
  std::sort(reference.begin(), reference.end());
  const LabelMap ref = aggregate(cands, reference).labels.at(output);

  std::vector<double> sim(n);
  for (std::size_t i = 0; i < n; ++i)
    sim[i] = map_similarity(argmax_channels(cands.candidates[i].outputs.at(output)), ref, options.similarity, weights);
  std::vector<std::size_t> order = all_indices(cands);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });
  std::vector<std::size_t> picked(order.begin(), order.begin() + static_cast<long>(options.k));
  if (options.include_reference) picked.insert(picked.end(), reference.begin(), reference.end());
  std::sort(picked.begin(), picked.end());
  picked.erase(std::unique(picked.begin(), picked.end()), picked.end());
  if (chosen) *chosen = picked;
  return aggregate(cands, picked);
}

std::vector<double> masking_distribution(const std::vector<HyperEdgeMask>& masks) {
  if (masks.empty()) throw DataError("masking distribution of an empty mask list");
  const std::size_t k = masks.front().visible.size();
  std::vector<double> freq(k, 0.0);
  for (const auto& m : masks) {
    if (m.visible.size() != k) throw DataError("masks differ in length");
    for (std::size_t j = 0; j < k; ++j) freq[j] += m.visible[j] ? 0.0 : 1.0;
  }
  for (double& f : freq) f /= static_cast<double>(masks.size());
  return freq;
}

HyperEdgeMask weighted_sample(const std::vector<double>& masked_frequency, Rng& rng) {
  HyperEdgeMask m;
  for (double f : masked_frequency) {
    if (f < 0.0 || f > 1.0) throw DataError("masking frequency outside [0,1]");
    m.visible.push_back(!rng.bernoulli(f));
  }
  return m;
}

void save_candidates(const fs::path& path, const CandidateSet& cands) {
  std::vector<ContainerEntry> e;
  e.push_back({"meta.scene", DType::u8, string_tensor(cands.scene)});
  e.push_back({"meta.frame", DType::f32, Tensor({1}, {static_cast<float>(cands.frame)})});
  std::string outs;
  for (const auto& o : cands.outputs) outs += (outs.empty() ? "" : ",") + o.name + ":" + std::to_string(o.classes);
  e.push_back({"meta.outputs", DType::u8, string_tensor(outs)});
  for (std::size_t i = 0; i < cands.candidates.size(); ++i) {
    const Candidate& c = cands.candidates[i];
    e.push_back({fmt::format("cand.{:04d}.mask", i), DType::u8, string_tensor(c.mask.key())});
    for (const auto& o : cands.outputs) e.push_back({fmt::format("cand.{:04d}.{}", i, o.name), DType::f32, c.outputs.at(o.name)});
  }
  write_container(path, e);
}

CandidateSet load_candidates(const fs::path& path) {
  const auto entries = read_container(path);
  CandidateSet c;
  c.scene = tensor_string(find_entry(entries, "meta.scene").tensor);
  c.frame = static_cast<std::size_t>(find_entry(entries, "meta.frame").tensor[0]);
  for (const std::string& item : split_list(tensor_string(find_entry(entries, "meta.outputs").tensor))) {
    const auto colon = item.rfind(':');
    if (colon == std::string::npos) throw DataError(path.string() + ": malformed output list");
    c.outputs.push_back({item.substr(0, colon), static_cast<std::size_t>(std::stoul(item.substr(colon + 1)))});
  }
  for (std::size_t i = 0;; ++i) {
    const std::string prefix = fmt::format("cand.{:04d}.", i);
    const auto it = std::find_if(entries.begin(), entries.end(), [&](const ContainerEntry& e) { return e.name == prefix + "mask"; });
    if (it == entries.end()) break;
    Candidate cand;
    cand.mask = HyperEdgeMask::from_key(tensor_string(it->tensor));
    for (const auto& o : c.outputs) cand.outputs.emplace(o.name, find_entry(entries, prefix + o.name).tensor);
    c.candidates.push_back(std::move(cand));
  }
  c.validate();
  return c;
}

}  // namespace phg
