#include <fmt/format.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>

#include "phg/dataset.hpp"
#include "phg/derive.hpp"
#include "phg/distill.hpp"
#include "phg/ensemble.hpp"
#include "phg/error.hpp"
#include "phg/metrics.hpp"
#include "phg/model.hpp"
#include "phg/synth.hpp"

using namespace phg;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  CLI::Option* seed_option = nullptr;
  bool seed_given() const { return seed_option && seed_option->count() > 0; }
};

void add_common(CLI::App* cmd, Common& c) {
  c.seed_option = cmd->add_option("--seed", c.seed, "Random seed");
  cmd->add_option("--jobs", c.jobs, "Worker threads (results do not depend on it)")->check(CLI::PositiveNumber);
}

std::string scene_name(const fs::path& p) {
  return p.has_filename() ? p.filename().string() : p.parent_path().filename().string();
}

Rng frame_rng(std::uint64_t seed, const std::string& scene, std::size_t frame) {
  return Rng(mix_seed(mix_seed(seed, fnv1a(scene)), frame));
}

std::string num(double v) { return fmt::format("{:.6f}", v); }

std::string frame_file(std::size_t frame, const char* ext) { return fmt::format("{:06d}{}", frame, ext); }

// Whitespace- or comma-separated numbers.
std::vector<double> read_numbers(const fs::path& path) {
  std::string text = read_file(path);
  std::replace(text.begin(), text.end(), ',', ' ');
  std::istringstream in(text);
  std::vector<double> out;
  std::string tok;
  while (in >> tok) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw DataError(fmt::format("{}: '{}' is not a number", path.string(), tok));
    }
  }
  return out;
}

ClassWeights load_weights(const std::string& path) {
  if (path.empty()) return ClassWeights::dronescapes();
  ClassWeights w{read_numbers(path)};
  w.validate();
  return w;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path, const std::string& header_prefix) {
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line) || line.rfind(header_prefix, 0) != 0)
    throw DataError(fmt::format("{}: expected a header starting with '{}'", path.string(), header_prefix));
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(trim(cell));
    rows.push_back(std::move(cells));
  }
  return rows;
}

std::size_t parse_index(const std::string& s, const fs::path& where) {
  if (s.empty() || !std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; }))
    throw DataError(fmt::format("{}: bad frame index '{}'", where.string(), s));
  return std::stoul(s);
}

// Scene directory under root by name, or root itself when it is that scene.
fs::path scene_dir(const fs::path& root, const std::string& name, const std::string& probe) {
  if (fs::is_directory(root / name)) return root / name;
  if (scene_name(root) == name && fs::is_directory(root / probe)) return root;
  throw DataError(fmt::format("scene '{}' not found under {}", name, root.string()));
}

struct CandidateFile {
  std::string scene;
  std::size_t frame = 0;
  fs::path path;
};

// <root>/<scene>/candidates/NNNNNN.phgc, ordered by scene then frame.
std::vector<CandidateFile> list_candidate_files(const fs::path& root) {
  std::vector<CandidateFile> out;
  for (const fs::path& scene : list_scenes(root, "candidates")) {
    for (const auto& entry : fs::directory_iterator(scene / "candidates")) {
      const fs::path& p = entry.path();
      const std::string stem = p.stem().string();
      if (p.extension() != ".phgc" || stem.size() != 6 ||
          !std::all_of(stem.begin(), stem.end(), [](char c) { return c >= '0' && c <= '9'; }))
        continue;
      out.push_back({scene_name(scene), std::stoul(stem), p});
    }
  }
  std::sort(out.begin(), out.end(),
            [](const CandidateFile& a, const CandidateFile& b) { return std::tie(a.scene, a.frame) < std::tie(b.scene, b.frame); });
  if (out.empty()) throw DataError("no candidate sets under " + root.string());
  return out;
}

std::vector<CandidateSet> load_candidate_sets(const std::vector<CandidateFile>& files, std::size_t jobs) {
  std::vector<CandidateSet> sets(files.size());
  parallel_for(files.size(), jobs, [&](std::size_t i) {
    sets[i] = load_candidates(files[i].path);
    sets[i].scene = files[i].scene;
    sets[i].frame = files[i].frame;
  });
  return sets;
}

std::vector<LabelMap> load_gt_maps(const fs::path& root, const std::vector<CandidateFile>& files, const std::string& task,
                                   std::size_t jobs) {
  std::vector<LabelMap> gts(files.size());
  parallel_for(files.size(), jobs, [&](std::size_t i) {
    gts[i] = read_label_map(frame_path(scene_dir(root, files[i].scene, task), task, files[i].frame));
  });
  return gts;
}

std::vector<SceneFrames> group_by_scene(const std::vector<CandidateFile>& files, std::vector<LabelMap> preds,
                                        const std::vector<LabelMap>& gts) {
  std::vector<SceneFrames> out;
  for (std::size_t i = 0; i < files.size(); ++i) {
    if (out.empty() || out.back().scene != files[i].scene) out.push_back({files[i].scene, {}, {}});
    out.back().pred.push_back(std::move(preds[i]));
    out.back().gt.push_back(gts[i]);
  }
  return out;
}

std::string echo_header(const std::string& command, const std::vector<std::pair<std::string, std::string>>& kv) {
  std::string s = "# " + command + "\n";
  for (const auto& [k, v] : kv) s += k + " = " + v + "\n";
  return s;
}

// ---------------------------------------------------------------- gen

struct GenArgs {
  Common common;
  std::string spec, out;
};

void run_gen(const GenArgs& a) {
  Config cfg = Config::load(a.spec);
  if (a.common.seed_given()) cfg.set("gen.seed", std::to_string(a.common.seed));
  const auto specs = scene_specs_from_config(cfg);
  const fs::path out = a.out;
  fs::create_directories(out);
  parallel_for(specs.size(), a.common.jobs, [&](std::size_t i) {
    const RenderedScene scene = gen_scene(specs[i]);
    const auto experts = simulate_experts(scene);
    const fs::path final_dir = out / specs[i].name;
    const fs::path partial = out / ("." + specs[i].name + ".partial");
    fs::remove_all(partial);
    write_scene(partial, scene, experts);
    fs::remove_all(final_dir);
    fs::rename(partial, final_dir);
  });
  std::size_t frames = 0;
  for (const auto& s : specs) frames += s.frames;
  fmt::print("gen: {} scenes, {} frames -> {}\n", specs.size(), frames, out.string());
}

// ---------------------------------------------------------------- derive

struct DeriveArgs {
  Common common;
  std::string config, scenes;
  bool shuffle = false;
};

void run_derive(const DeriveArgs& a) {
  const Config cfg = Config::load(a.config);
  const auto nodes = nodes_from_config(cfg);
  if (nodes.empty()) throw DataError("no [node.<name>] sections in " + a.config);
  PipelineOptions opt;
  opt.jobs = a.common.jobs;
  if (a.shuffle) opt.shuffle_seed = a.common.seed;
  PipelineResult total;
  const auto scenes = list_scenes(a.scenes);
  if (scenes.empty()) throw DataError("no scenes under " + a.scenes);
  for (const fs::path& scene : scenes) {
    const PipelineResult r = run_pipeline(scene, nodes, opt);
    total.written += r.written;
    total.skipped += r.skipped;
  }
  fmt::print("derive: {} scenes, {} outputs written, {} up to date\n", scenes.size(), total.written, total.skipped);
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  Common common;
  std::string config, mode, size, out;
  std::vector<std::string> train, val;
  std::optional<std::size_t> epochs;
};

std::vector<fs::path> data_roots(const std::vector<std::string>& given, const Config& cfg, const std::string& key,
                                 const fs::path& config_path) {
  std::vector<fs::path> roots;
  if (!given.empty()) {
    for (const auto& g : given) roots.emplace_back(g);
    return roots;
  }
  if (!cfg.has(key)) throw UsageError(fmt::format("no --{} given and no {} in the config", key.substr(key.find('.') + 1), key));
  for (const auto& r : cfg.get_list(key)) {
    fs::path p(r);
    roots.push_back(p.is_absolute() ? p : config_path.parent_path() / p);
  }
  return roots;
}

void run_train(const TrainArgs& a) {
  Config cfg = Config::load(a.config);
  if (a.common.seed_given()) cfg.set("train.seed", std::to_string(a.common.seed));
  if (a.epochs) cfg.set("train.epochs", std::to_string(*a.epochs));
  if (!a.mode.empty()) cfg.set("train.mode", a.mode);
  const ModalitySet set = modality_set_from_config(cfg);
  TrainConfig tc = train_config_from(cfg);
  tc.jobs = a.common.jobs;
  const SizeTier tier = parse_size(a.size);
  const auto train = load_bundles(data_roots(a.train, cfg, "data.train", a.config), set, true, tc.jobs);
  const auto val = load_bundles(data_roots(a.val, cfg, "data.val", a.config), set, true, tc.jobs);
  if (train.empty() || val.empty()) throw DataError("training and validation sets must both hold frames");

  PhgModel model(set, size_width(tier), tc.seed);
  const FitResult r = fit(model, train, val, tc);
  const std::string echo = echo_header("train", {{"size", size_name(tier)},
                                                 {"mode", mode_name(tc.mode)},
                                                 {"seed", std::to_string(tc.seed)},
                                                 {"epochs", std::to_string(tc.epochs)}}) +
                           cfg.text();
  const fs::path out = a.out;
  model.parameters() = r.shared_best.parameters;
  save_checkpoint(out / "model.phgc", model, echo);
  std::string best = "task,epoch,value\n";
  best += fmt::format("shared,{},{}\n", r.shared_best.epoch, num(r.shared_best.value));
  for (const auto& [task, b] : r.best_per_task) {
    PhgModel m = model;
    m.parameters() = b.parameters;
    save_checkpoint(out / ("best-" + task + ".phgc"), m, echo);
    best += fmt::format("{},{},{}\n", task, b.epoch, num(b.value));
  }
  atomic_write(out / "epochs.csv", epoch_log_csv(r.log));
  atomic_write(out / "best.csv", best);
  fmt::print("train: {} parameters, shared best epoch {} ({}) -> {}\n", model.parameter_count(), r.shared_best.epoch,
             num(r.shared_best.value), out.string());
}

// ---------------------------------------------------------------- infer

struct InferArgs {
  Common common;
  std::string ckpt, scene, out, mask_dist, aggregation = "mean";
  std::size_t n = 1;
  double p_visible = 0.5;
  bool enumerate = false, all_visible = false, no_candidates = false;
  CLI::Option* n_option = nullptr;
};

std::vector<double> read_mask_distribution(const fs::path& path, std::size_t intermediates) {
  const auto rows = read_csv(path, "index,masked_frequency");
  std::vector<double> f(intermediates, -1.0);
  for (const auto& row : rows) {
    if (row.size() != 2) throw DataError(path.string() + ": expected index,masked_frequency rows");
    const std::size_t i = parse_index(row[0], path);
    if (i >= intermediates) throw DataError(fmt::format("{}: index {} beyond {} intermediates", path.string(), i, intermediates));
    f[i] = std::stod(row[1]);
  }
  for (std::size_t i = 0; i < intermediates; ++i)
    if (f[i] < 0.0 || f[i] > 1.0) throw DataError(fmt::format("{}: missing or invalid frequency for intermediate {}", path.string(), i));
  return f;
}

void run_infer(const InferArgs& a) {
  const int modes = (a.enumerate ? 1 : 0) + (a.all_visible ? 1 : 0) + (!a.mask_dist.empty() && a.enumerate ? 1 : 0);
  if (modes > 1 || (a.all_visible && !a.mask_dist.empty())) throw UsageError("--enumerate, --all-visible and --mask-dist are exclusive");
  if ((a.enumerate || a.all_visible) && a.n_option->count() > 0) throw UsageError("--n does not apply to --enumerate or --all-visible");
  if (a.n == 0) throw UsageError("--n must be at least 1");
  const PhgModel model = load_checkpoint(a.ckpt);
  const ModalitySet& set = model.modalities();
  const std::size_t k = set.intermediates().size();
  const AggregationRule rule = a.aggregation == "vote"   ? AggregationRule::majority_vote
                               : a.aggregation == "mean" ? AggregationRule::probability_mean
                                                         : throw UsageError("--aggregation must be mean or vote");
  std::optional<std::vector<double>> dist;
  if (!a.mask_dist.empty()) dist = read_mask_distribution(a.mask_dist, k);
  std::vector<HyperEdgeMask> fixed;
  if (a.enumerate) {
    if (k == 0) throw DataError("the model has no intermediates to enumerate");
    if (k > kMaxEnumeratedIntermediates) throw DataError(fmt::format("{} intermediates are too many to enumerate", k));
    fixed = enumerate_masks(set, false);
  }
  if (a.all_visible) fixed = {HyperEdgeMask::all(k, true)};

  struct Work {
    fs::path scene;
    std::string name;
    std::size_t frame;
  };
  std::vector<Work> work;
  for (const fs::path& scene : list_scenes(a.scene))
    for (std::size_t f : list_frames(scene, "rgb")) work.push_back({scene, scene_name(scene), f});
  if (work.empty()) throw DataError("no frames under " + a.scene);

  const fs::path out = a.out;
  const auto infos = output_infos(set);
  parallel_for(work.size(), a.common.jobs, [&](std::size_t i) {
    const Work& w = work[i];
    ModalityBundle bundle = load_bundle(w.scene, w.frame, set, false);
    bundle.scene = w.name;
    std::vector<HyperEdgeMask> masks = fixed;
    if (masks.empty()) {
      Rng rng = frame_rng(a.common.seed, w.name, w.frame);
      for (std::size_t j = 0; j < a.n; ++j) masks.push_back(dist ? weighted_sample(*dist, rng) : sample_mask(set, a.p_visible, rng));
    }
    const CandidateSet cands = predict_masks(model, bundle, masks);
    if (!a.no_candidates) save_candidates(out / w.name / "candidates" / frame_file(w.frame, ".phgc"), cands);
    const Aggregate agg = aggregate_all(cands, rule);
    for (const OutputInfo& o : infos) {
      const fs::path p = frame_path(out / w.name, o.name, w.frame);
      if (o.classes)
        write_label_map(p, agg.labels.at(o.name));
      else
        write_phgt(p, agg.values.at(o.name), DType::f32);
    }
  });
  fmt::print("infer: {} frames, {} candidates each -> {}\n", work.size(), fixed.empty() ? a.n : fixed.size(), out.string());
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  Common common;
  std::string pred, gt, weights, task = "gt-semantic", gt_task, out;
};

void run_eval(const EvalArgs& a) {
  const std::string gt_task = a.gt_task.empty() ? a.task : a.gt_task;
  const auto scenes = list_scenes(a.pred, a.task);
  if (scenes.empty()) throw DataError(fmt::format("no '{}' predictions under {}", a.task, a.pred));
  DType dtype = DType::f32;
  read_phgt(frame_path(scenes.front(), a.task, list_frames(scenes.front(), a.task).at(0)), &dtype);
  std::string csv;
  if (dtype == DType::u8) {
    const ClassWeights weights = load_weights(a.weights);
    std::vector<SceneFrames> sf(scenes.size());
    parallel_for(scenes.size(), a.common.jobs, [&](std::size_t s) {
      const std::string name = scene_name(scenes[s]);
      const fs::path gt_scene = scene_dir(a.gt, name, gt_task);
      sf[s].scene = name;
      for (std::size_t f : list_frames(scenes[s], a.task)) {
        sf[s].pred.push_back(read_label_map(frame_path(scenes[s], a.task, f)));
        sf[s].gt.push_back(read_label_map(frame_path(gt_scene, gt_task, f)));
      }
    });
    const BenchmarkReport report = benchmark(sf, weights);
    const std::size_t k = weights.values.size();
    csv = "scene,frames,score";
    for (std::size_t c = 0; c < k; ++c)
      csv += ",iou_" + (k == kSemanticClasses ? std::string(kClassNames[c]) : std::to_string(c));
    csv += "\n";
    std::uint64_t total = 0;
    for (const SceneScore& s : report.scenes) {
      csv += fmt::format("{},{},{}", s.scene, s.frames, num(s.score));
      for (const auto& iou : s.iou) csv += "," + (iou ? num(100.0 * *iou) : std::string());
      csv += "\n";
      total += s.frames;
    }
    csv += fmt::format("final,{},{}{}\n", total, num(report.final_score), std::string(k, ','));
    fmt::print("eval: {} scenes, weighted mIoU {}\n", report.scenes.size(), num(report.final_score));
  } else {
    std::vector<std::pair<std::size_t, double>> per(scenes.size());
    parallel_for(scenes.size(), a.common.jobs, [&](std::size_t s) {
      const fs::path gt_scene = scene_dir(a.gt, scene_name(scenes[s]), gt_task);
      const auto frames = list_frames(scenes[s], a.task);
      double sum = 0.0;
      for (std::size_t f : frames) {
        Tensor pred = read_phgt(frame_path(scenes[s], a.task, f));
        Tensor gt = read_phgt(frame_path(gt_scene, gt_task, f));
        if (gt.rank() == 2) gt = gt.reshaped({1, gt.dim(0), gt.dim(1)});
        if (pred.rank() == 2) pred = pred.reshaped({1, pred.dim(0), pred.dim(1)});
        sum += l2_metric(pred, gt);
      }
      per[s] = {frames.size(), frames.empty() ? 0.0 : sum / static_cast<double>(frames.size())};
    });
    csv = "scene,frames,score\n";
    std::size_t total = 0;
    double mean = 0.0;
    for (std::size_t s = 0; s < scenes.size(); ++s) {
      csv += fmt::format("{},{},{}\n", scene_name(scenes[s]), per[s].first, num(per[s].second));
      total += per[s].first;
      mean += per[s].second / static_cast<double>(scenes.size());
    }
    csv += fmt::format("final,{},{}\n", total, num(mean));
    fmt::print("eval: {} scenes, L2 x100 {}\n", scenes.size(), num(mean));
  }
  atomic_write(a.out, csv);
}

// ---------------------------------------------------------------- consistency

struct ConsistencyArgs {
  Common common;
  std::string pred, flows, task = "gt-semantic", out;
  double threshold = 1.0;
  bool no_occlusion = false;
};

void run_consistency(const ConsistencyArgs& a) {
  const auto scenes = list_scenes(a.pred, a.task);
  if (scenes.empty()) throw DataError(fmt::format("no '{}' predictions under {}", a.task, a.pred));
  ConsistencyParams params;
  params.occlusion_check = !a.no_occlusion;
  params.fb_threshold = a.threshold;
  std::vector<std::vector<std::size_t>> frames(scenes.size());
  std::vector<ConsistencyReport> reports(scenes.size());
  parallel_for(scenes.size(), a.common.jobs, [&](std::size_t s) {
    const fs::path flow_scene = scene_dir(a.flows, scene_name(scenes[s]), "flow-fwd");
    frames[s] = list_frames(scenes[s], a.task);
    for (std::size_t i = 0; i < frames[s].size(); ++i)
      if (frames[s][i] != frames[s].front() + i) throw DataError("frames of " + scenes[s].string() + " are not consecutive");
    std::vector<LabelMap> maps;
    std::vector<Tensor> bwd, fwd;
    for (std::size_t f : frames[s]) {
      maps.push_back(read_label_map(frame_path(scenes[s], a.task, f)));
      bwd.push_back(read_phgt(frame_path(flow_scene, "flow-bwd", f)));
      fwd.push_back(read_phgt(frame_path(flow_scene, "flow-fwd", f)));
    }
    reports[s] = temporal_consistency(maps, bwd, fwd, params);
  });
  std::string csv = "scene,frame,valid_pixels,score\n";
  double mean = 0.0;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const std::string name = scene_name(scenes[s]);
    std::size_t valid = 0;
    for (const FrameTemporalScore& f : reports[s].frames) {
      csv += fmt::format("{},{},{},{}\n", name, frames[s][f.frame], f.valid_pixels, f.skipped ? std::string() : num(100.0 * f.score));
      valid += f.valid_pixels;
    }
    csv += fmt::format("{},all,{},{}\n", name, valid, num(reports[s].score));
    mean += reports[s].score / static_cast<double>(scenes.size());
    for (const auto& w : reports[s].warnings) fmt::print(stderr, "consistency: {}: {}\n", name, w);
  }
  csv += fmt::format("final,all,,{}\n", num(mean));
  atomic_write(a.out, csv);
  fmt::print("consistency: {} scenes, score {}\n", scenes.size(), num(mean));
}

// ---------------------------------------------------------------- select

struct SelectArgs {
  Common common;
  std::string candidates, policy = "per-scene", out, report, gt, weights, similarity = "weighted-iou",
                          task = "gt-semantic";
  double keep = 25.0;
};

void run_select(const SelectArgs& a) {
  SelectionPolicy policy{parse_selection_mode(a.policy), a.keep};
  policy.validate();
  const Similarity sim = parse_similarity(a.similarity);
  const ClassWeights weights = load_weights(a.weights);
  const auto files = list_candidate_files(a.candidates);
  std::vector<FrameConsistency> fc(files.size());
  parallel_for(files.size(), a.common.jobs, [&](std::size_t i) {
    CandidateSet c = load_candidates(files[i].path);
    fc[i] = frame_consistency(c, weights, a.task, sim);
    fc[i].scene = files[i].scene;
    fc[i].frame = files[i].frame;
    if (!a.gt.empty()) {
      const LabelMap gt = read_label_map(frame_path(scene_dir(a.gt, files[i].scene, a.task), a.task, files[i].frame));
      fc[i].gt_score = 100.0 * map_similarity(aggregate_all(c).labels.at(a.task), gt, Similarity::weighted_iou, weights);
    }
  });
  const auto kept = select_pseudolabels(fc, policy);
  std::string manifest = "scene,frame,similarity\n";
  std::vector<bool> selected(fc.size(), false);
  for (std::size_t i : kept) {
    manifest += fmt::format("{},{},{}\n", fc[i].scene, fc[i].frame, fmt::format("{:.9f}", fc[i].similarity));
    selected[i] = true;
  }
  atomic_write(a.out, manifest);
  if (!a.report.empty()) {
    std::string csv = "scene,frame,similarity,gt_score,selected\n";
    for (std::size_t i = 0; i < fc.size(); ++i)
      csv += fmt::format("{},{},{:.9f},{},{}\n", fc[i].scene, fc[i].frame, fc[i].similarity,
                         fc[i].gt_score ? num(*fc[i].gt_score) : std::string(), selected[i] ? 1 : 0);
    atomic_write(a.report, csv);
  }
  fmt::print("select: kept {} of {} frames\n", kept.size(), fc.size());
  if (!a.gt.empty() && fc.size() >= 3) {
    const auto r = correlation_report(fc);
    fmt::print("select: pearson r = {}\n", r.pearson_r ? num(*r.pearson_r) : std::string("undefined"));
  }
}

// ---------------------------------------------------------------- distill

struct DistillArgs {
  Common common;
  std::string teacher, frames, scenes, size = "150k", out, log, config, task = "gt-semantic";
  std::size_t n = 20;
  std::optional<std::size_t> epochs;
};

DistillConfig distill_config_from(const Config& cfg) {
  DistillConfig d;
  d.teacher_p_visible = cfg.get_double("distill.teacher_p_visible", d.teacher_p_visible);
  d.epochs = static_cast<std::size_t>(cfg.get_int("distill.epochs", static_cast<long>(d.epochs)));
  d.batch_size = static_cast<std::size_t>(cfg.get_int("distill.batch_size", static_cast<long>(d.batch_size)));
  d.crop_fraction = cfg.get_double("distill.crop_fraction", d.crop_fraction);
  d.augment_probability = cfg.get_double("distill.augment_probability", d.augment_probability);
  d.optimizer.weight_decay = cfg.get_double("distill.weight_decay", d.optimizer.weight_decay);
  d.optimizer.schedule.lr_min = cfg.get_double("distill.lr_min", d.optimizer.schedule.lr_min);
  d.optimizer.schedule.lr_max = cfg.get_double("distill.lr_max", d.optimizer.schedule.lr_max);
  d.optimizer.schedule.period =
      static_cast<std::size_t>(cfg.get_int("distill.lr_period", static_cast<long>(d.optimizer.schedule.period)));
  d.seed = static_cast<std::uint64_t>(cfg.get_int("distill.seed", 0));
  return d;
}

bool is_ground_truth_path(const std::string& path) {
  for (const auto& part : fs::path(path))
    if (part.string().rfind("gt-", 0) == 0) return true;
  return false;
}

void run_distill(const DistillArgs& a) {
  const Config cfg = a.config.empty() ? Config::parse("") : Config::load(a.config);
  DistillConfig dc = distill_config_from(cfg);
  dc.teacher_n = a.n;
  dc.width = size_width(parse_size(a.size));
  dc.jobs = a.common.jobs;
  dc.output = a.task;
  if (a.common.seed_given()) dc.seed = a.common.seed;
  if (a.epochs) dc.epochs = *a.epochs;
  if (dc.teacher_n == 0) throw UsageError("--n must be at least 1");

  const PhgModel teacher = load_checkpoint(a.teacher);
  const auto rows = read_csv(a.frames, "scene,frame");
  if (rows.empty()) throw DataError("empty frame manifest " + a.frames);
  std::vector<ModalityBundle> frames(rows.size());
  ReadAudit::start();
  try {
    parallel_for(rows.size(), dc.jobs, [&](std::size_t i) {
      if (rows[i].size() < 2) throw DataError(a.frames + ": short manifest row");
      const fs::path scene = scene_dir(a.scenes, rows[i][0], "rgb");
      frames[i] = load_bundle(scene, parse_index(rows[i][1], a.frames), teacher.modalities(), false);
      frames[i].scene = rows[i][0];
    });
  } catch (...) {
    ReadAudit::stop();
    throw;
  }
  for (const std::string& p : ReadAudit::stop())
    if (is_ground_truth_path(p)) throw std::logic_error("distillation read a ground-truth file: " + p);

  const DistillResult r = distill(teacher, frames, dc);
  const std::string echo = echo_header("distill", {{"teacher", a.teacher},
                                                   {"size", a.size},
                                                   {"n", std::to_string(dc.teacher_n)},
                                                   {"epochs", std::to_string(dc.epochs)},
                                                   {"seed", std::to_string(dc.seed)},
                                                   {"frames", std::to_string(frames.size())}}) +
                           cfg.text();
  save_checkpoint(a.out, r.student, echo);
  if (!a.log.empty()) {
    std::string csv = "epoch,loss\n";
    for (std::size_t e = 0; e < r.epoch_loss.size(); ++e) csv += fmt::format("{},{}\n", e + 1, num(r.epoch_loss[e]));
    atomic_write(a.log, csv);
  }
  fmt::print("distill: {} frames, {} parameters -> {}\n", frames.size(), r.student.parameter_count(), a.out);
}

// ---------------------------------------------------------------- oracle

struct OracleArgs {
  Common common;
  std::string candidates, gt, algo, out, weights, mask_dist_out, similarity = "weighted-iou", task = "gt-semantic";
  std::size_t k = 5, reference_count = 0;
  bool include_reference = false;
};

void run_oracle(const OracleArgs& a) {
  if (a.algo != "topk" && a.algo != "bestk" && a.algo != "meansim") throw UsageError("--algo must be topk, bestk or meansim");
  const ClassWeights weights = load_weights(a.weights);
  const auto files = list_candidate_files(a.candidates);
  const auto sets = load_candidate_sets(files, a.common.jobs);
  const auto gts = load_gt_maps(a.gt, files, a.task, a.common.jobs);
  const OracleBenchmark bench = oracle_benchmark(sets, gts, weights, a.task);

  std::string csv = "algo,scene,frame,k,score\n";
  if (a.algo == "topk" || a.algo == "bestk") {
    std::vector<SelectionReport> reports(sets.size());
    parallel_for(sets.size(), a.common.jobs,
                 [&](std::size_t i) { reports[i] = greedy_topk_oracle(sets[i], gts[i], weights, a.task); });
    if (a.algo == "topk") {
      for (std::size_t i = 0; i < sets.size(); ++i)
        for (std::size_t j = 0; j < reports[i].ks.size(); ++j)
          csv += fmt::format("topk,{},{},{},{}\n", files[i].scene, files[i].frame, reports[i].ks[j], num(reports[i].scores[j]));
      for (std::size_t j = 0; j < bench.ks.size(); ++j) csv += fmt::format("topk,,,{},{}\n", bench.ks[j], num(bench.topk_scores[j]));
    } else {
      for (std::size_t i = 0; i < sets.size(); ++i) {
        const std::size_t k = bench.best_k[i];
        csv += fmt::format("bestk,{},{},{},{}\n", files[i].scene, files[i].frame, k, num(reports[i].scores[k - 1]));
      }
      csv += fmt::format("bestk,,,,{}\n", num(bench.bestk_score));
    }
    if (!a.mask_dist_out.empty()) {
      std::vector<double> freq(reports.front().masked_frequency.size(), 0.0);
      for (const auto& r : reports)
        for (std::size_t j = 0; j < freq.size(); ++j) freq[j] += r.masked_frequency[j] / static_cast<double>(reports.size());
      std::string dist = "index,masked_frequency\n";
      for (std::size_t j = 0; j < freq.size(); ++j) dist += fmt::format("{},{}\n", j, num(freq[j]));
      atomic_write(a.mask_dist_out, dist);
    }
  } else {
    MeanSimilarityOptions opt;
    opt.reference_count = a.reference_count;
    opt.similarity = parse_similarity(a.similarity);
    opt.k = a.k;
    opt.include_reference = a.include_reference;
    std::vector<LabelMap> preds(sets.size());
    parallel_for(sets.size(), a.common.jobs, [&](std::size_t i) {
      Rng rng = frame_rng(a.common.seed, files[i].scene, files[i].frame);
      preds[i] = mean_similarity_select(sets[i], opt, weights, a.task, rng).labels.at(a.task);
    });
    for (std::size_t i = 0; i < sets.size(); ++i)
      csv += fmt::format("meansim,{},{},{},{}\n", files[i].scene, files[i].frame, a.k,
                         num(100.0 * map_similarity(preds[i], gts[i], Similarity::weighted_iou, weights)));
    csv += fmt::format("meansim,,,{},{}\n", a.k, num(benchmark(group_by_scene(files, preds, gts), weights).final_score));
  }
  csv += fmt::format("average,,,{},{}\n", sets.front().candidates.size(), num(bench.simple_average));
  atomic_write(a.out, csv);
  fmt::print("oracle: {} frames, simple average {}, best TopK {}, BestK {}\n", sets.size(), num(bench.simple_average),
             num(bench.topk_max()), num(bench.bestk_score));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Probabilistic hyper-graph masked autoencoder toolkit"};
  app.require_subcommand(1);
  const auto kSizes = CLI::IsMember({"150k", "430k", "1.1m", "4.4m"}, CLI::ignore_case);
  const auto kSimilarities = CLI::IsMember({"weighted-iou", "accuracy"});

  GenArgs gen;
  auto* c_gen = app.add_subcommand("gen", "Generate synthetic scenes with simulated experts");
  c_gen->add_option("--spec", gen.spec, "Scene spec file ([gen] and [scene.<name>] sections)")->required();
  c_gen->add_option("--out", gen.out, "Output dataset root")->required();
  add_common(c_gen, gen.common);

  DeriveArgs derive;
  auto* c_derive = app.add_subcommand("derive", "Run the derivation graph over every scene");
  c_derive->add_option("--config", derive.config, "Derivation graph ([node.<name>] sections)")->required();
  c_derive->add_option("--scenes", derive.scenes, "Dataset root or a single scene")->required();
  c_derive->add_flag("--shuffle", derive.shuffle, "Randomize the order among ready nodes using --seed");
  add_common(c_derive, derive.common);

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Fit a model and write checkpoints and the epoch log");
  c_train->add_option("--config", train.config, "Config with [modalities], [train] and optional [data]")->required();
  c_train->add_option("--mode", train.mode, "1all or 1rand")->required()->check(CLI::IsMember({"1all", "1rand"}, CLI::ignore_case));
  c_train->add_option("--size", train.size, "150k, 430k, 1.1m or 4.4m")->required()->check(kSizes);
  c_train->add_option("--train", train.train, "Training dataset roots (overrides data.train)");
  c_train->add_option("--val", train.val, "Validation dataset roots (overrides data.val)");
  c_train->add_option("--epochs", train.epochs, "Override train.epochs");
  c_train->add_option("--out", train.out, "Output directory")->required();
  add_common(c_train, train.common);

  InferArgs infer;
  auto* c_infer = app.add_subcommand("infer", "Write candidate sets and aggregated predictions");
  c_infer->add_option("--ckpt", infer.ckpt, "Model checkpoint")->required();
  c_infer->add_option("--scene", infer.scene, "Dataset root or a single scene")->required();
  infer.n_option = c_infer->add_option("--n", infer.n, "Random hyper-edges per frame");
  c_infer->add_option("--p-visible", infer.p_visible, "Probability that an intermediate stays visible");
  c_infer->add_flag("--enumerate", infer.enumerate, "Use every mask except the all-masked one");
  c_infer->add_flag("--all-visible", infer.all_visible, "Single full hyper-edge (1All)");
  c_infer->add_option("--mask-dist", infer.mask_dist, "CSV index,masked_frequency to sample masks from");
  c_infer->add_option("--aggregation", infer.aggregation, "mean or vote")->check(CLI::IsMember({"mean", "vote"}));
  c_infer->add_flag("--no-candidates", infer.no_candidates, "Write aggregates only");
  c_infer->add_option("--out", infer.out, "Output root")->required();
  add_common(c_infer, infer.common);

  EvalArgs eval;
  auto* c_eval = app.add_subcommand("eval", "Benchmark predictions against ground truth");
  c_eval->add_option("--pred", eval.pred, "Prediction root")->required();
  c_eval->add_option("--gt", eval.gt, "Ground-truth root")->required();
  c_eval->add_option("--weights", eval.weights, "Class weights file");
  c_eval->add_option("--task", eval.task, "Predicted modality");
  c_eval->add_option("--gt-task", eval.gt_task, "Ground-truth modality (defaults to --task)");
  c_eval->add_option("--out", eval.out, "Output CSV")->required();
  add_common(c_eval, eval.common);

  ConsistencyArgs cons;
  auto* c_cons = app.add_subcommand("consistency", "Temporal consistency of predicted class maps");
  c_cons->add_option("--pred", cons.pred, "Prediction root")->required();
  c_cons->add_option("--flows", cons.flows, "Root holding flow-fwd and flow-bwd per scene")->required();
  c_cons->add_option("--task", cons.task, "Predicted modality");
  c_cons->add_option("--threshold", cons.threshold, "Forward-backward threshold in pixels");
  c_cons->add_flag("--no-occlusion", cons.no_occlusion, "Disable the forward-backward check");
  c_cons->add_option("--out", cons.out, "Output CSV")->required();
  add_common(c_cons, cons.common);

  SelectArgs sel;
  auto* c_sel = app.add_subcommand("select", "Select pseudo-labels by frame consistency");
  c_sel->add_option("--candidates", sel.candidates, "Root written by infer")->required();
  c_sel->add_option("--policy", sel.policy, "per-scene or global")->check(CLI::IsMember({"per-scene", "global"}));
  c_sel->add_option("--keep", sel.keep, "Percentage kept per pool");
  c_sel->add_option("--similarity", sel.similarity, "weighted-iou or accuracy")->check(kSimilarities);
  c_sel->add_option("--weights", sel.weights, "Class weights file");
  c_sel->add_option("--task", sel.task, "Categorical output");
  c_sel->add_option("--gt", sel.gt, "Ground-truth root; adds gt_score to the report");
  c_sel->add_option("--report", sel.report, "CSV with every frame");
  c_sel->add_option("--out", sel.out, "Manifest CSV")->required();
  add_common(c_sel, sel.common);

  DistillArgs dist;
  auto* c_dist = app.add_subcommand("distill", "Distill an RGB-only student from N-random ensembles");
  c_dist->add_option("--teacher", dist.teacher, "Teacher checkpoint")->required();
  c_dist->add_option("--n", dist.n, "Teacher ensemble size");
  c_dist->add_option("--frames", dist.frames, "Manifest CSV (scene,frame,...)")->required();
  c_dist->add_option("--scenes", dist.scenes, "Dataset root holding the manifest scenes")->required();
  c_dist->add_option("--size", dist.size, "Student size")->check(kSizes);
  c_dist->add_option("--epochs", dist.epochs, "Override distill.epochs");
  c_dist->add_option("--config", dist.config, "Optional [distill] section");
  c_dist->add_option("--task", dist.task, "Categorical output to distill");
  c_dist->add_option("--log", dist.log, "Per-epoch loss CSV");
  c_dist->add_option("--out", dist.out, "Student checkpoint")->required();
  add_common(c_dist, dist.common);

  OracleArgs orc;
  auto* c_orc = app.add_subcommand("oracle", "Ground-truth candidate selection (evaluation only)");
  c_orc->add_option("--candidates", orc.candidates, "Root written by infer")->required();
  c_orc->add_option("--gt", orc.gt, "Ground-truth root")->required();
  c_orc->add_option("--algo", orc.algo, "topk, bestk or meansim")->required()->check(CLI::IsMember({"topk", "bestk", "meansim"}));
  c_orc->add_option("--k", orc.k, "meansim: candidates kept around the reference");
  c_orc->add_option("--reference-count", orc.reference_count, "meansim: candidates forming the reference (0 = all)");
  c_orc->add_flag("--include-reference", orc.include_reference, "meansim: join the reference candidates");
  c_orc->add_option("--similarity", orc.similarity, "meansim: weighted-iou or accuracy")->check(kSimilarities);
  c_orc->add_option("--weights", orc.weights, "Class weights file");
  c_orc->add_option("--task", orc.task, "Categorical output");
  c_orc->add_option("--mask-dist-out", orc.mask_dist_out, "topk/bestk: masking frequency of the best candidates");
  c_orc->add_option("--out", orc.out, "Output CSV")->required();
  add_common(c_orc, orc.common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (c_gen->parsed()) run_gen(gen);
    if (c_derive->parsed()) run_derive(derive);
    if (c_train->parsed()) run_train(train);
    if (c_infer->parsed()) run_infer(infer);
    if (c_eval->parsed()) run_eval(eval);
    if (c_cons->parsed()) run_consistency(cons);
    if (c_sel->parsed()) run_select(sel);
    if (c_dist->parsed()) run_distill(dist);
    if (c_orc->parsed()) run_oracle(orc);
  } catch (const UsageError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 2;
  } catch (const DataError& e) {
    fmt::print(stderr, "data error: {}\n", e.what());
    return 3;
  } catch (const NumericError& e) {
    fmt::print(stderr, "numeric error: {}\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
  return 0;
}
