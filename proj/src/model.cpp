#include "phg/model.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "phg/dataset.hpp"
#include "phg/error.hpp"
#include "phg/metrics.hpp"

namespace phg {

namespace {

struct TierInfo {
  SizeTier tier;
  const char* name;
  std::size_t width;
  std::size_t nominal;
};

constexpr TierInfo kTiers[] = {
    {SizeTier::s150k, "150k", 9, 150'000},
    {SizeTier::s430k, "430k", 15, 430'000},
    {SizeTier::s1_1m, "1.1m", 24, 1'100'000},
    {SizeTier::s4_4m, "4.4m", 48, 4'400'000},
};

const TierInfo& tier_info(SizeTier t) {
  for (const auto& i : kTiers)
    if (i.tier == t) return i;
  throw std::logic_error("unknown size tier");
}

}  // namespace

SizeTier parse_size(const std::string& name) {
  std::string lower = name;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  for (const auto& i : kTiers)
    if (lower == i.name) return i.tier;
  throw DataError("unknown model size '" + name + "' (expected 150k, 430k, 1.1m or 4.4m)");
}

const char* size_name(SizeTier tier) { return tier_info(tier).name; }
std::size_t size_width(SizeTier tier) { return tier_info(tier).width; }
std::size_t nominal_parameters(SizeTier tier) { return tier_info(tier).nominal; }

PhgModel::PhgModel(ModalitySet set, std::size_t width, std::uint64_t seed) : set_(std::move(set)), width_(width) {
  if (width == 0) throw DataError("model width must be positive");
  Rng rng(seed);
  const std::size_t w = width;
  std::size_t in = set_.network_channels();
  const std::size_t enc_widths[] = {w, 2 * w, 4 * w, 8 * w};
  for (std::size_t l = 0; l < 4; ++l) {
    encoder_.push_back(add_conv(in, enc_widths[l], 3, fmt::format("enc{}.conv0", l), rng));
    encoder_.push_back(add_conv(enc_widths[l], enc_widths[l], 3, fmt::format("enc{}.conv1", l), rng));
    in = enc_widths[l];
  }
  for (std::size_t l = 3; l-- > 0;) {
    decoder_.push_back(add_conv(in + enc_widths[l], enc_widths[l], 3, fmt::format("dec{}.conv0", l), rng));
    decoder_.push_back(add_conv(enc_widths[l], enc_widths[l], 3, fmt::format("dec{}.conv1", l), rng));
    in = enc_widths[l];
  }
  for (std::size_t o : set_.outputs()) heads_.push_back(add_conv(w, set_[o].channels, 1, "head." + set_[o].name, rng));
}

std::size_t PhgModel::add_conv(std::size_t in, std::size_t out, std::size_t k, const std::string& name, Rng& rng) {
  Tensor kernel({out, in, k, k});
  const double std = std::sqrt((k == 1 ? 1.0 : 2.0) / static_cast<double>(in * k * k));
  for (float& v : kernel.data()) v = static_cast<float>(std * rng.normal());
  Conv c;
  c.kernel = params_.size();
  params_.push_back(std::move(kernel));
  names_.push_back(name + ".weight");
  c.bias = params_.size();
  params_.emplace_back(Shape{out});
  names_.push_back(name + ".bias");
  c.padding = k / 2;
  convs_.push_back(c);
  return convs_.size() - 1;
}

std::size_t PhgModel::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& p : params_) n += p.size();
  return n;
}

Var PhgModel::apply(Tape& tape, const std::vector<Var>& p, std::size_t conv, Var x, bool relu) const {
  const Conv& c = convs_[conv];
  Var y = ad::conv2d(tape, x, p[c.kernel], p[c.bias], c.padding);
  return relu ? ad::relu(tape, y) : y;
}

std::map<std::string, Var> PhgModel::forward(Tape& tape, const Tensor& input) const {
  if (input.rank() != 3 || input.dim(0) != set_.network_channels())
    throw DataError("model input has shape " + shape_str(input.shape()) + ", expected " +
                    std::to_string(set_.network_channels()) + " channels");
  if (input.dim(1) % 8 != 0 || input.dim(2) % 8 != 0)
    throw DataError("model input resolution must be divisible by 8, got " + shape_str(input.shape()));
  std::vector<Var> p;
  p.reserve(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) p.push_back(tape.parameter(i, params_[i]));

  Var x = tape.constant(input);
  std::vector<Var> skips;
  for (std::size_t l = 0; l < 4; ++l) {
    if (l > 0) x = ad::max_pool2(tape, x);
    x = apply(tape, p, encoder_[2 * l], x, true);
    x = apply(tape, p, encoder_[2 * l + 1], x, true);
    skips.push_back(x);
  }
  for (std::size_t d = 0; d < 3; ++d) {
    const std::size_t l = 2 - d;
    const Var parts[] = {ad::upsample2(tape, x), skips[l]};
    x = ad::concat_channels(tape, parts);
    x = apply(tape, p, decoder_[2 * d], x, true);
    x = apply(tape, p, decoder_[2 * d + 1], x, true);
  }
  std::map<std::string, Var> out;
  for (std::size_t h = 0; h < heads_.size(); ++h) out.emplace(set_[set_.outputs()[h]].name, apply(tape, p, heads_[h], x, false));
  return out;
}

std::map<std::string, Tensor> PhgModel::forward(const Tensor& input) const {
  Tape tape;
  const auto vars = forward(tape, input);
  std::map<std::string, Tensor> out;
  for (const auto& [name, v] : vars) out.emplace(name, tape.value(v));
  return out;
}

std::map<std::string, Tensor> PhgModel::forward(const ModalityBundle& bundle, const HyperEdgeMask& mask) const {
  return forward(apply_mask(set_, bundle, mask));
}

TrainMode parse_mode(const std::string& name) {
  std::string lower = name;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "1all" || lower == "oneall") return TrainMode::one_all;
  if (lower == "1rand" || lower == "onerand") return TrainMode::one_rand;
  throw DataError("unknown training mode '" + name + "' (expected 1all or 1rand)");
}

const char* mode_name(TrainMode mode) { return mode == TrainMode::one_all ? "1all" : "1rand"; }

void TrainConfig::validate() const {
  if (p_visible < 0.0 || p_visible > 1.0) throw DataError("p_visible must be in [0,1]");
  if (batch_size == 0) throw DataError("batch size must be positive");
  if (crop_fraction < 0.0 || crop_fraction >= 1.0) throw DataError("crop fraction must be in [0,1)");
  if (augment_probability < 0.0 || augment_probability > 1.0) throw DataError("augment probability must be in [0,1]");
  if (reconstruct_probability <= 0.0 || reconstruct_probability > 1.0)
    throw DataError("reconstruct probability must be in (0,1]");
  if (optimizer.schedule.period == 0 || optimizer.schedule.lr_min < 0.0 || optimizer.schedule.lr_max < optimizer.schedule.lr_min)
    throw DataError("invalid learning-rate schedule");
}

TrainConfig train_config_from(const Config& c) {
  TrainConfig t;
  if (c.has("train.mode")) t.mode = parse_mode(c.get("train.mode"));
  t.p_visible = c.get_double("train.p_visible", t.p_visible);
  t.epochs = static_cast<std::size_t>(c.get_int("train.epochs", static_cast<long>(t.epochs)));
  t.batch_size = static_cast<std::size_t>(c.get_int("train.batch_size", static_cast<long>(t.batch_size)));
  t.crop_fraction = c.get_double("train.crop_fraction", t.crop_fraction);
  t.augment_probability = c.get_double("train.augment_probability", t.augment_probability);
  t.reconstruct_probability = c.get_double("train.reconstruct_probability", t.reconstruct_probability);
  t.seed = static_cast<std::uint64_t>(c.get_int("train.seed", static_cast<long>(t.seed)));
  t.optimizer.weight_decay = c.get_double("train.weight_decay", t.optimizer.weight_decay);
  t.optimizer.schedule.lr_min = c.get_double("train.lr_min", t.optimizer.schedule.lr_min);
  t.optimizer.schedule.lr_max = c.get_double("train.lr_max", t.optimizer.schedule.lr_max);
  t.optimizer.schedule.period =
      static_cast<std::size_t>(c.get_int("train.lr_period", static_cast<long>(t.optimizer.schedule.period)));
  t.select_task = c.get("train.select_task", t.select_task);
  t.validate();
  return t;
}

ModalityBundle augment(const ModalityBundle& bundle, double crop_fraction, Rng& rng) {
  const double s = 1.0 - rng.uniform() * crop_fraction;
  const double fy = rng.uniform(), fx = rng.uniform();
  ModalityBundle out;
  out.scene = bundle.scene;
  out.frame = bundle.frame;
  for (const auto& [name, t] : bundle.maps) {
    const std::size_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
    const std::size_t ch = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(s * static_cast<double>(h))));
    const std::size_t cw = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(s * static_cast<double>(w))));
    const std::size_t y0 = static_cast<std::size_t>(fy * static_cast<double>(h - ch));
    const std::size_t x0 = static_cast<std::size_t>(fx * static_cast<double>(w - cw));
    Tensor r({c, h, w});
    for (std::size_t y = 0; y < h; ++y) {
      const std::size_t sy = y0 + std::min(ch - 1, y * ch / h);
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t sx = x0 + std::min(cw - 1, x * cw / w);
        for (std::size_t k = 0; k < c; ++k) r.at(k, y, x) = t.at(k, sy, sx);
      }
    }
    out.maps.emplace(name, std::move(r));
  }
  return out;
}

Var task_loss(Tape& tape, const ModalitySet& set, const std::map<std::string, Var>& predictions,
              const ModalityBundle& targets, const std::vector<bool>* include) {
  Var total;
  std::size_t used = 0;
  for (std::size_t j = 0; j < set.outputs().size(); ++j) {
    if (include && !(*include)[j]) continue;
    const ModalitySpec& s = set[set.outputs()[j]];
    const Var pred = predictions.at(s.name);
    const Tensor& target = targets.at(s.name);
    const Var l = s.categorical() ? ad::cross_entropy(tape, pred, argmax_channels(target)) : ad::l2_loss(tape, pred, target);
    total = total.valid() ? ad::add(tape, total, l) : l;
    ++used;
  }
  if (used == 0) throw DataError("no output contributes to the loss");
  return ad::scale(tape, total, 1.0f / static_cast<float>(used));
}

double train_step(PhgModel& model, std::span<const ModalityBundle* const> batch, const TrainConfig& config, Rng& rng,
                  OptimizerState& state) {
  if (batch.empty()) throw DataError("empty batch");
  const ModalitySet& set = model.modalities();
  std::vector<Tensor> grads;
  double loss_sum = 0.0;
  for (const ModalityBundle* sample : batch) {
    const HyperEdgeMask mask = sample_mask(set, config.effective_p(), rng);
    std::vector<bool> include(set.outputs().size(), true);
    if (config.reconstruct_probability < 1.0) {
      bool any = false;
      for (std::size_t j = 0; j < include.size(); ++j) any |= (include[j] = rng.bernoulli(config.reconstruct_probability));
      if (!any) include[rng.below(include.size())] = true;
    }
    const bool aug = config.crop_fraction > 0.0 && rng.bernoulli(config.augment_probability);
    const ModalityBundle augmented = aug ? augment(*sample, config.crop_fraction, rng) : ModalityBundle{};
    const ModalityBundle& b = aug ? augmented : *sample;

    Tape tape;
    const auto preds = model.forward(tape, apply_mask(set, b, mask));
    const Var loss = task_loss(tape, set, preds, b, &include);
    const double value = tape.value(loss)[0];
    if (!std::isfinite(value))
      throw NumericError(fmt::format("non-finite training loss at step {} (scene {}, frame {}, mask {})", state.step,
                                     sample->scene, sample->frame, mask.key()));
    loss_sum += value;
    auto g = tape.gradients(loss, model.parameters());
    if (grads.empty()) {
      grads = std::move(g);
    } else {
      for (std::size_t i = 0; i < grads.size(); ++i)
        for (std::size_t k = 0; k < grads[i].size(); ++k) grads[i][k] += g[i][k];
    }
  }
  const float inv = 1.0f / static_cast<float>(batch.size());
  for (Tensor& g : grads)
    for (float& v : g.data()) v *= inv;
  adamw_step(model.parameters(), grads, state);
  return loss_sum / static_cast<double>(batch.size());
}

std::vector<TaskMetric> evaluate_model(const PhgModel& model, const std::vector<ModalityBundle>& bundles, std::size_t jobs) {
  if (bundles.empty()) throw DataError("evaluation set is empty");
  const ModalitySet& set = model.modalities();
  const HyperEdgeMask all = HyperEdgeMask::all(set.intermediates().size(), true);
  std::vector<std::map<std::string, Tensor>> preds(bundles.size());
  parallel_for(bundles.size(), jobs, [&](std::size_t i) { preds[i] = model.forward(bundles[i], all); });

  std::vector<TaskMetric> out;
  for (std::size_t o : set.outputs()) {
    const ModalitySpec& s = set[o];
    if (s.categorical()) {
      std::vector<SceneFrames> scenes;
      for (std::size_t i = 0; i < bundles.size(); ++i) {
        if (scenes.empty() || scenes.back().scene != bundles[i].scene) scenes.push_back({bundles[i].scene, {}, {}});
        scenes.back().pred.push_back(argmax_channels(preds[i].at(s.name)));
        scenes.back().gt.push_back(argmax_channels(bundles[i].at(s.name)));
      }
      const ClassWeights weights = s.classes == kSemanticClasses ? ClassWeights::dronescapes() : ClassWeights::uniform(s.classes);
      out.push_back({s.name, "miou", benchmark(scenes, weights).final_score});
    } else {
      double sum = 0.0;
      for (std::size_t i = 0; i < bundles.size(); ++i) sum += l2_metric(preds[i].at(s.name), bundles[i].at(s.name));
      out.push_back({s.name, "l2", sum / static_cast<double>(bundles.size())});
    }
  }
  return out;
}

namespace {

std::atomic<int> g_training_scopes{0};

}  // namespace

TrainingScope::TrainingScope() { ++g_training_scopes; }
TrainingScope::~TrainingScope() { --g_training_scopes; }
bool TrainingScope::active() { return g_training_scopes.load() > 0; }

namespace {

bool better(const TaskMetric& m, double candidate, double incumbent) {
  return m.metric == "l2" ? candidate < incumbent : candidate > incumbent;
}

}  // namespace

FitResult fit(PhgModel& model, const std::vector<ModalityBundle>& train, const std::vector<ModalityBundle>& val,
              const TrainConfig& config) {
  config.validate();
  const TrainingScope scope;
  if (train.empty()) throw DataError("training set is empty");
  if (val.empty()) throw DataError("validation set is empty");
  for (const auto& t : train)
    for (const auto& v : val)
      if (t.scene == v.scene) throw DataError("scene '" + t.scene + "' is in both training and validation sets");
  for (const auto& b : train) validate_bundle(model.modalities(), b);
  for (const auto& b : val) validate_bundle(model.modalities(), b);

  const ModalitySet& set = model.modalities();
  const std::string select = config.select_task.empty() ? set[set.outputs().front()].name : config.select_task;
  if (!set.index_of(select) || set.get(select).role != Role::output)
    throw DataError("selection task '" + select + "' is not an output");

  Rng rng(config.seed);
  OptimizerState state(config.optimizer, model.parameters());
  FitResult result;
  bool have_shared = false;
  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double loss = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      std::vector<const ModalityBundle*> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + config.batch_size); ++i) batch.push_back(&train[order[i]]);
      loss += train_step(model, batch, config, rng, state);
      ++steps;
    }
    loss /= static_cast<double>(steps);
    for (const TaskMetric& m : evaluate_model(model, val, config.jobs)) {
      result.log.push_back({epoch, loss, m});
      auto it = result.best_per_task.find(m.task);
      if (it == result.best_per_task.end() || better(m, m.value, it->second.value))
        result.best_per_task[m.task] = {epoch, m.value, model.parameters()};
      if (m.task == select && (!have_shared || better(m, m.value, result.shared_best.value))) {
        result.shared_best = {epoch, m.value, model.parameters()};
        have_shared = true;
      }
    }
  }
  return result;
}

std::string epoch_log_csv(const std::vector<EpochRow>& log) {
  std::string s = "epoch,task,metric,value,train_loss\n";
  for (const auto& r : log)
    s += fmt::format("{},{},{},{:.6f},{:.6f}\n", r.epoch, r.metric.task, r.metric.metric, r.metric.value, r.train_loss);
  return s;
}

void save_checkpoint(const fs::path& path, const PhgModel& model, const std::string& config_echo) {
  std::vector<ContainerEntry> entries;
  entries.push_back({"meta.modalities", DType::u8, string_tensor(describe_modality_set(model.modalities()))});
  entries.push_back({"meta.width", DType::f32, Tensor({1}, {static_cast<float>(model.width())})});
  entries.push_back({"meta.config", DType::u8, string_tensor(config_echo)});
  for (std::size_t i = 0; i < model.parameters().size(); ++i)
    entries.push_back({model.parameter_names()[i], DType::f32, model.parameters()[i]});
  write_container(path, entries);
}

PhgModel load_checkpoint(const fs::path& path, std::string* config_echo) {
  const auto entries = read_container(path);
  const ModalitySet set = parse_modality_set(tensor_string(find_entry(entries, "meta.modalities").tensor));
  const float wf = find_entry(entries, "meta.width").tensor[0];
  if (!(wf >= 1.0f) || wf != std::floor(wf)) throw DataError(path.string() + ": bad model width");
  PhgModel model(set, static_cast<std::size_t>(wf), 0);
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    const Tensor& t = find_entry(entries, model.parameter_names()[i]).tensor;
    if (t.shape() != model.parameters()[i].shape())
      throw DataError(path.string() + ": parameter '" + model.parameter_names()[i] + "' has shape " + shape_str(t.shape()));
    model.parameters()[i] = t;
  }
  if (config_echo) *config_echo = tensor_string(find_entry(entries, "meta.config").tensor);
  return model;
}

}  // namespace phg
