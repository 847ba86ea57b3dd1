#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "phg/autodiff.hpp"
#include "phg/io.hpp"
#include "phg/modality.hpp"
#include "phg/optim.hpp"
#include "phg/rng.hpp"

namespace phg {

// Named model sizes and the trunk width that realises each at 39 input channels.
enum class SizeTier { s150k, s430k, s1_1m, s4_4m };

SizeTier parse_size(const std::string& name);
const char* size_name(SizeTier tier);
std::size_t size_width(SizeTier tier);
std::size_t nominal_parameters(SizeTier tier);

// Three-level UNet: two 3x3 convs per level, widths w, 2w, 4w and an 8w
// bottleneck, skip concatenation in the decoder, and one 1x1 head per output.
class PhgModel {
 public:
  PhgModel() = default;
  PhgModel(ModalitySet set, std::size_t width, std::uint64_t seed);

  const ModalitySet& modalities() const { return set_; }
  std::size_t width() const { return width_; }
  std::vector<Tensor>& parameters() { return params_; }
  const std::vector<Tensor>& parameters() const { return params_; }
  const std::vector<std::string>& parameter_names() const { return names_; }
  std::size_t parameter_count() const;
  std::size_t trunk_input_channels() const { return set_.network_channels(); }

  // Records the network on the tape for a [C,H,W] input; H and W must be
  // divisible by 8. Returns one Var per output modality (logits for
  // categorical outputs).
  std::map<std::string, Var> forward(Tape& tape, const Tensor& input) const;

  std::map<std::string, Tensor> forward(const Tensor& input) const;
  std::map<std::string, Tensor> forward(const ModalityBundle& bundle, const HyperEdgeMask& mask) const;

 private:
  struct Conv {
    std::size_t kernel = 0, bias = 0, padding = 0;
  };
  std::size_t add_conv(std::size_t in, std::size_t out, std::size_t k, const std::string& name, Rng& rng);
  Var apply(Tape& tape, const std::vector<Var>& p, std::size_t conv, Var x, bool relu) const;

  ModalitySet set_;
  std::size_t width_ = 0;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
  std::vector<Conv> convs_;
  std::vector<std::size_t> encoder_, decoder_, heads_;
};

enum class TrainMode { one_all, one_rand };

TrainMode parse_mode(const std::string& name);
const char* mode_name(TrainMode mode);

struct TrainConfig {
  TrainMode mode = TrainMode::one_rand;
  double p_visible = 0.5;  // forced to 1 in OneAll
  std::size_t epochs = 20;
  std::size_t batch_size = 4;
  double crop_fraction = 0.5;  // crops keep at least 1 - crop_fraction of each side
  double augment_probability = 0.5;
  // Probability that each output contributes to a step's loss; 1 reconstructs
  // every output every step.
  double reconstruct_probability = 1.0;
  std::uint64_t seed = 0;
  AdamWConfig optimizer;
  std::string select_task;  // shared-best checkpoint criterion; empty selects the first output
  std::size_t jobs = 1;

  double effective_p() const { return mode == TrainMode::one_all ? 1.0 : p_visible; }
  void validate() const;
};

// Reads the [train] section.
TrainConfig train_config_from(const Config& config);

// Crops a square-scaled window covering s in [1 - crop_fraction, 1] of each
// side and rescales it back with nearest-neighbour sampling, identically for
// every modality.
ModalityBundle augment(const ModalityBundle& bundle, double crop_fraction, Rng& rng);

// Unweighted mean of each output's task loss: cross-entropy for categorical
// outputs, mean squared error otherwise.
Var task_loss(Tape& tape, const ModalitySet& set, const std::map<std::string, Var>& predictions,
              const ModalityBundle& targets, const std::vector<bool>* include = nullptr);

// One optimizer step on the batch; returns the mean loss. Throws NumericError
// on a non-finite loss.
double train_step(PhgModel& model, std::span<const ModalityBundle* const> batch, const TrainConfig& config, Rng& rng,
                  OptimizerState& state);

struct TaskMetric {
  std::string task;
  std::string metric;  // "miou" (higher is better) or "l2" (lower is better)
  double value = 0.0;
};

// Full-hyper-edge metrics on labelled bundles: global weighted mIoU (scenes
// averaged) for categorical outputs, 100 x MSE for continuous ones.
std::vector<TaskMetric> evaluate_model(const PhgModel& model, const std::vector<ModalityBundle>& bundles,
                                       std::size_t jobs = 1);

struct EpochRow {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  TaskMetric metric;
};

struct BestCheckpoint {
  std::size_t epoch = 0;
  double value = 0.0;
  std::vector<Tensor> parameters;
};

struct FitResult {
  std::vector<EpochRow> log;
  std::map<std::string, BestCheckpoint> best_per_task;
  BestCheckpoint shared_best;
};

// Marks a training run; evaluation-only oracles refuse to run while one is
// active.
class TrainingScope {
 public:
  TrainingScope();
  ~TrainingScope();
  TrainingScope(const TrainingScope&) = delete;
  TrainingScope& operator=(const TrainingScope&) = delete;
  static bool active();
};

FitResult fit(PhgModel& model, const std::vector<ModalityBundle>& train, const std::vector<ModalityBundle>& val,
              const TrainConfig& config);

// CSV with header epoch,task,metric,value,train_loss.
std::string epoch_log_csv(const std::vector<EpochRow>& log);

void save_checkpoint(const fs::path& path, const PhgModel& model, const std::string& config_echo = "");
PhgModel load_checkpoint(const fs::path& path, std::string* config_echo = nullptr);

}  // namespace phg
