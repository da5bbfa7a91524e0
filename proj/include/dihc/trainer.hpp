#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dihc/data.hpp"
#include "dihc/losses.hpp"
#include "dihc/metrics.hpp"
#include "dihc/network.hpp"

namespace dihc {

struct AblationFlags {
  bool imd = true;   // diversified sub-layer configs
  bool ms = true;    // deep supervision over all scales
  bool dihc = true;  // diagonal hierarchical consistency
};

struct TrainConfig {
  int t_max = 1000;
  float lr = 0.01f;
  float momentum = 0.9f;
  float weight_decay = 1e-4f;
  uint64_t seed = 1;
  double labelled_fraction = 0.1;
  AblationFlags ablation;
  bool consistency = true;  // false zeroes every consistency weight
  bool detach_pseudo = true;
  bool ramp_squared = false;
  int eval_every = 100;
  bool augment = true;
  int patch = 32;
  int base_channels = 8;
  int depth = 4;
  int labelled_per_batch = 2;
  int unlabelled_per_batch = 2;
  ConsistencyWeights weights;
  SharpenConfig sharpen;
  double ramp_base = 0.1;
  double lambda_sup = 1.0;
  float dice_smooth = 1e-5f;
  int test_count = 0;  // volumes held out for evaluation (CLI-side split)
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Throws ConfigError on invalid combinations (DiHC requires MS, etc.).
void validate_config(const TrainConfig& cfg);

// enable_imd=false assigns model 2's configuration (batch norm + transposed
// conv) to every slot; seeds still differ per slot.
std::array<SubModelConfig, 3> apply_imd(const TrainConfig& cfg, bool enable_imd);

struct StepLog {
  int step = 0;
  LossBreakdown loss;
  double disagreement = 0.0;
};

struct RunLog {
  std::vector<StepLog> steps;
  std::vector<std::pair<int, std::vector<MetricReport>>> evals;
};

std::string runlog_csv(const RunLog& log);

class Trainer {
 public:
  Trainer(TrainConfig cfg, DatasetSplit split, std::vector<Sample> eval_set);

  LossBreakdown train_step(int t);
  std::vector<MetricReport> evaluate();

  // Runs steps [step(), t_max); writes runlog.csv, eval CSVs and checkpoints
  // into out_dir when non-empty.
  RunLog run(const std::string& out_dir = "");

  void save_checkpoint(const std::string& path) const;
  // Restores parameters, statistics, optimizer state and step counter; the
  // config and dataset must match the saving run.
  void load_checkpoint(const std::string& path);

  int step() const { return step_; }
  Ensemble& models() { return models_; }
  const TrainConfig& config() const { return cfg_; }
  const RunLog& log() const { return log_; }

 private:
  double disagreement(const std::array<MultiScalePrediction, 3>& preds) const;

  TrainConfig cfg_;
  DatasetSplit split_;
  std::vector<Sample> eval_set_;
  Ensemble models_;
  NamedParams all_params_;  // "m{i}/" prefixed
  std::unique_ptr<SgdOptimizer> optimizer_;
  RampSchedule sched_;
  int step_ = 0;
  RunLog log_;
};

// Checkpoint container: magic "DCKP" | u32 version | u32 blob count, then
// per blob u32 name length | name | u64 element count | f32 payload (LE).
struct CheckpointBlob {
  std::string name;
  std::vector<float> data;
};
void write_checkpoint(const std::string& path, const std::vector<CheckpointBlob>& blobs);
std::vector<CheckpointBlob> read_checkpoint(const std::string& path);

// Architecture fields stored in a checkpoint, enough to rebuild the ensemble
// for standalone evaluation.
struct CheckpointArch {
  int base_channels = 8;
  int depth = 4;
  int patch = 32;
  bool imd = true;
};
CheckpointArch checkpoint_arch(const std::vector<CheckpointBlob>& blobs);
uint64_t checkpoint_seed(const std::vector<CheckpointBlob>& blobs);
int checkpoint_step(const std::vector<CheckpointBlob>& blobs);

}  // namespace dihc
