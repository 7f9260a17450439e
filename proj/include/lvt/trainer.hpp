#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lvt/model.hpp"

namespace lvt::train {

// Synthetic motion task: a bright sprite walks a ring of cells over a
// static textured background, and the class is the (signed) angular stride
// of the walk. Every valid stride is coprime to the ring size and the walk
// runs exactly one lap, so every class visits the same cell set; a
// frame-shuffled clip keeps at most the corner-cue bit by construction and
// only the temporal order resolves the class within a cue group.
struct SyntheticTask {
  std::int64_t num_classes = 4;
  std::int64_t frames = 8;  // also the ring cell count
  std::int64_t image_size = 16;
  std::int64_t channels = 1;
  std::uint64_t seed = 1;
  double texture = 0.6;  // static per-clip background amplitude
  double noise = 0.25;   // per-frame pixel noise amplitude
  double sprite = 2.5;   // sprite brightness
  // Static 2x2 corner marker, signed by class parity. Worth exactly one
  // bit, so order-blind models cap at num_classes/2 groups; 0 disables.
  double cue = 0.0;

  void validate() const;
  // Class index -> ring stride, each coprime to the ring size.
  std::vector<std::int64_t> strides() const;
  // Ring cell centers as (row, col), one per cell index.
  std::vector<std::pair<std::int64_t, std::int64_t>> cells() const;
  std::string echo() const;
  std::uint64_t fingerprint() const;
};

enum class Split { Train, Val };

// Deterministic per (task.seed, split, index); labels round-robin over the
// classes so any aligned window is exactly balanced. Train and val draw
// from disjoint seed streams.
ClipBatch generate(const SyntheticTask& task, Split split,
                   const std::vector<std::int64_t>& indices);
ClipBatch generate(const SyntheticTask& task, Split split, std::int64_t start,
                   std::int64_t count);

// Frame order permuted independently per clip; labels kept. The probe for
// temporal dependence.
ClipBatch shuffle_frames(const ClipBatch& batch, std::uint64_t seed);

struct TrainConfig {
  int epochs = 8;
  std::int64_t train_clips = 192;
  std::int64_t val_clips = 96;
  std::int64_t batch = 16;
  double base_lr = 0.08;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double clip_norm = 1.0;  // global gradient-norm clip, 0 disables
  int warmup_epochs = 1;   // linear ramp, then cosine to zero
  std::uint64_t seed = 1;
  // When set, metrics.csv plus model/ and state/ checkpoints land here.
  std::string out_dir;
  int log_every = 4;  // train CSV row cadence in steps
  // Interruption hook: halt once this epoch's state is saved (-1 runs all).
  // Not part of the schedule, so resume() accepts the interrupted state.
  int stop_after_epoch = -1;

  void validate() const;
  std::string echo() const;
};

struct EpochStat {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_top1 = 0.0;
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochStat> history;
  double final_train_loss = 0.0;
  double final_val_top1 = 0.0;
  std::int64_t steps = 0;
  bool diverged = false;
  std::string note;
  std::string metrics_path;
  std::string state_dir;
};

// Warmup-then-cosine factor on top of base_lr, a pure function of the step
// so resumed runs see the identical schedule.
double lr_at(const TrainConfig& tc, std::int64_t step, std::int64_t total_steps);

TrainResult train(const ModelConfig& cfg, const SyntheticTask& task,
                  const TrainConfig& tc);

// Continues a run from a state directory written by train(); the combined
// trajectory is bit-identical to an uninterrupted run at the same thread
// count.
TrainResult resume(const ModelConfig& cfg, const SyntheticTask& task,
                   const TrainConfig& tc, const std::string& state_dir);

double evaluate_top1(const ModelConfig& cfg, const ModelParams& params,
                     const ClipBatch& batch, std::int64_t batch_size);

// Single fixed-batch overfit probe; returns the last loss.
double overfit_one_batch(const ModelConfig& cfg, const SyntheticTask& task,
                         const TrainConfig& tc, int steps, double target);

// ---- ablation ----

struct AxisValue {
  std::string axis;
  std::string value;
};

struct Delta {
  std::string id;
  std::vector<AxisValue> settings;
};

// Valid axes: spatial_shift, temporal_shift, fixation, share_ratio,
// aggregation, kernel, pattern, shift_order, family.
std::vector<std::string> ablation_axes();
ModelConfig apply_delta(const ModelConfig& base, const Delta& delta);

struct AblationRow {
  std::string delta_id;
  std::string settings;  // axis=value list, ; separated
  std::uint64_t seed;
  double final_top1;
};

// One training run per (delta, seed); rows also land in csv_path when it is
// non-empty.
std::vector<AblationRow> ablate(const ModelConfig& base,
                                const std::vector<Delta>& grid,
                                const SyntheticTask& task,
                                const TrainConfig& tc,
                                const std::vector<std::uint64_t>& seeds,
                                const std::string& csv_path);

}  // namespace lvt::train
