#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "lvt/attention.hpp"
#include "lvt/fixation.hpp"
#include "lvt/shift.hpp"
#include "lvt/tensor.hpp"

namespace lvt {

enum class AttentionPattern { Factorized, Joint, Windowed };
enum class AttentionFamily { Softmax, LinearQuadratic, Linear };
enum class Variant { S, Default, H, HR, Toy };

AttentionPattern pattern_from_name(const std::string& name);
std::string pattern_name(AttentionPattern p);
AttentionFamily family_from_name(const std::string& name);
std::string family_name(AttentionFamily f);
Variant variant_from_name(const std::string& name);
std::string variant_name(Variant v);

struct ModelConfig {
  Variant variant = Variant::Toy;
  std::int64_t frames = 4;       // T
  std::int64_t image_size = 32;  // square frames
  std::int64_t patch = 8;
  std::int64_t pixel_channels = 1;
  std::int64_t embed_dim = 32;  // D
  std::int64_t layers = 2;
  std::int64_t heads = 2;
  std::int64_t num_classes = 4;
  AttentionPattern pattern = AttentionPattern::Factorized;
  std::int64_t window_radius = 1;  // Windowed: frames [t-w, t+w] per query
  AttentionFamily family = AttentionFamily::Linear;
  KernelTag kernel = KernelTag::ReLU;
  double epsilon = 1e-6;
  bool guard = true;
  bool scale_qk = true;  // 1/sqrt(D_h) logits, softmax family only
  FixationMode fixation = FixationMode::None;
  Aggregation aggregation = Aggregation::Concat;
  CoopTargets coop_targets = CoopTargets::QKV;
  bool share_ratio = true;
  ShiftConfig shift;  // validated against the per-head channel count

  std::int64_t grid_h() const { return image_size / patch; }
  std::int64_t grid_w() const { return image_size / patch; }
  std::int64_t spatial_tokens() const { return grid_h() * grid_w(); }
  std::int64_t tokens() const { return frames * spatial_tokens(); }
  std::int64_t head_dim() const { return embed_dim / heads; }
  KernelFn kernel_fn() const;

  void validate() const;
  static ModelConfig preset(Variant v);
  // Canonical one-line-per-key echo of every field; hashing it fingerprints
  // the config.
  std::string echo() const;
  std::uint64_t fingerprint() const;
};

struct ClipBatch {
  Tensor pixels;  // (B*T*H*W) x C
  std::vector<std::int64_t> labels;
  std::int64_t b = 0, t = 0, h = 0, w = 0;

  std::int64_t c() const { return pixels.cols(); }
};

struct StageParams {
  Tensor ln_g, ln_b;
  Tensor w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
  FixationParams fixation;  // per head-dim channels, shared across heads
};

struct BlockParams {
  std::vector<StageParams> stages;
  Tensor mlp_ln_g, mlp_ln_b, w1, b1, w2, b2;
};

struct ModelParams {
  Tensor w_patch, b_patch, pos_spatial, pos_temporal;
  std::vector<BlockParams> blocks;
  Tensor ln_f_g, ln_f_b, w_head, b_head;

  static ModelParams init(const ModelConfig& cfg, std::mt19937_64& rng);
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::int64_t param_count() const;
};

// Receives every materialized attention matrix during a probed forward.
// stage is the index inside the block (0 spatial / joint, 1 temporal);
// block identifies the sequence (frame, site or clip) the matrix belongs
// to. Matrices are row-normalized; linear families materialize through the
// quadratic route on the same fixated features.
struct AttentionObserver {
  int layer = -1;  // -1 probes every layer
  std::function<void(int layer, int stage, int head, std::int64_t block,
                     const Tensor& matrix)>
      on_matrix;
};

Tensor embed(const ClipBatch& clip, const ModelConfig& cfg,
             const ModelParams& params);  // (B*N) x D token matrix

// FLOPs spent inside the attention cores (similarity aggregation and
// normalization) since the last forward() started. Projections, kernel
// maps, fixation, shifts and the MLP are excluded, so patterns can be
// compared on the attention cost alone.
std::uint64_t attention_core_flops();

TokenGrid attention_block(const TokenGrid& grid, const ModelConfig& cfg,
                          const BlockParams& params, int layer_index = -1,
                          const AttentionObserver* observer = nullptr);

Tensor forward(const ClipBatch& clip, const ModelConfig& cfg,
               const ModelParams& params,
               const AttentionObserver* observer = nullptr);  // (B, classes)

// Checkpoints: <dir>/manifest.txt plus one tensor dump per parameter.
void save_checkpoint(const std::string& dir, const ModelConfig& cfg,
                     const ModelParams& params, std::uint64_t seed,
                     std::int64_t step);
ModelParams load_checkpoint(const std::string& dir, const ModelConfig& cfg);
std::int64_t checkpoint_step(const std::string& dir);

}  // namespace lvt
