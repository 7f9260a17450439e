#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lvt/tensor.hpp"

namespace lvt {

// Token layout for a batch of clips. Rows of `data` are tokens in
// (batch, frame, grid row, grid col) order; columns are channels. The
// five-way view exists only for round-trip checks and export.
struct TokenGrid {
  Tensor data;  // (B*T*Hp*Wp) x D
  std::int64_t b = 0, t = 0, hp = 0, wp = 0;

  static TokenGrid wrap(Tensor data, std::int64_t b, std::int64_t t,
                        std::int64_t hp, std::int64_t wp);

  std::int64_t d() const { return data.cols(); }
  std::int64_t spatial() const { return hp * wp; }
  std::int64_t tokens_per_clip() const { return t * hp * wp; }
  std::int64_t row(std::int64_t bi, std::int64_t ti, std::int64_t hi,
                   std::int64_t wi) const {
    return ((bi * t + ti) * hp + hi) * wp + wi;
  }

  Tensor flat5() const;  // rank-5 reshape of data
  static TokenGrid from_flat5(const Tensor& five);
};

enum class SpatialMode { CrissCross, SquaredKernel };
enum class Boundary { ZeroPad, Clamp };
// Placement of the shift stage relative to fixation inside a block.
enum class ShiftOrder { ShiftFirst, FixationFirst };

SpatialMode spatial_mode_from_name(const std::string& name);
std::string spatial_mode_name(SpatialMode m);
Boundary boundary_from_name(const std::string& name);
std::string boundary_name(Boundary b);
ShiftOrder shift_order_from_name(const std::string& name);
std::string shift_order_name(ShiftOrder o);

struct ShiftConfig {
  std::int64_t tau = 0;  // temporal radius
  std::int64_t xi = 0;   // spatial radius
  double alpha = 0.5;    // fraction of channels a token keeps for itself
  SpatialMode spatial_mode = SpatialMode::CrissCross;
  Boundary boundary = Boundary::ZeroPad;
  ShiftOrder order = ShiftOrder::ShiftFirst;

  // Donated channel total (1-alpha)*D, checked to be integral.
  std::int64_t donated_channels(std::int64_t d) const;
  std::int64_t spatial_neighbor_count() const;  // 4xi or (2xi+1)^2-1
  std::int64_t spatial_token_count() const;     // neighbors + self
  std::int64_t temporal_token_count() const { return 2 * tau + 1; }

  // Throws ConfigError naming D, the radius and alpha when the donated
  // channels do not split evenly across the neighbor set.
  void validate(std::int64_t d) const;
};

// Copy elements of x per src_index (flat index into x, or -1 for a zero).
// The backward pass scatter-adds along the same map. FLOP-free.
Tensor permute_with_padding(const Tensor& x,
                            const std::vector<std::int64_t>& src_index);

// Each output token keeps its first alpha*D channels and fills the rest
// from the same channel of temporal neighbors t-tau..t-1, t+1..t+tau, each
// donating an equal slab. Out-of-range frames follow cfg.boundary.
TokenGrid temporal_shift(const TokenGrid& grid, const ShiftConfig& cfg);

// Same scheme across the frame grid: criss-cross takes the xi nearest
// tokens left, right, above, below (near to far); squared kernel takes the
// full (2xi+1)^2 window minus the center, row-major.
TokenGrid spatial_shift(const TokenGrid& grid, const ShiftConfig& cfg);

// Temporal then spatial, the composition the model applies to K and V.
TokenGrid apply_shift(const TokenGrid& grid, const ShiftConfig& cfg);

}  // namespace lvt
