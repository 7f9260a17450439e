#include "lvt/shift.hpp"

#include <cmath>

#include "lvt/error.hpp"

namespace lvt {

TokenGrid TokenGrid::wrap(Tensor data, std::int64_t b, std::int64_t t,
                          std::int64_t hp, std::int64_t wp) {
  if (data.rank() != 2)
    throw ShapeError("TokenGrid: data must be rank 2, got " +
                     shape_str(data.shape()));
  if (data.rows() != b * t * hp * wp)
    throw ShapeError("TokenGrid: " + std::to_string(data.rows()) +
                     " rows does not match B*T*Hp*Wp = " +
                     std::to_string(b * t * hp * wp));
  TokenGrid g;
  g.data = std::move(data);
  g.b = b;
  g.t = t;
  g.hp = hp;
  g.wp = wp;
  return g;
}

Tensor TokenGrid::flat5() const {
  return reshape(data, {b, t, hp, wp, data.cols()});
}

TokenGrid TokenGrid::from_flat5(const Tensor& five) {
  if (five.rank() != 5)
    throw ShapeError("from_flat5: expected rank 5, got " +
                     shape_str(five.shape()));
  const auto& s = five.shape();
  return wrap(reshape(five, {s[0] * s[1] * s[2] * s[3], s[4]}), s[0], s[1],
              s[2], s[3]);
}

SpatialMode spatial_mode_from_name(const std::string& name) {
  if (name == "criss_cross") return SpatialMode::CrissCross;
  if (name == "squared_kernel") return SpatialMode::SquaredKernel;
  throw ConfigError("unknown spatial mode '" + name +
                    "' (expected criss_cross or squared_kernel)");
}

std::string spatial_mode_name(SpatialMode m) {
  return m == SpatialMode::CrissCross ? "criss_cross" : "squared_kernel";
}

Boundary boundary_from_name(const std::string& name) {
  if (name == "zero_pad") return Boundary::ZeroPad;
  if (name == "clamp") return Boundary::Clamp;
  throw ConfigError("unknown boundary '" + name +
                    "' (expected zero_pad or clamp)");
}

std::string boundary_name(Boundary b) {
  return b == Boundary::ZeroPad ? "zero_pad" : "clamp";
}

ShiftOrder shift_order_from_name(const std::string& name) {
  if (name == "shift_first") return ShiftOrder::ShiftFirst;
  if (name == "fixation_first") return ShiftOrder::FixationFirst;
  throw ConfigError("unknown shift order '" + name +
                    "' (expected shift_first or fixation_first)");
}

std::string shift_order_name(ShiftOrder o) {
  return o == ShiftOrder::ShiftFirst ? "shift_first" : "fixation_first";
}

std::int64_t ShiftConfig::donated_channels(std::int64_t d) const {
  const double raw = (1.0 - alpha) * static_cast<double>(d);
  const auto rounded = static_cast<std::int64_t>(std::llround(raw));
  if (std::abs(raw - static_cast<double>(rounded)) > 1e-9)
    throw ConfigError("shift: (1-alpha)*D is not an integer channel count "
                      "(D=" + std::to_string(d) +
                      ", alpha=" + std::to_string(alpha) + ")");
  return rounded;
}

std::int64_t ShiftConfig::spatial_neighbor_count() const {
  if (xi == 0) return 0;
  return spatial_mode == SpatialMode::CrissCross ? 4 * xi
                                                 : (2 * xi + 1) * (2 * xi + 1) - 1;
}

std::int64_t ShiftConfig::spatial_token_count() const {
  return spatial_neighbor_count() + 1;
}

void ShiftConfig::validate(std::int64_t d) const {
  if (tau < 0 || xi < 0)
    throw ConfigError("shift: radii must be non-negative (tau=" +
                      std::to_string(tau) + ", xi=" + std::to_string(xi) + ")");
  if (alpha < 0.0 || alpha > 1.0)
    throw ConfigError("shift: alpha must lie in [0,1], got " +
                      std::to_string(alpha));
  const std::int64_t donated = donated_channels(d);
  if (tau > 0 && donated % (2 * tau) != 0)
    throw ConfigError(
        "temporal shift: (1-alpha)*D must divide evenly across 2*tau "
        "neighbor slabs (D=" + std::to_string(d) +
        ", tau=" + std::to_string(tau) +
        ", alpha=" + std::to_string(alpha) + " gives " +
        std::to_string(donated) + " channels for " +
        std::to_string(2 * tau) + " slabs)");
  const std::int64_t neighbors = spatial_neighbor_count();
  if (xi > 0 && donated % neighbors != 0)
    throw ConfigError(
        "spatial shift: (1-alpha)*D must divide evenly across " +
        std::to_string(neighbors) + " " + spatial_mode_name(spatial_mode) +
        " neighbors (D=" + std::to_string(d) +
        ", xi=" + std::to_string(xi) +
        ", alpha=" + std::to_string(alpha) + " gives " +
        std::to_string(donated) + " channels)");
}

Tensor permute_with_padding(const Tensor& x,
                            const std::vector<std::int64_t>& src_index) {
  if (static_cast<std::int64_t>(src_index.size()) != x.numel())
    throw ShapeError("permute_with_padding: map covers " +
                     std::to_string(src_index.size()) + " of " +
                     std::to_string(x.numel()) + " elements");
  const bool rg = GradTape::active() != nullptr && x.requires_grad();
  Tensor out = Tensor::zeros(x.shape(), rg);
  const auto& xv = x.values();
  auto& ov = out.mutable_values();
  for (std::size_t i = 0; i < src_index.size(); ++i)
    if (src_index[i] >= 0) ov[i] = xv[static_cast<std::size_t>(src_index[i])];
  if (rg) {
    GradTape::active()->record(
        "permute_with_padding",
        [x, out, src_index]() {
          auto& xg = x.mutable_grad();
          const auto& og = out.grad();
          for (std::size_t i = 0; i < src_index.size(); ++i)
            if (src_index[i] >= 0)
              xg[static_cast<std::size_t>(src_index[i])] += og[i];
        },
        out);
  }
  return out;
}

namespace {

// Shared slab scheme: out channel c of a token comes from the same channel
// of the neighbor that owns c's slab, or from the token itself below the
// retained cut.
struct SlabLayout {
  std::int64_t retained;  // channels [0, retained) stay put
  std::int64_t slab;      // channels per neighbor
};

SlabLayout layout_for(std::int64_t d, std::int64_t donated,
                      std::int64_t neighbors) {
  return {d - donated, neighbors > 0 ? donated / neighbors : 0};
}

}  // namespace

TokenGrid temporal_shift(const TokenGrid& grid, const ShiftConfig& cfg) {
  const std::int64_t d = grid.d();
  cfg.validate(d);
  if (cfg.tau == 0 || cfg.alpha == 1.0) return grid;
  const std::int64_t donated = cfg.donated_channels(d);
  const auto lay = layout_for(d, donated, 2 * cfg.tau);

  std::vector<std::int64_t> map(
      static_cast<std::size_t>(grid.data.numel()), -1);
  for (std::int64_t bi = 0; bi < grid.b; ++bi)
    for (std::int64_t ti = 0; ti < grid.t; ++ti)
      for (std::int64_t hi = 0; hi < grid.hp; ++hi)
        for (std::int64_t wi = 0; wi < grid.wp; ++wi) {
          const std::int64_t out_row = grid.row(bi, ti, hi, wi);
          for (std::int64_t c = 0; c < d; ++c) {
            std::int64_t src_t = ti;
            if (c >= lay.retained) {
              const std::int64_t slab_idx = (c - lay.retained) / lay.slab;
              // Slabs walk t-tau..t-1 then t+1..t+tau.
              const std::int64_t offset = slab_idx < cfg.tau
                                              ? slab_idx - cfg.tau
                                              : slab_idx - cfg.tau + 1;
              src_t = ti + offset;
              if (src_t < 0 || src_t >= grid.t) {
                if (cfg.boundary == Boundary::ZeroPad) {
                  map[out_row * d + c] = -1;
                  continue;
                }
                src_t = src_t < 0 ? 0 : grid.t - 1;
              }
            }
            map[out_row * d + c] = grid.row(bi, src_t, hi, wi) * d + c;
          }
        }
  TokenGrid out = grid;
  out.data = permute_with_padding(grid.data, map);
  return out;
}

TokenGrid spatial_shift(const TokenGrid& grid, const ShiftConfig& cfg) {
  const std::int64_t d = grid.d();
  cfg.validate(d);
  if (cfg.xi == 0 || cfg.alpha == 1.0) return grid;
  const std::int64_t donated = cfg.donated_channels(d);
  const std::int64_t neighbors = cfg.spatial_neighbor_count();
  const auto lay = layout_for(d, donated, neighbors);

  // Neighbor offsets in donation order.
  std::vector<std::pair<std::int64_t, std::int64_t>> offs;
  if (cfg.spatial_mode == SpatialMode::CrissCross) {
    for (std::int64_t r = 1; r <= cfg.xi; ++r) offs.emplace_back(0, -r);
    for (std::int64_t r = 1; r <= cfg.xi; ++r) offs.emplace_back(0, r);
    for (std::int64_t r = 1; r <= cfg.xi; ++r) offs.emplace_back(-r, 0);
    for (std::int64_t r = 1; r <= cfg.xi; ++r) offs.emplace_back(r, 0);
  } else {
    for (std::int64_t dh = -cfg.xi; dh <= cfg.xi; ++dh)
      for (std::int64_t dw = -cfg.xi; dw <= cfg.xi; ++dw)
        if (dh != 0 || dw != 0) offs.emplace_back(dh, dw);
  }

  std::vector<std::int64_t> map(
      static_cast<std::size_t>(grid.data.numel()), -1);
  for (std::int64_t bi = 0; bi < grid.b; ++bi)
    for (std::int64_t ti = 0; ti < grid.t; ++ti)
      for (std::int64_t hi = 0; hi < grid.hp; ++hi)
        for (std::int64_t wi = 0; wi < grid.wp; ++wi) {
          const std::int64_t out_row = grid.row(bi, ti, hi, wi);
          for (std::int64_t c = 0; c < d; ++c) {
            std::int64_t sh = hi, sw = wi;
            if (c >= lay.retained) {
              const auto& o = offs[static_cast<std::size_t>(
                  (c - lay.retained) / lay.slab)];
              sh = hi + o.first;
              sw = wi + o.second;
              if (sh < 0 || sh >= grid.hp || sw < 0 || sw >= grid.wp) {
                if (cfg.boundary == Boundary::ZeroPad) {
                  map[out_row * d + c] = -1;
                  continue;
                }
                sh = std::min(std::max<std::int64_t>(sh, 0), grid.hp - 1);
                sw = std::min(std::max<std::int64_t>(sw, 0), grid.wp - 1);
              }
            }
            map[out_row * d + c] = grid.row(bi, ti, sh, sw) * d + c;
          }
        }
  TokenGrid out = grid;
  out.data = permute_with_padding(grid.data, map);
  return out;
}

TokenGrid apply_shift(const TokenGrid& grid, const ShiftConfig& cfg) {
  return spatial_shift(temporal_shift(grid, cfg), cfg);
}

}  // namespace lvt
