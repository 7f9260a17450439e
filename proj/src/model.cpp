#include <algorithm>
#include <filesystem>
#include <iomanip>
#include <map>
#include <sstream>

#include "lvt/error.hpp"
#include "lvt/flops.hpp"
#include "lvt/model.hpp"
#include "lvt/tensor_io.hpp"

namespace lvt {

namespace {

thread_local std::uint64_t g_attention_core_flops = 0;

std::string hex64(std::uint64_t v) {
  std::ostringstream o;
  o << std::hex << std::setw(16) << std::setfill('0') << v;
  return o.str();
}

// Sequences handled by one attention stage: contiguous row blocks after an
// optional row permutation. Spatial and joint stages read the natural
// (b, t, site) row order; temporal stages permute to (b, site, t) first.
struct SeqPlan {
  std::vector<std::int64_t> perm, inv;  // empty means identity
  std::int64_t block = 0;
  bool windowed = false;
};

SeqPlan sequence_plan(const ModelConfig& cfg, const TokenGrid& g,
                      int stage_idx) {
  SeqPlan p;
  const std::int64_t s = g.hp * g.wp;
  if (cfg.pattern == AttentionPattern::Joint) {
    p.block = g.t * s;
    return p;
  }
  if (stage_idx == 0) {
    p.block = s;
    return p;
  }
  p.block = g.t;
  p.windowed = cfg.pattern == AttentionPattern::Windowed;
  const std::int64_t n = g.b * g.t * s;
  p.perm.resize(n);
  p.inv.resize(n);
  for (std::int64_t bi = 0; bi < g.b; ++bi)
    for (std::int64_t si = 0; si < s; ++si)
      for (std::int64_t ti = 0; ti < g.t; ++ti) {
        const std::int64_t to = (bi * s + si) * g.t + ti;
        const std::int64_t from = (bi * g.t + ti) * s + si;
        p.perm[to] = from;
        p.inv[from] = to;
      }
  return p;
}

Tensor attention_stage(const Tensor& x, const TokenGrid& geom,
                       const ModelConfig& cfg, const StageParams& sp,
                       int layer, int stage_idx,
                       const AttentionObserver* obs) {
  const std::int64_t dh = cfg.head_dim();
  const bool linear_family = cfg.family != AttentionFamily::Softmax;
  const bool quadratic = cfg.family == AttentionFamily::LinearQuadratic;
  const KernelFn kf = cfg.kernel_fn();
  const bool shift_on = cfg.shift.tau > 0 || cfg.shift.xi > 0;
  const bool probing =
      obs && obs->on_matrix && (obs->layer < 0 || obs->layer == layer);

  Tensor q = add_cols(matmul(x, sp.w_q), sp.b_q);
  Tensor k = add_cols(matmul(x, sp.w_k), sp.b_k);
  Tensor v = add_cols(matmul(x, sp.w_v), sp.b_v);

  const SeqPlan plan = sequence_plan(cfg, geom, stage_idx);
  auto shifted = [&](const Tensor& m) {
    return apply_shift(TokenGrid::wrap(m, geom.b, geom.t, geom.hp, geom.wp),
                       cfg.shift)
        .data;
  };
  auto core = [&](const Tensor& qb, const Tensor& kb, const Tensor& vb,
                  int head, std::int64_t block_idx, bool want) -> Tensor {
    flops::CounterScope attn_scope;
    struct Accum {
      const flops::CounterScope& s;
      ~Accum() { g_attention_core_flops += s.report().total(); }
    } accum{attn_scope};
    if (!linear_family) {
      AttentionOutput o = softmax_attention(qb, kb, vb, cfg.scale_qk, want);
      if (want) obs->on_matrix(layer, stage_idx, head, block_idx, o.materialized);
      return o.y;
    }
    if (quadratic) {
      AttentionOutput o = linear_attention_quadratic_features(
          qb, kb, vb, cfg.epsilon, cfg.guard, want);
      if (want) obs->on_matrix(layer, stage_idx, head, block_idx, o.materialized);
      return o.y;
    }
    AttentionOutput o =
        linear_attention_features(qb, kb, vb, cfg.epsilon, cfg.guard);
    if (want) {
      // Probe through the quadratic route on the same features; the
      // stage output stays on the linear path.
      AttentionOutput m = linear_attention_quadratic_features(
          qb, kb, vb, cfg.epsilon, cfg.guard, true);
      obs->on_matrix(layer, stage_idx, head, block_idx, m.materialized);
    }
    return o.y;
  };

  std::vector<Tensor> heads;
  heads.reserve(static_cast<std::size_t>(cfg.heads));
  for (std::int64_t h = 0; h < cfg.heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, dh);
    Tensor kh = slice_cols(k, h * dh, dh);
    Tensor vh = slice_cols(v, h * dh, dh);
    if (shift_on && cfg.shift.order == ShiftOrder::ShiftFirst) {
      kh = shifted(kh);
      vh = shifted(vh);
    }
    Tensor qs = qh, ks = kh;
    if (linear_family) {
      qs = apply_kernel(qh, kf);
      ks = apply_kernel(kh, kf);
      if (sp.fixation.mode != FixationMode::None) {
        const bool with_v = sp.fixation.mode == FixationMode::Cooperative &&
                            sp.fixation.coop_targets == CoopTargets::QKV;
        Tensor vs = with_v ? apply_kernel(vh, kf) : ks;
        FixationResult fr = apply_fixation(qs, ks, vs, sp.fixation);
        qs = fr.q_hat;
        ks = fr.k_hat;
      }
    }
    if (shift_on && cfg.shift.order == ShiftOrder::FixationFirst) {
      ks = shifted(ks);
      vh = shifted(vh);
    }
    Tensor qp = qs, kp = ks, vp = vh;
    if (!plan.perm.empty()) {
      qp = gather_rows(qs, plan.perm);
      kp = gather_rows(ks, plan.perm);
      vp = gather_rows(vh, plan.perm);
    }
    const std::int64_t n_blocks = x.rows() / plan.block;
    std::vector<Tensor> outs;
    outs.reserve(static_cast<std::size_t>(n_blocks));
    for (std::int64_t bi = 0; bi < n_blocks; ++bi) {
      Tensor qb = slice_rows(qp, bi * plan.block, plan.block);
      Tensor kb = slice_rows(kp, bi * plan.block, plan.block);
      Tensor vb = slice_rows(vp, bi * plan.block, plan.block);
      if (plan.windowed) {
        // Each frame attends to the frames within the window radius; the
        // probe skips windowed stages (ragged matrices).
        std::vector<Tensor> rows;
        rows.reserve(static_cast<std::size_t>(plan.block));
        for (std::int64_t ti = 0; ti < plan.block; ++ti) {
          const std::int64_t lo = std::max<std::int64_t>(0, ti - cfg.window_radius);
          const std::int64_t hi =
              std::min<std::int64_t>(plan.block, ti + cfg.window_radius + 1);
          rows.push_back(core(slice_rows(qb, ti, 1), slice_rows(kb, lo, hi - lo),
                              slice_rows(vb, lo, hi - lo), static_cast<int>(h),
                              bi, false));
        }
        outs.push_back(concat_rows(rows));
      } else {
        outs.push_back(core(qb, kb, vb, static_cast<int>(h), bi, probing));
      }
    }
    Tensor oh = outs.size() == 1 ? outs[0] : concat_rows(outs);
    if (!plan.inv.empty()) oh = gather_rows(oh, plan.inv);
    heads.push_back(oh);
  }
  Tensor cat = heads.size() == 1 ? heads[0] : concat_cols(heads);
  return add_cols(matmul(cat, sp.w_o), sp.b_o);
}

void push_params(std::vector<std::pair<std::string, Tensor>>& out,
                 const std::string& prefix, const Tensor& t) {
  out.emplace_back(prefix, t);
}

}  // namespace

AttentionPattern pattern_from_name(const std::string& name) {
  if (name == "factorized") return AttentionPattern::Factorized;
  if (name == "joint") return AttentionPattern::Joint;
  if (name == "windowed") return AttentionPattern::Windowed;
  throw ConfigError("unknown attention pattern '" + name + "'");
}

std::string pattern_name(AttentionPattern p) {
  switch (p) {
    case AttentionPattern::Factorized: return "factorized";
    case AttentionPattern::Joint: return "joint";
    case AttentionPattern::Windowed: return "windowed";
  }
  return "?";
}

AttentionFamily family_from_name(const std::string& name) {
  if (name == "softmax") return AttentionFamily::Softmax;
  if (name == "linear_quadratic") return AttentionFamily::LinearQuadratic;
  if (name == "linear") return AttentionFamily::Linear;
  throw ConfigError("unknown attention family '" + name + "'");
}

std::string family_name(AttentionFamily f) {
  switch (f) {
    case AttentionFamily::Softmax: return "softmax";
    case AttentionFamily::LinearQuadratic: return "linear_quadratic";
    case AttentionFamily::Linear: return "linear";
  }
  return "?";
}

Variant variant_from_name(const std::string& name) {
  if (name == "s") return Variant::S;
  if (name == "default") return Variant::Default;
  if (name == "h") return Variant::H;
  if (name == "hr") return Variant::HR;
  if (name == "toy") return Variant::Toy;
  throw ConfigError("unknown variant '" + name + "'");
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::S: return "s";
    case Variant::Default: return "default";
    case Variant::H: return "h";
    case Variant::HR: return "hr";
    case Variant::Toy: return "toy";
  }
  return "?";
}

KernelFn ModelConfig::kernel_fn() const {
  return KernelFn{kernel, epsilon, guard};
}

void ModelConfig::validate() const {
  if (frames < 1) throw ConfigError("frames must be >= 1");
  if (patch < 1 || image_size < patch)
    throw ConfigError("patch must satisfy 1 <= patch <= image_size");
  if (image_size % patch != 0)
    throw ConfigError("image_size " + std::to_string(image_size) +
                      " not divisible by patch " + std::to_string(patch));
  if (pixel_channels < 1) throw ConfigError("pixel_channels must be >= 1");
  if (embed_dim < 1 || heads < 1 || embed_dim % heads != 0)
    throw ConfigError("embed_dim " + std::to_string(embed_dim) +
                      " not divisible by heads " + std::to_string(heads));
  if (layers < 1) throw ConfigError("layers must be >= 1");
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (epsilon <= 0.0) throw ConfigError("epsilon must be positive");
  if (window_radius < 0) throw ConfigError("window_radius must be >= 0");
  if (fixation != FixationMode::None && family == AttentionFamily::Softmax)
    throw ConfigError("fixation applies to kernelized families only");
  if (shift.tau > 0 || shift.xi > 0) shift.validate(head_dim());
}

ModelConfig ModelConfig::preset(Variant v) {
  ModelConfig c;
  c.variant = v;
  if (v == Variant::Toy) return c;
  // The full-scale family: factorized linear attention with cooperative
  // fixation and both shifts, differing only in clip geometry.
  c.frames = 16;
  c.image_size = 224;
  c.patch = 16;
  c.pixel_channels = 3;
  c.embed_dim = 512;
  c.layers = 12;
  c.heads = 8;
  c.num_classes = 174;
  c.pattern = AttentionPattern::Factorized;
  c.family = AttentionFamily::Linear;
  c.kernel = KernelTag::ReLU;
  c.fixation = FixationMode::Cooperative;
  c.aggregation = Aggregation::Concat;
  c.coop_targets = CoopTargets::QKV;
  c.share_ratio = true;
  c.shift.tau = 4;
  c.shift.xi = 1;
  c.shift.alpha = 0.5;
  switch (v) {
    case Variant::S: c.frames = 8; break;
    case Variant::H: c.frames = 32; break;
    case Variant::HR: c.image_size = 336; break;
    default: break;
  }
  return c;
}

std::string ModelConfig::echo() const {
  std::ostringstream o;
  o << "variant=" << variant_name(variant) << "\n"
    << "frames=" << frames << "\n"
    << "image_size=" << image_size << "\n"
    << "patch=" << patch << "\n"
    << "pixel_channels=" << pixel_channels << "\n"
    << "embed_dim=" << embed_dim << "\n"
    << "layers=" << layers << "\n"
    << "heads=" << heads << "\n"
    << "num_classes=" << num_classes << "\n"
    << "pattern=" << pattern_name(pattern) << "\n"
    << "window_radius=" << window_radius << "\n"
    << "family=" << family_name(family) << "\n"
    << "kernel=" << kernel_name(kernel) << "\n"
    << "epsilon=" << io::format_double(epsilon) << "\n"
    << "guard=" << (guard ? 1 : 0) << "\n"
    << "scale_qk=" << (scale_qk ? 1 : 0) << "\n"
    << "fixation=" << fixation_mode_name(fixation) << "\n"
    << "aggregation=" << aggregation_name(aggregation) << "\n"
    << "coop_targets=" << (coop_targets == CoopTargets::QK ? "qk" : "qkv")
    << "\n"
    << "share_ratio=" << (share_ratio ? 1 : 0) << "\n"
    << "shift.tau=" << shift.tau << "\n"
    << "shift.xi=" << shift.xi << "\n"
    << "shift.alpha=" << io::format_double(shift.alpha) << "\n"
    << "shift.spatial_mode=" << spatial_mode_name(shift.spatial_mode) << "\n"
    << "shift.boundary=" << boundary_name(shift.boundary) << "\n"
    << "shift.order=" << shift_order_name(shift.order) << "\n";
  return o.str();
}

std::uint64_t ModelConfig::fingerprint() const { return io::fnv1a64(echo()); }

ModelParams ModelParams::init(const ModelConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  ModelParams p;
  const std::int64_t d = cfg.embed_dim;
  const std::int64_t dh = cfg.head_dim();
  p.w_patch = Tensor::xavier(cfg.patch * cfg.patch * cfg.pixel_channels, d, rng);
  p.b_patch = Tensor::zeros({1, d}, true);
  p.pos_spatial = Tensor::uniform({cfg.spatial_tokens(), d}, rng, -0.02, 0.02, true);
  p.pos_temporal = Tensor::uniform({cfg.frames, d}, rng, -0.02, 0.02, true);
  const int stages = cfg.pattern == AttentionPattern::Joint ? 1 : 2;
  for (std::int64_t l = 0; l < cfg.layers; ++l) {
    BlockParams bp;
    for (int s = 0; s < stages; ++s) {
      StageParams st;
      st.ln_g = Tensor::full({1, d}, 1.0, true);
      st.ln_b = Tensor::zeros({1, d}, true);
      st.w_q = Tensor::xavier(d, d, rng);
      st.b_q = Tensor::zeros({1, d}, true);
      st.w_k = Tensor::xavier(d, d, rng);
      st.b_k = Tensor::zeros({1, d}, true);
      st.w_v = Tensor::xavier(d, d, rng);
      st.b_v = Tensor::zeros({1, d}, true);
      st.w_o = Tensor::xavier(d, d, rng);
      st.b_o = Tensor::zeros({1, d}, true);
      if (cfg.family != AttentionFamily::Softmax &&
          cfg.fixation != FixationMode::None)
        st.fixation = FixationParams::make(cfg.fixation, cfg.aggregation,
                                           cfg.coop_targets, cfg.share_ratio,
                                           dh, rng);
      bp.stages.push_back(std::move(st));
    }
    bp.mlp_ln_g = Tensor::full({1, d}, 1.0, true);
    bp.mlp_ln_b = Tensor::zeros({1, d}, true);
    bp.w1 = Tensor::xavier(d, 4 * d, rng);
    bp.b1 = Tensor::zeros({1, 4 * d}, true);
    bp.w2 = Tensor::xavier(4 * d, d, rng);
    bp.b2 = Tensor::zeros({1, d}, true);
    p.blocks.push_back(std::move(bp));
  }
  p.ln_f_g = Tensor::full({1, d}, 1.0, true);
  p.ln_f_b = Tensor::zeros({1, d}, true);
  p.w_head = Tensor::xavier(d, cfg.num_classes, rng);
  p.b_head = Tensor::zeros({1, cfg.num_classes}, true);
  return p;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named_parameters()
    const {
  std::vector<std::pair<std::string, Tensor>> out;
  push_params(out, "embed.w_patch", w_patch);
  push_params(out, "embed.b_patch", b_patch);
  push_params(out, "embed.pos_spatial", pos_spatial);
  push_params(out, "embed.pos_temporal", pos_temporal);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const std::string bl = "block" + std::to_string(l) + ".";
    const BlockParams& bp = blocks[l];
    for (std::size_t s = 0; s < bp.stages.size(); ++s) {
      const std::string st = bl + "stage" + std::to_string(s) + ".";
      const StageParams& sp = bp.stages[s];
      push_params(out, st + "ln_g", sp.ln_g);
      push_params(out, st + "ln_b", sp.ln_b);
      push_params(out, st + "w_q", sp.w_q);
      push_params(out, st + "b_q", sp.b_q);
      push_params(out, st + "w_k", sp.w_k);
      push_params(out, st + "b_k", sp.b_k);
      push_params(out, st + "w_v", sp.w_v);
      push_params(out, st + "b_v", sp.b_v);
      push_params(out, st + "w_o", sp.w_o);
      push_params(out, st + "b_o", sp.b_o);
      for (const auto& [name, t] : sp.fixation.named_parameters())
        push_params(out, st + "fix." + name, t);
    }
    push_params(out, bl + "mlp.ln_g", bp.mlp_ln_g);
    push_params(out, bl + "mlp.ln_b", bp.mlp_ln_b);
    push_params(out, bl + "mlp.w1", bp.w1);
    push_params(out, bl + "mlp.b1", bp.b1);
    push_params(out, bl + "mlp.w2", bp.w2);
    push_params(out, bl + "mlp.b2", bp.b2);
  }
  push_params(out, "final.ln_g", ln_f_g);
  push_params(out, "final.ln_b", ln_f_b);
  push_params(out, "head.w", w_head);
  push_params(out, "head.b", b_head);
  return out;
}

std::int64_t ModelParams::param_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.numel();
  return n;
}

Tensor embed(const ClipBatch& clip, const ModelConfig& cfg,
             const ModelParams& params) {
  if (clip.b < 1) throw ConfigError("embed: empty batch");
  if (clip.t != cfg.frames || clip.h != cfg.image_size ||
      clip.w != cfg.image_size || clip.c() != cfg.pixel_channels)
    throw ConfigError("embed: clip geometry does not match the config");
  if (clip.pixels.rows() != clip.b * clip.t * clip.h * clip.w)
    throw ShapeError("embed: pixel row count does not match the geometry");
  const std::int64_t p = cfg.patch, c = cfg.pixel_channels;
  const std::int64_t gh = cfg.grid_h(), gw = cfg.grid_w();
  // Patch extraction is a pure element permutation: enumerate target
  // elements token-major, pull from the matching pixel.
  std::vector<std::int64_t> src;
  src.reserve(static_cast<std::size_t>(clip.pixels.numel()));
  for (std::int64_t bi = 0; bi < clip.b; ++bi)
    for (std::int64_t ti = 0; ti < clip.t; ++ti)
      for (std::int64_t phi = 0; phi < gh; ++phi)
        for (std::int64_t pwi = 0; pwi < gw; ++pwi)
          for (std::int64_t py = 0; py < p; ++py)
            for (std::int64_t px = 0; px < p; ++px)
              for (std::int64_t ci = 0; ci < c; ++ci) {
                const std::int64_t row =
                    ((bi * clip.t + ti) * clip.h + phi * p + py) * clip.w +
                    pwi * p + px;
                src.push_back(row * c + ci);
              }
  Tensor patches = reshape(permute_with_padding(clip.pixels, src),
                           {clip.b * clip.t * gh * gw, p * p * c});
  Tensor tok = add_cols(matmul(patches, params.w_patch), params.b_patch);
  Tensor pos_s = tile_rows(params.pos_spatial, clip.b * clip.t);
  Tensor pos_t =
      tile_rows(repeat_rows(params.pos_temporal, cfg.spatial_tokens()), clip.b);
  return add(add(tok, pos_s), pos_t);
}

TokenGrid attention_block(const TokenGrid& grid, const ModelConfig& cfg,
                          const BlockParams& params, int layer_index,
                          const AttentionObserver* observer) {
  Tensor x = grid.data;
  for (std::size_t s = 0; s < params.stages.size(); ++s) {
    const StageParams& sp = params.stages[s];
    Tensor n = layer_norm(x, sp.ln_g, sp.ln_b);
    Tensor a = attention_stage(n, grid, cfg, sp, layer_index,
                               static_cast<int>(s), observer);
    x = add(x, a);
  }
  Tensor m = layer_norm(x, params.mlp_ln_g, params.mlp_ln_b);
  m = add_cols(matmul(m, params.w1), params.b1);
  m = relu(m);
  m = add_cols(matmul(m, params.w2), params.b2);
  x = add(x, m);
  return TokenGrid::wrap(x, grid.b, grid.t, grid.hp, grid.wp);
}

std::uint64_t attention_core_flops() { return g_attention_core_flops; }

Tensor forward(const ClipBatch& clip, const ModelConfig& cfg,
               const ModelParams& params, const AttentionObserver* observer) {
  cfg.validate();
  g_attention_core_flops = 0;
  Tensor x = embed(clip, cfg, params);
  TokenGrid g =
      TokenGrid::wrap(x, clip.b, cfg.frames, cfg.grid_h(), cfg.grid_w());
  for (std::size_t l = 0; l < params.blocks.size(); ++l)
    g = attention_block(g, cfg, params.blocks[l], static_cast<int>(l),
                        observer);
  Tensor xf = layer_norm(g.data, params.ln_f_g, params.ln_f_b);
  Tensor pooled = group_mean_rows(xf, cfg.tokens());
  return add_cols(matmul(pooled, params.w_head), params.b_head);
}

void save_checkpoint(const std::string& dir, const ModelConfig& cfg,
                     const ModelParams& params, std::uint64_t seed,
                     std::int64_t step) {
  std::filesystem::create_directories(dir);
  const auto named = params.named_parameters();
  std::ostringstream m;
  m << "format=lvt-checkpoint-v1\n"
    << "fingerprint=" << hex64(cfg.fingerprint()) << "\n"
    << "seed=" << seed << "\n"
    << "step=" << step << "\n"
    << "tensors=" << named.size() << "\n";
  for (const auto& [name, t] : named) {
    m << "tensor=" << name << "\n";
    io::save_tensor(dir + "/" + name + ".t64", t);
  }
  io::write_text_file(dir + "/manifest.txt", m.str());
}

namespace {

std::map<std::string, std::string> read_manifest(const std::string& dir) {
  const std::string path = dir + "/manifest.txt";
  if (!std::filesystem::exists(path))
    throw IoError("checkpoint manifest not found: " + path);
  std::map<std::string, std::string> kv;
  std::istringstream in(io::read_text_file(path));
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq);
    if (key != "tensor") kv[key] = line.substr(eq + 1);
  }
  return kv;
}

}  // namespace

ModelParams load_checkpoint(const std::string& dir, const ModelConfig& cfg) {
  const auto kv = read_manifest(dir);
  const auto fmt = kv.find("format");
  if (fmt == kv.end() || fmt->second != "lvt-checkpoint-v1")
    throw IoError("unsupported checkpoint format in " + dir);
  const auto fp = kv.find("fingerprint");
  if (fp == kv.end() || fp->second != hex64(cfg.fingerprint()))
    throw ConfigError("checkpoint config fingerprint mismatch: manifest " +
                      (fp == kv.end() ? std::string("<missing>") : fp->second) +
                      " vs config " + hex64(cfg.fingerprint()));
  std::mt19937_64 rng(0);
  ModelParams params = ModelParams::init(cfg, rng);
  for (auto& [name, t] : params.named_parameters()) {
    Tensor loaded = io::load_tensor(dir + "/" + name + ".t64");
    if (loaded.shape() != t.shape())
      throw IoError("checkpoint tensor '" + name + "' has shape " +
                    shape_str(loaded.shape()) + ", expected " +
                    shape_str(t.shape()));
    t.mutable_values() = loaded.values();
  }
  return params;
}

std::int64_t checkpoint_step(const std::string& dir) {
  const auto kv = read_manifest(dir);
  const auto it = kv.find("step");
  if (it == kv.end()) throw IoError("checkpoint manifest missing step");
  return std::stoll(it->second);
}

}  // namespace lvt
