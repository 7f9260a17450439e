#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>

#include "lvt/alloc_tracker.hpp"
#include "lvt/error.hpp"
#include "lvt/flops.hpp"
#include "lvt/model.hpp"
#include "test_util.hpp"

using namespace lvt;

namespace {

ClipBatch make_clip(const ModelConfig& cfg, std::int64_t b,
                    std::mt19937_64& rng) {
  ClipBatch c;
  c.b = b;
  c.t = cfg.frames;
  c.h = cfg.image_size;
  c.w = cfg.image_size;
  c.pixels = Tensor::uniform({b * c.t * c.h * c.w, cfg.pixel_channels}, rng,
                             -1.0, 1.0);
  c.labels.resize(static_cast<std::size_t>(b));
  std::uniform_int_distribution<std::int64_t> lab(0, cfg.num_classes - 1);
  for (auto& l : c.labels) l = lab(rng);
  return c;
}

// Small everything-on config sized so the per-head shift budget divides:
// head dim 8, donated 4 channels, 2 temporal slabs and 4 spatial donors.
ModelConfig mini_config() {
  ModelConfig c;
  c.frames = 2;
  c.image_size = 16;
  c.patch = 8;
  c.embed_dim = 16;
  c.layers = 1;
  c.heads = 2;
  c.num_classes = 3;
  c.family = AttentionFamily::Linear;
  c.kernel = KernelTag::EluPlusOne;
  c.fixation = FixationMode::Cooperative;
  c.aggregation = Aggregation::Concat;
  c.coop_targets = CoopTargets::QKV;
  c.share_ratio = true;
  c.shift.tau = 1;
  c.shift.xi = 1;
  c.shift.alpha = 0.5;
  return c;
}

void zero_all_grads(const std::vector<std::pair<std::string, Tensor>>& named) {
  for (const auto& [name, t] : named) t.zero_grad();
}

// Central differences on a few sampled elements per parameter tensor; the
// full sweep would need thousands of forwards.
double fd_sampled(const std::function<Tensor()>& loss_fn,
                  const std::vector<std::pair<std::string, Tensor>>& named,
                  std::mt19937_64& rng, int per_tensor) {
  zero_all_grads(named);
  {
    GradTape tape;
    Tensor loss = loss_fn();
    tape.backward(loss);
  }
  const double h = 1e-5;
  double worst = 0.0;
  for (const auto& [name, t] : named) {
    std::uniform_int_distribution<std::int64_t> pick(0, t.numel() - 1);
    for (int s = 0; s < per_tensor; ++s) {
      const std::int64_t i = pick(rng);
      const double saved = t.values()[static_cast<std::size_t>(i)];
      t.mutable_values()[static_cast<std::size_t>(i)] = saved + h;
      const double up = loss_fn().values()[0];
      t.mutable_values()[static_cast<std::size_t>(i)] = saved - h;
      const double dn = loss_fn().values()[0];
      t.mutable_values()[static_cast<std::size_t>(i)] = saved;
      const double fd = (up - dn) / (2.0 * h);
      const double an = t.grad()[static_cast<std::size_t>(i)];
      const double err =
          std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

std::string temp_dir(const char* tag) {
  auto p = std::filesystem::temp_directory_path() /
           (std::string("lvt_test_") + tag + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  return p.string();
}

}  // namespace

TEST_CASE("toy geometry and embedding reduce to positional terms") {
  ModelConfig cfg = ModelConfig::preset(Variant::Toy);
  CHECK(cfg.grid_h() == 4);
  CHECK(cfg.grid_w() == 4);
  CHECK(cfg.spatial_tokens() == 16);
  CHECK(cfg.tokens() == 64);

  std::mt19937_64 rng(11);
  ModelParams params = ModelParams::init(cfg, rng);
  for (auto& v : params.w_patch.mutable_values()) v = 0.0;

  ClipBatch clip;
  clip.b = 2;
  clip.t = cfg.frames;
  clip.h = clip.w = cfg.image_size;
  clip.pixels =
      Tensor::zeros({clip.b * clip.t * clip.h * clip.w, cfg.pixel_channels});
  Tensor tok = embed(clip, cfg, params);
  REQUIRE(tok.rows() == clip.b * cfg.tokens());
  REQUIRE(tok.cols() == cfg.embed_dim);
  const std::int64_t s_tokens = cfg.spatial_tokens();
  for (std::int64_t bi = 0; bi < clip.b; ++bi)
    for (std::int64_t ti = 0; ti < cfg.frames; ++ti)
      for (std::int64_t si = 0; si < s_tokens; si += 5) {
        const std::int64_t row = (bi * cfg.frames + ti) * s_tokens + si;
        for (std::int64_t d = 0; d < cfg.embed_dim; d += 7) {
          const double want = params.pos_spatial.at2(si, d) +
                              params.pos_temporal.at2(ti, d);
          CHECK(tok.at2(row, d) == want);
        }
      }
}

TEST_CASE("patch extraction reads pixels in patch-major order") {
  ModelConfig cfg;
  cfg.frames = 1;
  cfg.image_size = 16;
  cfg.patch = 8;
  cfg.embed_dim = 64;
  cfg.heads = 8;
  cfg.layers = 1;
  std::mt19937_64 rng(3);
  ModelParams params = ModelParams::init(cfg, rng);
  for (auto& v : params.w_patch.mutable_values()) v = 0.0;
  for (std::int64_t i = 0; i < 64; ++i)
    params.w_patch.mutable_values()[static_cast<std::size_t>(i * 64 + i)] = 1.0;
  for (auto& v : params.pos_spatial.mutable_values()) v = 0.0;
  for (auto& v : params.pos_temporal.mutable_values()) v = 0.0;

  ClipBatch clip;
  clip.b = 1;
  clip.t = 1;
  clip.h = clip.w = 16;
  std::vector<double> px(16 * 16);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<double>(i);
  clip.pixels = Tensor::from_data({16 * 16, 1}, px);

  Tensor tok = embed(clip, cfg, params);
  REQUIRE(tok.rows() == 4);
  for (std::int64_t ph = 0; ph < 2; ++ph)
    for (std::int64_t pw = 0; pw < 2; ++pw)
      for (std::int64_t py = 0; py < 8; ++py)
        for (std::int64_t px_ = 0; px_ < 8; ++px_) {
          const double want =
              static_cast<double>((ph * 8 + py) * 16 + pw * 8 + px_);
          CHECK(tok.at2(ph * 2 + pw, py * 8 + px_) == want);
        }
}

TEST_CASE("forward logits: shape, determinism, seed sensitivity") {
  ModelConfig cfg = ModelConfig::preset(Variant::Toy);
  auto run = [&](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ModelParams params = ModelParams::init(cfg, rng);
    ClipBatch clip = make_clip(cfg, 3, rng);
    return forward(clip, cfg, params);
  };
  Tensor a = run(5), b = run(5), c = run(6);
  REQUIRE(a.shape() == Shape{3, cfg.num_classes});
  CHECK(tut::bit_identical(a, b));
  CHECK_FALSE(tut::bit_identical(a, c));
}

TEST_CASE("batch permutation permutes logits bitwise") {
  ModelConfig cfg = ModelConfig::preset(Variant::Toy);
  cfg.fixation = FixationMode::Cooperative;
  cfg.shift.tau = 1;
  cfg.shift.xi = 1;
  std::mt19937_64 rng(17);
  ModelParams params = ModelParams::init(cfg, rng);
  ClipBatch clip = make_clip(cfg, 3, rng);

  const std::int64_t rows_per_clip = cfg.frames * cfg.image_size * cfg.image_size;
  const std::vector<std::int64_t> order = {2, 0, 1};
  ClipBatch shuffled = clip;
  std::vector<Tensor> parts;
  for (auto o : order)
    parts.push_back(slice_rows(clip.pixels, o * rows_per_clip, rows_per_clip));
  shuffled.pixels = concat_rows(parts);

  Tensor base = forward(clip, cfg, params);
  Tensor perm = forward(shuffled, cfg, params);
  for (std::int64_t i = 0; i < 3; ++i)
    for (std::int64_t c = 0; c < cfg.num_classes; ++c)
      CHECK(perm.at2(i, c) == base.at2(order[static_cast<std::size_t>(i)], c));
}

TEST_CASE("factorized degenerates to the windowed pattern at one frame") {
  // With T=1 the temporal stage sees length-1 sequences, so full temporal
  // attention and windowed temporal attention compute the same thing.
  ModelConfig cfg = ModelConfig::preset(Variant::Toy);
  cfg.frames = 1;
  ModelConfig win = cfg;
  win.pattern = AttentionPattern::Windowed;
  win.window_radius = 1;
  auto run = [&](const ModelConfig& c) {
    std::mt19937_64 rng(23);
    ModelParams params = ModelParams::init(c, rng);
    std::mt19937_64 crng(99);
    ClipBatch clip = make_clip(c, 2, crng);
    return forward(clip, c, params);
  };
  CHECK(tut::bit_identical(run(cfg), run(win)));
}

TEST_CASE("joint and factorized patterns disagree for multi-frame clips") {
  ModelConfig fac = ModelConfig::preset(Variant::Toy);
  ModelConfig joint = fac;
  joint.pattern = AttentionPattern::Joint;
  std::mt19937_64 rng(29);
  ModelParams pf = ModelParams::init(fac, rng);
  std::mt19937_64 rng2(29);
  ModelParams pj = ModelParams::init(joint, rng2);
  std::mt19937_64 crng(31);
  ClipBatch clip = make_clip(fac, 2, crng);
  Tensor a = forward(clip, fac, pf);
  Tensor b = forward(clip, joint, pj);
  double diff = 0;
  for (std::size_t i = 0; i < a.values().size(); ++i)
    diff = std::max(diff, std::abs(a.values()[i] - b.values()[i]));
  CHECK(diff > 1e-6);
}

TEST_CASE("linear familiy equals quadratic family through blocks and model") {
  ModelConfig cfg = ModelConfig::preset(Variant::Toy);
  cfg.kernel = KernelTag::EluPlusOne;
  cfg.fixation = FixationMode::Cooperative;
  cfg.aggregation = Aggregation::Concat;
  cfg.coop_targets = CoopTargets::QKV;
  cfg.shift.tau = 1;
  cfg.shift.xi = 1;
  ModelConfig quad = cfg;
  quad.family = AttentionFamily::LinearQuadratic;

  std::mt19937_64 rng(41);
  ModelParams params = ModelParams::init(cfg, rng);
  ClipBatch clip = make_clip(cfg, 2, rng);

  SUBCASE("block level") {
    Tensor x = embed(clip, cfg, params);
    TokenGrid g = TokenGrid::wrap(x, clip.b, cfg.frames, cfg.grid_h(),
                                  cfg.grid_w());
    for (std::size_t l = 0; l < params.blocks.size(); ++l) {
      TokenGrid a = attention_block(g, cfg, params.blocks[l]);
      TokenGrid b = attention_block(g, quad, params.blocks[l]);
      CHECK(tut::max_rel_err(a.data, b.data) <= 1e-9);
      g = a;
    }
  }
  SUBCASE("end to end") {
    Tensor a = forward(clip, cfg, params);
    Tensor b = forward(clip, quad, params);
    CHECK(tut::max_rel_err(a, b) <= 1e-8);
    CHECK(tut::max_rel_err(a, b) > 0.0);  // distinct compute paths
  }
  SUBCASE("every pattern") {
    for (auto p : {AttentionPattern::Joint, AttentionPattern::Windowed}) {
      ModelConfig lf = cfg, qf = quad;
      lf.pattern = qf.pattern = p;
      std::mt19937_64 r2(43);
      ModelParams pp = ModelParams::init(lf, r2);
      Tensor a = forward(clip, lf, pp);
      Tensor b = forward(clip, qf, pp);
      CHECK(tut::max_rel_err(a, b) <= 1e-8);
    }
  }
}

TEST_CASE("gradients through the full model match finite differences") {
  ModelConfig cfg = mini_config();
  for (std::uint64_t seed : {71u, 72u, 73u}) {
    CAPTURE(seed);
    std::mt19937_64 rng(seed);
    ModelParams params = ModelParams::init(cfg, rng);
    ClipBatch clip = make_clip(cfg, 2, rng);
    auto loss = [&]() {
      return cross_entropy_mean(forward(clip, cfg, params), clip.labels);
    };
    std::mt19937_64 pick(seed * 13 + 1);
    CHECK(fd_sampled(loss, params.named_parameters(), pick, 3) <= 1e-4);
  }

  SUBCASE("windowed pattern") {
    ModelConfig w = cfg;
    w.pattern = AttentionPattern::Windowed;
    w.window_radius = 1;
    std::mt19937_64 rng(81);
    ModelParams params = ModelParams::init(w, rng);
    ClipBatch clip = make_clip(w, 2, rng);
    auto loss = [&]() {
      return cross_entropy_mean(forward(clip, w, params), clip.labels);
    };
    std::mt19937_64 pick(82);
    CHECK(fd_sampled(loss, params.named_parameters(), pick, 2) <= 1e-4);
  }
}

TEST_CASE("factorized attention needs fewer core flops than joint") {
  ModelConfig cfg;
  cfg.frames = 8;
  cfg.image_size = 64;
  cfg.patch = 8;
  cfg.embed_dim = 32;
  cfg.heads = 2;
  cfg.layers = 1;
  cfg.family = AttentionFamily::Softmax;
  cfg.fixation = FixationMode::None;
  ModelConfig joint = cfg;
  joint.pattern = AttentionPattern::Joint;

  std::mt19937_64 rng(53);
  ModelParams pf = ModelParams::init(cfg, rng);
  std::mt19937_64 rng2(53);
  ModelParams pj = ModelParams::init(joint, rng2);
  std::mt19937_64 crng(54);
  ClipBatch clip = make_clip(cfg, 1, crng);

  forward(clip, cfg, pf);
  const std::uint64_t fac = attention_core_flops();
  forward(clip, joint, pj);
  const std::uint64_t jnt = attention_core_flops();
  CHECK(fac > 0);
  CHECK(fac < jnt);

  // The counted core cost matches the closed forms summed over sequences.
  const std::int64_t s = cfg.spatial_tokens(), t = cfg.frames,
                     dh = cfg.head_dim(), h = cfg.heads;
  const std::uint64_t fac_expect =
      static_cast<std::uint64_t>(h) *
      (static_cast<std::uint64_t>(t) * softmax_attention_flops(s, dh) +
       static_cast<std::uint64_t>(s) * softmax_attention_flops(t, dh));
  const std::uint64_t jnt_expect =
      static_cast<std::uint64_t>(h) * softmax_attention_flops(s * t, dh);
  CHECK(fac == fac_expect);
  CHECK(jnt == jnt_expect);
}

TEST_CASE("non-token allocations stay flat when the clip doubles") {
  ModelConfig small;
  small.frames = 4;
  small.image_size = 32;
  small.patch = 8;
  small.embed_dim = 32;
  small.heads = 2;
  small.layers = 1;
  small.pattern = AttentionPattern::Joint;
  small.family = AttentionFamily::Linear;
  ModelConfig big = small;
  big.frames = 8;

  auto measure = [](const ModelConfig& c) {
    std::mt19937_64 rng(61);
    ModelParams params = ModelParams::init(c, rng);
    ClipBatch clip = make_clip(c, 1, rng);
    alloc::TrackerScope scope;
    forward(clip, c, params);
    return scope.stats();
  };
  const alloc::Stats s1 = measure(small);
  const alloc::Stats s2 = measure(big);
  const std::uint64_t n1 = static_cast<std::uint64_t>(small.tokens());

  // Blocks below one double per token are independent of clip length.
  const std::uint64_t fixed1 = s1.bytes_below(n1 * 8);
  const std::uint64_t fixed2 = s2.bytes_below(n1 * 8);
  CHECK(fixed2 < static_cast<std::uint64_t>(1.2 * static_cast<double>(fixed1)));
  // Total allocation grows close to linearly, far from the 4x of an
  // N x N intermediate.
  CHECK(static_cast<double>(s2.total_bytes) <
        2.4 * static_cast<double>(s1.total_bytes));
}

TEST_CASE("checkpoints round trip bitwise") {
  ModelConfig cfg = mini_config();
  std::mt19937_64 rng(67);
  ModelParams params = ModelParams::init(cfg, rng);
  ClipBatch clip = make_clip(cfg, 2, rng);
  Tensor logits = forward(clip, cfg, params);

  const std::string dir = temp_dir("ckpt");
  save_checkpoint(dir, cfg, params, 67, 42);
  CHECK(checkpoint_step(dir) == 42);

  ModelParams restored = load_checkpoint(dir, cfg);
  const auto a = params.named_parameters();
  const auto b = restored.named_parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CAPTURE(a[i].first);
    CHECK(a[i].first == b[i].first);
    CHECK(tut::bit_identical(a[i].second, b[i].second));
  }
  CHECK(tut::bit_identical(forward(clip, cfg, restored), logits));

  ModelConfig other = cfg;
  other.kernel = KernelTag::ReLU;
  CHECK_THROWS_AS(load_checkpoint(dir, other), ConfigError);
  CHECK_THROWS_AS(load_checkpoint(dir + "_missing", cfg), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("config validation catches bad geometry and combos") {
  ModelConfig cfg = ModelConfig::preset(Variant::Toy);
  cfg.image_size = 30;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ModelConfig::preset(Variant::Toy);
  cfg.heads = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ModelConfig::preset(Variant::Toy);
  cfg.family = AttentionFamily::Softmax;
  cfg.fixation = FixationMode::Separate;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ModelConfig::preset(Variant::Toy);
  cfg.shift.tau = 3;  // donated 8 channels per head do not split into 6 slabs
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ModelConfig::preset(Variant::Toy);
  cfg.num_classes = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  ModelConfig good = ModelConfig::preset(Variant::Toy);
  std::mt19937_64 rng(2);
  ModelParams params = ModelParams::init(good, rng);
  ClipBatch clip = make_clip(good, 1, rng);
  clip.t = 2;
  CHECK_THROWS_AS(embed(clip, good, params), ConfigError);
}

TEST_CASE("presets are constructible and distinct") {
  const Variant all[] = {Variant::S, Variant::Default, Variant::H, Variant::HR,
                         Variant::Toy};
  std::vector<std::uint64_t> prints;
  for (Variant v : all) {
    ModelConfig c = ModelConfig::preset(v);
    CHECK_NOTHROW(c.validate());
    CHECK(c.echo().find("family=") != std::string::npos);
    prints.push_back(c.fingerprint());
  }
  std::sort(prints.begin(), prints.end());
  CHECK(std::adjacent_find(prints.begin(), prints.end()) == prints.end());

  ModelConfig d = ModelConfig::preset(Variant::Default);
  CHECK(d.embed_dim == 512);
  CHECK(d.layers == 12);
  CHECK(d.heads == 8);
  CHECK(d.frames == 16);
  CHECK(ModelConfig::preset(Variant::H).frames == 32);
  CHECK(ModelConfig::preset(Variant::S).frames == 8);
  CHECK(ModelConfig::preset(Variant::HR).image_size == 336);
}

TEST_CASE("named parameters have stable unique paths") {
  ModelConfig cfg = mini_config();
  std::mt19937_64 rng(7);
  ModelParams params = ModelParams::init(cfg, rng);
  auto named = params.named_parameters();
  std::vector<std::string> names;
  for (const auto& [n, t] : named) {
    names.push_back(n);
    CHECK(t.requires_grad());
  }
  std::sort(names.begin(), names.end());
  CHECK(std::adjacent_find(names.begin(), names.end()) == names.end());
  CHECK(params.param_count() > 0);

  // Cooperative shared fixation reuses one ratio head; unshared adds one.
  ModelConfig unshared = cfg;
  unshared.share_ratio = false;
  std::mt19937_64 rng2(7);
  ModelParams pu = ModelParams::init(unshared, rng2);
  CHECK(pu.param_count() > params.param_count());
}
