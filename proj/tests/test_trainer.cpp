#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "lvt/diagnostics.hpp"
#include "lvt/error.hpp"
#include "lvt/tensor_io.hpp"
#include "lvt/trainer.hpp"
#include "test_util.hpp"

using namespace lvt;
using train::Split;
using train::SyntheticTask;
using train::TrainConfig;

namespace {

std::string temp_dir(const char* tag) {
  auto p = std::filesystem::temp_directory_path() /
           (std::string("lvt_trainer_") + tag + "_" +
            std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  return p.string();
}

// The desk-scale single-head model the trainer probes run on.
ModelConfig toy_cfg() {
  ModelConfig cfg = ModelConfig::preset(Variant::Toy);
  cfg.frames = 8;
  cfg.image_size = 16;
  cfg.patch = 8;
  cfg.num_classes = 4;
  cfg.layers = 1;
  cfg.heads = 1;
  return cfg;
}

SyntheticTask easy_task() {
  SyntheticTask task;
  task.noise = 0.15;
  task.sprite = 3.0;
  return task;
}

TrainConfig quick_tc(std::uint64_t seed) {
  TrainConfig tc;
  tc.epochs = 2;
  tc.train_clips = 64;
  tc.val_clips = 16;
  tc.batch = 16;
  tc.base_lr = 0.05;
  tc.warmup_epochs = 1;
  tc.seed = seed;
  return tc;
}

// Frame pixel block of one clip, row-major.
std::vector<double> frame_of(const ClipBatch& b, std::int64_t clip,
                             std::int64_t frame) {
  const auto& v = b.pixels.values();
  const std::int64_t fsz = b.h * b.w * b.pixels.cols();
  const std::int64_t at = (clip * b.t + frame) * fsz;
  return {v.begin() + at, v.begin() + at + fsz};
}

std::string data_rows(const std::string& csv_text) {
  std::istringstream in(csv_text);
  std::ostringstream out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty() && line[0] != '#' && line.rfind("step,", 0) != 0)
      out << line << '\n';
  return out.str();
}

double mean_row_entropy(const ModelConfig& cfg, const ModelParams& params,
                        const ClipBatch& batch) {
  double sum = 0.0;
  long long rows = 0;
  AttentionObserver obs;
  obs.on_matrix = [&](int, int, int, std::int64_t, const Tensor& m) {
    auto stats = diag::concentration_masked(m);
    for (double e : stats.entropy) sum += e;
    rows += static_cast<long long>(stats.entropy.size());
  };
  forward(batch, cfg, params, &obs);
  REQUIRE(rows > 0);
  return sum / static_cast<double>(rows);
}

}  // namespace

TEST_CASE("clip generator is deterministic, balanced, and split-disjoint") {
  SyntheticTask task = easy_task();

  ClipBatch a = train::generate(task, Split::Train, 0, 64);
  ClipBatch b = train::generate(task, Split::Train, 0, 64);
  CHECK(a.pixels.values() == b.pixels.values());
  CHECK(a.labels == b.labels);

  std::vector<int> counts(4, 0);
  for (std::size_t i = 0; i < a.labels.size(); ++i) {
    CHECK(a.labels[i] == static_cast<std::int64_t>(i) % 4);
    counts[static_cast<std::size_t>(a.labels[i])]++;
  }
  for (int c : counts) CHECK(c == 16);

  ClipBatch v = train::generate(task, Split::Val, 0, 64);
  CHECK(v.labels == a.labels);
  CHECK(v.pixels.values() != a.pixels.values());

  // Indexed and ranged forms agree.
  ClipBatch picked = train::generate(task, Split::Train, {5, 9});
  ClipBatch from5 = train::generate(task, Split::Train, 5, 1);
  CHECK(frame_of(picked, 0, 3) == frame_of(from5, 0, 3));
}

TEST_CASE("ring geometry: distinct cells, coprime strides") {
  SyntheticTask task = easy_task();
  auto ring = task.cells();
  REQUIRE(ring.size() == 8);
  std::set<std::pair<std::int64_t, std::int64_t>> unique(ring.begin(),
                                                         ring.end());
  CHECK(unique.size() == ring.size());
  for (auto [y, x] : ring) {
    CHECK(y >= 0);
    CHECK(y < task.image_size - 1);  // sprite is 2x2
    CHECK(x >= 0);
    CHECK(x < task.image_size - 1);
  }
  CHECK(task.strides() == std::vector<std::int64_t>{1, 3, 5, 7});
}

TEST_CASE("task validation rejects impossible configurations") {
  SyntheticTask task = easy_task();

  task.image_size = 8;
  CHECK_THROWS_AS(task.validate(), ConfigError);
  task = easy_task();

  task.num_classes = 5;  // a ring of 8 has only 4 coprime strides
  CHECK_THROWS_AS(task.validate(), ConfigError);
  task = easy_task();

  task.frames = 1;
  CHECK_THROWS_AS(task.validate(), ConfigError);
  task = easy_task();

  task.noise = -0.1;
  CHECK_THROWS_AS(task.validate(), ConfigError);
  task = easy_task();

  task.cue = -1.0;
  CHECK_THROWS_AS(task.validate(), ConfigError);
  task = easy_task();

  task.sprite = 0.0;
  CHECK_THROWS_AS(task.validate(), ConfigError);
}

TEST_CASE("model/task geometry mismatch is rejected up front") {
  ModelConfig cfg = toy_cfg();
  cfg.frames = 4;
  CHECK_THROWS_AS(train::train(cfg, easy_task(), quick_tc(1)), ConfigError);
}

TEST_CASE("frame shuffle permutes order but keeps frame content") {
  SyntheticTask task = easy_task();
  ClipBatch batch = train::generate(task, Split::Train, 0, 4);
  ClipBatch shuffled = train::shuffle_frames(batch, 9);

  CHECK(shuffled.labels == batch.labels);

  bool any_reordered = false;
  for (std::int64_t clip = 0; clip < batch.b; ++clip) {
    std::vector<std::vector<double>> orig, perm;
    for (std::int64_t f = 0; f < batch.t; ++f) {
      orig.push_back(frame_of(batch, clip, f));
      perm.push_back(frame_of(shuffled, clip, f));
    }
    if (orig != perm) any_reordered = true;
    std::sort(orig.begin(), orig.end());
    std::sort(perm.begin(), perm.end());
    CHECK(orig == perm);
  }
  CHECK(any_reordered);

  ClipBatch again = train::shuffle_frames(batch, 9);
  CHECK(again.pixels.values() == shuffled.pixels.values());
}

TEST_CASE("corner cue is static, parity-signed, and localized") {
  SyntheticTask plain = easy_task();
  SyntheticTask cued = easy_task();
  cued.cue = 1.5;

  // Same seed streams, so the clips differ exactly at the marker.
  ClipBatch a = train::generate(plain, Split::Train, 0, 4);
  ClipBatch b = train::generate(cued, Split::Train, 0, 4);
  const std::int64_t hw = plain.image_size;

  for (std::int64_t clip = 0; clip < 4; ++clip) {
    const double sign = (a.labels[static_cast<std::size_t>(clip)] % 2 == 0)
                            ? 1.0
                            : -1.0;
    for (std::int64_t f = 0; f < plain.frames; ++f) {
      auto pa = frame_of(a, clip, f);
      auto pb = frame_of(b, clip, f);
      for (std::int64_t y = 0; y < hw; ++y)
        for (std::int64_t x = 0; x < hw; ++x) {
          const double d = pb[static_cast<std::size_t>(y * hw + x)] -
                           pa[static_cast<std::size_t>(y * hw + x)];
          if (y >= 1 && y <= 2 && x >= 1 && x <= 2)
            CHECK(d == doctest::Approx(sign * 1.5).epsilon(1e-12));
          else
            CHECK(d == 0.0);
        }
    }
  }
}

TEST_CASE("lr schedule: linear warmup, cosine decay to zero") {
  TrainConfig tc = quick_tc(1);
  tc.epochs = 10;
  tc.warmup_epochs = 2;
  const std::int64_t total = 100;  // 10 steps per epoch -> warm = 20

  CHECK(train::lr_at(tc, 0, total) == doctest::Approx(1.0 / 20.0));
  CHECK(train::lr_at(tc, 19, total) == doctest::Approx(1.0));
  CHECK(train::lr_at(tc, 20, total) == doctest::Approx(1.0));
  CHECK(train::lr_at(tc, 60, total) == doctest::Approx(0.5));
  CHECK(train::lr_at(tc, 99, total) < 0.01);
  for (std::int64_t s = 21; s < 100; ++s)
    CHECK(train::lr_at(tc, s, total) < train::lr_at(tc, s - 1, total));

  tc.warmup_epochs = 0;
  CHECK(train::lr_at(tc, 0, total) == doctest::Approx(1.0));
}

TEST_CASE("one fixed batch is memorized fast") {
  ModelConfig cfg = toy_cfg();
  cfg.shift.tau = 1;
  cfg.shift.xi = 1;
  cfg.fixation = FixationMode::Cooperative;
  cfg.coop_targets = CoopTargets::QKV;

  TrainConfig tc = quick_tc(3);
  tc.batch = 8;
  tc.train_clips = 8;

  const double last = train::overfit_one_batch(cfg, easy_task(), tc, 500, 0.05);
  CHECK(last < 0.05);
}

TEST_CASE("a short run moves every live parameter") {
  struct Case {
    const char* name;
    FixationMode mode;
    CoopTargets targets;
  };
  const Case cases[] = {
      {"none", FixationMode::None, CoopTargets::QKV},
      {"separate", FixationMode::Separate, CoopTargets::QKV},
      {"coop_qk", FixationMode::Cooperative, CoopTargets::QK},
      {"coop_qkv", FixationMode::Cooperative, CoopTargets::QKV},
  };
  for (const Case& c : cases) {
    CAPTURE(c.name);
    ModelConfig cfg = toy_cfg();
    cfg.shift.tau = 1;
    cfg.shift.xi = 1;
    cfg.fixation = c.mode;
    cfg.coop_targets = c.targets;

    TrainConfig tc = quick_tc(11);
    tc.epochs = 1;
    tc.train_clips = 16;
    tc.weight_decay = 0.0;

    std::mt19937_64 rng(tc.seed);
    ModelParams init = ModelParams::init(cfg, rng);
    train::TrainResult r = train::train(cfg, easy_task(), tc);
    REQUIRE_FALSE(r.diverged);

    auto before = init.named_parameters();
    auto after = r.params.named_parameters();
    REQUIRE(before.size() == after.size());
    for (std::size_t i = 0; i < before.size(); ++i) {
      CAPTURE(before[i].first);
      CHECK(before[i].first == after[i].first);
      double moved = 0.0;
      const auto& a = before[i].second.values();
      const auto& b = after[i].second.values();
      for (std::size_t j = 0; j < a.size(); ++j)
        moved = std::max(moved, std::abs(a[j] - b[j]));
      CHECK(moved > 0.0);
    }
  }
}

TEST_CASE("softmax key bias is exactly dead") {
  ModelConfig cfg = toy_cfg();
  cfg.family = AttentionFamily::Softmax;

  TrainConfig tc = quick_tc(12);
  tc.epochs = 1;
  tc.train_clips = 32;
  tc.weight_decay = 0.0;  // decay would move the bias for non-loss reasons

  std::mt19937_64 rng(tc.seed);
  ModelParams init = ModelParams::init(cfg, rng);
  train::TrainResult r = train::train(cfg, easy_task(), tc);
  REQUIRE_FALSE(r.diverged);

  auto before = init.named_parameters();
  auto after = r.params.named_parameters();
  REQUIRE(before.size() == after.size());
  for (std::size_t i = 0; i < before.size(); ++i) {
    const std::string& name = before[i].first;
    CAPTURE(name);
    const bool is_key_bias = name.size() >= 3 &&
                             name.compare(name.size() - 3, 3, "b_k") == 0;
    double moved = 0.0;
    const auto& a = before[i].second.values();
    const auto& b = after[i].second.values();
    for (std::size_t j = 0; j < a.size(); ++j)
      moved = std::max(moved, std::abs(a[j] - b[j]));
    CAPTURE(moved);
    if (is_key_bias)
      // The analytic gradient cancels per attention row; only rounding
      // residue of that cancellation can leak through.
      CHECK(moved < 1e-12);
    else
      CHECK(moved > 1e-8);
  }
}

TEST_CASE("training is deterministic and outputs are overwritten in place") {
  ModelConfig cfg = toy_cfg();
  cfg.shift.tau = 1;
  cfg.shift.xi = 1;

  TrainConfig tc = quick_tc(21);
  tc.out_dir = temp_dir("determinism");

  train::TrainResult r1 = train::train(cfg, easy_task(), tc);
  const std::string csv1 = io::read_text_file(r1.metrics_path);
  train::TrainResult r2 = train::train(cfg, easy_task(), tc);
  const std::string csv2 = io::read_text_file(r2.metrics_path);

  CHECK(csv1 == csv2);
  auto p1 = r1.params.named_parameters();
  auto p2 = r2.params.named_parameters();
  REQUIRE(p1.size() == p2.size());
  for (std::size_t i = 0; i < p1.size(); ++i)
    CHECK(p1[i].second.values() == p2[i].second.values());

  std::filesystem::remove_all(tc.out_dir);
}

TEST_CASE("metrics csv carries the versioned schema and config echo") {
  ModelConfig cfg = toy_cfg();
  TrainConfig tc = quick_tc(22);
  tc.out_dir = temp_dir("metrics");
  tc.log_every = 2;

  train::TrainResult r = train::train(cfg, easy_task(), tc);
  std::istringstream in(io::read_text_file(r.metrics_path));
  std::string line;
  std::getline(in, line);
  CHECK(line == "# lvt-metrics-csv-v1");

  bool saw_task = false, saw_clip = false, saw_header = false;
  int val_rows = 0, epoch_rows = 0, train_rows = 0;
  while (std::getline(in, line)) {
    if (line.rfind("# task.frames=8", 0) == 0) saw_task = true;
    if (line.rfind("# clip_norm=", 0) == 0) saw_clip = true;
    if (line == "step,split,loss,top1") {
      saw_header = true;
      continue;
    }
    if (line.empty() || line[0] == '#') continue;
    REQUIRE(saw_header);
    std::istringstream row(line);
    std::string step, split, loss, top1;
    std::getline(row, step, ',');
    std::getline(row, split, ',');
    std::getline(row, loss, ',');
    std::getline(row, top1, ',');
    CHECK(std::stoll(step) >= 1);
    const double l = std::stod(loss);
    const double t = std::stod(top1);
    CHECK(std::isfinite(l));
    CHECK(t >= 0.0);
    CHECK(t <= 1.0);
    if (split == "val") ++val_rows;
    else if (split == "train_epoch") ++epoch_rows;
    else if (split == "train") ++train_rows;
    else FAIL("unknown split: ", split);
  }
  CHECK(saw_task);
  CHECK(saw_clip);
  CHECK(val_rows == tc.epochs);
  CHECK(epoch_rows == tc.epochs);
  // 4 steps/epoch, log_every=2 -> 2 rows per epoch
  CHECK(train_rows == 2 * tc.epochs);

  CHECK(checkpoint_step(tc.out_dir + "/model") == r.steps);
  const std::string state = io::read_text_file(tc.out_dir + "/state/state.txt");
  CHECK(state.rfind("format=lvt-trainstate-v1", 0) == 0);
  CHECK(state.find("epoch=") != std::string::npos);
  CHECK(state.find("trajectory=") != std::string::npos);

  std::filesystem::remove_all(tc.out_dir);
}

TEST_CASE("interrupted run resumes into a bit-identical trajectory") {
  ModelConfig cfg = toy_cfg();
  cfg.shift.tau = 1;
  cfg.shift.xi = 1;

  TrainConfig full = quick_tc(31);
  full.epochs = 4;
  full.out_dir = temp_dir("resume_full");
  train::TrainResult ref = train::train(cfg, easy_task(), full);
  REQUIRE(ref.history.size() == 4);

  TrainConfig cut = full;
  cut.out_dir = temp_dir("resume_cut");
  cut.stop_after_epoch = 1;
  train::TrainResult half = train::train(cfg, easy_task(), cut);
  CHECK(half.note.find("stopped after epoch 1") != std::string::npos);
  REQUIRE(half.history.size() == 2);

  TrainConfig rest = full;
  rest.out_dir = temp_dir("resume_rest");
  train::TrainResult tail =
      train::resume(cfg, easy_task(), rest, cut.out_dir + "/state");
  REQUIRE(tail.history.size() == 2);

  // Combined trajectory matches the uninterrupted run exactly.
  CHECK(tail.history[0].val_top1 == ref.history[2].val_top1);
  CHECK(tail.history[1].val_top1 == ref.history[3].val_top1);
  CHECK(tail.history[0].train_loss == ref.history[2].train_loss);
  CHECK(tail.history[1].train_loss == ref.history[3].train_loss);
  CHECK(tail.steps == ref.steps);

  auto pr = ref.params.named_parameters();
  auto pt = tail.params.named_parameters();
  REQUIRE(pr.size() == pt.size());
  for (std::size_t i = 0; i < pr.size(); ++i)
    CHECK(pr[i].second.values() == pt[i].second.values());

  // Data rows of the reference equal cut rows followed by resumed rows.
  const std::string ref_rows =
      data_rows(io::read_text_file(ref.metrics_path));
  const std::string joined =
      data_rows(io::read_text_file(half.metrics_path)) +
      data_rows(io::read_text_file(tail.metrics_path));
  CHECK(ref_rows == joined);

  std::filesystem::remove_all(full.out_dir);
  std::filesystem::remove_all(cut.out_dir);
  std::filesystem::remove_all(rest.out_dir);
}

TEST_CASE("resume rejects mismatched configuration fingerprints") {
  ModelConfig cfg = toy_cfg();
  TrainConfig tc = quick_tc(41);
  tc.epochs = 3;
  tc.out_dir = temp_dir("resume_guard");
  tc.stop_after_epoch = 0;
  train::train(cfg, easy_task(), tc);
  const std::string state = tc.out_dir + "/state";

  ModelConfig other_cfg = cfg;
  other_cfg.kernel = KernelTag::Sigmoid;
  CHECK_THROWS_WITH_AS(
      train::resume(other_cfg, easy_task(), tc, state),
      doctest::Contains("different model config"), ConfigError);

  SyntheticTask other_task = easy_task();
  other_task.noise = 0.3;
  CHECK_THROWS_WITH_AS(train::resume(cfg, other_task, tc, state),
                       doctest::Contains("different task"), ConfigError);

  TrainConfig other_tc = tc;
  other_tc.base_lr = 0.01;
  CHECK_THROWS_WITH_AS(train::resume(cfg, easy_task(), other_tc, state),
                       doctest::Contains("different training schedule"),
                       ConfigError);

  // out_dir and the interruption hook are not part of the schedule.
  TrainConfig moved = tc;
  moved.out_dir = temp_dir("resume_guard2");
  moved.stop_after_epoch = -1;
  train::TrainResult done = train::resume(cfg, easy_task(), moved, state);
  CHECK(done.history.size() == 2);

  // A state that already covers the schedule has nothing to continue.
  train::TrainResult noop =
      train::resume(cfg, easy_task(), moved, moved.out_dir + "/state");
  CHECK(noop.note.find("nothing to resume") != std::string::npos);
  CHECK(noop.history.empty());

  std::filesystem::remove_all(tc.out_dir);
  std::filesystem::remove_all(moved.out_dir);
}

TEST_CASE("divergence aborts the run and says so") {
  ModelConfig cfg = toy_cfg();
  TrainConfig tc = quick_tc(51);
  tc.epochs = 2;
  tc.train_clips = 32;
  // Layer norms and max-shifted cross-entropy keep merely-huge weights
  // finite, so the step has to overflow the kernel products outright.
  tc.base_lr = 1e200;
  tc.warmup_epochs = 0;
  tc.clip_norm = 0.0;  // clipping off, nothing tames the step

  train::TrainResult r = train::train(cfg, easy_task(), tc);
  CHECK(r.diverged);
  CHECK(r.note.find("diverged at step") != std::string::npos);
  CHECK(r.steps < 2 * 2);
}

TEST_CASE("cooperative fixation concentrates trained attention") {
  // Fig. 2's qualitative claim at desk scale: after identical short runs,
  // the cooperative model's attention rows carry less entropy than the
  // plain linear model's, per seed and in the mean.
  SyntheticTask task = easy_task();
  TrainConfig base = quick_tc(0);
  base.epochs = 8;
  base.train_clips = 256;
  base.val_clips = 32;
  base.base_lr = 0.06;

  const ClipBatch probe = train::generate(task, Split::Val, 0, 32);
  double coop_mean = 0.0, pure_mean = 0.0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    TrainConfig tc = base;
    tc.seed = seed;

    ModelConfig coop = toy_cfg();
    coop.shift.tau = 1;
    coop.shift.xi = 1;
    coop.fixation = FixationMode::Cooperative;
    coop.coop_targets = CoopTargets::QKV;
    train::TrainResult rc = train::train(coop, task, tc);
    REQUIRE_FALSE(rc.diverged);
    coop_mean += mean_row_entropy(coop, rc.params, probe);

    ModelConfig pure = toy_cfg();
    train::TrainResult rp = train::train(pure, task, tc);
    REQUIRE_FALSE(rp.diverged);
    pure_mean += mean_row_entropy(pure, rp.params, probe);
  }
  coop_mean /= 3.0;
  pure_mean /= 3.0;
  CHECK(coop_mean < pure_mean - 0.05);
}

TEST_CASE("ablation deltas rewrite the intended axis and nothing else") {
  ModelConfig base = toy_cfg();
  base.shift.tau = 1;
  base.shift.xi = 1;

  auto axes = train::ablation_axes();
  CHECK(axes.size() == 9);

  ModelConfig c = train::apply_delta(
      base, {"no_spatial", {{"spatial_shift", "off"}}});
  CHECK(c.shift.xi == 0);
  CHECK(c.shift.tau == base.shift.tau);

  c = train::apply_delta(base, {"no_temporal", {{"temporal_shift", "off"}}});
  CHECK(c.shift.tau == 0);

  c = train::apply_delta(base, {"sep", {{"fixation", "separate"}}});
  CHECK(c.fixation == FixationMode::Separate);

  c = train::apply_delta(base, {"qk", {{"fixation", "coop_qk"}}});
  CHECK(c.fixation == FixationMode::Cooperative);
  CHECK(c.coop_targets == CoopTargets::QK);

  c = train::apply_delta(base, {"unshared", {{"share_ratio", "off"}}});
  CHECK_FALSE(c.share_ratio);

  c = train::apply_delta(base, {"add", {{"aggregation", "add"}}});
  CHECK(c.aggregation == Aggregation::Add);

  c = train::apply_delta(base, {"elu", {{"kernel", "elu1"}}});
  CHECK(c.kernel == KernelTag::EluPlusOne);

  c = train::apply_delta(base, {"joint", {{"pattern", "joint"}}});
  CHECK(c.pattern == AttentionPattern::Joint);

  c = train::apply_delta(base, {"soft", {{"family", "softmax"}}});
  CHECK(c.family == AttentionFamily::Softmax);

  c = train::apply_delta(
      base, {"combo", {{"spatial_shift", "off"}, {"fixation", "coop_qkv"}}});
  CHECK(c.shift.xi == 0);
  CHECK(c.fixation == FixationMode::Cooperative);
  CHECK(c.coop_targets == CoopTargets::QKV);

  CHECK_THROWS_WITH_AS(
      train::apply_delta(base, {"bad", {{"windows", "on"}}}),
      doctest::Contains("spatial_shift"), ConfigError);
  CHECK_THROWS_AS(
      train::apply_delta(base, {"bad", {{"spatial_shift", "maybe"}}}),
      ConfigError);
  CHECK_THROWS_AS(train::apply_delta(base, {"bad", {{"fixation", "both"}}}),
                  ConfigError);
}

TEST_CASE("ablation grid is deterministic and lands in the csv") {
  ModelConfig base = toy_cfg();
  SyntheticTask task = easy_task();
  TrainConfig tc = quick_tc(61);
  tc.epochs = 1;
  tc.train_clips = 32;
  tc.val_clips = 16;

  std::vector<train::Delta> grid = {
      {"baseline", {}},
      {"coop", {{"fixation", "coop_qkv"}}},
  };
  const std::string csv = temp_dir("ablate") + "/ablation.csv";
  std::filesystem::create_directories(
      std::filesystem::path(csv).parent_path());

  auto rows = train::ablate(base, grid, task, tc, {1, 2}, csv);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].delta_id == "baseline");
  CHECK(rows[0].seed == 1);
  CHECK(rows[1].seed == 2);
  CHECK(rows[2].delta_id == "coop");
  CHECK(rows[2].settings == "fixation=coop_qkv");
  for (const auto& row : rows) {
    CHECK(row.final_top1 >= 0.0);
    CHECK(row.final_top1 <= 1.0);
  }

  const std::string text1 = io::read_text_file(csv);
  CHECK(text1.find("lvt-ablation-csv-v1") != std::string::npos);
  CHECK(text1.find("delta_id,settings,seed,final_top1") != std::string::npos);

  auto rows2 = train::ablate(base, grid, task, tc, {1, 2}, csv);
  CHECK(io::read_text_file(csv) == text1);
  for (std::size_t i = 0; i < rows.size(); ++i)
    CHECK(rows[i].final_top1 == rows2[i].final_top1);

  std::filesystem::remove_all(std::filesystem::path(csv).parent_path());
}
