#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>

#include "lvt/error.hpp"
#include "lvt/tensor_io.hpp"
#include "lvt/trainer.hpp"

namespace lvt::train {

namespace {

constexpr double kPi = 3.14159265358979323846;

// splitmix64 finalizer; every stream in the trainer is derived functionally
// from (seed, purpose, index) so no engine state ever needs persisting.
std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t h = a + 0x9E3779B97F4A7C15ULL + (b << 1);
  h ^= h >> 30;
  h *= 0xBF58476D1CE4E5B9ULL;
  h ^= h >> 27;
  h *= 0x94D049BB133111EBULL;
  h ^= h >> 31;
  return h;
}

double batch_top1(const Tensor& logits, const std::vector<std::int64_t>& labels,
                  std::size_t offset, std::size_t count) {
  const std::int64_t c = logits.cols();
  std::int64_t hits = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const std::int64_t row = static_cast<std::int64_t>(i);
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < c; ++j)
      if (logits.at2(row, j) > logits.at2(row, best)) best = j;
    if (best == labels[offset + i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(count);
}

ClipBatch slice_clips(const ClipBatch& all, std::int64_t start,
                      std::int64_t count) {
  const std::int64_t rows_per_clip = all.t * all.h * all.w;
  ClipBatch out;
  out.pixels =
      slice_rows(all.pixels, start * rows_per_clip, count * rows_per_clip);
  out.labels.assign(all.labels.begin() + start,
                    all.labels.begin() + start + count);
  out.b = count;
  out.t = all.t;
  out.h = all.h;
  out.w = all.w;
  return out;
}

struct EvalStat {
  double loss = 0.0;
  double top1 = 0.0;
};

EvalStat eval_on(const ModelConfig& cfg, const ModelParams& params,
                 const ClipBatch& set, std::int64_t batch_size) {
  EvalStat s;
  std::int64_t done = 0;
  while (done < set.b) {
    const std::int64_t take = std::min(batch_size, set.b - done);
    ClipBatch chunk = slice_clips(set, done, take);
    Tensor logits = forward(chunk, cfg, params);
    Tensor loss = cross_entropy_mean(logits, chunk.labels);
    const double w = static_cast<double>(take) / static_cast<double>(set.b);
    s.loss += loss.at(0) * w;
    s.top1 += batch_top1(logits, chunk.labels, 0, chunk.labels.size()) * w;
    done += take;
  }
  return s;
}

struct Optimizer {
  std::vector<std::pair<std::string, Tensor>> params;
  std::vector<Tensor> momentum;

  explicit Optimizer(const ModelParams& p) : params(p.named_parameters()) {
    momentum.reserve(params.size());
    for (const auto& [name, t] : params)
      momentum.push_back(Tensor::zeros(t.shape()));
  }

  void zero_grads() {
    for (auto& [name, t] : params) t.zero_grad();
  }

  // Global-norm clip factor over every gradient, 1.0 when within bounds.
  double clip_factor(double clip_norm) const {
    if (clip_norm <= 0.0) return 1.0;
    double sq = 0.0;
    for (const auto& [name, p] : params) {
      if (!p.has_grad()) continue;
      for (double g : p.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    return norm > clip_norm ? clip_norm / norm : 1.0;
  }

  void step(double lr, double mu, double wd, double clip_norm) {
    const double scale = clip_factor(clip_norm);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = params[i].second;
      if (!p.has_grad()) continue;
      auto& w = p.mutable_values();
      const auto& g = p.grad();
      auto& u = momentum[i].mutable_values();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j] * scale + wd * w[j];
        u[j] = mu * u[j] + gj;
        w[j] -= lr * u[j];
      }
    }
  }
};

std::string trajectory_echo(const TrainConfig& tc) {
  std::ostringstream o;
  o << "epochs=" << tc.epochs << "\n"
    << "train_clips=" << tc.train_clips << "\n"
    << "val_clips=" << tc.val_clips << "\n"
    << "batch=" << tc.batch << "\n"
    << "base_lr=" << io::format_double(tc.base_lr) << "\n"
    << "momentum=" << io::format_double(tc.momentum) << "\n"
    << "weight_decay=" << io::format_double(tc.weight_decay) << "\n"
    << "clip_norm=" << io::format_double(tc.clip_norm) << "\n"
    << "warmup_epochs=" << tc.warmup_epochs << "\n"
    << "seed=" << tc.seed << "\n";
  return o.str();
}

void save_state(const std::string& dir, const ModelConfig& cfg,
                const SyntheticTask& task, const TrainConfig& tc,
                const ModelParams& params, const Optimizer& opt, int epoch,
                std::int64_t step) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  save_checkpoint(dir + "/model", cfg, params, tc.seed, step);
  fs::create_directories(dir + "/momentum");
  for (std::size_t i = 0; i < opt.params.size(); ++i)
    io::save_tensor(dir + "/momentum/" + opt.params[i].first + ".t64",
                    opt.momentum[i]);
  std::ostringstream o;
  o << "format=lvt-trainstate-v1\n"
    << "epoch=" << epoch << "\n"
    << "step=" << step << "\n"
    << "config=" << cfg.fingerprint() << "\n"
    << "task=" << task.fingerprint() << "\n"
    << "trajectory=" << io::fnv1a64(trajectory_echo(tc)) << "\n";
  io::write_text_file(dir + "/state.txt", o.str());
}

std::map<std::string, std::string> read_state_file(const std::string& dir) {
  const std::string path = dir + "/state.txt";
  if (!std::filesystem::exists(path))
    throw IoError("train state not found: " + path);
  std::istringstream in(io::read_text_file(path));
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (kv["format"] != "lvt-trainstate-v1")
    throw IoError("unrecognized train state format in " + path);
  return kv;
}

void check_geometry(const ModelConfig& cfg, const SyntheticTask& task) {
  if (cfg.frames != task.frames || cfg.image_size != task.image_size ||
      cfg.pixel_channels != task.channels ||
      cfg.num_classes != task.num_classes)
    throw ConfigError(
        "model and task geometry disagree: model (frames=" +
        std::to_string(cfg.frames) + ", image=" +
        std::to_string(cfg.image_size) + ", channels=" +
        std::to_string(cfg.pixel_channels) + ", classes=" +
        std::to_string(cfg.num_classes) + ") vs task (frames=" +
        std::to_string(task.frames) + ", image=" +
        std::to_string(task.image_size) + ", channels=" +
        std::to_string(task.channels) + ", classes=" +
        std::to_string(task.num_classes) + ")");
}

// Shared by train() and resume().
TrainResult run_loop(const ModelConfig& cfg, const SyntheticTask& task,
                     const TrainConfig& tc, ModelParams params,
                     std::unique_ptr<Optimizer> opt, int start_epoch) {
  namespace fs = std::filesystem;
  TrainResult result;
  result.params = params;

  const std::int64_t steps_per_epoch = tc.train_clips / tc.batch;
  const std::int64_t total_steps = tc.epochs * steps_per_epoch;
  std::int64_t global_step = start_epoch * steps_per_epoch;

  const ClipBatch val_set = generate(task, Split::Val, 0, tc.val_clips);

  std::unique_ptr<io::CsvWriter> metrics;
  if (!tc.out_dir.empty()) {
    fs::create_directories(tc.out_dir);
    result.metrics_path = tc.out_dir + "/metrics.csv";
    result.state_dir = tc.out_dir + "/state";
    metrics = std::make_unique<io::CsvWriter>(result.metrics_path,
                                              "step,split,loss,top1");
    metrics->comment("lvt-metrics-csv-v1");
    std::istringstream echo(cfg.echo() + task.echo() + trajectory_echo(tc));
    std::string line;
    while (std::getline(echo, line)) metrics->comment(line);
  }

  bool has_saved_state = false;
  int last_saved_epoch = -1;

  std::vector<std::int64_t> order(static_cast<std::size_t>(tc.train_clips));

  for (int epoch = start_epoch; epoch < tc.epochs; ++epoch) {
    // Each epoch's order is a pure function of (seed, epoch), never of the
    // previous epoch's order, so a resumed run walks the same batches.
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(mix(mix(tc.seed, 0xE90CULL), epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double epoch_loss = 0.0;
    double epoch_top1 = 0.0;
    for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
      std::vector<std::int64_t> idx(
          order.begin() + s * tc.batch,
          order.begin() + (s + 1) * tc.batch);
      ClipBatch clip = generate(task, Split::Train, idx);

      double loss_val = 0.0;
      double acc = 0.0;
      bool blew_up = false;
      try {
        opt->zero_grads();
        GradTape tape;
        Tensor logits = forward(clip, cfg, params);
        Tensor loss = cross_entropy_mean(logits, clip.labels);
        loss_val = loss.at(0);
        acc = batch_top1(logits, clip.labels, 0, clip.labels.size());
        if (!std::isfinite(loss_val)) blew_up = true;
        else tape.backward(loss);
      } catch (const NumericError& e) {
        blew_up = true;
        result.note = e.what();
      }

      if (blew_up) {
        result.diverged = true;
        if (has_saved_state) {
          result.params = load_checkpoint(result.state_dir + "/model", cfg);
          result.note = "diverged at step " + std::to_string(global_step) +
                        "; restored epoch " +
                        std::to_string(last_saved_epoch) + " state";
        } else {
          result.note = "diverged at step " + std::to_string(global_step) +
                        "; no completed epoch to restore";
        }
        result.steps = global_step;
        if (metrics) metrics->flush();
        return result;
      }

      opt->step(tc.base_lr * lr_at(tc, global_step, total_steps), tc.momentum,
                tc.weight_decay, tc.clip_norm);
      ++global_step;
      epoch_loss += loss_val;
      epoch_top1 += acc;
      if (metrics && (global_step % tc.log_every == 0))
        metrics->row({std::to_string(global_step), "train",
                      io::format_double(loss_val), io::format_double(acc)});
    }
    epoch_loss /= static_cast<double>(steps_per_epoch);
    epoch_top1 /= static_cast<double>(steps_per_epoch);

    const EvalStat val = eval_on(cfg, params, val_set, tc.batch);
    EpochStat stat;
    stat.epoch = epoch;
    stat.train_loss = epoch_loss;
    stat.val_loss = val.loss;
    stat.val_top1 = val.top1;
    result.history.push_back(stat);
    result.final_train_loss = epoch_loss;
    result.final_val_top1 = val.top1;

    if (metrics) {
      metrics->row({std::to_string(global_step), "train_epoch",
                    io::format_double(epoch_loss),
                    io::format_double(epoch_top1)});
      metrics->row({std::to_string(global_step), "val",
                    io::format_double(val.loss),
                    io::format_double(val.top1)});
    }
    if (!tc.out_dir.empty()) {
      save_state(result.state_dir, cfg, task, tc, params, *opt, epoch,
                 global_step);
      has_saved_state = true;
      last_saved_epoch = epoch;
    }
    if (epoch == tc.stop_after_epoch && epoch + 1 < tc.epochs) {
      result.note = "stopped after epoch " + std::to_string(epoch) +
                    " by stop_after_epoch";
      break;
    }
  }

  result.params = params;
  result.steps = global_step;
  if (!tc.out_dir.empty())
    save_checkpoint(tc.out_dir + "/model", cfg, params, tc.seed, global_step);
  if (metrics) metrics->flush();
  return result;
}

}  // namespace

void SyntheticTask::validate() const {
  if (frames < 2) throw ConfigError("task needs at least 2 frames");
  if (channels < 1) throw ConfigError("task needs at least 1 channel");
  if (image_size < 10)
    throw ConfigError("task image_size must be at least 10, got " +
                      std::to_string(image_size));
  if (num_classes < 2) throw ConfigError("task needs at least 2 classes");
  const auto s = strides();
  if (static_cast<std::int64_t>(s.size()) < num_classes)
    throw ConfigError("only " + std::to_string(s.size()) +
                      " strides are coprime to a ring of " +
                      std::to_string(frames) + " cells; cannot seat " +
                      std::to_string(num_classes) + " classes");
  if (sprite <= 0.0) throw ConfigError("task sprite brightness must be > 0");
  if (noise < 0.0 || texture < 0.0)
    throw ConfigError("task noise amplitudes must be >= 0");
  if (cue < 0.0) throw ConfigError("task cue amplitude must be >= 0");
  const auto ring = cells();
  for (std::size_t i = 0; i < ring.size(); ++i)
    for (std::size_t j = i + 1; j < ring.size(); ++j)
      if (ring[i] == ring[j])
        throw ConfigError(
            "ring cells collide; enlarge image_size or reduce frames");
}

std::vector<std::int64_t> SyntheticTask::strides() const {
  std::vector<std::int64_t> out;
  for (std::int64_t s = 1; s < frames; ++s)
    if (std::gcd(s, frames) == 1) out.push_back(s);
  if (static_cast<std::int64_t>(out.size()) > num_classes)
    out.resize(static_cast<std::size_t>(num_classes));
  return out;
}

std::vector<std::pair<std::int64_t, std::int64_t>> SyntheticTask::cells()
    const {
  const double cy = static_cast<double>(image_size) / 2.0;
  const double cx = cy;
  const double radius = cy - 3.0;
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  out.reserve(static_cast<std::size_t>(frames));
  for (std::int64_t i = 0; i < frames; ++i) {
    const double a = 2.0 * kPi * static_cast<double>(i) /
                     static_cast<double>(frames);
    out.emplace_back(std::llround(cy + radius * std::sin(a)),
                     std::llround(cx + radius * std::cos(a)));
  }
  return out;
}

std::string SyntheticTask::echo() const {
  std::ostringstream o;
  o << "task.num_classes=" << num_classes << "\n"
    << "task.frames=" << frames << "\n"
    << "task.image_size=" << image_size << "\n"
    << "task.channels=" << channels << "\n"
    << "task.seed=" << seed << "\n"
    << "task.texture=" << io::format_double(texture) << "\n"
    << "task.noise=" << io::format_double(noise) << "\n"
    << "task.sprite=" << io::format_double(sprite) << "\n"
    << "task.cue=" << io::format_double(cue) << "\n";
  return o.str();
}

std::uint64_t SyntheticTask::fingerprint() const { return io::fnv1a64(echo()); }

ClipBatch generate(const SyntheticTask& task, Split split,
                   const std::vector<std::int64_t>& indices) {
  task.validate();
  const std::int64_t b = static_cast<std::int64_t>(indices.size());
  const std::int64_t t = task.frames, hw = task.image_size, c = task.channels;
  const auto ring = task.cells();
  const auto strides = task.strides();
  const std::uint64_t split_id = split == Split::Train ? 0 : 1;

  ClipBatch out;
  out.b = b;
  out.t = t;
  out.h = hw;
  out.w = hw;
  out.pixels = Tensor::zeros({b * t * hw * hw, c});
  out.labels.resize(static_cast<std::size_t>(b));
  auto& px = out.pixels.mutable_values();

  std::vector<double> tex(static_cast<std::size_t>(hw * hw));
  for (std::int64_t bi = 0; bi < b; ++bi) {
    const std::int64_t index = indices[static_cast<std::size_t>(bi)];
    if (index < 0) throw ConfigError("clip index must be >= 0");
    const std::int64_t label = index % task.num_classes;
    out.labels[static_cast<std::size_t>(bi)] = label;
    std::mt19937_64 rng(mix(mix(task.seed, split_id),
                            static_cast<std::uint64_t>(index)));
    const std::int64_t phase =
        static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(t));
    std::uniform_real_distribution<double> utex(-task.texture, task.texture);
    std::uniform_real_distribution<double> unoise(-task.noise, task.noise);
    for (auto& v : tex) v = utex(rng);
    for (std::int64_t ti = 0; ti < t; ++ti) {
      const std::int64_t base = ((bi * t + ti) * hw) * hw;
      for (std::int64_t y = 0; y < hw; ++y)
        for (std::int64_t x = 0; x < hw; ++x) {
          const double v = tex[static_cast<std::size_t>(y * hw + x)] +
                           (task.noise > 0.0 ? unoise(rng) : 0.0);
          for (std::int64_t ch = 0; ch < c; ++ch)
            px[static_cast<std::size_t>(((base + y * hw + x)) * c + ch)] = v;
        }
      const auto [cy, cx] =
          ring[static_cast<std::size_t>((phase + strides[label] * ti) % t)];
      for (std::int64_t dy = 0; dy < 2; ++dy)
        for (std::int64_t dx = 0; dx < 2; ++dx) {
          const std::int64_t y = cy + dy, x = cx + dx;
          if (y < 0 || y >= hw || x < 0 || x >= hw) continue;
          for (std::int64_t ch = 0; ch < c; ++ch)
            px[static_cast<std::size_t>((base + y * hw + x) * c + ch)] +=
                task.sprite;
        }
      if (task.cue > 0.0) {
        const double cue = (label % 2 == 0) ? task.cue : -task.cue;
        for (std::int64_t dy = 0; dy < 2; ++dy)
          for (std::int64_t dx = 0; dx < 2; ++dx)
            for (std::int64_t ch = 0; ch < c; ++ch)
              px[static_cast<std::size_t>(
                  (base + (1 + dy) * hw + (1 + dx)) * c + ch)] += cue;
      }
    }
  }
  return out;
}

ClipBatch generate(const SyntheticTask& task, Split split, std::int64_t start,
                   std::int64_t count) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(count));
  std::iota(idx.begin(), idx.end(), start);
  return generate(task, split, idx);
}

ClipBatch shuffle_frames(const ClipBatch& batch, std::uint64_t seed) {
  ClipBatch out;
  out.b = batch.b;
  out.t = batch.t;
  out.h = batch.h;
  out.w = batch.w;
  out.labels = batch.labels;
  out.pixels = Tensor::zeros(batch.pixels.shape());
  const auto& src = batch.pixels.values();
  auto& dst = out.pixels.mutable_values();
  const std::int64_t c = batch.pixels.cols();
  const std::int64_t frame_rows = batch.h * batch.w;
  std::vector<std::int64_t> perm(static_cast<std::size_t>(batch.t));
  for (std::int64_t bi = 0; bi < batch.b; ++bi) {
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(mix(seed, static_cast<std::uint64_t>(bi)));
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::int64_t ti = 0; ti < batch.t; ++ti) {
      const std::int64_t src_row = (bi * batch.t + perm[ti]) * frame_rows;
      const std::int64_t dst_row = (bi * batch.t + ti) * frame_rows;
      std::copy(src.begin() + src_row * c,
                src.begin() + (src_row + frame_rows) * c,
                dst.begin() + dst_row * c);
    }
  }
  return out;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("training needs at least 1 epoch");
  if (batch < 1) throw ConfigError("batch size must be >= 1");
  if (train_clips < batch || train_clips % batch != 0)
    throw ConfigError("train_clips must be a positive multiple of batch");
  if (val_clips < 1) throw ConfigError("val_clips must be >= 1");
  if (base_lr <= 0.0) throw ConfigError("base_lr must be > 0");
  if (momentum < 0.0 || momentum >= 1.0)
    throw ConfigError("momentum must be in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (clip_norm < 0.0) throw ConfigError("clip_norm must be >= 0");
  if (warmup_epochs < 0 || warmup_epochs > epochs)
    throw ConfigError("warmup_epochs must be in [0, epochs]");
  if (log_every < 1) throw ConfigError("log_every must be >= 1");
  if (stop_after_epoch < -1 || stop_after_epoch >= epochs)
    throw ConfigError("stop_after_epoch must be -1 or in [0, epochs)");
  if (stop_after_epoch >= 0 && out_dir.empty())
    throw ConfigError("stop_after_epoch needs out_dir to save the state");
}

std::string TrainConfig::echo() const {
  return trajectory_echo(*this) + "out_dir=" + out_dir +
         "\nlog_every=" + std::to_string(log_every) +
         "\nstop_after_epoch=" + std::to_string(stop_after_epoch) + "\n";
}

double lr_at(const TrainConfig& tc, std::int64_t step,
             std::int64_t total_steps) {
  const std::int64_t warm =
      total_steps * tc.warmup_epochs / std::max(1, tc.epochs);
  if (step < warm)
    return static_cast<double>(step + 1) / static_cast<double>(warm);
  if (total_steps <= warm) return 1.0;
  const double progress = static_cast<double>(step - warm) /
                          static_cast<double>(total_steps - warm);
  return 0.5 * (1.0 + std::cos(kPi * progress));
}

TrainResult train(const ModelConfig& cfg, const SyntheticTask& task,
                  const TrainConfig& tc) {
  cfg.validate();
  task.validate();
  tc.validate();
  check_geometry(cfg, task);
  std::mt19937_64 rng(tc.seed);
  ModelParams params = ModelParams::init(cfg, rng);
  auto opt = std::make_unique<Optimizer>(params);
  return run_loop(cfg, task, tc, std::move(params), std::move(opt), 0);
}

TrainResult resume(const ModelConfig& cfg, const SyntheticTask& task,
                   const TrainConfig& tc, const std::string& state_dir) {
  cfg.validate();
  task.validate();
  tc.validate();
  check_geometry(cfg, task);
  auto kv = read_state_file(state_dir);
  if (kv["config"] != std::to_string(cfg.fingerprint()))
    throw ConfigError("state was written for a different model config");
  if (kv["task"] != std::to_string(task.fingerprint()))
    throw ConfigError("state was written for a different task");
  if (kv["trajectory"] != std::to_string(io::fnv1a64(trajectory_echo(tc))))
    throw ConfigError("state was written for a different training schedule");
  const int done_epoch = std::stoi(kv["epoch"]);

  ModelParams params = load_checkpoint(state_dir + "/model", cfg);
  auto opt = std::make_unique<Optimizer>(params);
  for (std::size_t i = 0; i < opt->params.size(); ++i) {
    Tensor loaded = io::load_tensor(state_dir + "/momentum/" +
                                    opt->params[i].first + ".t64");
    if (loaded.shape() != opt->momentum[i].shape())
      throw IoError("momentum shape mismatch for " + opt->params[i].first);
    opt->momentum[i].mutable_values() = loaded.values();
  }

  if (done_epoch + 1 >= tc.epochs) {
    TrainResult result;
    result.params = params;
    result.steps = std::stoll(kv["step"]);
    result.note = "nothing to resume; state already covers epoch " +
                  kv["epoch"];
    return result;
  }
  return run_loop(cfg, task, tc, std::move(params), std::move(opt),
                  done_epoch + 1);
}

double evaluate_top1(const ModelConfig& cfg, const ModelParams& params,
                     const ClipBatch& batch, std::int64_t batch_size) {
  return eval_on(cfg, params, batch, batch_size).top1;
}

double overfit_one_batch(const ModelConfig& cfg, const SyntheticTask& task,
                         const TrainConfig& tc, int steps, double target) {
  cfg.validate();
  task.validate();
  check_geometry(cfg, task);
  std::mt19937_64 rng(tc.seed);
  ModelParams params = ModelParams::init(cfg, rng);
  Optimizer opt(params);
  ClipBatch clip = generate(task, Split::Train, 0, tc.batch);
  double loss_val = std::numeric_limits<double>::infinity();
  for (int s = 0; s < steps; ++s) {
    opt.zero_grads();
    GradTape tape;
    Tensor logits = forward(clip, cfg, params);
    Tensor loss = cross_entropy_mean(logits, clip.labels);
    loss_val = loss.at(0);
    if (loss_val < target) return loss_val;
    tape.backward(loss);
    opt.step(tc.base_lr, tc.momentum, 0.0, tc.clip_norm);
  }
  return loss_val;
}

std::vector<std::string> ablation_axes() {
  return {"spatial_shift", "temporal_shift", "fixation",
          "share_ratio",   "aggregation",    "kernel",
          "pattern",       "shift_order",    "family"};
}

ModelConfig apply_delta(const ModelConfig& base, const Delta& delta) {
  ModelConfig cfg = base;
  auto on_off = [](const std::string& axis, const std::string& v) {
    if (v == "on") return true;
    if (v == "off") return false;
    throw ConfigError("axis " + axis + " takes on/off, got '" + v + "'");
  };
  for (const AxisValue& av : delta.settings) {
    if (av.axis == "spatial_shift")
      cfg.shift.xi = on_off(av.axis, av.value) ? 1 : 0;
    else if (av.axis == "temporal_shift")
      cfg.shift.tau = on_off(av.axis, av.value) ? 1 : 0;
    else if (av.axis == "fixation") {
      if (av.value == "none")
        cfg.fixation = FixationMode::None;
      else if (av.value == "separate")
        cfg.fixation = FixationMode::Separate;
      else if (av.value == "coop_qk") {
        cfg.fixation = FixationMode::Cooperative;
        cfg.coop_targets = CoopTargets::QK;
      } else if (av.value == "coop_qkv") {
        cfg.fixation = FixationMode::Cooperative;
        cfg.coop_targets = CoopTargets::QKV;
      } else
        throw ConfigError("axis fixation takes none/separate/coop_qk/"
                          "coop_qkv, got '" +
                          av.value + "'");
    } else if (av.axis == "share_ratio")
      cfg.share_ratio = on_off(av.axis, av.value);
    else if (av.axis == "aggregation")
      cfg.aggregation = aggregation_from_name(av.value);
    else if (av.axis == "kernel")
      cfg.kernel = kernel_from_name(av.value).tag;
    else if (av.axis == "pattern")
      cfg.pattern = pattern_from_name(av.value);
    else if (av.axis == "shift_order")
      cfg.shift.order = shift_order_from_name(av.value);
    else if (av.axis == "family")
      cfg.family = family_from_name(av.value);
    else {
      std::string axes;
      for (const auto& a : ablation_axes())
        axes += (axes.empty() ? "" : ", ") + a;
      throw ConfigError("unknown ablation axis '" + av.axis +
                        "'; valid axes: " + axes);
    }
  }
  cfg.validate();
  return cfg;
}

std::vector<AblationRow> ablate(const ModelConfig& base,
                                const std::vector<Delta>& grid,
                                const SyntheticTask& task,
                                const TrainConfig& tc,
                                const std::vector<std::uint64_t>& seeds,
                                const std::string& csv_path) {
  if (grid.empty()) throw ConfigError("ablation grid is empty");
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  std::vector<AblationRow> rows;
  std::unique_ptr<io::CsvWriter> csv;
  if (!csv_path.empty()) {
    csv = std::make_unique<io::CsvWriter>(csv_path,
                                          "delta_id,settings,seed,final_top1");
    csv->comment("lvt-ablation-csv-v1");
  }
  for (const Delta& delta : grid) {
    ModelConfig cfg = apply_delta(base, delta);
    std::string settings;
    for (const AxisValue& av : delta.settings) {
      if (!settings.empty()) settings += ";";
      settings += av.axis + "=" + av.value;
    }
    for (std::uint64_t seed : seeds) {
      TrainConfig run_tc = tc;
      run_tc.seed = seed;
      run_tc.out_dir.clear();
      TrainResult r = train(cfg, task, run_tc);
      AblationRow row{delta.id, settings, seed, r.final_val_top1};
      rows.push_back(row);
      if (csv)
        csv->row({row.delta_id, row.settings, std::to_string(row.seed),
                  io::format_double(row.final_top1)});
    }
  }
  if (csv) csv->flush();
  return rows;
}

}  // namespace lvt::train
