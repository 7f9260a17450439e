#include "lvt/config.hpp"

#include <algorithm>
#include <sstream>
#include <utility>

#include "lvt/error.hpp"
#include "lvt/tensor_io.hpp"

namespace lvt::cfg {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::istringstream in(value);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::int64_t parse_i64(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing junk");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key " + key + " needs an integer, got '" + value + "'");
  }
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(value, &pos);
    if (pos != value.size() || value.find('-') != std::string::npos)
      throw std::invalid_argument("trailing junk");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key " + key + " needs a non-negative integer, got '" +
                      value + "'");
  }
}

double parse_f64(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing junk");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key " + key + " needs a number, got '" + value + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "1" || value == "true" || value == "on") return true;
  if (value == "0" || value == "false" || value == "off") return false;
  throw ConfigError("key " + key + " needs a boolean (0/1/on/off/true/false), "
                    "got '" + value + "'");
}

int parse_int(const std::string& key, const std::string& value) {
  return static_cast<int>(parse_i64(key, value));
}

void set_model_key(ModelConfig& m, const std::string& key,
                   const std::string& sub, const std::string& value) {
  if (sub == "variant") m.variant = variant_from_name(value);
  else if (sub == "frames") m.frames = parse_i64(key, value);
  else if (sub == "image_size") m.image_size = parse_i64(key, value);
  else if (sub == "patch") m.patch = parse_i64(key, value);
  else if (sub == "pixel_channels") m.pixel_channels = parse_i64(key, value);
  else if (sub == "embed_dim") m.embed_dim = parse_i64(key, value);
  else if (sub == "layers") m.layers = parse_i64(key, value);
  else if (sub == "heads") m.heads = parse_i64(key, value);
  else if (sub == "num_classes") m.num_classes = parse_i64(key, value);
  else if (sub == "pattern") m.pattern = pattern_from_name(value);
  else if (sub == "window_radius") m.window_radius = parse_i64(key, value);
  else if (sub == "family") m.family = family_from_name(value);
  else if (sub == "kernel") m.kernel = kernel_from_name(value).tag;
  else if (sub == "epsilon") m.epsilon = parse_f64(key, value);
  else if (sub == "guard") m.guard = parse_bool(key, value);
  else if (sub == "scale_qk") m.scale_qk = parse_bool(key, value);
  else if (sub == "fixation") m.fixation = fixation_mode_from_name(value);
  else if (sub == "aggregation") m.aggregation = aggregation_from_name(value);
  else if (sub == "coop_targets") {
    if (value == "qk") m.coop_targets = CoopTargets::QK;
    else if (value == "qkv") m.coop_targets = CoopTargets::QKV;
    else throw ConfigError("key " + key + " takes qk or qkv, got '" + value +
                           "'");
  } else if (sub == "share_ratio") m.share_ratio = parse_bool(key, value);
  else if (sub == "shift.tau") m.shift.tau = parse_i64(key, value);
  else if (sub == "shift.xi") m.shift.xi = parse_i64(key, value);
  else if (sub == "shift.alpha") m.shift.alpha = parse_f64(key, value);
  else if (sub == "shift.spatial_mode")
    m.shift.spatial_mode = spatial_mode_from_name(value);
  else if (sub == "shift.boundary")
    m.shift.boundary = boundary_from_name(value);
  else if (sub == "shift.order") m.shift.order = shift_order_from_name(value);
  else throw ConfigError("unknown config key " + key);
}

void set_task_key(train::SyntheticTask& t, const std::string& key,
                  const std::string& sub, const std::string& value) {
  if (sub == "num_classes") t.num_classes = parse_i64(key, value);
  else if (sub == "frames") t.frames = parse_i64(key, value);
  else if (sub == "image_size") t.image_size = parse_i64(key, value);
  else if (sub == "channels") t.channels = parse_i64(key, value);
  else if (sub == "seed") t.seed = parse_u64(key, value);
  else if (sub == "texture") t.texture = parse_f64(key, value);
  else if (sub == "noise") t.noise = parse_f64(key, value);
  else if (sub == "sprite") t.sprite = parse_f64(key, value);
  else if (sub == "cue") t.cue = parse_f64(key, value);
  else throw ConfigError("unknown config key " + key);
}

void set_train_key(train::TrainConfig& tc, const std::string& key,
                   const std::string& sub, const std::string& value) {
  if (sub == "epochs") tc.epochs = parse_int(key, value);
  else if (sub == "train_clips") tc.train_clips = parse_i64(key, value);
  else if (sub == "val_clips") tc.val_clips = parse_i64(key, value);
  else if (sub == "batch") tc.batch = parse_i64(key, value);
  else if (sub == "base_lr") tc.base_lr = parse_f64(key, value);
  else if (sub == "momentum") tc.momentum = parse_f64(key, value);
  else if (sub == "weight_decay") tc.weight_decay = parse_f64(key, value);
  else if (sub == "clip_norm") tc.clip_norm = parse_f64(key, value);
  else if (sub == "warmup_epochs") tc.warmup_epochs = parse_int(key, value);
  else if (sub == "seed") tc.seed = parse_u64(key, value);
  else if (sub == "out_dir") tc.out_dir = value;
  else if (sub == "log_every") tc.log_every = parse_int(key, value);
  else if (sub == "stop_after_epoch")
    tc.stop_after_epoch = parse_int(key, value);
  else throw ConfigError("unknown config key " + key);
}

void set_bench_key(diag::ScalingConfig& b, const std::string& key,
                   const std::string& sub, const std::string& value) {
  if (sub == "n_values") {
    b.n_values.clear();
    for (const auto& item : split_list(value))
      b.n_values.push_back(parse_i64(key, item));
  } else if (sub == "families") {
    b.families.clear();
    for (const auto& item : split_list(value))
      b.families.push_back(family_from_name(item));
  } else if (sub == "d") b.d = parse_i64(key, value);
  else if (sub == "repeats") b.repeats = parse_int(key, value);
  else if (sub == "warmup") b.warmup = parse_int(key, value);
  else if (sub == "seed") b.seed = parse_u64(key, value);
  else if (sub == "kernel") {
    const KernelFn named = kernel_from_name(value);
    b.kernel.tag = named.tag;
  } else if (sub == "kernel.epsilon") b.kernel.epsilon = parse_f64(key, value);
  else if (sub == "kernel.guard") b.kernel.guard = parse_bool(key, value);
  else if (sub == "scale_qk") b.scale_qk = parse_bool(key, value);
  else if (sub == "pin_thread") b.pin_thread = parse_bool(key, value);
  else if (sub == "with_entropy") b.with_entropy = parse_bool(key, value);
  else if (sub == "flops_only") b.flops_only = parse_bool(key, value);
  else if (sub == "parallel") b.parallel = parse_bool(key, value);
  else throw ConfigError("unknown config key " + key);
}

const char* kSections = "[model], [task], [train], [bench]";

}  // namespace

RunConfig::RunConfig() {
  model = ModelConfig::preset(Variant::Toy);
  // The preset keeps its pinned geometry; the run default sizes it to the
  // default task so an empty config file trains as-is.
  model.frames = task.frames;
  model.image_size = task.image_size;
}

void RunConfig::validate() const {
  model.validate();
  task.validate();
  trainer.validate();
  bench.validate();
}

std::string RunConfig::echo() const {
  std::ostringstream o;
  o << "schema=" << kSchema << "\n";
  o << "[model]\n" << model.echo();
  o << "[task]\n";
  {
    // task.echo() lines carry a task. prefix for metric logs; the section
    // already scopes them here.
    std::istringstream lines(task.echo());
    std::string line;
    while (std::getline(lines, line))
      o << (line.rfind("task.", 0) == 0 ? line.substr(5) : line) << "\n";
  }
  o << "[train]\n" << trainer.echo();
  o << "[bench]\n";
  o << "n_values=";
  for (std::size_t i = 0; i < bench.n_values.size(); ++i)
    o << (i ? "," : "") << bench.n_values[i];
  o << "\nfamilies=";
  for (std::size_t i = 0; i < bench.families.size(); ++i)
    o << (i ? "," : "") << family_name(bench.families[i]);
  o << "\nd=" << bench.d << "\n"
    << "repeats=" << bench.repeats << "\n"
    << "warmup=" << bench.warmup << "\n"
    << "seed=" << bench.seed << "\n"
    << "kernel=" << kernel_name(bench.kernel.tag) << "\n"
    << "kernel.epsilon=" << io::format_double(bench.kernel.epsilon) << "\n"
    << "kernel.guard=" << (bench.kernel.guard ? 1 : 0) << "\n"
    << "scale_qk=" << (bench.scale_qk ? 1 : 0) << "\n"
    << "pin_thread=" << (bench.pin_thread ? 1 : 0) << "\n"
    << "with_entropy=" << (bench.with_entropy ? 1 : 0) << "\n"
    << "flops_only=" << (bench.flops_only ? 1 : 0) << "\n"
    << "parallel=" << (bench.parallel ? 1 : 0) << "\n";
  return o.str();
}

void set_key(RunConfig& rc, const std::string& key, const std::string& value) {
  const auto dot = key.find('.');
  if (dot == std::string::npos)
    throw ConfigError("config key '" + key +
                      "' is missing its section; use section.key with one of " +
                      kSections);
  const std::string section = key.substr(0, dot);
  const std::string sub = key.substr(dot + 1);
  if (section == "model") {
    // A variant override re-bases the whole model section on the preset.
    if (sub == "variant")
      rc.model = ModelConfig::preset(variant_from_name(value));
    else
      set_model_key(rc.model, key, sub, value);
  } else if (section == "task") {
    set_task_key(rc.task, key, sub, value);
  } else if (section == "train") {
    set_train_key(rc.trainer, key, sub, value);
  } else if (section == "bench") {
    set_bench_key(rc.bench, key, sub, value);
  } else {
    throw ConfigError("unknown config section '" + section + "' in key " +
                      key + "; sections are " + kSections);
  }
}

void apply_overrides(RunConfig& rc, const std::vector<std::string>& pairs) {
  for (const auto& pair : pairs) {
    const auto eq = pair.find('=');
    if (eq == std::string::npos)
      throw ConfigError("override '" + pair + "' is not of the form key=value");
    set_key(rc, trim(pair.substr(0, eq)), trim(pair.substr(eq + 1)));
  }
}

RunConfig parse_config(const std::string& text) {
  RunConfig rc;
  std::istringstream in(text);
  std::string raw;
  std::string section;
  bool saw_schema = false;
  std::vector<std::string> seen;
  int line_no = 0;
  // Deferred so a variant line re-bases [model] before any sibling keys,
  // independent of where it sits in the section.
  std::vector<std::pair<std::string, std::string>> model_keys;

  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    const std::string at = " at line " + std::to_string(line_no);

    if (!saw_schema) {
      if (line != std::string("schema=") + kSchema)
        throw ConfigError("config must start with schema=" +
                          std::string(kSchema) + ", found '" + line + "'" + at);
      saw_schema = true;
      continue;
    }
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("malformed section header '" + line + "'" + at);
      section = line.substr(1, line.size() - 2);
      if (section != "model" && section != "task" && section != "train" &&
          section != "bench")
        throw ConfigError("unknown config section [" + section +
                          "]; sections are " + std::string(kSections) + at);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("expected key=value, found '" + line + "'" + at);
    if (section.empty())
      throw ConfigError("key '" + line.substr(0, eq) +
                        "' appears before any section" + at);
    const std::string sub = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const std::string full = section + "." + sub;
    if (std::find(seen.begin(), seen.end(), full) != seen.end())
      throw ConfigError("duplicate config key " + full + at);
    seen.push_back(full);
    if (section == "model")
      model_keys.emplace_back(sub, value);
    else
      set_key(rc, full, value);
  }
  if (!saw_schema)
    throw ConfigError("config is empty; it must start with schema=" +
                      std::string(kSchema));

  for (const auto& [sub, value] : model_keys)
    if (sub == "variant")
      rc.model = ModelConfig::preset(variant_from_name(value));
  for (const auto& [sub, value] : model_keys)
    if (sub != "variant") set_model_key(rc.model, "model." + sub, sub, value);
  return rc;
}

RunConfig load_config(const std::string& path) {
  return parse_config(io::read_text_file(path));
}

}  // namespace lvt::cfg
