#pragma once

#include <string>
#include <vector>

#include "lvt/diagnostics.hpp"
#include "lvt/model.hpp"
#include "lvt/trainer.hpp"

namespace lvt::cfg {

inline constexpr const char* kSchema = "lvt-config-v1";

// Everything a run needs, resolved from a config file plus overrides. The
// echo is itself a loadable config file listing every key, so any artifact
// that embeds it carries complete provenance.
struct RunConfig {
  ModelConfig model;
  train::SyntheticTask task;
  train::TrainConfig trainer;
  diag::ScalingConfig bench;

  RunConfig();  // toy model sized to the default task

  void validate() const;
  std::string echo() const;
};

// Flat sectioned key=value text. The first meaningful line must be
// schema=lvt-config-v1; sections are [model], [task], [train], [bench].
// Unknown sections, unknown keys, and duplicate keys are errors; a
// variant key re-bases [model] on that preset before the other keys.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);

// key is section-qualified ("model.shift.tau", "train.epochs"), value uses
// the file spellings. Unknown keys throw ConfigError naming the key.
void set_key(RunConfig& rc, const std::string& key, const std::string& value);

// "section.key=value" forms applied in order; the CLI override path.
void apply_overrides(RunConfig& rc, const std::vector<std::string>& pairs);

}  // namespace lvt::cfg
