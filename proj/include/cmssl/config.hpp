#pragma once

// Experiment configuration as one JSON document.
//
// Layering: schedule defaults (full-scale or desk) with the named method applied,
// then the config file, then command-line overrides. Keys that do not exist
// in the defaults are rejected at every layer.

#include <string>
#include <vector>

#include <json.hpp>

#include "cmssl/data.hpp"
#include "cmssl/trainer.hpp"

namespace cmssl {

struct ExperimentConfig {
  std::string run_name = "run";
  std::string out_dir = "runs";
  std::string schedule = "full-scale";  // "full-scale" or "desk"
  std::string method = "full";
  /// Prepared manifest directory; empty builds the split from the sources.
  std::string manifest_dir;
  DatasetSpec dataset;
  TrainConfig train;
};

nlohmann::json to_json(const ExperimentConfig& c);
/// Strict: every key must be known and every value of the right type.
ExperimentConfig experiment_from_json(const nlohmann::json& j);

/// Defaults for a schedule/method/dataset preset triple.
ExperimentConfig default_experiment(const std::string& schedule, const std::string& method,
                                    const std::string& dataset_preset);

/// Throws ConfigError naming the first key of `patch` absent from `base`.
void check_known_keys(const nlohmann::json& base, const nlohmann::json& patch,
                      const std::string& prefix = "");

/// "a.b.c=value" -> {"a": {"b": {"c": value}}}; value parsed as JSON when
/// possible, otherwise taken as a string.
nlohmann::json parse_override(const std::string& assignment);

/// defaults < file < overrides, all merged as JSON patches and re-parsed.
ExperimentConfig merge_config(const nlohmann::json& defaults, const std::vector<nlohmann::json>& layers);

}  // namespace cmssl
