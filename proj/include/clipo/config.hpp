#pragma once

#include <string>
#include <vector>

#include "clipo/trainer.hpp"

namespace clipo {

// Experiment files are INI-style with sections [method], [contrastive],
// [sampling], [tasks], [eval] and [run]; keys carry the TrainConfig field
// names. Method-dependent defaults (clip range, beta, aggregation, dynamic
// sampling) follow the resolved method unless set explicitly, and lambda
// defaults to 1 for softnn.
//
// Overrides are "section.key=value" and win over the file. All problems
// are collected and thrown as one ConfigError, one per line.
TrainConfig parse_config(const std::string& text, const std::vector<std::string>& overrides = {});
TrainConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {});

// Every key with its resolved value; parse_config(render_config(c)) == c.
std::string render_config(const TrainConfig& cfg);

// "section.key" for every accepted key, in echo order.
std::vector<std::string> config_keys();

}  // namespace clipo
