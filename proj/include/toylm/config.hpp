#pragma once

#include <stdexcept>
#include <string>

#include "toylm/stages.hpp"

namespace toylm {

// Config and usage problems; the CLI maps these to exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One run, fully pinned: harness settings plus output location and precision.
struct RunConfig {
  HarnessConfig harness;
  std::string out_dir = "runs/default";

  // whole-config validation: model dims, stage dependencies, file presence
  void validate(bool check_corpus_readable = true) const;
};

RunConfig default_run_config();

// Versioned key-value file: first non-comment line is the format tag
// `toylm_config_v1`, then one `key value` pair per line, '#' comments.
// Unknown keys and malformed values are rejected with the line number.
RunConfig parse_config_text(const std::string& text);
RunConfig parse_config_file(const std::string& path);
// Every key, current values; parse(render(c)) == c.
std::string render_config(const RunConfig& cfg);

}  // namespace toylm
