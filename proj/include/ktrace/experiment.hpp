#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "ktrace/metrics.hpp"

namespace ktrace {

/// Resolved experiment configuration: JSON file plus dotted-path overrides
/// (e.g. "fit.max_epochs=50"). Unknown keys are rejected per command with the
/// offending field path.
class ExperimentConfig {
 public:
  static ExperimentConfig load(const std::string& command, const std::string& config_path,
                               const std::vector<std::string>& overrides);
  static ExperimentConfig from_json_text(const std::string& command,
                                         const std::string& json_text,
                                         const std::vector<std::string>& overrides = {});

  bool has(const std::string& dotted) const;
  double number(const std::string& dotted, double fallback) const;
  double require_number(const std::string& dotted) const;
  std::int64_t integer(const std::string& dotted, std::int64_t fallback) const;
  bool boolean(const std::string& dotted, bool fallback) const;
  std::string text(const std::string& dotted, const std::string& fallback) const;
  std::string require_text(const std::string& dotted) const;
  std::vector<double> numbers(const std::string& dotted) const;
  std::vector<std::string> texts(const std::string& dotted) const;

  const std::string& command() const { return command_; }
  std::string hash() const;
  std::string dump() const;

 private:
  std::string command_;
  std::string canonical_;
  // Flattened dotted-path -> scalar JSON text view of the config.
  std::map<std::string, std::string> scalars_;
  std::map<std::string, std::vector<std::string>> arrays_;
};

/// Per-phase wall-clock timings; kept out of the deterministic report files.
struct PhaseTimings {
  std::vector<std::pair<std::string, double>> seconds;
  std::vector<double> cumulative_update_seconds;  // continual protocol only
};

struct RunReport {
  std::string command;
  std::string config_hash;
  std::string resolved_config_json;
  MetricReport metrics;
  std::vector<std::string> artifacts;
  PhaseTimings timings;

  /// Deterministic portion (everything but the timings).
  std::string to_json() const;
  std::string timings_json() const;
};

/// Executes one subcommand end to end, writing artifacts under the config's
/// `out` directory. Returns the report; throws on invalid configs or inputs.
RunReport run_experiment(const ExperimentConfig& config, std::ostream& log);

/// CLI front door: parse overrides, run, persist report.json and
/// timings.json, map failures to nonzero exit codes.
int run_cli_command(const std::string& command, const std::string& config_path,
                    const std::vector<std::string>& overrides, std::ostream& out,
                    std::ostream& err);

}  // namespace ktrace
