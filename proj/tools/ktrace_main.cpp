#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "ktrace/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"ktrace - knowledge tracing engine: hierarchical state-space model, "
               "psychological baselines, and evaluation suite over interaction logs"};
  app.require_subcommand(1);

  struct Args {
    std::string config;
    std::vector<std::string> overrides;
    std::string seed;
    std::string out;
    std::string threads;
  };

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"simulate", "Draw a synthetic cohort from the generative model"},
      {"fit", "Fit the state-space model or a baseline on an interaction log"},
      {"predict", "Multi-step predictions on the held-out split"},
      {"continual", "One-interaction-at-a-time updates with rolling prediction"},
      {"eval-graph", "Graph alignment metrics and causal support"},
      {"eval-traits", "Interpretability metrics and behavioral regressions"},
      {"report", "Merge run reports into comparison tables"},
  };

  std::map<std::string, Args> args;
  for (const auto& [name, desc] : commands) {
    CLI::App* sub = app.add_subcommand(name, desc);
    Args& a = args[name];
    sub->add_option("--config", a.config, "JSON config file")->required();
    sub->add_option("--set", a.overrides,
                    "Override a config key via a dotted path, e.g. fit.max_epochs=50");
    sub->add_option("--seed", a.seed, "Override the top-level seed");
    sub->add_option("--out", a.out, "Override the output directory");
    sub->add_option("--threads", a.threads, "Worker pool size");
  }

  CLI11_PARSE(app, argc, argv);

  for (const auto& [name, _] : commands) {
    if (!app.got_subcommand(name)) continue;
    Args& a = args[name];
    if (!a.seed.empty()) a.overrides.push_back("seed=" + a.seed);
    if (!a.out.empty()) a.overrides.push_back("out=\"" + a.out + "\"");
    if (!a.threads.empty()) a.overrides.push_back("threads=" + a.threads);
    return ktrace::run_cli_command(name, a.config, a.overrides, std::cout, std::cerr);
  }
  return 1;
}
