#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "amgru/amgru.hpp"

int main(int argc, char** argv) {
  CLI::App app{"American option pricing and hedging with deep recurrent networks"};
  app.require_subcommand(1);
  app.set_version_flag("--version", AMGRU_VERSION);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::optional<std::string> out;
  bool quiet = false;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON run configuration")->required();
    sub->add_option("--seed", seed, "Base seed; overrides every seed in the config");
    sub->add_option("--threads", threads, "Worker thread cap")->check(CLI::PositiveNumber);
    sub->add_option("--out", out, "Output directory");
    sub->add_flag("--quiet", quiet, "Suppress progress output");
  };

  std::string baseline_kind;
  for (const char* name : {"simulate", "train", "evaluate", "hedge", "bench"})
    add_common(app.add_subcommand(name));
  CLI::App* baseline = app.add_subcommand("baseline", "Reference solvers");
  baseline->add_option("kind", baseline_kind, "fd, ls or binomial")
      ->required()
      ->check(CLI::IsMember({"fd", "ls", "binomial"}));
  add_common(baseline);
  app.get_subcommand("simulate")->description("Simulate and store a PathSet");
  app.get_subcommand("train")->description("Train the price and delta networks");
  app.get_subcommand("evaluate")->description("Evaluate trained networks on fresh paths");
  app.get_subcommand("hedge")->description("Delta-hedging backtest");
  app.get_subcommand("bench")->description("Time and memory sweep over step counts");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(amgru::ExitCode::Validation);
  }

  amgru::CommandOptions opt;
  opt.subcommand = app.get_subcommands().front()->get_name();
  opt.baseline_kind = baseline_kind;
  opt.quiet = quiet;
  try {
    amgru::RunConfig cfg = amgru::load_config(config_path);
    if (seed) amgru::override_seed(cfg, *seed);
    if (threads) cfg.threads = *threads;
    if (out) cfg.outputs = *out;
    const amgru::json rep = amgru::run_command(opt, cfg);
    std::cout << rep.at("result").dump(2) << '\n';
    return static_cast<int>(amgru::ExitCode::Ok);
  } catch (const std::exception& e) {
    std::cerr << amgru::error_json(e).dump() << '\n';
    return static_cast<int>(amgru::exit_code_for(e));
  }
}
