// silicosis <command> --config <path> [--out <dir>] [--seed <n>]

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "silicosis/cli/runner.hpp"

int main(int argc, char** argv) {
  using namespace silicosis::cli;
  CLI::App app{"Truncated quartz-macrophage kinetics: simulation and verification runs"};
  app.require_subcommand(1);

  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  for (Command c : {Command::simulate, Command::converge, Command::equilibrium, Command::verify,
                    Command::semigroup}) {
    auto* sub = app.add_subcommand(to_string(c));
    sub->add_option("--config", config, "JSON experiment description")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out, std::string("output directory (default: $") + kOutputEnv +
                                      ", then output.dir, then ./out)");
    sub->add_option("--seed", seed, "reserved; recorded in the summary");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  Command command = Command::simulate;
  for (auto* sub : app.get_subcommands()) command = *parse_command(sub->get_name());
  const bool seeded = app.get_subcommands().front()->count("--seed") > 0;
  const std::optional<std::string> out_dir = out.empty() ? std::nullopt : std::optional<std::string>(out);
  return run_command(command, config, out_dir, seeded ? std::optional<std::uint64_t>(seed) : std::nullopt);
}
