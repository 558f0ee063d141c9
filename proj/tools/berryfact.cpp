// berryfact <bo-scan|berry|full|mass-sweep> --config FILE [--out DIR]
//           [--threads N] [--preset desk|default|fine]

#include "berryfact/experiments.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>

#include <cstdio>
#include <exception>
#include <iostream>

int main(int argc, char **argv) {
  using namespace berryfact;
  CLI::App app{"Born-Oppenheimer and exact-factorization geometric phases of a 2D three-ion model"};
  app.set_version_flag("--version", std::string(kVersion));
  std::string command, config_path, out_dir, preset;
  unsigned threads = 0;
  bool threads_given = false;
  app.add_option("command", command, "bo-scan, berry, full or mass-sweep")
      ->required()
      ->check(CLI::IsMember({"bo-scan", "berry", "full", "mass-sweep"}));
  app.add_option("--config", config_path, "configuration file")->required();
  app.add_option("--out", out_dir, "output directory (overrides run.output)");
  app.add_option("--threads", threads, "worker threads, 0 = all cores")
      ->each([&](const std::string &) { threads_given = true; });
  app.add_option("--preset", preset, "grid preset applied after the config file")
      ->check(CLI::IsMember(preset_names()));
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  RunConfig cfg;
  try {
    cfg = load_config(config_path);
    if (!preset.empty()) apply_preset(cfg, preset);
    if (!out_dir.empty()) cfg.output = out_dir;
    if (threads_given) cfg.threads = threads;
    cfg.validate();
  } catch (const ConfigError &e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }

  try {
    const auto res = run_command(command, cfg, cfg.output);
    std::cout << res.headline.dump(2) << "\n";
    std::cerr << fmt::format("wrote {} files to {}\n", res.files.size() + 1, cfg.output);
  } catch (const ConfigError &e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ConvergenceError &e) {
    std::cerr << "solver did not converge: " << e.what() << "\n";
    return 3;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
