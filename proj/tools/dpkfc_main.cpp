#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dpkfc/app.hpp"

int main(int argc, char** argv) {
  CLI::App cli{"dpkfc: differentially private training with synthetic KFAC preconditioning"};
  cli.require_subcommand(1);

  dpkfc::app::Request req;
  const std::vector<std::pair<std::string, std::string>> tasks = {
      {"train", "run private training (DP-SGD or DP-KFC)"},
      {"accountant", "privacy accounting: epsilon for sigma, or sigma for a target epsilon"},
      {"diagnose", "factor alignment, spectra and SLQ for a checkpoint"},
      {"probe-spectrum", "factor spectra of an untrained model per probe source"},
      {"gen-noise", "write a pink-noise tensor and its radial spectrum"},
  };
  for (const auto& [name, help] : tasks) {
    auto* sub = cli.add_subcommand(name, help);
    sub->add_option("-c,--config", req.config_path, "JSON config file");
    sub->add_option("overrides", req.overrides, "key.path=value overrides");
    sub->callback([&req, name = name] { req.task = name; });
  }

  CLI11_PARSE(cli, argc, argv);
  return dpkfc::app::run(req, std::cout, std::cerr);
}
