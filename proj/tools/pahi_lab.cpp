#include <iostream>

#include "CLI11.hpp"
#include "pahi/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"pahi-lab: prompt-adaptive noise inversion experiments"};
  app.require_subcommand(1);

  pahi::RunRequest request;
  std::string checkpoint;
  const std::pair<const char*, const char*> commands[] = {
      {"pretrain", "Pretrain the noise predictor against N(0, I) with an embedding decoder"},
      {"train-hi", "Optimize one shared noise distribution"},
      {"train-pahi", "Train the prompt-adaptive noise predictor"},
      {"eval", "Win rate against standard Gaussian noise on the test prompts"},
      {"bench", "Time plain and predictor-augmented one-step sampling"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", request.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", request.out, "Output directory (PAHI_LAB_OUT overrides)")->required();
    sub->add_option("--seed", request.seed, "Master seed, replacing the config's");
    sub->add_option("--override", request.overrides, "Dotted key=value applied to the config")->take_all();
    if (std::string(name) != "pretrain" && std::string(name) != "train-hi") {
      sub->add_option("--checkpoint", checkpoint, "Checkpoint to start from or evaluate");
    }
    sub->add_flag("--embed-frozen", request.embed_frozen, "Store frozen generator weights in the checkpoint");
    sub->callback([&request, sub] { request.command = sub->get_name(); });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : pahi::exit_bad_config;
  }
  if (!checkpoint.empty()) request.checkpoint = checkpoint;

  const int code = pahi::run_command(request, std::cerr);
  if (code == pahi::exit_ok) std::cout << request.command << ": wrote " << request.out.string() << "\n";
  return code;
}
