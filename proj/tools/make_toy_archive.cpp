// Writes the synthetic mixture archive used by the end-to-end checks.
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "patchguard/error.hpp"
#include "patchguard/synthetic.hpp"

int main(int argc, char** argv) {
  patchguard::ToyConfig config;
  std::string out;
  CLI::App app{"Generate a synthetic patch-embedding archive"};
  app.add_option("out", out, "Archive to write")->required();
  app.add_option("--dim", config.dim)->capture_default_str();
  app.add_option("--height", config.height)->capture_default_str();
  app.add_option("--width", config.width)->capture_default_str();
  app.add_option("--train", config.n_train)->capture_default_str();
  app.add_option("--test", config.n_test)->capture_default_str();
  app.add_option("--anomalous", config.n_anomalous)->capture_default_str();
  app.add_option("--components", config.components)->capture_default_str();
  app.add_option("--block", config.block)->capture_default_str();
  app.add_option("--shift", config.shift_sigmas, "Anomaly shift in component sigmas")->capture_default_str();
  app.add_flag("--pooled-scale", config.pooled_scale, "Add a 2x2-pooled second scale");
  app.add_option("--seed", config.seed)->capture_default_str();
  CLI11_PARSE(app, argc, argv);
  try {
    patchguard::write_archive(patchguard::make_toy_dataset(config), out);
  } catch (const patchguard::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
