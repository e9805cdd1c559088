// latentmark <stage> --config <path> [--key=value ...] --out <dir>
//
// Exit codes: 0 success, 1 other failure, 2 config error, 3 missing
// dependency, 4 calibration failure.

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "latentmark/pipeline.hpp"

namespace {

int exit_code(latentmark::ErrorKind kind) {
  switch (kind) {
    case latentmark::ErrorKind::config: return 2;
    case latentmark::ErrorKind::dependency: return 3;
    case latentmark::ErrorKind::calibration: return 4;
    default: return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent audio watermarking pipeline"};
  std::string stage, config_path, out_dir;
  std::string stage_help = "one of: all";
  for (const auto& s : latentmark::Pipeline::stages()) stage_help += ", " + s;
  app.add_option("stage", stage, stage_help)->required();
  app.add_option("--config", config_path, "JSON file with a flat \"pipeline\" object")->required();
  app.add_option("--out", out_dir, "output directory")->required();
  app.allow_extras();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    const latentmark::PipelineConfig cfg = latentmark::load_config(config_path, app.remaining());
    latentmark::Pipeline pipeline(cfg, out_dir);
    pipeline.run(stage);
  } catch (const latentmark::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
