#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "dicache/commands.hpp"

namespace {

using dicache::ExitCode;

void configure_logging() {
  const char* level = std::getenv("DICACHE_LOG");
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(level ? spdlog::level::from_str(level) : spdlog::level::warn);
}

dicache::SsimOptions parse_grid(const std::string& grid, std::size_t window) {
  const auto x = grid.find('x');
  if (x == std::string::npos) {
    throw dicache::Error(dicache::ErrorKind::BadGrid, "grid must look like HxW, got '" + grid + "'");
  }
  return {dicache::parse_count(grid.substr(0, x)), dicache::parse_count(grid.substr(x + 1)),
          window};
}

std::vector<std::uint32_t> to_u32(const std::vector<std::string>& values) {
  std::vector<std::uint32_t> out;
  for (const auto& v : values) out.push_back(static_cast<std::uint32_t>(dicache::parse_count(v)));
  return out;
}

void emit(const dicache::json& j, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << j.dump(2) << '\n';
  } else {
    dicache::write_json(out_path, j);
  }
}

}  // namespace

int main(int argc, char** argv) {
  configure_logging();
  CLI::App app{"dicache: probe-driven feature caching for a toy diffusion transformer"};
  app.require_subcommand(1);

  std::string config_path, out_path, reference, axis, grid = "8x8";
  std::vector<std::string> values, layers;
  std::size_t workers = 1, window = 3;
  std::optional<std::uint64_t> seed_override;
  std::string trace_path, a_path, b_path;

  auto* gen = app.add_subcommand("gen-config", "write the default run configuration");
  gen->add_option("--out", out_path, "config path")->required();

  auto* sample = app.add_subcommand("sample", "run one sampling job");
  sample->add_option("--config", config_path)->required();
  sample->add_option("--out", out_path, "output directory")->required();
  sample->add_option("--reference", reference, "reference DLAT for quality metrics");
  sample->add_option("--seed-override", seed_override, "replace the noise seed");

  auto* compare = app.add_subcommand("compare", "quality metrics of A against reference B");
  compare->add_option("a", a_path)->required();
  compare->add_option("b", b_path)->required();
  compare->add_option("--grid", grid, "token grid HxW");
  compare->add_option("--window", window, "SSIM window (odd)");
  compare->add_option("--out", out_path, "metrics JSON path (stdout if omitted)");

  auto* trace = app.add_subcommand("trace", "record a vanilla run's per-layer features");
  trace->add_option("--config", config_path)->required();
  trace->add_option("--out", out_path, "DTRC path")->required();
  trace->add_option("--layers", layers, "layer ids (default: all)")->delimiter(',');
  trace->add_option("--seed-override", seed_override);

  auto* replay = app.add_subcommand("replay", "open-loop schedule replay over a trace");
  replay->add_option("trace", trace_path)->required();
  replay->add_option("--values", values, "thresholds")->delimiter(',')->required();
  replay->add_option("--layers", layers, "probe layers")->delimiter(',')->required();
  replay->add_option("--out", out_path);

  auto* analyze = app.add_subcommand("analyze", "layer correlation and gamma consistency");
  analyze->add_option("trace", trace_path)->required();
  analyze->add_option("--values", values, "recompute schedule (step indices)")->delimiter(',');
  analyze->add_option("--out", out_path);

  auto* sweep = app.add_subcommand("sweep", "closed-loop ablation sweep");
  sweep->add_option("--config", config_path)->required();
  sweep->add_option("--axis", axis, "delta|m|dcta")->required();
  sweep->add_option("--values", values)->delimiter(',')->required();
  sweep->add_option("--out", out_path, "output directory")->required();
  sweep->add_option("--workers", workers);
  sweep->add_option("--seed-override", seed_override);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::ConfigError);
  }

  const auto started = std::chrono::steady_clock::now();
  try {
    if (*gen) {
      dicache::cmd_gen_config(out_path);
      spdlog::info("wrote {}", out_path);
    } else if (*sample) {
      std::optional<std::string> ref;
      if (!reference.empty()) ref = reference;
      auto out = dicache::cmd_sample(config_path, out_path, ref, seed_override);
      std::cout << "block_evals " << out.report.log.meter.block_evals << " speedup "
                << out.report.speedup_blockevals << " -> " << out.latent_path.string() << '\n';
    } else if (*compare) {
      emit(dicache::cmd_compare(a_path, b_path, parse_grid(grid, window)), out_path);
    } else if (*trace) {
      std::optional<std::vector<std::uint32_t>> ids;
      if (!layers.empty()) ids = to_u32(layers);
      auto header = dicache::cmd_trace(config_path, ids, out_path, seed_override);
      spdlog::info("recorded {} steps x {} layers to {}", header.num_steps, header.layers.size(),
                   out_path);
    } else if (*replay) {
      std::vector<double> thresholds;
      for (const auto& v : values) thresholds.push_back(dicache::parse_threshold(v));
      emit(dicache::cmd_replay(trace_path, thresholds, to_u32(layers)), out_path);
    } else if (*analyze) {
      std::optional<std::vector<std::uint32_t>> sched;
      if (!values.empty()) sched = to_u32(values);
      emit(dicache::cmd_analyze(trace_path, sched), out_path);
    } else if (*sweep) {
      auto table = dicache::cmd_sweep(config_path, axis, values, out_path, workers, seed_override);
      for (const auto& row : table["rows"]) {
        std::cout << axis << '=' << row["value"].dump() << " block_evals " << row["block_evals"]
                  << " speedup " << row["speedup_blockevals"] << " psnr "
                  << row["quality"]["psnr_db"].dump() << " ssim " << row["quality"]["ssim"] << '\n';
      }
    }
  } catch (const dicache::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(dicache::exit_code_for(e.kind()));
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::NumericError);
  }
  const auto elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  spdlog::info("wall clock {:.3f} s (informational)", elapsed);
  return 0;
}
