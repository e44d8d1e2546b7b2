#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include <gtest/gtest.h>

#include "dicache/commands.hpp"

using namespace dicache;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "dicache_cli_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig small_config(PolicyConfig policy) {
  RunConfig c = default_run_config();
  c.model.num_blocks = 4;
  c.model.d_model = 16;
  c.model.n_heads = 2;
  c.model.n_tokens = 16;
  c.sampler.n_tokens = 16;
  c.sampler.d_model = 16;
  c.sampler.num_steps = 20;
  c.grid_h = 4;
  c.grid_w = 4;
  c.policy = policy;
  return c;
}

PolicyConfig policy(PolicyKind kind) {
  PolicyConfig p;
  p.kind = kind;
  return p;
}

PolicyConfig dicache_policy(double delta, std::size_t m = 1, bool dcta = true) {
  PolicyConfig p = policy(PolicyKind::DiCache);
  p.dicache.reuse_threshold = delta;
  p.dicache.probe_depth = m;
  p.dicache.dcta_enabled = dcta;
  return p;
}

std::string write_config(const fs::path& dir, const std::string& name, const RunConfig& c) {
  const auto path = (dir / name).string();
  write_json(path, to_json(c));
  return path;
}

int run_cli(const std::string& args) {
  const char* cli = std::getenv("DICACHE_CLI");
  if (!cli) return -1;
  const int status = std::system((std::string(cli) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(GenConfig, DefaultsAndLosslessRoundTrip) {
  const auto dir = scratch("gen");
  const auto path = (dir / "config.json").string();
  cmd_gen_config(path);
  const RunConfig back = run_config_from_json(read_json(path));
  EXPECT_EQ(back, default_run_config());
  EXPECT_EQ(back.model.num_blocks, 12u);
  EXPECT_EQ(back.model.d_model, 64u);
  EXPECT_EQ(back.sampler.num_steps, 50u);
  EXPECT_EQ(back.policy.kind, PolicyKind::DiCache);
  EXPECT_EQ(back.policy.dicache.probe_depth, 1u);
  EXPECT_EQ(back.policy.dicache.reuse_threshold, 0.1);
  EXPECT_TRUE(back.policy.dicache.dcta_enabled);
  EXPECT_FALSE(back.policy.dicache.gamma_clamp.has_value());
}

TEST(Config, PolicyVariantsRoundTrip) {
  for (PolicyConfig p : {policy(PolicyKind::Vanilla), policy(PolicyKind::StepReduction),
                         policy(PolicyKind::Uniform), dicache_policy(0.3, 2, false)}) {
    RunConfig c = small_config(p);
    EXPECT_EQ(run_config_from_json(to_json(c)), c);
  }
  RunConfig inf = small_config(dicache_policy(std::numeric_limits<double>::infinity()));
  inf.policy.dicache.gamma_clamp = 2.0;
  const json j = to_json(inf);
  EXPECT_EQ(j["policy"]["reuse_threshold"], "inf");
  EXPECT_EQ(run_config_from_json(j), inf);
}

TEST(Config, RejectsInvalid) {
  json j = to_json(small_config(dicache_policy(0.1)));
  j["policy"]["kind"] = "teacache";
  EXPECT_THROW(run_config_from_json(j), Error);
  j = to_json(small_config(dicache_policy(0.1)));
  j["policy"]["probe_depth"] = 4;
  EXPECT_THROW(run_config_from_json(j), Error);
  j = to_json(small_config(dicache_policy(0.1)));
  j["model"]["n_heads"] = "four";
  try {
    run_config_from_json(j);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(exit_code_for(e.kind()), ExitCode::ConfigError);
  }
}

TEST(Sample, VanillaSpeedupIsOne) {
  const auto dir = scratch("vanilla");
  const auto cfg = write_config(dir, "v.json", small_config(policy(PolicyKind::Vanilla)));
  auto out = cmd_sample(cfg, (dir / "out").string());
  EXPECT_EQ(out.report.speedup_blockevals, 1.0);
  EXPECT_EQ(out.report.log.meter.block_evals, 20u * 4u);
  const json report = read_json(out.report_path.string());
  EXPECT_EQ(report["totals"]["speedup_blockevals"], 1.0);
  EXPECT_FALSE(report.contains("quality"));
  EXPECT_EQ(report["steps"].size(), 20u);
  EXPECT_EQ(report["config"], to_json(small_config(policy(PolicyKind::Vanilla))));
}

TEST(Sample, ZeroThresholdLatentIsByteIdenticalToVanilla) {
  const auto dir = scratch("delta0");
  auto v = cmd_sample(write_config(dir, "v.json", small_config(policy(PolicyKind::Vanilla))),
                      (dir / "v").string());
  auto d = cmd_sample(write_config(dir, "d.json", small_config(dicache_policy(0.0))),
                      (dir / "d").string(), v.latent_path.string());
  EXPECT_EQ(slurp(v.latent_path), slurp(d.latent_path));
  ASSERT_TRUE(d.report.quality);
  EXPECT_EQ(d.report.quality->l1_rel, 0.0);
  const json report = read_json(d.report_path.string());
  EXPECT_EQ(report["quality"]["psnr_db"], "inf");
  EXPECT_EQ(report["quality"]["ssim"], 1.0);
}

TEST(Sample, UniformIntervalTwoDefaultSizes) {
  const auto dir = scratch("uniform");
  RunConfig c = default_run_config();
  c.policy = policy(PolicyKind::Uniform);
  c.policy.interval = 2;
  auto out = cmd_sample(write_config(dir, "u.json", c), (dir / "u").string());
  EXPECT_EQ(out.report.log.meter.block_evals, 300u);
  EXPECT_EQ(out.report.speedup_blockevals, 2.0);
}

TEST(Sample, StepReductionHalvesSteps) {
  const auto dir = scratch("steps");
  RunConfig c = small_config(policy(PolicyKind::StepReduction));
  c.policy.fraction = 0.5;
  auto out = cmd_sample(write_config(dir, "s.json", c), (dir / "s").string());
  EXPECT_EQ(out.report.effective_steps, 10u);
  EXPECT_EQ(out.report.speedup_blockevals, 2.0);
}

TEST(Sample, ReportIsDeterministicAndSpeedupMatchesLog) {
  const auto dir = scratch("determinism");
  const auto cfg = write_config(dir, "d.json", small_config(dicache_policy(1.0)));
  auto a = cmd_sample(cfg, (dir / "a").string());
  auto b = cmd_sample(cfg, (dir / "b").string());
  EXPECT_EQ(slurp(a.latent_path), slurp(b.latent_path));
  EXPECT_EQ(slurp(a.report_path), slurp(b.report_path));
  const json r = read_json(a.report_path.string());
  std::size_t later = 0;
  for (const auto& s : r["steps"]) later += s["action"] == "recompute";
  const double expected = 4.0 + 19.0 * 1.0 + later * 3.0;
  EXPECT_DOUBLE_EQ(r["totals"]["speedup_blockevals"].get<double>(), 80.0 / expected);
  EXPECT_GE(r["totals"]["speedup_blockevals"].get<double>(), 1.0);
}

TEST(Compare, IdenticalAndSwapped) {
  const auto dir = scratch("compare");
  auto v = cmd_sample(write_config(dir, "v.json", small_config(policy(PolicyKind::Vanilla))),
                      (dir / "v").string());
  auto u = cmd_sample(write_config(dir, "u.json", small_config(policy(PolicyKind::Uniform))),
                      (dir / "u").string());
  const json same = cmd_compare(v.latent_path.string(), v.latent_path.string(), {4, 4, 3});
  EXPECT_EQ(same["l1_rel"], 0.0);
  EXPECT_EQ(same["psnr_db"], "inf");
  EXPECT_EQ(same["ssim"], 1.0);
  const json diff = cmd_compare(u.latent_path.string(), v.latent_path.string(), {4, 4, 3});
  EXPECT_GT(diff["l1_rel"].get<double>(), 0.0);
  EXPECT_LT(diff["ssim"].get<double>(), 1.0);
  EXPECT_TRUE(diff.contains("ssim_swapped"));
}

TEST(Compare, ShapeMismatch) {
  const auto dir = scratch("compare_shape");
  write_dlat((dir / "a.dlat").string(), Tensor2D(16, 16, 1.0f));
  write_dlat((dir / "b.dlat").string(), Tensor2D(16, 8, 1.0f));
  try {
    cmd_compare((dir / "a.dlat").string(), (dir / "b.dlat").string(), {4, 4, 3});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ShapeMismatch);
  }
}

TEST(TraceCommands, TraceAnalyzeReplay) {
  const auto dir = scratch("trace");
  const auto cfg = write_config(dir, "c.json", small_config(policy(PolicyKind::Vanilla)));
  const auto trace_path = (dir / "t.dtrc").string();
  auto header = cmd_trace(cfg, std::nullopt, trace_path);
  EXPECT_EQ(header.layers, (std::vector<std::uint32_t>{1, 2, 3, 4}));
  const json echo = json::parse(header.config_json);
  EXPECT_EQ(echo["sampler"]["num_steps"], 20);

  const json analysis = cmd_analyze(trace_path, std::nullopt);
  const auto& layers = analysis["correlation"]["layers"];
  EXPECT_EQ(layers.back()["layer"], 4);
  EXPECT_EQ(layers.back()["spearman"], 1.0);
  EXPECT_EQ(analysis["gamma_consistency"]["schedule"],
            (std::vector<std::uint32_t>{4, 8, 12, 16, 20}));

  const json replay = cmd_replay(trace_path, {0.20, 0.05, 0.15, 0.08, 0.10}, {1, 2});
  for (const auto& block : replay["replays"]) {
    EXPECT_TRUE(block["monotone"].get<bool>());
    EXPECT_EQ(block["rows"].size(), 5u);
    EXPECT_EQ(block["rows"][0]["delta"], 0.05);
  }
  try {
    cmd_trace(cfg, std::vector<std::uint32_t>{1, 2}, (dir / "bad.dtrc").string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidLayers);
  }
  const auto partial = (dir / "p.dtrc").string();
  cmd_trace(cfg, std::vector<std::uint32_t>{2, 4}, partial);
  try {
    cmd_replay(partial, {0.1}, {1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::LayerNotRecorded);
  }
}

TEST(TraceCommands, ReTraceIsByteIdentical) {
  const auto dir = scratch("retrace");
  const auto cfg = write_config(dir, "c.json", small_config(policy(PolicyKind::Vanilla)));
  cmd_trace(cfg, std::nullopt, (dir / "a.dtrc").string());
  cmd_trace(cfg, std::nullopt, (dir / "b.dtrc").string());
  EXPECT_EQ(slurp(dir / "a.dtrc"), slurp(dir / "b.dtrc"));
}

TEST(Sweep, DctaAxisAndWorkerIndependence) {
  const auto dir = scratch("sweep");
  const auto cfg = write_config(dir, "c.json", small_config(dicache_policy(1.0)));
  const json one = cmd_sweep(cfg, "dcta", {"off", "on"}, (dir / "w1").string(), 1);
  const json many = cmd_sweep(cfg, "dcta", {"off", "on"}, (dir / "w3").string(), 3);
  EXPECT_EQ(one, many);
  EXPECT_EQ(slurp(dir / "w1" / "sweep.json"), slurp(dir / "w3" / "sweep.json"));
  ASSERT_EQ(one["rows"].size(), 2u);
  EXPECT_EQ(one["rows"][0]["value"], "off");
  EXPECT_EQ(one["rows"][1]["value"], "on");
}

TEST(Sweep, ProbeDepthBlockEvalsForFixedSchedule) {
  // With delta = 0 every step recomputes, so the schedule is fixed and the
  // cost identity gives the same total for every m.
  const auto dir = scratch("sweep_m");
  const auto cfg = write_config(dir, "c.json", small_config(dicache_policy(0.0)));
  const json t = cmd_sweep(cfg, "m", {"1", "2", "3"}, (dir / "out").string());
  std::uint64_t last = 0;
  for (const auto& row : t["rows"]) {
    EXPECT_GE(row["block_evals"].get<std::uint64_t>(), last);
    last = row["block_evals"].get<std::uint64_t>();
    EXPECT_EQ(row["quality"]["psnr_db"], "inf");
  }
  // For a fixed number of later recomputes the cost grows with m.
  for (std::size_t n : {0u, 5u, 10u}) {
    EXPECT_LT(dicache_expected_block_evals(12, 50, 1, n), dicache_expected_block_evals(12, 50, 3, n));
    EXPECT_LT(dicache_expected_block_evals(12, 50, 3, n), dicache_expected_block_evals(12, 50, 5, n));
  }
}

TEST(Sweep, RejectsBadAxis) {
  const auto dir = scratch("sweep_bad");
  const auto cfg = write_config(dir, "c.json", small_config(dicache_policy(0.1)));
  EXPECT_THROW(cmd_sweep(cfg, "gamma", {"1"}, (dir / "o").string()), Error);
  EXPECT_THROW(cmd_sweep(cfg, "m", {"9"}, (dir / "o").string()), Error);
}

TEST(Binary, ExitCodes) {
  if (!std::getenv("DICACHE_CLI")) GTEST_SKIP() << "DICACHE_CLI not set";
  const auto dir = scratch("binary");
  const auto cfg = write_config(dir, "c.json", small_config(policy(PolicyKind::Vanilla)));
  EXPECT_EQ(run_cli("gen-config --out " + (dir / "g.json").string()), 0);
  EXPECT_EQ(run_cli("sample --config " + cfg + " --out " + (dir / "s").string()), 0);
  EXPECT_EQ(run_cli("sample --config " + (dir / "missing.json").string() + " --out " +
                    (dir / "s").string()),
            4);
  {
    std::ofstream bad(dir / "bad.json");
    bad << R"({"policy": {"kind": "dicache", "probe_depth": 0}})";
  }
  EXPECT_EQ(run_cli("sample --config " + (dir / "bad.json").string() + " --out " +
                    (dir / "s").string()),
            2);
  EXPECT_EQ(run_cli("frobnicate"), 2);
  write_dlat((dir / "a.dlat").string(), Tensor2D(16, 16, 1.0f));
  write_dlat((dir / "b.dlat").string(), Tensor2D(16, 8, 1.0f));
  EXPECT_EQ(run_cli("compare " + (dir / "a.dlat").string() + " " + (dir / "b.dlat").string() +
                    " --grid 4x4"),
            3);
  EXPECT_EQ(run_cli("trace --config " + cfg + " --out " + (dir / "t.dtrc").string() +
                    " --layers 1,4"),
            0);
  EXPECT_EQ(run_cli("replay " + (dir / "t.dtrc").string() + " --values 0.1 --layers 2"), 2);
  EXPECT_EQ(run_cli("analyze " + (dir / "t.dtrc").string() + " --out " +
                    (dir / "a.json").string()),
            0);
}
