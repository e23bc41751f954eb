// Copyright 2026 The perfusim Authors
// SPDX-License-Identifier: Apache-2.0

// perfusim command line: run, lesion-diff, gen-tree, validate.

#include <cstdio>
#include <fstream>
#include <future>
#include <sstream>

#include "CLI11.hpp"
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "perfusim/error.hpp"
#include "perfusim/scenario.hpp"
#include "perfusim/vtree.hpp"

namespace {

constexpr int kValidationError = 2;
constexpr int kSolverError = 3;

void print_checks(const perfusim::ScenarioResult &r) {
  const auto &b = r.balance;
  std::printf("coupling: %d iterations, mass gap %.3e\n", r.flow->iterations, b.max_relative_gap);
  std::printf("  portal inflow %.6e  hepatic outflow %.6e  exchange 1->2 %.6e  2->3 %.6e m^3/s\n", b.portal_inflow,
              b.hepatic_outflow, b.exchange_12, b.exchange_23);
  std::printf("transport: dt %.4e s, %zu steps, budget error %.3e, bound violation %.3e\n", r.transport.dt,
              r.transport.steps, r.transport.max_budget_error, r.transport.max_bound_violation);
  std::printf("outputs in %s\n", r.config.output_dir.string().c_str());
}

int run(const std::string &config_path, const std::string &out_dir) {
  auto config = perfusim::load_scenario(config_path);
  if (!out_dir.empty())
    config.output_dir = out_dir;
  const auto result = perfusim::run_scenario(config);
  print_checks(result);
  return 0;
}

int lesion_diff(const std::string &baseline_path, const std::string &lesion_path, std::string out_dir) {
  const auto base_cfg = perfusim::load_scenario(baseline_path);
  const auto lesion_cfg = perfusim::load_scenario(lesion_path);
  if (!lesion_cfg.lesion)
    throw perfusim::ConfigError("lesion", "the pathological configuration needs a lesion section");
  if (base_cfg.output_dir == lesion_cfg.output_dir)
    throw perfusim::ConfigError("output.directory", "baseline and lesion runs must write to different directories");
  auto base = std::async(std::launch::async, [&] { return perfusim::run_scenario(base_cfg); });
  auto lesion = perfusim::run_scenario(lesion_cfg);
  const auto baseline = base.get();
  const auto report = perfusim::difference_report(baseline, lesion);
  if (out_dir.empty())
    out_dir = (lesion_cfg.output_dir / "difference").string();
  perfusim::write_difference_outputs(report, *baseline.mesh, out_dir);
  const double after = lesion_cfg.bolus.duration;
  const double outside = perfusim::max_delta_outside(report, *baseline.mesh, *lesion_cfg.lesion, after);
  std::printf("lesion-diff: max |dC| outside the lesion after t = %g s: %.6e\n", after, outside);
  std::printf("difference outputs in %s\n", out_dir.c_str());
  return 0;
}

int gen_tree(const std::string &spec_path, const std::string &out_path) {
  std::ifstream is(spec_path);
  if (!is)
    throw perfusim::ConfigError("spec", "cannot open " + spec_path);
  std::stringstream ss;
  ss << is.rdbuf();
  const auto spec = perfusim::parse_tree_spec(ss.str());
  const auto tree = perfusim::build_synthetic_tree(spec);
  perfusim::save_tree(tree, out_path);
  std::printf("wrote %zu junctions, %zu segments to %s\n", tree.num_junctions(), tree.num_segments(),
              out_path.c_str());
  return 0;
}

int validate(const std::string &config_path) {
  const auto config = perfusim::load_scenario(config_path);
  perfusim::validate_scenario(config);
  std::printf("%s: valid\n", config_path.c_str());
  return 0;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"perfusim: hierarchical liver perfusion simulator"};
  app.require_subcommand(1);
  std::string level = "info";
  app.add_option("--log-level", level, "trace, debug, info, warn, error or off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

  std::string config, baseline, lesion, out_dir, spec, out;
  auto *run_cmd = app.add_subcommand("run", "run a scenario");
  run_cmd->add_option("config", config, "scenario-v1 JSON file")->required();
  run_cmd->add_option("--out", out_dir, "output directory (overrides the scenario)");
  auto *diff_cmd = app.add_subcommand("lesion-diff", "run baseline and lesion scenarios and write their difference");
  diff_cmd->add_option("baseline", baseline, "baseline scenario")->required();
  diff_cmd->add_option("lesion", lesion, "scenario with a lesion section")->required();
  diff_cmd->add_option("--out", out_dir, "difference output directory (default: <lesion output>/difference)");
  auto *gen_cmd = app.add_subcommand("gen-tree", "generate a synthetic vascular tree");
  gen_cmd->add_option("spec", spec, "tree-spec-v1 JSON file")->required();
  gen_cmd->add_option("out", out, "tree-v1 output file")->required();
  auto *val_cmd = app.add_subcommand("validate", "check a scenario without solving");
  val_cmd->add_option("config", config, "scenario-v1 JSON file")->required();

  CLI11_PARSE(app, argc, argv);

  auto logger = spdlog::stderr_color_mt("perfusim");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::from_str(level));

  try {
    if (*run_cmd)
      return run(config, out_dir);
    if (*diff_cmd)
      return lesion_diff(baseline, lesion, out_dir);
    if (*gen_cmd)
      return gen_tree(spec, out);
    return validate(config);
  } catch (const perfusim::ConfigError &e) {
    spdlog::error("invalid configuration: {}", e.what());
    return kValidationError;
  } catch (const perfusim::FormatError &e) {
    spdlog::error("invalid input file: {}", e.what());
    return kValidationError;
  } catch (const perfusim::GeometryError &e) {
    spdlog::error("invalid geometry: {}", e.what());
    return kValidationError;
  } catch (const perfusim::SolverError &e) {
    spdlog::error("solver failure: {}", e.what());
    return kSolverError;
  } catch (const std::exception &e) {
    spdlog::error("{}", e.what());
    return kSolverError;
  }
}
