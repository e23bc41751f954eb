// Copyright 2026 The perfusim Authors
// SPDX-License-Identifier: Apache-2.0

#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "json.hpp"
#include "perfusim/error.hpp"
#include "perfusim/scenario.hpp"
#include "test_support.hpp"

namespace perfusim {
namespace {

const std::filesystem::path kScenarios(PERFUSIM_SCENARIO_DIR);

std::string slurp(const std::filesystem::path &p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

nlohmann::json minimal_json() {
  return nlohmann::json::parse(slurp(kScenarios / "minimal.json"));
}

std::string field_of(const std::string &text) {
  try {
    parse_scenario(text, kScenarios);
  } catch (const ConfigError &e) {
    return e.field();
  }
  return "";
}

TEST(ScenarioConfig, MinimalParses) {
  const auto c = load_scenario(kScenarios / "minimal.json");
  EXPECT_DOUBLE_EQ(c.v_in, 0.1);
  EXPECT_DOUBLE_EQ(c.p_out, 1000.0);
  EXPECT_EQ(c.portal_tree.hs_threshold, 2);
  EXPECT_TRUE(std::holds_alternative<MeshGenerator>(c.mesh));
  EXPECT_FALSE(c.lesion.has_value());
  EXPECT_EQ(c.transport.probes.size(), 1u);
  EXPECT_NO_THROW(validate_scenario(c));
}

TEST(ScenarioConfig, MissingVinNamesField) {
  auto j = minimal_json();
  j.erase("v_in");
  EXPECT_EQ(field_of(j.dump()), "v_in");
}

TEST(ScenarioConfig, InvalidValuesNameFields) {
  auto j = minimal_json();
  j["format"] = "scenario-v0";
  EXPECT_EQ(field_of(j.dump()), "format");
  j = minimal_json();
  j["unknown_key"] = 1;
  EXPECT_FALSE(field_of(j.dump()).empty());
  j = minimal_json();
  j["coupling"]["acceleration"] = "magic";
  EXPECT_EQ(field_of(j.dump()), "coupling.acceleration");
  j = minimal_json();
  j["portal_tree"]["generate"]["diameter_ratio"] = {0.7, 0.7, 0.7};
  EXPECT_EQ(field_of(j.dump()), "portal_tree.generate.diameter_ratio");
  EXPECT_THROW(parse_scenario("{not json", kScenarios), FormatError);
}

TEST(ScenarioConfig, ProbeOutsideBoundingBoxRejected) {
  auto j = minimal_json();
  j["probes"] = {{0.5, 0.05, 0.05}};
  EXPECT_THROW(validate_scenario(parse_scenario(j.dump(), kScenarios)), ConfigError);
}

TEST(TreeSpecJson, PerLevelArrays) {
  const auto spec = parse_tree_spec(R"({"depth": 3, "root_diameter": 0.004, "diameter_ratio": [0.8, 0.6],
      "length_ratio": 6, "region": {"shape": "box", "center": [0.05, 0.05, 0.05], "half_extents": [0.048, 0.048, 0.048]},
      "root_position": [0.01, 0.05, 0.05], "root_direction": [1, 0, 0], "seed": 2})");
  EXPECT_EQ(spec.level_diameter_ratios, (std::vector<double>{0.8, 0.6}));
  EXPECT_TRUE(spec.level_length_ratios.empty());
  EXPECT_DOUBLE_EQ(spec.length_ratio, 6.0);
  EXPECT_EQ(spec.seed, 2u);
}

class ScenarioRun : public ::testing::Test {
protected:
  static void SetUpTestSuite() {
    auto config = load_scenario(kScenarios / "minimal.json");
    config.output_dir = testing::temp_dir("scenario_a");
    first_ = new ScenarioResult(run_scenario(config));
    config.output_dir = testing::temp_dir("scenario_b");
    second_ = new ScenarioResult(run_scenario(config));
  }
  static void TearDownTestSuite() {
    delete first_;
    delete second_;
  }

  static ScenarioResult *first_;
  static ScenarioResult *second_;
};

ScenarioResult *ScenarioRun::first_ = nullptr;
ScenarioResult *ScenarioRun::second_ = nullptr;

TEST_F(ScenarioRun, MinimalChecksPass) {
  const auto summary = nlohmann::json::parse(slurp(first_->config.output_dir / "summary.json"));
  EXPECT_EQ(summary["format"], "perfusim-summary-v1");
  ASSERT_TRUE(summary.contains("checks"));
  for (const auto &c : summary["checks"])
    EXPECT_TRUE(c["pass"].get<bool>()) << c["name"];
  EXPECT_TRUE(summary.contains("timings_s"));
  EXPECT_LE(first_->balance.max_relative_gap, 1e-6);
  EXPECT_LE(first_->transport.max_budget_error, 1e-8);
  EXPECT_LE(first_->transport.max_bound_violation, 1e-12);
}

TEST_F(ScenarioRun, OutputsWritten) {
  const auto &dir = first_->config.output_dir;
  for (const char *name : {"coupling_log.csv", "probes.csv", "flow.vtk", "summary.json"})
    EXPECT_TRUE(std::filesystem::exists(dir / name)) << name;
  EXPECT_EQ(first_->transport.snapshots.size(), 2u);
}

TEST_F(ScenarioRun, RerunIsByteIdentical) {
  for (const char *name : {"coupling_log.csv", "probes.csv", "flow.vtk"})
    EXPECT_EQ(slurp(first_->config.output_dir / name), slurp(second_->config.output_dir / name)) << name;
}

TEST_F(ScenarioRun, SelfDifferenceIsZero) {
  const auto report = difference_report(*first_, *second_);
  for (const auto &probe : report.probe_deltas)
    for (const auto &row : probe)
      for (double v : row)
        EXPECT_EQ(v, 0.0);
  for (const auto &snap : report.snapshot_deltas)
    for (const auto &f : snap)
      for (double v : f.values)
        EXPECT_EQ(v, 0.0);
}

TEST_F(ScenarioRun, LesionFactorOneIsIdentity) {
  const auto &mesh = *first_->mesh;
  const LesionSpec lesion{Vec3(0.05, 0.05, 0.05), 0.03, 2, 1.0};
  const auto p = apply_lesion(first_->params, mesh, lesion);
  for (int i = 0; i < 3; ++i)
    EXPECT_EQ(p.permeability[static_cast<std::size_t>(i)].values,
              first_->params.permeability[static_cast<std::size_t>(i)].values);
}

TEST_F(ScenarioRun, LesionOutsideMeshIsIdentity) {
  const auto &mesh = *first_->mesh;
  const LesionSpec lesion{Vec3(1.0, 1.0, 1.0), 0.01, 2, 1e-6};
  EXPECT_TRUE(lesion_cells(mesh, lesion).empty());
  const auto p = apply_lesion(first_->params, mesh, lesion);
  EXPECT_EQ(p.permeability[1].values, first_->params.permeability[1].values);
}

TEST_F(ScenarioRun, LesionChangesOnlyTargetCells) {
  const auto &mesh = *first_->mesh;
  const LesionSpec lesion{Vec3(0.05, 0.05, 0.05), 0.025, 2, 1e-6};
  const auto inside = lesion_cells(mesh, lesion);
  ASSERT_FALSE(inside.empty());
  const auto p = apply_lesion(first_->params, mesh, lesion);
  std::vector<char> in(mesh.num_cells(), 0);
  for (int c : inside)
    in[static_cast<std::size_t>(c)] = 1;
  for (std::size_t c = 0; c < mesh.num_cells(); ++c) {
    const Mat3 &before = first_->params.permeability[1].values[c];
    const Mat3 &after = p.permeability[1].values[c];
    if (in[c])
      EXPECT_LE((after - 1e-6 * before).cwiseAbs().maxCoeff(), 1e-30);
    else
      EXPECT_EQ(after, before);
  }
  EXPECT_EQ(p.permeability[0].values, first_->params.permeability[0].values);
  EXPECT_EQ(p.porosity[1].values, first_->params.porosity[1].values);
  EXPECT_EQ(p.couplings[0].coefficient.values, first_->params.couplings[0].coefficient.values);
}

TEST_F(ScenarioRun, LesionDeltaIsLinearInSaturation) {
  auto config = first_->config;
  config.lesion = LesionSpec{Vec3(0.05, 0.05, 0.05), 0.025, 2, 1e-6};
  const auto lesion = run_scenario(config, false);
  EXPECT_TRUE(lesion.flow->converged);
  const auto report = difference_report(*first_, lesion);
  const auto &mesh = *first_->mesh;
  const auto flow = compartment_flow(mesh, first_->params, first_->flow->darcy);
  // porosities are untouched by the lesion, so dC = sum phi dS node by node
  for (std::size_t k = 0; k < report.snapshot_deltas.size(); ++k) {
    const auto &d = report.snapshot_deltas[k];
    std::vector<std::vector<double>> ds;
    for (int i = 0; i < 3; ++i)
      ds.push_back(d[static_cast<std::size_t>(i)].values);
    const auto dc = nodal_concentration(mesh, flow, ds);
    for (std::size_t a = 0; a < mesh.num_nodes(); ++a)
      EXPECT_NEAR(d[3].values[a], dc.values[a], 1e-14);
  }
  auto other = config;
  other.transport.snapshot_times = {0.5};
  const auto mismatched = run_scenario(other, false);
  EXPECT_THROW(difference_report(*first_, mismatched), ContractError);
}

TEST(ScenarioRunErrors, NonConvergenceIsSolverError) {
  auto config = load_scenario(kScenarios / "minimal.json");
  config.coupling.max_iterations = 3;
  EXPECT_THROW(run_scenario(config, false), SolverError);
}

} // namespace
} // namespace perfusim
