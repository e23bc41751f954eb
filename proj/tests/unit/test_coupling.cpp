// Copyright 2026 The perfusim Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <fstream>

#include <gtest/gtest.h>

#include "perfusim/coupling.hpp"
#include "perfusim/error.hpp"
#include "perfusim/mesh_builders.hpp"
#include "perfusim/scenario.hpp"
#include "test_support.hpp"

namespace perfusim {
namespace {

/// Minimal scenario solved once and shared by the tests below.
class CouplingTest : public ::testing::Test {
protected:
  static void SetUpTestSuite() {
    auto config = load_scenario(std::filesystem::path(PERFUSIM_SCENARIO_DIR) / "minimal.json");
    config.transport.t_end = 0.1;
    result_ = new ScenarioResult(run_scenario(config, false));
  }
  static void TearDownTestSuite() {
    delete result_;
    result_ = nullptr;
  }

  static const ScenarioResult &result() { return *result_; }
  static const VascularTree &portal() { return result_->portal->upper; }
  static const VascularTree &hepatic() { return result_->hepatic->upper; }
  static const Mesh &mesh() { return *result_->mesh; }
  static CouplingOptions options() { return result_->config.coupling; }

  static ScenarioResult *result_;
};

ScenarioResult *CouplingTest::result_ = nullptr;

double relative_gap(double a, double b) {
  return std::abs(a - b) / std::max(std::abs(a), std::abs(b));
}

TEST_F(CouplingTest, ConvergedMassClosure) {
  const auto &flow = *result().flow;
  EXPECT_TRUE(flow.converged);
  EXPECT_LE(flow.iterations, 200);
  const auto b = mass_balance(flow);
  EXPECT_GT(b.portal_inflow, 0.0);
  EXPECT_LE(b.max_relative_gap, 1e-6);
  EXPECT_LE(relative_gap(b.portal_inflow, b.hepatic_outflow), 1e-6);
  EXPECT_LE(relative_gap(b.exchange_12, b.exchange_23), 1e-6);
  EXPECT_LE(relative_gap(b.portal_inflow, b.exchange_12), 1e-6);
}

TEST_F(CouplingTest, InterfaceSigns) {
  const auto &flow = *result().flow;
  for (const auto &e : flow.portal_interface) {
    EXPECT_EQ(e.compartment, 1);
    EXPECT_GT(e.flux, 0.0);
  }
  for (const auto &e : flow.hepatic_interface) {
    EXPECT_EQ(e.compartment, 3);
    EXPECT_LT(e.flux, 0.0);
  }
  ASSERT_FALSE(flow.log.empty());
  EXPECT_DOUBLE_EQ(flow.log.back().ramp, 1.0);
}

TEST_F(CouplingTest, SharedPressureAtPortalNodes) {
  const auto &flow = *result().flow;
  const auto &p1 = flow.darcy.pressures[0].values;
  for (const auto &e : flow.portal_interface) {
    const double tree = flow.portal_flow.junction_pressures[static_cast<std::size_t>(e.junction)];
    EXPECT_NEAR(tree, p1[static_cast<std::size_t>(e.node)], 1e-5 * std::abs(tree));
  }
  const auto &p3 = flow.darcy.pressures[2].values;
  for (const auto &e : flow.hepatic_interface) {
    const double tree = flow.hepatic_flow.junction_pressures[static_cast<std::size_t>(e.junction)];
    EXPECT_NEAR(p3[static_cast<std::size_t>(e.node)], tree, 1e-9 * std::abs(tree));
  }
}

TEST_F(CouplingTest, InterfaceUpdateIsFixedPoint) {
  const auto &flow = *result().flow;
  std::vector<int> pn, hn;
  for (const auto &e : flow.portal_interface)
    pn.push_back(e.node);
  for (const auto &e : flow.hepatic_interface)
    hn.push_back(e.node);
  const auto next = interface_update(portal(), hepatic(), pn, hn, flow.darcy);
  const auto &pt = portal().terminals();
  for (std::size_t k = 0; k < pt.size(); ++k) {
    const double p = flow.portal_flow.junction_pressures[static_cast<std::size_t>(pt[k])];
    EXPECT_NEAR(next.portal_pressures[k], p, 1e-5 * std::abs(p));
  }
  const auto out = terminal_fluxes(hepatic(), flow.hepatic_flow);
  const auto &ht = hepatic().terminals();
  for (std::size_t k = 0; k < ht.size(); ++k) {
    const double q = next.hepatic_velocities[k] * hepatic().segment(hepatic().terminal_segment(ht[k])).area();
    EXPECT_NEAR(q, out[k], 1e-5 * std::abs(out[k]));
  }
}

TEST_F(CouplingTest, RampIndependence) {
  auto opts = options();
  opts.pseudo_steps = 2 * opts.pseudo_steps;
  const auto other = couple_steady(portal(), hepatic(), mesh(), result().params, result().config.v_in,
                                   result().config.p_out, opts);
  const auto &base = result().flow->portal_interface;
  ASSERT_EQ(other.portal_interface.size(), base.size());
  for (std::size_t k = 0; k < base.size(); ++k)
    EXPECT_NEAR(other.portal_interface[k].flux, base[k].flux, 1e-5 * std::abs(base[k].flux));
}

TEST_F(CouplingTest, AndersonAgreesWithNewton) {
  auto opts = options();
  opts.acceleration = CouplingOptions::Acceleration::anderson;
  const auto other = couple_steady(portal(), hepatic(), mesh(), result().params, result().config.v_in,
                                   result().config.p_out, opts);
  EXPECT_TRUE(other.converged);
  const auto a = mass_balance(other);
  const auto b = mass_balance(*result().flow);
  EXPECT_NEAR(a.portal_inflow, b.portal_inflow, 1e-9 * b.portal_inflow);
  EXPECT_NEAR(a.hepatic_outflow, b.hepatic_outflow, 1e-5 * b.hepatic_outflow);
}

TEST_F(CouplingTest, RestState) {
  const double p_out = 800.0;
  const auto rest = couple_steady(portal(), hepatic(), mesh(), result().params, 0.0, p_out, options());
  EXPECT_TRUE(rest.converged);
  for (const auto &field : rest.darcy.pressures)
    for (double p : field.values)
      EXPECT_NEAR(p, p_out, 1e-6 * p_out);
  for (double w : rest.portal_flow.segment_velocities)
    EXPECT_NEAR(w, 0.0, 1e-12);
  for (double w : rest.hepatic_flow.segment_velocities)
    EXPECT_NEAR(w, 0.0, 1e-12);
}

TEST_F(CouplingTest, IterationLogCsv) {
  const auto dir = testing::temp_dir("coupling_log");
  write_iteration_log(result().flow->log, dir / "log.csv");
  std::ifstream is(dir / "log.csv");
  std::string header;
  std::getline(is, header);
  EXPECT_EQ(header, "iteration,ramp,residual,balance_gap");
  std::size_t rows = 0;
  for (std::string line; std::getline(is, line);)
    ++rows;
  EXPECT_EQ(rows, result().flow->log.size());
}

TEST(MapTerminals, DuplicateNodesRejected) {
  const auto mesh = make_box_mesh(Vec3::Zero(), Vec3::Ones(), {1, 1, 1});
  const auto tree = testing::binary_tree(2, 1e-3, 0.8, 0.01);
  EXPECT_THROW(map_terminals(tree, mesh, "portal"), ConfigError);
  const auto single = testing::chain_tree({0.9}, 1e-3);
  EXPECT_EQ(map_terminals(single, mesh, "portal"), (std::vector<int>{mesh.nearest_node(Vec3(0.9, 0, 0))}));
}

} // namespace
} // namespace perfusim
