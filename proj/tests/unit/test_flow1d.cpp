// Copyright 2026 The perfusim Authors
// SPDX-License-Identifier: Apache-2.0

#include <numeric>

#include <gtest/gtest.h>

#include "perfusim/error.hpp"
#include "perfusim/flow1d.hpp"
#include "test_support.hpp"

namespace perfusim {
namespace {

TEST(PressureLoss, SinglePipe) {
  const Fluid fluid;
  EXPECT_EQ(segment_pressure_loss(0.0, 0.1, 0.01, fluid), 0.0);
  EXPECT_NEAR(segment_pressure_loss(0.1, 0.1, 0.01, fluid), 11.2, 1e-12);
  EXPECT_EQ(segment_pressure_loss(-0.37, 0.2, 0.003, fluid), -segment_pressure_loss(0.37, 0.2, 0.003, fluid));
}

TEST(TreeFlow, SinglePipeInlet) {
  const auto tree = testing::chain_tree({0.1}, 0.01);
  const auto state = solve_tree_flow(tree, {TreeFlowBC::Mode::inlet_velocity, 0.1, {0.0}}, Fluid{});
  EXPECT_NEAR(state.junction_pressures[0], 11.2, 11.2 * 1e-10);
  EXPECT_NEAR(state.segment_velocities[0], 0.1, 1e-15);
  EXPECT_LE(state.residual, 1e-10);
}

TEST(TreeFlow, SinglePipeOutletPressure) {
  const auto tree = testing::chain_tree({0.1}, 0.01);
  const auto state = solve_tree_flow(tree, {TreeFlowBC::Mode::outlet_pressure, 100.0, {0.1}}, Fluid{});
  EXPECT_NEAR(state.junction_pressures[1], 100.0 - 11.2, 1e-8);
}

TEST(TreeFlow, ReversedSegmentStorage) {
  // head-to-tail storage flips the sign of the stored velocity only
  const VascularTree tree({Vec3::Zero(), Vec3(0.1, 0, 0)}, {{1, 0, 0.01, 0.1}}, 0);
  const auto state = solve_tree_flow(tree, {TreeFlowBC::Mode::inlet_velocity, 0.1, {0.0}}, Fluid{});
  EXPECT_NEAR(state.segment_velocities[0], -0.1, 1e-15);
  EXPECT_NEAR(downstream_velocity(tree, state, 0), 0.1, 1e-15);
  EXPECT_NEAR(state.junction_pressures[0], 11.2, 1e-8);
}

TEST(TreeFlow, SymmetricBifurcation) {
  const auto tree = testing::binary_tree(2, 4e-3, 0.8, 0.02);
  const auto state = solve_tree_flow(tree, {TreeFlowBC::Mode::inlet_velocity, 0.2, {50.0, 50.0}}, Fluid{});
  const auto &kids = tree.children(0);
  const double w1 = downstream_velocity(tree, state, kids[0]);
  const double w2 = downstream_velocity(tree, state, kids[1]);
  EXPECT_NEAR(w1, w2, 1e-12 * std::abs(w1));
  const double q0 = tree.segment(0).area() * 0.2;
  EXPECT_NEAR(tree.segment(kids[0]).area() * w1, 0.5 * q0, 1e-12 * q0);
}

TEST(TreeFlow, RestState) {
  const auto tree = testing::binary_tree(4, 4e-3, 0.8, 0.02);
  const std::vector<double> p(tree.terminals().size(), 1234.0);
  const auto state = solve_tree_flow(tree, {TreeFlowBC::Mode::inlet_velocity, 0.0, p}, Fluid{});
  for (double w : state.segment_velocities)
    EXPECT_NEAR(w, 0.0, 1e-15);
  for (double x : state.junction_pressures)
    EXPECT_NEAR(x, 1234.0, 1e-9);
}

TEST(TreeFlow, MassBalanceAndResiduals) {
  const auto tree = testing::binary_tree(5, 6e-3, 0.75, 0.015);
  std::vector<double> p;
  for (std::size_t k = 0; k < tree.terminals().size(); ++k)
    p.push_back(100.0 + 7.0 * static_cast<double>(k % 5));
  const auto state = solve_tree_flow(tree, {TreeFlowBC::Mode::inlet_velocity, 0.3, p}, Fluid{});
  const auto out = terminal_fluxes(tree, state);
  const double q0 = root_flux(tree, state);
  EXPECT_NEAR(std::accumulate(out.begin(), out.end(), 0.0), q0, 1e-10 * q0);
  const auto r = tree_flow_residuals(tree, state);
  EXPECT_LE(r.continuity, 1e-10);
  EXPECT_LE(r.bernoulli, 1e-10);
}

TEST(TreeFlow, PressureDecreasesAlongPathWithoutKineticTerms) {
  const auto tree = testing::chain_tree({0.01, 0.02, 0.015, 0.03}, 2e-3);
  const auto state = solve_tree_flow(tree, {TreeFlowBC::Mode::inlet_velocity, 0.05, {10.0}}, Fluid{});
  for (std::size_t j = 1; j < tree.num_junctions(); ++j)
    EXPECT_LT(state.junction_pressures[j], state.junction_pressures[j - 1]);
}

TEST(TreeFlow, PoiseuilleLimitMatchesResistorNetwork) {
  const auto tree = testing::binary_tree(6, 5e-3, 0.8, 0.01);
  std::mt19937 rng(42);
  std::uniform_real_distribution<double> dist(0.0, 200.0);
  std::vector<double> p;
  for (std::size_t k = 0; k < tree.terminals().size(); ++k)
    p.push_back(dist(rng));
  Fluid fluid;
  fluid.density = 0.0;
  const double w0 = 0.2;
  const auto state = solve_tree_flow(tree, {TreeFlowBC::Mode::inlet_velocity, w0, p}, fluid);
  const auto oracle = testing::resistor_network_pressures(tree, tree.segment(0).area() * w0, p, fluid.viscosity);
  EXPECT_LE(testing::max_relative_difference(state.junction_pressures, oracle), 1e-8);
}

TEST(TreeFlow, KineticTermsShiftPressures) {
  const auto tree = testing::binary_tree(3, 5e-3, 0.7, 0.01);
  const std::vector<double> p(4, 0.0);
  Fluid still;
  still.density = 0.0;
  const auto linear = solve_tree_flow(tree, {TreeFlowBC::Mode::inlet_velocity, 0.5, p}, still);
  const auto full = solve_tree_flow(tree, {TreeFlowBC::Mode::inlet_velocity, 0.5, p}, Fluid{});
  // narrowing children accelerate the flow, which costs extra root pressure
  EXPECT_GT(full.junction_pressures[0], linear.junction_pressures[0]);
  EXPECT_LE(tree_flow_residuals(tree, full).bernoulli, 1e-10);
}

TEST(TreeFlow, WrongTerminalCountIsContractError) {
  const auto tree = testing::binary_tree(2, 4e-3, 0.8, 0.02);
  EXPECT_THROW(solve_tree_flow(tree, {TreeFlowBC::Mode::inlet_velocity, 0.1, {0.0}}, Fluid{}), ContractError);
}

} // namespace
} // namespace perfusim
