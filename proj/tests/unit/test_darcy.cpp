// Copyright 2026 The perfusim Authors
// SPDX-License-Identifier: Apache-2.0

#include <numeric>

#include <gtest/gtest.h>

#include "darcy_mms.hpp"
#include "perfusim/darcy.hpp"
#include "perfusim/error.hpp"
#include "perfusim/mesh_builders.hpp"
#include "test_support.hpp"

namespace perfusim {
namespace {

using Kind = NodeCondition::Kind;

Mesh cube(int n) {
  return make_box_mesh(Vec3::Zero(), Vec3::Ones(), {n, n, n});
}

int node_at(const Mesh &mesh, const Vec3 &x) {
  const int a = mesh.nearest_node(x);
  EXPECT_LT((mesh.node(a) - x).norm(), 1e-12);
  return a;
}

TEST(Darcy, HarmonicConstant) {
  const auto mesh = cube(3);
  const auto params = testing::uniform_params(mesh, Mat3::Identity());
  const std::vector<SourceSpec> sources{{1, {{5, Kind::pressure, 5.0}}}};
  const auto sol = solve_multicompartment(assemble(mesh, params, sources), mesh, params);
  for (double p : sol.pressures[0].values)
    EXPECT_NEAR(p, 5.0, 1e-9);
  for (const auto &w : sol.velocities[0].values)
    EXPECT_LE(w.norm(), 1e-9);
}

TEST(Darcy, StiffnessRowsSumToZero) {
  const auto mesh = cube(2);
  Mat3 k;
  k << 2, 0.3, 0, 0.3, 1, 0.1, 0, 0.1, 0.5;
  const auto params = testing::two_compartment_params(mesh, k, 0.7);
  const std::vector<SourceSpec> sources{{2, {{0, Kind::pressure, 0.0}}}};
  const auto system = assemble(mesh, params, sources);
  const Eigen::MatrixXd full(system.full);
  EXPECT_LE(full.rowwise().sum().cwiseAbs().maxCoeff(), 1e-12 * full.cwiseAbs().maxCoeff());
  EXPECT_LE((full - full.transpose()).cwiseAbs().maxCoeff(), 1e-14 * full.cwiseAbs().maxCoeff());
  const Eigen::MatrixXd reduced(system.matrix);
  EXPECT_LE((reduced - reduced.transpose()).cwiseAbs().maxCoeff(), 1e-14 * reduced.cwiseAbs().maxCoeff());
  EXPECT_EQ(system.free_unknowns.size(), 2 * mesh.num_nodes() - 1);
}

TEST(Darcy, MaximumPrincipleAcrossExchange) {
  const auto mesh = cube(3);
  const auto params = testing::two_compartment_params(mesh, Mat3::Identity(), 2.0);
  SourceSpec first{1, {}};
  for (std::size_t a = 0; a < mesh.num_nodes(); ++a)
    first.conditions.push_back({static_cast<int>(a), Kind::pressure, 1.0});
  const std::vector<SourceSpec> sources{first, {2, {{0, Kind::pressure, 0.0}}}};
  const auto sol = solve_multicompartment(assemble(mesh, params, sources), mesh, params);
  for (std::size_t a = 1; a < mesh.num_nodes(); ++a) {
    EXPECT_GT(sol.pressures[1].values[a], 0.0);
    EXPECT_LT(sol.pressures[1].values[a], 1.0);
  }
}

TEST(Darcy, NoDirichletIsSolverError) {
  const auto mesh = cube(2);
  const auto params = testing::two_compartment_params(mesh, Mat3::Identity(), 1.0);
  const std::vector<SourceSpec> sources{{1, {{0, Kind::flux, 1.0}}}};
  EXPECT_THROW(assemble(mesh, params, sources), SolverError);
}

TEST(Darcy, MalformedSourcesAreContractErrors) {
  const auto mesh = cube(2);
  const auto params = testing::uniform_params(mesh, Mat3::Identity());
  const std::vector<SourceSpec> twice{{1, {{0, Kind::pressure, 0.0}, {0, Kind::flux, 1.0}}}};
  EXPECT_THROW(assemble(mesh, params, twice), ContractError);
  const std::vector<SourceSpec> outside{{1, {{0, Kind::pressure, 0.0}, {999, Kind::flux, 1.0}}}};
  EXPECT_THROW(assemble(mesh, params, outside), ContractError);
  const std::vector<SourceSpec> missing{{4, {{0, Kind::pressure, 0.0}}}};
  EXPECT_THROW(assemble(mesh, params, missing), ContractError);
}

TEST(Darcy, ExchangeBalancesPointSource) {
  const auto mesh = cube(4);
  const auto params = testing::two_compartment_params(mesh, Mat3::Identity(), 3.0);
  const double q = 2.5e-3;
  const int src = node_at(mesh, Vec3(0.25, 0.5, 0.5));
  const int sink = node_at(mesh, Vec3(0.75, 0.5, 0.5));
  const std::vector<SourceSpec> sources{{1, {{src, Kind::flux, q}}}, {2, {{sink, Kind::pressure, 0.0}}}};
  const auto sol = solve_multicompartment(assemble(mesh, params, sources), mesh, params);
  ASSERT_EQ(sol.exchange_totals.size(), 1u);
  EXPECT_NEAR(sol.exchange_totals[0], q, 1e-8 * q);
  EXPECT_NEAR(sol.nodal_sources[1].values[static_cast<std::size_t>(sink)], -q, 1e-8 * q);
  const auto &n1 = sol.nodal_sources[0].values;
  EXPECT_NEAR(std::accumulate(n1.begin(), n1.end(), 0.0), q, 1e-12 * q);
  EXPECT_LE(sol.residual, 1e-10);
}

TEST(Darcy, ExchangeAntisymmetry) {
  const auto mesh = cube(3);
  const auto params = testing::two_compartment_params(mesh, Mat3::Identity(), 1.5);
  const std::vector<SourceSpec> sources{{1, {{3, Kind::flux, 1.0}}}, {2, {{20, Kind::pressure, 0.0}}}};
  const auto sol = solve_multicompartment(assemble(mesh, params, sources), mesh, params);
  const auto j12 = exchange_flux(sol, 1, 2);
  const auto j21 = exchange_flux(sol, 2, 1);
  for (std::size_t c = 0; c < mesh.num_cells(); ++c)
    EXPECT_EQ(j12.values[c] + j21.values[c], 0.0);
  EXPECT_THROW(exchange_flux(sol, 1, 3), ContractError);
}

TEST(Darcy, ScalingInvariance) {
  const auto mesh = cube(3);
  Mat3 k;
  k << 1.5, 0.2, 0, 0.2, 1, 0, 0, 0, 0.7;
  const double alpha = 37.0;
  auto params = testing::two_compartment_params(mesh, k, 0.8);
  const std::vector<SourceSpec> sources{{1, {{2, Kind::flux, 0.01}, {40, Kind::flux, 0.02}}},
                                        {2, {{55, Kind::pressure, 3.0}}}};
  const auto base = solve_multicompartment(assemble(mesh, params, sources), mesh, params);
  for (auto &f : params.permeability)
    for (auto &t : f.values)
      t *= alpha;
  for (auto &g : params.couplings[0].coefficient.values)
    g *= alpha;
  auto scaled_sources = sources;
  for (auto &c : scaled_sources[0].conditions)
    c.value *= alpha;
  const auto scaled = solve_multicompartment(assemble(mesh, params, scaled_sources), mesh, params);
  for (int i = 0; i < 2; ++i)
    EXPECT_LE(testing::max_relative_difference(scaled.pressures[static_cast<std::size_t>(i)].values,
                                               base.pressures[static_cast<std::size_t>(i)].values),
              1e-8);
}

TEST(Darcy, PointSymmetricSolution) {
  // the Kuhn cube mesh is invariant under inversion through its center
  const auto mesh = cube(4);
  const auto params = testing::uniform_params(mesh, Mat3::Identity());
  const int a = node_at(mesh, Vec3(0.25, 0.5, 0.75));
  const int b = node_at(mesh, Vec3(0.75, 0.5, 0.25));
  const int center = node_at(mesh, Vec3(0.5, 0.5, 0.5));
  const std::vector<SourceSpec> sources{
      {1, {{a, Kind::flux, 1.0}, {b, Kind::flux, 1.0}, {center, Kind::pressure, 0.0}}}};
  const auto sol = solve_multicompartment(assemble(mesh, params, sources), mesh, params);
  const auto &p = sol.pressures[0].values;
  for (std::size_t n = 0; n < mesh.num_nodes(); ++n) {
    const int m = node_at(mesh, Vec3::Ones() - mesh.nodes()[n]);
    EXPECT_NEAR(p[n], p[static_cast<std::size_t>(m)], 1e-8 * std::abs(p[static_cast<std::size_t>(a)]));
  }
}

TEST(Darcy, OperatorMatchesDirectSolve) {
  const auto mesh = cube(3);
  const auto params = testing::two_compartment_params(mesh, Mat3::Identity(), 0.5);
  std::vector<SourceSpec> sources{{1, {{4, Kind::flux, 0.3}}}, {2, {{30, Kind::pressure, 10.0}}}};
  const auto direct = solve_multicompartment(assemble(mesh, params, sources), mesh, params);
  for (auto solver : {LinearSolverKind::cg, LinearSolverKind::cholesky}) {
    DarcyOptions opts;
    opts.solver = solver;
    DarcyOperator op(mesh, params, sources, opts);
    const auto a = op.solve(sources);
    EXPECT_LE(testing::max_relative_difference(a.pressures[1].values, direct.pressures[1].values), 1e-9);
    sources[0].conditions[0].value = 0.6;
    sources[1].conditions[0].value = 20.0;
    const auto b = op.solve(sources);
    // linear in the data: doubling every datum doubles the pressures
    EXPECT_LE(testing::max_relative_difference(b.pressures[0].values, [&] {
                auto v = a.pressures[0].values;
                for (auto &x : v)
                  x *= 2.0;
                return v;
              }()),
              1e-9);
    sources[0].conditions[0].value = 0.3;
    sources[1].conditions[0].value = 10.0;
    std::vector<SourceSpec> other{{1, {{5, Kind::flux, 0.3}}}, {2, {{30, Kind::pressure, 10.0}}}};
    EXPECT_THROW(op.solve(other), ContractError);
  }
}

TEST(DarcyVelocity, LinearFields) {
  const auto mesh = cube(2);
  NodeField constant{1, std::vector<double>(mesh.num_nodes(), 3.0)};
  NodeField px{1, {}};
  for (const auto &x : mesh.nodes())
    px.values.push_back(x.x());
  const TensorCellField eye{1, std::vector<Mat3>(mesh.num_cells(), Mat3::Identity())};
  Mat3 d = Mat3::Identity();
  d(0, 0) = 2.0;
  const TensorCellField aniso{1, std::vector<Mat3>(mesh.num_cells(), d)};
  for (const auto &w : darcy_velocity(mesh, constant, eye).values)
    EXPECT_LE(w.norm(), 1e-14);
  for (const auto &w : darcy_velocity(mesh, px, eye).values)
    EXPECT_LE((w - Vec3(-1, 0, 0)).norm(), 1e-13);
  for (const auto &w : darcy_velocity(mesh, px, aniso).values)
    EXPECT_LE((w - Vec3(-2, 0, 0)).norm(), 1e-13);
  EXPECT_THROW(darcy_velocity(mesh, NodeField{1, {1.0}}, eye), ContractError);
}

TEST(Darcy, ManufacturedSolutionSecondOrder) {
  const auto coarse = testing::darcy_mms(6);
  const auto fine = testing::darcy_mms(8);
  const double order = std::log(coarse.l2_error / fine.l2_error) / std::log(coarse.h / fine.h);
  EXPECT_GE(order, 1.8) << coarse.l2_error << " " << fine.l2_error;
  const auto direct = testing::darcy_mms(8, LinearSolverKind::cholesky);
  EXPECT_NEAR(direct.l2_error, fine.l2_error, 1e-6 * fine.l2_error);
}

} // namespace
} // namespace perfusim
