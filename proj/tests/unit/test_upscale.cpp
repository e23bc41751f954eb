// Copyright 2026 The perfusim Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "perfusim/error.hpp"
#include "perfusim/mesh_builders.hpp"
#include "perfusim/upscale.hpp"
#include "test_support.hpp"

namespace perfusim {
namespace {

constexpr double kMu = 3.5e-3;

/// One tetrahedron of volume 1e-6 m^3.
Mesh micro_tet() {
  const double a = std::cbrt(6e-6);
  return Mesh({Vec3(0, 0, 0), Vec3(a, 0, 0), Vec3(0, a, 0), Vec3(0, 0, a)}, {Cell{0, 1, 2, 3}});
}

LowerSegment segment_at(const Vec3 &mid, const Vec3 &dir, double diameter, double length) {
  LowerSegment s;
  const Vec3 half = 0.5 * 1e-4 * dir.normalized();
  s.upstream_position = mid - half;
  s.downstream_position = mid + half;
  s.diameter = diameter;
  s.length = length;
  s.leaf = true;
  return s;
}

CompartmentSpec all_diameters() {
  return {1, VesselGroup::portal, 0.0, 1.0, 0};
}

const Vec3 kInside(0.004, 0.004, 0.004);

TEST(Permeability, SingleSegmentHandValue) {
  const auto mesh = micro_tet();
  const std::vector<LowerSegment> segs{segment_at(kInside, Vec3::UnitX(), 1e-3, 0.01)};
  const auto k = average_permeability(segs, mesh, all_diameters(), kMu);
  const double r = 0.5e-3;
  const double expected = M_PI * std::pow(r, 4) * 0.01 / (8.0 * kMu * 1e-6);
  EXPECT_NEAR(k.values[0](0, 0), expected, 1e-12 * expected);
  EXPECT_NEAR(expected, 7.0e-8, 0.02e-8);
  Mat3 rest = k.values[0];
  rest(0, 0) = 0.0;
  EXPECT_LE(rest.cwiseAbs().maxCoeff(), 1e-12 * expected);
}

TEST(Permeability, EmptyCellIsZero) {
  const auto mesh = make_box_mesh(Vec3::Zero(), Vec3::Ones(), {1, 1, 1});
  const auto k = average_permeability({}, mesh, all_diameters(), kMu);
  for (const auto &t : k.values)
    EXPECT_EQ(t, Mat3::Zero());
  EXPECT_FALSE(support_norm(k, mesh).has_value());
}

TEST(Permeability, OrthogonalSegmentsGiveDiagonal) {
  const auto mesh = micro_tet();
  const std::vector<LowerSegment> segs{segment_at(kInside, Vec3::UnitX(), 1e-3, 0.01),
                                       segment_at(kInside, Vec3::UnitY(), 1e-3, 0.01)};
  const auto k = average_permeability(segs, mesh, all_diameters(), kMu).values[0];
  EXPECT_NEAR(k(0, 0), k(1, 1), 1e-12 * k(0, 0));
  EXPECT_EQ(k(2, 2), 0.0);
  EXPECT_NEAR(k(0, 1), 0.0, 1e-12 * k(0, 0));
}

TEST(Permeability, RotationEquivariance) {
  const auto mesh = micro_tet();
  // quarter turn about z maps the axes onto each other exactly
  Mat3 rot;
  rot << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  const std::vector<Vec3> dirs{Vec3(1, 2, 0.5), Vec3(-0.3, 1, 1), Vec3(0, 0, 1)};
  std::vector<LowerSegment> a, b;
  for (const auto &d : dirs) {
    a.push_back(segment_at(kInside, d, 8e-4, 0.005));
    b.push_back(segment_at(kInside, rot * d, 8e-4, 0.005));
  }
  const Mat3 ka = average_permeability(a, mesh, all_diameters(), kMu).values[0];
  const Mat3 kb = average_permeability(b, mesh, all_diameters(), kMu).values[0];
  EXPECT_LE((kb - rot * ka * rot.transpose()).cwiseAbs().maxCoeff(), 1e-14 * ka.norm());
}

TEST(Permeability, Additivity) {
  const auto mesh = make_box_mesh(Vec3::Zero(), Vec3(0.02, 0.02, 0.02), {2, 2, 2});
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> u(0.001, 0.019);
  std::vector<LowerSegment> first, second, both;
  for (int k = 0; k < 40; ++k) {
    const auto s = segment_at(Vec3(u(rng), u(rng), u(rng)), Vec3(u(rng), u(rng), u(rng)), 5e-4, 0.003);
    (k % 2 ? first : second).push_back(s);
    both.push_back(s);
  }
  const auto k1 = average_permeability(first, mesh, all_diameters(), kMu);
  const auto k2 = average_permeability(second, mesh, all_diameters(), kMu);
  const auto kb = average_permeability(both, mesh, all_diameters(), kMu);
  for (std::size_t c = 0; c < mesh.num_cells(); ++c) {
    const Mat3 sum = k1.values[c] + k2.values[c];
    EXPECT_LE((kb.values[c] - sum).cwiseAbs().maxCoeff(), 1e-12 * std::max(sum.norm(), 1e-30));
  }
  EXPECT_TRUE(is_symmetric(kb));
}

TEST(Permeability, DiameterRangeSelectsSegments) {
  const auto mesh = micro_tet();
  const std::vector<LowerSegment> segs{segment_at(kInside, Vec3::UnitX(), 1e-3, 0.01),
                                       segment_at(kInside, Vec3::UnitY(), 2e-3, 0.01)};
  const CompartmentSpec narrow{1, VesselGroup::portal, 5e-4, 1e-3, 0};
  const auto k = average_permeability(segs, mesh, narrow, kMu).values[0];
  EXPECT_GT(k(0, 0), 0.0);
  EXPECT_EQ(k(1, 1), 0.0);
}

TEST(Porosity, SingleSegmentHandValue) {
  const auto mesh = micro_tet();
  const std::vector<LowerSegment> segs{segment_at(kInside, Vec3::UnitX(), 1e-3, 0.01)};
  const auto phi = average_porosity(segs, mesh, all_diameters());
  EXPECT_NEAR(phi.values[0], M_PI * 0.25e-6 * 0.01 / 1e-6, 1e-15);
  EXPECT_NEAR(phi.values[0], 7.85e-3, 0.01e-3);
  EXPECT_EQ(average_porosity({}, mesh, all_diameters()).values[0], 0.0);
}

TEST(Porosity, OverfullCellIsGeometryError) {
  const auto mesh = micro_tet();
  const std::vector<LowerSegment> segs{segment_at(kInside, Vec3::UnitX(), 1e-2, 0.1)};
  EXPECT_THROW(average_porosity(segs, mesh, all_diameters()), GeometryError);
}

TEST(Coupling, SingleBridgingSegmentHandValue) {
  const auto mesh = micro_tet();
  const std::vector<LowerSegment> segs{segment_at(kInside, Vec3::UnitX(), 1e-3, 0.01)};
  const auto g = perfusion_coupling_coeffs(segs, mesh, kMu);
  const double expected = M_PI * std::pow(0.5e-3, 4) / (8.0 * kMu * 0.01 * 1e-6);
  EXPECT_NEAR(g.values[0], expected, 1e-12 * expected);
  EXPECT_NEAR(expected, 7.0e-4, 0.02e-4);
  EXPECT_NEAR(perfusion_coupling_coeffs(segs, mesh, kMu, 3.0).values[0], 3.0 * expected, 1e-12 * expected);
  EXPECT_EQ(perfusion_coupling_coeffs({}, mesh, kMu).values[0], 0.0);
}

TEST(Coupling, InterfaceSegments) {
  const CompartmentSpec spec{1, VesselGroup::portal, 5e-4, 1e-3, 0};
  auto leaf = segment_at(kInside, Vec3::UnitX(), 8e-4, 0.01);
  auto inner = leaf;
  inner.leaf = false;
  inner.min_child_diameter = 6e-4;
  auto bridging = inner;
  bridging.min_child_diameter = 4e-4;
  const std::vector<LowerSegment> segs{leaf, inner, bridging};
  EXPECT_EQ(interface_segments(segs, spec).size(), 2u);
}

TEST(Regularize, ZeroTensorGetsShift) {
  const auto mesh = testing::unit_tet();
  const TensorCellField zero{1, {Mat3::Zero()}};
  const auto k = regularize(zero, mesh, 1e-3, 1e-9);
  EXPECT_LE((k.values[0] - 1e-12 * Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-27);
}

TEST(Regularize, EigenvaluesShiftExactly) {
  const auto mesh = testing::unit_tet();
  Mat3 a;
  a << 4, 1, 0, 1, 3, 0.5, 0, 0.5, 2;
  const auto k = regularize(TensorCellField{1, {a}}, mesh, 0.01, 10.0);
  const Eigen::SelfAdjointEigenSolver<Mat3> before(a), after(k.values[0]);
  for (int i = 0; i < 3; ++i)
    EXPECT_NEAR(after.eigenvalues()[i] - before.eigenvalues()[i], 0.1, 1e-13);
}

TEST(Regularize, DefaultScaleIsSupportNorm) {
  const auto mesh = make_box_mesh(Vec3::Zero(), Vec3::Ones(), {1, 1, 1});
  TensorCellField k{1, std::vector<Mat3>(6, Mat3::Zero())};
  k.values[2] = 2.0 * Mat3::Identity();
  ASSERT_TRUE(support_norm(k, mesh).has_value());
  EXPECT_NEAR(*support_norm(k, mesh), 2.0, 1e-14);
  const auto r = regularize(k, mesh, 1e-3);
  EXPECT_NEAR(r.values[0](1, 1), 2e-3, 1e-15);
  EXPECT_EQ(spectral_norms(r).size(), 6u);
}

TEST(Regularize, InvalidInputs) {
  const auto mesh = testing::unit_tet();
  const TensorCellField zero{1, {Mat3::Zero()}};
  EXPECT_THROW(regularize(zero, mesh, 0.0, 1e-9), ConfigError);
  EXPECT_THROW(regularize(zero, mesh, 1e-3), ConfigError);
  EXPECT_NO_THROW(regularize(zero, mesh, 1e-3, std::nullopt, 1e-9));
}

TEST(Regularize, PorosityShiftUsesSupportMean) {
  const auto mesh = make_box_mesh(Vec3::Zero(), Vec3::Ones(), {1, 1, 1});
  ScalarCellField phi{1, std::vector<double>(6, 0.0)};
  phi.values[0] = 0.02;
  phi.values[1] = 0.04;
  const auto r = regularize_porosity(phi, mesh, 0.1);
  EXPECT_NEAR(r.values[3], 0.003, 1e-15);
  EXPECT_NEAR(r.values[1], 0.043, 1e-15);
}

TEST(CompartmentSpecs, OverlapRejected) {
  const std::vector<CompartmentSpec> ok{{1, VesselGroup::portal, 1e-4, 1e-3, 0},
                                        {3, VesselGroup::hepatic, 1e-4, 1e-3, 0}};
  EXPECT_NO_THROW(validate_compartment_specs(ok));
  const std::vector<CompartmentSpec> bad{{1, VesselGroup::portal, 1e-4, 1e-3, 0},
                                         {2, VesselGroup::portal, 5e-4, 2e-3, 1}};
  EXPECT_THROW(validate_compartment_specs(bad), ConfigError);
}

TEST(ThreeCompartments, PartitionOfUnityAndCouplings) {
  const auto mesh = make_box_mesh(Vec3::Zero(), Vec3(0.02, 0.02, 0.02), {2, 2, 2});
  std::mt19937 rng(9);
  std::uniform_real_distribution<double> u(0.001, 0.019);
  std::vector<LowerSegment> portal, hepatic;
  for (int k = 0; k < 30; ++k) {
    portal.push_back(segment_at(Vec3(u(rng), u(rng), u(rng)), Vec3(u(rng), u(rng), u(rng)), 6e-4, 0.003));
    hepatic.push_back(segment_at(Vec3(u(rng), u(rng), u(rng)), Vec3(u(rng), u(rng), u(rng)), 5e-4, 0.003));
  }
  ThreeCompartmentInputs in;
  in.portal_segments = portal;
  in.hepatic_segments = hepatic;
  in.portal = {1, VesselGroup::portal, 1e-4, 1e-3, 0};
  in.hepatic = {3, VesselGroup::hepatic, 1e-4, 1e-3, 0};
  const auto p = build_three_compartment_params(mesh, in);
  EXPECT_NO_THROW(check_perfusion_params(p, mesh));
  ASSERT_EQ(p.num_compartments(), 3);
  ASSERT_NE(p.coupling(1, 2), nullptr);
  ASSERT_NE(p.coupling(2, 3), nullptr);
  EXPECT_EQ(p.coupling(1, 3), nullptr);
  for (std::size_t c = 0; c < mesh.num_cells(); ++c) {
    const double sum = p.porosity[0].values[c] + p.porosity[1].values[c] + p.porosity[2].values[c] +
                       p.matrix_fraction.values[c];
    EXPECT_NEAR(sum, 1.0, 1e-14);
    EXPECT_GE(p.matrix_fraction.values[c], 0.0);
    EXPECT_NEAR(p.porosity[1].values[c], 0.15, 1e-15);
    EXPECT_GT(p.permeability[0].values[c].eigenvalues().real().minCoeff(), 0.0);
  }
}

} // namespace
} // namespace perfusim
