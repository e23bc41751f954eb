// Copyright 2026 The perfusim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <span>
#include <vector>

#include <Eigen/Sparse>

#include "perfusim/geometry.hpp"
#include "perfusim/upscale.hpp"

namespace perfusim {

/// Point condition at a mesh node for one compartment.
struct NodeCondition {
  enum class Kind { flux, pressure };
  int node = -1;
  Kind kind = Kind::flux;
  double value = 0.0; ///< m^3/s (positive injects) or Pa
};

struct SourceSpec {
  int compartment = 1; ///< 1-based
  std::vector<NodeCondition> conditions;
};

enum class LinearSolverKind {
  cg,       ///< conjugate gradients, diagonal preconditioner
  cholesky  ///< sparse LDL^T factorization
};

struct DarcyOptions {
  LinearSolverKind solver = LinearSolverKind::cg;
  double tolerance = 1e-10;  ///< relative residual
  int max_iterations = 0;    ///< 0 means 10 * unknowns
};

/// P1 system over all compartments, before and after Dirichlet elimination.
///
/// Unknown (node a, compartment i) has global index (i - 1) * N + a.
struct LinearSystem {
  std::size_t num_nodes = 0;
  int num_compartments = 0;
  Eigen::SparseMatrix<double> full;   ///< stiffness + lumped exchange, no boundary conditions
  Eigen::VectorXd loads;              ///< nodal flux sources, global numbering
  std::vector<int> reduced_index;     ///< global -> free unknown index, -1 at Dirichlet unknowns
  std::vector<int> free_unknowns;     ///< free unknown -> global index
  Eigen::VectorXd dirichlet_values;   ///< prescribed pressures (0 at free unknowns)
  Eigen::SparseMatrix<double> matrix; ///< reduced, symmetric positive definite
  Eigen::VectorXd rhs;
};

/// Stiffness entry of each mesh edge, per compartment: the flux along edge
/// (a, b) with a < b is -coeff * (p_a - p_b).
struct EdgeConductances {
  std::vector<std::vector<double>> values; ///< [compartment - 1][edge]
};

EdgeConductances edge_conductances(const Mesh &mesh, const PerfusionParams &params);

/// Lumped exchange weights M_a = sum over cells c at a of G_c V_c / 4, per coupling.
std::vector<std::vector<double>> lumped_exchange(const Mesh &mesh, const PerfusionParams &params);

/// Throws ContractError for malformed sources and SolverError when some group of
/// exchange-connected compartments has no Dirichlet node.
LinearSystem assemble(const Mesh &mesh, const PerfusionParams &params, std::span<const SourceSpec> sources);

struct PressureSolution {
  std::vector<NodeField> pressures;       ///< per compartment, Pa
  std::vector<VectorCellField> velocities; ///< per compartment, m/s
  /// Per coupling (same order as params.couplings): J = G (mean p_first - mean p_second) per cell, 1/s.
  std::vector<CouplingField> exchange;
  /// Net flux injected at each node (m^3/s): the prescribed source at flux nodes,
  /// the reaction at Dirichlet nodes (negative where the node drains).
  std::vector<NodeField> nodal_sources;
  /// Flux along each edge (a < b, positive from a to b), per compartment, m^3/s.
  std::vector<std::vector<double>> edge_fluxes;
  /// Lumped exchange per coupling and node, M_a (p_first - p_second), m^3/s.
  std::vector<std::vector<double>> nodal_exchange;
  /// Total exchange per coupling from first to second (m^3/s).
  std::vector<double> exchange_totals;
  int iterations = 0;
  double residual = 0.0; ///< relative algebraic residual
};

/// Exchange flux from compartment i into j per cell (antisymmetric in i, j).
ScalarCellField exchange_flux(const PressureSolution &solution, int i, int j);

/// Solves an assembled system. Throws SolverError with the residual history on divergence.
PressureSolution solve_multicompartment(const LinearSystem &system, const Mesh &mesh,
                                        const PerfusionParams &params, const DarcyOptions &options = {});

/// Cached operator for repeated solves with the same matrix and Dirichlet node set.
///
/// Only the flux values and the Dirichlet values may change between solves.
class DarcyOperator {
public:
  DarcyOperator(const Mesh &mesh, const PerfusionParams &params, std::span<const SourceSpec> layout,
                const DarcyOptions &options = {});
  ~DarcyOperator();
  DarcyOperator(const DarcyOperator &) = delete;
  DarcyOperator &operator=(const DarcyOperator &) = delete;

  /// `sources` must list the same nodes and kinds as the layout, in the same order.
  PressureSolution solve(std::span<const SourceSpec> sources);

  const LinearSystem &system() const noexcept { return system_; }

private:
  struct Impl;
  const Mesh *mesh_;
  const PerfusionParams *params_;
  DarcyOptions options_;
  LinearSystem system_;
  std::vector<SourceSpec> layout_;
  std::unique_ptr<Impl> impl_;
  Eigen::VectorXd guess_;
};

/// w = -K grad p per cell (P1 gradient).
VectorCellField darcy_velocity(const Mesh &mesh, const NodeField &pressure, const TensorCellField &permeability);

} // namespace perfusim
