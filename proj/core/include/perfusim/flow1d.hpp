// Copyright 2026 The perfusim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "perfusim/vtree.hpp"

namespace perfusim {

struct Fluid {
  double density = 1050.0;   ///< kg/m^3
  double viscosity = 3.5e-3; ///< Pa s
};

/// Laminar (Poiseuille) pressure loss along one segment, signed with `w`.
///
/// The Darcy-Weisbach form 1/2 rho lambda w|w| with lambda = 64/Re * L/D and
/// Re = rho |w| D / mu collapses to 32 mu L w / D^2, which stays regular at w = 0.
double segment_pressure_loss(double w, double length, double diameter, const Fluid &fluid);

/// Boundary data for one tree.
///
/// Velocities are measured along the root-to-leaf direction: `root_value` in
/// inlet mode is the velocity entering the root segment, and a terminal
/// velocity is positive when blood leaves the tree at that terminal.
struct TreeFlowBC {
  enum class Mode {
    inlet_velocity, ///< root velocity + terminal pressures given (portal tree)
    outlet_pressure ///< root pressure + terminal velocities given (hepatic tree)
  };
  Mode mode = Mode::inlet_velocity;
  double root_value = 0.0;
  std::vector<double> terminal_values; ///< ordered like VascularTree::terminals()
};

struct TreeFlowState {
  std::vector<double> junction_pressures; ///< Pa
  std::vector<double> segment_velocities; ///< m/s, positive from tail to head
  Fluid fluid;
  int newton_iterations = 0;
  double residual = 0.0;     ///< final scaled residual (max norm)
  double max_reynolds = 0.0;
};

struct NewtonOptions {
  int max_iterations = 50;
  double tolerance = 1e-10;
};

/// Steady flow from junction continuity and the modified Bernoulli equation.
///
/// Along every segment e (upstream junction u, downstream d, parent segment
/// e_p entering u):  p_u + rho/2 q_p|q_p| = p_d + rho/2 q_e|q_e| + loss(q_e), where
/// q is the root-to-leaf velocity. The signed kinetic terms equal the usual
/// squares for forward flow and keep the balance along the actual flow
/// direction when a segment reverses. The root segment uses its own velocity
/// as the upstream kinetic term. Newton iteration starts from the rho = 0
/// (linear resistor) solution and halves steps that increase the residual.
/// Throws SolverError on non-convergence or a singular Jacobian.
TreeFlowState solve_tree_flow(const VascularTree &tree, const TreeFlowBC &bc, const Fluid &fluid,
                              const NewtonOptions &options = {});

/// Velocity of segment e along the root-to-leaf direction.
double downstream_velocity(const VascularTree &tree, const TreeFlowState &state, int e);

/// Volumetric flow entering the root segment (m^3/s, root-to-leaf positive).
double root_flux(const VascularTree &tree, const TreeFlowState &state);

/// Volumetric flow leaving the tree through each terminal (m^3/s), ordered like terminals().
std::vector<double> terminal_fluxes(const VascularTree &tree, const TreeFlowState &state);

/// Max scaled residuals of the continuity and Bernoulli equations (diagnostics and tests).
struct TreeFlowResiduals {
  double continuity = 0.0; ///< max |sum A w| / root flux scale
  double bernoulli = 0.0;  ///< max |Bernoulli residual| / pressure scale
};
TreeFlowResiduals tree_flow_residuals(const VascularTree &tree, const TreeFlowState &state);

} // namespace perfusim
