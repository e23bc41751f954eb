// Copyright 2026 The perfusim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <vector>

#include "perfusim/darcy.hpp"
#include "perfusim/flow1d.hpp"
#include "perfusim/upscale.hpp"
#include "perfusim/vtree.hpp"

namespace perfusim {

struct CouplingOptions {
  enum class Acceleration {
    none,     ///< under-relaxed fixed point
    anderson, ///< Anderson mixing on ramp-normalized interface values
    newton    ///< Newton on g(x) - x with a finite-difference Jacobian
  };
  int pseudo_steps = 10;      ///< ramp length N
  int max_iterations = 200;
  double tolerance = 1e-6;    ///< max relative change of the interface values
  double relaxation = 0.5;
  Acceleration acceleration = Acceleration::newton;
  int anderson_depth = 40;
  double newton_step = 1e-6; ///< relative finite-difference step for the interface Jacobian
  Fluid fluid;
  NewtonOptions newton;
  DarcyOptions darcy;
};

/// One terminal junction of an upper tree and its shared mesh node.
struct InterfaceEntry {
  int junction = -1;
  int node = -1;
  int compartment = 0;
  double flux = 0.0;     ///< m^3/s into the compartment (negative for sinks)
  double pressure = 0.0; ///< Pa
};

struct IterationRecord {
  int iteration = 0;
  double ramp = 0.0;
  double residual = 0.0;    ///< max relative interface change
  double balance_gap = 0.0; ///< |sources + sinks| / sources in the Darcy solve
};

struct MassBalance {
  double portal_inflow = 0.0;   ///< portal root flux, m^3/s
  double hepatic_outflow = 0.0; ///< flux leaving the hepatic root, m^3/s
  double exchange_12 = 0.0;
  double exchange_23 = 0.0;
  double max_relative_gap = 0.0; ///< largest pairwise difference over the portal inflow
};

struct CoupledFlowState {
  VascularTree portal;
  VascularTree hepatic;
  TreeFlowState portal_flow;
  TreeFlowState hepatic_flow;
  PressureSolution darcy;
  std::vector<InterfaceEntry> portal_interface;  ///< compartment 1, terminals() order
  std::vector<InterfaceEntry> hepatic_interface; ///< compartment 3, terminals() order
  std::vector<IterationRecord> log;
  int iterations = 0;
  int newton_iterations = 0; ///< summed over all tree solves
  int cg_iterations = 0;     ///< summed over all Darcy solves
  bool converged = false;
};

/// Nearest mesh node for each terminal of `tree`. Throws ConfigError when two
/// terminals share a node.
std::vector<int> map_terminals(const VascularTree &tree, const Mesh &mesh, const std::string &name);

/// Interface values read back from a Darcy solution: compartment-1 pressures at
/// the portal nodes and hepatic terminal velocities w = Q / A from the
/// compartment-3 reaction fluxes (negative where blood leaves the tissue).
struct InterfaceValues {
  std::vector<double> portal_pressures;
  std::vector<double> hepatic_velocities;
};
InterfaceValues interface_update(const VascularTree &portal, const VascularTree &hepatic,
                                 const std::vector<int> &portal_nodes, const std::vector<int> &hepatic_nodes,
                                 const PressureSolution &darcy);

/// Pseudo-time fixed point between the portal tree (inlet velocity), the
/// hepatic tree (outlet pressure) and the three-compartment Darcy model.
/// Boundary values ramp linearly over `pseudo_steps` iterations. Throws
/// SolverError when the iteration does not converge.
CoupledFlowState couple_steady(const VascularTree &portal, const VascularTree &hepatic, const Mesh &mesh,
                               const PerfusionParams &params, double v_in, double p_out,
                               const CouplingOptions &options = {});

MassBalance mass_balance(const CoupledFlowState &state);

/// CSV with columns iteration, ramp, residual, balance_gap.
void write_iteration_log(const std::vector<IterationRecord> &log, const std::filesystem::path &path);

} // namespace perfusim
