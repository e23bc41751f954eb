// Copyright 2026 The perfusim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <vector>

#include "perfusim/coupling.hpp"
#include "perfusim/darcy.hpp"
#include "perfusim/flow1d.hpp"
#include "perfusim/geometry.hpp"
#include "perfusim/upscale.hpp"
#include "perfusim/vtree.hpp"

namespace perfusim {

/// Inlet saturation profile S(t) = peak (1 - cos(2 pi t / T)) on [0, T], 0 afterwards.
struct BolusSpec {
  double peak = 0.4;     ///< S_bar; the maximum inlet saturation is 2 S_bar
  double duration = 2.0; ///< T, s
};

/// Throws ConfigError unless 0 <= 2 peak <= 1 and duration > 0.
void validate_bolus(const BolusSpec &spec);
double bolus(double t, const BolusSpec &spec);

/// Segments slower than this carry no tracer.
inline constexpr double kStagnantVelocity = 1e-12; // m/s

struct TransitionTimes {
  std::vector<double> times;  ///< L / |w| per segment, s (infinite when stagnant)
  std::vector<char> stagnant;
};

TransitionTimes transition_times(const VascularTree &tree, const TreeFlowState &flow);

/// Saturation history of one junction at uniform step resolution.
///
/// Holds the values at t = 0, dt, 2 dt, ... back to `capacity` steps; times
/// before zero return the initial value.
class JunctionHistory {
public:
  JunctionHistory(double dt, std::size_t capacity, double initial = 0.0);
  void push(double value); ///< value at the next step time
  double latest() const { return values_[(head_ + count_ - 1) % values_.size()]; }
  /// Linear interpolation at time t. Throws SolverError when t is older than the buffer.
  double at(double t) const;
  std::size_t steps() const noexcept { return steps_; } ///< index of the latest stored step

private:
  double dt_;
  std::vector<double> values_;
  std::size_t head_ = 0;
  std::size_t count_ = 0;
  std::size_t steps_ = 0;
  double initial_;
};

/// Delay-line transport on one tree with flux-weighted junction mixing.
class NetworkTransport {
public:
  NetworkTransport(const VascularTree &tree, const TreeFlowState &flow, double dt);

  /// Junctions that receive no tracer from any segment; their saturation is prescribed.
  const std::vector<int> &inlets() const noexcept { return inlets_; }
  const TransitionTimes &transition() const noexcept { return times_; }
  double time() const noexcept { return static_cast<double>(step_) * dt_; }
  double saturation(int junction) const;

  /// Advances one step. `boundary(j, t)` gives the saturation of inlet junction j at the new time.
  void step(const std::function<double(int, double)> &boundary);

private:
  const VascularTree *tree_;
  double dt_;
  std::size_t step_ = 0;
  TransitionTimes times_;
  std::vector<double> weights_;   ///< A |w| per segment
  std::vector<int> source_;       ///< flow-upstream junction per segment
  std::vector<std::vector<int>> incoming_;
  std::vector<int> order_;        ///< junctions in flow order
  std::vector<int> inlets_;
  std::vector<char> is_inlet_;
  std::vector<JunctionHistory> history_;
};

/// Nodal (median dual) transport data for the compartments.
struct CompartmentFlow {
  struct Exchange {
    int first = 0;
    int second = 0;
    std::vector<double> nodal; ///< m^3/s from first to second
  };
  std::vector<std::vector<double>> storage;       ///< [comp][node] sum phi V / 4, m^3
  std::vector<std::vector<double>> edge_fluxes;   ///< [comp][edge] m^3/s along (a < b)
  std::vector<Exchange> exchange;
  std::vector<std::vector<double>> nodal_sources; ///< [comp][node] m^3/s, positive injects
};

CompartmentFlow compartment_flow(const Mesh &mesh, const PerfusionParams &params, const PressureSolution &solution);

/// Largest stable explicit step: safety * min over nodes of storage / outflow.
double cfl_time_step(const Mesh &mesh, const CompartmentFlow &flow, double safety = 0.5);

struct StepBudget {
  double injected = 0.0; ///< tracer volume entering through sources, m^3
  double drained = 0.0;  ///< tracer volume leaving through sinks, m^3
};

/// One explicit upwind step of the nodal saturations `s` ([comp][node]).
/// `inflow` gives the saturation carried by positive sources. Throws
/// SolverError when dt exceeds the CFL bound or a saturation leaves [0, 1]
/// by more than 1e-12.
StepBudget step_compartments(const Mesh &mesh, const CompartmentFlow &flow, const std::vector<std::vector<double>> &inflow,
                             double dt, std::vector<std::vector<double>> &s);

/// C = sum phi^i S^i per cell.
ScalarCellField total_concentration(const std::vector<ScalarCellField> &saturation,
                                    const std::vector<ScalarCellField> &porosity);

/// Nodal C = sum storage^i S^i / dual volume.
NodeField nodal_concentration(const Mesh &mesh, const CompartmentFlow &flow, const std::vector<std::vector<double>> &s);

/// Cell average of a nodal field.
ScalarCellField cell_average(const Mesh &mesh, const NodeField &field);

struct PerfusionTestOptions {
  double t_end = 10.0;          ///< s
  double output_interval = 0.1; ///< s between probe samples
  double max_time_step = 0.0;   ///< s, 0 for the CFL limit only
  double cfl_safety = 0.5;
  std::vector<Vec3> probes;
  std::vector<double> snapshot_times;
};

struct Snapshot {
  double time = 0.0;
  std::vector<NodeField> saturation; ///< per compartment
  NodeField concentration;
};

struct BudgetRecord {
  double time = 0.0;
  double stored = 0.0;
  double injected = 0.0;
  double drained = 0.0;
  double relative_error = 0.0; ///< |stored + drained - injected| / injected
};

struct PerfusionTestResult {
  double dt = 0.0;
  std::size_t steps = 0;
  std::vector<int> probe_nodes;
  std::vector<double> times;
  /// [probe][sample] values: S per compartment then C.
  std::vector<std::vector<std::vector<double>>> probe_values;
  std::vector<Snapshot> snapshots;
  std::vector<BudgetRecord> budget;
  double max_budget_error = 0.0;
  double max_bound_violation = 0.0; ///< largest excursion of S, network S or C / sum phi outside [0, 1]
};

/// Contrast-agent transport through the portal tree, the compartments and the hepatic tree.
PerfusionTestResult simulate_perfusion_test(const CoupledFlowState &coupled, const Mesh &mesh,
                                            const PerfusionParams &params, const BolusSpec &bolus_spec,
                                            const PerfusionTestOptions &options);

/// CSV: time, then S1, S2, S3 and C for each probe.
void write_probe_csv(const PerfusionTestResult &result, const std::filesystem::path &path);

} // namespace perfusim
