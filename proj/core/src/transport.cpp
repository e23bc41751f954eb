// Copyright 2026 The perfusim Authors
// SPDX-License-Identifier: Apache-2.0

#include "perfusim/transport.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <queue>

#include <spdlog/spdlog.h>

#include "perfusim/error.hpp"

namespace perfusim {

namespace {

constexpr double kBoundTolerance = 1e-12;

double excursion(double s) { return std::max({0.0, -s, s - 1.0}); }

} // namespace

void validate_bolus(const BolusSpec &spec) {
  if (!(spec.peak >= 0.0 && 2.0 * spec.peak <= 1.0))
    throw ConfigError("bolus.peak", "must satisfy 0 <= 2 * peak <= 1");
  if (!(spec.duration > 0.0))
    throw ConfigError("bolus.duration", "must be positive");
}

double bolus(double t, const BolusSpec &spec) {
  if (t < 0.0 || t > spec.duration)
    return 0.0;
  return spec.peak * (1.0 - std::cos(2.0 * std::numbers::pi * t / spec.duration));
}

TransitionTimes transition_times(const VascularTree &tree, const TreeFlowState &flow) {
  TransitionTimes out;
  out.times.resize(tree.num_segments());
  out.stagnant.resize(tree.num_segments());
  for (std::size_t e = 0; e < tree.num_segments(); ++e) {
    const double w = std::abs(flow.segment_velocities[e]);
    if (w < kStagnantVelocity) {
      out.stagnant[e] = 1;
      out.times[e] = std::numeric_limits<double>::infinity();
    } else {
      out.times[e] = tree.segment(static_cast<int>(e)).length / w;
    }
  }
  return out;
}

JunctionHistory::JunctionHistory(double dt, std::size_t capacity, double initial)
    : dt_(dt), values_(std::max<std::size_t>(capacity, 2)), count_(1), initial_(initial) {
  values_[0] = initial;
}

void JunctionHistory::push(double value) {
  if (count_ < values_.size()) {
    values_[(head_ + count_) % values_.size()] = value;
    ++count_;
  } else {
    values_[head_] = value;
    head_ = (head_ + 1) % values_.size();
  }
  ++steps_;
}

double JunctionHistory::at(double t) const {
  if (t < 0.0)
    return initial_;
  const double pos = t / dt_;
  auto k = static_cast<std::size_t>(std::floor(pos));
  double frac = pos - static_cast<double>(k);
  if (k >= steps_) {
    if (pos > static_cast<double>(steps_) + 1e-9)
      throw SolverError("junction history: lookup beyond the latest stored time");
    return latest();
  }
  const std::size_t oldest = steps_ + 1 - count_;
  if (k < oldest)
    throw SolverError("junction history underflow: buffer too short for the transition time");
  const auto slot = [&](std::size_t step) { return values_[(head_ + (step - oldest)) % values_.size()]; };
  frac = std::clamp(frac, 0.0, 1.0);
  return (1.0 - frac) * slot(k) + frac * slot(k + 1);
}

NetworkTransport::NetworkTransport(const VascularTree &tree, const TreeFlowState &flow, double dt)
    : tree_(&tree), dt_(dt), times_(transition_times(tree, flow)) {
  if (!(dt > 0.0))
    throw ContractError("network transport: time step must be positive");
  const std::size_t nj = tree.num_junctions();
  const std::size_t ne = tree.num_segments();
  weights_.assign(ne, 0.0);
  source_.assign(ne, -1);
  incoming_.assign(nj, {});
  std::vector<int> outdeg(nj, 0);
  std::vector<std::vector<int>> outgoing(nj);
  double max_time = 0.0;
  for (std::size_t e = 0; e < ne; ++e) {
    if (times_.stagnant[e])
      continue;
    const int ei = static_cast<int>(e);
    const double w = downstream_velocity(tree, flow, ei);
    const int from = w > 0.0 ? tree.upstream(ei) : tree.downstream(ei);
    const int to = w > 0.0 ? tree.downstream(ei) : tree.upstream(ei);
    source_[e] = from;
    weights_[e] = tree.segment(ei).area() * std::abs(w);
    incoming_[static_cast<std::size_t>(to)].push_back(ei);
    outgoing[static_cast<std::size_t>(from)].push_back(to);
    ++outdeg[static_cast<std::size_t>(from)];
    max_time = std::max(max_time, times_.times[e]);
  }
  is_inlet_.assign(nj, 0);
  std::vector<int> indeg(nj, 0);
  for (std::size_t j = 0; j < nj; ++j) {
    indeg[j] = static_cast<int>(incoming_[j].size());
    if (indeg[j] == 0 && outdeg[j] > 0) {
      is_inlet_[j] = 1;
      inlets_.push_back(static_cast<int>(j));
    }
  }
  // Kahn ordering along the flow direction.
  std::queue<int> ready;
  for (std::size_t j = 0; j < nj; ++j)
    if (indeg[j] == 0)
      ready.push(static_cast<int>(j));
  while (!ready.empty()) {
    const int j = ready.front();
    ready.pop();
    order_.push_back(j);
    for (int k : outgoing[static_cast<std::size_t>(j)])
      if (--indeg[static_cast<std::size_t>(k)] == 0)
        ready.push(k);
  }
  if (order_.size() != nj)
    throw SolverError("network transport: flow directions contain a cycle");
  const auto capacity = static_cast<std::size_t>(std::ceil(max_time / dt)) + 3;
  history_.assign(nj, JunctionHistory(dt, capacity));
}

double NetworkTransport::saturation(int junction) const {
  return history_[static_cast<std::size_t>(junction)].latest();
}

void NetworkTransport::step(const std::function<double(int, double)> &boundary) {
  ++step_;
  const double t = time();
  for (int j : order_) {
    const auto uj = static_cast<std::size_t>(j);
    double value;
    if (is_inlet_[uj]) {
      value = boundary(j, t);
    } else if (incoming_[uj].empty()) {
      value = history_[uj].latest();
    } else {
      double num = 0.0, den = 0.0;
      for (int e : incoming_[uj]) {
        const auto ue = static_cast<std::size_t>(e);
        num += weights_[ue] * history_[static_cast<std::size_t>(source_[ue])].at(t - times_.times[ue]);
        den += weights_[ue];
      }
      value = num / den;
    }
    history_[uj].push(value);
  }
}

CompartmentFlow compartment_flow(const Mesh &mesh, const PerfusionParams &params, const PressureSolution &solution) {
  const std::size_t n = mesh.num_nodes();
  const auto geo = cell_geometry(mesh);
  CompartmentFlow flow;
  for (const auto &phi : params.porosity) {
    std::vector<double> m(n, 0.0);
    for (std::size_t c = 0; c < mesh.num_cells(); ++c)
      for (int v : mesh.cell(static_cast<int>(c)))
        m[static_cast<std::size_t>(v)] += 0.25 * phi.values[c] * geo.volumes[c];
    flow.storage.push_back(std::move(m));
  }
  flow.edge_fluxes = solution.edge_fluxes;
  for (std::size_t k = 0; k < solution.exchange.size(); ++k)
    flow.exchange.push_back({solution.exchange[k].first, solution.exchange[k].second, solution.nodal_exchange[k]});
  for (const auto &src : solution.nodal_sources)
    flow.nodal_sources.push_back(src.values);

  // The iterative solve leaves nodal imbalances at the level of its tolerance.
  // Folding them into the sources keeps S = 1 a fixed point of the update.
  std::vector<std::vector<double>> net(flow.storage.size(), std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < flow.edge_fluxes.size(); ++i)
    for (std::size_t e = 0; e < mesh.edges().size(); ++e) {
      const double f = flow.edge_fluxes[i][e];
      net[i][static_cast<std::size_t>(mesh.edges()[e][0])] -= f;
      net[i][static_cast<std::size_t>(mesh.edges()[e][1])] += f;
    }
  for (const auto &x : flow.exchange)
    for (std::size_t a = 0; a < n; ++a) {
      net[static_cast<std::size_t>(x.first - 1)][a] -= x.nodal[a];
      net[static_cast<std::size_t>(x.second - 1)][a] += x.nodal[a];
    }
  for (std::size_t i = 0; i < flow.nodal_sources.size(); ++i)
    for (std::size_t a = 0; a < n; ++a)
      flow.nodal_sources[i][a] = -net[i][a];
  return flow;
}

namespace {

std::vector<std::vector<double>> nodal_outflow(const Mesh &mesh, const CompartmentFlow &flow) {
  const std::size_t n = mesh.num_nodes();
  std::vector<std::vector<double>> out(flow.storage.size(), std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < flow.edge_fluxes.size(); ++i)
    for (std::size_t e = 0; e < mesh.edges().size(); ++e) {
      const double f = flow.edge_fluxes[i][e];
      const auto [a, b] = mesh.edges()[e];
      if (f > 0.0)
        out[i][static_cast<std::size_t>(a)] += f;
      else
        out[i][static_cast<std::size_t>(b)] -= f;
    }
  for (const auto &x : flow.exchange)
    for (std::size_t a = 0; a < n; ++a) {
      const double f = x.nodal[a];
      if (f > 0.0)
        out[static_cast<std::size_t>(x.first - 1)][a] += f;
      else
        out[static_cast<std::size_t>(x.second - 1)][a] -= f;
    }
  for (std::size_t i = 0; i < flow.nodal_sources.size(); ++i)
    for (std::size_t a = 0; a < n; ++a)
      out[i][a] += std::max(-flow.nodal_sources[i][a], 0.0);
  return out;
}

} // namespace

double cfl_time_step(const Mesh &mesh, const CompartmentFlow &flow, double safety) {
  const auto out = nodal_outflow(mesh, flow);
  double dt = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < out.size(); ++i)
    for (std::size_t a = 0; a < out[i].size(); ++a)
      if (out[i][a] > 0.0)
        dt = std::min(dt, flow.storage[i][a] / out[i][a]);
  return safety * dt;
}

StepBudget step_compartments(const Mesh &mesh, const CompartmentFlow &flow,
                             const std::vector<std::vector<double>> &inflow, double dt,
                             std::vector<std::vector<double>> &s) {
  const std::size_t n = mesh.num_nodes();
  const std::size_t nc = flow.storage.size();
  if (s.size() != nc || inflow.size() != nc)
    throw ContractError("step_compartments: saturation arrays do not match the compartments");
  std::vector<std::vector<double>> delta(nc, std::vector<double>(n, 0.0));
  std::vector<std::vector<double>> out(nc, std::vector<double>(n, 0.0));
  StepBudget budget;

  for (std::size_t i = 0; i < flow.edge_fluxes.size(); ++i) {
    const auto &si = s[i];
    auto &di = delta[i];
    auto &oi = out[i];
    for (std::size_t e = 0; e < mesh.edges().size(); ++e) {
      const double f = flow.edge_fluxes[i][e];
      const auto a = static_cast<std::size_t>(mesh.edges()[e][0]);
      const auto b = static_cast<std::size_t>(mesh.edges()[e][1]);
      const double carried = f > 0.0 ? f * si[a] : f * si[b];
      di[a] -= carried;
      di[b] += carried;
      if (f > 0.0)
        oi[a] += f;
      else
        oi[b] -= f;
    }
  }
  for (const auto &x : flow.exchange) {
    const auto i = static_cast<std::size_t>(x.first - 1);
    const auto j = static_cast<std::size_t>(x.second - 1);
    for (std::size_t a = 0; a < n; ++a) {
      const double f = x.nodal[a];
      const double carried = f > 0.0 ? f * s[i][a] : f * s[j][a];
      delta[i][a] -= carried;
      delta[j][a] += carried;
      if (f > 0.0)
        out[i][a] += f;
      else
        out[j][a] -= f;
    }
  }
  for (std::size_t i = 0; i < nc; ++i)
    for (std::size_t a = 0; a < n; ++a) {
      const double q = flow.nodal_sources[i][a];
      if (q > 0.0) {
        delta[i][a] += q * inflow[i][a];
        budget.injected += dt * q * inflow[i][a];
      } else if (q < 0.0) {
        delta[i][a] += q * s[i][a];
        budget.drained -= dt * q * s[i][a];
        out[i][a] -= q;
      }
    }

  for (std::size_t i = 0; i < nc; ++i)
    for (std::size_t a = 0; a < n; ++a) {
      const double m = flow.storage[i][a];
      if (m <= 0.0) {
        if (delta[i][a] != 0.0 || out[i][a] != 0.0)
          throw ContractError("step_compartments: flow through a node without storage");
        continue;
      }
      if (dt * out[i][a] > m * (1.0 + 1e-9))
        throw SolverError("transport: time step " + std::to_string(dt) + " s violates the CFL bound at node " +
                          std::to_string(a) + " of compartment " + std::to_string(i + 1));
      const double v = s[i][a] + dt * delta[i][a] / m;
      if (excursion(v) > kBoundTolerance)
        throw SolverError("transport: saturation " + std::to_string(v) + " left [0, 1] at node " + std::to_string(a) +
                          " of compartment " + std::to_string(i + 1));
      s[i][a] = v;
    }
  return budget;
}

ScalarCellField total_concentration(const std::vector<ScalarCellField> &saturation,
                                    const std::vector<ScalarCellField> &porosity) {
  if (saturation.size() != porosity.size() || saturation.empty())
    throw ContractError("total_concentration: compartment counts differ");
  const std::size_t nc = porosity.front().values.size();
  ScalarCellField c{0, std::vector<double>(nc, 0.0)};
  for (std::size_t i = 0; i < saturation.size(); ++i) {
    if (saturation[i].values.size() != nc || porosity[i].values.size() != nc)
      throw ContractError("total_concentration: fields are not sized alike");
    for (std::size_t k = 0; k < nc; ++k)
      c.values[k] += porosity[i].values[k] * saturation[i].values[k];
  }
  return c;
}

NodeField nodal_concentration(const Mesh &mesh, const CompartmentFlow &flow, const std::vector<std::vector<double>> &s) {
  const auto geo = cell_geometry(mesh);
  std::vector<double> dual(mesh.num_nodes(), 0.0);
  for (std::size_t c = 0; c < mesh.num_cells(); ++c)
    for (int v : mesh.cell(static_cast<int>(c)))
      dual[static_cast<std::size_t>(v)] += 0.25 * geo.volumes[c];
  NodeField out{0, std::vector<double>(mesh.num_nodes(), 0.0)};
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t a = 0; a < dual.size(); ++a)
      out.values[a] += flow.storage[i][a] * s[i][a];
  for (std::size_t a = 0; a < dual.size(); ++a)
    out.values[a] /= dual[a];
  return out;
}

ScalarCellField cell_average(const Mesh &mesh, const NodeField &field) {
  ScalarCellField out{field.compartment, std::vector<double>(mesh.num_cells(), 0.0)};
  for (std::size_t c = 0; c < mesh.num_cells(); ++c) {
    double sum = 0.0;
    for (int v : mesh.cell(static_cast<int>(c)))
      sum += field.values[static_cast<std::size_t>(v)];
    out.values[c] = 0.25 * sum;
  }
  return out;
}

PerfusionTestResult simulate_perfusion_test(const CoupledFlowState &coupled, const Mesh &mesh,
                                            const PerfusionParams &params, const BolusSpec &bolus_spec,
                                            const PerfusionTestOptions &options) {
  validate_bolus(bolus_spec);
  if (!(options.t_end > 0.0))
    throw ConfigError("transport.t_end", "must be positive");
  if (!(options.output_interval > 0.0))
    throw ConfigError("transport.output_interval", "must be positive");
  if (!(options.cfl_safety > 0.0 && options.cfl_safety <= 1.0))
    throw ConfigError("transport.cfl_safety", "must lie in (0, 1]");

  const CompartmentFlow flow = compartment_flow(mesh, params, coupled.darcy);
  const std::size_t n = mesh.num_nodes();
  const std::size_t nc = flow.storage.size();

  PerfusionTestResult result;
  double dt = std::min(cfl_time_step(mesh, flow, options.cfl_safety), options.output_interval);
  if (options.max_time_step > 0.0)
    dt = std::min(dt, options.max_time_step);
  const auto per_output = static_cast<std::size_t>(std::ceil(options.output_interval / dt - 1e-9));
  dt = options.output_interval / static_cast<double>(per_output);
  const auto steps = static_cast<std::size_t>(std::ceil(options.t_end / dt - 1e-9));
  result.dt = dt;
  result.steps = steps;
  spdlog::info("transport: dt = {:.4e} s, {} steps", dt, steps);

  NetworkTransport portal(coupled.portal, coupled.portal_flow, dt);
  NetworkTransport hepatic(coupled.hepatic, coupled.hepatic_flow, dt);
  std::vector<int> hepatic_node(coupled.hepatic.num_junctions(), -1);
  for (const auto &e : coupled.hepatic_interface)
    hepatic_node[static_cast<std::size_t>(e.junction)] = e.node;

  std::vector<std::vector<double>> s(nc, std::vector<double>(n, 0.0));
  std::vector<std::vector<double>> inflow(nc, std::vector<double>(n, 0.0));
  for (const auto &p : options.probes)
    result.probe_nodes.push_back(mesh.nearest_node(p));
  result.probe_values.assign(options.probes.size(), {});

  std::vector<double> sum_phi(n, 0.0);
  {
    std::vector<std::vector<double>> unit(nc, std::vector<double>(n, 1.0));
    sum_phi = nodal_concentration(mesh, flow, unit).values;
  }

  std::vector<double> snapshot_times = options.snapshot_times;
  std::sort(snapshot_times.begin(), snapshot_times.end());
  std::size_t next_snapshot = 0;

  double injected = 0.0, drained = 0.0;
  auto record = [&](double t) {
    const NodeField conc = nodal_concentration(mesh, flow, s);
    for (std::size_t a = 0; a < n; ++a)
      if (sum_phi[a] > 0.0)
        result.max_bound_violation = std::max(result.max_bound_violation, excursion(conc.values[a] / sum_phi[a]));
    result.times.push_back(t);
    for (std::size_t k = 0; k < result.probe_nodes.size(); ++k) {
      const auto a = static_cast<std::size_t>(result.probe_nodes[k]);
      std::vector<double> row;
      for (std::size_t i = 0; i < nc; ++i)
        row.push_back(s[i][a]);
      row.push_back(conc.values[a]);
      result.probe_values[k].push_back(std::move(row));
    }
    double stored = 0.0;
    for (std::size_t i = 0; i < nc; ++i)
      for (std::size_t a = 0; a < n; ++a)
        stored += flow.storage[i][a] * s[i][a];
    BudgetRecord b{t, stored, injected, drained, 0.0};
    const double err = std::abs(stored + drained - injected);
    b.relative_error = injected > 0.0 ? err / injected : err;
    result.max_budget_error = std::max(result.max_budget_error, b.relative_error);
    result.budget.push_back(b);
  };
  auto maybe_snapshot = [&](double t) {
    while (next_snapshot < snapshot_times.size() && snapshot_times[next_snapshot] <= t + 1e-12) {
      Snapshot snap;
      snap.time = t;
      for (std::size_t i = 0; i < nc; ++i)
        snap.saturation.push_back({static_cast<int>(i + 1), s[i]});
      snap.concentration = nodal_concentration(mesh, flow, s);
      result.snapshots.push_back(std::move(snap));
      ++next_snapshot;
    }
  };

  record(0.0);
  maybe_snapshot(0.0);
  for (std::size_t step = 1; step <= steps; ++step) {
    for (const auto &e : coupled.portal_interface)
      inflow[0][static_cast<std::size_t>(e.node)] = portal.saturation(e.junction);
    const StepBudget b = step_compartments(mesh, flow, inflow, dt, s);
    injected += b.injected;
    drained += b.drained;
    for (std::size_t i = 0; i < nc; ++i)
      for (double v : s[i])
        result.max_bound_violation = std::max(result.max_bound_violation, excursion(v));

    portal.step([&](int j, double t) { return j == coupled.portal.root() ? bolus(t, bolus_spec) : 0.0; });
    hepatic.step([&](int j, double) {
      const int node = hepatic_node[static_cast<std::size_t>(j)];
      return node >= 0 ? s[2][static_cast<std::size_t>(node)] : 0.0;
    });
    for (const NetworkTransport *net : {&portal, &hepatic}) {
      const auto &tree = net == &portal ? coupled.portal : coupled.hepatic;
      for (std::size_t j = 0; j < tree.num_junctions(); ++j) {
        const double v = net->saturation(static_cast<int>(j));
        result.max_bound_violation = std::max(result.max_bound_violation, excursion(v));
        if (excursion(v) > kBoundTolerance)
          throw SolverError("transport: junction saturation left [0, 1]");
      }
    }

    const double t = static_cast<double>(step) * dt;
    if (step % per_output == 0 || step == steps)
      record(t);
    maybe_snapshot(t);
  }
  return result;
}

void write_probe_csv(const PerfusionTestResult &result, const std::filesystem::path &path) {
  std::ofstream os(path);
  if (!os)
    throw Error("cannot write " + path.string());
  os << "time";
  for (std::size_t k = 0; k < result.probe_values.size(); ++k) {
    const std::size_t nv = result.probe_values[k].empty() ? 4 : result.probe_values[k].front().size();
    for (std::size_t i = 0; i + 1 < nv; ++i)
      os << ",probe" << k << "_S" << i + 1;
    os << ",probe" << k << "_C";
  }
  os << '\n' << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t r = 0; r < result.times.size(); ++r) {
    os << result.times[r];
    for (const auto &probe : result.probe_values)
      for (double v : probe[r])
        os << ',' << v;
    os << '\n';
  }
}

} // namespace perfusim
