// Copyright 2026 The perfusim Authors
// SPDX-License-Identifier: Apache-2.0

#include "perfusim/coupling.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include <Eigen/QR>
#include <spdlog/spdlog.h>

#include "perfusim/error.hpp"

namespace perfusim {

std::vector<int> map_terminals(const VascularTree &tree, const Mesh &mesh, const std::string &name) {
  std::vector<int> nodes;
  nodes.reserve(tree.terminals().size());
  for (int j : tree.terminals()) {
    const int n = mesh.nearest_node(tree.junction(j).position);
    const auto hit = std::find(nodes.begin(), nodes.end(), n);
    if (hit != nodes.end()) {
      const int other = tree.terminals()[static_cast<std::size_t>(hit - nodes.begin())];
      throw ConfigError(name + "_tree", "terminal junctions " + std::to_string(other) + " and " + std::to_string(j) +
                                            " map to the same mesh node " + std::to_string(n) +
                                            "; refine the mesh or move the junctions");
    }
    nodes.push_back(n);
  }
  return nodes;
}

InterfaceValues interface_update(const VascularTree &portal, const VascularTree &hepatic,
                                 const std::vector<int> &portal_nodes, const std::vector<int> &hepatic_nodes,
                                 const PressureSolution &darcy) {
  if (darcy.pressures.size() < 3)
    throw ContractError("interface_update: expected three compartments");
  if (portal_nodes.size() != portal.terminals().size() || hepatic_nodes.size() != hepatic.terminals().size())
    throw ContractError("interface_update: node maps do not match the tree terminals");
  InterfaceValues out;
  const auto &p1 = darcy.pressures[0].values;
  for (int n : portal_nodes)
    out.portal_pressures.push_back(p1[static_cast<std::size_t>(n)]);
  const auto &r3 = darcy.nodal_sources[2].values;
  for (std::size_t k = 0; k < hepatic_nodes.size(); ++k) {
    const int e = hepatic.terminal_segment(hepatic.terminals()[k]);
    out.hepatic_velocities.push_back(r3[static_cast<std::size_t>(hepatic_nodes[k])] / hepatic.segment(e).area());
  }
  return out;
}

namespace {

// Anderson mixing on a fixed-point map y -> g(y).
class Anderson {
public:
  Anderson(int depth, double beta) : depth_(depth), beta_(beta) {}

  Eigen::VectorXd next(const Eigen::VectorXd &y, const Eigen::VectorXd &g) {
    const Eigen::VectorXd f = g - y;
    ys_.push_back(y);
    fs_.push_back(f);
    while (static_cast<int>(ys_.size()) > depth_ + 1) {
      ys_.pop_front();
      fs_.pop_front();
    }
    const auto m = static_cast<Eigen::Index>(ys_.size()) - 1;
    if (m == 0)
      return y + beta_ * f;
    Eigen::MatrixXd df(f.size(), m), dy(f.size(), m);
    for (Eigen::Index k = 0; k < m; ++k) {
      const auto uk = static_cast<std::size_t>(k);
      df.col(k) = fs_[uk + 1] - fs_[uk];
      dy.col(k) = ys_[uk + 1] - ys_[uk];
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(df);
    qr.setThreshold(1e-12);
    const Eigen::VectorXd gamma = qr.solve(f);
    const Eigen::VectorXd f_bar = f - df * gamma;
    const Eigen::VectorXd y_bar = y - dy * gamma;
    return y_bar + beta_ * f_bar;
  }

private:
  int depth_;
  double beta_;
  std::deque<Eigen::VectorXd> ys_;
  std::deque<Eigen::VectorXd> fs_;
};

// `floor` keeps round-off in a group of (near) zero values from counting as a change.
double relative_change(const Eigen::VectorXd &x, const Eigen::VectorXd &g, double floor = 0.0) {
  if (x.size() == 0)
    return 0.0;
  const double num = (g - x).lpNorm<Eigen::Infinity>();
  const double den = std::max({x.lpNorm<Eigen::Infinity>(), g.lpNorm<Eigen::Infinity>(), floor});
  return num == 0.0 ? 0.0 : num / den;
}

// Terminal velocities below this (m/s) are indistinguishable from rest.
constexpr double kVelocityFloor = 1e-6;

struct Evaluation {
  TreeFlowState portal_flow;
  TreeFlowState hepatic_flow;
  PressureSolution darcy;
  Eigen::VectorXd g;
  double balance_gap = 0.0;
};

} // namespace

CoupledFlowState couple_steady(const VascularTree &portal, const VascularTree &hepatic, const Mesh &mesh,
                               const PerfusionParams &params, double v_in, double p_out,
                               const CouplingOptions &options) {
  if (!(v_in >= 0.0) || !std::isfinite(v_in))
    throw ConfigError("v_in", "must be a finite non-negative velocity");
  if (!std::isfinite(p_out))
    throw ConfigError("p_out", "must be finite");
  if (options.pseudo_steps < 1)
    throw ConfigError("coupling.pseudo_steps", "must be at least 1");
  if (options.max_iterations < 1)
    throw ConfigError("coupling.max_iterations", "must be at least 1");
  if (!(options.tolerance > 0.0))
    throw ConfigError("coupling.tolerance", "must be positive");
  if (!(options.relaxation > 0.0 && options.relaxation <= 1.0))
    throw ConfigError("coupling.relaxation", "must lie in (0, 1]");
  if (options.anderson_depth < 1)
    throw ConfigError("coupling.anderson_depth", "must be at least 1");
  if (params.num_compartments() != 3)
    throw ContractError("couple_steady: expected the three-compartment layout");

  const auto portal_nodes = map_terminals(portal, mesh, "portal");
  const auto hepatic_nodes = map_terminals(hepatic, mesh, "hepatic");
  const auto np = static_cast<Eigen::Index>(portal_nodes.size());
  const auto nh = static_cast<Eigen::Index>(hepatic_nodes.size());

  std::vector<SourceSpec> sources(2);
  sources[0].compartment = 1;
  sources[1].compartment = 3;
  for (int n : portal_nodes)
    sources[0].conditions.push_back({n, NodeCondition::Kind::flux, 0.0});
  for (int n : hepatic_nodes)
    sources[1].conditions.push_back({n, NodeCondition::Kind::pressure, 0.0});
  DarcyOperator op(mesh, params, sources, options.darcy);

  CoupledFlowState state{portal, hepatic, {}, {}, {}, {}, {}, {}, 0, 0, 0, false};

  auto evaluate = [&](const Eigen::VectorXd &x, double s, const Fluid &fl) {
    Evaluation ev;
    TreeFlowBC pbc{TreeFlowBC::Mode::inlet_velocity, s * v_in,
                   std::vector<double>(x.data(), x.data() + np)};
    TreeFlowBC hbc{TreeFlowBC::Mode::outlet_pressure, s * p_out,
                   std::vector<double>(x.data() + np, x.data() + np + nh)};
    ev.portal_flow = solve_tree_flow(portal, pbc, fl, options.newton);
    ev.hepatic_flow = solve_tree_flow(hepatic, hbc, fl, options.newton);
    state.newton_iterations += ev.portal_flow.newton_iterations + ev.hepatic_flow.newton_iterations;

    const auto q = terminal_fluxes(portal, ev.portal_flow);
    double injected = 0.0;
    for (Eigen::Index k = 0; k < np; ++k) {
      sources[0].conditions[static_cast<std::size_t>(k)].value = q[static_cast<std::size_t>(k)];
      injected += q[static_cast<std::size_t>(k)];
    }
    for (Eigen::Index k = 0; k < nh; ++k) {
      const int j = hepatic.terminals()[static_cast<std::size_t>(k)];
      sources[1].conditions[static_cast<std::size_t>(k)].value =
          ev.hepatic_flow.junction_pressures[static_cast<std::size_t>(j)];
    }
    ev.darcy = op.solve(sources);
    state.cg_iterations += ev.darcy.iterations;

    const auto iv = interface_update(portal, hepatic, portal_nodes, hepatic_nodes, ev.darcy);
    ev.g.resize(np + nh);
    double drained = 0.0;
    for (Eigen::Index k = 0; k < np; ++k)
      ev.g[k] = iv.portal_pressures[static_cast<std::size_t>(k)];
    for (Eigen::Index k = 0; k < nh; ++k) {
      ev.g[np + k] = iv.hepatic_velocities[static_cast<std::size_t>(k)];
      drained += ev.darcy.nodal_sources[2].values[static_cast<std::size_t>(hepatic_nodes[static_cast<std::size_t>(k)])];
    }
    ev.balance_gap = injected == 0.0 ? std::abs(drained) : std::abs(injected + drained) / std::abs(injected);
    return ev;
  };

  Eigen::VectorXd x = Eigen::VectorXd::Zero(np + nh);
  Eigen::VectorXd weights = Eigen::VectorXd::Ones(np + nh);
  Anderson anderson(options.anderson_depth, options.relaxation);
  const double tau = 1.0 / options.pseudo_steps;
  int below = 0;
  Evaluation ev;
  const Fluid &fl = options.fluid;

  const auto n = np + nh;
  const bool newton = options.acceleration == CouplingOptions::Acceleration::newton;
  Eigen::VectorXd y_base, dy; // last Newton step in ramp-normalized variables
  for (int i = 1; i <= options.max_iterations; ++i) {
    const double s = std::min(i * tau, 1.0);
    for (int halving = 0;; ++halving) {
      try {
        ev = evaluate(x, s, fl);
        break;
      } catch (const SolverError &) {
        // A Newton step can overshoot into states the tree solver cannot handle; shorten it.
        if (!newton || dy.size() == 0 || halving >= 10)
          throw;
        dy *= 0.5;
        x = s * (y_base + dy).cwiseQuotient(weights);
      }
    }
    const double res = std::max(relative_change(x.head(np), ev.g.head(np)), relative_change(x.tail(nh), ev.g.tail(nh), kVelocityFloor));
    state.log.push_back({i, s, res, ev.balance_gap});
    state.iterations = i;
    spdlog::debug("coupling it={} ramp={:.3f} residual={:.3e} gap={:.3e}", i, s, res, ev.balance_gap);

    below = (i >= options.pseudo_steps && res < options.tolerance) ? below + 1 : 0;
    if (below >= 2) {
      state.converged = true;
      break;
    }

    const double s_next = std::min((i + 1) * tau, 1.0);
    if (options.acceleration != CouplingOptions::Acceleration::none) {
      if (i == 1) {
        // Per-group scaling keeps pressures and velocities comparable in the least-squares fit.
        const double ps = ev.g.head(np).lpNorm<Eigen::Infinity>() / s;
        const double ws = std::max(ev.g.tail(nh).lpNorm<Eigen::Infinity>() / s, kVelocityFloor);
        weights.head(np).setConstant(ps > 0.0 ? 1.0 / ps : 1.0);
        weights.tail(nh).setConstant(1.0 / ws);
      }
      const Eigen::VectorXd y = x.cwiseProduct(weights) / s;
      const Eigen::VectorXd gy = ev.g.cwiseProduct(weights) / s;
      if (newton) {
        // Forward-difference Jacobian of f(y) = g(y) - y, one column per interface value.
        const Eigen::VectorXd f = gy - y;
        Eigen::MatrixXd jac(n, n);
        for (Eigen::Index k = 0; k < n; ++k) {
          Eigen::VectorXd yk = y;
          const double h = options.newton_step * std::max(1.0, std::abs(y[k]));
          yk[k] += h;
          const Evaluation ek = evaluate(s * yk.cwiseQuotient(weights), s, fl);
          jac.col(k) = (ek.g.cwiseProduct(weights) / s - yk - f) / h;
        }
        y_base = y;
        dy = -jac.colPivHouseholderQr().solve(f);
        if (!dy.allFinite())
          throw SolverError("coupling: singular interface Jacobian");
        x = s_next * (y_base + dy).cwiseQuotient(weights);
      } else {
        const Eigen::VectorXd y_next = anderson.next(y, gy);
        x = s_next * y_next.cwiseQuotient(weights);
      }
    } else {
      x += options.relaxation * (ev.g - x);
    }
  }

  if (!state.converged) {
    std::ostringstream os;
    os << "coupling did not converge in " << options.max_iterations << " iterations; last residuals:";
    const std::size_t from = state.log.size() > 8 ? state.log.size() - 8 : 0;
    for (std::size_t k = from; k < state.log.size(); ++k)
      os << ' ' << std::scientific << std::setprecision(3) << state.log[k].residual;
    throw SolverError(os.str());
  }

  // Close the hepatic side on the reaction fluxes of the final Darcy solve.
  const auto iv = interface_update(portal, hepatic, portal_nodes, hepatic_nodes, ev.darcy);
  TreeFlowBC hbc{TreeFlowBC::Mode::outlet_pressure, p_out, iv.hepatic_velocities};
  state.hepatic_flow = solve_tree_flow(hepatic, hbc, fl, options.newton);
  state.newton_iterations += state.hepatic_flow.newton_iterations;
  state.portal_flow = std::move(ev.portal_flow);
  state.darcy = std::move(ev.darcy);

  const auto q = terminal_fluxes(portal, state.portal_flow);
  for (std::size_t k = 0; k < portal_nodes.size(); ++k)
    state.portal_interface.push_back({portal.terminals()[k], portal_nodes[k], 1, q[k],
                                      state.darcy.pressures[0].values[static_cast<std::size_t>(portal_nodes[k])]});
  for (std::size_t k = 0; k < hepatic_nodes.size(); ++k) {
    const auto n = static_cast<std::size_t>(hepatic_nodes[k]);
    state.hepatic_interface.push_back(
        {hepatic.terminals()[k], hepatic_nodes[k], 3, state.darcy.nodal_sources[2].values[n],
         state.darcy.pressures[2].values[n]});
  }
  const auto mb = mass_balance(state);
  spdlog::info("coupling converged in {} iterations; inflow {:.6e} m^3/s, max relative gap {:.3e}", state.iterations,
               mb.portal_inflow, mb.max_relative_gap);
  return state;
}

MassBalance mass_balance(const CoupledFlowState &state) {
  MassBalance mb;
  mb.portal_inflow = root_flux(state.portal, state.portal_flow);
  mb.hepatic_outflow = -root_flux(state.hepatic, state.hepatic_flow);
  for (std::size_t k = 0; k < state.darcy.exchange.size(); ++k) {
    const auto &c = state.darcy.exchange[k];
    if (c.first == 1 && c.second == 2)
      mb.exchange_12 = state.darcy.exchange_totals[k];
    if (c.first == 2 && c.second == 3)
      mb.exchange_23 = state.darcy.exchange_totals[k];
  }
  const std::array<double, 4> v{mb.portal_inflow, mb.hepatic_outflow, mb.exchange_12, mb.exchange_23};
  double gap = 0.0;
  for (std::size_t a = 0; a < v.size(); ++a)
    for (std::size_t b = a + 1; b < v.size(); ++b)
      gap = std::max(gap, std::abs(v[a] - v[b]));
  const double scale = std::abs(mb.portal_inflow);
  mb.max_relative_gap = scale > 0.0 ? gap / scale : gap;
  return mb;
}

void write_iteration_log(const std::vector<IterationRecord> &log, const std::filesystem::path &path) {
  std::ofstream os(path);
  if (!os)
    throw Error("cannot write " + path.string());
  os << "iteration,ramp,residual,balance_gap\n";
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto &r : log)
    os << r.iteration << ',' << r.ramp << ',' << r.residual << ',' << r.balance_gap << '\n';
}

} // namespace perfusim
