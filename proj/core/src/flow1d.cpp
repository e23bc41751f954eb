// Copyright 2026 The perfusim Authors
// SPDX-License-Identifier: Apache-2.0

#include "perfusim/flow1d.hpp"

#include <algorithm>
#include <cmath>
#include <regex>

#include <Eigen/SparseLU>
#include <spdlog/spdlog.h>

#include "perfusim/error.hpp"

namespace perfusim {

double segment_pressure_loss(double w, double length, double diameter, const Fluid &fluid) {
  return 32.0 * fluid.viscosity * length * w / (diameter * diameter);
}

double downstream_velocity(const VascularTree &tree, const TreeFlowState &state, int e) {
  return tree.orientation(e) * state.segment_velocities[static_cast<std::size_t>(e)];
}

double root_flux(const VascularTree &tree, const TreeFlowState &state) {
  const int e = tree.root_segment();
  return tree.segment(e).area() * downstream_velocity(tree, state, e);
}

std::vector<double> terminal_fluxes(const VascularTree &tree, const TreeFlowState &state) {
  std::vector<double> q;
  q.reserve(tree.terminals().size());
  for (int j : tree.terminals()) {
    const int e = tree.terminal_segment(j);
    q.push_back(tree.segment(e).area() * downstream_velocity(tree, state, e));
  }
  return q;
}

namespace {

using SpMat = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;

// Unknowns: junction pressures [0, nj), then segment velocities [nj, nj + ne).
class TreeSystem {
public:
  TreeSystem(const VascularTree &tree, const TreeFlowBC &bc, const Fluid &fluid)
      : tree_(tree), bc_(bc), fluid_(fluid), nj_(static_cast<int>(tree.num_junctions())),
        ne_(static_cast<int>(tree.num_segments())) {
    terminal_slot_.assign(tree.num_junctions(), -1);
    for (std::size_t k = 0; k < tree.terminals().size(); ++k)
      terminal_slot_[static_cast<std::size_t>(tree.terminals()[k])] = static_cast<int>(k);

    const auto &root_seg = tree.segment(tree.root_segment());
    const double area0 = root_seg.area();
    double w_ref = 0.0;
    double p_ref = 0.0;
    if (bc.mode == TreeFlowBC::Mode::inlet_velocity) {
      w_ref = std::abs(bc.root_value);
      for (double p : bc.terminal_values)
        p_ref = std::max(p_ref, std::abs(p));
    } else {
      p_ref = std::abs(bc.root_value);
      double q = 0.0;
      for (std::size_t k = 0; k < bc.terminal_values.size(); ++k) {
        const int e = tree.terminal_segment(tree.terminals()[k]);
        q += std::abs(bc.terminal_values[k]) * tree.segment(e).area();
      }
      w_ref = q / area0;
    }
    velocity_scale_ = w_ref > 0.0 ? w_ref : 1.0;
    flux_scale_ = area0 * velocity_scale_;
    const double dynamic = 0.5 * fluid.density * w_ref * w_ref;
    const double viscous = segment_pressure_loss(w_ref, root_seg.length, root_seg.diameter, fluid);
    pressure_scale_ = std::max({dynamic, viscous, p_ref});
    if (!(pressure_scale_ > 0.0))
      pressure_scale_ = 1.0;
  }

  int size() const { return nj_ + ne_; }
  double pressure_scale() const { return pressure_scale_; }
  double flux_scale() const { return flux_scale_; }

  // Residual F(x) and optionally its Jacobian, for a given density.
  Eigen::VectorXd evaluate(const Eigen::VectorXd &x, double rho, SpMat *jacobian) const {
    Eigen::VectorXd f(size());
    std::vector<Triplet> t;
    if (jacobian)
      t.reserve(static_cast<std::size_t>(6 * ne_ + 4 * nj_));
    auto w = [&](int e) { return x[nj_ + e]; };

    // Bernoulli rows [0, ne).
    for (int e = 0; e < ne_; ++e) {
      const auto &s = tree_.segment(e);
      const int u = tree_.upstream(e), d = tree_.downstream(e), par = tree_.parent(e);
      const double sign = tree_.orientation(e);
      const double c = segment_pressure_loss(1.0, s.length, s.diameter, fluid_);
      const double q = sign * w(e);
      const double q_up = par >= 0 ? tree_.orientation(par) * w(par) : q;
      const double value = x[u] - x[d] + 0.5 * rho * (q_up * std::abs(q_up) - q * std::abs(q)) - c * q;
      f[e] = value / pressure_scale_;
      if (jacobian) {
        const double inv = 1.0 / pressure_scale_;
        t.emplace_back(e, u, inv);
        t.emplace_back(e, d, -inv);
        if (par >= 0) {
          t.emplace_back(e, nj_ + par, rho * std::abs(q_up) * tree_.orientation(par) * inv);
          t.emplace_back(e, nj_ + e, (-rho * std::abs(q) - c) * sign * inv);
        } else {
          t.emplace_back(e, nj_ + e, -c * sign * inv);
        }
      }
    }

    // Junction rows [ne, ne + nj).
    const bool inlet = bc_.mode == TreeFlowBC::Mode::inlet_velocity;
    for (int j = 0; j < nj_; ++j) {
      const int row = ne_ + j;
      const int slot = terminal_slot_[static_cast<std::size_t>(j)];
      if (j == tree_.root() || slot >= 0) {
        const bool root = j == tree_.root();
        const double given = root ? bc_.root_value : bc_.terminal_values[static_cast<std::size_t>(slot)];
        const bool velocity_row = root == inlet;
        if (velocity_row) {
          const int e = tree_.junction(j).segments.front();
          const double sign = tree_.orientation(e);
          f[row] = (sign * w(e) - given) / velocity_scale_;
          if (jacobian)
            t.emplace_back(row, nj_ + e, sign / velocity_scale_);
        } else {
          f[row] = (x[j] - given) / pressure_scale_;
          if (jacobian)
            t.emplace_back(row, j, 1.0 / pressure_scale_);
        }
        continue;
      }
      double balance = 0.0;
      for (int e : tree_.junction(j).segments) {
        const double into = tree_.segment(e).head == j ? 1.0 : -1.0;
        const double coeff = into * tree_.segment(e).area() / flux_scale_;
        balance += coeff * w(e);
        if (jacobian)
          t.emplace_back(row, nj_ + e, coeff);
      }
      f[row] = balance;
    }
    if (jacobian) {
      jacobian->resize(size(), size());
      jacobian->setFromTriplets(t.begin(), t.end());
    }
    return f;
  }

  [[noreturn]] void singular(const Eigen::SparseLU<SpMat> &lu) const {
    std::string where;
    std::smatch m;
    const std::string msg = lu.lastErrorMessage();
    if (std::regex_search(msg, m, std::regex("(\\d+)\\s*$"))) {
      const int col = std::stoi(m[1]);
      where = col < nj_ ? " at junction " + std::to_string(col)
                        : " at segment " + std::to_string(col - nj_);
    }
    throw SolverError("tree flow: singular Jacobian" + where + " (" + msg + ")");
  }

private:
  const VascularTree &tree_;
  const TreeFlowBC &bc_;
  const Fluid &fluid_;
  int nj_, ne_;
  std::vector<int> terminal_slot_;
  double velocity_scale_ = 1.0;
  double flux_scale_ = 1.0;
  double pressure_scale_ = 1.0;
};

double max_abs(const Eigen::VectorXd &v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

} // namespace

TreeFlowState solve_tree_flow(const VascularTree &tree, const TreeFlowBC &bc, const Fluid &fluid,
                              const NewtonOptions &options) {
  if (bc.terminal_values.size() != tree.terminals().size())
    throw ContractError("tree flow: " + std::to_string(bc.terminal_values.size()) +
                        " terminal values for " + std::to_string(tree.terminals().size()) + " terminals");
  if (!std::isfinite(bc.root_value))
    throw ContractError("tree flow: root value must be finite");
  if (!(fluid.viscosity > 0.0) || !(fluid.density >= 0.0))
    throw ContractError("tree flow: viscosity must be positive and density non-negative");

  const TreeSystem system(tree, bc, fluid);
  const int n = system.size();
  const int nj = static_cast<int>(tree.num_junctions());

  SpMat jac;
  Eigen::SparseLU<SpMat> lu;
  auto factor = [&](const SpMat &m) {
    lu.compute(m);
    if (lu.info() != Eigen::Success)
      system.singular(lu);
  };

  // Linear (rho = 0) resistor solution as the starting point; F is affine there.
  Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
  {
    const Eigen::VectorXd f0 = system.evaluate(x, 0.0, &jac);
    factor(jac);
    x = -lu.solve(f0);
  }

  const double rho = fluid.density;
  Eigen::VectorXd f = system.evaluate(x, rho, &jac);
  double res = max_abs(f);
  int it = 0;
  bool polished = false;
  while (true) {
    if (res <= options.tolerance) {
      // One extra step takes a quadratically converging iterate down to round-off.
      if (polished || rho == 0.0)
        break;
      polished = true;
    }
    if (it >= options.max_iterations)
      break;
    ++it;
    factor(jac);
    const Eigen::VectorXd dx = -lu.solve(f);
    double step = 1.0;
    Eigen::VectorXd trial;
    Eigen::VectorXd f_trial;
    SpMat jac_trial;
    for (int halving = 0; halving < 30; ++halving, step *= 0.5) {
      trial = x + step * dx;
      f_trial = system.evaluate(trial, rho, &jac_trial);
      if (max_abs(f_trial) <= res || res <= options.tolerance)
        break;
    }
    const double res_trial = max_abs(f_trial);
    if (!std::isfinite(res_trial))
      throw SolverError("tree flow: Newton produced non-finite values");
    x = std::move(trial);
    f = std::move(f_trial);
    jac = std::move(jac_trial);
    res = res_trial;
    spdlog::debug("tree flow newton it={} residual={:.3e} step={}", it, res, step);
  }
  if (!(res <= options.tolerance))
    throw SolverError("tree flow: Newton did not converge in " + std::to_string(options.max_iterations) +
                      " iterations (residual " + std::to_string(res) + ")");

  TreeFlowState state;
  state.fluid = fluid;
  state.junction_pressures.assign(x.data(), x.data() + nj);
  state.segment_velocities.assign(x.data() + nj, x.data() + n);
  state.newton_iterations = it;
  state.residual = res;

  int turbulent = 0;
  for (std::size_t e = 0; e < tree.num_segments(); ++e) {
    const double re =
        fluid.density * std::abs(state.segment_velocities[e]) * tree.segment(static_cast<int>(e)).diameter /
        fluid.viscosity;
    state.max_reynolds = std::max(state.max_reynolds, re);
    if (re > 2300.0)
      ++turbulent;
  }
  if (turbulent > 0)
    spdlog::warn("tree flow: {} segment(s) exceed Re = 2300 (max {:.0f}); the laminar loss model is outside "
                 "its range",
                 turbulent, state.max_reynolds);
  return state;
}

TreeFlowResiduals tree_flow_residuals(const VascularTree &tree, const TreeFlowState &state) {
  TreeFlowResiduals r;
  const double q_scale = std::max(std::abs(root_flux(tree, state)), 1e-300);
  const double rho = state.fluid.density;
  double p_scale = 0.0;
  for (double p : state.junction_pressures)
    p_scale = std::max(p_scale, std::abs(p));
  for (std::size_t e = 0; e < tree.num_segments(); ++e) {
    const auto &s = tree.segment(static_cast<int>(e));
    const double w = state.segment_velocities[e];
    p_scale = std::max({p_scale, 0.5 * rho * w * w, std::abs(segment_pressure_loss(w, s.length, s.diameter, state.fluid))});
  }
  p_scale = std::max(p_scale, 1e-300);

  for (std::size_t j = 0; j < tree.num_junctions(); ++j) {
    const auto &junction = tree.junction(static_cast<int>(j));
    if (junction.segments.size() < 2)
      continue;
    double balance = 0.0;
    for (int e : junction.segments)
      balance += (tree.segment(e).head == static_cast<int>(j) ? 1.0 : -1.0) * tree.segment(e).area() *
                 state.segment_velocities[static_cast<std::size_t>(e)];
    r.continuity = std::max(r.continuity, std::abs(balance) / q_scale);
  }
  for (std::size_t e = 0; e < tree.num_segments(); ++e) {
    const int ei = static_cast<int>(e);
    const auto &s = tree.segment(ei);
    const int par = tree.parent(ei);
    const double q = downstream_velocity(tree, state, ei);
    const double q_up = par >= 0 ? downstream_velocity(tree, state, par) : q;
    const double value = state.junction_pressures[static_cast<std::size_t>(tree.upstream(ei))] -
                         state.junction_pressures[static_cast<std::size_t>(tree.downstream(ei))] +
                         0.5 * rho * (q_up * std::abs(q_up) - q * std::abs(q)) -
                         segment_pressure_loss(q, s.length, s.diameter, state.fluid);
    r.bernoulli = std::max(r.bernoulli, std::abs(value) / p_scale);
  }
  return r;
}

} // namespace perfusim
