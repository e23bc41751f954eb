// Copyright 2026 The perfusim Authors
// SPDX-License-Identifier: Apache-2.0

#include "perfusim/darcy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <Eigen/IterativeLinearSolvers>
#include <Eigen/SparseCholesky>
#include <spdlog/spdlog.h>

#include "perfusim/error.hpp"

namespace perfusim {

namespace {

using SpMat = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;

constexpr std::array<std::array<int, 2>, 6> kLocalEdges{{{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}}};

// Gradients of the four barycentric coordinates and the (positive) volume.
std::array<Vec3, 4> shape_gradients(const Mesh &mesh, int c, double &volume) {
  const Cell &cell = mesh.cell(c);
  const Vec3 &x0 = mesh.node(cell[0]);
  Mat3 jac;
  jac.col(0) = mesh.node(cell[1]) - x0;
  jac.col(1) = mesh.node(cell[2]) - x0;
  jac.col(2) = mesh.node(cell[3]) - x0;
  volume = jac.determinant() / 6.0;
  const Mat3 inv = jac.inverse();
  std::array<Vec3, 4> g;
  g[1] = inv.row(0).transpose();
  g[2] = inv.row(1).transpose();
  g[3] = inv.row(2).transpose();
  g[0] = -(g[1] + g[2] + g[3]);
  return g;
}

std::size_t global(std::size_t n, int compartment, int node) {
  return static_cast<std::size_t>(compartment - 1) * n + static_cast<std::size_t>(node);
}

void validate_sources(std::size_t num_nodes, int num_compartments, std::span<const SourceSpec> sources) {
  std::vector<char> seen(num_nodes * static_cast<std::size_t>(num_compartments), 0);
  for (const auto &s : sources) {
    if (s.compartment < 1 || s.compartment > num_compartments)
      throw ContractError("sources: compartment " + std::to_string(s.compartment) + " does not exist");
    for (const auto &c : s.conditions) {
      if (c.node < 0 || static_cast<std::size_t>(c.node) >= num_nodes)
        throw ContractError("sources: node " + std::to_string(c.node) + " is outside the mesh");
      if (!std::isfinite(c.value))
        throw ContractError("sources: non-finite value at node " + std::to_string(c.node));
      char &flag = seen[global(num_nodes, s.compartment, c.node)];
      if (flag)
        throw ContractError("sources: node " + std::to_string(c.node) + " carries two conditions in compartment " +
                            std::to_string(s.compartment));
      flag = 1;
    }
  }
}

// Compartments joined by a coupling with some positive coefficient form one block;
// every block needs a Dirichlet node or the operator is singular.
void check_well_posed(const PerfusionParams &params, const std::vector<char> &has_dirichlet) {
  const int nc = params.num_compartments();
  std::vector<int> group(static_cast<std::size_t>(nc));
  std::iota(group.begin(), group.end(), 0);
  auto find = [&](int a) {
    while (group[static_cast<std::size_t>(a)] != a)
      a = group[static_cast<std::size_t>(a)] = group[static_cast<std::size_t>(group[static_cast<std::size_t>(a)])];
    return a;
  };
  for (const auto &c : params.couplings) {
    const bool active = std::any_of(c.coefficient.values.begin(), c.coefficient.values.end(),
                                    [](double g) { return g > 0.0; });
    if (active)
      group[static_cast<std::size_t>(find(c.first - 1))] = find(c.second - 1);
  }
  std::vector<char> grounded(static_cast<std::size_t>(nc), 0);
  for (int i = 0; i < nc; ++i)
    if (has_dirichlet[static_cast<std::size_t>(i)])
      grounded[static_cast<std::size_t>(find(i))] = 1;
  for (int i = 0; i < nc; ++i)
    if (!grounded[static_cast<std::size_t>(find(i))])
      throw SolverError("darcy: singular system, compartment " + std::to_string(i + 1) +
                        " is not connected to any Dirichlet node");
}

SpMat assemble_operator(const Mesh &mesh, const PerfusionParams &params, const EdgeConductances &edges,
                        const std::vector<std::vector<double>> &lumped) {
  const std::size_t n = mesh.num_nodes();
  const int nc = params.num_compartments();
  std::vector<Triplet> trip;
  trip.reserve(static_cast<std::size_t>(nc) * (n + 2 * mesh.edges().size()) + 4 * n * params.couplings.size());
  for (int i = 1; i <= nc; ++i) {
    const auto &coeff = edges.values[static_cast<std::size_t>(i - 1)];
    std::vector<double> diag(n, 0.0);
    for (std::size_t e = 0; e < mesh.edges().size(); ++e) {
      const auto [a, b] = mesh.edges()[e];
      const double v = coeff[e];
      trip.emplace_back(global(n, i, a), global(n, i, b), v);
      trip.emplace_back(global(n, i, b), global(n, i, a), v);
      diag[static_cast<std::size_t>(a)] -= v;
      diag[static_cast<std::size_t>(b)] -= v;
    }
    for (std::size_t a = 0; a < n; ++a)
      trip.emplace_back(global(n, i, static_cast<int>(a)), global(n, i, static_cast<int>(a)), diag[a]);
  }
  for (std::size_t k = 0; k < params.couplings.size(); ++k) {
    const auto &c = params.couplings[k];
    for (std::size_t a = 0; a < n; ++a) {
      const double m = lumped[k][a];
      if (m == 0.0)
        continue;
      const auto ia = global(n, c.first, static_cast<int>(a));
      const auto ja = global(n, c.second, static_cast<int>(a));
      trip.emplace_back(ia, ia, m);
      trip.emplace_back(ja, ja, m);
      trip.emplace_back(ia, ja, -m);
      trip.emplace_back(ja, ia, -m);
    }
  }
  const auto dim = static_cast<Eigen::Index>(n * static_cast<std::size_t>(nc));
  SpMat full(dim, dim);
  full.setFromTriplets(trip.begin(), trip.end());
  full.makeCompressed();
  return full;
}

// Sets loads and Dirichlet data from `sources`; rebuilds the elimination when `layout_changed`.
void apply_conditions(LinearSystem &sys, std::span<const SourceSpec> sources, bool layout_changed) {
  const std::size_t n = sys.num_nodes;
  const auto dim = static_cast<Eigen::Index>(n * static_cast<std::size_t>(sys.num_compartments));
  sys.loads = Eigen::VectorXd::Zero(dim);
  sys.dirichlet_values = Eigen::VectorXd::Zero(dim);
  std::vector<char> dirichlet(static_cast<std::size_t>(dim), 0);
  for (const auto &s : sources)
    for (const auto &c : s.conditions) {
      const auto g = static_cast<Eigen::Index>(global(n, s.compartment, c.node));
      if (c.kind == NodeCondition::Kind::flux) {
        sys.loads[g] += c.value;
      } else {
        dirichlet[static_cast<std::size_t>(g)] = 1;
        sys.dirichlet_values[g] = c.value;
      }
    }
  if (layout_changed) {
    sys.reduced_index.assign(static_cast<std::size_t>(dim), -1);
    sys.free_unknowns.clear();
    for (Eigen::Index g = 0; g < dim; ++g)
      if (!dirichlet[static_cast<std::size_t>(g)]) {
        sys.reduced_index[static_cast<std::size_t>(g)] = static_cast<int>(sys.free_unknowns.size());
        sys.free_unknowns.push_back(static_cast<int>(g));
      }
    const auto nf = static_cast<Eigen::Index>(sys.free_unknowns.size());
    std::vector<Triplet> trip;
    trip.reserve(static_cast<std::size_t>(sys.full.nonZeros()));
    for (Eigen::Index col = 0; col < sys.full.outerSize(); ++col) {
      const int rc = sys.reduced_index[static_cast<std::size_t>(col)];
      if (rc < 0)
        continue;
      for (SpMat::InnerIterator it(sys.full, col); it; ++it) {
        const int rr = sys.reduced_index[static_cast<std::size_t>(it.row())];
        if (rr >= 0)
          trip.emplace_back(rr, rc, it.value());
      }
    }
    sys.matrix = SpMat(nf, nf);
    sys.matrix.setFromTriplets(trip.begin(), trip.end());
    sys.matrix.makeCompressed();
  }
  // rhs = loads - A_fd * p_d, restricted to free unknowns.
  const Eigen::VectorXd coupling = sys.full * sys.dirichlet_values;
  sys.rhs.resize(static_cast<Eigen::Index>(sys.free_unknowns.size()));
  for (std::size_t r = 0; r < sys.free_unknowns.size(); ++r) {
    const auto g = static_cast<Eigen::Index>(sys.free_unknowns[r]);
    sys.rhs[static_cast<Eigen::Index>(r)] = sys.loads[g] - coupling[g];
  }
}

PressureSolution finish(const LinearSystem &sys, const Mesh &mesh, const PerfusionParams &params,
                        const EdgeConductances &edges, const std::vector<std::vector<double>> &lumped,
                        const Eigen::VectorXd &reduced, int iterations, double residual) {
  const std::size_t n = sys.num_nodes;
  const int nc = sys.num_compartments;
  Eigen::VectorXd p = sys.dirichlet_values;
  for (std::size_t r = 0; r < sys.free_unknowns.size(); ++r)
    p[sys.free_unknowns[r]] = reduced[static_cast<Eigen::Index>(r)];
  const Eigen::VectorXd ap = sys.full * p;

  PressureSolution sol;
  sol.iterations = iterations;
  sol.residual = residual;
  for (int i = 1; i <= nc; ++i) {
    NodeField field{i, std::vector<double>(n)};
    NodeField src{i, std::vector<double>(n)};
    for (std::size_t a = 0; a < n; ++a) {
      const auto g = static_cast<Eigen::Index>(global(n, i, static_cast<int>(a)));
      field.values[a] = p[g];
      src.values[a] = sys.reduced_index[static_cast<std::size_t>(g)] < 0 ? ap[g] : sys.loads[g];
    }
    sol.velocities.push_back(darcy_velocity(mesh, field, params.permeability[static_cast<std::size_t>(i - 1)]));
    sol.pressures.push_back(std::move(field));
    sol.nodal_sources.push_back(std::move(src));

    const auto &coeff = edges.values[static_cast<std::size_t>(i - 1)];
    std::vector<double> flux(mesh.edges().size());
    const auto &pi = sol.pressures.back().values;
    for (std::size_t e = 0; e < flux.size(); ++e) {
      const auto [a, b] = mesh.edges()[e];
      flux[e] = -coeff[e] * (pi[static_cast<std::size_t>(a)] - pi[static_cast<std::size_t>(b)]);
    }
    sol.edge_fluxes.push_back(std::move(flux));
  }
  for (std::size_t k = 0; k < params.couplings.size(); ++k) {
    const auto &c = params.couplings[k];
    const auto &pa = sol.pressures[static_cast<std::size_t>(c.first - 1)].values;
    const auto &pb = sol.pressures[static_cast<std::size_t>(c.second - 1)].values;
    std::vector<double> nodal(n);
    double total = 0.0;
    for (std::size_t a = 0; a < n; ++a) {
      nodal[a] = lumped[k][a] * (pa[a] - pb[a]);
      total += nodal[a];
    }
    sol.nodal_exchange.push_back(std::move(nodal));
    sol.exchange_totals.push_back(total);
    CouplingField j{c.first, c.second, {0, std::vector<double>(mesh.num_cells())}};
    for (std::size_t cell = 0; cell < mesh.num_cells(); ++cell) {
      const Cell &cn = mesh.cell(static_cast<int>(cell));
      double diff = 0.0;
      for (int v : cn)
        diff += pa[static_cast<std::size_t>(v)] - pb[static_cast<std::size_t>(v)];
      j.coefficient.values[cell] = c.coefficient.values[cell] * 0.25 * diff;
    }
    sol.exchange.push_back(std::move(j));
  }
  return sol;
}

int iteration_cap(const DarcyOptions &options, Eigen::Index unknowns) {
  return options.max_iterations > 0 ? options.max_iterations : static_cast<int>(std::max<Eigen::Index>(10 * unknowns, 10));
}

std::string history_text(const std::vector<double> &history) {
  std::ostringstream os;
  os.precision(3);
  for (std::size_t k = 0; k < history.size(); ++k)
    os << (k ? ", " : "") << std::scientific << history[k];
  return os.str();
}

} // namespace

EdgeConductances edge_conductances(const Mesh &mesh, const PerfusionParams &params) {
  const int nc = params.num_compartments();
  EdgeConductances out;
  out.values.assign(static_cast<std::size_t>(nc), std::vector<double>(mesh.edges().size(), 0.0));
  for (int c = 0; c < static_cast<int>(mesh.num_cells()); ++c) {
    double vol = 0.0;
    const auto grads = shape_gradients(mesh, c, vol);
    const Cell &cell = mesh.cell(c);
    std::array<int, 6> edge_ids{};
    for (std::size_t k = 0; k < kLocalEdges.size(); ++k)
      edge_ids[k] = mesh.edge_index(cell[static_cast<std::size_t>(kLocalEdges[k][0])],
                                    cell[static_cast<std::size_t>(kLocalEdges[k][1])]);
    for (int i = 0; i < nc; ++i) {
      const Mat3 &k = params.permeability[static_cast<std::size_t>(i)].values[static_cast<std::size_t>(c)];
      auto &dst = out.values[static_cast<std::size_t>(i)];
      for (std::size_t e = 0; e < kLocalEdges.size(); ++e) {
        const auto &ga = grads[static_cast<std::size_t>(kLocalEdges[e][0])];
        const auto &gb = grads[static_cast<std::size_t>(kLocalEdges[e][1])];
        dst[static_cast<std::size_t>(edge_ids[e])] += vol * ga.dot(k * gb);
      }
    }
  }
  return out;
}

std::vector<std::vector<double>> lumped_exchange(const Mesh &mesh, const PerfusionParams &params) {
  const auto geo = cell_geometry(mesh);
  std::vector<std::vector<double>> out;
  for (const auto &c : params.couplings) {
    std::vector<double> m(mesh.num_nodes(), 0.0);
    for (std::size_t cell = 0; cell < mesh.num_cells(); ++cell) {
      const double w = 0.25 * c.coefficient.values[cell] * geo.volumes[cell];
      for (int v : mesh.cell(static_cast<int>(cell)))
        m[static_cast<std::size_t>(v)] += w;
    }
    out.push_back(std::move(m));
  }
  return out;
}

LinearSystem assemble(const Mesh &mesh, const PerfusionParams &params, std::span<const SourceSpec> sources) {
  check_perfusion_params(params, mesh);
  const int nc = params.num_compartments();
  validate_sources(mesh.num_nodes(), nc, sources);
  std::vector<char> has_dirichlet(static_cast<std::size_t>(nc), 0);
  for (const auto &s : sources)
    for (const auto &c : s.conditions)
      if (c.kind == NodeCondition::Kind::pressure)
        has_dirichlet[static_cast<std::size_t>(s.compartment - 1)] = 1;
  check_well_posed(params, has_dirichlet);

  LinearSystem sys;
  sys.num_nodes = mesh.num_nodes();
  sys.num_compartments = nc;
  sys.full = assemble_operator(mesh, params, edge_conductances(mesh, params), lumped_exchange(mesh, params));
  apply_conditions(sys, sources, true);
  return sys;
}

ScalarCellField exchange_flux(const PressureSolution &solution, int i, int j) {
  for (const auto &c : solution.exchange) {
    if (c.first == i && c.second == j)
      return {i, c.coefficient.values};
    if (c.first == j && c.second == i) {
      ScalarCellField out{i, c.coefficient.values};
      for (auto &v : out.values)
        v = -v;
      return out;
    }
  }
  throw ContractError("exchange_flux: compartments " + std::to_string(i) + " and " + std::to_string(j) +
                      " are not coupled");
}

struct DarcyOperator::Impl {
  EdgeConductances edges;
  std::vector<std::vector<double>> lumped;
  Eigen::ConjugateGradient<SpMat, Eigen::Lower | Eigen::Upper, Eigen::DiagonalPreconditioner<double>> cg;
  Eigen::SimplicialLDLT<SpMat> ldlt;
};

DarcyOperator::DarcyOperator(const Mesh &mesh, const PerfusionParams &params, std::span<const SourceSpec> layout,
                             const DarcyOptions &options)
    : mesh_(&mesh), params_(&params), options_(options), layout_(layout.begin(), layout.end()),
      impl_(std::make_unique<Impl>()) {
  system_ = assemble(mesh, params, layout);
  impl_->edges = edge_conductances(mesh, params);
  impl_->lumped = lumped_exchange(mesh, params);
  if (options_.solver == LinearSolverKind::cholesky) {
    impl_->ldlt.compute(system_.matrix);
    if (impl_->ldlt.info() != Eigen::Success)
      throw SolverError("darcy: LDL^T factorization failed (matrix not positive definite)");
  } else {
    impl_->cg.compute(system_.matrix);
  }
  guess_ = Eigen::VectorXd::Zero(system_.matrix.rows());
}

DarcyOperator::~DarcyOperator() = default;

PressureSolution DarcyOperator::solve(std::span<const SourceSpec> sources) {
  if (sources.size() != layout_.size())
    throw ContractError("darcy operator: source list does not match the layout");
  for (std::size_t s = 0; s < sources.size(); ++s) {
    const auto &a = sources[s];
    const auto &b = layout_[s];
    if (a.compartment != b.compartment || a.conditions.size() != b.conditions.size())
      throw ContractError("darcy operator: source list does not match the layout");
    for (std::size_t k = 0; k < a.conditions.size(); ++k)
      if (a.conditions[k].node != b.conditions[k].node || a.conditions[k].kind != b.conditions[k].kind)
        throw ContractError("darcy operator: source list does not match the layout");
  }
  apply_conditions(system_, sources, false);

  const Eigen::Index nf = system_.matrix.rows();
  const double bnorm = system_.rhs.norm();
  Eigen::VectorXd x;
  int iterations = 0;
  double residual = 0.0;
  if (bnorm == 0.0) {
    x = Eigen::VectorXd::Zero(nf);
  } else if (options_.solver == LinearSolverKind::cholesky) {
    x = impl_->ldlt.solve(system_.rhs);
    residual = (system_.matrix * x - system_.rhs).norm() / bnorm;
    iterations = 1;
  } else {
    // Run in chunks so a failure can report how the residual evolved.
    const int cap = iteration_cap(options_, nf);
    const int chunk = std::max(cap / 20, 1);
    auto &cg = impl_->cg;
    cg.setTolerance(options_.tolerance);
    std::vector<double> history;
    x = guess_;
    while (true) {
      cg.setMaxIterations(std::min(chunk, cap - iterations));
      x = cg.solveWithGuess(system_.rhs, x);
      iterations += static_cast<int>(cg.iterations());
      residual = (system_.matrix * x - system_.rhs).norm() / bnorm;
      history.push_back(residual);
      if (residual <= options_.tolerance)
        break;
      if (iterations >= cap || cg.iterations() == 0)
        throw SolverError("darcy: conjugate gradients did not reach " + std::to_string(options_.tolerance) +
                          " after " + std::to_string(iterations) + " iterations; residual history: " +
                          history_text(history));
    }
    guess_ = x;
  }
  if (!x.allFinite())
    throw SolverError("darcy: non-finite solution");
  spdlog::debug("darcy solve: {} unknowns, {} iterations, residual {:.3e}", nf, iterations, residual);
  return finish(system_, *mesh_, *params_, impl_->edges, impl_->lumped, x, iterations, residual);
}

PressureSolution solve_multicompartment(const LinearSystem &system, const Mesh &mesh,
                                        const PerfusionParams &params, const DarcyOptions &options) {
  if (system.num_nodes != mesh.num_nodes() || system.num_compartments != params.num_compartments())
    throw ContractError("darcy: system does not match mesh and parameters");
  const Eigen::Index nf = system.matrix.rows();
  const double bnorm = system.rhs.norm();
  Eigen::VectorXd x = Eigen::VectorXd::Zero(nf);
  int iterations = 0;
  double residual = 0.0;
  if (bnorm > 0.0) {
    if (options.solver == LinearSolverKind::cholesky) {
      Eigen::SimplicialLDLT<SpMat> ldlt(system.matrix);
      if (ldlt.info() != Eigen::Success)
        throw SolverError("darcy: LDL^T factorization failed (matrix not positive definite)");
      x = ldlt.solve(system.rhs);
      iterations = 1;
    } else {
      const int cap = iteration_cap(options, nf);
      const int chunk = std::max(cap / 20, 1);
      Eigen::ConjugateGradient<SpMat, Eigen::Lower | Eigen::Upper, Eigen::DiagonalPreconditioner<double>> cg(
          system.matrix);
      cg.setTolerance(options.tolerance);
      std::vector<double> history;
      while (true) {
        cg.setMaxIterations(std::min(chunk, cap - iterations));
        x = cg.solveWithGuess(system.rhs, x);
        iterations += static_cast<int>(cg.iterations());
        residual = (system.matrix * x - system.rhs).norm() / bnorm;
        history.push_back(residual);
        if (residual <= options.tolerance)
          break;
        if (iterations >= cap || cg.iterations() == 0)
          throw SolverError("darcy: conjugate gradients did not reach " + std::to_string(options.tolerance) +
                            " after " + std::to_string(iterations) + " iterations; residual history: " +
                            history_text(history));
      }
    }
    residual = (system.matrix * x - system.rhs).norm() / bnorm;
  }
  if (!x.allFinite())
    throw SolverError("darcy: non-finite solution");
  return finish(system, mesh, params, edge_conductances(mesh, params), lumped_exchange(mesh, params), x, iterations,
                residual);
}

VectorCellField darcy_velocity(const Mesh &mesh, const NodeField &pressure, const TensorCellField &permeability) {
  if (pressure.values.size() != mesh.num_nodes() || permeability.values.size() != mesh.num_cells())
    throw ContractError("darcy_velocity: fields are not sized to the mesh");
  VectorCellField w{permeability.compartment, std::vector<Vec3>(mesh.num_cells())};
  for (int c = 0; c < static_cast<int>(mesh.num_cells()); ++c) {
    double vol = 0.0;
    const auto grads = shape_gradients(mesh, c, vol);
    Vec3 grad = Vec3::Zero();
    const Cell &cell = mesh.cell(c);
    for (std::size_t k = 0; k < 4; ++k)
      grad += pressure.values[static_cast<std::size_t>(cell[k])] * grads[k];
    w.values[static_cast<std::size_t>(c)] = -(permeability.values[static_cast<std::size_t>(c)] * grad);
  }
  return w;
}

} // namespace perfusim
