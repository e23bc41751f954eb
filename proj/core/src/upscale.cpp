// Copyright 2026 The perfusim Authors
// SPDX-License-Identifier: Apache-2.0

#include "perfusim/upscale.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Eigenvalues>

#include "perfusim/error.hpp"

namespace perfusim {

const CouplingField *PerfusionParams::coupling(int a, int b) const {
  for (const auto &c : couplings)
    if ((c.first == a && c.second == b) || (c.first == b && c.second == a))
      return &c;
  return nullptr;
}

void validate_compartment_specs(std::span<const CompartmentSpec> specs) {
  for (const auto &s : specs)
    if (!(s.diameter_min >= 0.0 && s.diameter_max > s.diameter_min))
      throw ConfigError("compartments", "compartment " + std::to_string(s.id) + " has an empty diameter range");
  for (std::size_t a = 0; a < specs.size(); ++a)
    for (std::size_t b = 0; b < specs.size(); ++b) {
      if (a == b || specs[a].group != specs[b].group)
        continue;
      const auto &x = specs[a];
      const auto &y = specs[b];
      if (x.diameter_min < y.diameter_max && y.diameter_min < x.diameter_max)
        throw ConfigError("compartments", "diameter ranges of compartments " + std::to_string(x.id) + " and " +
                                              std::to_string(y.id) + " overlap");
      // Lower hierarchy index means larger vessels.
      if (x.hierarchy < y.hierarchy && x.diameter_max < y.diameter_max)
        throw ConfigError("compartments", "hierarchy of compartment " + std::to_string(x.id) +
                                              " is not ordered by diameter");
    }
}

std::vector<int> assign_segments_to_cells(std::span<const LowerSegment> segments, const Mesh &mesh) {
  const CellLocator locator(mesh);
  std::vector<int> cells;
  cells.reserve(segments.size());
  for (const auto &s : segments)
    cells.push_back(locator.locate_or_nearest(s.midpoint()));
  return cells;
}

std::vector<LowerSegment> select_segments(std::span<const LowerSegment> segments, const CompartmentSpec &spec) {
  std::vector<LowerSegment> out;
  for (const auto &s : segments)
    if (spec.contains(s.diameter))
      out.push_back(s);
  return out;
}

std::vector<LowerSegment> interface_segments(std::span<const LowerSegment> segments, const CompartmentSpec &spec) {
  std::vector<LowerSegment> out;
  for (const auto &s : segments)
    if (spec.contains(s.diameter) && (s.leaf || s.min_child_diameter <= spec.diameter_min))
      out.push_back(s);
  return out;
}

TensorCellField average_permeability(std::span<const LowerSegment> segments, const Mesh &mesh,
                                     const CompartmentSpec &spec, double viscosity) {
  const auto selected = select_segments(segments, spec);
  const auto cells = assign_segments_to_cells(selected, mesh);
  const auto geo = cell_geometry(mesh);
  TensorCellField k{spec.id, std::vector<Mat3>(mesh.num_cells(), Mat3::Zero())};
  // Segments are accumulated in input order so the sum is reproducible bit for bit.
  for (std::size_t i = 0; i < selected.size(); ++i) {
    const auto &s = selected[i];
    const double r = 0.5 * s.diameter;
    const Vec3 t = s.direction();
    const auto c = static_cast<std::size_t>(cells[i]);
    k.values[c] += (std::numbers::pi * std::pow(r, 4) * s.length / (8.0 * viscosity * geo.volumes[c])) *
                   (t * t.transpose());
  }
  return k;
}

ScalarCellField average_porosity(std::span<const LowerSegment> segments, const Mesh &mesh,
                                 const CompartmentSpec &spec) {
  const auto selected = select_segments(segments, spec);
  const auto cells = assign_segments_to_cells(selected, mesh);
  const auto geo = cell_geometry(mesh);
  ScalarCellField phi{spec.id, std::vector<double>(mesh.num_cells(), 0.0)};
  for (std::size_t i = 0; i < selected.size(); ++i) {
    const auto &s = selected[i];
    const auto c = static_cast<std::size_t>(cells[i]);
    phi.values[c] += std::numbers::pi * 0.25 * s.diameter * s.diameter * s.length / geo.volumes[c];
  }
  for (std::size_t c = 0; c < phi.values.size(); ++c)
    if (phi.values[c] > 1.0)
      throw GeometryError("compartment " + std::to_string(spec.id) + ": vessel volume exceeds cell " +
                          std::to_string(c) + " (porosity " + std::to_string(phi.values[c]) + ")");
  return phi;
}

ScalarCellField perfusion_coupling_coeffs(std::span<const LowerSegment> interface, const Mesh &mesh,
                                          double viscosity, double scale) {
  const auto cells = assign_segments_to_cells(interface, mesh);
  const auto geo = cell_geometry(mesh);
  ScalarCellField g{0, std::vector<double>(mesh.num_cells(), 0.0)};
  for (std::size_t i = 0; i < interface.size(); ++i) {
    const auto &s = interface[i];
    const double r = 0.5 * s.diameter;
    const auto c = static_cast<std::size_t>(cells[i]);
    g.values[c] += scale * std::numbers::pi * std::pow(r, 4) / (8.0 * viscosity * s.length * geo.volumes[c]);
  }
  return g;
}

std::vector<double> spectral_norms(const TensorCellField &field) {
  std::vector<double> out;
  out.reserve(field.values.size());
  for (const auto &k : field.values) {
    if (k.isZero(0.0)) {
      out.push_back(0.0);
      continue;
    }
    Eigen::SelfAdjointEigenSolver<Mat3> es(k, Eigen::EigenvaluesOnly);
    out.push_back(es.eigenvalues().cwiseAbs().maxCoeff());
  }
  return out;
}

std::optional<double> support_norm(const TensorCellField &field, const Mesh &mesh) {
  const auto norms = spectral_norms(field);
  const auto geo = cell_geometry(mesh);
  double sum = 0.0, vol = 0.0;
  for (std::size_t c = 0; c < norms.size(); ++c)
    if (norms[c] > 0.0) {
      sum += norms[c] * geo.volumes[c];
      vol += geo.volumes[c];
    }
  if (vol == 0.0)
    return std::nullopt;
  return sum / vol;
}

TensorCellField regularize(const TensorCellField &field, const Mesh &mesh, double epsilon,
                           std::optional<double> k_bar, std::optional<double> fallback) {
  if (!(epsilon > 0.0))
    throw ConfigError("regularization", "epsilon must be positive");
  if (field.values.size() != mesh.num_cells())
    throw ContractError("regularize: field size does not match the mesh");
  std::optional<double> scale = k_bar ? k_bar : support_norm(field, mesh);
  if (!scale)
    scale = fallback;
  if (!scale || !(*scale > 0.0))
    throw ConfigError("regularization",
                      "permeability of compartment " + std::to_string(field.compartment) +
                          " vanishes everywhere; an explicit fallback K_bar is required");
  TensorCellField out = field;
  const double shift = epsilon * *scale;
  for (auto &k : out.values)
    k.diagonal().array() += shift;
  return out;
}

ScalarCellField regularize_porosity(const ScalarCellField &field, const Mesh &mesh, double epsilon) {
  if (!(epsilon >= 0.0))
    throw ConfigError("porosity_regularization", "epsilon must be non-negative");
  const auto geo = cell_geometry(mesh);
  double sum = 0.0, vol = 0.0;
  for (std::size_t c = 0; c < field.values.size(); ++c)
    if (field.values[c] > 0.0) {
      sum += field.values[c] * geo.volumes[c];
      vol += geo.volumes[c];
    }
  ScalarCellField out = field;
  if (vol == 0.0 || epsilon == 0.0)
    return out;
  const double shift = epsilon * sum / vol;
  for (auto &p : out.values)
    p += shift;
  return out;
}

PerfusionParams build_three_compartment_params(const Mesh &mesh, const ThreeCompartmentInputs &in) {
  const std::array<CompartmentSpec, 2> specs{in.portal, in.hepatic};
  validate_compartment_specs(specs);
  if (!(in.filtration_permeability > 0.0))
    throw ConfigError("filtration.permeability", "must be positive");
  if (!(in.filtration_porosity >= 0.0 && in.filtration_porosity < 1.0))
    throw ConfigError("filtration.porosity", "must lie in [0, 1)");

  const std::size_t nc = mesh.num_cells();
  PerfusionParams p;
  p.permeability.resize(3);
  p.porosity.resize(3);

  auto k1 = average_permeability(in.portal_segments, mesh, in.portal, in.viscosity);
  auto k3 = average_permeability(in.hepatic_segments, mesh, in.hepatic, in.viscosity);
  p.permeability[0] = regularize(k1, mesh, in.regularization);
  p.permeability[2] = regularize(k3, mesh, in.regularization);
  p.permeability[0].compartment = 1;
  p.permeability[2].compartment = 3;
  p.permeability[1] = {2, std::vector<Mat3>(nc, in.filtration_permeability * Mat3::Identity())};

  p.porosity[0] = regularize_porosity(average_porosity(in.portal_segments, mesh, in.portal), mesh,
                                      in.porosity_regularization);
  p.porosity[2] = regularize_porosity(average_porosity(in.hepatic_segments, mesh, in.hepatic), mesh,
                                      in.porosity_regularization);
  p.porosity[1] = {2, std::vector<double>(nc, in.filtration_porosity)};

  auto g12 = perfusion_coupling_coeffs(interface_segments(in.portal_segments, in.portal), mesh, in.viscosity,
                                       in.coupling_scale);
  auto g23 = perfusion_coupling_coeffs(interface_segments(in.hepatic_segments, in.hepatic), mesh, in.viscosity,
                                       in.coupling_scale);
  p.couplings.push_back({1, 2, std::move(g12)});
  p.couplings.push_back({2, 3, std::move(g23)});

  p.matrix_fraction = {0, std::vector<double>(nc, 0.0)};
  for (std::size_t c = 0; c < nc; ++c) {
    const double sum = p.porosity[0].values[c] + p.porosity[1].values[c] + p.porosity[2].values[c];
    if (sum > 1.0)
      throw GeometryError("porosities exceed one in cell " + std::to_string(c));
    p.matrix_fraction.values[c] = 1.0 - sum;
  }
  check_perfusion_params(p, mesh);
  return p;
}

void check_perfusion_params(const PerfusionParams &params, const Mesh &mesh) {
  const std::size_t nc = mesh.num_cells();
  if (params.porosity.size() != params.permeability.size())
    throw ContractError("params: porosity and permeability compartment counts differ");
  for (int i = 0; i < params.num_compartments(); ++i) {
    const auto &k = params.permeability[static_cast<std::size_t>(i)];
    const auto &phi = params.porosity[static_cast<std::size_t>(i)];
    if (k.values.size() != nc || phi.values.size() != nc)
      throw ContractError("params: compartment " + std::to_string(i + 1) + " fields are not sized to the mesh");
    if (!is_symmetric(k))
      throw ContractError("params: permeability of compartment " + std::to_string(i + 1) + " is not symmetric");
    for (double v : phi.values)
      if (!(v >= 0.0))
        throw ContractError("params: negative porosity in compartment " + std::to_string(i + 1));
  }
  for (const auto &c : params.couplings) {
    if (c.first < 1 || c.second < 1 || c.first > params.num_compartments() ||
        c.second > params.num_compartments() || c.first == c.second)
      throw ContractError("params: invalid coupling pair");
    if (c.coefficient.values.size() != nc)
      throw ContractError("params: coupling field is not sized to the mesh");
    for (double g : c.coefficient.values)
      if (!(g >= 0.0))
        throw ContractError("params: negative coupling coefficient");
  }
  if (params.matrix_fraction.values.size() == nc) {
    for (std::size_t c = 0; c < nc; ++c) {
      double sum = params.matrix_fraction.values[c];
      for (const auto &phi : params.porosity)
        sum += phi.values[c];
      if (std::abs(sum - 1.0) > 1e-12 || params.matrix_fraction.values[c] < 0.0)
        throw ContractError("params: volume fractions do not partition unity in cell " + std::to_string(c));
    }
  }
}

} // namespace perfusim
