// Copyright 2026 The perfusim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <span>
#include <vector>

#include "perfusim/geometry.hpp"
#include "perfusim/vtree.hpp"

namespace perfusim {

enum class VesselGroup { portal, hepatic, filtration };

/// One continuum compartment: the vessels of a group within a diameter range (min, max].
struct CompartmentSpec {
  int id = 1;        ///< 1-based compartment number
  VesselGroup group = VesselGroup::portal;
  double diameter_min = 0.0; ///< m, exclusive
  double diameter_max = 0.0; ///< m, inclusive
  int hierarchy = 0;         ///< 0 is the level next to the 1D trees

  bool contains(double diameter) const { return diameter > diameter_min && diameter <= diameter_max; }
};

/// Throws ConfigError when ranges in one group overlap or are out of order.
void validate_compartment_specs(std::span<const CompartmentSpec> specs);

/// Exchange coefficient field between compartments `first` and `second` (1-based ids).
struct CouplingField {
  int first = 0;
  int second = 0;
  ScalarCellField coefficient; ///< (Pa s)^-1
};

/// Per-cell compartment parameters. Vectors are indexed by compartment id - 1.
struct PerfusionParams {
  std::vector<TensorCellField> permeability; ///< m^2 (Pa s)^-1
  std::vector<ScalarCellField> porosity;
  std::vector<CouplingField> couplings;
  ScalarCellField matrix_fraction; ///< 1 - sum of porosities

  int num_compartments() const { return static_cast<int>(permeability.size()); }
  const CouplingField *coupling(int a, int b) const;
};

/// Containing cell of each segment midpoint (nearest cell when the midpoint lies outside the mesh).
std::vector<int> assign_segments_to_cells(std::span<const LowerSegment> segments, const Mesh &mesh);

/// Segments whose diameter falls in the compartment's range.
std::vector<LowerSegment> select_segments(std::span<const LowerSegment> segments, const CompartmentSpec &spec);

/// Segments of the compartment that hand flow to the next finer level: tree
/// leaves, or segments with a child below the compartment's range.
std::vector<LowerSegment> interface_segments(std::span<const LowerSegment> segments, const CompartmentSpec &spec);

/// K = (1/V) sum pi r^4 L / (8 mu) t t^T over the compartment's segments in each cell.
TensorCellField average_permeability(std::span<const LowerSegment> segments, const Mesh &mesh,
                                     const CompartmentSpec &spec, double viscosity);

/// phi = (1/V) sum pi r^2 L. Throws GeometryError if any cell exceeds 1.
ScalarCellField average_porosity(std::span<const LowerSegment> segments, const Mesh &mesh,
                                 const CompartmentSpec &spec);

/// G = scale * (1/V) sum pi r^4 / (8 mu L) over the given interface segments.
ScalarCellField perfusion_coupling_coeffs(std::span<const LowerSegment> interface, const Mesh &mesh,
                                          double viscosity, double scale = 1.0);

/// Largest eigenvalue of each (symmetric PSD) tensor.
std::vector<double> spectral_norms(const TensorCellField &field);

/// Volume-weighted mean spectral norm over cells with a non-zero tensor, or nullopt if there are none.
std::optional<double> support_norm(const TensorCellField &field, const Mesh &mesh);

/// K + eps * K_bar * I. K_bar defaults to support_norm(); `fallback` is used
/// when the field is identically zero. Throws ConfigError for eps <= 0 or when
/// no K_bar can be determined.
TensorCellField regularize(const TensorCellField &field, const Mesh &mesh, double epsilon,
                           std::optional<double> k_bar = std::nullopt,
                           std::optional<double> fallback = std::nullopt);

/// phi + eps * phi_bar with phi_bar the volume-weighted mean over the support.
/// Keeps the compartment's storage non-zero wherever its regularized permeability carries flow.
ScalarCellField regularize_porosity(const ScalarCellField &field, const Mesh &mesh, double epsilon);

/// Inputs for the three-compartment layout (1 portal, 2 filtration, 3 hepatic).
struct ThreeCompartmentInputs {
  std::span<const LowerSegment> portal_segments;
  std::span<const LowerSegment> hepatic_segments;
  CompartmentSpec portal;  ///< id 1
  CompartmentSpec hepatic; ///< id 3
  double filtration_permeability = 2e-14; ///< isotropic K^2
  double filtration_porosity = 0.15;
  double viscosity = 3.5e-3;
  double regularization = 1e-3;          ///< eps for K^1, K^3
  double porosity_regularization = 1e-3; ///< eps for phi^1, phi^3
  double coupling_scale = 1.0;
};

/// Upscaled, regularized parameters with couplings (1,2) and (2,3).
/// Throws GeometryError when porosities sum above one in a cell.
PerfusionParams build_three_compartment_params(const Mesh &mesh, const ThreeCompartmentInputs &in);

/// Checks 0 <= phi, sum phi + phi_m = 1, G >= 0 and symmetric K; throws ContractError otherwise.
void check_perfusion_params(const PerfusionParams &params, const Mesh &mesh);

} // namespace perfusim
