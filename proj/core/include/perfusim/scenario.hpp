// Copyright 2026 The perfusim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "perfusim/coupling.hpp"
#include "perfusim/flow1d.hpp"
#include "perfusim/geometry.hpp"
#include "perfusim/transport.hpp"
#include "perfusim/upscale.hpp"
#include "perfusim/vtree.hpp"

namespace perfusim {

struct MeshGenerator {
  enum class Shape { box, ellipsoid };
  Shape shape = Shape::box;
  Vec3 lo = Vec3::Zero();        ///< box corner
  Vec3 hi = Vec3::Ones();        ///< box corner
  Vec3 center = Vec3::Zero();    ///< ellipsoid center
  Vec3 semi_axes = Vec3::Ones(); ///< ellipsoid semi-axes
  std::array<int, 3> divisions{4, 4, 4};
};

struct TreeSource {
  std::variant<std::filesystem::path, TreeGeneratorSpec> source;
  int hs_threshold = 1; ///< Horton-Strahler order splitting the 1D tree from the compartment vessels
};

struct LesionSpec {
  Vec3 center = Vec3::Zero();
  double radius = 0.0;  ///< m
  int compartment = 2;
  double factor = 1e-6; ///< permeability multiplier inside the sphere
};

struct ScenarioConfig {
  std::filesystem::path base_dir; ///< relative paths resolve against this directory
  std::variant<std::filesystem::path, MeshGenerator> mesh;
  TreeSource portal_tree;
  TreeSource hepatic_tree;
  CompartmentSpec portal;  ///< compartment 1
  CompartmentSpec hepatic; ///< compartment 3
  double filtration_permeability = 2e-14;
  double filtration_porosity = 0.15;
  double regularization = 1e-3;
  double porosity_regularization = 1e-3;
  double coupling_scale = 1.0;
  Fluid fluid;
  double v_in = 0.25; ///< m/s
  double p_out = 1e3; ///< Pa
  CouplingOptions coupling;
  BolusSpec bolus;
  PerfusionTestOptions transport;
  std::optional<LesionSpec> lesion;
  std::filesystem::path output_dir = "out";
  bool write_vtk = true;
};

/// Parses scenario-v1 JSON. Throws ConfigError naming the offending field.
ScenarioConfig parse_scenario(const std::string &text, const std::filesystem::path &base_dir = {});
ScenarioConfig load_scenario(const std::filesystem::path &path);

/// Tree generator spec from JSON (the format used by `gen-tree`).
TreeGeneratorSpec parse_tree_spec(const std::string &text);

/// K of the target compartment multiplied by `factor` in cells whose barycenter lies in the sphere.
PerfusionParams apply_lesion(const PerfusionParams &params, const Mesh &mesh, const LesionSpec &lesion);

/// Cells whose barycenter lies inside the lesion sphere.
std::vector<int> lesion_cells(const Mesh &mesh, const LesionSpec &lesion);

struct StageTimes {
  double setup = 0.0;
  double upscale = 0.0;
  double coupling = 0.0;
  double transport = 0.0;
  double output = 0.0;
};

struct UpscaleStats {
  double median_k1 = 0.0;   ///< median spectral norm over the unregularized support
  double median_k3 = 0.0;
  double median_phi1 = 0.0;
  double median_phi3 = 0.0;
  std::size_t support1 = 0; ///< cells in the support
  std::size_t support3 = 0;
};

struct ScenarioResult {
  ScenarioConfig config;
  std::optional<Mesh> mesh;
  std::optional<HierarchySplit> portal;
  std::optional<HierarchySplit> hepatic;
  PerfusionParams params;
  UpscaleStats upscale;
  std::optional<CoupledFlowState> flow;
  MassBalance balance;
  PerfusionTestResult transport;
  StageTimes times;
};

/// Runs mesh/trees, upscaling, the coupled flow and the perfusion test. Writes
/// outputs into config.output_dir when `write_outputs` is set.
ScenarioResult run_scenario(const ScenarioConfig &config, bool write_outputs = true);

/// Checks a configuration without solving: builds mesh and trees, splits the
/// hierarchies and maps terminal junctions. Throws on the first problem.
void validate_scenario(const ScenarioConfig &config);

struct DifferenceReport {
  std::vector<double> times;
  /// [probe][sample] baseline minus lesion: S per compartment then C.
  std::vector<std::vector<std::vector<double>>> probe_deltas;
  std::vector<double> snapshot_times;
  /// [snapshot] nodal deltas per compartment, then C.
  std::vector<std::vector<NodeField>> snapshot_deltas;
};

/// Baseline minus pathological. Throws ContractError when the runs are not comparable.
DifferenceReport difference_report(const ScenarioResult &baseline, const ScenarioResult &lesion);

/// Largest |delta C| over nodes outside the sphere and snapshots later than `after`.
double max_delta_outside(const DifferenceReport &report, const Mesh &mesh, const LesionSpec &lesion, double after);

/// Time of the maximum of one probe column (first occurrence).
double argmax_time(const PerfusionTestResult &result, std::size_t probe, std::size_t column);

/// Summary JSON text (mass balances, budgets, iteration counts, checks, timings).
std::string summary_json(const ScenarioResult &result);

void write_difference_outputs(const DifferenceReport &report, const Mesh &mesh, const std::filesystem::path &dir);

} // namespace perfusim
