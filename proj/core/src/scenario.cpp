// Copyright 2026 The perfusim Authors
// SPDX-License-Identifier: Apache-2.0

#include "perfusim/scenario.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "json.hpp"
#include <spdlog/spdlog.h>

#include "perfusim/error.hpp"
#include "perfusim/mesh_builders.hpp"

namespace perfusim {

namespace {

using nlohmann::json;

std::string join(const std::string &path, const std::string &key) { return path.empty() ? key : path + "." + key; }

void check_keys(const json &obj, std::initializer_list<const char *> allowed, const std::string &path) {
  if (!obj.is_object())
    throw ConfigError(path.empty() ? "config" : path, "must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto &[key, value] : obj.items())
    if (!ok.contains(key))
      throw ConfigError(join(path, key), "unknown key");
}

const json &require(const json &obj, const std::string &key, const std::string &path) {
  if (!obj.contains(key))
    throw ConfigError(join(path, key), "missing required value");
  return obj.at(key);
}

double number(const json &obj, const std::string &key, const std::string &path, std::optional<double> fallback = {}) {
  if (!obj.contains(key)) {
    if (fallback)
      return *fallback;
    throw ConfigError(join(path, key), "missing required value");
  }
  const auto &v = obj.at(key);
  if (!v.is_number())
    throw ConfigError(join(path, key), "must be a number");
  const double d = v.get<double>();
  if (!std::isfinite(d))
    throw ConfigError(join(path, key), "must be finite");
  return d;
}

int integer(const json &obj, const std::string &key, const std::string &path, std::optional<int> fallback = {}) {
  if (!obj.contains(key)) {
    if (fallback)
      return *fallback;
    throw ConfigError(join(path, key), "missing required value");
  }
  const auto &v = obj.at(key);
  if (!v.is_number_integer())
    throw ConfigError(join(path, key), "must be an integer");
  return v.get<int>();
}

bool boolean(const json &obj, const std::string &key, const std::string &path, bool fallback) {
  if (!obj.contains(key))
    return fallback;
  if (!obj.at(key).is_boolean())
    throw ConfigError(join(path, key), "must be true or false");
  return obj.at(key).get<bool>();
}

std::string text(const json &obj, const std::string &key, const std::string &path,
                 std::optional<std::string> fallback = {}) {
  if (!obj.contains(key)) {
    if (fallback)
      return *fallback;
    throw ConfigError(join(path, key), "missing required value");
  }
  if (!obj.at(key).is_string())
    throw ConfigError(join(path, key), "must be a string");
  return obj.at(key).get<std::string>();
}

Vec3 vec3(const json &v, const std::string &field) {
  if (!v.is_array() || v.size() != 3)
    throw ConfigError(field, "must be an array of three numbers");
  Vec3 out;
  for (int k = 0; k < 3; ++k) {
    if (!v[static_cast<std::size_t>(k)].is_number())
      throw ConfigError(field, "must be an array of three numbers");
    out[k] = v[static_cast<std::size_t>(k)].get<double>();
  }
  if (!out.allFinite())
    throw ConfigError(field, "must be finite");
  return out;
}

Vec3 vec3(const json &obj, const std::string &key, const std::string &path, std::optional<Vec3> fallback = {}) {
  if (!obj.contains(key)) {
    if (fallback)
      return *fallback;
    throw ConfigError(join(path, key), "missing required value");
  }
  return vec3(obj.at(key), join(path, key));
}

json parse_json(const std::string &content) {
  try {
    return json::parse(content);
  } catch (const json::parse_error &e) {
    throw FormatError(std::string("invalid JSON: ") + e.what());
  }
}

std::string read_file(const std::filesystem::path &path) {
  std::ifstream is(path);
  if (!is)
    throw ConfigError("config", "cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

TreeGeneratorSpec tree_spec_from_json(const json &j, const std::string &path) {
  check_keys(j, {"format", "depth", "root_diameter", "diameter_ratio", "length_ratio", "tortuosity", "region",
                 "root_position", "root_direction", "branching_angle_deg", "jitter_deg", "candidates", "seed"},
             path);
  TreeGeneratorSpec s;
  s.depth = integer(j, "depth", path);
  s.root_diameter = number(j, "root_diameter", path);
  auto ratios = [&](const char *key, double &scalar, std::vector<double> &levels) {
    if (j.contains(key) && j.at(key).is_array()) {
      for (std::size_t k = 0; k < j.at(key).size(); ++k) {
        const auto &v = j.at(key)[k];
        if (!v.is_number())
          throw ConfigError(join(path, key) + "[" + std::to_string(k) + "]", "must be a number");
        levels.push_back(v.get<double>());
      }
      if (!levels.empty())
        scalar = levels.front();
    } else {
      scalar = number(j, key, path, scalar);
    }
  };
  ratios("diameter_ratio", s.diameter_ratio, s.level_diameter_ratios);
  ratios("length_ratio", s.length_ratio, s.level_length_ratios);
  s.tortuosity = number(j, "tortuosity", path, s.tortuosity);
  const auto &r = require(j, "region", path);
  const std::string rp = join(path, "region");
  check_keys(r, {"shape", "center", "half_extents"}, rp);
  const std::string shape = text(r, "shape", rp, "box");
  if (shape == "box")
    s.region.shape = Region::Shape::box;
  else if (shape == "ellipsoid")
    s.region.shape = Region::Shape::ellipsoid;
  else
    throw ConfigError(join(rp, "shape"), "must be \"box\" or \"ellipsoid\"");
  s.region.center = vec3(r, "center", rp);
  s.region.half_extents = vec3(r, "half_extents", rp);
  s.root_position = vec3(j, "root_position", path);
  s.root_direction = vec3(j, "root_direction", path);
  s.branching_angle_deg = number(j, "branching_angle_deg", path, s.branching_angle_deg);
  s.jitter_deg = number(j, "jitter_deg", path, s.jitter_deg);
  s.candidates = integer(j, "candidates", path, s.candidates);
  if (j.contains("seed")) {
    if (!j.at("seed").is_number_unsigned())
      throw ConfigError(join(path, "seed"), "must be a non-negative integer");
    s.seed = j.at("seed").get<std::uint64_t>();
  }
  if (s.depth < 1)
    throw ConfigError(join(path, "depth"), "must be at least 1");
  if (!(s.root_diameter > 0.0))
    throw ConfigError(join(path, "root_diameter"), "must be positive");
  if (!s.level_diameter_ratios.empty() && s.level_diameter_ratios.size() != static_cast<std::size_t>(s.depth - 1))
    throw ConfigError(join(path, "diameter_ratio"), "needs depth - 1 per-level values");
  if (!s.level_length_ratios.empty() && s.level_length_ratios.size() != static_cast<std::size_t>(s.depth))
    throw ConfigError(join(path, "length_ratio"), "needs depth per-level values");
  for (double r : s.level_diameter_ratios.empty() ? std::vector<double>{s.diameter_ratio} : s.level_diameter_ratios)
    if (!(r > 0.0 && r <= 1.0))
      throw ConfigError(join(path, "diameter_ratio"), "must lie in (0, 1]");
  for (double r : s.level_length_ratios.empty() ? std::vector<double>{s.length_ratio} : s.level_length_ratios)
    if (!(r > 0.0))
      throw ConfigError(join(path, "length_ratio"), "must be positive");
  if (!(s.tortuosity >= 1.0))
    throw ConfigError(join(path, "tortuosity"), "must be at least 1");
  if ((s.region.half_extents.array() <= 0.0).any())
    throw ConfigError(join(rp, "half_extents"), "must be positive");
  if (s.root_direction.norm() == 0.0)
    throw ConfigError(join(path, "root_direction"), "must be non-zero");
  if (s.candidates < 1)
    throw ConfigError(join(path, "candidates"), "must be at least 1");
  return s;
}

TreeSource tree_source(const json &j, const std::string &path) {
  check_keys(j, {"path", "generate", "hs_threshold"}, path);
  TreeSource t;
  if (j.contains("path") == j.contains("generate"))
    throw ConfigError(path, "needs exactly one of \"path\" or \"generate\"");
  if (j.contains("path"))
    t.source = std::filesystem::path(text(j, "path", path));
  else
    t.source = tree_spec_from_json(j.at("generate"), join(path, "generate"));
  t.hs_threshold = integer(j, "hs_threshold", path);
  if (t.hs_threshold < 1)
    throw ConfigError(join(path, "hs_threshold"), "must be at least 1");
  return t;
}

CompartmentSpec compartment_range(const json &j, const std::string &path, int id, VesselGroup group) {
  check_keys(j, {"diameter_min", "diameter_max"}, path);
  CompartmentSpec c;
  c.id = id;
  c.group = group;
  c.diameter_min = number(j, "diameter_min", path);
  c.diameter_max = number(j, "diameter_max", path);
  if (!(c.diameter_min >= 0.0 && c.diameter_max > c.diameter_min))
    throw ConfigError(path, "needs 0 <= diameter_min < diameter_max");
  return c;
}

std::filesystem::path resolve(const std::filesystem::path &base, const std::filesystem::path &p) {
  return p.is_absolute() || base.empty() ? p : base / p;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double median(std::vector<double> v) {
  if (v.empty())
    return 0.0;
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  const double hi = *mid;
  if (v.size() % 2 == 1)
    return hi;
  const double lo = *std::max_element(v.begin(), mid);
  return 0.5 * (lo + hi);
}

Mesh build_mesh(const ScenarioConfig &config) {
  if (const auto *p = std::get_if<std::filesystem::path>(&config.mesh))
    return load_mesh(resolve(config.base_dir, *p));
  const auto &g = std::get<MeshGenerator>(config.mesh);
  if (g.shape == MeshGenerator::Shape::box)
    return make_box_mesh(g.lo, g.hi, g.divisions);
  return make_ellipsoid_mesh(g.center, g.semi_axes, g.divisions);
}

VascularTree build_tree(const ScenarioConfig &config, const TreeSource &src) {
  if (const auto *p = std::get_if<std::filesystem::path>(&src.source))
    return load_tree(resolve(config.base_dir, *p));
  return build_synthetic_tree(std::get<TreeGeneratorSpec>(src.source));
}

void check_probes(const ScenarioConfig &config, const Mesh &mesh) {
  const double slack = Mesh::kRelativeEpsilon * mesh.bbox_diagonal();
  for (std::size_t k = 0; k < config.transport.probes.size(); ++k) {
    const Vec3 &p = config.transport.probes[k];
    if ((p.array() < mesh.bbox_min().array() - slack).any() || (p.array() > mesh.bbox_max().array() + slack).any())
      throw ConfigError("probes[" + std::to_string(k) + "]", "lies outside the mesh bounding box");
  }
}

std::string fixed_name(const std::string &stem, std::size_t k, const std::string &ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "_%03zu", k);
  return stem + buf + ext;
}

std::vector<VtkField> parameter_fields(const PerfusionParams &params, const PressureSolution *solution) {
  std::vector<VtkField> f;
  for (int i = 1; i <= params.num_compartments(); ++i) {
    const auto ui = static_cast<std::size_t>(i - 1);
    f.push_back({"K" + std::to_string(i), params.permeability[ui]});
    f.push_back({"phi" + std::to_string(i), params.porosity[ui]});
  }
  for (const auto &c : params.couplings)
    f.push_back({"G" + std::to_string(c.first) + std::to_string(c.second), c.coefficient});
  if (solution) {
    for (std::size_t i = 0; i < solution->pressures.size(); ++i) {
      f.push_back({"p" + std::to_string(i + 1), solution->pressures[i]});
      f.push_back({"w" + std::to_string(i + 1), solution->velocities[i]});
    }
  }
  return f;
}

UpscaleStats upscale_stats(const Mesh &mesh, const HierarchySplit &portal, const HierarchySplit &hepatic,
                           const ScenarioConfig &config) {
  UpscaleStats st;
  auto one = [&](const HierarchySplit &split, const CompartmentSpec &spec, double &mk, double &mp, std::size_t &n) {
    const auto k = average_permeability(split.lower_segments, mesh, spec, config.fluid.viscosity);
    const auto phi = average_porosity(split.lower_segments, mesh, spec);
    const auto norms = spectral_norms(k);
    std::vector<double> ks, ps;
    for (std::size_t c = 0; c < norms.size(); ++c)
      if (norms[c] > 0.0) {
        ks.push_back(norms[c]);
        ps.push_back(phi.values[c]);
      }
    mk = median(ks);
    mp = median(ps);
    n = ks.size();
  };
  one(portal, config.portal, st.median_k1, st.median_phi1, st.support1);
  one(hepatic, config.hepatic, st.median_k3, st.median_phi3, st.support3);
  return st;
}

} // namespace

ScenarioConfig parse_scenario(const std::string &content, const std::filesystem::path &base_dir) {
  const json j = parse_json(content);
  check_keys(j, {"format", "mesh", "portal_tree", "hepatic_tree", "compartments", "regularization", "fluid", "v_in",
                 "p_out", "coupling", "bolus", "transport", "probes", "lesion", "output"},
             "");
  if (text(j, "format", "") != "scenario-v1")
    throw ConfigError("format", "must be \"scenario-v1\"");
  ScenarioConfig c;
  c.base_dir = base_dir;

  const auto &m = require(j, "mesh", "");
  check_keys(m, {"path", "generate"}, "mesh");
  if (m.contains("path") == m.contains("generate"))
    throw ConfigError("mesh", "needs exactly one of \"path\" or \"generate\"");
  if (m.contains("path")) {
    c.mesh = std::filesystem::path(text(m, "path", "mesh"));
  } else {
    const auto &g = m.at("generate");
    check_keys(g, {"shape", "lo", "hi", "center", "semi_axes", "divisions"}, "mesh.generate");
    MeshGenerator gen;
    const std::string shape = text(g, "shape", "mesh.generate");
    if (shape == "box") {
      gen.shape = MeshGenerator::Shape::box;
      gen.lo = vec3(g, "lo", "mesh.generate");
      gen.hi = vec3(g, "hi", "mesh.generate");
      if ((gen.hi.array() <= gen.lo.array()).any())
        throw ConfigError("mesh.generate.hi", "must exceed lo in every coordinate");
    } else if (shape == "ellipsoid") {
      gen.shape = MeshGenerator::Shape::ellipsoid;
      gen.center = vec3(g, "center", "mesh.generate");
      gen.semi_axes = vec3(g, "semi_axes", "mesh.generate");
      if ((gen.semi_axes.array() <= 0.0).any())
        throw ConfigError("mesh.generate.semi_axes", "must be positive");
    } else {
      throw ConfigError("mesh.generate.shape", "must be \"box\" or \"ellipsoid\"");
    }
    const auto &d = require(g, "divisions", "mesh.generate");
    if (!d.is_array() || d.size() != 3)
      throw ConfigError("mesh.generate.divisions", "must be three positive integers");
    for (std::size_t k = 0; k < 3; ++k) {
      if (!d[k].is_number_integer() || d[k].get<int>() < 1)
        throw ConfigError("mesh.generate.divisions", "must be three positive integers");
      gen.divisions[k] = d[k].get<int>();
    }
    c.mesh = gen;
  }

  c.portal_tree = tree_source(require(j, "portal_tree", ""), "portal_tree");
  c.hepatic_tree = tree_source(require(j, "hepatic_tree", ""), "hepatic_tree");

  const auto &comp = require(j, "compartments", "");
  check_keys(comp, {"portal", "hepatic", "filtration", "coupling_scale"}, "compartments");
  c.portal = compartment_range(require(comp, "portal", "compartments"), "compartments.portal", 1, VesselGroup::portal);
  c.hepatic =
      compartment_range(require(comp, "hepatic", "compartments"), "compartments.hepatic", 3, VesselGroup::hepatic);
  if (comp.contains("filtration")) {
    const auto &f = comp.at("filtration");
    check_keys(f, {"permeability", "porosity"}, "compartments.filtration");
    c.filtration_permeability = number(f, "permeability", "compartments.filtration", c.filtration_permeability);
    c.filtration_porosity = number(f, "porosity", "compartments.filtration", c.filtration_porosity);
  }
  c.coupling_scale = number(comp, "coupling_scale", "compartments", 1.0);
  if (!(c.filtration_permeability > 0.0))
    throw ConfigError("compartments.filtration.permeability", "must be positive");
  if (!(c.filtration_porosity >= 0.0 && c.filtration_porosity < 1.0))
    throw ConfigError("compartments.filtration.porosity", "must lie in [0, 1)");
  if (!(c.coupling_scale > 0.0))
    throw ConfigError("compartments.coupling_scale", "must be positive");

  if (j.contains("regularization")) {
    const auto &r = j.at("regularization");
    check_keys(r, {"epsilon", "porosity_epsilon"}, "regularization");
    c.regularization = number(r, "epsilon", "regularization", c.regularization);
    c.porosity_regularization = number(r, "porosity_epsilon", "regularization", c.porosity_regularization);
  }
  if (!(c.regularization > 0.0))
    throw ConfigError("regularization.epsilon", "must be positive");
  if (!(c.porosity_regularization >= 0.0))
    throw ConfigError("regularization.porosity_epsilon", "must be non-negative");

  if (j.contains("fluid")) {
    const auto &f = j.at("fluid");
    check_keys(f, {"density", "viscosity"}, "fluid");
    c.fluid.density = number(f, "density", "fluid", c.fluid.density);
    c.fluid.viscosity = number(f, "viscosity", "fluid", c.fluid.viscosity);
  }
  if (!(c.fluid.density >= 0.0))
    throw ConfigError("fluid.density", "must be non-negative");
  if (!(c.fluid.viscosity > 0.0))
    throw ConfigError("fluid.viscosity", "must be positive");

  c.v_in = number(j, "v_in", "");
  c.p_out = number(j, "p_out", "");
  if (c.v_in < 0.0)
    throw ConfigError("v_in", "must be non-negative");

  if (j.contains("coupling")) {
    const auto &o = j.at("coupling");
    const std::string p = "coupling";
    check_keys(o, {"pseudo_steps", "max_iterations", "tolerance", "relaxation", "acceleration", "anderson_depth",
                   "newton_step", "linear_solver", "linear_tolerance", "newton_tolerance", "newton_max_iterations"},
               p);
    auto &co = c.coupling;
    co.pseudo_steps = integer(o, "pseudo_steps", p, co.pseudo_steps);
    co.max_iterations = integer(o, "max_iterations", p, co.max_iterations);
    co.tolerance = number(o, "tolerance", p, co.tolerance);
    co.relaxation = number(o, "relaxation", p, co.relaxation);
    co.anderson_depth = integer(o, "anderson_depth", p, co.anderson_depth);
    co.newton_step = number(o, "newton_step", p, co.newton_step);
    const std::string acc = text(o, "acceleration", p, "newton");
    if (acc == "newton")
      co.acceleration = CouplingOptions::Acceleration::newton;
    else if (acc == "anderson")
      co.acceleration = CouplingOptions::Acceleration::anderson;
    else if (acc == "none")
      co.acceleration = CouplingOptions::Acceleration::none;
    else
      throw ConfigError("coupling.acceleration", "must be \"newton\", \"anderson\" or \"none\"");
    if (!(co.newton_step > 0.0))
      throw ConfigError("coupling.newton_step", "must be positive");
    const std::string ls = text(o, "linear_solver", p, "cg");
    if (ls == "cg")
      co.darcy.solver = LinearSolverKind::cg;
    else if (ls == "cholesky")
      co.darcy.solver = LinearSolverKind::cholesky;
    else
      throw ConfigError("coupling.linear_solver", "must be \"cg\" or \"cholesky\"");
    co.darcy.tolerance = number(o, "linear_tolerance", p, co.darcy.tolerance);
    co.newton.tolerance = number(o, "newton_tolerance", p, co.newton.tolerance);
    co.newton.max_iterations = integer(o, "newton_max_iterations", p, co.newton.max_iterations);
    if (co.pseudo_steps < 1)
      throw ConfigError("coupling.pseudo_steps", "must be at least 1");
    if (co.max_iterations < 1)
      throw ConfigError("coupling.max_iterations", "must be at least 1");
    if (!(co.tolerance > 0.0))
      throw ConfigError("coupling.tolerance", "must be positive");
    if (!(co.relaxation > 0.0 && co.relaxation <= 1.0))
      throw ConfigError("coupling.relaxation", "must lie in (0, 1]");
    if (co.anderson_depth < 1)
      throw ConfigError("coupling.anderson_depth", "must be at least 1");
    if (!(co.darcy.tolerance > 0.0))
      throw ConfigError("coupling.linear_tolerance", "must be positive");
  }
  c.coupling.fluid = c.fluid;

  if (j.contains("bolus")) {
    const auto &b = j.at("bolus");
    check_keys(b, {"peak", "duration"}, "bolus");
    c.bolus.peak = number(b, "peak", "bolus", c.bolus.peak);
    c.bolus.duration = number(b, "duration", "bolus", c.bolus.duration);
  }
  validate_bolus(c.bolus);

  const auto &t = require(j, "transport", "");
  check_keys(t, {"t_end", "output_interval", "max_time_step", "cfl_safety", "snapshot_times"}, "transport");
  c.transport.t_end = number(t, "t_end", "transport");
  c.transport.output_interval = number(t, "output_interval", "transport", c.transport.output_interval);
  c.transport.max_time_step = number(t, "max_time_step", "transport", 0.0);
  c.transport.cfl_safety = number(t, "cfl_safety", "transport", c.transport.cfl_safety);
  if (t.contains("snapshot_times")) {
    const auto &s = t.at("snapshot_times");
    if (!s.is_array())
      throw ConfigError("transport.snapshot_times", "must be an array of times");
    for (const auto &v : s) {
      if (!v.is_number() || v.get<double>() < 0.0)
        throw ConfigError("transport.snapshot_times", "must be non-negative numbers");
      c.transport.snapshot_times.push_back(v.get<double>());
    }
  }
  if (!(c.transport.t_end > 0.0))
    throw ConfigError("transport.t_end", "must be positive");
  if (!(c.transport.output_interval > 0.0))
    throw ConfigError("transport.output_interval", "must be positive");
  if (c.transport.max_time_step < 0.0)
    throw ConfigError("transport.max_time_step", "must be non-negative");
  if (!(c.transport.cfl_safety > 0.0 && c.transport.cfl_safety <= 1.0))
    throw ConfigError("transport.cfl_safety", "must lie in (0, 1]");

  if (j.contains("probes")) {
    const auto &p = j.at("probes");
    if (!p.is_array())
      throw ConfigError("probes", "must be an array of points");
    for (std::size_t k = 0; k < p.size(); ++k)
      c.transport.probes.push_back(vec3(p[k], "probes[" + std::to_string(k) + "]"));
  }

  if (j.contains("lesion")) {
    const auto &l = j.at("lesion");
    check_keys(l, {"center", "radius", "compartment", "factor"}, "lesion");
    LesionSpec ls;
    ls.center = vec3(l, "center", "lesion");
    ls.radius = number(l, "radius", "lesion");
    ls.compartment = integer(l, "compartment", "lesion", 2);
    ls.factor = number(l, "factor", "lesion", 1e-6);
    if (!(ls.radius > 0.0))
      throw ConfigError("lesion.radius", "must be positive");
    if (ls.compartment < 1 || ls.compartment > 3)
      throw ConfigError("lesion.compartment", "must be 1, 2 or 3");
    if (!(ls.factor > 0.0))
      throw ConfigError("lesion.factor", "must be positive (zero makes the system singular)");
    c.lesion = ls;
  }

  if (j.contains("output")) {
    const auto &o = j.at("output");
    check_keys(o, {"directory", "vtk"}, "output");
    c.output_dir = text(o, "directory", "output", "out");
    c.write_vtk = boolean(o, "vtk", "output", true);
  }
  c.output_dir = resolve(base_dir, c.output_dir);
  return c;
}

ScenarioConfig load_scenario(const std::filesystem::path &path) {
  return parse_scenario(read_file(path), path.parent_path());
}

TreeGeneratorSpec parse_tree_spec(const std::string &content) {
  const json j = parse_json(content);
  if (j.contains("format") && text(j, "format", "") != "tree-spec-v1")
    throw ConfigError("format", "must be \"tree-spec-v1\"");
  return tree_spec_from_json(j, "");
}

std::vector<int> lesion_cells(const Mesh &mesh, const LesionSpec &lesion) {
  const auto geo = cell_geometry(mesh);
  std::vector<int> cells;
  for (std::size_t c = 0; c < mesh.num_cells(); ++c)
    if ((geo.barycenters[c] - lesion.center).norm() <= lesion.radius)
      cells.push_back(static_cast<int>(c));
  return cells;
}

PerfusionParams apply_lesion(const PerfusionParams &params, const Mesh &mesh, const LesionSpec &lesion) {
  if (!(lesion.factor > 0.0))
    throw ConfigError("lesion.factor", "must be positive");
  if (lesion.compartment < 1 || lesion.compartment > params.num_compartments())
    throw ConfigError("lesion.compartment", "does not exist");
  PerfusionParams out = params;
  const auto cells = lesion_cells(mesh, lesion);
  if (cells.empty()) {
    spdlog::warn("lesion sphere contains no cell barycenter; parameters unchanged");
    return out;
  }
  auto &k = out.permeability[static_cast<std::size_t>(lesion.compartment - 1)].values;
  for (int c : cells)
    k[static_cast<std::size_t>(c)] *= lesion.factor;
  spdlog::info("lesion: permeability of compartment {} scaled by {:g} in {} cells", lesion.compartment, lesion.factor,
               cells.size());
  return out;
}

void validate_scenario(const ScenarioConfig &config) {
  const Mesh mesh = build_mesh(config);
  check_probes(config, mesh);
  const auto portal = split_hierarchy(build_tree(config, config.portal_tree), config.portal_tree.hs_threshold);
  const auto hepatic = split_hierarchy(build_tree(config, config.hepatic_tree), config.hepatic_tree.hs_threshold);
  const std::array<CompartmentSpec, 2> specs{config.portal, config.hepatic};
  validate_compartment_specs(specs);
  map_terminals(portal.upper, mesh, "portal");
  map_terminals(hepatic.upper, mesh, "hepatic");
}

ScenarioResult run_scenario(const ScenarioConfig &config, bool write_outputs) {
  ScenarioResult r;
  r.config = config;
  auto t0 = std::chrono::steady_clock::now();

  r.mesh.emplace(build_mesh(config));
  const Mesh &mesh = *r.mesh;
  check_probes(config, mesh);
  const VascularTree portal_full = build_tree(config, config.portal_tree);
  const VascularTree hepatic_full = build_tree(config, config.hepatic_tree);
  r.portal.emplace(split_hierarchy(portal_full, config.portal_tree.hs_threshold));
  r.hepatic.emplace(split_hierarchy(hepatic_full, config.hepatic_tree.hs_threshold));
  spdlog::info("mesh: {} nodes, {} cells; portal tree {} segments ({} coupled terminals), hepatic tree {} segments "
               "({} coupled terminals)",
               mesh.num_nodes(), mesh.num_cells(), portal_full.num_segments(), r.portal->upper.terminals().size(),
               hepatic_full.num_segments(), r.hepatic->upper.terminals().size());
  r.times.setup = seconds_since(t0);

  t0 = std::chrono::steady_clock::now();
  ThreeCompartmentInputs in;
  in.portal_segments = r.portal->lower_segments;
  in.hepatic_segments = r.hepatic->lower_segments;
  in.portal = config.portal;
  in.hepatic = config.hepatic;
  in.filtration_permeability = config.filtration_permeability;
  in.filtration_porosity = config.filtration_porosity;
  in.viscosity = config.fluid.viscosity;
  in.regularization = config.regularization;
  in.porosity_regularization = config.porosity_regularization;
  in.coupling_scale = config.coupling_scale;
  r.params = build_three_compartment_params(mesh, in);
  r.upscale = upscale_stats(mesh, *r.portal, *r.hepatic, config);
  if (config.lesion)
    r.params = apply_lesion(r.params, mesh, *config.lesion);
  r.times.upscale = seconds_since(t0);

  t0 = std::chrono::steady_clock::now();
  try {
    r.flow.emplace(couple_steady(r.portal->upper, r.hepatic->upper, mesh, r.params, config.v_in, config.p_out,
                                 config.coupling));
  } catch (const SolverError &e) {
    throw SolverError(std::string("coupling stage: ") + e.what());
  }
  r.balance = mass_balance(*r.flow);
  r.times.coupling = seconds_since(t0);

  t0 = std::chrono::steady_clock::now();
  try {
    r.transport = simulate_perfusion_test(*r.flow, mesh, r.params, config.bolus, config.transport);
  } catch (const SolverError &e) {
    throw SolverError(std::string("transport stage: ") + e.what());
  }
  r.times.transport = seconds_since(t0);

  if (write_outputs) {
    t0 = std::chrono::steady_clock::now();
    const auto &dir = config.output_dir;
    std::filesystem::create_directories(dir);
    save_mesh(mesh, dir / "mesh.txt");
    save_tree(portal_full, dir / "portal_tree.txt");
    save_tree(hepatic_full, dir / "hepatic_tree.txt");
    write_iteration_log(r.flow->log, dir / "coupling_log.csv");
    write_probe_csv(r.transport, dir / "probes.csv");
    if (config.write_vtk) {
      const auto fields = parameter_fields(r.params, &r.flow->darcy);
      write_vtk(mesh, fields, dir / "flow.vtk", "perfusim steady flow");
      for (std::size_t k = 0; k < r.transport.snapshots.size(); ++k) {
        const auto &s = r.transport.snapshots[k];
        std::vector<VtkField> f;
        for (const auto &sat : s.saturation)
          f.push_back({"S" + std::to_string(sat.compartment), sat});
        f.push_back({"C", s.concentration});
        f.push_back({"C_cell", cell_average(mesh, s.concentration)});
        std::ostringstream title;
        title << "perfusim saturation t=" << std::setprecision(17) << s.time;
        write_vtk(mesh, f, dir / fixed_name("snapshot", k, ".vtk"), title.str());
      }
    }
    r.times.output = seconds_since(t0);
    std::ofstream os(dir / "summary.json");
    os << summary_json(r);
  }
  return r;
}

DifferenceReport difference_report(const ScenarioResult &baseline, const ScenarioResult &lesion) {
  const auto &a = baseline.transport;
  const auto &b = lesion.transport;
  if (!baseline.mesh || !lesion.mesh || baseline.mesh->num_nodes() != lesion.mesh->num_nodes() ||
      baseline.mesh->num_cells() != lesion.mesh->num_cells())
    throw ContractError("difference_report: runs use different meshes");
  if (a.times != b.times)
    throw ContractError("difference_report: runs have different sample times");
  if (a.probe_nodes != b.probe_nodes)
    throw ContractError("difference_report: runs have different probes");
  if (a.snapshots.size() != b.snapshots.size())
    throw ContractError("difference_report: runs have different snapshot times");
  DifferenceReport d;
  d.times = a.times;
  for (std::size_t k = 0; k < a.probe_values.size(); ++k) {
    std::vector<std::vector<double>> rows;
    for (std::size_t r = 0; r < a.probe_values[k].size(); ++r) {
      std::vector<double> row(a.probe_values[k][r].size());
      for (std::size_t c = 0; c < row.size(); ++c)
        row[c] = a.probe_values[k][r][c] - b.probe_values[k][r][c];
      rows.push_back(std::move(row));
    }
    d.probe_deltas.push_back(std::move(rows));
  }
  for (std::size_t k = 0; k < a.snapshots.size(); ++k) {
    const auto &sa = a.snapshots[k];
    const auto &sb = b.snapshots[k];
    if (sa.time != sb.time)
      throw ContractError("difference_report: runs have different snapshot times");
    std::vector<NodeField> fields;
    for (std::size_t i = 0; i < sa.saturation.size(); ++i) {
      NodeField f{sa.saturation[i].compartment, sa.saturation[i].values};
      for (std::size_t n = 0; n < f.values.size(); ++n)
        f.values[n] -= sb.saturation[i].values[n];
      fields.push_back(std::move(f));
    }
    NodeField c{0, sa.concentration.values};
    for (std::size_t n = 0; n < c.values.size(); ++n)
      c.values[n] -= sb.concentration.values[n];
    fields.push_back(std::move(c));
    d.snapshot_times.push_back(sa.time);
    d.snapshot_deltas.push_back(std::move(fields));
  }
  return d;
}

double max_delta_outside(const DifferenceReport &report, const Mesh &mesh, const LesionSpec &lesion, double after) {
  double best = 0.0;
  for (std::size_t k = 0; k < report.snapshot_times.size(); ++k) {
    if (report.snapshot_times[k] <= after)
      continue;
    const auto &dc = report.snapshot_deltas[k].back().values;
    for (std::size_t n = 0; n < mesh.num_nodes(); ++n)
      if ((mesh.node(static_cast<int>(n)) - lesion.center).norm() > lesion.radius)
        best = std::max(best, std::abs(dc[n]));
  }
  return best;
}

double argmax_time(const PerfusionTestResult &result, std::size_t probe, std::size_t column) {
  const auto &rows = result.probe_values.at(probe);
  double best = -1.0, t = 0.0;
  for (std::size_t r = 0; r < rows.size(); ++r)
    if (rows[r].at(column) > best) {
      best = rows[r][column];
      t = result.times[r];
    }
  return t;
}

std::string summary_json(const ScenarioResult &r) {
  json j;
  j["format"] = "perfusim-summary-v1";
  if (r.mesh)
    j["mesh"] = {{"nodes", r.mesh->num_nodes()}, {"cells", r.mesh->num_cells()}};
  if (r.portal && r.hepatic) {
    j["trees"] = {
        {"portal",
         {{"upper_segments", r.portal->upper.num_segments()},
          {"coupled_terminals", r.portal->upper.terminals().size()},
          {"lower_segments", r.portal->lower_segments.size()}}},
        {"hepatic",
         {{"upper_segments", r.hepatic->upper.num_segments()},
          {"coupled_terminals", r.hepatic->upper.terminals().size()},
          {"lower_segments", r.hepatic->lower_segments.size()}}}};
  }
  j["upscale"] = {{"median_K1", r.upscale.median_k1}, {"median_K3", r.upscale.median_k3},
                  {"median_phi1", r.upscale.median_phi1}, {"median_phi3", r.upscale.median_phi3},
                  {"support_cells_1", r.upscale.support1}, {"support_cells_3", r.upscale.support3}};
  json checks = json::array();
  auto check = [&](const std::string &name, double value, double limit, bool pass) {
    checks.push_back({{"name", name}, {"value", value}, {"limit", limit}, {"pass", pass}});
  };
  if (r.flow) {
    const auto &f = *r.flow;
    j["coupling"] = {{"converged", f.converged},
                     {"iterations", f.iterations},
                     {"newton_iterations", f.newton_iterations},
                     {"cg_iterations", f.cg_iterations},
                     {"final_residual", f.log.empty() ? 0.0 : f.log.back().residual}};
    j["mass_balance"] = {{"portal_inflow", r.balance.portal_inflow},
                         {"hepatic_outflow", r.balance.hepatic_outflow},
                         {"exchange_12", r.balance.exchange_12},
                         {"exchange_23", r.balance.exchange_23},
                         {"max_relative_gap", r.balance.max_relative_gap}};
    check("mass_closure", r.balance.max_relative_gap, 1e-6, r.balance.max_relative_gap <= 1e-6);
    check("coupling_converged", f.iterations, r.config.coupling.max_iterations, f.converged);
    double worst = -std::numeric_limits<double>::infinity();
    for (const auto &e : f.hepatic_interface)
      worst = std::max(worst, e.flux);
    check("hepatic_sinks_drain", worst, 0.0, worst <= 0.0);
  }
  const auto &t = r.transport;
  if (!t.budget.empty()) {
    const auto &last = t.budget.back();
    json argmax = json::array();
    for (std::size_t k = 0; k < t.probe_values.size(); ++k) {
      json row = json::array();
      const std::size_t nv = t.probe_values[k].empty() ? 0 : t.probe_values[k].front().size();
      for (std::size_t c = 0; c < nv; ++c)
        row.push_back(argmax_time(t, k, c));
      argmax.push_back(row);
    }
    j["transport"] = {{"dt", t.dt},
                      {"steps", t.steps},
                      {"injected", last.injected},
                      {"drained", last.drained},
                      {"stored", last.stored},
                      {"max_budget_error", t.max_budget_error},
                      {"max_bound_violation", t.max_bound_violation},
                      {"probe_argmax_times", argmax}};
    check("tracer_budget", t.max_budget_error, 1e-8, t.max_budget_error <= 1e-8);
    check("saturation_bounds", t.max_bound_violation, 1e-12, t.max_bound_violation <= 1e-12);
  }
  j["checks"] = checks;
  j["timings_s"] = {{"setup", r.times.setup},
                    {"upscale", r.times.upscale},
                    {"coupling", r.times.coupling},
                    {"transport", r.times.transport},
                    {"output", r.times.output}};
  return j.dump(2) + "\n";
}

void write_difference_outputs(const DifferenceReport &report, const Mesh &mesh, const std::filesystem::path &dir) {
  std::filesystem::create_directories(dir);
  std::ofstream os(dir / "delta_probes.csv");
  if (!os)
    throw Error("cannot write " + (dir / "delta_probes.csv").string());
  os << "time";
  for (std::size_t k = 0; k < report.probe_deltas.size(); ++k) {
    const std::size_t nv = report.probe_deltas[k].empty() ? 4 : report.probe_deltas[k].front().size();
    for (std::size_t i = 0; i + 1 < nv; ++i)
      os << ",probe" << k << "_dS" << i + 1;
    os << ",probe" << k << "_dC";
  }
  os << '\n' << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t r = 0; r < report.times.size(); ++r) {
    os << report.times[r];
    for (const auto &probe : report.probe_deltas)
      for (double v : probe[r])
        os << ',' << v;
    os << '\n';
  }
  for (std::size_t k = 0; k < report.snapshot_deltas.size(); ++k) {
    std::vector<VtkField> f;
    const auto &fields = report.snapshot_deltas[k];
    for (std::size_t i = 0; i + 1 < fields.size(); ++i)
      f.push_back({"dS" + std::to_string(fields[i].compartment), fields[i]});
    f.push_back({"dC", fields.back()});
    std::ostringstream title;
    title << "perfusim difference t=" << std::setprecision(17) << report.snapshot_times[k];
    write_vtk(mesh, f, dir / fixed_name("delta_snapshot", k, ".vtk"), title.str());
  }
}

} // namespace perfusim
