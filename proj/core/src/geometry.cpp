// Copyright 2026 The perfusim Authors
// SPDX-License-Identifier: Apache-2.0

#include "perfusim/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "perfusim/error.hpp"

namespace perfusim {

namespace {

// Outward-oriented faces of a positively oriented tetrahedron, as local indices.
constexpr std::array<std::array<int, 3>, 4> kLocalFaces{{{1, 2, 3}, {0, 3, 2}, {0, 1, 3}, {0, 2, 1}}};

Face sorted_face(const Face &f) {
  Face s = f;
  std::sort(s.begin(), s.end());
  return s;
}

} // namespace

double signed_tet_volume(const Vec3 &a, const Vec3 &b, const Vec3 &c, const Vec3 &d) {
  return (b - a).dot((c - a).cross(d - a)) / 6.0;
}

Mesh::Mesh(std::vector<Vec3> nodes, std::vector<Cell> cells)
    : nodes_(std::move(nodes)), cells_(std::move(cells)) {
  if (nodes_.empty() || cells_.empty())
    throw GeometryError("mesh needs at least one node and one cell");

  bbox_min_ = nodes_.front();
  bbox_max_ = nodes_.front();
  for (const auto &x : nodes_) {
    if (!x.allFinite())
      throw GeometryError("mesh node with non-finite coordinate");
    bbox_min_ = bbox_min_.cwiseMin(x);
    bbox_max_ = bbox_max_.cwiseMax(x);
  }
  const double diag = bbox_diagonal();
  const double min_volume = kRelativeEpsilon * diag * diag * diag;

  const int n = static_cast<int>(nodes_.size());
  for (std::size_t c = 0; c < cells_.size(); ++c) {
    auto &cell = cells_[c];
    for (int k = 0; k < 4; ++k) {
      if (cell[k] < 0 || cell[k] >= n)
        throw GeometryError("cell " + std::to_string(c) + " references node " + std::to_string(cell[k]) +
                            " out of range");
      for (int l = 0; l < k; ++l)
        if (cell[k] == cell[l])
          throw GeometryError("cell " + std::to_string(c) + " repeats node " + std::to_string(cell[k]));
    }
    double v = signed_tet_volume(node(cell[0]), node(cell[1]), node(cell[2]), node(cell[3]));
    if (v < 0.0) {
      std::swap(cell[2], cell[3]);
      v = -v;
    }
    if (!(v > min_volume))
      throw GeometryError("cell " + std::to_string(c) + " has non-positive volume");
  }

  // Face incidence: each face appears once (boundary) or twice (interior).
  std::vector<std::pair<Face, Face>> faces; // (sorted key, oriented face)
  faces.reserve(cells_.size() * 4);
  for (const auto &cell : cells_) {
    for (const auto &lf : kLocalFaces) {
      Face f{cell[lf[0]], cell[lf[1]], cell[lf[2]]};
      faces.emplace_back(sorted_face(f), f);
    }
  }
  std::sort(faces.begin(), faces.end(), [](const auto &a, const auto &b) { return a.first < b.first; });
  for (std::size_t i = 0; i < faces.size();) {
    std::size_t j = i + 1;
    while (j < faces.size() && faces[j].first == faces[i].first)
      ++j;
    const std::size_t count = j - i;
    if (count == 1)
      boundary_faces_.push_back(faces[i].second);
    else if (count > 2)
      throw GeometryError("face shared by more than two cells (non-manifold mesh)");
    i = j;
  }

  edges_.reserve(cells_.size() * 6);
  for (const auto &cell : cells_)
    for (int a = 0; a < 4; ++a)
      for (int b = a + 1; b < 4; ++b)
        edges_.push_back({std::min(cell[a], cell[b]), std::max(cell[a], cell[b])});
  std::sort(edges_.begin(), edges_.end());
  edges_.erase(std::unique(edges_.begin(), edges_.end()), edges_.end());

  node_cells_.assign(nodes_.size(), {});
  for (std::size_t c = 0; c < cells_.size(); ++c)
    for (int v : cells_[c])
      node_cells_[static_cast<std::size_t>(v)].push_back(static_cast<int>(c));
}

int Mesh::edge_index(int a, int b) const {
  const Edge key{std::min(a, b), std::max(a, b)};
  auto it = std::lower_bound(edges_.begin(), edges_.end(), key);
  if (it == edges_.end() || *it != key)
    return -1;
  return static_cast<int>(it - edges_.begin());
}

int Mesh::nearest_node(const Vec3 &point) const {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const double d = (nodes_[i] - point).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(i);
    }
  }
  return best;
}

CellGeometry cell_geometry(const Mesh &mesh) {
  CellGeometry g;
  g.volumes.reserve(mesh.num_cells());
  g.barycenters.reserve(mesh.num_cells());
  for (const auto &c : mesh.cells()) {
    const Vec3 &a = mesh.node(c[0]), &b = mesh.node(c[1]), &d = mesh.node(c[2]), &e = mesh.node(c[3]);
    g.volumes.push_back(signed_tet_volume(a, b, d, e));
    g.barycenters.push_back((a + b + d + e) / 4.0);
  }
  return g;
}

std::array<double, 4> barycentric(const Mesh &mesh, int c, const Vec3 &p) {
  const Cell &cell = mesh.cell(c);
  const Vec3 &x0 = mesh.node(cell[0]);
  Mat3 t;
  t.col(0) = mesh.node(cell[1]) - x0;
  t.col(1) = mesh.node(cell[2]) - x0;
  t.col(2) = mesh.node(cell[3]) - x0;
  const Vec3 l = t.partialPivLu().solve(p - x0);
  return {1.0 - l.sum(), l[0], l[1], l[2]};
}

bool is_symmetric(const TensorCellField &field, double rel_tol) {
  for (const auto &k : field.values) {
    const double scale = k.cwiseAbs().maxCoeff();
    if ((k - k.transpose()).cwiseAbs().maxCoeff() > rel_tol * scale)
      return false;
  }
  return true;
}

// --- point location -------------------------------------------------------

CellLocator::CellLocator(const Mesh &mesh) : mesh_(&mesh) {
  barycenters_ = cell_geometry(mesh).barycenters;
  const double n = std::max(1.0, std::cbrt(static_cast<double>(mesh.num_cells())));
  const Vec3 extent = (mesh.bbox_max() - mesh.bbox_min()).cwiseMax(Vec3::Constant(1e-300));
  const double pad = 1e-9 * mesh.bbox_diagonal();
  origin_ = mesh.bbox_min() - Vec3::Constant(pad);
  for (int k = 0; k < 3; ++k) {
    dims_[k] = std::max(1, static_cast<int>(std::ceil(n * extent[k] / extent.maxCoeff())));
    step_[k] = (extent[k] + 2 * pad) / dims_[k];
  }
  buckets_.assign(static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2], {});
  for (std::size_t c = 0; c < mesh.num_cells(); ++c) {
    Vec3 lo = mesh.node(mesh.cell(static_cast<int>(c))[0]);
    Vec3 hi = lo;
    for (int v : mesh.cell(static_cast<int>(c))) {
      lo = lo.cwiseMin(mesh.node(v));
      hi = hi.cwiseMax(mesh.node(v));
    }
    const auto b0 = bucket_of(lo);
    const auto b1 = bucket_of(hi);
    for (int i = b0[0]; i <= b1[0]; ++i)
      for (int j = b0[1]; j <= b1[1]; ++j)
        for (int k = b0[2]; k <= b1[2]; ++k)
          buckets_[(static_cast<std::size_t>(i) * dims_[1] + j) * dims_[2] + k].push_back(static_cast<int>(c));
  }
}

std::array<int, 3> CellLocator::bucket_of(const Vec3 &p) const {
  std::array<int, 3> b{};
  for (int k = 0; k < 3; ++k)
    b[k] = std::clamp(static_cast<int>(std::floor((p[k] - origin_[k]) / step_[k])), 0, dims_[k] - 1);
  return b;
}

std::optional<int> CellLocator::locate(const Vec3 &p) const {
  constexpr double tol = 1e-10;
  const auto b = bucket_of(p);
  for (int c : buckets_[(static_cast<std::size_t>(b[0]) * dims_[1] + b[1]) * dims_[2] + b[2]]) {
    const auto l = barycentric(*mesh_, c, p);
    if (*std::min_element(l.begin(), l.end()) >= -tol)
      return c;
  }
  return std::nullopt;
}

int CellLocator::locate_or_nearest(const Vec3 &p) const {
  if (auto c = locate(p))
    return *c;
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < barycenters_.size(); ++c) {
    const double d = (barycenters_[c] - p).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

// --- mesh-v1 text format --------------------------------------------------

namespace {

struct LineReader {
  std::istringstream in;
  int line_no = 0;

  explicit LineReader(const std::string &text) : in(text) {}

  // Next non-empty line with comments stripped.
  bool next(std::string &out) {
    std::string raw;
    while (std::getline(in, raw)) {
      ++line_no;
      if (auto pos = raw.find('#'); pos != std::string::npos)
        raw.erase(pos);
      const auto first = raw.find_first_not_of(" \t\r");
      if (first == std::string::npos)
        continue;
      out = raw.substr(first);
      return true;
    }
    return false;
  }
};

long parse_count(LineReader &r, const char *what) {
  std::string line;
  if (!r.next(line))
    throw FormatError(std::string("unexpected end of file, expected ") + what, r.line_no);
  std::istringstream ls(line);
  long n = -1;
  std::string extra;
  if (!(ls >> n) || n < 0 || (ls >> extra))
    throw FormatError(std::string("invalid ") + what, r.line_no);
  return n;
}

} // namespace

Mesh parse_mesh(const std::string &text) {
  LineReader r(text);
  std::string line;
  if (!r.next(line) || line.rfind("mesh-v1", 0) != 0)
    throw FormatError("missing 'mesh-v1' header", r.line_no);

  const long n_nodes = parse_count(r, "node count");
  std::vector<Vec3> nodes;
  nodes.reserve(static_cast<std::size_t>(n_nodes));
  for (long i = 0; i < n_nodes; ++i) {
    if (!r.next(line))
      throw FormatError("unexpected end of file in node list", r.line_no);
    std::istringstream ls(line);
    double x, y, z;
    std::string extra;
    if (!(ls >> x >> y >> z) || (ls >> extra))
      throw FormatError("expected 'x y z'", r.line_no);
    nodes.emplace_back(x, y, z);
  }

  const long n_cells = parse_count(r, "cell count");
  std::vector<Cell> cells;
  cells.reserve(static_cast<std::size_t>(n_cells));
  for (long i = 0; i < n_cells; ++i) {
    if (!r.next(line))
      throw FormatError("unexpected end of file in cell list", r.line_no);
    std::istringstream ls(line);
    Cell c{};
    std::string extra;
    if (!(ls >> c[0] >> c[1] >> c[2] >> c[3]) || (ls >> extra))
      throw FormatError("expected 'i j k l'", r.line_no);
    for (int v : c)
      if (v < 0 || v >= n_nodes)
        throw FormatError("cell node index " + std::to_string(v) + " out of range", r.line_no);
    cells.push_back(c);
  }
  if (r.next(line))
    throw FormatError("trailing content after cell list", r.line_no);
  return Mesh(std::move(nodes), std::move(cells));
}

Mesh load_mesh(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    throw FormatError("cannot open mesh file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_mesh(ss.str());
}

void save_mesh(const Mesh &mesh, const std::filesystem::path &path) {
  std::ofstream out(path);
  if (!out)
    throw Error("cannot write mesh file " + path.string());
  out.precision(std::numeric_limits<double>::max_digits10);
  out << "mesh-v1\n" << mesh.num_nodes() << '\n';
  for (const auto &x : mesh.nodes())
    out << x[0] << ' ' << x[1] << ' ' << x[2] << '\n';
  out << mesh.num_cells() << '\n';
  for (const auto &c : mesh.cells())
    out << c[0] << ' ' << c[1] << ' ' << c[2] << ' ' << c[3] << '\n';
}

// --- VTK ------------------------------------------------------------------

namespace {

std::string vtk_name(const std::string &name) {
  std::string s = name;
  std::replace(s.begin(), s.end(), ' ', '_');
  return s.empty() ? std::string("field") : s;
}

} // namespace

void write_vtk(const Mesh &mesh, std::span<const VtkField> fields, const std::filesystem::path &path,
               const std::string &title) {
  for (const auto &f : fields) {
    const std::size_t expected =
        std::holds_alternative<NodeField>(f.data) ? mesh.num_nodes() : mesh.num_cells();
    const std::size_t actual = std::visit([](const auto &d) { return d.values.size(); }, f.data);
    if (actual != expected)
      throw ContractError("field '" + f.name + "' has " + std::to_string(actual) + " values, expected " +
                          std::to_string(expected));
  }

  std::ofstream out(path);
  if (!out)
    throw Error("cannot write VTK file " + path.string());
  out.precision(std::numeric_limits<double>::max_digits10);

  out << "# vtk DataFile Version 3.0\n" << (title.empty() ? "perfusim" : title) << "\nASCII\n";
  out << "DATASET UNSTRUCTURED_GRID\n";
  out << "POINTS " << mesh.num_nodes() << " double\n";
  for (const auto &x : mesh.nodes())
    out << x[0] << ' ' << x[1] << ' ' << x[2] << '\n';
  out << "CELLS " << mesh.num_cells() << ' ' << mesh.num_cells() * 5 << '\n';
  for (const auto &c : mesh.cells())
    out << "4 " << c[0] << ' ' << c[1] << ' ' << c[2] << ' ' << c[3] << '\n';
  out << "CELL_TYPES " << mesh.num_cells() << '\n';
  for (std::size_t i = 0; i < mesh.num_cells(); ++i)
    out << "10\n";

  bool cell_header = false;
  for (const auto &f : fields) {
    if (std::holds_alternative<NodeField>(f.data))
      continue;
    if (!cell_header) {
      out << "CELL_DATA " << mesh.num_cells() << '\n';
      cell_header = true;
    }
    const std::string name = vtk_name(f.name);
    if (const auto *s = std::get_if<ScalarCellField>(&f.data)) {
      out << "SCALARS " << name << " double 1\nLOOKUP_TABLE default\n";
      for (double v : s->values)
        out << v << '\n';
    } else if (const auto *v = std::get_if<VectorCellField>(&f.data)) {
      out << "VECTORS " << name << " double\n";
      for (const auto &w : v->values)
        out << w[0] << ' ' << w[1] << ' ' << w[2] << '\n';
    } else if (const auto *t = std::get_if<TensorCellField>(&f.data)) {
      out << "TENSORS " << name << " double\n";
      for (const auto &k : t->values)
        out << k(0, 0) << ' ' << k(0, 1) << ' ' << k(0, 2) << '\n'
            << k(1, 0) << ' ' << k(1, 1) << ' ' << k(1, 2) << '\n'
            << k(2, 0) << ' ' << k(2, 1) << ' ' << k(2, 2) << "\n\n";
    }
  }

  bool point_header = false;
  for (const auto &f : fields) {
    const auto *p = std::get_if<NodeField>(&f.data);
    if (!p)
      continue;
    if (!point_header) {
      out << "POINT_DATA " << mesh.num_nodes() << '\n';
      point_header = true;
    }
    out << "SCALARS " << vtk_name(f.name) << " double 1\nLOOKUP_TABLE default\n";
    for (double v : p->values)
      out << v << '\n';
  }
  if (!out)
    throw Error("failed writing VTK file " + path.string());
}

} // namespace perfusim
