// Copyright 2026 The perfusim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

namespace perfusim {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

using Cell = std::array<int, 4>;
using Face = std::array<int, 3>;
using Edge = std::array<int, 2>;

/// Tetrahedral discretization of the organ domain.
///
/// Construction validates connectivity, flips negatively oriented cells
/// (swapping the last two indices) and derives boundary faces, unique edges
/// and node-to-cell adjacency. The object is immutable afterwards.
class Mesh {
public:
  /// Relative tolerance applied to the bounding-box diagonal for geometric checks.
  static constexpr double kRelativeEpsilon = 1e-12;

  Mesh(std::vector<Vec3> nodes, std::vector<Cell> cells);

  std::size_t num_nodes() const noexcept { return nodes_.size(); }
  std::size_t num_cells() const noexcept { return cells_.size(); }

  const std::vector<Vec3> &nodes() const noexcept { return nodes_; }
  const std::vector<Cell> &cells() const noexcept { return cells_; }
  const std::vector<Face> &boundary_faces() const noexcept { return boundary_faces_; }
  /// Unique edges with `e[0] < e[1]`, sorted lexicographically.
  const std::vector<Edge> &edges() const noexcept { return edges_; }
  const std::vector<std::vector<int>> &node_cells() const noexcept { return node_cells_; }

  const Vec3 &node(int i) const { return nodes_[static_cast<std::size_t>(i)]; }
  const Cell &cell(int c) const { return cells_[static_cast<std::size_t>(c)]; }

  /// Index of `edges()` entry joining a and b, or -1.
  int edge_index(int a, int b) const;

  Vec3 bbox_min() const noexcept { return bbox_min_; }
  Vec3 bbox_max() const noexcept { return bbox_max_; }
  double bbox_diagonal() const noexcept { return (bbox_max_ - bbox_min_).norm(); }

  /// Closest node by Euclidean distance (ties resolved to the lower index).
  int nearest_node(const Vec3 &point) const;

private:
  std::vector<Vec3> nodes_;
  std::vector<Cell> cells_;
  std::vector<Face> boundary_faces_;
  std::vector<Edge> edges_;
  std::vector<std::vector<int>> node_cells_;
  Vec3 bbox_min_;
  Vec3 bbox_max_;
};

/// Signed volume of the tetrahedron (a,b,c,d); positive for right-handed order.
double signed_tet_volume(const Vec3 &a, const Vec3 &b, const Vec3 &c, const Vec3 &d);

struct CellGeometry {
  std::vector<double> volumes;
  std::vector<Vec3> barycenters;
};

CellGeometry cell_geometry(const Mesh &mesh);

/// Barycentric coordinates of `p` in cell `c` (they sum to one).
std::array<double, 4> barycentric(const Mesh &mesh, int c, const Vec3 &p);

/// Uniform bucket grid over cell bounding boxes for point location.
class CellLocator {
public:
  explicit CellLocator(const Mesh &mesh);

  /// Cell containing `p` (within a small tolerance), if any.
  std::optional<int> locate(const Vec3 &p) const;

  /// Containing cell, or the cell with the closest barycenter when `p` is outside the mesh.
  int locate_or_nearest(const Vec3 &p) const;

private:
  std::array<int, 3> bucket_of(const Vec3 &p) const;

  const Mesh *mesh_;
  std::vector<Vec3> barycenters_;
  Vec3 origin_;
  Vec3 step_;
  std::array<int, 3> dims_{};
  std::vector<std::vector<int>> buckets_;
};

/// One value per cell. `compartment` is 0 for compartment-independent data.
template <class T> struct CellField {
  int compartment = 0;
  std::vector<T> values;
};

using ScalarCellField = CellField<double>;
using VectorCellField = CellField<Vec3>;
using TensorCellField = CellField<Mat3>;

/// One scalar per mesh node.
struct NodeField {
  int compartment = 0;
  std::vector<double> values;
};

/// True when every tensor is symmetric to `rel_tol` relative to its largest entry.
bool is_symmetric(const TensorCellField &field, double rel_tol = 1e-12);

/// Named field handed to the VTK writer.
struct VtkField {
  std::string name;
  std::variant<ScalarCellField, VectorCellField, TensorCellField, NodeField> data;
};

Mesh load_mesh(const std::filesystem::path &path);
Mesh parse_mesh(const std::string &text);
void save_mesh(const Mesh &mesh, const std::filesystem::path &path);

/// Legacy ASCII unstructured grid (cell type 10). Throws ContractError on size mismatch.
void write_vtk(const Mesh &mesh, std::span<const VtkField> fields, const std::filesystem::path &path,
               const std::string &title = "perfusim");

} // namespace perfusim
