// Copyright 2026 The perfusim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "perfusim/geometry.hpp"

namespace perfusim {

struct Segment {
  int tail = -1;
  int head = -1;
  double diameter = 0.0; ///< m
  double length = 0.0;   ///< true (tortuous) vessel length, m

  double area() const;
  bool operator==(const Segment &) const = default;
};

struct Junction {
  Vec3 position = Vec3::Zero();
  std::vector<int> segments; ///< incident segment indices, ascending
};

/// Branching vessel network rooted at one junction.
///
/// Segment orientation (tail -> head) is arbitrary; the rooted structure
/// (upstream junction, parent segment, children) is derived from the root.
class VascularTree {
public:
  VascularTree(std::vector<Vec3> junction_positions, std::vector<Segment> segments, int root);

  const std::vector<Junction> &junctions() const noexcept { return junctions_; }
  const std::vector<Segment> &segments() const noexcept { return segments_; }
  std::size_t num_junctions() const noexcept { return junctions_.size(); }
  std::size_t num_segments() const noexcept { return segments_.size(); }
  int root() const noexcept { return root_; }
  int root_segment() const noexcept { return junctions_[static_cast<std::size_t>(root_)].segments.front(); }
  /// Degree-one junctions other than the root, ascending.
  const std::vector<int> &terminals() const noexcept { return terminals_; }

  const Segment &segment(int e) const { return segments_[static_cast<std::size_t>(e)]; }
  const Junction &junction(int j) const { return junctions_[static_cast<std::size_t>(j)]; }

  /// Root-side end of segment e.
  int upstream(int e) const { return upstream_[static_cast<std::size_t>(e)]; }
  /// End of segment e away from the root.
  int downstream(int e) const;
  /// +1 when the tail is the root-side end, -1 otherwise.
  int orientation(int e) const { return segment(e).tail == upstream(e) ? 1 : -1; }
  /// Segment entering the upstream junction of e, or -1 for the root segment.
  int parent(int e) const { return parent_[static_cast<std::size_t>(e)]; }
  const std::vector<int> &children(int e) const { return children_[static_cast<std::size_t>(e)]; }
  /// Segments in breadth-first order from the root.
  const std::vector<int> &bfs_order() const noexcept { return bfs_; }
  /// Terminal segment (leaf) indicator.
  bool is_leaf(int e) const { return children(e).empty(); }
  /// Segment whose downstream end is terminal junction j (j must be terminal).
  int terminal_segment(int j) const { return junction(j).segments.front(); }

  double chord_length(int e) const;

  bool operator==(const VascularTree &other) const;

private:
  std::vector<Junction> junctions_;
  std::vector<Segment> segments_;
  int root_;
  std::vector<int> terminals_;
  std::vector<int> upstream_;
  std::vector<int> parent_;
  std::vector<std::vector<int>> children_;
  std::vector<int> bfs_;
};

/// Region a synthetic tree must stay inside.
struct Region {
  enum class Shape { box, ellipsoid };
  Shape shape = Shape::box;
  Vec3 center = Vec3::Zero();
  Vec3 half_extents = Vec3::Ones(); ///< box half widths or ellipsoid semi-axes, m

  bool contains(const Vec3 &p) const;
  /// Normalized depth inside the region: 1 at the center, 0 on the boundary, negative outside.
  double interior_depth(const Vec3 &p) const;
};

struct TreeGeneratorSpec {
  int depth = 3;
  double root_diameter = 8.4e-3;  ///< m
  double diameter_ratio = 0.794;  ///< child / parent diameter
  double length_ratio = 8.0;      ///< chord length / diameter
  /// Per-level overrides. Diameter ratios cover levels 1..depth-1, length
  /// ratios levels 0..depth-1; an empty vector uses the scalar for every level.
  std::vector<double> level_diameter_ratios;
  std::vector<double> level_length_ratios;
  double tortuosity = 1.2;        ///< true length / chord length
  Region region;
  Vec3 root_position = Vec3::Zero();
  Vec3 root_direction = Vec3::UnitX();
  double branching_angle_deg = 35.0; ///< half-angle between the two children
  double jitter_deg = 10.0;          ///< uniform random perturbation of the branching angle
  int candidates = 12;               ///< branching-plane orientations tried per junction
  std::uint64_t seed = 1;
};

/// Deterministic space-filling full binary tree.
///
/// Each junction spawns two children in a plane through the parent
/// direction. Several seeded plane orientations are tried and the one
/// keeping both new junctions farthest from existing junctions (and inside
/// the region) wins. When no orientation fits, chords shrink by 25% up to
/// four times while the branching axis turns toward the region center.
/// Throws GeometryError when a junction cannot be placed.
VascularTree build_synthetic_tree(const TreeGeneratorSpec &spec);

/// Horton-Strahler order per segment (leaves are 1).
std::vector<int> horton_strahler(const VascularTree &tree);

struct LowerSegment {
  int original = -1;       ///< index in the source tree
  Vec3 upstream_position;  ///< root-side end, m
  Vec3 downstream_position;
  double diameter = 0.0;
  double length = 0.0;
  int order = 0;           ///< Horton-Strahler order
  bool leaf = false;       ///< ends in a terminal junction of the source tree
  double min_child_diameter = std::numeric_limits<double>::infinity();

  Vec3 midpoint() const { return 0.5 * (upstream_position + downstream_position); }
  Vec3 direction() const { return (downstream_position - upstream_position).normalized(); }
};

struct InterfaceJunction {
  int upper_junction = -1;    ///< index in HierarchySplit::upper
  int original_junction = -1; ///< index in the source tree
  Vec3 position;
};

struct HierarchySplit {
  VascularTree upper;
  std::vector<int> upper_segment_origin;  ///< upper segment -> source segment
  std::vector<int> upper_junction_origin; ///< upper junction -> source junction
  std::vector<LowerSegment> lower_segments;
  std::vector<InterfaceJunction> interface_junctions; ///< one per upper terminal, same order
};

/// Root-containing subtree of segments with order >= threshold, plus the remainder.
/// Throws GeometryError when the root segment is below the threshold.
HierarchySplit split_hierarchy(const VascularTree &tree, int hs_threshold);

VascularTree parse_tree(const std::string &text);
VascularTree load_tree(const std::filesystem::path &path);
void save_tree(const VascularTree &tree, const std::filesystem::path &path);
std::string format_tree(const VascularTree &tree);

} // namespace perfusim
