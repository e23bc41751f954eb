// Copyright 2026 The perfusim Authors
// SPDX-License-Identifier: Apache-2.0

#include "perfusim/vtree.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "perfusim/error.hpp"

namespace perfusim {

double Segment::area() const { return std::numbers::pi * diameter * diameter / 4.0; }

namespace {

struct DisjointSets {
  std::vector<int> parent;
  explicit DisjointSets(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) {
    while (parent[static_cast<std::size_t>(x)] != x)
      x = parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
    return x;
  }
  bool unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b)
      return false;
    parent[static_cast<std::size_t>(a)] = b;
    return true;
  }
};

} // namespace

VascularTree::VascularTree(std::vector<Vec3> junction_positions, std::vector<Segment> segments, int root)
    : segments_(std::move(segments)), root_(root) {
  const int nj = static_cast<int>(junction_positions.size());
  if (nj < 2 || segments_.empty())
    throw GeometryError("tree needs at least one segment");
  if (root < 0 || root >= nj)
    throw GeometryError("root junction " + std::to_string(root) + " out of range");

  junctions_.resize(junction_positions.size());
  for (std::size_t j = 0; j < junction_positions.size(); ++j) {
    if (!junction_positions[j].allFinite())
      throw GeometryError("junction " + std::to_string(j) + " has a non-finite position");
    junctions_[j].position = junction_positions[j];
  }

  DisjointSets sets(junctions_.size());
  for (std::size_t e = 0; e < segments_.size(); ++e) {
    const auto &s = segments_[e];
    const std::string id = "segment " + std::to_string(e);
    if (s.tail < 0 || s.tail >= nj || s.head < 0 || s.head >= nj)
      throw GeometryError(id + " references a junction out of range");
    if (!(s.diameter > 0.0) || !std::isfinite(s.diameter))
      throw GeometryError(id + " has non-positive diameter");
    if (!(s.length > 0.0) || !std::isfinite(s.length))
      throw GeometryError(id + " has non-positive length");
    if (!sets.unite(s.tail, s.head))
      throw GeometryError(id + " closes a cycle");
    const double chord = (junctions_[static_cast<std::size_t>(s.head)].position -
                          junctions_[static_cast<std::size_t>(s.tail)].position)
                             .norm();
    if (s.length < chord * (1.0 - 1e-12))
      throw GeometryError(id + " is shorter than the distance between its end points");
    junctions_[static_cast<std::size_t>(s.tail)].segments.push_back(static_cast<int>(e));
    junctions_[static_cast<std::size_t>(s.head)].segments.push_back(static_cast<int>(e));
  }
  if (segments_.size() != junctions_.size() - 1)
    throw GeometryError("tree is not connected");
  if (junctions_[static_cast<std::size_t>(root)].segments.size() != 1)
    throw GeometryError("root junction must have exactly one segment");

  for (int j = 0; j < nj; ++j)
    if (j != root && junctions_[static_cast<std::size_t>(j)].segments.size() == 1)
      terminals_.push_back(j);

  // Rooted structure via BFS.
  const std::size_t ne = segments_.size();
  upstream_.assign(ne, -1);
  parent_.assign(ne, -1);
  children_.assign(ne, {});
  bfs_.reserve(ne);
  std::deque<std::pair<int, int>> queue{{root, -1}}; // (junction, segment that reached it)
  while (!queue.empty()) {
    auto [j, from] = queue.front();
    queue.pop_front();
    for (int e : junctions_[static_cast<std::size_t>(j)].segments) {
      if (e == from)
        continue;
      upstream_[static_cast<std::size_t>(e)] = j;
      parent_[static_cast<std::size_t>(e)] = from;
      if (from >= 0)
        children_[static_cast<std::size_t>(from)].push_back(e);
      bfs_.push_back(e);
      const auto &s = segments_[static_cast<std::size_t>(e)];
      queue.emplace_back(s.tail == j ? s.head : s.tail, e);
    }
  }
}

int VascularTree::downstream(int e) const {
  const auto &s = segment(e);
  return s.tail == upstream(e) ? s.head : s.tail;
}

double VascularTree::chord_length(int e) const {
  const auto &s = segment(e);
  return (junction(s.head).position - junction(s.tail).position).norm();
}

bool VascularTree::operator==(const VascularTree &other) const {
  if (root_ != other.root_ || segments_ != other.segments_ || junctions_.size() != other.junctions_.size())
    return false;
  for (std::size_t j = 0; j < junctions_.size(); ++j)
    if (junctions_[j].position != other.junctions_[j].position)
      return false;
  return true;
}

// --- region -----------------------------------------------------------------

double Region::interior_depth(const Vec3 &p) const {
  const Vec3 q = (p - center).cwiseQuotient(half_extents);
  if (shape == Shape::box)
    return 1.0 - q.cwiseAbs().maxCoeff();
  return 1.0 - q.norm();
}

bool Region::contains(const Vec3 &p) const { return interior_depth(p) >= 0.0; }

// --- synthetic generator ----------------------------------------------------

namespace {

class UnitRandom {
public:
  explicit UnitRandom(std::uint64_t seed) : engine_(seed) {}
  // Uniform on [0,1) from the top 53 bits; independent of the standard library's distributions.
  double operator()() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

private:
  std::mt19937_64 engine_;
};

Vec3 any_perpendicular(const Vec3 &d) {
  const Vec3 helper = std::abs(d.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  return d.cross(helper).normalized();
}

struct GrowthTip {
  int junction;
  Vec3 direction;
};

} // namespace

VascularTree build_synthetic_tree(const TreeGeneratorSpec &spec) {
  if (spec.depth < 1)
    throw ConfigError("depth", "must be >= 1");
  if (!(spec.diameter_ratio > 0.0 && spec.diameter_ratio <= 1.0))
    throw ConfigError("diameter_ratio", "must lie in (0, 1]");
  if (!spec.level_diameter_ratios.empty()) {
    if (spec.level_diameter_ratios.size() != static_cast<std::size_t>(spec.depth - 1))
      throw ConfigError("diameter_ratio", "needs depth - 1 per-level values");
    for (double r : spec.level_diameter_ratios)
      if (!(r > 0.0 && r <= 1.0))
        throw ConfigError("diameter_ratio", "must lie in (0, 1]");
  }
  if (!(spec.root_diameter > 0.0))
    throw ConfigError("root_diameter", "must be positive");
  if (!(spec.length_ratio > 0.0))
    throw ConfigError("length_ratio", "must be positive");
  if (!spec.level_length_ratios.empty()) {
    if (spec.level_length_ratios.size() != static_cast<std::size_t>(spec.depth))
      throw ConfigError("length_ratio", "needs depth per-level values");
    for (double r : spec.level_length_ratios)
      if (!(r > 0.0))
        throw ConfigError("length_ratio", "must be positive");
  }
  auto diameter_ratio = [&](int level) {
    return spec.level_diameter_ratios.empty() ? spec.diameter_ratio
                                              : spec.level_diameter_ratios[static_cast<std::size_t>(level - 1)];
  };
  auto length_ratio = [&](int level) {
    return spec.level_length_ratios.empty() ? spec.length_ratio
                                            : spec.level_length_ratios[static_cast<std::size_t>(level)];
  };
  if (!(spec.tortuosity >= 1.0))
    throw ConfigError("tortuosity", "must be >= 1");
  if (!(spec.region.half_extents.minCoeff() > 0.0))
    throw ConfigError("region", "half extents must be positive");
  if (spec.candidates < 1)
    throw ConfigError("candidates", "must be >= 1");
  if (!(spec.root_direction.norm() > 0.0))
    throw ConfigError("root_direction", "must be non-zero");
  if (!spec.region.contains(spec.root_position))
    throw GeometryError("root position lies outside the generation region");

  constexpr int kShrinkSteps = 5;
  constexpr double kShrink = 0.75;
  const double deg = std::numbers::pi / 180.0;

  UnitRandom rnd(spec.seed);
  std::vector<Vec3> positions{spec.root_position};
  std::vector<Segment> segments;

  auto nearest_distance = [&](const Vec3 &p, int skip) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < positions.size(); ++j)
      if (static_cast<int>(j) != skip)
        best = std::min(best, (positions[j] - p).norm());
    return best;
  };

  auto add_segment = [&](int from, const Vec3 &to, double diameter) {
    positions.push_back(to);
    const int head = static_cast<int>(positions.size()) - 1;
    const double chord = (to - positions[static_cast<std::size_t>(from)]).norm();
    segments.push_back({from, head, diameter, spec.tortuosity * chord});
    return head;
  };

  // Root segment: shrink until the head fits.
  const Vec3 root_dir = spec.root_direction.normalized();
  double chord = length_ratio(0) * spec.root_diameter;
  int root_head = -1;
  for (int s = 0; s < kShrinkSteps && root_head < 0; ++s, chord *= kShrink) {
    const Vec3 end = spec.root_position + chord * root_dir;
    if (spec.region.contains(end))
      root_head = add_segment(0, end, spec.root_diameter);
  }
  if (root_head < 0)
    throw GeometryError("root segment does not fit inside the generation region");

  std::vector<GrowthTip> tips{{root_head, root_dir}};
  double diameter = spec.root_diameter;
  for (int level = 1; level < spec.depth; ++level) {
    diameter *= diameter_ratio(level);
    std::vector<GrowthTip> next;
    next.reserve(tips.size() * 2);
    for (const auto &tip : tips) {
      const Vec3 origin = positions[static_cast<std::size_t>(tip.junction)];
      const Vec3 inward = (spec.region.center - origin).normalized();

      // Draw every random number up front so the stream does not depend on which candidate wins.
      std::vector<double> plane_angle(static_cast<std::size_t>(spec.candidates));
      std::vector<std::array<double, 2>> spread(static_cast<std::size_t>(spec.candidates));
      for (int k = 0; k < spec.candidates; ++k) {
        plane_angle[static_cast<std::size_t>(k)] =
            k == 0 ? level * std::numbers::pi / 2.0 : 2.0 * std::numbers::pi * rnd();
        for (auto &a : spread[static_cast<std::size_t>(k)])
          a = (spec.branching_angle_deg + spec.jitter_deg * (2.0 * rnd() - 1.0)) * deg;
      }

      bool placed = false;
      double seg_chord = length_ratio(level) * diameter;
      for (int s = 0; s < kShrinkSteps && !placed; ++s, seg_chord *= kShrink) {
        // Retries also turn the growth direction toward the region center.
        const double bend = static_cast<double>(s) / (kShrinkSteps - 1);
        Vec3 axis = tip.direction;
        if (s > 0 && inward.allFinite())
          axis = ((1.0 - bend) * tip.direction + bend * inward).normalized();
        if (!axis.allFinite())
          axis = tip.direction;
        const Vec3 u = any_perpendicular(axis);
        const Vec3 v = axis.cross(u);
        double best_score = -1.0;
        std::array<Vec3, 2> best_dirs;
        for (int k = 0; k < spec.candidates; ++k) {
          const double psi = plane_angle[static_cast<std::size_t>(k)];
          const Vec3 normal = std::cos(psi) * u + std::sin(psi) * v;
          const Vec3 side = normal.cross(axis);
          std::array<Vec3, 2> dirs;
          bool inside = true;
          double score = std::numeric_limits<double>::infinity();
          for (int c = 0; c < 2; ++c) {
            const double theta = spread[static_cast<std::size_t>(k)][static_cast<std::size_t>(c)];
            const double sign = c == 0 ? 1.0 : -1.0;
            dirs[static_cast<std::size_t>(c)] =
                (std::cos(theta) * axis + sign * std::sin(theta) * side).normalized();
            const Vec3 end = origin + seg_chord * dirs[static_cast<std::size_t>(c)];
            if (!spec.region.contains(end)) {
              inside = false;
              break;
            }
            score = std::min(score, nearest_distance(end, tip.junction));
          }
          if (inside && score > best_score) {
            best_score = score;
            best_dirs = dirs;
          }
        }
        if (best_score >= 0.0) {
          for (const auto &d : best_dirs)
            next.push_back({add_segment(tip.junction, origin + seg_chord * d, diameter), d});
          placed = true;
        }
      }
      if (!placed)
        throw GeometryError("cannot place children of junction " + std::to_string(tip.junction) +
                            " inside the generation region");
    }
    tips = std::move(next);
  }
  return VascularTree(std::move(positions), std::move(segments), 0);
}

// --- ordering and splitting ---------------------------------------------------

std::vector<int> horton_strahler(const VascularTree &tree) {
  std::vector<int> order(tree.num_segments(), 1);
  const auto &bfs = tree.bfs_order();
  for (auto it = bfs.rbegin(); it != bfs.rend(); ++it) {
    const int e = *it;
    int top = 0, count = 0;
    for (int c : tree.children(e)) {
      const int o = order[static_cast<std::size_t>(c)];
      if (o > top) {
        top = o;
        count = 1;
      } else if (o == top) {
        ++count;
      }
    }
    order[static_cast<std::size_t>(e)] = top == 0 ? 1 : (count >= 2 ? top + 1 : top);
  }
  return order;
}

HierarchySplit split_hierarchy(const VascularTree &tree, int hs_threshold) {
  if (hs_threshold < 1)
    throw ConfigError("hs_threshold", "must be >= 1");
  const auto order = horton_strahler(tree);
  if (order[static_cast<std::size_t>(tree.root_segment())] < hs_threshold)
    throw GeometryError("Horton-Strahler threshold " + std::to_string(hs_threshold) + " exceeds root order " +
                        std::to_string(order[static_cast<std::size_t>(tree.root_segment())]) +
                        "; upper tree would be empty");

  // Orders never increase away from the root, so {order >= t} is a root-containing subtree.
  std::vector<int> junction_map(tree.num_junctions(), -1);
  std::vector<int> upper_segments;
  for (std::size_t e = 0; e < tree.num_segments(); ++e)
    if (order[e] >= hs_threshold) {
      upper_segments.push_back(static_cast<int>(e));
      junction_map[static_cast<std::size_t>(tree.segment(static_cast<int>(e)).tail)] = 0;
      junction_map[static_cast<std::size_t>(tree.segment(static_cast<int>(e)).head)] = 0;
    }

  HierarchySplit split{.upper = tree, .upper_segment_origin = {}, .upper_junction_origin = {},
                       .lower_segments = {}, .interface_junctions = {}};
  std::vector<Vec3> positions;
  for (std::size_t j = 0; j < tree.num_junctions(); ++j)
    if (junction_map[j] == 0) {
      junction_map[j] = static_cast<int>(positions.size());
      positions.push_back(tree.junction(static_cast<int>(j)).position);
      split.upper_junction_origin.push_back(static_cast<int>(j));
    }
  std::vector<Segment> segments;
  for (int e : upper_segments) {
    Segment s = tree.segment(e);
    s.tail = junction_map[static_cast<std::size_t>(s.tail)];
    s.head = junction_map[static_cast<std::size_t>(s.head)];
    segments.push_back(s);
    split.upper_segment_origin.push_back(e);
  }
  split.upper = VascularTree(std::move(positions), std::move(segments),
                             junction_map[static_cast<std::size_t>(tree.root())]);

  for (int j : split.upper.terminals())
    split.interface_junctions.push_back(
        {j, split.upper_junction_origin[static_cast<std::size_t>(j)], split.upper.junction(j).position});

  for (std::size_t e = 0; e < tree.num_segments(); ++e) {
    if (order[e] >= hs_threshold)
      continue;
    const int ei = static_cast<int>(e);
    LowerSegment low;
    low.original = ei;
    low.upstream_position = tree.junction(tree.upstream(ei)).position;
    low.downstream_position = tree.junction(tree.downstream(ei)).position;
    low.diameter = tree.segment(ei).diameter;
    low.length = tree.segment(ei).length;
    low.order = order[e];
    low.leaf = tree.is_leaf(ei);
    for (int c : tree.children(ei))
      low.min_child_diameter = std::min(low.min_child_diameter, tree.segment(c).diameter);
    split.lower_segments.push_back(low);
  }
  return split;
}

// --- tree-v1 text format -------------------------------------------------------

VascularTree parse_tree(const std::string &text) {
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  bool header = false;
  std::vector<std::pair<int, Vec3>> junctions;
  std::vector<std::pair<int, Segment>> segments;
  int root = -1;
  int root_line = 0;

  while (std::getline(in, raw)) {
    ++line_no;
    if (auto pos = raw.find('#'); pos != std::string::npos)
      raw.erase(pos);
    std::istringstream ls(raw);
    std::string tag;
    if (!(ls >> tag))
      continue;
    if (!header) {
      if (tag != "tree-v1")
        throw FormatError("missing 'tree-v1' header", line_no);
      header = true;
      continue;
    }
    std::string extra;
    if (tag == "J") {
      int id;
      double x, y, z;
      if (!(ls >> id >> x >> y >> z) || (ls >> extra))
        throw FormatError("expected 'J id x y z'", line_no);
      junctions.emplace_back(id, Vec3(x, y, z));
    } else if (tag == "S") {
      int id;
      Segment s;
      if (!(ls >> id >> s.tail >> s.head >> s.diameter >> s.length) || (ls >> extra))
        throw FormatError("expected 'S id tail head diameter length'", line_no);
      if (!(s.diameter > 0.0))
        throw FormatError("segment " + std::to_string(id) + " has non-positive diameter", line_no);
      if (!(s.length > 0.0))
        throw FormatError("segment " + std::to_string(id) + " has non-positive length", line_no);
      segments.emplace_back(id, s);
    } else if (tag == "R") {
      if (root >= 0)
        throw FormatError("root declared twice", line_no);
      if (!(ls >> root) || root < 0 || (ls >> extra))
        throw FormatError("expected 'R id'", line_no);
      root_line = line_no;
    } else {
      throw FormatError("unknown record '" + tag + "'", line_no);
    }
  }
  if (!header)
    throw FormatError("missing 'tree-v1' header", line_no);
  if (root < 0)
    throw FormatError("missing root declaration 'R id'", line_no);

  auto dense = [](auto &items, const char *what) {
    std::sort(items.begin(), items.end(), [](const auto &a, const auto &b) { return a.first < b.first; });
    for (std::size_t i = 0; i < items.size(); ++i)
      if (items[i].first != static_cast<int>(i))
        throw FormatError(std::string(what) + " ids must be 0..n-1 without gaps or duplicates");
  };
  dense(junctions, "junction");
  dense(segments, "segment");
  if (root >= static_cast<int>(junctions.size()))
    throw FormatError("root junction id out of range", root_line);

  std::vector<Vec3> positions;
  for (auto &[id, p] : junctions)
    positions.push_back(p);
  std::vector<Segment> segs;
  for (auto &[id, s] : segments)
    segs.push_back(s);
  return VascularTree(std::move(positions), std::move(segs), root);
}

VascularTree load_tree(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    throw FormatError("cannot open tree file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_tree(ss.str());
}

std::string format_tree(const VascularTree &tree) {
  std::ostringstream out;
  out.precision(std::numeric_limits<double>::max_digits10);
  out << "tree-v1\n";
  for (std::size_t j = 0; j < tree.num_junctions(); ++j) {
    const auto &p = tree.junction(static_cast<int>(j)).position;
    out << "J " << j << ' ' << p[0] << ' ' << p[1] << ' ' << p[2] << '\n';
  }
  for (std::size_t e = 0; e < tree.num_segments(); ++e) {
    const auto &s = tree.segment(static_cast<int>(e));
    out << "S " << e << ' ' << s.tail << ' ' << s.head << ' ' << s.diameter << ' ' << s.length << '\n';
  }
  out << "R " << tree.root() << '\n';
  return out.str();
}

void save_tree(const VascularTree &tree, const std::filesystem::path &path) {
  std::ofstream out(path);
  if (!out)
    throw Error("cannot write tree file " + path.string());
  out << format_tree(tree);
}

} // namespace perfusim
