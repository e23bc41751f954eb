// Copyright 2026 The perfusim Authors
// SPDX-License-Identifier: Apache-2.0

#include "perfusim/mesh_builders.hpp"

#include <vector>

#include "perfusim/error.hpp"

namespace perfusim {

namespace {

struct Grid {
  std::vector<Vec3> nodes;
  std::vector<Cell> cells;
};

Grid kuhn_grid(const Vec3 &lo, const Vec3 &hi, const std::array<int, 3> &n) {
  for (int k = 0; k < 3; ++k)
    if (n[k] < 1)
      throw ContractError("box divisions must be >= 1");
  if (!((hi - lo).minCoeff() > 0.0))
    throw ContractError("box must have positive extent");

  Grid g;
  auto id = [&](int i, int j, int k) { return (k * (n[1] + 1) + j) * (n[0] + 1) + i; };
  for (int k = 0; k <= n[2]; ++k)
    for (int j = 0; j <= n[1]; ++j)
      for (int i = 0; i <= n[0]; ++i)
        g.nodes.emplace_back(lo[0] + (hi[0] - lo[0]) * i / n[0], lo[1] + (hi[1] - lo[1]) * j / n[1],
                             lo[2] + (hi[2] - lo[2]) * k / n[2]);

  // Each permutation of axes gives one monotone path 000 -> 111.
  constexpr std::array<std::array<int, 3>, 6> perms{{{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}}};
  for (int k = 0; k < n[2]; ++k)
    for (int j = 0; j < n[1]; ++j)
      for (int i = 0; i < n[0]; ++i)
        for (const auto &p : perms) {
          std::array<int, 3> at{i, j, k};
          Cell c{};
          c[0] = id(at[0], at[1], at[2]);
          for (int s = 0; s < 3; ++s) {
            ++at[p[s]];
            c[s + 1] = id(at[0], at[1], at[2]);
          }
          g.cells.push_back(c);
        }
  return g;
}

} // namespace

Mesh make_box_mesh(const Vec3 &lo, const Vec3 &hi, const std::array<int, 3> &divisions) {
  auto g = kuhn_grid(lo, hi, divisions);
  return Mesh(std::move(g.nodes), std::move(g.cells));
}

Mesh make_ellipsoid_mesh(const Vec3 &center, const Vec3 &semi_axes, const std::array<int, 3> &divisions) {
  if (!(semi_axes.minCoeff() > 0.0))
    throw ContractError("ellipsoid semi-axes must be positive");
  auto g = kuhn_grid(center - semi_axes, center + semi_axes, divisions);

  std::vector<Cell> kept;
  for (const auto &c : g.cells) {
    const Vec3 b = (g.nodes[c[0]] + g.nodes[c[1]] + g.nodes[c[2]] + g.nodes[c[3]]) / 4.0;
    if ((b - center).cwiseQuotient(semi_axes).squaredNorm() <= 1.0)
      kept.push_back(c);
  }
  if (kept.empty())
    throw ContractError("ellipsoid mesh has no cells; increase divisions");

  std::vector<int> remap(g.nodes.size(), -1);
  for (const auto &c : kept)
    for (int v : c)
      remap[static_cast<std::size_t>(v)] = 0;
  std::vector<Vec3> nodes;
  for (std::size_t i = 0; i < g.nodes.size(); ++i)
    if (remap[i] == 0) {
      remap[i] = static_cast<int>(nodes.size());
      nodes.push_back(g.nodes[i]);
    }
  for (auto &c : kept)
    for (int &v : c)
      v = remap[static_cast<std::size_t>(v)];
  return Mesh(std::move(nodes), std::move(kept));
}

} // namespace perfusim
