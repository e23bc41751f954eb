// Copyright 2026 The perfusim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>

#include "perfusim/geometry.hpp"

namespace perfusim {

/// Axis-aligned box [lo, hi] split into nx*ny*nz hexahedra, each cut into six
/// tetrahedra sharing the main diagonal (Kuhn subdivision, conforming).
Mesh make_box_mesh(const Vec3 &lo, const Vec3 &hi, const std::array<int, 3> &divisions);

/// Kuhn-subdivided bounding box of the ellipsoid, keeping the cells whose
/// barycenter lies inside it. Unused nodes are dropped and the rest renumbered
/// in their original order.
Mesh make_ellipsoid_mesh(const Vec3 &center, const Vec3 &semi_axes, const std::array<int, 3> &divisions);

} // namespace perfusim
