// Copyright 2026 The perfusim Authors
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include "perfusim/darcy.hpp"
#include "perfusim/flow1d.hpp"
#include "perfusim/mesh_builders.hpp"
#include "perfusim/transport.hpp"
#include "perfusim/vtree.hpp"

namespace {

using namespace perfusim;

VascularTree make_tree(int depth) {
  TreeGeneratorSpec spec;
  spec.depth = depth;
  spec.root_diameter = 4e-3;
  spec.length_ratio = 5.0;
  spec.region.center = Vec3(0.05, 0.05, 0.05);
  spec.region.half_extents = Vec3(0.049, 0.049, 0.049);
  spec.root_position = Vec3(0.005, 0.05, 0.05);
  spec.seed = 7;
  return build_synthetic_tree(spec);
}

// Two exchanging compartments, fed at one corner and drained at the other.
struct Block {
  Mesh mesh;
  PerfusionParams params;
  std::vector<SourceSpec> sources;

  explicit Block(int n) : mesh(make_box_mesh(Vec3::Zero(), Vec3::Constant(0.1), {n, n, n})) {
    const std::size_t cells = mesh.num_cells();
    const Mat3 k = 1e-9 * Mat3::Identity();
    for (int i = 1; i <= 2; ++i) {
      params.permeability.push_back({i, std::vector<Mat3>(cells, k)});
      params.porosity.push_back({i, std::vector<double>(cells, 0.1)});
    }
    params.couplings.push_back({1, 2, {0, std::vector<double>(cells, 1e-7)}});
    params.matrix_fraction = {0, std::vector<double>(cells, 0.8)};
    sources.push_back({1, {{0, NodeCondition::Kind::flux, 1e-6}}});
    sources.push_back({2, {{static_cast<int>(mesh.num_nodes()) - 1, NodeCondition::Kind::pressure, 0.0}}});
  }
};

void BM_TreeFlow(benchmark::State &state) {
  const auto tree = make_tree(static_cast<int>(state.range(0)));
  const std::vector<double> p(tree.terminals().size(), 100.0);
  const TreeFlowBC bc{TreeFlowBC::Mode::inlet_velocity, 0.25, p};
  for (auto _ : state)
    benchmark::DoNotOptimize(solve_tree_flow(tree, bc, Fluid{}));
  state.counters["segments"] = static_cast<double>(tree.num_segments());
}
BENCHMARK(BM_TreeFlow)->Arg(6)->Arg(8)->Arg(10)->Unit(benchmark::kMillisecond);

void BM_DarcySolve(benchmark::State &state) {
  const Block b(static_cast<int>(state.range(0)));
  const auto system = assemble(b.mesh, b.params, b.sources);
  for (auto _ : state)
    benchmark::DoNotOptimize(solve_multicompartment(system, b.mesh, b.params));
  state.counters["cells"] = static_cast<double>(b.mesh.num_cells());
}
BENCHMARK(BM_DarcySolve)->Arg(8)->Arg(12)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_TransportStep(benchmark::State &state) {
  const Block b(static_cast<int>(state.range(0)));
  const auto solution = solve_multicompartment(assemble(b.mesh, b.params, b.sources), b.mesh, b.params);
  const auto flow = compartment_flow(b.mesh, b.params, solution);
  const double dt = cfl_time_step(b.mesh, flow);
  const std::size_t nodes = b.mesh.num_nodes();
  const std::vector<std::vector<double>> inflow(2, std::vector<double>(nodes, 1.0));
  std::vector<std::vector<double>> s(2, std::vector<double>(nodes, 0.0));
  for (auto _ : state)
    benchmark::DoNotOptimize(step_compartments(b.mesh, flow, inflow, dt, s));
  state.counters["nodes"] = static_cast<double>(nodes);
}
BENCHMARK(BM_TransportStep)->Arg(8)->Arg(16)->Unit(benchmark::kMicrosecond);

} // namespace

BENCHMARK_MAIN();
