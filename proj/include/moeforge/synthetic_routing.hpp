// synthetic_routing.hpp - Zipf-skewed token stream benchmark for router
// load-balance and communication comparisons
#pragma once

#include <cstdint>
#include <vector>

#include "moeforge/routing.hpp"

namespace moeforge {

// A stream of noisy archetype tokens with Zipf-distributed archetype
// frequencies, routed two ways over the same E experts:
//   - flat: every expert specializes on one archetype (its vector aligns
//     with that archetype plus a fixed runner-up), so token skew lands
//     directly on a few experts;
//   - hierarchical: experts are grouped so that per-group token mass is as
//     balanced as the skew allows (greedy capacity-constrained packing) and
//     group members are near-interchangeable, so stage 2 spreads a group's
//     mass across its members.
struct ZipfRoutingFixture {
    std::size_t e = 0;
    std::size_t d = 0;  // embedding dim = 2E (archetype + jitter subspaces)
    GroupAssignment assignment;
    RouterParams hier;
    std::vector<std::vector<double>> flat_vectors;  // E x d
    std::vector<std::vector<double>> tokens;
    std::vector<int> token_archetype;
    std::vector<double> archetype_mass;  // normalized Zipf weights
};

ZipfRoutingFixture make_zipf_routing_fixture(std::size_t e, std::size_t g, std::size_t top_k,
                                             std::size_t tokens, double zipf_exponent,
                                             double token_noise, std::uint64_t seed);

struct ZipfRoutingRun {
    std::vector<RoutingDecision> flat_decisions;
    std::vector<RoutingDecision> hier_decisions;
    LoadStats flat_load;
    LoadStats hier_load;
};

ZipfRoutingRun run_zipf_routing(const ZipfRoutingFixture& fx);

}  // namespace moeforge
