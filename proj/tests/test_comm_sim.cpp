#include "doctest.h"

#include "moeforge/comm_sim.hpp"
#include "moeforge/rng.hpp"
#include "moeforge/synthetic_routing.hpp"

using namespace moeforge;

namespace {

GroupAssignment contiguous(std::size_t e, std::size_t g) {
    GroupAssignment a;
    const std::size_t k = e / g;
    a.group_of.resize(e);
    a.groups.assign(g, {});
    for (std::size_t i = 0; i < e; ++i) {
        a.group_of[i] = static_cast<int>(i / k);
        a.groups[i / k].push_back(static_cast<int>(i));
    }
    a.medoids.resize(g);
    for (std::size_t s = 0; s < g; ++s) a.medoids[s] = a.groups[s][0];
    return a;
}

RoutingDecision decision(std::uint64_t id, std::initializer_list<int> experts) {
    RoutingDecision d;
    d.token_id = id;
    for (int e : experts) d.experts.push_back({e, 0.5});
    return d;
}

// Per-token replay oracle for byte accounting.
std::uint64_t replay_total(std::span<const RoutingDecision> ds, const Placement& p,
                           std::span<const int> src, std::uint64_t bpt) {
    std::uint64_t total = 0;
    for (std::size_t t = 0; t < ds.size(); ++t)
        for (const ExpertChoice& c : ds[t].experts)
            if (p.device_of_expert[c.expert] != src[t]) total += 2 * bpt;  // send + return
    return total;
}

}  // namespace

TEST_CASE("group-local placement keeps each group on one device") {
    const GroupAssignment a = contiguous(16, 8);
    const Placement p = place_experts(a, 4, PlacementPolicy::GroupLocal);
    // 2 groups per device.
    for (std::size_t i = 0; i < 16; ++i)
        CHECK(p.device_of_expert[i] == a.group_of[i] / 2);
    CHECK_THROWS_AS(place_experts(a, 3, PlacementPolicy::GroupLocal), std::invalid_argument);
}

TEST_CASE("round-robin placement is modular") {
    const GroupAssignment a = contiguous(8, 4);
    const Placement p = place_experts(a, 4, PlacementPolicy::RoundRobin);
    CHECK(p.device_of_expert[0] == 0);
    CHECK(p.device_of_expert[4] == 0);
    CHECK(p.device_of_expert[1] == 1);
    CHECK(p.device_of_expert[7] == 3);
}

TEST_CASE("local-only dispatch transfers nothing") {
    const GroupAssignment a = contiguous(8, 4);
    const Placement p = place_experts(a, 4, PlacementPolicy::GroupLocal);
    // Tokens sourced on the device of the experts they select.
    std::vector<RoutingDecision> ds{decision(0, {0, 1}), decision(1, {2, 3})};
    const std::vector<int> src{0, 1};
    const CommReport r = simulate_dispatch(ds, p, src, 512);
    CHECK(r.total_bytes == 0);
}

TEST_CASE("single device means zero bytes for any decisions") {
    const GroupAssignment a = contiguous(8, 4);
    const Placement p = place_experts(a, 1, PlacementPolicy::RoundRobin);
    std::vector<RoutingDecision> ds{decision(0, {0, 5}), decision(1, {7})};
    const std::vector<int> src{0, 0};
    CHECK(simulate_dispatch(ds, p, src, 512).total_bytes == 0);
}

TEST_CASE("hand-checked remote dispatch with send and return paths") {
    const GroupAssignment a = contiguous(8, 4);
    const Placement p = place_experts(a, 4, PlacementPolicy::GroupLocal);
    // One token from device 0 to two experts of group 3 (device 3).
    std::vector<RoutingDecision> ds{decision(0, {6, 7})};
    const std::vector<int> src{0};
    const CommReport r = simulate_dispatch(ds, p, src, 512);
    CHECK(r.total_bytes == 2 * 2 * 512);
    CHECK(r.at(0, 3) == 1024);
    CHECK(r.at(3, 0) == 1024);
    CHECK(r.at(0, 0) == 0);
}

TEST_CASE("byte totals equal the replay oracle exactly") {
    const ZipfRoutingFixture fx = make_zipf_routing_fixture(32, 8, 2, 1000, 1.2, 0.05, 21);
    const ZipfRoutingRun run = run_zipf_routing(fx);
    const Placement p = place_experts(fx.assignment, 4, PlacementPolicy::GroupLocal);
    const std::vector<int> src = round_robin_sources(1000, 4);
    for (const auto* ds : {&run.flat_decisions, &run.hier_decisions}) {
        const CommReport r = simulate_dispatch(*ds, p, src, 512);
        CHECK(r.total_bytes == replay_total(*ds, p, src, 512));
        std::uint64_t off_diag = 0;
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j)
                if (i != j) off_diag += r.at(i, j);
        CHECK(off_diag == r.total_bytes);
    }
}

TEST_CASE("adding a remote token never decreases the total") {
    const GroupAssignment a = contiguous(8, 4);
    const Placement p = place_experts(a, 4, PlacementPolicy::GroupLocal);
    std::vector<RoutingDecision> ds;
    std::vector<int> src;
    Rng rng(5);
    std::uint64_t prev = 0;
    for (int t = 0; t < 50; ++t) {
        ds.push_back(decision(t, {static_cast<int>(rng.uniform_index(8))}));
        src.push_back(static_cast<int>(rng.uniform_index(4)));
        const std::uint64_t total = simulate_dispatch(ds, p, src, 64).total_bytes;
        CHECK(total >= prev);
        prev = total;
    }
}

TEST_CASE("group-local dispatch with group-home sources reduces bytes versus flat") {
    // With the token already on its stage-1 group's device, hierarchical
    // selections stay local while flat picks that cross group boundaries pay
    // for the exchange.
    const ZipfRoutingFixture fx = make_zipf_routing_fixture(32, 8, 2, 2000, 1.2, 0.05, 33);
    const ZipfRoutingRun run = run_zipf_routing(fx);
    const Placement p = place_experts(fx.assignment, 4, PlacementPolicy::GroupLocal);
    const std::vector<int> src = group_home_sources(run.hier_decisions, fx.assignment, p);
    const CommReport flat = simulate_dispatch(run.flat_decisions, p, src, 512);
    const CommReport hier = simulate_dispatch(run.hier_decisions, p, src, 512);
    CHECK(hier.total_bytes == 0);  // top-k never leaves the selected group
    const auto reduction = compare_policies(flat, hier);
    REQUIRE(reduction.has_value());
    CHECK(*reduction > 0.0);
}

TEST_CASE("group-home sources require group-local placement and group records") {
    const ZipfRoutingFixture fx = make_zipf_routing_fixture(8, 4, 2, 10, 1.2, 0.05, 2);
    const ZipfRoutingRun run = run_zipf_routing(fx);
    const Placement rr = place_experts(fx.assignment, 2, PlacementPolicy::RoundRobin);
    CHECK_THROWS_AS(group_home_sources(run.hier_decisions, fx.assignment, rr),
                    std::invalid_argument);
    const Placement gl = place_experts(fx.assignment, 2, PlacementPolicy::GroupLocal);
    CHECK_THROWS_AS(group_home_sources(run.flat_decisions, fx.assignment, gl),
                    std::invalid_argument);  // flat decisions carry no groups
}

TEST_CASE("identical decision sets have zero reduction") {
    const GroupAssignment a = contiguous(8, 4);
    const Placement p = place_experts(a, 4, PlacementPolicy::GroupLocal);
    std::vector<RoutingDecision> ds{decision(0, {0, 2}), decision(1, {4, 6})};
    const std::vector<int> src{1, 3};
    const CommReport r1 = simulate_dispatch(ds, p, src, 128);
    const CommReport r2 = simulate_dispatch(ds, p, src, 128);
    const auto reduction = compare_policies(r1, r2);
    REQUIRE(reduction.has_value());
    CHECK(*reduction == 0.0);
}

TEST_CASE("zero flat volume yields an undefined reduction") {
    const GroupAssignment a = contiguous(4, 2);
    const Placement p = place_experts(a, 1, PlacementPolicy::RoundRobin);
    std::vector<RoutingDecision> ds{decision(0, {0})};
    const std::vector<int> src{0};
    const CommReport r = simulate_dispatch(ds, p, src, 64);
    CHECK_FALSE(compare_policies(r, r).has_value());
}

TEST_CASE("unplaced experts are a runtime error") {
    const GroupAssignment a = contiguous(4, 2);
    const Placement p = place_experts(a, 2, PlacementPolicy::GroupLocal);
    std::vector<RoutingDecision> ds{decision(0, {9})};
    const std::vector<int> src{0};
    CHECK_THROWS_AS(simulate_dispatch(ds, p, src, 64), std::runtime_error);
}
