// comm_sim.hpp - expert placement and all-to-all byte accounting
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moeforge/routing.hpp"

namespace moeforge {

enum class PlacementPolicy { GroupLocal, RoundRobin };

struct Placement {
    std::vector<int> device_of_expert;
    int devices = 1;
    PlacementPolicy policy = PlacementPolicy::GroupLocal;
};

// Group-local puts every expert of a group on one device (G must divide by
// the device count); round-robin is expert_id mod devices.
Placement place_experts(const GroupAssignment& assignment, int devices, PlacementPolicy policy);

struct CommReport {
    int devices = 1;
    std::vector<std::uint64_t> bytes_sent;  // devices x devices, diagonal stays 0
    std::uint64_t total_bytes = 0;

    std::uint64_t at(int src, int dst) const {
        return bytes_sent[static_cast<std::size_t>(src) * devices + dst];
    }
};

// Each (token, selected expert) pair crossing devices is charged
// bytes_per_token for the dispatch and again for the combine/return path.
CommReport simulate_dispatch(std::span<const RoutingDecision> decisions,
                             const Placement& placement,
                             std::span<const int> token_source_device,
                             std::uint64_t bytes_per_token);

// Round-robin data-parallel proxy: token t originates on device t mod D.
std::vector<int> round_robin_sources(std::size_t tokens, int devices);

// Second-stage-exchange view: each token sits on the device hosting its
// stage-1 group, so only expert selections that leave the group pay for
// transfers. Requires group-local placement and decisions carrying groups.
std::vector<int> group_home_sources(std::span<const RoutingDecision> hier_decisions,
                                    const GroupAssignment& assignment,
                                    const Placement& placement);

// 1 - hier/flat byte ratio; nullopt when the flat volume is zero.
std::optional<double> compare_policies(const CommReport& flat, const CommReport& hier);

std::string comm_report_to_json(const CommReport& r);

}  // namespace moeforge
