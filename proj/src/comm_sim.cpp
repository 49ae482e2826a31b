#include "moeforge/comm_sim.hpp"

#include <stdexcept>

#include <nlohmann/json.hpp>

namespace moeforge {

Placement place_experts(const GroupAssignment& assignment, int devices,
                        PlacementPolicy policy) {
    if (devices < 1) throw std::invalid_argument("place_experts: need devices >= 1");
    const std::size_t e = assignment.group_of.size();
    Placement p;
    p.devices = devices;
    p.policy = policy;
    p.device_of_expert.resize(e);
    if (policy == PlacementPolicy::GroupLocal) {
        const std::size_t g = assignment.group_count();
        if (g % static_cast<std::size_t>(devices) != 0)
            throw std::invalid_argument("place_experts: group count " + std::to_string(g) +
                                        " not divisible by " + std::to_string(devices) +
                                        " devices");
        const std::size_t per_device = g / static_cast<std::size_t>(devices);
        for (std::size_t i = 0; i < e; ++i)
            p.device_of_expert[i] =
                static_cast<int>(static_cast<std::size_t>(assignment.group_of[i]) / per_device);
    } else {
        for (std::size_t i = 0; i < e; ++i)
            p.device_of_expert[i] = static_cast<int>(i % static_cast<std::size_t>(devices));
    }
    return p;
}

CommReport simulate_dispatch(std::span<const RoutingDecision> decisions,
                             const Placement& placement,
                             std::span<const int> token_source_device,
                             std::uint64_t bytes_per_token) {
    if (decisions.size() != token_source_device.size())
        throw std::invalid_argument("simulate_dispatch: one source device per decision required");
    CommReport r;
    r.devices = placement.devices;
    r.bytes_sent.assign(static_cast<std::size_t>(placement.devices) * placement.devices, 0);
    for (std::size_t t = 0; t < decisions.size(); ++t) {
        const int src = token_source_device[t];
        if (src < 0 || src >= placement.devices)
            throw std::invalid_argument("simulate_dispatch: source device out of range");
        for (const ExpertChoice& c : decisions[t].experts) {
            if (c.expert < 0 ||
                static_cast<std::size_t>(c.expert) >= placement.device_of_expert.size())
                throw std::runtime_error("simulate_dispatch: unplaced expert " +
                                         std::to_string(c.expert));
            const int dst = placement.device_of_expert[c.expert];
            if (src == dst) continue;  // local compute, no transfer
            r.bytes_sent[static_cast<std::size_t>(src) * placement.devices + dst] +=
                bytes_per_token;
            r.bytes_sent[static_cast<std::size_t>(dst) * placement.devices + src] +=
                bytes_per_token;
        }
    }
    for (int i = 0; i < placement.devices; ++i)
        for (int j = 0; j < placement.devices; ++j)
            if (i != j) r.total_bytes += r.at(i, j);
    return r;
}

std::vector<int> round_robin_sources(std::size_t tokens, int devices) {
    if (devices < 1) throw std::invalid_argument("round_robin_sources: need devices >= 1");
    std::vector<int> src(tokens);
    for (std::size_t t = 0; t < tokens; ++t)
        src[t] = static_cast<int>(t % static_cast<std::size_t>(devices));
    return src;
}

std::vector<int> group_home_sources(std::span<const RoutingDecision> hier_decisions,
                                    const GroupAssignment& assignment,
                                    const Placement& placement) {
    if (placement.policy != PlacementPolicy::GroupLocal)
        throw std::invalid_argument("group_home_sources: requires group-local placement");
    const std::size_t per_device =
        assignment.group_count() / static_cast<std::size_t>(placement.devices);
    std::vector<int> src;
    src.reserve(hier_decisions.size());
    for (const RoutingDecision& d : hier_decisions) {
        if (d.groups.empty())
            throw std::invalid_argument("group_home_sources: decision carries no group");
        src.push_back(static_cast<int>(
            static_cast<std::size_t>(d.groups.front().group) / per_device));
    }
    return src;
}

std::optional<double> compare_policies(const CommReport& flat, const CommReport& hier) {
    if (flat.total_bytes == 0) return std::nullopt;
    return 1.0 - static_cast<double>(hier.total_bytes) / static_cast<double>(flat.total_bytes);
}

std::string comm_report_to_json(const CommReport& r) {
    nlohmann::json j;
    j["devices"] = r.devices;
    j["total_bytes"] = r.total_bytes;
    auto& m = j["bytes_sent"] = nlohmann::json::array();
    for (int i = 0; i < r.devices; ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (int k = 0; k < r.devices; ++k) row.push_back(r.at(i, k));
        m.push_back(row);
    }
    return j.dump(2);
}

}  // namespace moeforge
