// routing.hpp - two-stage hierarchical router, flat reference router, load stats
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "moeforge/clustering.hpp"

namespace moeforge {

struct RouterParams {
    std::vector<std::vector<double>> prototypes;      // G x d_in (u_g)
    std::vector<std::vector<double>> expert_vectors;  // E x d_in (v_i)
    double temperature = 1.0;  // applied to stage-1 logits only
    std::size_t g1 = 1;        // groups selected in stage 1
    std::size_t k = 2;         // experts selected per group in stage 2

    std::size_t group_count() const { return prototypes.size(); }
    std::size_t expert_count() const { return expert_vectors.size(); }
};

struct GroupChoice {
    int group = -1;
    double prob = 0.0;  // stage-1 softmax probability
};

struct ExpertChoice {
    int expert = -1;
    double prob = 0.0;  // renormalized gate weight over the selected experts
};

struct RoutingDecision {
    std::uint64_t token_id = 0;
    std::vector<GroupChoice> groups;
    std::vector<ExpertChoice> experts;
};

struct Stage1Result {
    std::vector<double> probs;    // over all G, sums to 1
    std::vector<int> top_groups;  // g1 ids, ties toward the lower id
};

struct Stage2Result {
    std::vector<double> probs;    // over the group's members (member order)
    std::vector<int> top_experts; // k expert ids, ties toward the lower id
};

// Softmax over u_g^T x / temperature with max-subtraction; top-g1 selection.
Stage1Result route_stage1(std::span<const double> x, const RouterParams& rp,
                          std::uint64_t* mult_counter = nullptr);

// Softmax over v_i^T x restricted to the group's members; top-k selection.
// Stage-2 logits are not temperature-scaled.
Stage2Result route_stage2(std::span<const double> x, int group, const RouterParams& rp,
                          const GroupAssignment& assignment,
                          std::uint64_t* mult_counter = nullptr);

// Reference baseline: one softmax over all E experts.
Stage2Result flat_route(std::span<const double> x,
                        const std::vector<std::vector<double>>& expert_vectors, std::size_t k,
                        std::uint64_t* mult_counter = nullptr);

// Full two-stage decision with final gate weights p_g * p_(i|g),
// renormalized over all selected experts.
RoutingDecision route_token(std::span<const double> x, const RouterParams& rp,
                            const GroupAssignment& assignment, std::uint64_t token_id,
                            std::uint64_t* mult_counter = nullptr);

struct RoutingCost {
    std::uint64_t hier_mults = 0;  // (G + K) d per token
    std::uint64_t flat_mults = 0;  // E d per token
    double reduction = 0.0;        // E / (G + K)
};

RoutingCost routing_cost(std::size_t e, std::size_t g, std::size_t k_per_group, std::size_t d);

struct LoadStats {
    std::vector<std::uint64_t> per_expert_tokens;
    double cov = 0.0;  // population std / mean
    bool zero_mean_warning = false;
};

LoadStats load_stats(std::span<const RoutingDecision> decisions, std::size_t e);

// JSON-lines decision dumps: {"token_id":..,"groups":[..],"experts":[..],"p":[..]}
std::string decision_to_json_line(const RoutingDecision& d);
RoutingDecision decision_from_json_line(const std::string& line);
void save_decisions(std::span<const RoutingDecision> decisions, const std::string& path);
std::vector<RoutingDecision> load_decisions(const std::string& path);

}  // namespace moeforge
