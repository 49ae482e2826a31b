// clustering.hpp - fused similarity with caching and balanced expert grouping
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moeforge/expert_bank.hpp"

namespace moeforge {

struct SimilarityConfig {
    double alpha = 0.7;               // blend weight: alpha*param + (1-alpha)*task
    double tau = 0.1;                 // pairs with fused score < tau are pruned
    std::size_t cache_lifetime_m = 50;
    double stale_eps = 0.02;          // relative weight-update norm before a row goes stale
    std::optional<std::size_t> neighbor_cap;  // keep only the top-N neighbors per expert
};

class SimilarityMatrix {
public:
    SimilarityMatrix() = default;

    std::size_t e() const { return e_; }
    double alpha() const { return alpha_; }
    double tau() const { return tau_; }

    double s_param(std::size_t i, std::size_t j) const { return s_param_[i * e_ + j]; }
    double s_task(std::size_t i, std::size_t j) const { return s_task_[i * e_ + j]; }
    double s_fused(std::size_t i, std::size_t j) const { return s_fused_[i * e_ + j]; }

    // Pruned pairs are absent from the neighbor graph, not zero-valued.
    bool present(std::size_t i, std::size_t j) const { return present_[i * e_ + j] != 0; }

    // Distance used by the clustering: 0 on the diagonal, 1 for absent
    // pairs, 1 - fused similarity otherwise.
    double distance(std::size_t i, std::size_t j) const {
        if (i == j) return 0.0;
        if (!present(i, j)) return 1.0;
        return 1.0 - s_fused(i, j);
    }

    // Effective similarity seen by group metrics (absent pairs count as 0).
    double effective_similarity(std::size_t i, std::size_t j) const {
        return 1.0 - distance(i, j);
    }

    std::uint64_t param_pair_computations() const { return param_pair_computations_; }
    std::uint64_t last_computed_step(std::size_t i) const { return last_computed_step_[i]; }

    friend SimilarityMatrix build_similarity(std::span<const Matrix> weights,
                                             std::span<const Centroid> centroids,
                                             const SimilarityMatrix* prev, std::uint64_t step,
                                             const SimilarityConfig& cfg);

private:
    std::size_t e_ = 0;
    double alpha_ = 0.7;
    double tau_ = 0.1;
    std::vector<double> s_param_;
    std::vector<double> s_task_;
    std::vector<double> s_fused_;
    std::vector<std::uint8_t> present_;
    std::vector<std::uint64_t> last_computed_step_;
    std::vector<std::vector<double>> weight_snapshot_;  // flattened weights at last compute
    std::uint64_t param_pair_computations_ = 0;         // cumulative, for cache instrumentation
    std::size_t cache_lifetime_m_ = 50;
    double stale_eps_ = 0.02;
};

// alpha * s_p + (1 - alpha) * s_t; alpha outside [0,1] is an error.
double fused_similarity(double s_p, double s_t, double alpha);

// Fused similarity over live expert weights and centroids. Parameter-cosine
// entries are reused from `prev` when both experts are younger than the
// cache lifetime and have drifted less than stale_eps in relative norm;
// centroid cosines are always recomputed (cheap). Centroids that have seen
// no tokens contribute task similarity 0.
SimilarityMatrix build_similarity(std::span<const Matrix> weights,
                                  std::span<const Centroid> centroids,
                                  const SimilarityMatrix* prev, std::uint64_t step,
                                  const SimilarityConfig& cfg);

SimilarityMatrix build_similarity(const ExpertBank& bank, const SimilarityMatrix* prev,
                                  std::uint64_t step, const SimilarityConfig& cfg);

struct GroupAssignment {
    std::vector<int> group_of;               // expert -> group id
    std::vector<std::vector<int>> groups;    // G lists, each exactly K = E/G experts
    std::vector<int> medoids;                // one representative expert per group
    double mean_intra_similarity = 0.0;

    std::size_t group_count() const { return groups.size(); }
    std::size_t group_size() const { return groups.empty() ? 0 : groups[0].size(); }
};

// K-means++ seeding on D = 1 - S followed by nearest-medoid assignment and
// one greedy rebalance pass enforcing exact uniform group sizes.
GroupAssignment cluster_experts(const SimilarityMatrix& sim, std::size_t g, std::uint64_t seed);

// Mean intra-group effective similarity of an arbitrary assignment under a
// given similarity matrix (singleton groups count as 1 by convention).
double mean_intra_similarity(const SimilarityMatrix& sim,
                             const std::vector<std::vector<int>>& groups);

// True iff new mean similarity improves on the old one by more than delta.
bool should_recluster(double old_mean_sim, double new_mean_sim, double delta);

// Reclustering cadence: 100 steps up to 256 experts, 200 beyond.
std::uint64_t recluster_interval(std::size_t e);

// Chance-corrected partition agreement in [-1, 1]; 1 means identical.
double adjusted_rand_index(std::span<const int> labels_a, std::span<const int> labels_b);

std::string assignment_to_json(const GroupAssignment& a);
GroupAssignment assignment_from_json(const std::string& text);

}  // namespace moeforge
