// expert_bank.hpp - full-precision expert weights and activation centroids
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "moeforge/matrix.hpp"

namespace moeforge {

// EMA of token embeddings routed to one expert.
struct Centroid {
    std::vector<double> mu;       // length d_in
    double beta = 0.05;           // EMA rate in (0, 1]
    std::uint64_t tokens_seen = 0;
};

struct ExpertBank {
    std::size_t d_in = 0;
    std::size_t d_out = 0;
    std::vector<Matrix> experts;     // E matrices, each d_out x d_in
    std::vector<Centroid> centroids; // E centroids

    std::size_t size() const { return experts.size(); }
};

// Experts drawn i.i.d. Gaussian with std 1/sqrt(d_in); centroids zeroed.
// Identical seed reproduces the bank bit for bit.
ExpertBank init_bank(std::size_t e, std::size_t d_in, std::size_t d_out,
                     std::uint64_t seed, double centroid_beta = 0.05);

struct PlantedBank {
    ExpertBank bank;
    std::vector<int> true_group;  // ground-truth label per expert
};

// g anchor matrices, each replicated k_per_group times plus entrywise
// Gaussian noise of std noise_sigma. Anchors use the init_bank scale, so a
// relative noise level rho corresponds to noise_sigma = rho / sqrt(d_in).
PlantedBank init_planted_bank(std::size_t g, std::size_t k_per_group, std::size_t d_in,
                              std::size_t d_out, double noise_sigma, std::uint64_t seed,
                              double centroid_beta = 0.05);

// mu <- (1-beta) mu + beta mean(tokens); no tokens leaves mu unchanged.
Centroid update_centroid(const Centroid& c, std::span<const std::vector<double>> assigned_tokens);

// Little-endian "MOEB" archive; round-trips bit-exactly.
void save_bank(const ExpertBank& bank, const std::filesystem::path& path);
ExpertBank load_bank(const std::filesystem::path& path);

}  // namespace moeforge
