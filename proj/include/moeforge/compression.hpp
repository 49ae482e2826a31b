// compression.hpp - per-group shared bases with low-rank residual factors
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "moeforge/clustering.hpp"
#include "moeforge/matrix.hpp"
#include "moeforge/quantization.hpp"

namespace moeforge {

enum class FactorMode { Svd, Random };

struct MultiplyCounter {
    std::uint64_t mults = 0;
};

struct GroupedParams {
    GroupAssignment assignment;
    std::size_t d_in = 0;
    std::size_t d_out = 0;
    std::size_t rank = 0;
    std::vector<Matrix> bases;          // G, each d_out x d_in
    std::vector<FactorPair> residuals;  // E (zero factors when pruned)
    std::vector<std::uint8_t> pruned;   // gamma-gate mask, 1 = residual zeroed

    // Retained INT4 payload (one block per group) when the params were
    // quantized or loaded from an INT4 archive; keeps re-saves bit-exact.
    std::optional<std::vector<QuantBlock>> int4_blocks;

    std::size_t expert_count() const { return residuals.size(); }
    std::size_t group_count() const { return bases.size(); }
    int group_of(std::size_t expert) const { return assignment.group_of[expert]; }

    // base + A B^T for one expert.
    Matrix reconstruct_expert(std::size_t expert) const;

    // Elements actually stored: all bases plus unpruned residual factors.
    std::size_t stored_element_count() const;
};

// Entrywise arithmetic mean; empty input is an error.
Matrix compute_base(std::span<const Matrix> member_weights);

// Residual factors for w - base: truncated SVD, or seeded Gaussian factors
// scaled 1/sqrt(r) when SVD cost is not wanted.
FactorPair factor_residual(const Matrix& w, const Matrix& base, std::size_t r, FactorMode mode,
                           std::uint64_t seed);

// base + a b^T.
Matrix reconstruct(const Matrix& base, const FactorPair& f);

// Builds bases (group means) and residual factors for every expert.
GroupedParams build_grouped(std::span<const Matrix> expert_weights,
                            const GroupAssignment& assignment, std::size_t r, FactorMode mode,
                            std::uint64_t seed);

// Forward through the selected experts of one group, computing the shared
// base product once. Outputs align with expert_ids. The optional counter is
// charged per the engine's cost model: d_out*d_in for the shared product
// plus 2*r*(d_in+d_out) per expert for the residual path.
std::vector<std::vector<double>> compressed_forward(const GroupedParams& gp, int group,
                                                    std::span<const double> x,
                                                    std::span<const int> expert_ids,
                                                    MultiplyCounter* counter = nullptr);

// (K d_in d_out) / (d_in d_out + K r (d_in + d_out)).
double compression_ratio(std::size_t k, std::size_t d_in, std::size_t d_out, std::size_t r);

// Whole-model ratio including router parameters on both sides.
double effective_compression_ratio(std::size_t e, std::size_t g, std::size_t d_in,
                                   std::size_t d_out, std::size_t r,
                                   std::size_t router_elements);

// Zeroes residuals whose cosine similarity to their base falls below gamma;
// experts with an all-zero base are skipped. Returns how many are pruned
// after the pass.
std::size_t prune_residuals(GroupedParams& gp, double gamma = 0.05);

// Converts residual factors to INT4 blocks (one shared scale/zero-point per
// group); factor values are replaced by their dequantized counterparts.
void quantize_residuals(GroupedParams& gp);

enum class BaseEncoding : std::uint8_t { Fp16 = 0, Fp64 = 1 };
enum class ResidualEncoding : std::uint8_t { Fp64 = 0, Int4 = 1 };

// "MOEC" archive. Fp16 bases are the deployment default; Fp64 bases exist
// for lossless spills during training. INT4 payloads round-trip bit-exactly.
void save_grouped(const GroupedParams& gp, const std::filesystem::path& path,
                  BaseEncoding base_enc = BaseEncoding::Fp16,
                  ResidualEncoding res_enc = ResidualEncoding::Fp64);
GroupedParams load_grouped(const std::filesystem::path& path);

// Per-group payload used by both the archive and the offload spill store.
std::vector<std::uint8_t> encode_group_blob(const GroupedParams& gp, std::size_t group,
                                            BaseEncoding base_enc, ResidualEncoding res_enc);
void decode_group_blob(GroupedParams& gp, std::size_t group,
                       std::span<const std::uint8_t> blob);

}  // namespace moeforge
