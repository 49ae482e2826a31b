// memory_manager.hpp - group offload ledger with idle tracking and prefetch
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "moeforge/compression.hpp"

namespace moeforge {

struct MemoryConfig {
    std::uint64_t s_idle = 10;   // consecutive idle steps before offload
    double ema_rate = 0.1;       // activation-predictor EMA rate
    std::size_t lookahead_l = 2; // offloaded groups prefetched per step
};

// Moves group payloads between memory and backing storage. The ledger works
// without one (pure accounting).
class GroupStore {
public:
    virtual ~GroupStore() = default;
    virtual void offload(std::size_t group) = 0;
    virtual void restore(std::size_t group) = 0;
};

// Spills group blobs (lossless FP64 encoding) to one file per group and
// blanks the in-memory payload, so offloaded groups cannot be silently read.
class FileGroupStore : public GroupStore {
public:
    FileGroupStore(GroupedParams& params, std::filesystem::path dir);
    void offload(std::size_t group) override;
    void restore(std::size_t group) override;

private:
    GroupedParams& params_;
    std::filesystem::path dir_;
};

struct MemoryLedger {
    std::vector<std::uint8_t> resident;    // 1 = in memory
    std::vector<std::uint64_t> idle_steps;
    std::vector<double> activity_score;    // EMA of the activation indicator
    std::vector<std::uint64_t> bytes_of_group;
    std::vector<std::uint8_t> prefetched;  // resident via prefetch, not used yet
    std::uint64_t peak_resident_bytes = 0;
    std::uint64_t prefetch_hits = 0;
    std::uint64_t prefetch_misses = 0;
    std::uint64_t bytes_restored = 0;
    std::uint64_t bytes_offloaded = 0;
    std::uint64_t steps = 0;

    std::size_t group_count() const { return resident.size(); }
    std::uint64_t resident_bytes() const;
    std::uint64_t total_bytes() const;
    double hit_rate() const;
};

// All groups start resident.
MemoryLedger make_ledger(std::vector<std::uint64_t> bytes_of_group);

// Deployment-accounting size of one group: FP16 base, INT4 residual codes
// for unpruned members, shared scale/zero-point, 1-bit pruned markers.
std::uint64_t deployed_group_bytes(const GroupedParams& gp, std::size_t group);

// One simulation step. In order: activated groups found offloaded are
// restored synchronously (a prefetch miss), activated groups resident via a
// prior prefetch count a hit; idle counters reset/advance; activity EMA
// update; groups idle for at least s_idle are offloaded; the top-L offloaded
// groups by activity score are prefetched back.
void tick(MemoryLedger& ledger, std::span<const int> activated_groups, const MemoryConfig& cfg,
          GroupStore* store = nullptr);

std::uint64_t peak_memory(const MemoryLedger& ledger);

std::string ledger_to_json(const MemoryLedger& ledger);

}  // namespace moeforge
