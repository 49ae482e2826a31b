#include "moeforge/memory_manager.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace moeforge {

FileGroupStore::FileGroupStore(GroupedParams& params, std::filesystem::path dir)
    : params_(params), dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
}

void FileGroupStore::offload(std::size_t group) {
    const std::vector<std::uint8_t> blob =
        encode_group_blob(params_, group, BaseEncoding::Fp64, ResidualEncoding::Fp64);
    const auto path = dir_ / ("group_" + std::to_string(group) + ".blob");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("FileGroupStore: cannot open " + path.string());
    os.write(reinterpret_cast<const char*>(blob.data()),
             static_cast<std::streamsize>(blob.size()));
    if (!os) throw std::runtime_error("FileGroupStore: write failed for " + path.string());
    // Blank the in-memory payload; any read before restore is a bug.
    params_.bases[group] = Matrix();
    for (int x : params_.assignment.groups[group])
        params_.residuals[x] = FactorPair();
}

void FileGroupStore::restore(std::size_t group) {
    const auto path = dir_ / ("group_" + std::to_string(group) + ".blob");
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("FileGroupStore: cannot open " + path.string());
    std::vector<std::uint8_t> blob((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
    decode_group_blob(params_, group, blob);
}

std::uint64_t MemoryLedger::resident_bytes() const {
    std::uint64_t acc = 0;
    for (std::size_t g = 0; g < resident.size(); ++g)
        if (resident[g]) acc += bytes_of_group[g];
    return acc;
}

std::uint64_t MemoryLedger::total_bytes() const {
    return std::accumulate(bytes_of_group.begin(), bytes_of_group.end(), std::uint64_t{0});
}

double MemoryLedger::hit_rate() const {
    const std::uint64_t attempts = prefetch_hits + prefetch_misses;
    return attempts == 0 ? 0.0 : static_cast<double>(prefetch_hits) / attempts;
}

MemoryLedger make_ledger(std::vector<std::uint64_t> bytes_of_group) {
    if (bytes_of_group.empty()) throw std::invalid_argument("make_ledger: no groups");
    MemoryLedger l;
    const std::size_t g = bytes_of_group.size();
    l.resident.assign(g, 1);
    l.idle_steps.assign(g, 0);
    l.activity_score.assign(g, 0.0);
    l.prefetched.assign(g, 0);
    l.bytes_of_group = std::move(bytes_of_group);
    l.peak_resident_bytes = l.resident_bytes();
    return l;
}

std::uint64_t deployed_group_bytes(const GroupedParams& gp, std::size_t group) {
    const std::uint64_t base = 2ULL * gp.d_in * gp.d_out;  // FP16
    std::uint64_t unpruned = 0;
    for (int x : gp.assignment.groups[group])
        if (!gp.pruned[x]) ++unpruned;
    const std::uint64_t codes = (unpruned * gp.rank * (gp.d_in + gp.d_out) + 1) / 2;  // INT4
    const std::uint64_t meta = 9 + (gp.assignment.groups[group].size() + 7) / 8;
    return base + codes + meta;
}

void tick(MemoryLedger& ledger, std::span<const int> activated_groups, const MemoryConfig& cfg,
          GroupStore* store) {
    const std::size_t g = ledger.group_count();
    std::vector<std::uint8_t> activated(g, 0);
    for (int id : activated_groups) {
        if (id < 0 || static_cast<std::size_t>(id) >= g)
            throw std::invalid_argument("tick: group id out of range");
        activated[id] = 1;
    }

    // Demand loads and prefetch bookkeeping.
    for (std::size_t i = 0; i < g; ++i) {
        if (!activated[i]) continue;
        if (!ledger.resident[i]) {
            ++ledger.prefetch_misses;
            if (store) store->restore(i);
            ledger.resident[i] = 1;
            ledger.bytes_restored += ledger.bytes_of_group[i];
        } else if (ledger.prefetched[i]) {
            ++ledger.prefetch_hits;
        }
        ledger.prefetched[i] = 0;
    }
    ledger.peak_resident_bytes = std::max(ledger.peak_resident_bytes, ledger.resident_bytes());

    for (std::size_t i = 0; i < g; ++i) {
        ledger.idle_steps[i] = activated[i] ? 0 : ledger.idle_steps[i] + 1;
        ledger.activity_score[i] = (1.0 - cfg.ema_rate) * ledger.activity_score[i] +
                                   cfg.ema_rate * (activated[i] ? 1.0 : 0.0);
    }

    for (std::size_t i = 0; i < g; ++i) {
        if (!activated[i] && ledger.resident[i] && ledger.idle_steps[i] >= cfg.s_idle) {
            if (store) store->offload(i);
            ledger.resident[i] = 0;
            ledger.prefetched[i] = 0;
            ledger.bytes_offloaded += ledger.bytes_of_group[i];
        }
    }

    // Prefetch the most promising offloaded groups (score descending, id
    // ascending on ties).
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < g; ++i)
        if (!ledger.resident[i]) candidates.push_back(i);
    std::stable_sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) {
        return ledger.activity_score[a] > ledger.activity_score[b];
    });
    if (candidates.size() > cfg.lookahead_l) candidates.resize(cfg.lookahead_l);
    for (std::size_t i : candidates) {
        if (store) store->restore(i);
        ledger.resident[i] = 1;
        ledger.prefetched[i] = 1;
        ledger.bytes_restored += ledger.bytes_of_group[i];
    }
    ledger.peak_resident_bytes = std::max(ledger.peak_resident_bytes, ledger.resident_bytes());
    ++ledger.steps;
}

std::uint64_t peak_memory(const MemoryLedger& ledger) { return ledger.peak_resident_bytes; }

std::string ledger_to_json(const MemoryLedger& ledger) {
    nlohmann::json j;
    j["groups"] = ledger.group_count();
    j["steps"] = ledger.steps;
    j["resident"] = std::vector<int>(ledger.resident.begin(), ledger.resident.end());
    j["idle_steps"] = ledger.idle_steps;
    j["activity_score"] = ledger.activity_score;
    j["bytes_of_group"] = ledger.bytes_of_group;
    j["resident_bytes"] = ledger.resident_bytes();
    j["total_bytes"] = ledger.total_bytes();
    j["peak_resident_bytes"] = ledger.peak_resident_bytes;
    j["prefetch_hits"] = ledger.prefetch_hits;
    j["prefetch_misses"] = ledger.prefetch_misses;
    j["hit_rate"] = ledger.hit_rate();
    j["bytes_restored"] = ledger.bytes_restored;
    j["bytes_offloaded"] = ledger.bytes_offloaded;
    return j.dump(2);
}

}  // namespace moeforge
