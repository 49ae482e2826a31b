#include "moeforge/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "moeforge/numerics.hpp"
#include "moeforge/rng.hpp"

namespace moeforge {

double fused_similarity(double s_p, double s_t, double alpha) {
    if (alpha < 0.0 || alpha > 1.0)
        throw std::invalid_argument("fused_similarity: alpha must be in [0, 1]");
    return alpha * s_p + (1.0 - alpha) * s_t;
}

namespace {

double relative_update_norm(std::span<const double> now, std::span<const double> snapshot) {
    if (now.size() != snapshot.size()) return std::numeric_limits<double>::infinity();
    double diff = 0.0, ref = 0.0;
    for (std::size_t i = 0; i < now.size(); ++i) {
        const double d = now[i] - snapshot[i];
        diff += d * d;
        ref += snapshot[i] * snapshot[i];
    }
    if (ref == 0.0) return std::numeric_limits<double>::infinity();
    return std::sqrt(diff / ref);
}

double centroid_cosine(const Centroid& a, const Centroid& b) {
    if (a.tokens_seen == 0 || b.tokens_seen == 0) return 0.0;
    // A centroid that has only seen zero tokens stays at the origin; treat
    // it like a cold one instead of erroring.
    if (l2_norm(a.mu) == 0.0 || l2_norm(b.mu) == 0.0) return 0.0;
    return cosine_similarity(a.mu, b.mu);
}

}  // namespace

SimilarityMatrix build_similarity(std::span<const Matrix> weights,
                                  std::span<const Centroid> centroids,
                                  const SimilarityMatrix* prev, std::uint64_t step,
                                  const SimilarityConfig& cfg) {
    const std::size_t e = weights.size();
    if (e < 2) throw std::invalid_argument("build_similarity: need at least 2 experts");
    if (centroids.size() != e)
        throw std::invalid_argument("build_similarity: centroid count mismatch");
    if (cfg.alpha < 0.0 || cfg.alpha > 1.0)
        throw std::invalid_argument("build_similarity: alpha must be in [0, 1]");

    SimilarityMatrix out;
    out.e_ = e;
    out.alpha_ = cfg.alpha;
    out.tau_ = cfg.tau;
    out.cache_lifetime_m_ = cfg.cache_lifetime_m;
    out.stale_eps_ = cfg.stale_eps;
    out.s_param_.assign(e * e, 0.0);
    out.s_task_.assign(e * e, 0.0);
    out.s_fused_.assign(e * e, 0.0);
    out.present_.assign(e * e, 1);
    out.last_computed_step_.assign(e, step);
    out.weight_snapshot_.resize(e);

    const bool reusable = prev != nullptr && prev->e_ == e;
    out.param_pair_computations_ = reusable ? prev->param_pair_computations_ : 0;

    // An expert is fresh when its cached row is young enough and its weights
    // have not drifted past the relative-update threshold.
    std::vector<std::uint8_t> fresh(e, 0);
    if (reusable) {
        for (std::size_t i = 0; i < e; ++i) {
            const std::uint64_t age = step - prev->last_computed_step_[i];
            if (age >= cfg.cache_lifetime_m) continue;
            if (relative_update_norm(weights[i].flat(), prev->weight_snapshot_[i]) >
                cfg.stale_eps)
                continue;
            fresh[i] = 1;
        }
    }

    for (std::size_t i = 0; i < e; ++i) {
        if (fresh[i]) {
            out.last_computed_step_[i] = prev->last_computed_step_[i];
            out.weight_snapshot_[i] = prev->weight_snapshot_[i];
        } else {
            out.weight_snapshot_[i] = weights[i].flat();
        }
    }

    for (std::size_t i = 0; i < e; ++i) {
        out.s_param_[i * e + i] = 1.0;
        for (std::size_t j = i + 1; j < e; ++j) {
            double sp;
            if (fresh[i] && fresh[j]) {
                sp = prev->s_param_[i * e + j];
            } else {
                sp = cosine_similarity(weights[i].flat(), weights[j].flat());
                ++out.param_pair_computations_;
            }
            out.s_param_[i * e + j] = sp;
            out.s_param_[j * e + i] = sp;
        }
    }

    // Centroid cosines are O(E^2 d_in) and cheap next to the parameter
    // matrix; always recomputed.
    for (std::size_t i = 0; i < e; ++i) {
        out.s_task_[i * e + i] = centroids[i].tokens_seen > 0 ? 1.0 : 0.0;
        for (std::size_t j = i + 1; j < e; ++j) {
            const double st = centroid_cosine(centroids[i], centroids[j]);
            out.s_task_[i * e + j] = st;
            out.s_task_[j * e + i] = st;
        }
    }

    for (std::size_t i = 0; i < e * e; ++i)
        out.s_fused_[i] = fused_similarity(out.s_param_[i], out.s_task_[i], cfg.alpha);

    // Threshold prune (diagonal always present).
    for (std::size_t i = 0; i < e; ++i)
        for (std::size_t j = 0; j < e; ++j)
            if (i != j && out.s_fused_[i * e + j] < cfg.tau) out.present_[i * e + j] = 0;

    // Optional neighbor cap: keep a pair if it is in the top-N list of
    // either endpoint.
    if (cfg.neighbor_cap) {
        const std::size_t cap = *cfg.neighbor_cap;
        std::vector<std::uint8_t> keep(e * e, 0);
        for (std::size_t i = 0; i < e; ++i) {
            std::vector<std::size_t> nbrs;
            for (std::size_t j = 0; j < e; ++j)
                if (j != i && out.present_[i * e + j]) nbrs.push_back(j);
            std::stable_sort(nbrs.begin(), nbrs.end(), [&](std::size_t a, std::size_t b) {
                return out.s_fused_[i * e + a] > out.s_fused_[i * e + b];
            });
            if (nbrs.size() > cap) nbrs.resize(cap);
            for (std::size_t j : nbrs) {
                keep[i * e + j] = 1;
                keep[j * e + i] = 1;
            }
        }
        for (std::size_t i = 0; i < e; ++i)
            for (std::size_t j = 0; j < e; ++j)
                if (i != j && !keep[i * e + j]) out.present_[i * e + j] = 0;
    }
    return out;
}

SimilarityMatrix build_similarity(const ExpertBank& bank, const SimilarityMatrix* prev,
                                  std::uint64_t step, const SimilarityConfig& cfg) {
    return build_similarity(bank.experts, bank.centroids, prev, step, cfg);
}

double mean_intra_similarity(const SimilarityMatrix& sim,
                             const std::vector<std::vector<int>>& groups) {
    if (groups.empty()) return 0.0;
    double total = 0.0;
    for (const auto& members : groups) {
        if (members.size() <= 1) {
            total += 1.0;  // singleton convention
            continue;
        }
        double acc = 0.0;
        std::size_t pairs = 0;
        for (std::size_t a = 0; a < members.size(); ++a)
            for (std::size_t b = a + 1; b < members.size(); ++b) {
                acc += sim.effective_similarity(static_cast<std::size_t>(members[a]),
                                                static_cast<std::size_t>(members[b]));
                ++pairs;
            }
        total += acc / static_cast<double>(pairs);
    }
    return total / static_cast<double>(groups.size());
}

GroupAssignment cluster_experts(const SimilarityMatrix& sim, std::size_t g, std::uint64_t seed) {
    const std::size_t e = sim.e();
    if (g < 1) throw std::invalid_argument("cluster_experts: need g >= 1");
    if (e % g != 0)
        throw std::invalid_argument("cluster_experts: expert count " + std::to_string(e) +
                                    " not divisible by " + std::to_string(g) + " groups");
    const std::size_t k = e / g;

    // K-means++ seeding on D = 1 - S: medoids drawn proportionally to the
    // squared distance to the nearest chosen medoid.
    Rng rng = Rng(seed).derive(0x636c7573);  // "clus" stream
    std::vector<int> medoids;
    medoids.reserve(g);
    medoids.push_back(static_cast<int>(rng.uniform_index(e)));
    std::vector<double> dist2(e);
    while (medoids.size() < g) {
        double total = 0.0;
        for (std::size_t i = 0; i < e; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (int m : medoids)
                best = std::min(best, sim.distance(i, static_cast<std::size_t>(m)));
            dist2[i] = best * best;
            total += dist2[i];
        }
        if (total <= 0.0)
            throw std::invalid_argument("cluster_experts: fewer than " + std::to_string(g) +
                                        " distinct experts");
        const double target = rng.uniform() * total;
        double acc = 0.0;
        std::size_t chosen = e - 1;
        for (std::size_t i = 0; i < e; ++i) {
            acc += dist2[i];
            if (acc > target) {
                chosen = i;
                break;
            }
        }
        medoids.push_back(static_cast<int>(chosen));
    }

    // Nearest-medoid assignment; ties break toward the lower group id.
    GroupAssignment out;
    out.group_of.assign(e, 0);
    out.groups.assign(g, {});
    for (std::size_t i = 0; i < e; ++i) {
        int best_g = 0;
        double best_d = sim.distance(i, static_cast<std::size_t>(medoids[0]));
        for (std::size_t m = 1; m < g; ++m) {
            const double d = sim.distance(i, static_cast<std::size_t>(medoids[m]));
            if (d < best_d) {
                best_d = d;
                best_g = static_cast<int>(m);
            }
        }
        out.group_of[i] = best_g;
        out.groups[best_g].push_back(static_cast<int>(i));
    }

    // Greedy rebalance to exact uniform sizes: move boundary experts from
    // over-capacity groups to the under-capacity group losing the least
    // similarity, best candidates first, one pass.
    struct Move {
        double score;  // distance-to-own-medoid minus distance-to-target-medoid
        int expert;
        int target;
    };
    std::vector<Move> moves;
    for (std::size_t s = 0; s < g; ++s) {
        if (out.groups[s].size() <= k) continue;
        for (int x : out.groups[s]) {
            if (x == medoids[s]) continue;
            const double d_own = sim.distance(static_cast<std::size_t>(x),
                                              static_cast<std::size_t>(medoids[s]));
            for (std::size_t t = 0; t < g; ++t) {
                if (out.groups[t].size() >= k) continue;
                const double d_tgt = sim.distance(static_cast<std::size_t>(x),
                                                  static_cast<std::size_t>(medoids[t]));
                moves.push_back({d_own - d_tgt, x, static_cast<int>(t)});
            }
        }
    }
    std::stable_sort(moves.begin(), moves.end(), [](const Move& a, const Move& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.expert != b.expert) return a.expert < b.expert;
        return a.target < b.target;
    });
    for (const Move& mv : moves) {
        const int cur = out.group_of[mv.expert];
        if (out.groups[cur].size() <= k) continue;
        if (out.groups[mv.target].size() >= k) continue;
        auto& members = out.groups[cur];
        members.erase(std::find(members.begin(), members.end(), mv.expert));
        out.groups[mv.target].push_back(mv.expert);
        out.group_of[mv.expert] = mv.target;
    }
    for (const auto& members : out.groups) {
        if (members.size() != k)
            throw std::runtime_error("cluster_experts: rebalance failed to reach uniform sizes");
    }

    // Final medoid per group: the member closest to its peers.
    out.medoids.assign(g, -1);
    for (std::size_t s = 0; s < g; ++s) {
        auto& members = out.groups[s];
        std::sort(members.begin(), members.end());
        double best = std::numeric_limits<double>::infinity();
        for (int cand : members) {
            double acc = 0.0;
            for (int other : members)
                acc += sim.distance(static_cast<std::size_t>(cand),
                                    static_cast<std::size_t>(other));
            if (acc < best) {
                best = acc;
                out.medoids[s] = cand;
            }
        }
    }
    out.mean_intra_similarity = mean_intra_similarity(sim, out.groups);
    return out;
}

bool should_recluster(double old_mean_sim, double new_mean_sim, double delta) {
    if (delta < 0.0) throw std::invalid_argument("should_recluster: delta must be >= 0");
    return new_mean_sim - old_mean_sim > delta;
}

std::uint64_t recluster_interval(std::size_t e) {
    if (e < 1) throw std::invalid_argument("recluster_interval: need e >= 1");
    return e <= 256 ? 100 : 200;
}

double adjusted_rand_index(std::span<const int> labels_a, std::span<const int> labels_b) {
    if (labels_a.size() != labels_b.size())
        throw std::invalid_argument("adjusted_rand_index: length mismatch");
    const std::size_t n = labels_a.size();
    if (n == 0) throw std::invalid_argument("adjusted_rand_index: empty labelings");

    std::map<std::pair<int, int>, std::uint64_t> cells;
    std::map<int, std::uint64_t> rows, colsums;
    for (std::size_t i = 0; i < n; ++i) {
        ++cells[{labels_a[i], labels_b[i]}];
        ++rows[labels_a[i]];
        ++colsums[labels_b[i]];
    }
    auto choose2 = [](std::uint64_t x) {
        return static_cast<double>(x) * static_cast<double>(x - 1) / 2.0;
    };
    double sum_cells = 0.0, sum_rows = 0.0, sum_cols = 0.0;
    for (const auto& [k, v] : cells) sum_cells += choose2(v);
    for (const auto& [k, v] : rows) sum_rows += choose2(v);
    for (const auto& [k, v] : colsums) sum_cols += choose2(v);
    const double total = choose2(n);
    const double expected = sum_rows * sum_cols / total;
    const double maximum = 0.5 * (sum_rows + sum_cols);
    if (maximum == expected) return 1.0;  // both partitions trivial
    return (sum_cells - expected) / (maximum - expected);
}

std::string assignment_to_json(const GroupAssignment& a) {
    nlohmann::json j;
    j["groups"] = a.groups;
    j["medoids"] = a.medoids;
    j["mean_intra_similarity"] = a.mean_intra_similarity;
    return j.dump(2);
}

GroupAssignment assignment_from_json(const std::string& text) {
    const nlohmann::json j = nlohmann::json::parse(text);
    GroupAssignment a;
    a.groups = j.at("groups").get<std::vector<std::vector<int>>>();
    a.medoids = j.at("medoids").get<std::vector<int>>();
    a.mean_intra_similarity = j.at("mean_intra_similarity").get<double>();
    std::size_t e = 0;
    for (const auto& g : a.groups) e += g.size();
    a.group_of.assign(e, -1);
    for (std::size_t g = 0; g < a.groups.size(); ++g)
        for (int x : a.groups[g]) {
            if (x < 0 || static_cast<std::size_t>(x) >= e || a.group_of[x] != -1)
                throw std::invalid_argument("assignment_from_json: not an exact partition");
            a.group_of[x] = static_cast<int>(g);
        }
    return a;
}

}  // namespace moeforge
