#include "doctest.h"

#include <cmath>
#include <set>

#include "moeforge/clustering.hpp"
#include "moeforge/numerics.hpp"
#include "moeforge/rng.hpp"

using namespace moeforge;

namespace {

SimilarityConfig alpha_only() {
    SimilarityConfig cfg;
    cfg.alpha = 1.0;
    return cfg;
}

void check_partition(const GroupAssignment& a, std::size_t e, std::size_t g) {
    CHECK(a.groups.size() == g);
    std::set<int> seen;
    for (const auto& members : a.groups) {
        CHECK(members.size() == e / g);
        for (int x : members) {
            CHECK(seen.insert(x).second);
            CHECK(a.group_of[x] == &members - a.groups.data());
        }
    }
    CHECK(seen.size() == e);
}

}  // namespace

TEST_CASE("fused similarity blends linearly") {
    CHECK(fused_similarity(1.0, 0.0, 0.7) == doctest::Approx(0.7));
    CHECK(fused_similarity(0.9, 0.3, 1.0) == 0.9);
    CHECK(fused_similarity(0.4, 0.8, 0.5) == doctest::Approx(0.6));
    CHECK_THROWS_AS(fused_similarity(0.5, 0.5, 1.5), std::invalid_argument);
    CHECK_THROWS_AS(fused_similarity(0.5, 0.5, -0.1), std::invalid_argument);
}

TEST_CASE("zero-noise planted bank yields within-group parameter similarity 1") {
    const PlantedBank pb = init_planted_bank(4, 2, 8, 8, 0.0, 3);
    const SimilarityMatrix sim = build_similarity(pb.bank, nullptr, 0, alpha_only());
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j)
            if (pb.true_group[i] == pb.true_group[j]) CHECK(sim.s_param(i, j) == 1.0);
}

TEST_CASE("similarity matrix is symmetric and obeys the blend identity") {
    PlantedBank pb = init_planted_bank(4, 2, 8, 8, 0.02, 17);
    // Warm a few centroids so s_task participates.
    for (std::size_t i = 0; i < 4; ++i) {
        std::vector<std::vector<double>> toks{{0.1 * (i + 1.0), 0.2, 0.3, -0.1, 0.0, 0.4, 0.2, 0.1}};
        pb.bank.centroids[i] = update_centroid(pb.bank.centroids[i], toks);
    }
    SimilarityConfig cfg;
    cfg.alpha = 0.7;
    const SimilarityMatrix sim = build_similarity(pb.bank, nullptr, 0, cfg);
    for (std::size_t i = 0; i < sim.e(); ++i)
        for (std::size_t j = 0; j < sim.e(); ++j) {
            CHECK(sim.s_fused(i, j) == sim.s_fused(j, i));
            CHECK(std::abs(sim.s_fused(i, j) -
                           (0.7 * sim.s_param(i, j) + 0.3 * sim.s_task(i, j))) < 1e-12);
        }
}

TEST_CASE("cold centroids contribute task similarity 0") {
    const PlantedBank pb = init_planted_bank(2, 2, 6, 6, 0.0, 9);
    SimilarityConfig cfg;
    cfg.alpha = 0.5;
    const SimilarityMatrix sim = build_similarity(pb.bank, nullptr, 0, cfg);
    CHECK(sim.s_task(0, 1) == 0.0);
    CHECK(sim.s_fused(0, 1) == doctest::Approx(0.5 * sim.s_param(0, 1)));
}

TEST_CASE("similarity cache reuses fresh rows and recomputes stale ones") {
    const PlantedBank pb = init_planted_bank(4, 2, 8, 8, 0.01, 23);
    SimilarityConfig cfg;
    cfg.alpha = 1.0;
    cfg.cache_lifetime_m = 50;
    cfg.stale_eps = 0.02;
    const std::size_t e = pb.bank.size();

    const SimilarityMatrix first = build_similarity(pb.bank, nullptr, 0, cfg);
    const std::uint64_t full_pairs = e * (e - 1) / 2;
    CHECK(first.param_pair_computations() == full_pairs);

    SUBCASE("no weight change within the lifetime reuses every entry") {
        const SimilarityMatrix second = build_similarity(pb.bank, &first, 49, cfg);
        CHECK(second.param_pair_computations() == full_pairs);  // counter unchanged
        for (std::size_t i = 0; i < e; ++i)
            for (std::size_t j = 0; j < e; ++j)
                CHECK(second.s_param(i, j) == first.s_param(i, j));
    }

    SUBCASE("expiry forces a full recompute") {
        const SimilarityMatrix second = build_similarity(pb.bank, &first, 50, cfg);
        CHECK(second.param_pair_computations() == 2 * full_pairs);
    }

    SUBCASE("perturbing one expert recomputes only its row and column") {
        ExpertBank bank = pb.bank;
        // Relative update of around 2 * stale_eps on expert 3.
        const double norm = bank.experts[3].frobenius_norm();
        bank.experts[3](0, 0) += 2.0 * cfg.stale_eps * norm;
        const SimilarityMatrix second = build_similarity(bank, &first, 10, cfg);
        CHECK(second.param_pair_computations() == full_pairs + (e - 1));

        const SimilarityMatrix scratch = build_similarity(bank, nullptr, 10, cfg);
        for (std::size_t i = 0; i < e; ++i)
            for (std::size_t j = 0; j < e; ++j)
                if (i == 3 || j == 3)
                    CHECK(std::abs(second.s_param(i, j) - scratch.s_param(i, j)) < 1e-12);
    }
}

TEST_CASE("pairs below tau are pruned and treated as distance 1") {
    const PlantedBank pb = init_planted_bank(2, 2, 16, 16, 0.0, 31);
    SimilarityConfig cfg;
    cfg.alpha = 1.0;
    cfg.tau = 0.9;  // cross-group cosine of independent anchors is far below this
    const SimilarityMatrix sim = build_similarity(pb.bank, nullptr, 0, cfg);
    CHECK_FALSE(sim.present(0, 2));
    CHECK(sim.distance(0, 2) == 1.0);
    CHECK(sim.present(0, 1));  // identical copies stay connected
    CHECK(sim.distance(0, 0) == 0.0);
}

TEST_CASE("neighbor cap keeps only the strongest edges") {
    const PlantedBank pb = init_planted_bank(4, 4, 12, 12, 0.001, 41);
    SimilarityConfig cfg;
    cfg.alpha = 1.0;
    cfg.tau = -1.0;  // keep everything, let the cap do the pruning
    cfg.neighbor_cap = 3;
    const SimilarityMatrix sim = build_similarity(pb.bank, nullptr, 0, cfg);
    // Every expert keeps its 3 same-group partners.
    for (std::size_t i = 0; i < sim.e(); ++i) {
        std::size_t kept = 0;
        for (std::size_t j = 0; j < sim.e(); ++j)
            if (i != j && sim.present(i, j)) ++kept;
        CHECK(kept >= 3);
        for (std::size_t j = 0; j < sim.e(); ++j)
            if (i != j && pb.true_group[i] == pb.true_group[j]) CHECK(sim.present(i, j));
    }
}

TEST_CASE("planted clusters are recovered exactly at alpha 1") {
    const double sigma = 0.05 / std::sqrt(16.0);
    const PlantedBank pb = init_planted_bank(8, 4, 16, 16, sigma, 77);
    const SimilarityMatrix sim = build_similarity(pb.bank, nullptr, 0, alpha_only());
    const GroupAssignment a = cluster_experts(sim, 8, 1);
    check_partition(a, 32, 8);
    CHECK(adjusted_rand_index(a.group_of, pb.true_group) == doctest::Approx(1.0));
}

TEST_CASE("zero-noise planted bank reaches mean intra similarity exactly 1") {
    const PlantedBank pb = init_planted_bank(4, 4, 8, 8, 0.0, 13);
    const SimilarityMatrix sim = build_similarity(pb.bank, nullptr, 0, alpha_only());
    const GroupAssignment a = cluster_experts(sim, 4, 2);
    CHECK(a.mean_intra_similarity == 1.0);
}

TEST_CASE("partition and uniform sizes hold across a seed sweep") {
    const ExpertBank bank = init_bank(24, 8, 8, 5);
    const SimilarityMatrix sim = build_similarity(bank, nullptr, 0, alpha_only());
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const GroupAssignment a = cluster_experts(sim, 6, seed);
        check_partition(a, 24, 6);
    }
}

TEST_CASE("degenerate group counts") {
    const ExpertBank bank = init_bank(6, 8, 8, 19);
    const SimilarityMatrix sim = build_similarity(bank, nullptr, 0, alpha_only());

    const GroupAssignment singletons = cluster_experts(sim, 6, 0);
    check_partition(singletons, 6, 6);
    CHECK(singletons.mean_intra_similarity == 1.0);  // singleton convention

    const GroupAssignment one = cluster_experts(sim, 1, 0);
    check_partition(one, 6, 1);

    CHECK_THROWS_AS(cluster_experts(sim, 4, 0), std::invalid_argument);
}

TEST_CASE("duplicate experts cannot seed that many distinct medoids") {
    const PlantedBank pb = init_planted_bank(2, 3, 8, 8, 0.0, 2);
    const SimilarityMatrix sim = build_similarity(pb.bank, nullptr, 0, alpha_only());
    CHECK_THROWS_AS(cluster_experts(sim, 6, 0), std::invalid_argument);
}

TEST_CASE("should_recluster compares the improvement against delta") {
    CHECK(should_recluster(0.50, 0.52, 0.01));
    CHECK_FALSE(should_recluster(0.50, 0.505, 0.01));
    CHECK_FALSE(should_recluster(0.50, 0.50, 0.01));
    // Strict inequality at the boundary, with exactly representable values.
    CHECK_FALSE(should_recluster(0.5, 0.515625, 0.015625));
    CHECK(should_recluster(0.5, 0.515625, 0.015624999999));
    CHECK_THROWS_AS(should_recluster(0.5, 0.6, -0.1), std::invalid_argument);
}

TEST_CASE("recluster interval follows the expert-count schedule") {
    CHECK(recluster_interval(32) == 100);
    CHECK(recluster_interval(256) == 100);
    CHECK(recluster_interval(257) == 200);
    CHECK(recluster_interval(512) == 200);
}

TEST_CASE("adjusted rand index extremes") {
    const std::vector<int> a{0, 0, 1, 1, 2, 2};
    CHECK(adjusted_rand_index(a, a) == doctest::Approx(1.0));
    const std::vector<int> relabeled{5, 5, 9, 9, 7, 7};
    CHECK(adjusted_rand_index(a, relabeled) == doctest::Approx(1.0));
    // Independent random-ish labelings land near 0.
    const std::vector<int> mixed{0, 1, 2, 0, 1, 2};
    CHECK(std::abs(adjusted_rand_index(a, mixed)) < 0.5);
}

TEST_CASE("group assignment serializes to json and back") {
    const PlantedBank pb = init_planted_bank(3, 2, 8, 8, 0.0, 8);
    const SimilarityMatrix sim = build_similarity(pb.bank, nullptr, 0, alpha_only());
    const GroupAssignment a = cluster_experts(sim, 3, 4);
    const GroupAssignment back = assignment_from_json(assignment_to_json(a));
    CHECK(back.groups == a.groups);
    CHECK(back.medoids == a.medoids);
    CHECK(back.group_of == a.group_of);
    CHECK(back.mean_intra_similarity == doctest::Approx(a.mean_intra_similarity));
}
