#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "moeforge/expert_bank.hpp"
#include "moeforge/numerics.hpp"

using namespace moeforge;

namespace {

std::filesystem::path temp_file(const char* name) {
    return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("init_bank is deterministic and seed-sensitive") {
    const ExpertBank a = init_bank(4, 8, 8, 42);
    const ExpertBank b = init_bank(4, 8, 8, 42);
    const ExpertBank c = init_bank(4, 8, 8, 43);
    for (std::size_t i = 0; i < 4; ++i) CHECK(a.experts[i] == b.experts[i]);
    bool any_diff = false;
    for (std::size_t i = 0; i < 4; ++i)
        if (!(a.experts[i] == c.experts[i])) any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("init_bank shape and centroid contract") {
    const ExpertBank bank = init_bank(32, 16, 16, 7);
    CHECK(bank.size() == 32);
    for (const Matrix& w : bank.experts) {
        CHECK(w.rows() == 16);
        CHECK(w.cols() == 16);
    }
    for (const Centroid& c : bank.centroids) {
        CHECK(l2_norm(c.mu) == 0.0);
        CHECK(c.tokens_seen == 0);
    }
}

TEST_CASE("init_bank rejects degenerate sizes") {
    CHECK_THROWS_AS(init_bank(1, 4, 4, 0), std::invalid_argument);
    CHECK_THROWS_AS(init_bank(4, 0, 4, 0), std::invalid_argument);
    CHECK_THROWS_AS(init_bank(4, 4, 0, 0), std::invalid_argument);
}

TEST_CASE("planted bank with zero noise has within-group similarity exactly 1") {
    const PlantedBank pb = init_planted_bank(4, 3, 8, 8, 0.0, 5);
    CHECK(pb.bank.size() == 12);
    for (std::size_t i = 0; i < pb.bank.size(); ++i)
        for (std::size_t j = i + 1; j < pb.bank.size(); ++j)
            if (pb.true_group[i] == pb.true_group[j])
                CHECK(cosine_similarity(pb.bank.experts[i].flat(),
                                        pb.bank.experts[j].flat()) == 1.0);
}

TEST_CASE("planted bank separates groups at small noise") {
    // noise_sigma = 0.01 * entry RMS of the anchors (= 0.01/sqrt(d_in)).
    const double sigma = 0.01 / std::sqrt(16.0);
    const PlantedBank pb = init_planted_bank(8, 4, 16, 16, sigma, 11);
    double min_within = 1.0, max_cross = -1.0;
    for (std::size_t i = 0; i < pb.bank.size(); ++i)
        for (std::size_t j = i + 1; j < pb.bank.size(); ++j) {
            const double s = cosine_similarity(pb.bank.experts[i].flat(),
                                               pb.bank.experts[j].flat());
            if (pb.true_group[i] == pb.true_group[j])
                min_within = std::min(min_within, s);
            else
                max_cross = std::max(max_cross, s);
        }
    CHECK(min_within > max_cross);
}

TEST_CASE("planted bank is reproducible for a fixed seed") {
    const PlantedBank a = init_planted_bank(3, 2, 6, 5, 0.05, 99);
    const PlantedBank b = init_planted_bank(3, 2, 6, 5, 0.05, 99);
    for (std::size_t i = 0; i < a.bank.size(); ++i) CHECK(a.bank.experts[i] == b.bank.experts[i]);
    CHECK(a.true_group == b.true_group);
}

TEST_CASE("centroid update follows the EMA rule") {
    Centroid c;
    c.mu.assign(4, 0.0);
    c.beta = 0.05;

    SUBCASE("empty token list leaves the centroid unchanged") {
        const Centroid out = update_centroid(c, {});
        CHECK(out.mu == c.mu);
        CHECK(out.tokens_seen == 0);
    }

    SUBCASE("single all-ones token from zero") {
        const std::vector<std::vector<double>> tokens{{1.0, 1.0, 1.0, 1.0}};
        const Centroid out = update_centroid(c, tokens);
        for (double v : out.mu) CHECK(v == doctest::Approx(0.05));
        CHECK(out.tokens_seen == 1);
    }

    SUBCASE("batch mean equal to mu is a fixed point") {
        Centroid warm;
        warm.mu = {0.5, -0.25, 0.0, 1.0};
        warm.beta = 0.05;
        const std::vector<std::vector<double>> tokens{warm.mu, warm.mu};
        const Centroid out = update_centroid(warm, tokens);
        for (std::size_t i = 0; i < warm.mu.size(); ++i)
            CHECK(out.mu[i] == doctest::Approx(warm.mu[i]).epsilon(1e-15));
    }
}

TEST_CASE("centroid update is a contraction toward the batch mean") {
    Centroid c;
    c.mu = {1.0, 2.0, 3.0};
    c.beta = 0.3;
    const std::vector<std::vector<double>> tokens{{0.0, 1.0, -1.0}, {2.0, 1.0, 1.0}};
    std::vector<double> xbar{1.0, 1.0, 0.0};
    const Centroid out = update_centroid(c, tokens);
    double before = 0.0, after = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
        before += (c.mu[i] - xbar[i]) * (c.mu[i] - xbar[i]);
        after += (out.mu[i] - xbar[i]) * (out.mu[i] - xbar[i]);
    }
    CHECK(std::sqrt(after) == doctest::Approx((1.0 - c.beta) * std::sqrt(before)).epsilon(1e-12));
}

TEST_CASE("centroid update rejects dimension mismatch") {
    Centroid c;
    c.mu.assign(4, 0.0);
    const std::vector<std::vector<double>> bad{{1.0, 2.0}};
    CHECK_THROWS_AS(update_centroid(c, bad), std::invalid_argument);
}

TEST_CASE("bank archive round-trips bit-exactly") {
    ExpertBank bank = init_bank(6, 5, 7, 1234);
    bank.centroids[2] = update_centroid(bank.centroids[2],
                                        std::vector<std::vector<double>>{
                                            {0.1, -0.2, 0.3, 0.4, -0.5}});
    const auto path = temp_file("moeforge_test_bank.moeb");
    save_bank(bank, path);
    const ExpertBank back = load_bank(path);
    CHECK(back.d_in == bank.d_in);
    CHECK(back.d_out == bank.d_out);
    CHECK(back.size() == bank.size());
    for (std::size_t i = 0; i < bank.size(); ++i) {
        CHECK(back.experts[i] == bank.experts[i]);
        CHECK(back.centroids[i].mu == bank.centroids[i].mu);
        CHECK(back.centroids[i].beta == bank.centroids[i].beta);
        CHECK(back.centroids[i].tokens_seen == bank.centroids[i].tokens_seen);
    }
    std::filesystem::remove(path);
}

TEST_CASE("bank archive rejects corrupt headers") {
    const auto path = temp_file("moeforge_test_bad.moeb");
    {
        std::FILE* f = std::fopen(path.c_str(), "wb");
        std::fputs("NOPE", f);
        std::fclose(f);
    }
    CHECK_THROWS_AS(load_bank(path), std::runtime_error);
    std::filesystem::remove(path);
}
