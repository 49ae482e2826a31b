#include "moeforge/synthetic_routing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "moeforge/rng.hpp"

namespace moeforge {

ZipfRoutingFixture make_zipf_routing_fixture(std::size_t e, std::size_t g, std::size_t top_k,
                                             std::size_t tokens, double zipf_exponent,
                                             double token_noise, std::uint64_t seed) {
    if (e < 2 || g < 1 || e % g != 0)
        throw std::invalid_argument("zipf fixture: e must be a multiple of g");
    const std::size_t k_per_group = e / g;
    if (top_k < 1 || top_k > k_per_group)
        throw std::invalid_argument("zipf fixture: top_k must be in [1, e/g]");
    if (zipf_exponent <= 0.0) throw std::invalid_argument("zipf fixture: exponent must be > 0");

    ZipfRoutingFixture fx;
    fx.e = e;
    fx.d = 2 * e;

    fx.archetype_mass.resize(e);
    double total = 0.0;
    for (std::size_t c = 0; c < e; ++c) {
        fx.archetype_mass[c] = std::pow(static_cast<double>(c + 1), -zipf_exponent);
        total += fx.archetype_mass[c];
    }
    for (double& m : fx.archetype_mass) m /= total;

    // Capacity-constrained greedy packing: heaviest archetypes first, each
    // into the lightest group that still has room, so group masses are as
    // balanced as the skew allows.
    std::vector<std::size_t> order(e);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return fx.archetype_mass[a] > fx.archetype_mass[b];
    });
    fx.assignment.group_of.assign(e, -1);
    fx.assignment.groups.assign(g, {});
    std::vector<double> group_mass(g, 0.0);
    for (std::size_t c : order) {
        std::size_t best = g;
        for (std::size_t gi = 0; gi < g; ++gi) {
            if (fx.assignment.groups[gi].size() >= k_per_group) continue;
            if (best == g || group_mass[gi] < group_mass[best]) best = gi;
        }
        fx.assignment.group_of[c] = static_cast<int>(best);
        fx.assignment.groups[best].push_back(static_cast<int>(c));
        group_mass[best] += fx.archetype_mass[c];
    }
    for (auto& members : fx.assignment.groups) std::sort(members.begin(), members.end());
    fx.assignment.medoids.resize(g);
    for (std::size_t gi = 0; gi < g; ++gi) fx.assignment.medoids[gi] = fx.assignment.groups[gi][0];
    fx.assignment.mean_intra_similarity = 0.0;

    // Archetype c lives on axis c; per-expert jitter lives on axis e + c, so
    // it is orthogonal to every archetype.
    fx.hier.g1 = 1;
    fx.hier.k = top_k;
    fx.hier.temperature = 1.0;
    fx.hier.prototypes.assign(g, std::vector<double>(fx.d, 0.0));
    const double proto_scale = 1.0 / std::sqrt(static_cast<double>(k_per_group));
    for (std::size_t gi = 0; gi < g; ++gi)
        for (int c : fx.assignment.groups[gi])
            fx.hier.prototypes[gi][static_cast<std::size_t>(c)] = proto_scale;

    fx.hier.expert_vectors.assign(e, std::vector<double>(fx.d, 0.0));
    fx.flat_vectors.assign(e, std::vector<double>(fx.d, 0.0));
    for (std::size_t c = 0; c < e; ++c) {
        auto& hv = fx.hier.expert_vectors[c];
        const std::size_t gi = static_cast<std::size_t>(fx.assignment.group_of[c]);
        for (int m : fx.assignment.groups[gi])
            hv[static_cast<std::size_t>(m)] = proto_scale;  // group direction, shared
        hv[e + c] = 1.0;                                    // expert-private jitter axis

        auto& fv = fx.flat_vectors[c];
        fv[c] = 1.0;
        fv[(c + 1) % e] = 0.5;  // fixed runner-up archetype
    }

    // Token stream: archetype drawn from the Zipf law plus isotropic noise.
    Rng rng = Rng(seed).derive(0x7a697066);  // "zipf"
    std::vector<double> cdf(e);
    double acc = 0.0;
    for (std::size_t c = 0; c < e; ++c) {
        acc += fx.archetype_mass[c];
        cdf[c] = acc;
    }
    fx.tokens.reserve(tokens);
    fx.token_archetype.reserve(tokens);
    for (std::size_t t = 0; t < tokens; ++t) {
        const double u = rng.uniform();
        const std::size_t c = static_cast<std::size_t>(
            std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
        std::vector<double> x(fx.d);
        for (double& v : x) v = token_noise * rng.gaussian();
        x[std::min(c, e - 1)] += 1.0;
        fx.tokens.push_back(std::move(x));
        fx.token_archetype.push_back(static_cast<int>(std::min(c, e - 1)));
    }
    return fx;
}

ZipfRoutingRun run_zipf_routing(const ZipfRoutingFixture& fx) {
    ZipfRoutingRun run;
    run.flat_decisions.reserve(fx.tokens.size());
    run.hier_decisions.reserve(fx.tokens.size());
    for (std::size_t t = 0; t < fx.tokens.size(); ++t) {
        const Stage2Result flat = flat_route(fx.tokens[t], fx.flat_vectors, fx.hier.k);
        RoutingDecision fd;
        fd.token_id = t;
        for (int e : flat.top_experts) fd.experts.push_back({e, flat.probs[e]});
        run.flat_decisions.push_back(std::move(fd));
        run.hier_decisions.push_back(route_token(fx.tokens[t], fx.hier, fx.assignment, t));
    }
    run.flat_load = load_stats(run.flat_decisions, fx.e);
    run.hier_load = load_stats(run.hier_decisions, fx.e);
    return run;
}

}  // namespace moeforge
