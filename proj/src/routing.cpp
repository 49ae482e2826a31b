#include "moeforge/routing.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "moeforge/numerics.hpp"

namespace moeforge {

namespace {

// Max-subtracted softmax; throws on non-finite logits.
std::vector<double> softmax(std::span<const double> logits) {
    double hi = -std::numeric_limits<double>::infinity();
    for (double z : logits) {
        if (!std::isfinite(z)) throw std::invalid_argument("softmax: non-finite logit");
        hi = std::max(hi, z);
    }
    std::vector<double> p(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - hi);
        total += p[i];
    }
    for (double& v : p) v /= total;
    return p;
}

// Indices of the n largest logits; equal logits favor the lower index.
std::vector<int> top_n(std::span<const double> logits, std::size_t n) {
    std::vector<int> order(logits.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return logits[a] > logits[b]; });
    order.resize(n);
    return order;
}

}  // namespace

Stage1Result route_stage1(std::span<const double> x, const RouterParams& rp,
                          std::uint64_t* mult_counter) {
    const std::size_t g = rp.group_count();
    if (g == 0) throw std::invalid_argument("route_stage1: no prototypes");
    if (rp.g1 < 1 || rp.g1 > g) throw std::invalid_argument("route_stage1: bad g1");
    if (rp.temperature <= 0.0) throw std::invalid_argument("route_stage1: temperature <= 0");
    std::vector<double> z(g);
    for (std::size_t i = 0; i < g; ++i) {
        z[i] = dot(rp.prototypes[i], x) / rp.temperature;
        if (mult_counter) *mult_counter += x.size();
    }
    Stage1Result out;
    out.probs = softmax(z);
    out.top_groups = top_n(z, rp.g1);
    return out;
}

Stage2Result route_stage2(std::span<const double> x, int group, const RouterParams& rp,
                          const GroupAssignment& assignment, std::uint64_t* mult_counter) {
    if (group < 0 || static_cast<std::size_t>(group) >= assignment.group_count())
        throw std::invalid_argument("route_stage2: bad group id");
    const auto& members = assignment.groups[group];
    if (rp.k > members.size())
        throw std::invalid_argument("route_stage2: k exceeds group size");
    std::vector<double> z(members.size());
    for (std::size_t i = 0; i < members.size(); ++i) {
        z[i] = dot(rp.expert_vectors[members[i]], x);
        if (mult_counter) *mult_counter += x.size();
    }
    Stage2Result out;
    out.probs = softmax(z);
    // Ties break toward the lower expert id.
    std::vector<int> idx(members.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (z[a] != z[b]) return z[a] > z[b];
        return members[a] < members[b];
    });
    out.top_experts.reserve(rp.k);
    for (std::size_t i = 0; i < rp.k; ++i) out.top_experts.push_back(members[idx[i]]);
    return out;
}

Stage2Result flat_route(std::span<const double> x,
                        const std::vector<std::vector<double>>& expert_vectors, std::size_t k,
                        std::uint64_t* mult_counter) {
    if (k < 1 || k > expert_vectors.size())
        throw std::invalid_argument("flat_route: k out of range");
    std::vector<double> z(expert_vectors.size());
    for (std::size_t i = 0; i < expert_vectors.size(); ++i) {
        z[i] = dot(expert_vectors[i], x);
        if (mult_counter) *mult_counter += x.size();
    }
    Stage2Result out;
    out.probs = softmax(z);
    out.top_experts = top_n(z, k);
    return out;
}

RoutingDecision route_token(std::span<const double> x, const RouterParams& rp,
                            const GroupAssignment& assignment, std::uint64_t token_id,
                            std::uint64_t* mult_counter) {
    const Stage1Result s1 = route_stage1(x, rp, mult_counter);
    RoutingDecision d;
    d.token_id = token_id;

    struct Picked {
        int expert;
        double weight;  // p_g * p_(i|g)
    };
    std::vector<Picked> picked;
    for (int g : s1.top_groups) {
        d.groups.push_back({g, s1.probs[g]});
        const Stage2Result s2 = route_stage2(x, g, rp, assignment, mult_counter);
        const auto& members = assignment.groups[g];
        for (int expert : s2.top_experts) {
            const auto it = std::find(members.begin(), members.end(), expert);
            const double q = s2.probs[static_cast<std::size_t>(it - members.begin())];
            picked.push_back({expert, s1.probs[g] * q});
        }
    }
    double total = 0.0;
    for (const Picked& p : picked) total += p.weight;
    for (const Picked& p : picked)
        d.experts.push_back({p.expert, total > 0.0 ? p.weight / total : 0.0});
    return d;
}

RoutingCost routing_cost(std::size_t e, std::size_t g, std::size_t k_per_group, std::size_t d) {
    if (e < 1 || g < 1 || k_per_group < 1 || d < 1)
        throw std::invalid_argument("routing_cost: all arguments must be >= 1");
    RoutingCost c;
    c.hier_mults = static_cast<std::uint64_t>(g + k_per_group) * d;
    c.flat_mults = static_cast<std::uint64_t>(e) * d;
    c.reduction = static_cast<double>(e) / static_cast<double>(g + k_per_group);
    return c;
}

LoadStats load_stats(std::span<const RoutingDecision> decisions, std::size_t e) {
    if (e < 1) throw std::invalid_argument("load_stats: need e >= 1");
    LoadStats out;
    out.per_expert_tokens.assign(e, 0);
    for (const RoutingDecision& d : decisions)
        for (const ExpertChoice& c : d.experts) {
            if (c.expert < 0 || static_cast<std::size_t>(c.expert) >= e)
                throw std::invalid_argument("load_stats: expert id out of range");
            ++out.per_expert_tokens[c.expert];
        }
    double mean = 0.0;
    for (auto n : out.per_expert_tokens) mean += static_cast<double>(n);
    mean /= static_cast<double>(e);
    if (mean == 0.0) {
        out.cov = 0.0;
        out.zero_mean_warning = true;
        return out;
    }
    double var = 0.0;
    for (auto n : out.per_expert_tokens) {
        const double d = static_cast<double>(n) - mean;
        var += d * d;
    }
    var /= static_cast<double>(e);  // population variance
    out.cov = std::sqrt(var) / mean;
    return out;
}

std::string decision_to_json_line(const RoutingDecision& d) {
    nlohmann::json j;
    j["token_id"] = d.token_id;
    auto& groups = j["groups"] = nlohmann::json::array();
    auto& experts = j["experts"] = nlohmann::json::array();
    auto& probs = j["p"] = nlohmann::json::array();
    for (const GroupChoice& g : d.groups) groups.push_back(g.group);
    for (const ExpertChoice& c : d.experts) {
        experts.push_back(c.expert);
        probs.push_back(c.prob);
    }
    j["group_p"] = nlohmann::json::array();
    for (const GroupChoice& g : d.groups) j["group_p"].push_back(g.prob);
    return j.dump();
}

RoutingDecision decision_from_json_line(const std::string& line) {
    const nlohmann::json j = nlohmann::json::parse(line);
    RoutingDecision d;
    d.token_id = j.at("token_id").get<std::uint64_t>();
    const auto groups = j.at("groups").get<std::vector<int>>();
    const auto experts = j.at("experts").get<std::vector<int>>();
    const auto probs = j.at("p").get<std::vector<double>>();
    if (experts.size() != probs.size())
        throw std::invalid_argument("decision line: experts/p length mismatch");
    std::vector<double> group_probs(groups.size(), 0.0);
    if (j.contains("group_p")) group_probs = j.at("group_p").get<std::vector<double>>();
    for (std::size_t i = 0; i < groups.size(); ++i) d.groups.push_back({groups[i], group_probs[i]});
    for (std::size_t i = 0; i < experts.size(); ++i) d.experts.push_back({experts[i], probs[i]});
    return d;
}

void save_decisions(std::span<const RoutingDecision> decisions, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("save_decisions: cannot open " + path);
    for (const RoutingDecision& d : decisions) os << decision_to_json_line(d) << '\n';
    if (!os) throw std::runtime_error("save_decisions: write failed for " + path);
}

std::vector<RoutingDecision> load_decisions(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("load_decisions: cannot open " + path);
    std::vector<RoutingDecision> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        out.push_back(decision_from_json_line(line));
    }
    return out;
}

}  // namespace moeforge
