#include "moeforge/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "moeforge/numerics.hpp"
#include "moeforge/rng.hpp"

namespace moeforge {

// --- config -----------------------------------------------------------------

std::uint64_t TrainConfig::effective_recluster_interval() const {
    return t_recluster != 0 ? t_recluster : recluster_interval(experts);
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
    if (experts < 2) fail("experts must be >= 2");
    if (groups < 1) fail("groups must be >= 1");
    if (experts % groups != 0) fail("experts must be divisible by groups");
    if (d_in < 1 || d_out < 1) fail("dims must be >= 1");
    if (rank < 1 || rank > std::min(d_in, d_out)) fail("rank must be in [1, min(d_in, d_out)]");
    if (g1 < 1 || g1 > groups) fail("g1 must be in [1, groups]");
    const std::size_t k_per_group = experts / groups;
    if (k < 1 || k > k_per_group) fail("k must be in [1, experts/groups]");
    if (t0_burn_in < 1) fail("t0_burn_in must be >= 1");
    if (delta_skip < 0.0) fail("delta_skip must be >= 0");
    if (alpha < 0.0 || alpha > 1.0) fail("alpha must be in [0, 1]");
    if (beta <= 0.0 || beta > 1.0) fail("beta must be in (0, 1]");
    if (tau < 0.0 || tau > 1.0) fail("tau must be in [0, 1]");
    if (gamma < 0.0 || gamma > 1.0) fail("gamma must be in [0, 1]");
    if (cache_m < 1) fail("cache_m must be >= 1");
    if (cache_eps < 0.0) fail("cache_eps must be >= 0");
    if (lr <= 0.0) fail("lr must be > 0");
    if (weight_decay < 0.0) fail("weight_decay must be >= 0");
    if (clip_norm <= 0.0) fail("clip_norm must be > 0");
    if (temp_start <= 0.0 || temp_end <= 0.0) fail("temperatures must be > 0");
    if (temp_end > temp_start) fail("temp_end must be <= temp_start");
    if (steps < 1) fail("steps must be >= 1");
    if (steps < t0_burn_in) fail("steps must reach the burn-in (first clustering) step");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (eval_interval < 1) fail("eval_interval must be >= 1");
    if (devices < 1) fail("devices must be >= 1");
    if (placement == PlacementPolicy::GroupLocal &&
        groups % static_cast<std::size_t>(devices) != 0)
        fail("group-local placement needs groups divisible by devices");
    if (activation_bytes < 1) fail("activation_bytes must be >= 1");
    if (offload) {
        if (mem.s_idle < 1) fail("s_idle must be >= 1");
        if (mem.ema_rate <= 0.0 || mem.ema_rate > 1.0) fail("ema_rate must be in (0, 1]");
    }
    if (task_clusters < 1) fail("task_clusters must be >= 1");
    if (task_samples_per_cluster < 1) fail("task_samples_per_cluster must be >= 1");
    if (task_noise < 0.0) fail("task_noise must be >= 0");
}

namespace {

const char* placement_name(PlacementPolicy p) {
    return p == PlacementPolicy::GroupLocal ? "group-local" : "round-robin";
}

PlacementPolicy placement_from_name(const std::string& s) {
    if (s == "group-local") return PlacementPolicy::GroupLocal;
    if (s == "round-robin") return PlacementPolicy::RoundRobin;
    throw std::invalid_argument("config: unknown placement policy '" + s + "'");
}

}  // namespace

std::string config_to_json(const TrainConfig& c) {
    nlohmann::json j;
    j["experts"] = c.experts;
    j["groups"] = c.groups;
    j["d_in"] = c.d_in;
    j["d_out"] = c.d_out;
    j["rank"] = c.rank;
    j["g1"] = c.g1;
    j["k"] = c.k;
    j["t_recluster"] = c.t_recluster;
    j["t0_burn_in"] = c.t0_burn_in;
    j["delta_skip"] = c.delta_skip;
    j["alpha"] = c.alpha;
    j["beta"] = c.beta;
    j["tau"] = c.tau;
    j["cache_m"] = c.cache_m;
    j["cache_eps"] = c.cache_eps;
    if (c.neighbor_cap) j["neighbor_cap"] = *c.neighbor_cap;
    j["gamma"] = c.gamma;
    j["factor_mode"] = c.factor_mode == FactorMode::Svd ? "svd" : "random";
    j["a1"] = c.a1;
    j["a2"] = c.a2;
    j["a3"] = c.a3;
    j["lr"] = c.lr;
    j["weight_decay"] = c.weight_decay;
    j["clip_norm"] = c.clip_norm;
    j["temp_start"] = c.temp_start;
    j["temp_end"] = c.temp_end;
    j["steps"] = c.steps;
    j["batch_size"] = c.batch_size;
    j["eval_interval"] = c.eval_interval;
    j["seed"] = c.seed;
    j["devices"] = c.devices;
    j["placement"] = placement_name(c.placement);
    j["activation_bytes"] = c.activation_bytes;
    j["offload"] = c.offload;
    j["s_idle"] = c.mem.s_idle;
    j["ema_rate"] = c.mem.ema_rate;
    j["lookahead_l"] = c.mem.lookahead_l;
    j["spill_dir"] = c.spill_dir;
    j["use_tanh"] = c.use_tanh;
    j["task_clusters"] = c.task_clusters;
    j["task_samples_per_cluster"] = c.task_samples_per_cluster;
    j["task_eval_per_cluster"] = c.task_eval_per_cluster;
    j["task_noise"] = c.task_noise;
    return j.dump(2);
}

TrainConfig config_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("config: invalid JSON: ") + e.what());
    }
    static const std::set<std::string> known = {
        "experts", "groups", "d_in", "d_out", "rank", "g1", "k", "t_recluster", "t0_burn_in",
        "delta_skip", "alpha", "beta", "tau", "cache_m", "cache_eps", "neighbor_cap", "gamma",
        "factor_mode", "a1", "a2", "a3", "lr", "weight_decay", "clip_norm", "temp_start",
        "temp_end", "steps", "batch_size", "eval_interval", "seed", "devices", "placement",
        "activation_bytes", "offload", "s_idle", "ema_rate", "lookahead_l", "spill_dir",
        "use_tanh", "task_clusters", "task_samples_per_cluster", "task_eval_per_cluster",
        "task_noise"};
    for (const auto& [key, value] : j.items())
        if (!known.count(key)) throw std::invalid_argument("config: unknown key '" + key + "'");

    TrainConfig c;
    try {
        c.experts = j.value("experts", c.experts);
        c.groups = j.value("groups", c.groups);
        c.d_in = j.value("d_in", c.d_in);
        c.d_out = j.value("d_out", c.d_out);
        c.rank = j.value("rank", c.rank);
        c.g1 = j.value("g1", c.g1);
        c.k = j.value("k", c.k);
        c.t_recluster = j.value("t_recluster", c.t_recluster);
        c.t0_burn_in = j.value("t0_burn_in", c.t0_burn_in);
        c.delta_skip = j.value("delta_skip", c.delta_skip);
        c.alpha = j.value("alpha", c.alpha);
        c.beta = j.value("beta", c.beta);
        c.tau = j.value("tau", c.tau);
        c.cache_m = j.value("cache_m", c.cache_m);
        c.cache_eps = j.value("cache_eps", c.cache_eps);
        if (j.contains("neighbor_cap") && !j["neighbor_cap"].is_null())
            c.neighbor_cap = j["neighbor_cap"].get<std::size_t>();
        c.gamma = j.value("gamma", c.gamma);
        if (j.contains("factor_mode")) {
            const std::string m = j["factor_mode"].get<std::string>();
            if (m == "svd")
                c.factor_mode = FactorMode::Svd;
            else if (m == "random")
                c.factor_mode = FactorMode::Random;
            else
                throw std::invalid_argument("config: unknown factor_mode '" + m + "'");
        }
        c.a1 = j.value("a1", c.a1);
        c.a2 = j.value("a2", c.a2);
        c.a3 = j.value("a3", c.a3);
        c.lr = j.value("lr", c.lr);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.clip_norm = j.value("clip_norm", c.clip_norm);
        c.temp_start = j.value("temp_start", c.temp_start);
        c.temp_end = j.value("temp_end", c.temp_end);
        c.steps = j.value("steps", c.steps);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.eval_interval = j.value("eval_interval", c.eval_interval);
        c.seed = j.value("seed", c.seed);
        c.devices = j.value("devices", c.devices);
        if (j.contains("placement"))
            c.placement = placement_from_name(j["placement"].get<std::string>());
        c.activation_bytes = j.value("activation_bytes", c.activation_bytes);
        c.offload = j.value("offload", c.offload);
        c.mem.s_idle = j.value("s_idle", c.mem.s_idle);
        c.mem.ema_rate = j.value("ema_rate", c.mem.ema_rate);
        c.mem.lookahead_l = j.value("lookahead_l", c.mem.lookahead_l);
        c.spill_dir = j.value("spill_dir", c.spill_dir);
        c.use_tanh = j.value("use_tanh", c.use_tanh);
        c.task_clusters = j.value("task_clusters", c.task_clusters);
        c.task_samples_per_cluster = j.value("task_samples_per_cluster", c.task_samples_per_cluster);
        c.task_eval_per_cluster = j.value("task_eval_per_cluster", c.task_eval_per_cluster);
        c.task_noise = j.value("task_noise", c.task_noise);
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("config: bad field type: ") + e.what());
    }
    return c;
}

// --- synthetic task ---------------------------------------------------------

SyntheticTask make_task(std::size_t clusters, std::size_t samples_per_cluster, std::size_t d_in,
                        std::size_t d_out, double noise, std::uint64_t seed,
                        std::size_t eval_per_cluster) {
    if (clusters < 1) throw std::invalid_argument("make_task: clusters must be >= 1");
    if (samples_per_cluster < 1)
        throw std::invalid_argument("make_task: samples_per_cluster must be >= 1");
    if (noise < 0.0) throw std::invalid_argument("make_task: noise must be >= 0");
    if (eval_per_cluster == 0) eval_per_cluster = std::max<std::size_t>(1, samples_per_cluster / 4);

    Rng rng = Rng(seed).derive(0x7461736b);  // "task"
    SyntheticTask task;
    task.cluster_count = clusters;
    task.d_in = d_in;
    task.d_out = d_out;

    std::vector<std::vector<double>> centers(clusters, std::vector<double>(d_in));
    const double map_std = 1.0 / std::sqrt(static_cast<double>(d_in));
    for (std::size_t c = 0; c < clusters; ++c) {
        for (double& v : centers[c]) v = rng.gaussian();
        Matrix m(d_out, d_in);
        for (double& v : m.values()) v = rng.gaussian(0.0, map_std);
        task.cluster_maps.push_back(std::move(m));
    }

    auto emit = [&](std::size_t c, std::vector<std::vector<double>>& xs,
                    std::vector<std::vector<double>>& ys, std::vector<int>& labels) {
        std::vector<double> x = centers[c];
        for (double& v : x) v += noise * rng.gaussian();
        std::vector<double> y = task.cluster_maps[c].matvec(x);
        for (double& v : y) v += noise * rng.gaussian();
        xs.push_back(std::move(x));
        ys.push_back(std::move(y));
        labels.push_back(static_cast<int>(c));
    };

    for (std::size_t c = 0; c < clusters; ++c)
        for (std::size_t s = 0; s < samples_per_cluster; ++s)
            emit(c, task.train_x, task.train_y, task.train_cluster);
    for (std::size_t c = 0; c < clusters; ++c)
        for (std::size_t s = 0; s < eval_per_cluster; ++s)
            emit(c, task.eval_x, task.eval_y, task.eval_cluster);

    // Deterministic shuffle so batches mix clusters.
    Rng shuffle_rng = Rng(seed).derive(0x73687566);  // "shuf"
    for (std::size_t i = task.train_x.size(); i > 1; --i) {
        const std::size_t r = shuffle_rng.uniform_index(i);
        std::swap(task.train_x[i - 1], task.train_x[r]);
        std::swap(task.train_y[i - 1], task.train_y[r]);
        std::swap(task.train_cluster[i - 1], task.train_cluster[r]);
    }
    return task;
}

// --- optimizer primitives ---------------------------------------------------

void adamw_step(std::span<double> params, std::span<const double> grads, AdamState& state,
                double lr, double weight_decay) {
    if (params.size() != grads.size())
        throw std::invalid_argument("adamw_step: param/grad size mismatch");
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    if (state.m.size() != params.size()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
        state.t = 0;
    }
    ++state.t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grads[i];
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grads[i] * grads[i];
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        params[i] -= lr * weight_decay * params[i];
    }
}

double clip_gradients(std::span<const std::span<double>> grads, double max_norm) {
    double acc = 0.0;
    for (const auto& g : grads)
        for (double v : g) acc += v * v;
    const double norm = std::sqrt(acc);
    if (norm > max_norm && norm > 0.0) {
        const double scale = max_norm / norm;
        for (const auto& g : grads)
            for (double& v : g) v *= scale;
    }
    return norm;
}

double temperature_at(std::uint64_t step, std::uint64_t total_steps, double start, double end) {
    if (step > total_steps) throw std::invalid_argument("temperature_at: step > total_steps");
    if (total_steps == 0) return end;
    const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
    return start + (end - start) * frac;
}

// --- forward / backward ------------------------------------------------------

namespace {

struct SelectedExpert {
    int expert = -1;
    std::size_t group_slot = 0;
    double q = 0.0;       // stage-2 prob
    double weight = 0.0;  // p_g * q
    double gate = 0.0;    // renormalized
    std::vector<double> t;  // B^T x
    std::vector<double> o;  // expert output
};

struct SelectedGroup {
    int group = -1;
    double p = 0.0;
    Stage2Result s2;
    std::vector<double> shared;
};

struct TokenCache {
    Stage1Result s1;
    std::vector<SelectedGroup> groups;
    std::vector<SelectedExpert> experts;
    double z = 0.0;  // sum of weights
    std::vector<double> pred;
};

TokenCache hier_forward_cached(const HierModel& model, std::span<const double> x) {
    const GroupedParams& gp = model.params;
    TokenCache c;
    c.s1 = route_stage1(x, model.router);
    for (int g : c.s1.top_groups) {
        SelectedGroup sg;
        sg.group = g;
        sg.p = c.s1.probs[g];
        sg.s2 = route_stage2(x, g, model.router, gp.assignment);
        if (gp.bases[g].empty())
            throw std::runtime_error("hier_forward: group " + std::to_string(g) +
                                     " is offloaded");
        sg.shared = gp.bases[g].matvec(x);
        const std::size_t slot = c.groups.size();
        const auto& members = gp.assignment.groups[g];
        for (int expert : sg.s2.top_experts) {
            SelectedExpert se;
            se.expert = expert;
            se.group_slot = slot;
            const auto it = std::find(members.begin(), members.end(), expert);
            se.q = sg.s2.probs[static_cast<std::size_t>(it - members.begin())];
            se.weight = sg.p * se.q;
            se.o = sg.shared;
            if (!gp.pruned[expert]) {
                const FactorPair& f = gp.residuals[expert];
                se.t = f.b.matvec_transposed(x);
                for (std::size_t i = 0; i < gp.d_out; ++i) {
                    double acc = 0.0;
                    for (std::size_t r = 0; r < f.rank; ++r) acc += f.a(i, r) * se.t[r];
                    se.o[i] += acc;
                }
            }
            c.experts.push_back(std::move(se));
        }
        c.groups.push_back(std::move(sg));
    }
    c.z = 0.0;
    for (const SelectedExpert& se : c.experts) c.z += se.weight;
    c.pred.assign(gp.d_out, 0.0);
    for (SelectedExpert& se : c.experts) {
        se.gate = c.z > 0.0 ? se.weight / c.z : 0.0;
        for (std::size_t i = 0; i < gp.d_out; ++i) c.pred[i] += se.gate * se.o[i];
    }
    if (model.use_tanh)
        for (double& v : c.pred) v = std::tanh(v);
    return c;
}

RoutingDecision cache_to_decision(const TokenCache& c, std::uint64_t token_id) {
    RoutingDecision d;
    d.token_id = token_id;
    for (const SelectedGroup& g : c.groups) d.groups.push_back({g.group, g.p});
    for (const SelectedExpert& e : c.experts) d.experts.push_back({e.expert, e.gate});
    return d;
}

// Accumulates exact gradients for one token given dL/dpred.
void hier_backward_token(const HierModel& model, const TokenCache& c, std::span<const double> x,
                         std::span<const double> dpred, HierGradients& grads) {
    const GroupedParams& gp = model.params;
    const std::size_t d_out = gp.d_out;

    std::vector<double> ds(dpred.begin(), dpred.end());
    if (model.use_tanh)
        for (std::size_t i = 0; i < d_out; ++i) ds[i] *= 1.0 - c.pred[i] * c.pred[i];

    // Gate-weighted output path and renormalization backward.
    std::vector<double> dgate(c.experts.size());
    for (std::size_t e = 0; e < c.experts.size(); ++e)
        dgate[e] = dot(ds, c.experts[e].o);
    double gate_inner = 0.0;
    for (std::size_t e = 0; e < c.experts.size(); ++e)
        gate_inner += c.experts[e].gate * dgate[e];

    std::vector<double> dweight(c.experts.size(), 0.0);
    if (c.z > 0.0)
        for (std::size_t e = 0; e < c.experts.size(); ++e)
            dweight[e] = (dgate[e] - gate_inner) / c.z;

    // Expert parameter path.
    std::vector<std::vector<double>> dshared(c.groups.size(),
                                             std::vector<double>(d_out, 0.0));
    for (const SelectedExpert& se : c.experts) {
        std::vector<double> do_e(d_out);
        for (std::size_t i = 0; i < d_out; ++i) do_e[i] = se.gate * ds[i];
        for (std::size_t i = 0; i < d_out; ++i) dshared[se.group_slot][i] += do_e[i];
        if (gp.pruned[se.expert]) continue;
        const FactorPair& f = gp.residuals[se.expert];
        Matrix& da = grads.a[se.expert];
        Matrix& db = grads.b[se.expert];
        for (std::size_t i = 0; i < d_out; ++i)
            for (std::size_t r = 0; r < f.rank; ++r) da(i, r) += do_e[i] * se.t[r];
        for (std::size_t r = 0; r < f.rank; ++r) {
            double dt = 0.0;
            for (std::size_t i = 0; i < d_out; ++i) dt += f.a(i, r) * do_e[i];
            for (std::size_t jj = 0; jj < gp.d_in; ++jj) db(jj, r) += x[jj] * dt;
        }
    }
    for (std::size_t s = 0; s < c.groups.size(); ++s) {
        Matrix& dbase = grads.bases[c.groups[s].group];
        for (std::size_t i = 0; i < d_out; ++i) {
            const double di = dshared[s][i];
            if (di == 0.0) continue;
            for (std::size_t jj = 0; jj < gp.d_in; ++jj) dbase(i, jj) += di * x[jj];
        }
    }

    // Stage-2 softmax backward per selected group.
    std::vector<double> dp_group(c.groups.size(), 0.0);
    for (std::size_t s = 0; s < c.groups.size(); ++s) {
        const SelectedGroup& sg = c.groups[s];
        const auto& members = gp.assignment.groups[sg.group];
        std::vector<double> dq(members.size(), 0.0);
        for (std::size_t e = 0; e < c.experts.size(); ++e) {
            const SelectedExpert& se = c.experts[e];
            if (se.group_slot != s) continue;
            const auto it = std::find(members.begin(), members.end(), se.expert);
            dq[static_cast<std::size_t>(it - members.begin())] += dweight[e] * sg.p;
            dp_group[s] += dweight[e] * se.q;
        }
        double inner = 0.0;
        for (std::size_t m = 0; m < members.size(); ++m) inner += sg.s2.probs[m] * dq[m];
        for (std::size_t m = 0; m < members.size(); ++m) {
            const double dl = sg.s2.probs[m] * (dq[m] - inner);
            if (dl == 0.0) continue;
            auto& dv = grads.expert_vectors[members[m]];
            for (std::size_t jj = 0; jj < gp.d_in; ++jj) dv[jj] += dl * x[jj];
        }
    }

    // Stage-1 softmax backward over all groups (logits scaled 1/temperature).
    std::vector<double> dp(c.s1.probs.size(), 0.0);
    for (std::size_t s = 0; s < c.groups.size(); ++s) dp[c.groups[s].group] = dp_group[s];
    double inner1 = 0.0;
    for (std::size_t g = 0; g < dp.size(); ++g) inner1 += c.s1.probs[g] * dp[g];
    for (std::size_t g = 0; g < dp.size(); ++g) {
        const double dz = c.s1.probs[g] * (dp[g] - inner1) / model.router.temperature;
        if (dz == 0.0) continue;
        auto& du = grads.prototypes[g];
        for (std::size_t jj = 0; jj < gp.d_in; ++jj) du[jj] += dz * x[jj];
    }
}

struct FlatCache {
    std::vector<double> probs;
    std::vector<int> top;
    std::vector<double> gates;
    std::vector<std::vector<double>> outputs;
    double z = 0.0;
    std::vector<double> pred;
};

FlatCache flat_forward_cached(const FlatModel& model, std::span<const double> x) {
    FlatCache c;
    const Stage2Result r = flat_route(x, model.expert_vectors, model.k);
    c.probs = r.probs;
    c.top = r.top_experts;
    for (int e : c.top) c.z += c.probs[e];
    const std::size_t d_out = model.experts[0].rows();
    c.pred.assign(d_out, 0.0);
    for (int e : c.top) {
        c.gates.push_back(c.z > 0.0 ? c.probs[e] / c.z : 0.0);
        c.outputs.push_back(model.experts[e].matvec(x));
    }
    for (std::size_t i = 0; i < c.top.size(); ++i)
        for (std::size_t d = 0; d < d_out; ++d) c.pred[d] += c.gates[i] * c.outputs[i][d];
    if (model.use_tanh)
        for (double& v : c.pred) v = std::tanh(v);
    return c;
}

void flat_backward_token(const FlatModel& model, const FlatCache& c, std::span<const double> x,
                         std::span<const double> dpred, FlatGradients& grads) {
    const std::size_t d_out = model.experts[0].rows();
    const std::size_t d_in = x.size();
    std::vector<double> ds(dpred.begin(), dpred.end());
    if (model.use_tanh)
        for (std::size_t i = 0; i < d_out; ++i) ds[i] *= 1.0 - c.pred[i] * c.pred[i];

    std::vector<double> dgate(c.top.size());
    for (std::size_t e = 0; e < c.top.size(); ++e) dgate[e] = dot(ds, c.outputs[e]);
    double gate_inner = 0.0;
    for (std::size_t e = 0; e < c.top.size(); ++e) gate_inner += c.gates[e] * dgate[e];

    std::vector<double> dp(model.expert_vectors.size(), 0.0);
    for (std::size_t e = 0; e < c.top.size(); ++e) {
        const double dw = c.z > 0.0 ? (dgate[e] - gate_inner) / c.z : 0.0;
        dp[c.top[e]] = dw;
        Matrix& dW = grads.experts[c.top[e]];
        for (std::size_t i = 0; i < d_out; ++i) {
            const double di = c.gates[e] * ds[i];
            if (di == 0.0) continue;
            for (std::size_t jj = 0; jj < d_in; ++jj) dW(i, jj) += di * x[jj];
        }
    }
    double inner = 0.0;
    for (std::size_t i = 0; i < dp.size(); ++i) inner += c.probs[i] * dp[i];
    for (std::size_t i = 0; i < dp.size(); ++i) {
        const double dl = c.probs[i] * (dp[i] - inner);
        if (dl == 0.0) continue;
        auto& dv = grads.expert_vectors[i];
        for (std::size_t jj = 0; jj < d_in; ++jj) dv[jj] += dl * x[jj];
    }
}

double squared_error(std::span<const double> pred, std::span<const double> y) {
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - y[i];
        acc += d * d;
    }
    return acc;
}

}  // namespace

HierForwardResult hier_forward(const HierModel& model, std::span<const double> x,
                               std::uint64_t token_id) {
    const TokenCache c = hier_forward_cached(model, x);
    return {c.pred, cache_to_decision(c, token_id)};
}

HierForwardResult flat_forward(const FlatModel& model, std::span<const double> x,
                               std::uint64_t token_id) {
    const FlatCache c = flat_forward_cached(model, x);
    RoutingDecision d;
    d.token_id = token_id;
    for (std::size_t i = 0; i < c.top.size(); ++i) d.experts.push_back({c.top[i], c.gates[i]});
    return {c.pred, std::move(d)};
}

HierGradients make_hier_gradients(const HierModel& model) {
    const GroupedParams& gp = model.params;
    HierGradients g;
    g.bases.assign(gp.group_count(), Matrix(gp.d_out, gp.d_in));
    g.a.assign(gp.expert_count(), Matrix(gp.d_out, gp.rank));
    g.b.assign(gp.expert_count(), Matrix(gp.d_in, gp.rank));
    g.prototypes.assign(model.router.group_count(), std::vector<double>(gp.d_in, 0.0));
    g.expert_vectors.assign(model.router.expert_count(), std::vector<double>(gp.d_in, 0.0));
    return g;
}

FlatGradients make_flat_gradients(const FlatModel& model) {
    FlatGradients g;
    g.experts.assign(model.experts.size(),
                     Matrix(model.experts[0].rows(), model.experts[0].cols()));
    g.expert_vectors.assign(model.expert_vectors.size(),
                            std::vector<double>(model.expert_vectors[0].size(), 0.0));
    return g;
}

double hier_forward_backward(const HierModel& model,
                             std::span<const std::vector<double>> xs,
                             std::span<const std::vector<double>> ys, HierGradients& grads,
                             std::vector<RoutingDecision>* decisions) {
    if (xs.size() != ys.size() || xs.empty())
        throw std::invalid_argument("hier_forward_backward: bad batch");
    const double inv = 1.0 / static_cast<double>(xs.size());
    double loss = 0.0;
    for (std::size_t t = 0; t < xs.size(); ++t) {
        const TokenCache c = hier_forward_cached(model, xs[t]);
        loss += squared_error(c.pred, ys[t]);
        std::vector<double> dpred(c.pred.size());
        for (std::size_t i = 0; i < dpred.size(); ++i)
            dpred[i] = 2.0 * (c.pred[i] - ys[t][i]) * inv;
        hier_backward_token(model, c, xs[t], dpred, grads);
        if (decisions) decisions->push_back(cache_to_decision(c, t));
    }
    return loss * inv;
}

double flat_forward_backward(const FlatModel& model,
                             std::span<const std::vector<double>> xs,
                             std::span<const std::vector<double>> ys, FlatGradients& grads,
                             std::vector<RoutingDecision>* decisions) {
    if (xs.size() != ys.size() || xs.empty())
        throw std::invalid_argument("flat_forward_backward: bad batch");
    const double inv = 1.0 / static_cast<double>(xs.size());
    double loss = 0.0;
    for (std::size_t t = 0; t < xs.size(); ++t) {
        const FlatCache c = flat_forward_cached(model, xs[t]);
        loss += squared_error(c.pred, ys[t]);
        std::vector<double> dpred(c.pred.size());
        for (std::size_t i = 0; i < dpred.size(); ++i)
            dpred[i] = 2.0 * (c.pred[i] - ys[t][i]) * inv;
        flat_backward_token(model, c, xs[t], dpred, grads);
        if (decisions) {
            RoutingDecision d;
            d.token_id = t;
            for (std::size_t i = 0; i < c.top.size(); ++i)
                d.experts.push_back({c.top[i], c.gates[i]});
            decisions->push_back(std::move(d));
        }
    }
    return loss * inv;
}

double hier_batch_loss(const HierModel& model, std::span<const std::vector<double>> xs,
                       std::span<const std::vector<double>> ys) {
    double loss = 0.0;
    for (std::size_t t = 0; t < xs.size(); ++t)
        loss += squared_error(hier_forward_cached(model, xs[t]).pred, ys[t]);
    return loss / static_cast<double>(xs.size());
}

double flat_batch_loss(const FlatModel& model, std::span<const std::vector<double>> xs,
                       std::span<const std::vector<double>> ys) {
    double loss = 0.0;
    for (std::size_t t = 0; t < xs.size(); ++t)
        loss += squared_error(flat_forward_cached(model, xs[t]).pred, ys[t]);
    return loss / static_cast<double>(xs.size());
}

std::vector<std::span<double>> hier_param_tensors(HierModel& model) {
    std::vector<std::span<double>> out;
    for (Matrix& m : model.params.bases) out.push_back(m.values());
    for (FactorPair& f : model.params.residuals) out.push_back(f.a.values());
    for (FactorPair& f : model.params.residuals) out.push_back(f.b.values());
    for (auto& u : model.router.prototypes) out.push_back(u);
    for (auto& v : model.router.expert_vectors) out.push_back(v);
    return out;
}

std::vector<std::span<double>> hier_grad_tensors(HierGradients& grads) {
    std::vector<std::span<double>> out;
    for (Matrix& m : grads.bases) out.push_back(m.values());
    for (Matrix& m : grads.a) out.push_back(m.values());
    for (Matrix& m : grads.b) out.push_back(m.values());
    for (auto& u : grads.prototypes) out.push_back(u);
    for (auto& v : grads.expert_vectors) out.push_back(v);
    return out;
}

std::vector<std::span<double>> flat_param_tensors(FlatModel& model) {
    std::vector<std::span<double>> out;
    for (Matrix& m : model.experts) out.push_back(m.values());
    for (auto& v : model.expert_vectors) out.push_back(v);
    return out;
}

std::vector<std::span<double>> flat_grad_tensors(FlatGradients& grads) {
    std::vector<std::span<double>> out;
    for (Matrix& m : grads.experts) out.push_back(m.values());
    for (auto& v : grads.expert_vectors) out.push_back(v);
    return out;
}

// --- objective ----------------------------------------------------------------

ObjectiveReport combine_objective(double l_task, double i_load, double r_red, double c_comm,
                                  double a1, double a2, double a3) {
    ObjectiveReport r;
    r.l_task = l_task;
    r.i_load = i_load;
    r.r_red = r_red;
    r.c_comm = c_comm;
    r.weighted_total = l_task + a1 * i_load + a2 * r_red + a3 * c_comm;
    return r;
}

// Burn-in phase objective: the model is still the uncompressed flat MoE, so
// the storage and communication terms sit at their normalization anchors.
ObjectiveReport evaluate_flat_objective(const FlatModel& model, const SyntheticTask& task,
                                        const TrainConfig& cfg) {
    std::vector<RoutingDecision> decisions;
    double loss = 0.0;
    for (std::size_t t = 0; t < task.eval_x.size(); ++t) {
        const HierForwardResult r = flat_forward(model, task.eval_x[t], t);
        loss += [&] {
            double acc = 0.0;
            for (std::size_t i = 0; i < r.prediction.size(); ++i) {
                const double d = r.prediction[i] - task.eval_y[t][i];
                acc += d * d;
            }
            return acc;
        }();
        decisions.push_back(r.decision);
    }
    loss /= static_cast<double>(task.eval_x.size());
    const LoadStats ls = load_stats(decisions, cfg.experts);
    return combine_objective(loss, ls.cov, 1.0, 1.0, cfg.a1, cfg.a2, cfg.a3);
}

ObjectiveReport evaluate_objective(const HierModel& model, const SyntheticTask& task,
                                   const TrainConfig& cfg) {
    std::vector<RoutingDecision> hier_decisions, flat_decisions;
    double loss = 0.0;
    for (std::size_t t = 0; t < task.eval_x.size(); ++t) {
        const HierForwardResult r = hier_forward(model, task.eval_x[t], t);
        loss += squared_error(r.prediction, task.eval_y[t]);
        hier_decisions.push_back(r.decision);
        const Stage2Result fr = flat_route(task.eval_x[t], model.router.expert_vectors,
                                           model.router.k);
        RoutingDecision fd;
        fd.token_id = t;
        for (int e : fr.top_experts) fd.experts.push_back({e, fr.probs[e]});
        flat_decisions.push_back(std::move(fd));
    }
    loss /= static_cast<double>(task.eval_x.size());

    const LoadStats ls = load_stats(hier_decisions, cfg.experts);
    const double r_red =
        static_cast<double>(model.params.stored_element_count()) /
        (static_cast<double>(cfg.experts) * cfg.d_in * cfg.d_out);

    const Placement placement =
        place_experts(model.params.assignment, cfg.devices, cfg.placement);
    const std::vector<int> sources = round_robin_sources(task.eval_x.size(), cfg.devices);
    const CommReport hier_comm =
        simulate_dispatch(hier_decisions, placement, sources, cfg.bytes_per_token());
    const CommReport flat_comm =
        simulate_dispatch(flat_decisions, placement, sources, cfg.bytes_per_token());
    const double c_comm =
        flat_comm.total_bytes == 0
            ? 0.0
            : static_cast<double>(hier_comm.total_bytes) / flat_comm.total_bytes;

    return combine_objective(loss, ls.cov, r_red, c_comm, cfg.a1, cfg.a2, cfg.a3);
}

std::string eval_record_to_json(const EvalRecord& r) {
    nlohmann::json j;
    j["step"] = r.step;
    j["temperature"] = r.temperature;
    j["l_task"] = r.objective.l_task;
    j["i_load"] = r.objective.i_load;
    j["r_red"] = r.objective.r_red;
    j["c_comm"] = r.objective.c_comm;
    j["weighted_total"] = r.objective.weighted_total;
    return j.dump();
}

// --- training loops -----------------------------------------------------------

namespace {

GroupAssignment contiguous_assignment(std::size_t e, std::size_t g) {
    const std::size_t k = e / g;
    GroupAssignment a;
    a.group_of.resize(e);
    a.groups.assign(g, {});
    a.medoids.resize(g);
    for (std::size_t i = 0; i < e; ++i) {
        a.group_of[i] = static_cast<int>(i / k);
        a.groups[i / k].push_back(static_cast<int>(i));
    }
    for (std::size_t s = 0; s < g; ++s) a.medoids[s] = a.groups[s][0];
    a.mean_intra_similarity = 0.0;
    return a;
}

std::vector<std::vector<double>> gaussian_vectors(std::size_t n, std::size_t d, double stddev,
                                                  Rng& rng) {
    std::vector<std::vector<double>> out(n, std::vector<double>(d));
    for (auto& v : out)
        for (double& x : v) x = rng.gaussian(0.0, stddev);
    return out;
}

class BatchStream {
public:
    BatchStream(std::size_t n, std::size_t batch, std::uint64_t seed)
        : order_(n), batch_(batch) {
        Rng rng = Rng(seed).derive(0x62617463);
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        for (std::size_t i = n; i > 1; --i)
            std::swap(order_[i - 1], order_[rng.uniform_index(i)]);
    }

    std::vector<std::size_t> next() {
        std::vector<std::size_t> idx(batch_);
        for (std::size_t i = 0; i < batch_; ++i) {
            idx[i] = order_[cursor_];
            cursor_ = (cursor_ + 1) % order_.size();
        }
        return idx;
    }

private:
    std::vector<std::size_t> order_;
    std::size_t batch_;
    std::size_t cursor_ = 0;
};

}  // namespace

TrainResult train(const TrainConfig& cfg, const SyntheticTask& task) {
    cfg.validate();
    if (task.d_in != cfg.d_in || task.d_out != cfg.d_out)
        throw std::invalid_argument("train: task dims do not match config");
    if (task.train_x.empty() || task.eval_x.empty())
        throw std::invalid_argument("train: task has empty splits");

    const std::size_t E = cfg.experts;
    const std::size_t G = cfg.groups;
    const std::uint64_t T = cfg.effective_recluster_interval();
    Rng root(cfg.seed);
    const double vec_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_in));

    TrainResult res;
    res.bank = init_bank(E, cfg.d_in, cfg.d_out, cfg.seed, cfg.beta);

    // Burn-in phase: the uncompressed experts train under flat top-k routing
    // while activation centroids stabilize. The first clustering compresses
    // the model and switches to the two-stage router.
    FlatModel burn;
    burn.experts = res.bank.experts;
    burn.k = cfg.k;
    burn.use_tanh = cfg.use_tanh;
    Rng evec_rng = root.derive(0x65766563);
    burn.expert_vectors = gaussian_vectors(E, cfg.d_in, vec_std, evec_rng);

    HierModel& model = res.model;
    model.use_tanh = cfg.use_tanh;
    model.router.g1 = cfg.g1;
    model.router.k = cfg.k;
    Rng proto_rng = root.derive(0x70726f74);
    model.router.prototypes = gaussian_vectors(G, cfg.d_in, vec_std, proto_rng);

    bool compressed = false;
    std::vector<AdamState> opt_flat(2 * E);
    std::vector<AdamState> opt;  // hierarchical registry, filled at the switch
    const std::size_t router_tensor_start = G + 2 * E;

    BatchStream batches(task.train_x.size(), cfg.batch_size, cfg.seed);

    std::optional<FileGroupStore> store;
    auto spill_dir = [&]() {
        return cfg.spill_dir.empty()
                   ? std::filesystem::temp_directory_path() /
                         ("moeforge_spill_" + std::to_string(cfg.seed))
                   : std::filesystem::path(cfg.spill_dir);
    };

    auto restore_all_in_band = [&]() {
        if (!store) return;
        for (std::size_t g = 0; g < G; ++g) {
            if (res.ledger.resident[g]) continue;
            store->restore(g);
            res.ledger.resident[g] = 1;
            res.ledger.prefetched[g] = 0;
            res.ledger.bytes_restored += res.ledger.bytes_of_group[g];
        }
        res.ledger.peak_resident_bytes =
            std::max(res.ledger.peak_resident_bytes, res.ledger.resident_bytes());
    };

    // Evaluation reads parameters out of band: offloaded groups are restored
    // for the measurement and spilled again, without touching the ledger.
    auto out_of_band = [&](auto&& fn) {
        std::vector<std::size_t> missing;
        if (store)
            for (std::size_t g = 0; g < G; ++g)
                if (!res.ledger.resident[g]) missing.push_back(g);
        for (std::size_t g : missing) store->restore(g);
        fn();
        for (std::size_t g : missing) store->offload(g);
    };

    // Frozen-routing drift audit: per-eval-token selections and gates under
    // the current model, replayed against the refactored parameters.
    struct FrozenToken {
        std::vector<std::pair<int, double>> gates;  // (expert, gate)
        std::vector<double> pred;
    };
    auto frozen_snapshot = [&]() {
        std::vector<FrozenToken> out;
        out.reserve(task.eval_x.size());
        for (std::size_t t = 0; t < task.eval_x.size(); ++t) {
            const HierForwardResult r = compressed
                                            ? hier_forward(model, task.eval_x[t], t)
                                            : flat_forward(burn, task.eval_x[t], t);
            FrozenToken ft;
            ft.pred = r.prediction;
            for (const ExpertChoice& c : r.decision.experts)
                ft.gates.push_back({c.expert, c.prob});
            out.push_back(std::move(ft));
        }
        return out;
    };

    std::optional<SimilarityMatrix> prev_sim;
    GroupAssignment current_assignment;
    bool freeze_next = false;

    for (std::uint64_t s = 1; s <= cfg.steps; ++s) {
        model.router.temperature =
            temperature_at(s - 1, cfg.steps, cfg.temp_start, cfg.temp_end);

        const std::vector<std::size_t> idx = batches.next();
        std::vector<std::vector<double>> xs, ys;
        xs.reserve(idx.size());
        ys.reserve(idx.size());
        for (std::size_t i : idx) {
            xs.push_back(task.train_x[i]);
            ys.push_back(task.train_y[i]);
        }

        std::vector<RoutingDecision> decisions;
        HierGradients hgrads;
        FlatGradients fgrads;
        if (compressed) {
            if (store) {
                // Routing needs only router parameters; the tick restores any
                // offloaded group the batch is about to use.
                std::set<int> activated;
                for (const auto& x : xs)
                    for (int g : route_stage1(x, model.router).top_groups) activated.insert(g);
                const std::vector<int> act(activated.begin(), activated.end());
                tick(res.ledger, act, cfg.mem, &*store);
            }
            hgrads = make_hier_gradients(model);
            hier_forward_backward(model, xs, ys, hgrads, &decisions);
        } else {
            fgrads = make_flat_gradients(burn);
            flat_forward_backward(burn, xs, ys, fgrads, &decisions);
        }

        // Centroid EMA update from this step's assignments.
        std::vector<std::vector<std::vector<double>>> tokens_of(E);
        for (std::size_t t = 0; t < decisions.size(); ++t)
            for (const ExpertChoice& c : decisions[t].experts)
                tokens_of[c.expert].push_back(xs[t]);
        for (std::size_t i = 0; i < E; ++i)
            res.bank.centroids[i] = update_centroid(res.bank.centroids[i], tokens_of[i]);

        const bool frozen = freeze_next;
        freeze_next = false;
        std::vector<std::vector<double>> router_snapshot;
        if (frozen) {
            for (const auto& u : model.router.prototypes) router_snapshot.push_back(u);
            for (const auto& v : model.router.expert_vectors) router_snapshot.push_back(v);
        }

        if (compressed) {
            const std::vector<std::span<double>> gviews = hier_grad_tensors(hgrads);
            clip_gradients(gviews, cfg.clip_norm);
            const std::vector<std::span<double>> pviews = hier_param_tensors(model);
            for (std::size_t i = 0; i < pviews.size(); ++i) {
                const bool is_router = i >= router_tensor_start;
                if (frozen && is_router) continue;
                if (store && !is_router) {
                    // Offloaded groups hold no live tensor; skip them.
                    std::size_t group;
                    if (i < G)
                        group = i;
                    else if (i < G + E)
                        group = static_cast<std::size_t>(model.params.group_of(i - G));
                    else
                        group = static_cast<std::size_t>(model.params.group_of(i - G - E));
                    if (!res.ledger.resident[group]) continue;
                }
                adamw_step(pviews[i], gviews[i], opt[i], cfg.lr, cfg.weight_decay);
            }
        } else {
            const std::vector<std::span<double>> gviews = flat_grad_tensors(fgrads);
            clip_gradients(gviews, cfg.clip_norm);
            const std::vector<std::span<double>> pviews = flat_param_tensors(burn);
            for (std::size_t i = 0; i < pviews.size(); ++i)
                adamw_step(pviews[i], gviews[i], opt_flat[i], cfg.lr, cfg.weight_decay);
        }

        if (frozen) {
            std::vector<std::vector<double>> after;
            for (const auto& u : model.router.prototypes) after.push_back(u);
            for (const auto& v : model.router.expert_vectors) after.push_back(v);
            res.freeze_trace.push_back({s, after == router_snapshot});
        }

        // Periodic (re)cluster attempt; the first one always adopts and
        // switches the model to its compressed, hierarchically routed form.
        if (s >= cfg.t0_burn_in && (s - cfg.t0_burn_in) % T == 0) {
            restore_all_in_band();
            std::vector<Matrix> weights(E);
            for (std::size_t i = 0; i < E; ++i)
                weights[i] = compressed ? model.params.reconstruct_expert(i) : burn.experts[i];

            SimilarityConfig scfg;
            scfg.alpha = cfg.alpha;
            scfg.tau = cfg.tau;
            scfg.cache_lifetime_m = cfg.cache_m;
            scfg.stale_eps = cfg.cache_eps;
            scfg.neighbor_cap = cfg.neighbor_cap;
            SimilarityMatrix sim = build_similarity(weights, res.bank.centroids,
                                                    prev_sim ? &*prev_sim : nullptr, s, scfg);

            const GroupAssignment candidate = cluster_experts(sim, G, cfg.seed + s);

            ReclusterEvent ev;
            ev.step = s;
            ev.new_mean_sim = candidate.mean_intra_similarity;
            bool adopt;
            if (!compressed) {
                adopt = true;  // nothing to compare against yet
                ev.old_mean_sim = 0.0;
            } else {
                ev.old_mean_sim = mean_intra_similarity(sim, current_assignment.groups);
                adopt = should_recluster(ev.old_mean_sim, ev.new_mean_sim, cfg.delta_skip);
            }

            if (adopt) {
                ev.adopted = true;
                ++res.adoptions;

                // Function-preserving refactor: new bases are group means of
                // the current effective weights, residuals restart from the
                // truncated SVD of what is left.
                GroupedParams next;
                next.assignment = candidate;
                next.d_in = cfg.d_in;
                next.d_out = cfg.d_out;
                next.rank = cfg.rank;
                next.bases.resize(G);
                next.residuals.resize(E);
                next.pruned.assign(E, 0);
                for (std::size_t g = 0; g < G; ++g) {
                    std::vector<Matrix> members;
                    for (int x : candidate.groups[g]) members.push_back(weights[x]);
                    next.bases[g] = compute_base(members);
                    for (int x : candidate.groups[g])
                        next.residuals[x] = factor_residual(weights[x], next.bases[g], cfg.rank,
                                                            FactorMode::Svd, cfg.seed + s);
                }
                if (cfg.gamma > 0.0) ev.pruned_count = prune_residuals(next, cfg.gamma);

                std::vector<double> refactor_err(E);
                for (std::size_t i = 0; i < E; ++i) {
                    const Matrix neww =
                        reconstruct(next.bases[candidate.group_of[i]], next.residuals[i]);
                    refactor_err[i] = (neww - weights[i]).frobenius_norm();
                    ev.max_refactor_error = std::max(ev.max_refactor_error, refactor_err[i]);
                }

                const std::vector<FrozenToken> before = frozen_snapshot();
                double loss_before = 0.0, loss_frozen = 0.0, bound = 0.0;
                for (std::size_t t = 0; t < task.eval_x.size(); ++t) {
                    const auto& x = task.eval_x[t];
                    const auto& y = task.eval_y[t];
                    loss_before += squared_error(before[t].pred, y);

                    std::vector<double> pred2(cfg.d_out, 0.0);
                    double eps_max = 0.0;
                    for (const auto& [expert, gate] : before[t].gates) {
                        const Matrix neww = reconstruct(next.bases[candidate.group_of[expert]],
                                                        next.residuals[expert]);
                        const std::vector<double> o2 = neww.matvec(x);
                        for (std::size_t d = 0; d < cfg.d_out; ++d) pred2[d] += gate * o2[d];
                        eps_max = std::max(eps_max, refactor_err[expert]);
                    }
                    if (cfg.use_tanh)
                        for (double& v : pred2) v = std::tanh(v);
                    loss_frozen += squared_error(pred2, y);

                    const double xn = l2_norm(x);
                    const double resid = std::sqrt(squared_error(before[t].pred, y));
                    bound += eps_max * xn * (2.0 * resid + eps_max * xn);
                }
                const double n = static_cast<double>(task.eval_x.size());
                ev.loss_before = loss_before / n;
                ev.loss_after_frozen_routing = loss_frozen / n;
                ev.drift_bound = bound / n;

                if (!compressed) {
                    // Compression begins: bases and residual factors replace
                    // the original expert matrices.
                    res.bank.experts = burn.experts;  // last uncompressed truth
                    model.params = std::move(next);
                    model.router.expert_vectors = std::move(burn.expert_vectors);
                    burn.experts.clear();
                    // Prototypes start from the members' activation centroids.
                    for (std::size_t g = 0; g < G; ++g) {
                        std::vector<double> mean(cfg.d_in, 0.0);
                        for (int x : candidate.groups[g])
                            for (std::size_t d = 0; d < cfg.d_in; ++d)
                                mean[d] += res.bank.centroids[x].mu[d];
                        const double inv =
                            1.0 / static_cast<double>(candidate.groups[g].size());
                        for (std::size_t d = 0; d < cfg.d_in; ++d)
                            model.router.prototypes[g][d] = mean[d] * inv;
                    }
                    // Expert-vector optimizer moments carry across the phase
                    // switch; everything re-parameterized starts fresh.
                    opt.assign(router_tensor_start + G + E, AdamState{});
                    for (std::size_t i = 0; i < E; ++i)
                        opt[router_tensor_start + G + i] = std::move(opt_flat[E + i]);
                    compressed = true;

                    std::vector<std::uint64_t> group_bytes(G);
                    for (std::size_t g = 0; g < G; ++g)
                        group_bytes[g] = deployed_group_bytes(model.params, g);
                    res.ledger = make_ledger(std::move(group_bytes));
                    if (cfg.offload) store.emplace(model.params, spill_dir());
                } else {
                    model.params = std::move(next);
                    // Prototype warm start: convex mix of the old prototype
                    // and the new members' centroid mean.
                    for (std::size_t g = 0; g < G; ++g) {
                        std::vector<double> mean(cfg.d_in, 0.0);
                        for (int x : candidate.groups[g])
                            for (std::size_t d = 0; d < cfg.d_in; ++d)
                                mean[d] += res.bank.centroids[x].mu[d];
                        const double inv =
                            1.0 / static_cast<double>(candidate.groups[g].size());
                        for (std::size_t d = 0; d < cfg.d_in; ++d)
                            model.router.prototypes[g][d] =
                                0.5 * model.router.prototypes[g][d] + 0.5 * mean[d] * inv;
                    }
                    // Refactored tensors restart the optimizer; router moments
                    // survive (the next step is frozen anyway).
                    for (std::size_t i = 0; i < router_tensor_start; ++i) opt[i] = AdamState{};
                    for (std::size_t g = 0; g < G; ++g)
                        res.ledger.bytes_of_group[g] = deployed_group_bytes(model.params, g);
                    res.ledger.peak_resident_bytes =
                        std::max(res.ledger.peak_resident_bytes, res.ledger.resident_bytes());
                }
                current_assignment = candidate;
                freeze_next = true;
                ev.loss_after_free = hier_batch_loss(model, task.eval_x, task.eval_y);
            } else {
                ++res.skips;
            }
            prev_sim = std::move(sim);
            res.recluster_trace.push_back(ev);
        }

        if (s % cfg.eval_interval == 0 || s == cfg.steps) {
            EvalRecord rec;
            rec.step = s;
            rec.temperature = model.router.temperature;
            if (compressed)
                out_of_band([&] { rec.objective = evaluate_objective(model, task, cfg); });
            else
                rec.objective = evaluate_flat_objective(burn, task, cfg);
            res.evals.push_back(rec);
        }
    }

    restore_all_in_band();
    if (prev_sim) res.last_similarity = std::move(*prev_sim);
    res.final_eval_loss = res.evals.back().objective.l_task;
    res.stored_expert_elements = model.params.stored_element_count();
    res.uncompressed_expert_elements = E * cfg.d_in * cfg.d_out;
    return res;
}

FlatTrainResult train_flat_baseline(const TrainConfig& cfg, const SyntheticTask& task) {
    cfg.validate();
    if (task.d_in != cfg.d_in || task.d_out != cfg.d_out)
        throw std::invalid_argument("train_flat_baseline: task dims do not match config");

    const std::size_t E = cfg.experts;
    Rng root(cfg.seed);

    FlatTrainResult res;
    const ExpertBank bank = init_bank(E, cfg.d_in, cfg.d_out, cfg.seed, cfg.beta);
    res.model.experts = bank.experts;
    Rng evec_rng = root.derive(0x65766563);
    res.model.expert_vectors =
        gaussian_vectors(E, cfg.d_in, 1.0 / std::sqrt(static_cast<double>(cfg.d_in)), evec_rng);
    res.model.k = cfg.k;
    res.model.use_tanh = cfg.use_tanh;

    std::vector<AdamState> opt(flat_param_tensors(res.model).size());
    BatchStream batches(task.train_x.size(), cfg.batch_size, cfg.seed);

    for (std::uint64_t s = 1; s <= cfg.steps; ++s) {
        const std::vector<std::size_t> idx = batches.next();
        std::vector<std::vector<double>> xs, ys;
        for (std::size_t i : idx) {
            xs.push_back(task.train_x[i]);
            ys.push_back(task.train_y[i]);
        }
        FlatGradients grads = make_flat_gradients(res.model);
        flat_forward_backward(res.model, xs, ys, grads, nullptr);
        const std::vector<std::span<double>> gviews = flat_grad_tensors(grads);
        clip_gradients(gviews, cfg.clip_norm);
        const std::vector<std::span<double>> pviews = flat_param_tensors(res.model);
        for (std::size_t i = 0; i < pviews.size(); ++i)
            adamw_step(pviews[i], gviews[i], opt[i], cfg.lr, cfg.weight_decay);

        if (s % cfg.eval_interval == 0 || s == cfg.steps) {
            std::vector<RoutingDecision> decisions;
            double loss = 0.0;
            for (std::size_t t = 0; t < task.eval_x.size(); ++t) {
                const HierForwardResult r = flat_forward(res.model, task.eval_x[t], t);
                loss += squared_error(r.prediction, task.eval_y[t]);
                decisions.push_back(r.decision);
            }
            loss /= static_cast<double>(task.eval_x.size());
            const LoadStats ls = load_stats(decisions, E);
            EvalRecord rec;
            rec.step = s;
            rec.temperature = 1.0;
            rec.objective = combine_objective(loss, ls.cov, 1.0, 1.0, cfg.a1, cfg.a2, cfg.a3);
            res.evals.push_back(rec);
        }
    }
    res.final_eval_loss = res.evals.back().objective.l_task;
    res.stored_expert_elements = E * cfg.d_in * cfg.d_out;
    return res;
}

}  // namespace moeforge
