// moeforge CLI: reproducible clustering / compression / routing experiments
// with JSON and CSV reports.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "moeforge/clustering.hpp"
#include "moeforge/comm_sim.hpp"
#include "moeforge/compression.hpp"
#include "moeforge/expert_bank.hpp"
#include "moeforge/memory_manager.hpp"
#include "moeforge/numerics.hpp"
#include "moeforge/routing.hpp"
#include "moeforge/synthetic_routing.hpp"
#include "moeforge/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace moeforge;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

std::optional<std::uint64_t> env_seed_override() {
    const char* v = std::getenv("MOEFORGE_SEED");
    if (v == nullptr || *v == '\0') return std::nullopt;
    return std::stoull(v);
}

std::string read_file(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw std::invalid_argument("cannot open " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os << text;
    if (!text.empty() && text.back() != '\n') os << '\n';
}

// "8x4" -> (8, 4)
std::pair<std::size_t, std::size_t> parse_pair(const std::string& text, const char* what) {
    const auto x = text.find('x');
    if (x == std::string::npos)
        throw std::invalid_argument(std::string(what) + " must look like '8x4'");
    return {std::stoull(text.substr(0, x)), std::stoull(text.substr(x + 1))};
}

PlacementPolicy parse_policy(const std::string& s) {
    if (s == "group-local") return PlacementPolicy::GroupLocal;
    if (s == "round-robin") return PlacementPolicy::RoundRobin;
    throw std::invalid_argument("unknown placement policy '" + s + "'");
}

struct BankSource {
    std::string bank_path;
    std::string planted;  // "GxK"
    std::size_t d_in = 16, d_out = 16;
    double noise = 0.05;  // relative to the anchor entry RMS
    std::uint64_t seed = 42;

    // Returns the bank plus ground-truth labels when planted.
    std::pair<ExpertBank, std::optional<std::vector<int>>> load() const {
        if (!bank_path.empty() && !planted.empty())
            throw std::invalid_argument("--bank and --planted are mutually exclusive");
        if (!bank_path.empty()) return {load_bank(bank_path), std::nullopt};
        if (planted.empty()) throw std::invalid_argument("need --bank or --planted");
        const auto [g, k] = parse_pair(planted, "--planted");
        const double sigma = noise / std::sqrt(static_cast<double>(d_in));
        PlantedBank pb = init_planted_bank(g, k, d_in, d_out, sigma, seed);
        return {std::move(pb.bank), std::move(pb.true_group)};
    }
};

void add_bank_source(CLI::App* cmd, BankSource& src) {
    cmd->add_option("--bank", src.bank_path, "Bank archive (.moeb) to load");
    cmd->add_option("--planted", src.planted,
                    "Generate a planted bank instead, e.g. 8x4 (groups x per-group)");
    cmd->add_option("--dims", [&src](const std::vector<std::string>& vals) {
        const auto [din, dout] = parse_pair(vals.back(), "--dims");
        src.d_in = din;
        src.d_out = dout;
        return true;
    }, "Planted bank dims as d_in x d_out, e.g. 16x16");
    cmd->add_option("--noise", src.noise, "Planted relative noise level")
        ->check(CLI::NonNegativeNumber);
    cmd->add_option("--seed", src.seed, "RNG seed");
}

json assignment_json(const GroupAssignment& a) { return json::parse(assignment_to_json(a)); }

// --- train -------------------------------------------------------------------

int cmd_train(const std::string& config_path, const std::string& out_dir) {
    TrainConfig cfg = config_from_json(read_file(config_path));
    if (const auto seed = env_seed_override()) cfg.seed = *seed;
    cfg.validate();
    if (cfg.offload && cfg.spill_dir.empty())
        cfg.spill_dir = (fs::path(out_dir) / "spill").string();

    const SyntheticTask task =
        make_task(cfg.task_clusters, cfg.task_samples_per_cluster, cfg.d_in, cfg.d_out,
                  cfg.task_noise, cfg.seed, cfg.task_eval_per_cluster);

    const auto t0 = std::chrono::steady_clock::now();
    TrainResult res = train(cfg, task);
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    fs::create_directories(out_dir);
    write_file(fs::path(out_dir) / "config.json", config_to_json(cfg));

    std::ostringstream objective_lines;
    for (const EvalRecord& r : res.evals) objective_lines << eval_record_to_json(r) << '\n';
    write_file(fs::path(out_dir) / "objective.jsonl", objective_lines.str());

    std::ostringstream recluster_lines;
    for (const ReclusterEvent& ev : res.recluster_trace) {
        json j;
        j["step"] = ev.step;
        j["adopted"] = ev.adopted;
        j["old_mean_sim"] = ev.old_mean_sim;
        j["new_mean_sim"] = ev.new_mean_sim;
        if (ev.adopted) {
            j["loss_before"] = ev.loss_before;
            j["loss_after_frozen_routing"] = ev.loss_after_frozen_routing;
            j["drift_bound"] = ev.drift_bound;
            j["loss_after_free"] = ev.loss_after_free;
            j["max_refactor_error"] = ev.max_refactor_error;
            j["pruned_count"] = ev.pruned_count;
        }
        recluster_lines << j.dump() << '\n';
    }
    write_file(fs::path(out_dir) / "recluster.jsonl", recluster_lines.str());

    save_bank(res.bank, fs::path(out_dir) / "bank.moeb");
    save_grouped(res.model.params, fs::path(out_dir) / "model.moec", BaseEncoding::Fp16,
                 ResidualEncoding::Fp64);

    json report;
    report["config"] = json::parse(config_to_json(cfg));
    report["seed"] = cfg.seed;
    report["final_eval_loss"] = res.final_eval_loss;
    report["stored_expert_elements"] = res.stored_expert_elements;
    report["uncompressed_expert_elements"] = res.uncompressed_expert_elements;
    report["expert_param_ratio"] = static_cast<double>(res.uncompressed_expert_elements) /
                                   static_cast<double>(res.stored_expert_elements);
    report["adoptions"] = res.adoptions;
    report["skips"] = res.skips;
    const std::size_t router_elems =
        cfg.groups * cfg.d_in + cfg.experts * cfg.d_in;
    report["effective_cr_with_router"] = effective_compression_ratio(
        cfg.experts, cfg.groups, cfg.d_in, cfg.d_out, cfg.rank, router_elems);
    report["per_group_cr"] =
        compression_ratio(cfg.experts / cfg.groups, cfg.d_in, cfg.d_out, cfg.rank);
    if (!res.evals.empty()) {
        const ObjectiveReport& obj = res.evals.back().objective;
        report["final"] = {{"l_task", obj.l_task},
                           {"i_load", obj.i_load},
                           {"r_red", obj.r_red},
                           {"c_comm", obj.c_comm},
                           {"weighted_total", obj.weighted_total}};
    }
    report["memory"] = json::parse(ledger_to_json(res.ledger));
    report["wall_clock_seconds"] = wall;
    write_file(fs::path(out_dir) / "run_report.json", report.dump(2));

    std::cout << "train: " << res.evals.size() << " evals, final loss " << res.final_eval_loss
              << ", reports in " << out_dir << "\n";
    return kExitOk;
}

// --- cluster -----------------------------------------------------------------

int cmd_cluster(const BankSource& src, std::size_t groups, double alpha, double tau,
                const std::string& truth_path, std::uint64_t seed, const std::string& out) {
    auto [bank, truth] = src.load();
    SimilarityConfig scfg;
    scfg.alpha = alpha;
    scfg.tau = tau;
    const SimilarityMatrix sim = build_similarity(bank, nullptr, 0, scfg);
    const GroupAssignment a = cluster_experts(sim, groups, seed);

    json out_json = assignment_json(a);
    out_json["alpha"] = alpha;
    out_json["tau"] = tau;
    out_json["seed"] = seed;
    out_json["experts"] = bank.size();
    if (!truth_path.empty()) truth = json::parse(read_file(truth_path)).get<std::vector<int>>();
    if (truth) out_json["ari"] = adjusted_rand_index(a.group_of, *truth);
    write_file(out, out_json.dump(2));
    std::cout << "cluster: mean intra similarity " << a.mean_intra_similarity;
    if (truth) std::cout << ", ari " << out_json["ari"].get<double>();
    std::cout << "\n";
    return kExitOk;
}

// --- compress ----------------------------------------------------------------

int cmd_compress(const BankSource& src, std::size_t groups, std::size_t rank, double alpha,
                 double gamma, const std::string& mode, bool int4, std::uint64_t seed,
                 const std::string& assignment_path, const std::string& out) {
    auto [bank, truth] = src.load();
    (void)truth;
    GroupAssignment a;
    if (!assignment_path.empty()) {
        a = assignment_from_json(read_file(assignment_path));
    } else {
        SimilarityConfig scfg;
        scfg.alpha = alpha;
        const SimilarityMatrix sim = build_similarity(bank, nullptr, 0, scfg);
        a = cluster_experts(sim, groups, seed);
    }
    const FactorMode fmode = mode == "random" ? FactorMode::Random : FactorMode::Svd;
    GroupedParams gp = build_grouped(bank.experts, a, rank, fmode, seed);
    std::size_t pruned = 0;
    if (gamma > 0.0) pruned = prune_residuals(gp, gamma);
    if (int4) quantize_residuals(gp);
    save_grouped(gp, out, BaseEncoding::Fp16,
                 int4 ? ResidualEncoding::Int4 : ResidualEncoding::Fp64);

    double mean_err = 0.0;
    for (std::size_t i = 0; i < bank.size(); ++i)
        mean_err += frobenius_rel_error(bank.experts[i], gp.reconstruct_expert(i));
    mean_err /= static_cast<double>(bank.size());
    std::cout << "compress: CR " << compression_ratio(bank.size() / groups, bank.d_in,
                                                      bank.d_out, rank)
              << ", mean rel reconstruction error " << mean_err << ", pruned " << pruned
              << ", wrote " << out << "\n";
    return kExitOk;
}

// --- sweep-rank ----------------------------------------------------------------

int cmd_sweep_rank(const BankSource& src, std::size_t groups, std::vector<std::size_t> ranks,
                   double alpha, std::uint64_t seed, const std::string& out_csv) {
    auto [bank, truth] = src.load();
    (void)truth;
    if (ranks.empty()) ranks = {4, 8, 16, 32};
    for (std::size_t r : ranks)
        if (r < 1 || r > std::min(bank.d_in, bank.d_out))
            throw std::invalid_argument("rank " + std::to_string(r) + " out of range");

    SimilarityConfig scfg;
    scfg.alpha = alpha;
    const SimilarityMatrix sim = build_similarity(bank, nullptr, 0, scfg);
    const GroupAssignment a = cluster_experts(sim, groups, seed);

    std::ostringstream csv;
    csv << "r,mean_rel_error,cr\n";
    for (std::size_t r : ranks) {
        const GroupedParams gp = build_grouped(bank.experts, a, r, FactorMode::Svd, seed);
        double mean_err = 0.0;
        for (std::size_t i = 0; i < bank.size(); ++i)
            mean_err += frobenius_rel_error(bank.experts[i], gp.reconstruct_expert(i));
        mean_err /= static_cast<double>(bank.size());
        char line[128];
        std::snprintf(line, sizeof(line), "%zu,%.12g,%.12g\n", r, mean_err,
                      compression_ratio(bank.size() / groups, bank.d_in, bank.d_out, r));
        csv << line;
    }
    write_file(out_csv, csv.str());
    std::cout << "sweep-rank: " << ranks.size() << " rows -> " << out_csv << "\n";
    return kExitOk;
}

// --- route-sim -----------------------------------------------------------------

int cmd_route_sim(std::size_t experts, std::size_t groups, std::size_t top_k,
                  std::size_t tokens, double zipf, double noise, std::uint64_t seed,
                  const std::string& out_dir) {
    const ZipfRoutingFixture fx =
        make_zipf_routing_fixture(experts, groups, top_k, tokens, zipf, noise, seed);
    const ZipfRoutingRun run = run_zipf_routing(fx);

    fs::create_directories(out_dir);
    save_decisions(run.flat_decisions, (fs::path(out_dir) / "flat.jsonl").string());
    save_decisions(run.hier_decisions, (fs::path(out_dir) / "hier.jsonl").string());
    write_file(fs::path(out_dir) / "assignment.json", assignment_to_json(fx.assignment));

    json j;
    j["seed"] = seed;
    j["experts"] = experts;
    j["groups"] = groups;
    j["tokens"] = tokens;
    j["zipf_exponent"] = zipf;
    j["token_noise"] = noise;
    j["cov_flat"] = run.flat_load.cov;
    j["cov_hier"] = run.hier_load.cov;
    j["cov_ratio"] = run.hier_load.cov > 0.0 ? run.flat_load.cov / run.hier_load.cov : 0.0;
    j["flat_loads"] = run.flat_load.per_expert_tokens;
    j["hier_loads"] = run.hier_load.per_expert_tokens;
    write_file(fs::path(out_dir) / "loads.json", j.dump(2));
    std::cout << "route-sim: cov flat " << run.flat_load.cov << " vs hier "
              << run.hier_load.cov << ", dumps in " << out_dir << "\n";
    return kExitOk;
}

// --- comm-sim ------------------------------------------------------------------

int cmd_comm_sim(const std::string& flat_path, const std::string& hier_path,
                 const std::string& assignment_path, int devices, const std::string& policy,
                 const std::string& sources_mode, std::uint64_t bytes_per_token,
                 const std::string& out) {
    std::vector<RoutingDecision> flat, hier;
    try {
        flat = load_decisions(flat_path);
        hier = load_decisions(hier_path);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("malformed decision file: ") + e.what());
    }
    const GroupAssignment a = assignment_from_json(read_file(assignment_path));
    const Placement placement = place_experts(a, devices, parse_policy(policy));

    // Both dumps describe the same token stream, so they share source
    // devices: data-parallel round robin, or the device already holding the
    // token's stage-1 group (second-stage exchange accounting).
    std::vector<int> sources;
    if (sources_mode == "round-robin") {
        if (flat.size() != hier.size())
            throw std::invalid_argument("decision files describe different stream lengths");
        sources = round_robin_sources(flat.size(), devices);
    } else {
        sources = group_home_sources(hier, a, placement);
        if (sources.size() != flat.size())
            throw std::invalid_argument("decision files describe different stream lengths");
    }
    const CommReport flat_report = simulate_dispatch(flat, placement, sources, bytes_per_token);
    const CommReport hier_report = simulate_dispatch(hier, placement, sources, bytes_per_token);
    const std::optional<double> reduction = compare_policies(flat_report, hier_report);

    json j;
    j["devices"] = devices;
    j["policy"] = policy;
    j["sources"] = sources_mode;
    j["bytes_per_token"] = bytes_per_token;
    j["flat"] = json::parse(comm_report_to_json(flat_report));
    j["hier"] = json::parse(comm_report_to_json(hier_report));
    j["reduction_fraction"] = reduction ? json(*reduction) : json(nullptr);
    write_file(out, j.dump(2));
    std::cout << "comm-sim: flat " << flat_report.total_bytes << " B, hier "
              << hier_report.total_bytes << " B, reduction "
              << (reduction ? std::to_string(*reduction) : std::string("n/a")) << "\n";
    return kExitOk;
}

// --- mem-sim -------------------------------------------------------------------

int cmd_mem_sim(const std::string& trace_path, std::size_t groups,
                std::vector<std::uint64_t> bytes, std::uint64_t s_idle, double ema,
                std::size_t lookahead, const std::string& out) {
    if (bytes.empty()) bytes.assign(groups, 1 << 20);
    if (bytes.size() == 1) bytes.assign(groups, bytes[0]);
    if (bytes.size() != groups)
        throw std::invalid_argument("--bytes-per-group needs 1 or `groups` values");

    MemoryLedger ledger = make_ledger(bytes);
    MemoryConfig cfg;
    cfg.s_idle = s_idle;
    cfg.ema_rate = ema;
    cfg.lookahead_l = lookahead;

    std::ifstream is(trace_path);
    if (!is) throw std::invalid_argument("cannot open " + trace_path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<int> activated;
        try {
            activated = json::parse(line).get<std::vector<int>>();
        } catch (const json::exception& e) {
            throw std::invalid_argument("trace line " + std::to_string(lineno) + ": " + e.what());
        }
        tick(ledger, activated, cfg);
    }
    write_file(out, ledger_to_json(ledger));
    std::cout << "mem-sim: " << ledger.steps << " steps, peak " << ledger.peak_resident_bytes
              << " B, hit rate " << ledger.hit_rate() << "\n";
    return kExitOk;
}

// --- quantize ------------------------------------------------------------------

int cmd_quantize(const std::string& in, const std::string& out) {
    GroupedParams gp = load_grouped(in);
    std::vector<Matrix> before(gp.expert_count());
    for (std::size_t i = 0; i < gp.expert_count(); ++i) before[i] = gp.reconstruct_expert(i);
    quantize_residuals(gp);
    save_grouped(gp, out, BaseEncoding::Fp16, ResidualEncoding::Int4);
    double worst = 0.0;
    for (std::size_t i = 0; i < gp.expert_count(); ++i) {
        if (before[i].frobenius_norm() == 0.0) continue;
        worst = std::max(worst, frobenius_rel_error(before[i], gp.reconstruct_expert(i)));
    }
    std::cout << "quantize: wrote " << out << ", worst per-expert rel drift " << worst << "\n";
    return kExitOk;
}

// --- report --------------------------------------------------------------------

int cmd_report(const std::string& run_dir, const std::string& out) {
    const fs::path dir(run_dir);
    json report;
    report["config"] = json::parse(read_file(dir / "config.json"));
    report["run_report"] = json::parse(read_file(dir / "run_report.json"));
    json series = json::array();
    std::ifstream is(dir / "objective.jsonl");
    if (!is) throw std::invalid_argument("cannot open " + (dir / "objective.jsonl").string());
    std::string line;
    while (std::getline(is, line))
        if (!line.empty()) series.push_back(json::parse(line));
    report["objective_series"] = series;

    if (out.size() >= 4 && out.substr(out.size() - 4) == ".csv") {
        std::ostringstream csv;
        csv << "step,temperature,l_task,i_load,r_red,c_comm,weighted_total\n";
        for (const json& row : series) {
            char buf[256];
            std::snprintf(buf, sizeof(buf), "%llu,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g\n",
                          static_cast<unsigned long long>(row.at("step").get<std::uint64_t>()),
                          row.at("temperature").get<double>(), row.at("l_task").get<double>(),
                          row.at("i_load").get<double>(), row.at("r_red").get<double>(),
                          row.at("c_comm").get<double>(),
                          row.at("weighted_total").get<double>());
            csv << buf;
        }
        write_file(out, csv.str());
    } else {
        write_file(out, report.dump(2));
    }
    std::cout << "report: " << series.size() << " eval rows -> " << out << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"moeforge: clustered-MoE compression, routing and systems simulation"};
    app.require_subcommand(1);

    // train
    std::string train_config, train_out;
    auto* train_cmd = app.add_subcommand("train", "Run the training protocol from a JSON config");
    train_cmd->add_option("--config", train_config, "Config JSON path")->required();
    train_cmd->add_option("--out", train_out, "Output directory")->required();

    // cluster
    BankSource cluster_src;
    std::size_t cluster_groups = 8;
    double cluster_alpha = 0.7, cluster_tau = 0.1;
    std::string cluster_truth, cluster_out = "assignment.json";
    auto* cluster_cmd = app.add_subcommand("cluster", "Cluster a bank into balanced groups");
    add_bank_source(cluster_cmd, cluster_src);
    cluster_cmd->add_option("--groups", cluster_groups, "Group count")->required();
    cluster_cmd->add_option("--alpha", cluster_alpha, "Similarity fusion weight")
        ->check(CLI::Range(0.0, 1.0));
    cluster_cmd->add_option("--tau", cluster_tau, "Prune threshold");
    cluster_cmd->add_option("--truth", cluster_truth, "Ground-truth labels JSON for ARI");
    cluster_cmd->add_option("--out", cluster_out, "Output JSON path");

    // compress
    BankSource compress_src;
    std::size_t compress_groups = 8, compress_rank = 16;
    double compress_alpha = 0.7, compress_gamma = 0.0;
    std::string compress_mode = "svd", compress_assignment, compress_out = "model.moec";
    bool compress_int4 = false;
    auto* compress_cmd =
        app.add_subcommand("compress", "Build shared bases and low-rank residuals");
    add_bank_source(compress_cmd, compress_src);
    compress_cmd->add_option("--groups", compress_groups, "Group count")->required();
    compress_cmd->add_option("--rank", compress_rank, "Residual rank");
    compress_cmd->add_option("--alpha", compress_alpha, "Similarity fusion weight");
    compress_cmd->add_option("--gamma", compress_gamma, "Residual prune gate threshold");
    compress_cmd->add_option("--mode", compress_mode, "Factor init: svd | random")
        ->check(CLI::IsMember({"svd", "random"}));
    compress_cmd->add_flag("--int4", compress_int4, "Quantize residuals to INT4");
    compress_cmd->add_option("--assignment", compress_assignment,
                             "Use a precomputed assignment JSON");
    compress_cmd->add_option("--out", compress_out, "Output archive path");

    // sweep-rank
    BankSource sweep_src;
    std::size_t sweep_groups = 8;
    double sweep_alpha = 0.7;
    std::vector<std::size_t> sweep_ranks;
    std::string sweep_out = "sweep.csv";
    auto* sweep_cmd = app.add_subcommand("sweep-rank", "Reconstruction error versus rank CSV");
    add_bank_source(sweep_cmd, sweep_src);
    sweep_cmd->add_option("--groups", sweep_groups, "Group count")->required();
    sweep_cmd->add_option("--ranks", sweep_ranks, "Ranks to sweep (default 4 8 16 32)");
    sweep_cmd->add_option("--alpha", sweep_alpha, "Similarity fusion weight");
    sweep_cmd->add_option("--out", sweep_out, "Output CSV path");

    // route-sim
    std::size_t rs_experts = 32, rs_groups = 8, rs_k = 2, rs_tokens = 100000;
    double rs_zipf = 1.2, rs_noise = 0.05;
    std::uint64_t rs_seed = 42;
    std::string rs_out = "route_sim";
    auto* rs_cmd =
        app.add_subcommand("route-sim", "Flat vs hierarchical routing on a Zipf stream");
    rs_cmd->add_option("--experts", rs_experts, "Expert count");
    rs_cmd->add_option("--groups", rs_groups, "Group count");
    rs_cmd->add_option("--k", rs_k, "Top-k experts per token");
    rs_cmd->add_option("--tokens", rs_tokens, "Stream length");
    rs_cmd->add_option("--zipf", rs_zipf, "Zipf exponent");
    rs_cmd->add_option("--noise", rs_noise, "Token noise level");
    rs_cmd->add_option("--seed", rs_seed, "RNG seed");
    rs_cmd->add_option("--out-dir", rs_out, "Output directory for dumps");

    // comm-sim
    std::string cs_flat, cs_hier, cs_assignment, cs_policy = "group-local", cs_out = "comm.json";
    std::string cs_sources = "round-robin";
    int cs_devices = 4;
    std::uint64_t cs_bytes = 512;
    auto* cs_cmd = app.add_subcommand("comm-sim", "All-to-all byte accounting for decision dumps");
    cs_cmd->add_option("--flat", cs_flat, "Flat decisions JSONL")->required();
    cs_cmd->add_option("--hier", cs_hier, "Hierarchical decisions JSONL")->required();
    cs_cmd->add_option("--assignment", cs_assignment, "Group assignment JSON")->required();
    cs_cmd->add_option("--devices", cs_devices, "Device count");
    cs_cmd->add_option("--policy", cs_policy, "Placement: group-local | round-robin")
        ->check(CLI::IsMember({"group-local", "round-robin"}));
    cs_cmd->add_option("--sources", cs_sources,
                       "Token source devices: round-robin | group-home")
        ->check(CLI::IsMember({"round-robin", "group-home"}));
    cs_cmd->add_option("--bytes-per-token", cs_bytes, "Activation payload per token");
    cs_cmd->add_option("--out", cs_out, "Output JSON path");

    // mem-sim
    std::string ms_trace, ms_out = "ledger.json";
    std::size_t ms_groups = 8, ms_lookahead = 2;
    std::vector<std::uint64_t> ms_bytes;
    std::uint64_t ms_sidle = 10;
    double ms_ema = 0.1;
    auto* ms_cmd = app.add_subcommand("mem-sim", "Offload/prefetch ledger over an activation trace");
    ms_cmd->add_option("--trace", ms_trace, "JSONL of per-step activated group id arrays")
        ->required();
    ms_cmd->add_option("--groups", ms_groups, "Group count")->required();
    ms_cmd->add_option("--bytes-per-group", ms_bytes, "Group sizes in bytes (1 value or per group)");
    ms_cmd->add_option("--s-idle", ms_sidle, "Idle steps before offload");
    ms_cmd->add_option("--ema", ms_ema, "Activity predictor EMA rate");
    ms_cmd->add_option("--lookahead", ms_lookahead, "Prefetch window L");
    ms_cmd->add_option("--out", ms_out, "Output JSON path");

    // quantize
    std::string q_in, q_out = "model_int4.moec";
    auto* q_cmd = app.add_subcommand("quantize", "Re-encode a compressed archive with INT4 residuals");
    q_cmd->add_option("--in", q_in, "Input archive")->required();
    q_cmd->add_option("--out", q_out, "Output archive");

    // report
    std::string rpt_run, rpt_out = "report.json";
    auto* rpt_cmd = app.add_subcommand("report", "Aggregate a train run directory");
    rpt_cmd->add_option("--run", rpt_run, "Run directory from `train`")->required();
    rpt_cmd->add_option("--out", rpt_out, "Output path (.json or .csv)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        const auto seed_env = env_seed_override();
        if (seed_env) {
            cluster_src.seed = *seed_env;
            compress_src.seed = *seed_env;
            sweep_src.seed = *seed_env;
            rs_seed = *seed_env;
        }
        if (train_cmd->parsed()) return cmd_train(train_config, train_out);
        if (cluster_cmd->parsed())
            return cmd_cluster(cluster_src, cluster_groups, cluster_alpha, cluster_tau,
                               cluster_truth, cluster_src.seed, cluster_out);
        if (compress_cmd->parsed())
            return cmd_compress(compress_src, compress_groups, compress_rank, compress_alpha,
                                compress_gamma, compress_mode, compress_int4, compress_src.seed,
                                compress_assignment, compress_out);
        if (sweep_cmd->parsed())
            return cmd_sweep_rank(sweep_src, sweep_groups, sweep_ranks, sweep_alpha,
                                  sweep_src.seed, sweep_out);
        if (rs_cmd->parsed())
            return cmd_route_sim(rs_experts, rs_groups, rs_k, rs_tokens, rs_zipf, rs_noise,
                                 rs_seed, rs_out);
        if (cs_cmd->parsed())
            return cmd_comm_sim(cs_flat, cs_hier, cs_assignment, cs_devices, cs_policy,
                                cs_sources, cs_bytes, cs_out);
        if (ms_cmd->parsed())
            return cmd_mem_sim(ms_trace, ms_groups, ms_bytes, ms_sidle, ms_ema, ms_lookahead,
                               ms_out);
        if (q_cmd->parsed()) return cmd_quantize(q_in, q_out);
        if (rpt_cmd->parsed()) return cmd_report(rpt_run, rpt_out);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}
