// trainer.hpp - synthetic-task training loop with manual gradients and the
// burn-in / recluster / freeze / warm-start protocol
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moeforge/comm_sim.hpp"
#include "moeforge/compression.hpp"
#include "moeforge/expert_bank.hpp"
#include "moeforge/memory_manager.hpp"
#include "moeforge/routing.hpp"

namespace moeforge {

struct TrainConfig {
    // model shape
    std::size_t experts = 8;
    std::size_t groups = 4;
    std::size_t d_in = 16;
    std::size_t d_out = 8;
    std::size_t rank = 4;
    std::size_t g1 = 1;
    std::size_t k = 2;

    // protocol
    std::uint64_t t_recluster = 0;  // 0 -> recluster_interval(experts)
    std::uint64_t t0_burn_in = 200;
    double delta_skip = 0.01;

    // similarity / clustering
    double alpha = 0.7;
    double beta = 0.05;
    double tau = 0.1;
    std::size_t cache_m = 50;
    double cache_eps = 0.02;
    std::optional<std::size_t> neighbor_cap;

    // compression
    double gamma = 0.0;  // residual prune gate; 0 disables it
    FactorMode factor_mode = FactorMode::Svd;

    // objective weights
    double a1 = 0.0;
    double a2 = 0.0;
    double a3 = 0.0;

    // optimization
    double lr = 0.01;
    double weight_decay = 0.0;
    double clip_norm = 1.0;
    double temp_start = 1.0;
    double temp_end = 0.7;
    std::uint64_t steps = 400;
    std::size_t batch_size = 32;
    std::uint64_t eval_interval = 50;
    std::uint64_t seed = 42;

    // communication / memory simulation
    int devices = 4;
    PlacementPolicy placement = PlacementPolicy::GroupLocal;
    std::size_t activation_bytes = 2;
    bool offload = false;
    MemoryConfig mem;
    std::string spill_dir;  // offload backing dir; empty -> per-run temp dir

    bool use_tanh = false;

    // synthetic task
    std::size_t task_clusters = 4;
    std::size_t task_samples_per_cluster = 128;
    std::size_t task_eval_per_cluster = 32;
    double task_noise = 0.05;

    std::uint64_t effective_recluster_interval() const;
    std::uint64_t bytes_per_token() const { return d_in * activation_bytes; }
    void validate() const;  // throws std::invalid_argument before step 0
};

std::string config_to_json(const TrainConfig& cfg);
TrainConfig config_from_json(const std::string& text);

struct SyntheticTask {
    std::size_t cluster_count = 0;
    std::size_t d_in = 0;
    std::size_t d_out = 0;
    std::vector<std::vector<double>> train_x, train_y;
    std::vector<std::vector<double>> eval_x, eval_y;
    std::vector<int> train_cluster, eval_cluster;
    std::vector<Matrix> cluster_maps;  // the generating M_c, kept for oracles
};

// Regression targets y = M_c x + eps; `noise` scales both the input spread
// around each cluster center and the target noise, so noise 0 makes the
// oracle loss exactly 0.
SyntheticTask make_task(std::size_t clusters, std::size_t samples_per_cluster, std::size_t d_in,
                        std::size_t d_out, double noise, std::uint64_t seed,
                        std::size_t eval_per_cluster = 0);

// --- optimizer primitives -------------------------------------------------

struct AdamState {
    std::vector<double> m, v;
    std::uint64_t t = 0;
};

// Decoupled-weight-decay Adam (beta1 0.9, beta2 0.999, eps 1e-8).
void adamw_step(std::span<double> params, std::span<const double> grads, AdamState& state,
                double lr, double weight_decay);

// Scales all gradients by max_norm/norm when the global L2 norm exceeds
// max_norm; returns the pre-clip norm.
double clip_gradients(std::span<const std::span<double>> grads, double max_norm);

// Linear decay start -> end over total_steps.
double temperature_at(std::uint64_t step, std::uint64_t total_steps, double start = 1.0,
                      double end = 0.7);

// --- models ----------------------------------------------------------------

struct HierModel {
    GroupedParams params;
    RouterParams router;
    bool use_tanh = false;
};

struct FlatModel {
    std::vector<Matrix> experts;  // E full matrices
    std::vector<std::vector<double>> expert_vectors;
    std::size_t k = 2;
    bool use_tanh = false;
};

struct HierGradients {
    std::vector<Matrix> bases;
    std::vector<Matrix> a, b;
    std::vector<std::vector<double>> prototypes;
    std::vector<std::vector<double>> expert_vectors;
};

struct FlatGradients {
    std::vector<Matrix> experts;
    std::vector<std::vector<double>> expert_vectors;
};

struct HierForwardResult {
    std::vector<double> prediction;
    RoutingDecision decision;
};

// Gated mixture forward; the decision carries renormalized gate weights.
HierForwardResult hier_forward(const HierModel& model, std::span<const double> x,
                               std::uint64_t token_id = 0);
HierForwardResult flat_forward(const FlatModel& model, std::span<const double> x,
                               std::uint64_t token_id = 0);

// Mean over the batch of the squared-error per token (summed over output
// dims); exact analytic gradients through the gated mixture and both
// softmaxes. Unselected experts' factors receive zero gradient.
double hier_forward_backward(const HierModel& model,
                             std::span<const std::vector<double>> xs,
                             std::span<const std::vector<double>> ys, HierGradients& grads,
                             std::vector<RoutingDecision>* decisions = nullptr);
double flat_forward_backward(const FlatModel& model,
                             std::span<const std::vector<double>> xs,
                             std::span<const std::vector<double>> ys, FlatGradients& grads,
                             std::vector<RoutingDecision>* decisions = nullptr);

double hier_batch_loss(const HierModel& model, std::span<const std::vector<double>> xs,
                       std::span<const std::vector<double>> ys);
double flat_batch_loss(const FlatModel& model, std::span<const std::vector<double>> xs,
                       std::span<const std::vector<double>> ys);

// Mutable views over every parameter tensor, in a fixed order (bases, A, B,
// prototypes, expert vectors); shared by the optimizer and the
// finite-difference tests.
std::vector<std::span<double>> hier_param_tensors(HierModel& model);
std::vector<std::span<double>> hier_grad_tensors(HierGradients& grads);
std::vector<std::span<double>> flat_param_tensors(FlatModel& model);
std::vector<std::span<double>> flat_grad_tensors(FlatGradients& grads);

HierGradients make_hier_gradients(const HierModel& model);
FlatGradients make_flat_gradients(const FlatModel& model);

// --- training --------------------------------------------------------------

struct ObjectiveReport {
    double l_task = 0.0;
    double i_load = 0.0;
    double r_red = 0.0;
    double c_comm = 0.0;
    double weighted_total = 0.0;
};

ObjectiveReport combine_objective(double l_task, double i_load, double r_red, double c_comm,
                                  double a1, double a2, double a3);

struct EvalRecord {
    std::uint64_t step = 0;
    double temperature = 1.0;
    ObjectiveReport objective;
};

struct ReclusterEvent {
    std::uint64_t step = 0;
    bool adopted = false;
    double old_mean_sim = 0.0;
    double new_mean_sim = 0.0;
    // Adoption-only drift audit: eval loss with routing decisions frozen
    // across the parameter refactoring, and the analytic bound it must obey.
    double loss_before = 0.0;
    double loss_after_frozen_routing = 0.0;
    double drift_bound = 0.0;
    double loss_after_free = 0.0;
    double max_refactor_error = 0.0;  // max_i |W_new,i - W_old,i|_F
    std::size_t pruned_count = 0;
};

struct FreezeEvent {
    std::uint64_t step = 0;               // optimizer step that was frozen
    bool router_params_unchanged = false; // exact comparison
};

struct TrainResult {
    HierModel model;
    ExpertBank bank;  // holds the live centroids
    SimilarityMatrix last_similarity;
    std::vector<EvalRecord> evals;
    std::vector<ReclusterEvent> recluster_trace;
    std::vector<FreezeEvent> freeze_trace;
    MemoryLedger ledger;
    double final_eval_loss = 0.0;
    std::size_t stored_expert_elements = 0;
    std::size_t uncompressed_expert_elements = 0;
    std::uint64_t adoptions = 0;
    std::uint64_t skips = 0;
};

struct FlatTrainResult {
    FlatModel model;
    std::vector<EvalRecord> evals;
    double final_eval_loss = 0.0;
    std::size_t stored_expert_elements = 0;
};

// Full protocol: per-step centroid EMA, burn-in, periodic recluster attempts
// with the skip rule, SVD warm-started residuals, prototype warm start, a
// one-step router freeze after every adopted recluster, temperature decay,
// and gradient clipping.
TrainResult train(const TrainConfig& cfg, const SyntheticTask& task);

// Reference baseline: uncompressed flat top-k MoE trained with the same
// optimizer, schedule and batch stream.
FlatTrainResult train_flat_baseline(const TrainConfig& cfg, const SyntheticTask& task);

ObjectiveReport evaluate_objective(const HierModel& model, const SyntheticTask& task,
                                   const TrainConfig& cfg);

std::string eval_record_to_json(const EvalRecord& r);

}  // namespace moeforge
