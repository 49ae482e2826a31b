// Python bindings for the main moeforge operations.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "moeforge/clustering.hpp"
#include "moeforge/comm_sim.hpp"
#include "moeforge/compression.hpp"
#include "moeforge/expert_bank.hpp"
#include "moeforge/memory_manager.hpp"
#include "moeforge/numerics.hpp"
#include "moeforge/quantization.hpp"
#include "moeforge/routing.hpp"
#include "moeforge/synthetic_routing.hpp"
#include "moeforge/trainer.hpp"

namespace py = pybind11;
using namespace moeforge;

namespace {

using Rows = std::vector<std::vector<double>>;

Matrix matrix_from_rows(const Rows& rows) {
    if (rows.empty()) throw std::invalid_argument("matrix: no rows");
    const std::size_t cols = rows[0].size();
    std::vector<double> data;
    data.reserve(rows.size() * cols);
    for (const auto& r : rows) {
        if (r.size() != cols) throw std::invalid_argument("matrix: ragged rows");
        data.insert(data.end(), r.begin(), r.end());
    }
    return Matrix(rows.size(), cols, std::move(data));
}

Rows matrix_to_rows(const Matrix& m) {
    Rows rows(m.rows(), std::vector<double>(m.cols()));
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) rows[r][c] = m(r, c);
    return rows;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "moeforge core: expert clustering, low-rank compression, hierarchical routing";

    // numerics
    m.def("cosine_similarity",
          [](const std::vector<double>& u, const std::vector<double>& v) {
              return cosine_similarity(u, v);
          },
          py::arg("u"), py::arg("v"));
    m.def("frobenius_rel_error",
          [](const Rows& m_, const Rows& approx) {
              return frobenius_rel_error(matrix_from_rows(m_), matrix_from_rows(approx));
          },
          py::arg("m"), py::arg("approx"));
    m.def("truncated_svd",
          [](const Rows& m_, std::size_t r) {
              const FactorPair f = truncated_svd(matrix_from_rows(m_), r);
              return py::make_tuple(matrix_to_rows(f.a), matrix_to_rows(f.b));
          },
          py::arg("m"), py::arg("rank"), "Best rank-r factors (a, b) with m ~= a @ b.T");
    m.def("singular_values", [](const Rows& m_) {
        return jacobi_svd(matrix_from_rows(m_)).singular_values;
    });

    // compression formulas
    m.def("compression_ratio", &compression_ratio, py::arg("k"), py::arg("d_in"),
          py::arg("d_out"), py::arg("rank"));
    m.def("effective_compression_ratio", &effective_compression_ratio, py::arg("e"),
          py::arg("g"), py::arg("d_in"), py::arg("d_out"), py::arg("rank"),
          py::arg("router_elements"));
    m.def("routing_cost", [](std::size_t e, std::size_t g, std::size_t k, std::size_t d) {
        const RoutingCost c = routing_cost(e, g, k, d);
        return py::make_tuple(c.hier_mults, c.flat_mults, c.reduction);
    });

    // quantization
    py::class_<QuantBlock>(m, "QuantBlock")
        .def_readonly("scale", &QuantBlock::scale)
        .def_readonly("zero_point", &QuantBlock::zero_point)
        .def_readonly("count", &QuantBlock::count);
    m.def("quantize_group", [](const std::vector<double>& v) { return quantize_group(v); });
    m.def("dequantize_group", &dequantize_group);
    m.def("fp16_round_trip", [](double v) { return fp16_to_double(fp16_from_double(v)); });

    // clustering
    py::class_<GroupAssignment>(m, "GroupAssignment")
        .def_readonly("group_of", &GroupAssignment::group_of)
        .def_readonly("groups", &GroupAssignment::groups)
        .def_readonly("medoids", &GroupAssignment::medoids)
        .def_readonly("mean_intra_similarity", &GroupAssignment::mean_intra_similarity)
        .def("to_json", &assignment_to_json);
    m.def("fused_similarity", &fused_similarity, py::arg("s_param"), py::arg("s_task"),
          py::arg("alpha"));
    m.def("should_recluster", &should_recluster, py::arg("old_mean_sim"),
          py::arg("new_mean_sim"), py::arg("delta"));
    m.def("recluster_interval", &recluster_interval, py::arg("experts"));
    m.def("adjusted_rand_index",
          [](const std::vector<int>& a, const std::vector<int>& b) {
              return adjusted_rand_index(a, b);
          });
    m.def(
        "cluster_planted_bank",
        [](std::size_t g, std::size_t k, std::size_t d_in, std::size_t d_out,
           double relative_noise, double alpha, std::uint64_t seed) {
            const double sigma = relative_noise / std::sqrt(static_cast<double>(d_in));
            const PlantedBank pb = init_planted_bank(g, k, d_in, d_out, sigma, seed);
            SimilarityConfig cfg;
            cfg.alpha = alpha;
            const SimilarityMatrix sim = build_similarity(pb.bank, nullptr, 0, cfg);
            const GroupAssignment a = cluster_experts(sim, g, seed);
            return py::make_tuple(a, adjusted_rand_index(a.group_of, pb.true_group));
        },
        py::arg("groups"), py::arg("per_group"), py::arg("d_in"), py::arg("d_out"),
        py::arg("relative_noise") = 0.05, py::arg("alpha") = 1.0, py::arg("seed") = 42,
        "Plant groups, cluster them back, return (assignment, ARI)");

    // routing
    m.def("zipf_load_covs",
          [](std::size_t e, std::size_t g, std::size_t k, std::size_t tokens, double zipf,
             double noise, std::uint64_t seed) {
              const ZipfRoutingFixture fx =
                  make_zipf_routing_fixture(e, g, k, tokens, zipf, noise, seed);
              const ZipfRoutingRun run = run_zipf_routing(fx);
              return py::make_tuple(run.flat_load.cov, run.hier_load.cov);
          },
          py::arg("experts") = 32, py::arg("groups") = 8, py::arg("k") = 2,
          py::arg("tokens") = 10000, py::arg("zipf") = 1.2, py::arg("noise") = 0.05,
          py::arg("seed") = 42,
          "Coefficient of variation of expert loads (flat, hierarchical) on a Zipf stream");

    // trainer primitives
    m.def("temperature_at", &temperature_at, py::arg("step"), py::arg("total_steps"),
          py::arg("start") = 1.0, py::arg("end") = 0.7);

    // end-to-end: JSON config in, JSON-ish dict out
    m.def(
        "train_from_json",
        [](const std::string& config_json) {
            TrainConfig cfg = config_from_json(config_json);
            cfg.validate();
            const SyntheticTask task =
                make_task(cfg.task_clusters, cfg.task_samples_per_cluster, cfg.d_in, cfg.d_out,
                          cfg.task_noise, cfg.seed, cfg.task_eval_per_cluster);
            const TrainResult res = train(cfg, task);
            py::dict out;
            out["final_eval_loss"] = res.final_eval_loss;
            out["adoptions"] = res.adoptions;
            out["skips"] = res.skips;
            out["stored_expert_elements"] = res.stored_expert_elements;
            out["uncompressed_expert_elements"] = res.uncompressed_expert_elements;
            py::list evals;
            for (const EvalRecord& r : res.evals) {
                py::dict e;
                e["step"] = r.step;
                e["l_task"] = r.objective.l_task;
                e["i_load"] = r.objective.i_load;
                e["r_red"] = r.objective.r_red;
                e["c_comm"] = r.objective.c_comm;
                e["weighted_total"] = r.objective.weighted_total;
                evals.append(e);
            }
            out["evals"] = evals;
            return out;
        },
        py::arg("config_json"),
        "Run the full training protocol on the synthetic task described by the config");
    m.def("default_config_json",
          [] { return config_to_json(TrainConfig{}); });

    m.attr("__version__") = "0.1.0";
}
