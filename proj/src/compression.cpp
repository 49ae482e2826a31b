#include "moeforge/compression.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "moeforge/numerics.hpp"
#include "moeforge/rng.hpp"

namespace moeforge {

Matrix GroupedParams::reconstruct_expert(std::size_t expert) const {
    return reconstruct(bases[group_of(expert)], residuals[expert]);
}

std::size_t GroupedParams::stored_element_count() const {
    std::size_t n = group_count() * d_in * d_out;
    for (std::size_t i = 0; i < expert_count(); ++i)
        if (!pruned[i]) n += rank * (d_in + d_out);
    return n;
}

Matrix compute_base(std::span<const Matrix> member_weights) {
    if (member_weights.empty()) throw std::invalid_argument("compute_base: empty group");
    Matrix base(member_weights[0].rows(), member_weights[0].cols());
    for (const Matrix& w : member_weights) {
        if (!w.same_shape(base)) throw std::invalid_argument("compute_base: shape mismatch");
        base.add_scaled(w, 1.0);
    }
    const double inv = 1.0 / static_cast<double>(member_weights.size());
    for (double& v : base.values()) v *= inv;
    return base;
}

FactorPair factor_residual(const Matrix& w, const Matrix& base, std::size_t r, FactorMode mode,
                           std::uint64_t seed) {
    if (!w.same_shape(base)) throw std::invalid_argument("factor_residual: shape mismatch");
    if (r < 1 || r > std::min(w.rows(), w.cols()))
        throw std::invalid_argument("factor_residual: invalid rank");
    if (mode == FactorMode::Svd) return truncated_svd(w - base, r);
    Rng rng = Rng(seed).derive(0x66616374);  // "fact" stream
    const double stddev = 1.0 / std::sqrt(static_cast<double>(r));
    Matrix a(w.rows(), r);
    Matrix b(w.cols(), r);
    for (double& v : a.values()) v = rng.gaussian(0.0, stddev);
    for (double& v : b.values()) v = rng.gaussian(0.0, stddev);
    return FactorPair(std::move(a), std::move(b));
}

Matrix reconstruct(const Matrix& base, const FactorPair& f) {
    if (base.rows() != f.a.rows() || base.cols() != f.b.rows())
        throw std::invalid_argument("reconstruct: shape mismatch");
    Matrix out = base;
    for (std::size_t i = 0; i < base.rows(); ++i)
        for (std::size_t t = 0; t < f.rank; ++t) {
            const double ait = f.a(i, t);
            if (ait == 0.0) continue;
            for (std::size_t j = 0; j < base.cols(); ++j) out(i, j) += ait * f.b(j, t);
        }
    return out;
}

GroupedParams build_grouped(std::span<const Matrix> expert_weights,
                            const GroupAssignment& assignment, std::size_t r, FactorMode mode,
                            std::uint64_t seed) {
    if (expert_weights.empty()) throw std::invalid_argument("build_grouped: no experts");
    if (assignment.group_of.size() != expert_weights.size())
        throw std::invalid_argument("build_grouped: assignment size mismatch");

    GroupedParams gp;
    gp.assignment = assignment;
    gp.d_out = expert_weights[0].rows();
    gp.d_in = expert_weights[0].cols();
    gp.rank = r;
    gp.bases.resize(assignment.group_count());
    gp.residuals.resize(expert_weights.size());
    gp.pruned.assign(expert_weights.size(), 0);

    for (std::size_t g = 0; g < assignment.group_count(); ++g) {
        std::vector<Matrix> members;
        members.reserve(assignment.groups[g].size());
        for (int x : assignment.groups[g]) members.push_back(expert_weights[x]);
        gp.bases[g] = compute_base(members);
        for (int x : assignment.groups[g])
            gp.residuals[x] = factor_residual(expert_weights[x], gp.bases[g], r, mode,
                                              seed + static_cast<std::uint64_t>(x));
    }
    return gp;
}

std::vector<std::vector<double>> compressed_forward(const GroupedParams& gp, int group,
                                                    std::span<const double> x,
                                                    std::span<const int> expert_ids,
                                                    MultiplyCounter* counter) {
    if (group < 0 || static_cast<std::size_t>(group) >= gp.group_count())
        throw std::invalid_argument("compressed_forward: bad group id");
    if (x.size() != gp.d_in) throw std::invalid_argument("compressed_forward: input length");
    for (int id : expert_ids)
        if (id < 0 || static_cast<std::size_t>(id) >= gp.expert_count() ||
            gp.group_of(id) != group)
            throw std::invalid_argument("compressed_forward: expert " + std::to_string(id) +
                                        " not in group " + std::to_string(group));

    const std::vector<double> shared = gp.bases[group].matvec(x);
    if (counter) counter->mults += static_cast<std::uint64_t>(gp.d_out) * gp.d_in;

    std::vector<std::vector<double>> outputs;
    outputs.reserve(expert_ids.size());
    for (int id : expert_ids) {
        if (gp.pruned[id]) {
            outputs.push_back(shared);
            continue;
        }
        const FactorPair& f = gp.residuals[id];
        const std::vector<double> t = f.b.matvec_transposed(x);  // r
        std::vector<double> y = shared;
        for (std::size_t i = 0; i < gp.d_out; ++i) {
            double acc = 0.0;
            for (std::size_t k = 0; k < f.rank; ++k) acc += f.a(i, k) * t[k];
            y[i] += acc;
        }
        if (counter)
            counter->mults += 2ULL * f.rank * (gp.d_in + gp.d_out);
        outputs.push_back(std::move(y));
    }
    return outputs;
}

double compression_ratio(std::size_t k, std::size_t d_in, std::size_t d_out, std::size_t r) {
    if (k < 1 || d_in < 1 || d_out < 1 || r < 1)
        throw std::invalid_argument("compression_ratio: all arguments must be >= 1");
    const double num = static_cast<double>(k) * d_in * d_out;
    const double den = static_cast<double>(d_in) * d_out +
                       static_cast<double>(k) * r * (d_in + d_out);
    return num / den;
}

double effective_compression_ratio(std::size_t e, std::size_t g, std::size_t d_in,
                                   std::size_t d_out, std::size_t r,
                                   std::size_t router_elements) {
    const double original = static_cast<double>(e) * d_in * d_out + router_elements;
    const double compressed = static_cast<double>(g) * d_in * d_out +
                              static_cast<double>(e) * r * (d_in + d_out) + router_elements;
    return original / compressed;
}

std::size_t prune_residuals(GroupedParams& gp, double gamma) {
    if (gamma < 0.0 || gamma > 1.0)
        throw std::invalid_argument("prune_residuals: gamma must be in [0, 1]");
    for (std::size_t i = 0; i < gp.expert_count(); ++i) {
        if (gp.pruned[i]) continue;
        const Matrix& base = gp.bases[gp.group_of(i)];
        if (base.frobenius_norm() == 0.0) continue;  // cosine undefined, skip
        const Matrix delta = gp.residuals[i].delta();
        if (delta.frobenius_norm() == 0.0) continue;  // likewise undefined
        // Alignment strength regardless of sign: an anti-parallel residual is
        // just as structured as a parallel one.
        const bool drop =
            std::abs(cosine_similarity(delta.values(), base.values())) < gamma;
        if (drop) {
            gp.pruned[i] = 1;
            for (double& v : gp.residuals[i].a.values()) v = 0.0;
            for (double& v : gp.residuals[i].b.values()) v = 0.0;
        }
    }
    gp.int4_blocks.reset();  // payload no longer matches the mask
    std::size_t n = 0;
    for (auto p : gp.pruned) n += p;
    return n;
}

namespace {

// Canonical member order for value streams: ascending expert id, so that an
// archive written from any assignment decodes identically.
std::vector<int> canonical_members(const GroupedParams& gp, std::size_t group) {
    std::vector<int> members = gp.assignment.groups[group];
    std::sort(members.begin(), members.end());
    return members;
}

}  // namespace

void quantize_residuals(GroupedParams& gp) {
    std::vector<QuantBlock> blocks(gp.group_count());
    for (std::size_t g = 0; g < gp.group_count(); ++g) {
        const std::vector<int> members = canonical_members(gp, g);
        std::vector<double> values;
        for (int x : members) {
            if (gp.pruned[x]) continue;
            const FactorPair& f = gp.residuals[x];
            values.insert(values.end(), f.a.values().begin(), f.a.values().end());
            values.insert(values.end(), f.b.values().begin(), f.b.values().end());
        }
        if (values.empty()) {
            blocks[g] = QuantBlock{};  // whole group pruned
            continue;
        }
        blocks[g] = quantize_group(values);
        const std::vector<double> deq = dequantize_group(blocks[g]);
        std::size_t pos = 0;
        for (int x : members) {
            if (gp.pruned[x]) continue;
            FactorPair& f = gp.residuals[x];
            for (double& v : f.a.values()) v = deq[pos++];
            for (double& v : f.b.values()) v = deq[pos++];
        }
    }
    gp.int4_blocks = std::move(blocks);
}

// ---------------------------------------------------------------------------
// Archive: little-endian "MOEC".
//   header:  magic, u32 version, u64 E, G, K, d_in, d_out, r,
//            f64 mean_intra_similarity, E x u32 group_of, G x u32 medoids
//   payload: G group blobs, each self-describing:
//            u8 base_enc, u8 res_enc, u64 member_count,
//            member pruned bits (ceil(K/8), LSB first),
//            base values (u16 fp16 | f64),
//            residuals: fp64 -> per unpruned member A then B as f64;
//                       int4 -> f64 scale, u8 zero_point, u64 element count,
//                               packed nibbles (two codes per byte)
// ---------------------------------------------------------------------------

namespace {

constexpr char kGroupedMagic[4] = {'M', 'O', 'E', 'C'};
constexpr std::uint32_t kGroupedVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "grouped archive assumes a little-endian host");

template <typename T>
void append_pod(std::vector<std::uint8_t>& out, const T& v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T take_pod(std::span<const std::uint8_t>& in) {
    if (in.size() < sizeof(T)) throw std::runtime_error("group blob: truncated");
    T v{};
    std::memcpy(&v, in.data(), sizeof(T));
    in = in.subspan(sizeof(T));
    return v;
}

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("grouped archive: truncated read");
    return v;
}

}  // namespace

std::vector<std::uint8_t> encode_group_blob(const GroupedParams& gp, std::size_t group,
                                            BaseEncoding base_enc, ResidualEncoding res_enc) {
    if (group >= gp.group_count()) throw std::invalid_argument("encode_group_blob: bad group");
    if (res_enc == ResidualEncoding::Int4 && !gp.int4_blocks)
        throw std::invalid_argument(
            "encode_group_blob: INT4 requested but residuals are not quantized");

    const std::vector<int> members = canonical_members(gp, group);
    std::vector<std::uint8_t> out;
    append_pod(out, static_cast<std::uint8_t>(base_enc));
    append_pod(out, static_cast<std::uint8_t>(res_enc));
    append_pod(out, static_cast<std::uint64_t>(members.size()));

    std::vector<std::uint8_t> mask((members.size() + 7) / 8, 0);
    for (std::size_t m = 0; m < members.size(); ++m)
        if (gp.pruned[members[m]]) mask[m / 8] |= static_cast<std::uint8_t>(1u << (m % 8));
    out.insert(out.end(), mask.begin(), mask.end());

    if (base_enc == BaseEncoding::Fp16) {
        const Fp16Payload p = encode_fp16(gp.bases[group]);
        for (std::uint16_t b : p.bits) append_pod(out, b);
    } else {
        for (double v : gp.bases[group].values()) append_pod(out, v);
    }

    if (res_enc == ResidualEncoding::Fp64) {
        for (int x : members) {
            if (gp.pruned[x]) continue;
            for (double v : gp.residuals[x].a.values()) append_pod(out, v);
            for (double v : gp.residuals[x].b.values()) append_pod(out, v);
        }
    } else {
        const QuantBlock& q = (*gp.int4_blocks)[group];
        append_pod(out, q.scale);
        append_pod(out, static_cast<std::uint8_t>(q.zero_point));
        append_pod(out, static_cast<std::uint64_t>(q.count));
        out.insert(out.end(), q.codes.begin(), q.codes.end());
    }
    return out;
}

void decode_group_blob(GroupedParams& gp, std::size_t group,
                       std::span<const std::uint8_t> blob) {
    if (group >= gp.group_count()) throw std::invalid_argument("decode_group_blob: bad group");
    const std::vector<int> members = canonical_members(gp, group);

    const auto base_enc = static_cast<BaseEncoding>(take_pod<std::uint8_t>(blob));
    const auto res_enc = static_cast<ResidualEncoding>(take_pod<std::uint8_t>(blob));
    const auto member_count = take_pod<std::uint64_t>(blob);
    if (member_count != members.size())
        throw std::runtime_error("decode_group_blob: member count mismatch");

    const std::size_t mask_bytes = (members.size() + 7) / 8;
    if (blob.size() < mask_bytes) throw std::runtime_error("group blob: truncated");
    for (std::size_t m = 0; m < members.size(); ++m)
        gp.pruned[members[m]] = (blob[m / 8] >> (m % 8)) & 1u;
    blob = blob.subspan(mask_bytes);

    const std::size_t base_n = gp.d_in * gp.d_out;
    if (base_enc == BaseEncoding::Fp16) {
        Fp16Payload p;
        p.rows = gp.d_out;
        p.cols = gp.d_in;
        p.bits.resize(base_n);
        for (std::size_t i = 0; i < base_n; ++i) p.bits[i] = take_pod<std::uint16_t>(blob);
        gp.bases[group] = decode_fp16(p);
    } else {
        Matrix base(gp.d_out, gp.d_in);
        for (std::size_t i = 0; i < base_n; ++i) base.data()[i] = take_pod<double>(blob);
        gp.bases[group] = std::move(base);
    }

    auto zero_factor = [&](int x) {
        gp.residuals[x] = FactorPair(Matrix(gp.d_out, gp.rank), Matrix(gp.d_in, gp.rank));
    };

    if (res_enc == ResidualEncoding::Fp64) {
        for (int x : members) {
            if (gp.pruned[x]) {
                zero_factor(x);
                continue;
            }
            Matrix a(gp.d_out, gp.rank);
            Matrix b(gp.d_in, gp.rank);
            for (double& v : a.values()) v = take_pod<double>(blob);
            for (double& v : b.values()) v = take_pod<double>(blob);
            gp.residuals[x] = FactorPair(std::move(a), std::move(b));
        }
        if (gp.int4_blocks) gp.int4_blocks.reset();
    } else {
        QuantBlock q;
        q.scale = take_pod<double>(blob);
        q.zero_point = take_pod<std::uint8_t>(blob);
        q.count = take_pod<std::uint64_t>(blob);
        const std::size_t packed = (q.count + 1) / 2;
        if (blob.size() < packed) throw std::runtime_error("group blob: truncated");
        q.codes.assign(blob.begin(), blob.begin() + static_cast<std::ptrdiff_t>(packed));
        blob = blob.subspan(packed);

        std::vector<double> deq = q.count > 0 ? dequantize_group(q) : std::vector<double>{};
        std::size_t pos = 0;
        for (int x : members) {
            zero_factor(x);
            if (gp.pruned[x]) continue;
            for (double& v : gp.residuals[x].a.values()) v = deq.at(pos++);
            for (double& v : gp.residuals[x].b.values()) v = deq.at(pos++);
        }
        if (!gp.int4_blocks) gp.int4_blocks.emplace(gp.group_count());
        (*gp.int4_blocks)[group] = std::move(q);
    }
}

void save_grouped(const GroupedParams& gp, const std::filesystem::path& path,
                  BaseEncoding base_enc, ResidualEncoding res_enc) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("save_grouped: cannot open " + path.string());
    os.write(kGroupedMagic, 4);
    write_pod(os, kGroupedVersion);
    write_pod(os, static_cast<std::uint64_t>(gp.expert_count()));
    write_pod(os, static_cast<std::uint64_t>(gp.group_count()));
    write_pod(os, static_cast<std::uint64_t>(gp.assignment.group_size()));
    write_pod(os, static_cast<std::uint64_t>(gp.d_in));
    write_pod(os, static_cast<std::uint64_t>(gp.d_out));
    write_pod(os, static_cast<std::uint64_t>(gp.rank));
    write_pod(os, gp.assignment.mean_intra_similarity);
    for (int g : gp.assignment.group_of) write_pod(os, static_cast<std::uint32_t>(g));
    for (int m : gp.assignment.medoids) write_pod(os, static_cast<std::uint32_t>(m));
    for (std::size_t g = 0; g < gp.group_count(); ++g) {
        const std::vector<std::uint8_t> blob = encode_group_blob(gp, g, base_enc, res_enc);
        write_pod(os, static_cast<std::uint64_t>(blob.size()));
        os.write(reinterpret_cast<const char*>(blob.data()),
                 static_cast<std::streamsize>(blob.size()));
    }
    if (!os) throw std::runtime_error("save_grouped: write failed for " + path.string());
}

GroupedParams load_grouped(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_grouped: cannot open " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kGroupedMagic, 4) != 0)
        throw std::runtime_error("load_grouped: bad magic in " + path.string());
    const auto version = read_pod<std::uint32_t>(is);
    if (version != kGroupedVersion)
        throw std::runtime_error("load_grouped: unsupported version " + std::to_string(version));

    const auto e = read_pod<std::uint64_t>(is);
    const auto g = read_pod<std::uint64_t>(is);
    const auto k = read_pod<std::uint64_t>(is);
    if (g == 0 || k == 0 || e != g * k)
        throw std::runtime_error("load_grouped: inconsistent counts");

    GroupedParams gp;
    gp.d_in = static_cast<std::size_t>(read_pod<std::uint64_t>(is));
    gp.d_out = static_cast<std::size_t>(read_pod<std::uint64_t>(is));
    gp.rank = static_cast<std::size_t>(read_pod<std::uint64_t>(is));
    gp.assignment.mean_intra_similarity = read_pod<double>(is);
    gp.assignment.group_of.resize(e);
    gp.assignment.groups.assign(g, {});
    for (std::uint64_t i = 0; i < e; ++i) {
        const auto gid = read_pod<std::uint32_t>(is);
        if (gid >= g) throw std::runtime_error("load_grouped: group id out of range");
        gp.assignment.group_of[i] = static_cast<int>(gid);
        gp.assignment.groups[gid].push_back(static_cast<int>(i));
    }
    for (const auto& members : gp.assignment.groups)
        if (members.size() != k) throw std::runtime_error("load_grouped: non-uniform groups");
    gp.assignment.medoids.resize(g);
    for (std::uint64_t i = 0; i < g; ++i)
        gp.assignment.medoids[i] = static_cast<int>(read_pod<std::uint32_t>(is));

    gp.bases.resize(g);
    gp.residuals.resize(e);
    gp.pruned.assign(e, 0);
    for (std::uint64_t gi = 0; gi < g; ++gi) {
        const auto blob_size = read_pod<std::uint64_t>(is);
        std::vector<std::uint8_t> blob(blob_size);
        is.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(blob_size));
        if (!is) throw std::runtime_error("load_grouped: truncated blob");
        decode_group_blob(gp, gi, blob);
    }
    return gp;
}

}  // namespace moeforge
