#include "moeforge/expert_bank.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "moeforge/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "bank archive assumes a little-endian host");

namespace moeforge {

namespace {

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = rng.gaussian(0.0, stddev);
    return m;
}

void check_dims(std::size_t e, std::size_t d_in, std::size_t d_out) {
    if (e < 2) throw std::invalid_argument("expert bank needs at least 2 experts");
    if (d_in < 1 || d_out < 1) throw std::invalid_argument("expert dims must be >= 1");
}

}  // namespace

ExpertBank init_bank(std::size_t e, std::size_t d_in, std::size_t d_out, std::uint64_t seed,
                     double centroid_beta) {
    check_dims(e, d_in, d_out);
    if (centroid_beta <= 0.0 || centroid_beta > 1.0)
        throw std::invalid_argument("centroid beta must be in (0, 1]");
    Rng rng = Rng(seed).derive(0x62616e6b);  // "bank" stream
    ExpertBank bank;
    bank.d_in = d_in;
    bank.d_out = d_out;
    const double stddev = 1.0 / std::sqrt(static_cast<double>(d_in));
    bank.experts.reserve(e);
    for (std::size_t i = 0; i < e; ++i)
        bank.experts.push_back(gaussian_matrix(d_out, d_in, stddev, rng));
    bank.centroids.assign(e, Centroid{std::vector<double>(d_in, 0.0), centroid_beta, 0});
    return bank;
}

PlantedBank init_planted_bank(std::size_t g, std::size_t k_per_group, std::size_t d_in,
                              std::size_t d_out, double noise_sigma, std::uint64_t seed,
                              double centroid_beta) {
    if (g < 1 || k_per_group < 1) throw std::invalid_argument("planted bank needs g, k >= 1");
    check_dims(g * k_per_group, d_in, d_out);
    if (noise_sigma < 0.0) throw std::invalid_argument("noise_sigma must be >= 0");

    Rng rng = Rng(seed).derive(0x706c616e);  // "plan" stream
    const double stddev = 1.0 / std::sqrt(static_cast<double>(d_in));
    std::vector<Matrix> anchors;
    anchors.reserve(g);
    for (std::size_t a = 0; a < g; ++a)
        anchors.push_back(gaussian_matrix(d_out, d_in, stddev, rng));

    PlantedBank out;
    out.bank.d_in = d_in;
    out.bank.d_out = d_out;
    for (std::size_t a = 0; a < g; ++a) {
        for (std::size_t k = 0; k < k_per_group; ++k) {
            Matrix w = anchors[a];
            if (noise_sigma > 0.0)
                for (std::size_t i = 0; i < w.size(); ++i)
                    w.data()[i] += rng.gaussian(0.0, noise_sigma);
            out.bank.experts.push_back(std::move(w));
            out.true_group.push_back(static_cast<int>(a));
        }
    }
    out.bank.centroids.assign(out.bank.experts.size(),
                              Centroid{std::vector<double>(d_in, 0.0), centroid_beta, 0});
    return out;
}

Centroid update_centroid(const Centroid& c, std::span<const std::vector<double>> assigned_tokens) {
    if (assigned_tokens.empty()) return c;
    const std::size_t d = c.mu.size();
    std::vector<double> mean(d, 0.0);
    for (const auto& tok : assigned_tokens) {
        if (tok.size() != d) throw std::invalid_argument("update_centroid: token dim mismatch");
        for (std::size_t i = 0; i < d; ++i) mean[i] += tok[i];
    }
    const double inv = 1.0 / static_cast<double>(assigned_tokens.size());
    Centroid out = c;
    for (std::size_t i = 0; i < d; ++i)
        out.mu[i] = (1.0 - c.beta) * c.mu[i] + c.beta * mean[i] * inv;
    out.tokens_seen = c.tokens_seen + assigned_tokens.size();
    return out;
}

namespace {

constexpr char kBankMagic[4] = {'M', 'O', 'E', 'B'};
constexpr std::uint32_t kBankVersion = 1;

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("bank archive: truncated read");
    return v;
}

void write_doubles(std::ostream& os, std::span<const double> v) {
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void read_doubles(std::istream& is, std::span<double> v) {
    is.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!is) throw std::runtime_error("bank archive: truncated read");
}

}  // namespace

void save_bank(const ExpertBank& bank, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("save_bank: cannot open " + path.string());
    os.write(kBankMagic, 4);
    write_pod(os, kBankVersion);
    write_pod(os, static_cast<std::uint64_t>(bank.size()));
    write_pod(os, static_cast<std::uint64_t>(bank.d_in));
    write_pod(os, static_cast<std::uint64_t>(bank.d_out));
    for (const Matrix& w : bank.experts) write_doubles(os, w.values());
    for (const Centroid& c : bank.centroids) {
        write_doubles(os, c.mu);
        write_pod(os, c.beta);
        write_pod(os, c.tokens_seen);
    }
    if (!os) throw std::runtime_error("save_bank: write failed for " + path.string());
}

ExpertBank load_bank(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_bank: cannot open " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kBankMagic, 4) != 0)
        throw std::runtime_error("load_bank: bad magic in " + path.string());
    const auto version = read_pod<std::uint32_t>(is);
    if (version != kBankVersion)
        throw std::runtime_error("load_bank: unsupported version " + std::to_string(version));
    const auto e = read_pod<std::uint64_t>(is);
    const auto d_in = read_pod<std::uint64_t>(is);
    const auto d_out = read_pod<std::uint64_t>(is);

    ExpertBank bank;
    bank.d_in = static_cast<std::size_t>(d_in);
    bank.d_out = static_cast<std::size_t>(d_out);
    bank.experts.reserve(e);
    for (std::uint64_t i = 0; i < e; ++i) {
        Matrix w(bank.d_out, bank.d_in);
        read_doubles(is, w.values());
        bank.experts.push_back(std::move(w));
    }
    bank.centroids.reserve(e);
    for (std::uint64_t i = 0; i < e; ++i) {
        Centroid c;
        c.mu.resize(bank.d_in);
        read_doubles(is, c.mu);
        c.beta = read_pod<double>(is);
        c.tokens_seen = read_pod<std::uint64_t>(is);
        bank.centroids.push_back(std::move(c));
    }
    return bank;
}

}  // namespace moeforge
