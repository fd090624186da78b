// Checkpoint format: magic "USIP", format version u32 (little endian), then
// one record per array: u32 name length, name bytes, u32 shape rank,
// rank x u64 dims, row-major 64-bit little-endian values. Parameters are
// stored under their own names; optimizer moments under "__adam_m.<name>" /
// "__adam_v.<name>", the step counter under "__step", and store attributes
// under "__attr.<key>", which keeps resumed training bit-identical.

#include <bit>
#include <cstdint>
#include <fstream>

#include "usip/autodiff.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

namespace usip::ad {

namespace {

constexpr char kMagic[4] = {'U', 'S', 'I', 'P'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ofstream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_u64(std::ofstream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_array(std::ofstream& out, const std::string& name,
                 const Eigen::MatrixXd& m) {
    write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, 2);
    write_u64(out, static_cast<std::uint64_t>(m.rows()));
    write_u64(out, static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            const double v = m(i, j);
            out.write(reinterpret_cast<const char*>(&v), sizeof(v));
        }
    }
}

bool read_u32(std::ifstream& in, std::uint32_t& v) {
    return static_cast<bool>(in.read(reinterpret_cast<char*>(&v), sizeof(v)));
}

bool read_u64(std::ifstream& in, std::uint64_t& v) {
    return static_cast<bool>(in.read(reinterpret_cast<char*>(&v), sizeof(v)));
}

}  // namespace

void ParamStore::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    out.write(kMagic, 4);
    write_u32(out, kVersion);

    Eigen::MatrixXd step(1, 1);
    step(0, 0) = static_cast<double>(step_);
    write_array(out, "__step", step);
    for (const auto& [name, p] : params_) {
        write_array(out, name, p.value);
        write_array(out, "__adam_m." + name, p.moment1);
        write_array(out, "__adam_v." + name, p.moment2);
    }
    for (const auto& [key, m] : attributes) {
        write_array(out, "__attr." + key, m);
    }
    if (!out) throw IoError("checkpoint write failed: " + path);
}

ParamStore ParamStore::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint for reading: " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::string(magic, 4) != std::string(kMagic, 4)) {
        throw IoError(path + ": not a USIP checkpoint");
    }
    std::uint32_t version = 0;
    if (!read_u32(in, version) || version != kVersion) {
        throw IoError(path + ": unsupported checkpoint version");
    }

    ParamStore store;
    std::map<std::string, Eigen::MatrixXd> arrays;
    for (;;) {
        std::uint32_t name_len = 0;
        if (!read_u32(in, name_len)) break;  // clean EOF
        std::string name(name_len, '\0');
        if (!in.read(name.data(), name_len)) throw IoError(path + ": truncated name");
        std::uint32_t rank = 0;
        if (!read_u32(in, rank) || rank < 1 || rank > 2) {
            throw IoError(path + ": bad array rank");
        }
        std::uint64_t rows = 0, cols = 1;
        if (!read_u64(in, rows)) throw IoError(path + ": truncated dims");
        if (rank == 2 && !read_u64(in, cols)) throw IoError(path + ": truncated dims");
        Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            for (Eigen::Index j = 0; j < m.cols(); ++j) {
                double v = 0.0;
                if (!in.read(reinterpret_cast<char*>(&v), sizeof(v))) {
                    throw IoError(path + ": truncated values");
                }
                m(i, j) = v;
            }
        }
        arrays.emplace(std::move(name), std::move(m));
    }

    for (const auto& [name, m] : arrays) {
        if (name.rfind("__", 0) == 0) continue;
        Parameter p;
        p.name = name;
        p.value = m;
        p.grad = Eigen::MatrixXd::Zero(m.rows(), m.cols());
        const auto m1 = arrays.find("__adam_m." + name);
        const auto m2 = arrays.find("__adam_v." + name);
        p.moment1 = m1 != arrays.end() ? m1->second
                                       : Eigen::MatrixXd::Zero(m.rows(), m.cols());
        p.moment2 = m2 != arrays.end() ? m2->second
                                       : Eigen::MatrixXd::Zero(m.rows(), m.cols());
        store.params_.emplace(name, std::move(p));
    }
    const auto step = arrays.find("__step");
    if (step != arrays.end()) store.step_ = static_cast<std::int64_t>(step->second(0, 0));
    for (const auto& [name, m] : arrays) {
        if (name.rfind("__attr.", 0) == 0) store.attributes.emplace(name.substr(7), m);
    }
    return store;
}

}  // namespace usip::ad
