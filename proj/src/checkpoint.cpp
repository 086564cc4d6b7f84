#include "fedstock/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "fedstock/errors.hpp"

namespace fedstock {

namespace {

constexpr std::uint32_t kFormatVersion = 1;

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_f64(std::vector<unsigned char>& out, double v) {
    put_u64(out, std::bit_cast<std::uint64_t>(v));
}

struct Reader {
    const unsigned char* p;
    const unsigned char* end;
    std::string path;

    void need(std::size_t n) const {
        if (static_cast<std::size_t>(end - p) < n) {
            throw IoError("truncated checkpoint: " + path);
        }
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
        p += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
        p += 8;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(p), n);
        p += n;
        return s;
    }
};

}  // namespace

void save_checkpoint(const ParamSet& params, const std::filesystem::path& path) {
    std::vector<unsigned char> buf;
    put_u32(buf, kFormatVersion);
    put_u32(buf, static_cast<std::uint32_t>(params.count()));
    for (const auto& p : params.params()) {
        put_u32(buf, static_cast<std::uint32_t>(p.name.size()));
        buf.insert(buf.end(), p.name.begin(), p.name.end());
        put_u32(buf, static_cast<std::uint32_t>(p.value.rank()));
        for (std::size_t d : p.value.shape()) put_u64(buf, d);
        for (double v : p.value.values()) put_f64(buf, v);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

ParamSet load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
    Reader r{buf.data(), buf.data() + buf.size(), path.string()};

    const std::uint32_t version = r.u32();
    if (version != kFormatVersion) {
        throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " +
                      path.string());
    }
    const std::uint32_t count = r.u32();
    ParamSet params;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = r.u32();
        std::string name = r.str(name_len);
        const std::uint32_t rank = r.u32();
        std::vector<std::size_t> shape(rank);
        std::size_t total = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            shape[d] = static_cast<std::size_t>(r.u64());
            total *= shape[d];
        }
        if (rank == 0) total = 0;
        std::vector<double> data(total);
        for (std::size_t j = 0; j < total; ++j) data[j] = r.f64();
        params.add(std::move(name), Tensor(std::move(shape), std::move(data)),
                   Partition::Body);
    }
    if (r.p != r.end) throw IoError("trailing bytes in checkpoint: " + path.string());
    for (auto& p : params.params()) p.partition = partition_for_name(p.name);
    return params;
}

}  // namespace fedstock
