#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "lanekeep/errors.hpp"
#include "lanekeep/tensor.hpp"

namespace lanekeep {

// Named-array container: the on-disk format shared by all checkpoints,
// datasets and resume files.
//
//   magic "NDAR", u32 version
//   u32 meta count, then per entry: u32 key len, key, u32 value len, value
//   u32 array count, then per array:
//     u32 name len, UTF-8 name, u32 rank, u32 extents..., f64 data...
//
// All integers and reals little-endian.
class ArrayContainer {
public:
    std::map<std::string, Tensor> arrays;
    std::map<std::string, std::string> meta;

    bool has(const std::string& name) const { return arrays.count(name) > 0; }

    const Tensor& get(const std::string& name) const {
        auto it = arrays.find(name);
        if (it == arrays.end())
            throw DependencyError("container: missing array '" + name + "'");
        return it->second;
    }

    void put(const std::string& name, Tensor t) { arrays[name] = std::move(t); }

    std::string meta_or(const std::string& key, const std::string& fallback) const {
        auto it = meta.find(key);
        return it == meta.end() ? fallback : it->second;
    }

    // Serialize to `path` atomically: write to a temp file, then rename.
    void save(const std::string& path) const {
        std::string tmp = path + ".tmp";
        {
            std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
            if (!out) throw DependencyError("container: cannot write " + tmp);
            out.write("NDAR", 4);
            put_u32(out, 1);
            put_u32(out, static_cast<std::uint32_t>(meta.size()));
            for (const auto& [k, v] : meta) {
                put_str(out, k);
                put_str(out, v);
            }
            put_u32(out, static_cast<std::uint32_t>(arrays.size()));
            for (const auto& [name, t] : arrays) {
                put_str(out, name);
                put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
                for (int e : t.shape) put_u32(out, static_cast<std::uint32_t>(e));
                for (double x : t.data) put_f64(out, x);
            }
            if (!out) throw DependencyError("container: write failed for " + tmp);
        }
        std::filesystem::rename(tmp, path);
    }

    static ArrayContainer load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw DependencyError("container: cannot open " + path);
        char magic[4];
        in.read(magic, 4);
        if (!in || std::memcmp(magic, "NDAR", 4) != 0)
            throw DependencyError("container: bad magic in " + path);
        std::uint32_t version = get_u32(in, path);
        if (version != 1)
            throw DependencyError("container: unsupported version " + std::to_string(version) +
                                  " in " + path);
        ArrayContainer c;
        std::uint32_t nmeta = get_u32(in, path);
        for (std::uint32_t i = 0; i < nmeta; i++) {
            std::string k = get_str(in, path);
            c.meta[k] = get_str(in, path);
        }
        std::uint32_t narr = get_u32(in, path);
        for (std::uint32_t i = 0; i < narr; i++) {
            std::string name = get_str(in, path);
            std::uint32_t rank = get_u32(in, path);
            std::vector<int> shape(rank);
            for (auto& e : shape) e = static_cast<int>(get_u32(in, path));
            long n = shape_numel(shape);
            std::vector<double> data(static_cast<std::size_t>(n));
            for (double& x : data) x = get_f64(in, path);
            c.arrays[name] = Tensor(std::move(shape), std::move(data));
        }
        if (!in) throw DependencyError("container: truncated file " + path);
        return c;
    }

private:
    static void put_u32(std::ofstream& out, std::uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
        out.write(reinterpret_cast<const char*>(b), 4);
    }

    static void put_f64(std::ofstream& out, double x) {
        std::uint64_t v;
        std::memcpy(&v, &x, 8);
        unsigned char b[8];
        for (int i = 0; i < 8; i++) b[i] = static_cast<unsigned char>(v >> (8 * i));
        out.write(reinterpret_cast<const char*>(b), 8);
    }

    static void put_str(std::ofstream& out, const std::string& s) {
        put_u32(out, static_cast<std::uint32_t>(s.size()));
        out.write(s.data(), static_cast<std::streamsize>(s.size()));
    }

    static std::uint32_t get_u32(std::ifstream& in, const std::string& path) {
        unsigned char b[4];
        in.read(reinterpret_cast<char*>(b), 4);
        if (!in) throw DependencyError("container: truncated file " + path);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }

    static double get_f64(std::ifstream& in, const std::string& path) {
        unsigned char b[8];
        in.read(reinterpret_cast<char*>(b), 8);
        if (!in) throw DependencyError("container: truncated file " + path);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; i++) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        double x;
        std::memcpy(&x, &v, 8);
        return x;
    }

    static std::string get_str(std::ifstream& in, const std::string& path) {
        std::uint32_t n = get_u32(in, path);
        std::string s(n, '\0');
        in.read(s.data(), n);
        if (!in) throw DependencyError("container: truncated file " + path);
        return s;
    }
};

// FNV-1a 64-bit over a file's bytes; used to compare artifacts for the
// reproducibility checks.
inline std::string file_hash_hex(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DependencyError("hash: cannot open " + path);
    std::uint64_t h = 1469598103934665603ULL;
    char buf[65536];
    while (in) {
        in.read(buf, sizeof buf);
        std::streamsize n = in.gcount();
        for (std::streamsize i = 0; i < n; i++) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ULL;
        }
    }
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
    return std::string(hex);
}

}  // namespace lanekeep
