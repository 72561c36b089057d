#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "trafficmae/errors.hpp"
#include "trafficmae/tensor.hpp"

namespace tmae {

/// On-disk container: magic "TMC1", u64 little-endian manifest length, JSON
/// manifest, then the raw f64 little-endian array payloads in manifest order.
inline constexpr char kContainerMagic[4] = {'T', 'M', 'C', '1'};
inline constexpr int kFormatVersion = 1;

struct ArrayRecord {
    std::string name;
    Shape shape;
    std::vector<double> data;
};

struct Container {
    std::string kind;
    nlohmann::json config;
    std::vector<ArrayRecord> arrays;
};

namespace detail {

inline std::uint64_t fnv1a64(const unsigned char* p, std::size_t n) {
    std::uint64_t h = 1469598103934665603ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[i] = digits[v & 0xf];
    return s;
}

inline void put_u64_le(std::ostream& os, std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(buf), 8);
}

inline std::uint64_t get_u64_le(std::istream& is) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), 8);
    if (is.gcount() != 8) throw CorruptionError("container truncated in header");
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | buf[i];
    return v;
}

inline void write_f64_le(std::ostream& os, const std::vector<double>& v) {
    // host is little-endian on every supported target; memcpy keeps the
    // bit pattern so round trips are exact
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(double)));
}

}  // namespace detail

inline void write_container(std::ostream& os, const Container& c) {
    nlohmann::json manifest;
    manifest["format_version"] = kFormatVersion;
    manifest["kind"] = c.kind;
    manifest["config"] = c.config;
    manifest["arrays"] = nlohmann::json::array();
    for (const auto& a : c.arrays) {
        std::size_t n = 1;
        for (auto d : a.shape) n *= d;
        if (n != a.data.size())
            throw ArgumentError("write_container: shape/data mismatch for " + a.name);
        nlohmann::json e;
        e["name"] = a.name;
        e["shape"] = a.shape;
        e["dtype"] = "f64";
        e["byte_order"] = "le";
        e["checksum"] = detail::hex64(detail::fnv1a64(
            reinterpret_cast<const unsigned char*>(a.data.data()),
            a.data.size() * sizeof(double)));
        manifest["arrays"].push_back(std::move(e));
    }
    const std::string m = manifest.dump();
    os.write(kContainerMagic, 4);
    detail::put_u64_le(os, m.size());
    os.write(m.data(), static_cast<std::streamsize>(m.size()));
    for (const auto& a : c.arrays) detail::write_f64_le(os, a.data);
    if (!os) throw DataError("write_container: stream write failed");
}

inline void write_container(const std::string& path, const Container& c) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("write_container: cannot open " + path);
    write_container(os, c);
}

inline Container read_container(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (is.gcount() != 4 || std::memcmp(magic, kContainerMagic, 4) != 0)
        throw CorruptionError("container magic mismatch");
    const std::uint64_t mlen = detail::get_u64_le(is);
    std::string mtext(mlen, '\0');
    is.read(mtext.data(), static_cast<std::streamsize>(mlen));
    if (static_cast<std::uint64_t>(is.gcount()) != mlen)
        throw CorruptionError("container truncated in manifest");

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mtext);
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError(std::string("container manifest is not valid JSON: ") +
                              e.what());
    }
    if (!manifest.contains("format_version") ||
        !manifest["format_version"].is_number_integer())
        throw CorruptionError("container manifest lacks format_version");
    const int version = manifest["format_version"].get<int>();
    if (version != kFormatVersion)
        throw VersionError("unsupported container format_version " +
                           std::to_string(version));

    Container c;
    c.kind = manifest.value("kind", "");
    c.config = manifest.value("config", nlohmann::json::object());
    for (const auto& e : manifest.value("arrays", nlohmann::json::array())) {
        ArrayRecord a;
        a.name = e.at("name").get<std::string>();
        a.shape = e.at("shape").get<Shape>();
        if (e.value("dtype", "f64") != "f64" || e.value("byte_order", "le") != "le")
            throw VersionError("unsupported array encoding for " + a.name);
        std::size_t n = 1;
        for (auto d : a.shape) n *= d;
        a.data.resize(n);
        is.read(reinterpret_cast<char*>(a.data.data()),
                static_cast<std::streamsize>(n * sizeof(double)));
        if (static_cast<std::size_t>(is.gcount()) != n * sizeof(double))
            throw CorruptionError("container truncated in array " + a.name);
        const std::string sum = detail::hex64(detail::fnv1a64(
            reinterpret_cast<const unsigned char*>(a.data.data()),
            n * sizeof(double)));
        if (e.contains("checksum") && e["checksum"].get<std::string>() != sum)
            throw CorruptionError("checksum mismatch in array " + a.name);
        c.arrays.push_back(std::move(a));
    }
    return c;
}

inline Container read_container(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("read_container: cannot open " + path);
    return read_container(is);
}

}  // namespace tmae
