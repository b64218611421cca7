#ifndef CMONGE_IO_HPP
#define CMONGE_IO_HPP

#include "error.hpp"
#include "nn.hpp"

#include "json.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

/**
 * @file io.hpp
 *
 * @brief Versioned binary container for network parameters.
 *
 * Layout, all integers little-endian:
 *
 * - 8 bytes magic `CMONGEBN`, then a `u32` format version.
 * - `u64` length and UTF-8 bytes of a JSON metadata object.
 * - `u32` network count; per network a `u64`-prefixed name, a `u32` layer count and,
 *   per layer, `u64` out and in widths, the row-major weights and the bias as IEEE-754 doubles.
 */

namespace cmonge {

inline constexpr char bundle_magic[8] = {'C', 'M', 'O', 'N', 'G', 'E', 'B', 'N'};
inline constexpr std::uint32_t bundle_version = 1;

struct NamedNetwork {
    std::string name;
    MlpParams params;
};

struct Bundle {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<NamedNetwork> networks;

    const MlpParams& get(const std::string& name) const {
        for (const auto& n : networks) {
            if (n.name == name) {
                return n.params;
            }
        }
        throw DataError("bundle has no network named '" + name + "'");
    }

    bool has(const std::string& name) const {
        for (const auto& n : networks) {
            if (n.name == name) {
                return true;
            }
        }
        return false;
    }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int k = 0; k < 4; ++k) {
        out.push_back(static_cast<char>((v >> (8 * k)) & 0xFF));
    }
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int k = 0; k < 8; ++k) {
        out.push_back(static_cast<char>((v >> (8 * k)) & 0xFF));
    }
}

inline void put_f64(std::string& out, double v) {
    put_u64(out, std::bit_cast<std::uint64_t>(v));
}

inline void put_string(std::string& out, std::string_view s) {
    put_u64(out, s.size());
    out.append(s);
}

class ByteReader {
public:
    explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

    std::uint64_t u64() { return read_le(8); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(read_le(4)); }
    double f64() { return std::bit_cast<double>(u64()); }

    std::string_view take(std::uint64_t n) {
        if (n > bytes_.size() - pos_) {
            throw DataError("bundle truncated at byte " + std::to_string(pos_));
        }
        auto out = bytes_.substr(pos_, n);
        pos_ += n;
        return out;
    }

    bool done() const { return pos_ == bytes_.size(); }

private:
    std::uint64_t read_le(int width) {
        auto raw = take(width);
        std::uint64_t v = 0;
        for (int k = 0; k < width; ++k) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(raw[k])) << (8 * k);
        }
        return v;
    }

    std::string_view bytes_;
    std::size_t pos_ = 0;
};

}

/** Serializes a bundle to bytes. */
inline std::string bundle_bytes(const Bundle& bundle) {
    std::string out(bundle_magic, sizeof(bundle_magic));
    detail::put_u32(out, bundle_version);
    detail::put_string(out, bundle.meta.dump());
    detail::put_u32(out, static_cast<std::uint32_t>(bundle.networks.size()));
    for (const auto& net : bundle.networks) {
        net.params.validate();
        detail::put_string(out, net.name);
        detail::put_u32(out, static_cast<std::uint32_t>(net.params.layers.size()));
        for (const auto& l : net.params.layers) {
            detail::put_u64(out, static_cast<std::uint64_t>(l.out_dim()));
            detail::put_u64(out, static_cast<std::uint64_t>(l.in_dim()));
            for (Eigen::Index i = 0; i < l.weight.rows(); ++i) {
                for (Eigen::Index j = 0; j < l.weight.cols(); ++j) {
                    detail::put_f64(out, l.weight(i, j));
                }
            }
            for (Eigen::Index i = 0; i < l.bias.size(); ++i) {
                detail::put_f64(out, l.bias[i]);
            }
        }
    }
    return out;
}

inline Bundle parse_bundle(std::string_view bytes) {
    detail::ByteReader in(bytes);
    if (in.take(sizeof(bundle_magic)) != std::string_view(bundle_magic, sizeof(bundle_magic))) {
        throw DataError("not a parameter bundle (bad magic)");
    }
    const auto version = in.u32();
    if (version != bundle_version) {
        throw DataError("unsupported bundle version " + std::to_string(version));
    }

    Bundle out;
    const auto meta_len = in.u64();
    try {
        out.meta = nlohmann::json::parse(in.take(meta_len));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("bundle metadata is not valid JSON: ") + e.what());
    }

    const auto count = in.u32();
    for (std::uint32_t k = 0; k < count; ++k) {
        NamedNetwork net;
        net.name = std::string(in.take(in.u64()));
        const auto depth = in.u32();
        for (std::uint32_t l = 0; l < depth; ++l) {
            const auto rows = in.u64(), cols = in.u64();
            // Guard against absurd sizes before allocating.
            if (rows == 0 || cols == 0 || rows > (1u << 24) || cols > (1u << 24)) {
                throw DataError("bundle network '" + net.name + "' has an invalid layer shape");
            }
            DenseLayer layer{Matrix(rows, cols), Vector(rows)};
            for (Eigen::Index i = 0; i < layer.weight.rows(); ++i) {
                for (Eigen::Index j = 0; j < layer.weight.cols(); ++j) {
                    layer.weight(i, j) = in.f64();
                }
            }
            for (Eigen::Index i = 0; i < layer.bias.size(); ++i) {
                layer.bias[i] = in.f64();
            }
            net.params.layers.push_back(std::move(layer));
        }
        try {
            net.params.validate();
        } catch (const std::exception& e) {
            throw DataError("bundle network '" + net.name + "': " + e.what());
        }
        out.networks.push_back(std::move(net));
    }
    if (!in.done()) {
        throw DataError("bundle has trailing bytes");
    }
    return out;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open " + path);
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

inline void write_file(const std::string& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot write " + path);
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw DataError("write failed for " + path);
    }
}

inline void write_bundle(const std::string& path, const Bundle& bundle) {
    write_file(path, bundle_bytes(bundle));
}

inline Bundle read_bundle(const std::string& path) {
    return parse_bundle(read_file(path));
}

/**
 * Human-readable description of a bundle: network shapes, activations and the metadata.
 */
inline nlohmann::json bundle_manifest(const Bundle& bundle) {
    nlohmann::json nets = nlohmann::json::array();
    for (const auto& n : bundle.networks) {
        nets.push_back({
            {"name", n.name},
            {"sizes", n.params.sizes()},
            {"hidden_activation", "gelu"},
            {"output_activation", "linear"},
            {"parameter_count", n.params.parameter_count()},
        });
    }
    return {{"format", "CMONGEBN"}, {"version", bundle_version}, {"networks", nets}, {"meta", bundle.meta}};
}

/** Wraps a single affine layer so it can be stored as a one-layer network. */
inline MlpParams as_network(const DenseLayer& layer) {
    MlpParams p;
    p.layers.push_back(layer);
    return p;
}

}

#endif
