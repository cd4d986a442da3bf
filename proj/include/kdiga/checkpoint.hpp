#pragma once

// Binary checkpoint container. Layout (all integers little-endian):
//
//   magic            8 bytes   "KDIGACKP"
//   format_version   u32       currently 1
//   descriptor_len   u32
//   descriptor       bytes     UTF-8 JSON: {"architecture", "metadata", "model_arrays"}
//   seed             u64
//   array_count      u32
//   per array:       u32 rows, u32 cols, rows*cols IEEE-754 binary64 (LE), row-major
//   checksum         u64       FNV-1a over every preceding byte
//
// docs/checkpoint_format.md carries the same table.

#include <array>
#include <bit>
#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kdiga/diffmodel.hpp"
#include "kdiga/errors.hpp"

namespace kdiga {

inline constexpr std::array<char, 8> checkpoint_magic{'K', 'D', 'I', 'G', 'A', 'C', 'K', 'P'};
inline constexpr std::uint32_t checkpoint_version = 1;

inline nlohmann::json to_json(const ModelZooSpec& spec) {
    return {{"family", to_string(spec.family)}, {"input_shape", spec.input_shape}, {"num_classes", spec.num_classes},
            {"width", spec.width},            {"depth", spec.depth},             {"tokens", spec.tokens},
            {"init_scale", spec.init_scale}};
}

inline ModelZooSpec model_spec_from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known{"family", "input_shape", "num_classes", "width",
                                                "depth",  "tokens",      "init_scale"};
    require(j.is_object(), ErrorKind::invalid_config, "model spec must be an object");
    for (const auto& [key, _] : j.items()) {
        require(std::find(known.begin(), known.end(), key) != known.end(), ErrorKind::invalid_config,
                "model spec: unknown key '" + key + "'");
    }
    ModelZooSpec spec;
    try {
        spec.family = parse_family(j.at("family").get<std::string>());
        spec.input_shape = j.at("input_shape").get<std::vector<int>>();
        spec.num_classes = j.at("num_classes").get<int>();
        spec.width = j.value("width", spec.width);
        spec.depth = j.value("depth", spec.depth);
        spec.tokens = j.value("tokens", spec.tokens);
        spec.init_scale = j.value("init_scale", spec.init_scale);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::invalid_config, std::string("model spec: ") + e.what());
    }
    validate(spec);
    return spec;
}

namespace detail {

class ByteWriter {
public:
    void bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        buffer_.insert(buffer_.end(), p, p + n);
    }

    template <typename T>
    void little_endian(T value) {
        static_assert(std::is_unsigned_v<T>);
        for (std::size_t i = 0; i < sizeof(T); ++i) buffer_.push_back(static_cast<unsigned char>(value >> (8 * i)));
    }

    void f64(double v) { little_endian(std::bit_cast<std::uint64_t>(v)); }

    [[nodiscard]] const std::vector<unsigned char>& buffer() const noexcept { return buffer_; }

private:
    std::vector<unsigned char> buffer_;
};

class ByteReader {
public:
    explicit ByteReader(const std::vector<unsigned char>& data) : data_(data) {}

    template <typename T>
    T little_endian() {
        need(sizeof(T));
        T value = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(data_[offset_ + i]) << (8 * i);
        offset_ += sizeof(T);
        return value;
    }

    double f64() { return std::bit_cast<double>(little_endian<std::uint64_t>()); }

    std::string string(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(data_.data() + offset_), n);
        offset_ += n;
        return s;
    }

    [[nodiscard]] std::size_t offset() const noexcept { return offset_; }

private:
    void need(std::size_t n) const {
        if (offset_ + n > data_.size()) {
            fail(ErrorKind::parse, "checkpoint truncated at byte offset " + std::to_string(offset_));
        }
    }

    const std::vector<unsigned char>& data_;
    std::size_t offset_ = 0;
};

inline std::uint64_t fnv1a_bytes(const unsigned char* data, std::size_t n) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace detail

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes to a sibling temporary and renames over the target.
inline void write_file_atomic(const std::filesystem::path& path, const void* data, std::size_t size) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(static_cast<bool>(out), ErrorKind::io, "cannot write " + tmp);
        out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
        require(static_cast<bool>(out), ErrorKind::io, "write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
    write_file_atomic(path, text.data(), text.size());
}

/// A model plus arbitrary JSON metadata (epoch counters, optimizer notes).
struct Checkpoint {
    ZooClassifier model;
    nlohmann::json metadata = nlohmann::json::object();
    std::vector<Matrix> extra_arrays;  // e.g. optimizer velocity, appended after the model parameters
};

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt) {
    detail::ByteWriter w;
    w.bytes(checkpoint_magic.data(), checkpoint_magic.size());
    w.little_endian<std::uint32_t>(checkpoint_version);
    nlohmann::json descriptor{{"architecture", to_json(ckpt.model.spec())},
                              {"metadata", ckpt.metadata},
                              {"model_arrays", ckpt.model.parameters().size()}};
    const std::string text = descriptor.dump();
    w.little_endian<std::uint32_t>(static_cast<std::uint32_t>(text.size()));
    w.bytes(text.data(), text.size());
    w.little_endian<std::uint64_t>(ckpt.model.seed());
    const auto& params = ckpt.model.parameters();
    w.little_endian<std::uint32_t>(static_cast<std::uint32_t>(params.size() + ckpt.extra_arrays.size()));
    auto put = [&](const Matrix& m) {
        w.little_endian<std::uint32_t>(static_cast<std::uint32_t>(m.rows()));
        w.little_endian<std::uint32_t>(static_cast<std::uint32_t>(m.cols()));
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) w.f64(m(r, c));
    };
    for (const auto& p : params) put(p);
    for (const auto& p : ckpt.extra_arrays) put(p);
    const auto& buf = w.buffer();
    const std::uint64_t checksum = detail::fnv1a_bytes(buf.data(), buf.size());
    w.little_endian<std::uint64_t>(checksum);
    return w.buffer();
}

inline Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes) {
    detail::ByteReader r(bytes);
    const std::string magic = r.string(checkpoint_magic.size());
    require(std::equal(magic.begin(), magic.end(), checkpoint_magic.begin()), ErrorKind::parse,
            "checkpoint: bad magic at byte offset 0");
    const auto version = r.little_endian<std::uint32_t>();
    require(version == checkpoint_version, ErrorKind::parse,
            "checkpoint: unsupported format version " + std::to_string(version));
    const auto descriptor_len = r.little_endian<std::uint32_t>();
    nlohmann::json descriptor;
    try {
        descriptor = nlohmann::json::parse(r.string(descriptor_len));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::parse, std::string("checkpoint: malformed descriptor: ") + e.what());
    }
    const auto seed = r.little_endian<std::uint64_t>();
    const auto count = r.little_endian<std::uint32_t>();
    std::vector<Matrix> arrays;
    arrays.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto rows = r.little_endian<std::uint32_t>();
        const auto cols = r.little_endian<std::uint32_t>();
        Matrix m(rows, cols);
        for (Eigen::Index a = 0; a < m.rows(); ++a)
            for (Eigen::Index b = 0; b < m.cols(); ++b) m(a, b) = r.f64();
        arrays.push_back(std::move(m));
    }
    const std::size_t body = r.offset();
    const auto stored = r.little_endian<std::uint64_t>();
    require(stored == detail::fnv1a_bytes(bytes.data(), body), ErrorKind::integrity,
            "checkpoint: checksum mismatch at byte offset " + std::to_string(body));
    require(r.offset() == bytes.size(), ErrorKind::parse,
            "checkpoint: trailing bytes at offset " + std::to_string(r.offset()));

    Checkpoint ckpt;
    ckpt.model = ZooClassifier(model_spec_from_json(descriptor.at("architecture")), seed);
    ckpt.metadata = descriptor.value("metadata", nlohmann::json::object());
    const auto model_arrays = descriptor.at("model_arrays").get<std::size_t>();
    auto& params = ckpt.model.parameters();
    require(model_arrays == params.size() && arrays.size() >= model_arrays, ErrorKind::parse,
            "checkpoint: parameter array count does not match architecture");
    for (std::size_t i = 0; i < model_arrays; ++i) {
        require(arrays[i].rows() == params[i].rows() && arrays[i].cols() == params[i].cols(), ErrorKind::parse,
                "checkpoint: parameter array " + std::to_string(i) + " has wrong shape");
        params[i] = std::move(arrays[i]);
    }
    for (std::size_t i = model_arrays; i < arrays.size(); ++i) ckpt.extra_arrays.push_back(std::move(arrays[i]));
    return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const auto bytes = encode_checkpoint(ckpt);
    write_file_atomic(path, bytes.data(), bytes.size());
}

inline void save_checkpoint(const std::filesystem::path& path, const ZooClassifier& model) {
    save_checkpoint(path, Checkpoint{model, nlohmann::json::object(), {}});
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    require(!bytes.empty(), ErrorKind::parse, "checkpoint: empty file " + path.string());
    return decode_checkpoint(bytes);
}

}  // namespace kdiga
