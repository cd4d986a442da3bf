#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kdiga/checkpoint.hpp"
#include "kdiga/diffmodel.hpp"
#include "kdiga/distiller.hpp"
#include "kdiga/errors.hpp"
#include "kdiga/hashing.hpp"
#include "kdiga/rng.hpp"

namespace kdiga {

struct Dataset {
    std::string name;
    Batch train;
    Batch test;
    int num_classes = 0;
    std::vector<int> input_shape;
};

enum class DatasetKind { cifar10_binary, synthetic_moons, synthetic_blobs, digits_8x8 };

inline std::string to_string(DatasetKind k) {
    switch (k) {
        case DatasetKind::cifar10_binary: return "cifar10-binary";
        case DatasetKind::synthetic_moons: return "synthetic-moons";
        case DatasetKind::synthetic_blobs: return "synthetic-blobs";
        case DatasetKind::digits_8x8: return "digits-8x8";
    }
    return "unknown";
}

inline DatasetKind parse_dataset_kind(const std::string& s) {
    for (DatasetKind k : {DatasetKind::cifar10_binary, DatasetKind::synthetic_moons, DatasetKind::synthetic_blobs,
                          DatasetKind::digits_8x8}) {
        if (to_string(k) == s) return k;
    }
    fail(ErrorKind::invalid_config, "unknown dataset kind '" + s + "'");
}

struct DatasetDescriptor {
    DatasetKind kind = DatasetKind::synthetic_moons;
    std::vector<std::string> paths;       // cifar10-binary: training batch files or one directory; digits: CSV file
    std::vector<std::string> test_paths;  // cifar10-binary test batch files (optional when a directory is given)
    std::string sha256;                   // optional expected digest over the concatenated input files
    int n = 1000;                         // synthetic sample count
    double noise = 0.1;
    int centers = 3;
    int dim = 2;
    double cluster_std = 0.08;
    double test_fraction = 0.25;          // ignored for cifar10-binary (which ships its own test split)
    int train_subset = 0;                 // 0 keeps everything
    std::uint64_t seed = 0;

    bool operator==(const DatasetDescriptor&) const = default;
};

namespace detail {

inline Dataset split_dataset(std::string name, Batch all, int num_classes, std::vector<int> shape, double test_fraction,
                             std::uint64_t seed) {
    require(test_fraction > 0.0 && test_fraction < 1.0, ErrorKind::invalid_config,
            "dataset: test_fraction must lie in (0, 1)");
    std::vector<std::size_t> order(static_cast<std::size_t>(all.size()));
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = make_rng(seed, "split");
    shuffle(order, rng);
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(order.size())));
    std::vector<std::size_t> test_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
    std::vector<std::size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
    std::sort(test_idx.begin(), test_idx.end());
    std::sort(train_idx.begin(), train_idx.end());
    return Dataset{std::move(name), select_rows(all, train_idx), select_rows(all, test_idx), num_classes, std::move(shape)};
}

inline std::vector<std::string> resolve_cifar_files(const std::vector<std::string>& paths, bool test) {
    std::vector<std::string> out;
    for (const auto& p : paths) {
        if (std::filesystem::is_directory(p)) {
            if (test) {
                out.push_back((std::filesystem::path(p) / "test_batch.bin").string());
            } else {
                for (int i = 1; i <= 5; ++i)
                    out.push_back((std::filesystem::path(p) / ("data_batch_" + std::to_string(i) + ".bin")).string());
            }
        } else {
            out.push_back(p);
        }
    }
    return out;
}

}  // namespace detail

inline constexpr std::size_t cifar10_record_bytes = 3073;

/// Parses one CIFAR-10 binary batch: records of 1 label byte + 3072 pixel
/// bytes (three 32x32 planes, R then G then B). Output rows are HWC,
/// scaled to [0, 1].
inline Batch parse_cifar10_binary(const std::vector<unsigned char>& bytes, const std::string& origin = "buffer") {
    require(!bytes.empty(), ErrorKind::parse, origin + ": empty CIFAR-10 file");
    if (bytes.size() % cifar10_record_bytes != 0) {
        const std::size_t offset = bytes.size() / cifar10_record_bytes * cifar10_record_bytes;
        fail(ErrorKind::parse, origin + ": truncated CIFAR-10 record at byte offset " + std::to_string(offset));
    }
    const std::size_t records = bytes.size() / cifar10_record_bytes;
    Batch out;
    out.x.resize(static_cast<Eigen::Index>(records), 3072);
    out.y.resize(records);
    for (std::size_t r = 0; r < records; ++r) {
        const std::size_t base = r * cifar10_record_bytes;
        const int label = bytes[base];
        require(label <= 9, ErrorKind::parse,
                origin + ": label " + std::to_string(label) + " out of range at byte offset " + std::to_string(base));
        out.y[r] = label;
        for (int c = 0; c < 3; ++c) {
            for (int p = 0; p < 1024; ++p) {
                out.x(static_cast<Eigen::Index>(r), p * 3 + c) = bytes[base + 1 + static_cast<std::size_t>(c) * 1024 + p] / 255.0;
            }
        }
    }
    return out;
}

/// Digits CSV: 64 integer intensities in 0..16 followed by the class label.
inline Batch parse_digits_csv(const std::string& text, const std::string& origin = "buffer") {
    require(!text.empty(), ErrorKind::parse, origin + ": empty digits file");
    std::vector<double> values;
    Labels labels;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const std::size_t line_start = pos;
        std::size_t end = text.find('\n', pos);
        if (end == std::string::npos) end = text.size();
        std::string line = text.substr(pos, end - pos);
        pos = end + 1;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<double> row;
        std::size_t field_start = 0;
        while (field_start <= line.size()) {
            std::size_t comma = line.find(',', field_start);
            if (comma == std::string::npos) comma = line.size();
            const std::string field = line.substr(field_start, comma - field_start);
            char* tail = nullptr;
            const double v = std::strtod(field.c_str(), &tail);
            require(!field.empty() && tail && *tail == '\0', ErrorKind::parse,
                    origin + ": malformed field at byte offset " + std::to_string(line_start + field_start));
            row.push_back(v);
            field_start = comma + 1;
        }
        require(row.size() == 65, ErrorKind::parse,
                origin + ": expected 65 fields at byte offset " + std::to_string(line_start));
        for (int i = 0; i < 64; ++i) {
            require(row[i] >= 0.0 && row[i] <= 16.0, ErrorKind::parse,
                    origin + ": intensity out of range at byte offset " + std::to_string(line_start));
            values.push_back(row[i] / 16.0);
        }
        const double label = row[64];
        require(label >= 0.0 && label <= 9.0 && label == std::floor(label), ErrorKind::parse,
                origin + ": bad label at byte offset " + std::to_string(line_start));
        labels.push_back(static_cast<int>(label));
    }
    require(!labels.empty(), ErrorKind::parse, origin + ": no records");
    Batch out;
    out.x.resize(static_cast<Eigen::Index>(labels.size()), 64);
    for (std::size_t r = 0; r < labels.size(); ++r)
        for (int c = 0; c < 64; ++c) out.x(static_cast<Eigen::Index>(r), c) = values[r * 64 + static_cast<std::size_t>(c)];
    out.y = std::move(labels);
    return out;
}

/// Two interleaved half circles, mapped affinely into [0, 1]^2.
inline Batch make_moons(int n, double noise, std::uint64_t seed) {
    require(n >= 2, ErrorKind::invalid_config, "moons: need at least two samples");
    constexpr double pi = 3.14159265358979323846;
    const int n_outer = n / 2;
    const int n_inner = n - n_outer;
    Rng rng = make_rng(seed, "moons");
    Batch out;
    out.x.resize(n, 2);
    out.y.resize(static_cast<std::size_t>(n));
    auto linspace = [&](int count, int i) { return count == 1 ? 0.0 : pi * i / (count - 1); };
    for (int i = 0; i < n; ++i) {
        double a, b;
        if (i < n_outer) {
            const double t = linspace(n_outer, i);
            a = std::cos(t);
            b = std::sin(t);
            out.y[static_cast<std::size_t>(i)] = 0;
        } else {
            const double t = linspace(n_inner, i - n_outer);
            a = 1.0 - std::cos(t);
            b = 1.0 - std::sin(t) - 0.5;
            out.y[static_cast<std::size_t>(i)] = 1;
        }
        a += noise * standard_normal(rng);
        b += noise * standard_normal(rng);
        out.x(i, 0) = std::clamp((a + 1.5) / 4.0, 0.0, 1.0);
        out.x(i, 1) = std::clamp((b + 1.25) / 2.5, 0.0, 1.0);
    }
    return out;
}

/// Isotropic Gaussian clusters with centers drawn in [0.2, 0.8]^dim.
inline Batch make_blobs(int n, int centers, int dim, double cluster_std, std::uint64_t seed) {
    require(n >= 1 && centers >= 2 && dim >= 1, ErrorKind::invalid_config, "blobs: bad parameters");
    Rng rng = make_rng(seed, "blobs");
    Matrix c(centers, dim);
    for (Eigen::Index i = 0; i < c.size(); ++i) c(i) = uniform(rng, 0.2, 0.8);
    Batch out;
    out.x.resize(n, dim);
    out.y.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const int k = i % centers;
        out.y[static_cast<std::size_t>(i)] = k;
        for (int d = 0; d < dim; ++d) out.x(i, d) = std::clamp(c(k, d) + cluster_std * standard_normal(rng), 0.0, 1.0);
    }
    return out;
}

inline Batch deterministic_subset(const Batch& data, int count, std::uint64_t seed, std::string_view stream) {
    if (count <= 0 || count >= data.size()) return data;
    std::vector<std::size_t> order(static_cast<std::size_t>(data.size()));
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = make_rng(seed, stream);
    shuffle(order, rng);
    order.resize(static_cast<std::size_t>(count));
    std::sort(order.begin(), order.end());
    return select_rows(data, order);
}

inline Dataset load_dataset(const DatasetDescriptor& d) {
    Dataset ds;
    switch (d.kind) {
        case DatasetKind::synthetic_moons:
            ds = detail::split_dataset("synthetic-moons", make_moons(d.n, d.noise, d.seed), 2, {2}, d.test_fraction, d.seed);
            break;
        case DatasetKind::synthetic_blobs:
            ds = detail::split_dataset("synthetic-blobs", make_blobs(d.n, d.centers, d.dim, d.cluster_std, d.seed),
                                       d.centers, {d.dim}, d.test_fraction, d.seed);
            break;
        case DatasetKind::digits_8x8: {
            require(d.paths.size() == 1, ErrorKind::invalid_config, "digits-8x8: exactly one path required");
            const auto bytes = read_file_bytes(d.paths[0]);
            if (!d.sha256.empty()) {
                require(sha256_hex(bytes.data(), bytes.size()) == d.sha256, ErrorKind::integrity,
                        "digits-8x8: checksum mismatch for " + d.paths[0]);
            }
            Batch all = parse_digits_csv(std::string(bytes.begin(), bytes.end()), d.paths[0]);
            ds = detail::split_dataset("digits-8x8", std::move(all), 10, {8, 8, 1}, d.test_fraction, d.seed);
            break;
        }
        case DatasetKind::cifar10_binary: {
            const auto train_files = detail::resolve_cifar_files(d.paths, false);
            auto test_files = detail::resolve_cifar_files(d.test_paths, true);
            if (test_files.empty()) {
                for (const auto& p : d.paths)
                    if (std::filesystem::is_directory(p)) test_files.push_back((std::filesystem::path(p) / "test_batch.bin").string());
            }
            require(!train_files.empty(), ErrorKind::invalid_config, "cifar10-binary: no training files");
            std::string digest_input;
            auto load = [&](const std::vector<std::string>& files) {
                Batch all;
                std::vector<Batch> parts;
                Eigen::Index rows = 0;
                for (const auto& f : files) {
                    const auto bytes = read_file_bytes(f);
                    digest_input.append(bytes.begin(), bytes.end());
                    parts.push_back(parse_cifar10_binary(bytes, f));
                    rows += parts.back().size();
                }
                all.x.resize(rows, 3072);
                Eigen::Index at = 0;
                for (auto& p : parts) {
                    all.x.middleRows(at, p.size()) = p.x;
                    at += p.size();
                    all.y.insert(all.y.end(), p.y.begin(), p.y.end());
                }
                return all;
            };
            ds.train = load(train_files);
            ds.test = test_files.empty() ? Batch{Matrix(0, 3072), {}} : load(test_files);
            if (!d.sha256.empty()) {
                require(sha256_hex(digest_input) == d.sha256, ErrorKind::integrity, "cifar10-binary: checksum mismatch");
            }
            ds.name = "cifar10-binary";
            ds.num_classes = 10;
            ds.input_shape = {32, 32, 3};
            break;
        }
    }
    ds.train = deterministic_subset(ds.train, d.train_subset, d.seed, "train-subset");
    return ds;
}

}  // namespace kdiga
