#pragma once
// Seeded synthetic Gaussian-mixture classification data, a bit-exact IDX
// reader/writer pair, and per-epoch shuffled batching. All randomness is
// hand-rolled from mt19937_64 words so streams are identical across standard
// library implementations.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "kd/errors.hpp"
#include "kd/tensor.hpp"

namespace kd {

enum class DataProvenance { synthetic, idx };

struct Dataset {
    Tensor features;  // [N x d]
    std::vector<int> labels;
    int num_classes = 0;
    DataProvenance provenance = DataProvenance::synthetic;
    std::string origin;  // seed/spec or file paths, for run snapshots

    int size() const { return features.rows(); }
    int dim() const { return features.cols(); }
};

inline void validate(const Dataset& ds) {
    if (ds.features.shape.size() != 2 || ds.size() <= 0)
        throw ShapeError("dataset: features must be a non-empty [N x d] matrix");
    if (static_cast<int>(ds.labels.size()) != ds.size())
        throw ShapeError("dataset: label count != sample count");
    for (int y : ds.labels)
        if (y < 0 || y >= ds.num_classes) throw ContractError("dataset: label out of range");
}

struct MixtureSpec {
    int num_classes = 20;
    int dim = 64;
    int clusters_per_class = 12;
    double cluster_std = 0.72;
    double inter_class_margin = 1.0;  // scale of cluster-center coordinates
    int train_size = 20000;
    int test_size = 4000;
    std::uint64_t seed = 1;

    void validate() const {
        if (num_classes < 2) throw ConfigError("mixture: num_classes must be at least 2");
        if (dim <= 0 || clusters_per_class <= 0 || train_size <= 0 || test_size <= 0)
            throw ConfigError("mixture: sizes must be positive");
        if (!(cluster_std > 0.0)) throw ConfigError("mixture: cluster_std must be positive");
        if (!(inter_class_margin > 0.0))
            throw ConfigError("mixture: inter_class_margin must be positive");
    }
};

namespace detail {

struct Gaussian {
    std::mt19937_64& rng;
    double spare = 0.0;
    bool has_spare = false;

    double uniform_open() {  // (0, 1)
        return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
    }

    double operator()() {
        if (has_spare) {
            has_spare = false;
            return spare;
        }
        const double u1 = uniform_open();
        const double u2 = uniform_open();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        spare = r * std::sin(a);
        has_spare = true;
        return r * std::cos(a);
    }
};

}  // namespace detail

// Cluster centers are drawn first, then train samples, then test samples,
// all from one seeded stream; labels cycle 0..C-1 so the class histogram is
// balanced within one sample.
inline std::pair<Dataset, Dataset> generate_mixture(const MixtureSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    detail::Gaussian gauss{rng};

    const int c = spec.num_classes, k = spec.clusters_per_class, d = spec.dim;
    std::vector<double> centers(static_cast<std::size_t>(c) * k * d);
    for (double& v : centers) v = spec.inter_class_margin * gauss();

    auto draw = [&](int n, DataProvenance prov) {
        Dataset ds;
        ds.features = Tensor::zeros({n, d});
        ds.labels.resize(static_cast<std::size_t>(n));
        ds.num_classes = c;
        ds.provenance = prov;
        for (int i = 0; i < n; ++i) {
            const int label = i % c;
            const int cluster = static_cast<int>(rng() % static_cast<std::uint64_t>(k));
            const double* mu = centers.data() + (static_cast<std::size_t>(label) * k + cluster) * d;
            double* row = ds.features.data.data() + static_cast<std::size_t>(i) * d;
            for (int j = 0; j < d; ++j) row[j] = mu[j] + spec.cluster_std * gauss();
            ds.labels[static_cast<std::size_t>(i)] = label;
        }
        return ds;
    };

    Dataset train = draw(spec.train_size, DataProvenance::synthetic);
    Dataset test = draw(spec.test_size, DataProvenance::synthetic);
    train.origin = "mixture seed " + std::to_string(spec.seed);
    test.origin = train.origin;
    return {std::move(train), std::move(test)};
}

// Per-dimension standardization with train statistics, applied to both splits.
inline void standardize(Dataset& train, Dataset& test) {
    validate(train);
    validate(test);
    if (train.dim() != test.dim()) throw ShapeError("standardize: train/test dims differ");
    const int n = train.size(), d = train.dim();
    std::vector<double> mean(static_cast<std::size_t>(d), 0.0), var(static_cast<std::size_t>(d), 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) mean[static_cast<std::size_t>(j)] += train.features.at(i, j);
    for (double& m : mean) m /= n;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) {
            const double dv = train.features.at(i, j) - mean[static_cast<std::size_t>(j)];
            var[static_cast<std::size_t>(j)] += dv * dv;
        }
    for (double& v : var) v = std::sqrt(v / n + 1e-8);
    auto apply = [&](Dataset& ds) {
        for (int i = 0; i < ds.size(); ++i)
            for (int j = 0; j < d; ++j)
                ds.features.at(i, j) =
                    (ds.features.at(i, j) - mean[static_cast<std::size_t>(j)]) / var[static_cast<std::size_t>(j)];
    };
    apply(train);
    apply(test);
}

// ---------------------------------------------------------------------------
// IDX binary format (big-endian headers, unsigned byte payload)
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint32_t read_u32_be(std::istream& is, const std::string& path) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (is.gcount() != 4) throw IdxLengthError("idx file truncated in header: " + path);
    return (static_cast<std::uint32_t>(b[0]) << 24) | (static_cast<std::uint32_t>(b[1]) << 16) |
           (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

inline void write_u32_be(std::ostream& os, std::uint32_t v) {
    const char b[4] = {static_cast<char>((v >> 24) & 0xff), static_cast<char>((v >> 16) & 0xff),
                       static_cast<char>((v >> 8) & 0xff), static_cast<char>(v & 0xff)};
    os.write(b, 4);
}

}  // namespace detail

inline constexpr std::uint32_t idx_image_magic = 0x00000803;
inline constexpr std::uint32_t idx_label_magic = 0x00000801;

inline Dataset read_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream imgs(images_path, std::ios::binary);
    if (!imgs) throw IoError("cannot open idx image file: " + images_path);
    if (detail::read_u32_be(imgs, images_path) != idx_image_magic)
        throw IdxFormatError("bad idx image magic: " + images_path);
    const std::uint32_t count = detail::read_u32_be(imgs, images_path);
    const std::uint32_t rows = detail::read_u32_be(imgs, images_path);
    const std::uint32_t cols = detail::read_u32_be(imgs, images_path);
    if (count == 0 || rows == 0 || cols == 0)
        throw IdxFormatError("idx image dims must be positive: " + images_path);
    const std::size_t pixels = static_cast<std::size_t>(count) * rows * cols;
    std::vector<unsigned char> buf(pixels);
    imgs.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(pixels));
    if (static_cast<std::size_t>(imgs.gcount()) != pixels)
        throw IdxLengthError("idx image payload truncated: " + images_path);

    std::ifstream labs(labels_path, std::ios::binary);
    if (!labs) throw IoError("cannot open idx label file: " + labels_path);
    if (detail::read_u32_be(labs, labels_path) != idx_label_magic)
        throw IdxFormatError("bad idx label magic: " + labels_path);
    const std::uint32_t label_count = detail::read_u32_be(labs, labels_path);
    if (label_count != count)
        throw IdxConsistencyError("idx image/label counts differ: " + images_path + " vs " +
                                  labels_path);
    std::vector<unsigned char> lab(label_count);
    labs.read(reinterpret_cast<char*>(lab.data()), static_cast<std::streamsize>(label_count));
    if (static_cast<std::size_t>(labs.gcount()) != label_count)
        throw IdxLengthError("idx label payload truncated: " + labels_path);

    Dataset ds;
    const int d = static_cast<int>(rows * cols);
    ds.features = Tensor::zeros({static_cast<int>(count), d});
    for (std::size_t i = 0; i < pixels; ++i) ds.features.data[i] = buf[i] / 255.0;
    ds.labels.resize(label_count);
    int max_label = 0;
    for (std::uint32_t i = 0; i < label_count; ++i) {
        ds.labels[i] = lab[i];
        max_label = std::max(max_label, ds.labels[i]);
    }
    ds.num_classes = max_label + 1;
    ds.provenance = DataProvenance::idx;
    ds.origin = images_path + " + " + labels_path;
    return ds;
}

inline void write_idx(const std::string& images_path, const std::string& labels_path,
                      const std::vector<std::uint8_t>& pixels, int count, int rows, int cols,
                      const std::vector<std::uint8_t>& labels) {
    if (count <= 0 || rows <= 0 || cols <= 0)
        throw ContractError("write_idx: dims must be positive");
    if (pixels.size() != static_cast<std::size_t>(count) * rows * cols)
        throw ContractError("write_idx: pixel buffer size mismatch");
    if (labels.size() != static_cast<std::size_t>(count))
        throw ContractError("write_idx: label buffer size mismatch");
    std::ofstream imgs(images_path, std::ios::binary);
    if (!imgs) throw IoError("cannot open idx image file for writing: " + images_path);
    detail::write_u32_be(imgs, idx_image_magic);
    detail::write_u32_be(imgs, static_cast<std::uint32_t>(count));
    detail::write_u32_be(imgs, static_cast<std::uint32_t>(rows));
    detail::write_u32_be(imgs, static_cast<std::uint32_t>(cols));
    imgs.write(reinterpret_cast<const char*>(pixels.data()),
               static_cast<std::streamsize>(pixels.size()));
    if (!imgs) throw IoError("idx image write failed: " + images_path);
    std::ofstream labs(labels_path, std::ios::binary);
    if (!labs) throw IoError("cannot open idx label file for writing: " + labels_path);
    detail::write_u32_be(labs, idx_label_magic);
    detail::write_u32_be(labs, static_cast<std::uint32_t>(count));
    labs.write(reinterpret_cast<const char*>(labels.data()),
               static_cast<std::streamsize>(labels.size()));
    if (!labs) throw IoError("idx label write failed: " + labels_path);
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

// Seeded Fisher-Yates permutation split into consecutive batches; the final
// partial batch is kept.
inline std::vector<std::vector<int>> epoch_batches(int n, int batch_size, std::uint64_t epoch_seed) {
    if (n <= 0) throw ContractError("epoch_batches: empty dataset");
    if (batch_size < 1) throw ContractError("epoch_batches: batch_size must be at least 1");
    std::vector<int> perm(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
    std::mt19937_64 rng(epoch_seed);
    for (int i = n - 1; i > 0; --i) {
        const int j = static_cast<int>(rng() % static_cast<std::uint64_t>(i + 1));
        std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
    }
    std::vector<std::vector<int>> out;
    for (int start = 0; start < n; start += batch_size) {
        const int stop = std::min(n, start + batch_size);
        out.emplace_back(perm.begin() + start, perm.begin() + stop);
    }
    return out;
}

struct Batch {
    Tensor features;
    std::vector<int> labels;
    std::vector<int> indices;  // rows of the parent dataset, for cached logits
};

inline std::vector<Batch> batches(const Dataset& ds, int batch_size, std::uint64_t epoch_seed) {
    validate(ds);
    std::vector<Batch> out;
    for (auto& idx : epoch_batches(ds.size(), batch_size, epoch_seed)) {
        Batch b;
        b.features = take_rows(ds.features, idx);
        b.labels.reserve(idx.size());
        for (int i : idx) b.labels.push_back(ds.labels[static_cast<std::size_t>(i)]);
        b.indices = std::move(idx);
        out.push_back(std::move(b));
    }
    return out;
}

}  // namespace kd
