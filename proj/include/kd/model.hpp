#pragma once
// Small dense networks and the task-serialization head, plus checkpoint
// persistence. Weights are stored [in x out] so a forward pass is x*W + b.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "kd/errors.hpp"
#include "kd/tensor.hpp"

namespace kd {

namespace detail {

// Uniform in [0,1) built from the top 53 bits; keeps init draws identical
// across standard library implementations.
inline double unit_uniform(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline Tensor he_uniform(int fan_in, int fan_out, std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    Tensor w = Tensor::zeros({fan_in, fan_out});
    for (double& v : w.data) v = (2.0 * unit_uniform(rng) - 1.0) * limit;
    return w;
}

}  // namespace detail

class Mlp {
  public:
    std::vector<int> layer_dims;  // input, hidden..., classes
    std::vector<Tensor> weights;
    std::vector<Tensor> biases;

    static Mlp init(std::vector<int> dims, std::uint64_t seed) {
        if (dims.size() < 2) throw ContractError("mlp: needs at least input and output dims");
        for (int d : dims)
            if (d <= 0) throw ContractError("mlp: layer dims must be positive");
        Mlp m;
        m.layer_dims = std::move(dims);
        std::mt19937_64 rng(seed);
        for (std::size_t l = 0; l + 1 < m.layer_dims.size(); ++l) {
            m.weights.push_back(detail::he_uniform(m.layer_dims[l], m.layer_dims[l + 1], rng));
            m.biases.push_back(Tensor::zeros({m.layer_dims[l + 1]}));
        }
        return m;
    }

    int input_dim() const { return layer_dims.front(); }
    int num_classes() const { return layer_dims.back(); }

    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> ps;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            ps.push_back(&weights[l]);
            ps.push_back(&biases[l]);
        }
        return ps;
    }

    // Inference pass on stored (untracked) parameters.
    Tensor forward(const Tensor& x) const { return forward_impl(x, weights, biases); }

    // Training pass; parameters become tape leaves, returned in declaration
    // order (W0, b0, W1, b1, ...) so gradients line up with parameters().
    Tensor forward(Tape& tape, const Tensor& x, std::vector<Tensor>* leaves) const {
        std::vector<Tensor> ws, bs;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            ws.push_back(tape.leaf(weights[l]));
            bs.push_back(tape.leaf(biases[l]));
            if (leaves) {
                leaves->push_back(ws.back());
                leaves->push_back(bs.back());
            }
        }
        return forward_impl(x, ws, bs);
    }

  private:
    Tensor forward_impl(const Tensor& x, const std::vector<Tensor>& ws,
                        const std::vector<Tensor>& bs) const {
        if (x.shape.size() != 2 || x.cols() != input_dim())
            throw ShapeError("mlp: input must be [N x input_dim]");
        Tensor h = x;
        for (std::size_t l = 0; l < ws.size(); ++l) {
            h = add_rowvec(matmul(h, ws[l]), bs[l]);
            if (l + 1 < ws.size()) h = relu(h);
        }
        return h;
    }
};

enum class HeadVariant { linear, two_layer };

// Training-only map from class logits to distillation logits. The linear
// variant starts as the identity so it is transparent until updated.
class SerializationHead {
  public:
    static constexpr double prelu_slope = 0.25;

    HeadVariant variant = HeadVariant::linear;
    int num_classes = 0;
    int hidden_width = 0;
    bool nonlinear = false;
    std::vector<Tensor> weights;
    std::vector<Tensor> biases;

    static SerializationHead identity_linear(int num_classes) {
        if (num_classes < 2) throw ContractError("head: needs at least 2 classes");
        SerializationHead h;
        h.variant = HeadVariant::linear;
        h.num_classes = num_classes;
        Tensor w = Tensor::zeros({num_classes, num_classes});
        for (int i = 0; i < num_classes; ++i) w.at(i, i) = 1.0;
        h.weights.push_back(std::move(w));
        h.biases.push_back(Tensor::zeros({num_classes}));
        return h;
    }

    static SerializationHead two_layer_init(int num_classes, int hidden_width, bool nonlinear,
                                            std::uint64_t seed) {
        if (num_classes < 2) throw ContractError("head: needs at least 2 classes");
        if (hidden_width <= 0) throw ContractError("head: hidden width must be positive");
        SerializationHead h;
        h.variant = HeadVariant::two_layer;
        h.num_classes = num_classes;
        h.hidden_width = hidden_width;
        h.nonlinear = nonlinear;
        std::mt19937_64 rng(seed);
        h.weights.push_back(detail::he_uniform(num_classes, hidden_width, rng));
        h.biases.push_back(Tensor::zeros({hidden_width}));
        // Second layer starts at zero: the head begins as a zero map and the
        // optimizer grows its influence. Random-random stacking here can push
        // the initial gain past 1 and blow up under momentum.
        h.weights.push_back(Tensor::zeros({hidden_width, num_classes}));
        h.biases.push_back(Tensor::zeros({num_classes}));
        return h;
    }

    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> ps;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            ps.push_back(&weights[l]);
            ps.push_back(&biases[l]);
        }
        return ps;
    }

    Tensor forward(const Tensor& class_logits) const {
        return forward_impl(class_logits, weights, biases);
    }

    Tensor forward(Tape& tape, const Tensor& class_logits, std::vector<Tensor>* leaves) const {
        std::vector<Tensor> ws, bs;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            ws.push_back(tape.leaf(weights[l]));
            bs.push_back(tape.leaf(biases[l]));
            if (leaves) {
                leaves->push_back(ws.back());
                leaves->push_back(bs.back());
            }
        }
        return forward_impl(class_logits, ws, bs);
    }

  private:
    Tensor forward_impl(const Tensor& z, const std::vector<Tensor>& ws,
                        const std::vector<Tensor>& bs) const {
        if (z.shape.size() != 2 || z.cols() != num_classes)
            throw ShapeError("head: input must be [N x num_classes]");
        Tensor h = add_rowvec(matmul(z, ws[0]), bs[0]);
        if (variant == HeadVariant::two_layer) {
            if (nonlinear) h = prelu(h, prelu_slope);
            h = add_rowvec(matmul(h, ws[1]), bs[1]);
        }
        return h;
    }
};

inline Tensor serialize(const SerializationHead& head, const Tensor& class_logits) {
    return head.forward(class_logits);
}

// ---------------------------------------------------------------------------
// head weight export
// ---------------------------------------------------------------------------

struct HeadExport {
    Tensor weight;  // [C x C], row = source class, col = destination class
    Tensor bias;    // [C]
    std::vector<std::vector<std::pair<int, double>>> top;  // per source class, by |w|
    double diag_mean_abs = 0.0;
    double offdiag_mean_abs = 0.0;
};

inline HeadExport export_head_weights(const SerializationHead& head, int top_k = 20) {
    if (head.variant != HeadVariant::linear)
        throw ContractError("export_head_weights: unsupported variant (linear only)");
    HeadExport e;
    e.weight = head.weights[0];
    e.bias = head.biases[0];
    const int c = head.num_classes;
    const int k = std::min(top_k, c);
    double diag = 0.0, off = 0.0;
    for (int i = 0; i < c; ++i) {
        std::vector<std::pair<int, double>> row;
        for (int j = 0; j < c; ++j) {
            row.emplace_back(j, e.weight.at(i, j));
            if (i == j)
                diag += std::fabs(e.weight.at(i, j));
            else
                off += std::fabs(e.weight.at(i, j));
        }
        std::stable_sort(row.begin(), row.end(), [](const auto& a, const auto& b) {
            return std::fabs(a.second) > std::fabs(b.second);
        });
        row.resize(static_cast<std::size_t>(k));
        e.top.push_back(std::move(row));
    }
    e.diag_mean_abs = diag / c;
    e.offdiag_mean_abs = c > 1 ? off / (static_cast<double>(c) * (c - 1)) : 0.0;
    return e;
}

// ---------------------------------------------------------------------------
// checkpoints: text header, then raw little-endian f64 in declaration order
// ---------------------------------------------------------------------------

namespace detail {

inline void put_f64_le(std::ostream& os, double v) {
    const auto u = std::bit_cast<std::uint64_t>(v);
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((u >> (8 * i)) & 0xff);
    os.write(b, 8);
}

inline double get_f64_le(std::istream& is, const std::string& path) {
    char b[8];
    is.read(b, 8);
    if (is.gcount() != 8) throw IoError("checkpoint truncated: " + path);
    std::uint64_t u = 0;
    for (int i = 0; i < 8; ++i)
        u |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return std::bit_cast<double>(u);
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Mlp& model,
                            const SerializationHead* head, std::uint64_t seed, int epoch) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path);
    os << "kdckpt 1\n";
    os << "layers";
    for (int d : model.layer_dims) os << ' ' << d;
    os << '\n';
    if (!head)
        os << "head none\n";
    else if (head->variant == HeadVariant::linear)
        os << "head linear\n";
    else
        os << "head two_layer " << head->hidden_width << ' ' << (head->nonlinear ? 1 : 0) << '\n';
    os << "seed " << seed << '\n';
    os << "epoch " << epoch << '\n';
    std::size_t count = 0;
    for (const Tensor& w : model.weights) count += w.size();
    for (const Tensor& b : model.biases) count += b.size();
    auto head_tensors = [&]() {
        std::vector<const Tensor*> ts;
        if (head)
            for (std::size_t l = 0; l < head->weights.size(); ++l) {
                ts.push_back(&head->weights[l]);
                ts.push_back(&head->biases[l]);
            }
        return ts;
    }();
    for (const Tensor* t : head_tensors) count += t->size();
    os << "floats " << count << '\n';
    for (std::size_t l = 0; l < model.weights.size(); ++l) {
        for (double v : model.weights[l].data) detail::put_f64_le(os, v);
        for (double v : model.biases[l].data) detail::put_f64_le(os, v);
    }
    for (const Tensor* t : head_tensors)
        for (double v : t->data) detail::put_f64_le(os, v);
    if (!os) throw IoError("checkpoint write failed: " + path);
}

struct LoadedCheckpoint {
    Mlp model;
    std::optional<SerializationHead> head;
    std::uint64_t seed = 0;
    int epoch = 0;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    std::string line;
    auto next_line = [&]() {
        if (!std::getline(is, line)) throw IoError("checkpoint header truncated: " + path);
        return line;
    };
    if (next_line() != "kdckpt 1") throw IoError("bad checkpoint magic: " + path);

    std::istringstream layers(next_line());
    std::string key;
    layers >> key;
    if (key != "layers") throw IoError("checkpoint missing layers line: " + path);
    std::vector<int> dims;
    for (int d; layers >> d;) dims.push_back(d);
    if (dims.size() < 2) throw IoError("checkpoint layers line malformed: " + path);

    std::istringstream headline(next_line());
    headline >> key;
    if (key != "head") throw IoError("checkpoint missing head line: " + path);
    std::string kind;
    headline >> kind;
    int head_width = 0, head_nl = 0;
    if (kind == "two_layer" && !(headline >> head_width >> head_nl))
        throw IoError("checkpoint head line malformed: " + path);
    if (kind != "none" && kind != "linear" && kind != "two_layer")
        throw IoError("checkpoint head kind unknown: " + path);

    LoadedCheckpoint out;
    std::istringstream seedline(next_line());
    seedline >> key >> out.seed;
    if (key != "seed") throw IoError("checkpoint missing seed line: " + path);
    std::istringstream epochline(next_line());
    epochline >> key >> out.epoch;
    if (key != "epoch") throw IoError("checkpoint missing epoch line: " + path);
    std::istringstream floatline(next_line());
    std::size_t declared = 0;
    floatline >> key >> declared;
    if (key != "floats") throw IoError("checkpoint missing floats line: " + path);

    out.model = Mlp::init(dims, 0);
    const int c = dims.back();
    if (kind == "linear")
        out.head = SerializationHead::identity_linear(c);
    else if (kind == "two_layer")
        out.head = SerializationHead::two_layer_init(c, head_width, head_nl != 0, 0);

    std::size_t expect = 0;
    for (const Tensor& w : out.model.weights) expect += w.size();
    for (const Tensor& b : out.model.biases) expect += b.size();
    if (out.head)
        for (std::size_t l = 0; l < out.head->weights.size(); ++l)
            expect += out.head->weights[l].size() + out.head->biases[l].size();
    if (declared != expect)
        throw IoError("checkpoint float count mismatch: " + path);

    for (std::size_t l = 0; l < out.model.weights.size(); ++l) {
        for (double& v : out.model.weights[l].data) v = detail::get_f64_le(is, path);
        for (double& v : out.model.biases[l].data) v = detail::get_f64_le(is, path);
    }
    if (out.head)
        for (std::size_t l = 0; l < out.head->weights.size(); ++l) {
            for (double& v : out.head->weights[l].data) v = detail::get_f64_le(is, path);
            for (double& v : out.head->biases[l].data) v = detail::get_f64_le(is, path);
        }
    return out;
}

}  // namespace kd
