#pragma once
// Evaluation metrics and the per-epoch metrics table. One argmax routine
// backs both accuracy and agreement so the tie rule cannot drift.

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "kd/errors.hpp"
#include "kd/tensor.hpp"

namespace kd {

// Ties break toward the lowest index.
inline int argmax_row(const Tensor& m, int row) {
    if (m.shape.size() != 2) throw ShapeError("argmax_row: matrix expected");
    int best = 0;
    for (int j = 1; j < m.cols(); ++j)
        if (m.at(row, j) > m.at(row, best)) best = j;
    return best;
}

inline double top1_accuracy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.shape.size() != 2) throw ShapeError("top1_accuracy: logits must be [N x C]");
    if (static_cast<int>(labels.size()) != logits.rows())
        throw ShapeError("top1_accuracy: label count != rows");
    int hit = 0;
    for (int i = 0; i < logits.rows(); ++i)
        if (argmax_row(logits, i) == labels[static_cast<std::size_t>(i)]) ++hit;
    return static_cast<double>(hit) / logits.rows();
}

inline double prediction_agreement(const Tensor& logits_a, const Tensor& logits_b) {
    if (logits_a.shape != logits_b.shape || logits_a.shape.size() != 2)
        throw ShapeError("prediction_agreement: shapes must match [N x C]");
    int same = 0;
    for (int i = 0; i < logits_a.rows(); ++i)
        if (argmax_row(logits_a, i) == argmax_row(logits_b, i)) ++same;
    return static_cast<double>(same) / logits_a.rows();
}

// Mean over rows of <a, b> / (|a| |b|); rows are probability vectors.
inline double cosine_similarity(const Tensor& probs_a, const Tensor& probs_b) {
    if (probs_a.shape != probs_b.shape || probs_a.shape.size() != 2)
        throw ShapeError("cosine_similarity: shapes must match [N x C]");
    double acc = 0.0;
    for (int i = 0; i < probs_a.rows(); ++i) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (int j = 0; j < probs_a.cols(); ++j) {
            const double a = probs_a.at(i, j), b = probs_b.at(i, j);
            dot += a * b;
            na += a * a;
            nb += b * b;
        }
        if (na == 0.0 || nb == 0.0)
            throw NumericError("cosine_similarity: zero-norm row");
        acc += dot / (std::sqrt(na) * std::sqrt(nb));
    }
    return acc / probs_a.rows();
}

struct EpochRow {
    int epoch = 0;
    double lr = 0.0;
    double warmup = 0.0;
    double ce = 0.0;
    double tckd = 0.0;
    double nckd = 0.0;
    double aekt = 0.0;
    double total = 0.0;
    double test_acc = 0.0;
};

namespace detail {

// Shortest decimal form that parses back to the same double.
inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    double back = 0.0;
    std::sscanf(buf, "%lf", &back);
    for (int prec = 1; prec <= 16; ++prec) {
        char probe[40];
        std::snprintf(probe, sizeof(probe), "%.*g", prec, v);
        std::sscanf(probe, "%lf", &back);
        if (back == v) return probe;
    }
    return buf;
}

}  // namespace detail

struct RunMetrics {
    std::vector<EpochRow> rows;
    double final_cosine = -2.0;     // -2 marks "not measured"
    double final_agreement = -1.0;
    double head_diag_mean_abs = -1.0;
    double head_offdiag_mean_abs = -1.0;

    std::string to_csv() const {
        std::string out = "epoch,lr,warmup,ce,tckd,nckd,aekt,total,test_acc\n";
        for (const EpochRow& r : rows) {
            out += std::to_string(r.epoch);
            for (double v : {r.lr, r.warmup, r.ce, r.tckd, r.nckd, r.aekt, r.total, r.test_acc}) {
                out += ',';
                out += detail::fmt_double(v);
            }
            out += '\n';
        }
        return out;
    }

    std::string summary_text() const {
        std::string out;
        if (!rows.empty()) {
            out += "epochs " + std::to_string(rows.size()) + "\n";
            out += "final_test_acc " + detail::fmt_double(rows.back().test_acc) + "\n";
            out += "final_total_loss " + detail::fmt_double(rows.back().total) + "\n";
        }
        if (final_cosine >= -1.0) out += "cosine_similarity " + detail::fmt_double(final_cosine) + "\n";
        if (final_agreement >= 0.0) out += "agreement " + detail::fmt_double(final_agreement) + "\n";
        if (head_diag_mean_abs >= 0.0) {
            out += "head_diag_mean_abs " + detail::fmt_double(head_diag_mean_abs) + "\n";
            out += "head_offdiag_mean_abs " + detail::fmt_double(head_offdiag_mean_abs) + "\n";
        }
        return out;
    }
};

}  // namespace kd
