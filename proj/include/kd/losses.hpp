#pragma once
// Distillation losses over the tape engine. Each family has a per-row form
// (KL per sample at the working temperature, no T^2 factor) and a scalar
// form (mean over rows, scaled by T^2). Cross-entropy always runs at
// temperature 1 on the class logits.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "kd/errors.hpp"
#include "kd/oracles.hpp"
#include "kd/tensor.hpp"

namespace kd {

struct DistillBatch {
    Tensor teacher_logits;          // [N x C], constant
    Tensor student_distill_logits;  // [N x C], post-head when serialization is on
    Tensor student_class_logits;    // [N x C], pre-head, feeds cross-entropy
    std::vector<int> targets;       // N entries in [0, C)
};

inline void validate(const DistillBatch& b) {
    if (b.teacher_logits.shape.size() != 2 || b.student_distill_logits.shape.size() != 2 ||
        b.student_class_logits.shape.size() != 2)
        throw ShapeError("distill batch: logits must be [N x C]");
    if (b.teacher_logits.shape != b.student_distill_logits.shape ||
        b.teacher_logits.shape != b.student_class_logits.shape)
        throw ShapeError("distill batch: logit shapes disagree");
    const int n = b.teacher_logits.rows();
    const int c = b.teacher_logits.cols();
    if (static_cast<int>(b.targets.size()) != n)
        throw ShapeError("distill batch: target count != batch rows");
    if (c < 2) throw ShapeError("distill batch: needs at least 2 classes");
    for (int t : b.targets)
        if (t < 0 || t >= c) throw ContractError("distill batch: target index out of range");
}

enum class Serialization { off, linear, two_layer };

struct DistillConfig {
    double alpha = 1.0;
    double beta = 1.0;
    double gamma = 1.0;
    double temperature = 4.0;
    double ce_weight = 1.0;
    bool ablate_target_confidence_term = false;
    Serialization serialization = Serialization::off;
    int head_width = 0;          // hidden width of the two-layer head
    bool head_nonlinear = false;  // PReLU(0.25) after the hidden layer

    void validate() const {
        if (!(temperature > 0.0)) throw ConfigError("distill: temperature must be positive");
        if (alpha < 0.0 || beta < 0.0 || gamma < 0.0 || ce_weight < 0.0)
            throw ConfigError("distill: loss weights must be non-negative");
        if (serialization == Serialization::two_layer && head_width <= 0)
            throw ConfigError("distill: two-layer head needs a positive width");
    }
};

namespace detail {

// Clamped probabilities and their logs for one side of the batch.
struct BatchProbs {
    Tensor log_probs;    // [N x C]
    Tensor probs;        // [N x C]
    Tensor target;       // [N] clamped p_t
    Tensor nontarget;    // [N] clamped sum of non-target p_i
};

inline std::vector<std::uint8_t> nontarget_mask(int n, int c, const std::vector<int>& targets) {
    std::vector<std::uint8_t> m(static_cast<std::size_t>(n) * static_cast<std::size_t>(c), 1);
    for (int r = 0; r < n; ++r)
        m[static_cast<std::size_t>(r) * static_cast<std::size_t>(c) +
          static_cast<std::size_t>(targets[static_cast<std::size_t>(r)])] = 0;
    return m;
}

inline BatchProbs batch_probs(const Tensor& logits, const std::vector<int>& targets, double temperature) {
    BatchProbs bp;
    bp.log_probs = log_softmax(logits, temperature);
    bp.probs = exp(bp.log_probs);
    bp.target = clamp(gather(bp.probs, targets), prob_floor, 1.0);
    const auto mask = nontarget_mask(logits.rows(), logits.cols(), targets);
    bp.nontarget = clamp(row_sum(masked_select(bp.probs, mask)), prob_floor, 1.0);
    return bp;
}

}  // namespace detail

// Per-row KL(p^T || p^S) at temperature T.
inline Tensor kd_rows(const DistillBatch& b, double temperature) {
    validate(b);
    const Tensor log_pt = log_softmax(b.teacher_logits, temperature);
    const Tensor pt = exp(log_pt);
    const Tensor log_ps = log_softmax(b.student_distill_logits, temperature);
    return row_sum(pt * (log_pt - log_ps));
}

// Per-row binary KL over (target mass, non-target mass).
inline Tensor tckd_rows(const DistillBatch& b, double temperature) {
    validate(b);
    const auto teacher = detail::batch_probs(b.teacher_logits, b.targets, temperature);
    const auto student = detail::batch_probs(b.student_distill_logits, b.targets, temperature);
    return teacher.target * (log(teacher.target) - log(student.target)) +
           teacher.nontarget * (log(teacher.nontarget) - log(student.nontarget));
}

// Per-row KL between re-normalized non-target distributions; zero at C=2.
inline Tensor nckd_rows(const DistillBatch& b, double temperature) {
    validate(b);
    const int n = b.teacher_logits.rows();
    const int c = b.teacher_logits.cols();
    if (c == 2) return Tensor::zeros({n});
    const auto mask = detail::nontarget_mask(n, c, b.targets);
    const Tensor log_pt = log_softmax(masked_select(b.teacher_logits, mask), temperature);
    const Tensor pt = exp(log_pt);
    const Tensor log_ps = log_softmax(masked_select(b.student_distill_logits, mask), temperature);
    return row_sum(pt * (log_pt - log_ps));
}

// Per-row log(p_t^T / p_t^S) * (1 - 2^(1 - p_t^T / detached p_t^S)).
inline Tensor aekt_rows(const DistillBatch& b, double temperature,
                        bool ablate_target_confidence_term = false) {
    validate(b);
    const Tensor log_tt = log_prob_target(b.teacher_logits, b.targets, temperature);
    const Tensor tt = clamp(exp(log_tt), prob_floor, 1.0);
    const Tensor log_ts =
        log_prob_target(b.student_distill_logits, b.targets, temperature, ablate_target_confidence_term);
    const Tensor frozen = clamp(exp(detach(log_ts)), prob_floor, 1.0);
    const Tensor factor = 1.0 - exp2(1.0 - tt / frozen);  // constant on the tape
    return (log_tt - log_ts) * factor;
}

inline Tensor cross_entropy(const Tensor& class_logits, const std::vector<int>& targets) {
    if (class_logits.shape.size() != 2) throw ShapeError("cross_entropy: logits must be [N x C]");
    if (static_cast<int>(targets.size()) != class_logits.rows())
        throw ShapeError("cross_entropy: target count != batch rows");
    return -mean(log_prob_target(class_logits, targets, 1.0));
}

inline Tensor kd_loss(const DistillBatch& b, double temperature) {
    return mean(kd_rows(b, temperature)) * (temperature * temperature);
}

inline Tensor tckd_loss(const DistillBatch& b, double temperature) {
    return mean(tckd_rows(b, temperature)) * (temperature * temperature);
}

inline Tensor nckd_loss(const DistillBatch& b, double temperature) {
    return mean(nckd_rows(b, temperature)) * (temperature * temperature);
}

inline Tensor aekt_loss(const DistillBatch& b, double temperature,
                        bool ablate_target_confidence_term = false) {
    return mean(aekt_rows(b, temperature, ablate_target_confidence_term)) *
           (temperature * temperature);
}

inline Tensor dkd_loss(const DistillBatch& b, const DistillConfig& cfg) {
    return cfg.alpha * tckd_loss(b, cfg.temperature) + cfg.beta * nckd_loss(b, cfg.temperature);
}

// Classic KD assembled from its decomposition: TCKD + p_nt^T * NCKD per row.
// Matches kd_loss to rounding error; the identity is exercised in tests.
inline Tensor kd_loss_decomposed(const DistillBatch& b, double temperature) {
    validate(b);
    const auto teacher = detail::batch_probs(b.teacher_logits, b.targets, temperature);
    const Tensor rows = tckd_rows(b, temperature) + teacher.nontarget * nckd_rows(b, temperature);
    return mean(rows) * (temperature * temperature);
}

struct TotalLossResult {
    Tensor total;  // tracked scalar
    double ce = 0.0;
    double tckd = 0.0;
    double nckd = 0.0;
    double aekt = 0.0;
};

// ce_weight * CE + warmup * (alpha * TCKD + beta * NCKD + gamma * AEKT).
// The breakdown records the unweighted per-term values.
inline TotalLossResult total_loss(const DistillBatch& b, const DistillConfig& cfg,
                                  double warmup_factor) {
    cfg.validate();
    if (!(warmup_factor >= 0.0 && warmup_factor <= 1.0))
        throw ContractError("total_loss: warmup factor outside [0,1]");
    TotalLossResult r;
    const Tensor ce = cross_entropy(b.student_class_logits, b.targets);
    const Tensor tc = tckd_loss(b, cfg.temperature);
    const Tensor nc = nckd_loss(b, cfg.temperature);
    const Tensor ae = aekt_loss(b, cfg.temperature, cfg.ablate_target_confidence_term);
    r.ce = ce.item();
    r.tckd = tc.item();
    r.nckd = nc.item();
    r.aekt = ae.item();
    r.total = cfg.ce_weight * ce + warmup_factor * (cfg.alpha * tc + cfg.beta * nc + cfg.gamma * ae);
    return r;
}

}  // namespace kd
