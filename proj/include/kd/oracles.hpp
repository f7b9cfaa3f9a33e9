#pragma once
// Closed-form gradients of the distillation losses with respect to the
// student logits, implemented independently of the tape engine so they can
// serve as ground truth. All functions consume probability vectors that are
// already at the working temperature; the caller accounts for temperature
// scaling at the comparison site.
//
// Conventions, with t the target class and p_nt = sum_{i != t} p_i:
//   KD     : g_i = p_i^S - p_i^T
//   TCKD   : g_t = p_t^S - p_t^T,  g_i = (1 - p_nt^T / p_nt^S) p_i^S
//   NCKD   : g_t = 0 exactly,      g_i = p_i^S / p_nt^S - p_i^T / p_nt^T
//   DKD    : alpha * TCKD + beta * NCKD
//   AEKT   : with F = 1 - 2^(1 - p_t^T / p_t^S):
//            g_t = -(1 - p_t^S) F   (or -F when the target-confidence
//            factor is ablated), g_i = F p_i^S
//   total  : alpha * TCKD + beta * NCKD + gamma * AEKT

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "kd/errors.hpp"
#include "kd/tensor.hpp"

namespace kd {

inline constexpr double prob_floor = 1e-12;

enum class LossKind { kd, tckd, nckd, dkd, aekt, total_distill };

inline const char* loss_kind_name(LossKind k) {
    switch (k) {
        case LossKind::kd: return "kd";
        case LossKind::tckd: return "tckd";
        case LossKind::nckd: return "nckd";
        case LossKind::dkd: return "dkd";
        case LossKind::aekt: return "aekt";
        case LossKind::total_distill: return "total_distill";
    }
    return "?";
}

struct GradVector {
    std::vector<double> values;  // one component per student logit
    LossKind loss_kind;
    bool clamped = false;  // a probability hit the clamp floor on the way
};

// |a - b| / max(|a|, |b|, 1e-5). The floor sets the scale below which the
// comparison is absolute; it sits an order of magnitude above the intrinsic
// noise of a central difference at h = 1e-5 (loss round-off / h ~ 1e-10),
// so near-zero components are still held to 1e-9 absolute agreement.
inline double relative_error(double a, double b) {
    const double denom = std::max({std::fabs(a), std::fabs(b), 1e-5});
    return std::fabs(a - b) / denom;
}

namespace detail {

inline void check_probability(const std::vector<double>& p, const char* who) {
    if (p.size() < 2) throw ContractError(std::string(who) + ": needs at least 2 classes");
    double s = 0.0;
    for (double v : p) {
        if (!(v >= 0.0 && v <= 1.0)) throw ContractError(std::string(who) + ": entry outside [0,1]");
        s += v;
    }
    if (std::fabs(s - 1.0) > 1e-9) throw ContractError(std::string(who) + ": not normalized");
}

inline void check_target(const std::vector<double>& p, int t, const char* who) {
    if (t < 0 || t >= static_cast<int>(p.size()))
        throw ContractError(std::string(who) + ": target index out of range");
}

inline double clamp_prob(double v, bool& flagged) {
    if (v < prob_floor) {
        flagged = true;
        return prob_floor;
    }
    return std::min(v, 1.0);
}

inline double nontarget_mass(const std::vector<double>& p, int t) {
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i)
        if (static_cast<int>(i) != t) s += p[i];
    return s;
}

}  // namespace detail

// Reference logits -> probabilities conversion. Deliberately accumulates in
// long double and in reverse index order so its rounding path differs from
// the tape's softmax.
inline std::vector<double> probs_from_logits_ref(const std::vector<double>& z, double temperature) {
    if (temperature <= 0.0) throw ContractError("probs_from_logits_ref: temperature must be positive");
    if (z.size() < 2) throw ContractError("probs_from_logits_ref: needs at least 2 classes");
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    long double denom = 0.0L;
    std::vector<long double> e(z.size());
    for (std::size_t i = z.size(); i-- > 0;) {
        e[i] = std::exp(static_cast<long double>((z[i] - mx) / temperature));
        denom += e[i];
    }
    std::vector<double> p(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) p[i] = static_cast<double>(e[i] / denom);
    return p;
}

// ---------------------------------------------------------------------------
// gradient formulas
// ---------------------------------------------------------------------------

inline GradVector grad_kd(const std::vector<double>& p_t, const std::vector<double>& p_s) {
    detail::check_probability(p_t, "grad_kd");
    detail::check_probability(p_s, "grad_kd");
    if (p_t.size() != p_s.size()) throw ShapeError("grad_kd: class counts differ");
    GradVector g{std::vector<double>(p_s.size()), LossKind::kd, false};
    for (std::size_t i = 0; i < p_s.size(); ++i) g.values[i] = p_s[i] - p_t[i];
    return g;
}

inline GradVector grad_tckd(const std::vector<double>& p_t, const std::vector<double>& p_s, int t) {
    detail::check_probability(p_t, "grad_tckd");
    detail::check_probability(p_s, "grad_tckd");
    if (p_t.size() != p_s.size()) throw ShapeError("grad_tckd: class counts differ");
    detail::check_target(p_s, t, "grad_tckd");
    GradVector g{std::vector<double>(p_s.size()), LossKind::tckd, false};
    const double nt_teacher = detail::nontarget_mass(p_t, t);
    const double nt_student = detail::clamp_prob(detail::nontarget_mass(p_s, t), g.clamped);
    const double ratio = nt_teacher / nt_student;
    for (std::size_t i = 0; i < p_s.size(); ++i) {
        if (static_cast<int>(i) == t)
            g.values[i] = p_s[i] - p_t[i];
        else
            g.values[i] = (1.0 - ratio) * p_s[i];
    }
    return g;
}

inline GradVector grad_nckd(const std::vector<double>& p_t, const std::vector<double>& p_s, int t) {
    detail::check_probability(p_t, "grad_nckd");
    detail::check_probability(p_s, "grad_nckd");
    if (p_t.size() != p_s.size()) throw ShapeError("grad_nckd: class counts differ");
    detail::check_target(p_s, t, "grad_nckd");
    GradVector g{std::vector<double>(p_s.size(), 0.0), LossKind::nckd, false};
    if (p_s.size() == 2) return g;  // singleton non-target distribution
    const double nt_teacher = detail::clamp_prob(detail::nontarget_mass(p_t, t), g.clamped);
    const double nt_student = detail::clamp_prob(detail::nontarget_mass(p_s, t), g.clamped);
    for (std::size_t i = 0; i < p_s.size(); ++i) {
        if (static_cast<int>(i) == t) continue;  // exactly zero
        g.values[i] = p_s[i] / nt_student - p_t[i] / nt_teacher;
    }
    return g;
}

inline GradVector grad_dkd(const std::vector<double>& p_t, const std::vector<double>& p_s, int t,
                           double alpha, double beta) {
    detail::check_probability(p_t, "grad_dkd");
    detail::check_probability(p_s, "grad_dkd");
    if (p_t.size() != p_s.size()) throw ShapeError("grad_dkd: class counts differ");
    detail::check_target(p_s, t, "grad_dkd");
    GradVector g{std::vector<double>(p_s.size()), LossKind::dkd, false};
    const double nt_teacher = detail::clamp_prob(detail::nontarget_mass(p_t, t), g.clamped);
    const double nt_student = detail::clamp_prob(detail::nontarget_mass(p_s, t), g.clamped);
    const bool binary = p_s.size() == 2;
    for (std::size_t i = 0; i < p_s.size(); ++i) {
        if (static_cast<int>(i) == t) {
            g.values[i] = alpha * (p_s[i] - p_t[i]);
        } else if (binary) {
            g.values[i] = alpha * (1.0 - nt_teacher / nt_student) * p_s[i];
        } else {
            g.values[i] = (alpha * (1.0 - nt_teacher / nt_student) + beta / nt_student) * p_s[i] -
                          (beta / nt_teacher) * p_t[i];
        }
    }
    return g;
}

// F = 1 - 2^(1 - p_t^T / p_t^S); strictly increasing in the confidence
// ratio, zero at ratio 1, bounded in (-1, 1).
inline double aekt_factor(double target_prob_teacher, double target_prob_student) {
    bool dummy = false;
    const double ps = detail::clamp_prob(target_prob_student, dummy);
    return 1.0 - std::exp2(1.0 - target_prob_teacher / ps);
}

inline GradVector grad_aekt(const std::vector<double>& p_t, const std::vector<double>& p_s, int t,
                            bool ablate_target_confidence_term = false) {
    detail::check_probability(p_t, "grad_aekt");
    detail::check_probability(p_s, "grad_aekt");
    if (p_t.size() != p_s.size()) throw ShapeError("grad_aekt: class counts differ");
    detail::check_target(p_s, t, "grad_aekt");
    GradVector g{std::vector<double>(p_s.size()), LossKind::aekt, false};
    const double f = aekt_factor(p_t[static_cast<std::size_t>(t)], p_s[static_cast<std::size_t>(t)]);
    for (std::size_t i = 0; i < p_s.size(); ++i) {
        if (static_cast<int>(i) == t)
            g.values[i] = ablate_target_confidence_term ? -f : -(1.0 - p_s[i]) * f;
        else
            g.values[i] = f * p_s[i];
    }
    return g;
}

inline GradVector grad_total_distill(const std::vector<double>& p_t, const std::vector<double>& p_s,
                                     int t, double alpha, double beta, double gamma,
                                     bool ablate_target_confidence_term = false) {
    GradVector a = grad_tckd(p_t, p_s, t);
    GradVector b = grad_nckd(p_t, p_s, t);
    GradVector c = grad_aekt(p_t, p_s, t, ablate_target_confidence_term);
    GradVector g{std::vector<double>(p_s.size()), LossKind::total_distill,
                 a.clamped || b.clamped || c.clamped};
    for (std::size_t i = 0; i < p_s.size(); ++i)
        g.values[i] = alpha * a.values[i] + beta * b.values[i] + gamma * c.values[i];
    return g;
}

// J[k][i] = dp_k / dz_i: J_ii = p_i - p_i^2, J_ki = -p_k p_i.
inline Tensor softmax_jacobian(const std::vector<double>& p) {
    detail::check_probability(p, "softmax_jacobian");
    const int c = static_cast<int>(p.size());
    Tensor j = Tensor::zeros({c, c});
    for (int k = 0; k < c; ++k)
        for (int i = 0; i < c; ++i)
            j.at(k, i) = (k == i) ? p[static_cast<std::size_t>(i)] * (1.0 - p[static_cast<std::size_t>(i)])
                                  : -p[static_cast<std::size_t>(k)] * p[static_cast<std::size_t>(i)];
    return j;
}

// ---------------------------------------------------------------------------
// tape-free reference losses (what the finite-difference oracle perturbs)
// ---------------------------------------------------------------------------

namespace ref {

// Per-sample KL(p^T || p^S) at temperature T, without the T^2 factor.
inline double kd_loss(const std::vector<double>& z_teacher, const std::vector<double>& z_student,
                      double temperature) {
    const auto pt = probs_from_logits_ref(z_teacher, temperature);
    const auto ps = probs_from_logits_ref(z_student, temperature);
    double acc = 0.0;
    bool fl = false;
    for (std::size_t i = 0; i < pt.size(); ++i)
        acc += pt[i] * (std::log(detail::clamp_prob(pt[i], fl)) -
                        std::log(detail::clamp_prob(ps[i], fl)));
    return acc;
}

// Binary KL over (p_t, p_nt).
inline double tckd_loss(const std::vector<double>& z_teacher, const std::vector<double>& z_student,
                        int t, double temperature) {
    const auto pt = probs_from_logits_ref(z_teacher, temperature);
    const auto ps = probs_from_logits_ref(z_student, temperature);
    detail::check_target(ps, t, "ref::tckd_loss");
    bool fl = false;
    const double tt = detail::clamp_prob(pt[static_cast<std::size_t>(t)], fl);
    const double ts = detail::clamp_prob(ps[static_cast<std::size_t>(t)], fl);
    const double nt = detail::clamp_prob(detail::nontarget_mass(pt, t), fl);
    const double ns = detail::clamp_prob(detail::nontarget_mass(ps, t), fl);
    return tt * (std::log(tt) - std::log(ts)) + nt * (std::log(nt) - std::log(ns));
}

// KL between the re-normalized non-target distributions; identically 0 at C=2.
inline double nckd_loss(const std::vector<double>& z_teacher, const std::vector<double>& z_student,
                        int t, double temperature) {
    const int c = static_cast<int>(z_teacher.size());
    if (c == 2) return 0.0;
    std::vector<double> zt, zs;
    zt.reserve(static_cast<std::size_t>(c) - 1);
    zs.reserve(static_cast<std::size_t>(c) - 1);
    for (int i = 0; i < c; ++i) {
        if (i == t) continue;
        zt.push_back(z_teacher[static_cast<std::size_t>(i)]);
        zs.push_back(z_student[static_cast<std::size_t>(i)]);
    }
    const auto pt = probs_from_logits_ref(zt, temperature);
    const auto ps = probs_from_logits_ref(zs, temperature);
    double acc = 0.0;
    bool fl = false;
    for (std::size_t i = 0; i < pt.size(); ++i)
        acc += pt[i] * (std::log(detail::clamp_prob(pt[i], fl)) -
                        std::log(detail::clamp_prob(ps[i], fl)));
    return acc;
}

// log(p_t^T / p_t^S) * (1 - 2^(1 - p_t^T / frozen)). The frozen student
// confidence is the stop-gradient barrier: a finite-difference pass must hold
// it at the unperturbed value. frozen <= 0 means "use the current p_t^S".
inline double aekt_loss(const std::vector<double>& z_teacher, const std::vector<double>& z_student,
                        int t, double temperature, double frozen_student_conf = -1.0) {
    const auto pt = probs_from_logits_ref(z_teacher, temperature);
    const auto ps = probs_from_logits_ref(z_student, temperature);
    detail::check_target(ps, t, "ref::aekt_loss");
    bool fl = false;
    const double tt = detail::clamp_prob(pt[static_cast<std::size_t>(t)], fl);
    const double ts = detail::clamp_prob(ps[static_cast<std::size_t>(t)], fl);
    const double frozen = frozen_student_conf > 0.0 ? frozen_student_conf : ts;
    return (std::log(tt) - std::log(ts)) * aekt_factor(tt, frozen);
}

inline double total_distill_loss(const std::vector<double>& z_teacher,
                                 const std::vector<double>& z_student, int t, double temperature,
                                 double alpha, double beta, double gamma,
                                 double frozen_student_conf = -1.0) {
    return alpha * tckd_loss(z_teacher, z_student, t, temperature) +
           beta * nckd_loss(z_teacher, z_student, t, temperature) +
           gamma * aekt_loss(z_teacher, z_student, t, temperature, frozen_student_conf);
}

}  // namespace ref

}  // namespace kd
