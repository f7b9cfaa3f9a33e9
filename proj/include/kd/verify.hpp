#pragma once
// Three-way gradient verification: the closed-form formulas, the tape
// engine, and central finite differences over the tape-free reference
// losses must agree on randomized cases. This is the main correctness gate
// for the whole loss stack.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "kd/data.hpp"
#include "kd/losses.hpp"
#include "kd/oracles.hpp"
#include "kd/tensor.hpp"

namespace kd {

struct VerifyOptions {
    int cases = 1000;
    std::uint64_t seed = 20240817;
    double tol_autodiff = 1e-8;  // analytic vs tape, relative
    double tol_fd = 1e-4;        // analytic vs finite differences, relative
    double fd_step = 1e-5;
    // Flips the sign of the closed-form gradient for one loss kind; the
    // report must then flag exactly that formula. Test hook.
    std::optional<LossKind> corrupt_sign;
};

struct FormulaReport {
    LossKind kind = LossKind::kd;
    int cases = 0;
    double max_rel_autodiff = 0.0;
    double max_rel_fd = 0.0;
    double max_abs_grad_sum = 0.0;
    bool target_component_zero = true;  // tracked for NCKD only
    bool pass = false;
};

struct VerifyReport {
    std::vector<FormulaReport> formulas;
    bool factor_zero_at_one = false;
    bool factor_bounded = false;
    bool factor_increasing = false;
    double tol_autodiff = 0.0;
    double tol_fd = 0.0;
    bool all_pass = false;

    std::string text() const {
        std::ostringstream os;
        os.precision(3);
        os << std::scientific;
        os << "gradient verification (" << (formulas.empty() ? 0 : formulas[0].cases)
           << " cases per formula)\n";
        os << "tolerances: autodiff " << tol_autodiff << ", finite-difference " << tol_fd << "\n";
        for (const FormulaReport& f : formulas) {
            os << "  " << loss_kind_name(f.kind) << ": max_rel_autodiff " << f.max_rel_autodiff
               << "  max_rel_fd " << f.max_rel_fd << "  max_abs_grad_sum " << f.max_abs_grad_sum;
            if (f.kind == LossKind::nckd)
                os << "  target_component_zero " << (f.target_component_zero ? "yes" : "NO");
            os << "  " << (f.pass ? "PASS" : "FAIL") << "\n";
        }
        os << "  confidence-ratio factor: zero_at_one " << (factor_zero_at_one ? "PASS" : "FAIL")
           << ", bounded " << (factor_bounded ? "PASS" : "FAIL") << ", increasing "
           << (factor_increasing ? "PASS" : "FAIL") << "\n";
        os << (all_pass ? "ALL PASS" : "FAILURES PRESENT") << "\n";
        return os.str();
    }

    std::string csv() const {
        std::ostringstream os;
        os.precision(17);
        os << "formula,cases,max_rel_autodiff,max_rel_fd,max_abs_grad_sum,pass\n";
        for (const FormulaReport& f : formulas)
            os << loss_kind_name(f.kind) << ',' << f.cases << ',' << f.max_rel_autodiff << ','
               << f.max_rel_fd << ',' << f.max_abs_grad_sum << ',' << (f.pass ? 1 : 0) << "\n";
        return os.str();
    }
};

namespace detail {

inline std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                       std::vector<double> z, double h) {
    std::vector<double> g(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double base = z[i];
        z[i] = base + h;
        const double up = f(z);
        z[i] = base - h;
        const double dn = f(z);
        z[i] = base;
        g[i] = (up - dn) / (2.0 * h);
    }
    return g;
}

// Tape gradient of one scalar loss with respect to a single-row student
// logit leaf. Verification runs at temperature 1 so the per-row values and
// gradients carry no temperature factor.
template <typename MakeLoss>
inline std::vector<double> tape_gradient(const std::vector<double>& z_teacher,
                                         const std::vector<double>& z_student, int target,
                                         MakeLoss&& make_loss) {
    const int c = static_cast<int>(z_student.size());
    Tape tape;
    Tensor teacher({1, c}, z_teacher);
    Tensor student = tape.leaf(Tensor({1, c}, z_student));
    DistillBatch batch{teacher, student, student, {target}};
    Tensor loss = make_loss(batch);
    // A loss can be constant (the non-target KL collapses at two classes);
    // its gradient is identically zero.
    if (!loss.tracked()) return std::vector<double>(z_student.size(), 0.0);
    tape.backward(loss);
    return tape.grad(student);
}

}  // namespace detail

inline VerifyReport verify_gradients(const VerifyOptions& opt) {
    if (opt.cases < 1) throw ContractError("verify_gradients: cases must be at least 1");
    VerifyReport rep;
    rep.tol_autodiff = opt.tol_autodiff;
    rep.tol_fd = opt.tol_fd;
    const LossKind kinds[] = {LossKind::kd,  LossKind::tckd, LossKind::nckd,
                              LossKind::dkd, LossKind::aekt, LossKind::total_distill};
    for (LossKind k : kinds) {
        FormulaReport f;
        f.kind = k;
        f.cases = opt.cases;
        rep.formulas.push_back(f);
    }

    std::mt19937_64 rng(opt.seed);
    kd::detail::Gaussian gauss{rng};

    for (int cs = 0; cs < opt.cases; ++cs) {
        const int c = 2 + static_cast<int>(rng() % 99);  // 2..100
        const int t = static_cast<int>(rng() % static_cast<std::uint64_t>(c));
        std::vector<double> zt(static_cast<std::size_t>(c)), zs(static_cast<std::size_t>(c));
        for (double& v : zt) v = 1.5 * gauss();
        for (double& v : zs) v = 1.5 * gauss();
        const double alpha = 0.25 + 1.75 * gauss.uniform_open();
        const double beta = 0.25 + 7.75 * gauss.uniform_open();
        const double gamma = 0.05 + 0.95 * gauss.uniform_open();

        const auto pt = probs_from_logits_ref(zt, 1.0);
        const auto ps = probs_from_logits_ref(zs, 1.0);
        const double frozen_conf = std::max(ps[static_cast<std::size_t>(t)], prob_floor);

        for (FormulaReport& f : rep.formulas) {
            GradVector analytic{{}, f.kind, false};
            std::vector<double> tape_g, fd_g;
            switch (f.kind) {
                case LossKind::kd:
                    analytic = grad_kd(pt, ps);
                    tape_g = detail::tape_gradient(zt, zs, t, [](const DistillBatch& b) {
                        return kd_loss(b, 1.0);
                    });
                    fd_g = detail::fd_gradient(
                        [&](const std::vector<double>& z) { return ref::kd_loss(zt, z, 1.0); }, zs,
                        opt.fd_step);
                    break;
                case LossKind::tckd:
                    analytic = grad_tckd(pt, ps, t);
                    tape_g = detail::tape_gradient(zt, zs, t, [](const DistillBatch& b) {
                        return tckd_loss(b, 1.0);
                    });
                    fd_g = detail::fd_gradient(
                        [&](const std::vector<double>& z) { return ref::tckd_loss(zt, z, t, 1.0); },
                        zs, opt.fd_step);
                    break;
                case LossKind::nckd:
                    analytic = grad_nckd(pt, ps, t);
                    tape_g = detail::tape_gradient(zt, zs, t, [](const DistillBatch& b) {
                        return nckd_loss(b, 1.0);
                    });
                    fd_g = detail::fd_gradient(
                        [&](const std::vector<double>& z) { return ref::nckd_loss(zt, z, t, 1.0); },
                        zs, opt.fd_step);
                    break;
                case LossKind::dkd:
                    analytic = grad_dkd(pt, ps, t, alpha, beta);
                    tape_g = detail::tape_gradient(zt, zs, t, [&](const DistillBatch& b) {
                        DistillConfig dc;
                        dc.alpha = alpha;
                        dc.beta = beta;
                        dc.temperature = 1.0;
                        return dkd_loss(b, dc);
                    });
                    fd_g = detail::fd_gradient(
                        [&](const std::vector<double>& z) {
                            return alpha * ref::tckd_loss(zt, z, t, 1.0) +
                                   beta * ref::nckd_loss(zt, z, t, 1.0);
                        },
                        zs, opt.fd_step);
                    break;
                case LossKind::aekt:
                    analytic = grad_aekt(pt, ps, t);
                    tape_g = detail::tape_gradient(zt, zs, t, [](const DistillBatch& b) {
                        return aekt_loss(b, 1.0);
                    });
                    fd_g = detail::fd_gradient(
                        [&](const std::vector<double>& z) {
                            return ref::aekt_loss(zt, z, t, 1.0, frozen_conf);
                        },
                        zs, opt.fd_step);
                    break;
                case LossKind::total_distill:
                    analytic = grad_total_distill(pt, ps, t, alpha, beta, gamma);
                    tape_g = detail::tape_gradient(zt, zs, t, [&](const DistillBatch& b) {
                        return alpha * tckd_loss(b, 1.0) + beta * nckd_loss(b, 1.0) +
                               gamma * aekt_loss(b, 1.0);
                    });
                    fd_g = detail::fd_gradient(
                        [&](const std::vector<double>& z) {
                            return ref::total_distill_loss(zt, z, t, 1.0, alpha, beta, gamma,
                                                           frozen_conf);
                        },
                        zs, opt.fd_step);
                    break;
            }
            if (opt.corrupt_sign && *opt.corrupt_sign == f.kind)
                for (double& v : analytic.values) v = -v;

            double grad_sum = 0.0;
            for (int i = 0; i < c; ++i) {
                const std::size_t si = static_cast<std::size_t>(i);
                f.max_rel_autodiff =
                    std::max(f.max_rel_autodiff, relative_error(analytic.values[si], tape_g[si]));
                f.max_rel_fd = std::max(f.max_rel_fd, relative_error(analytic.values[si], fd_g[si]));
                grad_sum += analytic.values[si];
            }
            f.max_abs_grad_sum = std::max(f.max_abs_grad_sum, std::fabs(grad_sum));
            if (f.kind == LossKind::nckd &&
                (analytic.values[static_cast<std::size_t>(t)] != 0.0 ||
                 tape_g[static_cast<std::size_t>(t)] != 0.0))
                f.target_component_zero = false;
        }
    }

    // Structural facts about the confidence-ratio factor f = 1 - 2^(1-r).
    // Bounded/increasing is checked through the complement 2^(1-r) staying
    // inside (0,2) and strictly decreasing; the direct subtraction rounds to
    // exactly 1 once the complement falls below one ulp (r > 54), which
    // would misreport the strict bound.
    rep.factor_zero_at_one = aekt_factor(0.37, 0.37) == 0.0 && aekt_factor(1.0, 1.0) == 0.0;
    rep.factor_bounded = true;
    rep.factor_increasing = true;
    double prev_c = 3.0;
    for (double ratio = 1e-6; ratio <= 1000.0; ratio *= 1.37) {
        const double c = std::exp2(1.0 - ratio);
        if (!(c > 0.0 && c < 2.0)) rep.factor_bounded = false;
        if (!(c < prev_c)) rep.factor_increasing = false;
        prev_c = c;
        if (ratio <= 50.0) {
            const double f = 1.0 - c;
            if (!(f > -1.0 && f < 1.0)) rep.factor_bounded = false;
        }
    }

    rep.all_pass = rep.factor_zero_at_one && rep.factor_bounded && rep.factor_increasing;
    for (FormulaReport& f : rep.formulas) {
        f.pass = f.max_rel_autodiff <= opt.tol_autodiff && f.max_rel_fd <= opt.tol_fd &&
                 f.max_abs_grad_sum <= 1e-10 && f.target_component_zero;
        rep.all_pass = rep.all_pass && f.pass;
    }
    return rep;
}

}  // namespace kd
