#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "kd/errors.hpp"
#include "kd/losses.hpp"
#include "kd/oracles.hpp"
#include "kd/tensor.hpp"

using namespace kd;
using Catch::Approx;

namespace {

DistillBatch single_row(const std::vector<double>& zt, const std::vector<double>& zs, int target) {
    const int c = static_cast<int>(zt.size());
    return DistillBatch{Tensor({1, c}, zt), Tensor({1, c}, zs), Tensor({1, c}, zs), {target}};
}

// Student leaf on a fresh tape, loss built by the callback, gradient returned.
template <typename MakeLoss>
std::vector<double> student_grad(Tape& tape, const std::vector<double>& zt,
                                 const std::vector<double>& zs, int target, MakeLoss&& make) {
    const int c = static_cast<int>(zt.size());
    Tensor teacher({1, c}, zt);
    Tensor student = tape.leaf(Tensor({1, c}, zs));
    DistillBatch b{teacher, student, student, {target}};
    Tensor loss = make(b);
    tape.backward(loss);
    return tape.grad(student);
}

double uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace

TEST_CASE("distill batch validation") {
    DistillBatch ok{Tensor::zeros({2, 3}), Tensor::zeros({2, 3}), Tensor::zeros({2, 3}), {0, 2}};
    REQUIRE_NOTHROW(validate(ok));

    DistillBatch bad = ok;
    bad.targets = {0, 3};
    REQUIRE_THROWS_AS(validate(bad), ContractError);
    bad = ok;
    bad.targets = {0};
    REQUIRE_THROWS_AS(validate(bad), ShapeError);
    bad = ok;
    bad.student_distill_logits = Tensor::zeros({2, 4});
    REQUIRE_THROWS_AS(validate(bad), ShapeError);
    bad = ok;
    bad.teacher_logits = Tensor::zeros({6});
    REQUIRE_THROWS_AS(validate(bad), ShapeError);
    REQUIRE_THROWS_AS(
        validate(DistillBatch{Tensor::zeros({2, 1}), Tensor::zeros({2, 1}), Tensor::zeros({2, 1}),
                              {0, 0}}),
        ShapeError);
}

TEST_CASE("scalar losses reproduce the reference values") {
    const std::vector<double> zt{2.0, 1.0, 0.0};
    const std::vector<double> zs{0.0, 0.0, 0.0};
    const DistillBatch b = single_row(zt, zs, 0);

    REQUIRE(kd_loss(b, 1.0).item() == Approx(0.26621670682817078).margin(1e-12));
    REQUIRE(tckd_loss(b, 1.0).item() == Approx(0.22907717543289355).margin(1e-12));
    REQUIRE(nckd_loss(b, 1.0).item() == Approx(0.1109440716717274).margin(1e-12));
    REQUIRE(aekt_loss(b, 1.0).item() == Approx(0.34447733507468209).margin(1e-12));

    SECTION("temperature squared scaling") {
        REQUIRE(kd_loss(b, 2.0).item() == Approx(0.31368380776511351).margin(1e-12));
        REQUIRE(kd_loss(b, 2.0).item() ==
                Approx(4.0 * ref::kd_loss(zt, zs, 2.0)).margin(1e-13));
    }

    SECTION("dkd weights its two parts") {
        DistillConfig cfg;
        cfg.alpha = 0.5;
        cfg.beta = 4.0;
        cfg.temperature = 1.0;
        REQUIRE(dkd_loss(b, cfg).item() ==
                Approx(0.5 * 0.22907717543289355 + 4.0 * 0.1109440716717274).margin(1e-12));
    }

    SECTION("mean over a batch of identical rows is the row value") {
        DistillBatch b3{Tensor({3, 3}, {2, 1, 0, 2, 1, 0, 2, 1, 0}),
                        Tensor::zeros({3, 3}), Tensor::zeros({3, 3}), {0, 0, 0}};
        REQUIRE(kd_loss(b3, 1.0).item() == Approx(0.26621670682817078).margin(1e-12));
    }
}

TEST_CASE("cross entropy") {
    Tensor z({1, 3}, {2.0, 1.0, 0.0});
    REQUIRE(cross_entropy(z, {0}).item() == Approx(0.40760596444438046).margin(1e-13));

    // batch mean: second row is uniform, so its term is log 3
    Tensor z2({2, 3}, {2, 1, 0, 0, 0, 0});
    REQUIRE(cross_entropy(z2, {0, 1}).item() ==
            Approx(0.5 * (0.40760596444438046 + std::log(3.0))).margin(1e-13));

    REQUIRE_THROWS_AS(cross_entropy(Tensor::zeros({4}), {0}), ShapeError);
    REQUIRE_THROWS_AS(cross_entropy(z, {0, 1}), ShapeError);
}

TEST_CASE("decomposition identity on random batches") {
    std::mt19937_64 rng(24680);
    for (int rep = 0; rep < 60; ++rep) {
        const int c = 2 + static_cast<int>(rng() % 29);
        const int n = 1 + static_cast<int>(rng() % 5);
        const double temp = std::vector<double>{1.0, 2.0, 4.0}[rng() % 3];
        std::vector<double> t_logits(static_cast<std::size_t>(n * c)),
            s_logits(static_cast<std::size_t>(n * c));
        for (double& v : t_logits) v = 6.0 * uniform(rng) - 3.0;
        for (double& v : s_logits) v = 6.0 * uniform(rng) - 3.0;
        std::vector<int> targets(static_cast<std::size_t>(n));
        for (int& v : targets) v = static_cast<int>(rng() % static_cast<std::uint64_t>(c));

        DistillBatch b{Tensor({n, c}, t_logits), Tensor({n, c}, s_logits),
                       Tensor({n, c}, s_logits), targets};
        const double direct = kd_loss(b, temp).item();
        const double decomposed = kd_loss_decomposed(b, temp).item();
        REQUIRE(std::fabs(direct - decomposed) < 1e-11);
    }
}

TEST_CASE("loss gradients at temperature carry T over the batch mean") {
    // d/dz of T^2 * mean_rows(KL at T) = (T / N) * g(tempered probs)
    const std::vector<double> zt{1.1, -0.4, 0.8, 0.2};
    const std::vector<double> zs{-0.3, 0.6, 0.1, -0.9};
    const double temp = 4.0;
    const auto pt = probs_from_logits_ref(zt, temp);
    const auto ps = probs_from_logits_ref(zs, temp);

    SECTION("kd") {
        Tape tape;
        const auto g = student_grad(tape, zt, zs, 2,
                                    [&](const DistillBatch& b) { return kd_loss(b, temp); });
        const auto o = grad_kd(pt, ps);
        for (int i = 0; i < 4; ++i) REQUIRE(g[i] == Approx(temp * o.values[i]).margin(1e-12));
    }

    SECTION("tckd") {
        Tape tape;
        const auto g = student_grad(tape, zt, zs, 2,
                                    [&](const DistillBatch& b) { return tckd_loss(b, temp); });
        const auto o = grad_tckd(pt, ps, 2);
        for (int i = 0; i < 4; ++i) REQUIRE(g[i] == Approx(temp * o.values[i]).margin(1e-12));
    }

    SECTION("nckd") {
        Tape tape;
        const auto g = student_grad(tape, zt, zs, 2,
                                    [&](const DistillBatch& b) { return nckd_loss(b, temp); });
        const auto o = grad_nckd(pt, ps, 2);
        for (int i = 0; i < 4; ++i) REQUIRE(g[i] == Approx(temp * o.values[i]).margin(1e-12));
        REQUIRE(g[2] == 0.0);
    }

    SECTION("aekt") {
        Tape tape;
        const auto g = student_grad(tape, zt, zs, 2,
                                    [&](const DistillBatch& b) { return aekt_loss(b, temp); });
        const auto o = grad_aekt(pt, ps, 2);
        for (int i = 0; i < 4; ++i) REQUIRE(g[i] == Approx(temp * o.values[i]).margin(1e-12));
    }

    SECTION("batch mean divides by N") {
        std::vector<double> zt2 = zt, zs2 = zs;
        zt2.insert(zt2.end(), zt.begin(), zt.end());
        zs2.insert(zs2.end(), zs.begin(), zs.end());
        Tape tape;
        Tensor teacher({2, 4}, zt2);
        Tensor student = tape.leaf(Tensor({2, 4}, zs2));
        DistillBatch b{teacher, student, student, {2, 2}};
        tape.backward(kd_loss(b, temp));
        const auto o = grad_kd(pt, ps);
        for (int i = 0; i < 4; ++i)
            REQUIRE(tape.grad(student)[i] == Approx(temp * o.values[i] / 2.0).margin(1e-12));
    }
}

TEST_CASE("the confidence denominator is held out of the backward pass") {
    const std::vector<double> zt{1.5, 0.2, -0.6};
    const std::vector<double> zs{-0.5, 0.4, 0.3};
    const auto pt = probs_from_logits_ref(zt, 1.0);
    const auto ps = probs_from_logits_ref(zs, 1.0);
    const double f = aekt_factor(pt[0], ps[0]);

    SECTION("with the detach, the target gradient is the closed form") {
        Tape tape;
        const auto g = student_grad(tape, zt, zs, 0,
                                    [&](const DistillBatch& b) { return aekt_loss(b, 1.0); });
        REQUIRE(g[0] == Approx(-(1.0 - ps[0]) * f).margin(1e-12));
        REQUIRE(g[1] == Approx(f * ps[1]).margin(1e-12));
        REQUIRE(g[2] == Approx(f * ps[2]).margin(1e-12));
    }

    SECTION("without it, differentiating through the factor changes the gradient") {
        Tape tape;
        Tensor teacher({1, 3}, zt);
        Tensor student = tape.leaf(Tensor({1, 3}, zs));
        const Tensor log_tt = log_prob_target(teacher, {0}, 1.0);
        const Tensor tt = clamp(exp(log_tt), prob_floor, 1.0);
        const Tensor log_ts = log_prob_target(student, {0}, 1.0);
        const Tensor live = clamp(exp(log_ts), prob_floor, 1.0);  // no detach
        const Tensor factor = 1.0 - exp2(1.0 - tt / live);
        tape.backward(mean((log_tt - log_ts) * factor));
        const double detached_target = -(1.0 - ps[0]) * f;
        REQUIRE(std::fabs(tape.grad(student)[0] - detached_target) > 1e-3);
    }
}

TEST_CASE("ablating the target-confidence term switches the target gradient") {
    const std::vector<double> zt{1.5, 0.2, -0.6};
    const std::vector<double> zs{-0.5, 0.4, 0.3};
    const auto pt = probs_from_logits_ref(zt, 1.0);
    const auto ps = probs_from_logits_ref(zs, 1.0);
    const double f = aekt_factor(pt[0], ps[0]);

    Tape tape;
    const auto g = student_grad(tape, zt, zs, 0,
                                [&](const DistillBatch& b) { return aekt_loss(b, 1.0, true); });
    REQUIRE(g[0] == Approx(-f).margin(1e-12));
    REQUIRE(g[1] == Approx(f * ps[1]).margin(1e-12));  // non-target side unchanged

    // the loss value itself does not move, only the backward rule
    const DistillBatch b = single_row(zt, zs, 0);
    REQUIRE(aekt_loss(b, 1.0, true).item() == aekt_loss(b, 1.0, false).item());
}

TEST_CASE("two classes collapse the non-target distribution") {
    const DistillBatch b = single_row({1.0, 0.0}, {-0.5, 0.5}, 0);
    REQUIRE(nckd_loss(b, 1.0).item() == 0.0);
    REQUIRE_FALSE(nckd_rows(b, 1.0).tracked());

    DistillConfig cfg;
    cfg.alpha = 0.7;
    cfg.beta = 9.0;
    cfg.temperature = 1.0;
    REQUIRE(dkd_loss(b, cfg).item() == Approx(0.7 * tckd_loss(b, 1.0).item()).margin(1e-14));
}

TEST_CASE("total loss assembles its terms and reports the breakdown") {
    const std::vector<double> zt{2.0, 1.0, 0.0};
    const std::vector<double> zs{0.3, -0.2, 0.4};
    const DistillBatch b = single_row(zt, zs, 1);

    DistillConfig cfg;
    cfg.alpha = 1.0;
    cfg.beta = 2.0;
    cfg.gamma = 0.5;
    cfg.temperature = 4.0;
    cfg.ce_weight = 1.0;

    const TotalLossResult r = total_loss(b, cfg, 0.6);
    REQUIRE(r.ce == Approx(cross_entropy(b.student_class_logits, b.targets).item()).margin(1e-14));
    REQUIRE(r.tckd == Approx(tckd_loss(b, 4.0).item()).margin(1e-14));
    REQUIRE(r.nckd == Approx(nckd_loss(b, 4.0).item()).margin(1e-14));
    REQUIRE(r.aekt == Approx(aekt_loss(b, 4.0).item()).margin(1e-14));
    REQUIRE(r.total.item() ==
            Approx(r.ce + 0.6 * (1.0 * r.tckd + 2.0 * r.nckd + 0.5 * r.aekt)).margin(1e-13));

    SECTION("warmup factor zero leaves only cross entropy") {
        REQUIRE(total_loss(b, cfg, 0.0).total.item() == Approx(r.ce).margin(1e-14));
    }

    SECTION("contracts") {
        REQUIRE_THROWS_AS(total_loss(b, cfg, 1.5), ContractError);
        DistillConfig bad = cfg;
        bad.temperature = 0.0;
        REQUIRE_THROWS_AS(total_loss(b, bad, 1.0), ConfigError);
        bad = cfg;
        bad.beta = -1.0;
        REQUIRE_THROWS_AS(total_loss(b, bad, 1.0), ConfigError);
        bad = cfg;
        bad.serialization = Serialization::two_layer;
        bad.head_width = 0;
        REQUIRE_THROWS_AS(bad.validate(), ConfigError);
    }
}

TEST_CASE("losses are invariant to which tape computes them") {
    // same numbers whether the student is tracked or not
    const std::vector<double> zt{0.9, -1.2, 0.5, 0.1};
    const std::vector<double> zs{0.2, 0.8, -0.4, -0.1};
    const DistillBatch plain = single_row(zt, zs, 3);
    const double want = kd_loss(plain, 2.0).item();

    Tape tape;
    Tensor teacher({1, 4}, zt);
    Tensor student = tape.leaf(Tensor({1, 4}, zs));
    DistillBatch tracked{teacher, student, student, {3}};
    REQUIRE(kd_loss(tracked, 2.0).item() == want);
}
