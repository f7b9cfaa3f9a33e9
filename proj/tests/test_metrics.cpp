#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <random>
#include <string>

#include "kd/errors.hpp"
#include "kd/metrics.hpp"

using namespace kd;
using Catch::Approx;

TEST_CASE("top-1 accuracy") {
    Tensor logits({3, 3}, {5, 1, 0,   // argmax 0
                           0, 2, 7,   // argmax 2
                           1, 9, 3}); // argmax 1
    REQUIRE(top1_accuracy(logits, {0, 2, 1}) == 1.0);
    REQUIRE(top1_accuracy(logits, {0, 2, 2}) == Approx(2.0 / 3.0));
    REQUIRE(top1_accuracy(logits, {1, 0, 0}) == 0.0);

    SECTION("ties break toward the lowest index") {
        Tensor tie({1, 3}, {4.0, 4.0, 4.0});
        REQUIRE(top1_accuracy(tie, {0}) == 1.0);
        REQUIRE(top1_accuracy(tie, {1}) == 0.0);
    }

    REQUIRE_THROWS_AS(top1_accuracy(logits, {0, 1}), ShapeError);
    REQUIRE_THROWS_AS(top1_accuracy(Tensor({2}, {1, 2}), {0, 0}), ShapeError);
}

TEST_CASE("prediction agreement") {
    Tensor a({2, 2}, {3, 1, 0, 5});
    Tensor b({2, 2}, {9, 2, 4, 1});  // argmax 0, then 0
    REQUIRE(prediction_agreement(a, a) == 1.0);
    REQUIRE(prediction_agreement(a, b) == Approx(0.5));
    REQUIRE_THROWS_AS(prediction_agreement(a, Tensor::zeros({3, 2})), ShapeError);
}

TEST_CASE("cosine similarity of probability rows") {
    Tensor a({1, 2}, {1.0, 0.0});
    Tensor b({1, 2}, {0.5, 0.5});
    REQUIRE(cosine_similarity(a, b) == Approx(0.70710678118654746).margin(1e-12));
    REQUIRE(cosine_similarity(a, a) == Approx(1.0).margin(1e-12));
    REQUIRE(cosine_similarity(a, Tensor({1, 2}, {0.0, 1.0})) == Approx(0.0).margin(1e-12));

    SECTION("rows are averaged") {
        Tensor p({2, 2}, {1.0, 0.0, 0.5, 0.5});
        Tensor q({2, 2}, {0.5, 0.5, 0.5, 0.5});
        REQUIRE(cosine_similarity(p, q) ==
                Approx(0.5 * (0.70710678118654746 + 1.0)).margin(1e-12));
    }

    SECTION("zero rows are an error, not a nan") {
        REQUIRE_THROWS_AS(cosine_similarity(Tensor::zeros({1, 2}), b), NumericError);
    }
}

TEST_CASE("double formatting round trips exactly") {
    std::mt19937_64 rng(2026);
    for (int i = 0; i < 2000; ++i) {
        double v;
        if (i == 0) v = 0.0;
        else if (i == 1) v = 0.1;
        else if (i == 2) v = 1.0 / 3.0;
        else if (i == 3) v = 0.1 + 0.2;
        else if (i == 4) v = -5e-324;
        else {
            const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
            v = (u - 0.5) * std::pow(10.0, static_cast<double>(static_cast<int>(rng() % 41)) - 20.0);
        }
        const std::string s = detail::fmt_double(v);
        double back = 0.0;
        std::sscanf(s.c_str(), "%lf", &back);
        REQUIRE(back == v);
    }

    SECTION("prefers the short form") {
        REQUIRE(detail::fmt_double(0.5) == "0.5");
        REQUIRE(detail::fmt_double(1.0) == "1");
        REQUIRE(detail::fmt_double(0.0) == "0");
        REQUIRE(detail::fmt_double(0.125) == "0.125");
    }
}

TEST_CASE("metrics csv has the pinned column layout") {
    RunMetrics m;
    EpochRow r0;
    r0.epoch = 0;
    r0.lr = 0.05;
    r0.warmup = 0.0;
    r0.ce = 2.5;
    r0.tckd = 0.5;
    r0.nckd = 0.25;
    r0.aekt = 0.125;
    r0.total = 3.0;
    r0.test_acc = 0.75;
    EpochRow r1 = r0;
    r1.epoch = 1;
    r1.warmup = 0.5;
    r1.test_acc = 0.8125;
    m.rows = {r0, r1};

    REQUIRE(m.to_csv() ==
            "epoch,lr,warmup,ce,tckd,nckd,aekt,total,test_acc\n"
            "0,0.05,0,2.5,0.5,0.25,0.125,3,0.75\n"
            "1,0.05,0.5,2.5,0.5,0.25,0.125,3,0.8125\n");
}

TEST_CASE("summary text shows only measured quantities") {
    RunMetrics m;
    EpochRow r;
    r.epoch = 0;
    r.test_acc = 0.5;
    r.total = 1.25;
    m.rows = {r};

    SECTION("defaults omit similarity and head lines") {
        const std::string s = m.summary_text();
        REQUIRE(s.find("final_test_acc 0.5") != std::string::npos);
        REQUIRE(s.find("cosine") == std::string::npos);
        REQUIRE(s.find("head_diag") == std::string::npos);
    }

    SECTION("set values appear") {
        m.final_cosine = 0.9;
        m.final_agreement = 0.75;
        m.head_diag_mean_abs = 1.0;
        m.head_offdiag_mean_abs = 0.01;
        const std::string s = m.summary_text();
        REQUIRE(s.find("cosine_similarity 0.9") != std::string::npos);
        REQUIRE(s.find("agreement 0.75") != std::string::npos);
        REQUIRE(s.find("head_offdiag_mean_abs 0.01") != std::string::npos);
    }
}
