#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "kd/errors.hpp"
#include "kd/losses.hpp"
#include "kd/model.hpp"
#include "kd/tensor.hpp"

using namespace kd;
using Catch::Approx;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

void spit(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    os << content;
}

std::string tmp_path(const char* name) {
    return std::string("/tmp/kd_model_test_") + name;
}

}  // namespace

TEST_CASE("mlp initialization") {
    Mlp a = Mlp::init({4, 8, 3}, 7);
    Mlp b = Mlp::init({4, 8, 3}, 7);
    Mlp c = Mlp::init({4, 8, 3}, 8);

    REQUIRE(a.input_dim() == 4);
    REQUIRE(a.num_classes() == 3);
    REQUIRE(a.weights.size() == 2);
    REQUIRE(a.weights[0].shape == std::vector<int>{4, 8});
    REQUIRE(a.weights[1].shape == std::vector<int>{8, 3});

    SECTION("same seed reproduces the same bytes, another seed does not") {
        REQUIRE(a.weights[0].data == b.weights[0].data);
        REQUIRE(a.weights[1].data == b.weights[1].data);
        REQUIRE(a.weights[0].data != c.weights[0].data);
    }

    SECTION("weights stay inside the fan-in bound, biases start at zero") {
        const double lim0 = std::sqrt(6.0 / 4.0);
        for (double v : a.weights[0].data) REQUIRE(std::fabs(v) <= lim0);
        const double lim1 = std::sqrt(6.0 / 8.0);
        for (double v : a.weights[1].data) REQUIRE(std::fabs(v) <= lim1);
        for (double v : a.biases[0].data) REQUIRE(v == 0.0);
        for (double v : a.biases[1].data) REQUIRE(v == 0.0);
    }

    SECTION("parameter order is W0 b0 W1 b1") {
        auto ps = a.parameters();
        REQUIRE(ps.size() == 4);
        REQUIRE(ps[0] == &a.weights[0]);
        REQUIRE(ps[1] == &a.biases[0]);
        REQUIRE(ps[3] == &a.biases[1]);
    }

    REQUIRE_THROWS_AS(Mlp::init({5}, 1), ContractError);
    REQUIRE_THROWS_AS(Mlp::init({5, 0, 2}, 1), ContractError);
}

TEST_CASE("mlp forward is x W + b with relu between hidden layers") {
    Mlp m = Mlp::init({2, 2, 2}, 1);
    m.weights[0] = Tensor({2, 2}, {1.0, -1.0, 0.5, 2.0});
    m.biases[0] = Tensor({2}, {0.0, -3.0});
    m.weights[1] = Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0});
    m.biases[1] = Tensor({2}, {0.25, 0.5});

    // x = [1, 2]: pre-act = [1*1+2*0.5, 1*-1+2*2-3] = [2, 0]; relu -> [2, 0]
    Tensor out = m.forward(Tensor({1, 2}, {1.0, 2.0}));
    REQUIRE(out.at(0, 0) == Approx(2.25));
    REQUIRE(out.at(0, 1) == Approx(0.5));

    // x = [-1, 0]: pre-act = [-1, -2]; relu -> [0, 0]
    Tensor out2 = m.forward(Tensor({1, 2}, {-1.0, 0.0}));
    REQUIRE(out2.at(0, 0) == Approx(0.25));
    REQUIRE(out2.at(0, 1) == Approx(0.5));

    REQUIRE_THROWS_AS(m.forward(Tensor::zeros({1, 3})), ShapeError);
}

TEST_CASE("training pass gradients match finite differences") {
    Mlp m = Mlp::init({3, 4, 2}, 11);
    const Tensor x({2, 3}, {0.4, -0.7, 1.1, -0.2, 0.9, 0.3});
    const std::vector<int> y{1, 0};

    auto loss_at = [&](const Mlp& net) {
        return cross_entropy(net.forward(x), y).item();
    };

    Tape tape;
    std::vector<Tensor> leaves;
    const Tensor logits = m.forward(tape, x, &leaves);
    tape.backward(cross_entropy(logits, y));

    auto params = m.parameters();
    REQUIRE(leaves.size() == params.size());
    const double h = 1e-6;
    for (std::size_t p = 0; p < params.size(); ++p) {
        const auto& g = tape.grad(leaves[p]);
        for (std::size_t k = 0; k < params[p]->size(); ++k) {
            Mlp up = m, dn = m;
            up.parameters()[p]->data[k] += h;
            dn.parameters()[p]->data[k] -= h;
            const double fd = (loss_at(up) - loss_at(dn)) / (2.0 * h);
            REQUIRE(g[k] == Approx(fd).margin(2e-8));
        }
    }
}

TEST_CASE("identity head is transparent") {
    SerializationHead head = SerializationHead::identity_linear(5);
    Tensor z({3, 5}, std::vector<double>{0.1, -2.0, 3.5, 0.0,  1.25, 2.0, 2.0, -1.0,
                                         0.5, 0.5,  -0.25, 7.0, 0.125, -0.5, 0.75});
    Tensor out = serialize(head, z);
    REQUIRE(out.data == z.data);  // bitwise, not approximately

    SECTION("and transparent on the tape too") {
        Tape tape;
        std::vector<Tensor> leaves;
        Tensor zl = tape.leaf(z);
        Tensor out2 = head.forward(tape, zl, &leaves);
        REQUIRE(out2.data == z.data);
        REQUIRE(leaves.size() == 2);
        tape.backward(sum(out2));
        // gradient passes straight through to the input
        REQUIRE(tape.grad(zl) == std::vector<double>(15, 1.0));
    }

    REQUIRE_THROWS_AS(SerializationHead::identity_linear(1), ContractError);
}

TEST_CASE("two-layer head shapes and the prelu toggle") {
    SerializationHead plain = SerializationHead::two_layer_init(4, 6, false, 3);
    SerializationHead curved = SerializationHead::two_layer_init(4, 6, true, 3);
    REQUIRE(plain.weights[0].shape == std::vector<int>{4, 6});
    REQUIRE(plain.weights[1].shape == std::vector<int>{6, 4});
    REQUIRE(plain.weights[0].data == curved.weights[0].data);  // same seed, same draws

    // the second layer starts as a zero map, so a fresh head outputs zeros
    REQUIRE(plain.weights[1].data == std::vector<double>(24, 0.0));
    Tensor z({2, 4}, {1.0, -1.0, 0.5, 2.0, -0.3, 0.7, 0.0, -1.5});
    REQUIRE(plain.forward(z).data == std::vector<double>(8, 0.0));

    // with a live second layer the nonlinearity changes the function
    Tensor w1({6, 4}, std::vector<double>(24, 0.3));
    plain.weights[1] = w1;
    curved.weights[1] = w1;
    Tensor a = plain.forward(z);
    Tensor b = curved.forward(z);
    REQUIRE(a.shape == std::vector<int>{2, 4});
    REQUIRE(a.data != b.data);

    // hand-check the prelu variant on a single unit
    SerializationHead tiny = SerializationHead::two_layer_init(2, 1, true, 1);
    tiny.weights[0] = Tensor({2, 1}, {1.0, 0.0});
    tiny.biases[0] = Tensor({1}, {0.0});
    tiny.weights[1] = Tensor({1, 2}, {1.0, 2.0});
    tiny.biases[1] = Tensor({2}, {0.0, 0.0});
    Tensor neg = tiny.forward(Tensor({1, 2}, {-2.0, 0.0}));
    REQUIRE(neg.at(0, 0) == Approx(-2.0 * 0.25));
    REQUIRE(neg.at(0, 1) == Approx(-2.0 * 0.25 * 2.0));

    REQUIRE_THROWS_AS(SerializationHead::two_layer_init(4, 0, false, 1), ContractError);
}

TEST_CASE("head weight export") {
    SerializationHead head = SerializationHead::identity_linear(3);
    head.weights[0] = Tensor({3, 3}, {2.0, -0.5, 0.1, 0.0, 1.0, -3.0, 0.25, 0.0, 0.5});

    HeadExport e = export_head_weights(head, 2);
    REQUIRE(e.diag_mean_abs == Approx((2.0 + 1.0 + 0.5) / 3.0));
    REQUIRE(e.offdiag_mean_abs == Approx((0.5 + 0.1 + 0.0 + 3.0 + 0.25 + 0.0) / 6.0));

    SECTION("top entries are ranked by magnitude") {
        REQUIRE(e.top.size() == 3);
        REQUIRE(e.top[0].size() == 2);
        REQUIRE(e.top[0][0].first == 0);   // |2.0|
        REQUIRE(e.top[0][1].first == 1);   // |-0.5|
        REQUIRE(e.top[1][0].first == 2);   // |-3.0|
        REQUIRE(e.top[1][0].second == Approx(-3.0));
    }

    SECTION("only the linear variant can be exported") {
        SerializationHead two = SerializationHead::two_layer_init(3, 4, false, 1);
        REQUIRE_THROWS_WITH(export_head_weights(two),
                            "export_head_weights: unsupported variant (linear only)");
    }
}

TEST_CASE("checkpoint round trip preserves every byte") {
    Mlp m = Mlp::init({3, 5, 4}, 99);
    const std::string path = tmp_path("roundtrip.bin");

    SECTION("without a head") {
        save_checkpoint(path, m, nullptr, 99, 17);
        LoadedCheckpoint lc = load_checkpoint(path);
        REQUIRE(lc.model.layer_dims == m.layer_dims);
        REQUIRE_FALSE(lc.head.has_value());
        REQUIRE(lc.seed == 99);
        REQUIRE(lc.epoch == 17);
        for (std::size_t l = 0; l < m.weights.size(); ++l) {
            REQUIRE(lc.model.weights[l].data == m.weights[l].data);
            REQUIRE(lc.model.biases[l].data == m.biases[l].data);
        }
    }

    SECTION("with a linear head") {
        SerializationHead head = SerializationHead::identity_linear(4);
        head.weights[0].at(1, 2) = -0.125;
        head.biases[0].data[3] = 0.5;
        save_checkpoint(path, m, &head, 1, 0);
        LoadedCheckpoint lc = load_checkpoint(path);
        REQUIRE(lc.head.has_value());
        REQUIRE(lc.head->variant == HeadVariant::linear);
        REQUIRE(lc.head->weights[0].data == head.weights[0].data);
        REQUIRE(lc.head->biases[0].data == head.biases[0].data);
    }

    SECTION("with a two-layer head") {
        SerializationHead head = SerializationHead::two_layer_init(4, 7, true, 5);
        save_checkpoint(path, m, &head, 5, 3);
        LoadedCheckpoint lc = load_checkpoint(path);
        REQUIRE(lc.head->variant == HeadVariant::two_layer);
        REQUIRE(lc.head->hidden_width == 7);
        REQUIRE(lc.head->nonlinear);
        REQUIRE(lc.head->weights[0].data == head.weights[0].data);
        REQUIRE(lc.head->weights[1].data == head.weights[1].data);
    }

    std::remove(path.c_str());
}

TEST_CASE("checkpoint rejects damaged files") {
    Mlp m = Mlp::init({2, 3}, 5);
    const std::string path = tmp_path("damage.bin");
    save_checkpoint(path, m, nullptr, 5, 1);
    const std::string good = slurp(path);

    SECTION("bad magic") {
        spit(path, "kdckpt 2\n" + good.substr(good.find('\n') + 1));
        REQUIRE_THROWS_WITH(load_checkpoint(path),
                            Catch::Matchers::ContainsSubstring("bad checkpoint magic"));
    }

    SECTION("truncated payload") {
        spit(path, good.substr(0, good.size() - 8));
        REQUIRE_THROWS_WITH(load_checkpoint(path),
                            Catch::Matchers::ContainsSubstring("truncated"));
    }

    SECTION("declared float count disagrees with the architecture") {
        const auto pos = good.find("floats 9");
        REQUIRE(pos != std::string::npos);
        std::string doctored = good;
        doctored.replace(pos, 8, "floats 8");
        spit(path, doctored);
        REQUIRE_THROWS_WITH(load_checkpoint(path),
                            Catch::Matchers::ContainsSubstring("float count mismatch"));
    }

    SECTION("missing file") {
        REQUIRE_THROWS_AS(load_checkpoint("/tmp/kd_model_test_does_not_exist.bin"), IoError);
    }

    std::remove(path.c_str());
}
