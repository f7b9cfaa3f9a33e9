#pragma once
// Training orchestration: teacher pretraining, the distillation loop with
// its optional serialization head, similarity evaluation, ablation grids,
// and run-directory persistence. Every run is a pure function of its
// RunConfig; all randomness flows through the explicit seeds.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "kd/config.hpp"
#include "kd/data.hpp"
#include "kd/losses.hpp"
#include "kd/metrics.hpp"
#include "kd/model.hpp"
#include "kd/optim.hpp"
#include "kd/tensor.hpp"

namespace kd {

struct PreparedData {
    Dataset train;
    Dataset test;
};

inline PreparedData load_data(const RunConfig& cfg) {
    PreparedData d;
    if (cfg.source == DataSource::mixture) {
        auto [train, test] = generate_mixture(cfg.mixture);
        d.train = std::move(train);
        d.test = std::move(test);
    } else {
        d.train = read_idx(cfg.idx_train_images, cfg.idx_train_labels);
        d.test = read_idx(cfg.idx_test_images, cfg.idx_test_labels);
        const int c = std::max(d.train.num_classes, d.test.num_classes);
        d.train.num_classes = c;
        d.test.num_classes = c;
    }
    standardize(d.train, d.test);
    return d;
}

struct TrainResult {
    RunMetrics metrics;
    Mlp model;
    std::optional<SerializationHead> head;
    // Per-step agreement between the decomposed and the direct classic-KD
    // loss values; meaningful only for method=kd.
    double kd_trace_max_gap = -1.0;
    long kd_trace_steps = 0;
};

namespace detail {

inline std::uint64_t epoch_seed(std::uint64_t shuffle_seed, int epoch) {
    return shuffle_seed ^ (0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(epoch + 1));
}

inline Tensor softmax_probs(const Tensor& logits) { return exp(log_softmax(logits, 1.0)); }

inline std::vector<int> arch_dims(int input, const std::vector<int>& hidden, int classes) {
    std::vector<int> dims;
    dims.push_back(input);
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(classes);
    return dims;
}

inline void write_text(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << content;
    if (!os) throw IoError("write failed: " + path);
}

}  // namespace detail

struct SimilarityReport {
    double cosine = 0.0;
    double agreement = 0.0;
    int samples = 0;
};

inline SimilarityReport eval_similarity(const Mlp& teacher, const Mlp& student,
                                        const Dataset& test) {
    if (teacher.num_classes() != student.num_classes())
        throw ConfigError("similarity: class counts differ between the two models");
    const Tensor lt = teacher.forward(test.features);
    const Tensor ls = student.forward(test.features);
    SimilarityReport r;
    r.cosine = cosine_similarity(detail::softmax_probs(lt), detail::softmax_probs(ls));
    r.agreement = prediction_agreement(lt, ls);
    r.samples = test.size();
    return r;
}

// Plain cross-entropy training of the teacher architecture.
inline TrainResult train_teacher(const RunConfig& cfg, const PreparedData& data) {
    TrainResult res;
    res.model = Mlp::init(detail::arch_dims(data.train.dim(), cfg.teacher_hidden,
                                            data.train.num_classes),
                          cfg.seed_init);
    Sgd opt{cfg.momentum, cfg.weight_decay, {}};
    auto params = res.model.parameters();
    opt.attach(params);
    const int n = data.train.size();
    for (int epoch = 0; epoch < cfg.schedule.total_epochs; ++epoch) {
        const double lr = lr_at(cfg.schedule, cfg.lr, epoch);
        double ce_sum = 0.0;
        for (const Batch& b : batches(data.train, cfg.batch_size,
                                      detail::epoch_seed(cfg.seed_shuffle, epoch))) {
            Tape tape;
            std::vector<Tensor> leaves;
            const Tensor logits = res.model.forward(tape, b.features, &leaves);
            const Tensor loss = cross_entropy(logits, b.labels);
            tape.backward(loss);
            std::vector<std::vector<double>> grads;
            grads.reserve(leaves.size());
            for (const Tensor& leaf : leaves) grads.push_back(tape.grad(leaf));
            opt.step(params, grads, lr);
            ce_sum += loss.item() * static_cast<double>(b.labels.size());
        }
        EpochRow row;
        row.epoch = epoch;
        row.lr = lr;
        row.ce = ce_sum / n;
        row.total = row.ce;
        row.test_acc = top1_accuracy(res.model.forward(data.test.features), data.test.labels);
        res.metrics.rows.push_back(row);
    }
    return res;
}

// The distillation loop. The teacher is frozen, so its logits over both
// splits are computed once up front. All methods share this code path:
// scratch and dkd arrive here with their weights already forced by
// RunConfig::finalize, which keeps degenerate configurations byte-identical
// to their reference method.
inline TrainResult distill(const RunConfig& cfg, const Mlp& teacher, const PreparedData& data) {
    const int classes = data.train.num_classes;
    if (teacher.num_classes() != classes)
        throw ConfigError("distill: teacher class count " + std::to_string(teacher.num_classes()) +
                          " does not match dataset classes " + std::to_string(classes));
    if (teacher.input_dim() != data.train.dim())
        throw ConfigError("distill: teacher input dim does not match dataset dim");

    const Tensor teacher_train_logits = teacher.forward(data.train.features);

    TrainResult res;
    res.model = Mlp::init(detail::arch_dims(data.train.dim(), cfg.student_hidden, classes),
                          cfg.seed_init);
    if (cfg.distill.serialization == Serialization::linear)
        res.head = SerializationHead::identity_linear(classes);
    else if (cfg.distill.serialization == Serialization::two_layer)
        res.head = SerializationHead::two_layer_init(classes, cfg.distill.head_width,
                                                     cfg.distill.head_nonlinear,
                                                     cfg.seed_init ^ 0x68656164ull);

    std::vector<Tensor*> params = res.model.parameters();
    if (res.head)
        for (Tensor* p : res.head->parameters()) params.push_back(p);
    Sgd opt{cfg.momentum, cfg.weight_decay, {}};
    opt.attach(params);

    const double temp = cfg.distill.temperature;
    const int n = data.train.size();
    if (cfg.method == Method::kd) res.kd_trace_max_gap = 0.0;

    for (int epoch = 0; epoch < cfg.schedule.total_epochs; ++epoch) {
        const double lr = lr_at(cfg.schedule, cfg.lr, epoch);
        const double wf = warmup_factor(cfg.schedule, epoch);
        double ce_sum = 0.0, tc_sum = 0.0, nc_sum = 0.0, ae_sum = 0.0, total_sum = 0.0;
        for (const Batch& b : batches(data.train, cfg.batch_size,
                                      detail::epoch_seed(cfg.seed_shuffle, epoch))) {
            Tape tape;
            std::vector<Tensor> leaves;
            const Tensor class_logits = res.model.forward(tape, b.features, &leaves);
            const Tensor distill_logits =
                res.head ? res.head->forward(tape, class_logits, &leaves) : class_logits;
            const DistillBatch db{take_rows(teacher_train_logits, b.indices), distill_logits,
                                  class_logits, b.labels};

            const Tensor ce = cross_entropy(class_logits, b.labels);
            const Tensor tc = tckd_loss(db, temp);
            const Tensor nc = nckd_loss(db, temp);
            const Tensor ae = aekt_loss(db, temp, cfg.distill.ablate_target_confidence_term);

            Tensor total;
            if (cfg.method == Method::kd) {
                const Tensor kdec = kd_loss_decomposed(db, temp);
                const double direct = kd_loss(db, temp).item();
                const double gap = std::fabs(kdec.item() - direct);
                if (gap > res.kd_trace_max_gap) res.kd_trace_max_gap = gap;
                ++res.kd_trace_steps;
                total = cfg.distill.ce_weight * ce + wf * kdec;
            } else {
                total = cfg.distill.ce_weight * ce +
                        wf * (cfg.distill.alpha * tc + cfg.distill.beta * nc +
                              cfg.distill.gamma * ae);
            }

            tape.backward(total);
            std::vector<std::vector<double>> grads;
            grads.reserve(leaves.size());
            for (const Tensor& leaf : leaves) grads.push_back(tape.grad(leaf));
            opt.step(params, grads, lr);

            const double bn = static_cast<double>(b.labels.size());
            ce_sum += ce.item() * bn;
            tc_sum += tc.item() * bn;
            nc_sum += nc.item() * bn;
            ae_sum += ae.item() * bn;
            total_sum += total.item() * bn;
        }
        EpochRow row;
        row.epoch = epoch;
        row.lr = lr;
        row.warmup = wf;
        row.ce = ce_sum / n;
        row.tckd = tc_sum / n;
        row.nckd = nc_sum / n;
        row.aekt = ae_sum / n;
        row.total = total_sum / n;
        row.test_acc = top1_accuracy(res.model.forward(data.test.features), data.test.labels);
        res.metrics.rows.push_back(row);
    }

    const SimilarityReport sim = eval_similarity(teacher, res.model, data.test);
    res.metrics.final_cosine = sim.cosine;
    res.metrics.final_agreement = sim.agreement;
    if (res.head && res.head->variant == HeadVariant::linear) {
        const HeadExport he = export_head_weights(*res.head);
        res.metrics.head_diag_mean_abs = he.diag_mean_abs;
        res.metrics.head_offdiag_mean_abs = he.offdiag_mean_abs;
    }
    return res;
}

// ---------------------------------------------------------------------------
// run-directory persistence
// ---------------------------------------------------------------------------

inline void write_run_dir(const std::string& dir, const RunConfig& cfg, const TrainResult& res) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create run directory: " + dir);
    detail::write_text(dir + "/config.txt", to_text(cfg));
    detail::write_text(dir + "/metrics.csv", res.metrics.to_csv());
    detail::write_text(dir + "/summary.txt", res.metrics.summary_text());
    save_checkpoint(dir + "/checkpoint.bin", res.model, res.head ? &*res.head : nullptr,
                    cfg.seed_init, cfg.schedule.total_epochs);
    if (res.head && res.head->variant == HeadVariant::linear) {
        const HeadExport he = export_head_weights(*res.head);
        std::string csv;
        for (int i = 0; i < he.weight.rows(); ++i) {
            for (int j = 0; j < he.weight.cols(); ++j) {
                if (j) csv += ',';
                csv += detail::fmt_double(he.weight.at(i, j));
            }
            csv += '\n';
        }
        detail::write_text(dir + "/head_weights.csv", csv);
    }
}

// ---------------------------------------------------------------------------
// ablation grids
// ---------------------------------------------------------------------------

struct WeightCell {
    std::string label;
    double alpha = 0.0, beta = 0.0, gamma = 0.0;
    double test_acc = 0.0;
};

struct HeadCell {
    std::string label;
    Serialization serialization = Serialization::off;
    int width = 0;
    bool nonlinear = false;
    double test_acc = 0.0;
};

struct AblationOutput {
    std::vector<WeightCell> weight_grid;  // 8 on/off combinations
    std::vector<HeadCell> head_grid;
    RunMetrics with_term;     // target-confidence factor present (default loss)
    RunMetrics without_term;  // factor replaced by 1 in the backward rule

    std::string weight_grid_csv() const {
        std::string out = "cell,alpha,beta,gamma,test_acc\n";
        for (const WeightCell& c : weight_grid)
            out += c.label + ',' + detail::fmt_double(c.alpha) + ',' + detail::fmt_double(c.beta) +
                   ',' + detail::fmt_double(c.gamma) + ',' + detail::fmt_double(c.test_acc) + '\n';
        return out;
    }

    std::string head_grid_csv() const {
        std::string out = "head,width,nonlinear,test_acc\n";
        for (const HeadCell& c : head_grid)
            out += c.label + ',' + std::to_string(c.width) + ',' + (c.nonlinear ? "1" : "0") + ',' +
                   detail::fmt_double(c.test_acc) + '\n';
        return out;
    }

    std::string ablate_pair_csv() const {
        std::string out = "epoch,acc_with_term,acc_without_term\n";
        for (std::size_t i = 0; i < with_term.rows.size() && i < without_term.rows.size(); ++i)
            out += std::to_string(with_term.rows[i].epoch) + ',' +
                   detail::fmt_double(with_term.rows[i].test_acc) + ',' +
                   detail::fmt_double(without_term.rows[i].test_acc) + '\n';
        return out;
    }
};

// Runs the three ablation studies off one base configuration: the loss-weight
// on/off grid, the head-variant grid, and the target-confidence-term pair.
// Cells are independent runs; jobs > 1 fans them out across threads, each
// with its own tape, model, and RNG stream, merged by cell index.
inline AblationOutput run_ablation(const RunConfig& base, const Mlp& teacher,
                                   const PreparedData& data, int jobs = 1) {
    AblationOutput out;
    RunConfig proto = base;
    proto.method = Method::aekt;

    const double a = base.distill.alpha, b = base.distill.beta, g = base.distill.gamma;
    const struct {
        const char* label;
        bool use_a, use_b, use_g;
    } masks[] = {
        {"all", true, true, true},     {"alpha+beta", true, true, false},
        {"alpha+gamma", true, false, true}, {"beta+gamma", false, true, true},
        {"alpha", true, false, false}, {"beta", false, true, false},
        {"gamma", false, false, true}, {"none", false, false, false},
    };
    for (const auto& m : masks) {
        WeightCell c;
        c.label = m.label;
        c.alpha = m.use_a ? a : 0.0;
        c.beta = m.use_b ? b : 0.0;
        c.gamma = m.use_g ? g : 0.0;
        out.weight_grid.push_back(c);
    }

    const int classes = data.train.num_classes;
    const struct {
        const char* label;
        Serialization ser;
        int width;
        bool nonlinear;
    } heads[] = {
        {"linear", Serialization::linear, 0, false},
        {"two_layer-c-plain", Serialization::two_layer, classes, false},
        {"two_layer-c-prelu", Serialization::two_layer, classes, true},
        {"two_layer-2c-plain", Serialization::two_layer, 2 * classes, false},
        {"two_layer-2c-prelu", Serialization::two_layer, 2 * classes, true},
        {"two_layer-halfc-plain", Serialization::two_layer, std::max(1, classes / 2), false},
        {"two_layer-halfc-prelu", Serialization::two_layer, std::max(1, classes / 2), true},
    };
    for (const auto& h : heads) {
        HeadCell c;
        c.label = h.label;
        c.serialization = h.ser;
        c.width = h.width;
        c.nonlinear = h.nonlinear;
        out.head_grid.push_back(c);
    }

    // A cell whose run blows up numerically is reported as nan, not fatal:
    // one bad hyper-parameter combination must not take down the whole grid.
    auto guarded_acc = [&teacher, &data](const RunConfig& cfg) {
        try {
            return distill(cfg, teacher, data).metrics.rows.back().test_acc;
        } catch (const NumericError&) {
            return std::numeric_limits<double>::quiet_NaN();
        }
    };

    std::vector<std::function<void()>> tasks;
    for (std::size_t i = 0; i < out.weight_grid.size(); ++i)
        tasks.push_back([&, i] {
            RunConfig cfg = proto;
            cfg.distill.alpha = out.weight_grid[i].alpha;
            cfg.distill.beta = out.weight_grid[i].beta;
            cfg.distill.gamma = out.weight_grid[i].gamma;
            cfg.finalize();
            out.weight_grid[i].test_acc = guarded_acc(cfg);
        });
    for (std::size_t i = 0; i < out.head_grid.size(); ++i)
        tasks.push_back([&, i] {
            RunConfig cfg = proto;
            cfg.distill.serialization = out.head_grid[i].serialization;
            cfg.distill.head_width = out.head_grid[i].width;
            cfg.distill.head_nonlinear = out.head_grid[i].nonlinear;
            cfg.finalize();
            out.head_grid[i].test_acc = guarded_acc(cfg);
        });
    tasks.push_back([&] {
        RunConfig cfg = proto;
        cfg.distill.ablate_target_confidence_term = false;
        cfg.finalize();
        out.with_term = distill(cfg, teacher, data).metrics;
    });
    tasks.push_back([&] {
        RunConfig cfg = proto;
        cfg.distill.ablate_target_confidence_term = true;
        cfg.finalize();
        out.without_term = distill(cfg, teacher, data).metrics;
    });

    if (jobs <= 1) {
        for (auto& t : tasks) t();
    } else {
        std::atomic<std::size_t> next{0};
        auto worker = [&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= tasks.size()) return;
                tasks[i]();
            }
        };
        std::vector<std::thread> pool;
        const int nw = std::min<int>(jobs, static_cast<int>(tasks.size()));
        pool.reserve(static_cast<std::size_t>(nw));
        for (int w = 0; w < nw; ++w) pool.emplace_back(worker);
        for (std::thread& th : pool) th.join();
    }
    return out;
}

}  // namespace kd
