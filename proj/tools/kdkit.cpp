// kdkit: teacher pretraining, distillation, gradient verification, ablation
// grids, and similarity evaluation over the kd/ library.
//
// Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 gradient
// verification failure, 1 anything else.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"

#include "kd/config.hpp"
#include "kd/errors.hpp"
#include "kd/model.hpp"
#include "kd/trainer.hpp"
#include "kd/verify.hpp"

namespace {

constexpr int exit_ok = 0;
constexpr int exit_other = 1;
constexpr int exit_config = 2;
constexpr int exit_io = 3;
constexpr int exit_verify = 4;

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw kd::IoError("cannot open config file: " + path);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

struct CommonOpts {
    std::string preset;
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool want_out) {
    cmd->add_option("--preset", o.preset,
                    "named preset: desk, paper-cifar-same, paper-cifar-noser, paper-imagenet");
    cmd->add_option("--config", o.config_path, "key-value config file (overlays the preset)");
    cmd->add_option("--seed", o.seed, "override data/init/shuffle seeds with one value");
    if (want_out) cmd->add_option("--out", o.out_dir, "run directory")->required();
}

kd::RunConfig build_config(const CommonOpts& o) {
    kd::RunConfig cfg;
    if (!o.preset.empty()) {
        cfg = kd::preset(o.preset);
        if (!o.config_path.empty()) cfg = kd::parse_config_text(slurp(o.config_path), &cfg);
    } else if (!o.config_path.empty()) {
        cfg = kd::parse_config_text(slurp(o.config_path));
    } else {
        cfg = kd::preset("desk");
    }
    if (o.seed) {
        cfg.seed_data = *o.seed;
        cfg.seed_init = *o.seed;
        cfg.seed_shuffle = *o.seed;
    }
    if (!o.out_dir.empty()) cfg.out_dir = o.out_dir;
    cfg.finalize();
    return cfg;
}

int run_train_teacher(const CommonOpts& o) {
    kd::RunConfig cfg = build_config(o);
    const kd::PreparedData data = kd::load_data(cfg);
    const kd::TrainResult res = kd::train_teacher(cfg, data);
    kd::write_run_dir(cfg.out_dir, cfg, res);
    std::cout << res.metrics.summary_text();
    std::cout << "run_dir " << cfg.out_dir << "\n";
    return exit_ok;
}

int run_distill(const CommonOpts& o, const std::string& teacher_path) {
    kd::RunConfig cfg = build_config(o);
    const kd::PreparedData data = kd::load_data(cfg);
    const kd::LoadedCheckpoint teacher = kd::load_checkpoint(teacher_path);
    const kd::TrainResult res = kd::distill(cfg, teacher.model, data);
    kd::write_run_dir(cfg.out_dir, cfg, res);
    std::cout << res.metrics.summary_text();
    if (cfg.method == kd::Method::kd)
        std::cout << "kd_trace_max_gap " << res.kd_trace_max_gap << "\n";
    std::cout << "run_dir " << cfg.out_dir << "\n";
    return exit_ok;
}

int run_verify(int cases, std::uint64_t seed, const std::string& out_dir) {
    kd::VerifyOptions opt;
    opt.cases = cases;
    opt.seed = seed;
    const kd::VerifyReport rep = kd::verify_gradients(opt);
    std::cout << rep.text();
    if (!out_dir.empty()) {
        std::error_code ec;
        std::filesystem::create_directories(out_dir, ec);
        if (ec) throw kd::IoError("cannot create output directory: " + out_dir);
        std::ofstream txt(out_dir + "/report.txt");
        txt << rep.text();
        std::ofstream csv(out_dir + "/report.csv");
        csv << rep.csv();
        if (!txt || !csv) throw kd::IoError("cannot write verification report: " + out_dir);
    }
    return rep.all_pass ? exit_ok : exit_verify;
}

int run_ablate(const CommonOpts& o, const std::string& teacher_path, int jobs) {
    kd::RunConfig cfg = build_config(o);
    const kd::PreparedData data = kd::load_data(cfg);
    kd::Mlp teacher;
    if (!teacher_path.empty()) {
        teacher = kd::load_checkpoint(teacher_path).model;
    } else {
        std::cout << "no --teacher given; pretraining one from the base config\n";
        teacher = kd::train_teacher(cfg, data).model;
    }
    const kd::AblationOutput out = kd::run_ablation(cfg, teacher, data, jobs);
    std::error_code ec;
    std::filesystem::create_directories(cfg.out_dir, ec);
    if (ec) throw kd::IoError("cannot create run directory: " + cfg.out_dir);
    kd::detail::write_text(cfg.out_dir + "/config.txt", kd::to_text(cfg));
    kd::detail::write_text(cfg.out_dir + "/weight_grid.csv", out.weight_grid_csv());
    kd::detail::write_text(cfg.out_dir + "/head_grid.csv", out.head_grid_csv());
    kd::detail::write_text(cfg.out_dir + "/ablate_pair.csv", out.ablate_pair_csv());
    std::cout << out.weight_grid_csv() << "\n" << out.head_grid_csv() << "\n";
    std::cout << "run_dir " << cfg.out_dir << "\n";
    return exit_ok;
}

int run_eval_similarity(const CommonOpts& o, const std::string& teacher_path,
                        const std::string& student_path) {
    kd::RunConfig cfg = build_config(o);
    const kd::PreparedData data = kd::load_data(cfg);
    const kd::Mlp teacher = kd::load_checkpoint(teacher_path).model;
    const kd::Mlp student = kd::load_checkpoint(student_path).model;
    const kd::SimilarityReport rep = kd::eval_similarity(teacher, student, data.test);
    std::cout << "cosine_similarity " << rep.cosine << "\n";
    std::cout << "agreement " << rep.agreement << "\n";
    std::cout << "samples " << rep.samples << "\n";
    return exit_ok;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"knowledge-distillation toolkit"};
    app.require_subcommand(1);

    CommonOpts teach_o, dist_o, abl_o, sim_o;
    std::string dist_teacher, abl_teacher, sim_teacher, sim_student;
    int verify_cases = 1000, abl_jobs = 1;
    std::uint64_t verify_seed = 20240817;
    std::string verify_out;

    CLI::App* teach = app.add_subcommand("train-teacher", "pretrain a teacher with cross-entropy");
    add_common(teach, teach_o, true);

    CLI::App* dist = app.add_subcommand("distill", "train a student against a frozen teacher");
    add_common(dist, dist_o, true);
    dist->add_option("--teacher", dist_teacher, "teacher checkpoint")->required();

    CLI::App* verify = app.add_subcommand("verify-grads",
                                          "three-way gradient check: formulas vs tape vs finite differences");
    verify->add_option("--cases", verify_cases, "random cases per formula");
    verify->add_option("--seed", verify_seed, "case-generator seed");
    verify->add_option("--out", verify_out, "directory for report.txt / report.csv");

    CLI::App* abl = app.add_subcommand("ablate", "loss-weight grid, head grid, and gradient-term pair");
    add_common(abl, abl_o, true);
    abl->add_option("--teacher", abl_teacher, "teacher checkpoint (trained from config when absent)");
    abl->add_option("--jobs", abl_jobs, "worker threads for grid cells");

    CLI::App* sim = app.add_subcommand("eval-similarity", "teacher-student output similarity on the test split");
    add_common(sim, sim_o, false);
    sim->add_option("--teacher", sim_teacher, "teacher checkpoint")->required();
    sim->add_option("--student", sim_student, "student checkpoint")->required();

    try {
        app.parse(argc, argv);
        if (teach->parsed()) return run_train_teacher(teach_o);
        if (dist->parsed()) return run_distill(dist_o, dist_teacher);
        if (verify->parsed()) return run_verify(verify_cases, verify_seed, verify_out);
        if (abl->parsed()) return run_ablate(abl_o, abl_teacher, abl_jobs);
        if (sim->parsed()) return run_eval_similarity(sim_o, sim_teacher, sim_student);
        return exit_other;
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? exit_ok : exit_config;
    } catch (const kd::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return exit_config;
    } catch (const kd::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return exit_io;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_other;
    }
}
