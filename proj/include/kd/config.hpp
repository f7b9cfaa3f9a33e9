#pragma once
// Run configuration: a flat key-value text format with dotted section keys
// and '#' comments, named presets, and a canonical snapshot serializer whose
// output re-parses to the same configuration.

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "kd/data.hpp"
#include "kd/errors.hpp"
#include "kd/losses.hpp"
#include "kd/optim.hpp"

namespace kd {

enum class Method { scratch, kd, dkd, aekt };
enum class DataSource { mixture, idx };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::scratch: return "scratch";
        case Method::kd: return "kd";
        case Method::dkd: return "dkd";
        case Method::aekt: return "aekt";
    }
    return "?";
}

inline Method method_from(const std::string& s) {
    if (s == "scratch") return Method::scratch;
    if (s == "kd") return Method::kd;
    if (s == "dkd") return Method::dkd;
    if (s == "aekt") return Method::aekt;
    throw ConfigError("config key method: unknown method '" + s + "'");
}

inline const char* serialization_name(Serialization s) {
    switch (s) {
        case Serialization::off: return "off";
        case Serialization::linear: return "linear";
        case Serialization::two_layer: return "two_layer";
    }
    return "?";
}

inline Serialization serialization_from(const std::string& s) {
    if (s == "off") return Serialization::off;
    if (s == "linear") return Serialization::linear;
    if (s == "two_layer") return Serialization::two_layer;
    throw ConfigError("config key distill.serialization: unknown value '" + s + "'");
}

struct RunConfig {
    Method method = Method::aekt;
    std::string out_dir;

    DataSource source = DataSource::mixture;
    MixtureSpec mixture;
    std::string idx_train_images, idx_train_labels, idx_test_images, idx_test_labels;

    std::vector<int> teacher_hidden{96, 96};
    std::vector<int> student_hidden{32};

    DistillConfig distill;

    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int batch_size = 64;
    Schedule schedule;

    std::uint64_t seed_data = 1;
    std::uint64_t seed_init = 1;
    std::uint64_t seed_shuffle = 1;

    // Applies method constraints and validates everything.
    void finalize() {
        if (method == Method::scratch) {
            distill.alpha = 0.0;
            distill.beta = 0.0;
            distill.gamma = 0.0;
        } else if (method == Method::dkd) {
            distill.gamma = 0.0;
        }
        mixture.seed = seed_data;
        if (source == DataSource::mixture) mixture.validate();
        if (source == DataSource::idx &&
            (idx_train_images.empty() || idx_train_labels.empty() || idx_test_images.empty() ||
             idx_test_labels.empty()))
            throw ConfigError("config: idx source needs all four data.*_images/labels paths");
        distill.validate();
        schedule.validate();
        if (batch_size < 1) throw ConfigError("config key optim.batch: must be at least 1");
        if (!(lr > 0.0)) throw ConfigError("config key optim.lr: must be positive");
        if (!(momentum >= 0.0 && momentum < 1.0))
            throw ConfigError("config key optim.momentum: must lie in [0, 1)");
        if (weight_decay < 0.0) throw ConfigError("config key optim.weight_decay: must be non-negative");
        for (int h : teacher_hidden)
            if (h <= 0) throw ConfigError("config key teacher.hidden: dims must be positive");
        for (int h : student_hidden)
            if (h <= 0) throw ConfigError("config key student.hidden: dims must be positive");
    }
};

namespace detail {

class KvReader {
  public:
    static KvReader from_text(const std::string& text) {
        KvReader r;
        std::istringstream is(text);
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const auto first = line.find_first_not_of(" \t\r");
            if (first == std::string::npos) continue;
            const auto last = line.find_last_not_of(" \t\r");
            line = line.substr(first, last - first + 1);
            const auto sp = line.find_first_of(" \t");
            if (sp == std::string::npos)
                throw ConfigError("config line " + std::to_string(lineno) + ": key '" + line +
                                  "' has no value");
            const std::string key = line.substr(0, sp);
            const auto vstart = line.find_first_not_of(" \t", sp);
            const std::string value = line.substr(vstart);
            if (!r.kv_.emplace(key, value).second)
                throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" +
                                  key + "'");
        }
        return r;
    }

    bool has(const std::string& key) const { return kv_.count(key) != 0; }

    std::string raw(const std::string& key) {
        auto it = kv_.find(key);
        if (it == kv_.end()) throw ConfigError("missing config key: " + key);
        used_.insert(key);
        return it->second;
    }

    double number(const std::string& key) {
        const std::string s = raw(key);
        try {
            std::size_t pos = 0;
            const double v = std::stod(s, &pos);
            if (pos != s.size()) throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key " + key + ": '" + s + "' is not a number");
        }
    }

    int integer(const std::string& key) {
        const double v = number(key);
        const int i = static_cast<int>(v);
        if (static_cast<double>(i) != v)
            throw ConfigError("config key " + key + ": expected an integer");
        return i;
    }

    std::uint64_t unsigned64(const std::string& key) {
        const std::string s = raw(key);
        try {
            std::size_t pos = 0;
            const std::uint64_t v = std::stoull(s, &pos);
            if (pos != s.size()) throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key " + key + ": '" + s + "' is not an unsigned integer");
        }
    }

    bool boolean(const std::string& key) {
        const std::string s = raw(key);
        if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
        if (s == "0" || s == "false" || s == "no" || s == "off") return false;
        throw ConfigError("config key " + key + ": '" + s + "' is not a boolean");
    }

    std::vector<int> int_list(const std::string& key) {
        std::istringstream is(raw(key));
        std::vector<int> out;
        for (int v; is >> v;) out.push_back(v);
        if (!is.eof() || out.empty())
            throw ConfigError("config key " + key + ": expected a space-separated integer list");
        return out;
    }

    // Rejects keys that were present but never consumed.
    void finish() const {
        for (const auto& [k, v] : kv_)
            if (!used_.count(k)) throw ConfigError("unknown config key: " + k);
    }

  private:
    std::map<std::string, std::string> kv_;
    std::set<std::string> used_;
};

}  // namespace detail

// Parses config text. With a base, present keys override the base values;
// without one, every core key is required and its absence is reported by name.
inline RunConfig parse_config_text(const std::string& text, const RunConfig* base = nullptr) {
    auto kv = detail::KvReader::from_text(text);
    RunConfig cfg = base ? *base : RunConfig{};

    auto opt = [&](const std::string& key) { return base && !kv.has(key); };

    if (!opt("method")) cfg.method = method_from(kv.raw("method"));
    if (kv.has("out")) cfg.out_dir = kv.raw("out");

    if (!opt("data.source")) {
        const std::string s = kv.raw("data.source");
        if (s == "mixture")
            cfg.source = DataSource::mixture;
        else if (s == "idx")
            cfg.source = DataSource::idx;
        else
            throw ConfigError("config key data.source: unknown source '" + s + "'");
    }
    if (cfg.source == DataSource::mixture) {
        if (!opt("data.classes")) cfg.mixture.num_classes = kv.integer("data.classes");
        if (!opt("data.dim")) cfg.mixture.dim = kv.integer("data.dim");
        if (!opt("data.clusters")) cfg.mixture.clusters_per_class = kv.integer("data.clusters");
        if (!opt("data.std")) cfg.mixture.cluster_std = kv.number("data.std");
        if (!opt("data.margin")) cfg.mixture.inter_class_margin = kv.number("data.margin");
        if (!opt("data.train")) cfg.mixture.train_size = kv.integer("data.train");
        if (!opt("data.test")) cfg.mixture.test_size = kv.integer("data.test");
    } else {
        if (!opt("data.train_images")) cfg.idx_train_images = kv.raw("data.train_images");
        if (!opt("data.train_labels")) cfg.idx_train_labels = kv.raw("data.train_labels");
        if (!opt("data.test_images")) cfg.idx_test_images = kv.raw("data.test_images");
        if (!opt("data.test_labels")) cfg.idx_test_labels = kv.raw("data.test_labels");
    }

    if (!opt("teacher.hidden")) cfg.teacher_hidden = kv.int_list("teacher.hidden");
    if (!opt("student.hidden")) cfg.student_hidden = kv.int_list("student.hidden");

    if (!opt("distill.alpha")) cfg.distill.alpha = kv.number("distill.alpha");
    if (!opt("distill.beta")) cfg.distill.beta = kv.number("distill.beta");
    if (!opt("distill.gamma")) cfg.distill.gamma = kv.number("distill.gamma");
    if (!opt("distill.temperature")) cfg.distill.temperature = kv.number("distill.temperature");
    if (!opt("distill.ce_weight")) cfg.distill.ce_weight = kv.number("distill.ce_weight");
    if (kv.has("distill.ablate_target_term"))
        cfg.distill.ablate_target_confidence_term = kv.boolean("distill.ablate_target_term");
    if (kv.has("distill.serialization"))
        cfg.distill.serialization = serialization_from(kv.raw("distill.serialization"));
    if (kv.has("distill.head_width")) cfg.distill.head_width = kv.integer("distill.head_width");
    if (kv.has("distill.head_nonlinear"))
        cfg.distill.head_nonlinear = kv.boolean("distill.head_nonlinear");

    if (!opt("optim.lr")) cfg.lr = kv.number("optim.lr");
    if (!opt("optim.momentum")) cfg.momentum = kv.number("optim.momentum");
    if (!opt("optim.weight_decay")) cfg.weight_decay = kv.number("optim.weight_decay");
    if (!opt("optim.batch")) cfg.batch_size = kv.integer("optim.batch");

    if (!opt("schedule.epochs")) cfg.schedule.total_epochs = kv.integer("schedule.epochs");
    if (!opt("schedule.warmup")) cfg.schedule.warmup_epochs = kv.integer("schedule.warmup");
    if (!opt("schedule.decay_start")) cfg.schedule.decay_start_epoch = kv.integer("schedule.decay_start");
    if (!opt("schedule.decay_period")) cfg.schedule.decay_period = kv.integer("schedule.decay_period");
    if (!opt("schedule.decay_factor")) cfg.schedule.decay_factor = kv.number("schedule.decay_factor");

    if (!opt("seed.data")) cfg.seed_data = kv.unsigned64("seed.data");
    if (!opt("seed.init")) cfg.seed_init = kv.unsigned64("seed.init");
    if (!opt("seed.shuffle")) cfg.seed_shuffle = kv.unsigned64("seed.shuffle");

    kv.finish();
    cfg.finalize();
    return cfg;
}

inline std::string to_text(const RunConfig& cfg) {
    std::ostringstream os;
    os.precision(17);
    os << "method " << method_name(cfg.method) << "\n";
    if (!cfg.out_dir.empty()) os << "out " << cfg.out_dir << "\n";
    os << "data.source " << (cfg.source == DataSource::mixture ? "mixture" : "idx") << "\n";
    if (cfg.source == DataSource::mixture) {
        os << "data.classes " << cfg.mixture.num_classes << "\n";
        os << "data.dim " << cfg.mixture.dim << "\n";
        os << "data.clusters " << cfg.mixture.clusters_per_class << "\n";
        os << "data.std " << cfg.mixture.cluster_std << "\n";
        os << "data.margin " << cfg.mixture.inter_class_margin << "\n";
        os << "data.train " << cfg.mixture.train_size << "\n";
        os << "data.test " << cfg.mixture.test_size << "\n";
    } else {
        os << "data.train_images " << cfg.idx_train_images << "\n";
        os << "data.train_labels " << cfg.idx_train_labels << "\n";
        os << "data.test_images " << cfg.idx_test_images << "\n";
        os << "data.test_labels " << cfg.idx_test_labels << "\n";
    }
    os << "teacher.hidden";
    for (int h : cfg.teacher_hidden) os << ' ' << h;
    os << "\nstudent.hidden";
    for (int h : cfg.student_hidden) os << ' ' << h;
    os << "\n";
    os << "distill.alpha " << cfg.distill.alpha << "\n";
    os << "distill.beta " << cfg.distill.beta << "\n";
    os << "distill.gamma " << cfg.distill.gamma << "\n";
    os << "distill.temperature " << cfg.distill.temperature << "\n";
    os << "distill.ce_weight " << cfg.distill.ce_weight << "\n";
    os << "distill.ablate_target_term " << (cfg.distill.ablate_target_confidence_term ? 1 : 0) << "\n";
    os << "distill.serialization " << serialization_name(cfg.distill.serialization) << "\n";
    if (cfg.distill.serialization == Serialization::two_layer) {
        os << "distill.head_width " << cfg.distill.head_width << "\n";
        os << "distill.head_nonlinear " << (cfg.distill.head_nonlinear ? 1 : 0) << "\n";
    }
    os << "optim.lr " << cfg.lr << "\n";
    os << "optim.momentum " << cfg.momentum << "\n";
    os << "optim.weight_decay " << cfg.weight_decay << "\n";
    os << "optim.batch " << cfg.batch_size << "\n";
    os << "schedule.epochs " << cfg.schedule.total_epochs << "\n";
    os << "schedule.warmup " << cfg.schedule.warmup_epochs << "\n";
    os << "schedule.decay_start " << cfg.schedule.decay_start_epoch << "\n";
    os << "schedule.decay_period " << cfg.schedule.decay_period << "\n";
    os << "schedule.decay_factor " << cfg.schedule.decay_factor << "\n";
    os << "seed.data " << cfg.seed_data << "\n";
    os << "seed.init " << cfg.seed_init << "\n";
    os << "seed.shuffle " << cfg.seed_shuffle << "\n";
    return os.str();
}

// Named starting points. "desk" is the fast end-to-end setting; the "paper-*"
// presets carry the published hyperparameter tables.
inline RunConfig preset(const std::string& name) {
    RunConfig cfg;  // defaults already describe the desk task
    if (name == "desk") {
        cfg.method = Method::aekt;
        cfg.distill.alpha = 1.0;
        cfg.distill.beta = 0.15;
        cfg.distill.gamma = 0.1;
        cfg.distill.temperature = 4.0;
        cfg.distill.serialization = Serialization::linear;
        cfg.lr = 0.05;
        cfg.weight_decay = 5e-4;
        cfg.batch_size = 64;
        cfg.schedule = Schedule{60, 5, 38, 8, 0.1};
        return cfg;
    }
    if (name == "paper-cifar-same") {
        cfg.method = Method::aekt;
        cfg.distill.alpha = 0.5;
        cfg.distill.beta = 4.0;
        cfg.distill.gamma = 0.1;
        cfg.distill.temperature = 4.0;
        cfg.distill.serialization = Serialization::linear;
        cfg.lr = 0.05;
        cfg.weight_decay = 5e-4;
        cfg.batch_size = 64;
        cfg.schedule = Schedule{240, 20, 150, 30, 0.1};
        return cfg;
    }
    if (name == "paper-cifar-noser") {
        cfg.method = Method::aekt;
        cfg.distill.alpha = 1.0;
        cfg.distill.beta = 8.0;
        cfg.distill.gamma = 0.5;
        cfg.distill.temperature = 4.0;
        cfg.distill.serialization = Serialization::off;
        cfg.lr = 0.05;
        cfg.weight_decay = 5e-4;
        cfg.batch_size = 64;
        cfg.schedule = Schedule{240, 20, 150, 30, 0.1};
        return cfg;
    }
    if (name == "paper-imagenet") {
        cfg.method = Method::aekt;
        cfg.distill.alpha = 1.0;
        cfg.distill.beta = 2.0;
        cfg.distill.gamma = 0.25;
        cfg.distill.temperature = 1.0;
        cfg.distill.serialization = Serialization::off;
        cfg.lr = 0.1;
        cfg.weight_decay = 1e-4;
        cfg.batch_size = 512;
        cfg.schedule = Schedule{100, 0, 30, 30, 0.1};
        return cfg;
    }
    throw ConfigError("unknown preset: " + name);
}

}  // namespace kd
