#pragma once
// SGD with classic momentum and decoupled-from-nothing L2 weight decay
// folded into the gradient: v <- mu*v + g + wd*theta; theta <- theta - lr*v.

#include <cstddef>
#include <vector>

#include "kd/errors.hpp"
#include "kd/tensor.hpp"

namespace kd {

struct Sgd {
    double momentum = 0.9;
    double weight_decay = 0.0;
    std::vector<std::vector<double>> velocity;

    void attach(const std::vector<Tensor*>& params) {
        velocity.clear();
        for (const Tensor* p : params) velocity.emplace_back(p->size(), 0.0);
    }

    void step(const std::vector<Tensor*>& params, const std::vector<std::vector<double>>& grads,
              double lr) {
        if (params.size() != velocity.size() || params.size() != grads.size())
            throw ContractError("sgd: parameter, gradient and state counts disagree");
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor& p = *params[i];
            const std::vector<double>& g = grads[i];
            std::vector<double>& v = velocity[i];
            if (g.size() != p.size() || v.size() != p.size())
                throw ShapeError("sgd: gradient size does not match parameter");
            for (std::size_t k = 0; k < v.size(); ++k) {
                v[k] = momentum * v[k] + g[k] + weight_decay * p.data[k];
                p.data[k] -= lr * v[k];
            }
        }
    }
};

struct Schedule {
    int total_epochs = 1;
    int warmup_epochs = 0;       // linear ramp of the distillation weight
    int decay_start_epoch = 0;   // first epoch whose lr is lr0 * factor
    int decay_period = 1;        // epochs between further decays
    double decay_factor = 0.1;

    void validate() const {
        if (total_epochs <= 0) throw ConfigError("schedule: total_epochs must be positive");
        if (warmup_epochs < 0) throw ConfigError("schedule: warmup_epochs must be non-negative");
        if (decay_period <= 0) throw ConfigError("schedule: decay_period must be positive");
        if (!(decay_factor > 0.0 && decay_factor <= 1.0))
            throw ConfigError("schedule: decay_factor must lie in (0, 1]");
    }
};

// Piecewise-constant lr: multiply by decay_factor at decay_start_epoch and
// every decay_period epochs after. Epochs are 0-based. decay_start_epoch <= 0
// disables decay.
inline double lr_at(const Schedule& s, double lr0, int epoch) {
    s.validate();
    if (epoch < 0) throw ContractError("lr_at: negative epoch");
    if (s.decay_start_epoch <= 0 || epoch < s.decay_start_epoch) return lr0;
    const int steps = 1 + (epoch - s.decay_start_epoch) / s.decay_period;
    double lr = lr0;
    for (int i = 0; i < steps; ++i) lr *= s.decay_factor;
    return lr;
}

// Distillation weight ramp: epoch/warmup_epochs clipped to [0, 1];
// identically 1 when warmup is disabled.
inline double warmup_factor(const Schedule& s, int epoch) {
    s.validate();
    if (epoch < 0) throw ContractError("warmup_factor: negative epoch");
    if (s.warmup_epochs == 0) return 1.0;
    const double f = static_cast<double>(epoch) / static_cast<double>(s.warmup_epochs);
    return f >= 1.0 ? 1.0 : f;
}

}  // namespace kd
