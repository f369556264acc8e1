#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ddcf/autodiff.hpp"

namespace ddcf {

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct AdamSettings {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Adaptive-moment state, one moment pair per parameter in registration order.
struct OptimizerState {
    AdamSettings settings;
    std::uint64_t step = 0;
    std::vector<Tensor> first_moment;
    std::vector<Tensor> second_moment;
};

class Adam {
public:
    explicit Adam(AdamSettings settings = {}) { state_.settings = settings; }

    const OptimizerState& state() const { return state_; }
    OptimizerState& state() { return state_; }

    /// Applies one update from each parameter's accumulated gradient.
    void step(const std::vector<Parameter*>& params) {
        if (state_.first_moment.empty()) {
            for (const Parameter* p : params) {
                state_.first_moment.emplace_back(p->value.shape());
                state_.second_moment.emplace_back(p->value.shape());
            }
        }
        if (state_.first_moment.size() != params.size()) {
            throw ShapeError("optimizer tracks " + std::to_string(state_.first_moment.size()) + " parameters, got "
                             + std::to_string(params.size()));
        }
        for (std::size_t i = 0; i < params.size(); i++) {
            const Parameter& p = *params[i];
            if (p.grad.shape() != p.value.shape() || state_.first_moment[i].shape() != p.value.shape()) {
                throw ShapeError("optimizer: gradient/moment shape mismatch for " + p.name);
            }
            if (!p.grad.all_finite()) {
                throw TrainingError("non-finite gradient in parameter " + p.name);
            }
        }
        const auto& s = state_.settings;
        state_.step += 1;
        double t = static_cast<double>(state_.step);
        double correction1 = 1.0 - std::pow(s.beta1, t);
        double correction2 = 1.0 - std::pow(s.beta2, t);
        for (std::size_t i = 0; i < params.size(); i++) {
            auto& w = params[i]->value.values();
            const auto& g = params[i]->grad.values();
            auto& m = state_.first_moment[i].values();
            auto& v = state_.second_moment[i].values();
            for (std::size_t k = 0; k < w.size(); k++) {
                m[k] = s.beta1 * m[k] + (1.0 - s.beta1) * g[k];
                v[k] = s.beta2 * v[k] + (1.0 - s.beta2) * g[k] * g[k];
                double mhat = m[k] / correction1;
                double vhat = v[k] / correction2;
                w[k] -= s.learning_rate * mhat / (std::sqrt(vhat) + s.epsilon);
            }
        }
    }

private:
    OptimizerState state_;
};

} // namespace ddcf
