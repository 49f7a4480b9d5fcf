#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "boottod/common.hpp"
#include "boottod/encoder.hpp"
#include "boottod/tensor.hpp"

namespace boottod {

struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    // Round parameters through f32 after each update so checkpoint storage
    // is lossless.
    bool storage32 = true;

    void validate() const {
        if (lr <= 0.0) throw ConfigError("adam: lr must be > 0");
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
            throw ConfigError("adam: betas must be in [0, 1)");
        if (eps <= 0.0) throw ConfigError("adam: eps must be > 0");
    }
};

/// Bias-corrected Adam. Moment state is keyed by parameter storage, so the
/// same Adam instance must be reused across steps for the same model.
class Adam {
public:
    explicit Adam(AdamConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    std::int64_t step_count() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

    /// One update over all parameters; consumes (and clears) their gradients.
    void step(const std::vector<std::pair<std::string, Tensor>>& params) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (const auto& [name, param] : params) {
            Tensor p = param;
            auto grad = p.grad_or_zero();
            for (double g : grad) {
                if (!std::isfinite(g))
                    throw NumericError("adam: non-finite gradient for parameter '" + name + "'");
            }
            auto& slot = state_[p.node().get()];
            if (slot.m.empty()) {
                slot.m.assign(p.numel(), 0.0);
                slot.v.assign(p.numel(), 0.0);
            }
            auto data = p.mutable_data();
            for (std::size_t i = 0; i < data.size(); ++i) {
                slot.m[i] = cfg_.beta1 * slot.m[i] + (1.0 - cfg_.beta1) * grad[i];
                slot.v[i] = cfg_.beta2 * slot.v[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
                const double mhat = slot.m[i] / bc1;
                const double vhat = slot.v[i] / bc2;
                data[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
            if (cfg_.storage32) quantize_storage_f32(p);
            p.clear_grad();
        }
    }

private:
    struct Moments {
        std::vector<double> m, v;
    };
    AdamConfig cfg_;
    std::int64_t t_ = 0;
    std::unordered_map<detail::TensorNode*, Moments> state_;
};

}  // namespace boottod
