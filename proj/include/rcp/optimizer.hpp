#pragma once

#include <map>
#include <vector>

#include "rcp/encoders.hpp"
#include "rcp/error.hpp"
#include "rcp/tensor.hpp"

namespace rcp {

// Plain SGD with momentum, weight decay and per-group learning-rate
// multipliers. Linear warmup to a constant rate. A zero effective rate skips
// the parameter entirely, leaving it bit-identical; the frozen-backbone mode
// and a backbone multiplier of 0 therefore coincide exactly.
struct OptimConfig {
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 0.0;
    std::size_t warmup_steps = 0;
    double backbone_lr_ratio = 1.0;  // multiplier on image-tower parameters
    bool freeze_backbone = false;
    bool freeze_tau = false;

    void validate() const {
        if (!(lr > 0.0)) throw InputError("OptimConfig: lr must be positive");
        if (!(momentum >= 0.0 && momentum < 1.0)) {
            throw InputError("OptimConfig: momentum must lie in [0, 1)");
        }
        if (backbone_lr_ratio < 0.0) {
            throw InputError("OptimConfig: backbone_lr_ratio must be >= 0");
        }
    }
};

class SgdOptimizer {
public:
    explicit SgdOptimizer(const OptimConfig& cfg) : cfg_(cfg) { cfg_.validate(); }

    double lr_at(std::size_t step) const {
        if (cfg_.warmup_steps == 0 || step >= cfg_.warmup_steps) return cfg_.lr;
        return cfg_.lr * static_cast<double>(step + 1) / static_cast<double>(cfg_.warmup_steps);
    }

    double group_multiplier(ParamGroup g) const {
        switch (g) {
            case ParamGroup::image_backbone:
                return cfg_.freeze_backbone ? 0.0 : cfg_.backbone_lr_ratio;
            case ParamGroup::temperature:
                return cfg_.freeze_tau ? 0.0 : 1.0;
            case ParamGroup::text_tower:
                return 1.0;
        }
        return 1.0;
    }

    // One update over the model parameters; parameters without a gradient
    // (never touched by the last backward) are skipped.
    void step(const std::vector<ParamRef>& params, std::size_t step_index) {
        const double base_lr = lr_at(step_index);
        if (velocity_.empty()) velocity_.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            const ParamRef& p = params[i];
            const double lr = base_lr * group_multiplier(p.group);
            if (lr == 0.0 || !p.tensor.has_grad()) continue;
            auto& vel = velocity_[i];
            auto& data = p.tensor.impl()->data;
            const auto& grad = p.tensor.impl()->grad;
            if (vel.size() != data.size()) vel.assign(data.size(), 0.0);
            for (std::size_t k = 0; k < data.size(); ++k) {
                const double g = grad[k] + cfg_.weight_decay * data[k];
                vel[k] = cfg_.momentum * vel[k] + g;
                data[k] -= lr * vel[k];
            }
        }
    }

private:
    OptimConfig cfg_;
    std::vector<std::vector<double>> velocity_;
};

}  // namespace rcp
