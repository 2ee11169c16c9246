#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bmmae/tensor.hpp"

namespace bmmae {

// Linear warmup 0 -> base_lr over warmup_steps, then cosine decay to 0 at
// total_steps. Continuous at the junction.
double lr_schedule(int64_t step, int64_t total_steps, int64_t warmup_steps, double base_lr);

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Decoupled-weight-decay adaptive-moment optimizer over named parameters.
// Decay applies only to matrix-shaped weights: 1-D tensors (biases, norm
// scales/shifts, learned tokens) and the cls token are exempt. Updated values
// are snapped to f32-representable doubles so checkpoints stay bit-exact.
class AdamW {
public:
    AdamW(std::vector<std::pair<std::string, Tensor>> params, AdamWConfig cfg);

    // Applies one update using gradients found in `gs`; parameters without a
    // gradient slot are left untouched (their moments do not advance).
    void step(const autodiff::GradStore& gs, double lr);

    static bool decays(const std::string& name, const Tensor& t);

private:
    struct Slot {
        std::string name;
        Tensor t;
        bool decay;
        int64_t steps = 0;
        std::vector<double> m, v;
    };
    std::vector<Slot> slots_;
    AdamWConfig cfg_;
};

}  // namespace bmmae
