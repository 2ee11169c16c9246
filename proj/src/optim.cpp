#include "bmmae/optim.hpp"

#include <cmath>

namespace bmmae {

double lr_schedule(int64_t step, int64_t total_steps, int64_t warmup_steps, double base_lr) {
    if (step < 0 || total_steps < 0 || warmup_steps > total_steps)
        throw ConfigError("lr_schedule: invalid step bounds");
    if (step < warmup_steps)
        return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    const int64_t span = total_steps - warmup_steps;
    const double progress =
        span > 0 ? static_cast<double>(step - warmup_steps) / static_cast<double>(span) : 1.0;
    return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

bool AdamW::decays(const std::string& name, const Tensor& t) {
    return t.shape().size() >= 2 && name != "cls";
}

AdamW::AdamW(std::vector<std::pair<std::string, Tensor>> params, AdamWConfig cfg) : cfg_(cfg) {
    for (auto& [name, t] : params) {
        Slot s;
        s.decay = decays(name, t);
        s.name = std::move(name);
        s.m.assign(static_cast<size_t>(t.numel()), 0.0);
        s.v.assign(static_cast<size_t>(t.numel()), 0.0);
        s.t = std::move(t);
        slots_.push_back(std::move(s));
    }
}

void AdamW::step(const autodiff::GradStore& gs, double lr) {
    for (Slot& s : slots_) {
        const double* g = gs.find(s.t.node());
        if (!g) continue;
        ++s.steps;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(s.steps));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(s.steps));
        std::vector<double>& val = s.t.value_mutable();
        for (size_t i = 0; i < val.size(); ++i) {
            s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g[i];
            s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            const double mhat = s.m[i] / bc1;
            const double vhat = s.v[i] / bc2;
            double upd = mhat / (std::sqrt(vhat) + cfg_.eps);
            if (s.decay) upd += cfg_.weight_decay * val[i];
            val[i] = snap_f32(val[i] - lr * upd);
        }
    }
}

}  // namespace bmmae
