#include "probe/optim.hpp"

#include <cmath>

namespace probe::pretrain {

double lr_at(int epoch, const OptimSchedule& s) {
    if (epoch < 0 || epoch > s.total_epochs)
        throw ContractError("lr_at: epoch " + std::to_string(epoch) + " outside [0," +
                            std::to_string(s.total_epochs) + "]");
    if (s.warmup_epochs > 0 && epoch < s.warmup_epochs)
        return s.base_lr * static_cast<double>(epoch + 1) / static_cast<double>(s.warmup_epochs);
    const int span = s.total_epochs - s.warmup_epochs;
    if (span <= 0) return s.base_lr;
    const double t = static_cast<double>(epoch - s.warmup_epochs) / static_cast<double>(span);
    return s.base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

void AdamW::register_params(const std::vector<std::pair<std::string, num::TensorPtr>>& params) {
    for (const auto& [name, p] : params) {
        if (!p) throw ContractError("adamw: null parameter " + name);
        if (!p->requires_grad())
            throw ContractError("adamw: parameter " + name + " is frozen (requires_grad=false)");
        Slot s;
        s.name = name;
        s.param = p;
        s.m.assign(p->numel(), 0.0);
        s.v.assign(p->numel(), 0.0);
        slots_.push_back(std::move(s));
    }
}

void AdamW::step(double lr) {
    for (Slot& s : slots_) {
        if (!s.param->has_grad())
            throw ContractError("adamw: missing gradient on trainable param " + s.name);
    }
    ++step_count_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
    for (Slot& s : slots_) {
        double* p = s.param->data();
        const std::vector<double>& g = s.param->grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g[i];
            s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            const double mhat = s.m[i] / bc1;
            const double vhat = s.v[i] / bc2;
            p[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[i]);
        }
    }
}

void AdamW::zero_grad() {
    for (Slot& s : slots_) s.param->zero_grad();
}

OptimizerSnapshot AdamW::snapshot() const {
    OptimizerSnapshot snap;
    snap.step_count = step_count_;
    for (const Slot& s : slots_) snap.moments[s.name] = {s.m, s.v};
    return snap;
}

void AdamW::restore(const OptimizerSnapshot& snap) {
    step_count_ = snap.step_count;
    for (Slot& s : slots_) {
        auto it = snap.moments.find(s.name);
        if (it == snap.moments.end())
            throw StateError("adamw restore: no moments for parameter " + s.name);
        if (it->second.first.size() != s.m.size())
            throw StateError("adamw restore: moment shape mismatch for " + s.name);
        s.m = it->second.first;
        s.v = it->second.second;
    }
}

}  // namespace probe::pretrain
