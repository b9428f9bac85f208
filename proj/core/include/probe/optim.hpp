#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "probe/tensor.hpp"

namespace probe::pretrain {

struct OptimSchedule {
    double base_lr = 3e-4;
    int warmup_epochs = 10;
    int total_epochs = 30;
};

// Linear warm-up for `warmup_epochs`, cosine decay to zero at total_epochs.
double lr_at(int epoch, const OptimSchedule& s);

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

// Serializable optimizer state: first/second moments per parameter name.
struct OptimizerSnapshot {
    std::int64_t step_count = 0;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments;
};

// Decoupled-weight-decay Adam over explicitly registered parameters.
// Frozen tensors are rejected at registration, so they can never be touched.
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    void register_params(const std::vector<std::pair<std::string, num::TensorPtr>>& params);

    // One update over all registered parameters. A registered parameter
    // without a populated gradient buffer is a contract error.
    void step(double lr);

    void zero_grad();

    std::size_t size() const { return slots_.size(); }
    std::int64_t step_count() const { return step_count_; }

    OptimizerSnapshot snapshot() const;
    void restore(const OptimizerSnapshot& snap);

private:
    struct Slot {
        std::string name;
        num::TensorPtr param;
        std::vector<double> m, v;
    };
    AdamWConfig cfg_;
    std::vector<Slot> slots_;
    std::int64_t step_count_ = 0;
};

}  // namespace probe::pretrain
