#pragma once

// Adapter training on a frozen base: AdamW with cosine decay, answer-only
// cross-entropy, and greedy evaluation through the KV cache.

#include "ilora/adapter.hpp"
#include "ilora/model.hpp"
#include "ilora/tasks.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace ilora {

struct TrainConfig {
    std::size_t epochs = 5;
    double lr = 5e-4;
    std::size_t batch_size = 8;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01; // not applied to gates
    std::optional<double> clip_norm;
    std::uint64_t seed = 0;
    std::size_t threads = 0; // 0: ILRA_THREADS or 1

    void validate() const;
};

// lr * (1 + cos(pi * step / total)) / 2, no warmup.
double cosine_lr(double base_lr, std::size_t step, std::size_t total_steps);

class AdamW {
public:
    AdamW(std::vector<NamedTensor> params, const TrainConfig& cfg);
    // Applies one update from the gradients currently held by the parameters.
    void step(double lr);
    std::size_t steps_taken() const { return t_; }

private:
    std::vector<NamedTensor> params_;
    std::vector<std::vector<double>> m_, v_;
    std::vector<bool> decay_;
    TrainConfig cfg_;
    std::size_t t_ = 0;
};

struct MetricRow {
    std::size_t step = 0;
    std::size_t epoch = 0;
    double lr = 0.0;
    double loss = 0.0;
};

struct TrainResult {
    std::vector<MetricRow> metrics;
    std::uint64_t base_hash_before = 0;
    std::uint64_t base_hash_after = 0;
};

// Trains `adapters` in place. Gradients are reduced in example order, so the
// result does not depend on the thread count.
TrainResult train_adapters(const Model& model, AdapterSet& adapters, const std::vector<Example>& dataset,
                           const TrainConfig& cfg);

std::string metrics_csv(const std::vector<MetricRow>& rows);
void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows);

// Greedy answer for one example. Grounding answers are constrained to the
// point_2d grammar over the example's grid; text answers stop at EOS.
// use_cache=false re-runs the full forward for every token.
std::vector<int> decode_answer(const Model& model, const Example& ex, const AdapterSet* adapters = nullptr,
                               bool use_cache = true);

struct EvalResult {
    double accuracy = 0.0;
    std::vector<std::vector<int>> predictions;
};

EvalResult evaluate(const Model& model, const AdapterSet* adapters, const std::vector<Example>& dataset,
                    bool use_cache = true, std::size_t threads = 0);

} // namespace ilora
