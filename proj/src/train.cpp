#include "ilora/train.hpp"

#include "ilora/errors.hpp"
#include "ilora/parallel.hpp"
#include "ilora/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

namespace ilora {

void TrainConfig::validate() const {
    if (!(lr >= 0.0)) throw ConfigError("train: lr must be non-negative");
    if (epochs == 0) throw ConfigError("train: epochs must be at least 1");
    if (batch_size == 0) throw ConfigError("train: batch_size must be at least 1");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("train: betas must lie in [0, 1)");
    if (!(eps > 0)) throw ConfigError("train: eps must be positive");
    if (weight_decay < 0) throw ConfigError("train: weight_decay must be non-negative");
    if (clip_norm && !(*clip_norm > 0)) throw ConfigError("train: clip norm must be positive");
}

double cosine_lr(double base_lr, std::size_t step, std::size_t total_steps) {
    if (total_steps == 0) return base_lr;
    const double t = static_cast<double>(std::min(step, total_steps)) / static_cast<double>(total_steps);
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

AdamW::AdamW(std::vector<NamedTensor> params, const TrainConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
        m_.emplace_back(p.tensor.numel(), 0.0);
        v_.emplace_back(p.tensor.numel(), 0.0);
        const bool gate = p.name.size() >= 6 && p.name.compare(p.name.size() - 6, 6, ".gamma") == 0;
        decay_.push_back(!gate);
    }
}

void AdamW::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i].tensor;
        auto w = p.mutable_data();
        const auto g = p.grad();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t k = 0; k < w.size(); ++k) {
            m[k] = cfg_.beta1 * m[k] + (1 - cfg_.beta1) * g[k];
            v[k] = cfg_.beta2 * v[k] + (1 - cfg_.beta2) * g[k] * g[k];
            if (decay_[i]) w[k] -= lr * cfg_.weight_decay * w[k];
            w[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg_.eps);
        }
    }
}

namespace {

// Per-example loss value and flattened adapter gradient.
struct ExampleGrad {
    double loss = 0.0;
    std::vector<double> grad;
};

ExampleGrad example_gradient(const Model& model, AdapterSet& local, const Example& ex) {
    local.zero_grad();
    ForwardOptions opts;
    opts.adapters = &local;
    const Tensor loss = answer_loss(model, ex, opts);
    ExampleGrad out;
    out.loss = loss.item();
    if (!std::isfinite(out.loss)) throw NumericError("train: non-finite loss");
    backward(loss);
    for (const auto& p : local.parameters()) out.grad.insert(out.grad.end(), p.grad().begin(), p.grad().end());
    return out;
}

void copy_values(const AdapterSet& from, AdapterSet& to) {
    const auto src = from.parameters();
    auto dst = to.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
        auto d = dst[i].mutable_data();
        std::copy(src[i].data().begin(), src[i].data().end(), d.begin());
    }
}

} // namespace

TrainResult train_adapters(const Model& model, AdapterSet& adapters, const std::vector<Example>& dataset,
                           const TrainConfig& cfg) {
    cfg.validate();
    if (dataset.empty()) throw ConfigError("train: empty dataset");
    TrainResult result;
    result.base_hash_before = model.weight_hash();
    adapters.set_trainable(true);

    const std::size_t threads = resolve_threads(cfg.threads);
    std::vector<AdapterSet> workers;
    for (std::size_t w = 0; w < threads; ++w) workers.push_back(adapters.clone());

    const std::size_t steps_per_epoch = (dataset.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total = steps_per_epoch * cfg.epochs;
    AdamW opt(adapters.named_parameters(), cfg);
    auto params = adapters.parameters();
    std::size_t n_values = 0;
    for (const auto& p : params) n_values += p.numel();

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(dataset.size());
        std::iota(order.begin(), order.end(), 0);
        Rng rng(derive_seed(cfg.seed, "train.shuffle", epoch));
        std::shuffle(order.begin(), order.end(), rng);

        for (std::size_t b = 0; b < steps_per_epoch; ++b) {
            const std::size_t begin = b * cfg.batch_size;
            const std::size_t end = std::min(dataset.size(), begin + cfg.batch_size);
            for (auto& w : workers) copy_values(adapters, w);
            std::vector<ExampleGrad> grads(end - begin);
            parallel_for(end - begin, threads, [&](std::size_t i, std::size_t w) {
                grads[i] = example_gradient(model, workers[w], dataset[order[begin + i]]);
            });

            // reduce in batch order
            std::vector<double> g(n_values, 0.0);
            double loss = 0.0;
            const double inv = 1.0 / static_cast<double>(grads.size());
            for (const auto& eg : grads) {
                loss += eg.loss * inv;
                for (std::size_t k = 0; k < n_values; ++k) g[k] += eg.grad[k] * inv;
            }
            if (cfg.clip_norm) {
                double sq = 0.0;
                for (double v : g) sq += v * v;
                const double norm = std::sqrt(sq);
                if (norm > *cfg.clip_norm)
                    for (double& v : g) v *= *cfg.clip_norm / norm;
            }
            std::size_t off = 0;
            for (auto& p : params) {
                p.zero_grad();
                auto& buf = p.node()->grad_buffer();
                std::copy(g.begin() + off, g.begin() + off + p.numel(), buf.begin());
                off += p.numel();
            }
            const double lr = cosine_lr(cfg.lr, step, total);
            opt.step(lr);
            result.metrics.push_back({step, epoch, lr, loss});
            ++step;
        }
    }
    adapters.zero_grad();
    result.base_hash_after = model.weight_hash();
    if (result.base_hash_after != result.base_hash_before)
        throw std::logic_error("train: base weights changed during training");
    return result;
}

std::string metrics_csv(const std::vector<MetricRow>& rows) {
    std::ostringstream out;
    out.precision(17);
    out << "step,epoch,lr,loss\n";
    for (const auto& r : rows) out << r.step << ',' << r.epoch << ',' << r.lr << ',' << r.loss << '\n';
    return out.str();
}

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << metrics_csv(rows);
}

namespace {

int argmax_allowed(std::span<const double> logits, const std::set<int>& allowed) {
    int best = -1;
    for (int t : allowed)
        if (best < 0 || logits[static_cast<std::size_t>(t)] > logits[static_cast<std::size_t>(best)]) best = t;
    return best;
}

// Every well-formed answer for the example's grid.
std::vector<std::vector<int>> valid_answers(const Example& ex) {
    std::vector<std::vector<int>> out;
    for (std::size_t r = 0; r < ex.grid_rows; ++r)
        for (std::size_t c = 0; c < ex.grid_cols; ++c) out.push_back(encode_point({r, c}));
    return out;
}

} // namespace

std::vector<int> decode_answer(const Model& model, const Example& ex, const AdapterSet* adapters, bool use_cache) {
    const bool grounded = ex.target.has_value();
    const auto answers = grounded ? valid_answers(ex) : std::vector<std::vector<int>>{};
    std::size_t max_new = ex.answer.size();
    for (const auto& a : answers) max_new = std::max(max_new, a.size());
    if (max_new == 0) return {};

    const TokenLayout layout = ex.prompt_layout();
    std::vector<int> seq = ex.prompt;
    std::vector<int> out;
    auto state = make_decode_state(model);
    Tensor logits;
    const ForwardOptions opts = ex.options(adapters);
    if (use_cache)
        for (int t : ex.prompt) logits = decode_step(model, t, state, layout, opts);

    while (out.size() < max_new) {
        std::span<const double> last;
        Tensor full;
        if (use_cache) {
            last = logits.data();
        } else {
            full = model.forward(seq, layout.resized(seq.size()), opts);
            last = full.data().subspan((seq.size() - 1) * full.cols(), full.cols());
        }
        int next;
        if (grounded) {
            std::set<int> allowed;
            bool complete = false;
            for (const auto& a : answers) {
                if (a.size() < out.size() || !std::equal(out.begin(), out.end(), a.begin())) continue;
                if (a.size() == out.size()) complete = true;
                else allowed.insert(a[out.size()]);
            }
            if (complete || allowed.empty()) break;
            next = argmax_allowed(last, allowed);
        } else {
            next = static_cast<int>(std::max_element(last.begin(), last.end()) - last.begin());
        }
        out.push_back(next);
        seq.push_back(next);
        if (!grounded && next == tok::EOS) break;
        if (out.size() < max_new && use_cache) logits = decode_step(model, next, state, layout, opts);
    }
    return out;
}

EvalResult evaluate(const Model& model, const AdapterSet* adapters, const std::vector<Example>& dataset,
                    bool use_cache, std::size_t threads) {
    EvalResult r;
    r.predictions.resize(dataset.size());
    parallel_for(dataset.size(), resolve_threads(threads),
                 [&](std::size_t i, std::size_t) { r.predictions[i] = decode_answer(model, dataset[i], adapters, use_cache); });
    r.accuracy = dataset.empty() ? 0.0 : accuracy(r.predictions, dataset);
    return r;
}

} // namespace ilora
