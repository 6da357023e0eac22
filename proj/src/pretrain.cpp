#include "ilora/pretrain.hpp"

#include "ilora/errors.hpp"
#include "ilora/rng.hpp"
#include "ilora/train.hpp"

#include <cmath>

namespace ilora {

void PretrainConfig::validate() const {
    if (epochs == 0) throw ConfigError("pretrain: epochs must be at least 1");
    if (batch_size == 0) throw ConfigError("pretrain: batch_size must be at least 1");
    if (!(lr > 0.0)) throw ConfigError("pretrain: lr must be positive");
}

PatchCode source_patch_code(const ModelConfig& cfg, std::uint64_t seed) {
    return PatchCode::random(cfg.max_grid, cfg.d_hidden, derive_seed(seed, "pretrain.code"));
}

PretrainResult pretrain_base(const ModelConfig& cfg, const PretrainConfig& pc, std::uint64_t seed) {
    pc.validate();
    PretrainResult out{Model(cfg, derive_seed(seed, "init")), {}};
    if (pc.examples == 0) return out;
    Model& model = out.model;
    const PatchCode source = source_patch_code(cfg, seed);
    const auto data = gen_grounding(derive_seed(seed, "pretrain.data"), pc.examples, pc.task, cfg.max_seq);

    model.set_trainable(true);
    std::vector<NamedTensor> params;
    for (const auto& nt : model.named_weights())
        if (nt.tensor.requires_grad()) params.push_back(nt);
    TrainConfig opt_cfg;
    opt_cfg.lr = pc.lr;
    opt_cfg.weight_decay = 0.0;
    AdamW opt(params, opt_cfg);

    const std::size_t batches = (data.size() + pc.batch_size - 1) / pc.batch_size;
    const std::size_t total = batches * pc.epochs;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < pc.epochs; ++epoch) {
        for (std::size_t b = 0; b < batches; ++b) {
            for (auto& p : params) p.tensor.zero_grad();
            const std::size_t begin = b * pc.batch_size, end = std::min(data.size(), begin + pc.batch_size);
            const double w = 1.0 / static_cast<double>(end - begin);
            double loss = 0.0;
            for (std::size_t i = begin; i < end; ++i) {
                ForwardOptions o = data[i].options();
                o.patch_code = &source;
                const Tensor l = scale(answer_loss(model, data[i], o), w);
                if (!std::isfinite(l.item())) throw NumericError("pretrain: non-finite loss");
                loss += l.item();
                backward(l);
            }
            opt.step(cosine_lr(pc.lr, step++, total));
            out.losses.push_back(loss);
        }
    }
    for (auto& p : params) p.tensor.zero_grad();
    model.set_trainable(false);
    return out;
}

} // namespace ilora
