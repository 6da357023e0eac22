#include "ilora/model.hpp"

#include "ilora/errors.hpp"
#include "ilora/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <numeric>

namespace ilora {

namespace {

Tensor gaussian(Shape shape, double stddev, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(shape_numel(shape));
    for (auto& e : v) e = dist(rng);
    return Tensor::from_data(std::move(shape), std::move(v));
}

Tensor ones_row(std::size_t n) { return Tensor::full({1, n}, 1.0); }

std::vector<std::size_t> iota_positions(std::size_t begin, std::size_t count) {
    std::vector<std::size_t> p(count);
    std::iota(p.begin(), p.end(), begin);
    return p;
}

const LayerPerturbation* find_perturbation(std::span<const LayerPerturbation> ps, std::size_t layer) {
    for (const auto& p : ps)
        if (p.layer == layer) return &p;
    return nullptr;
}

Tensor add_if(const Tensor& base, const Tensor& delta) { return delta.defined() ? add(base, delta) : base; }

struct Projections {
    Tensor q, k, v;
};

// Q/K/V projections of h including adapter deltas (pre-RoPE).
Projections project(const LayerWeights& w, std::size_t layer, const Tensor& h, const TokenLayout& layout,
                    const ModelConfig& cfg, const ForwardOptions& opts) {
    Projections p{matmul(h, w.wq), matmul(h, w.wk), matmul(h, w.wv)};
    if (const AdapterSet* set = opts.adapters) {
        const bool image = set->spec().family == AdapterFamily::image_lora;
        for (Projection path : {Projection::Q, Projection::K, Projection::V}) {
            const LayerAdapter* la = set->find(layer, path);
            if (!la) continue;
            Tensor& target = path == Projection::Q ? p.q : (path == Projection::K ? p.k : p.v);
            if (image) {
                // empty span: the branch is skipped, not added as zeros
                if (auto deltas = apply_image_lora(h, layout, *la)) {
                    for (auto& [kv, d] : deltas->heads) target = add_block(target, d, deltas->row_begin, kv * cfg.d_head);
                }
            } else {
                target = add(target, apply_std_lora(h, *la));
            }
        }
    }
    if (const LayerPerturbation* pert = find_perturbation(opts.perturbations, layer)) {
        p.q = add_if(p.q, pert->q_delta);
        p.k = add_if(p.k, pert->k_delta);
        p.v = add_if(p.v, pert->v_delta);
    }
    return p;
}

Tensor output_projection(const LayerWeights& w, std::size_t layer, const Tensor& o, const ForwardOptions& opts) {
    Tensor y = matmul(o, w.wo);
    if (opts.adapters && opts.adapters->spec().family == AdapterFamily::std_lora) {
        if (const LayerAdapter* la = opts.adapters->find(layer, Projection::O)) y = add(y, apply_std_lora(o, *la));
    }
    return y;
}

} // namespace

PatchCode PatchCode::random(std::size_t max_grid, std::size_t d_hidden, std::uint64_t seed) {
    return {gaussian({max_grid, d_hidden}, 1.0, derive_seed(seed, "rows")),
            gaussian({max_grid, d_hidden}, 1.0, derive_seed(seed, "cols"))};
}

Tensor PatchCode::gather(std::span<const PatchCoord> patches) const {
    const std::size_t d = rows.cols(), n = rows.rows();
    std::vector<double> out(patches.size() * d);
    const double c = 1.0 / std::sqrt(2.0);
    for (std::size_t i = 0; i < patches.size(); ++i) {
        const auto [r, k] = patches[i];
        if (r >= n || k >= n)
            throw CapacityError("patch (" + std::to_string(r) + "," + std::to_string(k) + ") outside the " +
                                std::to_string(n) + "x" + std::to_string(n) + " position code");
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = c * (rows.at(r, j) + cols.at(k, j));
    }
    return Tensor::from_data({patches.size(), d}, std::move(out));
}

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t d = cfg.d_hidden;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    embed_ = gaussian({cfg.vocab, d}, 1.0, derive_seed(seed, "embed"));
    patch_code_ = PatchCode::random(cfg.max_grid, d, derive_seed(seed, "patch_code"));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        auto s = [&](const char* name) { return derive_seed(seed, name, l); };
        LayerWeights w;
        w.attn_norm = ones_row(d);
        w.wq = gaussian({d, cfg.q_width()}, inv_sqrt_d, s("wq"));
        w.wk = gaussian({d, cfg.kv_width()}, inv_sqrt_d, s("wk"));
        w.wv = gaussian({d, cfg.kv_width()}, inv_sqrt_d, s("wv"));
        w.wo = gaussian({cfg.q_width(), d}, 1.0 / std::sqrt(static_cast<double>(cfg.q_width())), s("wo"));
        w.mlp_norm = ones_row(d);
        w.w_gate = gaussian({d, cfg.d_ff}, inv_sqrt_d, s("w_gate"));
        w.w_up = gaussian({d, cfg.d_ff}, inv_sqrt_d, s("w_up"));
        w.w_down = gaussian({cfg.d_ff, d}, 1.0 / std::sqrt(static_cast<double>(cfg.d_ff)), s("w_down"));
        layers_.push_back(std::move(w));
    }
    final_norm_ = ones_row(d);
    unembed_ = gaussian({d, cfg.vocab}, inv_sqrt_d, derive_seed(seed, "unembed"));
}

Tensor Model::attention_forward(std::size_t layer, const Tensor& h, const TokenLayout& layout,
                                const ForwardOptions& opts) const {
    const std::size_t T = h.rows();
    if (layout.length() != T)
        throw ContractError("attention_forward: layout length " + std::to_string(layout.length()) +
                            " does not match " + std::to_string(T) + " rows");
    const LayerWeights& w = layers_.at(layer);
    const std::size_t dh = cfg_.d_head;
    Projections p = project(w, layer, h, layout, cfg_, opts);
    const auto pos = iota_positions(0, T);
    const Tensor q = rope(p.q, dh, pos, cfg_.rope_base);
    const Tensor k = rope(p.k, dh, pos, cfg_.rope_base);
    const Tensor mask = causal_mask<double>(T);
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<Tensor> k_t(cfg_.n_kv_heads), v_h(cfg_.n_kv_heads);
    for (std::size_t kv = 0; kv < cfg_.n_kv_heads; ++kv) {
        k_t[kv] = transpose(slice_cols(k, kv * dh, (kv + 1) * dh));
        v_h[kv] = slice_cols(p.v, kv * dh, (kv + 1) * dh);
    }
    if (opts.record) {
        if (opts.record->probs.size() < cfg_.n_layers) opts.record->probs.resize(cfg_.n_layers);
        opts.record->probs[layer].clear();
    }
    std::vector<Tensor> heads;
    heads.reserve(cfg_.n_q_heads);
    for (std::size_t hq = 0; hq < cfg_.n_q_heads; ++hq) {
        const std::size_t kv = hq / cfg_.group;
        const Tensor scores = scale(matmul(slice_cols(q, hq * dh, (hq + 1) * dh), k_t[kv]), inv_sqrt_dh);
        const Tensor probs = softmax_rows(scores, mask);
        if (opts.record) opts.record->probs[layer].push_back(probs.detach());
        heads.push_back(matmul(probs, v_h[kv]));
    }
    Tensor o = concat_cols(heads);
    if (const LayerPerturbation* pert = find_perturbation(opts.perturbations, layer)) o = add_if(o, pert->o_delta);
    return output_projection(w, layer, o, opts);
}

Tensor Model::mlp_forward(std::size_t layer, const Tensor& h) const {
    const LayerWeights& w = layers_.at(layer);
    return matmul(mul(silu(matmul(h, w.w_gate)), matmul(h, w.w_up)), w.w_down);
}

Tensor Model::block_forward(std::size_t layer, const Tensor& x, const TokenLayout& layout,
                            const ForwardOptions& opts) const {
    const LayerWeights& w = layers_.at(layer);
    const Tensor h = rms_norm(x, w.attn_norm, cfg_.norm_eps);
    const Tensor x1 = add(x, attention_forward(layer, h, layout, opts));
    return add(x1, mlp_forward(layer, rms_norm(x1, w.mlp_norm, cfg_.norm_eps)));
}

Tensor Model::embed(std::span<const int> ids, const TokenLayout& layout, std::span<const PatchCoord> patches,
                    const PatchCode* code) const {
    Tensor x = embedding(embed_, ids);
    if (patches.empty()) return x;
    if (patches.size() != layout.visual_count())
        throw ContractError("forward: " + std::to_string(patches.size()) + " patch coordinates for " +
                            std::to_string(layout.visual_count()) + " visual tokens");
    return add_block(x, (code ? *code : patch_code_).gather(patches), layout.visual_begin(), 0);
}

Tensor Model::hidden(std::span<const int> ids, const TokenLayout& layout, const ForwardOptions& opts) const {
    if (ids.size() != layout.length())
        throw ContractError("forward: " + std::to_string(ids.size()) + " tokens but layout length " +
                            std::to_string(layout.length()));
    if (ids.size() > cfg_.max_seq) throw CapacityError("forward: sequence longer than max_seq");
    if (ids.empty()) throw ContractError("forward: empty sequence");
    Tensor x = embed(ids, layout, opts.patches, opts.patch_code);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) x = block_forward(l, x, layout, opts);
    return rms_norm(x, final_norm_, cfg_.norm_eps);
}

Tensor Model::forward(std::span<const int> ids, const TokenLayout& layout, const ForwardOptions& opts) const {
    return matmul(hidden(ids, layout, opts), unembed_);
}

std::vector<NamedTensor> Model::named_weights() const {
    std::vector<NamedTensor> out;
    out.push_back({"embed", embed_});
    out.push_back({"patch_rows", patch_code_.rows});
    out.push_back({"patch_cols", patch_code_.cols});
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const std::string p = "L" + std::to_string(l) + ".";
        const auto& w = layers_[l];
        out.push_back({p + "attn_norm", w.attn_norm});
        out.push_back({p + "wq", w.wq});
        out.push_back({p + "wk", w.wk});
        out.push_back({p + "wv", w.wv});
        out.push_back({p + "wo", w.wo});
        out.push_back({p + "mlp_norm", w.mlp_norm});
        out.push_back({p + "w_gate", w.w_gate});
        out.push_back({p + "w_up", w.w_up});
        out.push_back({p + "w_down", w.w_down});
    }
    out.push_back({"final_norm", final_norm_});
    out.push_back({"unembed", unembed_});
    return out;
}

void Model::set_trainable(bool trainable) {
    for (auto& nt : named_weights())
        if (nt.name != "patch_rows" && nt.name != "patch_cols") nt.tensor.set_requires_grad(trainable);
}

void Model::load_weights(const std::vector<NamedTensor>& tensors) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& nt : tensors) by_name[nt.name] = &nt.tensor;
    for (auto& nt : named_weights()) {
        auto it = by_name.find(nt.name);
        if (it == by_name.end()) throw ConfigError("model load: missing tensor " + nt.name);
        if (it->second->shape() != nt.tensor.shape()) throw ConfigError("model load: shape mismatch for " + nt.name);
        auto dst = nt.tensor.mutable_data();
        std::copy(it->second->data().begin(), it->second->data().end(), dst.begin());
    }
}

std::uint64_t Model::weight_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& nt : named_weights()) {
        const auto bytes = std::as_bytes(nt.tensor.data());
        for (std::byte b : bytes) {
            h ^= static_cast<std::uint64_t>(b);
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

// ---------------------------------------------------------------------------
// Incremental decoding

std::vector<LayerState> make_decode_state(const Model& model) {
    return std::vector<LayerState>(model.config().n_layers);
}

Tensor decode_step(const Model& model, int token, std::vector<LayerState>& state, const TokenLayout& layout,
                   const ForwardOptions& in) {
    const ModelConfig& cfg = model.config();
    if (state.size() != cfg.n_layers) throw ContractError("decode_step: one state per layer required");
    const std::size_t pos = state.front().position;
    for (const auto& s : state)
        if (s.position != pos || s.keys.size() != pos * cfg.kv_width() || s.values.size() != pos * cfg.kv_width())
            throw ContractError("decode_step: inconsistent layer states");
    if (pos >= cfg.max_seq) throw CapacityError("decode_step: position " + std::to_string(pos) + " reaches max_seq");

    const std::size_t dh = cfg.d_head, kvw = cfg.kv_width();
    const bool visual = pos < layout.length() && layout.is_visual(pos);
    const TokenLayout row_layout = TokenLayout::span(1, 0, visual ? 1 : 0);
    ForwardOptions opts;
    opts.adapters = in.adapters;
    const std::vector<std::size_t> here{pos};
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    const int ids[1] = {token};
    Tensor x = embedding(model.embedding_table(), std::span<const int>(ids, 1));
    if (visual && !in.patches.empty()) {
        if (in.patches.size() != layout.visual_count())
            throw ContractError("decode_step: patch coordinates do not match the visual span");
        const std::size_t k = pos - layout.visual_begin();
        x = add(x, (in.patch_code ? *in.patch_code : model.patch_code()).gather(in.patches.subspan(k, 1)));
    }
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& w = model.layer(l);
        const Tensor h = rms_norm(x, w.attn_norm, cfg.norm_eps);
        Projections p = project(w, l, h, row_layout, cfg, opts);
        const Tensor q = rope(p.q, dh, here, cfg.rope_base);
        const Tensor k = rope(p.k, dh, here, cfg.rope_base);

        LayerState& st = state[l];
        st.keys.insert(st.keys.end(), k.data().begin(), k.data().end());
        st.values.insert(st.values.end(), p.v.data().begin(), p.v.data().end());
        st.position = pos + 1;

        const Tensor keys = Tensor::from_data({pos + 1, kvw}, st.keys);
        const Tensor values = Tensor::from_data({pos + 1, kvw}, st.values);
        std::vector<Tensor> heads;
        for (std::size_t hq = 0; hq < cfg.n_q_heads; ++hq) {
            const std::size_t kv = hq / cfg.group;
            const Tensor scores = scale(
                matmul(slice_cols(q, hq * dh, (hq + 1) * dh), transpose(slice_cols(keys, kv * dh, (kv + 1) * dh))),
                inv_sqrt_dh);
            heads.push_back(matmul(softmax_rows(scores), slice_cols(values, kv * dh, (kv + 1) * dh)));
        }
        const Tensor x1 = add(x, output_projection(w, l, concat_cols(heads), opts));
        x = add(x1, model.mlp_forward(l, rms_norm(x1, w.mlp_norm, cfg.norm_eps)));
    }
    return matmul(rms_norm(x, model.final_norm(), cfg.norm_eps), model.unembedding());
}

namespace {

int argmax_row(std::span<const double> row) {
    return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

} // namespace

std::vector<int> greedy_decode(const Model& model, std::span<const int> prompt, const TokenLayout& layout,
                               std::size_t max_new, int stop_token, const ForwardOptions& opts) {
    if (prompt.empty()) throw ContractError("greedy_decode: empty prompt");
    auto state = make_decode_state(model);
    Tensor logits;
    for (int t : prompt) logits = decode_step(model, t, state, layout, opts);
    std::vector<int> out;
    for (std::size_t i = 0; i < max_new; ++i) {
        const int next = argmax_row(logits.data());
        out.push_back(next);
        if (next == stop_token || i + 1 == max_new) break;
        logits = decode_step(model, next, state, layout, opts);
    }
    return out;
}

std::vector<int> greedy_decode_full(const Model& model, std::span<const int> prompt, const TokenLayout& layout,
                                    std::size_t max_new, int stop_token, const ForwardOptions& opts) {
    std::vector<int> seq(prompt.begin(), prompt.end());
    std::vector<int> out;
    for (std::size_t i = 0; i < max_new; ++i) {
        const Tensor logits = model.forward(seq, layout.resized(seq.size()), opts);
        const std::size_t v = logits.cols();
        const int next = argmax_row(logits.data().subspan((seq.size() - 1) * v, v));
        out.push_back(next);
        if (next == stop_token) break;
        seq.push_back(next);
    }
    return out;
}

} // namespace ilora
