#include "ilora/adapter.hpp"

#include "ilora/errors.hpp"
#include "ilora/rng.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace ilora {

std::string to_string(AdapterFamily f) {
    return f == AdapterFamily::image_lora ? "image_lora" : "std_lora";
}

std::string to_string(Projection p) {
    switch (p) {
    case Projection::Q: return "Q";
    case Projection::K: return "K";
    case Projection::V: return "V";
    case Projection::O: return "O";
    }
    return "?";
}

std::string to_string(NormKind k) {
    switch (k) {
    case NormKind::none: return "none";
    case NormKind::linear: return "linear";
    case NormKind::inv_sqrt: return "inv_sqrt";
    case NormKind::correlated: return "correlated";
    }
    return "?";
}

AdapterFamily parse_family(const std::string& s) {
    if (s == "image_lora") return AdapterFamily::image_lora;
    if (s == "std_lora") return AdapterFamily::std_lora;
    throw ConfigError("unknown adapter family '" + s + "'");
}

Projection parse_projection(const std::string& s) {
    if (s == "Q") return Projection::Q;
    if (s == "K") return Projection::K;
    if (s == "V") return Projection::V;
    if (s == "O") return Projection::O;
    throw ConfigError("unknown projection '" + s + "'");
}

NormKind parse_norm_kind(const std::string& s) {
    if (s == "none") return NormKind::none;
    if (s == "linear") return NormKind::linear;
    if (s == "inv_sqrt") return NormKind::inv_sqrt;
    if (s == "correlated") return NormKind::correlated;
    throw ConfigError("unknown normalization '" + s + "'");
}

bool AdapterSpec::has_path(Projection p) const {
    return std::find(paths.begin(), paths.end(), p) != paths.end();
}

std::size_t AdapterSpec::chosen_count(std::size_t layer) const {
    return layer < chosen.size() ? chosen[layer].size() : 0;
}

namespace {

std::vector<Projection> sorted_paths(std::vector<Projection> p) {
    std::sort(p.begin(), p.end());
    return p;
}

} // namespace

void AdapterSpec::validate(const ModelConfig& cfg) const {
    if (rank == 0) throw ContractError("adapter: rank must be positive");
    if (rank > std::min(cfg.d_head, cfg.d_hidden))
        throw ContractError("adapter: rank " + std::to_string(rank) + " exceeds min(d_head, d_hidden)");
    if (!(alpha > 0.0)) throw ContractError("adapter: alpha must be positive");
    if (norm == NormKind::correlated && (rho_corr < 0.0 || rho_corr > 1.0))
        throw ContractError("adapter: correlated normalization needs rho_corr in [0, 1]");
    const auto p = sorted_paths(paths);
    using P = Projection;
    if (family == AdapterFamily::image_lora) {
        const bool ok = p == std::vector<P>{P::V} || p == std::vector<P>{P::K} || p == std::vector<P>{P::K, P::V};
        if (!ok) throw ContractError("adapter: image_lora supports the V, K or V+K paths only");
        if (chosen.size() > cfg.n_layers) throw ContractError("adapter: chosen heads listed for too many layers");
        bool any = false;
        for (const auto& layer : chosen) {
            std::vector<std::size_t> seen;
            for (std::size_t h : layer) {
                if (h >= cfg.n_kv_heads) throw ContractError("adapter: chosen KV head out of range");
                if (std::find(seen.begin(), seen.end(), h) != seen.end())
                    throw ContractError("adapter: duplicate chosen KV head");
                seen.push_back(h);
            }
            any = any || !layer.empty();
        }
        if (!any) throw ContractError("adapter: image_lora needs at least one chosen head");
    } else {
        const bool ok = p == std::vector<P>{P::V} || p == std::vector<P>{P::Q, P::V} ||
                        p == std::vector<P>{P::Q, P::K, P::V, P::O};
        if (!ok) throw ContractError("adapter: std_lora supports the V, QV or QKVO path sets only");
    }
}

AdapterSpec AdapterSpec::image_lora(std::vector<std::vector<std::size_t>> chosen, std::size_t rank, double alpha) {
    AdapterSpec s;
    s.family = AdapterFamily::image_lora;
    s.paths = {Projection::V};
    s.rank = rank;
    s.alpha = alpha;
    s.chosen = std::move(chosen);
    return s;
}

AdapterSpec AdapterSpec::std_lora(std::vector<Projection> paths, std::size_t rank, double alpha) {
    AdapterSpec s;
    s.family = AdapterFamily::std_lora;
    s.paths = std::move(paths);
    s.rank = rank;
    s.alpha = alpha;
    s.norm = NormKind::none;
    return s;
}

double selection_norm(NormKind kind, std::size_t n_chosen, double rho_corr) {
    if (n_chosen == 0) throw ContractError("selection_norm: no chosen heads");
    const double s = static_cast<double>(n_chosen);
    switch (kind) {
    case NormKind::none: return 1.0;
    case NormKind::linear: return 1.0 / s;
    case NormKind::inv_sqrt: return 1.0 / std::sqrt(s);
    case NormKind::correlated: return 1.0 / std::sqrt(s + rho_corr * s * (s - 1.0));
    }
    return 1.0;
}

double adapter_scale(const AdapterSpec& spec, std::size_t n_chosen, double gamma) {
    const double base = spec.alpha / static_cast<double>(spec.rank) * gamma;
    if (spec.family == AdapterFamily::std_lora) return base;
    if (n_chosen == 0) throw ContractError("adapter_scale: image_lora layer without chosen heads");
    return base * selection_norm(spec.norm, n_chosen, spec.rho_corr);
}

std::size_t projection_in_width(Projection p, const ModelConfig& cfg) {
    return p == Projection::O ? cfg.q_width() : cfg.d_hidden;
}

std::size_t projection_out_width(Projection p, const ModelConfig& cfg) {
    switch (p) {
    case Projection::Q: return cfg.q_width();
    case Projection::O: return cfg.d_hidden;
    default: return cfg.kv_width();
    }
}

std::optional<HeadDeltas> apply_image_lora(const Tensor& x, const TokenLayout& layout, const LayerAdapter& adapter) {
    if (x.rank() != 2 || x.rows() != layout.length())
        throw DimensionError("apply_image_lora: input rows must equal the layout length");
    if (!layout.has_visual() || adapter.heads.empty()) return std::nullopt;
    HeadDeltas out;
    out.row_begin = layout.visual_begin();
    const Tensor xv = slice_rows(x, layout.visual_begin(), layout.visual_end());
    Tensor xa_shared;
    if (adapter.a.size() == 1) xa_shared = matmul(xv, adapter.a.front());
    for (std::size_t slot = 0; slot < adapter.heads.size(); ++slot) {
        const Tensor xa = adapter.a.size() == 1 ? xa_shared : matmul(xv, adapter.a[slot]);
        Tensor d = scale_by(scale(matmul(xa, adapter.b[slot]), adapter.static_scale), adapter.gamma);
        out.heads.emplace_back(adapter.heads[slot], std::move(d));
    }
    return out;
}

Tensor apply_std_lora(const Tensor& x, const LayerAdapter& adapter) {
    if (adapter.a.size() != 1 || adapter.b.size() != 1)
        throw ContractError("apply_std_lora: expected a single (A, B) pair");
    return scale_by(scale(matmul(matmul(x, adapter.a.front()), adapter.b.front()), adapter.static_scale),
                    adapter.gamma);
}

// ---------------------------------------------------------------------------
// AdapterSet

namespace {

Tensor gaussian(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(rows * cols);
    for (auto& e : v) e = dist(rng);
    return Tensor::from_data({rows, cols}, std::move(v), true);
}

} // namespace

AdapterSet AdapterSet::init(const AdapterSpec& spec, const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    spec.validate(cfg);
    AdapterSet set;
    set.spec_ = spec;
    set.cfg_ = cfg;
    set.layers_.resize(cfg.n_layers);
    const std::size_t r = spec.rank;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        for (Projection p : sorted_paths(spec.paths)) {
            // one stream per (layer, path) so adding a path never shifts the others
            Rng rng(derive_seed(seed, "adapter." + to_string(p), l));
            const std::size_t in = projection_in_width(p, cfg);
            const double stddev = 1.0 / std::sqrt(static_cast<double>(in));
            LayerAdapter la;
            la.path = p;
            la.gamma = Tensor::scalar(1.0, true);
            if (spec.family == AdapterFamily::image_lora) {
                const std::size_t n = spec.chosen_count(l);
                if (n == 0) continue;
                la.heads = spec.chosen[l];
                if (spec.share_a) {
                    la.a.push_back(gaussian(in, r, stddev, rng));
                } else {
                    for (std::size_t i = 0; i < n; ++i) la.a.push_back(gaussian(in, r, stddev, rng));
                }
                for (std::size_t i = 0; i < n; ++i) la.b.push_back(Tensor::zeros({r, cfg.d_head}, true));
                la.static_scale = adapter_scale(spec, n, 1.0);
            } else {
                la.a.push_back(gaussian(in, r, stddev, rng));
                la.b.push_back(Tensor::zeros({r, projection_out_width(p, cfg)}, true));
                la.static_scale = adapter_scale(spec, 0, 1.0);
            }
            set.layers_[l].push_back(std::move(la));
        }
    }
    return set;
}

const LayerAdapter* AdapterSet::find(std::size_t layer, Projection path) const {
    if (layer >= layers_.size()) return nullptr;
    for (const auto& la : layers_[layer])
        if (la.path == path) return &la;
    return nullptr;
}

LayerAdapter* AdapterSet::find(std::size_t layer, Projection path) {
    return const_cast<LayerAdapter*>(std::as_const(*this).find(layer, path));
}

std::vector<NamedTensor> AdapterSet::named_parameters() const {
    std::vector<NamedTensor> out;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        for (const auto& la : layers_[l]) {
            const std::string prefix = "L" + std::to_string(l) + "." + to_string(la.path) + ".";
            if (la.a.size() == 1) {
                out.push_back({prefix + "A", la.a.front()});
            } else {
                for (std::size_t i = 0; i < la.a.size(); ++i)
                    out.push_back({prefix + "A.h" + std::to_string(la.heads[i]), la.a[i]});
            }
            if (la.heads.empty()) {
                out.push_back({prefix + "B", la.b.front()});
            } else {
                for (std::size_t i = 0; i < la.b.size(); ++i)
                    out.push_back({prefix + "B.h" + std::to_string(la.heads[i]), la.b[i]});
            }
            out.push_back({prefix + "gamma", la.gamma});
        }
    }
    return out;
}

std::vector<Tensor> AdapterSet::parameters() const {
    std::vector<Tensor> out;
    for (auto& nt : named_parameters()) out.push_back(nt.tensor);
    return out;
}

void AdapterSet::load(const std::vector<NamedTensor>& tensors) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& nt : tensors) by_name[nt.name] = &nt.tensor;
    auto mine = named_parameters();
    if (mine.size() != tensors.size())
        throw ConfigError("adapter load: expected " + std::to_string(mine.size()) + " tensors, got " +
                          std::to_string(tensors.size()));
    for (auto& nt : mine) {
        auto it = by_name.find(nt.name);
        if (it == by_name.end()) throw ConfigError("adapter load: missing tensor " + nt.name);
        if (it->second->shape() != nt.tensor.shape())
            throw ConfigError("adapter load: shape mismatch for " + nt.name);
        auto dst = nt.tensor.mutable_data();
        std::copy(it->second->data().begin(), it->second->data().end(), dst.begin());
    }
}

void AdapterSet::set_trainable(bool trainable) {
    for (auto& t : parameters()) t.set_requires_grad(trainable);
}

void AdapterSet::zero_grad() {
    for (auto& t : parameters()) t.zero_grad();
}

AdapterSet AdapterSet::clone() const {
    AdapterSet c = *this;
    for (auto& layer : c.layers_)
        for (auto& la : layer) {
            for (auto& a : la.a) a = a.clone_leaf(a.requires_grad());
            for (auto& b : la.b) b = b.clone_leaf(b.requires_grad());
            la.gamma = la.gamma.clone_leaf(la.gamma.requires_grad());
        }
    return c;
}

std::uint64_t trainable_parameters(const AdapterSpec& spec, const ModelConfig& cfg) {
    const std::uint64_t r = spec.rank;
    std::uint64_t total = 0;
    for (Projection p : spec.paths) {
        const std::uint64_t in = projection_in_width(p, cfg);
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            if (spec.family == AdapterFamily::image_lora) {
                const std::uint64_t n = spec.chosen_count(l);
                if (n == 0) continue;
                const std::uint64_t a_count = spec.share_a ? 1 : n;
                total += a_count * in * r + n * r * cfg.d_head + 1;
            } else {
                total += in * r + r * projection_out_width(p, cfg) + 1;
            }
        }
    }
    return total;
}

} // namespace ilora
