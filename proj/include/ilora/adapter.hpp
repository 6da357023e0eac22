#pragma once

// Low-rank adapters on attention projections.
//
// image_lora: per layer one shared A [d_hidden x r] feeding head-specific
// B^(h) [r x d_head] for the chosen KV heads only. The delta is computed on
// the visual span rows and nowhere else:
//     dV^(h)_j = s * x_j A B^(h),  j in I_v,   s = (alpha / r) * gamma * nu(N_chosen)
// std_lora: one (A, B) pair per adapted projection over all tokens and heads,
// s = (alpha / r) * gamma.

#include "ilora/geometry.hpp"
#include "ilora/tensor.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace ilora {

enum class AdapterFamily { image_lora, std_lora };
enum class Projection { Q, K, V, O };
enum class NormKind { none, linear, inv_sqrt, correlated };

std::string to_string(AdapterFamily f);
std::string to_string(Projection p);
std::string to_string(NormKind k);
AdapterFamily parse_family(const std::string& s);
Projection parse_projection(const std::string& s);
NormKind parse_norm_kind(const std::string& s);

struct AdapterSpec {
    AdapterFamily family = AdapterFamily::image_lora;
    std::vector<Projection> paths{Projection::V};
    std::size_t rank = 8;
    double alpha = 16.0;
    NormKind norm = NormKind::inv_sqrt;
    double rho_corr = 0.0; // pairwise head correlation for NormKind::correlated
    // chosen[layer] = KV-head indices (image_lora only; ignored for std_lora)
    std::vector<std::vector<std::size_t>> chosen;
    bool share_a = true;

    bool has_path(Projection p) const;
    std::size_t chosen_count(std::size_t layer) const;
    // Throws ContractError when the spec is inconsistent with the model geometry.
    void validate(const ModelConfig& cfg) const;

    static AdapterSpec image_lora(std::vector<std::vector<std::size_t>> chosen, std::size_t rank = 8,
                                  double alpha = 16.0);
    static AdapterSpec std_lora(std::vector<Projection> paths, std::size_t rank = 8, double alpha = 16.0);
};

// Selection-size normalization nu(S).
double selection_norm(NormKind kind, std::size_t n_chosen, double rho_corr = 0.0);

// (alpha / r) * gamma * nu(N_chosen) for image_lora, (alpha / r) * gamma for std_lora.
double adapter_scale(const AdapterSpec& spec, std::size_t n_chosen, double gamma = 1.0);

// Parameters of one adapted (layer, projection).
struct LayerAdapter {
    Projection path = Projection::V;
    // Shared A: a single entry. Unshared (image_lora, share_a=false): one per head.
    std::vector<Tensor> a;
    // image_lora: KV-head ids of `b`; std_lora: empty and `b` holds one matrix.
    std::vector<std::size_t> heads;
    std::vector<Tensor> b;
    Tensor gamma; // [1], learned scalar gate
    // (alpha / r) * nu(N_chosen); gamma is applied on top at run time.
    double static_scale = 1.0;

    std::size_t n_chosen() const { return heads.size(); }
    const Tensor& a_for(std::size_t head_slot) const { return a.size() == 1 ? a.front() : a[head_slot]; }
};

// Per-KV-head value (or key) deltas on the visual rows.
struct HeadDeltas {
    std::size_t row_begin = 0;                          // first visual row
    std::vector<std::pair<std::size_t, Tensor>> heads;  // (kv head, [T_v x d_head])
};

// Image-LoRA delta for one layer. Returns nullopt when the layout has no visual
// rows; in that case no arithmetic is performed at all.
std::optional<HeadDeltas> apply_image_lora(const Tensor& x, const TokenLayout& layout, const LayerAdapter& adapter);

// Standard LoRA delta s * x A B over every row.
Tensor apply_std_lora(const Tensor& x, const LayerAdapter& adapter);

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

// All adapters attached to a model, indexed by (layer, projection).
class AdapterSet {
public:
    AdapterSet() = default;

    // A ~ N(0, 1/d_in), B = 0, gamma = 1.
    static AdapterSet init(const AdapterSpec& spec, const ModelConfig& cfg, std::uint64_t seed);

    const AdapterSpec& spec() const { return spec_; }
    const ModelConfig& model_config() const { return cfg_; }
    const LayerAdapter* find(std::size_t layer, Projection path) const;
    LayerAdapter* find(std::size_t layer, Projection path);
    const std::vector<std::vector<LayerAdapter>>& layers() const { return layers_; }

    // Trainable tensors in a fixed order: layer, path, A..., B..., gamma.
    std::vector<Tensor> parameters() const;
    // Names like "L3.V.A", "L3.V.B.h1", "L3.V.gamma" ("L3.V.A.h1" when A is per head).
    std::vector<NamedTensor> named_parameters() const;
    // Overwrites values from a named list (names and shapes must match exactly).
    void load(const std::vector<NamedTensor>& tensors);
    void set_trainable(bool trainable);
    void zero_grad();
    // Copy with independent parameter storage.
    AdapterSet clone() const;

private:
    AdapterSpec spec_;
    ModelConfig cfg_;
    std::vector<std::vector<LayerAdapter>> layers_;
};

// Exact trainable parameter count.
std::uint64_t trainable_parameters(const AdapterSpec& spec, const ModelConfig& cfg);

// Input / output widths of an adapted projection.
std::size_t projection_in_width(Projection p, const ModelConfig& cfg);
std::size_t projection_out_width(Projection p, const ModelConfig& cfg);

} // namespace ilora
