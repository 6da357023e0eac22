#pragma once

// Influence-guided choice of the KV heads that receive Image-LoRA, plus the
// random and attention-correlation baselines.
//
// Influence: rank-1 probe adapters (B = 0, gamma = 1, scale 1) on every KV
// head; one backward pass per probe example gives I(h) = sum ||dl/dB^(h)||^2
// and F(h) = sum (dl/dB^(h))^2 elementwise. The budget K_sel is split across
// layers by p_L ~ Phi_L^tau with Phi_L = sum_h I(h), then filled inside each
// layer by cosine farthest-first over a top-I pool of size ceil(rho * k_L).

#include "ilora/adapter.hpp"
#include "ilora/model.hpp"
#include "ilora/tasks.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ilora {

struct SelectionConfig {
    std::size_t k_sel = 4;
    double tau = 0.5;
    double rho = 2.0;
    std::size_t probe_rank = 1;
    std::uint64_t seed = 0;
    std::size_t threads = 0; // 0: ILRA_THREADS or 1

    // Throws ContractError when the budget or parameters do not fit the geometry.
    void validate(const ModelConfig& cfg) const;
    bool operator==(const SelectionConfig&) const = default;
};

struct HeadReport {
    std::string strategy;
    SelectionConfig config;
    std::vector<std::vector<double>> influence;             // [layer][kv]; empty for baselines
    std::vector<std::vector<std::vector<double>>> features; // [layer][kv][r * d_head]
    std::vector<double> phi;                                // [layer]
    std::vector<double> p;                                  // [layer]
    std::vector<std::size_t> quotas;                        // [layer]
    std::vector<std::vector<std::size_t>> chosen_kv;        // [layer], in selection order
    std::vector<std::vector<std::size_t>> chosen_q;         // [layer], ascending
    std::vector<std::vector<double>> scores;                // [layer][kv]; corrmap only

    std::size_t total_chosen() const;
    // Image-LoRA spec adapting exactly the chosen KV heads.
    AdapterSpec adapter_spec(std::size_t rank = 8, double alpha = 16.0) const;
};

// Rank-`probe_rank` image adapters on every KV head with alpha = rank and no
// selection normalization, so s = 1. Only B requires gradients.
AdapterSet make_probe_adapters(const ModelConfig& cfg, const SelectionConfig& sel);

// Fills influence and features. Every probe example must have a visual span.
HeadReport probe_influence(const Model& model, const std::vector<Example>& probes, const SelectionConfig& sel);

// Phi_L = sum of I over the layer's heads.
std::vector<double> layer_mass(const std::vector<std::vector<double>>& influence);
// p_L = Phi_L^tau / sum Phi^tau, or uniform when every Phi_L is 0.
std::vector<double> allocation_weights(const std::vector<double>& phi, double tau);
// Round-half-up of K_sel * p_L, capped at h_kv, then corrected one head at a
// time: additions in passes over layers by descending Phi, removals in passes
// by ascending Phi, ties to the lower layer.
std::vector<std::size_t> allocate_quotas(const std::vector<double>& phi, double tau, std::size_t k_sel,
                                         std::size_t h_kv);

// Farthest-first inside one layer. Pool: top min(H, ceil(rho * k)) heads by I.
std::vector<std::size_t> select_within_layer(const std::vector<double>& influence,
                                             const std::vector<std::vector<double>>& features, std::size_t k,
                                             double rho);

// Query heads served by the chosen KV heads of each layer.
std::vector<std::vector<std::size_t>> expand_query_heads(const std::vector<std::vector<std::size_t>>& chosen_kv,
                                                         const ModelConfig& cfg);

// Full procedure: probe, allocate, select, expand.
HeadReport select_heads(const Model& model, const std::vector<Example>& probes, const SelectionConfig& sel);

// K_sel heads uniformly without replacement over all (layer, kv) pairs.
HeadReport baseline_global_rand(const ModelConfig& cfg, std::size_t k_sel, std::uint64_t seed);
// Exactly one uniformly drawn KV head per layer.
HeadReport baseline_perlayer_rand(const ModelConfig& cfg, std::uint64_t seed);

// Zero-mean cosine between two equal-length vectors; 0 when either is constant.
double centered_cosine(const std::vector<double>& a, const std::vector<double>& b);

// KV-head scores from per-query-head mean correlation and exceedance
// frequency: max over the group of ReLU(z_layer(mean_r)) * freq.
std::vector<std::vector<double>> corrmap_scores(const std::vector<std::vector<double>>& mean_r,
                                                const std::vector<std::vector<double>>& freq, const ModelConfig& cfg);

// Ranks heads by how well their vision attention (averaged over the text
// queries after the visual span) correlates with the ground-truth mask.
HeadReport baseline_corrmap(const Model& model, const std::vector<Example>& probes, std::size_t k_sel,
                            double tau_c = 0.3);

std::string report_json(const HeadReport& report, int indent = 2);
// Layers x KV heads grid of I (or corrmap scores); chosen heads marked with '*'.
std::string report_heatmap(const HeadReport& report);

} // namespace ilora
