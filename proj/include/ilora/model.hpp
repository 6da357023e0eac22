#pragma once

// Toy decoder-only transformer: pre-norm blocks, grouped-query attention with
// rotary position embeddings, gated SiLU MLP, untied unembedding. Visual
// tokens additionally receive a frozen 2-D position code for the image patch
// they show; the sequence order of visual tokens carries no layout.
//
// Adapter deltas enter the K/V projections before RoPE and before anything is
// written to the decode cache, so a visual-span value update persists into
// every later decoding step.

#include "ilora/adapter.hpp"
#include "ilora/geometry.hpp"
#include "ilora/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace ilora {

struct LayerWeights {
    Tensor attn_norm; // [1 x d_hidden]
    Tensor wq;        // [d_hidden x q_width]
    Tensor wk;        // [d_hidden x kv_width]
    Tensor wv;        // [d_hidden x kv_width]
    Tensor wo;        // [q_width x d_hidden]
    Tensor mlp_norm;  // [1 x d_hidden]
    Tensor w_gate;    // [d_hidden x d_ff]
    Tensor w_up;      // [d_hidden x d_ff]
    Tensor w_down;    // [d_ff x d_hidden]
};

// Attention probabilities captured during a forward pass: probs[layer][q_head] is [T x T].
struct AttentionRecord {
    std::vector<std::vector<Tensor>> probs;
};

// Additive per-position perturbations injected into one layer; undefined
// tensors are skipped. Q/K/V deltas are added before RoPE, the O delta to the
// concatenated head outputs before the output projection.
struct LayerPerturbation {
    std::size_t layer = 0;
    Tensor q_delta; // [T x q_width]
    Tensor k_delta; // [T x kv_width]
    Tensor v_delta; // [T x kv_width]
    Tensor o_delta; // [T x q_width]
};

// Grid coordinate of one image patch.
struct PatchCoord {
    std::size_t row = 0;
    std::size_t col = 0;
    bool operator==(const PatchCoord&) const = default;
};

// Factorized patch position code: code(row, col) = (rows[row] + cols[col]) / sqrt(2).
struct PatchCode {
    Tensor rows; // [max_grid x d_hidden]
    Tensor cols; // [max_grid x d_hidden]

    static PatchCode random(std::size_t max_grid, std::size_t d_hidden, std::uint64_t seed);
    // Codes of the given patches stacked as rows [n x d_hidden]; CapacityError past max_grid.
    Tensor gather(std::span<const PatchCoord> patches) const;
};

struct ForwardOptions {
    const AdapterSet* adapters = nullptr;
    // One coordinate per visual token; empty adds no position code.
    std::span<const PatchCoord> patches{};
    // Replaces the model's own code (images from another visual domain).
    const PatchCode* patch_code = nullptr;
    AttentionRecord* record = nullptr;
    std::span<const LayerPerturbation> perturbations{};
};

class Model {
public:
    Model() = default;
    Model(const ModelConfig& cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }

    // Full-sequence forward; returns logits [T x vocab].
    Tensor forward(std::span<const int> ids, const TokenLayout& layout, const ForwardOptions& opts = {}) const;
    // Hidden states after the final norm [T x d_hidden].
    Tensor hidden(std::span<const int> ids, const TokenLayout& layout, const ForwardOptions& opts = {}) const;

    // Multi-head attention of one layer on its (already normalized) input h [T x d_hidden].
    Tensor attention_forward(std::size_t layer, const Tensor& h, const TokenLayout& layout,
                             const ForwardOptions& opts = {}) const;
    // Residual block: x + attn(norm(x)), then + mlp(norm(.)).
    Tensor block_forward(std::size_t layer, const Tensor& x, const TokenLayout& layout,
                         const ForwardOptions& opts = {}) const;
    Tensor mlp_forward(std::size_t layer, const Tensor& h) const;

    const LayerWeights& layer(std::size_t l) const { return layers_.at(l); }
    LayerWeights& layer(std::size_t l) { return layers_.at(l); }
    const Tensor& embedding_table() const { return embed_; }
    const PatchCode& patch_code() const { return patch_code_; }
    // Token embeddings plus patch codes on the visual rows [T x d_hidden].
    Tensor embed(std::span<const int> ids, const TokenLayout& layout, std::span<const PatchCoord> patches = {},
                 const PatchCode* code = nullptr) const;
    const Tensor& final_norm() const { return final_norm_; }
    const Tensor& unembedding() const { return unembed_; }

    // Handles share storage with the model. The patch code is frozen data of
    // the vision side and is listed but never made trainable.
    std::vector<NamedTensor> named_weights() const;
    void set_trainable(bool trainable);
    void load_weights(const std::vector<NamedTensor>& tensors);
    // FNV-1a over every weight's bytes; detects any modification of the base.
    std::uint64_t weight_hash() const;

private:
    ModelConfig cfg_;
    Tensor embed_;
    PatchCode patch_code_;
    std::vector<LayerWeights> layers_;
    Tensor final_norm_;
    Tensor unembed_;
};

// Decode cache of one layer. keys are post-RoPE, values include adapter deltas.
struct LayerState {
    std::vector<double> keys;   // [position x kv_width]
    std::vector<double> values; // [position x kv_width]
    std::size_t position = 0;
};

std::vector<LayerState> make_decode_state(const Model& model);

// Appends one token at position state[0].position and returns its logits
// [1 x vocab]. `layout` says whether that position is visual; positions past
// layout.length() are text. opts.patches is indexed by visual position
// inside the span, as in a full forward; record/perturbations are ignored.
Tensor decode_step(const Model& model, int token, std::vector<LayerState>& state, const TokenLayout& layout,
                   const ForwardOptions& opts = {});

// Greedy continuation via the KV cache: feeds `prompt`, then generates up to
// max_new tokens, stopping after `stop_token` if it is >= 0.
std::vector<int> greedy_decode(const Model& model, std::span<const int> prompt, const TokenLayout& layout,
                               std::size_t max_new, int stop_token = -1, const ForwardOptions& opts = {});

// Same continuation computed by re-running the full forward for every token.
std::vector<int> greedy_decode_full(const Model& model, std::span<const int> prompt, const TokenLayout& layout,
                                    std::size_t max_new, int stop_token = -1, const ForwardOptions& opts = {});

} // namespace ilora
