#include "ilora/geometry.hpp"

#include "ilora/errors.hpp"

#include <algorithm>
#include <string>

namespace ilora {

void ModelConfig::validate() const {
    if (!d_hidden || !d_head || !n_q_heads || !n_kv_heads || !group || !n_layers || !vocab || !max_seq || !d_ff || !max_grid)
        throw ContractError("model config: every extent must be positive");
    if (rope_base <= 0.0) throw ContractError("model config: rope_base must be positive");
    if (n_q_heads != group * n_kv_heads)
        throw ContractError("model config: n_q_heads (" + std::to_string(n_q_heads) + ") != group * n_kv_heads (" +
                            std::to_string(group * n_kv_heads) + ")");
    if (d_hidden != n_q_heads * d_head)
        throw ContractError("model config: d_hidden must equal n_q_heads * d_head");
    if (d_head % 2 != 0) throw ContractError("model config: d_head must be even for rotary embeddings");
}

std::size_t kv_group_map(std::size_t q_head, const ModelConfig& cfg) {
    if (q_head >= cfg.n_q_heads)
        throw ContractError("kv_group_map: query head " + std::to_string(q_head) + " out of range");
    return q_head / cfg.group;
}

std::vector<std::size_t> query_heads_of(std::size_t kv_head, const ModelConfig& cfg) {
    if (kv_head >= cfg.n_kv_heads)
        throw ContractError("query_heads_of: kv head " + std::to_string(kv_head) + " out of range");
    std::vector<std::size_t> out;
    for (std::size_t g = 0; g < cfg.group; ++g) out.push_back(kv_head * cfg.group + g);
    return out;
}

TokenLayout TokenLayout::text_only(std::size_t length) {
    TokenLayout l;
    l.length_ = length;
    return l;
}

TokenLayout TokenLayout::with_markers(std::size_t length, std::size_t vision_start, std::size_t vision_end) {
    if (vision_start >= vision_end || vision_end >= length)
        throw ContractError("token layout: markers must satisfy vision_start < vision_end < length");
    TokenLayout l;
    l.length_ = length;
    l.begin_ = vision_start + 1;
    l.end_ = vision_end;
    l.vision_start_ = vision_start;
    l.vision_end_ = vision_end;
    return l;
}

TokenLayout TokenLayout::span(std::size_t length, std::size_t begin, std::size_t end) {
    if (begin > end || end > length) throw ContractError("token layout: span outside the sequence");
    TokenLayout l;
    l.length_ = length;
    l.begin_ = begin == end ? 0 : begin;
    l.end_ = begin == end ? 0 : end;
    return l;
}

std::vector<std::size_t> TokenLayout::visual_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = begin_; i < end_; ++i) out.push_back(i);
    return out;
}

std::vector<std::size_t> TokenLayout::text_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < length_; ++i)
        if (!is_visual(i)) out.push_back(i);
    return out;
}

std::vector<bool> TokenLayout::visual_mask() const {
    std::vector<bool> m(length_, false);
    for (std::size_t i = begin_; i < end_; ++i) m[i] = true;
    return m;
}

TokenLayout TokenLayout::resized(std::size_t length) const {
    TokenLayout l = *this;
    l.length_ = length;
    if (l.end_ > length) l.end_ = std::max(l.begin_, length);
    if (l.end_ == l.begin_) l.begin_ = l.end_ = 0;
    if (l.vision_end_ && *l.vision_end_ >= length) l.vision_end_.reset();
    if (l.vision_start_ && *l.vision_start_ >= length) l.vision_start_.reset();
    return l;
}

} // namespace ilora
