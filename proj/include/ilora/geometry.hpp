#pragma once

#include <cstddef>
#include <optional>
#include <vector>

namespace ilora {

// Transformer geometry. Query heads are grouped onto key/value heads:
// n_q_heads == group * n_kv_heads, d_hidden == n_q_heads * d_head.
struct ModelConfig {
    std::size_t d_hidden = 64;
    std::size_t d_head = 8;
    std::size_t n_q_heads = 8;
    std::size_t n_kv_heads = 2;
    std::size_t group = 4;
    std::size_t n_layers = 4;
    std::size_t vocab = 64;
    double rope_base = 10000.0;
    std::size_t max_seq = 512;
    std::size_t d_ff = 128;
    double norm_eps = 1e-6;
    // Largest patch row/column index the patch position code covers.
    std::size_t max_grid = 32;

    std::size_t q_width() const { return n_q_heads * d_head; }
    std::size_t kv_width() const { return n_kv_heads * d_head; }
    std::size_t total_kv_heads() const { return n_layers * n_kv_heads; }

    // Throws ContractError on inconsistent geometry.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

// Maps a query head onto the key/value head it reads: floor(h_q / group).
std::size_t kv_group_map(std::size_t q_head, const ModelConfig& cfg);

// Query heads served by one key/value head.
std::vector<std::size_t> query_heads_of(std::size_t kv_head, const ModelConfig& cfg);

// Token positions of one sequence and the contiguous visual span inside it.
// The span [visual_begin, visual_end) may be empty (pure text). When vision
// markers are present the span lies strictly between them.
class TokenLayout {
public:
    TokenLayout() = default;

    // Pure-text layout of the given length.
    static TokenLayout text_only(std::size_t length);
    // Visual span delimited by marker positions: I_v = (vision_start, vision_end).
    static TokenLayout with_markers(std::size_t length, std::size_t vision_start, std::size_t vision_end);
    // Bare span without markers; used for sub-sequences (single decode rows, probes).
    static TokenLayout span(std::size_t length, std::size_t begin, std::size_t end);

    std::size_t length() const { return length_; }
    std::size_t visual_begin() const { return begin_; }
    std::size_t visual_end() const { return end_; }
    std::size_t visual_count() const { return end_ - begin_; }
    bool has_visual() const { return end_ > begin_; }
    bool is_visual(std::size_t pos) const { return pos >= begin_ && pos < end_; }
    std::optional<std::size_t> vision_start() const { return vision_start_; }
    std::optional<std::size_t> vision_end() const { return vision_end_; }

    std::vector<std::size_t> visual_indices() const;
    std::vector<std::size_t> text_indices() const;
    std::vector<bool> visual_mask() const;

    // Same span viewed as a layout of a different total length (prefixes for decoding).
    TokenLayout resized(std::size_t length) const;

    bool operator==(const TokenLayout&) const = default;

private:
    std::size_t length_ = 0;
    std::size_t begin_ = 0;
    std::size_t end_ = 0;
    std::optional<std::size_t> vision_start_;
    std::optional<std::size_t> vision_end_;
};

} // namespace ilora
