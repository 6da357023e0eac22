#pragma once

// Adapter-only training cost in multiply-adds, from closed-form counts.
//
// Per adapted layer and path, each token processed pays:
//   image_lora: d_in * r per A (once when A is shared, once per head otherwise)
//               + N_chosen * (r * d_head + d_head)   (B^(h) and the scale)
//   std_lora:   d_in * r + r * d_out + d_out
// image_lora processes the T_v visual tokens only; std_lora processes every
// token (prompt text, visual and answer). Backward = 2 x forward.

#include "ilora/adapter.hpp"
#include "ilora/geometry.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ilora {

struct TokenBreakdown {
    std::uint64_t text_in = 0; // non-visual prompt tokens
    std::uint64_t visual = 0;
    std::uint64_t answer = 0;

    bool operator==(const TokenBreakdown&) const = default;
};

struct CostReport {
    std::string config_id;
    std::uint64_t trainable_params = 0;
    std::uint64_t forward_madds = 0;
    std::uint64_t backward_madds = 0;
    std::uint64_t total = 0;
    TokenBreakdown tokens;

    bool operator==(const CostReport&) const = default;
};

// Forward multiply-adds per processed token, summed over adapted layers and paths.
std::uint64_t adapter_madds_per_token(const AdapterSpec& spec, const ModelConfig& cfg);

CostReport adapter_flops(const AdapterSpec& spec, const ModelConfig& cfg, const TokenBreakdown& tokens,
                         std::string config_id = "");
// Token counts read from a prompt layout: visual = |I_v|, text_in = the rest.
CostReport adapter_flops(const AdapterSpec& spec, const ModelConfig& cfg, const TokenLayout& layout,
                         std::size_t answer_len, std::string config_id = "");

struct NamedSpec {
    std::string id;
    AdapterSpec spec;
};

struct RatioLayout {
    std::string ratio; // label such as "1:1"
    TokenBreakdown tokens;
};

struct CompareRow {
    std::string ratio;
    CostReport cost;

    bool operator==(const CompareRow&) const = default;
};

// One row per (ratio, config), ratios outermost. madds_as_2flops doubles the counts.
std::vector<CompareRow> compare_configs(const std::vector<NamedSpec>& specs, const ModelConfig& cfg,
                                        const std::vector<RatioLayout>& ratios, bool madds_as_2flops = false);

// Columns: config, ratio, T_v, params, fwd, bwd, total.
std::string compare_csv(const std::vector<CompareRow>& rows);
std::string compare_json(const std::vector<CompareRow>& rows, int indent = 2);

} // namespace ilora
