#pragma once

// Text:image token-ratio control. A vision encoder with effective stride s
// turns a W x H image into floor(W/s) * floor(H/s) visual tokens; the planner
// picks a stride-aligned resolution whose token count hits T_text / ratio.

#include <cstddef>
#include <cstdint>
#include <string>

namespace ilora {

std::size_t count_visual_tokens(std::size_t width, std::size_t height, std::size_t stride = 28);

struct PlanOptions {
    std::size_t stride = 28;
    std::uint64_t min_pixels = 3136;     // 56 * 56
    std::uint64_t max_pixels = 12845056; // 3584 * 3584
    std::size_t tolerance = 16;          // eps_tok

    void validate() const;
};

struct ResolutionPlan {
    std::size_t orig_width = 0, orig_height = 0;
    double target_ratio = 1.0; // T_text / T_v
    std::size_t text_tokens = 0;
    PlanOptions options;
    std::size_t target_tokens = 0; // round(T_text / ratio)
    std::size_t planned_width = 0, planned_height = 0;
    std::size_t achieved_tokens = 0;
    // Some stride-aligned resolution lies inside the pixel bounds.
    bool in_bounds = false;
    // |achieved - target| <= tolerance.
    bool within_tolerance = false;
    // in_bounds and within_tolerance; otherwise the plan is the closest one found, or empty.
    bool feasible = false;
    std::string note;

    std::string to_json(int indent = 2) const;
};

// Binary search over the processed long side in stride steps; the short side
// follows the original aspect ratio, rounded to a stride multiple (at least
// one stride). Among resolutions closest to the target count, prefers the
// smaller aspect distortion, then the smaller area. The closest plan is
// returned even outside the tolerance, flagged infeasible. Without any
// resolution inside the pixel bounds it has zero dimensions.
ResolutionPlan plan_resolution(std::size_t orig_width, std::size_t orig_height, double target_ratio,
                               std::size_t text_tokens, const PlanOptions& options = {});

// Filler length that brings a grounding prompt's text count T_text closest to
// ratio * visual_tokens. Throws ContractError when even an empty pad leaves
// T_text more than `tolerance` above the request.
std::size_t text_pad_for_ratio(double ratio, std::size_t visual_tokens, std::size_t tolerance = 16);

} // namespace ilora
