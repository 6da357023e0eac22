#include "ilora/budget.hpp"

#include "ilora/errors.hpp"
#include "ilora/tasks.hpp"

#include "json.hpp"

#include <cmath>
#include <optional>

namespace ilora {

std::size_t count_visual_tokens(std::size_t width, std::size_t height, std::size_t stride) {
    if (stride == 0) throw ContractError("budget: stride must be positive");
    if (width < stride || height < stride)
        throw ContractError("budget: " + std::to_string(width) + "x" + std::to_string(height) +
                            " is below one stride and yields no visual tokens");
    return (width / stride) * (height / stride);
}

void PlanOptions::validate() const {
    if (stride == 0) throw ContractError("budget: stride must be positive");
    if (min_pixels > max_pixels) throw ContractError("budget: min_pixels exceeds max_pixels");
}

namespace {

// One candidate on the search line: k stride units on the long side.
struct Candidate {
    std::uint64_t k = 0, short_units = 0;
    std::uint64_t tokens() const { return k * short_units; }
};

class SearchLine {
public:
    SearchLine(std::uint64_t long_side, std::uint64_t short_side) : long_(long_side), short_(short_side) {}
    // Short side in stride units, round-half-up of k * short / long, at least 1.
    Candidate at(std::uint64_t k) const {
        const std::uint64_t s = (2 * k * short_ + long_) / (2 * long_);
        return {k, std::max<std::uint64_t>(1, s)};
    }

private:
    std::uint64_t long_, short_;
};

// Smallest k in [lo, hi] with pred(k) true, or hi + 1; pred must be monotone.
template <class Pred> std::uint64_t first_true(std::uint64_t lo, std::uint64_t hi, Pred pred) {
    std::uint64_t a = lo, b = hi + 1;
    while (a < b) {
        const std::uint64_t mid = a + (b - a) / 2;
        if (pred(mid)) b = mid;
        else a = mid + 1;
    }
    return a;
}

} // namespace

ResolutionPlan plan_resolution(std::size_t orig_width, std::size_t orig_height, double target_ratio,
                               std::size_t text_tokens, const PlanOptions& options) {
    options.validate();
    if (orig_width == 0 || orig_height == 0) throw ContractError("budget: original dimensions must be positive");
    if (!(target_ratio > 0.0) || !std::isfinite(target_ratio)) throw ContractError("budget: ratio must be positive");

    ResolutionPlan plan;
    plan.orig_width = orig_width;
    plan.orig_height = orig_height;
    plan.target_ratio = target_ratio;
    plan.text_tokens = text_tokens;
    plan.options = options;
    plan.target_tokens = static_cast<std::size_t>(std::llround(static_cast<double>(text_tokens) / target_ratio));

    const bool wide = orig_width >= orig_height;
    const std::uint64_t long_side = wide ? orig_width : orig_height, short_side = wide ? orig_height : orig_width;
    const std::uint64_t s = options.stride, cell = s * s;
    const SearchLine line(long_side, short_side);
    const std::uint64_t k_max = options.max_pixels / cell;
    auto area = [&](std::uint64_t k) { return line.at(k).tokens() * cell; };

    // pixel area is non-decreasing in k, so the admissible k form one interval
    const std::uint64_t k_lo = first_true(1, k_max, [&](std::uint64_t k) { return area(k) >= options.min_pixels; });
    const std::uint64_t k_hi = first_true(1, k_max, [&](std::uint64_t k) { return area(k) > options.max_pixels; }) - 1;
    if (k_max == 0 || k_lo > k_hi) {
        plan.note = "no stride-aligned resolution fits the pixel bounds";
        return plan;
    }
    plan.in_bounds = true;

    // token count is strictly increasing in k: the closest counts sit at the
    // first k reaching the target and the one before it
    const std::uint64_t target = plan.target_tokens;
    const std::uint64_t kb = first_true(k_lo, k_hi, [&](std::uint64_t k) { return line.at(k).tokens() >= target; });
    const double orig_aspect = static_cast<double>(long_side) / static_cast<double>(short_side);
    auto distance = [&](const Candidate& c) {
        const std::uint64_t t = c.tokens();
        return t > target ? t - target : target - t;
    };
    auto distortion = [&](const Candidate& c) {
        return std::abs(std::log(static_cast<double>(c.k) / static_cast<double>(c.short_units) / orig_aspect));
    };
    std::optional<Candidate> best;
    for (std::uint64_t k : {kb > k_lo ? kb - 1 : k_hi + 1, kb}) {
        if (k < k_lo || k > k_hi) continue;
        const Candidate c = line.at(k);
        if (!best || distance(c) < distance(*best) ||
            (distance(c) == distance(*best) &&
             (distortion(c) < distortion(*best) ||
              (distortion(c) == distortion(*best) && c.tokens() < best->tokens()))))
            best = c;
    }
    const std::size_t planned_long = static_cast<std::size_t>(best->k * s);
    const std::size_t planned_short = static_cast<std::size_t>(best->short_units * s);
    plan.planned_width = wide ? planned_long : planned_short;
    plan.planned_height = wide ? planned_short : planned_long;
    plan.achieved_tokens = count_visual_tokens(plan.planned_width, plan.planned_height, options.stride);
    plan.within_tolerance = distance(*best) <= options.tolerance;
    plan.feasible = plan.within_tolerance;
    if (!plan.within_tolerance) plan.note = "closest achievable count lies outside the tolerance";
    return plan;
}

std::string ResolutionPlan::to_json(int indent) const {
    nlohmann::json j;
    j["orig_width"] = orig_width;
    j["orig_height"] = orig_height;
    j["target_ratio"] = target_ratio;
    j["text_tokens"] = text_tokens;
    j["stride"] = options.stride;
    j["min_pixels"] = options.min_pixels;
    j["max_pixels"] = options.max_pixels;
    j["tolerance"] = options.tolerance;
    j["target_tokens"] = target_tokens;
    j["planned_width"] = planned_width;
    j["planned_height"] = planned_height;
    j["achieved_tokens"] = achieved_tokens;
    j["in_bounds"] = in_bounds;
    j["feasible"] = feasible;
    j["within_tolerance"] = within_tolerance;
    j["note"] = note;
    return j.dump(indent);
}

std::size_t text_pad_for_ratio(double ratio, std::size_t visual_tokens, std::size_t tolerance) {
    if (!(ratio > 0.0) || !std::isfinite(ratio)) throw ContractError("budget: ratio must be positive");
    const double wanted = ratio * static_cast<double>(visual_tokens);
    const double fixed = static_cast<double>(grounding_text_tokens(0));
    if (wanted + static_cast<double>(tolerance) < fixed)
        throw ContractError("budget: ratio " + std::to_string(ratio) + " needs fewer text tokens than the fixed prompt");
    return static_cast<std::size_t>(std::max(0.0, std::round(wanted - fixed)));
}

} // namespace ilora
