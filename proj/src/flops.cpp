#include "ilora/flops.hpp"

#include "json.hpp"

#include <sstream>

namespace ilora {

std::uint64_t adapter_madds_per_token(const AdapterSpec& spec, const ModelConfig& cfg) {
    spec.validate(cfg);
    const std::uint64_t r = spec.rank, dh = cfg.d_head;
    std::uint64_t total = 0;
    for (Projection p : spec.paths) {
        const std::uint64_t in = projection_in_width(p, cfg);
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            if (spec.family == AdapterFamily::image_lora) {
                const std::uint64_t n = spec.chosen_count(l);
                if (n == 0) continue;
                total += (spec.share_a ? 1 : n) * in * r + n * (r * dh + dh);
            } else {
                const std::uint64_t out = projection_out_width(p, cfg);
                total += in * r + r * out + out;
            }
        }
    }
    return total;
}

CostReport adapter_flops(const AdapterSpec& spec, const ModelConfig& cfg, const TokenBreakdown& tokens,
                         std::string config_id) {
    CostReport rep;
    rep.config_id = std::move(config_id);
    rep.tokens = tokens;
    rep.trainable_params = trainable_parameters(spec, cfg);
    const std::uint64_t processed = spec.family == AdapterFamily::image_lora
                                        ? tokens.visual
                                        : tokens.text_in + tokens.visual + tokens.answer;
    rep.forward_madds = adapter_madds_per_token(spec, cfg) * processed;
    rep.backward_madds = 2 * rep.forward_madds;
    rep.total = rep.forward_madds + rep.backward_madds;
    return rep;
}

CostReport adapter_flops(const AdapterSpec& spec, const ModelConfig& cfg, const TokenLayout& layout,
                         std::size_t answer_len, std::string config_id) {
    TokenBreakdown t;
    t.visual = layout.visual_count();
    t.text_in = layout.length() - layout.visual_count();
    t.answer = answer_len;
    return adapter_flops(spec, cfg, t, std::move(config_id));
}

std::vector<CompareRow> compare_configs(const std::vector<NamedSpec>& specs, const ModelConfig& cfg,
                                        const std::vector<RatioLayout>& ratios, bool madds_as_2flops) {
    std::vector<CompareRow> rows;
    const std::uint64_t k = madds_as_2flops ? 2 : 1;
    for (const auto& ratio : ratios)
        for (const auto& ns : specs) {
            CostReport c = adapter_flops(ns.spec, cfg, ratio.tokens, ns.id);
            c.forward_madds *= k;
            c.backward_madds *= k;
            c.total *= k;
            rows.push_back({ratio.ratio, c});
        }
    return rows;
}

std::string compare_csv(const std::vector<CompareRow>& rows) {
    std::ostringstream out;
    out << "config,ratio,T_v,params,fwd,bwd,total\n";
    for (const auto& r : rows)
        out << r.cost.config_id << ',' << r.ratio << ',' << r.cost.tokens.visual << ',' << r.cost.trainable_params << ','
            << r.cost.forward_madds << ',' << r.cost.backward_madds << ',' << r.cost.total << '\n';
    return out.str();
}

std::string compare_json(const std::vector<CompareRow>& rows, int indent) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : rows)
        arr.push_back({{"config", r.cost.config_id},
                       {"ratio", r.ratio},
                       {"T_text_in", r.cost.tokens.text_in},
                       {"T_v", r.cost.tokens.visual},
                       {"T_answer", r.cost.tokens.answer},
                       {"params", r.cost.trainable_params},
                       {"fwd", r.cost.forward_madds},
                       {"bwd", r.cost.backward_madds},
                       {"total", r.cost.total}});
    return arr.dump(indent);
}

} // namespace ilora
