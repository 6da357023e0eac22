#include "ilora/headselect.hpp"

#include "ilora/errors.hpp"
#include "ilora/parallel.hpp"
#include "ilora/rng.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace ilora {

void SelectionConfig::validate(const ModelConfig& cfg) const {
    const std::size_t total = cfg.total_kv_heads();
    if (k_sel == 0 || k_sel > total)
        throw ContractError("select: K_sel must lie in [1, " + std::to_string(total) + "], got " + std::to_string(k_sel));
    if (!(tau >= 0.0)) throw ContractError("select: tau must be non-negative");
    if (!(rho >= 1.0)) throw ContractError("select: rho must be at least 1");
    if (probe_rank == 0 || probe_rank > cfg.d_head) throw ContractError("select: probe_rank must lie in [1, d_head]");
}

std::size_t HeadReport::total_chosen() const {
    std::size_t n = 0;
    for (const auto& c : chosen_kv) n += c.size();
    return n;
}

AdapterSpec HeadReport::adapter_spec(std::size_t rank, double alpha) const {
    auto chosen = chosen_kv;
    for (auto& c : chosen) std::sort(c.begin(), c.end());
    return AdapterSpec::image_lora(std::move(chosen), rank, alpha);
}

AdapterSet make_probe_adapters(const ModelConfig& cfg, const SelectionConfig& sel) {
    std::vector<std::vector<std::size_t>> all(cfg.n_layers);
    for (auto& heads : all) {
        heads.resize(cfg.n_kv_heads);
        std::iota(heads.begin(), heads.end(), 0);
    }
    AdapterSpec spec = AdapterSpec::image_lora(std::move(all), sel.probe_rank, static_cast<double>(sel.probe_rank));
    spec.norm = NormKind::none;
    AdapterSet set = AdapterSet::init(spec, cfg, derive_seed(sel.seed, "select.probe"));
    set.set_trainable(false);
    for (const auto& layer : set.layers())
        for (const auto& la : layer)
            for (const auto& b : la.b) Tensor(b).set_requires_grad(true);
    return set;
}

namespace {

// Gradients of every probe B, flattened per (layer, kv head).
using HeadGrads = std::vector<std::vector<std::vector<double>>>;

HeadGrads probe_gradients(const Model& model, AdapterSet& probe, const Example& ex) {
    const ModelConfig& cfg = model.config();
    probe.zero_grad();
    backward(answer_loss(model, ex, ex.options(&probe)));
    HeadGrads g(cfg.n_layers, std::vector<std::vector<double>>(cfg.n_kv_heads));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const LayerAdapter* la = probe.find(l, Projection::V);
        for (std::size_t i = 0; i < la->heads.size(); ++i) {
            const auto grad = la->b[i].grad();
            g[l][la->heads[i]].assign(grad.begin(), grad.end());
        }
    }
    return g;
}

HeadReport empty_report(const ModelConfig& cfg, std::string strategy) {
    HeadReport r;
    r.strategy = std::move(strategy);
    r.quotas.assign(cfg.n_layers, 0);
    r.chosen_kv.assign(cfg.n_layers, {});
    r.chosen_q.assign(cfg.n_layers, {});
    return r;
}

void finish_chosen(HeadReport& r, const ModelConfig& cfg) {
    for (std::size_t l = 0; l < cfg.n_layers; ++l) r.quotas[l] = r.chosen_kv[l].size();
    r.chosen_q = expand_query_heads(r.chosen_kv, cfg);
}

std::vector<std::size_t> rank_desc(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
    return idx;
}

} // namespace

HeadReport probe_influence(const Model& model, const std::vector<Example>& probes, const SelectionConfig& sel) {
    const ModelConfig& cfg = model.config();
    sel.validate(cfg);
    if (probes.empty()) throw ContractError("select: empty probe set");
    for (std::size_t i = 0; i < probes.size(); ++i)
        if (probes[i].visual_count() == 0)
            throw ContractError("select: probe example " + std::to_string(i) +
                                " has no visual tokens, so head influence is undefined");

    const AdapterSet probe = make_probe_adapters(cfg, sel);
    const std::size_t threads = resolve_threads(sel.threads);
    std::vector<AdapterSet> workers;
    for (std::size_t w = 0; w < threads; ++w) workers.push_back(probe.clone());
    std::vector<HeadGrads> grads(probes.size());
    parallel_for(probes.size(), threads,
                 [&](std::size_t i, std::size_t w) { grads[i] = probe_gradients(model, workers[w], probes[i]); });

    HeadReport r = empty_report(cfg, "influence");
    r.config = sel;
    const std::size_t width = sel.probe_rank * cfg.d_head;
    r.influence.assign(cfg.n_layers, std::vector<double>(cfg.n_kv_heads, 0.0));
    r.features.assign(cfg.n_layers, std::vector<std::vector<double>>(cfg.n_kv_heads, std::vector<double>(width, 0.0)));
    // reduce in probe order, one squared norm per example and head
    for (const auto& g : grads)
        for (std::size_t l = 0; l < cfg.n_layers; ++l)
            for (std::size_t h = 0; h < cfg.n_kv_heads; ++h) {
                double norm2 = 0.0;
                for (std::size_t k = 0; k < width; ++k) {
                    const double v = g[l][h][k] * g[l][h][k];
                    norm2 += v;
                    r.features[l][h][k] += v;
                }
                r.influence[l][h] += norm2;
            }
    return r;
}

std::vector<double> layer_mass(const std::vector<std::vector<double>>& influence) {
    std::vector<double> phi;
    for (const auto& layer : influence) phi.push_back(std::accumulate(layer.begin(), layer.end(), 0.0));
    return phi;
}

std::vector<double> allocation_weights(const std::vector<double>& phi, double tau) {
    if (!(tau >= 0.0)) throw ContractError("allocation: tau must be non-negative");
    std::vector<double> p(phi.size(), 0.0);
    if (phi.empty()) return p;
    double total_phi = 0.0;
    for (double v : phi) {
        if (!(v >= 0.0)) throw ContractError("allocation: layer masses must be non-negative");
        total_phi += v;
    }
    if (total_phi == 0.0) {
        std::fill(p.begin(), p.end(), 1.0 / static_cast<double>(phi.size()));
        return p;
    }
    double z = 0.0;
    for (std::size_t l = 0; l < phi.size(); ++l) z += p[l] = std::pow(phi[l], tau);
    for (double& v : p) v /= z;
    return p;
}

std::vector<std::size_t> allocate_quotas(const std::vector<double>& phi, double tau, std::size_t k_sel,
                                         std::size_t h_kv) {
    const std::size_t n = phi.size();
    if (k_sel == 0 || k_sel > n * h_kv)
        throw ContractError("allocation: budget " + std::to_string(k_sel) + " infeasible for " + std::to_string(n) +
                            " layers of " + std::to_string(h_kv) + " heads");
    const auto p = allocation_weights(phi, tau);
    std::vector<std::size_t> q(n);
    std::size_t sum = 0;
    for (std::size_t l = 0; l < n; ++l) {
        q[l] = std::min(h_kv, static_cast<std::size_t>(std::floor(static_cast<double>(k_sel) * p[l] + 0.5)));
        sum += q[l];
    }
    const auto desc = rank_desc(phi);
    std::vector<std::size_t> asc(n);
    std::iota(asc.begin(), asc.end(), 0);
    std::stable_sort(asc.begin(), asc.end(), [&](std::size_t a, std::size_t b) { return phi[a] < phi[b]; });
    while (sum < k_sel)
        for (std::size_t l : desc)
            if (sum < k_sel && q[l] < h_kv) ++q[l], ++sum;
    while (sum > k_sel)
        for (std::size_t l : asc)
            if (sum > k_sel && q[l] > 0) --q[l], --sum;
    return q;
}

std::vector<std::size_t> select_within_layer(const std::vector<double>& influence,
                                             const std::vector<std::vector<double>>& features, std::size_t k,
                                             double rho) {
    const std::size_t h = influence.size();
    if (features.size() != h) throw ContractError("select_within_layer: one feature vector per head required");
    if (k > h) throw ContractError("select_within_layer: quota exceeds the layer's heads");
    if (!(rho >= 1.0)) throw ContractError("select_within_layer: rho must be at least 1");
    if (k == 0) return {};
    const std::size_t pool_size =
        std::min(h, static_cast<std::size_t>(std::ceil(rho * static_cast<double>(k) - 1e-12)));
    const auto ranked = rank_desc(influence);
    const std::vector<std::size_t> pool(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(pool_size));

    std::vector<std::vector<double>> unit(h);
    for (std::size_t i : pool) {
        double n2 = 0.0;
        for (double v : features[i]) n2 += v * v;
        if (n2 > 0.0)
            for (double v : features[i]) unit[i].push_back(v / std::sqrt(n2));
    }
    auto similarity = [&](std::size_t a, std::size_t b) {
        if (unit[a].empty() || unit[b].empty()) return 0.0;
        if (unit[a].size() != unit[b].size()) throw ContractError("select_within_layer: feature widths differ");
        return std::inner_product(unit[a].begin(), unit[a].end(), unit[b].begin(), 0.0);
    };

    std::vector<std::size_t> chosen{pool.front()};
    std::vector<bool> taken(h, false);
    taken[pool.front()] = true;
    while (chosen.size() < k) {
        std::size_t best = h;
        double best_dist = 0.0;
        for (std::size_t c : pool) { // pool is ordered by I desc, index asc: first wins ties
            if (taken[c]) continue;
            double d = INFINITY;
            for (std::size_t s : chosen) d = std::min(d, 1.0 - similarity(c, s));
            if (best == h || d > best_dist) best = c, best_dist = d;
        }
        chosen.push_back(best);
        taken[best] = true;
    }
    return chosen;
}

std::vector<std::vector<std::size_t>> expand_query_heads(const std::vector<std::vector<std::size_t>>& chosen_kv,
                                                         const ModelConfig& cfg) {
    std::vector<std::vector<std::size_t>> out;
    for (const auto& kvs : chosen_kv) {
        std::vector<std::size_t> q;
        for (std::size_t kv : kvs) {
            const auto heads = query_heads_of(kv, cfg);
            q.insert(q.end(), heads.begin(), heads.end());
        }
        std::sort(q.begin(), q.end());
        out.push_back(std::move(q));
    }
    return out;
}

HeadReport select_heads(const Model& model, const std::vector<Example>& probes, const SelectionConfig& sel) {
    const ModelConfig& cfg = model.config();
    HeadReport r = probe_influence(model, probes, sel);
    r.phi = layer_mass(r.influence);
    r.p = allocation_weights(r.phi, sel.tau);
    r.quotas = allocate_quotas(r.phi, sel.tau, sel.k_sel, cfg.n_kv_heads);
    for (std::size_t l = 0; l < cfg.n_layers; ++l)
        r.chosen_kv[l] = select_within_layer(r.influence[l], r.features[l], r.quotas[l], sel.rho);
    r.chosen_q = expand_query_heads(r.chosen_kv, cfg);
    return r;
}

HeadReport baseline_global_rand(const ModelConfig& cfg, std::size_t k_sel, std::uint64_t seed) {
    const std::size_t total = cfg.total_kv_heads();
    if (k_sel == 0 || k_sel > total) throw ContractError("global-rand: K_sel must lie in [1, " + std::to_string(total) + "]");
    std::vector<std::size_t> ids(total);
    std::iota(ids.begin(), ids.end(), 0);
    Rng rng(derive_seed(seed, "select.global_rand"));
    std::shuffle(ids.begin(), ids.end(), rng);
    HeadReport r = empty_report(cfg, "global-rand");
    r.config.k_sel = k_sel;
    r.config.seed = seed;
    for (std::size_t i = 0; i < k_sel; ++i) r.chosen_kv[ids[i] / cfg.n_kv_heads].push_back(ids[i] % cfg.n_kv_heads);
    for (auto& c : r.chosen_kv) std::sort(c.begin(), c.end());
    finish_chosen(r, cfg);
    return r;
}

HeadReport baseline_perlayer_rand(const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "select.perlayer_rand"));
    std::uniform_int_distribution<std::size_t> pick(0, cfg.n_kv_heads - 1);
    HeadReport r = empty_report(cfg, "perlayer-rand");
    r.config.k_sel = cfg.n_layers;
    r.config.seed = seed;
    for (auto& c : r.chosen_kv) c.push_back(pick(rng));
    finish_chosen(r, cfg);
    return r;
}

double centered_cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty()) throw ContractError("centered_cosine: vectors must be non-empty and equal length");
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(a.size());
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / static_cast<double>(b.size());
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += (a[i] - ma) * (b[i] - mb);
        aa += (a[i] - ma) * (a[i] - ma);
        bb += (b[i] - mb) * (b[i] - mb);
    }
    if (aa == 0.0 || bb == 0.0) return 0.0;
    return ab / std::sqrt(aa * bb);
}

std::vector<std::vector<double>> corrmap_scores(const std::vector<std::vector<double>>& mean_r,
                                                const std::vector<std::vector<double>>& freq, const ModelConfig& cfg) {
    if (mean_r.size() != cfg.n_layers || freq.size() != cfg.n_layers)
        throw ContractError("corrmap: one row per layer required");
    const std::size_t H = cfg.n_q_heads;
    std::vector<std::vector<double>> out(cfg.n_layers, std::vector<double>(cfg.n_kv_heads, 0.0));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        if (mean_r[l].size() != H || freq[l].size() != H) throw ContractError("corrmap: one entry per query head required");
        const double mu = std::accumulate(mean_r[l].begin(), mean_r[l].end(), 0.0) / static_cast<double>(H);
        double var = 0.0;
        for (double v : mean_r[l]) var += (v - mu) * (v - mu);
        const double sd = std::sqrt(var / static_cast<double>(H));
        for (std::size_t h = 0; h < H; ++h) {
            const double z = sd > 1e-12 * std::max(1.0, std::abs(mu)) ? (mean_r[l][h] - mu) / sd : 0.0;
            double& kv = out[l][kv_group_map(h, cfg)];
            kv = std::max(kv, std::max(0.0, z) * freq[l][h]);
        }
    }
    return out;
}

HeadReport baseline_corrmap(const Model& model, const std::vector<Example>& probes, std::size_t k_sel, double tau_c) {
    const ModelConfig& cfg = model.config();
    const std::size_t total = cfg.total_kv_heads();
    if (k_sel == 0 || k_sel > total) throw ContractError("corrmap: K_sel must lie in [1, " + std::to_string(total) + "]");
    if (probes.empty()) throw ContractError("corrmap: empty probe set");
    const std::size_t L = cfg.n_layers, H = cfg.n_q_heads;
    std::vector<std::vector<double>> r_sum(L, std::vector<double>(H, 0.0)), above(L, std::vector<double>(H, 0.0));
    for (std::size_t e = 0; e < probes.size(); ++e) {
        const Example& ex = probes[e];
        const TokenLayout layout = ex.layout();
        if (!layout.has_visual()) throw ContractError("corrmap: probe example " + std::to_string(e) + " has no visual tokens");
        if (ex.gt_mask.size() != layout.visual_count())
            throw ContractError("corrmap: probe example " + std::to_string(e) + " lacks a ground-truth mask");
        const std::size_t first_query = layout.vision_end() ? *layout.vision_end() + 1 : layout.visual_end();
        if (first_query >= layout.length())
            throw ContractError("corrmap: probe example " + std::to_string(e) + " has no text after the visual span");
        const std::vector<double> mask(ex.gt_mask.begin(), ex.gt_mask.end());
        AttentionRecord rec;
        ForwardOptions opts = ex.options();
        opts.record = &rec;
        model.forward(ex.input_ids(), layout, opts);
        const double nq = static_cast<double>(layout.length() - first_query);
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t h = 0; h < H; ++h) {
                const Tensor& probs = rec.probs[l][h];
                std::vector<double> a(layout.visual_count(), 0.0);
                for (std::size_t i = first_query; i < layout.length(); ++i)
                    for (std::size_t j = 0; j < a.size(); ++j) a[j] += probs.at(i, layout.visual_begin() + j) / nq;
                const double r = centered_cosine(a, mask);
                r_sum[l][h] += r;
                if (r > tau_c) above[l][h] += 1.0;
            }
    }
    HeadReport rep = empty_report(cfg, "corrmap");
    rep.config.k_sel = k_sel;
    const double n = static_cast<double>(probes.size());
    for (std::size_t l = 0; l < L; ++l)
        for (std::size_t h = 0; h < H; ++h) {
            r_sum[l][h] /= n;
            above[l][h] /= n;
        }
    rep.scores = corrmap_scores(r_sum, above, cfg);
    std::vector<double> flat;
    for (const auto& row : rep.scores) flat.insert(flat.end(), row.begin(), row.end());
    const auto ranked = rank_desc(flat);
    for (std::size_t i = 0; i < k_sel; ++i) rep.chosen_kv[ranked[i] / cfg.n_kv_heads].push_back(ranked[i] % cfg.n_kv_heads);
    for (auto& c : rep.chosen_kv) std::sort(c.begin(), c.end());
    finish_chosen(rep, cfg);
    return rep;
}

std::string report_json(const HeadReport& r, int indent) {
    using nlohmann::json;
    json j;
    j["strategy"] = r.strategy;
    j["config"] = {{"k_sel", r.config.k_sel}, {"tau", r.config.tau}, {"rho", r.config.rho},
                   {"probe_rank", r.config.probe_rank}, {"seed", r.config.seed}};
    j["total_chosen"] = r.total_chosen();
    json layers = json::array();
    for (std::size_t l = 0; l < r.chosen_kv.size(); ++l) {
        json lj;
        lj["layer"] = l;
        if (!r.phi.empty()) lj["phi"] = r.phi[l];
        if (!r.p.empty()) lj["p"] = r.p[l];
        lj["quota"] = r.quotas[l];
        lj["chosen_kv"] = r.chosen_kv[l];
        lj["chosen_q"] = r.chosen_q[l];
        const std::size_t n_heads = !r.influence.empty() ? r.influence[l].size()
                                    : !r.scores.empty()  ? r.scores[l].size()
                                                         : 0;
        json heads = json::array();
        for (std::size_t h = 0; h < n_heads; ++h) {
            json hj;
            hj["kv"] = h;
            if (!r.influence.empty()) hj["I"] = r.influence[l][h];
            if (!r.scores.empty()) hj["score"] = r.scores[l][h];
            hj["chosen"] = std::find(r.chosen_kv[l].begin(), r.chosen_kv[l].end(), h) != r.chosen_kv[l].end();
            heads.push_back(hj);
        }
        lj["heads"] = heads;
        layers.push_back(lj);
    }
    j["per_layer"] = layers;
    return j.dump(indent);
}

std::string report_heatmap(const HeadReport& r) {
    const auto& grid = !r.influence.empty() ? r.influence : r.scores;
    std::ostringstream out;
    out << "# strategy " << r.strategy << ", values "
        << (!r.influence.empty() ? "I(h)" : (!r.scores.empty() ? "score" : "none")) << ", * marks chosen heads\n";
    const std::size_t n_heads = grid.empty() ? 0 : grid.front().size();
    out << "layer";
    for (std::size_t h = 0; h < n_heads; ++h) out << "\tkv" << h;
    out << '\n';
    for (std::size_t l = 0; l < r.chosen_kv.size(); ++l) {
        out << l;
        if (grid.empty()) {
            for (std::size_t kv : r.chosen_kv[l]) out << "\tkv" << kv << '*';
        }
        for (std::size_t h = 0; h < n_heads; ++h) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.4e", grid[l][h]);
            const bool chosen = std::find(r.chosen_kv[l].begin(), r.chosen_kv[l].end(), h) != r.chosen_kv[l].end();
            out << '\t' << buf << (chosen ? "*" : "");
        }
        out << '\n';
    }
    return out.str();
}

} // namespace ilora
