#include "ilora/experiment.hpp"

#include "ilora/budget.hpp"
#include "ilora/checkpoint.hpp"
#include "ilora/errors.hpp"
#include "ilora/rng.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <type_traits>

namespace ilora {

using nlohmann::json;

namespace {

// Reads one JSON object, rejecting keys nobody asked for.
class ObjectReader {
public:
    ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
    }

    template <class T> void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        const json& v = j_.at(key);
        if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
            if (!v.is_number_unsigned()) throw ConfigError(where_ + "." + key + ": expected a non-negative integer");
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) throw ConfigError(where_ + "." + key + ": expected a number");
        }
        try {
            out = v.get<T>();
        } catch (const json::exception&) {
            throw ConfigError(where_ + "." + key + ": wrong type");
        }
    }

    void get_optional(const char* key, std::optional<double>& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        if (j_.at(key).is_null()) {
            out.reset();
            return;
        }
        if (!j_.at(key).is_number()) throw ConfigError(where_ + "." + key + ": expected a number or null");
        out = j_.at(key).get<double>();
    }

    void object(const char* key, const std::function<void(ObjectReader&)>& fn) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        ObjectReader sub(j_.at(key), where_ + "." + key);
        fn(sub);
        sub.finish();
    }

    bool has(const char* key) const { return j_.contains(key); }
    const json& raw(const char* key) {
        seen_.insert(key);
        return j_.at(key);
    }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) throw ConfigError(where_ + ": unknown key \"" + k + "\"");
    }

private:
    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

template <class F> auto as_config_error(F&& fn) {
    try {
        return fn();
    } catch (const ContractError& e) {
        throw ConfigError(e.what());
    }
}

} // namespace

GroundingSpec TaskConfig::grounding() const {
    GroundingSpec g;
    g.rows = rows;
    g.cols = cols;
    g.shuffle = shuffle;
    g.text_pad = ratio ? text_pad_for_ratio(*ratio, rows * cols) : text_pad;
    return g;
}

nlohmann::json adapter_spec_json(const AdapterSpec& spec) {
    json paths = json::array();
    for (Projection p : spec.paths) paths.push_back(to_string(p));
    json j{{"family", to_string(spec.family)}, {"paths", paths},       {"rank", spec.rank},
           {"alpha", spec.alpha},              {"norm", to_string(spec.norm)}, {"rho_corr", spec.rho_corr},
           {"share_a", spec.share_a}};
    j["chosen"] = spec.chosen.empty() ? json(nullptr) : json(spec.chosen);
    return j;
}

AdapterSpec adapter_spec_from_json(const nlohmann::json& j) {
    AdapterSpec s;
    ObjectReader r(j, "adapter");
    std::string family = to_string(s.family), norm = to_string(s.norm);
    std::vector<std::string> paths{"V"};
    r.get("family", family);
    r.get("paths", paths);
    r.get("rank", s.rank);
    r.get("alpha", s.alpha);
    r.get("norm", norm);
    r.get("rho_corr", s.rho_corr);
    r.get("share_a", s.share_a);
    if (r.has("chosen") && !r.raw("chosen").is_null()) r.get("chosen", s.chosen);
    r.finish();
    as_config_error([&] {
        s.family = parse_family(family);
        s.norm = parse_norm_kind(norm);
        s.paths.clear();
        for (const auto& p : paths) s.paths.push_back(parse_projection(p));
        return 0;
    });
    return s;
}

json ExperimentConfig::to_json() const {
    json j;
    j["seed"] = seed;
    j["output_dir"] = output_dir;
    j["threads"] = threads;
    j["model"] = {{"d_hidden", model.d_hidden}, {"d_head", model.d_head},     {"n_q_heads", model.n_q_heads},
                  {"n_kv_heads", model.n_kv_heads}, {"n_layers", model.n_layers}, {"vocab", model.vocab},
                  {"rope_base", model.rope_base}, {"max_seq", model.max_seq},   {"d_ff", model.d_ff},
                  {"norm_eps", model.norm_eps},   {"max_grid", model.max_grid}};
    j["base"] = {{"seed", base.seed},
                 {"checkpoint", base.checkpoint},
                 {"pretrain",
                  {{"examples", base.pretrain.examples},
                   {"epochs", base.pretrain.epochs},
                   {"lr", base.pretrain.lr},
                   {"batch_size", base.pretrain.batch_size},
                   {"text_pad", base.pretrain.task.text_pad}}}};
    j["task"] = {{"rows", task.rows},
                 {"cols", task.cols},
                 {"text_pad", task.text_pad},
                 {"ratio", task.ratio ? json(*task.ratio) : json(nullptr)},
                 {"shuffle", task.shuffle},
                 {"train_size", task.train_size},
                 {"test_size", task.test_size},
                 {"probe_size", task.probe_size}};
    j["adapter"] = adapter_spec_json(adapter);
    j["selection"] = {{"strategy", strategy},       {"k_sel", selection.k_sel},
                      {"tau", selection.tau},       {"rho", selection.rho},
                      {"probe_rank", selection.probe_rank}, {"corrmap_tau", corrmap_tau}};
    j["train"] = {{"epochs", train.epochs},
                  {"lr", train.lr},
                  {"batch_size", train.batch_size},
                  {"beta1", train.beta1},
                  {"beta2", train.beta2},
                  {"eps", train.eps},
                  {"weight_decay", train.weight_decay},
                  {"clip_norm", train.clip_norm ? json(*train.clip_norm) : json(nullptr)}};
    return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    ObjectReader r(j, "config");
    r.get("seed", c.seed);
    r.get("output_dir", c.output_dir);
    r.get("threads", c.threads);
    r.object("model", [&](ObjectReader& m) {
        m.get("d_hidden", c.model.d_hidden);
        m.get("d_head", c.model.d_head);
        m.get("n_q_heads", c.model.n_q_heads);
        m.get("n_kv_heads", c.model.n_kv_heads);
        m.get("n_layers", c.model.n_layers);
        m.get("vocab", c.model.vocab);
        m.get("rope_base", c.model.rope_base);
        m.get("max_seq", c.model.max_seq);
        m.get("d_ff", c.model.d_ff);
        m.get("norm_eps", c.model.norm_eps);
        m.get("max_grid", c.model.max_grid);
    });
    if (c.model.n_kv_heads) c.model.group = c.model.n_q_heads / c.model.n_kv_heads;
    r.object("base", [&](ObjectReader& b) {
        b.get("seed", c.base.seed);
        b.get("checkpoint", c.base.checkpoint);
        b.object("pretrain", [&](ObjectReader& p) {
            p.get("examples", c.base.pretrain.examples);
            p.get("epochs", c.base.pretrain.epochs);
            p.get("lr", c.base.pretrain.lr);
            p.get("batch_size", c.base.pretrain.batch_size);
            p.get("text_pad", c.base.pretrain.task.text_pad);
        });
    });
    r.object("task", [&](ObjectReader& t) {
        t.get("rows", c.task.rows);
        t.get("cols", c.task.cols);
        t.get("text_pad", c.task.text_pad);
        t.get_optional("ratio", c.task.ratio);
        t.get("shuffle", c.task.shuffle);
        t.get("train_size", c.task.train_size);
        t.get("test_size", c.task.test_size);
        t.get("probe_size", c.task.probe_size);
    });
    if (r.has("adapter")) c.adapter = adapter_spec_from_json(r.raw("adapter"));
    r.object("selection", [&](ObjectReader& s) {
        s.get("strategy", c.strategy);
        s.get("k_sel", c.selection.k_sel);
        s.get("tau", c.selection.tau);
        s.get("rho", c.selection.rho);
        s.get("probe_rank", c.selection.probe_rank);
        s.get("corrmap_tau", c.corrmap_tau);
    });
    r.object("train", [&](ObjectReader& t) {
        t.get("epochs", c.train.epochs);
        t.get("lr", c.train.lr);
        t.get("batch_size", c.train.batch_size);
        t.get("beta1", c.train.beta1);
        t.get("beta2", c.train.beta2);
        t.get("eps", c.train.eps);
        t.get("weight_decay", c.train.weight_decay);
        t.get_optional("clip_norm", c.train.clip_norm);
    });
    r.finish();
    c.base.pretrain.task.rows = c.task.rows;
    c.base.pretrain.task.cols = c.task.cols;
    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    json j;
    try {
        j = json::parse(ss.str());
    } catch (const json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return from_json(j);
}

void ExperimentConfig::validate() const {
    as_config_error([&] {
        model.validate();
        if (model.n_q_heads != model.group * model.n_kv_heads)
            throw ConfigError("model: n_q_heads must be a multiple of n_kv_heads");
        if (task.rows == 0 || task.cols == 0) throw ConfigError("task: empty grid");
        if (task.rows > model.max_grid || task.cols > model.max_grid)
            throw ConfigError("task: grid exceeds the patch code range max_grid = " + std::to_string(model.max_grid));
        if (task.ratio && !(*task.ratio > 0.0)) throw ConfigError("task: ratio must be positive");
        if (task.train_size == 0 || task.test_size == 0 || task.probe_size == 0)
            throw ConfigError("task: dataset sizes must be positive");
        const GroundingSpec g = task.grounding();
        const std::size_t length = g.rows * g.cols + grounding_text_tokens(g.text_pad) + 16;
        if (length > model.max_seq)
            throw ConfigError("task: prompts of about " + std::to_string(length) + " tokens exceed max_seq");
        if (std::find(selection_strategies().begin(), selection_strategies().end(), strategy) ==
            selection_strategies().end())
            throw ConfigError("selection: unknown strategy \"" + strategy + "\"");
        if (strategy != "perlayer-rand") selection.validate(model);
        if (!(corrmap_tau > -1.0 && corrmap_tau < 1.0)) throw ConfigError("selection: corrmap_tau must lie in (-1, 1)");
        if (adapter.family == AdapterFamily::image_lora && adapter.chosen.empty()) {
            AdapterSpec probe = adapter;
            probe.chosen.assign(model.n_layers, {});
            probe.chosen[0] = {0};
            probe.validate(model);
        } else {
            adapter.validate(model);
        }
        train.validate();
        base.pretrain.validate();
        return 0;
    });
}

std::uint64_t ExperimentConfig::stream(std::string_view label) const { return derive_seed(seed, label); }

SelectionConfig ExperimentConfig::resolved_selection() const {
    SelectionConfig s = selection;
    s.seed = stream("select");
    s.threads = threads;
    return s;
}

TrainConfig ExperimentConfig::resolved_train() const {
    TrainConfig t = train;
    t.seed = stream("train");
    t.threads = threads;
    return t;
}

Datasets make_datasets(const ExperimentConfig& cfg) {
    const GroundingSpec g = cfg.task.grounding();
    const std::uint64_t data = cfg.stream("data");
    Datasets d;
    d.train = gen_grounding(derive_seed(data, "train"), cfg.task.train_size, g, cfg.model.max_seq);
    d.test = gen_grounding(derive_seed(data, "test"), cfg.task.test_size, g, cfg.model.max_seq);
    d.probes = gen_grounding(derive_seed(data, "probe"), cfg.task.probe_size, g, cfg.model.max_seq);
    return d;
}

Model build_base(const ExperimentConfig& cfg, std::vector<double>* pretrain_losses) {
    if (!cfg.base.checkpoint.empty()) {
        Model m(cfg.model, 0);
        m.load_weights(load_tensors(cfg.base.checkpoint));
        m.set_trainable(false);
        return m;
    }
    PretrainResult r = pretrain_base(cfg.model, cfg.base.pretrain, cfg.base.seed);
    if (pretrain_losses) *pretrain_losses = r.losses;
    return std::move(r.model);
}

HeadReport run_selection(const Model& model, const std::vector<Example>& probes, const ExperimentConfig& cfg) {
    const SelectionConfig sel = cfg.resolved_selection();
    if (cfg.strategy == "ours") return select_heads(model, probes, sel);
    if (cfg.strategy == "global-rand") return baseline_global_rand(cfg.model, sel.k_sel, sel.seed);
    if (cfg.strategy == "perlayer-rand") return baseline_perlayer_rand(cfg.model, sel.seed);
    if (cfg.strategy == "corrmap") return baseline_corrmap(model, probes, sel.k_sel, cfg.corrmap_tau);
    throw ConfigError("selection: unknown strategy \"" + cfg.strategy + "\"");
}

AdapterSpec resolve_adapter(const ExperimentConfig& cfg, const HeadReport* report) {
    AdapterSpec spec = cfg.adapter;
    if (spec.family == AdapterFamily::image_lora && spec.chosen.empty()) {
        if (!report) throw ContractError("adapter: image_lora heads need a selection report");
        spec.chosen = report->chosen_kv;
    }
    spec.validate(cfg.model);
    return spec;
}

AdapterSet init_adapters(const AdapterSpec& spec, const ExperimentConfig& cfg) {
    return AdapterSet::init(spec, cfg.model, derive_seed(cfg.stream("train"), "init"));
}

} // namespace ilora
