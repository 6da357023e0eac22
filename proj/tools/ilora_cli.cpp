// Command-line driver: data generation, base pretraining, head selection,
// adapter training and evaluation, cost accounting and resolution planning.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include "ilora/budget.hpp"
#include "ilora/checkpoint.hpp"
#include "ilora/errors.hpp"
#include "ilora/experiment.hpp"
#include "ilora/flops.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ilora;

namespace {

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
    if (!f) throw std::runtime_error("write failed for " + path.string());
}

json read_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    try {
        return json::parse(ss.str());
    } catch (const json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

// Options every experiment subcommand accepts.
struct Common {
    std::string config;
    std::string out;
    std::string base;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> threads;

    void attach(CLI::App* app, bool config_required = true) {
        auto* opt = app->add_option("--config", config, "experiment config (JSON)")->check(CLI::ExistingFile);
        if (config_required) opt->required();
        app->add_option("--out", out, "output directory (overrides output_dir)");
        app->add_option("--base", base, "base model checkpoint (overrides base.checkpoint)")->check(CLI::ExistingFile);
        app->add_option("--seed", seed, "root seed (overrides seed)");
        app->add_option("--threads", threads, "worker threads (capped by ILRA_THREADS)");
    }

    ExperimentConfig load() const {
        ExperimentConfig c = config.empty() ? ExperimentConfig{} : ExperimentConfig::load(config);
        if (!out.empty()) c.output_dir = out;
        if (!base.empty()) c.base.checkpoint = base;
        if (seed) c.seed = *seed;
        if (threads) c.threads = *threads;
        c.validate();
        fs::create_directories(c.output_dir);
        return c;
    }
};

fs::path out_path(const ExperimentConfig& c, const std::string& name) { return fs::path(c.output_dir) / name; }

void log(const std::string& msg) { std::cerr << "[ilora] " << msg << '\n'; }

std::vector<std::vector<std::size_t>> heads_from_file(const std::string& path) {
    const json j = read_json(path);
    const json& report = j.contains("report") ? j.at("report") : j;
    if (!report.contains("per_layer")) throw ConfigError(path + ": no per_layer entries");
    std::vector<std::vector<std::size_t>> chosen;
    try {
        for (const auto& l : report.at("per_layer")) chosen.push_back(l.at("chosen_kv").get<std::vector<std::size_t>>());
    } catch (const json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return chosen;
}

bool selection_needs_model(const ExperimentConfig& c) { return c.strategy == "ours" || c.strategy == "corrmap"; }

bool adapter_needs_model(const ExperimentConfig& c) {
    return c.adapter.family == AdapterFamily::image_lora && c.adapter.chosen.empty() && selection_needs_model(c);
}

// Adapter spec with heads from, in order: the config, a heads file, or a fresh selection.
AdapterSpec adapter_for(const ExperimentConfig& c, const std::string& heads_path, const Model* model,
                        const std::vector<Example>* probes) {
    AdapterSpec spec = c.adapter;
    if (!heads_path.empty()) {
        if (spec.family != AdapterFamily::image_lora) throw UsageError("--heads applies to image_lora adapters only");
        if (!spec.chosen.empty()) throw UsageError("--heads conflicts with adapter.chosen in the config");
        spec.chosen = heads_from_file(heads_path);
        try {
            spec.validate(c.model);
        } catch (const ContractError& e) {
            throw ConfigError(heads_path + ": " + e.what());
        }
        return spec;
    }
    if (spec.family != AdapterFamily::image_lora || !spec.chosen.empty()) return resolve_adapter(c, nullptr);
    HeadReport r;
    if (!selection_needs_model(c)) {
        r = run_selection(Model{}, {}, c);
    } else if (model) {
        r = run_selection(*model, *probes, c);
    } else {
        const Model base = build_base(c);
        r = run_selection(base, make_datasets(c).probes, c);
    }
    return resolve_adapter(c, &r);
}

json with_config(const ExperimentConfig& c, json body) {
    body["experiment"] = c.to_json();
    return body;
}

TokenBreakdown task_tokens(const ExperimentConfig& c) {
    const GroundingSpec g = c.task.grounding();
    TokenBreakdown t;
    t.visual = g.rows * g.cols;
    t.text_in = grounding_text_tokens(g.text_pad);
    t.answer = encode_point({g.rows - 1, g.cols - 1}).size() + 1;
    return t;
}

std::string format_ratio(double r) {
    std::ostringstream s;
    s << r;
    return s.str();
}

int cmd_gen_data(const Common& common) {
    const ExperimentConfig c = common.load();
    const Datasets d = make_datasets(c);
    write_jsonl(out_path(c, "train.jsonl").string(), d.train);
    write_jsonl(out_path(c, "test.jsonl").string(), d.test);
    write_jsonl(out_path(c, "probe.jsonl").string(), d.probes);
    write_text(out_path(c, "data.json"), with_config(c, {{"train", d.train.size()}, {"test", d.test.size()},
                                                         {"probe", d.probes.size()}})
                                             .dump(2));
    log("wrote " + std::to_string(d.train.size() + d.test.size() + d.probes.size()) + " examples to " + c.output_dir);
    return 0;
}

int cmd_pretrain(const Common& common) {
    ExperimentConfig c = common.load();
    c.base.checkpoint.clear();
    std::vector<double> losses;
    const Model m = build_base(c, &losses);
    save_tensors(out_path(c, "base.ckpt").string(), m.named_weights());
    std::ostringstream csv;
    csv.precision(17);
    csv << "step,loss\n";
    for (std::size_t i = 0; i < losses.size(); ++i) csv << i << ',' << losses[i] << '\n';
    write_text(out_path(c, "pretrain_losses.csv"), csv.str());
    write_text(out_path(c, "base.json"),
               with_config(c, {{"weight_hash", m.weight_hash()}, {"final_loss", losses.empty() ? 0.0 : losses.back()}})
                   .dump(2));
    log("base checkpoint " + out_path(c, "base.ckpt").string());
    return 0;
}

int cmd_select(const Common& common, const std::optional<std::string>& strategy, const std::optional<std::size_t>& k_sel,
               const std::optional<double>& tau, const std::optional<double>& rho) {
    ExperimentConfig c = common.load();
    if (strategy) c.strategy = *strategy;
    if (k_sel) c.selection.k_sel = *k_sel;
    if (tau) c.selection.tau = *tau;
    if (rho) c.selection.rho = *rho;
    c.validate();
    HeadReport r;
    if (selection_needs_model(c)) {
        const Model m = build_base(c);
        const Datasets d = make_datasets(c);
        r = run_selection(m, d.probes, c);
    } else {
        r = run_selection(Model{}, {}, c);
    }
    write_text(out_path(c, "heads.json"), with_config(c, {{"report", json::parse(report_json(r))}}).dump(2));
    const std::string heat = report_heatmap(r);
    write_text(out_path(c, "heads.txt"), heat);
    std::cout << heat;
    return 0;
}

int cmd_train(const Common& common, const std::string& heads, const std::optional<double>& clip) {
    ExperimentConfig c = common.load();
    if (clip) c.train.clip_norm = *clip;
    c.validate();
    const Model m = build_base(c);
    const Datasets d = make_datasets(c);
    const AdapterSpec spec = adapter_for(c, heads, &m, &d.probes);
    AdapterSet adapters = init_adapters(spec, c);
    log("training " + std::to_string(trainable_parameters(spec, c.model)) + " adapter parameters on " +
        std::to_string(d.train.size()) + " examples");
    const TrainResult tr = train_adapters(m, adapters, d.train, c.resolved_train());
    const fs::path ckpt = out_path(c, "adapter.ckpt");
    save_tensors(ckpt.string(), adapters.named_parameters());
    write_metrics_csv(out_path(c, "metrics.csv").string(), tr.metrics);
    write_text(ckpt.string() + ".json", with_config(c, {{"adapter", adapter_spec_json(spec)},
                                                        {"base_hash", tr.base_hash_after},
                                                        {"final_loss", tr.metrics.back().loss},
                                                        {"steps", tr.metrics.size()}})
                                            .dump(2));
    log("adapter checkpoint " + ckpt.string());
    return 0;
}

int cmd_eval(const Common& common, const std::string& adapter_path, bool untrained, const std::string& heads,
             bool no_cache) {
    const ExperimentConfig c = common.load();
    const Model m = build_base(c);
    const Datasets d = make_datasets(c);
    std::optional<AdapterSet> adapters;
    json adapter_json = nullptr;
    if (!adapter_path.empty()) {
        const json meta = read_json(adapter_path + ".json");
        if (!meta.contains("adapter")) throw ConfigError(adapter_path + ".json: missing adapter spec");
        const AdapterSpec spec = adapter_spec_from_json(meta.at("adapter"));
        adapters = AdapterSet::init(spec, c.model, 0);
        adapters->load(load_tensors(adapter_path));
        adapter_json = adapter_spec_json(spec);
    } else if (untrained) {
        const AdapterSpec spec = adapter_for(c, heads, &m, &d.probes);
        adapters = init_adapters(spec, c);
        adapter_json = adapter_spec_json(spec);
    } else if (!heads.empty()) {
        throw UsageError("--heads needs --untrained or a trained adapter");
    }
    const EvalResult r = evaluate(m, adapters ? &*adapters : nullptr, d.test, !no_cache, c.threads);
    json records = json::array();
    for (std::size_t i = 0; i < d.test.size(); ++i) {
        const auto p = parse_point(r.predictions[i]);
        const Cell t = *d.test[i].target;
        records.push_back({{"target", {t.row, t.col}},
                           {"predicted", p ? json::array({p->row, p->col}) : json(nullptr)},
                           {"hit", p && *p == t}});
    }
    write_text(out_path(c, "eval.json"),
               with_config(c, {{"accuracy", r.accuracy}, {"adapter", adapter_json}, {"records", records}}).dump(2));
    std::cout << "accuracy " << r.accuracy << " on " << d.test.size() << " examples\n";
    return 0;
}

int cmd_flops(const Common& common, const std::optional<double>& ratio, const std::string& csv,
              const std::string& json_path, bool madds2, const std::string& heads) {
    ExperimentConfig c = common.load();
    if (ratio) c.task.ratio = *ratio;
    c.validate();
    const AdapterSpec spec = adapter_for(c, heads, nullptr, nullptr);
    const std::string label = c.task.ratio ? format_ratio(*c.task.ratio) : "pad" + std::to_string(c.task.text_pad);
    const auto rows = compare_configs({{to_string(spec.family), spec}}, c.model, {{label, task_tokens(c)}}, madds2);
    const std::string table = compare_csv(rows);
    if (!csv.empty()) write_text(csv, table);
    if (!json_path.empty()) write_text(json_path, with_config(c, {{"rows", json::parse(compare_json(rows))}}).dump(2));
    std::cout << table;
    return 0;
}

int cmd_plan(std::size_t w, std::size_t h, double ratio, std::size_t text, const PlanOptions& o) {
    std::cout << plan_resolution(w, h, ratio, text, o).to_json() << '\n';
    return 0;
}

struct CompareArgs {
    std::vector<std::string> configs;
    std::vector<double> ratios{0.25, 0.5, 1.0, 2.0};
    std::string csv, json_path;
    bool evaluate = false;
    bool madds2 = false;
};

int cmd_compare(const CompareArgs& a, const Common& common) {
    json rows = json::array();
    std::ostringstream table;
    table << "method,ratio,T_text,T_v,accuracy,params,fwd,bwd,total\n";
    for (const auto& path : a.configs) {
        Common one = common;
        one.config = path;
        const ExperimentConfig base_cfg = one.load();
        const std::string method = fs::path(path).stem().string();
        std::optional<Model> model;
        for (double ratio : a.ratios) {
            ExperimentConfig c = base_cfg;
            c.task.ratio = ratio;
            c.validate();
            const TokenBreakdown tokens = task_tokens(c);
            std::optional<double> acc;
            if ((a.evaluate || adapter_needs_model(c)) && !model) model = build_base(c);
            const Datasets d = make_datasets(c);
            const AdapterSpec spec = adapter_for(c, "", model ? &*model : nullptr, &d.probes);
            const CostReport cost =
                compare_configs({{method, spec}}, c.model, {{format_ratio(ratio), tokens}}, a.madds2)[0].cost;
            if (a.evaluate) {
                AdapterSet ad = init_adapters(spec, c);
                train_adapters(*model, ad, d.train, c.resolved_train());
                acc = evaluate(*model, &ad, d.test, true, c.threads).accuracy;
            }
            table << method << ',' << format_ratio(ratio) << ',' << tokens.text_in << ',' << tokens.visual << ','
                  << (acc ? format_ratio(*acc) : "") << ',' << cost.trainable_params << ',' << cost.forward_madds
                  << ',' << cost.backward_madds << ',' << cost.total << '\n';
            rows.push_back({{"method", method},
                            {"ratio", ratio},
                            {"T_text", tokens.text_in},
                            {"T_v", tokens.visual},
                            {"accuracy", acc ? json(*acc) : json(nullptr)},
                            {"params", cost.trainable_params},
                            {"fwd", cost.forward_madds},
                            {"bwd", cost.backward_madds},
                            {"total", cost.total},
                            {"experiment", c.to_json()}});
        }
    }
    if (!a.csv.empty()) write_text(a.csv, table.str());
    if (!a.json_path.empty()) write_text(a.json_path, rows.dump(2));
    std::cout << table.str();
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Image-LoRA toolkit: head selection, adapter training and cost accounting"};
    app.require_subcommand(1);

    Common common;

    auto* gen = app.add_subcommand("gen-data", "write train/test/probe JSONL datasets");
    common.attach(gen);

    auto* pre = app.add_subcommand("pretrain", "pretrain the toy base model and save it");
    common.attach(pre);

    std::optional<std::string> strategy;
    std::optional<std::size_t> k_sel;
    std::optional<double> tau, rho;
    auto* sel = app.add_subcommand("select-heads", "choose KV heads for Image-LoRA");
    common.attach(sel);
    sel->add_option("--strategy", strategy, "ours | global-rand | perlayer-rand | corrmap")
        ->check(CLI::IsMember(selection_strategies()));
    sel->add_option("--k-sel", k_sel, "global head budget");
    sel->add_option("--tau", tau, "layer allocation temperature");
    sel->add_option("--rho", rho, "pool expansion factor");

    std::string heads;
    std::optional<double> clip;
    auto* tr = app.add_subcommand("train", "train adapters on the frozen base");
    common.attach(tr);
    tr->add_option("--heads", heads, "heads.json from select-heads")->check(CLI::ExistingFile);
    tr->add_option("--clip", clip, "gradient clipping norm");

    std::string adapter_path;
    bool untrained = false, no_cache = false;
    auto* ev = app.add_subcommand("eval", "evaluate the base or an adapter on the test split");
    common.attach(ev);
    auto* adapter_opt = ev->add_option("--adapter", adapter_path, "adapter checkpoint from train")->check(CLI::ExistingFile);
    auto* untrained_opt = ev->add_flag("--untrained", untrained, "evaluate freshly initialized adapters (B = 0)");
    adapter_opt->excludes(untrained_opt);
    ev->add_option("--heads", heads, "heads.json for --untrained")->check(CLI::ExistingFile);
    ev->add_flag("--no-cache", no_cache, "decode with full forwards instead of the KV cache");

    std::optional<double> ratio;
    std::string csv, json_path;
    bool madds2 = false;
    auto* fl = app.add_subcommand("flops", "adapter-only training multiply-adds for the configured adapter");
    common.attach(fl);
    fl->add_option("--ratio", ratio, "text:image token ratio T_text / T_v")->check(CLI::PositiveNumber);
    fl->add_option("--csv", csv, "CSV output path");
    fl->add_option("--json", json_path, "JSON output path");
    fl->add_flag("--madds-as-2flops", madds2, "count one multiply-add as two FLOPs");
    fl->add_option("--heads", heads, "heads.json from select-heads")->check(CLI::ExistingFile);

    std::size_t width = 0, height = 0, text_tokens = 0;
    double plan_ratio = 1.0;
    PlanOptions plan_opts;
    auto* plan = app.add_subcommand("plan-resolution", "stride-aligned resolution for a text:image token ratio");
    plan->add_option("--width", width, "original width in pixels")->required()->check(CLI::PositiveNumber);
    plan->add_option("--height", height, "original height in pixels")->required()->check(CLI::PositiveNumber);
    plan->add_option("--ratio", plan_ratio, "target T_text / T_v")->required()->check(CLI::PositiveNumber);
    plan->add_option("--text-tokens", text_tokens, "text token count T_text")->required();
    plan->add_option("--stride", plan_opts.stride, "effective patch stride in pixels")->check(CLI::PositiveNumber);
    plan->add_option("--min-pixels", plan_opts.min_pixels, "minimum pixel area");
    plan->add_option("--max-pixels", plan_opts.max_pixels, "maximum pixel area");
    plan->add_option("--tolerance", plan_opts.tolerance, "allowed token count deviation");

    CompareArgs cmp;
    Common cmp_common;
    auto* co = app.add_subcommand("compare", "params, FLOPs and optionally accuracy per method and ratio");
    co->add_option("configs", cmp.configs, "experiment configs, one per method")->required()->check(CLI::ExistingFile);
    co->add_option("--ratios", cmp.ratios, "text:image ratios")->delimiter(',');
    co->add_option("--csv", cmp.csv, "CSV output path");
    co->add_option("--json", cmp.json_path, "JSON output path");
    co->add_flag("--evaluate", cmp.evaluate, "train and evaluate every method at every ratio");
    co->add_flag("--madds-as-2flops", cmp.madds2, "count one multiply-add as two FLOPs");
    co->add_option("--base", cmp_common.base, "base model checkpoint")->check(CLI::ExistingFile);
    co->add_option("--threads", cmp_common.threads, "worker threads");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*gen) return cmd_gen_data(common);
        if (*pre) return cmd_pretrain(common);
        if (*sel) return cmd_select(common, strategy, k_sel, tau, rho);
        if (*tr) return cmd_train(common, heads, clip);
        if (*ev) return cmd_eval(common, adapter_path, untrained, heads, no_cache);
        if (*fl) return cmd_flops(common, ratio, csv, json_path, madds2, heads);
        if (*plan) return cmd_plan(width, height, plan_ratio, text_tokens, plan_opts);
        if (*co) {
            for (double r : cmp.ratios)
                if (!(r > 0.0)) throw UsageError("--ratios must be positive");
            return cmd_compare(cmp, cmp_common);
        }
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const ContractError& e) {
        std::cerr << "invalid input: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
