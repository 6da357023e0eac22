#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "ilora/budget.hpp"
#include "ilora/errors.hpp"
#include "ilora/experiment.hpp"

using namespace ilora;
using nlohmann::json;

TEST_CASE("defaults follow the documented training setup") {
    const ExperimentConfig c;
    CHECK(c.train.epochs == 5);
    CHECK(c.train.lr == 5e-4);
    CHECK(c.train.batch_size == 8);
    CHECK(c.train.weight_decay == 0.01);
    CHECK_FALSE(c.train.clip_norm.has_value());
    CHECK(c.adapter.family == AdapterFamily::image_lora);
    CHECK(c.adapter.paths == std::vector<Projection>{Projection::V});
    CHECK(c.task.rows == 6);
    CHECK(c.task.cols == 6);
    CHECK_NOTHROW(c.validate());
}

TEST_CASE("config JSON round-trips") {
    ExperimentConfig c;
    c.seed = 17;
    c.task.ratio = 2.0;
    c.train.clip_norm = 1.5;
    c.adapter = AdapterSpec::std_lora({Projection::Q, Projection::V}, 4, 8.0);
    c.strategy = "corrmap";
    c.selection.k_sel = 6;
    c.base.pretrain.examples = 10;
    const ExperimentConfig back = ExperimentConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    CHECK(back.seed == 17);
    CHECK(back.task.ratio == 2.0);
    CHECK(back.train.clip_norm == 1.5);
    CHECK(back.adapter.paths == c.adapter.paths);
    CHECK(back.selection.k_sel == 6);

    ExperimentConfig chosen;
    chosen.adapter.chosen = {{0}, {}, {1}, {0, 1}};
    CHECK(ExperimentConfig::from_json(chosen.to_json()).adapter.chosen == chosen.adapter.chosen);
    CHECK(ExperimentConfig::from_json(json::object()).to_json() == ExperimentConfig{}.to_json());
}

TEST_CASE("unknown keys and wrong types are rejected") {
    CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"sed", 1}}), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"task", {{"rowz", 3}}}}), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"base", {{"pretrain", {{"steps", 3}}}}}}), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"adapter", {{"ranks", 3}}}}), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"seed", "one"}}), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"seed", -1}}), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"train", {{"epochs", 2.5}}}}), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"train", {{"lr", "fast"}}}}), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"task", 3}}), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(json::array()), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"adapter", {{"family", "dora"}}}}), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::load("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("cross-field validation") {
    CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"selection", {{"k_sel", 9}}}}), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"selection", {{"strategy", "best"}}}}), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"adapter", {{"rank", 9}}}}), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"adapter", {{"paths", {"Q"}}}}}), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"adapter", {{"chosen", json::array({json::array({2})})}}}}), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"task", {{"rows", 40}}}}), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"task", {{"ratio", -1.0}}}}), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"task", {{"rows", 20}, {"cols", 30}}}}), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"train", {{"epochs", 0}}}}), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"model", {{"n_q_heads", 6}}}}), ConfigError);
    // perlayer-rand ignores the budget
    CHECK_NOTHROW(ExperimentConfig::from_json(json{{"selection", {{"strategy", "perlayer-rand"}}}}));
}

TEST_CASE("ratio sets the text pad") {
    TaskConfig t;
    t.ratio = 1.0;
    CHECK(t.grounding().text_pad == text_pad_for_ratio(1.0, 36));
    CHECK(grounding_text_tokens(t.grounding().text_pad) == 36);
    t.ratio.reset();
    t.text_pad = 9;
    CHECK(t.grounding().text_pad == 9);
}

TEST_CASE("seed streams and datasets") {
    ExperimentConfig c;
    c.task.train_size = 20;
    c.task.test_size = 10;
    c.task.probe_size = 5;
    const Datasets a = make_datasets(c), b = make_datasets(c);
    CHECK(a.train == b.train);
    CHECK(a.test == b.test);
    CHECK(a.probes == b.probes);
    CHECK(a.train.size() == 20);
    CHECK(a.train[0] != a.test[0]);
    CHECK(c.stream("data") != c.stream("select"));
    CHECK(c.resolved_selection().seed == c.stream("select"));
    CHECK(c.resolved_train().seed == c.stream("train"));
    c.seed = 1;
    CHECK(make_datasets(c).train != a.train);
}

TEST_CASE("resolving the adapter from a selection") {
    ExperimentConfig c;
    HeadReport r = baseline_perlayer_rand(c.model, 3);
    const AdapterSpec spec = resolve_adapter(c, &r);
    CHECK(spec.chosen == r.chosen_kv);
    CHECK_THROWS_AS(resolve_adapter(c, nullptr), ContractError);
    c.adapter = AdapterSpec::std_lora({Projection::V});
    CHECK(resolve_adapter(c, nullptr).family == AdapterFamily::std_lora);
    c.strategy = "global-rand";
    c.selection.k_sel = 3;
    CHECK(run_selection(Model{}, {}, c).total_chosen() == 3);
}

TEST_CASE("adapter spec JSON") {
    AdapterSpec s = AdapterSpec::image_lora({{1}, {0, 1}}, 4, 4.0);
    s.norm = NormKind::correlated;
    s.rho_corr = 0.25;
    s.share_a = false;
    s.paths = {Projection::K, Projection::V};
    const AdapterSpec back = adapter_spec_from_json(adapter_spec_json(s));
    CHECK(back.family == s.family);
    CHECK(back.paths == s.paths);
    CHECK(back.rank == 4);
    CHECK(back.norm == NormKind::correlated);
    CHECK(back.rho_corr == 0.25);
    CHECK_FALSE(back.share_a);
    CHECK(back.chosen == s.chosen);
}

TEST_CASE("base from a tiny pretraining run") {
    ExperimentConfig c;
    c.model.n_layers = 1;
    c.base.pretrain.examples = 16;
    std::vector<double> losses;
    const Model m = build_base(c, &losses);
    CHECK(losses.size() == 2);
    CHECK(m.weight_hash() == build_base(c).weight_hash());
}
