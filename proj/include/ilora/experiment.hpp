#pragma once

// Experiment configuration and the pipeline steps shared by the command line
// and the acceptance run: base model, datasets, head selection, adapters.
//
// Randomness: the base model depends on base.seed alone, so one base serves
// many runs. Everything else derives from the root seed through labeled
// streams: "data" (train/test/probe splits), "select", "train" (adapter
// init and batch order).

#include "ilora/adapter.hpp"
#include "ilora/headselect.hpp"
#include "ilora/model.hpp"
#include "ilora/pretrain.hpp"
#include "ilora/tasks.hpp"
#include "ilora/train.hpp"

#include "json.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace ilora {

struct TaskConfig {
    std::size_t rows = 6, cols = 6;
    std::size_t text_pad = 4;
    // T_text / T_v; when set it overrides text_pad through the budget module.
    std::optional<double> ratio;
    bool shuffle = true;
    std::size_t train_size = 4000;
    std::size_t test_size = 360;
    std::size_t probe_size = 64;

    // Grounding spec with the ratio already turned into a text pad.
    GroundingSpec grounding() const;
    bool operator==(const TaskConfig&) const = default;
};

struct BaseConfig {
    std::uint64_t seed = 1;
    // Weights to load instead of pretraining; empty means pretrain.
    std::string checkpoint;
    PretrainConfig pretrain;

    bool operator==(const BaseConfig&) const = default;
};

inline const std::vector<std::string>& selection_strategies() {
    static const std::vector<std::string> s{"ours", "global-rand", "perlayer-rand", "corrmap"};
    return s;
}

struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::string output_dir = "ilora_out";
    std::size_t threads = 0;
    ModelConfig model;
    BaseConfig base;
    TaskConfig task;
    // image_lora without `chosen` takes its heads from the selection step.
    AdapterSpec adapter;
    std::string strategy = "ours";
    SelectionConfig selection;
    double corrmap_tau = 0.3;
    TrainConfig train;

    // Cross-field checks; throws ConfigError.
    void validate() const;

    nlohmann::json to_json() const;
    // Strict: unknown keys and wrong types throw ConfigError. Missing keys keep defaults.
    static ExperimentConfig from_json(const nlohmann::json& j);
    static ExperimentConfig load(const std::string& path);

    // Seed of a labeled stream under the root seed.
    std::uint64_t stream(std::string_view label) const;
    // Selection and training configs with their stream seeds and thread count filled in.
    SelectionConfig resolved_selection() const;
    TrainConfig resolved_train() const;
};

struct Datasets {
    std::vector<Example> train, test, probes;
};

Datasets make_datasets(const ExperimentConfig& cfg);

// Loads base.checkpoint when given, otherwise pretrains. Losses are filled
// only when pretraining ran.
Model build_base(const ExperimentConfig& cfg, std::vector<double>* pretrain_losses = nullptr);

// Runs the configured strategy ("ours" is the influence procedure).
HeadReport run_selection(const Model& model, const std::vector<Example>& probes, const ExperimentConfig& cfg);

// The configured adapter with image_lora heads taken from `report` unless the
// config lists them.
AdapterSpec resolve_adapter(const ExperimentConfig& cfg, const HeadReport* report);

AdapterSet init_adapters(const AdapterSpec& spec, const ExperimentConfig& cfg);

nlohmann::json adapter_spec_json(const AdapterSpec& spec);
AdapterSpec adapter_spec_from_json(const nlohmann::json& j);

} // namespace ilora
