#pragma once

// Builds the frozen base used by the experiments. A random toy model is
// trained end to end on the grounding task while its images carry a source
// domain patch code; afterwards the base sees images through its own code,
// which it never saw during pretraining. The base therefore knows the prompt
// and answer format and how to read a located object, but not where objects
// sit in the new domain.

#include "ilora/model.hpp"
#include "ilora/tasks.hpp"

#include <cstdint>
#include <vector>

namespace ilora {

struct PretrainConfig {
    std::size_t examples = 4000;
    std::size_t epochs = 1;
    double lr = 2e-3;
    std::size_t batch_size = 8;
    GroundingSpec task;

    void validate() const;
    bool operator==(const PretrainConfig&) const = default;
};

// Patch code of the pretraining domain.
PatchCode source_patch_code(const ModelConfig& cfg, std::uint64_t seed);

struct PretrainResult {
    Model model;
    std::vector<double> losses; // mean batch loss per step
};

// Deterministic in (cfg, pc, seed). examples == 0 returns the random init.
PretrainResult pretrain_base(const ModelConfig& cfg, const PretrainConfig& pc, std::uint64_t seed);

} // namespace ilora
