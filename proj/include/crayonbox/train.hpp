#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "crayonbox/datagen.hpp"
#include "crayonbox/model.hpp"
#include "crayonbox/optim.hpp"

namespace crayonbox {

enum class TrainStage { CPT, CIT };

inline constexpr float kCptLrMax = 1e-4f;
inline constexpr float kCptLrMin = 1e-6f;
inline constexpr float kCitLrMax = 1e-5f;
inline constexpr float kCitLrMin = 1e-6f;

struct TrainConfig {
    TrainStage stage = TrainStage::CPT;
    int batch_size = 8;   // paper: 32
    int epochs = 1;
    int max_steps = -1;   // optional cap; -1 runs the full epoch count
    float lr_max = kCptLrMax;
    float lr_min = kCptLrMin;
    uint64_t seed = 0;
    float p_image = 0.5f;  // CIT mode split
    bool sem_query = true;
    bool num_query = true;
    bool dual_qlora = true;
    int freeze_audit_every = 50;
    AdamWConfig adamw;

    static TrainConfig cpt_defaults();
    static TrainConfig cit_defaults();
};

struct StepLog {
    int step = 0;
    float lr = 0.0f;
    float loss = 0.0f;
    RecordKind mode = RecordKind::CrayonCPT;
};

struct TrainReport {
    std::vector<StepLog> steps;
    float initial_loss = 0.0f;
    float final_loss = 0.0f;
    int audits_passed = 0;
};

// Masked teacher-forced loss for one record against its scene.
Tensor loss_of(const InstructionRecord& rec, const Scene& scene, const Model& model);

// Parameter-group name prefixes that the stage is allowed to update.
// CIT adapters are managed separately by route() per step.
std::vector<std::string> stage_trainable_groups(TrainStage stage);

uint64_t content_hash(const Tensor& t);
uint64_t quantized_content_hash(const Model& model);

// Class-prediction warm-up for the vision encoder against downsampled grid
// labels through a throwaway linear head. Run before CPT; the encoder stays
// frozen afterwards. Returns the final warm-up loss.
float warm_up_vision(Model& model, const SynthDataset& ds, int steps, float lr,
                     uint64_t seed);

// One pass of Crayon Prompt Tuning: only {semantic, numbering, connector}
// move; every other group is hash-audited during the run.
TrainReport run_cpt(Model& model, const SynthDataset& ds, const TrainConfig& cfg,
                    std::ostream* log = nullptr);

// Crayon/visual instruction tuning over a quantized backbone: per step a
// Bernoulli(p_image) draw picks Image-CIT or VL-CIT, route() selects the
// adapter, and a homogeneous batch of that kind is stepped.
TrainReport run_cit(Model& model, const SynthDataset& ds, const TrainConfig& cfg,
                    std::ostream* log = nullptr);

}  // namespace crayonbox
