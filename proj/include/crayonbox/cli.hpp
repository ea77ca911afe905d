#pragma once

#include <iostream>
#include <string>
#include <vector>

#include "crayonbox/model.hpp"

namespace crayonbox {

// Flat key=value run configuration; '#' starts a comment. Every key is
// validated against the schema — an unknown key raises ConfigError rather
// than being silently ignored.
struct RunConfig {
    ModelConfig model;

    // adapters
    int lora_rank = 2;
    float lora_alpha = 4.0f;

    uint64_t seed = 1;

    // data
    int cpt_scenes = 24;
    int cit_scenes = 24;
    int eval_scenes = 12;
    int grid_h = 16;
    int grid_w = 16;
    int min_objects = 0;
    int max_objects = 3;
    float p_unk_scene = 0.1f;
    int vl_per_scene = 3;
    std::vector<int> class_pool;  // empty = all thing classes
    float noise_std = 0.04f;

    // train
    int batch_size = 4;
    int cpt_epochs = 1;
    int cit_epochs = 1;
    int cpt_max_steps = -1;
    int cit_max_steps = -1;
    float cpt_lr_max = 1e-4f;
    float cpt_lr_min = 1e-6f;
    float cit_lr_max = 1e-5f;
    float cit_lr_min = 1e-6f;
    float p_image = 0.5f;
    int freeze_audit_every = 50;
    int warmup_steps = 200;
    float warmup_lr = 5e-3f;

    // ablation switches
    bool sem_query = true;
    bool num_query = true;
    bool dual_qlora = true;

    int beam_n = 1;
};

RunConfig parse_run_config(std::istream& in);
RunConfig load_run_config(const std::string& path);

// Dispatches the synth/cpt/cit/probe/correlate/quantinspect subcommands and
// maps exceptions to the exit-code contract (0 ok, 2 config, 3 train abort,
// 4 artifact).
int run_cli(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err);

}  // namespace crayonbox
