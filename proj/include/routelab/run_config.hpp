// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "routelab/attack.hpp"
#include "routelab/eval.hpp"
#include "routelab/model.hpp"
#include "routelab/profiling.hpp"
#include "routelab/task.hpp"

namespace routelab {

// One JSON document per run, one section per pipeline stage.
struct RunConfig {
    uint64_t seed = 1234;
    ModelConfig model;
    TaskParams task;

    struct TrainSection {
        int pretrain_steps = 9000;
        int align_steps = 2400;
        double learning_rate = 0.6;
        double align_learning_rate = 0.15;
        double clip_norm = 1.0;
        double aux_loss_coef = 0.0;
    } train;

    struct ProfileSection {
        int resamples = 8;
        int subset_size = 64;  // clamped to the dataset size
        SamplingMode sampling = SamplingMode::WithoutReplacement;
        AggregationMode aggregation = AggregationMode::Rate;
        double lambda1 = 1.0;
        double lambda2 = 0.5;
        double lambda3 = 0.5;
        int k_sup = 1;
        int k_pro = 1;
        std::vector<int> layers;  // empty profiles all layers
    } profile;

    // desk-scale optimization budget; OptimizationConfig's own defaults are
    // the full-scale ones
    struct AttackSection {
        AttackSection() {
            optimization.prefix_len = 8;
            optimization.phase1_iters = 40;
            optimization.phase2_iters = 100;
            optimization.candidate_pool = 16;
        }
        OptimizationConfig optimization;
        ObjectiveMode mode = ObjectiveMode::TwoPhase;
        int query_limit = 0;  // 0 attacks every eval query
    } attack;

    struct EvalSection {
        Setting setting = Setting::WhiteBox;
        int decode_budget = 16;
        int transfer_steps = 400;
        double transfer_lr = 0.05;
        int transfer_align_steps = 200;
    } eval;

    struct DefendSection {
        std::string defense = "amplify_strong";  // none | amplify_strong | strengthen_weak
        double gamma = 4.0;
        double strong_fraction = 0.15;  // of the expert count, by harm frequency
        double weak_fraction = 0.25;
        int steps = 300;
        double lr = 0.1;
    } defend;
};

struct ConfigDiagnostic {
    std::string field;    // dotted path, e.g. "model.top_k"
    std::string message;  // violated constraint
};

// Structural validation of every numeric field against the owning module's
// preconditions. An empty result means the config is usable.
std::vector<ConfigDiagnostic> validate_run_config(const RunConfig& config);

RunConfig default_run_config();

std::string to_json(const RunConfig& config);

// Parses JSON text; unknown keys raise IoError, missing keys keep defaults.
RunConfig run_config_from_json(const std::string& text);

// Reads and parses a config file. I/O and parse problems raise IoError;
// constraint violations are returned as diagnostics.
std::pair<RunConfig, std::vector<ConfigDiagnostic>> validate_config(const std::string& path);

}  // namespace routelab
