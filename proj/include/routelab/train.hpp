// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "routelab/forward.hpp"
#include "routelab/model.hpp"

namespace routelab {

struct TrainOptions {
    double clip_norm = 1.0;     // global gradient-norm clip; <= 0 disables
    double aux_loss_coef = 0.0; // load-balance auxiliary loss, off by default
};

struct TrainResult {
    MoeModel model;
    std::vector<double> loss_trajectory;  // mean per-token loss, one entry per step
};

// Plain SGD language-model training: each step draws one sequence from the
// corpus (seeded shuffle, cycling in epochs) and minimizes the mean
// next-token cross-entropy. The input model is not modified. A non-finite
// step loss raises TrainingDivergedError with the step index. The same
// operation performs safety alignment when the corpus holds refusal pairs
// and gray-box fine-tuning when it holds a downstream corpus.
TrainResult train_lm(const MoeModel& model, const std::vector<TokenSequence>& corpus,
                     int steps, double learning_rate, uint64_t seed,
                     const TrainOptions& options = {});

// Like train_lm, but only the feed-forward parameters of the listed routed
// experts (at every layer) receive updates; every other parameter stays
// bit-identical. The expert list must be non-empty.
TrainResult fine_tune_expert_subset(const MoeModel& model, const std::vector<int>& experts,
                                    const std::vector<TokenSequence>& data, int steps,
                                    double learning_rate, uint64_t seed,
                                    const TrainOptions& options = {});

// Mean per-token cross-entropy of the corpus under the model.
double corpus_cross_entropy(const MoeModel& model, const std::vector<TokenSequence>& corpus);

}  // namespace routelab
