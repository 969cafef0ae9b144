// SPDX-License-Identifier: Apache-2.0
//
// Internal forward/backward engine behind the public model operations.
// Activations are cached per position so one backward pass can serve the
// language-model loss, the routing loss, a weighted combination of both,
// and the training objective.
#pragma once

#include <utility>
#include <vector>

#include "routelab/forward.hpp"
#include "routelab/losses.hpp"
#include "routelab/model.hpp"

namespace routelab::detail {

// Input tokens, either as ids (one-hot) or dense indicator rows.
struct DenseInput {
    int seq_len = 0;
    int vocab = 0;
    std::vector<int> ids;           // one-hot path; empty when dense
    std::vector<double> rows;       // dense path; seq_len x vocab

    bool one_hot() const { return !ids.empty(); }
};

DenseInput from_ids(const ModelConfig& config, const TokenSequence& tokens);
DenseInput from_relaxed(const ModelConfig& config, const RelaxedTokenInput& input);

struct LayerCache {
    // attention block
    std::vector<double> attn_in;    // T x D, residual stream entering the layer
    std::vector<double> attn_norm;  // T x D
    std::vector<double> attn_inv_rms;  // T
    std::vector<double> q, k, v;    // T x D each
    std::vector<double> att;        // heads x T x T, causally masked rows
    std::vector<double> ctx;        // T x D
    std::vector<double> moe_in;     // T x D, residual stream entering the MoE block
    std::vector<double> moe_norm;   // T x D
    std::vector<double> moe_inv_rms;   // T
    std::vector<double> router_logits; // T x N (bias-adjusted)
    std::vector<double> probs;      // T x N
    std::vector<std::vector<int>> selected;  // T, each top_k ascending
    // expert activations for the selected and shared experts, per position:
    // slot s < top_k is the s-th selected expert, slots >= top_k are shared
    std::vector<double> hidden;     // T x slots x H, pre-ReLU
    std::vector<double> expert_out; // T x slots x D
};

struct ForwardCache {
    int seq_len = 0;
    std::vector<double> emb;        // T x D
    std::vector<LayerCache> layers;
    std::vector<double> final_in;   // T x D
    std::vector<double> final_norm; // T x D
    std::vector<double> final_inv_rms;  // T
    std::vector<double> logits;     // T x V
};

void run_forward(const MoeModel& model, const DenseInput& input, ForwardCache& cache,
                 LayerIo* io = nullptr);

RoutingTrace trace_from_cache(const MoeModel& model, const ForwardCache& cache);

// What to differentiate. Loss components:
//   lm:    lm_scale * sum over lm_targets of -log P(target | context)
//   route: dot(route_score, mean of probs over route_layers x [0, route_positions))
//   aux:   load-balance penalty, mean over layers of N * sum_i f_i * mean_p_i
// The total objective is lm_weight * lm + route_weight * route + aux_coef * aux.
struct LossRequest {
    std::vector<std::pair<int, int>> lm_targets;  // (position, target token)
    double lm_scale = 1.0;
    double lm_weight = 0.0;
    const std::vector<double>* route_score = nullptr;
    std::vector<int> route_layers;  // empty means all layers
    int route_positions = 0;
    double route_weight = 0.0;
    double aux_coef = 0.0;
};

struct LossValues {
    double total = 0.0;
    double lm = 0.0;     // already multiplied by lm_scale
    double route = 0.0;
    double aux = 0.0;
};

LossValues loss_from_cache(const MoeModel& model, const ForwardCache& cache,
                           const LossRequest& request);

// Reverse pass. param_grads (layout-sized) and input_grad may each be null;
// input gradient rows are produced for positions < input_grad_rows.
LossValues run_backward(const MoeModel& model, const DenseInput& input,
                        const ForwardCache& cache, const LossRequest& request,
                        std::vector<double>* param_grads, InputGradient* input_grad,
                        int input_grad_rows);

}  // namespace routelab::detail
