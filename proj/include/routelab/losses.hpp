// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <vector>

#include "routelab/forward.hpp"
#include "routelab/model.hpp"

namespace routelab {

// Gradient of a scalar loss with respect to the one-hot input indicator at
// each position. Rows at positions >= prefix_len are zero.
struct InputGradient {
    int seq_len = 0;
    int vocab = 0;
    std::vector<double> data;  // seq_len x vocab, row-major

    double at(int pos, int token) const {
        return data[static_cast<size_t>(pos) * vocab + token];
    }
};

struct RoutingScore;  // profiling.hpp

// Teacher-forced negative log-likelihood of the target continuation:
// the model is run on input + target and the loss sums -log P(target[t])
// over the target positions. The gradient covers the first prefix_len
// input positions.
std::pair<double, InputGradient> output_loss_and_gradient(const MoeModel& model,
                                                          const TokenSequence& input,
                                                          const TokenSequence& target,
                                                          int prefix_len);

// Loss value only, at a relaxed (dense-indicator) input point.
double output_loss_value(const MoeModel& model, const RelaxedTokenInput& input,
                         int input_len, const TokenSequence& target);

// Loss value only (single forward, no gradient).
double output_loss_value(const MoeModel& model, const TokenSequence& input,
                         const TokenSequence& target);

// Routing loss: dot(score, p_bar) where p_bar is the routing probability
// vector averaged over the profiled layers (all MoE layers when `layers` is
// empty) and every input position. The gradient covers the first prefix_len
// positions.
std::pair<double, InputGradient> routing_loss_and_gradient(
    const MoeModel& model, const TokenSequence& input, const RoutingScore& score,
    int prefix_len, const std::vector<int>& layers = {});

double routing_loss_value(const MoeModel& model, const RelaxedTokenInput& input,
                          const RoutingScore& score, const std::vector<int>& layers = {});

double routing_loss_value(const MoeModel& model, const TokenSequence& input,
                          const RoutingScore& score, const std::vector<int>& layers = {});

// Weighted combination alpha * L_out + beta * L_route evaluated with a
// single forward/backward pass; the routing term aggregates over the input
// positions only (the target continuation is excluded).
struct JointLoss {
    double total = 0.0;
    double out = 0.0;
    double route = 0.0;
    InputGradient gradient;
};

JointLoss joint_loss_and_gradient(const MoeModel& model, const TokenSequence& input,
                                  const TokenSequence& target, const RoutingScore& score,
                                  double alpha, double beta, int prefix_len,
                                  const std::vector<int>& layers = {});

// Both loss components from a single forward pass, no gradient. An empty
// target contributes zero to the output term.
JointLoss joint_loss_value(const MoeModel& model, const TokenSequence& input,
                           const TokenSequence& target, const RoutingScore& score,
                           double alpha, double beta, const std::vector<int>& layers = {});

}  // namespace routelab
