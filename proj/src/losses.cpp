// SPDX-License-Identifier: Apache-2.0
#include "routelab/losses.hpp"

#include <cmath>

#include "network.hpp"
#include "routelab/errors.hpp"
#include "routelab/profiling.hpp"

namespace routelab {

namespace {

// input followed by the teacher-forced target continuation
detail::DenseInput concat_input(const ModelConfig& config, const TokenSequence& input,
                                const TokenSequence& target) {
    if (static_cast<int>(input.size() + target.size()) > config.max_seq_len) {
        throw CapacityError("input plus target exceeds max_seq_len");
    }
    TokenSequence full = input;
    full.insert(full.end(), target.begin(), target.end());
    return detail::from_ids(config, full);
}

// positions whose logits predict each target token
std::vector<std::pair<int, int>> lm_targets_for(const TokenSequence& input,
                                                const TokenSequence& target) {
    std::vector<std::pair<int, int>> targets;
    targets.reserve(target.size());
    const int base = static_cast<int>(input.size());
    for (size_t t = 0; t < target.size(); ++t) {
        targets.emplace_back(base - 1 + static_cast<int>(t), target[t]);
    }
    return targets;
}

void check_prefix(const TokenSequence& input, int prefix_len) {
    if (prefix_len < 0 || prefix_len > static_cast<int>(input.size())) {
        throw DomainError("prefix_len outside the input sequence");
    }
}

void check_score(const MoeModel& model, const RoutingScore& score) {
    if (static_cast<int>(score.contrast.size()) != model.config.experts_per_layer) {
        throw DomainError("routing score dimension does not match the model");
    }
}

}  // namespace

std::pair<double, InputGradient> output_loss_and_gradient(const MoeModel& model,
                                                          const TokenSequence& input,
                                                          const TokenSequence& target,
                                                          int prefix_len) {
    check_prefix(input, prefix_len);
    if (input.empty()) throw DomainError("empty input sequence");
    if (target.empty()) {
        InputGradient zero;
        zero.seq_len = static_cast<int>(input.size());
        zero.vocab = model.config.vocab_size;
        zero.data.assign(static_cast<size_t>(zero.seq_len) * zero.vocab, 0.0);
        return {0.0, zero};
    }

    detail::DenseInput dense = concat_input(model.config, input, target);
    detail::ForwardCache cache;
    detail::run_forward(model, dense, cache);

    detail::LossRequest request;
    request.lm_targets = lm_targets_for(input, target);
    request.lm_weight = 1.0;

    InputGradient grad;
    detail::LossValues values =
        detail::run_backward(model, dense, cache, request, nullptr, &grad, prefix_len);
    // the gradient buffer covers the concatenated sequence; trim to the input
    grad.seq_len = static_cast<int>(input.size());
    grad.data.resize(static_cast<size_t>(grad.seq_len) * grad.vocab);
    return {values.lm, std::move(grad)};
}

double output_loss_value(const MoeModel& model, const RelaxedTokenInput& input,
                         int input_len, const TokenSequence& target) {
    if (input_len <= 0 || input_len > static_cast<int>(input.rows.size())) {
        throw DomainError("input_len outside the relaxed sequence");
    }
    if (static_cast<int>(input.rows.size()) != input_len + static_cast<int>(target.size())) {
        throw DomainError("relaxed sequence must be input followed by target");
    }
    detail::DenseInput dense = detail::from_relaxed(model.config, input);
    detail::ForwardCache cache;
    detail::run_forward(model, dense, cache);

    detail::LossRequest request;
    for (size_t t = 0; t < target.size(); ++t) {
        request.lm_targets.emplace_back(input_len - 1 + static_cast<int>(t), target[t]);
    }
    request.lm_weight = 1.0;
    return detail::loss_from_cache(model, cache, request).lm;
}

double output_loss_value(const MoeModel& model, const TokenSequence& input,
                         const TokenSequence& target) {
    if (input.empty()) throw DomainError("empty input sequence");
    if (target.empty()) return 0.0;
    detail::DenseInput dense = concat_input(model.config, input, target);
    detail::ForwardCache cache;
    detail::run_forward(model, dense, cache);
    detail::LossRequest request;
    request.lm_targets = lm_targets_for(input, target);
    request.lm_weight = 1.0;
    return detail::loss_from_cache(model, cache, request).lm;
}

std::pair<double, InputGradient> routing_loss_and_gradient(const MoeModel& model,
                                                           const TokenSequence& input,
                                                           const RoutingScore& score,
                                                           int prefix_len,
                                                           const std::vector<int>& layers) {
    check_prefix(input, prefix_len);
    check_score(model, score);
    if (input.empty()) throw DomainError("empty input sequence");

    detail::DenseInput dense = detail::from_ids(model.config, input);
    detail::ForwardCache cache;
    detail::run_forward(model, dense, cache);

    detail::LossRequest request;
    request.route_score = &score.contrast;
    request.route_layers = layers;
    request.route_positions = static_cast<int>(input.size());
    request.route_weight = 1.0;

    InputGradient grad;
    detail::LossValues values =
        detail::run_backward(model, dense, cache, request, nullptr, &grad, prefix_len);
    return {values.route, std::move(grad)};
}

double routing_loss_value(const MoeModel& model, const RelaxedTokenInput& input,
                          const RoutingScore& score, const std::vector<int>& layers) {
    check_score(model, score);
    detail::DenseInput dense = detail::from_relaxed(model.config, input);
    detail::ForwardCache cache;
    detail::run_forward(model, dense, cache);

    detail::LossRequest request;
    request.route_score = &score.contrast;
    request.route_layers = layers;
    request.route_positions = static_cast<int>(input.rows.size());
    request.route_weight = 1.0;
    return detail::loss_from_cache(model, cache, request).route;
}

double routing_loss_value(const MoeModel& model, const TokenSequence& input,
                          const RoutingScore& score, const std::vector<int>& layers) {
    check_score(model, score);
    detail::DenseInput dense = detail::from_ids(model.config, input);
    detail::ForwardCache cache;
    detail::run_forward(model, dense, cache);

    detail::LossRequest request;
    request.route_score = &score.contrast;
    request.route_layers = layers;
    request.route_positions = static_cast<int>(input.size());
    request.route_weight = 1.0;
    return detail::loss_from_cache(model, cache, request).route;
}

JointLoss joint_loss_and_gradient(const MoeModel& model, const TokenSequence& input,
                                  const TokenSequence& target, const RoutingScore& score,
                                  double alpha, double beta, int prefix_len,
                                  const std::vector<int>& layers) {
    check_prefix(input, prefix_len);
    check_score(model, score);
    if (input.empty()) throw DomainError("empty input sequence");

    detail::DenseInput dense = concat_input(model.config, input, target);
    detail::ForwardCache cache;
    detail::run_forward(model, dense, cache);

    detail::LossRequest request;
    request.lm_targets = lm_targets_for(input, target);
    request.lm_weight = alpha;
    request.route_score = &score.contrast;
    request.route_layers = layers;
    // the routing term aggregates over the input positions only; causal
    // attention keeps those probabilities identical to a pass on the bare
    // input
    request.route_positions = static_cast<int>(input.size());
    request.route_weight = beta;

    JointLoss joint;
    detail::LossValues values = detail::run_backward(model, dense, cache, request, nullptr,
                                                     &joint.gradient, prefix_len);
    joint.total = values.total;
    joint.out = values.lm;
    joint.route = values.route;
    joint.gradient.seq_len = static_cast<int>(input.size());
    joint.gradient.data.resize(static_cast<size_t>(joint.gradient.seq_len) *
                               joint.gradient.vocab);
    return joint;
}

JointLoss joint_loss_value(const MoeModel& model, const TokenSequence& input,
                           const TokenSequence& target, const RoutingScore& score,
                           double alpha, double beta, const std::vector<int>& layers) {
    check_score(model, score);
    if (input.empty()) throw DomainError("empty input sequence");

    detail::DenseInput dense = concat_input(model.config, input, target);
    detail::ForwardCache cache;
    detail::run_forward(model, dense, cache);

    detail::LossRequest request;
    request.lm_targets = lm_targets_for(input, target);
    request.lm_weight = alpha;
    request.route_score = &score.contrast;
    request.route_layers = layers;
    request.route_positions = static_cast<int>(input.size());
    request.route_weight = beta;

    detail::LossValues values = detail::loss_from_cache(model, cache, request);
    JointLoss joint;
    joint.total = values.total;
    joint.out = values.lm;
    joint.route = values.route;
    return joint;
}

}  // namespace routelab
