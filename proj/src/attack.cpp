// SPDX-License-Identifier: Apache-2.0
#include "routelab/attack.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "routelab/errors.hpp"
#include "routelab/rng.hpp"

namespace routelab {

void validate(const OptimizationConfig& config, const ModelConfig& model_config) {
    if (config.prefix_len < 1) throw DomainError("prefix_len must be >= 1");
    if (config.phase1_iters < 0 || config.phase2_iters < 0) {
        throw DomainError("iteration counts must be >= 0");
    }
    if (!(config.alpha > 0.0)) throw DomainError("alpha must be > 0");
    if (!(config.beta >= 0.0)) throw DomainError("beta must be >= 0");
    if (config.candidate_pool < 1 || config.candidate_pool > model_config.vocab_size) {
        throw DomainError("candidate_pool must be in [1, vocab_size]");
    }
    if (config.positions_per_iter < 1 || config.positions_per_iter > config.prefix_len) {
        throw DomainError("positions_per_iter must be in [1, prefix_len]");
    }
    if (config.filler_token < 0 || config.filler_token >= model_config.vocab_size) {
        throw DomainError("filler_token out of vocabulary range");
    }
}

std::string to_string(ObjectiveMode mode) {
    switch (mode) {
        case ObjectiveMode::OutOnly: return "out_only";
        case ObjectiveMode::RouteOnly: return "route_only";
        case ObjectiveMode::JointFromStart: return "joint_from_start";
        case ObjectiveMode::Sequential: return "sequential";
        case ObjectiveMode::TwoPhase: return "two_phase";
    }
    return "?";
}

ObjectiveMode objective_mode_from_string(const std::string& s) {
    if (s == "out_only") return ObjectiveMode::OutOnly;
    if (s == "route_only") return ObjectiveMode::RouteOnly;
    if (s == "joint_from_start") return ObjectiveMode::JointFromStart;
    if (s == "sequential") return ObjectiveMode::Sequential;
    if (s == "two_phase") return ObjectiveMode::TwoPhase;
    throw DomainError("unknown objective mode: " + s);
}

std::vector<int> gradient_candidates(const InputGradient& grad, int position,
                                     int current_token, int pool) {
    if (position < 0 || position >= grad.seq_len) {
        throw DomainError("candidate position outside the gradient rows");
    }
    if (pool < 1 || pool > grad.vocab) throw DomainError("candidate pool out of range");
    if (current_token < 0 || current_token >= grad.vocab) {
        throw DomainError("current token out of vocabulary range");
    }
    // ranking by the raw gradient entry orders tokens by linearized change,
    // since the current token's entry is a shared constant offset
    std::vector<int> order(grad.vocab);
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + pool, order.end(), [&](int a, int b) {
        const double ga = grad.at(position, a);
        const double gb = grad.at(position, b);
        return ga != gb ? ga < gb : a < b;
    });
    order.resize(pool);
    if (std::find(order.begin(), order.end(), current_token) == order.end()) {
        order.push_back(current_token);
    }
    return order;
}

namespace {

std::vector<int> positions_for_iteration(const OptimizationConfig& config, int iteration) {
    std::vector<int> positions;
    positions.reserve(config.positions_per_iter);
    if (config.schedule == PositionSchedule::RoundRobin) {
        const long base = static_cast<long>(iteration) * config.positions_per_iter;
        for (int j = 0; j < config.positions_per_iter; ++j) {
            positions.push_back(static_cast<int>((base + j) % config.prefix_len));
        }
    } else {
        Rng rng(derive_seed(config.seed, 0x706f73 + static_cast<uint64_t>(iteration)));
        for (int j = 0; j < config.positions_per_iter; ++j) {
            positions.push_back(static_cast<int>(rng.next_below(config.prefix_len)));
        }
    }
    return positions;
}

}  // namespace

std::pair<AdversarialPrefix, IterationRecord> coordinate_step(
    const AdversarialPrefix& prefix, const Objective& objective,
    const OptimizationConfig& config, int iteration, double& current_loss) {
    const std::vector<int> positions = positions_for_iteration(config, iteration);
    const InputGradient grad = objective.gradient(prefix);

    IterationRecord record;
    record.iteration = iteration;
    record.position = positions.front();

    // best candidate across the attempted positions: lowest loss, then
    // lowest position, then lowest token id
    double best_loss = std::numeric_limits<double>::infinity();
    int best_position = -1;
    int best_token = -1;
    bool any_finite = false;
    int evaluated = 0;

    for (int position : positions) {
        const int current_token = prefix.tokens[position];
        const std::vector<int> candidates =
            gradient_candidates(grad, position, current_token, config.candidate_pool);
        for (int token : candidates) {
            if (token == current_token) {
                // the current prefix is already priced at current_loss
                any_finite = any_finite || std::isfinite(current_loss);
                continue;
            }
            AdversarialPrefix candidate = prefix;
            candidate.tokens[position] = token;
            const double loss = objective.evaluate(candidate);
            ++evaluated;
            if (std::isfinite(loss)) any_finite = true;
            if (loss < best_loss ||
                (loss == best_loss &&
                 (position < best_position ||
                  (position == best_position && token < best_token)))) {
                best_loss = loss;
                best_position = position;
                best_token = token;
            }
        }
    }

    if (evaluated > 0 && !any_finite) {
        throw OptimizationError("all candidate losses are non-finite");
    }

    AdversarialPrefix next = prefix;
    if (best_token >= 0 && best_loss < current_loss) {
        next.tokens[best_position] = best_token;
        current_loss = best_loss;
        record.accepted = true;
        record.position = best_position;
    }
    record.objective = current_loss;
    return {next, record};
}

namespace {

struct Phase {
    int iters;
    enum class Kind { Out, Route, Joint } kind;
};

std::vector<Phase> phases_for(ObjectiveMode mode, const OptimizationConfig& config) {
    using Kind = Phase::Kind;
    const int total = config.phase1_iters + config.phase2_iters;
    switch (mode) {
        case ObjectiveMode::OutOnly: return {{total, Kind::Out}};
        case ObjectiveMode::RouteOnly: return {{total, Kind::Route}};
        case ObjectiveMode::JointFromStart: return {{total, Kind::Joint}};
        case ObjectiveMode::Sequential:
            return {{config.phase1_iters, Kind::Route}, {config.phase2_iters, Kind::Out}};
        case ObjectiveMode::TwoPhase:
            return {{config.phase1_iters, Kind::Route}, {config.phase2_iters, Kind::Joint}};
    }
    throw DomainError("unknown objective mode");
}

}  // namespace

std::pair<AdversarialPrefix, OptimizationRecord> optimize_prefix(
    const MoeModel& model, const TokenSequence& query, const TokenSequence& target,
    const RoutingScore& score, const OptimizationConfig& config, ObjectiveMode mode,
    const std::vector<int>& route_layers) {
    validate(config, model.config);
    if (query.empty()) throw DomainError("query must be non-empty");
    if (target.empty() && mode != ObjectiveMode::RouteOnly) {
        throw DomainError("target must be non-empty for modes that involve the output loss");
    }
    const int total_len = config.prefix_len + static_cast<int>(query.size()) +
                          static_cast<int>(target.size());
    if (total_len > model.config.max_seq_len) {
        throw CapacityError("prefix + query + target exceeds max_seq_len");
    }

    auto with_query = [&](const AdversarialPrefix& p) {
        TokenSequence seq = p.tokens;
        seq.insert(seq.end(), query.begin(), query.end());
        return seq;
    };

    Objective out_objective{
        [&](const AdversarialPrefix& p) {
            return output_loss_value(model, with_query(p), target);
        },
        [&](const AdversarialPrefix& p) {
            return output_loss_and_gradient(model, with_query(p), target, config.prefix_len)
                .second;
        }};
    Objective route_objective{
        [&](const AdversarialPrefix& p) {
            return routing_loss_value(model, with_query(p), score, route_layers);
        },
        [&](const AdversarialPrefix& p) {
            return routing_loss_and_gradient(model, with_query(p), score, config.prefix_len,
                                             route_layers)
                .second;
        }};
    Objective joint_objective{
        [&](const AdversarialPrefix& p) {
            return joint_loss_value(model, with_query(p), target, score, config.alpha,
                                    config.beta, route_layers)
                .total;
        },
        [&](const AdversarialPrefix& p) {
            return joint_loss_and_gradient(model, with_query(p), target, score, config.alpha,
                                           config.beta, config.prefix_len, route_layers)
                .gradient;
        }};

    AdversarialPrefix prefix;
    prefix.tokens.assign(config.prefix_len, config.filler_token);

    OptimizationRecord record;
    record.mode = mode;
    record.steps.reserve(config.phase1_iters + config.phase2_iters);

    int iteration = 0;
    for (const Phase& phase : phases_for(mode, config)) {
        const Objective& objective = phase.kind == Phase::Kind::Out    ? out_objective
                                     : phase.kind == Phase::Kind::Route ? route_objective
                                                                        : joint_objective;
        double current = objective.evaluate(prefix);
        for (int i = 0; i < phase.iters; ++i, ++iteration) {
            auto [next, step] = coordinate_step(prefix, objective, config, iteration, current);
            prefix = std::move(next);
            // log both loss components for the post-step prefix
            const JointLoss both = joint_loss_value(model, with_query(prefix), target, score,
                                                    1.0, 1.0, route_layers);
            step.l_out = both.out;
            step.l_route = both.route;
            record.steps.push_back(step);
        }
    }

    record.final_prefix = prefix;
    return {prefix, record};
}

std::string to_csv(const OptimizationRecord& record) {
    std::ostringstream out;
    out.precision(17);
    out << "iteration,mode,active_objective,l_out,l_route,accepted,position\n";
    for (const IterationRecord& step : record.steps) {
        out << step.iteration << ',' << to_string(record.mode) << ',' << step.objective
            << ',' << step.l_out << ',' << step.l_route << ','
            << (step.accepted ? 1 : 0) << ',' << step.position << '\n';
    }
    return out.str();
}

std::string to_json(const AdversarialPrefix& prefix, const OptimizationConfig& config,
                    ObjectiveMode mode) {
    nlohmann::json j{
        {"tokens", prefix.tokens},
        {"mode", to_string(mode)},
        {"config",
         {{"prefix_len", config.prefix_len},
          {"phase1_iters", config.phase1_iters},
          {"phase2_iters", config.phase2_iters},
          {"alpha", config.alpha},
          {"beta", config.beta},
          {"candidate_pool", config.candidate_pool},
          {"positions_per_iter", config.positions_per_iter},
          {"schedule",
           config.schedule == PositionSchedule::RoundRobin ? "round_robin" : "random"},
          {"filler_token", config.filler_token},
          {"seed", config.seed}}}};
    return j.dump(2);
}

}  // namespace routelab
