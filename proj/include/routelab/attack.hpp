// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "routelab/forward.hpp"
#include "routelab/losses.hpp"
#include "routelab/model.hpp"
#include "routelab/profiling.hpp"

namespace routelab {

// Optimizable token prefix of fixed length.
struct AdversarialPrefix {
    TokenSequence tokens;
};

enum class PositionSchedule { RoundRobin, Random };

struct OptimizationConfig {
    int prefix_len = 10;
    int phase1_iters = 250;
    int phase2_iters = 250;
    double alpha = 1.0;
    double beta = 0.5;
    int candidate_pool = 32;
    int positions_per_iter = 1;
    PositionSchedule schedule = PositionSchedule::RoundRobin;
    int filler_token = 0;  // initial prefix content
    uint64_t seed = 0;
};

void validate(const OptimizationConfig& config, const ModelConfig& model_config);

enum class ObjectiveMode { OutOnly, RouteOnly, JointFromStart, Sequential, TwoPhase };

std::string to_string(ObjectiveMode mode);
ObjectiveMode objective_mode_from_string(const std::string& s);

// The active loss of one phase: exact value and input gradient for any
// candidate prefix.
struct Objective {
    std::function<double(const AdversarialPrefix&)> evaluate;
    std::function<InputGradient(const AdversarialPrefix&)> gradient;
};

struct IterationRecord {
    int iteration = 0;       // global index across phases
    double objective = 0.0;  // active loss after this iteration
    double l_out = 0.0;      // always logged, whatever the active loss is
    double l_route = 0.0;
    bool accepted = false;
    int position = -1;       // changed slot; the attempted slot when rejected
};

struct OptimizationRecord {
    ObjectiveMode mode = ObjectiveMode::TwoPhase;
    std::vector<IterationRecord> steps;
    AdversarialPrefix final_prefix;
};

// The `pool` tokens whose one-hot substitution at `position` has the most
// negative linearized loss change (gradient entry relative to the current
// token), ties to the lowest token id. The current token is appended when
// the pool does not already contain it.
std::vector<int> gradient_candidates(const InputGradient& grad, int position,
                                     int current_token, int pool);

// One greedy coordinate update: picks the scheduled position(s) for this
// iteration, ranks candidates by the objective gradient, evaluates each
// candidate exactly, and accepts the best strictly improving substitution.
// current_loss must be objective.evaluate(prefix); the updated value is
// written back. Raises OptimizationError when every candidate evaluates
// to a non-finite loss.
std::pair<AdversarialPrefix, IterationRecord> coordinate_step(
    const AdversarialPrefix& prefix, const Objective& objective,
    const OptimizationConfig& config, int iteration, double& current_loss);

// Runs the configured schedule:
//   OutOnly        T1+T2 iterations on L_out
//   RouteOnly      T1+T2 iterations on L_route
//   JointFromStart T1+T2 iterations on alpha*L_out + beta*L_route
//   Sequential     T1 on L_route, then T2 on L_out
//   TwoPhase       T1 on L_route, then T2 on alpha*L_out + beta*L_route
// The prefix starts as filler_token repeated prefix_len times and phase two
// continues from the phase-one prefix. Every iteration logs both losses.
std::pair<AdversarialPrefix, OptimizationRecord> optimize_prefix(
    const MoeModel& model, const TokenSequence& query, const TokenSequence& target,
    const RoutingScore& score, const OptimizationConfig& config, ObjectiveMode mode,
    const std::vector<int>& route_layers = {});

// CSV with one row per iteration:
// iteration,mode,active_objective,l_out,l_route,accepted,position
std::string to_csv(const OptimizationRecord& record);

// Final prefix with its configuration.
std::string to_json(const AdversarialPrefix& prefix, const OptimizationConfig& config,
                    ObjectiveMode mode);

}  // namespace routelab
