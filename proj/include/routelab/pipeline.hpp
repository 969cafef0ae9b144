// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "routelab/run_config.hpp"

namespace routelab {

// Pipeline stages, in order: gen-data, train, profile, attack, eval,
// defend. `report` merges previously written report JSON files (passed as
// extra_args) into one comparison CSV. Every stage reads its declared
// inputs from out_dir and writes its artifacts there; inputs are never
// mutated. Failures raise IoError / DomainError / CapacityError.
void run_stage(const std::string& stage, const RunConfig& config,
               const std::string& out_dir, const std::vector<std::string>& extra_args,
               bool quiet, std::ostream& log);

bool is_known_stage(const std::string& stage);

// Held-out harmful queries of the task, in topic order, optionally truncated
// to the first `limit` entries (0 keeps all).
std::vector<EvalQuery> eval_queries_for(const SyntheticTaskSpec& spec, int limit);

}  // namespace routelab
