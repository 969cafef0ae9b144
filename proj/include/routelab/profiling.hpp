// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "routelab/forward.hpp"
#include "routelab/model.hpp"

namespace routelab {

enum class DatasetRole { Harm, Comp, Benign };

std::string to_string(DatasetRole role);

struct ProfileDataset {
    DatasetRole role = DatasetRole::Harm;
    std::vector<TokenSequence> items;
};

enum class SamplingMode { WithoutReplacement, WithReplacement };
enum class AggregationMode {
    // per input: selection indicators averaged over positions and profiled
    // layers, so the frequencies of one input sum to top_k
    Rate,
    // per input: 1 if the expert is selected anywhere in the profiled
    // layers, 0 otherwise
    BinaryAny,
};

std::string to_string(SamplingMode mode);
std::string to_string(AggregationMode mode);

// Resampled per-expert activation frequencies for one dataset.
struct ActivationFrequency {
    std::vector<double> values;                  // pooled, one entry per expert
    std::vector<std::vector<double>> per_layer;  // [profiled layer][expert]
    std::vector<int> layers;                     // profiled layer indices
    int resamples = 0;                           // S
    int subset_size = 0;                         // m
    SamplingMode sampling = SamplingMode::WithoutReplacement;
    AggregationMode aggregation = AggregationMode::Rate;
    DatasetRole role = DatasetRole::Harm;
};

// Runs `resamples` subsets of `subset_size` items each, collects routing
// traces, and averages per-input activation over the subset and then over
// the resamples. Accumulation follows ascending item order so that a single
// full-dataset pass without replacement reproduces plain enumeration
// bit for bit, independent of the seed. `layers` empty profiles all layers.
ActivationFrequency estimate_activation_frequency(const MoeModel& model,
                                                  const ProfileDataset& dataset,
                                                  int resamples, int subset_size,
                                                  SamplingMode sampling,
                                                  AggregationMode aggregation,
                                                  uint64_t seed,
                                                  const std::vector<int>& layers = {});

// Signed per-expert preference: positive entries mark experts to steer away
// from, negative entries mark experts to steer toward.
struct RoutingScore {
    std::vector<double> contrast;  // one entry per expert
    double lambda_harm = 1.0;
    double lambda_comp = 0.5;
    double lambda_benign = 0.5;
    std::vector<int> suppressed;  // optional, filled by derive_expert_sets
    std::vector<int> promoted;
};

// contrast[i] = lambda_harm * harm[i] - lambda_comp * comp[i]
//             - lambda_benign * benign[i].
// The three frequency vectors must share dimension and aggregation mode;
// all lambdas must be > 0.
RoutingScore compute_routing_score(const ActivationFrequency& harm,
                                   const ActivationFrequency& comp,
                                   const ActivationFrequency& benign, double lambda_harm,
                                   double lambda_comp, double lambda_benign);

// suppressed = the k_sup largest contrast entries, promoted = the k_pro
// smallest, ties to the lowest index. The promoted set is drawn from the
// experts left after removing the suppressed set, which keeps the two sets
// disjoint even under ties.
std::pair<std::vector<int>, std::vector<int>> derive_expert_sets(const RoutingScore& score,
                                                                 int k_sup, int k_pro);

// JSON (de)serialization for reuse across CLI invocations.
std::string to_json(const ActivationFrequency& freq);
ActivationFrequency activation_frequency_from_json(const std::string& text);
std::string to_json(const RoutingScore& score);
RoutingScore routing_score_from_json(const std::string& text);

}  // namespace routelab
