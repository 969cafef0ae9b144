// SPDX-License-Identifier: Apache-2.0
#include "routelab/profiling.hpp"

#include <algorithm>
#include <numeric>

#include <json.hpp>

#include "routelab/errors.hpp"
#include "routelab/rng.hpp"

namespace routelab {

std::string to_string(DatasetRole role) {
    switch (role) {
        case DatasetRole::Harm: return "harm";
        case DatasetRole::Comp: return "comp";
        case DatasetRole::Benign: return "benign";
    }
    return "?";
}

std::string to_string(SamplingMode mode) {
    return mode == SamplingMode::WithoutReplacement ? "without_replacement"
                                                    : "with_replacement";
}

std::string to_string(AggregationMode mode) {
    return mode == AggregationMode::Rate ? "rate" : "binary_any";
}

namespace {

DatasetRole role_from_string(const std::string& s) {
    if (s == "harm") return DatasetRole::Harm;
    if (s == "comp") return DatasetRole::Comp;
    if (s == "benign") return DatasetRole::Benign;
    throw DomainError("unknown dataset role: " + s);
}

SamplingMode sampling_from_string(const std::string& s) {
    if (s == "without_replacement") return SamplingMode::WithoutReplacement;
    if (s == "with_replacement") return SamplingMode::WithReplacement;
    throw DomainError("unknown sampling mode: " + s);
}

AggregationMode aggregation_from_string(const std::string& s) {
    if (s == "rate") return AggregationMode::Rate;
    if (s == "binary_any") return AggregationMode::BinaryAny;
    throw DomainError("unknown aggregation mode: " + s);
}

// Per-input activation: pooled vector plus one vector per profiled layer.
struct ItemActivation {
    std::vector<double> pooled;
    std::vector<std::vector<double>> per_layer;
};

ItemActivation activation_for_item(const MoeModel& model, const TokenSequence& item,
                                   const std::vector<int>& layers,
                                   AggregationMode aggregation) {
    const int n = model.config.experts_per_layer;
    const RoutingTrace trace = forward_with_trace(model, item).trace;

    ItemActivation act;
    act.pooled.assign(n, 0.0);
    act.per_layer.assign(layers.size(), std::vector<double>(n, 0.0));

    for (size_t li = 0; li < layers.size(); ++li) {
        const int l = layers[li];
        // integer selection counts per expert within this layer
        std::vector<int> count(n, 0);
        for (int t = 0; t < trace.seq_len; ++t) {
            for (int e : trace.selected[l][t]) ++count[e];
        }
        for (int e = 0; e < n; ++e) {
            if (aggregation == AggregationMode::Rate) {
                act.per_layer[li][e] = static_cast<double>(count[e]) / trace.seq_len;
            } else {
                act.per_layer[li][e] = count[e] > 0 ? 1.0 : 0.0;
            }
        }
    }

    if (aggregation == AggregationMode::Rate) {
        for (int e = 0; e < n; ++e) {
            double sum = 0.0;
            for (size_t li = 0; li < layers.size(); ++li) sum += act.per_layer[li][e];
            act.pooled[e] = sum / static_cast<double>(layers.size());
        }
    } else {
        // selected anywhere across the profiled layers
        for (int e = 0; e < n; ++e) {
            double any = 0.0;
            for (size_t li = 0; li < layers.size(); ++li) {
                if (act.per_layer[li][e] > 0.0) any = 1.0;
            }
            act.pooled[e] = any;
        }
    }
    return act;
}

}  // namespace

ActivationFrequency estimate_activation_frequency(const MoeModel& model,
                                                  const ProfileDataset& dataset,
                                                  int resamples, int subset_size,
                                                  SamplingMode sampling,
                                                  AggregationMode aggregation,
                                                  uint64_t seed,
                                                  const std::vector<int>& layers) {
    const size_t n_items = dataset.items.size();
    if (n_items == 0) throw DomainError("profiling dataset is empty");
    if (resamples < 1) throw DomainError("resample count must be >= 1");
    if (subset_size < 1) throw DomainError("subset size must be >= 1");
    if (sampling == SamplingMode::WithoutReplacement &&
        static_cast<size_t>(subset_size) > n_items) {
        throw DomainError("subset size exceeds dataset size when sampling without replacement");
    }

    std::vector<int> profiled = layers;
    if (profiled.empty()) {
        profiled.resize(model.config.num_layers);
        std::iota(profiled.begin(), profiled.end(), 0);
    }
    for (int l : profiled) {
        if (l < 0 || l >= model.config.num_layers) {
            throw DomainError("profiled layer index out of range: " + std::to_string(l));
        }
    }

    const int n = model.config.experts_per_layer;

    // traces are reused across resamples, so compute each item at most once
    std::vector<ItemActivation> item_cache(n_items);
    std::vector<bool> cached(n_items, false);
    auto item_activation = [&](size_t idx) -> const ItemActivation& {
        if (!cached[idx]) {
            item_cache[idx] =
                activation_for_item(model, dataset.items[idx], profiled, aggregation);
            cached[idx] = true;
        }
        return item_cache[idx];
    };

    Rng rng(derive_seed(seed, 0x70726f66));
    std::vector<double> pooled_mean(n, 0.0);
    std::vector<std::vector<double>> layer_mean(profiled.size(),
                                                std::vector<double>(n, 0.0));

    for (int s = 0; s < resamples; ++s) {
        std::vector<size_t> chosen;
        chosen.reserve(subset_size);
        if (sampling == SamplingMode::WithoutReplacement) {
            std::vector<size_t> pool(n_items);
            std::iota(pool.begin(), pool.end(), size_t{0});
            rng.shuffle(pool);
            chosen.assign(pool.begin(), pool.begin() + subset_size);
        } else {
            for (int i = 0; i < subset_size; ++i) {
                chosen.push_back(static_cast<size_t>(rng.next_below(n_items)));
            }
        }
        // ascending order fixes the floating-point reduction order
        std::sort(chosen.begin(), chosen.end());

        std::vector<double> pooled(n, 0.0);
        std::vector<std::vector<double>> per_layer(profiled.size(),
                                                   std::vector<double>(n, 0.0));
        for (size_t idx : chosen) {
            const ItemActivation& act = item_activation(idx);
            for (int e = 0; e < n; ++e) pooled[e] += act.pooled[e];
            for (size_t li = 0; li < profiled.size(); ++li) {
                for (int e = 0; e < n; ++e) per_layer[li][e] += act.per_layer[li][e];
            }
        }
        const double inv_m = 1.0 / subset_size;
        for (int e = 0; e < n; ++e) pooled_mean[e] += pooled[e] * inv_m;
        for (size_t li = 0; li < profiled.size(); ++li) {
            for (int e = 0; e < n; ++e) layer_mean[li][e] += per_layer[li][e] * inv_m;
        }
    }

    ActivationFrequency freq;
    const double inv_s = 1.0 / resamples;
    freq.values.assign(n, 0.0);
    for (int e = 0; e < n; ++e) freq.values[e] = pooled_mean[e] * inv_s;
    freq.per_layer.assign(profiled.size(), std::vector<double>(n, 0.0));
    for (size_t li = 0; li < profiled.size(); ++li) {
        for (int e = 0; e < n; ++e) freq.per_layer[li][e] = layer_mean[li][e] * inv_s;
    }
    freq.layers = profiled;
    freq.resamples = resamples;
    freq.subset_size = subset_size;
    freq.sampling = sampling;
    freq.aggregation = aggregation;
    freq.role = dataset.role;
    return freq;
}

RoutingScore compute_routing_score(const ActivationFrequency& harm,
                                   const ActivationFrequency& comp,
                                   const ActivationFrequency& benign, double lambda_harm,
                                   double lambda_comp, double lambda_benign) {
    if (!(lambda_harm > 0.0) || !(lambda_comp > 0.0) || !(lambda_benign > 0.0)) {
        throw DomainError("routing score lambdas must be > 0");
    }
    const size_t n = harm.values.size();
    if (comp.values.size() != n || benign.values.size() != n) {
        throw DomainError("activation frequency dimensions do not match");
    }
    if (harm.aggregation != comp.aggregation || harm.aggregation != benign.aggregation) {
        throw DomainError("activation frequency aggregation modes do not match");
    }
    RoutingScore score;
    score.lambda_harm = lambda_harm;
    score.lambda_comp = lambda_comp;
    score.lambda_benign = lambda_benign;
    score.contrast.resize(n);
    for (size_t e = 0; e < n; ++e) {
        score.contrast[e] = lambda_harm * harm.values[e] - lambda_comp * comp.values[e] -
                            lambda_benign * benign.values[e];
    }
    return score;
}

std::pair<std::vector<int>, std::vector<int>> derive_expert_sets(const RoutingScore& score,
                                                                 int k_sup, int k_pro) {
    const int n = static_cast<int>(score.contrast.size());
    if (k_sup < 0 || k_pro < 0 || k_sup + k_pro > n) {
        throw DomainError("k_sup + k_pro must not exceed the expert count");
    }
    const std::vector<double>& d = score.contrast;

    std::vector<int> by_desc(n);
    std::iota(by_desc.begin(), by_desc.end(), 0);
    std::stable_sort(by_desc.begin(), by_desc.end(),
                     [&](int a, int b) { return d[a] != d[b] ? d[a] > d[b] : a < b; });
    std::vector<int> suppressed(by_desc.begin(), by_desc.begin() + k_sup);
    std::sort(suppressed.begin(), suppressed.end());

    std::vector<bool> taken(n, false);
    for (int e : suppressed) taken[e] = true;

    std::vector<int> by_asc(n);
    std::iota(by_asc.begin(), by_asc.end(), 0);
    std::stable_sort(by_asc.begin(), by_asc.end(),
                     [&](int a, int b) { return d[a] != d[b] ? d[a] < d[b] : a < b; });
    std::vector<int> promoted;
    promoted.reserve(k_pro);
    for (int e : by_asc) {
        if (static_cast<int>(promoted.size()) == k_pro) break;
        if (!taken[e]) promoted.push_back(e);
    }
    std::sort(promoted.begin(), promoted.end());
    return {suppressed, promoted};
}

std::string to_json(const ActivationFrequency& freq) {
    nlohmann::json j{{"values", freq.values},
                     {"per_layer", freq.per_layer},
                     {"layers", freq.layers},
                     {"resamples", freq.resamples},
                     {"subset_size", freq.subset_size},
                     {"sampling", to_string(freq.sampling)},
                     {"aggregation", to_string(freq.aggregation)},
                     {"role", to_string(freq.role)}};
    return j.dump(2);
}

ActivationFrequency activation_frequency_from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    ActivationFrequency freq;
    freq.values = j.at("values").get<std::vector<double>>();
    freq.per_layer = j.at("per_layer").get<std::vector<std::vector<double>>>();
    freq.layers = j.at("layers").get<std::vector<int>>();
    freq.resamples = j.at("resamples").get<int>();
    freq.subset_size = j.at("subset_size").get<int>();
    freq.sampling = sampling_from_string(j.at("sampling").get<std::string>());
    freq.aggregation = aggregation_from_string(j.at("aggregation").get<std::string>());
    freq.role = role_from_string(j.at("role").get<std::string>());
    return freq;
}

std::string to_json(const RoutingScore& score) {
    nlohmann::json j{{"contrast", score.contrast},
                     {"lambda_harm", score.lambda_harm},
                     {"lambda_comp", score.lambda_comp},
                     {"lambda_benign", score.lambda_benign},
                     {"suppressed", score.suppressed},
                     {"promoted", score.promoted}};
    return j.dump(2);
}

RoutingScore routing_score_from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    RoutingScore score;
    score.contrast = j.at("contrast").get<std::vector<double>>();
    score.lambda_harm = j.at("lambda_harm").get<double>();
    score.lambda_comp = j.at("lambda_comp").get<double>();
    score.lambda_benign = j.at("lambda_benign").get<double>();
    score.suppressed = j.at("suppressed").get<std::vector<int>>();
    score.promoted = j.at("promoted").get<std::vector<int>>();
    return score;
}

}  // namespace routelab
