// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "routelab/errors.hpp"
#include "routelab/model.hpp"
#include "routelab/profiling.hpp"
#include "routelab/rng.hpp"

using namespace routelab;
using test::small_config;

namespace {

ProfileDataset random_dataset(const ModelConfig& config, int items, uint64_t seed) {
    Rng rng(seed);
    ProfileDataset dataset;
    dataset.role = DatasetRole::Harm;
    for (int i = 0; i < items; ++i) {
        dataset.items.push_back(
            test::random_tokens(config, 2 + static_cast<int>(rng.next_below(6)), rng));
    }
    return dataset;
}

// plain enumeration over the whole dataset, no resampling machinery
std::vector<double> enumeration_oracle(const MoeModel& model, const ProfileDataset& dataset,
                                       AggregationMode aggregation) {
    const int n = model.config.experts_per_layer;
    std::vector<double> mean(n, 0.0);
    for (const TokenSequence& item : dataset.items) {
        const RoutingTrace trace = forward_with_trace(model, item).trace;
        std::vector<double> item_value(n, 0.0);
        if (aggregation == AggregationMode::Rate) {
            for (int l = 0; l < trace.num_layers; ++l) {
                std::vector<int> count(n, 0);
                for (int t = 0; t < trace.seq_len; ++t) {
                    for (int e : trace.selected[l][t]) ++count[e];
                }
                for (int e = 0; e < n; ++e) {
                    item_value[e] += static_cast<double>(count[e]) / trace.seq_len;
                }
            }
            for (int e = 0; e < n; ++e) item_value[e] /= trace.num_layers;
        } else {
            for (int l = 0; l < trace.num_layers; ++l) {
                for (int t = 0; t < trace.seq_len; ++t) {
                    for (int e : trace.selected[l][t]) item_value[e] = 1.0;
                }
            }
        }
        for (int e = 0; e < n; ++e) mean[e] += item_value[e];
    }
    const double inv = 1.0 / dataset.items.size();
    for (double& v : mean) v *= inv;
    return mean;
}

ActivationFrequency make_freq(std::vector<double> values, AggregationMode mode) {
    ActivationFrequency freq;
    freq.values = std::move(values);
    freq.aggregation = mode;
    freq.resamples = 1;
    freq.subset_size = 1;
    return freq;
}

}  // namespace

TEST_CASE("forced expert reaches frequency one in both aggregation modes") {
    const MoeModel model = make_model(small_config(31));
    const MoeModel forced = apply_router_bias(model, {2}, 1e7);
    const ProfileDataset dataset = random_dataset(model.config, 12, 5);
    for (AggregationMode mode : {AggregationMode::Rate, AggregationMode::BinaryAny}) {
        const ActivationFrequency freq = estimate_activation_frequency(
            forced, dataset, 4, 8, SamplingMode::WithoutReplacement, mode, 9);
        CHECK(freq.values[2] == 1.0);
    }
}

TEST_CASE("full single pass without replacement equals enumeration bitwise") {
    const MoeModel model = make_model(small_config(32));
    const ProfileDataset dataset = random_dataset(model.config, 32, 6);
    for (AggregationMode mode : {AggregationMode::Rate, AggregationMode::BinaryAny}) {
        const std::vector<double> oracle = enumeration_oracle(model, dataset, mode);
        for (uint64_t seed : {0ULL, 1ULL, 12345ULL}) {
            const ActivationFrequency freq = estimate_activation_frequency(
                model, dataset, 1, static_cast<int>(dataset.items.size()),
                SamplingMode::WithoutReplacement, mode, seed);
            CHECK(freq.values == oracle);
        }
    }
}

TEST_CASE("rate-mode frequencies sum to top_k") {
    const MoeModel model = make_model(small_config(33));
    const ProfileDataset dataset = random_dataset(model.config, 20, 7);
    const ActivationFrequency freq = estimate_activation_frequency(
        model, dataset, 6, 10, SamplingMode::WithReplacement, AggregationMode::Rate, 3);
    const double sum = std::accumulate(freq.values.begin(), freq.values.end(), 0.0);
    CHECK(sum == doctest::Approx(model.config.top_k).epsilon(1e-9));
    // per profiled layer as well
    for (const auto& layer : freq.per_layer) {
        const double layer_sum = std::accumulate(layer.begin(), layer.end(), 0.0);
        CHECK(layer_sum == doctest::Approx(model.config.top_k).epsilon(1e-9));
    }
    for (double v : freq.values) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("estimation preconditions") {
    const MoeModel model = make_model(small_config());
    const ProfileDataset dataset = random_dataset(model.config, 4, 8);
    CHECK_THROWS_AS(estimate_activation_frequency(model, dataset, 1, 5,
                                                  SamplingMode::WithoutReplacement,
                                                  AggregationMode::Rate, 1),
                    DomainError);
    CHECK_NOTHROW(estimate_activation_frequency(
        model, dataset, 1, 5, SamplingMode::WithReplacement, AggregationMode::Rate, 1));
    CHECK_THROWS_AS(estimate_activation_frequency(model, {DatasetRole::Harm, {}}, 1, 1,
                                                  SamplingMode::WithoutReplacement,
                                                  AggregationMode::Rate, 1),
                    DomainError);
    CHECK_THROWS_AS(estimate_activation_frequency(model, dataset, 0, 2,
                                                  SamplingMode::WithoutReplacement,
                                                  AggregationMode::Rate, 1),
                    DomainError);
}

TEST_CASE("estimation is deterministic in the seed") {
    const MoeModel model = make_model(small_config(34));
    const ProfileDataset dataset = random_dataset(model.config, 16, 9);
    const ActivationFrequency a = estimate_activation_frequency(
        model, dataset, 5, 6, SamplingMode::WithReplacement, AggregationMode::Rate, 42);
    const ActivationFrequency b = estimate_activation_frequency(
        model, dataset, 5, 6, SamplingMode::WithReplacement, AggregationMode::Rate, 42);
    CHECK(a.values == b.values);
}

TEST_CASE("routing score formula on hand-evaluated values") {
    // lambda = (1.0, 0.5, 0.5): 1.0*0.8 - 0.5*0.2 - 0.5*0.4 = 0.5
    const auto harm = make_freq({0.8}, AggregationMode::Rate);
    const auto comp = make_freq({0.2}, AggregationMode::Rate);
    const auto benign = make_freq({0.4}, AggregationMode::Rate);
    const RoutingScore score = compute_routing_score(harm, comp, benign, 1.0, 0.5, 0.5);
    CHECK(score.contrast[0] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("equal frequencies with balanced lambdas cancel") {
    const auto u = make_freq({0.3, 0.7, 0.1}, AggregationMode::Rate);
    const RoutingScore score = compute_routing_score(u, u, u, 1.0, 0.6, 0.4);
    for (double v : score.contrast) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("routing score matches an elementwise oracle on random vectors") {
    Rng rng(55);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 2 + static_cast<int>(rng.next_below(6));
        std::vector<double> h(n), c(n), b(n);
        for (int i = 0; i < n; ++i) {
            h[i] = rng.next_double();
            c[i] = rng.next_double();
            b[i] = rng.next_double();
        }
        const double l1 = 0.1 + rng.next_double();
        const double l2 = 0.1 + rng.next_double();
        const double l3 = 0.1 + rng.next_double();
        const RoutingScore score =
            compute_routing_score(make_freq(h, AggregationMode::Rate),
                                  make_freq(c, AggregationMode::Rate),
                                  make_freq(b, AggregationMode::Rate), l1, l2, l3);
        for (int i = 0; i < n; ++i) {
            const double expect = l1 * h[i] - l2 * c[i] - l3 * b[i];
            CHECK(score.contrast[i] == doctest::Approx(expect).epsilon(1e-12));
        }
    }
}

TEST_CASE("score linearity: scaling all frequencies scales the contrast") {
    const std::vector<double> h{0.5, 0.25}, c{0.125, 0.5}, b{0.25, 0.125};
    const double alpha = 0.5;  // power of two keeps the scaling exact
    auto scale = [&](std::vector<double> v) {
        for (double& x : v) x *= alpha;
        return v;
    };
    const RoutingScore base = compute_routing_score(
        make_freq(h, AggregationMode::Rate), make_freq(c, AggregationMode::Rate),
        make_freq(b, AggregationMode::Rate), 1.0, 0.5, 0.5);
    const RoutingScore scaled = compute_routing_score(
        make_freq(scale(h), AggregationMode::Rate), make_freq(scale(c), AggregationMode::Rate),
        make_freq(scale(b), AggregationMode::Rate), 1.0, 0.5, 0.5);
    for (size_t i = 0; i < base.contrast.size(); ++i) {
        CHECK(scaled.contrast[i] == alpha * base.contrast[i]);
    }
}

TEST_CASE("routing score validation") {
    const auto u3 = make_freq({0.1, 0.2, 0.3}, AggregationMode::Rate);
    const auto u2 = make_freq({0.1, 0.2}, AggregationMode::Rate);
    const auto u3b = make_freq({0.1, 0.2, 0.3}, AggregationMode::BinaryAny);
    CHECK_THROWS_AS(compute_routing_score(u3, u2, u3, 1, 0.5, 0.5), DomainError);
    CHECK_THROWS_AS(compute_routing_score(u3, u3b, u3, 1, 0.5, 0.5), DomainError);
    CHECK_THROWS_AS(compute_routing_score(u3, u3, u3, 1, 0.0, 0.5), DomainError);
    CHECK_THROWS_AS(compute_routing_score(u3, u3, u3, -1, 0.5, 0.5), DomainError);
}

TEST_CASE("expert set derivation: order, ties, disjointness") {
    RoutingScore score;
    score.contrast = {3.0, 1.0, 2.0};
    {
        auto [sup, pro] = derive_expert_sets(score, 1, 0);
        CHECK(sup == std::vector<int>{0});
        CHECK(pro.empty());
    }
    {
        auto [sup, pro] = derive_expert_sets(score, 0, 1);
        CHECK(pro == std::vector<int>{1});
    }
    {
        RoutingScore tied;
        tied.contrast = {1.0, 1.0};
        auto [sup, pro] = derive_expert_sets(tied, 1, 0);
        CHECK(sup == std::vector<int>{0});  // tie resolves to the lowest index
        auto [sup2, pro2] = derive_expert_sets(tied, 1, 1);
        CHECK(sup2 == std::vector<int>{0});
        CHECK(pro2 == std::vector<int>{1});  // promoted avoids the suppressed pick
    }
    CHECK_THROWS_AS(derive_expert_sets(score, 2, 2), DomainError);
}

TEST_CASE("set sizes and disjointness on random scores") {
    Rng rng(66);
    for (int trial = 0; trial < 30; ++trial) {
        const int n = 3 + static_cast<int>(rng.next_below(8));
        RoutingScore score;
        score.contrast.resize(n);
        for (double& v : score.contrast) {
            v = rng.next_double();
            if (rng.next_below(3) == 0) v = 0.5;  // inject ties
        }
        const int k_sup = static_cast<int>(rng.next_below(n + 1));
        const int k_pro = static_cast<int>(rng.next_below(n - k_sup + 1));
        auto [sup, pro] = derive_expert_sets(score, k_sup, k_pro);
        CHECK(sup.size() == static_cast<size_t>(k_sup));
        CHECK(pro.size() == static_cast<size_t>(k_pro));
        for (int e : sup) {
            CHECK(std::find(pro.begin(), pro.end(), e) == pro.end());
        }
    }
}

TEST_CASE("activation frequency and routing score survive JSON round trips") {
    const MoeModel model = make_model(small_config(35));
    const ProfileDataset dataset = random_dataset(model.config, 10, 11);
    const ActivationFrequency freq = estimate_activation_frequency(
        model, dataset, 3, 5, SamplingMode::WithoutReplacement, AggregationMode::Rate, 21);
    const ActivationFrequency parsed = activation_frequency_from_json(to_json(freq));
    CHECK(parsed.values == freq.values);
    CHECK(parsed.per_layer == freq.per_layer);
    CHECK(parsed.resamples == freq.resamples);
    CHECK(parsed.subset_size == freq.subset_size);
    CHECK(parsed.sampling == freq.sampling);
    CHECK(parsed.aggregation == freq.aggregation);

    RoutingScore score;
    score.contrast = {0.25, -0.5, 0.125};
    score.suppressed = {0};
    score.promoted = {1};
    const RoutingScore back = routing_score_from_json(to_json(score));
    CHECK(back.contrast == score.contrast);
    CHECK(back.suppressed == score.suppressed);
    CHECK(back.promoted == score.promoted);
}
