// SPDX-License-Identifier: Apache-2.0
//
// Shared test utilities: small model builders and independent oracles.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "routelab/forward.hpp"
#include "routelab/model.hpp"
#include "routelab/rng.hpp"

namespace routelab::test {

inline ModelConfig small_config(uint64_t seed = 3) {
    ModelConfig c;
    c.vocab_size = 16;
    c.embed_dim = 8;
    c.num_layers = 2;
    c.experts_per_layer = 4;
    c.top_k = 2;
    c.shared_experts = 1;
    c.expert_hidden_dim = 12;
    c.attention_heads = 2;
    c.max_seq_len = 16;
    c.init_seed = seed;
    return c;
}

inline TokenSequence random_tokens(const ModelConfig& config, int len, Rng& rng) {
    TokenSequence seq(len);
    for (int i = 0; i < len; ++i) {
        seq[i] = static_cast<int>(rng.next_below(config.vocab_size));
    }
    return seq;
}

// Independent dense-mixture oracle for one MoE block: softmax over the raw
// router logits, full weighted sum over every expert, plus the shared
// experts. Valid comparison point whenever top_k == experts_per_layer and
// the router bias is zero.
inline std::vector<double> dense_mixture_oracle(const MoeModel& model, int layer,
                                                const std::vector<double>& block_input) {
    const ModelConfig& c = model.config;
    const ParamLayout layout(c);
    const int d = c.embed_dim;
    const int h = c.expert_hidden_dim;
    const int n = c.experts_per_layer;

    auto apply_mat = [&](size_t base, const std::vector<double>& x, int out,
                         int in) {
        std::vector<double> y(out, 0.0);
        for (int o = 0; o < out; ++o) {
            for (int i = 0; i < in; ++i) {
                y[o] += model.parameters[base + static_cast<size_t>(o) * in + i] * x[i];
            }
        }
        return y;
    };
    auto expert_output = [&](size_t w1, size_t w2) {
        std::vector<double> hidden = apply_mat(w1, block_input, h, d);
        for (double& v : hidden) v = std::max(v, 0.0);
        return apply_mat(w2, hidden, d, h);
    };

    std::vector<double> logits = apply_mat(layout.router_w(layer), block_input, n, d);
    const double zmax = *std::max_element(logits.begin(), logits.end());
    std::vector<double> probs(n);
    double sum = 0.0;
    for (int e = 0; e < n; ++e) {
        probs[e] = std::exp(logits[e] - zmax);
        sum += probs[e];
    }
    for (double& p : probs) p /= sum;

    std::vector<double> out(d, 0.0);
    for (int e = 0; e < n; ++e) {
        const std::vector<double> eo =
            expert_output(layout.expert_w1(layer, e), layout.expert_w2(layer, e));
        for (int i = 0; i < d; ++i) out[i] += probs[e] * eo[i];
    }
    for (int s = 0; s < c.shared_experts; ++s) {
        const std::vector<double> eo =
            expert_output(layout.shared_w1(layer, s), layout.shared_w2(layer, s));
        for (int i = 0; i < d; ++i) out[i] += eo[i];
    }
    return out;
}

}  // namespace routelab::test
