// SPDX-License-Identifier: Apache-2.0
#include "routelab/forward.hpp"

#include <algorithm>
#include <cmath>

#include "network.hpp"
#include "routelab/errors.hpp"

namespace routelab {

void validate_input(const ModelConfig& config, const TokenSequence& input) {
    detail::from_ids(config, input);
}

ForwardOutput forward_with_trace(const MoeModel& model, const TokenSequence& input) {
    detail::DenseInput dense = detail::from_ids(model.config, input);
    detail::ForwardCache cache;
    detail::run_forward(model, dense, cache);
    ForwardOutput out;
    out.seq_len = cache.seq_len;
    out.vocab = model.config.vocab_size;
    out.logits = std::move(cache.logits);
    out.trace = detail::trace_from_cache(model, cache);
    return out;
}

RelaxedTokenInput relax(const ModelConfig& config, const TokenSequence& input) {
    detail::from_ids(config, input);  // validation
    RelaxedTokenInput relaxed;
    relaxed.rows.assign(input.size(), std::vector<double>(config.vocab_size, 0.0));
    for (size_t t = 0; t < input.size(); ++t) relaxed.rows[t][input[t]] = 1.0;
    return relaxed;
}

ForwardOutput forward_with_trace(const MoeModel& model, const RelaxedTokenInput& input) {
    detail::DenseInput dense = detail::from_relaxed(model.config, input);
    detail::ForwardCache cache;
    detail::run_forward(model, dense, cache);
    ForwardOutput out;
    out.seq_len = cache.seq_len;
    out.vocab = model.config.vocab_size;
    out.logits = std::move(cache.logits);
    out.trace = detail::trace_from_cache(model, cache);
    return out;
}

ForwardOutput forward_with_internals(const MoeModel& model, const TokenSequence& input,
                                     LayerIo& io) {
    detail::DenseInput dense = detail::from_ids(model.config, input);
    detail::ForwardCache cache;
    detail::run_forward(model, dense, cache, &io);
    ForwardOutput out;
    out.seq_len = cache.seq_len;
    out.vocab = model.config.vocab_size;
    out.logits = std::move(cache.logits);
    out.trace = detail::trace_from_cache(model, cache);
    return out;
}

std::vector<double> aggregate_routing(const RoutingTrace& trace,
                                      const std::vector<int>& layers,
                                      const std::vector<int>& positions) {
    if (layers.empty() || positions.empty()) {
        throw DomainError("aggregate_routing requires non-empty layer and position subsets");
    }
    for (int l : layers) {
        if (l < 0 || l >= trace.num_layers) {
            throw DomainError("layer index out of trace bounds: " + std::to_string(l));
        }
    }
    for (int t : positions) {
        if (t < 0 || t >= trace.seq_len) {
            throw DomainError("position index out of trace bounds: " + std::to_string(t));
        }
    }
    std::vector<double> mean(trace.num_experts, 0.0);
    for (int l : layers) {
        for (int t : positions) {
            const std::vector<double>& p = trace.probs[l][t];
            for (int e = 0; e < trace.num_experts; ++e) mean[e] += p[e];
        }
    }
    const double inv = 1.0 / (static_cast<double>(layers.size()) * positions.size());
    for (double& m : mean) m *= inv;
    return mean;
}

std::vector<double> aggregate_routing(const RoutingTrace& trace) {
    std::vector<int> layers(trace.num_layers), positions(trace.seq_len);
    for (int l = 0; l < trace.num_layers; ++l) layers[l] = l;
    for (int t = 0; t < trace.seq_len; ++t) positions[t] = t;
    return aggregate_routing(trace, layers, positions);
}

TokenSequence greedy_decode(const MoeModel& model, const TokenSequence& prompt,
                            int max_new_tokens) {
    validate_input(model.config, prompt);
    if (prompt.empty()) throw DomainError("empty prompt");
    TokenSequence seq = prompt;
    TokenSequence generated;
    for (int step = 0; step < max_new_tokens; ++step) {
        if (static_cast<int>(seq.size()) >= model.config.max_seq_len) break;
        ForwardOutput out = forward_with_trace(model, seq);
        const int last = out.seq_len - 1;
        int best = 0;
        double best_logit = out.logit(last, 0);
        for (int v = 1; v < out.vocab; ++v) {
            const double z = out.logit(last, v);
            if (z > best_logit) {
                best_logit = z;
                best = v;
            }
        }
        seq.push_back(best);
        generated.push_back(best);
    }
    return generated;
}

double perplexity(const MoeModel& model, const std::vector<TokenSequence>& corpus) {
    if (corpus.empty()) throw DomainError("perplexity requires a non-empty corpus");
    double nll = 0.0;
    long tokens = 0;
    for (const TokenSequence& seq : corpus) {
        if (seq.size() < 2) continue;
        ForwardOutput out = forward_with_trace(model, seq);
        for (int t = 0; t + 1 < out.seq_len; ++t) {
            const double* z = out.logits.data() + static_cast<size_t>(t) * out.vocab;
            double m = z[0];
            for (int v = 1; v < out.vocab; ++v) m = std::max(m, z[v]);
            double sum = 0.0;
            for (int v = 0; v < out.vocab; ++v) sum += std::exp(z[v] - m);
            nll += m + std::log(sum) - z[seq[t + 1]];
            ++tokens;
        }
    }
    if (tokens == 0) throw DomainError("perplexity corpus has no next-token predictions");
    return std::exp(nll / static_cast<double>(tokens));
}

}  // namespace routelab
