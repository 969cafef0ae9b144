// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "routelab/model.hpp"

namespace routelab {

using TokenSequence = std::vector<int>;

// Throws CapacityError / DomainError if the sequence does not fit the model.
void validate_input(const ModelConfig& config, const TokenSequence& input);

// Routing decisions of one forward pass: for every MoE layer and position,
// the exact top_k selected expert indices (ascending) and the full softmax
// probability vector over all experts.
struct RoutingTrace {
    int num_layers = 0;
    int seq_len = 0;
    int num_experts = 0;
    int top_k = 0;
    // probs[layer][position] has num_experts entries summing to 1.
    std::vector<std::vector<std::vector<double>>> probs;
    // selected[layer][position] has top_k ascending expert indices.
    std::vector<std::vector<std::vector<int>>> selected;
};

struct ForwardOutput {
    // next-token logits, seq_len x vocab_size, row-major
    std::vector<double> logits;
    int seq_len = 0;
    int vocab = 0;
    RoutingTrace trace;

    double logit(int pos, int token) const {
        return logits[static_cast<size_t>(pos) * vocab + token];
    }
};

// Deterministic forward pass. Selection uses the bias-adjusted router
// logits (largest first, ties to the lowest expert index); the mixture
// weights are the full-softmax probabilities of the selected experts,
// not renormalized after selection. Shared experts are always added.
ForwardOutput forward_with_trace(const MoeModel& model, const TokenSequence& input);

// A sequence given as dense rows over the vocabulary instead of token ids.
// Row t plays the role of the one-hot indicator of the token at position t;
// the embedding becomes rows[t] * token_embedding. Used to probe losses at
// off-one-hot points (finite differences).
struct RelaxedTokenInput {
    std::vector<std::vector<double>> rows;  // seq_len rows of vocab_size
};

RelaxedTokenInput relax(const ModelConfig& config, const TokenSequence& input);

ForwardOutput forward_with_trace(const MoeModel& model, const RelaxedTokenInput& input);

// Per-layer view of the MoE block for verification: the block input vector
// and the block output (gated expert mixture plus shared experts) for each
// (layer, position).
struct LayerIo {
    // [layer][position][embed_dim]
    std::vector<std::vector<std::vector<double>>> moe_input;
    std::vector<std::vector<std::vector<double>>> moe_output;
};

ForwardOutput forward_with_internals(const MoeModel& model, const TokenSequence& input,
                                     LayerIo& io);

// Arithmetic mean of the full probability vectors over the given (layer,
// position) pairs. Empty subsets raise DomainError.
std::vector<double> aggregate_routing(const RoutingTrace& trace,
                                      const std::vector<int>& layers,
                                      const std::vector<int>& positions);

// Convenience: all layers / all positions.
std::vector<double> aggregate_routing(const RoutingTrace& trace);

// Greedy decoding: appends argmax tokens (ties to the lowest id) until
// max_new_tokens have been produced or the context is full.
TokenSequence greedy_decode(const MoeModel& model, const TokenSequence& prompt,
                            int max_new_tokens);

// exp(mean per-token negative log-likelihood) over all next-token
// predictions in the corpus. Sequences of length < 2 contribute nothing;
// an empty or fully degenerate corpus raises DomainError.
double perplexity(const MoeModel& model, const std::vector<TokenSequence>& corpus);

}  // namespace routelab
