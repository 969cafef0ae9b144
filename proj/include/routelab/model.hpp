// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace routelab {

// Architecture parameters of the desk-scale MoE language model.
struct ModelConfig {
    int vocab_size = 128;
    int embed_dim = 64;
    int num_layers = 2;
    int experts_per_layer = 8;
    int top_k = 2;
    int shared_experts = 1;
    int expert_hidden_dim = 128;
    int attention_heads = 1;
    int max_seq_len = 64;
    uint64_t init_seed = 0;

    bool operator==(const ModelConfig&) const = default;
};

// Throws DomainError if any field violates its constraints
// (1 <= top_k <= experts_per_layer, vocab_size >= 8, dims >= 1,
// embed_dim divisible by attention_heads).
void validate(const ModelConfig& config);

// Offsets into the flat parameter vector. The layout is, in order:
//
//   token_embedding      [vocab_size x embed_dim]
//   position_embedding   [max_seq_len x embed_dim]
//   for each layer l:
//     attn_wq, attn_wk, attn_wv, attn_wo   each [embed_dim x embed_dim]
//     router_w                             [experts x embed_dim]
//     for each routed expert e:
//       w1 [hidden x embed_dim], w2 [embed_dim x hidden]
//     for each shared expert s:
//       w1 [hidden x embed_dim], w2 [embed_dim x hidden]
//   output_head          [vocab_size x embed_dim]
//
// All matrices are row-major with shape [out x in]; y = W x means
// y[o] = sum_i W[o*in + i] * x[i].
struct ParamLayout {
    explicit ParamLayout(const ModelConfig& config);

    size_t token_embedding() const { return tok_emb_; }
    size_t position_embedding() const { return pos_emb_; }
    size_t attn_wq(int layer) const { return layer_base_[layer]; }
    size_t attn_wk(int layer) const { return layer_base_[layer] + dd_; }
    size_t attn_wv(int layer) const { return layer_base_[layer] + 2 * dd_; }
    size_t attn_wo(int layer) const { return layer_base_[layer] + 3 * dd_; }
    size_t router_w(int layer) const { return layer_base_[layer] + 4 * dd_; }
    size_t expert_w1(int layer, int expert) const;
    size_t expert_w2(int layer, int expert) const;
    size_t shared_w1(int layer, int idx) const;
    size_t shared_w2(int layer, int idx) const;
    size_t output_head() const { return out_head_; }
    size_t total() const { return total_; }

    // Half-open parameter range owned by one routed expert (w1 and w2 are
    // adjacent). Used to restrict fine-tuning to an expert subset.
    std::pair<size_t, size_t> expert_range(int layer, int expert) const;

private:
    size_t tok_emb_ = 0;
    size_t pos_emb_ = 0;
    std::vector<size_t> layer_base_;
    size_t out_head_ = 0;
    size_t total_ = 0;
    size_t dd_ = 0;          // embed_dim^2
    size_t expert_size_ = 0; // w1 + w2 of one expert
    int hidden_ = 0;
    int embed_ = 0;
    int experts_ = 0;
};

// The model: immutable for inference. Transforming operations return a new
// value. router_bias holds one additive logit offset per (layer, expert);
// -inf marks a hard-masked expert.
struct MoeModel {
    ModelConfig config;
    std::vector<double> parameters;
    std::vector<double> router_bias;  // num_layers x experts_per_layer

    double bias_at(int layer, int expert) const {
        return router_bias[static_cast<size_t>(layer) * config.experts_per_layer + expert];
    }
};

// Builds a model with seeded Gaussian initialization. Identical config
// (including init_seed) yields bit-identical parameters.
MoeModel make_model(const ModelConfig& config);

size_t parameter_count(const ModelConfig& config);

// Returns a copy whose router bias adds gamma to every expert in strong_set
// at every MoE layer. Indices out of [0, N) raise DomainError.
MoeModel apply_router_bias(const MoeModel& model, const std::vector<int>& strong_set,
                           double gamma);

// Returns a copy in which the listed experts receive -inf effective logits
// at every layer: never selected, probability renormalized to zero over the
// remaining experts. Raises DomainError if fewer than top_k experts remain.
MoeModel mask_experts(const MoeModel& model, const std::vector<int>& masked);

// Checkpoint format: one-line JSON header {"format","version","config"}
// terminated by '\n', followed by the parameters and then the router bias,
// both as little-endian 32-bit floats in layout order.
void save_checkpoint(const MoeModel& model, const std::string& path);
MoeModel load_checkpoint(const std::string& path);

}  // namespace routelab
