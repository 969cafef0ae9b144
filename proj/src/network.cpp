// SPDX-License-Identifier: Apache-2.0
#include "network.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "routelab/errors.hpp"

namespace routelab::detail {

namespace {

constexpr double kRmsEps = 1e-5;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// y = W x, W is [out x in] row-major
inline void matvec(const double* w, const double* x, double* y, int out, int in) {
    for (int o = 0; o < out; ++o) {
        const double* row = w + static_cast<size_t>(o) * in;
        double acc = 0.0;
        for (int i = 0; i < in; ++i) acc += row[i] * x[i];
        y[o] = acc;
    }
}

// dx += W^T d
inline void matvec_transpose_add(const double* w, const double* d, double* dx, int out,
                                 int in) {
    for (int o = 0; o < out; ++o) {
        const double g = d[o];
        if (g == 0.0) continue;
        const double* row = w + static_cast<size_t>(o) * in;
        for (int i = 0; i < in; ++i) dx[i] += row[i] * g;
    }
}

// dW += d (outer) x
inline void outer_add(double* dw, const double* d, const double* x, int out, int in) {
    for (int o = 0; o < out; ++o) {
        const double g = d[o];
        if (g == 0.0) continue;
        double* row = dw + static_cast<size_t>(o) * in;
        for (int i = 0; i < in; ++i) row[i] += g * x[i];
    }
}

inline double inv_rms(const double* x, int n) {
    double ms = 0.0;
    for (int i = 0; i < n; ++i) ms += x[i] * x[i];
    return 1.0 / std::sqrt(ms / n + kRmsEps);
}

// y = x * s; backward: dx += s*dy - (s^3/n) * dot(dy, x) * x
inline void rmsnorm_backward_add(const double* x, double s, const double* dy, double* dx,
                                 int n) {
    double dot = 0.0;
    for (int i = 0; i < n; ++i) dot += dy[i] * x[i];
    const double c = s * s * s * dot / n;
    for (int i = 0; i < n; ++i) dx[i] += s * dy[i] - c * x[i];
}

inline void softmax_inplace(double* z, int n) {
    double m = kNegInf;
    for (int i = 0; i < n; ++i) m = std::max(m, z[i]);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        z[i] = std::exp(z[i] - m);
        sum += z[i];
    }
    const double inv = 1.0 / sum;
    for (int i = 0; i < n; ++i) z[i] *= inv;
}

// Top-k by value, ties to the lowest index; result ascending.
std::vector<int> top_k_indices(const double* z, int n, int k) {
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(),
                      [&](int a, int b) { return z[a] != z[b] ? z[a] > z[b] : a < b; });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

// Effective per-expert bias with the smallest finite entry subtracted, so a
// uniform bias cancels exactly (softmax and top-k are shift invariant).
std::vector<double> normalized_bias(const MoeModel& model, int layer) {
    const int n = model.config.experts_per_layer;
    std::vector<double> bias(n);
    double min_finite = std::numeric_limits<double>::infinity();
    for (int e = 0; e < n; ++e) {
        bias[e] = model.bias_at(layer, e);
        if (std::isfinite(bias[e])) min_finite = std::min(min_finite, bias[e]);
    }
    if (!std::isfinite(min_finite)) {
        throw DomainError("all experts are masked at layer " + std::to_string(layer));
    }
    for (int e = 0; e < n; ++e) {
        if (std::isfinite(bias[e])) bias[e] -= min_finite;
    }
    return bias;
}

}  // namespace

DenseInput from_ids(const ModelConfig& config, const TokenSequence& tokens) {
    if (static_cast<int>(tokens.size()) > config.max_seq_len) {
        throw CapacityError("sequence length " + std::to_string(tokens.size()) +
                            " exceeds max_seq_len " + std::to_string(config.max_seq_len));
    }
    for (int t : tokens) {
        if (t < 0 || t >= config.vocab_size) {
            throw DomainError("token id out of range: " + std::to_string(t));
        }
    }
    DenseInput input;
    input.seq_len = static_cast<int>(tokens.size());
    input.vocab = config.vocab_size;
    input.ids = tokens;
    return input;
}

DenseInput from_relaxed(const ModelConfig& config, const RelaxedTokenInput& relaxed) {
    if (static_cast<int>(relaxed.rows.size()) > config.max_seq_len) {
        throw CapacityError("sequence length exceeds max_seq_len");
    }
    DenseInput input;
    input.seq_len = static_cast<int>(relaxed.rows.size());
    input.vocab = config.vocab_size;
    input.rows.resize(static_cast<size_t>(input.seq_len) * input.vocab);
    for (int t = 0; t < input.seq_len; ++t) {
        if (static_cast<int>(relaxed.rows[t].size()) != config.vocab_size) {
            throw DomainError("relaxed input row has wrong width");
        }
        std::copy(relaxed.rows[t].begin(), relaxed.rows[t].end(),
                  input.rows.begin() + static_cast<size_t>(t) * input.vocab);
    }
    return input;
}

void run_forward(const MoeModel& model, const DenseInput& input, ForwardCache& cache,
                 LayerIo* io) {
    const ModelConfig& c = model.config;
    const ParamLayout layout(c);
    const int T = input.seq_len;
    const int D = c.embed_dim;
    const int V = c.vocab_size;
    const int N = c.experts_per_layer;
    const int K = c.top_k;
    const int S = c.shared_experts;
    const int H = c.expert_hidden_dim;
    const int heads = c.attention_heads;
    const int hd = D / heads;
    const int slots = K + S;
    const double* P = model.parameters.data();

    if (T == 0) throw DomainError("empty input sequence");

    cache.seq_len = T;
    cache.emb.assign(static_cast<size_t>(T) * D, 0.0);
    cache.layers.assign(c.num_layers, LayerCache{});
    if (io) {
        io->moe_input.assign(c.num_layers, {});
        io->moe_output.assign(c.num_layers, {});
    }

    // embeddings
    for (int t = 0; t < T; ++t) {
        double* e = cache.emb.data() + static_cast<size_t>(t) * D;
        if (input.one_hot()) {
            const double* row = P + layout.token_embedding() +
                                static_cast<size_t>(input.ids[t]) * D;
            std::copy(row, row + D, e);
        } else {
            const double* x = input.rows.data() + static_cast<size_t>(t) * V;
            for (int v = 0; v < V; ++v) {
                const double xv = x[v];
                if (xv == 0.0) continue;
                const double* row = P + layout.token_embedding() + static_cast<size_t>(v) * D;
                for (int d = 0; d < D; ++d) e[d] += xv * row[d];
            }
        }
        const double* pos = P + layout.position_embedding() + static_cast<size_t>(t) * D;
        for (int d = 0; d < D; ++d) e[d] += pos[d];
    }

    std::vector<double> x = cache.emb;  // residual stream, T x D

    for (int l = 0; l < c.num_layers; ++l) {
        LayerCache& lc = cache.layers[l];
        lc.attn_in = x;
        lc.attn_norm.assign(static_cast<size_t>(T) * D, 0.0);
        lc.attn_inv_rms.assign(T, 0.0);
        lc.q.assign(static_cast<size_t>(T) * D, 0.0);
        lc.k.assign(static_cast<size_t>(T) * D, 0.0);
        lc.v.assign(static_cast<size_t>(T) * D, 0.0);
        lc.att.assign(static_cast<size_t>(heads) * T * T, 0.0);
        lc.ctx.assign(static_cast<size_t>(T) * D, 0.0);

        for (int t = 0; t < T; ++t) {
            const double* xin = x.data() + static_cast<size_t>(t) * D;
            double* a = lc.attn_norm.data() + static_cast<size_t>(t) * D;
            const double s = inv_rms(xin, D);
            lc.attn_inv_rms[t] = s;
            for (int d = 0; d < D; ++d) a[d] = xin[d] * s;
            matvec(P + layout.attn_wq(l), a, lc.q.data() + static_cast<size_t>(t) * D, D, D);
            matvec(P + layout.attn_wk(l), a, lc.k.data() + static_cast<size_t>(t) * D, D, D);
            matvec(P + layout.attn_wv(l), a, lc.v.data() + static_cast<size_t>(t) * D, D, D);
        }

        const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
        for (int h = 0; h < heads; ++h) {
            const int off = h * hd;
            for (int t = 0; t < T; ++t) {
                double* att_row = lc.att.data() + (static_cast<size_t>(h) * T + t) * T;
                const double* qt = lc.q.data() + static_cast<size_t>(t) * D + off;
                for (int u = 0; u <= t; ++u) {
                    const double* ku = lc.k.data() + static_cast<size_t>(u) * D + off;
                    double dot = 0.0;
                    for (int d = 0; d < hd; ++d) dot += qt[d] * ku[d];
                    att_row[u] = dot * scale;
                }
                softmax_inplace(att_row, t + 1);
                double* ct = lc.ctx.data() + static_cast<size_t>(t) * D + off;
                for (int u = 0; u <= t; ++u) {
                    const double w = att_row[u];
                    const double* vu = lc.v.data() + static_cast<size_t>(u) * D + off;
                    for (int d = 0; d < hd; ++d) ct[d] += w * vu[d];
                }
            }
        }

        // residual add of the attention projection
        std::vector<double> proj(D);
        for (int t = 0; t < T; ++t) {
            matvec(P + layout.attn_wo(l), lc.ctx.data() + static_cast<size_t>(t) * D,
                   proj.data(), D, D);
            double* xt = x.data() + static_cast<size_t>(t) * D;
            for (int d = 0; d < D; ++d) xt[d] += proj[d];
        }

        lc.moe_in = x;
        lc.moe_norm.assign(static_cast<size_t>(T) * D, 0.0);
        lc.moe_inv_rms.assign(T, 0.0);
        lc.router_logits.assign(static_cast<size_t>(T) * N, 0.0);
        lc.probs.assign(static_cast<size_t>(T) * N, 0.0);
        lc.selected.assign(T, {});
        lc.hidden.assign(static_cast<size_t>(T) * slots * H, 0.0);
        lc.expert_out.assign(static_cast<size_t>(T) * slots * D, 0.0);

        const std::vector<double> bias = normalized_bias(model, l);
        if (io) {
            io->moe_input[l].assign(T, std::vector<double>(D));
            io->moe_output[l].assign(T, std::vector<double>(D));
        }

        for (int t = 0; t < T; ++t) {
            const double* xmid = x.data() + static_cast<size_t>(t) * D;
            double* b = lc.moe_norm.data() + static_cast<size_t>(t) * D;
            const double s = inv_rms(xmid, D);
            lc.moe_inv_rms[t] = s;
            for (int d = 0; d < D; ++d) b[d] = xmid[d] * s;
            if (io) std::copy(b, b + D, io->moe_input[l][t].begin());

            double* z = lc.router_logits.data() + static_cast<size_t>(t) * N;
            matvec(P + layout.router_w(l), b, z, N, D);
            for (int e = 0; e < N; ++e) z[e] += bias[e];

            double* p = lc.probs.data() + static_cast<size_t>(t) * N;
            std::copy(z, z + N, p);
            softmax_inplace(p, N);
            lc.selected[t] = top_k_indices(z, N, K);

            std::vector<double> moe(D, 0.0);
            for (int slot = 0; slot < slots; ++slot) {
                const int expert = slot < K ? lc.selected[t][slot] : N + (slot - K);
                double* h1 =
                    lc.hidden.data() + (static_cast<size_t>(t) * slots + slot) * H;
                double* eo =
                    lc.expert_out.data() + (static_cast<size_t>(t) * slots + slot) * D;
                matvec(P + layout.expert_w1(l, expert), b, h1, H, D);
                std::vector<double> act(H);
                for (int i = 0; i < H; ++i) act[i] = h1[i] > 0.0 ? h1[i] : 0.0;
                matvec(P + layout.expert_w2(l, expert), act.data(), eo, D, H);
                const double gate = slot < K ? p[lc.selected[t][slot]] : 1.0;
                for (int d = 0; d < D; ++d) moe[d] += gate * eo[d];
            }
            if (io) io->moe_output[l][t] = moe;
            double* xt = x.data() + static_cast<size_t>(t) * D;
            for (int d = 0; d < D; ++d) xt[d] += moe[d];
        }
    }

    cache.final_in = x;
    cache.final_norm.assign(static_cast<size_t>(T) * D, 0.0);
    cache.final_inv_rms.assign(T, 0.0);
    cache.logits.assign(static_cast<size_t>(T) * V, 0.0);
    for (int t = 0; t < T; ++t) {
        const double* xt = x.data() + static_cast<size_t>(t) * D;
        double* f = cache.final_norm.data() + static_cast<size_t>(t) * D;
        const double s = inv_rms(xt, D);
        cache.final_inv_rms[t] = s;
        for (int d = 0; d < D; ++d) f[d] = xt[d] * s;
        matvec(P + layout.output_head(), f, cache.logits.data() + static_cast<size_t>(t) * V,
               V, D);
    }
}

RoutingTrace trace_from_cache(const MoeModel& model, const ForwardCache& cache) {
    const ModelConfig& c = model.config;
    RoutingTrace trace;
    trace.num_layers = c.num_layers;
    trace.seq_len = cache.seq_len;
    trace.num_experts = c.experts_per_layer;
    trace.top_k = c.top_k;
    trace.probs.resize(c.num_layers);
    trace.selected.resize(c.num_layers);
    for (int l = 0; l < c.num_layers; ++l) {
        const LayerCache& lc = cache.layers[l];
        trace.probs[l].resize(cache.seq_len);
        trace.selected[l] = lc.selected;
        for (int t = 0; t < cache.seq_len; ++t) {
            const double* p = lc.probs.data() + static_cast<size_t>(t) * c.experts_per_layer;
            trace.probs[l][t].assign(p, p + c.experts_per_layer);
        }
    }
    return trace;
}

namespace {

std::vector<int> resolve_route_layers(const ModelConfig& c, const std::vector<int>& layers) {
    if (layers.empty()) {
        std::vector<int> all(c.num_layers);
        std::iota(all.begin(), all.end(), 0);
        return all;
    }
    for (int l : layers) {
        if (l < 0 || l >= c.num_layers) {
            throw DomainError("routing layer index out of range: " + std::to_string(l));
        }
    }
    return layers;
}

double log_sum_exp(const double* z, int n) {
    double m = kNegInf;
    for (int i = 0; i < n; ++i) m = std::max(m, z[i]);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) sum += std::exp(z[i] - m);
    return m + std::log(sum);
}

}  // namespace

LossValues loss_from_cache(const MoeModel& model, const ForwardCache& cache,
                           const LossRequest& request) {
    const ModelConfig& c = model.config;
    const int V = c.vocab_size;
    const int N = c.experts_per_layer;
    LossValues values;

    double lm_sum = 0.0;
    for (auto [pos, target] : request.lm_targets) {
        const double* z = cache.logits.data() + static_cast<size_t>(pos) * V;
        lm_sum += log_sum_exp(z, V) - z[target];
    }
    values.lm = request.lm_scale * lm_sum;

    if (request.route_score) {
        const std::vector<int> layers = resolve_route_layers(c, request.route_layers);
        const int tp = request.route_positions;
        const double inv = 1.0 / (static_cast<double>(layers.size()) * tp);
        double acc = 0.0;
        for (int l : layers) {
            const LayerCache& lc = cache.layers[l];
            for (int t = 0; t < tp; ++t) {
                const double* p = lc.probs.data() + static_cast<size_t>(t) * N;
                for (int e = 0; e < N; ++e) acc += (*request.route_score)[e] * p[e];
            }
        }
        values.route = acc * inv;
    }

    if (request.aux_coef != 0.0) {
        const int T = cache.seq_len;
        const int K = c.top_k;
        double aux = 0.0;
        for (int l = 0; l < c.num_layers; ++l) {
            const LayerCache& lc = cache.layers[l];
            std::vector<double> frac(N, 0.0), mean_p(N, 0.0);
            for (int t = 0; t < T; ++t) {
                for (int e : lc.selected[t]) frac[e] += 1.0;
                const double* p = lc.probs.data() + static_cast<size_t>(t) * N;
                for (int e = 0; e < N; ++e) mean_p[e] += p[e];
            }
            double layer_aux = 0.0;
            for (int e = 0; e < N; ++e) {
                layer_aux += (frac[e] / (static_cast<double>(T) * K)) * (mean_p[e] / T);
            }
            aux += layer_aux * N;
        }
        values.aux = aux / c.num_layers;
    }

    values.total = request.lm_weight * values.lm + request.route_weight * values.route +
                   request.aux_coef * values.aux;
    return values;
}

LossValues run_backward(const MoeModel& model, const DenseInput& input,
                        const ForwardCache& cache, const LossRequest& request,
                        std::vector<double>* param_grads, InputGradient* input_grad,
                        int input_grad_rows) {
    const ModelConfig& c = model.config;
    const ParamLayout layout(c);
    const int T = cache.seq_len;
    const int D = c.embed_dim;
    const int V = c.vocab_size;
    const int N = c.experts_per_layer;
    const int K = c.top_k;
    const int S = c.shared_experts;
    const int H = c.expert_hidden_dim;
    const int heads = c.attention_heads;
    const int hd = D / heads;
    const int slots = K + S;
    const double* P = model.parameters.data();

    const LossValues values = loss_from_cache(model, cache, request);

    if (param_grads && param_grads->size() != layout.total()) {
        throw DomainError("param gradient buffer has wrong size");
    }
    double* G = param_grads ? param_grads->data() : nullptr;

    // seed d(logits)
    std::vector<double> d_logits(static_cast<size_t>(T) * V, 0.0);
    if (request.lm_weight != 0.0 || !request.lm_targets.empty()) {
        const double w = request.lm_weight * request.lm_scale;
        std::vector<double> sm(V);
        for (auto [pos, target] : request.lm_targets) {
            const double* z = cache.logits.data() + static_cast<size_t>(pos) * V;
            std::copy(z, z + V, sm.begin());
            softmax_inplace(sm.data(), V);
            double* dz = d_logits.data() + static_cast<size_t>(pos) * V;
            for (int vtok = 0; vtok < V; ++vtok) dz[vtok] += w * sm[vtok];
            dz[target] -= w;
        }
    }

    // seed d(probs) per layer from the routing and auxiliary terms
    std::vector<std::vector<double>> d_probs(c.num_layers);
    for (int l = 0; l < c.num_layers; ++l) {
        d_probs[l].assign(static_cast<size_t>(T) * N, 0.0);
    }
    if (request.route_score && request.route_weight != 0.0) {
        const std::vector<int> layers = resolve_route_layers(c, request.route_layers);
        const double w = request.route_weight /
                         (static_cast<double>(layers.size()) * request.route_positions);
        for (int l : layers) {
            for (int t = 0; t < request.route_positions; ++t) {
                double* dp = d_probs[l].data() + static_cast<size_t>(t) * N;
                for (int e = 0; e < N; ++e) dp[e] += w * (*request.route_score)[e];
            }
        }
    }
    if (request.aux_coef != 0.0) {
        for (int l = 0; l < c.num_layers; ++l) {
            const LayerCache& lc = cache.layers[l];
            std::vector<double> frac(N, 0.0);
            for (int t = 0; t < T; ++t) {
                for (int e : lc.selected[t]) frac[e] += 1.0;
            }
            // d aux / d p[t][e] = N * frac_e / (T*K) / T, averaged over layers
            const double w = request.aux_coef * N /
                             (static_cast<double>(c.num_layers) * T * T * K);
            for (int t = 0; t < T; ++t) {
                double* dp = d_probs[l].data() + static_cast<size_t>(t) * N;
                for (int e = 0; e < N; ++e) dp[e] += w * frac[e];
            }
        }
    }

    // backward through the output head and final norm
    std::vector<double> d_x(static_cast<size_t>(T) * D, 0.0);
    {
        std::vector<double> d_f(D);
        for (int t = 0; t < T; ++t) {
            const double* dz = d_logits.data() + static_cast<size_t>(t) * V;
            const double* f = cache.final_norm.data() + static_cast<size_t>(t) * D;
            std::fill(d_f.begin(), d_f.end(), 0.0);
            matvec_transpose_add(P + layout.output_head(), dz, d_f.data(), V, D);
            if (G) outer_add(G + layout.output_head(), dz, f, V, D);
            rmsnorm_backward_add(cache.final_in.data() + static_cast<size_t>(t) * D,
                                 cache.final_inv_rms[t], d_f.data(),
                                 d_x.data() + static_cast<size_t>(t) * D, D);
        }
    }

    std::vector<double> d_b(D), d_h(H), d_act(H), d_eo(D), d_z(N), d_ctx_t(D), d_a(D);
    std::vector<double> d_q(static_cast<size_t>(T) * D), d_k(static_cast<size_t>(T) * D),
        d_v(static_cast<size_t>(T) * D);

    for (int l = c.num_layers - 1; l >= 0; --l) {
        const LayerCache& lc = cache.layers[l];

        // ---- MoE block ----
        // d_x currently holds the gradient at the block output; the residual
        // skip passes it straight through to moe_in, and the branch adds to
        // the same buffer via the norm.
        for (int t = 0; t < T; ++t) {
            const double* d_out = d_x.data() + static_cast<size_t>(t) * D;
            const double* b = lc.moe_norm.data() + static_cast<size_t>(t) * D;
            const double* p = lc.probs.data() + static_cast<size_t>(t) * N;
            std::fill(d_b.begin(), d_b.end(), 0.0);
            double* dp = d_probs[l].data() + static_cast<size_t>(t) * N;

            for (int slot = 0; slot < slots; ++slot) {
                const int expert = slot < K ? lc.selected[t][slot] : N + (slot - K);
                const double gate = slot < K ? p[lc.selected[t][slot]] : 1.0;
                const double* eo =
                    lc.expert_out.data() + (static_cast<size_t>(t) * slots + slot) * D;
                const double* h1 =
                    lc.hidden.data() + (static_cast<size_t>(t) * slots + slot) * H;

                if (slot < K) {
                    double dot = 0.0;
                    for (int d = 0; d < D; ++d) dot += d_out[d] * eo[d];
                    dp[lc.selected[t][slot]] += dot;
                }
                for (int d = 0; d < D; ++d) d_eo[d] = gate * d_out[d];

                std::fill(d_act.begin(), d_act.end(), 0.0);
                matvec_transpose_add(P + layout.expert_w2(l, expert), d_eo.data(),
                                     d_act.data(), D, H);
                if (G) {
                    std::vector<double> act(H);
                    for (int i = 0; i < H; ++i) act[i] = h1[i] > 0.0 ? h1[i] : 0.0;
                    outer_add(G + layout.expert_w2(l, expert), d_eo.data(), act.data(), D, H);
                }
                for (int i = 0; i < H; ++i) d_h[i] = h1[i] > 0.0 ? d_act[i] : 0.0;
                matvec_transpose_add(P + layout.expert_w1(l, expert), d_h.data(), d_b.data(),
                                     H, D);
                if (G) outer_add(G + layout.expert_w1(l, expert), d_h.data(), b, H, D);
            }

            // softmax backward: dz_j = p_j * (dp_j - sum_i dp_i p_i)
            double mix = 0.0;
            for (int e = 0; e < N; ++e) mix += dp[e] * p[e];
            for (int e = 0; e < N; ++e) d_z[e] = p[e] * (dp[e] - mix);
            matvec_transpose_add(P + layout.router_w(l), d_z.data(), d_b.data(), N, D);
            if (G) outer_add(G + layout.router_w(l), d_z.data(), b, N, D);

            rmsnorm_backward_add(lc.moe_in.data() + static_cast<size_t>(t) * D,
                                 lc.moe_inv_rms[t], d_b.data(),
                                 d_x.data() + static_cast<size_t>(t) * D, D);
        }

        // ---- attention block ----
        std::fill(d_q.begin(), d_q.end(), 0.0);
        std::fill(d_k.begin(), d_k.end(), 0.0);
        std::fill(d_v.begin(), d_v.end(), 0.0);
        const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
        std::vector<double> d_att_row(T);

        for (int t = 0; t < T; ++t) {
            const double* d_out = d_x.data() + static_cast<size_t>(t) * D;
            std::fill(d_ctx_t.begin(), d_ctx_t.end(), 0.0);
            matvec_transpose_add(P + layout.attn_wo(l), d_out, d_ctx_t.data(), D, D);
            if (G) {
                outer_add(G + layout.attn_wo(l), d_out,
                          lc.ctx.data() + static_cast<size_t>(t) * D, D, D);
            }
            for (int h = 0; h < heads; ++h) {
                const int off = h * hd;
                const double* att_row = lc.att.data() + (static_cast<size_t>(h) * T + t) * T;
                const double* d_ch = d_ctx_t.data() + off;

                for (int u = 0; u <= t; ++u) {
                    const double* vu = lc.v.data() + static_cast<size_t>(u) * D + off;
                    double dot = 0.0;
                    for (int d = 0; d < hd; ++d) dot += d_ch[d] * vu[d];
                    d_att_row[u] = dot;
                    double* dvu = d_v.data() + static_cast<size_t>(u) * D + off;
                    for (int d = 0; d < hd; ++d) dvu[d] += att_row[u] * d_ch[d];
                }
                double mix = 0.0;
                for (int u = 0; u <= t; ++u) mix += d_att_row[u] * att_row[u];
                const double* qt = lc.q.data() + static_cast<size_t>(t) * D + off;
                double* dqt = d_q.data() + static_cast<size_t>(t) * D + off;
                for (int u = 0; u <= t; ++u) {
                    const double d_logit = att_row[u] * (d_att_row[u] - mix) * scale;
                    const double* ku = lc.k.data() + static_cast<size_t>(u) * D + off;
                    double* dku = d_k.data() + static_cast<size_t>(u) * D + off;
                    for (int d = 0; d < hd; ++d) {
                        dqt[d] += d_logit * ku[d];
                        dku[d] += d_logit * qt[d];
                    }
                }
            }
        }

        for (int t = 0; t < T; ++t) {
            const double* a = lc.attn_norm.data() + static_cast<size_t>(t) * D;
            std::fill(d_a.begin(), d_a.end(), 0.0);
            matvec_transpose_add(P + layout.attn_wq(l),
                                 d_q.data() + static_cast<size_t>(t) * D, d_a.data(), D, D);
            matvec_transpose_add(P + layout.attn_wk(l),
                                 d_k.data() + static_cast<size_t>(t) * D, d_a.data(), D, D);
            matvec_transpose_add(P + layout.attn_wv(l),
                                 d_v.data() + static_cast<size_t>(t) * D, d_a.data(), D, D);
            if (G) {
                outer_add(G + layout.attn_wq(l), d_q.data() + static_cast<size_t>(t) * D, a,
                          D, D);
                outer_add(G + layout.attn_wk(l), d_k.data() + static_cast<size_t>(t) * D, a,
                          D, D);
                outer_add(G + layout.attn_wv(l), d_v.data() + static_cast<size_t>(t) * D, a,
                          D, D);
            }
            rmsnorm_backward_add(lc.attn_in.data() + static_cast<size_t>(t) * D,
                                 lc.attn_inv_rms[t], d_a.data(),
                                 d_x.data() + static_cast<size_t>(t) * D, D);
        }
    }

    // embeddings
    if (G) {
        for (int t = 0; t < T; ++t) {
            const double* de = d_x.data() + static_cast<size_t>(t) * D;
            if (input.one_hot()) {
                double* row = G + layout.token_embedding() +
                              static_cast<size_t>(input.ids[t]) * D;
                for (int d = 0; d < D; ++d) row[d] += de[d];
            } else {
                const double* xr = input.rows.data() + static_cast<size_t>(t) * V;
                for (int v = 0; v < V; ++v) {
                    if (xr[v] == 0.0) continue;
                    double* row = G + layout.token_embedding() + static_cast<size_t>(v) * D;
                    for (int d = 0; d < D; ++d) row[d] += xr[v] * de[d];
                }
            }
            double* prow = G + layout.position_embedding() + static_cast<size_t>(t) * D;
            for (int d = 0; d < D; ++d) prow[d] += de[d];
        }
    }

    if (input_grad) {
        input_grad->seq_len = T;
        input_grad->vocab = V;
        input_grad->data.assign(static_cast<size_t>(T) * V, 0.0);
        const int rows = std::min(input_grad_rows, T);
        for (int t = 0; t < rows; ++t) {
            const double* de = d_x.data() + static_cast<size_t>(t) * D;
            double* out = input_grad->data.data() + static_cast<size_t>(t) * V;
            for (int v = 0; v < V; ++v) {
                const double* row = P + layout.token_embedding() + static_cast<size_t>(v) * D;
                double acc = 0.0;
                for (int d = 0; d < D; ++d) acc += row[d] * de[d];
                out[v] = acc;
            }
        }
    }

    return values;
}

}  // namespace routelab::detail
