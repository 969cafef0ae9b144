// SPDX-License-Identifier: Apache-2.0
#include "routelab/train.hpp"

#include <cmath>
#include <numeric>

#include "network.hpp"
#include "routelab/errors.hpp"
#include "routelab/rng.hpp"

namespace routelab {

namespace {

struct SequenceSampler {
    explicit SequenceSampler(size_t corpus_size, uint64_t seed)
        : order_(corpus_size), rng_(seed) {
        std::iota(order_.begin(), order_.end(), size_t{0});
        rng_.shuffle(order_);
    }

    size_t next() {
        if (cursor_ == order_.size()) {
            rng_.shuffle(order_);
            cursor_ = 0;
        }
        return order_[cursor_++];
    }

    std::vector<size_t> order_;
    size_t cursor_ = 0;
    Rng rng_;
};

// mask == nullptr trains every parameter
TrainResult sgd_train(const MoeModel& start, const std::vector<TokenSequence>& corpus,
                      int steps, double learning_rate, uint64_t seed,
                      const TrainOptions& options, const std::vector<uint8_t>* mask) {
    if (corpus.empty()) throw DomainError("training corpus is empty");
    for (const TokenSequence& seq : corpus) {
        validate_input(start.config, seq);
        if (seq.size() < 2) throw DomainError("training sequences need at least two tokens");
    }

    TrainResult result;
    result.model = start;
    result.loss_trajectory.reserve(steps);
    MoeModel& model = result.model;

    const ParamLayout layout(model.config);
    std::vector<double> grads(layout.total(), 0.0);
    SequenceSampler sampler(corpus.size(), derive_seed(seed, 0x74726e));

    for (int step = 0; step < steps; ++step) {
        const TokenSequence& seq = corpus[sampler.next()];

        detail::DenseInput dense = detail::from_ids(model.config, seq);
        detail::ForwardCache cache;
        detail::run_forward(model, dense, cache);

        detail::LossRequest request;
        const int n_targets = static_cast<int>(seq.size()) - 1;
        request.lm_targets.reserve(n_targets);
        for (int t = 0; t < n_targets; ++t) request.lm_targets.emplace_back(t, seq[t + 1]);
        request.lm_scale = 1.0 / n_targets;
        request.lm_weight = 1.0;
        request.aux_coef = options.aux_loss_coef;

        std::fill(grads.begin(), grads.end(), 0.0);
        detail::LossValues values =
            detail::run_backward(model, dense, cache, request, &grads, nullptr, 0);
        if (!std::isfinite(values.total)) {
            throw TrainingDivergedError("non-finite training loss", step);
        }
        result.loss_trajectory.push_back(values.lm);

        if (mask) {
            for (size_t i = 0; i < grads.size(); ++i) {
                if (!(*mask)[i]) grads[i] = 0.0;
            }
        }
        if (options.clip_norm > 0.0) {
            double sq = 0.0;
            for (double g : grads) sq += g * g;
            const double norm = std::sqrt(sq);
            if (norm > options.clip_norm) {
                const double scale = options.clip_norm / norm;
                for (double& g : grads) g *= scale;
            }
        }
        for (size_t i = 0; i < grads.size(); ++i) {
            model.parameters[i] -= learning_rate * grads[i];
        }
    }
    return result;
}

}  // namespace

TrainResult train_lm(const MoeModel& model, const std::vector<TokenSequence>& corpus,
                     int steps, double learning_rate, uint64_t seed,
                     const TrainOptions& options) {
    return sgd_train(model, corpus, steps, learning_rate, seed, options, nullptr);
}

TrainResult fine_tune_expert_subset(const MoeModel& model, const std::vector<int>& experts,
                                    const std::vector<TokenSequence>& data, int steps,
                                    double learning_rate, uint64_t seed,
                                    const TrainOptions& options) {
    if (experts.empty()) throw DomainError("expert subset is empty");
    for (int e : experts) {
        if (e < 0 || e >= model.config.experts_per_layer) {
            throw DomainError("expert index out of range: " + std::to_string(e));
        }
    }
    const ParamLayout layout(model.config);
    std::vector<uint8_t> mask(layout.total(), 0);
    for (int l = 0; l < model.config.num_layers; ++l) {
        for (int e : experts) {
            auto [begin, end] = layout.expert_range(l, e);
            std::fill(mask.begin() + begin, mask.begin() + end, uint8_t{1});
        }
    }
    return sgd_train(model, data, steps, learning_rate, seed, options, &mask);
}

double corpus_cross_entropy(const MoeModel& model,
                            const std::vector<TokenSequence>& corpus) {
    const double ppl = perplexity(model, corpus);
    return std::log(ppl);
}

}  // namespace routelab
