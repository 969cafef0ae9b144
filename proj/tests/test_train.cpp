// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <limits>

#include "helpers.hpp"
#include "routelab/errors.hpp"
#include "routelab/model.hpp"
#include "routelab/train.hpp"

using namespace routelab;
using test::small_config;

namespace {

std::vector<TokenSequence> toy_corpus() {
    // short repetitive sequences that a small model can memorize quickly
    return {{1, 2, 3, 4}, {5, 6, 7, 8}, {9, 10, 11, 12}, {1, 2, 3, 4, 5}, {6, 5, 4, 3}};
}

}  // namespace

TEST_CASE("training lowers corpus cross-entropy") {
    const MoeModel model = make_model(small_config(21));
    const auto corpus = toy_corpus();
    const double before = corpus_cross_entropy(model, corpus);
    const TrainResult result = train_lm(model, corpus, 300, 0.3, 1);
    const double after = corpus_cross_entropy(result.model, corpus);
    CHECK(after < before);
    CHECK(result.loss_trajectory.size() == 300);
    for (double loss : result.loss_trajectory) CHECK(std::isfinite(loss));
}

TEST_CASE("training is bitwise reproducible under a fixed seed") {
    const MoeModel model = make_model(small_config(22));
    const auto corpus = toy_corpus();
    const TrainResult a = train_lm(model, corpus, 120, 0.2, 77);
    const TrainResult b = train_lm(model, corpus, 120, 0.2, 77);
    CHECK(a.model.parameters == b.model.parameters);
    CHECK(a.loss_trajectory == b.loss_trajectory);

    const TrainResult c = train_lm(model, corpus, 120, 0.2, 78);
    CHECK(c.model.parameters != a.model.parameters);
}

TEST_CASE("training does not mutate the input model") {
    const MoeModel model = make_model(small_config(23));
    const std::vector<double> snapshot = model.parameters;
    train_lm(model, toy_corpus(), 50, 0.2, 1);
    CHECK(model.parameters == snapshot);
}

TEST_CASE("a non-finite training loss raises with the failing step") {
    MoeModel model = make_model(small_config(24));
    const ParamLayout layout(model.config);
    model.parameters[layout.output_head()] = std::numeric_limits<double>::quiet_NaN();
    bool threw = false;
    try {
        train_lm(model, toy_corpus(), 10, 0.1, 1);
    } catch (const TrainingDivergedError& e) {
        threw = true;
        CHECK(e.step() == 0);
        CHECK(std::string(e.what()).find("step 0") != std::string::npos);
    }
    CHECK(threw);
}

TEST_CASE("empty corpus raises DomainError") {
    const MoeModel model = make_model(small_config());
    CHECK_THROWS_AS(train_lm(model, {}, 10, 0.1, 1), DomainError);
    CHECK_THROWS_AS(fine_tune_expert_subset(model, {0}, {}, 10, 0.1, 1), DomainError);
}

TEST_CASE("expert-subset fine-tuning touches only the listed experts") {
    const MoeModel model = make_model(small_config(25));
    const auto corpus = toy_corpus();
    const std::vector<int> experts{1, 3};
    const TrainResult result = fine_tune_expert_subset(model, experts, corpus, 150, 0.3, 5);

    const ParamLayout layout(model.config);
    std::vector<bool> allowed(layout.total(), false);
    for (int l = 0; l < model.config.num_layers; ++l) {
        for (int e : experts) {
            auto [begin, end] = layout.expert_range(l, e);
            for (size_t i = begin; i < end; ++i) allowed[i] = true;
        }
    }
    bool any_changed = false;
    for (size_t i = 0; i < layout.total(); ++i) {
        if (allowed[i]) {
            any_changed = any_changed || result.model.parameters[i] != model.parameters[i];
        } else {
            CHECK(result.model.parameters[i] == model.parameters[i]);
        }
    }
    CHECK(any_changed);

    // the tuning data loss decreases
    CHECK(corpus_cross_entropy(result.model, corpus) <
          corpus_cross_entropy(model, corpus));
}

TEST_CASE("expert-subset fine-tuning validates the expert list") {
    const MoeModel model = make_model(small_config());
    CHECK_THROWS_AS(fine_tune_expert_subset(model, {}, toy_corpus(), 10, 0.1, 1),
                    DomainError);
    CHECK_THROWS_AS(fine_tune_expert_subset(model, {9}, toy_corpus(), 10, 0.1, 1),
                    DomainError);
}
