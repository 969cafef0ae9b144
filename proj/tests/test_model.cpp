// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <limits>

#include "routelab/errors.hpp"
#include "routelab/forward.hpp"
#include "routelab/model.hpp"

using namespace routelab;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.vocab_size = 16;
    c.embed_dim = 8;
    c.num_layers = 2;
    c.experts_per_layer = 4;
    c.top_k = 2;
    c.shared_experts = 1;
    c.expert_hidden_dim = 12;
    c.attention_heads = 2;
    c.max_seq_len = 12;
    c.init_seed = 3;
    return c;
}

}  // namespace

TEST_CASE("config validation rejects bad fields") {
    ModelConfig c = tiny_config();
    c.top_k = 5;
    CHECK_THROWS_AS(validate(c), DomainError);
    c = tiny_config();
    c.vocab_size = 4;
    CHECK_THROWS_AS(validate(c), DomainError);
    c = tiny_config();
    c.attention_heads = 3;  // does not divide embed_dim
    CHECK_THROWS_AS(validate(c), DomainError);
    c = tiny_config();
    c.shared_experts = -1;
    CHECK_THROWS_AS(validate(c), DomainError);
    CHECK_NOTHROW(validate(tiny_config()));
}

TEST_CASE("parameter count is a pure function of the config") {
    const ModelConfig c = tiny_config();
    const size_t expected =
        // embeddings
        16 * 8 + 12 * 8 +
        // per layer: 4 attention mats, router, 5 experts (4 routed + 1 shared)
        2 * (4 * 8 * 8 + 4 * 8 + 5 * 2 * 12 * 8) +
        // output head
        16 * 8;
    CHECK(parameter_count(c) == expected);
    CHECK(make_model(c).parameters.size() == expected);
}

TEST_CASE("identical config and seed give bit-identical parameters") {
    const MoeModel a = make_model(tiny_config());
    const MoeModel b = make_model(tiny_config());
    CHECK(a.parameters == b.parameters);

    ModelConfig other = tiny_config();
    other.init_seed = 4;
    const MoeModel c = make_model(other);
    CHECK(c.parameters != a.parameters);
}

TEST_CASE("expert parameter ranges are disjoint and cover w1+w2") {
    const ModelConfig c = tiny_config();
    const ParamLayout layout(c);
    for (int l = 0; l < c.num_layers; ++l) {
        for (int e = 0; e + 1 < c.experts_per_layer; ++e) {
            auto [b0, e0] = layout.expert_range(l, e);
            auto [b1, e1] = layout.expert_range(l, e + 1);
            CHECK(e0 == b1);
            CHECK(e0 - b0 == 2u * 12u * 8u);
            CHECK(e1 > b1);
        }
    }
}

TEST_CASE("router bias transform is out of place and validates indices") {
    const MoeModel model = make_model(tiny_config());
    const MoeModel biased = apply_router_bias(model, {1, 3}, 2.5);
    CHECK(model.bias_at(0, 1) == 0.0);
    for (int l = 0; l < model.config.num_layers; ++l) {
        CHECK(biased.bias_at(l, 1) == 2.5);
        CHECK(biased.bias_at(l, 3) == 2.5);
        CHECK(biased.bias_at(l, 0) == 0.0);
    }
    CHECK(biased.parameters == model.parameters);
    CHECK_THROWS_AS(apply_router_bias(model, {4}, 1.0), DomainError);
    CHECK_THROWS_AS(apply_router_bias(model, {0}, std::numeric_limits<double>::infinity()),
                    DomainError);
}

TEST_CASE("mask_experts enforces the top_k floor") {
    const MoeModel model = make_model(tiny_config());  // N=4, K=2
    CHECK_NOTHROW(mask_experts(model, {0, 1}));
    CHECK_THROWS_AS(mask_experts(model, {0, 1, 2}), DomainError);
    CHECK_THROWS_AS(mask_experts(model, {7}), DomainError);

    // masking composes with prior masks
    const MoeModel once = mask_experts(model, {0});
    CHECK_THROWS_AS(mask_experts(once, {1, 2}), DomainError);
}

TEST_CASE("checkpoint round trip preserves config, parameters, and masks") {
    const std::string path =
        (std::filesystem::temp_directory_path() / "routelab_ckpt_test.bin").string();
    MoeModel model = make_model(tiny_config());
    model = mask_experts(model, {2});
    model = apply_router_bias(model, {0}, 1.5);
    save_checkpoint(model, path);
    const MoeModel loaded = load_checkpoint(path);

    CHECK(loaded.config == model.config);
    CHECK(loaded.parameters.size() == model.parameters.size());
    for (size_t i = 0; i < model.parameters.size(); ++i) {
        CHECK(loaded.parameters[i] == doctest::Approx(model.parameters[i]).epsilon(1e-6));
    }
    CHECK(loaded.bias_at(0, 2) == -std::numeric_limits<double>::infinity());
    CHECK(loaded.bias_at(1, 0) == 1.5);

    // a reload of a saved model round-trips bit-exactly (f32 fixed point)
    const std::string path2 =
        (std::filesystem::temp_directory_path() / "routelab_ckpt_test2.bin").string();
    save_checkpoint(loaded, path2);
    const MoeModel again = load_checkpoint(path2);
    CHECK(again.parameters == loaded.parameters);
    CHECK(again.router_bias == loaded.router_bias);
    std::remove(path.c_str());
    std::remove(path2.c_str());
}

TEST_CASE("loading a missing checkpoint raises IoError") {
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/model.ckpt"), IoError);
}
