// SPDX-License-Identifier: Apache-2.0
#include "routelab/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "routelab/errors.hpp"
#include "routelab/rng.hpp"

namespace routelab {

void validate(const ModelConfig& c) {
    auto require = [](bool ok, const std::string& msg) {
        if (!ok) throw DomainError("model config: " + msg);
    };
    require(c.vocab_size >= 8, "vocab_size must be >= 8");
    require(c.embed_dim >= 1, "embed_dim must be >= 1");
    require(c.num_layers >= 1, "num_layers must be >= 1");
    require(c.experts_per_layer >= 1, "experts_per_layer must be >= 1");
    require(c.top_k >= 1 && c.top_k <= c.experts_per_layer,
            "top_k must be in [1, experts_per_layer]");
    require(c.shared_experts >= 0, "shared_experts must be >= 0");
    require(c.expert_hidden_dim >= 1, "expert_hidden_dim must be >= 1");
    require(c.attention_heads >= 1, "attention_heads must be >= 1");
    require(c.embed_dim % c.attention_heads == 0,
            "embed_dim must be divisible by attention_heads");
    require(c.max_seq_len >= 1, "max_seq_len must be >= 1");
}

ParamLayout::ParamLayout(const ModelConfig& c) {
    validate(c);
    hidden_ = c.expert_hidden_dim;
    embed_ = c.embed_dim;
    experts_ = c.experts_per_layer;
    dd_ = static_cast<size_t>(embed_) * embed_;
    expert_size_ = 2 * static_cast<size_t>(hidden_) * embed_;

    size_t cursor = 0;
    tok_emb_ = cursor;
    cursor += static_cast<size_t>(c.vocab_size) * embed_;
    pos_emb_ = cursor;
    cursor += static_cast<size_t>(c.max_seq_len) * embed_;

    const size_t router_size = static_cast<size_t>(experts_) * embed_;
    const size_t layer_size =
        4 * dd_ + router_size + (experts_ + c.shared_experts) * expert_size_;
    layer_base_.resize(c.num_layers);
    for (int l = 0; l < c.num_layers; ++l) {
        layer_base_[l] = cursor;
        cursor += layer_size;
    }

    out_head_ = cursor;
    cursor += static_cast<size_t>(c.vocab_size) * embed_;
    total_ = cursor;
}

size_t ParamLayout::expert_w1(int layer, int expert) const {
    return layer_base_[layer] + 4 * dd_ + static_cast<size_t>(experts_) * embed_ +
           expert * expert_size_;
}

size_t ParamLayout::expert_w2(int layer, int expert) const {
    return expert_w1(layer, expert) + static_cast<size_t>(hidden_) * embed_;
}

size_t ParamLayout::shared_w1(int layer, int idx) const {
    return expert_w1(layer, experts_ + idx);
}

size_t ParamLayout::shared_w2(int layer, int idx) const {
    return shared_w1(layer, idx) + static_cast<size_t>(hidden_) * embed_;
}

std::pair<size_t, size_t> ParamLayout::expert_range(int layer, int expert) const {
    size_t begin = expert_w1(layer, expert);
    return {begin, begin + expert_size_};
}

size_t parameter_count(const ModelConfig& config) {
    return ParamLayout(config).total();
}

namespace {

void fill_gaussian(std::vector<double>& params, size_t begin, size_t count, double std,
                   Rng& rng) {
    for (size_t i = 0; i < count; ++i) {
        params[begin + i] = std * rng.next_gaussian();
    }
}

}  // namespace

MoeModel make_model(const ModelConfig& config) {
    validate(config);
    ParamLayout layout(config);

    MoeModel model;
    model.config = config;
    model.parameters.assign(layout.total(), 0.0);
    model.router_bias.assign(
        static_cast<size_t>(config.num_layers) * config.experts_per_layer, 0.0);

    Rng rng(derive_seed(config.init_seed, /*tag=*/0x6d6f6465));

    const double emb_std = 0.08;
    const double mat_std = 1.0 / std::sqrt(static_cast<double>(config.embed_dim));
    const double hid_std = 1.0 / std::sqrt(static_cast<double>(config.expert_hidden_dim));
    const size_t dd = static_cast<size_t>(config.embed_dim) * config.embed_dim;
    const size_t w1 = static_cast<size_t>(config.expert_hidden_dim) * config.embed_dim;

    fill_gaussian(model.parameters, layout.token_embedding(),
                  static_cast<size_t>(config.vocab_size) * config.embed_dim, emb_std, rng);
    fill_gaussian(model.parameters, layout.position_embedding(),
                  static_cast<size_t>(config.max_seq_len) * config.embed_dim, emb_std, rng);
    for (int l = 0; l < config.num_layers; ++l) {
        fill_gaussian(model.parameters, layout.attn_wq(l), 4 * dd, mat_std, rng);
        fill_gaussian(model.parameters, layout.router_w(l),
                      static_cast<size_t>(config.experts_per_layer) * config.embed_dim,
                      mat_std, rng);
        for (int e = 0; e < config.experts_per_layer + config.shared_experts; ++e) {
            fill_gaussian(model.parameters, layout.expert_w1(l, e), w1, mat_std, rng);
            fill_gaussian(model.parameters, layout.expert_w2(l, e), w1, hid_std, rng);
        }
    }
    fill_gaussian(model.parameters, layout.output_head(),
                  static_cast<size_t>(config.vocab_size) * config.embed_dim, mat_std, rng);
    return model;
}

MoeModel apply_router_bias(const MoeModel& model, const std::vector<int>& strong_set,
                           double gamma) {
    if (!std::isfinite(gamma)) throw DomainError("router bias gamma must be finite");
    for (int e : strong_set) {
        if (e < 0 || e >= model.config.experts_per_layer) {
            throw DomainError("router bias expert index out of range: " + std::to_string(e));
        }
    }
    MoeModel out = model;
    for (int l = 0; l < model.config.num_layers; ++l) {
        for (int e : strong_set) {
            out.router_bias[static_cast<size_t>(l) * model.config.experts_per_layer + e] +=
                gamma;
        }
    }
    return out;
}

MoeModel mask_experts(const MoeModel& model, const std::vector<int>& masked) {
    const int n = model.config.experts_per_layer;
    std::vector<bool> is_masked(n, false);
    for (int e : masked) {
        if (e < 0 || e >= n) {
            throw DomainError("mask expert index out of range: " + std::to_string(e));
        }
        is_masked[e] = true;
    }
    MoeModel out = model;
    for (int l = 0; l < model.config.num_layers; ++l) {
        int remaining = 0;
        for (int e = 0; e < n; ++e) {
            size_t idx = static_cast<size_t>(l) * n + e;
            if (is_masked[e]) {
                out.router_bias[idx] = -std::numeric_limits<double>::infinity();
            }
            if (out.router_bias[idx] != -std::numeric_limits<double>::infinity()) {
                ++remaining;
            }
        }
        if (remaining < model.config.top_k) {
            throw DomainError("masking would leave fewer than top_k selectable experts");
        }
    }
    return out;
}

namespace {

nlohmann::json config_to_json(const ModelConfig& c) {
    return nlohmann::json{{"vocab_size", c.vocab_size},
                          {"embed_dim", c.embed_dim},
                          {"num_layers", c.num_layers},
                          {"experts_per_layer", c.experts_per_layer},
                          {"top_k", c.top_k},
                          {"shared_experts", c.shared_experts},
                          {"expert_hidden_dim", c.expert_hidden_dim},
                          {"attention_heads", c.attention_heads},
                          {"max_seq_len", c.max_seq_len},
                          {"init_seed", c.init_seed}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.num_layers = j.at("num_layers").get<int>();
    c.experts_per_layer = j.at("experts_per_layer").get<int>();
    c.top_k = j.at("top_k").get<int>();
    c.shared_experts = j.at("shared_experts").get<int>();
    c.expert_hidden_dim = j.at("expert_hidden_dim").get<int>();
    c.attention_heads = j.at("attention_heads").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.init_seed = j.at("init_seed").get<uint64_t>();
    return c;
}

void write_f32(std::ostream& out, const std::vector<double>& values) {
    static_assert(std::endian::native == std::endian::little,
                  "checkpoint writer assumes a little-endian host");
    std::vector<float> buf(values.size());
    for (size_t i = 0; i < values.size(); ++i) buf[i] = static_cast<float>(values[i]);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

void read_f32(std::istream& in, std::vector<double>& values, size_t count) {
    std::vector<float> buf(count);
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(count * sizeof(float)));
    if (!in) throw IoError("checkpoint payload truncated");
    values.resize(count);
    for (size_t i = 0; i < count; ++i) values[i] = static_cast<double>(buf[i]);
}

}  // namespace

void save_checkpoint(const MoeModel& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    nlohmann::json header{{"format", "routelab-checkpoint"},
                          {"version", 1},
                          {"config", config_to_json(model.config)}};
    out << header.dump() << '\n';
    write_f32(out, model.parameters);
    write_f32(out, model.router_bias);
    if (!out) throw IoError("failed writing checkpoint: " + path);
}

MoeModel load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    std::string header_line;
    if (!std::getline(in, header_line)) throw IoError("checkpoint missing header: " + path);
    nlohmann::json header = nlohmann::json::parse(header_line);
    if (header.at("format") != "routelab-checkpoint" || header.at("version") != 1) {
        throw IoError("unsupported checkpoint format: " + path);
    }
    MoeModel model;
    model.config = config_from_json(header.at("config"));
    validate(model.config);
    ParamLayout layout(model.config);
    read_f32(in, model.parameters, layout.total());
    read_f32(in, model.router_bias,
             static_cast<size_t>(model.config.num_layers) * model.config.experts_per_layer);
    return model;
}

}  // namespace routelab
