// SPDX-License-Identifier: Apache-2.0
#include "routelab/run_config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "routelab/errors.hpp"

namespace routelab {

namespace {

using nlohmann::json;

template <typename T>
void read_field(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

void check_known_keys(const json& j, const std::vector<std::string>& known,
                      const std::string& section) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
            throw IoError("unknown config key: " + section + it.key());
        }
    }
}

}  // namespace

RunConfig default_run_config() { return RunConfig{}; }

std::vector<ConfigDiagnostic> validate_run_config(const RunConfig& c) {
    std::vector<ConfigDiagnostic> issues;
    auto flag = [&](const std::string& field, const std::string& message) {
        issues.push_back({field, message});
    };

    const ModelConfig& m = c.model;
    if (m.vocab_size < 8) flag("model.vocab_size", "must be >= 8");
    if (m.embed_dim < 1) flag("model.embed_dim", "must be >= 1");
    if (m.num_layers < 1) flag("model.num_layers", "must be >= 1");
    if (m.experts_per_layer < 1) flag("model.experts_per_layer", "must be >= 1");
    if (m.top_k < 1 || m.top_k > m.experts_per_layer) {
        flag("model.top_k", "must be in [1, experts_per_layer]");
    }
    if (m.shared_experts < 0) flag("model.shared_experts", "must be >= 0");
    if (m.expert_hidden_dim < 1) flag("model.expert_hidden_dim", "must be >= 1");
    if (m.attention_heads < 1) {
        flag("model.attention_heads", "must be >= 1");
    } else if (m.embed_dim % m.attention_heads != 0) {
        flag("model.attention_heads", "must divide embed_dim");
    }
    if (m.max_seq_len < 1) flag("model.max_seq_len", "must be >= 1");

    if (c.task.harmful_topics < 4) flag("task.harmful_topics", "must be >= 4");
    if (c.task.benign_topics < 8) flag("task.benign_topics", "must be >= 8");
    if (c.task.profile_harmful < 1 || c.task.profile_harmful >= c.task.harmful_topics) {
        flag("task.profile_harmful", "must leave held-out harmful topics");
    }
    if (c.task.answer_len_min < 3 || c.task.answer_len_min > c.task.answer_len_max) {
        flag("task.answer_len_min", "must be in [3, answer_len_max]");
    }
    if (c.task.answer_len_max > 6) flag("task.answer_len_max", "must be <= 6");

    if (c.train.pretrain_steps < 1) flag("train.pretrain_steps", "must be >= 1");
    if (c.train.align_steps < 0) flag("train.align_steps", "must be >= 0");
    if (!(c.train.learning_rate > 0.0)) flag("train.learning_rate", "must be > 0");
    if (!(c.train.align_learning_rate > 0.0)) {
        flag("train.align_learning_rate", "must be > 0");
    }
    if (c.train.aux_loss_coef < 0.0) flag("train.aux_loss_coef", "must be >= 0");

    if (c.profile.resamples < 1) flag("profile.resamples", "must be >= 1");
    if (c.profile.subset_size < 1) flag("profile.subset_size", "must be >= 1");
    if (!(c.profile.lambda1 > 0.0)) flag("profile.lambda1", "must be > 0");
    if (!(c.profile.lambda2 > 0.0)) flag("profile.lambda2", "must be > 0");
    if (!(c.profile.lambda3 > 0.0)) flag("profile.lambda3", "must be > 0");
    if (c.profile.k_sup < 0) flag("profile.k_sup", "must be >= 0");
    if (c.profile.k_pro < 0) flag("profile.k_pro", "must be >= 0");
    if (c.profile.k_sup + c.profile.k_pro > m.experts_per_layer) {
        flag("profile.k_sup", "k_sup + k_pro must not exceed experts_per_layer");
    }
    for (int l : c.profile.layers) {
        if (l < 0 || l >= m.num_layers) {
            flag("profile.layers", "layer index out of range");
            break;
        }
    }

    const OptimizationConfig& o = c.attack.optimization;
    if (o.prefix_len < 1) flag("attack.prefix_len", "must be >= 1");
    if (o.phase1_iters < 0) flag("attack.phase1_iters", "must be >= 0");
    if (o.phase2_iters < 0) flag("attack.phase2_iters", "must be >= 0");
    if (!(o.alpha > 0.0)) flag("attack.alpha", "must be > 0");
    if (o.beta < 0.0) flag("attack.beta", "must be >= 0");
    if (o.candidate_pool < 1 || o.candidate_pool > m.vocab_size) {
        flag("attack.candidate_pool", "must be in [1, vocab_size]");
    }
    if (o.positions_per_iter < 1 || o.positions_per_iter > o.prefix_len) {
        flag("attack.positions_per_iter", "must be in [1, prefix_len]");
    }
    if (o.filler_token < 0 || o.filler_token >= m.vocab_size) {
        flag("attack.filler_token", "must be a vocabulary token");
    }
    if (c.attack.query_limit < 0) flag("attack.query_limit", "must be >= 0");

    if (c.eval.decode_budget < 1) flag("eval.decode_budget", "must be >= 1");
    if (c.eval.transfer_steps < 1) flag("eval.transfer_steps", "must be >= 1");
    if (!(c.eval.transfer_lr > 0.0)) flag("eval.transfer_lr", "must be > 0");
    if (c.eval.transfer_align_steps < 0) flag("eval.transfer_align_steps", "must be >= 0");

    if (c.defend.defense != "none" && c.defend.defense != "amplify_strong" &&
        c.defend.defense != "strengthen_weak") {
        flag("defend.defense", "must be none, amplify_strong, or strengthen_weak");
    }
    if (c.defend.strong_fraction < 0.0 || c.defend.strong_fraction > 1.0) {
        flag("defend.strong_fraction", "must be in [0, 1]");
    }
    if (c.defend.weak_fraction < 0.0 || c.defend.weak_fraction > 1.0) {
        flag("defend.weak_fraction", "must be in [0, 1]");
    }
    if (c.defend.steps < 1) flag("defend.steps", "must be >= 1");
    if (!(c.defend.lr > 0.0)) flag("defend.lr", "must be > 0");

    return issues;
}

std::string to_json(const RunConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["model"] = {{"vocab_size", c.model.vocab_size},
                  {"embed_dim", c.model.embed_dim},
                  {"num_layers", c.model.num_layers},
                  {"experts_per_layer", c.model.experts_per_layer},
                  {"top_k", c.model.top_k},
                  {"shared_experts", c.model.shared_experts},
                  {"expert_hidden_dim", c.model.expert_hidden_dim},
                  {"attention_heads", c.model.attention_heads},
                  {"max_seq_len", c.model.max_seq_len},
                  {"init_seed", c.model.init_seed}};
    j["task"] = {{"harmful_topics", c.task.harmful_topics},
                 {"benign_topics", c.task.benign_topics},
                 {"profile_harmful", c.task.profile_harmful},
                 {"answer_len_min", c.task.answer_len_min},
                 {"answer_len_max", c.task.answer_len_max}};
    j["train"] = {{"pretrain_steps", c.train.pretrain_steps},
                  {"align_steps", c.train.align_steps},
                  {"learning_rate", c.train.learning_rate},
                  {"align_learning_rate", c.train.align_learning_rate},
                  {"clip_norm", c.train.clip_norm},
                  {"aux_loss_coef", c.train.aux_loss_coef}};
    j["profile"] = {{"resamples", c.profile.resamples},
                    {"subset_size", c.profile.subset_size},
                    {"sampling", to_string(c.profile.sampling)},
                    {"aggregation", to_string(c.profile.aggregation)},
                    {"lambda1", c.profile.lambda1},
                    {"lambda2", c.profile.lambda2},
                    {"lambda3", c.profile.lambda3},
                    {"k_sup", c.profile.k_sup},
                    {"k_pro", c.profile.k_pro},
                    {"layers", c.profile.layers}};
    j["attack"] = {{"prefix_len", c.attack.optimization.prefix_len},
                   {"phase1_iters", c.attack.optimization.phase1_iters},
                   {"phase2_iters", c.attack.optimization.phase2_iters},
                   {"alpha", c.attack.optimization.alpha},
                   {"beta", c.attack.optimization.beta},
                   {"candidate_pool", c.attack.optimization.candidate_pool},
                   {"positions_per_iter", c.attack.optimization.positions_per_iter},
                   {"schedule", c.attack.optimization.schedule == PositionSchedule::RoundRobin
                                    ? "round_robin"
                                    : "random"},
                   {"filler_token", c.attack.optimization.filler_token},
                   {"mode", to_string(c.attack.mode)},
                   {"query_limit", c.attack.query_limit}};
    j["eval"] = {{"setting", to_string(c.eval.setting)},
                 {"decode_budget", c.eval.decode_budget},
                 {"transfer_steps", c.eval.transfer_steps},
                 {"transfer_lr", c.eval.transfer_lr},
                 {"transfer_align_steps", c.eval.transfer_align_steps}};
    j["defend"] = {{"defense", c.defend.defense},
                   {"gamma", c.defend.gamma},
                   {"strong_fraction", c.defend.strong_fraction},
                   {"weak_fraction", c.defend.weak_fraction},
                   {"steps", c.defend.steps},
                   {"lr", c.defend.lr}};
    return j.dump(2);
}

RunConfig run_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw IoError(std::string("config parse error: ") + e.what());
    }
    RunConfig c;
    check_known_keys(
        j, {"seed", "model", "task", "train", "profile", "attack", "eval", "defend"}, "");
    read_field(j, "seed", c.seed);

    if (j.contains("model")) {
        const json& s = j.at("model");
        check_known_keys(s,
                         {"vocab_size", "embed_dim", "num_layers", "experts_per_layer",
                          "top_k", "shared_experts", "expert_hidden_dim", "attention_heads",
                          "max_seq_len", "init_seed"},
                         "model.");
        read_field(s, "vocab_size", c.model.vocab_size);
        read_field(s, "embed_dim", c.model.embed_dim);
        read_field(s, "num_layers", c.model.num_layers);
        read_field(s, "experts_per_layer", c.model.experts_per_layer);
        read_field(s, "top_k", c.model.top_k);
        read_field(s, "shared_experts", c.model.shared_experts);
        read_field(s, "expert_hidden_dim", c.model.expert_hidden_dim);
        read_field(s, "attention_heads", c.model.attention_heads);
        read_field(s, "max_seq_len", c.model.max_seq_len);
        read_field(s, "init_seed", c.model.init_seed);
    }
    if (j.contains("task")) {
        const json& s = j.at("task");
        check_known_keys(s,
                         {"harmful_topics", "benign_topics", "profile_harmful",
                          "answer_len_min", "answer_len_max"},
                         "task.");
        read_field(s, "harmful_topics", c.task.harmful_topics);
        read_field(s, "benign_topics", c.task.benign_topics);
        read_field(s, "profile_harmful", c.task.profile_harmful);
        read_field(s, "answer_len_min", c.task.answer_len_min);
        read_field(s, "answer_len_max", c.task.answer_len_max);
    }
    if (j.contains("train")) {
        const json& s = j.at("train");
        check_known_keys(s,
                         {"pretrain_steps", "align_steps", "learning_rate",
                          "align_learning_rate", "clip_norm", "aux_loss_coef"},
                         "train.");
        read_field(s, "pretrain_steps", c.train.pretrain_steps);
        read_field(s, "align_steps", c.train.align_steps);
        read_field(s, "learning_rate", c.train.learning_rate);
        read_field(s, "align_learning_rate", c.train.align_learning_rate);
        read_field(s, "clip_norm", c.train.clip_norm);
        read_field(s, "aux_loss_coef", c.train.aux_loss_coef);
    }
    if (j.contains("profile")) {
        const json& s = j.at("profile");
        check_known_keys(s,
                         {"resamples", "subset_size", "sampling", "aggregation", "lambda1",
                          "lambda2", "lambda3", "k_sup", "k_pro", "layers"},
                         "profile.");
        read_field(s, "resamples", c.profile.resamples);
        read_field(s, "subset_size", c.profile.subset_size);
        if (s.contains("sampling")) {
            const std::string v = s.at("sampling").get<std::string>();
            if (v == "without_replacement") {
                c.profile.sampling = SamplingMode::WithoutReplacement;
            } else if (v == "with_replacement") {
                c.profile.sampling = SamplingMode::WithReplacement;
            } else {
                throw IoError("profile.sampling: unknown value " + v);
            }
        }
        if (s.contains("aggregation")) {
            const std::string v = s.at("aggregation").get<std::string>();
            if (v == "rate") {
                c.profile.aggregation = AggregationMode::Rate;
            } else if (v == "binary_any") {
                c.profile.aggregation = AggregationMode::BinaryAny;
            } else {
                throw IoError("profile.aggregation: unknown value " + v);
            }
        }
        read_field(s, "lambda1", c.profile.lambda1);
        read_field(s, "lambda2", c.profile.lambda2);
        read_field(s, "lambda3", c.profile.lambda3);
        read_field(s, "k_sup", c.profile.k_sup);
        read_field(s, "k_pro", c.profile.k_pro);
        read_field(s, "layers", c.profile.layers);
    }
    if (j.contains("attack")) {
        const json& s = j.at("attack");
        check_known_keys(s,
                         {"prefix_len", "phase1_iters", "phase2_iters", "alpha", "beta",
                          "candidate_pool", "positions_per_iter", "schedule", "filler_token",
                          "mode", "query_limit"},
                         "attack.");
        read_field(s, "prefix_len", c.attack.optimization.prefix_len);
        read_field(s, "phase1_iters", c.attack.optimization.phase1_iters);
        read_field(s, "phase2_iters", c.attack.optimization.phase2_iters);
        read_field(s, "alpha", c.attack.optimization.alpha);
        read_field(s, "beta", c.attack.optimization.beta);
        read_field(s, "candidate_pool", c.attack.optimization.candidate_pool);
        read_field(s, "positions_per_iter", c.attack.optimization.positions_per_iter);
        if (s.contains("schedule")) {
            const std::string v = s.at("schedule").get<std::string>();
            if (v == "round_robin") {
                c.attack.optimization.schedule = PositionSchedule::RoundRobin;
            } else if (v == "random") {
                c.attack.optimization.schedule = PositionSchedule::Random;
            } else {
                throw IoError("attack.schedule: unknown value " + v);
            }
        }
        read_field(s, "filler_token", c.attack.optimization.filler_token);
        if (s.contains("mode")) {
            c.attack.mode = objective_mode_from_string(s.at("mode").get<std::string>());
        }
        read_field(s, "query_limit", c.attack.query_limit);
    }
    if (j.contains("eval")) {
        const json& s = j.at("eval");
        check_known_keys(s,
                         {"setting", "decode_budget", "transfer_steps", "transfer_lr",
                          "transfer_align_steps"},
                         "eval.");
        if (s.contains("setting")) {
            c.eval.setting = setting_from_string(s.at("setting").get<std::string>());
        }
        read_field(s, "decode_budget", c.eval.decode_budget);
        read_field(s, "transfer_steps", c.eval.transfer_steps);
        read_field(s, "transfer_lr", c.eval.transfer_lr);
        read_field(s, "transfer_align_steps", c.eval.transfer_align_steps);
    }
    if (j.contains("defend")) {
        const json& s = j.at("defend");
        check_known_keys(
            s, {"defense", "gamma", "strong_fraction", "weak_fraction", "steps", "lr"},
            "defend.");
        read_field(s, "defense", c.defend.defense);
        read_field(s, "gamma", c.defend.gamma);
        read_field(s, "strong_fraction", c.defend.strong_fraction);
        read_field(s, "weak_fraction", c.defend.weak_fraction);
        read_field(s, "steps", c.defend.steps);
        read_field(s, "lr", c.defend.lr);
    }
    return c;
}

std::pair<RunConfig, std::vector<ConfigDiagnostic>> validate_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    std::ostringstream buffer;
    buffer << in.rdbuf();
    RunConfig config = run_config_from_json(buffer.str());
    return {config, validate_run_config(config)};
}

}  // namespace routelab
