// SPDX-License-Identifier: Apache-2.0
#include "routelab/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "routelab/errors.hpp"
#include "routelab/rng.hpp"
#include "routelab/train.hpp"

namespace routelab {

namespace {

namespace fs = std::filesystem;

// stage tags for seed derivation
constexpr uint64_t kTagTask = 1;
constexpr uint64_t kTagCorpora = 2;
constexpr uint64_t kTagInit = 3;
constexpr uint64_t kTagPretrain = 4;
constexpr uint64_t kTagAlign = 5;
constexpr uint64_t kTagProfile = 6;
constexpr uint64_t kTagAttack = 7;
constexpr uint64_t kTagEval = 8;
constexpr uint64_t kTagDefend = 9;

std::string read_text(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open file: " + path);
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open file for writing: " + path);
    out << text;
    if (!out) throw IoError("failed writing file: " + path);
}

std::string join(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

uint64_t stage_seed(const RunConfig& config, uint64_t tag) {
    return derive_seed(config.seed, tag);
}

void stage_gen_data(const RunConfig& config, const std::string& out, bool quiet,
                    std::ostream& log) {
    const SyntheticTaskSpec spec = make_task_spec(config.task, config.model.vocab_size,
                                                  stage_seed(config, kTagTask));
    const CorporaBundle bundle =
        generate_synthetic_task(spec, stage_seed(config, kTagCorpora));

    write_text(join(out, "task.json"), to_json(spec));
    save_corpus(bundle.pretrain, join(out, "pretrain.txt"));
    save_corpus(bundle.alignment, join(out, "alignment.txt"));
    save_corpus(bundle.harm, join(out, "harm.txt"));
    save_corpus(bundle.comp, join(out, "comp.txt"));
    save_corpus(bundle.benign, join(out, "benign.txt"));
    save_corpus(bundle.utility, join(out, "utility.txt"));
    save_corpus(bundle.facts, join(out, "facts.txt"));
    save_corpus(bundle.replay, join(out, "replay.txt"));
    std::vector<TokenSequence> eval_queries;
    for (const EvalQuery& q : bundle.eval) eval_queries.push_back(q.query);
    save_corpus(eval_queries, join(out, "eval.txt"));

    if (!quiet) {
        log << "gen-data: " << spec.topics.size() << " topics, " << bundle.pretrain.size()
            << " pretrain items, " << bundle.eval.size() << " held-out eval queries\n";
    }
}

void stage_train(const RunConfig& config, const std::string& out, bool quiet,
                 std::ostream& log) {
    auto pretrain = load_corpus(join(out, "pretrain.txt"));
    const auto facts = load_corpus(join(out, "facts.txt"));
    pretrain.insert(pretrain.end(), facts.begin(), facts.end());

    // safety phase: refusal pairs interleaved with replay items so the
    // refusal gate trains without erasing the underlying answers
    auto alignment = load_corpus(join(out, "alignment.txt"));
    const auto replay = load_corpus(join(out, "replay.txt"));
    alignment.insert(alignment.end(), replay.begin(), replay.end());

    ModelConfig model_config = config.model;
    model_config.init_seed = derive_seed(config.seed ^ config.model.init_seed, kTagInit);
    MoeModel model = make_model(model_config);

    TrainOptions options;
    options.clip_norm = config.train.clip_norm;
    options.aux_loss_coef = config.train.aux_loss_coef;

    TrainResult pre = train_lm(model, pretrain, config.train.pretrain_steps,
                               config.train.learning_rate, stage_seed(config, kTagPretrain),
                               options);
    save_checkpoint(pre.model, join(out, "base.ckpt"));

    TrainResult aligned = pre;
    if (config.train.align_steps > 0) {
        aligned = train_lm(pre.model, alignment, config.train.align_steps,
                           config.train.align_learning_rate, stage_seed(config, kTagAlign),
                           options);
    }
    save_checkpoint(aligned.model, join(out, "model.ckpt"));

    std::ostringstream csv;
    csv.precision(17);
    csv << "phase,step,loss\n";
    for (size_t i = 0; i < pre.loss_trajectory.size(); ++i) {
        csv << "pretrain," << i << ',' << pre.loss_trajectory[i] << '\n';
    }
    if (config.train.align_steps > 0) {
        for (size_t i = 0; i < aligned.loss_trajectory.size(); ++i) {
            csv << "align," << i << ',' << aligned.loss_trajectory[i] << '\n';
        }
    }
    write_text(join(out, "train_loss.csv"), csv.str());

    if (!quiet) {
        log << "train: pretrain loss " << pre.loss_trajectory.front() << " -> "
            << pre.loss_trajectory.back();
        if (config.train.align_steps > 0) {
            log << ", align loss " << aligned.loss_trajectory.front() << " -> "
                << aligned.loss_trajectory.back();
        }
        log << '\n';
    }
}

ActivationFrequency profile_one(const MoeModel& model, DatasetRole role,
                                const std::vector<TokenSequence>& items,
                                const RunConfig& config, uint64_t seed) {
    ProfileDataset dataset{role, items};
    const int m = std::min<int>(config.profile.subset_size,
                                static_cast<int>(dataset.items.size()));
    return estimate_activation_frequency(model, dataset, config.profile.resamples, m,
                                         config.profile.sampling,
                                         config.profile.aggregation, seed,
                                         config.profile.layers);
}

void stage_profile(const RunConfig& config, const std::string& out, bool quiet,
                   std::ostream& log) {
    const MoeModel model = load_checkpoint(join(out, "model.ckpt"));
    const uint64_t seed = stage_seed(config, kTagProfile);

    const ActivationFrequency harm = profile_one(
        model, DatasetRole::Harm, load_corpus(join(out, "harm.txt")), config, seed);
    const ActivationFrequency comp = profile_one(
        model, DatasetRole::Comp, load_corpus(join(out, "comp.txt")), config, seed + 1);
    const ActivationFrequency benign = profile_one(
        model, DatasetRole::Benign, load_corpus(join(out, "benign.txt")), config, seed + 2);

    write_text(join(out, "freq_harm.json"), to_json(harm));
    write_text(join(out, "freq_comp.json"), to_json(comp));
    write_text(join(out, "freq_benign.json"), to_json(benign));

    RoutingScore score =
        compute_routing_score(harm, comp, benign, config.profile.lambda1,
                              config.profile.lambda2, config.profile.lambda3);
    auto [suppressed, promoted] =
        derive_expert_sets(score, config.profile.k_sup, config.profile.k_pro);
    score.suppressed = suppressed;
    score.promoted = promoted;
    write_text(join(out, "score.json"), to_json(score));

    if (!quiet) {
        log << "profile: suppressed {";
        for (size_t i = 0; i < suppressed.size(); ++i) {
            log << (i ? " " : "") << suppressed[i];
        }
        log << "} promoted {";
        for (size_t i = 0; i < promoted.size(); ++i) log << (i ? " " : "") << promoted[i];
        log << "}\n";
    }
}

void stage_attack(const RunConfig& config, const std::string& out, bool quiet,
                  std::ostream& log) {
    const MoeModel model = load_checkpoint(join(out, "model.ckpt"));
    const SyntheticTaskSpec task = task_spec_from_json(read_text(join(out, "task.json")));
    const RoutingScore score = routing_score_from_json(read_text(join(out, "score.json")));
    const std::vector<EvalQuery> queries = eval_queries_for(task, config.attack.query_limit);
    if (queries.empty()) throw DomainError("task has no held-out eval queries");

    nlohmann::json prefixes = nlohmann::json::array();
    std::ostringstream records;
    records.precision(17);
    records << "query_id,iteration,mode,active_objective,l_out,l_route,accepted,position\n";

    for (size_t i = 0; i < queries.size(); ++i) {
        const EvalQuery& q = queries[i];
        TokenSequence continuation;
        continuation.push_back(task.affirm_token);
        continuation.insert(continuation.end(), q.answer.begin(), q.answer.end());

        OptimizationConfig opt = config.attack.optimization;
        opt.seed = derive_seed(stage_seed(config, kTagAttack), static_cast<uint64_t>(i));
        auto [prefix, record] = optimize_prefix(model, q.query, continuation, score, opt,
                                                config.attack.mode, config.profile.layers);

        TokenSequence attacked = prefix.tokens;
        attacked.insert(attacked.end(), q.query.begin(), q.query.end());
        const JointLoss final_losses = joint_loss_value(model, attacked, continuation,
                                                        score, 1.0, 1.0,
                                                        config.profile.layers);
        prefixes.push_back({{"topic_id", q.topic_id},
                            {"tokens", prefix.tokens},
                            {"final_l_out", final_losses.out},
                            {"final_l_route", final_losses.route}});
        for (const IterationRecord& step : record.steps) {
            records << q.topic_id << ',' << step.iteration << ','
                    << to_string(record.mode) << ',' << step.objective << ',' << step.l_out
                    << ',' << step.l_route << ',' << (step.accepted ? 1 : 0) << ','
                    << step.position << '\n';
        }
        if (!quiet) {
            log << "attack: query " << q.topic_id << " l_out " << final_losses.out
                << " l_route " << final_losses.route << '\n';
        }
    }

    nlohmann::json doc{{"mode", to_string(config.attack.mode)},
                       {"prefix_len", config.attack.optimization.prefix_len},
                       {"alpha", config.attack.optimization.alpha},
                       {"beta", config.attack.optimization.beta},
                       {"prefixes", prefixes}};
    write_text(join(out, "prefixes.json"), doc.dump(2));
    write_text(join(out, "attack_records.csv"), records.str());
}

std::vector<AdversarialPrefix> load_prefixes(const std::string& path,
                                             const std::vector<EvalQuery>& queries) {
    nlohmann::json doc = nlohmann::json::parse(read_text(path));
    const nlohmann::json& arr = doc.at("prefixes");
    if (arr.size() != queries.size()) {
        throw DomainError("prefix file does not match the evaluation set size");
    }
    std::vector<AdversarialPrefix> prefixes;
    for (size_t i = 0; i < arr.size(); ++i) {
        if (arr[i].at("topic_id").get<int>() != queries[i].topic_id) {
            throw DomainError("prefix file topic order does not match the task");
        }
        prefixes.push_back({arr[i].at("tokens").get<TokenSequence>()});
    }
    return prefixes;
}

SuiteOptions suite_options_for(const RunConfig& config, uint64_t seed) {
    SuiteOptions options;
    options.optimization = config.attack.optimization;
    options.mode = config.attack.mode;
    options.setting = config.eval.setting;
    options.decode_budget = config.eval.decode_budget;
    options.route_layers = config.profile.layers;
    options.seed = seed;
    return options;
}

void stage_eval(const RunConfig& config, const std::string& out, bool quiet,
                std::ostream& log) {
    const MoeModel surrogate = load_checkpoint(join(out, "model.ckpt"));
    const SyntheticTaskSpec task = task_spec_from_json(read_text(join(out, "task.json")));
    const RoutingScore score = routing_score_from_json(read_text(join(out, "score.json")));
    const std::vector<EvalQuery> queries = eval_queries_for(task, config.attack.query_limit);
    const std::vector<AdversarialPrefix> prefixes =
        load_prefixes(join(out, "prefixes.json"), queries);
    const auto utility = load_corpus(join(out, "utility.txt"));

    const uint64_t seed = stage_seed(config, kTagEval);
    MoeModel target = surrogate;
    if (config.eval.setting != Setting::WhiteBox) {
        TransferOptions transfer;
        transfer.steps = config.eval.transfer_steps;
        transfer.lr = config.eval.transfer_lr;
        transfer.align_steps = config.eval.transfer_align_steps;
        const std::string corpus_file =
            config.eval.setting == Setting::GrayBox ? "benign.txt" : "pretrain.txt";
        if (config.eval.setting == Setting::BlackBox) {
            transfer.alignment = load_corpus(join(out, "alignment.txt"));
        }
        target = build_transfer_target(surrogate, config.eval.setting,
                                       load_corpus(join(out, corpus_file)), seed, transfer);
    }

    const SuiteOptions options = suite_options_for(config, seed);
    const EvalReport attack_report =
        evaluate_prefixes(target, prefixes, queries, score, task, utility, options,
                          to_string(config.attack.mode));
    const EvalReport direct_report = evaluate_prefixes(target, {}, queries, score, task,
                                                       utility, options,
                                                       "direct_instruction");

    write_text(join(out, "report.json"), to_json(attack_report));
    write_text(join(out, "report_direct.json"), to_json(direct_report));
    write_text(join(out, "report.csv"), reports_to_csv({attack_report, direct_report}));

    if (!quiet) {
        log << "eval[" << to_string(config.eval.setting) << "]: attack asr "
            << attack_report.asr << " refusal " << attack_report.refusal_rate
            << " route_loss " << attack_report.mean_routing_loss << "; direct asr "
            << direct_report.asr << " refusal " << direct_report.refusal_rate << '\n';
    }
}

void stage_defend(const RunConfig& config, const std::string& out, bool quiet,
                  std::ostream& log) {
    const MoeModel target = load_checkpoint(join(out, "model.ckpt"));
    const SyntheticTaskSpec task = task_spec_from_json(read_text(join(out, "task.json")));
    const RoutingScore score = routing_score_from_json(read_text(join(out, "score.json")));
    const std::vector<EvalQuery> queries = eval_queries_for(task, config.attack.query_limit);
    const std::vector<AdversarialPrefix> prefixes =
        load_prefixes(join(out, "prefixes.json"), queries);
    const auto utility = load_corpus(join(out, "utility.txt"));
    const ActivationFrequency harm =
        activation_frequency_from_json(read_text(join(out, "freq_harm.json")));

    const int n = config.model.experts_per_layer;
    Defense defense = DefenseNone{};
    if (config.defend.defense == "amplify_strong") {
        const int k = std::max(1, static_cast<int>(std::lround(config.defend.strong_fraction * n)));
        defense = DefenseAmplifyStrong{top_experts_by_frequency(harm.values, k),
                                       config.defend.gamma};
    } else if (config.defend.defense == "strengthen_weak") {
        const int k = std::max(1, static_cast<int>(std::lround(config.defend.weak_fraction * n)));
        defense = DefenseStrengthenWeak{bottom_experts_by_frequency(harm.values, k),
                                        load_corpus(join(out, "alignment.txt")),
                                        config.defend.steps, config.defend.lr,
                                        stage_seed(config, kTagDefend)};
    }

    const SuiteOptions options = suite_options_for(config, stage_seed(config, kTagDefend));
    const DefenseOutcome outcome = evaluate_defense(target, defense, prefixes, queries,
                                                    score, task, utility, options);

    nlohmann::json doc{{"defense", config.defend.defense},
                       {"undefended", nlohmann::json::parse(to_json(outcome.undefended))},
                       {"defended", nlohmann::json::parse(to_json(outcome.defended))}};
    write_text(join(out, "defense_report.json"), doc.dump(2));
    write_text(join(out, "defense.csv"),
               reports_to_csv({outcome.undefended, outcome.defended}));

    if (!quiet) {
        log << "defend[" << config.defend.defense << "]: asr " << outcome.undefended.asr
            << " -> " << outcome.defended.asr << ", utility ppl "
            << outcome.undefended.utility_perplexity << " -> "
            << outcome.defended.utility_perplexity << '\n';
    }
}

void stage_report(const std::string& out, const std::vector<std::string>& args, bool quiet,
                  std::ostream& log) {
    if (args.empty()) throw DomainError("report needs at least one report JSON path");
    std::vector<EvalReport> reports;
    for (const std::string& path : args) {
        reports.push_back(eval_report_from_json(read_text(path)));
    }
    const std::string csv = reports_to_csv(reports);
    write_text(join(out, "merged.csv"), csv);
    if (!quiet) log << csv;
}

}  // namespace

bool is_known_stage(const std::string& stage) {
    return stage == "gen-data" || stage == "train" || stage == "profile" ||
           stage == "attack" || stage == "eval" || stage == "defend" || stage == "report";
}

std::vector<EvalQuery> eval_queries_for(const SyntheticTaskSpec& spec, int limit) {
    std::vector<EvalQuery> queries;
    for (const TopicSpec& topic : spec.topics) {
        if (topic.harmful && !topic.profiling) {
            queries.push_back({topic.id, topic.query, topic.answer});
        }
    }
    if (limit > 0 && static_cast<int>(queries.size()) > limit) queries.resize(limit);
    return queries;
}

void run_stage(const std::string& stage, const RunConfig& config,
               const std::string& out_dir, const std::vector<std::string>& extra_args,
               bool quiet, std::ostream& log) {
    if (!is_known_stage(stage)) throw DomainError("unknown stage: " + stage);
    fs::create_directories(out_dir);
    if (stage == "gen-data") {
        stage_gen_data(config, out_dir, quiet, log);
    } else if (stage == "train") {
        stage_train(config, out_dir, quiet, log);
    } else if (stage == "profile") {
        stage_profile(config, out_dir, quiet, log);
    } else if (stage == "attack") {
        stage_attack(config, out_dir, quiet, log);
    } else if (stage == "eval") {
        stage_eval(config, out_dir, quiet, log);
    } else if (stage == "defend") {
        stage_defend(config, out_dir, quiet, log);
    } else {
        stage_report(out_dir, extra_args, quiet, log);
    }
}

}  // namespace routelab
