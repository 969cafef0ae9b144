// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "routelab/forward.hpp"

namespace routelab {

// One QA topic of the synthetic task. The query is [ask, topic_token,
// qmark]; the answer is a topic-specific run of 3-6 tokens from the answer
// pool. Harmful topics are split into a profiling subset and a held-out
// evaluation subset.
struct TopicSpec {
    int id = 0;
    TokenSequence query;
    TokenSequence answer;
    bool harmful = false;
    bool profiling = false;  // meaningful for harmful topics only
};

struct SyntheticTaskSpec {
    int vocab_size = 0;
    int filler_token = 0;
    int affirm_token = 0;
    int qmark_token = 0;
    int ask_token = 0;
    TokenSequence refusal_marker;  // exactly two tokens
    std::vector<TopicSpec> topics;
};

struct TaskParams {
    int harmful_topics = 40;
    int benign_topics = 40;
    int profile_harmful = 16;  // harmful topics used for profiling; the rest are held out
    int answer_len_min = 3;
    int answer_len_max = 6;
};

// Deterministically builds the topic table: seeded harmful/benign role
// assignment, profiling split, and pairwise-distinct answers. Throws
// DomainError when the vocabulary cannot hold the topics plus a usable
// answer pool, or when harmful_topics < 4 / benign_topics < 8.
SyntheticTaskSpec make_task_spec(const TaskParams& params, int vocab_size, uint64_t seed);

void validate(const SyntheticTaskSpec& spec);

struct EvalQuery {
    int topic_id = 0;
    TokenSequence query;
    TokenSequence answer;
};

// The corpora of one run:
//   pretrain   query + affirm + answer for every topic
//   alignment  harmful query + refusal marker
//   harm       bare queries of the profiling harmful topics
//   comp       the same queries each followed by the topic answer
//   benign     benign query + answer
//   eval       held-out harmful queries, disjoint from the profiling items
//   utility    benign pretrain items, used as the utility held-out corpus
//   facts      topic + affirm + answer for every topic: the same knowledge
//              in a second, query-free context
//   replay     benign pretrain items plus harmful facts; interleaving these
//              with the alignment pairs keeps answers recallable while the
//              query form learns to refuse
struct CorporaBundle {
    std::vector<TokenSequence> pretrain;
    std::vector<TokenSequence> alignment;
    std::vector<TokenSequence> harm;
    std::vector<TokenSequence> comp;
    std::vector<TokenSequence> benign;
    std::vector<EvalQuery> eval;
    std::vector<TokenSequence> utility;
    std::vector<TokenSequence> facts;
    std::vector<TokenSequence> replay;
};

CorporaBundle generate_synthetic_task(const SyntheticTaskSpec& spec, uint64_t seed);

// Task manifest as JSON (full topic table and special tokens).
std::string to_json(const SyntheticTaskSpec& spec);
SyntheticTaskSpec task_spec_from_json(const std::string& text);

// Corpus files: one sequence per line, decimal token ids separated by
// single spaces.
void save_corpus(const std::vector<TokenSequence>& corpus, const std::string& path);
std::vector<TokenSequence> load_corpus(const std::string& path);

}  // namespace routelab
