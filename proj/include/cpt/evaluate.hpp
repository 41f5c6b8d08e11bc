#pragma once

#include <vector>

#include "cpt/codec.hpp"
#include "cpt/metrics.hpp"
#include "cpt/model.hpp"
#include "cpt/task_stream.hpp"
#include "cpt/tokenizer.hpp"

namespace cpt {

struct EncodedExample {
    std::vector<int> input_ids;   // ends with eos
    std::vector<int> target_ids;  // no bos/eos, the loss adds them
};

// Masked-span formulation: dialog <sep> query -> "<Mi> value ..." targets.
EncodedExample encode_msr(const Tokenizer& tok, const std::string& dialog,
                          const ValueMap& values, const Query& query);

// Name formulation for the fine-tuning baselines.
EncodedExample encode_name(const Tokenizer& tok, const Service& svc,
                           const DialogExample& ex);

// Mean per-token teacher-forced loss over a set of examples, no gradients.
double mean_loss(const Backbone& model, const SoftPrompt* prompt,
                 const std::vector<EncodedExample>& examples);

// Greedy-decode JGA for the listed dialog indices of a service, evaluated
// with that service's own query (the gold task is known at test time).
double eval_jga_msr(const Backbone& model, const SoftPrompt* prompt, const Tokenizer& tok,
                    const Service& svc, const std::vector<int>& indices);
double eval_jga_name(const Backbone& model, const Tokenizer& tok, const Service& svc,
                     const std::vector<int>& indices);

int generation_budget(int n_slots);

}  // namespace cpt
