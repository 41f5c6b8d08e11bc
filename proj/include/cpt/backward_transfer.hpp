#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "cpt/evaluate.hpp"
#include "cpt/forward_transfer.hpp"
#include "cpt/model.hpp"
#include "cpt/task_stream.hpp"
#include "cpt/tokenizer.hpp"

namespace cpt {

// Outcome of one gradient-gate check.
struct GateDecision {
    double dot_product = 0.0;
    bool applied = false;  // true iff dot_product > 0, strictly
};

// Sign-agreement gate between a proposed update direction and a reference
// direction: returns g_ori unchanged when g_ori.g_ref > 0, otherwise the zero
// vector. A disagreeing step is dropped whole, never projected sideways.
// Throws on length mismatch or non-finite entries.
std::pair<std::vector<double>, GateDecision> gated_gradient(const std::vector<double>& g_ori,
                                                            const std::vector<double>& g_ref);

struct BackwardSchedule {
    int epochs = 5;  // passes over the current task's training data
    int batch_size = 4;
    double lr = 0.1;
    double clip_norm = 1.0;
};

struct BackwardInputs {
    const Backbone* model = nullptr;
    const Tokenizer* tok = nullptr;
    // Previous task whose prompt is being revised. Its service supplies the
    // unfused query; memory_indices pick the retained dialogs (non-empty).
    const Service* prev_service = nullptr;
    std::vector<int> memory_indices;
    // Current task supplying the revision data, formatted under its own query.
    const Service* cur_service = nullptr;
    std::vector<int> cur_train;
    BackwardSchedule schedule;
    uint64_t seed = 0;
    // JSONL {prev_task, step, dot, applied, mem_loss} per gate check.
    std::ostream* gate_log = nullptr;
};

struct BackwardResult {
    SoftPrompt candidate;
    std::vector<GateDecision> decisions;    // one per step, applied or not
    std::vector<double> memory_batch_loss;  // per-token memory loss seen at each step
    int applied_steps = 0;
    int steps() const { return static_cast<int>(decisions.size()); }
    double applied_fraction() const {
        return decisions.empty() ? 0.0 : static_cast<double>(applied_steps) / decisions.size();
    }
};

// Re-trains a copy of `prompt` on the current task's data; each step is
// applied only when its gradient agrees (positive dot product) with the
// gradient of the same candidate on a batch drawn from the previous task's
// memory. Memory batches cycle with reshuffling. `prompt` itself and the
// backbone are never modified. epochs = 0 returns an exact copy.
BackwardResult backward_transfer_task(const BackwardInputs& in, const SoftPrompt& prompt);

struct AcceptanceRecord {
    std::string prev_task;
    double old_loss = 0.0, new_loss = 0.0;
    double old_jga = 0.0, new_jga = 0.0;
    bool accepted = false;
};

// The replacement rule itself: strictly lower memory loss AND memory JGA at
// least as good. Exposed so the decision table is testable in isolation.
inline bool acceptance_rule(double old_loss, double new_loss, double old_jga, double new_jga) {
    return new_loss < old_loss && new_jga >= old_jga;
}

// Replaces the banked prompt for candidate.task_id with the candidate only
// when the candidate has strictly lower loss and at least equal greedy-decode
// JGA on the memory set. On rejection the bank is left untouched. The record
// is appended to `log` as one JSON line when a sink is given.
AcceptanceRecord accept_update(const Backbone& model, const Tokenizer& tok, PromptBank& bank,
                               const Service& prev_service,
                               const std::vector<int>& memory_indices,
                               const SoftPrompt& candidate, std::ostream* log = nullptr);

}  // namespace cpt
