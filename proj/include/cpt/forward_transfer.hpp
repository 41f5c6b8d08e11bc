#pragma once

#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "cpt/codec.hpp"
#include "cpt/evaluate.hpp"
#include "cpt/model.hpp"
#include "cpt/rng.hpp"
#include "cpt/task_stream.hpp"

namespace cpt {

// ---------------------------------------------------------------------------
// Prompt bank: one frozen prompt per completed task, in completion order.
// Entries never change during forward training; only an accepted backward
// refinement may replace one.
// ---------------------------------------------------------------------------
class PromptBank {
public:
    void add(const SoftPrompt& prompt);                   // errors on duplicate task
    void replace(const std::string& task_id, const SoftPrompt& prompt);
    bool has(const std::string& task_id) const;
    const SoftPrompt& get(const std::string& task_id) const;
    const SoftPrompt& most_recent() const;  // errors if empty
    bool empty() const { return order_.empty(); }
    int size() const { return static_cast<int>(order_.size()); }
    // task ids in completion order (the order add() was called)
    const std::vector<std::string>& completion_order() const { return order_; }
    uint64_t hash() const;  // over every entry, order-sensitive

private:
    std::vector<std::string> order_;
    std::map<std::string, SoftPrompt> entries_;
};

// Continual initialization: copy of the most recently completed task's
// prompt; plain random init for the first task.
SoftPrompt cl_init(const Backbone& model, const PromptBank& bank,
                   const std::string& task_id, uint64_t seed);

// Initialization by selection: every banked prompt is scored by mean
// per-token validation loss on the new task, untouched, and the best one is
// copied. Ties go to the most recently completed task. An empty bank falls
// back to random init; an empty validation set is an error.
SoftPrompt select_init(const Backbone& model, const PromptBank& bank,
                       const std::vector<EncodedExample>& val_set,
                       const std::string& task_id, uint64_t seed);

// ---------------------------------------------------------------------------
// Query fusion: a training-time resample of the query that mixes kept
// own-task slots with slots injected from other tasks, teaching the prompt
// to answer any slot description rather than one fixed layout.
// ---------------------------------------------------------------------------
struct FusionSample {
    int n1 = 0;     // kept slots from the example's own task
    int n2 = 0;     // injected slots (0 when fusion degenerated to identity)
    bool fused = false;
    Query query;                       // fused order, fresh sequential sentinels
    std::vector<std::string> targets;  // one per query position
};

// Step 1: n1 ~ U[1, |own|] own slots without replacement. Step 2: n2 ~
// U[1, n1] injected slots from `pool` (names already kept are skipped, and
// n2 shrinks if the deduplicated pool runs short). Step 3: one shuffled
// query over all kept + injected slots with fresh sequential sentinels.
// Kept slots keep the example's values, injected slots answer "None". An
// empty usable pool returns the plain unfused query over all own slots.
FusionSample fuse_query(const std::vector<Slot>& own_slots,
                        const std::vector<Slot>& pool, const ValueMap& values,
                        rng::Engine& rng);

// Fusion against every seen task: the injection pool is the union of all
// tasks' slots except the owner's. Covers both directions of replay (a
// current-task example injects previous slots; a replayed memory example
// injects every other seen task's slots, the current one included).
FusionSample fuse_for_task(const std::map<std::string, std::vector<Slot>>& slots_by_task,
                           const std::string& owner_task_id, const ValueMap& values,
                           rng::Engine& rng);

// ---------------------------------------------------------------------------
// Two-phase per-task prompt training.
// ---------------------------------------------------------------------------
struct TrainFlags {
    bool query_fusion = false;
    bool memory_replay = false;
};

struct TrainSchedule {
    int phase_a_epochs = 10;
    int phase_b_epochs = 10;
    int batch_size = 4;
    double lr = 0.1;
    double clip_norm = 1.0;
    int patience = 5;  // stop a phase after this many non-improving epochs
};

struct EpochLog {
    std::string task;
    char phase = 'A';
    int epoch = 0;  // within the phase
    double train_loss = 0.0, val_loss = 0.0, val_jga = 0.0;
    long wall_ms = 0;
};
std::string epoch_log_line(const EpochLog& e);  // one JSON object per line

// One replayed example and the task it came from.
struct ReplayExample {
    std::string task_id;
    const Service* service = nullptr;
    const DialogExample* example = nullptr;
};

struct TrainTaskInputs {
    const Backbone* model = nullptr;
    const Tokenizer* tokenizer = nullptr;
    const Service* service = nullptr;  // the task being learned
    const Split* split = nullptr;      // its train/val indices
    std::string task_id;
    std::vector<ReplayExample> memory;  // replayed earlier-task examples
    // Slots of every seen task (the current one included), for fusion.
    std::map<std::string, std::vector<Slot>> seen_slots;
    TrainFlags flags;
    TrainSchedule schedule;
    uint64_t seed = 0;
    std::ostream* log_sink = nullptr;  // JSONL, optional
};

struct TrainResult {
    SoftPrompt prompt;
    std::vector<EpochLog> log;
};

// Phase A trains on the task's data plus the replayed memory (queries fused
// when the flag is on); phase B trains on the original task data alone.
// Validation loss is measured with the plain task query after every epoch;
// a phase stops early once it fails to improve `patience` consecutive
// epochs. The backbone and the bank are never touched. Non-finite losses
// abort with context.
TrainResult train_task(const TrainTaskInputs& in, const SoftPrompt& init);

}  // namespace cpt
