#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cpt/backward_transfer.hpp"
#include "cpt/forward_transfer.hpp"
#include "cpt/metrics.hpp"
#include "cpt/model.hpp"
#include "cpt/task_stream.hpp"
#include "json.hpp"

namespace cpt {

// ---------------------------------------------------------------------------
// Methods and their flag presets.
// ---------------------------------------------------------------------------
enum class Method {
    prompt_tuning,  // independent per-task prompts, random init, no transfer
    cpt,            // continual init + query fusion, no memory
    cpt_mem,        // cpt + memory replay during forward training
    cpt_mem_back,   // cpt_mem + memory-guided backward transfer
    finetune,       // one shared model tuned across tasks (name formulation)
    replay,         // finetune + memory concatenated into each task's data
};

enum class InitStrategy { random, cl, select };

struct MethodFlags {
    bool msr = true;  // span formulation; false = name formulation (baselines)
    InitStrategy init = InitStrategy::random;
    bool qf = false;        // query fusion
    bool mr = false;        // memory replay while training forward
    bool backward = false;  // memory-guided backward transfer after each task

    bool operator==(const MethodFlags&) const = default;
};

Method method_from_string(const std::string& name);
std::string method_name(Method m);
InitStrategy init_from_string(const std::string& name);
std::string init_name(InitStrategy s);

// The canonical flag expansion of each method.
MethodFlags preset_flags(Method m);

// True for methods whose prompts/model carry over between adjacent tasks,
// making a zero-shot (forward-transfer) evaluation meaningful.
bool sequential_connection(Method m, const MethodFlags& flags);

// ---------------------------------------------------------------------------
// Configuration.
// ---------------------------------------------------------------------------
struct MemoryBudget {
    int per_task = 50;          // stored examples per seen task
    bool proportional = false;  // split per_task * T across tasks by size
};

struct ExperimentConfig {
    Method method = Method::cpt_mem_back;
    MethodFlags flags = preset_flags(Method::cpt_mem_back);

    std::string stream_source = "generate";  // "generate" | "ingest"
    GeneratorConfig generator;
    std::string ingest_path;  // when stream_source == "ingest"

    std::string backbone_path;  // pretrained checkpoint (model + tokenizer)

    TrainSchedule schedule;
    BackwardSchedule backward_schedule;
    MemoryBudget memory;

    int n_runs = 5;         // (seed, task order) pairs, all from root_seed
    uint64_t root_seed = 0;
    bool full_matrix = false;  // evaluate every a[j][i], not just the needed rows
    double finetune_lr = 1e-3;  // baseline model-tuning rate (prompts use schedule.lr)

    std::string out_dir;

    void validate() const;  // throws with a diagnostic on any bad combination
    nlohmann::json to_json() const;
    // Missing fields keep defaults; "flags" overrides the method preset;
    // unknown keys are an error.
    static ExperimentConfig from_json(const nlohmann::json& j);
};

// ---------------------------------------------------------------------------
// Results.
// ---------------------------------------------------------------------------
struct RunMetrics {
    int run_index = 0;
    uint64_t seed = 0;             // this run's derived seed
    std::vector<int> task_order;   // positions -> service index in the stream
    AccuracyMatrix matrix;
    double avg_jga = 0.0;
    std::optional<double> fwt;  // absent for methods with no sequential link
    std::optional<double> bwt;  // absent for independent-prompt methods

    nlohmann::json to_json(const TaskStream& stream) const;
};

struct Aggregate {
    double mean = 0.0;
    std::optional<double> stddev;  // absent below two samples
    int n = 0;
};
Aggregate aggregate(const std::vector<double>& xs);

struct RunSummary {
    std::vector<RunMetrics> runs;
    Aggregate avg_jga;
    std::optional<Aggregate> fwt, bwt;
    long long tunable_params_per_task = 0;  // prompt rows (or full model)
    long long stored_params_total = 0;      // what the method keeps at the end
};

// Per-task tunable parameters of a soft prompt: m rows of width d.
long long count_tunable_params(int prompt_length, int d_model);

// ---------------------------------------------------------------------------
// Orchestration. Artifacts land under config.out_dir:
//   config.json    resolved configuration actually used
//   stream.json    the exact task stream evaluated
//   manifest.json  progress, for resuming
//   run_<r>/       bank/<task>.bin, logs (.jsonl), matrix.json, metrics.json
//   metrics.json   all runs + aggregates (the reproducibility artifact)
//   summary.txt / summary.csv
// An interrupted invocation picks up after the last completed task; resumed
// runs produce byte-identical metrics because every random choice is derived
// from (root_seed, run, task) rather than carried RNG state.
// ---------------------------------------------------------------------------
RunSummary run_experiment(const ExperimentConfig& config);

// The fine-tuning family: one shared tunable model, name-format examples,
// optional memory concatenation. Exposed for tests; run_experiment routes
// finetune/replay runs here.
struct FinetuneInputs {
    Backbone* model = nullptr;  // unfrozen in place; caller owns a fresh copy
    const Tokenizer* tokenizer = nullptr;
    const TaskStream* stream = nullptr;
    std::vector<int> order;               // positions -> service index
    const MemoryBuffer* memory = nullptr;  // required when replay
    bool replay = false;
    TrainSchedule schedule;  // epochs = phase_a_epochs; phase B unused here
    double lr = 1e-3;
    uint64_t seed = 0;
    bool full_matrix = false;
    bool eval_fwt = true;
    int start_pos = 0;                  // resume: first position still to train
    AccuracyMatrix* partial = nullptr;  // resume: entries recorded so far
    // resume hook: called after each task with the position just finished
    std::function<void(int, const Backbone&, const AccuracyMatrix&)> checkpoint;
    std::ostream* log_sink = nullptr;  // JSONL epoch lines
};
AccuracyMatrix baseline_finetune(const FinetuneInputs& in);

// Reads per-run metrics under `dir` and renders the summary table.
struct SummaryTable {
    std::string text;  // aligned human-readable table
    std::string csv;
};
SummaryTable summarize(const std::string& dir);

// Mean/std helpers shared with the summary (sample std, n-1 denominator).
double mean_of(const std::vector<double>& xs);

}  // namespace cpt
