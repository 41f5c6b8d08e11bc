#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cpt/codec.hpp"
#include "json.hpp"

namespace cpt {

struct DialogExample {
    std::string text;
    ValueMap values;  // only filled slots; absent means "None"
    bool operator==(const DialogExample&) const = default;
};

struct Service {
    std::string id;
    std::string name;
    std::vector<Slot> slots;
    std::vector<DialogExample> dialogs;
    // Which of each slot type's two mention frames this service phrases the
    // slot with (parallel to slots, entries 0/1). A per-service phrasing
    // convention; empty for ingested corpora that never state one.
    std::vector<int> true_frame;
};

struct Split {
    std::vector<int> train, val, test;  // indices into Service::dialogs
    bool operator==(const Split&) const = default;
};

struct TaskStream {
    std::vector<Service> services;
    std::vector<Split> splits;  // parallel to services

    int n_tasks() const { return static_cast<int>(services.size()); }
};

// Per-task lists of training-split dialog indices.
struct MemoryBuffer {
    std::vector<std::vector<int>> entries;
    const std::vector<int>& of(int task) const { return entries.at(task); }
};

struct GeneratorConfig {
    int n_services = 15;
    int min_slots = 2;
    int max_slots = 4;  // generated services stay within [2,10]
    int pool_size = 12;  // shared slot-type pool drawn from
    int templates_per_service = 6;
    int min_samples = 64;
    int max_samples = 160;  // dialogs per service, drawn uniformly
    uint64_t seed = 0;
};

struct IngestReport {
    int skipped_multi_service = 0;
    std::vector<std::string> warnings;
};

// Synthetic schema-guided stream. Services draw slot types from one shared
// pool so structure transfers across tasks; every filled value appears
// verbatim in its dialog text, phrased with the mention frame the service's
// convention picked for that slot.
TaskStream generate_stream(const GeneratorConfig& config);

// Companion services for backbone pre-training: same pools and shape, a
// disjoint seed space. The backbone learns the clause format, the mention
// frames, and the value inventory without seeing any stream service's data.
TaskStream generate_pretrain_stream(const GeneratorConfig& config);

// 7:1:2 split by seeded shuffle then largest-remainder cut.
Split make_split(int n, uint64_t seed);

TaskStream ingest_schema_corpus(const std::string& path, IngestReport* report = nullptr);
TaskStream stream_from_json(const nlohmann::json& j, IngestReport* report = nullptr);
nlohmann::json stream_to_json(const TaskStream& stream);
void export_schema_corpus(const TaskStream& stream, const std::string& path);

// Uniform sample without replacement from the task's training split. The
// same seed gives the same indices, so every method stores the same memory.
std::vector<int> sample_memory(const TaskStream& stream, int task_id, int capacity,
                               uint64_t seed);

// Capacities proportional to train-split sizes, each at least 1, summing
// exactly to total_budget (largest-remainder rounding).
std::vector<int> proportional_budget(const TaskStream& stream, int total_budget);

// Self-supervised pre-training text: each training dialog restated with
// every slot as "description : value ." ("None" when unfilled), mirroring
// the masked-span layout the task codec produces.
std::vector<std::string> build_pretrain_corpus(const TaskStream& stream);
std::string restatement_text(const Service& svc, const DialogExample& ex);

// Every text the models may ever need to encode: dialogs, queries, targets,
// name-format renderings, service names.
std::vector<std::string> stream_vocabulary_texts(const TaskStream& stream);

bool streams_equal(const TaskStream& a, const TaskStream& b);

}  // namespace cpt
