#include "cpt/experiment.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "cpt/evaluate.hpp"

namespace fs = std::filesystem;

namespace cpt {

// ---------------------------------------------------------------------------
// Methods and flags.
// ---------------------------------------------------------------------------
Method method_from_string(const std::string& name) {
    if (name == "prompt_tuning") return Method::prompt_tuning;
    if (name == "cpt") return Method::cpt;
    if (name == "cpt_mem") return Method::cpt_mem;
    if (name == "cpt_mem_back") return Method::cpt_mem_back;
    if (name == "finetune") return Method::finetune;
    if (name == "replay") return Method::replay;
    throw std::runtime_error("unknown method '" + name +
                             "' (expected prompt_tuning, cpt, cpt_mem, cpt_mem_back, "
                             "finetune, or replay)");
}

std::string method_name(Method m) {
    switch (m) {
        case Method::prompt_tuning: return "prompt_tuning";
        case Method::cpt: return "cpt";
        case Method::cpt_mem: return "cpt_mem";
        case Method::cpt_mem_back: return "cpt_mem_back";
        case Method::finetune: return "finetune";
        case Method::replay: return "replay";
    }
    throw std::runtime_error("unreachable method");
}

InitStrategy init_from_string(const std::string& name) {
    if (name == "random") return InitStrategy::random;
    if (name == "cl") return InitStrategy::cl;
    if (name == "select") return InitStrategy::select;
    throw std::runtime_error("unknown init strategy '" + name +
                             "' (expected random, cl, or select)");
}

std::string init_name(InitStrategy s) {
    switch (s) {
        case InitStrategy::random: return "random";
        case InitStrategy::cl: return "cl";
        case InitStrategy::select: return "select";
    }
    throw std::runtime_error("unreachable init strategy");
}

MethodFlags preset_flags(Method m) {
    MethodFlags f;
    switch (m) {
        case Method::prompt_tuning:
            f = {true, InitStrategy::random, false, false, false};
            break;
        case Method::cpt:
            f = {true, InitStrategy::cl, true, false, false};
            break;
        case Method::cpt_mem:
            f = {true, InitStrategy::cl, true, true, false};
            break;
        case Method::cpt_mem_back:
            f = {true, InitStrategy::cl, true, true, true};
            break;
        case Method::finetune:
            f = {false, InitStrategy::random, false, false, false};
            break;
        case Method::replay:
            f = {false, InitStrategy::random, false, true, false};
            break;
    }
    return f;
}

bool sequential_connection(Method m, const MethodFlags& flags) {
    if (m == Method::finetune || m == Method::replay) return true;
    if (m == Method::prompt_tuning) return false;
    return flags.init != InitStrategy::random || flags.qf || flags.mr || flags.backward;
}

// ---------------------------------------------------------------------------
// Config (de)serialization. Unknown keys are an error so typos cannot
// silently fall back to defaults.
// ---------------------------------------------------------------------------
namespace {

void check_keys(const nlohmann::json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
    for (const auto& [key, _] : j.items()) {
        if (std::find_if(allowed.begin(), allowed.end(),
                         [&](const char* a) { return key == a; }) == allowed.end())
            throw std::runtime_error("config: unknown key '" + key + "' in " + where);
    }
}

nlohmann::json generator_to_json(const GeneratorConfig& g) {
    return {{"n_services", g.n_services},
            {"min_slots", g.min_slots},
            {"max_slots", g.max_slots},
            {"pool_size", g.pool_size},
            {"templates_per_service", g.templates_per_service},
            {"min_samples", g.min_samples},
            {"max_samples", g.max_samples},
            {"seed", g.seed}};
}

GeneratorConfig generator_from_json(const nlohmann::json& j) {
    check_keys(j, "generator",
               {"n_services", "min_slots", "max_slots", "pool_size",
                "templates_per_service", "min_samples", "max_samples", "seed"});
    GeneratorConfig g;
    g.n_services = j.value("n_services", g.n_services);
    g.min_slots = j.value("min_slots", g.min_slots);
    g.max_slots = j.value("max_slots", g.max_slots);
    g.pool_size = j.value("pool_size", g.pool_size);
    g.templates_per_service = j.value("templates_per_service", g.templates_per_service);
    g.min_samples = j.value("min_samples", g.min_samples);
    g.max_samples = j.value("max_samples", g.max_samples);
    g.seed = j.value("seed", g.seed);
    return g;
}

nlohmann::json schedule_to_json(const TrainSchedule& s) {
    return {{"phase_a_epochs", s.phase_a_epochs}, {"phase_b_epochs", s.phase_b_epochs},
            {"batch_size", s.batch_size},         {"lr", s.lr},
            {"clip_norm", s.clip_norm},           {"patience", s.patience}};
}

TrainSchedule schedule_from_json(const nlohmann::json& j) {
    check_keys(j, "schedule",
               {"phase_a_epochs", "phase_b_epochs", "batch_size", "lr", "clip_norm",
                "patience"});
    TrainSchedule s;
    s.phase_a_epochs = j.value("phase_a_epochs", s.phase_a_epochs);
    s.phase_b_epochs = j.value("phase_b_epochs", s.phase_b_epochs);
    s.batch_size = j.value("batch_size", s.batch_size);
    s.lr = j.value("lr", s.lr);
    s.clip_norm = j.value("clip_norm", s.clip_norm);
    s.patience = j.value("patience", s.patience);
    return s;
}

nlohmann::json backward_to_json(const BackwardSchedule& s) {
    return {{"epochs", s.epochs},
            {"batch_size", s.batch_size},
            {"lr", s.lr},
            {"clip_norm", s.clip_norm}};
}

BackwardSchedule backward_from_json(const nlohmann::json& j) {
    check_keys(j, "backward_schedule", {"epochs", "batch_size", "lr", "clip_norm"});
    BackwardSchedule s;
    s.epochs = j.value("epochs", s.epochs);
    s.batch_size = j.value("batch_size", s.batch_size);
    s.lr = j.value("lr", s.lr);
    s.clip_norm = j.value("clip_norm", s.clip_norm);
    return s;
}

}  // namespace

nlohmann::json ExperimentConfig::to_json() const {
    nlohmann::json j;
    j["method"] = method_name(method);
    j["flags"] = {{"msr", flags.msr},
                  {"init", init_name(flags.init)},
                  {"qf", flags.qf},
                  {"mr", flags.mr},
                  {"backward", flags.backward}};
    j["stream"] = {{"source", stream_source}, {"path", ingest_path}};
    j["generator"] = generator_to_json(generator);
    j["backbone"] = backbone_path;
    j["schedule"] = schedule_to_json(schedule);
    j["backward_schedule"] = backward_to_json(backward_schedule);
    j["memory"] = {{"per_task", memory.per_task}, {"proportional", memory.proportional}};
    j["runs"] = {{"n", n_runs}, {"root_seed", root_seed}};
    j["full_matrix"] = full_matrix;
    j["finetune_lr"] = finetune_lr;
    j["out_dir"] = out_dir;
    return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    check_keys(j, "config",
               {"method", "flags", "stream", "generator", "backbone", "schedule",
                "backward_schedule", "memory", "runs", "full_matrix", "finetune_lr",
                "out_dir"});
    ExperimentConfig c;
    if (j.contains("method")) {
        c.method = method_from_string(j["method"].get<std::string>());
        c.flags = preset_flags(c.method);
    }
    if (j.contains("flags")) {
        const auto& f = j["flags"];
        check_keys(f, "flags", {"msr", "init", "qf", "mr", "backward"});
        c.flags.msr = f.value("msr", c.flags.msr);
        if (f.contains("init")) c.flags.init = init_from_string(f["init"].get<std::string>());
        c.flags.qf = f.value("qf", c.flags.qf);
        c.flags.mr = f.value("mr", c.flags.mr);
        c.flags.backward = f.value("backward", c.flags.backward);
    }
    if (j.contains("stream")) {
        check_keys(j["stream"], "stream", {"source", "path"});
        c.stream_source = j["stream"].value("source", c.stream_source);
        c.ingest_path = j["stream"].value("path", c.ingest_path);
    }
    if (j.contains("generator")) c.generator = generator_from_json(j["generator"]);
    c.backbone_path = j.value("backbone", c.backbone_path);
    if (j.contains("schedule")) c.schedule = schedule_from_json(j["schedule"]);
    if (j.contains("backward_schedule"))
        c.backward_schedule = backward_from_json(j["backward_schedule"]);
    if (j.contains("memory")) {
        check_keys(j["memory"], "memory", {"per_task", "proportional"});
        c.memory.per_task = j["memory"].value("per_task", c.memory.per_task);
        c.memory.proportional = j["memory"].value("proportional", c.memory.proportional);
    }
    if (j.contains("runs")) {
        check_keys(j["runs"], "runs", {"n", "root_seed"});
        c.n_runs = j["runs"].value("n", c.n_runs);
        c.root_seed = j["runs"].value("root_seed", c.root_seed);
    }
    c.full_matrix = j.value("full_matrix", c.full_matrix);
    c.finetune_lr = j.value("finetune_lr", c.finetune_lr);
    c.out_dir = j.value("out_dir", c.out_dir);
    return c;
}

void ExperimentConfig::validate() const {
    const bool baseline = method == Method::finetune || method == Method::replay;
    if (baseline && flags.msr)
        throw std::runtime_error("config: the fine-tuning baselines use the name "
                                 "formulation; flags.msr must be false");
    if (!baseline && !flags.msr)
        throw std::runtime_error("config: prompt methods require the span formulation "
                                 "(flags.msr); the name formulation belongs to the "
                                 "fine-tuning baselines");
    const bool needs_memory =
        flags.mr || flags.backward || method == Method::replay;
    if (needs_memory && memory.per_task <= 0)
        throw std::runtime_error("config: memory replay / backward transfer need a "
                                 "positive memory budget per task");
    if (stream_source != "generate" && stream_source != "ingest")
        throw std::runtime_error("config: stream source must be 'generate' or 'ingest'");
    if (stream_source == "ingest" && ingest_path.empty())
        throw std::runtime_error("config: stream source 'ingest' needs a path");
    if (backbone_path.empty())
        throw std::runtime_error("config: a pretrained backbone checkpoint is required");
    if (n_runs < 1) throw std::runtime_error("config: need at least one run");
    if (schedule.phase_a_epochs < 0 || schedule.phase_b_epochs < 0 ||
        schedule.phase_a_epochs + schedule.phase_b_epochs == 0)
        throw std::runtime_error("config: the training schedule needs epochs");
    if (schedule.batch_size < 1 || schedule.lr <= 0)
        throw std::runtime_error("config: bad training schedule");
    if (flags.backward &&
        (backward_schedule.epochs < 1 || backward_schedule.batch_size < 1 ||
         backward_schedule.lr <= 0))
        throw std::runtime_error("config: bad backward-transfer schedule");
    if (finetune_lr <= 0) throw std::runtime_error("config: finetune_lr must be positive");
}

// ---------------------------------------------------------------------------
// Aggregation.
// ---------------------------------------------------------------------------
double mean_of(const std::vector<double>& xs) {
    if (xs.empty()) throw std::runtime_error("mean of nothing");
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

Aggregate aggregate(const std::vector<double>& xs) {
    Aggregate a;
    a.n = static_cast<int>(xs.size());
    a.mean = mean_of(xs);
    if (a.n >= 2) {
        double ss = 0.0;
        for (double x : xs) ss += (x - a.mean) * (x - a.mean);
        a.stddev = std::sqrt(ss / static_cast<double>(a.n - 1));
    }
    return a;
}

long long count_tunable_params(int prompt_length, int d_model) {
    if (prompt_length <= 0 || d_model <= 0)
        throw std::runtime_error("count_tunable_params: dimensions must be positive");
    return static_cast<long long>(prompt_length) * d_model;
}

// ---------------------------------------------------------------------------
// Seed derivation: every random choice comes from (root, run, task, purpose)
// so a resumed run recomputes exactly what the uninterrupted run would have.
// ---------------------------------------------------------------------------
namespace {

constexpr uint64_t kSeedRun = 0x9e55;      // per-run seed
constexpr uint64_t kSeedOrder = 0x06de6;   // task order permutation
constexpr uint64_t kSeedMemory = 0x3e3077; // memory sampling (per service)
constexpr uint64_t kSeedInit = 0x171a17;   // prompt initialization
constexpr uint64_t kSeedTrain = 0x7a21;    // per-task training
constexpr uint64_t kSeedBack = 0xbac4ad;   // backward transfer pairs
constexpr uint64_t kSeedTune = 0xf17e;     // baseline fine-tuning batches

std::string run_dir_name(int r) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "run_%03d", r);
    return buf;
}

nlohmann::json run_metrics_json(const RunMetrics& m, const TaskStream& stream) {
    nlohmann::json j;
    j["run"] = m.run_index;
    j["seed"] = m.seed;
    nlohmann::json order = nlohmann::json::array();
    for (int s : m.task_order) order.push_back(stream.services[s].id);
    j["task_order"] = std::move(order);
    j["avg_jga"] = m.avg_jga;
    j["fwt"] = m.fwt ? nlohmann::json(*m.fwt) : nlohmann::json(nullptr);
    j["bwt"] = m.bwt ? nlohmann::json(*m.bwt) : nlohmann::json(nullptr);
    j["matrix"] = m.matrix.to_json();
    return j;
}

std::vector<int> order_for_run(uint64_t run_seed, int t) {
    auto rng = rng::engine(rng::mix(run_seed, kSeedOrder));
    return rng::permutation(t, rng);
}

// Per-service memory capacities for the whole stream.
std::vector<int> memory_capacities(const TaskStream& stream, const MemoryBudget& budget) {
    const int t = stream.n_tasks();
    if (budget.proportional)
        return proportional_budget(stream, budget.per_task * t);
    std::vector<int> caps(t);
    for (int i = 0; i < t; ++i)
        caps[i] = std::min<int>(budget.per_task,
                                static_cast<int>(stream.splits[i].train.size()));
    return caps;
}

struct RunPaths {
    fs::path dir, bank, matrix, metrics, train_log, gate_log, accept_log, model_ckpt;
    explicit RunPaths(const fs::path& base) {
        dir = base;
        bank = base / "bank";
        matrix = base / "matrix.json";
        metrics = base / "metrics.json";
        train_log = base / "train_log.jsonl";
        gate_log = base / "gate_log.jsonl";
        accept_log = base / "acceptance_log.jsonl";
        model_ckpt = base / "model_latest.bin";
    }
    fs::path prompt_file(const std::string& task_id) const {
        return bank / (task_id + ".bin");
    }
};

void write_text_atomic(const fs::path& path, const std::string& text) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << text;
    }
    fs::rename(tmp, path);
}

nlohmann::json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    return nlohmann::json::parse(in);
}

}  // namespace

nlohmann::json RunMetrics::to_json(const TaskStream& stream) const {
    return run_metrics_json(*this, stream);
}

// ---------------------------------------------------------------------------
// Fine-tuning baseline: one shared model, name formulation, optional replay.
// ---------------------------------------------------------------------------
AccuracyMatrix baseline_finetune(const FinetuneInputs& in) {
    if (!in.model || !in.tokenizer || !in.stream)
        throw std::runtime_error("baseline_finetune: model, tokenizer, and stream are "
                                 "required");
    const TaskStream& stream = *in.stream;
    const int t = stream.n_tasks();
    if (static_cast<int>(in.order.size()) != t)
        throw std::runtime_error("baseline_finetune: order must list every task once");
    if (in.replay && !in.memory)
        throw std::runtime_error("baseline_finetune: replay needs a memory buffer");
    if (in.start_pos < 0 || in.start_pos > t)
        throw std::runtime_error("baseline_finetune: bad start position");

    AccuracyMatrix acc = in.partial ? *in.partial : AccuracyMatrix(t);
    in.model->unfreeze();
    const Tokenizer& tok = *in.tokenizer;

    for (int pos = in.start_pos; pos < t; ++pos) {
        const Service& svc = stream.services[in.order[pos]];
        const Split& split = stream.splits[in.order[pos]];

        // zero-shot on the incoming task with the model as later tasks left it
        if (pos > 0 && in.eval_fwt)
            acc.set(pos, pos + 1, eval_jga_name(*in.model, tok, svc, split.test));

        // fresh examples and a fresh optimizer for this task's session
        std::vector<EncodedExample> train;
        for (int idx : split.train)
            train.push_back(encode_name(tok, svc, svc.dialogs[idx]));
        if (in.replay) {
            for (int p = 0; p < pos; ++p) {
                const Service& prev = stream.services[in.order[p]];
                for (int idx : in.memory->of(in.order[p]))
                    train.push_back(encode_name(tok, prev, prev.dialogs[idx]));
            }
        }
        OptimizerConfig ocfg;
        ocfg.lr = in.lr;
        ocfg.clip_norm = in.schedule.clip_norm;
        Optimizer opt({in.model->param_group()}, ocfg);
        auto rng = rng::engine(rng::mix(in.seed, kSeedTune, pos));

        for (int epoch = 0; epoch < in.schedule.phase_a_epochs; ++epoch) {
            std::vector<int> order = rng::permutation(static_cast<int>(train.size()), rng);
            double epoch_loss = 0.0;
            long tokens = 0;
            for (size_t at = 0; at < order.size();
                 at += static_cast<size_t>(in.schedule.batch_size)) {
                std::vector<Tensor> losses;
                for (size_t b = at;
                     b < std::min(order.size(),
                                  at + static_cast<size_t>(in.schedule.batch_size));
                     ++b) {
                    const EncodedExample& e = train[order[b]];
                    losses.push_back(unprompted_loss(*in.model, e.input_ids, e.target_ids));
                    tokens += static_cast<long>(e.target_ids.size()) + 1;
                }
                Tensor loss = add_scalars(losses);
                const double v = loss.item();
                if (!std::isfinite(v))
                    throw std::runtime_error("baseline_finetune: non-finite loss on task " +
                                             svc.id);
                epoch_loss += v;
                backward(loss);
                opt.step();
            }
            if (in.log_sink) {
                nlohmann::json line = {{"task", svc.id},
                                       {"phase", "finetune"},
                                       {"epoch", epoch},
                                       {"train_loss", epoch_loss / std::max(1L, tokens)}};
                *in.log_sink << line.dump() << "\n";
            }
        }

        acc.set(pos + 1, pos + 1, eval_jga_name(*in.model, tok, svc, split.test));
        if (in.full_matrix) {
            for (int p = 0; p < pos; ++p) {
                const Service& prev = stream.services[in.order[p]];
                acc.set(pos + 1, p + 1,
                        eval_jga_name(*in.model, tok, prev, stream.splits[in.order[p]].test));
            }
        }
        if (in.checkpoint) in.checkpoint(pos, *in.model, acc);
    }

    // final row with the model as the last task left it
    for (int p = 0; p + 1 < t; ++p) {
        const Service& prev = stream.services[in.order[p]];
        if (!in.full_matrix || !acc.has(t, p + 1))
            acc.set(t, p + 1, eval_jga_name(*in.model, tok, prev, stream.splits[in.order[p]].test));
    }
    return acc;
}

// ---------------------------------------------------------------------------
// One (seed, order) continual run with per-task prompts.
// ---------------------------------------------------------------------------
namespace {

struct RunOutcome {
    RunMetrics metrics;
    bool loaded = false;  // true when restored from a finished run's artifacts
};

RunMetrics finish_metrics(int run_index, uint64_t run_seed, std::vector<int> order,
                          AccuracyMatrix matrix, Method method, const MethodFlags& flags) {
    RunMetrics m;
    m.run_index = run_index;
    m.seed = run_seed;
    m.task_order = std::move(order);
    m.avg_jga = avg_jga(matrix);
    if (sequential_connection(method, flags)) m.fwt = fwt(matrix);
    if (method != Method::prompt_tuning) m.bwt = bwt(matrix);
    m.matrix = std::move(matrix);
    return m;
}

// Stored manifest entry for one run.
struct RunState {
    int completed = 0;
    bool final_row = false;
};

RunOutcome execute_run(const ExperimentConfig& cfg, const TaskStream& stream,
                       const Backbone& frozen_model, const Tokenizer& tok, int run_index,
                       const fs::path& out_root, RunState state,
                       const std::function<void(int, int, bool)>& record_progress) {
    const int t = stream.n_tasks();
    const uint64_t run_seed = rng::mix(cfg.root_seed, kSeedRun, run_index);
    const std::vector<int> order = order_for_run(run_seed, t);
    const RunPaths paths(out_root / run_dir_name(run_index));
    fs::create_directories(paths.bank);

    if (state.final_row && fs::exists(paths.metrics)) {
        // already finished: reuse the stored metrics verbatim
        const nlohmann::json j = read_json_file(paths.metrics);
        RunMetrics m;
        m.run_index = run_index;
        m.seed = j.at("seed").get<uint64_t>();
        m.task_order = order;
        m.matrix = AccuracyMatrix::from_json(j.at("matrix"));
        m.avg_jga = j.at("avg_jga").get<double>();
        if (!j.at("fwt").is_null()) m.fwt = j.at("fwt").get<double>();
        if (!j.at("bwt").is_null()) m.bwt = j.at("bwt").get<double>();
        return {std::move(m), true};
    }

    const bool baseline = cfg.method == Method::finetune || cfg.method == Method::replay;
    const bool needs_memory =
        cfg.flags.mr || cfg.flags.backward || cfg.method == Method::replay;

    AccuracyMatrix matrix(t);
    if (state.completed > 0) matrix = AccuracyMatrix::from_json(read_json_file(paths.matrix));

    MemoryBuffer memory;
    memory.entries.resize(t);
    if (needs_memory) {
        const std::vector<int> caps = memory_capacities(stream, cfg.memory);
        for (int s = 0; s < t; ++s)
            memory.entries[s] =
                sample_memory(stream, s, caps[s], rng::mix(run_seed, kSeedMemory, s));
    }

    const auto log_mode = state.completed > 0 ? std::ios::app : std::ios::trunc;
    std::ofstream train_log(paths.train_log, log_mode);

    if (baseline) {
        // one shared tunable model; resume from its checkpoint when mid-run
        auto [model, ck_tok] = load_backbone(state.completed > 0 ? paths.model_ckpt.string()
                                                                 : cfg.backbone_path);
        (void)ck_tok;
        FinetuneInputs in;
        in.model = &model;
        in.tokenizer = &tok;
        in.stream = &stream;
        in.order = order;
        in.memory = needs_memory ? &memory : nullptr;
        in.replay = cfg.method == Method::replay;
        in.schedule = cfg.schedule;
        in.lr = cfg.finetune_lr;
        in.seed = run_seed;
        in.full_matrix = cfg.full_matrix;
        in.start_pos = state.completed;
        in.partial = state.completed > 0 ? &matrix : nullptr;
        in.log_sink = &train_log;
        in.checkpoint = [&](int pos, const Backbone& m, const AccuracyMatrix& acc) {
            save_backbone(m, tok, paths.model_ckpt.string());
            write_text_atomic(paths.matrix, acc.to_json().dump(1));
            record_progress(run_index, pos + 1, false);
        };
        matrix = baseline_finetune(in);
    } else {
        std::ofstream gate_log(paths.gate_log, log_mode);
        std::ofstream accept_log(paths.accept_log, log_mode);

        PromptBank bank;
        for (int p = 0; p < state.completed; ++p) {
            const std::string& task_id = stream.services[order[p]].id;
            SoftPrompt prompt = load_prompt(paths.prompt_file(task_id).string());
            if (prompt.task_id != task_id)
                throw std::runtime_error("resume: prompt file for " + task_id +
                                         " names task " + prompt.task_id);
            bank.add(prompt);
        }

        for (int pos = state.completed; pos < t; ++pos) {
            const Service& svc = stream.services[order[pos]];
            const Split& split = stream.splits[order[pos]];
            const uint64_t init_seed = rng::mix(run_seed, kSeedInit, pos);

            if (pos > 0 && sequential_connection(cfg.method, cfg.flags))
                matrix.set(pos, pos + 1,
                           eval_jga_msr(frozen_model, &bank.most_recent(), tok, svc,
                                        split.test));

            SoftPrompt init;
            if (cfg.flags.init == InitStrategy::random || bank.empty()) {
                init = init_prompt_random(frozen_model, init_seed);
            } else if (cfg.flags.init == InitStrategy::cl) {
                init = cl_init(frozen_model, bank, svc.id, init_seed);
            } else {
                Query q = build_query(svc.slots);
                std::vector<EncodedExample> val;
                for (int idx : split.val)
                    val.push_back(encode_msr(tok, svc.dialogs[idx].text,
                                             svc.dialogs[idx].values, q));
                init = select_init(frozen_model, bank, val, svc.id, init_seed);
            }

            TrainTaskInputs in;
            in.model = &frozen_model;
            in.tokenizer = &tok;
            in.service = &svc;
            in.split = &split;
            in.task_id = svc.id;
            if (cfg.flags.mr) {
                for (int p = 0; p < pos; ++p) {
                    const Service& prev = stream.services[order[p]];
                    for (int idx : memory.of(order[p]))
                        in.memory.push_back({prev.id, &prev, &prev.dialogs[idx]});
                }
            }
            for (int p = 0; p <= pos; ++p) {
                const Service& seen = stream.services[order[p]];
                in.seen_slots[seen.id] = seen.slots;
            }
            in.flags.query_fusion = cfg.flags.qf;
            in.flags.memory_replay = cfg.flags.mr;
            in.schedule = cfg.schedule;
            in.seed = rng::mix(run_seed, kSeedTrain, pos);
            in.log_sink = &train_log;

            TrainResult result = train_task(in, init);
            bank.add(result.prompt);
            save_prompt(result.prompt, paths.prompt_file(svc.id).string());

            matrix.set(pos + 1, pos + 1,
                       eval_jga_msr(frozen_model, &result.prompt, tok, svc, split.test));

            if (cfg.flags.backward && pos > 0) {
                for (int p = 0; p < pos; ++p) {
                    const Service& prev = stream.services[order[p]];
                    BackwardInputs bin;
                    bin.model = &frozen_model;
                    bin.tok = &tok;
                    bin.prev_service = &prev;
                    bin.memory_indices = memory.of(order[p]);
                    bin.cur_service = &svc;
                    bin.cur_train = split.train;
                    bin.schedule = cfg.backward_schedule;
                    bin.seed = rng::mix(run_seed, kSeedBack, pos * 1024 + p);
                    bin.gate_log = &gate_log;
                    BackwardResult br = backward_transfer_task(bin, bank.get(prev.id));
                    AcceptanceRecord rec =
                        accept_update(frozen_model, tok, bank, prev, memory.of(order[p]),
                                      br.candidate, &accept_log);
                    if (rec.accepted)
                        save_prompt(bank.get(prev.id), paths.prompt_file(prev.id).string());
                }
            }

            if (cfg.full_matrix) {
                for (int p = 0; p < pos; ++p) {
                    const Service& prev = stream.services[order[p]];
                    matrix.set(pos + 1, p + 1,
                               eval_jga_msr(frozen_model, &bank.get(prev.id), tok, prev,
                                            stream.splits[order[p]].test));
                }
            }

            write_text_atomic(paths.matrix, matrix.to_json().dump(1));
            record_progress(run_index, pos + 1, false);
        }

        // final row: re-evaluate every earlier task against the finished bank
        for (int p = 0; p + 1 < t; ++p) {
            const Service& prev = stream.services[order[p]];
            if (!cfg.full_matrix || !matrix.has(t, p + 1))
                matrix.set(t, p + 1,
                           eval_jga_msr(frozen_model, &bank.get(prev.id), tok, prev,
                                        stream.splits[order[p]].test));
        }
    }

    write_text_atomic(paths.matrix, matrix.to_json().dump(1));
    RunMetrics metrics =
        finish_metrics(run_index, run_seed, order, std::move(matrix), cfg.method, cfg.flags);
    write_text_atomic(paths.metrics, metrics.to_json(stream).dump(1));
    record_progress(run_index, t, true);
    return {std::move(metrics), false};
}

}  // namespace

// ---------------------------------------------------------------------------
// Orchestration.
// ---------------------------------------------------------------------------
RunSummary run_experiment(const ExperimentConfig& config) {
    config.validate();
    if (config.out_dir.empty())
        throw std::runtime_error("config: out_dir is required to run an experiment");
    const fs::path out_root(config.out_dir);
    fs::create_directories(out_root);

    // the stream under evaluation
    TaskStream stream;
    if (config.stream_source == "generate") {
        stream = generate_stream(config.generator);
    } else {
        IngestReport report;
        stream = ingest_schema_corpus(config.ingest_path, &report);
        for (const std::string& w : report.warnings)
            std::fprintf(stderr, "ingest: %s\n", w.c_str());
    }
    if (stream.n_tasks() < 1) throw std::runtime_error("stream has no tasks");

    // backbone + tokenizer; the tokenizer must cover the stream exactly
    auto [model, tok] = load_backbone(config.backbone_path);
    model.freeze();
    try {
        for (const std::string& text : stream_vocabulary_texts(stream)) tok.encode(text);
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("the backbone's tokenizer does not cover this "
                                             "stream (pretrain against the same generator "
                                             "settings): ") +
                                 e.what());
    }

    // resolved config + stream snapshot + manifest
    const nlohmann::json cfg_json = config.to_json();
    const fs::path cfg_path = out_root / "config.json";
    const fs::path manifest_path = out_root / "manifest.json";
    const fs::path stream_path = out_root / "stream.json";
    nlohmann::json manifest;
    if (fs::exists(manifest_path)) {
        manifest = read_json_file(manifest_path);
        if (manifest.at("config") != cfg_json)
            throw std::runtime_error("output directory " + config.out_dir +
                                     " belongs to a different configuration; pick a fresh "
                                     "directory or restore the original settings");
        if (!streams_equal(stream, stream_from_json(read_json_file(stream_path))))
            throw std::runtime_error("output directory " + config.out_dir +
                                     " was built from different task data");
    } else {
        manifest["config"] = cfg_json;
        manifest["runs"] = nlohmann::json::array();
        for (int r = 0; r < config.n_runs; ++r)
            manifest["runs"].push_back({{"completed", 0}, {"final", false}});
        write_text_atomic(cfg_path, cfg_json.dump(1));
        write_text_atomic(stream_path, stream_to_json(stream).dump(1));
        write_text_atomic(manifest_path, manifest.dump(1));
    }

    auto record_progress = [&](int run_index, int completed, bool final_row) {
        manifest["runs"][run_index]["completed"] = completed;
        manifest["runs"][run_index]["final"] = final_row;
        write_text_atomic(manifest_path, manifest.dump(1));
    };

    RunSummary summary;
    for (int r = 0; r < config.n_runs; ++r) {
        RunState state;
        state.completed = manifest["runs"][r].value("completed", 0);
        state.final_row = manifest["runs"][r].value("final", false);
        RunOutcome outcome =
            execute_run(config, stream, model, tok, r, out_root, state, record_progress);
        summary.runs.push_back(std::move(outcome.metrics));
    }

    // aggregates
    std::vector<double> jgas, fwts, bwts;
    for (const RunMetrics& m : summary.runs) {
        jgas.push_back(m.avg_jga);
        if (m.fwt) fwts.push_back(*m.fwt);
        if (m.bwt) bwts.push_back(*m.bwt);
    }
    summary.avg_jga = aggregate(jgas);
    if (fwts.size() == summary.runs.size()) summary.fwt = aggregate(fwts);
    if (bwts.size() == summary.runs.size()) summary.bwt = aggregate(bwts);

    const ModelConfig& mc = model.config();
    if (config.method == Method::finetune || config.method == Method::replay) {
        long long total = 0;
        for (const Tensor& p : model.all_params()) total += static_cast<long long>(p.numel());
        summary.tunable_params_per_task = total;
        summary.stored_params_total = total;
    } else {
        summary.tunable_params_per_task = count_tunable_params(mc.prompt_length, mc.d_model);
        summary.stored_params_total =
            summary.tunable_params_per_task * static_cast<long long>(stream.n_tasks());
    }

    // the reproducibility artifact: everything needed to recompute the summary
    nlohmann::json report;
    report["method"] = method_name(config.method);
    report["root_seed"] = config.root_seed;
    report["runs"] = nlohmann::json::array();
    for (const RunMetrics& m : summary.runs) report["runs"].push_back(m.to_json(stream));
    auto agg_json = [](const Aggregate& a) {
        nlohmann::json j = {{"mean", a.mean}, {"n", a.n}};
        j["std"] = a.stddev ? nlohmann::json(*a.stddev) : nlohmann::json(nullptr);
        return j;
    };
    report["aggregate"]["avg_jga"] = agg_json(summary.avg_jga);
    report["aggregate"]["fwt"] =
        summary.fwt ? agg_json(*summary.fwt) : nlohmann::json(nullptr);
    report["aggregate"]["bwt"] =
        summary.bwt ? agg_json(*summary.bwt) : nlohmann::json(nullptr);
    report["tunable_params_per_task"] = summary.tunable_params_per_task;
    report["stored_params_total"] = summary.stored_params_total;
    write_text_atomic(out_root / "metrics.json", report.dump(1));

    SummaryTable table = summarize(config.out_dir);
    write_text_atomic(out_root / "summary.txt", table.text);
    write_text_atomic(out_root / "summary.csv", table.csv);
    return summary;
}

// ---------------------------------------------------------------------------
// Summary rendering.
// ---------------------------------------------------------------------------
namespace {

std::string fmt_agg(const nlohmann::json& agg) {
    if (agg.is_null()) return "-";
    char buf[64];
    if (agg.at("std").is_null())
        std::snprintf(buf, sizeof(buf), "%.4f", agg.at("mean").get<double>());
    else
        std::snprintf(buf, sizeof(buf), "%.4f +/- %.4f", agg.at("mean").get<double>(),
                      agg.at("std").get<double>());
    return buf;
}

std::string csv_agg(const nlohmann::json& agg, bool mean_part) {
    if (agg.is_null()) return "";
    if (mean_part) return std::to_string(agg.at("mean").get<double>());
    if (agg.at("std").is_null()) return "";
    return std::to_string(agg.at("std").get<double>());
}

}  // namespace

SummaryTable summarize(const std::string& dir) {
    const fs::path root(dir);
    std::vector<fs::path> reports;
    if (fs::exists(root / "metrics.json")) {
        reports.push_back(root / "metrics.json");
    } else if (fs::is_directory(root)) {
        std::vector<fs::path> subs;
        for (const auto& entry : fs::directory_iterator(root))
            if (entry.is_directory() && fs::exists(entry.path() / "metrics.json"))
                subs.push_back(entry.path() / "metrics.json");
        std::sort(subs.begin(), subs.end());
        reports = std::move(subs);
    }
    if (reports.empty())
        throw std::runtime_error("no completed runs under " + dir +
                                 " (expected metrics.json)");

    std::vector<std::array<std::string, 6>> rows;
    rows.push_back({"method", "runs", "avg_jga", "fwt", "bwt", "tune_params/task"});
    std::ostringstream csv;
    csv << "method,runs,avg_jga_mean,avg_jga_std,fwt_mean,fwt_std,bwt_mean,bwt_std,"
           "tunable_params_per_task,stored_params_total\n";
    for (const fs::path& path : reports) {
        const nlohmann::json j = read_json_file(path);
        const nlohmann::json& agg = j.at("aggregate");
        const int n = agg.at("avg_jga").at("n").get<int>();
        rows.push_back({j.at("method").get<std::string>(), std::to_string(n),
                        fmt_agg(agg.at("avg_jga")), fmt_agg(agg.at("fwt")),
                        fmt_agg(agg.at("bwt")),
                        std::to_string(j.at("tunable_params_per_task").get<long long>())});
        csv << j.at("method").get<std::string>() << "," << n << ","
            << csv_agg(agg.at("avg_jga"), true) << "," << csv_agg(agg.at("avg_jga"), false)
            << "," << csv_agg(agg.at("fwt"), true) << "," << csv_agg(agg.at("fwt"), false)
            << "," << csv_agg(agg.at("bwt"), true) << "," << csv_agg(agg.at("bwt"), false)
            << "," << j.at("tunable_params_per_task").get<long long>() << ","
            << j.at("stored_params_total").get<long long>() << "\n";
    }

    std::array<size_t, 6> width{};
    for (const auto& row : rows)
        for (size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
    std::ostringstream text;
    for (const auto& row : rows) {
        for (size_t c = 0; c < row.size(); ++c) {
            text << row[c];
            if (c + 1 < row.size())
                text << std::string(width[c] - row[c].size() + 2, ' ');
        }
        text << "\n";
    }
    return {text.str(), csv.str()};
}

}  // namespace cpt
