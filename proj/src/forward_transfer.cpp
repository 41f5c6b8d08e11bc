#include "cpt/forward_transfer.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>

#include "cpt/optim.hpp"
#include "json.hpp"

namespace cpt {

// ---------------------------------------------------------------------------
// PromptBank
// ---------------------------------------------------------------------------

void PromptBank::add(const SoftPrompt& prompt) {
    if (entries_.count(prompt.task_id))
        throw std::runtime_error("PromptBank::add: task " + prompt.task_id +
                                 " already banked");
    entries_.emplace(prompt.task_id, prompt.clone());
    order_.push_back(prompt.task_id);
}

void PromptBank::replace(const std::string& task_id, const SoftPrompt& prompt) {
    auto it = entries_.find(task_id);
    if (it == entries_.end())
        throw std::runtime_error("PromptBank::replace: task " + task_id + " not banked");
    SoftPrompt copy = prompt.clone();
    copy.task_id = task_id;
    it->second = std::move(copy);
}

bool PromptBank::has(const std::string& task_id) const {
    return entries_.count(task_id) != 0;
}

const SoftPrompt& PromptBank::get(const std::string& task_id) const {
    auto it = entries_.find(task_id);
    if (it == entries_.end())
        throw std::runtime_error("PromptBank::get: task " + task_id + " not banked");
    return it->second;
}

const SoftPrompt& PromptBank::most_recent() const {
    if (order_.empty()) throw std::runtime_error("PromptBank::most_recent: empty bank");
    return entries_.at(order_.back());
}

uint64_t PromptBank::hash() const {
    uint64_t h = 0xba9cba9cull;
    for (const std::string& id : order_) {
        for (char ch : id) h = rng::mix(h, static_cast<uint64_t>(ch));
        h = rng::mix(h, entries_.at(id).hash());
    }
    return h;
}

// ---------------------------------------------------------------------------
// Initialization strategies
// ---------------------------------------------------------------------------

SoftPrompt cl_init(const Backbone& model, const PromptBank& bank,
                   const std::string& task_id, uint64_t seed) {
    SoftPrompt p = bank.empty() ? init_prompt_random(model, seed) : bank.most_recent().clone();
    p.task_id = task_id;
    return p;
}

SoftPrompt select_init(const Backbone& model, const PromptBank& bank,
                       const std::vector<EncodedExample>& val_set,
                       const std::string& task_id, uint64_t seed) {
    if (val_set.empty()) throw std::runtime_error("select_init: empty validation set");
    if (bank.empty()) {
        SoftPrompt p = init_prompt_random(model, seed);
        p.task_id = task_id;
        return p;
    }
    const SoftPrompt* best = nullptr;
    double best_loss = std::numeric_limits<double>::infinity();
    for (const std::string& id : bank.completion_order()) {
        const SoftPrompt& cand = bank.get(id);
        const double loss = mean_loss(model, &cand, val_set);
        if (loss <= best_loss) {  // later completion wins ties
            best_loss = loss;
            best = &cand;
        }
    }
    SoftPrompt p = best->clone();
    p.task_id = task_id;
    return p;
}

// ---------------------------------------------------------------------------
// Query fusion
// ---------------------------------------------------------------------------

FusionSample fuse_query(const std::vector<Slot>& own_slots, const std::vector<Slot>& pool,
                        const ValueMap& values, rng::Engine& rng) {
    if (own_slots.empty()) throw std::runtime_error("fuse_query: no own slots");

    auto unfused = [&]() {
        FusionSample s;
        s.n1 = static_cast<int>(own_slots.size());
        s.n2 = 0;
        s.fused = false;
        s.query = build_query(own_slots);
        ValueMap padded = pad_values(values, own_slots);
        for (const Slot& slot : own_slots) s.targets.push_back(padded[slot.name]);
        return s;
    };
    if (pool.empty()) return unfused();

    const int n1 = rng::uniform_int(rng, 1, static_cast<int>(own_slots.size()));
    std::vector<int> kept_idx =
        rng::sample_without_replacement(static_cast<int>(own_slots.size()), n1, rng);

    std::set<std::string> used;
    for (int i : kept_idx) used.insert(own_slots[i].name);
    std::vector<Slot> usable;  // first occurrence per name, kept names excluded
    for (const Slot& s : pool)
        if (used.insert(s.name).second) usable.push_back(s);
    if (usable.empty()) return unfused();

    int n2 = rng::uniform_int(rng, 1, n1);
    n2 = std::min(n2, static_cast<int>(usable.size()));
    std::vector<int> inj_idx =
        rng::sample_without_replacement(static_cast<int>(usable.size()), n2, rng);

    // tag each fused slot with whether it keeps the example's own value
    std::vector<std::pair<Slot, bool>> tagged;
    for (int i : kept_idx) tagged.emplace_back(own_slots[i], true);
    for (int i : inj_idx) tagged.emplace_back(usable[i], false);
    rng::shuffle(tagged, rng);

    FusionSample s;
    s.n1 = n1;
    s.n2 = n2;
    s.fused = true;
    std::vector<Slot> fused_slots;
    for (auto& [slot, kept] : tagged) fused_slots.push_back(slot);
    s.query = build_query(fused_slots);
    for (auto& [slot, kept] : tagged) {
        if (!kept) {
            s.targets.push_back("None");
            continue;
        }
        auto it = values.find(slot.name);
        s.targets.push_back(it == values.end() || it->second.empty() ? "None" : it->second);
    }
    return s;
}

FusionSample fuse_for_task(const std::map<std::string, std::vector<Slot>>& slots_by_task,
                           const std::string& owner_task_id, const ValueMap& values,
                           rng::Engine& rng) {
    auto own = slots_by_task.find(owner_task_id);
    if (own == slots_by_task.end())
        throw std::runtime_error("fuse_for_task: owner task " + owner_task_id +
                                 " not in slot table");
    std::vector<Slot> pool;
    for (const auto& [id, slots] : slots_by_task) {
        if (id == owner_task_id) continue;
        pool.insert(pool.end(), slots.begin(), slots.end());
    }
    return fuse_query(own->second, pool, values, rng);
}

// ---------------------------------------------------------------------------
// Two-phase training
// ---------------------------------------------------------------------------

std::string epoch_log_line(const EpochLog& e) {
    nlohmann::json j{{"task", e.task},          {"phase", std::string(1, e.phase)},
                     {"epoch", e.epoch},       {"train_loss", e.train_loss},
                     {"val_loss", e.val_loss}, {"val_jga", e.val_jga},
                     {"wall_ms", e.wall_ms}};
    return j.dump();
}

namespace {

// One training visit: a dialog, its values, its task's plain query, and the
// owner task id used when its query is fused.
struct Visit {
    const std::string* dialog = nullptr;
    const ValueMap* values = nullptr;
    const Query* plain_query = nullptr;
    const std::string* owner_task = nullptr;
};

EncodedExample encode_visit(const Tokenizer& tok, const Visit& v,
                            const std::map<std::string, std::vector<Slot>>& slots_by_task,
                            bool fuse, rng::Engine& rng) {
    FormattedExample f;
    if (fuse) {
        FusionSample s = fuse_for_task(slots_by_task, *v.owner_task, *v.values, rng);
        f = format_with_targets(*v.dialog, s.query, s.targets);
    } else {
        f = format_example(*v.dialog, *v.values, *v.plain_query);
    }
    EncodedExample e;
    e.input_ids = tok.encode(f.input_text);
    e.input_ids.push_back(Tokenizer::eos_id);
    e.target_ids = tok.encode(f.target_text);
    return e;
}

}  // namespace

TrainResult train_task(const TrainTaskInputs& in, const SoftPrompt& init) {
    if (!in.model || !in.tokenizer || !in.service || !in.split)
        throw std::runtime_error("train_task: missing inputs");
    if (in.split->train.empty()) throw std::runtime_error("train_task: empty train split");
    if (in.split->val.empty()) throw std::runtime_error("train_task: empty validation split");
    if (in.flags.query_fusion && !in.seen_slots.count(in.task_id))
        throw std::runtime_error("train_task: fusion enabled but task " + in.task_id +
                                 " missing from seen_slots");
    if (in.schedule.batch_size < 1 || in.schedule.patience < 1)
        throw std::runtime_error("train_task: invalid schedule");

    const Backbone& model = *in.model;
    const Tokenizer& tok = *in.tokenizer;
    const Service& svc = *in.service;

    TrainResult out;
    out.prompt = init.clone();
    out.prompt.task_id = in.task_id;

    Optimizer opt({{"prompt", {out.prompt.embeddings}, false}},
                  {.lr = in.schedule.lr, .clip_norm = in.schedule.clip_norm});

    const Query own_query = build_query(svc.slots);
    std::map<std::string, Query> memory_queries;  // per owner task, unfused
    for (const ReplayExample& m : in.memory)
        if (!memory_queries.count(m.task_id))
            memory_queries.emplace(m.task_id, build_query(m.service->slots));

    // Phase A visits the task's data plus the replayed memory; phase B only
    // the former.
    std::vector<Visit> current, replay;
    for (int idx : in.split->train) {
        const DialogExample& d = svc.dialogs.at(idx);
        current.push_back({&d.text, &d.values, &own_query, &in.task_id});
    }
    if (in.flags.memory_replay)
        for (const ReplayExample& m : in.memory)
            replay.push_back({&m.example->text, &m.example->values,
                              &memory_queries.at(m.task_id), &m.task_id});

    std::vector<EncodedExample> val_enc;
    for (int idx : in.split->val) {
        const DialogExample& d = svc.dialogs.at(idx);
        val_enc.push_back(encode_msr(tok, d.text, d.values, own_query));
    }

    auto rng = rng::engine(rng::mix(in.seed, 0xf07d));

    auto run_phase = [&](char phase, int max_epochs, const std::vector<Visit>& visits,
                         bool fuse) {
        double best_val = std::numeric_limits<double>::infinity();
        int stall = 0;
        for (int epoch = 0; epoch < max_epochs; ++epoch) {
            const auto t0 = std::chrono::steady_clock::now();
            std::vector<int> order = rng::permutation(static_cast<int>(visits.size()), rng);
            double loss_sum = 0.0;
            long tokens = 0;
            for (size_t at = 0; at < order.size(); at += in.schedule.batch_size) {
                std::vector<Tensor> losses;
                for (size_t b = at;
                     b < std::min(order.size(), at + (size_t)in.schedule.batch_size); ++b) {
                    EncodedExample e =
                        encode_visit(tok, visits[order[b]], in.seen_slots, fuse, rng);
                    losses.push_back(
                        prompted_loss(model, out.prompt, e.input_ids, e.target_ids));
                    tokens += static_cast<long>(e.target_ids.size()) + 1;
                }
                Tensor loss = add_scalars(losses);
                const double item = loss.item();
                if (!std::isfinite(item))
                    throw std::runtime_error(
                        "train_task: non-finite loss (task " + in.task_id + ", phase " +
                        std::string(1, phase) + ", epoch " + std::to_string(epoch) + ")");
                loss_sum += item;
                backward(loss);
                opt.step();
            }
            EpochLog log;
            log.task = in.task_id;
            log.phase = phase;
            log.epoch = epoch;
            log.train_loss = tokens ? loss_sum / tokens : 0.0;
            log.val_loss = mean_loss(model, &out.prompt, val_enc);
            log.val_jga = eval_jga_msr(model, &out.prompt, tok, svc, in.split->val);
            log.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                              std::chrono::steady_clock::now() - t0)
                              .count();
            out.log.push_back(log);
            if (in.log_sink) (*in.log_sink) << epoch_log_line(log) << '\n';

            if (log.val_loss < best_val) {
                best_val = log.val_loss;
                stall = 0;
            } else if (++stall >= in.schedule.patience) {
                break;
            }
        }
    };

    std::vector<Visit> joint = current;
    joint.insert(joint.end(), replay.begin(), replay.end());
    run_phase('A', in.schedule.phase_a_epochs, joint, in.flags.query_fusion);
    run_phase('B', in.schedule.phase_b_epochs, current, false);
    return out;
}

}  // namespace cpt
