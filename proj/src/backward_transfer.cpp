#include "cpt/backward_transfer.hpp"

#include <cmath>
#include <ostream>
#include <stdexcept>

#include "cpt/rng.hpp"
#include "json.hpp"

namespace cpt {

std::pair<std::vector<double>, GateDecision> gated_gradient(const std::vector<double>& g_ori,
                                                            const std::vector<double>& g_ref) {
    if (g_ori.size() != g_ref.size())
        throw std::runtime_error("gated_gradient: length mismatch " +
                                 std::to_string(g_ori.size()) + " vs " +
                                 std::to_string(g_ref.size()));
    double dot = 0.0;
    for (size_t i = 0; i < g_ori.size(); ++i) {
        if (!std::isfinite(g_ori[i]) || !std::isfinite(g_ref[i]))
            throw std::runtime_error("gated_gradient: non-finite entry at " + std::to_string(i));
        dot += g_ori[i] * g_ref[i];
    }
    if (!std::isfinite(dot)) throw std::runtime_error("gated_gradient: dot product overflowed");
    GateDecision decision{dot, dot > 0.0};
    if (decision.applied) return {g_ori, decision};
    return {std::vector<double>(g_ori.size(), 0.0), decision};
}

BackwardResult backward_transfer_task(const BackwardInputs& in, const SoftPrompt& prompt) {
    if (!in.model || !in.tok || !in.prev_service || !in.cur_service)
        throw std::runtime_error("backward_transfer: missing inputs");
    if (in.memory_indices.empty())
        throw std::runtime_error("backward_transfer: empty memory for task " +
                                 in.prev_service->id);
    if (in.cur_train.empty())
        throw std::runtime_error("backward_transfer: empty current-task data");
    if (in.schedule.epochs < 0 || in.schedule.batch_size < 1)
        throw std::runtime_error("backward_transfer: bad schedule");

    BackwardResult out;
    out.candidate = prompt.clone();
    if (in.schedule.epochs == 0) return out;

    const Backbone& model = *in.model;
    const Tokenizer& tok = *in.tok;

    const Query prev_q = build_query(in.prev_service->slots);
    const Query cur_q = build_query(in.cur_service->slots);
    std::vector<EncodedExample> mem, cur;
    for (int idx : in.memory_indices) {
        const DialogExample& d = in.prev_service->dialogs.at(idx);
        mem.push_back(encode_msr(tok, d.text, d.values, prev_q));
    }
    for (int idx : in.cur_train) {
        const DialogExample& d = in.cur_service->dialogs.at(idx);
        cur.push_back(encode_msr(tok, d.text, d.values, cur_q));
    }

    OptimizerConfig ocfg;
    ocfg.kind = OptimizerConfig::Kind::adam;
    ocfg.lr = in.schedule.lr;
    ocfg.clip_norm = in.schedule.clip_norm;
    Optimizer optim({{"candidate", {out.candidate.embeddings}, false}}, ocfg);

    auto order_rng = rng::engine(rng::mix(in.seed, 0xbac4));
    auto mem_rng = rng::engine(rng::mix(in.seed, 0x3e30));
    std::vector<int> mem_order = rng::permutation(static_cast<int>(mem.size()), mem_rng);
    size_t mem_at = 0;
    auto next_mem = [&]() -> const EncodedExample& {
        if (mem_at >= mem_order.size()) {  // cycle with a fresh shuffle
            mem_order = rng::permutation(static_cast<int>(mem.size()), mem_rng);
            mem_at = 0;
        }
        return mem[mem_order[mem_at++]];
    };

    Tensor emb = out.candidate.embeddings;
    int step = 0;
    for (int epoch = 0; epoch < in.schedule.epochs; ++epoch) {
        std::vector<int> order = rng::permutation(static_cast<int>(cur.size()), order_rng);
        for (size_t at = 0; at < order.size(); at += in.schedule.batch_size) {
            // proposed update: gradient on the current task's batch
            std::vector<Tensor> losses;
            const size_t end = std::min(order.size(), at + in.schedule.batch_size);
            for (size_t b = at; b < end; ++b) {
                const EncodedExample& e = cur[order[b]];
                losses.push_back(prompted_loss(model, out.candidate, e.input_ids, e.target_ids));
            }
            backward(add_scalars(losses));
            if (!emb.has_grad())
                throw std::runtime_error("backward_transfer: no gradient on candidate");
            std::vector<double> g_ori = emb.grad();
            emb.clear_grad();

            // reference: gradient on a synchronized batch from memory
            std::vector<Tensor> mem_losses;
            long mem_tokens = 0;
            for (int b = 0; b < in.schedule.batch_size; ++b) {
                const EncodedExample& e = next_mem();
                mem_losses.push_back(
                    prompted_loss(model, out.candidate, e.input_ids, e.target_ids));
                mem_tokens += static_cast<long>(e.target_ids.size()) + 1;
            }
            Tensor mem_loss = add_scalars(mem_losses);
            const double mem_per_token = mem_loss.item() / mem_tokens;
            if (!std::isfinite(mem_per_token))
                throw std::runtime_error("backward_transfer: non-finite memory loss at step " +
                                         std::to_string(step));
            backward(mem_loss);
            std::vector<double> g_ref = emb.grad();
            emb.clear_grad();

            auto [gated, decision] = gated_gradient(g_ori, g_ref);
            if (decision.applied) {
                emb.grad() = std::move(gated);
                optim.step();
                ++out.applied_steps;
            }
            out.decisions.push_back(decision);
            out.memory_batch_loss.push_back(mem_per_token);
            if (in.gate_log) {
                const nlohmann::json line{{"prev_task", in.prev_service->id},
                                          {"step", step},
                                          {"dot", decision.dot_product},
                                          {"applied", decision.applied},
                                          {"mem_loss", mem_per_token}};
                (*in.gate_log) << line.dump() << "\n";
            }
            ++step;
        }
    }
    return out;
}

AcceptanceRecord accept_update(const Backbone& model, const Tokenizer& tok, PromptBank& bank,
                               const Service& prev_service,
                               const std::vector<int>& memory_indices,
                               const SoftPrompt& candidate, std::ostream* log) {
    if (memory_indices.empty()) throw std::runtime_error("accept_update: empty memory");
    if (candidate.task_id != prev_service.id)
        throw std::runtime_error("accept_update: candidate task " + candidate.task_id +
                                 " does not match service " + prev_service.id);
    if (!bank.has(candidate.task_id))
        throw std::runtime_error("accept_update: no banked prompt for " + candidate.task_id);

    const Query q = build_query(prev_service.slots);
    std::vector<EncodedExample> mem;
    for (int idx : memory_indices) {
        const DialogExample& d = prev_service.dialogs.at(idx);
        mem.push_back(encode_msr(tok, d.text, d.values, q));
    }

    const SoftPrompt& incumbent = bank.get(candidate.task_id);
    AcceptanceRecord rec;
    rec.prev_task = candidate.task_id;
    rec.old_loss = mean_loss(model, &incumbent, mem);
    rec.new_loss = mean_loss(model, &candidate, mem);
    rec.old_jga = eval_jga_msr(model, &incumbent, tok, prev_service, memory_indices);
    rec.new_jga = eval_jga_msr(model, &candidate, tok, prev_service, memory_indices);
    rec.accepted = acceptance_rule(rec.old_loss, rec.new_loss, rec.old_jga, rec.new_jga);
    if (rec.accepted) bank.replace(candidate.task_id, candidate);
    if (log) {
        const nlohmann::json line{{"prev_task", rec.prev_task}, {"old_loss", rec.old_loss},
                                  {"new_loss", rec.new_loss},   {"old_jga", rec.old_jga},
                                  {"new_jga", rec.new_jga},     {"accepted", rec.accepted}};
        (*log) << line.dump() << "\n";
    }
    return rec;
}

}  // namespace cpt
