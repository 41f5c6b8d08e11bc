#include "cpt/evaluate.hpp"

namespace cpt {

EncodedExample encode_msr(const Tokenizer& tok, const std::string& dialog,
                          const ValueMap& values, const Query& query) {
    FormattedExample f = format_example(dialog, values, query);
    EncodedExample e;
    e.input_ids = tok.encode(f.input_text);
    e.input_ids.push_back(Tokenizer::eos_id);
    e.target_ids = tok.encode(f.target_text);
    return e;
}

EncodedExample encode_name(const Tokenizer& tok, const Service& svc,
                           const DialogExample& ex) {
    FormattedExample f = name_format_example(ex.text, svc.name, svc.slots, ex.values);
    EncodedExample e;
    e.input_ids = tok.encode(f.input_text);
    e.input_ids.push_back(Tokenizer::eos_id);
    e.target_ids = tok.encode(f.target_text);  // may be empty: model emits eos only
    return e;
}

double mean_loss(const Backbone& model, const SoftPrompt* prompt,
                 const std::vector<EncodedExample>& examples) {
    if (examples.empty()) throw std::runtime_error("mean_loss: no examples");
    NoGradGuard ng;
    double sum = 0.0;
    long tokens = 0;
    for (const EncodedExample& e : examples) {
        // the loss labels every target token plus the closing eos
        if (e.target_ids.empty()) {
            Tensor enc = model.encode(e.input_ids, prompt ? &prompt->embeddings : nullptr);
            Tensor logits = model.decode_logits(enc, {Tokenizer::bos_id});
            sum += cross_entropy_sum(logits, {Tokenizer::eos_id}).item();
            tokens += 1;
        } else if (prompt) {
            sum += prompted_loss(model, *prompt, e.input_ids, e.target_ids).item();
            tokens += static_cast<long>(e.target_ids.size()) + 1;
        } else {
            sum += unprompted_loss(model, e.input_ids, e.target_ids).item();
            tokens += static_cast<long>(e.target_ids.size()) + 1;
        }
    }
    return sum / static_cast<double>(tokens);
}

int generation_budget(int n_slots) { return 4 * n_slots + 6; }

double eval_jga_msr(const Backbone& model, const SoftPrompt* prompt, const Tokenizer& tok,
                    const Service& svc, const std::vector<int>& indices) {
    if (indices.empty()) throw std::runtime_error("eval: no examples for " + svc.name);
    Query query = build_query(svc.slots);
    const int budget = generation_budget(static_cast<int>(svc.slots.size()));
    std::vector<ValueMap> preds, golds;
    preds.reserve(indices.size());
    golds.reserve(indices.size());
    for (int idx : indices) {
        const DialogExample& d = svc.dialogs.at(idx);
        EncodedExample e = encode_msr(tok, d.text, d.values, query);
        std::vector<int> out = generate(model, prompt, e.input_ids, budget);
        preds.push_back(parse_prediction(tok.decode(out), query));
        golds.push_back(pad_values(d.values, svc.slots));
    }
    return joint_goal_accuracy(preds, golds);
}

double eval_jga_name(const Backbone& model, const Tokenizer& tok, const Service& svc,
                     const std::vector<int>& indices) {
    if (indices.empty()) throw std::runtime_error("eval: no examples for " + svc.name);
    const int budget = generation_budget(static_cast<int>(svc.slots.size()));
    std::vector<ValueMap> preds, golds;
    for (int idx : indices) {
        const DialogExample& d = svc.dialogs.at(idx);
        EncodedExample e = encode_name(tok, svc, d);
        std::vector<int> out = generate(model, nullptr, e.input_ids, budget);
        preds.push_back(parse_name_format(tok.decode(out), svc.slots));
        golds.push_back(pad_values(d.values, svc.slots));
    }
    return joint_goal_accuracy(preds, golds);
}

}  // namespace cpt
