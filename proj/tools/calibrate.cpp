// Calibration harness: exercises generation, pre-training, and single-task
// prompt tuning end to end, printing the quality and timing numbers that the
// default experiment schedules were tuned against. Not part of the test
// suite; run by hand when changing model or generator defaults.

#include <chrono>
#include <cstdio>
#include <fstream>

#include "CLI11.hpp"
#include "cpt/evaluate.hpp"
#include "cpt/model.hpp"
#include "cpt/rng.hpp"
#include "cpt/task_stream.hpp"

using namespace cpt;
using Clock = std::chrono::steady_clock;

static double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

int main(int argc, char** argv) {
    CLI::App app{"pipeline calibration"};
    int pretrain_steps = 12000;
    double pretrain_lr = 1e-3;
    int mean_span = 2;
    double corruption_rate = 0.15;
    double cloze_fraction = 0.5;
    int tune_epochs = 10;
    double tune_lr = 0.1;
    int tune_batch = 4;
    int tune_task = 0;
    int dump_predictions = 0;
    uint64_t seed = 1;
    std::string backbone_path;
    app.add_option("--pretrain-steps", pretrain_steps);
    app.add_option("--pretrain-lr", pretrain_lr);
    app.add_option("--mean-span", mean_span);
    app.add_option("--corruption-rate", corruption_rate);
    app.add_option("--cloze", cloze_fraction);
    app.add_option("--dump", dump_predictions, "print this many val predictions after tuning");
    app.add_option("--backbone", backbone_path, "cache file: load if present, else pretrain and save");
    app.add_option("--tune-task", tune_task);
    app.add_option("--tune-epochs", tune_epochs);
    app.add_option("--tune-lr", tune_lr);
    app.add_option("--tune-batch", tune_batch);
    app.add_option("--seed", seed);
    CLI11_PARSE(app, argc, argv);

    // ---- stream and tokenizer ----
    auto t0 = Clock::now();
    GeneratorConfig gcfg;
    gcfg.seed = seed;
    TaskStream stream = generate_stream(gcfg);
    TaskStream pre_stream = generate_pretrain_stream(gcfg);
    std::vector<std::string> vocab_texts = stream_vocabulary_texts(stream);
    for (const std::string& t : stream_vocabulary_texts(pre_stream)) vocab_texts.push_back(t);
    Tokenizer tok = Tokenizer::build(vocab_texts);
    std::printf("stream: %d tasks (+%d held-out), vocab %d (%.2fs)\n", stream.n_tasks(),
                pre_stream.n_tasks(), tok.size(), seconds_since(t0));

    ModelConfig mcfg;
    mcfg.vocab_size = tok.size();
    size_t max_enc = 0, max_restate = 0, n_train = 0;
    for (const TaskStream* ts : {&stream, &pre_stream}) {
        for (int i = 0; i < ts->n_tasks(); ++i) {
            const Service& svc = ts->services[i];
            Query q = build_query(svc.slots);
            for (const DialogExample& d : svc.dialogs) {
                EncodedExample e = encode_msr(tok, d.text, d.values, q);
                max_enc = std::max(max_enc, e.input_ids.size() + mcfg.prompt_length);
                max_restate = std::max(max_restate, tok.encode(restatement_text(svc, d)).size());
            }
            if (ts == &stream) n_train += ts->splits[i].train.size();
        }
    }
    std::printf("lengths: max encoder+prompt %zu, max restatement %zu, max_seq %d\n",
                max_enc, max_restate, mcfg.max_seq_len);
    std::printf("train examples total: %zu\n", n_train);

    // ---- pre-training (or cached backbone) ----
    auto pretrain = [&]() -> Backbone {
        std::vector<std::vector<int>> corpus;
        for (const std::string& text : build_pretrain_corpus(pre_stream))
            corpus.push_back(tok.encode(text));
        PretrainOptions popt;
        popt.steps = pretrain_steps;
        popt.lr = pretrain_lr;
        popt.mean_span = mean_span;
        popt.corruption_rate = corruption_rate;
        popt.cloze_fraction = cloze_fraction;
        popt.cloze_colon_id = tok.id(":");
        popt.cloze_period_id = tok.id(".");
        popt.seed = seed;
        t0 = Clock::now();
        Backbone m = pretrain_backbone(corpus, mcfg, popt);
        std::printf("pretrain: %d steps in %.1fs, loss %.3f -> %.3f per token%s\n", popt.steps,
                    seconds_since(t0), m.report.initial_loss, m.report.final_loss,
                    m.report.warned ? " [WARNED]" : "");
        if (!backbone_path.empty()) save_backbone(m, tok, backbone_path);
        return m;
    };
    auto load_cached = [&]() -> Backbone {
        auto [m, cached_tok] = load_backbone(backbone_path);
        if (cached_tok.size() != tok.size())
            throw std::runtime_error("cached backbone tokenizer mismatch");
        std::printf("loaded backbone from %s (pretrain loss %.3f -> %.3f)\n",
                    backbone_path.c_str(), m.report.initial_loss, m.report.final_loss);
        return m;
    };
    const bool have_cache =
        !backbone_path.empty() && std::ifstream(backbone_path).good();
    Backbone model = have_cache ? load_cached() : pretrain();

    // ---- masked single-token reconstruction on held-out restatements ----
    auto reconstruction = [&](const TaskStream& ts, const char* label) {
        auto rng = rng::engine(rng::mix(seed, 0xeea1));
        int hits = 0, total = 0;
        for (int i = 0; i < ts.n_tasks(); ++i) {
            const Service& svc = ts.services[i];
            for (int idx : ts.splits[i].val) {
                std::vector<int> seq = tok.encode(restatement_text(svc, svc.dialogs[idx]));
                const int pos = rng::uniform_int(rng, 0, (int)seq.size() - 1);
                std::vector<int> input = seq;
                input[pos] = Tokenizer::sentinel_id(1);
                input.push_back(Tokenizer::eos_id);
                std::vector<int> out = generate(model, nullptr, input, 4);
                if (out.size() >= 2 && out[0] == Tokenizer::sentinel_id(1) &&
                    out[1] == seq[pos])
                    ++hits;
                ++total;
            }
        }
        std::printf("single-token reconstruction (%s): %d/%d = %.3f\n", label, hits,
                    total, (double)hits / total);
    };
    reconstruction(pre_stream, "pretrain services, val split");
    reconstruction(stream, "unseen services");

    // ---- single-task prompt tuning ----
    {
        const Service& svc = stream.services[tune_task];
        const Split& split = stream.splits[tune_task];
        Query q = build_query(svc.slots);
        std::vector<EncodedExample> train, val;
        for (int idx : split.train)
            train.push_back(encode_msr(tok, svc.dialogs[idx].text, svc.dialogs[idx].values, q));
        for (int idx : split.val)
            val.push_back(encode_msr(tok, svc.dialogs[idx].text, svc.dialogs[idx].values, q));

        SoftPrompt prompt = init_prompt_random(model, rng::mix(seed, 0x1e57));
        OptimizerConfig ocfg;
        ocfg.lr = tune_lr;
        ocfg.clip_norm = 1.0;
        Optimizer opt({{"prompt", {prompt.embeddings}, false}}, ocfg);
        auto rng = rng::engine(rng::mix(seed, 0x0ba7c4));

        std::printf("tuning task %s: %zu train, lr %.3f, batch %d\n", svc.name.c_str(),
                    train.size(), tune_lr, tune_batch);
        t0 = Clock::now();
        for (int epoch = 0; epoch < tune_epochs; ++epoch) {
            std::vector<int> order = rng::permutation((int)train.size(), rng);
            double epoch_loss = 0.0;
            long tokens = 0;
            for (size_t at = 0; at < order.size(); at += tune_batch) {
                std::vector<Tensor> losses;
                for (size_t b = at; b < std::min(order.size(), at + tune_batch); ++b) {
                    const EncodedExample& e = train[order[b]];
                    losses.push_back(prompted_loss(model, prompt, e.input_ids, e.target_ids));
                    tokens += (long)e.target_ids.size() + 1;
                }
                Tensor loss = add_scalars(losses);
                epoch_loss += loss.item();
                backward(loss);
                opt.step();
            }
            const double vl = mean_loss(model, &prompt, val);
            const double vj = eval_jga_msr(model, &prompt, tok, svc, split.val);
            std::printf("  epoch %2d: train %.4f val %.4f val_jga %.3f (%.1fs)\n", epoch,
                        epoch_loss / tokens, vl, vj, seconds_since(t0));
        }
        for (int k = 0; k < dump_predictions && k < (int)split.val.size(); ++k) {
            const DialogExample& d = svc.dialogs[split.val[k]];
            EncodedExample e = encode_msr(tok, d.text, d.values, q);
            std::vector<int> out =
                generate(model, &prompt, e.input_ids, generation_budget((int)q.slots.size()));
            std::printf("  gold: %s\n  pred: %s\n", tok.decode(e.target_ids).c_str(),
                        tok.decode(out).c_str());
        }
        const double tj = eval_jga_msr(model, &prompt, tok, svc, split.test);
        std::printf("test jga after tuning: %.3f\n", tj);
        std::printf("zero-prompt test jga (no tuning): %.3f\n",
                    eval_jga_msr(model, nullptr, tok, svc, split.test));
    }
    return 0;
}
