#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <set>

#include "cpt/model.hpp"
#include "cpt/rng.hpp"

using namespace cpt;

namespace {

ModelConfig tiny_config(int vocab) {
    ModelConfig cfg;
    cfg.vocab_size = vocab;
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.max_seq_len = 48;
    cfg.prompt_length = 4;
    cfg.ffn_mult = 2;
    return cfg;
}

void zero_params(Backbone& model) {
    for (Tensor t : model.all_params())
        for (double& v : t.values()) v = 0.0;
}

}  // namespace

TEST_CASE("config validation") {
    ModelConfig c = tiny_config(32);
    CHECK_NOTHROW(c.validate());
    c.n_heads = 3;  // 16 % 3 != 0
    CHECK_THROWS(c.validate());
    c = tiny_config(32);
    c.vocab_size = 0;
    CHECK_THROWS(c.validate());
    c = tiny_config(32);
    c.max_seq_len = c.prompt_length + 7;
    CHECK_THROWS(c.validate());
    c = tiny_config(32);
    c.prompt_length = 0;
    CHECK_THROWS(c.validate());
}

TEST_CASE("uniform logits give length times log vocab") {
    const int vocab = 32;
    Backbone model(tiny_config(vocab), 1);
    zero_params(model);  // all-zero parameters leave every logit at zero
    model.freeze();
    std::vector<int> input = {20, 21, 22, Tokenizer::eos_id};
    std::vector<int> target = {23, 24, 25};
    Tensor loss = unprompted_loss(model, input, target);
    // labels are the three target tokens plus eos
    CHECK(loss.item() == doctest::Approx(4.0 * std::log((double)vocab)).epsilon(1e-9));
}

TEST_CASE("prompt concatenation extends the encoder by m rows") {
    Backbone model(tiny_config(32), 2);
    model.freeze();
    SoftPrompt p = init_prompt_random(model, 3);
    std::vector<int> input = {20, 21, 22};
    Tensor without = model.encode(input, nullptr);
    Tensor with = model.encode(input, &p.embeddings);
    CHECK(without.rows() == 3);
    CHECK(with.rows() == 3 + model.config().prompt_length);
}

TEST_CASE("length overflow is rejected") {
    ModelConfig cfg = tiny_config(32);
    Backbone model(cfg, 2);
    model.freeze();
    std::vector<int> longseq(cfg.max_seq_len + 1, 20);
    CHECK_THROWS(model.encode(longseq, nullptr));
    SoftPrompt p = init_prompt_random(model, 1);
    std::vector<int> nearly(cfg.max_seq_len - 2, 20);
    CHECK_THROWS(model.encode(nearly, &p.embeddings));
    CHECK_THROWS(unprompted_loss(model, {200}, {1}));  // unknown token id
}

TEST_CASE("memorizing one pair and generating it back") {
    const int vocab = 30;
    ModelConfig cfg = tiny_config(vocab);
    cfg.d_model = 32;
    cfg.n_heads = 4;
    Backbone model(cfg, 7);
    std::vector<int> input = {20, 24, 27, Tokenizer::eos_id};
    std::vector<int> target = {21, 26, 22};

    OptimizerConfig ocfg;
    ocfg.lr = 5e-3;
    ocfg.clip_norm = 1.0;
    Optimizer opt({model.param_group()}, ocfg);
    double first = 0, last = 0;
    for (int step = 0; step < 300; ++step) {
        Tensor loss = unprompted_loss(model, input, target);
        if (step == 0) first = loss.item();
        last = loss.item();
        backward(loss);
        opt.step();
    }
    CHECK(last < first);
    CHECK(last < 0.05);
    model.freeze();
    CHECK(generate(model, nullptr, input, 10) == target);
    // determinism and the max_len boundary
    CHECK(generate(model, nullptr, input, 10) == generate(model, nullptr, input, 10));
    CHECK(generate(model, nullptr, input, 0).empty());
    CHECK((int)generate(model, nullptr, input, 2).size() <= 2);
}

TEST_CASE("prompt gradients match finite differences") {
    const int vocab = 24;
    Backbone model(tiny_config(vocab), 11);
    model.freeze();
    std::vector<int> input = {20, 21, Tokenizer::eos_id};
    std::vector<int> target = {22, 23};
    for (uint64_t seed : {1ull, 2ull}) {
        SoftPrompt p = init_prompt_random(model, seed);
        auto f = [&] { return prompted_loss(model, p, input, target); };
        auto rep = finite_difference_check(f, {p.embeddings}, 1e-5);
        CHECK(rep.max_rel_err < 1e-4);
    }
}

TEST_CASE("backbone gradients match finite differences when unfrozen") {
    const int vocab = 24;
    Backbone model(tiny_config(vocab), 13);
    std::vector<int> input = {20, 21, Tokenizer::eos_id};
    std::vector<int> target = {22, 23};
    auto f = [&] { return unprompted_loss(model, input, target); };
    // probe a strided subset of every parameter tensor
    auto rep = finite_difference_check(f, model.all_params(), 1e-5, 8);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("freezing keeps backbone bytes fixed through prompt tuning") {
    const int vocab = 24;
    Backbone model(tiny_config(vocab), 17);
    model.freeze();
    const uint64_t before = model.param_hash();
    SoftPrompt p = init_prompt_random(model, 5);
    SoftPrompt other = init_prompt_random(model, 6);
    const uint64_t other_hash = other.hash();
    OptimizerConfig ocfg;
    ocfg.lr = 1e-2;
    Optimizer opt({{"prompt", {p.embeddings}, false}, model.param_group()}, ocfg);
    std::vector<int> input = {20, 21, Tokenizer::eos_id};
    std::vector<int> target = {22};
    for (int step = 0; step < 5; ++step) {
        Tensor loss = prompted_loss(model, p, input, target);
        backward(loss);
        opt.step();
    }
    CHECK(model.param_hash() == before);   // backbone untouched
    CHECK(other.hash() == other_hash);     // unrelated prompt untouched
    CHECK(model.frozen());
}

TEST_CASE("random prompt rows copy embedding rows") {
    const int vocab = 64;
    ModelConfig cfg = tiny_config(vocab);
    Backbone model(cfg, 19);
    model.freeze();
    SoftPrompt a = init_prompt_random(model, 42);
    SoftPrompt b = init_prompt_random(model, 42);
    CHECK(a.hash() == b.hash());
    CHECK(a.embeddings.shape() == std::vector<int>{cfg.prompt_length, cfg.d_model});

    const int d = cfg.d_model;
    const auto& emb = model.embedding().values();
    std::set<int> seen_rows;
    for (int trial = 0; trial < 2500; ++trial) {
        SoftPrompt p = init_prompt_random(model, 1000 + trial);
        for (int i = 0; i < cfg.prompt_length; ++i) {
            int match = -1;
            for (int r = 0; r < vocab && match < 0; ++r) {
                bool eq = true;
                for (int j = 0; j < d && eq; ++j)
                    eq = p.embeddings.values()[i * d + j] == emb[r * d + j];
                if (eq) match = r;
            }
            REQUIRE(match >= 0);  // every row is a verbatim embedding copy
            seen_rows.insert(match);
        }
        if (trial * cfg.prompt_length > 10000 && (int)seen_rows.size() >= 58) break;
    }
    // 10,000 uniform draws cover at least 90% of a 64-token vocabulary
    CHECK((int)seen_rows.size() >= 58);
}

TEST_CASE("tunable parameter count") {
    ModelConfig full;
    full.vocab_size = 1000;
    full.d_model = 512;
    full.prompt_length = 100;
    full.max_seq_len = 512;
    CHECK(count_tunable_params(full) == 51200);
    ModelConfig one;
    one.prompt_length = 1;
    one.d_model = 1;
    CHECK(count_tunable_params(one) == 1);
    ModelConfig desk;
    desk.prompt_length = 20;
    desk.d_model = 64;
    CHECK(count_tunable_params(desk) == 1280);
}

TEST_CASE("span corruption statistics and reconstruction") {
    PretrainOptions opt;
    auto rng = rng::engine(31);
    long corrupted = 0, total = 0;
    for (int trial = 0; trial < 2000; ++trial) {
        std::vector<int> seq;
        const int n = rng::uniform_int(rng, 8, 40);
        for (int i = 0; i < n; ++i) seq.push_back(20 + rng::uniform_int(rng, 0, 9));
        auto [input, target] = span_corrupt(seq, opt, rng);

        // reconstructing the original from input + target must be exact
        std::vector<int> rebuilt;
        size_t tpos = 0;
        for (int tok : input) {
            if (Tokenizer::is_sentinel(tok)) {
                REQUIRE(tpos < target.size());
                REQUIRE(target[tpos] == tok);
                ++tpos;
                while (tpos < target.size() && !Tokenizer::is_sentinel(target[tpos]))
                    rebuilt.push_back(target[tpos++]);
            } else {
                rebuilt.push_back(tok);
            }
        }
        REQUIRE(rebuilt == seq);

        // sentinels appear in ascending order starting at <M1>
        int expect = 1;
        for (int tok : input)
            if (Tokenizer::is_sentinel(tok))
                CHECK(tok == Tokenizer::sentinel_id(expect++));

        corrupted += (long)(target.size() - (expect - 1));
        total += n;
    }
    const double rate = (double)corrupted / (double)total;
    CHECK(rate > 0.10);
    CHECK(rate < 0.22);
}

TEST_CASE("cloze masking covers exactly the clause values") {
    Tokenizer tok =
        Tokenizer::build({"we need a red shirt <sep> preferred color : red . requested size : None ."});
    const int colon = tok.id(":"), period = tok.id(".");

    auto res = cloze_values(
        tok.encode("we need a red shirt <sep> preferred color : red . requested size : None ."),
        colon, period);
    REQUIRE(res.has_value());
    CHECK(tok.decode(res->first) ==
          "we need a red shirt <sep> preferred color : <M1> . requested size : <M2> .");
    CHECK(tok.decode(res->second) == "<M1> red <M2> None");

    // multi-word value stays one masked unit
    auto multi = cloze_values(tok.encode("a <sep> preferred color : red shirt ."), colon, period);
    REQUIRE(multi.has_value());
    CHECK(tok.decode(multi->first) == "a <sep> preferred color : <M1> .");
    CHECK(tok.decode(multi->second) == "<M1> red shirt");

    // no separator: clauses are still found from the start of the sequence
    auto bare = cloze_values(tok.encode("color : red ."), colon, period);
    REQUIRE(bare.has_value());
    CHECK(tok.decode(bare->first) == "color : <M1> .");

    // no clause at all, or an empty/unterminated value region -> nullopt
    CHECK_FALSE(cloze_values(tok.encode("we need a red shirt"), colon, period).has_value());
    CHECK_FALSE(cloze_values(tok.encode("a <sep> color : ."), colon, period).has_value());
    CHECK_FALSE(cloze_values(tok.encode("a <sep> color : red"), colon, period).has_value());
}

TEST_CASE("pretraining memorizes a singleton corpus") {
    Tokenizer tok = Tokenizer::build({"a b c d"});
    ModelConfig cfg = tiny_config(tok.size());
    std::vector<std::vector<int>> corpus = {tok.encode("a b c d")};
    PretrainOptions opt;
    opt.steps = 200;
    opt.batch = 2;
    opt.lr = 3e-3;
    opt.seed = 3;
    Backbone model = pretrain_backbone(corpus, cfg, opt);
    CHECK(model.report.final_loss < model.report.initial_loss);
    CHECK(model.frozen());
    CHECK_THROWS(pretrain_backbone({}, cfg, opt));
    CHECK_THROWS(pretrain_backbone({std::vector<int>(cfg.max_seq_len + 4, 20)}, cfg, opt));
}

TEST_CASE("checkpoint round trips are lossless") {
    Tokenizer tok = Tokenizer::build({"w x y z"});
    ModelConfig cfg = tiny_config(tok.size());
    Backbone model(cfg, 23);
    model.report.initial_loss = 3.5;
    model.report.final_loss = 0.7;
    model.report.steps = 11;
    model.freeze();
    const std::string path = "backbone_ckpt_test.bin";
    save_backbone(model, tok, path);
    auto [loaded, tok2] = load_backbone(path);
    CHECK(loaded.param_hash() == model.param_hash());
    CHECK(loaded.config().d_model == cfg.d_model);
    CHECK(loaded.report.final_loss == model.report.final_loss);
    CHECK(tok2.size() == tok.size());
    CHECK(loaded.frozen());
    // a loss computed by the loaded model is bit-identical
    std::vector<int> input = {20, 21, Tokenizer::eos_id};
    std::vector<int> target = {22};
    CHECK(byte_hash(unprompted_loss(model, input, target)) ==
          byte_hash(unprompted_loss(loaded, input, target)));
    std::remove(path.c_str());

    SoftPrompt p = init_prompt_random(model, 77);
    p.task_id = "svc_3";
    const std::string ppath = "prompt_ckpt_test.bin";
    save_prompt(p, ppath);
    SoftPrompt q = load_prompt(ppath);
    CHECK(q.task_id == "svc_3");
    CHECK(q.hash() == p.hash());
    std::remove(ppath.c_str());
}

TEST_CASE("prompt clone is detached") {
    Backbone model(tiny_config(24), 29);
    model.freeze();
    SoftPrompt a = init_prompt_random(model, 4);
    SoftPrompt b = a.clone();
    b.embeddings.values()[0] += 1.0;
    CHECK(a.embeddings.values()[0] != b.embeddings.values()[0]);
}
