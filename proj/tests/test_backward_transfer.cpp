#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <sstream>

#include "cpt/backward_transfer.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace cpt;

// ---------------------------------------------------------------------------
// Fixture: service "alpha" plus a twin with identical dialogs under another
// id, and an adversarial variant whose labels are shuffled so that fitting it
// conflicts with fitting alpha.
// ---------------------------------------------------------------------------
namespace {

Service make_service_a() {
    Service s;
    s.id = "svc_a";
    s.name = "alpha";
    s.slots = {{"color", "preferred color", "svc_a"}, {"size", "requested size", "svc_a"}};
    const char* colors[] = {"red", "blue", "green", "gray"};
    const char* sizes[] = {"small", "large", "medium", "tiny"};
    for (int i = 0; i < 8; ++i) {
        DialogExample d;
        d.text = "please order item " + std::to_string(i) + " in " + colors[i % 4] +
                 " sized " + sizes[(i + 1) % 4];
        d.values = {{"color", colors[i % 4]}, {"size", sizes[(i + 1) % 4]}};
        s.dialogs.push_back(d);
    }
    return s;
}

// Same dialogs and slot layout, distinct task identity.
Service make_twin(const Service& a) {
    Service s = a;
    s.id = "svc_twin";
    s.name = "alpha_twin";
    for (Slot& sl : s.slots) sl.service_id = "svc_twin";
    return s;
}

// Same texts, labels rotated one dialog forward: every value is wrong.
Service make_adversarial(const Service& a) {
    Service s = a;
    s.id = "svc_adv";
    s.name = "alpha_adv";
    for (Slot& sl : s.slots) sl.service_id = "svc_adv";
    const int n = static_cast<int>(s.dialogs.size());
    for (int i = 0; i < n; ++i) s.dialogs[i].values = a.dialogs[(i + 1) % n].values;
    return s;
}

Tokenizer build_tok(const Service& a, const Service& twin, const Service& adv) {
    std::vector<std::string> texts{"None ; = : ."};
    for (const Service* s : {&a, &twin, &adv}) {
        texts.push_back(s->name);
        texts.push_back(build_query(s->slots).rendered);
        for (const DialogExample& d : s->dialogs) {
            texts.push_back(restatement_text(*s, d));
            for (const auto& [k, v] : d.values) texts.push_back(v);
        }
    }
    return Tokenizer::build(texts);
}

ModelConfig make_cfg(const Tokenizer& tok) {
    ModelConfig cfg;
    cfg.vocab_size = tok.size();
    cfg.d_model = 32;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.max_seq_len = 96;
    cfg.prompt_length = 4;
    return cfg;
}

// A short denoising pass over alpha's restatements, mostly in the
// cloze-the-values form, so labels genuinely move the loss. Without it the
// gate would be comparing pure noise gradients.
Backbone build_backbone(const Service& a, const Tokenizer& tok, const ModelConfig& cfg) {
    std::vector<std::vector<int>> corpus;
    for (const DialogExample& d : a.dialogs) corpus.push_back(tok.encode(restatement_text(a, d)));
    PretrainOptions popt;
    popt.steps = 700;
    popt.batch = 8;
    popt.lr = 2e-3;
    popt.cloze_fraction = 0.7;
    popt.cloze_colon_id = tok.id(":");
    popt.cloze_period_id = tok.id(".");
    popt.seed = 5;
    return pretrain_backbone(corpus, cfg, popt);
}

struct Fixture {
    Service a = make_service_a();
    Service twin = make_twin(a);
    Service adv = make_adversarial(a);
    Tokenizer tok = build_tok(a, twin, adv);
    ModelConfig cfg = make_cfg(tok);
    Backbone model = build_backbone(a, tok, cfg);

    Split full_split(const Service& s) const {
        Split sp;
        for (int i = 0; i < static_cast<int>(s.dialogs.size()) - 2; ++i) sp.train.push_back(i);
        sp.val = {static_cast<int>(s.dialogs.size()) - 2,
                  static_cast<int>(s.dialogs.size()) - 1};
        return sp;
    }

    // A prompt part-way through learning alpha: still descending, so batch
    // gradients on alpha-like data stay informative.
    SoftPrompt part_trained_prompt() const {
        Split sp = full_split(a);
        TrainTaskInputs in;
        in.model = &model;
        in.tokenizer = &tok;
        in.service = &a;
        in.split = &sp;
        in.task_id = "svc_a";
        in.schedule.phase_a_epochs = 2;
        in.schedule.phase_b_epochs = 0;
        in.schedule.lr = 0.3;
        in.seed = 7;
        SoftPrompt init = init_prompt_random(model, 41);
        init.task_id = "svc_a";
        return train_task(in, init).prompt;
    }
};

// Pretraining once is enough; every case reads, none mutates.
const Fixture& fixture() {
    static const Fixture fx;
    return fx;
}

}  // namespace

// ---------------------------------------------------------------------------
// gated_gradient
// ---------------------------------------------------------------------------

TEST_CASE("gate passes agreeing gradients and zeroes the rest") {
    auto [g1, d1] = gated_gradient({1.0, 2.0}, {1.0, 2.0});
    CHECK(g1 == std::vector<double>{1.0, 2.0});
    CHECK(d1.applied);
    CHECK(d1.dot_product == doctest::Approx(5.0));

    auto [g2, d2] = gated_gradient({1.0, 2.0}, {-1.0, -2.0});
    CHECK(g2 == std::vector<double>{0.0, 0.0});
    CHECK_FALSE(d2.applied);
    CHECK(d2.dot_product == doctest::Approx(-5.0));

    // exactly orthogonal: the inequality is strict, so the step is dropped
    auto [g3, d3] = gated_gradient({1.0, 0.0}, {0.0, 1.0});
    CHECK(g3 == std::vector<double>{0.0, 0.0});
    CHECK_FALSE(d3.applied);
    CHECK(d3.dot_product == 0.0);

    CHECK_THROWS(gated_gradient({1.0}, {1.0, 2.0}));
    CHECK_THROWS(gated_gradient({std::nan("")}, {1.0}));
    CHECK_THROWS(gated_gradient({1.0}, {std::numeric_limits<double>::infinity()}));
}

TEST_CASE("gate decision matches the dot product sign on random vectors") {
    auto rng = rng::engine(404);
    for (int trial = 0; trial < 500; ++trial) {
        const int n = rng::uniform_int(rng, 1, 20);
        std::vector<double> a(n), b(n);
        double dot = 0.0;
        for (int i = 0; i < n; ++i) {
            a[i] = rng::uniform_real(rng, -2.0, 2.0);
            b[i] = rng::uniform_real(rng, -2.0, 2.0);
            dot += a[i] * b[i];
        }
        auto [g, d] = gated_gradient(a, b);
        CHECK(d.applied == (dot > 0.0));
        CHECK(d.dot_product == doctest::Approx(dot));
        if (d.applied)
            CHECK(g == a);
        else
            CHECK(g == std::vector<double>(n, 0.0));
    }
}

TEST_CASE("acceptance rule truth table") {
    CHECK(acceptance_rule(1.0, 0.9, 0.5, 0.5));        // lower loss, equal quality
    CHECK(acceptance_rule(1.0, 0.9, 0.5, 0.6));        // lower loss, better quality
    CHECK_FALSE(acceptance_rule(1.0, 0.9, 0.5, 0.4));  // quality veto
    CHECK_FALSE(acceptance_rule(1.0, 1.0, 0.5, 0.9));  // loss must be strictly lower
    CHECK_FALSE(acceptance_rule(1.0, 1.1, 0.5, 0.9));
    CHECK_FALSE(acceptance_rule(1.0, 1.0, 0.5, 0.5));  // the identity candidate
}

// ---------------------------------------------------------------------------
// backward_transfer_task
// ---------------------------------------------------------------------------

TEST_CASE("zero epochs returns an exact copy and no decisions") {
    const Fixture& fx = fixture();
    SoftPrompt p = init_prompt_random(fx.model, 5);
    p.task_id = "svc_a";

    BackwardInputs in;
    in.model = &fx.model;
    in.tok = &fx.tok;
    in.prev_service = &fx.a;
    in.memory_indices = {0, 1, 2};
    in.cur_service = &fx.twin;
    in.cur_train = {0, 1, 2, 3};
    in.schedule.epochs = 0;
    BackwardResult r = backward_transfer_task(in, p);
    CHECK(r.candidate.hash() == p.hash());
    CHECK(r.candidate.task_id == "svc_a");
    CHECK(r.decisions.empty());
    CHECK(r.applied_steps == 0);
    CHECK(r.applied_fraction() == 0.0);
}

TEST_CASE("input validation") {
    const Fixture& fx = fixture();
    SoftPrompt p = init_prompt_random(fx.model, 5);

    BackwardInputs in;
    in.model = &fx.model;
    in.tok = &fx.tok;
    in.prev_service = &fx.a;
    in.cur_service = &fx.twin;
    in.cur_train = {0, 1};
    in.memory_indices = {};  // gating is undefined without reference batches
    CHECK_THROWS(backward_transfer_task(in, p));
    in.memory_indices = {0};
    in.cur_train = {};
    CHECK_THROWS(backward_transfer_task(in, p));
    in.cur_train = {0, 1};
    in.schedule.batch_size = 0;
    CHECK_THROWS(backward_transfer_task(in, p));
    in.schedule.batch_size = 4;
    in.schedule.epochs = -1;
    CHECK_THROWS(backward_transfer_task(in, p));
}

TEST_CASE("twin data is mostly applied, adversarial data is mostly gated off") {
    const Fixture& fx = fixture();
    const uint64_t backbone_hash = fx.model.param_hash();
    SoftPrompt p = fx.part_trained_prompt();
    const uint64_t prompt_hash = p.hash();

    BackwardInputs in;
    in.model = &fx.model;
    in.tok = &fx.tok;
    in.prev_service = &fx.a;
    in.memory_indices = {0, 1, 2, 3, 4, 5};
    in.cur_train = {0, 1, 2, 3, 4, 5};
    in.schedule.epochs = 4;
    in.schedule.batch_size = 3;
    in.schedule.lr = 0.05;
    in.seed = 11;

    in.cur_service = &fx.twin;
    BackwardResult twin = backward_transfer_task(in, p);
    in.cur_service = &fx.adv;
    BackwardResult adv = backward_transfer_task(in, p);

    CHECK(twin.steps() == 8);  // 4 epochs x ceil(6/3)
    CHECK(adv.steps() == 8);

    // same-distribution gradients agree far more often than label-shuffled ones
    CHECK(twin.applied_fraction() > adv.applied_fraction());
    CHECK(twin.applied_fraction() >= 0.75);
    CHECK(adv.applied_fraction() <= 0.5);

    // neither run touches the inputs
    CHECK(fx.model.param_hash() == backbone_hash);
    CHECK(p.hash() == prompt_hash);
    CHECK(twin.candidate.hash() != p.hash());  // applied steps moved the copy

    // per-step bookkeeping is consistent
    for (const BackwardResult* r : {&twin, &adv}) {
        int applied = 0;
        for (const GateDecision& d : r->decisions) {
            CHECK(d.applied == (d.dot_product > 0.0));
            applied += d.applied ? 1 : 0;
        }
        CHECK(applied == r->applied_steps);
        CHECK(r->memory_batch_loss.size() == r->decisions.size());
    }
}

TEST_CASE("gating keeps memory loss from rising on adversarial data") {
    const Fixture& fx = fixture();
    SoftPrompt p = fx.part_trained_prompt();

    BackwardInputs in;
    in.model = &fx.model;
    in.tok = &fx.tok;
    in.prev_service = &fx.a;
    // memory batch == the whole memory set, so per-step losses are comparable
    in.memory_indices = {0, 1, 2, 3, 4, 5};
    in.cur_service = &fx.adv;
    in.cur_train = {0, 1, 2, 3, 4, 5};
    in.schedule.epochs = 12;
    in.schedule.batch_size = 6;
    in.schedule.lr = 0.02;  // small steps keep the first-order guarantee tight
    in.seed = 3;

    std::ostringstream log;
    in.gate_log = &log;
    BackwardResult r = backward_transfer_task(in, p);
    REQUIRE(r.steps() == 12);

    // step 0 measures the unmodified candidate, i.e. the incumbent prompt
    const double start = r.memory_batch_loss.front();
    for (double l : r.memory_batch_loss) CHECK(l <= start + 0.02);

    // the gate log carries one parseable line per step, applied iff dot > 0
    std::istringstream lines(log.str());
    std::string line;
    int parsed = 0, applied = 0;
    while (std::getline(lines, line)) {
        const nlohmann::json j = nlohmann::json::parse(line);
        CHECK(j.at("prev_task").get<std::string>() == "svc_a");
        CHECK(j.at("step").get<int>() == parsed);
        const bool a = j.at("applied").get<bool>();
        const double dot = j.at("dot").get<double>();
        CHECK(a == (dot > 0.0));
        CHECK(j.at("mem_loss").get<double>() ==
              doctest::Approx(r.memory_batch_loss[parsed]));
        applied += a ? 1 : 0;
        ++parsed;
    }
    CHECK(parsed == r.steps());
    CHECK(applied == r.applied_steps);
}

TEST_CASE("same seed gives an identical run") {
    const Fixture& fx = fixture();
    SoftPrompt p = fx.part_trained_prompt();

    BackwardInputs in;
    in.model = &fx.model;
    in.tok = &fx.tok;
    in.prev_service = &fx.a;
    in.memory_indices = {0, 1, 2};
    in.cur_service = &fx.twin;
    in.cur_train = {0, 1, 2, 3};
    in.schedule.epochs = 3;
    in.seed = 21;

    BackwardResult r1 = backward_transfer_task(in, p);
    BackwardResult r2 = backward_transfer_task(in, p);
    CHECK(r1.candidate.hash() == r2.candidate.hash());
    CHECK(r1.applied_steps == r2.applied_steps);
    REQUIRE(r1.steps() == r2.steps());
    for (int i = 0; i < r1.steps(); ++i) {
        CHECK(r1.decisions[i].dot_product == r2.decisions[i].dot_product);
        CHECK(r1.memory_batch_loss[i] == r2.memory_batch_loss[i]);
    }

    in.seed = 22;
    BackwardResult r3 = backward_transfer_task(in, p);
    CHECK(r3.candidate.hash() != r1.candidate.hash());
}

// ---------------------------------------------------------------------------
// accept_update
// ---------------------------------------------------------------------------

TEST_CASE("identity candidates are rejected and leave the bank untouched") {
    const Fixture& fx = fixture();
    SoftPrompt p = fx.part_trained_prompt();

    PromptBank bank;
    bank.add(p);
    const uint64_t bank_hash = bank.hash();

    std::ostringstream log;
    AcceptanceRecord rec =
        accept_update(fx.model, fx.tok, bank, fx.a, {0, 1, 2}, p.clone(), &log);
    CHECK_FALSE(rec.accepted);  // equal loss is not strictly lower
    CHECK(rec.prev_task == "svc_a");
    CHECK(rec.new_loss == doctest::Approx(rec.old_loss));
    CHECK(rec.new_jga == doctest::Approx(rec.old_jga));
    CHECK(bank.hash() == bank_hash);

    const nlohmann::json j = nlohmann::json::parse(log.str());
    CHECK(j.at("accepted").get<bool>() == false);
    CHECK(j.at("old_loss").get<double>() == doctest::Approx(rec.old_loss));
    CHECK(j.at("new_loss").get<double>() == doctest::Approx(rec.new_loss));
    CHECK(j.at("old_jga").get<double>() == doctest::Approx(rec.old_jga));
    CHECK(j.at("new_jga").get<double>() == doctest::Approx(rec.new_jga));
}

TEST_CASE("a strictly better candidate replaces the banked prompt") {
    const Fixture& fx = fixture();

    // incumbent: untrained random prompt; candidate: part-trained on the task
    SoftPrompt incumbent = init_prompt_random(fx.model, 99);
    incumbent.task_id = "svc_a";
    PromptBank bank;
    bank.add(incumbent);
    SoftPrompt candidate = fx.part_trained_prompt();

    AcceptanceRecord rec = accept_update(fx.model, fx.tok, bank, fx.a, {0, 1, 2}, candidate);
    CHECK(rec.accepted == acceptance_rule(rec.old_loss, rec.new_loss, rec.old_jga, rec.new_jga));
    REQUIRE(rec.accepted);  // training strictly lowers loss, JGA cannot drop below zero
    CHECK(rec.new_loss < rec.old_loss);
    CHECK(rec.new_jga >= rec.old_jga);
    CHECK(bank.get("svc_a").hash() == candidate.hash());

    // flipping the direction: the displaced incumbent cannot win back its slot
    AcceptanceRecord back = accept_update(fx.model, fx.tok, bank, fx.a, {0, 1, 2}, incumbent);
    CHECK_FALSE(back.accepted);
    CHECK(bank.get("svc_a").hash() == candidate.hash());
}

TEST_CASE("acceptance validation errors") {
    const Fixture& fx = fixture();
    SoftPrompt p = init_prompt_random(fx.model, 1);
    p.task_id = "svc_a";
    PromptBank bank;
    bank.add(p);

    CHECK_THROWS(accept_update(fx.model, fx.tok, bank, fx.a, {}, p.clone()));  // empty memory
    SoftPrompt wrong = p.clone();
    wrong.task_id = "svc_twin";  // mismatched service
    CHECK_THROWS(accept_update(fx.model, fx.tok, bank, fx.a, {0}, wrong));
    PromptBank empty_bank;
    CHECK_THROWS(accept_update(fx.model, fx.tok, empty_bank, fx.a, {0}, p.clone()));
}
