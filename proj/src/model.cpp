#include "cpt/model.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace cpt {

void ModelConfig::validate() const {
    if (vocab_size <= 0) throw std::runtime_error("model config: vocab_size must be positive");
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || ffn_mult <= 0)
        throw std::runtime_error("model config: sizes must be positive");
    if (d_model % n_heads != 0)
        throw std::runtime_error("model config: d_model " + std::to_string(d_model) +
                                 " not divisible by " + std::to_string(n_heads) + " heads");
    if (prompt_length < 1) throw std::runtime_error("model config: prompt_length must be >= 1");
    if (max_seq_len < prompt_length + 8)
        throw std::runtime_error("model config: max_seq_len must be at least prompt_length + 8");
}

SoftPrompt SoftPrompt::clone() const {
    SoftPrompt p;
    p.task_id = task_id;
    p.embeddings = embeddings.clone();
    p.embeddings.set_requires_grad(true);
    return p;
}

namespace {

Tensor randn(std::vector<int> shape, double stddev, rng::Engine& rng) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (double& v : t.values()) v = rng::normal(rng, 0.0, stddev);
    return t;
}

Backbone::AttnBlock make_attn(int d, rng::Engine& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    Backbone::AttnBlock b;
    b.ln_g = Tensor::full({d}, 1.0, true);
    b.ln_b = Tensor::zeros({d}, true);
    b.wq = randn({d, d}, s, rng);
    b.wk = randn({d, d}, s, rng);
    b.wv = randn({d, d}, s, rng);
    b.wo = randn({d, d}, s, rng);
    return b;
}

Backbone::FfnBlock make_ffn(int d, int mult, rng::Engine& rng) {
    Backbone::FfnBlock b;
    b.ln_g = Tensor::full({d}, 1.0, true);
    b.ln_b = Tensor::zeros({d}, true);
    b.w1 = randn({d, d * mult}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    b.b1 = Tensor::zeros({d * mult}, true);
    b.w2 = randn({d * mult, d}, 1.0 / std::sqrt(static_cast<double>(d * mult)), rng);
    b.b2 = Tensor::zeros({d}, true);
    return b;
}

void collect_attn(const Backbone::AttnBlock& b, std::vector<Tensor>& out) {
    out.insert(out.end(), {b.ln_g, b.ln_b, b.wq, b.wk, b.wv, b.wo});
}
void collect_ffn(const Backbone::FfnBlock& b, std::vector<Tensor>& out) {
    out.insert(out.end(), {b.ln_g, b.ln_b, b.w1, b.b1, b.w2, b.b2});
}

Tensor attn_sublayer(const Backbone::AttnBlock& b, const Tensor& h, int n_heads,
                     bool causal) {
    Tensor x = layer_norm(h, b.ln_g, b.ln_b);
    Tensor att = multihead_attention(matmul(x, b.wq), matmul(x, b.wk), matmul(x, b.wv),
                                     n_heads, causal);
    return add(h, matmul(att, b.wo));
}

Tensor cross_sublayer(const Backbone::AttnBlock& b, const Tensor& h, const Tensor& enc,
                      int n_heads) {
    Tensor x = layer_norm(h, b.ln_g, b.ln_b);
    Tensor att = multihead_attention(matmul(x, b.wq), matmul(enc, b.wk),
                                     matmul(enc, b.wv), n_heads, false);
    return add(h, matmul(att, b.wo));
}

Tensor ffn_sublayer(const Backbone::FfnBlock& b, const Tensor& h) {
    Tensor x = layer_norm(h, b.ln_g, b.ln_b);
    Tensor mid = relu(add_bias(matmul(x, b.w1), b.b1));
    return add(h, add_bias(matmul(mid, b.w2), b.b2));
}

}  // namespace

Backbone::Backbone(const ModelConfig& config, uint64_t seed) : cfg_(config) {
    cfg_.validate();
    auto rng = rng::engine(rng::mix(seed, 0xb0de1));
    embedding_ = randn({cfg_.vocab_size, cfg_.d_model}, 0.1, rng);

    // Fixed sinusoidal positions, never trained. Scaled down to the token
    // embedding std so position info perturbs rather than dominates the sum.
    positions_ = Tensor::zeros({cfg_.max_seq_len, cfg_.d_model}, false);
    for (int p = 0; p < cfg_.max_seq_len; ++p)
        for (int j = 0; j < cfg_.d_model; ++j) {
            const double angle =
                p / std::pow(10000.0, 2.0 * (j / 2) / static_cast<double>(cfg_.d_model));
            positions_.values()[static_cast<size_t>(p) * cfg_.d_model + j] =
                0.1 * ((j % 2 == 0) ? std::sin(angle) : std::cos(angle));
        }

    for (int l = 0; l < cfg_.n_layers; ++l) {
        EncLayer e;
        e.attn = make_attn(cfg_.d_model, rng);
        e.ffn = make_ffn(cfg_.d_model, cfg_.ffn_mult, rng);
        enc_.push_back(std::move(e));
        DecLayer d;
        d.self_attn = make_attn(cfg_.d_model, rng);
        d.cross_attn = make_attn(cfg_.d_model, rng);
        d.ffn = make_ffn(cfg_.d_model, cfg_.ffn_mult, rng);
        dec_.push_back(std::move(d));
    }
    enc_ln_g_ = Tensor::full({cfg_.d_model}, 1.0, true);
    enc_ln_b_ = Tensor::zeros({cfg_.d_model}, true);
    dec_ln_g_ = Tensor::full({cfg_.d_model}, 1.0, true);
    dec_ln_b_ = Tensor::zeros({cfg_.d_model}, true);
}

Tensor Backbone::embed_with_positions(const std::vector<int>& ids) const {
    std::vector<int> pos(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) pos[i] = static_cast<int>(i);
    return add(embedding_rows(embedding_, ids), embedding_rows(positions_, pos));
}

Tensor Backbone::encode(const std::vector<int>& ids, const Tensor* prompt) const {
    if (ids.empty()) throw std::runtime_error("encode: empty input");
    const int m = prompt ? prompt->rows() : 0;
    if (static_cast<int>(ids.size()) + m > cfg_.max_seq_len)
        throw std::runtime_error("encode: input length " + std::to_string(ids.size()) +
                                 " + prompt " + std::to_string(m) + " exceeds max_seq_len " +
                                 std::to_string(cfg_.max_seq_len));
    Tensor h = embed_with_positions(ids);
    if (prompt) h = concat_rows(h, *prompt);
    for (const EncLayer& l : enc_) {
        h = attn_sublayer(l.attn, h, cfg_.n_heads, false);
        h = ffn_sublayer(l.ffn, h);
    }
    return layer_norm(h, enc_ln_g_, enc_ln_b_);
}

Tensor Backbone::decode_logits(const Tensor& enc_states, const std::vector<int>& dec_in) const {
    if (dec_in.empty()) throw std::runtime_error("decode: empty decoder input");
    if (static_cast<int>(dec_in.size()) > cfg_.max_seq_len)
        throw std::runtime_error("decode: length " + std::to_string(dec_in.size()) +
                                 " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
    Tensor h = embed_with_positions(dec_in);
    for (const DecLayer& l : dec_) {
        h = attn_sublayer(l.self_attn, h, cfg_.n_heads, true);
        h = cross_sublayer(l.cross_attn, h, enc_states, cfg_.n_heads);
        h = ffn_sublayer(l.ffn, h);
    }
    h = layer_norm(h, dec_ln_g_, dec_ln_b_);
    return matmul_nt(h, embedding_);  // tied output projection
}

std::vector<Tensor> Backbone::all_params() const {
    std::vector<Tensor> out;
    out.push_back(embedding_);
    for (const EncLayer& l : enc_) {
        collect_attn(l.attn, out);
        collect_ffn(l.ffn, out);
    }
    out.insert(out.end(), {enc_ln_g_, enc_ln_b_});
    for (const DecLayer& l : dec_) {
        collect_attn(l.self_attn, out);
        collect_attn(l.cross_attn, out);
        collect_ffn(l.ffn, out);
    }
    out.insert(out.end(), {dec_ln_g_, dec_ln_b_});
    return out;
}

ParamGroup Backbone::param_group() const { return {"backbone", all_params(), frozen_}; }

uint64_t Backbone::param_hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const Tensor& t : all_params()) h = byte_hash(t, h);
    return h;
}

void Backbone::freeze() {
    for (Tensor& t : all_params()) t.set_requires_grad(false);
    frozen_ = true;
}

void Backbone::unfreeze() {
    for (Tensor& t : all_params()) t.set_requires_grad(true);
    frozen_ = false;
}

// ---- losses and decoding ------------------------------------------------------

namespace {
Tensor sequence_loss(const Backbone& model, const Tensor* prompt,
                     const std::vector<int>& input_ids, const std::vector<int>& target_ids) {
    if (target_ids.empty()) throw std::runtime_error("loss: empty target");
    Tensor enc = model.encode(input_ids, prompt);
    std::vector<int> dec_in;
    dec_in.reserve(target_ids.size() + 1);
    dec_in.push_back(Tokenizer::bos_id);
    dec_in.insert(dec_in.end(), target_ids.begin(), target_ids.end());
    std::vector<int> labels = target_ids;
    labels.push_back(Tokenizer::eos_id);
    Tensor logits = model.decode_logits(enc, dec_in);
    return cross_entropy_sum(logits, labels);
}
}  // namespace

Tensor prompted_loss(const Backbone& model, const SoftPrompt& prompt,
                     const std::vector<int>& input_ids, const std::vector<int>& target_ids) {
    return sequence_loss(model, &prompt.embeddings, input_ids, target_ids);
}

Tensor unprompted_loss(const Backbone& model, const std::vector<int>& input_ids,
                       const std::vector<int>& target_ids) {
    return sequence_loss(model, nullptr, input_ids, target_ids);
}

std::vector<int> generate(const Backbone& model, const SoftPrompt* prompt,
                          const std::vector<int>& input_ids, int max_len) {
    if (max_len < 0) throw std::runtime_error("generate: negative max_len");
    if (max_len + 1 > model.config().max_seq_len)
        throw std::runtime_error("generate: max_len exceeds max_seq_len");
    std::vector<int> out;
    if (max_len == 0) return out;
    NoGradGuard ng;
    Tensor enc = model.encode(input_ids, prompt ? &prompt->embeddings : nullptr);
    std::vector<int> dec_in = {Tokenizer::bos_id};
    for (int step = 0; step < max_len; ++step) {
        Tensor logits = model.decode_logits(enc, dec_in);
        const int v = model.config().vocab_size;
        const double* row = logits.values().data() + (dec_in.size() - 1) * v;
        int best = 0;
        for (int j = 1; j < v; ++j)
            if (row[j] > row[best]) best = j;  // ties keep the lowest id
        if (best == Tokenizer::eos_id) break;
        out.push_back(best);
        dec_in.push_back(best);
    }
    return out;
}

SoftPrompt init_prompt_random(const Backbone& model, uint64_t seed) {
    const ModelConfig& cfg = model.config();
    auto rng = rng::engine(rng::mix(seed, 0x9209));
    SoftPrompt p;
    p.embeddings = Tensor::zeros({cfg.prompt_length, cfg.d_model}, true);
    const auto& emb = model.embedding().values();
    for (int i = 0; i < cfg.prompt_length; ++i) {
        const int tok = rng::uniform_int(rng, 0, cfg.vocab_size - 1);
        for (int j = 0; j < cfg.d_model; ++j)
            p.embeddings.values()[static_cast<size_t>(i) * cfg.d_model + j] =
                emb[static_cast<size_t>(tok) * cfg.d_model + j];
    }
    return p;
}

long long count_tunable_params(const ModelConfig& config) {
    return static_cast<long long>(config.prompt_length) * config.d_model;
}

// ---- pre-training ---------------------------------------------------------------

std::pair<std::vector<int>, std::vector<int>> span_corrupt(const std::vector<int>& seq,
                                                           const PretrainOptions& opt,
                                                           rng::Engine& rng) {
    const int n = static_cast<int>(seq.size());
    // walk the sequence starting spans at rate corruption_rate / mean_span,
    // span lengths uniform in [1, 2*mean_span - 1] so the mean is mean_span
    std::vector<std::pair<int, int>> spans;  // (start, len)
    const double p_start = opt.corruption_rate / opt.mean_span;
    int i = 0;
    while (i < n && static_cast<int>(spans.size()) < Tokenizer::n_sentinels) {
        if (rng::uniform_real(rng, 0.0, 1.0) < p_start) {
            int len = rng::uniform_int(rng, 1, 2 * opt.mean_span - 1);
            len = std::min(len, n - i);
            spans.emplace_back(i, len);
            i += len + 1;  // keep at least one clear token between spans
        } else {
            ++i;
        }
    }
    if (spans.empty()) spans.emplace_back(rng::uniform_int(rng, 0, n - 1), 1);

    std::vector<int> input, target;
    input.reserve(seq.size());
    size_t next = 0;
    for (int pos = 0; pos < n;) {
        if (next < spans.size() && spans[next].first == pos) {
            const int sentinel = Tokenizer::sentinel_id(static_cast<int>(next) + 1);
            input.push_back(sentinel);
            target.push_back(sentinel);
            for (int k = 0; k < spans[next].second; ++k) target.push_back(seq[pos + k]);
            pos += spans[next].second;
            ++next;
        } else {
            input.push_back(seq[pos]);
            ++pos;
        }
    }
    return {std::move(input), std::move(target)};
}

std::optional<std::pair<std::vector<int>, std::vector<int>>> cloze_values(
    const std::vector<int>& seq, int colon_id, int period_id) {
    const int n = static_cast<int>(seq.size());
    int start = 0;
    for (int i = 0; i < n; ++i)
        if (seq[i] == Tokenizer::sep_id) {
            start = i + 1;
            break;
        }
    std::vector<std::pair<int, int>> spans;  // value region [begin, end)
    int i = start;
    while (i < n && static_cast<int>(spans.size()) < Tokenizer::n_sentinels) {
        if (seq[i] == colon_id) {
            int b = i + 1, e = b;
            while (e < n && seq[e] != period_id) ++e;
            if (e < n && e > b) spans.emplace_back(b, e);
            i = e + 1;
        } else {
            ++i;
        }
    }
    if (spans.empty()) return std::nullopt;

    std::vector<int> input, target;
    input.reserve(seq.size());
    size_t next = 0;
    for (int pos = 0; pos < n;) {
        if (next < spans.size() && spans[next].first == pos) {
            const int sentinel = Tokenizer::sentinel_id(static_cast<int>(next) + 1);
            input.push_back(sentinel);
            target.push_back(sentinel);
            for (int k = pos; k < spans[next].second; ++k) target.push_back(seq[k]);
            pos = spans[next].second;
            ++next;
        } else {
            input.push_back(seq[pos]);
            ++pos;
        }
    }
    return std::make_pair(std::move(input), std::move(target));
}

Backbone pretrain_backbone(const std::vector<std::vector<int>>& corpus,
                           const ModelConfig& config, const PretrainOptions& opt) {
    if (corpus.empty()) throw std::runtime_error("pretrain: empty corpus");
    config.validate();
    for (size_t i = 0; i < corpus.size(); ++i) {
        if (corpus[i].empty())
            throw std::runtime_error("pretrain: corpus sequence " + std::to_string(i) +
                                     " is empty");
        if (static_cast<int>(corpus[i].size()) + 1 > config.max_seq_len)
            throw std::runtime_error("pretrain: corpus sequence " + std::to_string(i) +
                                     " has length " + std::to_string(corpus[i].size()) +
                                     " exceeding max_seq_len " +
                                     std::to_string(config.max_seq_len));
        for (int id : corpus[i])
            if (id < 0 || id >= config.vocab_size)
                throw std::runtime_error("pretrain: token id " + std::to_string(id) +
                                         " outside the vocabulary");
    }

    Backbone model(config, rng::mix(opt.seed, 0x12a7));
    OptimizerConfig ocfg;
    ocfg.kind = OptimizerConfig::Kind::adam;
    ocfg.lr = opt.lr;
    ocfg.clip_norm = opt.clip_norm;
    Optimizer optim({model.param_group()}, ocfg);

    auto order_rng = rng::engine(rng::mix(opt.seed, 0x07de7));
    auto corrupt_rng = rng::engine(rng::mix(opt.seed, 0xc0772));
    const bool use_cloze =
        opt.cloze_fraction > 0.0 && opt.cloze_colon_id >= 0 && opt.cloze_period_id >= 0;
    std::vector<int> order = rng::permutation(static_cast<int>(corpus.size()), order_rng);
    size_t cursor = 0;

    const int head = std::min(10, opt.steps);
    double head_sum = 0.0, tail_sum = 0.0;
    int tail_n = 0;
    for (int step = 0; step < opt.steps; ++step) {
        std::vector<Tensor> losses;
        int tokens = 0;
        for (int b = 0; b < opt.batch; ++b) {
            if (cursor >= order.size()) {
                order = rng::permutation(static_cast<int>(corpus.size()), order_rng);
                cursor = 0;
            }
            const std::vector<int>& seq = corpus[order[cursor++]];
            std::pair<std::vector<int>, std::vector<int>> pair;
            bool have = false;
            if (use_cloze && rng::uniform_real(corrupt_rng, 0.0, 1.0) < opt.cloze_fraction) {
                if (auto cloze = cloze_values(seq, opt.cloze_colon_id, opt.cloze_period_id)) {
                    pair = std::move(*cloze);
                    have = true;
                }
            }
            if (!have) pair = span_corrupt(seq, opt, corrupt_rng);
            auto& [input, target] = pair;
            input.push_back(Tokenizer::eos_id);
            losses.push_back(unprompted_loss(model, input, target));
            tokens += static_cast<int>(target.size()) + 1;
        }
        Tensor loss = add_scalars(losses);
        const double per_token = loss.item() / tokens;
        if (!std::isfinite(per_token))
            throw std::runtime_error("pretrain: non-finite loss at step " +
                                     std::to_string(step));
        if (step < head) head_sum += per_token;
        if (step >= opt.steps - head) {
            tail_sum += per_token;
            ++tail_n;
        }
        backward(loss);
        optim.step();
    }

    model.report.steps = opt.steps;
    model.report.initial_loss = head_sum / head;
    model.report.final_loss = tail_sum / std::max(1, tail_n);
    if (model.report.final_loss > 0.5 * model.report.initial_loss) {
        model.report.warned = true;
        model.report.warning =
            "pretraining loss fell from " + std::to_string(model.report.initial_loss) +
            " to only " + std::to_string(model.report.final_loss) +
            " per token; expected at least a 50% drop";
    }
    model.freeze();
    return model;
}

// ---- checkpoints -----------------------------------------------------------------

namespace {

void write_doubles(std::ostream& out, const std::vector<double>& v) {
    const uint64_t n = v.size();
    out.write(reinterpret_cast<const char*>(&n), sizeof(n));
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(n * sizeof(double)));
}

void read_doubles(std::istream& in, std::vector<double>& v) {
    uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), sizeof(n));
    if (!in || n != v.size())
        throw std::runtime_error("checkpoint: tensor size mismatch, file has " +
                                 std::to_string(n) + " values, model wants " +
                                 std::to_string(v.size()));
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw std::runtime_error("checkpoint: truncated tensor data");
}

nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
            {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
            {"max_seq_len", c.max_seq_len}, {"prompt_length", c.prompt_length},
            {"ffn_mult", c.ffn_mult}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.prompt_length = j.at("prompt_length").get<int>();
    c.ffn_mult = j.at("ffn_mult").get<int>();
    return c;
}

}  // namespace

void load_backbone_params(Backbone& model, std::istream& in) {
    for (Tensor& t : model.all_params()) read_doubles(in, t.values());
}

void save_backbone(const Backbone& model, const Tokenizer& tok, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    nlohmann::json header;
    header["format"] = "cpt-backbone";
    header["version"] = 1;
    header["config"] = config_to_json(model.config());
    header["tokenizer"] = tok.to_json();
    header["report"] = {{"initial_loss", model.report.initial_loss},
                        {"final_loss", model.report.final_loss},
                        {"steps", model.report.steps},
                        {"warned", model.report.warned},
                        {"warning", model.report.warning}};
    out << header.dump() << "\n";
    for (const Tensor& t : model.all_params()) write_doubles(out, t.values());
}

std::pair<Backbone, Tokenizer> load_backbone(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    std::string line;
    std::getline(in, line);
    nlohmann::json header = nlohmann::json::parse(line);
    if (header.value("format", "") != "cpt-backbone")
        throw std::runtime_error("checkpoint " + path + " is not a backbone file");
    Backbone model(config_from_json(header.at("config")), 0);
    load_backbone_params(model, in);
    model.report.initial_loss = header["report"].value("initial_loss", 0.0);
    model.report.final_loss = header["report"].value("final_loss", 0.0);
    model.report.steps = header["report"].value("steps", 0);
    model.report.warned = header["report"].value("warned", false);
    model.report.warning = header["report"].value("warning", "");
    model.freeze();
    return {std::move(model), Tokenizer::from_json(header.at("tokenizer"))};
}

void save_prompt(const SoftPrompt& prompt, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write prompt file: " + path);
    nlohmann::json header;
    header["format"] = "cpt-prompt";
    header["version"] = 1;
    header["task_id"] = prompt.task_id;
    header["m"] = prompt.embeddings.rows();
    header["d"] = prompt.embeddings.cols();
    out << header.dump() << "\n";
    write_doubles(out, prompt.embeddings.values());
}

SoftPrompt load_prompt(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open prompt file: " + path);
    std::string line;
    std::getline(in, line);
    nlohmann::json header = nlohmann::json::parse(line);
    if (header.value("format", "") != "cpt-prompt")
        throw std::runtime_error("prompt file " + path + " has the wrong format tag");
    SoftPrompt p;
    p.task_id = header.at("task_id").get<std::string>();
    p.embeddings = Tensor::zeros({header.at("m").get<int>(), header.at("d").get<int>()}, true);
    read_doubles(in, p.embeddings.values());
    return p;
}

}  // namespace cpt
