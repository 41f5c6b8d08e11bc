#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cpt/optim.hpp"
#include "cpt/rng.hpp"
#include "cpt/tensor.hpp"
#include "cpt/tokenizer.hpp"

namespace cpt {

struct ModelConfig {
    int vocab_size = 0;
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int max_seq_len = 192;
    int prompt_length = 20;  // m
    int ffn_mult = 4;

    void validate() const;
};

struct PretrainReport {
    double initial_loss = 0.0;  // mean per-token, first steps
    double final_loss = 0.0;    // mean per-token, last steps
    int steps = 0;
    bool warned = false;        // loss failed to halve
    std::string warning;
};

struct SoftPrompt {
    std::string task_id;
    Tensor embeddings;  // [m, d], tunable

    SoftPrompt clone() const;
    uint64_t hash() const { return byte_hash(embeddings); }
};

// Pre-LN encoder-decoder with tied input/output embeddings and fixed
// sinusoidal positions. One example per graph; batches accumulate losses.
class Backbone {
  public:
    struct AttnBlock {
        Tensor ln_g, ln_b, wq, wk, wv, wo;
    };
    struct FfnBlock {
        Tensor ln_g, ln_b, w1, b1, w2, b2;
    };
    struct EncLayer {
        AttnBlock attn;
        FfnBlock ffn;
    };
    struct DecLayer {
        AttnBlock self_attn, cross_attn;
        FfnBlock ffn;
    };

    Backbone() = default;
    Backbone(const ModelConfig& config, uint64_t seed);  // fresh random weights

    const ModelConfig& config() const { return cfg_; }
    const Tensor& embedding() const { return embedding_; }

    // Encoder states for token ids, with the soft prompt appended after the
    // tokens when given: [x; Q; P]. Positions apply to tokens only; prompt
    // rows are free parameters and carry their own learned offsets.
    Tensor encode(const std::vector<int>& ids, const Tensor* prompt) const;
    // Teacher-forced logits [|dec_in|, vocab] against encoder states.
    Tensor decode_logits(const Tensor& enc_states, const std::vector<int>& dec_in) const;

    std::vector<Tensor> all_params() const;
    ParamGroup param_group() const;  // name "backbone", frozen flag mirrored
    uint64_t param_hash() const;
    void freeze();
    void unfreeze();  // fine-tuning baseline only
    bool frozen() const { return frozen_; }

    PretrainReport report;

  private:
    ModelConfig cfg_;
    bool frozen_ = false;
    Tensor embedding_;   // [vocab, d]
    Tensor positions_;   // [max_seq_len, d], constant
    std::vector<EncLayer> enc_;
    std::vector<DecLayer> dec_;
    Tensor enc_ln_g_, enc_ln_b_, dec_ln_g_, dec_ln_b_;

    Tensor embed_with_positions(const std::vector<int>& ids) const;
    friend void load_backbone_params(Backbone&, std::istream&);
};

// Sum of -log p(target_t) with the prompt appended to the encoder input.
// Decoder input is [bos, target...]; labels are [target..., eos].
Tensor prompted_loss(const Backbone& model, const SoftPrompt& prompt,
                     const std::vector<int>& input_ids, const std::vector<int>& target_ids);
// Same loss without any prompt (pre-training and the fine-tune baseline).
Tensor unprompted_loss(const Backbone& model, const std::vector<int>& input_ids,
                       const std::vector<int>& target_ids);

// Greedy argmax decoding, at most max_len tokens, stops at eos. Ties break
// toward the lowest token id so decoding is exactly reproducible.
std::vector<int> generate(const Backbone& model, const SoftPrompt* prompt,
                          const std::vector<int>& input_ids, int max_len);

// Each prompt row copies the embedding of a uniformly drawn vocabulary token.
SoftPrompt init_prompt_random(const Backbone& model, uint64_t seed);

long long count_tunable_params(const ModelConfig& config);

// ---- span-corruption pre-training -----------------------------------------

struct PretrainOptions {
    int steps = 12000;
    int batch = 8;
    double lr = 1e-3;
    double clip_norm = 1.0;
    double corruption_rate = 0.15;
    int mean_span = 2;
    // Fraction of training examples denoised with cloze_values instead of
    // random spans; needs the colon/period token ids, else spans are used.
    double cloze_fraction = 0.5;
    int cloze_colon_id = -1;
    int cloze_period_id = -1;
    uint64_t seed = 0;
};

// Masks random spans with sentinel tokens; the pair is (corrupted input,
// "<Mi> span ..." target), the same layout the task codec emits.
std::pair<std::vector<int>, std::vector<int>> span_corrupt(const std::vector<int>& seq,
                                                           const PretrainOptions& opt,
                                                           rng::Engine& rng);

// Masks the value region of every "label : value ." clause after the first
// separator token, one sentinel per clause. This is the all-slots-masked
// shape the task queries take; random spans alone almost never produce it.
// Returns nullopt when the sequence contains no complete clause.
std::optional<std::pair<std::vector<int>, std::vector<int>>> cloze_values(
    const std::vector<int>& seq, int colon_id, int period_id);

Backbone pretrain_backbone(const std::vector<std::vector<int>>& corpus,
                           const ModelConfig& config, const PretrainOptions& opt);

// ---- checkpoints (raw little-endian doubles after a JSON header line) ------

void save_backbone(const Backbone& model, const Tokenizer& tok, const std::string& path);
std::pair<Backbone, Tokenizer> load_backbone(const std::string& path);
void save_prompt(const SoftPrompt& prompt, const std::string& path);
SoftPrompt load_prompt(const std::string& path);

}  // namespace cpt
