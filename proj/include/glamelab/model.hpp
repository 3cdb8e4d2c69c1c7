#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "glamelab/kg.hpp"
#include "glamelab/num.hpp"

namespace glame::lm {

using num::Tape;
using num::Tensor;

struct ModelConfig {
    int vocab_size = 0;
    int d_model = 128;
    int n_layers = 8;
    int n_heads = 4;
    int ffn_inner_dim = 512;
    std::string activation = "gelu";  // or "relu"
    int max_seq_len = 48;
    uint64_t seed = 0;

    void validate() const;
    int head_dim() const { return d_model / n_heads; }
};

// Word-level tokenizer. Ids 0..2 are <pad>, <s>, </s>; the remaining vocab is
// the sorted set of words it was built from. Unknown words are an error, not
// an <unk> fallback.
class Tokenizer {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;

    Tokenizer() = default;
    static Tokenizer build(const std::vector<std::string>& texts);
    static Tokenizer from_vocab(std::vector<std::string> vocab);

    int vocab_size() const { return static_cast<int>(words_.size()); }
    std::vector<int> encode(const std::string& text) const;
    std::string decode(const std::vector<int>& ids) const;
    const std::vector<std::string>& vocab() const { return words_; }

private:
    std::vector<std::string> words_;
    std::map<std::string, int> index_;
};

// Vocabulary for a synthetic world: every surface form, every template word,
// and the essence-prompt words used by the editor's regularizer.
Tokenizer build_world_tokenizer(const kg::KnowledgeGraph& g);

// All projection matrices live in [in, out] layout in memory so the forward
// pass is a plain row-major matmul; checkpoints store the mathematical
// [out, in] orientation and transpose at the boundary.
struct BlockWeights {
    Tensor ln1_g, ln1_b;
    Tensor wq, wk, wv, wo;  // [d, d]
    Tensor ln2_g, ln2_b;
    Tensor w_in;            // [d, inner]
    Tensor w_out;           // [inner, d]
};

struct Weights {
    Tensor tok_emb;  // [vocab, d]
    Tensor pos_emb;  // [max_seq, d]
    std::vector<BlockWeights> blocks;
    Tensor lnf_g, lnf_b;
    Tensor lm_head;  // [d, vocab]
};

// Per layer, per token activations captured during a traced forward.
struct HiddenTrace {
    std::vector<Tensor> ffn_input;   // [T, d]      the vector multiplied by W_in
    std::vector<Tensor> keys;        // [T, inner]  f(W_in h)
    std::vector<Tensor> ffn_output;  // [T, d]      m = W k per row
    std::vector<Tensor> block_out;   // [T, d]      residual stream after the block
};

struct ForwardResult {
    Tensor logits;  // [T, vocab]
    HiddenTrace trace;
};

struct GenerateOptions {
    bool greedy = true;
    float temperature = 1.0f;
    uint64_t seed = 0;
    bool ban_special = true;   // never emit <pad>/<s>; </s> still allowed
    bool ban_eos = false;      // for plain-text prefixes
    bool stop_at_eos = true;
};

// Decoder-only pre-layer-norm transformer with learned positional embeddings.
// Instances are immutable; patching returns a new model.
class Model {
public:
    Model(ModelConfig config, Tokenizer tokenizer, Weights weights);
    static Model init(ModelConfig config, Tokenizer tokenizer);

    const ModelConfig& config() const { return config_; }
    const Tokenizer& tokenizer() const { return tokenizer_; }
    const Weights& weights() const { return weights_; }

    ForwardResult forward_with_trace(const std::vector<int>& tokens) const;
    Tensor forward_logits(const std::vector<int>& tokens) const;

    // Identical to forward except the FFN output at (layer, position) is
    // replaced before the residual add; differentiable w.r.t. replacement
    // when a tape is given (watch the replacement first).
    Tensor run_with_substitution(const std::vector<int>& tokens, int layer, int position,
                                 const Tensor& replacement, Tape* tape = nullptr) const;

    // Installs a new second FFN matrix, given in the canonical [d, inner]
    // orientation (m = W k).
    Model patch_ffn_weight(int layer, const Tensor& w_canonical) const;
    Tensor ffn_weight(int layer) const;  // canonical [d, inner]

    // Split forward: the residual stream entering a block, and the rest of the
    // model from that block on. Composing the two reproduces the full forward
    // bit-exactly; layers below the substitution site can be cached across an
    // optimization.
    Tensor residual_before_layer(const std::vector<int>& tokens, int layer) const;  // [T, d]
    Tensor forward_from(Tape* tape, const Tensor& x_entry, int from_layer, int sub_layer,
                        int sub_position, const Tensor* replacement) const;  // logits [T, vocab]

    // Precomputed constants for repeatedly re-running a forward whose only
    // change is the FFN-output substitution at (layer, position): everything
    // before `position` and below `layer` is frozen, so each re-run touches
    // only the suffix rows.
    struct SuffixCache {
        int layer = -1;
        int position = -1;
        int seq_len = 0;
        Tensor entry_base;                 // pre-substitution residual at `position`, without m
        Tensor entry_after;                // x entering layer+1, rows (position, T)
        std::vector<Tensor> k_prefix;      // per layer in (layer, L): keys of rows [0, position)
        std::vector<Tensor> v_prefix;
    };
    SuffixCache make_suffix_cache(const std::vector<int>& tokens, int layer, int position) const;
    // logits for rows [position, T); differentiable w.r.t. the replacement
    Tensor forward_suffix(Tape* tape, const SuffixCache& cache, const Tensor& replacement) const;
    // all suffixes at once, sharing one replacement vector; row_start gets the
    // packed row range of each cache's block
    Tensor forward_suffix_packed(Tape* tape, const std::vector<SuffixCache>& caches,
                                 const Tensor& replacement, std::vector<int>* row_start) const;

    std::vector<int> generate(const std::vector<int>& prompt, int max_new,
                              const GenerateOptions& opts) const;

    // Residual-stream output of block k at the last token. No implicit <s>.
    Tensor hidden_at_layer(const std::vector<int>& tokens, int k) const;

    // Packed training/eval forward over padded sequences; logits [B*Lmax, vocab].
    struct Packed {
        Tensor logits;
        int rows = 0;
        int max_len = 0;
        std::vector<int> lengths;
    };
    Packed packed_forward(Tape* tape, const std::vector<std::vector<int>>& seqs) const;

    std::vector<std::pair<std::string, Tensor>> named_weights() const;
    std::string weights_digest() const;

    void save(const std::string& dir) const;
    static Model load(const std::string& dir);

private:
    void check_tokens(const std::vector<int>& tokens) const;
    ModelConfig config_;
    Tokenizer tokenizer_;
    Weights weights_;
};

struct TrainSchedule {
    int max_steps = 3000;
    int batch_size = 16;
    float lr = 2.5e-3f;
    int warmup_steps = 100;
    float min_lr_frac = 0.1f;
    float weight_decay = 0.01f;
    float clip_norm = 1.0f;
    uint64_t seed = 0;
    int eval_every = 250;         // 0 disables in-training recall checks
    double target_recall = -1.0;  // early exit when reached; <0 disables
    bool verbose = false;
};

struct TrainReport {
    int steps_run = 0;
    float final_loss = 0.0f;
    double final_recall = -1.0;
    std::vector<std::pair<int, float>> loss_curve;
};

// Next-token training over tokenized sentences. Loss must decrease; NaN loss
// aborts with diagnostics. Deterministic under schedule.seed.
Model train(const ModelConfig& config, const Tokenizer& tokenizer,
            const std::vector<std::vector<int>>& corpus, const TrainSchedule& schedule,
            const kg::KnowledgeGraph* recall_world = nullptr, TrainReport* report = nullptr);

// Greedy fact recall over every triple's primary template.
double fact_recall(const Model& model, const kg::KnowledgeGraph& g);

// Greedy decode over many prompts at once (packed batches).
std::vector<std::vector<int>> batch_greedy_decode(const Model& model,
                                                  const std::vector<std::vector<int>>& prompts,
                                                  int max_new);

// Mean per-token log-probability of `continuation` after `prompt` (teacher
// forcing); the sequence-probability score used by editing and evaluation.
double sequence_log_prob(const Model& model, const std::vector<int>& prompt,
                         const std::vector<int>& continuation);

std::vector<std::vector<int>> tokenize_corpus(const Tokenizer& tok,
                                              const std::vector<std::string>& sentences);

}  // namespace glame::lm
