#include "glamelab/model.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <numeric>

#include <json.hpp>

namespace glame::lm {

using namespace glame::num;
using nlohmann::json;
namespace fs = std::filesystem;

void ModelConfig::validate() const {
    if (vocab_size < 4) throw ConfigError("vocab_size must cover the special tokens");
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || ffn_inner_dim <= 0 || max_seq_len <= 0)
        throw ConfigError("model dimensions must be positive");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if (ffn_inner_dim < d_model) throw ConfigError("ffn_inner_dim must be >= d_model");
    if (activation != "gelu" && activation != "relu")
        throw ConfigError("activation must be gelu or relu");
}

namespace {

Tensor activation_fn(const std::string& act, Tape* tape, const Tensor& x) {
    return act == "relu" ? relu(tape, x) : gelu(tape, x);
}

struct Substitution {
    int layer = -1;
    int position = -1;
    Tensor replacement;
};

}  // namespace

Model::Model(ModelConfig config, Tokenizer tokenizer, Weights weights)
    : config_(std::move(config)), tokenizer_(std::move(tokenizer)), weights_(std::move(weights)) {
    config_.validate();
    if (config_.vocab_size != tokenizer_.vocab_size())
        throw ConfigError("config vocab_size does not match tokenizer");
    if (static_cast<int>(weights_.blocks.size()) != config_.n_layers)
        throw ConfigError("weights do not match n_layers");
}

Model Model::init(ModelConfig config, Tokenizer tokenizer) {
    config.vocab_size = tokenizer.vocab_size();
    config.validate();
    Rng rng(config.seed);
    const int d = config.d_model;
    const int inner = config.ffn_inner_dim;
    const float std0 = 0.02f;
    const float std_res = 0.02f / std::sqrt(2.0f * static_cast<float>(config.n_layers));

    Weights w;
    w.tok_emb = Tensor::randn({config.vocab_size, d}, rng, std0);
    w.pos_emb = Tensor::randn({config.max_seq_len, d}, rng, std0);
    for (int l = 0; l < config.n_layers; ++l) {
        BlockWeights b;
        b.ln1_g = Tensor::ones({d});
        b.ln1_b = Tensor::zeros({d});
        b.wq = Tensor::randn({d, d}, rng, std0);
        b.wk = Tensor::randn({d, d}, rng, std0);
        b.wv = Tensor::randn({d, d}, rng, std0);
        b.wo = Tensor::randn({d, d}, rng, std_res);
        b.ln2_g = Tensor::ones({d});
        b.ln2_b = Tensor::zeros({d});
        b.w_in = Tensor::randn({d, inner}, rng, std0);
        b.w_out = Tensor::randn({inner, d}, rng, std_res);
        w.blocks.push_back(std::move(b));
    }
    w.lnf_g = Tensor::ones({d});
    w.lnf_b = Tensor::zeros({d});
    w.lm_head = Tensor::randn({d, config.vocab_size}, rng, std0);
    return Model(std::move(config), std::move(tokenizer), std::move(w));
}

void Model::check_tokens(const std::vector<int>& tokens) const {
    if (tokens.empty()) throw TokenError("empty token sequence");
    if (static_cast<int>(tokens.size()) > config_.max_seq_len)
        throw TokenError("sequence length " + std::to_string(tokens.size()) +
                         " exceeds max_seq_len " + std::to_string(config_.max_seq_len));
    for (int t : tokens)
        if (t < 0 || t >= config_.vocab_size)
            throw TokenError("token id out of vocabulary: " + std::to_string(t));
}

// Shared single-sequence forward pieces. run_blocks fills the trace when
// requested and applies at most one FFN-output substitution.
namespace {

Tensor embed_tokens(const Weights& w, Tape* tape, const std::vector<int>& tokens) {
    std::vector<int> pos(tokens.size());
    std::iota(pos.begin(), pos.end(), 0);
    return add(tape, gather_rows(tape, w.tok_emb, tokens), gather_rows(tape, w.pos_emb, pos));
}

Tensor run_blocks(const ModelConfig& cfg, const Weights& w, Tape* tape, Tensor x, int from_layer,
                  int to_layer, const Substitution* sub, HiddenTrace* trace) {
    const int t_len = x.dim(0);

    for (int l = from_layer; l < to_layer; ++l) {
        const BlockWeights& b = w.blocks[static_cast<size_t>(l)];
        Tensor a = layernorm_rows(tape, x, b.ln1_g, b.ln1_b);
        Tensor q = matmul(tape, a, b.wq);
        Tensor k = matmul(tape, a, b.wk);
        Tensor v = matmul(tape, a, b.wv);
        Tensor mixed = causal_attention(tape, q, k, v, cfg.n_heads, 1, t_len);
        Tensor attn = matmul(tape, mixed, b.wo);
        x = add(tape, x, attn);

        Tensor u = layernorm_rows(tape, x, b.ln2_g, b.ln2_b);
        Tensor keys = activation_fn(cfg.activation, tape, matmul(tape, u, b.w_in));
        Tensor m = matmul(tape, keys, b.w_out);
        if (trace) {
            trace->ffn_input.push_back(u);
            trace->keys.push_back(keys);
            trace->ffn_output.push_back(m);
        }
        if (sub && sub->layer == l) {
            Tensor rep = reshape(tape, sub->replacement, {1, cfg.d_model});
            std::vector<Tensor> parts;
            if (sub->position > 0) parts.push_back(slice_rows(tape, m, 0, sub->position));
            parts.push_back(rep);
            if (sub->position + 1 < t_len)
                parts.push_back(slice_rows(tape, m, sub->position + 1, t_len - sub->position - 1));
            m = concat_rows(tape, parts);
        }
        x = add(tape, x, m);
        if (trace) trace->block_out.push_back(x);
    }
    return x;
}

Tensor lm_head_logits(const Weights& w, Tape* tape, const Tensor& x) {
    Tensor xf = layernorm_rows(tape, x, w.lnf_g, w.lnf_b);
    return matmul(tape, xf, w.lm_head);
}

Tensor seq_forward(const Model& model, const Weights& w, const std::vector<int>& tokens,
                   Tape* tape, const Substitution* sub, HiddenTrace* trace) {
    Tensor x = embed_tokens(w, tape, tokens);
    x = run_blocks(model.config(), w, tape, x, 0, model.config().n_layers, sub, trace);
    return lm_head_logits(w, tape, x);
}

}  // namespace

ForwardResult Model::forward_with_trace(const std::vector<int>& tokens) const {
    check_tokens(tokens);
    ForwardResult res;
    res.logits = seq_forward(*this, weights_, tokens, nullptr, nullptr, &res.trace);
    return res;
}

Tensor Model::forward_logits(const std::vector<int>& tokens) const {
    check_tokens(tokens);
    return seq_forward(*this, weights_, tokens, nullptr, nullptr, nullptr);
}

Tensor Model::run_with_substitution(const std::vector<int>& tokens, int layer, int position,
                                    const Tensor& replacement, Tape* tape) const {
    check_tokens(tokens);
    if (layer < 0 || layer >= config_.n_layers)
        throw ConfigError("substitution layer out of range: " + std::to_string(layer));
    if (position < 0 || position >= static_cast<int>(tokens.size()))
        throw ConfigError("substitution position out of range: " + std::to_string(position));
    if (replacement.ndim() != 1 || replacement.dim(0) != config_.d_model)
        throw ShapeError("replacement must be a d_model vector");
    Substitution sub{layer, position, replacement};
    return seq_forward(*this, weights_, tokens, tape, &sub, nullptr);
}

Model Model::patch_ffn_weight(int layer, const Tensor& w_canonical) const {
    if (layer < 0 || layer >= config_.n_layers)
        throw ConfigError("patch layer out of range: " + std::to_string(layer));
    if (w_canonical.ndim() != 2 || w_canonical.dim(0) != config_.d_model ||
        w_canonical.dim(1) != config_.ffn_inner_dim)
        throw ShapeError("patch weight must be [d_model x ffn_inner]");
    Weights w = weights_;
    w.blocks[static_cast<size_t>(layer)].w_out = transpose(w_canonical);
    return Model(config_, tokenizer_, std::move(w));
}

Tensor Model::ffn_weight(int layer) const {
    if (layer < 0 || layer >= config_.n_layers)
        throw ConfigError("layer out of range: " + std::to_string(layer));
    return transpose(weights_.blocks[static_cast<size_t>(layer)].w_out);
}

std::vector<int> Model::generate(const std::vector<int>& prompt, int max_new,
                                 const GenerateOptions& opts) const {
    check_tokens(prompt);
    Rng rng(opts.seed);
    std::vector<int> seq = prompt;
    std::vector<int> out;
    for (int step = 0; step < max_new; ++step) {
        if (static_cast<int>(seq.size()) >= config_.max_seq_len) break;
        Tensor logits = forward_logits(seq);
        const int last = static_cast<int>(seq.size()) - 1;
        std::vector<float> row(static_cast<size_t>(config_.vocab_size));
        for (int j = 0; j < config_.vocab_size; ++j) row[static_cast<size_t>(j)] = logits.at(last, j);
        if (opts.ban_special) {
            row[Tokenizer::kPad] = -1e30f;
            row[Tokenizer::kBos] = -1e30f;
        }
        if (opts.ban_eos) row[Tokenizer::kEos] = -1e30f;
        int next;
        if (opts.greedy) {
            next = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        } else {
            const float tau = std::max(opts.temperature, 1e-4f);
            float mx = row[0];
            for (float f : row) mx = std::max(mx, f);
            double denom = 0.0;
            std::vector<double> p(row.size());
            for (size_t j = 0; j < row.size(); ++j) {
                p[j] = std::exp(static_cast<double>(row[j] - mx) / tau);
                denom += p[j];
            }
            double u = rng.uniform() * denom;
            next = static_cast<int>(row.size()) - 1;
            double acc = 0.0;
            for (size_t j = 0; j < p.size(); ++j) {
                acc += p[j];
                if (u < acc) {
                    next = static_cast<int>(j);
                    break;
                }
            }
        }
        if (opts.stop_at_eos && next == Tokenizer::kEos) break;
        out.push_back(next);
        seq.push_back(next);
    }
    return out;
}

Tensor Model::hidden_at_layer(const std::vector<int>& tokens, int k) const {
    check_tokens(tokens);
    if (k < 0 || k >= config_.n_layers)
        throw ConfigError("hidden_at_layer: layer out of range: " + std::to_string(k));
    Tensor x = embed_tokens(weights_, nullptr, tokens);
    x = run_blocks(config_, weights_, nullptr, x, 0, k + 1, nullptr, nullptr);
    return row(nullptr, x, static_cast<int>(tokens.size()) - 1);
}

Tensor Model::residual_before_layer(const std::vector<int>& tokens, int layer) const {
    check_tokens(tokens);
    if (layer < 0 || layer > config_.n_layers)
        throw ConfigError("residual_before_layer: layer out of range");
    Tensor x = embed_tokens(weights_, nullptr, tokens);
    return run_blocks(config_, weights_, nullptr, x, 0, layer, nullptr, nullptr);
}

Tensor Model::forward_from(Tape* tape, const Tensor& x_entry, int from_layer, int sub_layer,
                           int sub_position, const Tensor* replacement) const {
    if (x_entry.ndim() != 2 || x_entry.dim(1) != config_.d_model)
        throw ShapeError("forward_from: x_entry must be [T x d_model]");
    if (from_layer < 0 || from_layer > config_.n_layers)
        throw ConfigError("forward_from: layer out of range");
    Substitution sub;
    const Substitution* sub_ptr = nullptr;
    if (replacement) {
        if (sub_layer < from_layer || sub_layer >= config_.n_layers)
            throw ConfigError("forward_from: substitution layer out of range");
        if (sub_position < 0 || sub_position >= x_entry.dim(0))
            throw ConfigError("forward_from: substitution position out of range");
        sub = Substitution{sub_layer, sub_position, *replacement};
        sub_ptr = &sub;
    }
    Tensor x = run_blocks(config_, weights_, tape, x_entry, from_layer, config_.n_layers, sub_ptr,
                          nullptr);
    return lm_head_logits(weights_, tape, x);
}

Model::SuffixCache Model::make_suffix_cache(const std::vector<int>& tokens, int layer,
                                            int position) const {
    check_tokens(tokens);
    if (layer < 0 || layer >= config_.n_layers) throw ConfigError("suffix cache: layer out of range");
    const int t_len = static_cast<int>(tokens.size());
    if (position < 0 || position >= t_len) throw ConfigError("suffix cache: position out of range");

    ForwardResult res = forward_with_trace(tokens);
    SuffixCache cache;
    cache.layer = layer;
    cache.position = position;
    cache.seq_len = t_len;
    // x entering layer+1 at `position` minus the FFN output being replaced
    Tensor x_next = res.trace.block_out[static_cast<size_t>(layer)];
    cache.entry_base = num::sub(nullptr, row(nullptr, x_next, position),
                                row(nullptr, res.trace.ffn_output[static_cast<size_t>(layer)],
                                    position));
    cache.entry_after = slice_rows(nullptr, x_next, position + 1, t_len - position - 1);
    for (int l = layer + 1; l < config_.n_layers; ++l) {
        const BlockWeights& b = weights_.blocks[static_cast<size_t>(l)];
        // x entering layer l is the previous block's output
        Tensor x_in = res.trace.block_out[static_cast<size_t>(l - 1)];
        Tensor prefix = slice_rows(nullptr, x_in, 0, position);
        Tensor a = layernorm_rows(nullptr, prefix, b.ln1_g, b.ln1_b);
        cache.k_prefix.push_back(matmul(nullptr, a, b.wk));
        cache.v_prefix.push_back(matmul(nullptr, a, b.wv));
    }
    return cache;
}

Tensor Model::forward_suffix(Tape* tape, const SuffixCache& cache, const Tensor& replacement) const {
    return forward_suffix_packed(tape, {cache}, replacement, nullptr);
}

Tensor Model::forward_suffix_packed(Tape* tape, const std::vector<SuffixCache>& caches,
                                    const Tensor& replacement, std::vector<int>* row_start) const {
    if (caches.empty()) throw ConfigError("forward_suffix: no caches");
    if (replacement.ndim() != 1 || replacement.dim(0) != config_.d_model)
        throw ShapeError("forward_suffix: replacement must be a d_model vector");
    const int layer = caches[0].layer;
    std::vector<int> starts{0};
    std::vector<int> offsets;
    std::vector<Tensor> parts;
    for (const SuffixCache& c : caches) {
        if (c.layer != layer) throw ConfigError("forward_suffix: mixed substitution layers");
        parts.push_back(reshape(tape, add(tape, c.entry_base, replacement), {1, config_.d_model}));
        if (c.entry_after.dim(0) > 0) parts.push_back(c.entry_after);
        starts.push_back(starts.back() + 1 + c.entry_after.dim(0));
        offsets.push_back(c.position);
    }
    Tensor x = parts.size() > 1 ? concat_rows(tape, parts) : parts[0];
    for (int l = layer + 1; l < config_.n_layers; ++l) {
        const BlockWeights& b = weights_.blocks[static_cast<size_t>(l)];
        const size_t ci = static_cast<size_t>(l - layer - 1);
        std::vector<Tensor> kp, vp;
        for (const SuffixCache& c : caches) {
            kp.push_back(c.k_prefix[ci]);
            vp.push_back(c.v_prefix[ci]);
        }
        Tensor a = layernorm_rows(tape, x, b.ln1_g, b.ln1_b);
        Tensor q = matmul(tape, a, b.wq);
        Tensor k = matmul(tape, a, b.wk);
        Tensor v = matmul(tape, a, b.wv);
        Tensor mixed =
            causal_attention_suffix_packed(tape, q, k, v, kp, vp, offsets, starts, config_.n_heads);
        x = add(tape, x, matmul(tape, mixed, b.wo));
        Tensor u = layernorm_rows(tape, x, b.ln2_g, b.ln2_b);
        Tensor keys = activation_fn(config_.activation, tape, matmul(tape, u, b.w_in));
        x = add(tape, x, matmul(tape, keys, b.w_out));
    }
    if (row_start) *row_start = starts;
    return lm_head_logits(weights_, tape, x);
}

Model::Packed Model::packed_forward(Tape* tape, const std::vector<std::vector<int>>& seqs) const {
    if (seqs.empty()) throw TokenError("packed_forward: no sequences");
    Packed packed;
    packed.max_len = 0;
    for (const auto& s : seqs) {
        check_tokens(s);
        packed.lengths.push_back(static_cast<int>(s.size()));
        packed.max_len = std::max(packed.max_len, static_cast<int>(s.size()));
    }
    const int b_count = static_cast<int>(seqs.size());
    const int l_max = packed.max_len;
    packed.rows = b_count * l_max;

    std::vector<int> flat(static_cast<size_t>(packed.rows), Tokenizer::kPad);
    std::vector<int> pos(static_cast<size_t>(packed.rows), 0);
    for (int b = 0; b < b_count; ++b) {
        for (int t = 0; t < static_cast<int>(seqs[static_cast<size_t>(b)].size()); ++t) {
            flat[static_cast<size_t>(b) * l_max + t] = seqs[static_cast<size_t>(b)][static_cast<size_t>(t)];
            pos[static_cast<size_t>(b) * l_max + t] = t;
        }
    }

    Tensor x = add(tape, gather_rows(tape, weights_.tok_emb, flat),
                   gather_rows(tape, weights_.pos_emb, pos));
    for (int l = 0; l < config_.n_layers; ++l) {
        const BlockWeights& blk = weights_.blocks[static_cast<size_t>(l)];
        Tensor a = layernorm_rows(tape, x, blk.ln1_g, blk.ln1_b);
        Tensor q = matmul(tape, a, blk.wq);
        Tensor k = matmul(tape, a, blk.wk);
        Tensor v = matmul(tape, a, blk.wv);
        Tensor mixed = causal_attention(tape, q, k, v, config_.n_heads, b_count, l_max);
        Tensor attn = matmul(tape, mixed, blk.wo);
        x = add(tape, x, attn);
        Tensor u = layernorm_rows(tape, x, blk.ln2_g, blk.ln2_b);
        Tensor keys = activation_fn(config_.activation, tape, matmul(tape, u, blk.w_in));
        x = add(tape, x, matmul(tape, keys, blk.w_out));
    }
    Tensor xf = layernorm_rows(tape, x, weights_.lnf_g, weights_.lnf_b);
    packed.logits = matmul(tape, xf, weights_.lm_head);
    return packed;
}

std::vector<std::pair<std::string, Tensor>> Model::named_weights() const {
    std::vector<std::pair<std::string, Tensor>> named;
    named.emplace_back("tok_emb", weights_.tok_emb);
    named.emplace_back("pos_emb", weights_.pos_emb);
    for (int l = 0; l < config_.n_layers; ++l) {
        const BlockWeights& b = weights_.blocks[static_cast<size_t>(l)];
        const std::string p = "blocks." + std::to_string(l) + ".";
        named.emplace_back(p + "ln1.g", b.ln1_g);
        named.emplace_back(p + "ln1.b", b.ln1_b);
        named.emplace_back(p + "attn.wq", transpose(b.wq));
        named.emplace_back(p + "attn.wk", transpose(b.wk));
        named.emplace_back(p + "attn.wv", transpose(b.wv));
        named.emplace_back(p + "attn.wo", transpose(b.wo));
        named.emplace_back(p + "ln2.g", b.ln2_g);
        named.emplace_back(p + "ln2.b", b.ln2_b);
        named.emplace_back(p + "ffn.w_in", transpose(b.w_in));
        named.emplace_back(p + "ffn.w_out", transpose(b.w_out));
    }
    named.emplace_back("lnf.g", weights_.lnf_g);
    named.emplace_back("lnf.b", weights_.lnf_b);
    named.emplace_back("lm_head", transpose(weights_.lm_head));
    return named;
}

std::string Model::weights_digest() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, t] : named_weights()) {
        h = fnv1a64(name.data(), name.size(), h);
        h = fnv1a64(t.data(), static_cast<size_t>(t.numel()) * sizeof(float), h);
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void Model::save(const std::string& dir) const {
    fs::create_directories(dir);
    auto named = named_weights();
    json manifest;
    manifest["format"] = "checkpoint/1";
    manifest["version"] = "1";
    manifest["config"] = {{"vocab_size", config_.vocab_size}, {"d_model", config_.d_model},
                          {"n_layers", config_.n_layers},     {"n_heads", config_.n_heads},
                          {"ffn_inner_dim", config_.ffn_inner_dim}, {"activation", config_.activation},
                          {"max_seq_len", config_.max_seq_len},     {"seed", config_.seed}};
    manifest["vocab"] = tokenizer_.vocab();
    json tensors = json::array();
    int64_t offset = 0;
    std::vector<float> blob;
    for (const auto& [name, t] : named) {
        tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
        blob.insert(blob.end(), t.values().begin(), t.values().end());
        offset += t.numel();
    }
    manifest["tensors"] = std::move(tensors);
    write_text_file(dir + "/manifest.json", manifest.dump(2));
    write_binary_file(dir + "/weights.bin", blob.data(), blob.size() * sizeof(float));
}

Model Model::load(const std::string& dir) {
    json manifest = json::parse(read_text_file(dir + "/manifest.json"));
    if (manifest.value("format", "") != "checkpoint/1" || manifest.value("version", "") != "1")
        throw IoError("unsupported checkpoint format in " + dir);
    ModelConfig cfg;
    const json& jc = manifest.at("config");
    cfg.vocab_size = jc.at("vocab_size").get<int>();
    cfg.d_model = jc.at("d_model").get<int>();
    cfg.n_layers = jc.at("n_layers").get<int>();
    cfg.n_heads = jc.at("n_heads").get<int>();
    cfg.ffn_inner_dim = jc.at("ffn_inner_dim").get<int>();
    cfg.activation = jc.at("activation").get<std::string>();
    cfg.max_seq_len = jc.at("max_seq_len").get<int>();
    cfg.seed = jc.at("seed").get<uint64_t>();
    Tokenizer tok = Tokenizer::from_vocab(manifest.at("vocab").get<std::vector<std::string>>());

    std::vector<uint8_t> blob = read_binary_file(dir + "/weights.bin");
    const float* fp = reinterpret_cast<const float*>(blob.data());
    const int64_t f_count = static_cast<int64_t>(blob.size() / sizeof(float));

    std::map<std::string, Tensor> by_name;
    for (const json& jt : manifest.at("tensors")) {
        const std::string name = jt.at("name").get<std::string>();
        const std::vector<int> shape = jt.at("shape").get<std::vector<int>>();
        const int64_t offset = jt.at("offset").get<int64_t>();
        int64_t n = 1;
        for (int d : shape) n *= d;
        if (offset < 0 || offset + n > f_count) throw IoError("tensor '" + name + "' out of blob range");
        by_name.emplace(name, Tensor(shape, std::vector<float>(fp + offset, fp + offset + n)));
    }
    auto take = [&](const std::string& name, std::vector<int> want_shape) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw IoError("checkpoint missing tensor '" + name + "'");
        if (it->second.shape() != want_shape)
            throw IoError("tensor '" + name + "' has shape " + num::shape_str(it->second.shape()) +
                          ", expected " + num::shape_str(want_shape));
        return it->second;
    };

    const int d = cfg.d_model, inner = cfg.ffn_inner_dim, v = cfg.vocab_size;
    Weights w;
    w.tok_emb = take("tok_emb", {v, d});
    w.pos_emb = take("pos_emb", {cfg.max_seq_len, d});
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "blocks." + std::to_string(l) + ".";
        BlockWeights b;
        b.ln1_g = take(p + "ln1.g", {d});
        b.ln1_b = take(p + "ln1.b", {d});
        b.wq = transpose(take(p + "attn.wq", {d, d}));
        b.wk = transpose(take(p + "attn.wk", {d, d}));
        b.wv = transpose(take(p + "attn.wv", {d, d}));
        b.wo = transpose(take(p + "attn.wo", {d, d}));
        b.ln2_g = take(p + "ln2.g", {d});
        b.ln2_b = take(p + "ln2.b", {d});
        b.w_in = transpose(take(p + "ffn.w_in", {inner, d}));
        b.w_out = transpose(take(p + "ffn.w_out", {d, inner}));
        w.blocks.push_back(std::move(b));
    }
    w.lnf_g = take("lnf.g", {d});
    w.lnf_b = take("lnf.b", {d});
    w.lm_head = transpose(take("lm_head", {v, d}));
    return Model(std::move(cfg), std::move(tok), std::move(w));
}

// ---- training ---------------------------------------------------------------

namespace {

struct ParamSet {
    std::vector<Tensor*> params;
    std::vector<bool> decay;
};

ParamSet collect_params(Weights& w) {
    ParamSet ps;
    auto push = [&](Tensor& t) {
        ps.params.push_back(&t);
        ps.decay.push_back(t.ndim() == 2);
    };
    push(w.tok_emb);
    push(w.pos_emb);
    for (BlockWeights& b : w.blocks) {
        push(b.ln1_g);
        push(b.ln1_b);
        push(b.wq);
        push(b.wk);
        push(b.wv);
        push(b.wo);
        push(b.ln2_g);
        push(b.ln2_b);
        push(b.w_in);
        push(b.w_out);
    }
    push(w.lnf_g);
    push(w.lnf_b);
    push(w.lm_head);
    return ps;
}

float lr_at(const TrainSchedule& s, int step) {
    if (step < s.warmup_steps) return s.lr * static_cast<float>(step + 1) / s.warmup_steps;
    const float prog = static_cast<float>(step - s.warmup_steps) /
                       std::max(1, s.max_steps - s.warmup_steps);
    const float cosine = 0.5f * (1.0f + std::cos(3.14159265358979f * prog));
    return s.lr * (s.min_lr_frac + (1.0f - s.min_lr_frac) * cosine);
}

}  // namespace

Model train(const ModelConfig& config, const Tokenizer& tokenizer,
            const std::vector<std::vector<int>>& corpus, const TrainSchedule& schedule,
            const kg::KnowledgeGraph* recall_world, TrainReport* report) {
    if (corpus.empty()) throw ConfigError("training corpus is empty");
    Model model = Model::init(config, tokenizer);
    Weights w = model.weights();
    ParamSet ps = collect_params(w);

    std::vector<Tensor> opt_m(ps.params.size()), opt_v(ps.params.size());
    Rng rng(schedule.seed ^ 0x7261696eULL);

    // epoch batches are length-bucketed to keep padding low: shuffle, stable
    // sort by length, chop, shuffle the batch order
    std::vector<std::vector<size_t>> batches;
    size_t batch_cursor = 0;
    auto refill = [&] {
        std::vector<size_t> order(corpus.size());
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
            return corpus[a].size() < corpus[b].size();
        });
        batches.clear();
        for (size_t at = 0; at < order.size(); at += static_cast<size_t>(schedule.batch_size)) {
            const size_t end = std::min(order.size(), at + static_cast<size_t>(schedule.batch_size));
            batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at),
                                 order.begin() + static_cast<std::ptrdiff_t>(end));
        }
        rng.shuffle(batches);
        batch_cursor = 0;
    };
    refill();

    TrainReport local_report;
    TrainReport& rep = report ? *report : local_report;
    float last_loss = 0.0f;

    for (int step = 0; step < schedule.max_steps; ++step) {
        if (batch_cursor >= batches.size()) refill();
        std::vector<std::vector<int>> batch;
        batch.reserve(static_cast<size_t>(schedule.batch_size));
        for (size_t idx : batches[batch_cursor++]) batch.push_back(corpus[idx]);

        Tape tape;
        for (Tensor* p : ps.params) tape.watch(*p);
        Model step_model(model.config(), model.tokenizer(), w);
        Model::Packed packed = step_model.packed_forward(&tape, batch);

        std::vector<int> targets(static_cast<size_t>(packed.rows), 0);
        std::vector<float> weights(static_cast<size_t>(packed.rows), 0.0f);
        for (size_t b = 0; b < batch.size(); ++b) {
            const auto& seq = batch[b];
            for (size_t t = 0; t + 1 < seq.size(); ++t) {
                const size_t flat = b * static_cast<size_t>(packed.max_len) + t;
                targets[flat] = seq[t + 1];
                weights[flat] = 1.0f;
            }
        }
        Tensor loss = cross_entropy_masked(&tape, packed.logits, targets, weights);
        last_loss = loss.item();
        if (!std::isfinite(last_loss))
            throw NumericError("training diverged: loss " + std::to_string(last_loss) + " at step " +
                               std::to_string(step) + " (lr " + std::to_string(lr_at(schedule, step)) +
                               ")");
        GradMap grads = tape.backward(loss);

        std::vector<Tensor> grad_list;
        grad_list.reserve(ps.params.size());
        for (Tensor* p : ps.params) {
            auto g = grads.grad(*p);
            grad_list.push_back(g ? *g : Tensor::zeros(p->shape()));
        }
        std::vector<const Tensor*> grad_ptrs;
        for (const Tensor& g : grad_list) grad_ptrs.push_back(&g);
        const double norm = global_norm(grad_ptrs);
        if (schedule.clip_norm > 0 && norm > schedule.clip_norm) {
            const float scale_f = static_cast<float>(schedule.clip_norm / norm);
            for (Tensor& g : grad_list) g = scale(nullptr, g, scale_f);
        }

        const float lr = lr_at(schedule, step);
        for (size_t i = 0; i < ps.params.size(); ++i) {
            AdamWConfig cfg;
            cfg.lr = lr;
            cfg.weight_decay = ps.decay[i] ? schedule.weight_decay : 0.0f;
            adamw_step(*ps.params[i], grad_list[i], opt_m[i], opt_v[i], step + 1, cfg);
        }

        if (step % 50 == 0 || step + 1 == schedule.max_steps)
            rep.loss_curve.emplace_back(step, last_loss);
        rep.steps_run = step + 1;

        const bool eval_now = schedule.eval_every > 0 && recall_world &&
                              ((step + 1) % schedule.eval_every == 0 || step + 1 == schedule.max_steps);
        if (eval_now) {
            Model probe(model.config(), model.tokenizer(), w);
            rep.final_recall = fact_recall(probe, *recall_world);
            if (schedule.verbose)
                std::cerr << "step " << step + 1 << "  loss " << last_loss << "  recall "
                          << rep.final_recall << "\n";
            if (schedule.target_recall >= 0.0 && rep.final_recall >= schedule.target_recall) break;
        } else if (schedule.verbose && step % 100 == 0) {
            std::cerr << "step " << step << "  loss " << last_loss << "\n";
        }
    }

    rep.final_loss = last_loss;
    Model trained(model.config(), model.tokenizer(), w);
    if (recall_world && rep.final_recall < 0.0) rep.final_recall = fact_recall(trained, *recall_world);
    return trained;
}

double fact_recall(const Model& model, const kg::KnowledgeGraph& g) {
    const Tokenizer& tok = model.tokenizer();
    std::vector<std::vector<int>> prompts;
    std::vector<std::vector<int>> expected;
    int max_new = 1;
    for (const kg::Triple& t : g.triples()) {
        std::vector<int> ids{Tokenizer::kBos};
        for (int id : tok.encode(kg::render_prompt(g, t.s, t.r, 0))) ids.push_back(id);
        prompts.push_back(std::move(ids));
        expected.push_back(tok.encode(g.entity(t.o).surface));
        max_new = std::max(max_new, static_cast<int>(expected.back().size()));
    }
    auto decoded = batch_greedy_decode(model, prompts, max_new);
    int hits = 0;
    for (size_t i = 0; i < prompts.size(); ++i) {
        bool ok = decoded[i].size() >= expected[i].size();
        for (size_t j = 0; ok && j < expected[i].size(); ++j) ok = decoded[i][j] == expected[i][j];
        if (ok) ++hits;
    }
    return prompts.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(prompts.size());
}

std::vector<std::vector<int>> batch_greedy_decode(const Model& model,
                                                  const std::vector<std::vector<int>>& prompts,
                                                  int max_new) {
    constexpr size_t kChunk = 64;
    std::vector<std::vector<int>> out(prompts.size());
    for (size_t start = 0; start < prompts.size(); start += kChunk) {
        const size_t end = std::min(prompts.size(), start + kChunk);
        std::vector<std::vector<int>> seqs(prompts.begin() + static_cast<std::ptrdiff_t>(start),
                                           prompts.begin() + static_cast<std::ptrdiff_t>(end));
        for (int step = 0; step < max_new; ++step) {
            Model::Packed packed = model.packed_forward(nullptr, seqs);
            for (size_t b = 0; b < seqs.size(); ++b) {
                const int last_row = static_cast<int>(b) * packed.max_len +
                                     static_cast<int>(seqs[b].size()) - 1;
                int best = Tokenizer::kEos;
                float best_v = -1e30f;
                for (int j = 0; j < model.config().vocab_size; ++j) {
                    if (j == Tokenizer::kPad || j == Tokenizer::kBos) continue;
                    const float val = packed.logits.at(last_row, j);
                    if (val > best_v) {
                        best_v = val;
                        best = j;
                    }
                }
                seqs[b].push_back(best);
                out[start + b].push_back(best);
            }
        }
    }
    return out;
}

double sequence_log_prob(const Model& model, const std::vector<int>& prompt,
                         const std::vector<int>& continuation) {
    if (continuation.empty()) throw TokenError("empty continuation");
    std::vector<int> seq = prompt;
    seq.insert(seq.end(), continuation.begin(), continuation.end());
    Tensor logits = model.forward_logits(seq);
    Tensor ls = log_softmax_rows(nullptr, logits);
    double acc = 0.0;
    const int p_len = static_cast<int>(prompt.size());
    for (size_t j = 0; j < continuation.size(); ++j) {
        acc += ls.at(p_len - 1 + static_cast<int>(j), continuation[j]);
    }
    return acc / static_cast<double>(continuation.size());
}

}  // namespace glame::lm
