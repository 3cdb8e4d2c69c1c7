#include "glamelab/editor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

namespace glame::editor {

using namespace glame::num;
using nlohmann::json;

Method method_from_string(const std::string& s) {
    if (s == "glame") return Method::glame;
    if (s == "rome") return Method::rome;
    if (s == "glame-gnn" || s == "glame_gnn") return Method::glame_gnn;
    if (s == "glame-mlp" || s == "glame_mlp") return Method::glame_mlp;
    throw ConfigError("unknown method '" + s + "'");
}

std::string method_to_string(Method m) {
    switch (m) {
        case Method::glame: return "glame";
        case Method::rome: return "rome";
        case Method::glame_gnn: return "glame-gnn";
        case Method::glame_mlp: return "glame-mlp";
    }
    return "?";
}

void EditConfig::validate() const {
    if (lambda < 0.0f) throw ConfigError("lambda must be >= 0");
    if (prefix_count < 1) throw ConfigError("prefix count N must be >= 1");
    if (max_steps < 1 || early_stop_loss <= 0.0f || lr <= 0.0f)
        throw ConfigError("optimizer thresholds must be positive");
    if (subgraph_n < 0 || subgraph_m < 1) throw ConfigError("subgraph (n, m) out of range");
    if (prefix_min_len < 1 || prefix_max_len < prefix_min_len)
        throw ConfigError("prefix length range invalid");
}

// ---- covariance ---------------------------------------------------------------

CovarianceCache estimate_covariance(const lm::Model& model,
                                    const std::vector<std::vector<int>>& sample_seqs, int layer,
                                    float ridge_eps, const std::string& source) {
    if (sample_seqs.empty()) throw ConfigError("covariance sample is empty");
    if (layer < 0 || layer >= model.config().n_layers)
        throw ConfigError("covariance layer out of range");
    const int inner = model.config().ffn_inner_dim;
    std::vector<double> acc(static_cast<size_t>(inner) * inner, 0.0);
    int64_t count = 0;
    for (const auto& seq : sample_seqs) {
        lm::ForwardResult res = model.forward_with_trace(seq);
        const Tensor& keys = res.trace.keys[static_cast<size_t>(layer)];
        const int t_len = keys.dim(0);
        for (int t = 0; t < t_len; ++t) {
            const float* k = keys.data() + static_cast<int64_t>(t) * inner;
            for (int i = 0; i < inner; ++i) {
                const double ki = k[i];
                if (ki == 0.0) continue;
                double* row_ptr = acc.data() + static_cast<int64_t>(i) * inner;
                for (int j = 0; j < inner; ++j) row_ptr[j] += ki * k[j];
            }
            ++count;
        }
    }
    double diag_mean = 0.0;
    for (int i = 0; i < inner; ++i) diag_mean += acc[static_cast<size_t>(i) * inner + i];
    diag_mean /= inner;
    if (diag_mean <= 0.0) throw NumericError("covariance sample produced all-zero keys");

    float eps = ridge_eps;
    for (int attempt = 0; attempt < 8; ++attempt) {
        const double ridge = eps * diag_mean;
        std::vector<float> cf(acc.size());
        for (size_t i = 0; i < acc.size(); ++i) cf[i] = static_cast<float>(acc[i]);
        for (int i = 0; i < inner; ++i)
            cf[static_cast<size_t>(i) * inner + i] =
                static_cast<float>(acc[static_cast<size_t>(i) * inner + i] + ridge);
        Tensor c({inner, inner}, std::move(cf));
        try {
            solve_spd(c, Tensor::ones({inner}));  // factorization probe
            CovarianceCache cache;
            cache.layer = layer;
            cache.c = c;
            cache.sample_count = count;
            cache.ridge_applied = static_cast<float>(ridge);
            cache.source = source;
            return cache;
        } catch (const NumericError&) {
            eps *= 10.0f;
        }
    }
    throw NumericError("covariance not positive definite even after ridge escalation");
}

void CovarianceCache::save(const std::string& path_prefix) const {
    json j;
    j["format"] = "covcache/1";
    j["layer"] = layer;
    j["inner"] = c.dim(0);
    j["sample_count"] = sample_count;
    j["ridge_applied"] = ridge_applied;
    j["source"] = source;
    write_text_file(path_prefix + ".json", j.dump(2));
    write_binary_file(path_prefix + ".bin", c.data(), static_cast<size_t>(c.numel()) * sizeof(float));
}

CovarianceCache CovarianceCache::load(const std::string& path_prefix) {
    json j = json::parse(read_text_file(path_prefix + ".json"));
    if (j.value("format", "") != "covcache/1") throw IoError("unsupported covariance cache format");
    CovarianceCache cache;
    cache.layer = j.at("layer").get<int>();
    cache.sample_count = j.at("sample_count").get<int64_t>();
    cache.ridge_applied = j.at("ridge_applied").get<float>();
    cache.source = j.value("source", "");
    const int inner = j.at("inner").get<int>();
    std::vector<uint8_t> blob = read_binary_file(path_prefix + ".bin");
    if (blob.size() != static_cast<size_t>(inner) * inner * sizeof(float))
        throw IoError("covariance blob size mismatch");
    const float* fp = reinterpret_cast<const float*>(blob.data());
    cache.c = Tensor({inner, inner}, std::vector<float>(fp, fp + static_cast<size_t>(inner) * inner));
    return cache;
}

// ---- prefixes and subject localization ------------------------------------------

std::vector<std::string> generate_prefixes(const lm::Model& model, int count, float temperature,
                                           int min_len, int max_len, uint64_t seed) {
    std::vector<std::string> prefixes{""};
    Rng rng(seed ^ 0x70726566ULL);
    for (int j = 1; j < count; ++j) {
        const int len = rng.range(min_len, max_len);
        lm::GenerateOptions opts;
        opts.greedy = false;
        opts.temperature = temperature;
        opts.seed = rng.next_u64();
        opts.ban_special = true;
        opts.ban_eos = true;
        opts.stop_at_eos = false;
        std::vector<int> sampled = model.generate({lm::Tokenizer::kBos}, len, opts);
        prefixes.push_back(model.tokenizer().decode(sampled));
    }
    return prefixes;
}

int subject_last_token(const std::vector<int>& tokens, const std::vector<int>& subject_tokens,
                       int from) {
    if (subject_tokens.empty()) throw ConfigError("empty subject token span");
    int found = -1;
    if (tokens.size() >= subject_tokens.size()) {
        for (size_t start = static_cast<size_t>(from);
             start + subject_tokens.size() <= tokens.size(); ++start) {
            bool match = true;
            for (size_t j = 0; j < subject_tokens.size(); ++j)
                if (tokens[start + j] != subject_tokens[j]) {
                    match = false;
                    break;
                }
            if (match) found = static_cast<int>(start + subject_tokens.size()) - 1;
        }
    }
    if (found < 0) throw ConfigError("subject tokens not found in rendered prompt");
    return found;
}

namespace {

// Token layout of one prefixed prompt: <s> + prefix + prompt.
struct PromptTokens {
    std::vector<int> tokens;
    int subject_last = -1;
    int prompt_start = -1;
};

PromptTokens assemble_prompt(const lm::Tokenizer& tok, const std::string& prefix,
                             const std::string& prompt, const std::vector<int>& subject_tokens) {
    PromptTokens out;
    out.tokens.push_back(lm::Tokenizer::kBos);
    if (!prefix.empty())
        for (int id : tok.encode(prefix)) out.tokens.push_back(id);
    out.prompt_start = static_cast<int>(out.tokens.size());
    for (int id : tok.encode(prompt)) out.tokens.push_back(id);
    out.subject_last = subject_last_token(out.tokens, subject_tokens, out.prompt_start);
    return out;
}

bool contains_span(const std::vector<int>& tokens, const std::vector<int>& span) {
    if (span.empty() || tokens.size() < span.size()) return false;
    for (size_t start = 0; start + span.size() <= tokens.size(); ++start) {
        bool match = true;
        for (size_t j = 0; j < span.size(); ++j)
            if (tokens[start + j] != span[j]) {
                match = false;
                break;
            }
        if (match) return true;
    }
    return false;
}

}  // namespace

Tensor compute_kstar(const lm::Model& model, const kg::KnowledgeGraph& g,
                     const kg::EditRequest& edit, const std::vector<std::string>& prefixes,
                     int layer) {
    if (prefixes.empty()) throw ConfigError("compute_kstar: no prefixes");
    const lm::Tokenizer& tok = model.tokenizer();
    const std::vector<int> subject_tokens = tok.encode(g.entity(edit.s).surface);
    const int inner = model.config().ffn_inner_dim;
    std::vector<double> acc(static_cast<size_t>(inner), 0.0);
    for (const std::string& prefix : prefixes) {
        PromptTokens pt = assemble_prompt(tok, prefix, edit.prompt, subject_tokens);
        lm::ForwardResult res = model.forward_with_trace(pt.tokens);
        const Tensor& keys = res.trace.keys[static_cast<size_t>(layer)];
        const float* k = keys.data() + static_cast<int64_t>(pt.subject_last) * inner;
        for (int i = 0; i < inner; ++i) acc[static_cast<size_t>(i)] += k[i];
    }
    std::vector<float> out(static_cast<size_t>(inner));
    for (int i = 0; i < inner; ++i)
        out[static_cast<size_t>(i)] =
            static_cast<float>(acc[static_cast<size_t>(i)] / static_cast<double>(prefixes.size()));
    return Tensor({inner}, std::move(out));
}

// ---- m* optimization --------------------------------------------------------------

MstarResult optimize_mstar(const lm::Model& model, const kg::KnowledgeGraph& g,
                           const kg::EditRequest& edit, const kg::Subgraph& sub,
                           const rgnn::NodeInitTable& init,
                           const std::vector<std::string>& prefixes, const EditConfig& config) {
    const lm::Tokenizer& tok = model.tokenizer();
    const int d = model.config().d_model;
    const int layer = config.layer;
    const std::vector<int> subject_tokens = tok.encode(g.entity(edit.s).surface);
    const std::vector<int> ostar_tokens = tok.encode(g.entity(edit.o_star).surface);

    // m_s^l from the bare prompt of the pre-edit model; one vector reused
    // across every prefixed run.
    PromptTokens bare = assemble_prompt(tok, "", edit.prompt, subject_tokens);
    lm::ForwardResult bare_res = model.forward_with_trace(bare.tokens);
    const Tensor m_s_l = row(nullptr, bare_res.trace.ffn_output[static_cast<size_t>(layer)],
                             bare.subject_last);

    // prefixed prompts with the target appended; everything below the edit
    // layer and before the subject token is constant across the optimization,
    // so each step re-runs only the suffix rows
    // prefixed prompts (plus the essence prompt for L_a) packed into one
    // suffix block set; per-block score coordinates are local until the packed
    // row offsets are known
    std::vector<lm::Model::SuffixCache> caches;
    std::vector<std::vector<int>> local_rows;
    std::vector<std::vector<int>> local_cols;
    for (const std::string& prefix : prefixes) {
        PromptTokens pt = assemble_prompt(tok, prefix, edit.prompt, subject_tokens);
        std::vector<int> full = pt.tokens;
        for (int id : ostar_tokens) full.push_back(id);
        caches.push_back(model.make_suffix_cache(full, layer, pt.subject_last));
        const int prompt_len = static_cast<int>(pt.tokens.size());
        std::vector<int> rows_j, cols_j;
        for (size_t j = 0; j < ostar_tokens.size(); ++j) {
            rows_j.push_back(prompt_len - 1 + static_cast<int>(j) - pt.subject_last);
            cols_j.push_back(ostar_tokens[j]);
        }
        local_rows.push_back(std::move(rows_j));
        local_cols.push_back(std::move(cols_j));
    }
    const size_t n_prompts = caches.size();
    const float inv_n = 1.0f / static_cast<float>(n_prompts);

    // the essence prompt "{subject} is a" anchors the regularizer
    PromptTokens essence = assemble_prompt(tok, "", g.entity(edit.s).surface + " is a",
                                           subject_tokens);
    const int essence_last_local = static_cast<int>(essence.tokens.size()) - 1 - essence.subject_last;
    const bool use_essence = config.lambda > 0.0f;
    if (use_essence)
        caches.push_back(model.make_suffix_cache(essence.tokens, layer, essence.subject_last));
    Tensor base_dist = softmax_rows(
        nullptr, row(nullptr, model.forward_logits(essence.tokens),
                     static_cast<int>(essence.tokens.size()) - 1));

    // trainable parameters per method
    const bool use_rgnn = config.method != Method::rome && sub.order_n >= 1;
    rgnn::RgnnParams params;
    Tensor mstar_free = m_s_l;  // direct optimization object for the rome path
    if (use_rgnn) params = rgnn::RgnnParams::init(sub.order_n, d);

    AdamWConfig opt_cfg;
    opt_cfg.lr = config.lr;
    AdamW opt(opt_cfg);

    MstarResult result;
    Tensor final_mstar;
    for (int step = 0;; ++step) {
        Tape tape;
        std::vector<Tensor*> trainable;
        if (use_rgnn) {
            trainable = params.trainable(config.method != Method::glame_mlp);
        } else {
            trainable = {&mstar_free};
        }
        for (Tensor* p : trainable) tape.watch(*p);

        const float m_s_norm = frobenius_norm(m_s_l);
        const float cap = config.clamp_factor > 0.0f ? config.clamp_factor * m_s_norm : -1.0f;
        Tensor mstar;
        if (!use_rgnn) {
            mstar = mstar_free;
        } else {
            Tensor z;
            switch (config.method) {
                case Method::glame: z = rgnn::encode(&tape, sub, init, params); break;
                case Method::glame_gnn: z = rgnn::encode_gnn_ablation(&tape, sub, init, params); break;
                case Method::glame_mlp:
                    z = rgnn::encode_mlp_ablation(&tape, sub.root_subject, init, params);
                    break;
                case Method::rome: break;
            }
            // the clamp scale is a constant w.r.t. the tape, like a post-step
            // projection on the enhancement magnitude
            float eff_scale = config.zs_scale;
            if (cap > 0.0f) {
                const float zn = frobenius_norm(z) * std::abs(config.zs_scale);
                if (zn > cap) eff_scale *= cap / zn;
            }
            mstar = add(&tape, m_s_l, scale(&tape, z, eff_scale));
        }

        // one packed suffix forward covers every prefixed prompt (and the
        // essence prompt when the regularizer is on)
        std::vector<int> row_start;
        Tensor logits = model.forward_suffix_packed(&tape, caches, mstar, &row_start);
        Tensor ls = log_softmax_rows(&tape, logits);

        // L_p: mean per-token log-prob of o*, averaged over prefixes; the
        // per-prompt means collapse into one weighted gather since every o*
        // has the same token count
        std::vector<int> rows_all, cols_all;
        for (size_t p = 0; p < n_prompts; ++p) {
            for (size_t j = 0; j < local_rows[p].size(); ++j) {
                rows_all.push_back(row_start[p] + local_rows[p][j]);
                cols_all.push_back(local_cols[p][j]);
            }
        }
        // (1/N) sum_j (1/|o*|) sum_t equals the flat mean over all N*|o*| picks
        Tensor picked = gather_coords(&tape, ls, rows_all, cols_all);
        Tensor loss = neg(&tape, mean(&tape, picked));

        if (use_essence) {
            const int essence_row = row_start[n_prompts] + essence_last_local;
            Tensor p_sub = softmax_rows(&tape, row(&tape, logits, essence_row));
            Tensor la = kl_divergence(&tape, p_sub, base_dist);
            loss = add(&tape, loss, scale(&tape, la, config.lambda));
        }

        const float loss_v = loss.item();
        if (!std::isfinite(loss_v)) {
            std::ostringstream ss;
            ss << "optimize_mstar diverged at step " << step << " (loss " << loss_v << ", "
               << result.trace.loss.size() << " recorded steps)";
            throw NumericError(ss.str());
        }
        result.trace.loss.push_back(loss_v);
        if (loss_v < config.early_stop_loss) {
            result.trace.stop_reason = "early_stop";
            final_mstar = mstar;
            break;
        }
        if (step >= config.max_steps) {
            result.trace.stop_reason = "max_steps";
            final_mstar = mstar;
            break;
        }

        GradMap grads = tape.backward(loss);
        std::vector<Tensor> grad_hold;
        grad_hold.reserve(trainable.size());
        for (Tensor* p : trainable) {
            auto gopt = grads.grad(*p);
            grad_hold.push_back(gopt ? *gopt : Tensor::zeros(p->shape()));
        }
        std::vector<const Tensor*> gptrs;
        for (const Tensor& t : grad_hold) gptrs.push_back(&t);
        opt.step(trainable, gptrs);
        if (!use_rgnn && cap > 0.0f) {
            Tensor delta = num::sub(nullptr, mstar_free, m_s_l);
            const float dn = frobenius_norm(delta);
            if (dn > cap)
                mstar_free = add(nullptr, m_s_l, scale(nullptr, delta, cap / dn));
        }
    }

    result.mstar = final_mstar;
    if (use_rgnn) result.params = params;
    return result;
}

// ---- closed-form update --------------------------------------------------------------

Tensor rank_one_update(const Tensor& w, const Tensor& c, const Tensor& kstar, const Tensor& mstar) {
    if (w.ndim() != 2) throw ShapeError("rank_one_update: W must be 2-D");
    const int d = w.dim(0), inner = w.dim(1);
    if (c.ndim() != 2 || c.dim(0) != inner || c.dim(1) != inner)
        throw ShapeError("rank_one_update: C must be [inner x inner]");
    if (kstar.ndim() != 1 || kstar.dim(0) != inner) throw ShapeError("rank_one_update: k* shape");
    if (mstar.ndim() != 1 || mstar.dim(0) != d) throw ShapeError("rank_one_update: m* shape");
    double k_norm = 0.0;
    for (float v : kstar.values()) k_norm += static_cast<double>(v) * v;
    if (k_norm == 0.0) throw NumericError("rank_one_update: k* is zero");

    const Tensor u = solve_spd(c, kstar);  // C^-1 k*
    double denom = 0.0;
    for (int i = 0; i < inner; ++i) denom += static_cast<double>(u.at(i)) * kstar.at(i);
    if (!(denom > 1e-12)) {
        std::ostringstream ss;
        ss << "rank_one_update: singular update, (C^-1 k*)^T k* = " << denom;
        throw NumericError(ss.str());
    }

    std::vector<float> w_hat(static_cast<size_t>(d) * inner);
    const float* wd = w.data();
    for (int i = 0; i < d; ++i) {
        double wk = 0.0;
        const float* wrow = wd + static_cast<int64_t>(i) * inner;
        for (int j = 0; j < inner; ++j) wk += static_cast<double>(wrow[j]) * kstar.at(j);
        const double resid = static_cast<double>(mstar.at(i)) - wk;
        float* out_row = w_hat.data() + static_cast<int64_t>(i) * inner;
        for (int j = 0; j < inner; ++j)
            out_row[j] = static_cast<float>(wrow[j] + resid * u.at(j) / denom);
    }
    return Tensor({d, inner}, std::move(w_hat));
}

// ---- full procedure ------------------------------------------------------------------

namespace {

template <typename F>
auto run_stage(const char* stage, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string(stage) + ": " + e.what());
    } catch (const ShapeError& e) {
        throw ShapeError(std::string(stage) + ": " + e.what());
    } catch (const NumericError& e) {
        throw NumericError(std::string(stage) + ": " + e.what());
    } catch (const TokenError& e) {
        throw TokenError(std::string(stage) + ": " + e.what());
    }
}

}  // namespace

std::pair<lm::Model, EditSolution> edit(const lm::Model& model, const kg::KnowledgeGraph& g,
                                        const kg::EditRequest& request, const CovarianceCache& cache,
                                        const EditConfig& config, const std::set<int>& leak_filter) {
    config.validate();
    if (config.layer < 0 || config.layer >= model.config().n_layers)
        throw ConfigError("edit layer out of range");
    if (config.init_layer < 0 || config.init_layer >= model.config().n_layers)
        throw ConfigError("init layer out of range");
    if (cache.layer != config.layer)
        throw ConfigError("covariance cache was estimated for layer " + std::to_string(cache.layer) +
                          ", edit targets layer " + std::to_string(config.layer));

    EditSolution sol;
    const bool wants_graph = config.method != Method::rome;
    sol.subgraph = run_stage("build_subgraph", [&] {
        return kg::build_subgraph(g, request, wants_graph ? config.subgraph_n : 0, config.subgraph_m,
                                  leak_filter);
    });

    rgnn::NodeInitTable init;
    if (wants_graph)
        init = run_stage("init_node_reprs",
                         [&] { return rgnn::init_node_reprs(model, g, sol.subgraph, config.init_layer); });

    sol.prefixes = generate_prefixes(model, config.prefix_count, config.prefix_temperature,
                                     config.prefix_min_len, config.prefix_max_len, config.seed);

    MstarResult mres = run_stage("optimize_mstar", [&] {
        return optimize_mstar(model, g, request, sol.subgraph, init, sol.prefixes, config);
    });
    sol.mstar = mres.mstar;
    sol.trained_params = mres.params;
    sol.trace = mres.trace;

    sol.kstar = run_stage("compute_kstar",
                          [&] { return compute_kstar(model, g, request, sol.prefixes, config.layer); });

    const Tensor w = model.ffn_weight(config.layer);
    sol.w_hat = run_stage("rank_one_update",
                          [&] { return rank_one_update(w, cache.c, sol.kstar, sol.mstar); });

    // contract audits
    {
        const int d = w.dim(0), inner = w.dim(1);
        double num = 0.0, den = 0.0;
        for (int i = 0; i < d; ++i) {
            double wk = 0.0;
            for (int j = 0; j < inner; ++j)
                wk += static_cast<double>(sol.w_hat.at(i, j)) * sol.kstar.at(j);
            const double diff = wk - sol.mstar.at(i);
            num += diff * diff;
            den += static_cast<double>(sol.mstar.at(i)) * sol.mstar.at(i);
        }
        sol.constraint_residual = static_cast<float>(std::sqrt(num) / std::max(std::sqrt(den), 1e-30));
        if (sol.constraint_residual > 1e-3f)
            throw NumericError("edit constraint violated: residual " +
                               std::to_string(sol.constraint_residual));
        Tensor delta = sub(nullptr, sol.w_hat, w);
        auto sv = singular_values(delta);
        sol.rank_ratio = sv.size() > 1 && sv[0] > 0 ? sv[1] / sv[0] : 0.0;
    }

    lm::Model patched = run_stage("patch_ffn_weight",
                                  [&] { return model.patch_ffn_weight(config.layer, sol.w_hat); });
    return {std::move(patched), std::move(sol)};
}

lm::Model edit_sequence(const lm::Model& model, const kg::KnowledgeGraph& g,
                        const std::vector<kg::EditRequest>& edits, const CovarianceCache& cache,
                        const EditConfig& config, const SequenceOptions& opts,
                        std::vector<EditSolution>* solutions) {
    lm::Model current = model;
    kg::KnowledgeGraph world = g;
    CovarianceCache cov = cache;
    int index = 0;
    for (const kg::EditRequest& e : edits) {
        try {
            if (opts.reestimate_covariance && index > 0) {
                if (opts.covariance_sample.empty())
                    throw ConfigError("covariance re-estimation requested without a sample");
                cov = estimate_covariance(current, opts.covariance_sample, config.layer,
                                          1e-6f, cov.source);
            }
            EditConfig cfg = config;
            cfg.seed = config.seed + static_cast<uint64_t>(index);
            auto [next_model, sol] = edit(current, world, e, cov, cfg);
            current = std::move(next_model);
            world = kg::apply_edit_to_graph(world, e);
            if (solutions) solutions->push_back(std::move(sol));
        } catch (const std::exception& ex) {
            throw NumericError("edit " + std::to_string(index) + " of " +
                               std::to_string(edits.size()) + " failed: " + ex.what());
        }
        ++index;
    }
    return current;
}

double heldout_key_drift(const lm::Model& pre, const lm::Model& post, int layer,
                         const std::vector<std::vector<int>>& seqs,
                         const std::vector<int>& subject_tokens, int key_count, uint64_t seed) {
    const int inner = pre.config().ffn_inner_dim;
    std::vector<Tensor> pool;
    for (const auto& seq : seqs) {
        if (contains_span(seq, subject_tokens)) continue;
        lm::ForwardResult res = pre.forward_with_trace(seq);
        const Tensor& keys = res.trace.keys[static_cast<size_t>(layer)];
        for (int t = 0; t < keys.dim(0); ++t) pool.push_back(row(nullptr, keys, t));
        if (static_cast<int>(pool.size()) >= 8 * key_count) break;
    }
    if (static_cast<int>(pool.size()) < key_count)
        throw ConfigError("not enough held-out keys away from the edited subject");
    Rng rng(seed);
    std::vector<float> mat;
    for (int i = 0; i < key_count; ++i) {
        const Tensor& k = pool[rng.below(pool.size())];
        mat.insert(mat.end(), k.values().begin(), k.values().end());
    }
    Tensor keys_mat({key_count, inner}, std::move(mat));
    Tensor pre_proj = matmul_nt(nullptr, keys_mat, pre.ffn_weight(layer));
    Tensor post_proj = matmul_nt(nullptr, keys_mat, post.ffn_weight(layer));
    return frobenius_norm(sub(nullptr, post_proj, pre_proj)) /
           std::max(frobenius_norm(pre_proj), 1e-30f);
}

std::string EditSolution::report_json(const EditConfig& config) const {
    json j;
    j["format"] = "edit-solution/1";
    j["method"] = method_to_string(config.method);
    j["config"] = {{"layer", config.layer},
                   {"init_layer", config.init_layer},
                   {"n", config.subgraph_n},
                   {"m", config.subgraph_m},
                   {"lambda", config.lambda},
                   {"prefixes", config.prefix_count},
                   {"lr", config.lr},
                   {"max_steps", config.max_steps},
                   {"early_stop_loss", config.early_stop_loss},
                   {"zs_scale", config.zs_scale},
                   {"clamp_factor", config.clamp_factor},
                   {"seed", config.seed}};
    j["loss_trace"] = trace.loss;
    j["stop_reason"] = trace.stop_reason;
    j["constraint_residual"] = constraint_residual;
    j["rank_ratio"] = rank_ratio;
    j["kstar_digest"] = kstar.digest();
    j["mstar_digest"] = mstar.digest();
    j["w_hat_digest"] = w_hat.digest();
    j["subgraph"] = json::parse(subgraph.to_json());
    j["prefix_texts"] = prefixes;
    json params = json::array();
    for (size_t l = 0; l < trained_params.w1.size(); ++l)
        params.push_back({{"w1_digest", trained_params.w1[l].digest()},
                          {"w2_digest", trained_params.w2[l].digest()}});
    j["rgnn_params"] = std::move(params);
    return j.dump(2);
}

}  // namespace glame::editor
