#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "glamelab/kg.hpp"
#include "glamelab/model.hpp"
#include "glamelab/rgnn.hpp"

namespace glame::editor {

using num::Tensor;

// Uncentered second moment of FFN keys at one layer, C = sum k k^T, plus the
// ridge actually applied to make it positive definite.
struct CovarianceCache {
    int layer = -1;
    Tensor c;  // [inner, inner]
    int64_t sample_count = 0;
    float ridge_applied = 0.0f;
    std::string source;  // sample spec echo, for reproducibility audits

    void save(const std::string& path_prefix) const;  // path.json + path.bin
    static CovarianceCache load(const std::string& path_prefix);
};

enum class Method { glame, rome, glame_gnn, glame_mlp };
Method method_from_string(const std::string& s);
std::string method_to_string(Method m);

struct EditConfig {
    int layer = 3;       // l, the edited FFN layer
    int init_layer = 1;  // k, the representation-extraction layer
    int subgraph_n = 2;
    int subgraph_m = 20;
    float lambda = 6.25e-2f;
    int prefix_count = 10;  // N; the first prefix is always empty
    float prefix_temperature = 1.0f;
    int prefix_min_len = 2;
    int prefix_max_len = 10;
    float lr = 0.5f;
    int max_steps = 100;
    float early_stop_loss = 1e-2f;
    float zs_scale = 1.0f;  // scale applied to z_s^n before the additive composition
    // Projection bound ||m* - m_s|| <= clamp_factor * ||m_s||, applied outside
    // the gradient; 0 disables. Keeps the enhancement from saturating the
    // downstream layernorms when the optimizer overshoots.
    float clamp_factor = 4.0f;
    Method method = Method::glame;
    uint64_t seed = 0;

    void validate() const;
};

struct OptTrace {
    std::vector<float> loss;
    std::string stop_reason;  // "early_stop" or "max_steps"
};

struct EditSolution {
    Tensor kstar;  // [inner]
    Tensor mstar;  // [d]
    Tensor w_hat;  // [d, inner], canonical orientation
    OptTrace trace;
    rgnn::RgnnParams trained_params;  // empty for the rome method
    kg::Subgraph subgraph;
    std::vector<std::string> prefixes;
    float constraint_residual = 0.0f;  // ||W_hat k* - m*|| / ||m*||
    double rank_ratio = 0.0;           // sigma2 / sigma1 of W_hat - W

    std::string report_json(const EditConfig& config) const;
};

// Keys are collected from every token position of the sample sequences; the
// ridge starts at ridge_eps * mean(diag) and is raised tenfold until the
// matrix factorizes.
CovarianceCache estimate_covariance(const lm::Model& model,
                                    const std::vector<std::vector<int>>& sample_seqs, int layer,
                                    float ridge_eps = 1e-6f, const std::string& source = "");

// N prefixes sampled from the model itself; the first is empty so the plain
// prompt always participates.
std::vector<std::string> generate_prefixes(const lm::Model& model, int count, float temperature,
                                           int min_len, int max_len, uint64_t seed);

// Last token index of the subject's surface span inside `tokens`, searching
// from `from` on; multiple spans resolve to the last one.
int subject_last_token(const std::vector<int>& tokens, const std::vector<int>& subject_tokens,
                       int from = 0);

Tensor compute_kstar(const lm::Model& model, const kg::KnowledgeGraph& g,
                     const kg::EditRequest& edit, const std::vector<std::string>& prefixes,
                     int layer);

struct MstarResult {
    Tensor mstar;
    rgnn::RgnnParams params;
    OptTrace trace;
};

MstarResult optimize_mstar(const lm::Model& model, const kg::KnowledgeGraph& g,
                           const kg::EditRequest& edit, const kg::Subgraph& sub,
                           const rgnn::NodeInitTable& init,
                           const std::vector<std::string>& prefixes, const EditConfig& config);

// W_hat = W + (m* - W k*) (C^-1 k*)^T / ((C^-1 k*)^T k*), the closed-form
// solution of the constrained least-squares update. W is [d, inner], m = W k.
Tensor rank_one_update(const Tensor& w, const Tensor& c, const Tensor& kstar, const Tensor& mstar);

// The full editing procedure: subgraph -> init reprs -> m* -> k* -> rank-one
// update -> patched checkpoint, in that order.
std::pair<lm::Model, EditSolution> edit(const lm::Model& model, const kg::KnowledgeGraph& g,
                                        const kg::EditRequest& request, const CovarianceCache& cache,
                                        const EditConfig& config,
                                        const std::set<int>& leak_filter = {});

struct SequenceOptions {
    bool reestimate_covariance = false;
    std::vector<std::vector<int>> covariance_sample;  // used when re-estimating
};

// Applies edits one at a time against the previously patched checkpoint; the
// graph evolves alongside so later subgraphs see earlier edits.
lm::Model edit_sequence(const lm::Model& model, const kg::KnowledgeGraph& g,
                        const std::vector<kg::EditRequest>& edits, const CovarianceCache& cache,
                        const EditConfig& config, const SequenceOptions& opts = {},
                        std::vector<EditSolution>* solutions = nullptr);

// Held-out key drift ||W' K - W K||_F / ||W K||_F over keys traced from
// sequences that avoid the edited subject.
double heldout_key_drift(const lm::Model& pre, const lm::Model& post, int layer,
                         const std::vector<std::vector<int>>& seqs,
                         const std::vector<int>& subject_tokens, int key_count, uint64_t seed);

}  // namespace glame::editor
