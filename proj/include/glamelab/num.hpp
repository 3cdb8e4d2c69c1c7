#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "glamelab/util.hpp"

namespace glame::num {

using Shape = std::vector<int>;

// Dense row-major f32 tensor. Values are immutable once created; copies share
// the underlying buffer and compare equal by value id.
class Tensor {
public:
    Tensor() : shape_{0}, vid_(next_vid()) {}
    Tensor(Shape shape, std::vector<float> values);

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, float value);
    static Tensor ones(Shape shape) { return full(std::move(shape), 1.0f); }
    static Tensor identity(int n);
    static Tensor scalar(float v) { return Tensor(Shape{}, {v}); }
    static Tensor randn(Shape shape, Rng& rng, float stddev = 1.0f);
    static Tensor uniform(Shape shape, Rng& rng, float lo, float hi);

    const Shape& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const;
    bool is_scalar() const { return shape_.empty(); }

    const float* data() const { return data_->data(); }
    const std::vector<float>& values() const { return *data_; }
    float item() const;
    float at(int i) const { return (*data_)[static_cast<size_t>(i)]; }
    float at(int r, int c) const { return (*data_)[static_cast<size_t>(r) * shape_[1] + c]; }

    int64_t vid() const { return vid_; }
    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool all_finite() const;
    std::string digest() const;

private:
    static int64_t next_vid();
    std::shared_ptr<const std::vector<float>> data_;
    Shape shape_;
    int64_t vid_;
};

std::string shape_str(const Shape& s);

// Gradients keyed by tensor value id. Untracked leaves are absent, not
// zero-filled.
class GradMap {
public:
    std::optional<Tensor> grad(const Tensor& t) const;
    const Tensor& at(const Tensor& t) const;
    void add(int64_t vid, const Tensor& g);
    size_t size() const { return grads_.size(); }

private:
    std::unordered_map<int64_t, Tensor> grads_;
};

// Reverse-mode tape. Ops append nodes in creation order, which is a valid
// topological order; backward() walks it in exact reverse. A tape is
// single-threaded; independent tapes may run concurrently.
class Tape {
public:
    Tensor watch(const Tensor& t);
    bool tracked(const Tensor& t) const { return node_of_.count(t.vid()) > 0; }
    GradMap backward(const Tensor& scalar_loss);
    size_t size() const { return nodes_.size(); }

    // Internal to op implementations.
    int node_index(const Tensor& t) const;
    void record(const Tensor& out, std::vector<int> parents,
                std::function<void(const Tensor& gout, std::vector<Tensor>& parent_grads)> back);

private:
    struct Node {
        int64_t out_vid;
        Shape out_shape;
        std::vector<int> parents;
        std::function<void(const Tensor&, std::vector<Tensor>&)> back;
    };
    std::vector<Node> nodes_;
    std::unordered_map<int64_t, int> node_of_;
};

// ---- differentiable primitives -------------------------------------------
// Every op takes an optional tape; with tape == nullptr it is a plain f32
// evaluation. All ops validate shapes and throw ShapeError on mismatch.

Tensor add(Tape* tape, const Tensor& a, const Tensor& b);        // same shape, or b row-broadcast over a
Tensor sub(Tape* tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);        // elementwise
Tensor scale(Tape* tape, const Tensor& a, float s);
Tensor neg(Tape* tape, const Tensor& a);

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b);     // [p,q]x[q,r]
Tensor matmul_nt(Tape* tape, const Tensor& a, const Tensor& b);  // a * b^T, [p,q]x[r,q]
Tensor matmul_tn(Tape* tape, const Tensor& a, const Tensor& b);  // a^T * b, [q,p]x[q,r]
Tensor transpose(const Tensor& a);                               // non-differentiable helper

Tensor relu(Tape* tape, const Tensor& a);                        // subgradient at 0 is 0
Tensor gelu(Tape* tape, const Tensor& a);                        // exact erf form
Tensor softmax_rows(Tape* tape, const Tensor& a);
Tensor log_softmax_rows(Tape* tape, const Tensor& a);
Tensor layernorm_rows(Tape* tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      float eps = 1e-5f);

Tensor sum(Tape* tape, const Tensor& a);                         // -> scalar
Tensor mean(Tape* tape, const Tensor& a);                        // -> scalar

Tensor gather_rows(Tape* tape, const Tensor& a, const std::vector<int>& idx);
Tensor scatter_add_rows(Tape* tape, const Tensor& a, const std::vector<int>& idx, int out_rows);
Tensor gather_coords(Tape* tape, const Tensor& a, const std::vector<int>& rows,
                     const std::vector<int>& cols);              // -> [k]
Tensor slice_cols(Tape* tape, const Tensor& a, int start, int len);
Tensor slice_rows(Tape* tape, const Tensor& a, int start, int len);
Tensor concat_cols(Tape* tape, const std::vector<Tensor>& parts);
Tensor concat_rows(Tape* tape, const std::vector<Tensor>& parts);
Tensor row(Tape* tape, const Tensor& a, int r);                  // -> [d]
Tensor reshape(Tape* tape, const Tensor& a, Shape shape);

// Multi-head causal self-attention over `batch` packed sequences of length
// `seq_len` (rows = batch * seq_len): per head, softmax(q k^T / sqrt(hd) +
// causal mask) v, heads concatenated. One fused primitive keeps the tape
// small on the training path.
Tensor causal_attention(Tape* tape, const Tensor& q, const Tensor& k, const Tensor& v,
                        int n_heads, int batch, int seq_len);

// Same attention for suffixes of several independent sequences packed row-wise.
// Block p covers packed rows [row_start[p], row_start[p+1]); its dynamic rows
// begin at global position offsets[p], and k_pre[p]/v_pre[p] hold the constant
// rows [0, offsets[p]). Gradients flow to the dynamic q/k/v only.
Tensor causal_attention_suffix_packed(Tape* tape, const Tensor& q, const Tensor& k, const Tensor& v,
                                      const std::vector<Tensor>& k_pre,
                                      const std::vector<Tensor>& v_pre,
                                      const std::vector<int>& offsets,
                                      const std::vector<int>& row_start, int n_heads);

// Single-sequence convenience wrapper.
Tensor causal_attention_suffix(Tape* tape, const Tensor& q, const Tensor& k, const Tensor& v,
                               const Tensor& k_pre, const Tensor& v_pre, int n_heads, int offset);

// Mean over weighted positions of -log softmax(logits)[i, target[i]].
Tensor cross_entropy_masked(Tape* tape, const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<float>& weights);
// KL(p || q) for 1-D distributions; both clamped below at 1e-12.
Tensor kl_divergence(Tape* tape, const Tensor& p, const Tensor& q);

// ---- optimizer -------------------------------------------------------------

struct AdamWConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.0f;
};

// One decoupled-weight-decay adaptive-moment update; t is the 1-based step.
void adamw_step(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, int64_t t,
                const AdamWConfig& cfg);

class AdamW {
public:
    explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}
    // Params are updated in place (fresh tensors installed). Slots keyed by order.
    void step(std::vector<Tensor*> params, const std::vector<const Tensor*>& grads, float lr_override = -1.0f);
    int64_t steps_taken() const { return t_; }

private:
    AdamWConfig cfg_;
    int64_t t_ = 0;
    std::vector<Tensor> m_, v_;
};

// ---- dense linear algebra (double-precision internals, f32 contracts) ------

// Solve c x = v for symmetric positive definite c via Cholesky.
// Throws NumericError (with a pivot-based condition estimate) if not SPD.
Tensor solve_spd(const Tensor& c, const Tensor& v);

// Eigenvalues of a symmetric matrix (cyclic Jacobi), ascending.
std::vector<double> sym_eigenvalues(const Tensor& c);

// Singular values, descending.
std::vector<double> singular_values(const Tensor& a);

// Global l2 norm of a gradient set; used for clipping.
double global_norm(const std::vector<const Tensor*>& ts);

float frobenius_norm(const Tensor& a);
float rel_l2_error(const Tensor& got, const Tensor& want);

}  // namespace glame::num
