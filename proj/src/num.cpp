#include "glamelab/num.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <thread>

namespace glame::num {

namespace {

int64_t checked_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) {
        if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

// Rows [r0, r1) of out = a[p,q] * b[q,r], axpy inner loop (vectorizes well).
void mm_rows(const float* a, const float* b, float* out, int q, int r, int r0, int r1) {
    for (int i = r0; i < r1; ++i) {
        float* dst = out + static_cast<int64_t>(i) * r;
        std::memset(dst, 0, sizeof(float) * static_cast<size_t>(r));
        const float* arow = a + static_cast<int64_t>(i) * q;
        for (int k = 0; k < q; ++k) {
            const float aik = arow[k];
            if (aik == 0.0f) continue;
            const float* brow = b + static_cast<int64_t>(k) * r;
            for (int j = 0; j < r; ++j) dst[j] += aik * brow[j];
        }
    }
}

// Rows [r0, r1) of out = a[p,q] * b[r,q]^T, unrolled dot inner loop.
void mm_nt_rows(const float* a, const float* b, float* out, int q, int r, int r0, int r1) {
    for (int i = r0; i < r1; ++i) {
        const float* arow = a + static_cast<int64_t>(i) * q;
        float* dst = out + static_cast<int64_t>(i) * r;
        for (int j = 0; j < r; ++j) {
            const float* brow = b + static_cast<int64_t>(j) * q;
            float s0 = 0.0f, s1 = 0.0f, s2 = 0.0f, s3 = 0.0f;
            int k = 0;
            for (; k + 4 <= q; k += 4) {
                s0 += arow[k] * brow[k];
                s1 += arow[k + 1] * brow[k + 1];
                s2 += arow[k + 2] * brow[k + 2];
                s3 += arow[k + 3] * brow[k + 3];
            }
            float s = (s0 + s1) + (s2 + s3);
            for (; k < q; ++k) s += arow[k] * brow[k];
            dst[j] = s;
        }
    }
}

// Splits row range across two threads for large products; partitioning by row
// keeps results bit-identical regardless of thread count.
template <typename Kernel>
void run_rows(int p, int64_t flops, Kernel&& kernel) {
    static const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    if (hw >= 2 && flops >= (1 << 21) && p >= 2) {
        int mid = p / 2;
        std::thread t([&] { kernel(0, mid); });
        kernel(mid, p);
        t.join();
    } else {
        kernel(0, p);
    }
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

int64_t Tensor::next_vid() {
    static std::atomic<int64_t> counter{1};
    return counter.fetch_add(1);
}

Tensor::Tensor(Shape shape, std::vector<float> values) : shape_(std::move(shape)), vid_(next_vid()) {
    if (checked_numel(shape_) != static_cast<int64_t>(values.size()))
        throw ShapeError("shape " + shape_str(shape_) + " does not match " +
                         std::to_string(values.size()) + " values");
    data_ = std::make_shared<const std::vector<float>>(std::move(values));
}

Tensor Tensor::zeros(Shape shape) {
    int64_t n = checked_numel(shape);
    return Tensor(std::move(shape), std::vector<float>(static_cast<size_t>(n), 0.0f));
}

Tensor Tensor::full(Shape shape, float value) {
    int64_t n = checked_numel(shape);
    return Tensor(std::move(shape), std::vector<float>(static_cast<size_t>(n), value));
}

Tensor Tensor::identity(int n) {
    std::vector<float> v(static_cast<size_t>(n) * n, 0.0f);
    for (int i = 0; i < n; ++i) v[static_cast<size_t>(i) * n + i] = 1.0f;
    return Tensor({n, n}, std::move(v));
}

Tensor Tensor::randn(Shape shape, Rng& rng, float stddev) {
    int64_t n = checked_numel(shape);
    std::vector<float> v(static_cast<size_t>(n));
    for (auto& x : v) x = static_cast<float>(rng.normal()) * stddev;
    return Tensor(std::move(shape), std::move(v));
}

Tensor Tensor::uniform(Shape shape, Rng& rng, float lo, float hi) {
    int64_t n = checked_numel(shape);
    std::vector<float> v(static_cast<size_t>(n));
    for (auto& x : v) x = lo + static_cast<float>(rng.uniform()) * (hi - lo);
    return Tensor(std::move(shape), std::move(v));
}

int64_t Tensor::numel() const {
    return checked_numel(shape_);
}

float Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return (*data_)[0];
}

bool Tensor::all_finite() const {
    for (float v : *data_)
        if (!std::isfinite(v)) return false;
    return true;
}

std::string Tensor::digest() const {
    return digest_hex(data_->data(), data_->size() * sizeof(float));
}

std::string shape_str(const Shape& s) {
    std::ostringstream ss;
    ss << '[';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) ss << 'x';
        ss << s[i];
    }
    ss << ']';
    return ss.str();
}

// ---- GradMap / Tape ---------------------------------------------------------

std::optional<Tensor> GradMap::grad(const Tensor& t) const {
    auto it = grads_.find(t.vid());
    if (it == grads_.end()) return std::nullopt;
    return it->second;
}

const Tensor& GradMap::at(const Tensor& t) const {
    auto it = grads_.find(t.vid());
    if (it == grads_.end()) throw NumericError("no gradient recorded for tensor");
    return it->second;
}

void GradMap::add(int64_t vid, const Tensor& g) {
    grads_.emplace(vid, g);
}

Tensor Tape::watch(const Tensor& t) {
    if (!tracked(t)) {
        nodes_.push_back(Node{t.vid(), t.shape(), {}, nullptr});
        node_of_[t.vid()] = static_cast<int>(nodes_.size()) - 1;
    }
    return t;
}

int Tape::node_index(const Tensor& t) const {
    auto it = node_of_.find(t.vid());
    return it == node_of_.end() ? -1 : it->second;
}

void Tape::record(const Tensor& out, std::vector<int> parents,
                  std::function<void(const Tensor&, std::vector<Tensor>&)> back) {
    nodes_.push_back(Node{out.vid(), out.shape(), std::move(parents), std::move(back)});
    node_of_[out.vid()] = static_cast<int>(nodes_.size()) - 1;
}

namespace {
void accumulate(Tensor& dst, const Tensor& src) {
    if (dst.numel() == 0) {
        dst = src;
        return;
    }
    std::vector<float> v(dst.values());
    const float* s = src.data();
    for (size_t i = 0; i < v.size(); ++i) v[i] += s[i];
    dst = Tensor(dst.shape(), std::move(v));
}
}  // namespace

GradMap Tape::backward(const Tensor& scalar_loss) {
    if (!scalar_loss.is_scalar())
        throw NumericError("backward requires a scalar loss, got shape " +
                           shape_str(scalar_loss.shape()));
    int root = node_index(scalar_loss);
    if (root < 0) throw NumericError("loss tensor is not on this tape");

    std::vector<Tensor> grads(nodes_.size());
    grads[static_cast<size_t>(root)] = Tensor::scalar(1.0f);

    for (int i = root; i >= 0; --i) {
        const Node& node = nodes_[static_cast<size_t>(i)];
        Tensor& g = grads[static_cast<size_t>(i)];
        if (g.numel() == 0 || !node.back) continue;
        std::vector<Tensor> parent_grads(node.parents.size());
        node.back(g, parent_grads);
        for (size_t p = 0; p < node.parents.size(); ++p) {
            if (parent_grads[p].numel() == 0) continue;
            accumulate(grads[static_cast<size_t>(node.parents[p])], parent_grads[p]);
        }
    }

    GradMap out;
    for (size_t i = 0; i < nodes_.size(); ++i) {
        if (grads[i].numel() != 0) out.add(nodes_[i].out_vid, grads[i]);
    }
    return out;
}

// ---- op plumbing ------------------------------------------------------------

namespace {

// Registers out on the tape when any input is tracked.
void maybe_record(Tape* tape, const Tensor& out, std::initializer_list<const Tensor*> inputs,
                  std::function<void(const Tensor&, std::vector<Tensor>&)> back) {
    if (!tape) return;
    std::vector<int> parents;
    bool any = false;
    for (const Tensor* t : inputs) {
        int idx = tape->node_index(*t);
        parents.push_back(idx);
        any = any || idx >= 0;
    }
    if (!any) return;
    // Parents with index -1 are constants; their gradient slots are dropped.
    // Record remaps to compacted parent list.
    std::vector<int> kept;
    std::vector<size_t> kept_pos;
    for (size_t i = 0; i < parents.size(); ++i) {
        if (parents[i] >= 0) {
            kept.push_back(parents[i]);
            kept_pos.push_back(i);
        }
    }
    tape->record(out, kept,
                 [back = std::move(back), n_inputs = parents.size(), kept_pos](
                     const Tensor& gout, std::vector<Tensor>& parent_grads) {
                     std::vector<Tensor> full(n_inputs);
                     back(gout, full);
                     for (size_t i = 0; i < kept_pos.size(); ++i)
                         parent_grads[i] = full[kept_pos[i]];
                 });
}

std::vector<float> copy_values(const Tensor& t) {
    return t.values();
}

}  // namespace

// ---- arithmetic ------------------------------------------------------------

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
    bool broadcast = false;
    if (!a.same_shape(b)) {
        // row broadcast: a [n,d] + b [d]
        if (a.ndim() == 2 && b.ndim() == 1 && a.dim(1) == b.dim(0)) {
            broadcast = true;
        } else {
            throw ShapeError("add: shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
        }
    }
    std::vector<float> v = copy_values(a);
    const float* bd = b.data();
    if (!broadcast) {
        for (size_t i = 0; i < v.size(); ++i) v[i] += bd[i];
    } else {
        int n = a.dim(0), d = a.dim(1);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) v[static_cast<size_t>(i) * d + j] += bd[j];
    }
    Tensor out(a.shape(), std::move(v));
    maybe_record(tape, out, {&a, &b},
                 [broadcast, ash = a.shape(), bsh = b.shape()](const Tensor& g, std::vector<Tensor>& pg) {
                     pg[0] = g;
                     if (!broadcast) {
                         pg[1] = g;
                     } else {
                         int n = ash[0], d = ash[1];
                         std::vector<float> gb(static_cast<size_t>(d), 0.0f);
                         const float* gd = g.data();
                         for (int i = 0; i < n; ++i)
                             for (int j = 0; j < d; ++j) gb[static_cast<size_t>(j)] += gd[static_cast<size_t>(i) * d + j];
                         pg[1] = Tensor(bsh, std::move(gb));
                     }
                 });
    return out;
}

Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "sub: shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<float> v = copy_values(a);
    const float* bd = b.data();
    for (size_t i = 0; i < v.size(); ++i) v[i] -= bd[i];
    Tensor out(a.shape(), std::move(v));
    maybe_record(tape, out, {&a, &b}, [](const Tensor& g, std::vector<Tensor>& pg) {
        pg[0] = g;
        std::vector<float> nv = g.values();
        for (auto& x : nv) x = -x;
        pg[1] = Tensor(g.shape(), std::move(nv));
    });
    return out;
}

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "mul: shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<float> v = copy_values(a);
    const float* bd = b.data();
    for (size_t i = 0; i < v.size(); ++i) v[i] *= bd[i];
    Tensor out(a.shape(), std::move(v));
    maybe_record(tape, out, {&a, &b}, [a, b](const Tensor& g, std::vector<Tensor>& pg) {
        std::vector<float> ga(g.values()), gb(g.values());
        const float* ad = a.data();
        const float* bd2 = b.data();
        for (size_t i = 0; i < ga.size(); ++i) {
            ga[i] *= bd2[i];
            gb[i] *= ad[i];
        }
        pg[0] = Tensor(a.shape(), std::move(ga));
        pg[1] = Tensor(b.shape(), std::move(gb));
    });
    return out;
}

Tensor scale(Tape* tape, const Tensor& a, float s) {
    std::vector<float> v = copy_values(a);
    for (auto& x : v) x *= s;
    Tensor out(a.shape(), std::move(v));
    maybe_record(tape, out, {&a}, [s](const Tensor& g, std::vector<Tensor>& pg) {
        std::vector<float> gv = g.values();
        for (auto& x : gv) x *= s;
        pg[0] = Tensor(g.shape(), std::move(gv));
    });
    return out;
}

Tensor neg(Tape* tape, const Tensor& a) {
    return scale(tape, a, -1.0f);
}

// ---- matmul family ----------------------------------------------------------

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
    require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
            "matmul: shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int p = a.dim(0), q = a.dim(1), r = b.dim(1);
    std::vector<float> v(static_cast<size_t>(p) * r);
    run_rows(p, static_cast<int64_t>(p) * q * r,
             [&](int r0, int r1) { mm_rows(a.data(), b.data(), v.data(), q, r, r0, r1); });
    Tensor out({p, r}, std::move(v));
    maybe_record(tape, out, {&a, &b}, [a, b](const Tensor& g, std::vector<Tensor>& pg) {
        pg[0] = matmul_nt(nullptr, g, b);   // dA = g * b^T
        pg[1] = matmul_tn(nullptr, a, g);   // dB = a^T * g
    });
    return out;
}

Tensor matmul_nt(Tape* tape, const Tensor& a, const Tensor& b) {
    require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(1),
            "matmul_nt: shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
    int p = a.dim(0), q = a.dim(1), r = b.dim(0);
    const int64_t flops = static_cast<int64_t>(p) * q * r;
    std::vector<float> v(static_cast<size_t>(p) * r);
    if (flops >= (1 << 18)) {
        // the transposed-operand axpy kernel vectorizes; the dot kernel does not
        Tensor bt = transpose(b);
        run_rows(p, flops, [&](int r0, int r1) { mm_rows(a.data(), bt.data(), v.data(), q, r, r0, r1); });
    } else {
        run_rows(p, flops, [&](int r0, int r1) { mm_nt_rows(a.data(), b.data(), v.data(), q, r, r0, r1); });
    }
    Tensor out({p, r}, std::move(v));
    maybe_record(tape, out, {&a, &b}, [a, b](const Tensor& g, std::vector<Tensor>& pg) {
        pg[0] = matmul(nullptr, g, b);      // dA = g * b
        pg[1] = matmul_tn(nullptr, g, a);   // dB = g^T * a
    });
    return out;
}

Tensor matmul_tn(Tape* tape, const Tensor& a, const Tensor& b) {
    require(a.ndim() == 2 && b.ndim() == 2 && a.dim(0) == b.dim(0),
            "matmul_tn: shapes " + shape_str(a.shape()) + "^T x " + shape_str(b.shape()));
    int p = a.dim(1), q = a.dim(0), r = b.dim(1);
    // out[i,j] = sum_k a[k,i] * b[k,j]; accumulate row-by-row of a/b.
    std::vector<float> v(static_cast<size_t>(p) * r, 0.0f);
    const float* ad = a.data();
    const float* bd = b.data();
    for (int k = 0; k < q; ++k) {
        const float* arow = ad + static_cast<int64_t>(k) * p;
        const float* brow = bd + static_cast<int64_t>(k) * r;
        for (int i = 0; i < p; ++i) {
            const float aki = arow[i];
            if (aki == 0.0f) continue;
            float* dst = v.data() + static_cast<int64_t>(i) * r;
            for (int j = 0; j < r; ++j) dst[j] += aki * brow[j];
        }
    }
    Tensor out({p, r}, std::move(v));
    maybe_record(tape, out, {&a, &b}, [a, b](const Tensor& g, std::vector<Tensor>& pg) {
        pg[0] = matmul_nt(nullptr, b, g);   // dA = b * g^T
        pg[1] = matmul(nullptr, a, g);      // dB = a * g
    });
    return out;
}

Tensor transpose(const Tensor& a) {
    require(a.ndim() == 2, "transpose: need 2-D, got " + shape_str(a.shape()));
    int p = a.dim(0), q = a.dim(1);
    std::vector<float> v(static_cast<size_t>(p) * q);
    const float* ad = a.data();
    for (int i = 0; i < p; ++i)
        for (int j = 0; j < q; ++j) v[static_cast<size_t>(j) * p + i] = ad[static_cast<size_t>(i) * q + j];
    return Tensor({q, p}, std::move(v));
}

// ---- nonlinearities ----------------------------------------------------------

Tensor relu(Tape* tape, const Tensor& a) {
    std::vector<float> v = copy_values(a);
    for (auto& x : v) x = x > 0.0f ? x : 0.0f;
    Tensor out(a.shape(), std::move(v));
    maybe_record(tape, out, {&a}, [a](const Tensor& g, std::vector<Tensor>& pg) {
        std::vector<float> gv = g.values();
        const float* ad = a.data();
        for (size_t i = 0; i < gv.size(); ++i)
            if (ad[i] <= 0.0f) gv[i] = 0.0f;  // subgradient at 0 fixed to 0
        pg[0] = Tensor(g.shape(), std::move(gv));
    });
    return out;
}

namespace {
inline float gelu_fwd(float x) {
    return 0.5f * x * (1.0f + std::erf(x * 0.7071067811865475f));
}
inline float gelu_grad(float x) {
    const float phi = 0.5f * (1.0f + std::erf(x * 0.7071067811865475f));
    const float pdf = 0.3989422804014327f * std::exp(-0.5f * x * x);
    return phi + x * pdf;
}
}  // namespace

Tensor gelu(Tape* tape, const Tensor& a) {
    std::vector<float> v = copy_values(a);
    for (auto& x : v) x = gelu_fwd(x);
    Tensor out(a.shape(), std::move(v));
    maybe_record(tape, out, {&a}, [a](const Tensor& g, std::vector<Tensor>& pg) {
        std::vector<float> gv = g.values();
        const float* ad = a.data();
        for (size_t i = 0; i < gv.size(); ++i) gv[i] *= gelu_grad(ad[i]);
        pg[0] = Tensor(g.shape(), std::move(gv));
    });
    return out;
}

namespace {
// Rows view: scalar/1-D treated as a single row.
std::pair<int, int> rows_cols(const Tensor& a) {
    if (a.ndim() == 2) return {a.dim(0), a.dim(1)};
    if (a.ndim() == 1) return {1, a.dim(0)};
    throw ShapeError("expected 1-D or 2-D, got " + shape_str(a.shape()));
}

void softmax_row(const float* in, float* out, int d) {
    float mx = in[0];
    for (int j = 1; j < d; ++j) mx = std::max(mx, in[j]);
    double denom = 0.0;
    for (int j = 0; j < d; ++j) {
        out[j] = std::exp(in[j] - mx);
        denom += out[j];
    }
    const float inv = static_cast<float>(1.0 / denom);
    for (int j = 0; j < d; ++j) out[j] *= inv;
}
}  // namespace

Tensor softmax_rows(Tape* tape, const Tensor& a) {
    auto [n, d] = rows_cols(a);
    std::vector<float> v(static_cast<size_t>(n) * d);
    for (int i = 0; i < n; ++i)
        softmax_row(a.data() + static_cast<int64_t>(i) * d, v.data() + static_cast<int64_t>(i) * d, d);
    Tensor out(a.shape(), std::move(v));
    maybe_record(tape, out, {&a}, [out, n = n, d = d](const Tensor& g, std::vector<Tensor>& pg) {
        std::vector<float> gv(static_cast<size_t>(n) * d);
        const float* y = out.data();
        const float* gd = g.data();
        for (int i = 0; i < n; ++i) {
            const float* yi = y + static_cast<int64_t>(i) * d;
            const float* gi = gd + static_cast<int64_t>(i) * d;
            double dot = 0.0;
            for (int j = 0; j < d; ++j) dot += static_cast<double>(gi[j]) * yi[j];
            float* dst = gv.data() + static_cast<int64_t>(i) * d;
            for (int j = 0; j < d; ++j) dst[j] = yi[j] * (gi[j] - static_cast<float>(dot));
        }
        pg[0] = Tensor(g.shape(), std::move(gv));
    });
    return out;
}

Tensor log_softmax_rows(Tape* tape, const Tensor& a) {
    auto [n, d] = rows_cols(a);
    std::vector<float> v(static_cast<size_t>(n) * d);
    const float* ad = a.data();
    for (int i = 0; i < n; ++i) {
        const float* in = ad + static_cast<int64_t>(i) * d;
        float* outp = v.data() + static_cast<int64_t>(i) * d;
        float mx = in[0];
        for (int j = 1; j < d; ++j) mx = std::max(mx, in[j]);
        double denom = 0.0;
        for (int j = 0; j < d; ++j) denom += std::exp(static_cast<double>(in[j]) - mx);
        const float lse = mx + static_cast<float>(std::log(denom));
        for (int j = 0; j < d; ++j) outp[j] = in[j] - lse;
    }
    Tensor out(a.shape(), std::move(v));
    maybe_record(tape, out, {&a}, [out, n = n, d = d](const Tensor& g, std::vector<Tensor>& pg) {
        std::vector<float> gv(static_cast<size_t>(n) * d);
        const float* ls = out.data();
        const float* gd = g.data();
        for (int i = 0; i < n; ++i) {
            const float* li = ls + static_cast<int64_t>(i) * d;
            const float* gi = gd + static_cast<int64_t>(i) * d;
            double gsum = 0.0;
            for (int j = 0; j < d; ++j) gsum += gi[j];
            float* dst = gv.data() + static_cast<int64_t>(i) * d;
            for (int j = 0; j < d; ++j)
                dst[j] = gi[j] - static_cast<float>(gsum * std::exp(static_cast<double>(li[j])));
        }
        pg[0] = Tensor(g.shape(), std::move(gv));
    });
    return out;
}

Tensor layernorm_rows(Tape* tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    auto [n, d] = rows_cols(x);
    require(gamma.ndim() == 1 && gamma.dim(0) == d, "layernorm: gamma shape " + shape_str(gamma.shape()));
    require(beta.ndim() == 1 && beta.dim(0) == d, "layernorm: beta shape " + shape_str(beta.shape()));
    std::vector<float> v(static_cast<size_t>(n) * d);
    std::vector<float> xhat(static_cast<size_t>(n) * d);
    std::vector<float> rstd(static_cast<size_t>(n));
    const float* xd = x.data();
    const float* gm = gamma.data();
    const float* bt = beta.data();
    for (int i = 0; i < n; ++i) {
        const float* xi = xd + static_cast<int64_t>(i) * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += xi[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            double c = xi[j] - mu;
            var += c * c;
        }
        var /= d;
        const float rs = static_cast<float>(1.0 / std::sqrt(var + eps));
        rstd[static_cast<size_t>(i)] = rs;
        float* xh = xhat.data() + static_cast<int64_t>(i) * d;
        float* outp = v.data() + static_cast<int64_t>(i) * d;
        for (int j = 0; j < d; ++j) {
            xh[j] = (xi[j] - static_cast<float>(mu)) * rs;
            outp[j] = xh[j] * gm[j] + bt[j];
        }
    }
    Tensor out(x.shape(), std::move(v));
    Tensor xhat_t(x.shape(), std::move(xhat));
    maybe_record(tape, out, {&x, &gamma, &beta},
                 [xhat_t, rstd, gamma, n = n, d = d](const Tensor& g, std::vector<Tensor>& pg) {
                     std::vector<float> gx(static_cast<size_t>(n) * d);
                     std::vector<float> gg(static_cast<size_t>(d), 0.0f);
                     std::vector<float> gb(static_cast<size_t>(d), 0.0f);
                     const float* gd = g.data();
                     const float* xh = xhat_t.data();
                     const float* gm = gamma.data();
                     for (int i = 0; i < n; ++i) {
                         const float* gi = gd + static_cast<int64_t>(i) * d;
                         const float* xhi = xh + static_cast<int64_t>(i) * d;
                         double sum_gy = 0.0, sum_gyxh = 0.0;
                         for (int j = 0; j < d; ++j) {
                             const double gy = static_cast<double>(gi[j]) * gm[j];
                             sum_gy += gy;
                             sum_gyxh += gy * xhi[j];
                             gg[static_cast<size_t>(j)] += gi[j] * xhi[j];
                             gb[static_cast<size_t>(j)] += gi[j];
                         }
                         const float rs = rstd[static_cast<size_t>(i)];
                         float* dst = gx.data() + static_cast<int64_t>(i) * d;
                         for (int j = 0; j < d; ++j) {
                             const double gy = static_cast<double>(gi[j]) * gm[j];
                             dst[j] = static_cast<float>(
                                 rs * (gy - sum_gy / d - static_cast<double>(xhi[j]) * sum_gyxh / d));
                         }
                     }
                     pg[0] = Tensor(xhat_t.shape(), std::move(gx));
                     pg[1] = Tensor(gamma.shape(), std::move(gg));
                     pg[2] = Tensor({d}, std::move(gb));
                 });
    return out;
}

// ---- reductions --------------------------------------------------------------

Tensor sum(Tape* tape, const Tensor& a) {
    double s = 0.0;
    for (float v : a.values()) s += v;
    Tensor out = Tensor::scalar(static_cast<float>(s));
    maybe_record(tape, out, {&a}, [sh = a.shape()](const Tensor& g, std::vector<Tensor>& pg) {
        pg[0] = Tensor::full(sh, g.item());
    });
    return out;
}

Tensor mean(Tape* tape, const Tensor& a) {
    const int64_t n = a.numel();
    require(n > 0, "mean of empty tensor");
    double s = 0.0;
    for (float v : a.values()) s += v;
    Tensor out = Tensor::scalar(static_cast<float>(s / static_cast<double>(n)));
    maybe_record(tape, out, {&a}, [sh = a.shape(), n](const Tensor& g, std::vector<Tensor>& pg) {
        pg[0] = Tensor::full(sh, g.item() / static_cast<float>(n));
    });
    return out;
}

// ---- indexing ----------------------------------------------------------------

Tensor gather_rows(Tape* tape, const Tensor& a, const std::vector<int>& idx) {
    require(a.ndim() == 2, "gather_rows: need 2-D, got " + shape_str(a.shape()));
    int n = a.dim(0), d = a.dim(1);
    std::vector<float> v(idx.size() * static_cast<size_t>(d));
    for (size_t i = 0; i < idx.size(); ++i) {
        require(idx[i] >= 0 && idx[i] < n, "gather_rows: index " + std::to_string(idx[i]) +
                                               " out of range [0," + std::to_string(n) + ")");
        std::memcpy(v.data() + i * static_cast<size_t>(d),
                    a.data() + static_cast<int64_t>(idx[i]) * d, sizeof(float) * static_cast<size_t>(d));
    }
    Tensor out({static_cast<int>(idx.size()), d}, std::move(v));
    maybe_record(tape, out, {&a}, [idx, n, d](const Tensor& g, std::vector<Tensor>& pg) {
        std::vector<float> gv(static_cast<size_t>(n) * d, 0.0f);
        const float* gd = g.data();
        for (size_t i = 0; i < idx.size(); ++i) {
            float* dst = gv.data() + static_cast<int64_t>(idx[i]) * d;
            const float* src = gd + i * static_cast<size_t>(d);
            for (int j = 0; j < d; ++j) dst[j] += src[j];
        }
        pg[0] = Tensor({n, d}, std::move(gv));
    });
    return out;
}

Tensor scatter_add_rows(Tape* tape, const Tensor& a, const std::vector<int>& idx, int out_rows) {
    require(a.ndim() == 2, "scatter_add_rows: need 2-D, got " + shape_str(a.shape()));
    require(static_cast<size_t>(a.dim(0)) == idx.size(), "scatter_add_rows: row/index count mismatch");
    int d = a.dim(1);
    std::vector<float> v(static_cast<size_t>(out_rows) * d, 0.0f);
    const float* ad = a.data();
    for (size_t i = 0; i < idx.size(); ++i) {
        require(idx[i] >= 0 && idx[i] < out_rows, "scatter_add_rows: index out of range");
        float* dst = v.data() + static_cast<int64_t>(idx[i]) * d;
        const float* src = ad + i * static_cast<size_t>(d);
        for (int j = 0; j < d; ++j) dst[j] += src[j];
    }
    Tensor out({out_rows, d}, std::move(v));
    maybe_record(tape, out, {&a}, [idx, d](const Tensor& g, std::vector<Tensor>& pg) {
        std::vector<float> gv(idx.size() * static_cast<size_t>(d));
        const float* gd = g.data();
        for (size_t i = 0; i < idx.size(); ++i)
            std::memcpy(gv.data() + i * static_cast<size_t>(d),
                        gd + static_cast<int64_t>(idx[i]) * d, sizeof(float) * static_cast<size_t>(d));
        pg[0] = Tensor({static_cast<int>(idx.size()), d}, std::move(gv));
    });
    return out;
}

Tensor gather_coords(Tape* tape, const Tensor& a, const std::vector<int>& rows,
                     const std::vector<int>& cols) {
    require(a.ndim() == 2, "gather_coords: need 2-D, got " + shape_str(a.shape()));
    require(rows.size() == cols.size(), "gather_coords: rows/cols length mismatch");
    int n = a.dim(0), d = a.dim(1);
    std::vector<float> v(rows.size());
    for (size_t i = 0; i < rows.size(); ++i) {
        require(rows[i] >= 0 && rows[i] < n && cols[i] >= 0 && cols[i] < d,
                "gather_coords: index out of range");
        v[i] = a.at(rows[i], cols[i]);
    }
    Tensor out({static_cast<int>(rows.size())}, std::move(v));
    maybe_record(tape, out, {&a}, [rows, cols, n, d](const Tensor& g, std::vector<Tensor>& pg) {
        std::vector<float> gv(static_cast<size_t>(n) * d, 0.0f);
        const float* gd = g.data();
        for (size_t i = 0; i < rows.size(); ++i)
            gv[static_cast<size_t>(rows[i]) * d + cols[i]] += gd[i];
        pg[0] = Tensor({n, d}, std::move(gv));
    });
    return out;
}

Tensor slice_cols(Tape* tape, const Tensor& a, int start, int len) {
    require(a.ndim() == 2, "slice_cols: need 2-D");
    int n = a.dim(0), d = a.dim(1);
    require(start >= 0 && len >= 0 && start + len <= d, "slice_cols: range out of bounds");
    std::vector<float> v(static_cast<size_t>(n) * len);
    const float* ad = a.data();
    for (int i = 0; i < n; ++i)
        std::memcpy(v.data() + static_cast<int64_t>(i) * len, ad + static_cast<int64_t>(i) * d + start,
                    sizeof(float) * static_cast<size_t>(len));
    Tensor out({n, len}, std::move(v));
    maybe_record(tape, out, {&a}, [start, len, n, d](const Tensor& g, std::vector<Tensor>& pg) {
        std::vector<float> gv(static_cast<size_t>(n) * d, 0.0f);
        const float* gd = g.data();
        for (int i = 0; i < n; ++i)
            std::memcpy(gv.data() + static_cast<int64_t>(i) * d + start, gd + static_cast<int64_t>(i) * len,
                        sizeof(float) * static_cast<size_t>(len));
        pg[0] = Tensor({n, d}, std::move(gv));
    });
    return out;
}

Tensor slice_rows(Tape* tape, const Tensor& a, int start, int len) {
    require(a.ndim() == 2, "slice_rows: need 2-D");
    int n = a.dim(0), d = a.dim(1);
    require(start >= 0 && len >= 0 && start + len <= n, "slice_rows: range out of bounds");
    std::vector<float> v(static_cast<size_t>(len) * d);
    std::memcpy(v.data(), a.data() + static_cast<int64_t>(start) * d, sizeof(float) * v.size());
    Tensor out({len, d}, std::move(v));
    maybe_record(tape, out, {&a}, [start, len, n, d](const Tensor& g, std::vector<Tensor>& pg) {
        std::vector<float> gv(static_cast<size_t>(n) * d, 0.0f);
        std::memcpy(gv.data() + static_cast<int64_t>(start) * d, g.data(),
                    sizeof(float) * static_cast<size_t>(len) * d);
        pg[0] = Tensor({n, d}, std::move(gv));
    });
    return out;
}

Tensor concat_cols(Tape* tape, const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_cols: empty input");
    int n = parts[0].dim(0);
    int total = 0;
    for (const Tensor& t : parts) {
        require(t.ndim() == 2 && t.dim(0) == n, "concat_cols: row mismatch");
        total += t.dim(1);
    }
    std::vector<float> v(static_cast<size_t>(n) * total);
    int off = 0;
    for (const Tensor& t : parts) {
        int d = t.dim(1);
        for (int i = 0; i < n; ++i)
            std::memcpy(v.data() + static_cast<int64_t>(i) * total + off,
                        t.data() + static_cast<int64_t>(i) * d, sizeof(float) * static_cast<size_t>(d));
        off += d;
    }
    Tensor out({n, total}, std::move(v));
    if (tape) {
        // Record against each part via slice-grad.
        std::vector<const Tensor*> ptrs;
        for (const Tensor& t : parts) ptrs.push_back(&t);
        bool any = false;
        for (const Tensor* t : ptrs) any = any || tape->node_index(*t) >= 0;
        if (any) {
            std::vector<int> widths;
            for (const Tensor& t : parts) widths.push_back(t.dim(1));
            std::vector<int> kept;
            std::vector<size_t> kept_pos;
            for (size_t i = 0; i < ptrs.size(); ++i) {
                int idx = tape->node_index(*ptrs[i]);
                if (idx >= 0) {
                    kept.push_back(idx);
                    kept_pos.push_back(i);
                }
            }
            tape->record(out, kept, [widths, kept_pos, n, total](const Tensor& g, std::vector<Tensor>& pg) {
                const float* gd = g.data();
                std::vector<int> offsets(widths.size());
                int o = 0;
                for (size_t i = 0; i < widths.size(); ++i) {
                    offsets[i] = o;
                    o += widths[i];
                }
                for (size_t k = 0; k < kept_pos.size(); ++k) {
                    size_t i = kept_pos[k];
                    int d = widths[i];
                    std::vector<float> gv(static_cast<size_t>(n) * d);
                    for (int rr = 0; rr < n; ++rr)
                        std::memcpy(gv.data() + static_cast<int64_t>(rr) * d,
                                    gd + static_cast<int64_t>(rr) * total + offsets[i],
                                    sizeof(float) * static_cast<size_t>(d));
                    pg[k] = Tensor({n, d}, std::move(gv));
                }
            });
        }
    }
    return out;
}

Tensor concat_rows(Tape* tape, const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_rows: empty input");
    int d = parts[0].dim(1);
    int total = 0;
    for (const Tensor& t : parts) {
        require(t.ndim() == 2 && t.dim(1) == d, "concat_rows: column mismatch");
        total += t.dim(0);
    }
    std::vector<float> v(static_cast<size_t>(total) * d);
    size_t off = 0;
    for (const Tensor& t : parts) {
        std::memcpy(v.data() + off, t.data(), sizeof(float) * static_cast<size_t>(t.numel()));
        off += static_cast<size_t>(t.numel());
    }
    Tensor out({total, d}, std::move(v));
    if (tape) {
        std::vector<int> kept;
        std::vector<size_t> kept_pos;
        std::vector<int> heights;
        for (const Tensor& t : parts) heights.push_back(t.dim(0));
        for (size_t i = 0; i < parts.size(); ++i) {
            int idx = tape->node_index(parts[i]);
            if (idx >= 0) {
                kept.push_back(idx);
                kept_pos.push_back(i);
            }
        }
        if (!kept.empty()) {
            tape->record(out, kept, [heights, kept_pos, d](const Tensor& g, std::vector<Tensor>& pg) {
                std::vector<int> offsets(heights.size());
                int o = 0;
                for (size_t i = 0; i < heights.size(); ++i) {
                    offsets[i] = o;
                    o += heights[i];
                }
                for (size_t k = 0; k < kept_pos.size(); ++k) {
                    const size_t i = kept_pos[k];
                    std::vector<float> gv(static_cast<size_t>(heights[i]) * d);
                    std::memcpy(gv.data(), g.data() + static_cast<int64_t>(offsets[i]) * d,
                                sizeof(float) * gv.size());
                    pg[k] = Tensor({heights[i], d}, std::move(gv));
                }
            });
        }
    }
    return out;
}

Tensor row(Tape* tape, const Tensor& a, int r) {
    require(a.ndim() == 2 && r >= 0 && r < a.dim(0), "row: index out of range");
    int d = a.dim(1);
    std::vector<float> v(static_cast<size_t>(d));
    std::memcpy(v.data(), a.data() + static_cast<int64_t>(r) * d, sizeof(float) * v.size());
    Tensor out({d}, std::move(v));
    maybe_record(tape, out, {&a}, [r, n = a.dim(0), d](const Tensor& g, std::vector<Tensor>& pg) {
        std::vector<float> gv(static_cast<size_t>(n) * d, 0.0f);
        std::memcpy(gv.data() + static_cast<int64_t>(r) * d, g.data(), sizeof(float) * static_cast<size_t>(d));
        pg[0] = Tensor({n, d}, std::move(gv));
    });
    return out;
}

Tensor reshape(Tape* tape, const Tensor& a, Shape shape) {
    require(checked_numel(shape) == a.numel(), "reshape: element count mismatch");
    Tensor out(shape, a.values());
    maybe_record(tape, out, {&a}, [sh = a.shape()](const Tensor& g, std::vector<Tensor>& pg) {
        pg[0] = Tensor(sh, g.values());
    });
    return out;
}

// ---- fused attention ---------------------------------------------------------

Tensor causal_attention(Tape* tape, const Tensor& q, const Tensor& k, const Tensor& v,
                        int n_heads, int batch, int seq_len) {
    require(q.ndim() == 2 && q.same_shape(k) && q.same_shape(v), "causal_attention: q/k/v shapes");
    const int rows = q.dim(0);
    const int d = q.dim(1);
    require(rows == batch * seq_len, "causal_attention: rows != batch * seq_len");
    require(n_heads > 0 && d % n_heads == 0, "causal_attention: head split");
    const int hd = d / n_heads;
    const float inv_sqrt_hd = 1.0f / std::sqrt(static_cast<float>(hd));

    // attention probabilities kept for the backward pass: [batch*heads*L*L]
    auto att = std::make_shared<std::vector<float>>(
        static_cast<size_t>(batch) * n_heads * seq_len * seq_len);
    std::vector<float> out(static_cast<size_t>(rows) * d, 0.0f);

    const float* qd = q.data();
    const float* kd = k.data();
    const float* vd = v.data();
    for (int b = 0; b < batch; ++b) {
        const int base = b * seq_len;
        for (int h = 0; h < n_heads; ++h) {
            const int off = h * hd;
            float* att_bh =
                att->data() + (static_cast<size_t>(b) * n_heads + h) * seq_len * seq_len;
            for (int i = 0; i < seq_len; ++i) {
                const float* qi = qd + static_cast<int64_t>(base + i) * d + off;
                float* arow = att_bh + static_cast<int64_t>(i) * seq_len;
                float mx = -1e30f;
                for (int j = 0; j <= i; ++j) {
                    const float* kj = kd + static_cast<int64_t>(base + j) * d + off;
                    float s = 0.0f;
                    for (int c = 0; c < hd; ++c) s += qi[c] * kj[c];
                    s *= inv_sqrt_hd;
                    arow[j] = s;
                    mx = std::max(mx, s);
                }
                double denom = 0.0;
                for (int j = 0; j <= i; ++j) {
                    arow[j] = std::exp(arow[j] - mx);
                    denom += arow[j];
                }
                const float inv = static_cast<float>(1.0 / denom);
                float* orow = out.data() + static_cast<int64_t>(base + i) * d + off;
                for (int j = 0; j <= i; ++j) {
                    arow[j] *= inv;
                    const float* vj = vd + static_cast<int64_t>(base + j) * d + off;
                    const float a = arow[j];
                    for (int c = 0; c < hd; ++c) orow[c] += a * vj[c];
                }
                for (int j = i + 1; j < seq_len; ++j) arow[j] = 0.0f;
            }
        }
    }
    Tensor result({rows, d}, std::move(out));
    maybe_record(tape, result, {&q, &k, &v},
                 [q, k, v, att, n_heads, batch, seq_len, hd, inv_sqrt_hd, d](
                     const Tensor& g, std::vector<Tensor>& pg) {
                     const int rows2 = batch * seq_len;
                     std::vector<float> gq(static_cast<size_t>(rows2) * d, 0.0f);
                     std::vector<float> gk(static_cast<size_t>(rows2) * d, 0.0f);
                     std::vector<float> gv(static_cast<size_t>(rows2) * d, 0.0f);
                     const float* gd = g.data();
                     const float* qd2 = q.data();
                     const float* kd2 = k.data();
                     const float* vd2 = v.data();
                     std::vector<float> datt(static_cast<size_t>(seq_len) * seq_len);
                     for (int b = 0; b < batch; ++b) {
                         const int base = b * seq_len;
                         for (int h = 0; h < n_heads; ++h) {
                             const int off = h * hd;
                             const float* att_bh = att->data() +
                                 (static_cast<size_t>(b) * n_heads + h) * seq_len * seq_len;
                             // dV[j] += att[i][j] * g[i]; datt[i][j] = g[i] . v[j]
                             for (int i = 0; i < seq_len; ++i) {
                                 const float* gi = gd + static_cast<int64_t>(base + i) * d + off;
                                 const float* arow = att_bh + static_cast<int64_t>(i) * seq_len;
                                 float* drow = datt.data() + static_cast<int64_t>(i) * seq_len;
                                 for (int j = 0; j <= i; ++j) {
                                     const float* vj = vd2 + static_cast<int64_t>(base + j) * d + off;
                                     float* gvj = gv.data() + static_cast<int64_t>(base + j) * d + off;
                                     const float a = arow[j];
                                     float dot = 0.0f;
                                     for (int c = 0; c < hd; ++c) {
                                         gvj[c] += a * gi[c];
                                         dot += gi[c] * vj[c];
                                     }
                                     drow[j] = dot;
                                 }
                             }
                             // softmax backward then q/k grads
                             for (int i = 0; i < seq_len; ++i) {
                                 const float* arow = att_bh + static_cast<int64_t>(i) * seq_len;
                                 float* drow = datt.data() + static_cast<int64_t>(i) * seq_len;
                                 double dot = 0.0;
                                 for (int j = 0; j <= i; ++j) dot += static_cast<double>(drow[j]) * arow[j];
                                 const float* qi = qd2 + static_cast<int64_t>(base + i) * d + off;
                                 float* gqi = gq.data() + static_cast<int64_t>(base + i) * d + off;
                                 for (int j = 0; j <= i; ++j) {
                                     const float ds =
                                         arow[j] * (drow[j] - static_cast<float>(dot)) * inv_sqrt_hd;
                                     if (ds == 0.0f) continue;
                                     const float* kj = kd2 + static_cast<int64_t>(base + j) * d + off;
                                     float* gkj = gk.data() + static_cast<int64_t>(base + j) * d + off;
                                     for (int c = 0; c < hd; ++c) {
                                         gqi[c] += ds * kj[c];
                                         gkj[c] += ds * qi[c];
                                     }
                                 }
                             }
                         }
                     }
                     pg[0] = Tensor({rows2, d}, std::move(gq));
                     pg[1] = Tensor({rows2, d}, std::move(gk));
                     pg[2] = Tensor({rows2, d}, std::move(gv));
                 });
    return result;
}

Tensor causal_attention_suffix_packed(Tape* tape, const Tensor& q, const Tensor& k, const Tensor& v,
                                      const std::vector<Tensor>& k_pre,
                                      const std::vector<Tensor>& v_pre,
                                      const std::vector<int>& offsets,
                                      const std::vector<int>& row_start, int n_heads) {
    require(q.ndim() == 2 && q.same_shape(k) && q.same_shape(v), "attention_suffix: q/k/v shapes");
    const int rows = q.dim(0);
    const int d = q.dim(1);
    const size_t blocks = offsets.size();
    require(k_pre.size() == blocks && v_pre.size() == blocks && row_start.size() == blocks + 1,
            "attention_suffix: block bookkeeping mismatch");
    require(row_start.front() == 0 && row_start.back() == rows,
            "attention_suffix: row ranges must cover the packed rows");
    require(n_heads > 0 && d % n_heads == 0, "attention_suffix: head split");
    for (size_t p = 0; p < blocks; ++p) {
        require(k_pre[p].ndim() == 2 && k_pre[p].dim(0) == offsets[p] && k_pre[p].dim(1) == d,
                "attention_suffix: prefix key shape");
        require(v_pre[p].same_shape(k_pre[p]), "attention_suffix: prefix value shape");
    }
    const int hd = d / n_heads;
    const float inv_sqrt_hd = 1.0f / std::sqrt(static_cast<float>(hd));

    // per block: attention probabilities over [prefix | dynamic] keys
    std::vector<size_t> att_off(blocks + 1, 0);
    for (size_t p = 0; p < blocks; ++p) {
        const int brows = row_start[p + 1] - row_start[p];
        att_off[p + 1] = att_off[p] + static_cast<size_t>(n_heads) * brows * (offsets[p] + brows);
    }
    auto att = std::make_shared<std::vector<float>>(att_off.back());
    std::vector<float> out(static_cast<size_t>(rows) * d, 0.0f);
    const float* qd = q.data();
    const float* kd = k.data();
    const float* vd = v.data();

    for (size_t p = 0; p < blocks; ++p) {
        const int r0 = row_start[p];
        const int brows = row_start[p + 1] - r0;
        const int offset = offsets[p];
        const int total = offset + brows;
        const float* kp = k_pre[p].data();
        const float* vp = v_pre[p].data();
        auto key_at = [&](int j, int off) {
            return j < offset ? kp + static_cast<int64_t>(j) * d + off
                              : kd + static_cast<int64_t>(r0 + j - offset) * d + off;
        };
        auto val_at = [&](int j, int off) {
            return j < offset ? vp + static_cast<int64_t>(j) * d + off
                              : vd + static_cast<int64_t>(r0 + j - offset) * d + off;
        };
        for (int h = 0; h < n_heads; ++h) {
            const int off = h * hd;
            float* att_h = att->data() + att_off[p] + static_cast<size_t>(h) * brows * total;
            for (int i = 0; i < brows; ++i) {
                const int global_i = offset + i;
                const float* qi = qd + static_cast<int64_t>(r0 + i) * d + off;
                float* arow = att_h + static_cast<int64_t>(i) * total;
                float mx = -1e30f;
                for (int j = 0; j <= global_i; ++j) {
                    const float* kj = key_at(j, off);
                    float s = 0.0f;
                    for (int c = 0; c < hd; ++c) s += qi[c] * kj[c];
                    s *= inv_sqrt_hd;
                    arow[j] = s;
                    mx = std::max(mx, s);
                }
                double denom = 0.0;
                for (int j = 0; j <= global_i; ++j) {
                    arow[j] = std::exp(arow[j] - mx);
                    denom += arow[j];
                }
                const float inv = static_cast<float>(1.0 / denom);
                float* orow = out.data() + static_cast<int64_t>(r0 + i) * d + off;
                for (int j = 0; j <= global_i; ++j) {
                    arow[j] *= inv;
                    const float* vj = val_at(j, off);
                    const float a = arow[j];
                    for (int c = 0; c < hd; ++c) orow[c] += a * vj[c];
                }
                for (int j = global_i + 1; j < total; ++j) arow[j] = 0.0f;
            }
        }
    }
    Tensor result({rows, d}, std::move(out));
    maybe_record(
        tape, result, {&q, &k, &v},
        [q, k, v, k_pre, v_pre, att, att_off, offsets, row_start, n_heads, hd, inv_sqrt_hd, d,
         rows](const Tensor& g, std::vector<Tensor>& pg) {
            std::vector<float> gq(static_cast<size_t>(rows) * d, 0.0f);
            std::vector<float> gk(static_cast<size_t>(rows) * d, 0.0f);
            std::vector<float> gv(static_cast<size_t>(rows) * d, 0.0f);
            const float* gd = g.data();
            const float* qd2 = q.data();
            const float* kd2 = k.data();
            const float* vd2 = v.data();
            for (size_t p = 0; p < offsets.size(); ++p) {
                const int r0 = row_start[p];
                const int brows = row_start[p + 1] - r0;
                const int offset = offsets[p];
                const int total = offset + brows;
                const float* kp2 = k_pre[p].data();
                const float* vp2 = v_pre[p].data();
                auto key_at2 = [&](int j, int off) {
                    return j < offset ? kp2 + static_cast<int64_t>(j) * d + off
                                      : kd2 + static_cast<int64_t>(r0 + j - offset) * d + off;
                };
                auto val_at2 = [&](int j, int off) {
                    return j < offset ? vp2 + static_cast<int64_t>(j) * d + off
                                      : vd2 + static_cast<int64_t>(r0 + j - offset) * d + off;
                };
                std::vector<float> datt(static_cast<size_t>(total));
                for (int h = 0; h < n_heads; ++h) {
                    const int off = h * hd;
                    const float* att_h =
                        att->data() + att_off[p] + static_cast<size_t>(h) * brows * total;
                    for (int i = 0; i < brows; ++i) {
                        const int global_i = offset + i;
                        const float* gi = gd + static_cast<int64_t>(r0 + i) * d + off;
                        const float* arow = att_h + static_cast<int64_t>(i) * total;
                        for (int j = 0; j <= global_i; ++j) {
                            const float a = arow[j];
                            const float* vj = val_at2(j, off);
                            float dot = 0.0f;
                            for (int c = 0; c < hd; ++c) dot += gi[c] * vj[c];
                            datt[static_cast<size_t>(j)] = dot;
                            if (j >= offset && a != 0.0f) {
                                float* gvj =
                                    gv.data() + static_cast<int64_t>(r0 + j - offset) * d + off;
                                for (int c = 0; c < hd; ++c) gvj[c] += a * gi[c];
                            }
                        }
                        double dsum = 0.0;
                        for (int j = 0; j <= global_i; ++j)
                            dsum += static_cast<double>(datt[static_cast<size_t>(j)]) * arow[j];
                        const float* qi = qd2 + static_cast<int64_t>(r0 + i) * d + off;
                        float* gqi = gq.data() + static_cast<int64_t>(r0 + i) * d + off;
                        for (int j = 0; j <= global_i; ++j) {
                            const float ds =
                                arow[j] * (datt[static_cast<size_t>(j)] - static_cast<float>(dsum)) *
                                inv_sqrt_hd;
                            if (ds == 0.0f) continue;
                            const float* kj = key_at2(j, off);
                            for (int c = 0; c < hd; ++c) gqi[c] += ds * kj[c];
                            if (j >= offset) {
                                float* gkj =
                                    gk.data() + static_cast<int64_t>(r0 + j - offset) * d + off;
                                for (int c = 0; c < hd; ++c) gkj[c] += ds * qi[c];
                            }
                        }
                    }
                }
            }
            pg[0] = Tensor({rows, d}, std::move(gq));
            pg[1] = Tensor({rows, d}, std::move(gk));
            pg[2] = Tensor({rows, d}, std::move(gv));
        });
    return result;
}

Tensor causal_attention_suffix(Tape* tape, const Tensor& q, const Tensor& k, const Tensor& v,
                               const Tensor& k_pre, const Tensor& v_pre, int n_heads, int offset) {
    return causal_attention_suffix_packed(tape, q, k, v, {k_pre}, {v_pre}, {offset},
                                          {0, q.dim(0)}, n_heads);
}

// ---- losses ------------------------------------------------------------------

Tensor cross_entropy_masked(Tape* tape, const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<float>& weights) {
    require(logits.ndim() == 2, "cross_entropy: logits must be 2-D");
    const int n = logits.dim(0);
    require(targets.size() == static_cast<size_t>(n) && weights.size() == static_cast<size_t>(n),
            "cross_entropy: targets/weights length mismatch");
    Tensor ls = log_softmax_rows(tape, logits);
    // pick -log p[target] weighted
    std::vector<int> rows, cols;
    std::vector<float> w;
    double wsum = 0.0;
    for (int i = 0; i < n; ++i) {
        if (weights[static_cast<size_t>(i)] == 0.0f) continue;
        rows.push_back(i);
        cols.push_back(targets[static_cast<size_t>(i)]);
        w.push_back(weights[static_cast<size_t>(i)]);
        wsum += weights[static_cast<size_t>(i)];
    }
    require(wsum > 0.0, "cross_entropy: no active positions");
    Tensor picked = gather_coords(tape, ls, rows, cols);
    const int active = static_cast<int>(w.size());
    Tensor wt({active}, std::move(w));
    Tensor weighted = mul(tape, picked, wt);
    Tensor s = sum(tape, weighted);
    return scale(tape, s, static_cast<float>(-1.0 / wsum));
}

Tensor kl_divergence(Tape* tape, const Tensor& p, const Tensor& q) {
    require(p.ndim() == 1 && q.ndim() == 1 && p.dim(0) == q.dim(0),
            "kl_divergence: need matching 1-D distributions");
    const int d = p.dim(0);
    constexpr float kEps = 1e-12f;
    double acc = 0.0;
    const float* pd = p.data();
    const float* qd = q.data();
    for (int i = 0; i < d; ++i) {
        const double pi = std::max(pd[i], kEps);
        const double qi = std::max(qd[i], kEps);
        acc += pi * (std::log(pi) - std::log(qi));
    }
    Tensor out = Tensor::scalar(static_cast<float>(acc));
    maybe_record(tape, out, {&p, &q}, [p, q, d](const Tensor& g, std::vector<Tensor>& pg) {
        const float gs = g.item();
        std::vector<float> gp(static_cast<size_t>(d)), gq(static_cast<size_t>(d));
        const float* pd2 = p.data();
        const float* qd2 = q.data();
        for (int i = 0; i < d; ++i) {
            const double pi = std::max(pd2[i], 1e-12f);
            const double qi = std::max(qd2[i], 1e-12f);
            gp[static_cast<size_t>(i)] = gs * static_cast<float>(std::log(pi) - std::log(qi) + 1.0);
            gq[static_cast<size_t>(i)] = qd2[i] <= 1e-12f ? 0.0f : gs * static_cast<float>(-pi / qi);
        }
        pg[0] = Tensor({d}, std::move(gp));
        pg[1] = Tensor({d}, std::move(gq));
    });
    return out;
}

// ---- optimizer -----------------------------------------------------------------

void adamw_step(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, int64_t t,
                const AdamWConfig& cfg) {
    require(param.same_shape(grad), "adamw_step: param/grad shape mismatch");
    if (m.numel() != param.numel()) m = Tensor::zeros(param.shape());
    if (v.numel() != param.numel()) v = Tensor::zeros(param.shape());
    const size_t n = static_cast<size_t>(param.numel());
    std::vector<float> pm(param.values()), mm(m.values()), vv(v.values());
    const float* g = grad.data();
    const double bc1 = 1.0 - std::pow(static_cast<double>(cfg.beta1), static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(static_cast<double>(cfg.beta2), static_cast<double>(t));
    for (size_t i = 0; i < n; ++i) {
        mm[i] = cfg.beta1 * mm[i] + (1.0f - cfg.beta1) * g[i];
        vv[i] = cfg.beta2 * vv[i] + (1.0f - cfg.beta2) * g[i] * g[i];
        const double mhat = mm[i] / bc1;
        const double vhat = vv[i] / bc2;
        double upd = mhat / (std::sqrt(vhat) + cfg.eps);
        upd += static_cast<double>(cfg.weight_decay) * pm[i];  // decoupled decay
        pm[i] -= static_cast<float>(cfg.lr * upd);
    }
    param = Tensor(param.shape(), std::move(pm));
    m = Tensor(m.shape(), std::move(mm));
    v = Tensor(v.shape(), std::move(vv));
}

void AdamW::step(std::vector<Tensor*> params, const std::vector<const Tensor*>& grads, float lr_override) {
    require(params.size() == grads.size(), "AdamW: params/grads size mismatch");
    if (m_.size() != params.size()) {
        m_.assign(params.size(), Tensor());
        v_.assign(params.size(), Tensor());
    }
    ++t_;
    AdamWConfig cfg = cfg_;
    if (lr_override >= 0.0f) cfg.lr = lr_override;
    for (size_t i = 0; i < params.size(); ++i)
        adamw_step(*params[i], *grads[i], m_[i], v_[i], t_, cfg);
}

// ---- linear algebra --------------------------------------------------------------

namespace {
// Cholesky factorization in double; returns false and smallest pivot on failure.
bool cholesky(std::vector<double>& a, int n, double& min_piv, double& max_piv) {
    min_piv = 1e300;
    max_piv = 0.0;
    for (int j = 0; j < n; ++j) {
        double d = a[static_cast<size_t>(j) * n + j];
        for (int k = 0; k < j; ++k) {
            const double l = a[static_cast<size_t>(j) * n + k];
            d -= l * l;
        }
        if (!(d > 0.0)) {
            min_piv = d;
            return false;
        }
        min_piv = std::min(min_piv, d);
        max_piv = std::max(max_piv, d);
        const double lj = std::sqrt(d);
        a[static_cast<size_t>(j) * n + j] = lj;
        for (int i = j + 1; i < n; ++i) {
            double s = a[static_cast<size_t>(i) * n + j];
            for (int k = 0; k < j; ++k)
                s -= a[static_cast<size_t>(i) * n + k] * a[static_cast<size_t>(j) * n + k];
            a[static_cast<size_t>(i) * n + j] = s / lj;
        }
    }
    return true;
}
}  // namespace

Tensor solve_spd(const Tensor& c, const Tensor& v) {
    require(c.ndim() == 2 && c.dim(0) == c.dim(1), "solve_spd: c must be square");
    const int n = c.dim(0);
    require(v.ndim() == 1 && v.dim(0) == n, "solve_spd: rhs length mismatch");
    std::vector<double> a(static_cast<size_t>(n) * n);
    const float* cd = c.data();
    for (size_t i = 0; i < a.size(); ++i) a[i] = cd[i];
    double min_piv = 0.0, max_piv = 0.0;
    if (!cholesky(a, n, min_piv, max_piv)) {
        std::ostringstream ss;
        ss << "solve_spd: matrix not positive definite (failing pivot " << min_piv
           << ", largest pivot " << max_piv << ", condition >= "
           << (min_piv > 0 ? max_piv / min_piv : std::numeric_limits<double>::infinity()) << ")";
        throw NumericError(ss.str());
    }
    // L y = v, L^T x = y
    std::vector<double> y(static_cast<size_t>(n));
    const float* vd = v.data();
    for (int i = 0; i < n; ++i) {
        double s = vd[i];
        for (int k = 0; k < i; ++k) s -= a[static_cast<size_t>(i) * n + k] * y[static_cast<size_t>(k)];
        y[static_cast<size_t>(i)] = s / a[static_cast<size_t>(i) * n + i];
    }
    std::vector<float> x(static_cast<size_t>(n));
    std::vector<double> xd(static_cast<size_t>(n));
    for (int i = n - 1; i >= 0; --i) {
        double s = y[static_cast<size_t>(i)];
        for (int k = i + 1; k < n; ++k) s -= a[static_cast<size_t>(k) * n + i] * xd[static_cast<size_t>(k)];
        xd[static_cast<size_t>(i)] = s / a[static_cast<size_t>(i) * n + i];
        x[static_cast<size_t>(i)] = static_cast<float>(xd[static_cast<size_t>(i)]);
    }
    return Tensor({n}, std::move(x));
}

namespace {
// Cyclic Jacobi diagonalization in place; diagonal holds eigenvalues on exit.
void jacobi_eigen(std::vector<double>& a, int n) {
    auto at = [&](int i, int j) -> double& { return a[static_cast<size_t>(i) * n + j]; };
    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) off += at(i, j) * at(i, j);
        if (off < 1e-32 * n * n) break;
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                const double apq = at(p, q);
                if (std::abs(apq) < 1e-300) continue;
                const double theta = (at(q, q) - at(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double cth = 1.0 / std::sqrt(t * t + 1.0);
                const double sth = t * cth;
                for (int k = 0; k < n; ++k) {
                    const double akp = at(k, p), akq = at(k, q);
                    at(k, p) = cth * akp - sth * akq;
                    at(k, q) = sth * akp + cth * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = at(p, k), aqk = at(q, k);
                    at(p, k) = cth * apk - sth * aqk;
                    at(q, k) = sth * apk + cth * aqk;
                }
            }
        }
    }
}
}  // namespace

std::vector<double> sym_eigenvalues(const Tensor& c) {
    require(c.ndim() == 2 && c.dim(0) == c.dim(1), "sym_eigenvalues: need square matrix");
    const int n = c.dim(0);
    std::vector<double> a(static_cast<size_t>(n) * n);
    const float* cd = c.data();
    for (size_t i = 0; i < a.size(); ++i) a[i] = cd[i];
    jacobi_eigen(a, n);
    std::vector<double> eig(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) eig[static_cast<size_t>(i)] = a[static_cast<size_t>(i) * n + i];
    std::sort(eig.begin(), eig.end());
    return eig;
}

std::vector<double> singular_values(const Tensor& a) {
    require(a.ndim() == 2, "singular_values: need 2-D");
    const int p = a.dim(0), q = a.dim(1);
    // Gram matrix of the smaller side in double, then sqrt of its eigenvalues.
    const int n = std::min(p, q);
    std::vector<double> gram(static_cast<size_t>(n) * n, 0.0);
    const float* ad = a.data();
    if (q <= p) {
        for (int k = 0; k < p; ++k)
            for (int i = 0; i < q; ++i) {
                const double aki = ad[static_cast<size_t>(k) * q + i];
                if (aki == 0.0) continue;
                for (int j = 0; j < q; ++j)
                    gram[static_cast<size_t>(i) * q + j] += aki * ad[static_cast<size_t>(k) * q + j];
            }
    } else {
        for (int i = 0; i < p; ++i)
            for (int j = 0; j < p; ++j) {
                double s = 0.0;
                for (int k = 0; k < q; ++k)
                    s += static_cast<double>(ad[static_cast<size_t>(i) * q + k]) *
                         ad[static_cast<size_t>(j) * q + k];
                gram[static_cast<size_t>(i) * p + j] = s;
            }
    }
    jacobi_eigen(gram, n);
    std::vector<double> sv(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        sv[static_cast<size_t>(i)] = std::sqrt(std::max(0.0, gram[static_cast<size_t>(i) * n + i]));
    std::sort(sv.begin(), sv.end(), std::greater<double>());
    return sv;
}

double global_norm(const std::vector<const Tensor*>& ts) {
    double s = 0.0;
    for (const Tensor* t : ts)
        for (float v : t->values()) s += static_cast<double>(v) * v;
    return std::sqrt(s);
}

float frobenius_norm(const Tensor& a) {
    double s = 0.0;
    for (float v : a.values()) s += static_cast<double>(v) * v;
    return static_cast<float>(std::sqrt(s));
}

float rel_l2_error(const Tensor& got, const Tensor& want) {
    require(got.same_shape(want), "rel_l2_error: shape mismatch");
    double num = 0.0, den = 0.0;
    const float* g = got.data();
    const float* w = want.data();
    for (int64_t i = 0; i < want.numel(); ++i) {
        const double d = static_cast<double>(g[i]) - w[i];
        num += d * d;
        den += static_cast<double>(w[i]) * w[i];
    }
    return static_cast<float>(std::sqrt(num) / std::max(std::sqrt(den), 1e-12));
}

}  // namespace glame::num
