#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "glamelab/num.hpp"
#include "testutil.hpp"

using namespace glame;
using namespace glame::num;
using testutil::check_grad;
using testutil::fd_grad;
using testutil::grad_rel_error;
using testutil::rand_tensor;

TEST_CASE("matmul identity and hand arithmetic") {
    Rng rng(1);
    Tensor m = rand_tensor({3, 3}, rng);
    Tensor im = matmul(nullptr, Tensor::identity(3), m);
    for (int i = 0; i < 9; ++i) CHECK(im.at(i) == m.at(i));

    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor b({2, 1}, {0, 1});
    Tensor c = matmul(nullptr, a, b);
    CHECK(c.at(0) == 2.0f);
    CHECK(c.at(1) == 4.0f);
}

TEST_CASE("matmul shape mismatch throws") {
    Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b({2, 2}, {1, 2, 3, 4});
    CHECK_THROWS_AS(matmul(nullptr, a, b), ShapeError);
}

TEST_CASE("matmul gradient of sum equals ones * b^T, and matches FD") {
    Rng rng(7);
    Tensor a = rand_tensor({5, 7}, rng);
    Tensor b = rand_tensor({7, 3}, rng);

    Tape tape;
    Tensor aw = tape.watch(a);
    Tensor loss = sum(&tape, matmul(&tape, aw, b));
    auto grads = tape.backward(loss);
    Tensor ga = grads.at(aw);

    Tensor expected = matmul_nt(nullptr, Tensor::ones({5, 3}), b);
    CHECK(grad_rel_error(ga, expected) < 1e-6);

    double fd_err = check_grad(
        [&](Tape* t, const Tensor& x) { return sum(t, matmul(t, x, b)); }, a);
    CHECK(fd_err < 1e-3);
}

TEST_CASE("matmul_nt / matmul_tn agree with transpose composition") {
    Rng rng(3);
    Tensor a = rand_tensor({4, 6}, rng);
    Tensor b = rand_tensor({5, 6}, rng);
    Tensor via_nt = matmul_nt(nullptr, a, b);
    Tensor via_plain = matmul(nullptr, a, transpose(b));
    CHECK(grad_rel_error(via_nt, via_plain) < 1e-6);

    Tensor c = rand_tensor({6, 4}, rng);
    Tensor d = rand_tensor({6, 5}, rng);
    Tensor via_tn = matmul_tn(nullptr, c, d);
    Tensor via_plain2 = matmul(nullptr, transpose(c), d);
    CHECK(grad_rel_error(via_tn, via_plain2) < 1e-6);
}

TEST_CASE("solve_spd identity, diagonal, planted solution") {
    Tensor v({3}, {2.0f, -1.0f, 0.5f});
    Tensor x = solve_spd(Tensor::identity(3), v);
    for (int i = 0; i < 3; ++i) CHECK(x.at(i) == doctest::Approx(v.at(i)));

    Tensor c({2, 2}, {2, 0, 0, 4});
    Tensor rhs({2}, {2, 4});
    Tensor sol = solve_spd(c, rhs);
    CHECK(sol.at(0) == doctest::Approx(1.0f));
    CHECK(sol.at(1) == doctest::Approx(1.0f));

    // random SPD 8x8, planted x
    Rng rng(11);
    for (int inst = 0; inst < 5; ++inst) {
        Tensor m = rand_tensor({8, 8}, rng);
        Tensor spd = matmul_nt(nullptr, m, m);  // m m^T, PSD
        std::vector<float> sv = spd.values();
        for (int i = 0; i < 8; ++i) sv[static_cast<size_t>(i) * 8 + i] += 0.5f;
        spd = Tensor({8, 8}, std::move(sv));
        Tensor planted = rand_tensor({8}, rng);
        Tensor b2({8}, std::vector<float>(8));
        {
            std::vector<float> bv(8, 0.0f);
            for (int i = 0; i < 8; ++i) {
                double s = 0;
                for (int j = 0; j < 8; ++j) s += static_cast<double>(spd.at(i, j)) * planted.at(j);
                bv[static_cast<size_t>(i)] = static_cast<float>(s);
            }
            b2 = Tensor({8}, std::move(bv));
        }
        Tensor got = solve_spd(spd, b2);
        CHECK(grad_rel_error(got, planted) < 1e-5);

        // residual ||c x - v|| / ||v||
        double rn = 0, vn = 0;
        for (int i = 0; i < 8; ++i) {
            double s = 0;
            for (int j = 0; j < 8; ++j) s += static_cast<double>(spd.at(i, j)) * got.at(j);
            rn += (s - b2.at(i)) * (s - b2.at(i));
            vn += static_cast<double>(b2.at(i)) * b2.at(i);
        }
        CHECK(std::sqrt(rn / vn) < 1e-5);
    }
}

TEST_CASE("solve_spd rejects indefinite matrix with condition info") {
    Tensor c({2, 2}, {1, 0, 0, -1});
    Tensor v({2}, {1, 1});
    CHECK_THROWS_AS(solve_spd(c, v), NumericError);
}

TEST_CASE("backward of sum is ones; untracked leaves absent") {
    Rng rng(5);
    Tensor x = rand_tensor({4, 3}, rng);
    Tensor other = rand_tensor({4, 3}, rng);
    Tape tape;
    Tensor xw = tape.watch(x);
    Tensor loss = sum(&tape, add(&tape, xw, other));
    auto grads = tape.backward(loss);
    Tensor g = grads.at(xw);
    for (int i = 0; i < 12; ++i) CHECK(g.at(i) == 1.0f);
    CHECK_FALSE(grads.grad(other).has_value());  // absent, not zero-filled
}

TEST_CASE("backward requires scalar loss") {
    Tape tape;
    Tensor x = tape.watch(Tensor::ones({2, 2}));
    Tensor y = scale(&tape, x, 2.0f);
    CHECK_THROWS_AS(tape.backward(y), NumericError);
}

TEST_CASE("relu subgradient at exactly 0 is 0") {
    Tensor x({3}, {-1.0f, 0.0f, 2.0f});
    Tape tape;
    Tensor xw = tape.watch(x);
    Tensor loss = sum(&tape, relu(&tape, xw));
    auto grads = tape.backward(loss);
    Tensor g = grads.at(xw);
    CHECK(g.at(0) == 0.0f);
    CHECK(g.at(1) == 0.0f);
    CHECK(g.at(2) == 1.0f);
}

TEST_CASE("two-layer MLP with softmax cross-entropy matches finite differences") {
    Rng rng(17);
    for (int inst = 0; inst < 3; ++inst) {
        Tensor w1 = rand_tensor({6, 4}, rng, -0.8f, 0.8f);
        Tensor w2 = rand_tensor({5, 6}, rng, -0.8f, 0.8f);
        Tensor x = rand_tensor({2, 4}, rng);
        std::vector<int> targets{1, 3};
        std::vector<float> weights{1.0f, 1.0f};

        auto loss_fn = [&](Tape* t, const Tensor& w1v) {
            Tensor h = relu(t, matmul_nt(t, x, w1v));
            Tensor logits = matmul_nt(t, h, w2);
            return cross_entropy_masked(t, logits, targets, weights);
        };
        CHECK(check_grad(loss_fn, w1) < 1e-3);

        auto loss_fn2 = [&](Tape* t, const Tensor& w2v) {
            Tensor h = relu(t, matmul_nt(t, x, w1));
            Tensor logits = matmul_nt(t, h, w2v);
            return cross_entropy_masked(t, logits, targets, weights);
        };
        CHECK(check_grad(loss_fn2, w2) < 1e-3);
    }
}

TEST_CASE("gradient suite: every differentiable primitive vs central differences") {
    Rng rng(23);
    const int instances = 20;

    for (int inst = 0; inst < instances; ++inst) {
        Tensor a = rand_tensor({3, 4}, rng);
        Tensor b = rand_tensor({3, 4}, rng);
        Tensor brow = rand_tensor({4}, rng);
        Tensor m1 = rand_tensor({3, 5}, rng);
        Tensor gmm = rand_tensor({5}, rng, 0.5f, 1.5f);
        Tensor bt = rand_tensor({5}, rng);
        Tensor rand12 = rand_tensor({4, 3}, rng);

        CHECK(check_grad([&](Tape* t, const Tensor& x) { return sum(t, add(t, x, b)); }, a) < 1e-3);
        CHECK(check_grad([&](Tape* t, const Tensor& x) { return sum(t, add(t, a, x)); }, b) < 1e-3);
        CHECK(check_grad([&](Tape* t, const Tensor& x) { return sum(t, add(t, x, brow)); }, a) < 1e-3);
        CHECK(check_grad([&](Tape* t, const Tensor& x) { return sum(t, mul(t, x, b)); }, a) < 1e-3);
        CHECK(check_grad([&](Tape* t, const Tensor& x) { return sum(t, sub(t, x, b)); }, a) < 1e-3);
        CHECK(check_grad([&](Tape* t, const Tensor& x) { return sum(t, scale(t, x, -2.5f)); }, a) < 1e-3);
        CHECK(check_grad([&](Tape* t, const Tensor& x) { return mean(t, gelu(t, x)); }, a) < 2e-3);
        CHECK(check_grad([&](Tape* t, const Tensor& x) {
                  // keep relu inputs away from the kink for FD validity
                  Tensor shifted = add(t, x, Tensor::full({3, 4}, 0.05f));
                  return sum(t, relu(t, shifted));
              }, a) < 1e-3);
        CHECK(check_grad([&](Tape* t, const Tensor& x) {
                  return sum(t, mul(t, softmax_rows(t, x), b));
              }, a) < 1e-3);
        CHECK(check_grad([&](Tape* t, const Tensor& x) {
                  return sum(t, mul(t, log_softmax_rows(t, x), b));
              }, a) < 1e-3);
        Tensor x35 = rand_tensor({3, 5}, rng);
        CHECK(check_grad([&](Tape* t, const Tensor& x) {
                  return sum(t, mul(t, layernorm_rows(t, x, gmm, bt), m1));
              }, x35) < 2e-3);
        CHECK(check_grad([&](Tape* t, const Tensor& g) {
                  return sum(t, mul(t, layernorm_rows(t, x35, g, bt), m1));
              }, gmm) < 1e-3);
        CHECK(check_grad([&](Tape* t, const Tensor& bb) {
                  return sum(t, mul(t, layernorm_rows(t, x35, gmm, bb), m1));
              }, bt) < 1e-3);
        CHECK(check_grad([&](Tape* t, const Tensor& x) {
                  return sum(t, gather_rows(t, x, {2, 0, 2}));
              }, a) < 1e-3);
        Tensor c24 = rand_tensor({2, 4}, rng);
        CHECK(check_grad([&](Tape* t, const Tensor& x) {
                  return sum(t, mul(t, scatter_add_rows(t, x, {1, 0, 1}, 2), c24));
              }, a) < 1e-3);
        CHECK(check_grad([&](Tape* t, const Tensor& x) {
                  return sum(t, gather_coords(t, x, {0, 1, 2, 0}, {3, 1, 0, 3}));
              }, a) < 1e-3);
        CHECK(check_grad([&](Tape* t, const Tensor& x) {
                  return sum(t, slice_cols(t, x, 1, 2));
              }, a) < 1e-3);
        Tensor c38 = rand_tensor({3, 8}, rng);
        CHECK(check_grad([&](Tape* t, const Tensor& x) {
                  return sum(t, mul(t, concat_cols(t, {x, a}), c38));
              }, b) < 1e-3);
        CHECK(check_grad([&](Tape* t, const Tensor& x) { return sum(t, row(t, x, 1)); }, a) < 1e-3);
        Tensor c64 = rand_tensor({6, 4}, rng);
        CHECK(check_grad([&](Tape* t, const Tensor& x) {
                  return sum(t, mul(t, concat_rows(t, {x, b}), c64));
              }, a) < 1e-3);
        CHECK(check_grad([&](Tape* t, const Tensor& x) {
                  return sum(t, slice_rows(t, x, 1, 2));
              }, a) < 1e-3);
        CHECK(check_grad([&](Tape* t, const Tensor& x) {
                  return sum(t, mul(t, reshape(t, x, {4, 3}), rand12));
              }, a) < 1e-3);
    }
}

TEST_CASE("gradient flows through matmul chains and fanout accumulates") {
    Rng rng(31);
    for (int inst = 0; inst < 20; ++inst) {
        Tensor a = rand_tensor({4, 4}, rng, -0.7f, 0.7f);
        Tensor b = rand_tensor({4, 4}, rng, -0.7f, 0.7f);
        Tensor x0 = rand_tensor({4, 4}, rng, -0.7f, 0.7f);
        // watched tensor fans out into two branches; gradients must accumulate
        auto loss_fn = [&](Tape* t, const Tensor& x) {
            Tensor y = matmul(t, x, b);
            Tensor z = mul(t, x, a);
            return sum(t, add(t, y, z));
        };
        CHECK(check_grad(loss_fn, x0) < 1e-3);
    }
}

TEST_CASE("causal attention equals the composed-primitive reference and passes FD checks") {
    Rng rng(61);
    const int batch = 2, len = 5, heads = 2, d = 8, hd = d / heads;
    for (int inst = 0; inst < 20; ++inst) {
        Tensor q = rand_tensor({batch * len, d}, rng);
        Tensor k = rand_tensor({batch * len, d}, rng);
        Tensor v = rand_tensor({batch * len, d}, rng);

        Tensor fused = causal_attention(nullptr, q, k, v, heads, batch, len);

        // reference: per (batch, head) slices through the generic primitives
        std::vector<float> mask_v(static_cast<size_t>(len) * len, 0.0f);
        for (int i = 0; i < len; ++i)
            for (int j = i + 1; j < len; ++j) mask_v[static_cast<size_t>(i) * len + j] = -1e9f;
        Tensor mask({len, len}, std::move(mask_v));
        const float inv_s = 1.0f / std::sqrt(static_cast<float>(hd));
        for (int b = 0; b < batch; ++b) {
            Tensor qb = slice_rows(nullptr, q, b * len, len);
            Tensor kb = slice_rows(nullptr, k, b * len, len);
            Tensor vb = slice_rows(nullptr, v, b * len, len);
            std::vector<Tensor> heads_out;
            for (int h = 0; h < heads; ++h) {
                Tensor qh = slice_cols(nullptr, qb, h * hd, hd);
                Tensor kh = slice_cols(nullptr, kb, h * hd, hd);
                Tensor vh = slice_cols(nullptr, vb, h * hd, hd);
                Tensor scores = add(nullptr, scale(nullptr, matmul_nt(nullptr, qh, kh), inv_s), mask);
                heads_out.push_back(matmul(nullptr, softmax_rows(nullptr, scores), vh));
            }
            Tensor want = concat_cols(nullptr, heads_out);
            Tensor got = slice_rows(nullptr, fused, b * len, len);
            CHECK(grad_rel_error(got, want) < 1e-5);
        }

        if (inst < 5) {
            Tensor probe = rand_tensor({batch * len, d}, rng);
            auto through = [&](Tape* t, const Tensor& x, int which) {
                Tensor qq = which == 0 ? x : q;
                Tensor kk = which == 1 ? x : k;
                Tensor vv = which == 2 ? x : v;
                return sum(t, mul(t, causal_attention(t, qq, kk, vv, heads, batch, len), probe));
            };
            CHECK(check_grad([&](Tape* t, const Tensor& x) { return through(t, x, 0); }, q) < 2e-3);
            CHECK(check_grad([&](Tape* t, const Tensor& x) { return through(t, x, 1); }, k) < 2e-3);
            CHECK(check_grad([&](Tape* t, const Tensor& x) { return through(t, x, 2); }, v) < 2e-3);
        }
    }
}

TEST_CASE("softmax rows sum to one and are nonnegative") {
    Rng rng(41);
    for (int inst = 0; inst < 20; ++inst) {
        Tensor x = rand_tensor({4, 9}, rng, -8.0f, 8.0f);
        Tensor s = softmax_rows(nullptr, x);
        for (int i = 0; i < 4; ++i) {
            double rowsum = 0.0;
            for (int j = 0; j < 9; ++j) {
                CHECK(s.at(i, j) >= 0.0f);
                rowsum += s.at(i, j);
            }
            CHECK(std::abs(rowsum - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("kl divergence: zero at identity, nonnegative on random pairs") {
    Rng rng(43);
    for (int inst = 0; inst < 20; ++inst) {
        Tensor logits = rand_tensor({7}, rng, -4.0f, 4.0f);
        Tensor p = softmax_rows(nullptr, logits);
        CHECK(std::abs(kl_divergence(nullptr, p, p).item()) < 1e-6);

        Tensor q = softmax_rows(nullptr, rand_tensor({7}, rng, -4.0f, 4.0f));
        CHECK(kl_divergence(nullptr, p, q).item() >= -1e-7f);
    }
}

TEST_CASE("kl divergence gradient matches finite differences (via softmax)") {
    Rng rng(47);
    for (int inst = 0; inst < 5; ++inst) {
        Tensor lp = rand_tensor({6}, rng, -2.0f, 2.0f);
        Tensor lq = rand_tensor({6}, rng, -2.0f, 2.0f);
        auto loss_fn = [&](Tape* t, const Tensor& x) {
            Tensor p = softmax_rows(t, x);
            Tensor q = softmax_rows(t, lq);
            return kl_divergence(t, p, q);
        };
        CHECK(check_grad(loss_fn, lp) < 1e-3);
    }
}

TEST_CASE("adamw_step matches a hand-rolled reference update") {
    AdamWConfig cfg;
    cfg.lr = 0.1f;
    cfg.beta1 = 0.9f;
    cfg.beta2 = 0.999f;
    cfg.eps = 1e-8f;
    cfg.weight_decay = 0.01f;

    Tensor p({2}, {1.0f, -2.0f});
    Tensor g({2}, {0.5f, 0.25f});
    Tensor m, v;
    adamw_step(p, g, m, v, 1, cfg);

    // independent recompute
    for (int i = 0; i < 2; ++i) {
        const double gi = i == 0 ? 0.5 : 0.25;
        const double pi = i == 0 ? 1.0 : -2.0;
        const double mi = 0.1 * gi;
        const double vi = 0.001 * gi * gi;
        const double mhat = mi / (1 - 0.9);
        const double vhat = vi / (1 - 0.999);
        const double want = pi - 0.1 * (mhat / (std::sqrt(vhat) + 1e-8) + 0.01 * pi);
        CHECK(p.at(i) == doctest::Approx(static_cast<float>(want)).epsilon(1e-5));
    }

    // second step keeps moments
    adamw_step(p, g, m, v, 2, cfg);
    CHECK(m.at(0) == doctest::Approx(0.9f * 0.05f + 0.1f * 0.5f));
}

TEST_CASE("sym_eigenvalues and singular_values on known matrices") {
    Tensor d({3, 3}, {3, 0, 0, 0, 1, 0, 0, 0, 2});
    auto eig = sym_eigenvalues(d);
    CHECK(eig[0] == doctest::Approx(1.0));
    CHECK(eig[1] == doctest::Approx(2.0));
    CHECK(eig[2] == doctest::Approx(3.0));

    // rank-one outer product: exactly one nonzero singular value = |u||v|
    Tensor u({3, 1}, {1, 2, 2});
    Tensor vt({1, 4}, {0, 3, 0, 4});
    Tensor outer = matmul(nullptr, u, vt);
    auto sv = singular_values(outer);
    CHECK(sv[0] == doctest::Approx(15.0).epsilon(1e-5));  // 3 * 5
    CHECK(sv[1] < 1e-5 * sv[0]);
}

TEST_CASE("tensors are immutable values; copies share identity") {
    Tensor a({2}, {1, 2});
    Tensor b = a;
    CHECK(a.vid() == b.vid());
    CHECK(a.data() == b.data());
    Tensor c = scale(nullptr, a, 2.0f);
    CHECK(c.vid() != a.vid());
    CHECK(a.at(0) == 1.0f);
}

TEST_CASE("independent tapes over shared tensors") {
    Rng rng(53);
    Tensor x = rand_tensor({3, 3}, rng);
    Tape t1, t2;
    Tensor x1 = t1.watch(x);
    Tensor x2 = t2.watch(x);
    Tensor l1 = sum(&t1, scale(&t1, x1, 2.0f));
    Tensor l2 = sum(&t2, scale(&t2, x2, 3.0f));
    auto g1 = t1.backward(l1);
    auto g2 = t2.backward(l2);
    CHECK(g1.at(x1).at(0) == 2.0f);
    CHECK(g2.at(x2).at(0) == 3.0f);
}
