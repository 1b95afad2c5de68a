#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "care/gradcheck.hpp"
#include "care/optim.hpp"
#include "care/tensor.hpp"

using namespace care;

namespace {

Tensor64 t64(Shape shape, std::vector<double> v) { return Tensor64::from_data(shape, std::move(v)); }

double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
    REQUIRE(a.size() == b.size());
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

}  // namespace

TEST_CASE("matmul identity and hand values") {
    Tensor i2 = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor prod = matmul(i2, i2);
    CHECK(prod.data() == std::vector<float>{1, 0, 0, 1});

    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from_data({2, 1}, {1, 1});
    Tensor c = matmul(a, b);
    CHECK(c.shape() == Shape{2, 1});
    CHECK(c.data() == std::vector<float>{3, 7});
}

TEST_CASE("matmul with zeros: output and gradient vanish") {
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    a.set_requires_grad(true);
    Tensor z = Tensor::zeros({2, 2});
    Tensor c = matmul(a, z);
    for (float v : c.data()) CHECK(v == 0.0f);
    backward(sum_all(c));
    for (float g : a.grad()) CHECK(g == 0.0f);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 2});
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), DimError);
}

TEST_CASE("conv1d delta kernel is identity") {
    Tensor x = Tensor::from_data({4, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    // K=1 identity channel map
    Tensor k = Tensor::from_data({1, 2, 2}, {1, 0, 0, 1});
    Tensor y = conv1d(x, k, 1, Padding::Same);
    CHECK(y.data() == x.data());
}

TEST_CASE("conv1d hand value, valid padding") {
    Tensor x = Tensor::from_data({4, 1}, {1, 2, 3, 4});
    Tensor k = Tensor::from_data({2, 1, 1}, {1, 1});
    Tensor y = conv1d(x, k, 1, Padding::Valid);
    CHECK(y.shape() == Shape{3, 1});
    CHECK(y.data() == std::vector<float>{3, 5, 7});
}

TEST_CASE("conv1d length rules") {
    CHECK(conv1d_out_len(9, 3, 3, Padding::Same) == 3);
    CHECK(conv1d_out_len(10, 3, 3, Padding::Same) == 4);
    CHECK(conv1d_out_len(7, 2, 1, Padding::Valid) == 6);
    CHECK_THROWS_AS(conv1d_out_len(1, 2, 1, Padding::Valid), DimError);
}

TEST_CASE("layer_norm rows") {
    Tensor gain = Tensor::full({2}, 1.0f);
    Tensor bias = Tensor::zeros({2});

    Tensor constant = Tensor::from_data({1, 2}, {5, 5});
    Tensor y = layer_norm(constant, gain, bias, 1e-5f);
    CHECK(std::abs(y.data()[0]) < 1e-4f);
    CHECK(std::abs(y.data()[1]) < 1e-4f);

    Tensor row = Tensor::from_data({1, 2}, {1, 3});
    Tensor y2 = layer_norm(row, gain, bias, 1e-12f);
    CHECK(y2.data()[0] == doctest::Approx(-1.0).epsilon(1e-5));
    CHECK(y2.data()[1] == doctest::Approx(1.0).epsilon(1e-5));

    Tensor zero_gain = Tensor::zeros({2});
    Tensor shift = Tensor::from_data({2}, {3, -2});
    Tensor y3 = layer_norm(row, zero_gain, shift, 1e-5f);
    CHECK(y3.data() == std::vector<float>{3, -2});
}

TEST_CASE("softmax rows: symmetry, hand value, shift invariance, row sums") {
    Tensor u = softmax_rows(Tensor::from_data({1, 3}, {0, 0, 0}));
    for (float v : u.data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-6));

    const float ln3 = std::log(3.0f);
    Tensor h = softmax_rows(Tensor::from_data({1, 2}, {0.0f, ln3}));
    CHECK(h.data()[0] == doctest::Approx(0.25).epsilon(1e-6));
    CHECK(h.data()[1] == doctest::Approx(0.75).epsilon(1e-6));

    Rng rng(7);
    std::vector<float> base(8), shifted(8);
    for (int i = 0; i < 8; ++i) {
        base[i] = float(rng.normal());
        shifted[i] = base[i] + 13.5f;
    }
    Tensor s0 = softmax_rows(Tensor::from_data({2, 4}, base));
    Tensor s1 = softmax_rows(Tensor::from_data({2, 4}, shifted));
    CHECK(max_abs_diff(s0.data(), s1.data()) < 1e-6);
    for (int r = 0; r < 2; ++r) {
        float sum = 0;
        for (int i = 0; i < 4; ++i) sum += s0.data()[r * 4 + i];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("unary maps") {
    Tensor x = Tensor::from_data({3}, {-1, 0, 2});
    CHECK(relu(x).data() == std::vector<float>{0, 0, 2});

    Tensor x2 = Tensor::from_data({2}, {-1, 2});
    x2.set_requires_grad(true);
    backward(sum_all(relu(x2)));
    CHECK(x2.grad() == std::vector<float>{0, 1});

    CHECK(gelu(Tensor::from_data({1}, {0})).item() == 0.0f);
    CHECK_THROWS_AS(unary_kind_from("sigmoid"), ConfigError);
}

TEST_CASE("masked_mean_pool semantics") {
    Tensor single = Tensor::from_data({1, 2}, {4, -1});
    Tensor p1 = masked_mean_pool(single, {1});
    CHECK(p1.data() == std::vector<float>{4, -1});

    Tensor two = Tensor::from_data({2, 2}, {1, 10, 3, 30});
    Tensor p2 = masked_mean_pool(two, {1, 1});
    CHECK(p2.data() == std::vector<float>{2, 20});

    Tensor with_junk = Tensor::from_data({2, 2}, {1, 10, 999, -999});
    Tensor p3 = masked_mean_pool(with_junk, {1, 0});
    CHECK(p3.data() == std::vector<float>{1, 10});

    CHECK_THROWS_AS(masked_mean_pool(two, {0, 0}), InputError);
    CHECK_THROWS_AS(masked_mean_pool(two, {1}), DimError);
}

TEST_CASE("masked pool is exactly invariant to appended masked rows") {
    Rng rng(11);
    std::vector<float> v(6 * 3);
    for (auto& x : v) x = float(rng.normal());
    Tensor a = Tensor::from_data({6, 3}, v);
    std::vector<std::uint8_t> mask = {1, 0, 1, 1, 0, 1};

    std::vector<float> padded = v;
    for (int i = 0; i < 9; ++i) padded.push_back(123.0f);
    Tensor b = Tensor::from_data({9, 3}, padded);
    std::vector<std::uint8_t> mask_b = mask;
    mask_b.insert(mask_b.end(), {0, 0, 0});

    CHECK(masked_mean_pool(a, mask).data() == masked_mean_pool(b, mask_b).data());
}

TEST_CASE("backward: hand gradient, detachment, additive accumulation") {
    Tensor x = Tensor::from_data({2}, {1, -2});
    x.set_requires_grad(true);
    Tensor loss = sum_all(mul(x, x));
    backward(loss);
    CHECK(x.grad() == std::vector<float>{2, -4});

    // detached: loss not built from x
    Tensor y = Tensor::from_data({2}, {5, 5});
    y.set_requires_grad(true);
    backward(loss);  // second call on same graph doubles x's grad, leaves y at zero
    CHECK(x.grad() == std::vector<float>{4, -8});
    CHECK(y.grad() == std::vector<float>{0, 0});

    CHECK_THROWS_AS(backward(mul(x, x)), ContractError);
}

TEST_CASE("interior nodes with requires_grad accumulate too") {
    Tensor x = Tensor::from_data({2}, {3, 4});
    x.set_requires_grad(true);
    Tensor mid = mul(x, x);
    CHECK(mid.requires_grad());
    backward(sum_all(mid));
    CHECK(mid.grad() == std::vector<float>{1, 1});
}

TEST_CASE("adamw hand steps") {
    // g=1, theta=0, lr=0.1: bias correction makes mhat = vhat = 1 at t=1
    Tensor64 p = Tensor64::from_data({1}, {0.0});
    p.set_requires_grad(true);
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.0;
    AdamW<double> opt({p}, cfg);
    p.grad()[0] = 1.0;
    opt.step();
    CHECK(p.data()[0] == doctest::Approx(-0.1).epsilon(1e-7));
    CHECK(opt.step_count() == 1);

    // zero gradient, zero decay: parameter untouched, t advances
    Tensor64 q = Tensor64::from_data({1}, {0.7});
    q.set_requires_grad(true);
    AdamW<double> opt2({q}, cfg);
    opt2.step();
    CHECK(q.data()[0] == 0.7);
    CHECK(opt2.step_count() == 1);

    // zero gradient with decoupled decay: theta scaled by (1 - lr*wd)
    Tensor64 r = Tensor64::from_data({1}, {2.0});
    r.set_requires_grad(true);
    AdamWConfig wdcfg = cfg;
    wdcfg.weight_decay = 0.1;
    AdamW<double> opt3({r}, wdcfg);
    opt3.step();
    CHECK(r.data()[0] == doctest::Approx(2.0 * (1.0 - 0.01)).epsilon(1e-12));
}

TEST_CASE("adamw with wd=0 matches a hand-coded Adam oracle to 1e-12") {
    AdamWConfig cfg;
    cfg.lr = 0.05;
    cfg.weight_decay = 0.0;
    Tensor64 p = Tensor64::from_data({1}, {0.3});
    p.set_requires_grad(true);
    AdamW<double> opt({p}, cfg);

    // independent scalar Adam
    double theta = 0.3, m = 0, v = 0;
    Rng rng(99);
    for (int t = 1; t <= 25; ++t) {
        const double g = rng.normal();
        p.grad()[0] = g;
        opt.step();
        m = cfg.beta1 * m + (1 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g;
        const double mhat = m / (1 - std::pow(cfg.beta1, t));
        const double vhat = v / (1 - std::pow(cfg.beta2, t));
        theta -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        p.zero_grad();
    }
    CHECK(std::abs(p.data()[0] - theta) < 1e-12);
}

TEST_CASE("adamw rejects non-finite gradients without mutating state") {
    Tensor64 p = Tensor64::from_data({2}, {1.0, 2.0});
    p.set_requires_grad(true);
    AdamW<double> opt({p}, AdamWConfig{});
    p.grad()[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(opt.step(), NonFiniteError);
    CHECK(p.data() == std::vector<double>{1.0, 2.0});
    CHECK(opt.step_count() == 0);
}

TEST_CASE("finite differences: polynomial exactness") {
    Tensor64 x = t64({3}, {0.5, -1.25, 2.0});
    auto f = [](Tensor64& v) { return sum_all(mul(v, v)); };
    CHECK(finite_diff_check<double>(f, x, 1e-5) < 1e-8);
}

TEST_CASE("finite differences: large h degrades gracefully") {
    Tensor64 x = t64({2}, {0.3, -0.7});
    auto f = [](Tensor64& v) { return sum_all(mul(mul(v, v), v)); };  // cubic: fd error ~ h^2
    const double tight = finite_diff_check<double>(f, x, 1e-5);
    const double loose = finite_diff_check<double>(f, x, 0.5);
    CHECK(tight < 1e-8);
    CHECK(loose > tight);   // truncation error, not an op failure
    CHECK(loose < 1.0);
}

TEST_CASE("gradcheck every primitive in double precision") {
    Rng rng(1234);
    auto randvec = [&](std::size_t n) {
        std::vector<double> v(n);
        for (auto& x : v) x = rng.normal() * 0.8;
        return v;
    };

    SUBCASE("matmul") {
        Tensor64 x = t64({3, 4}, randvec(12));
        Tensor64 w = t64({4, 2}, randvec(8));
        auto f = [&](Tensor64& v) { return sum_all(mul(matmul(v, w), matmul(v, w))); };
        CHECK(finite_diff_check<double>(f, x, 1e-6) < 1e-7);
        auto fw = [&](Tensor64& v) { return sum_all(mul(matmul(x, v), matmul(x, v))); };
        CHECK(finite_diff_check<double>(fw, w, 1e-6) < 1e-7);
    }
    SUBCASE("conv1d same and valid, both args") {
        Tensor64 x = t64({7, 3}, randvec(21));
        Tensor64 k = t64({3, 3, 2}, randvec(18));
        for (Padding pad : {Padding::Same, Padding::Valid}) {
            auto fx = [&](Tensor64& v) {
                Tensor64 y = conv1d(v, k, 2, pad);
                return sum_all(mul(y, y));
            };
            CHECK(finite_diff_check<double>(fx, x, 1e-6) < 1e-7);
            auto fk = [&](Tensor64& v) {
                Tensor64 y = conv1d(x, v, 2, pad);
                return sum_all(mul(y, y));
            };
            CHECK(finite_diff_check<double>(fk, k, 1e-6) < 1e-7);
        }
    }
    SUBCASE("layer_norm all three args") {
        Tensor64 x = t64({4, 5}, randvec(20));
        Tensor64 g = t64({5}, randvec(5));
        Tensor64 b = t64({5}, randvec(5));
        auto fx = [&](Tensor64& v) {
            Tensor64 y = layer_norm(v, g, b, 1e-6);
            return sum_all(mul(y, y));
        };
        CHECK(finite_diff_check<double>(fx, x, 1e-6) < 1e-6);
        auto fg = [&](Tensor64& v) {
            Tensor64 y = layer_norm(x, v, b, 1e-6);
            return sum_all(mul(y, y));
        };
        CHECK(finite_diff_check<double>(fg, g, 1e-6) < 1e-6);
        auto fb = [&](Tensor64& v) {
            Tensor64 y = layer_norm(x, g, v, 1e-6);
            return sum_all(mul(y, y));
        };
        CHECK(finite_diff_check<double>(fb, b, 1e-6) < 1e-6);
    }
    SUBCASE("softmax and log_softmax") {
        Tensor64 x = t64({3, 4}, randvec(12));
        Tensor64 c = t64({3, 4}, randvec(12));
        auto f = [&](Tensor64& v) { return sum_all(mul(softmax_rows(v), c)); };
        CHECK(finite_diff_check<double>(f, x, 1e-6) < 1e-6);
        auto f2 = [&](Tensor64& v) { return sum_all(mul(log_softmax_rows(v), c)); };
        CHECK(finite_diff_check<double>(f2, x, 1e-6) < 1e-6);
    }
    SUBCASE("unaries") {
        Tensor64 x = t64({6}, {0.9, -0.4, 1.7, -2.2, 0.05, 3.0});
        for (UnaryKind kind : {UnaryKind::Gelu, UnaryKind::Tanh}) {
            auto f = [&](Tensor64& v) {
                Tensor64 y = apply_unary(kind, v);
                return sum_all(mul(y, y));
            };
            CHECK(finite_diff_check<double>(f, x, 1e-6) < 1e-7);
        }
    }
    SUBCASE("masked pool, slices, concat, repeat") {
        Tensor64 x = t64({5, 3}, randvec(15));
        std::vector<std::uint8_t> mask = {1, 0, 1, 1, 0};
        auto f = [&](Tensor64& v) {
            Tensor64 p = masked_mean_pool(v, mask);
            return sum_all(mul(p, p));
        };
        CHECK(finite_diff_check<double>(f, x, 1e-6) < 1e-7);
        auto fs = [&](Tensor64& v) {
            Tensor64 s = slice_cols(v, 1, 2);
            Tensor64 r = slice_rows(v, 2, 2);
            return add(sum_all(mul(s, s)), sum_all(mul(r, r)));
        };
        CHECK(finite_diff_check<double>(fs, x, 1e-6) < 1e-7);
        auto fc = [&](Tensor64& v) {
            Tensor64 y = concat_cols<double>({v, v});
            return sum_all(mul(y, y));
        };
        CHECK(finite_diff_check<double>(fc, x, 1e-6) < 1e-7);
        auto fr = [&](Tensor64& v) {
            Tensor64 y = repeat_rows(v, 3);
            return sum_all(mul(y, y));
        };
        CHECK(finite_diff_check<double>(fr, x, 1e-6) < 1e-7);
    }
    SUBCASE("weighted_sum, divide, transpose, add_rowvec, gather_nll") {
        Tensor64 e0 = t64({2, 3}, randvec(6));
        Tensor64 e1 = t64({2, 3}, randvec(6));
        Tensor64 w = t64({2}, {0.3, 0.7});
        auto f = [&](Tensor64& v) {
            Tensor64 y = weighted_sum<double>({e0, e1}, v);
            return sum_all(mul(y, y));
        };
        CHECK(finite_diff_check<double>(f, w, 1e-6) < 1e-7);

        Tensor64 a = t64({4}, {1.0, -2.0, 0.5, 3.0});
        Tensor64 b = t64({4}, {2.0, 1.5, -1.0, 4.0});
        auto fd_ = [&](Tensor64& v) { return sum_all(mul(divide(v, b), divide(a, v))); };
        Tensor64 mid = t64({4}, {1.2, 2.3, -1.8, 0.7});
        CHECK(finite_diff_check<double>(fd_, mid, 1e-6) < 1e-6);

        Tensor64 m = t64({3, 2}, randvec(6));
        auto ft = [&](Tensor64& v) {
            Tensor64 y = transpose(v);
            return sum_all(mul(y, y));
        };
        CHECK(finite_diff_check<double>(ft, m, 1e-6) < 1e-7);

        Tensor64 row = t64({2}, {0.4, -0.6});
        auto fav = [&](Tensor64& v) {
            Tensor64 y = add_rowvec(m, v);
            return sum_all(mul(y, y));
        };
        CHECK(finite_diff_check<double>(fav, row, 1e-6) < 1e-7);

        Tensor64 logits = t64({3, 4}, randvec(12));
        std::vector<std::size_t> labels = {2, 0, 3};
        auto fnll = [&](Tensor64& v) { return gather_nll(log_softmax_rows(v), labels); };
        CHECK(finite_diff_check<double>(fnll, logits, 1e-6) < 1e-6);
    }
}
