#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "probe/ops.hpp"
#include "probe/rng.hpp"
#include "probe/tensor.hpp"
#include "testutil.hpp"

using namespace probe;
using namespace probe::num;
using testutil::check_gradients;
using testutil::random_tensor;

namespace {

// Independent triple-loop product used as the matmul oracle.
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                 std::size_t m, std::size_t k, std::size_t n) {
    std::vector<double> c(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
    return c;
}

// Standard normal CDF by Simpson quadrature; independent of std::erf.
double normal_cdf_quadrature(double x) {
    const int steps = 20000;
    const double a = 0.0, b = std::fabs(x);
    const double h = (b - a) / steps;
    auto pdf = [](double t) { return std::exp(-0.5 * t * t) / std::sqrt(2.0 * M_PI); };
    double s = pdf(a) + pdf(b);
    for (int i = 1; i < steps; ++i) s += pdf(a + i * h) * (i % 2 ? 4.0 : 2.0);
    const double integral = s * h / 3.0;
    return x >= 0.0 ? 0.5 + integral : 0.5 - integral;
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
    Rng rng(7);
    auto a = random_tensor({3, 3}, rng);
    auto eye = Tensor::make({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    auto prod = matmul(a, eye);
    for (std::size_t i = 0; i < 9; ++i) CHECK(prod->data()[i] == doctest::Approx(a->data()[i]).epsilon(1e-15));

    auto l = Tensor::make({2, 2}, {1, 2, 3, 4});
    auto r = Tensor::make({2, 1}, {0, 1});
    auto c = matmul(l, r);
    CHECK(c->data()[0] == 2.0);
    CHECK(c->data()[1] == 4.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
    Rng rng(11);
    auto a = random_tensor({4, 5}, rng);
    auto b = random_tensor({5, 2}, rng);
    auto c = matmul(a, b);
    auto want = naive_matmul(a->values(), b->values(), 4, 5, 2);
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::fabs(c->data()[i] - want[i]) < 1e-12);

    // random instances up to 32x32
    for (int t = 0; t < 10; ++t) {
        const std::size_t m = 1 + rng.uniform_int(32);
        const std::size_t k = 1 + rng.uniform_int(32);
        const std::size_t n = 1 + rng.uniform_int(32);
        auto x = random_tensor({m, k}, rng);
        auto y = random_tensor({k, n}, rng);
        auto z = matmul(x, y);
        auto w = naive_matmul(x->values(), y->values(), m, k, n);
        for (std::size_t i = 0; i < w.size(); ++i) CHECK(std::fabs(z->data()[i] - w[i]) < 1e-12);
    }
}

TEST_CASE("matmul shape mismatch names both shapes") {
    auto a = Tensor::zeros({2, 3});
    auto b = Tensor::zeros({4, 2});
    try {
        matmul(a, b);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[4x2]") != std::string::npos);
    }
}

TEST_CASE("matmul_nt agrees with explicit transpose") {
    Rng rng(12);
    auto a = random_tensor({5, 4}, rng);
    auto b = random_tensor({3, 4}, rng);
    auto c1 = matmul_nt(a, b);
    auto c2 = matmul(a, transpose(b));
    for (std::size_t i = 0; i < c1->numel(); ++i)
        CHECK(c1->data()[i] == doctest::Approx(c2->data()[i]).epsilon(1e-14));
}

TEST_CASE("gelu values") {
    auto z = Tensor::make({1}, {0.0});
    CHECK(gelu(z)->data()[0] == 0.0);

    auto one = Tensor::make({1}, {1.0});
    const double want = 1.0 * normal_cdf_quadrature(1.0);
    CHECK(gelu(one)->data()[0] == doctest::Approx(want).epsilon(1e-10));
}

TEST_CASE("additive inverse gives zeros") {
    Rng rng(3);
    auto x = random_tensor({4, 3}, rng);
    auto zero = add(x, negate(x));
    for (std::size_t i = 0; i < zero->numel(); ++i) CHECK(zero->data()[i] == 0.0);
}

TEST_CASE("elementwise broadcast rules") {
    auto m = Tensor::make({2, 3}, {1, 2, 3, 4, 5, 6});
    auto row = Tensor::make({3}, {10, 20, 30});
    auto s = Tensor::scalar(2.0);
    auto sum_row = add(m, row);
    CHECK(sum_row->data()[0] == 11.0);
    CHECK(sum_row->data()[5] == 36.0);
    auto scaled = mul(m, s);
    CHECK(scaled->data()[3] == 8.0);

    auto bad = Tensor::zeros({4});
    CHECK_THROWS_AS(add(m, bad), DimensionError);
}

TEST_CASE("softmax examples and invariants") {
    auto uniform = Tensor::make({4}, {1.5, 1.5, 1.5, 1.5});
    auto su = softmax(uniform, 0);
    for (std::size_t i = 0; i < 4; ++i) CHECK(su->data()[i] == doctest::Approx(0.25).epsilon(1e-15));

    auto two = Tensor::make({2}, {0.0, std::log(3.0)});
    auto st = softmax(two, 0);
    CHECK(st->data()[0] == doctest::Approx(0.25).epsilon(1e-14));
    CHECK(st->data()[1] == doctest::Approx(0.75).epsilon(1e-14));

    Rng rng(5);
    auto x = random_tensor({6, 9}, rng, 3.0);
    auto shifted = add_scalar(x, 17.25);
    auto s1 = softmax(x, 1);
    auto s2 = softmax(shifted, 1);
    for (std::size_t i = 0; i < s1->numel(); ++i)
        CHECK(std::fabs(s1->data()[i] - s2->data()[i]) < 1e-12);
    for (std::size_t r = 0; r < 6; ++r) {
        double total = 0.0;
        for (std::size_t c = 0; c < 9; ++c) {
            CHECK(s1->data()[r * 9 + c] >= 0.0);
            total += s1->data()[r * 9 + c];
        }
        CHECK(std::fabs(total - 1.0) < 1e-12);
    }
}

TEST_CASE("layernorm examples") {
    auto x = Tensor::make({4}, {3.0, 3.0, 3.0, 3.0});
    auto gain = Tensor::full({4}, 1.0);
    auto bias = Tensor::zeros({4});
    auto y = layernorm(x, gain, bias, 1e-5);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::fabs(y->data()[i]) < 1e-12);

    Rng rng(9);
    auto r = random_tensor({8}, rng, 2.0);
    auto b2 = Tensor::full({8}, 0.75);
    auto y2 = layernorm(r, gain->numel() == 8 ? gain : Tensor::full({8}, 1.0), b2, 1e-8);
    double mean_out = 0.0;
    for (std::size_t i = 0; i < 8; ++i) mean_out += y2->data()[i];
    mean_out /= 8.0;
    CHECK(mean_out == doctest::Approx(0.75).epsilon(1e-6));
}

TEST_CASE("layernorm gradient matches finite differences") {
    Rng rng(21);
    auto x = random_tensor({3, 6}, rng, 1.5, true);
    auto gain = random_tensor({6}, rng, 0.5, true);
    auto bias = random_tensor({6}, rng, 0.5, true);
    auto weights = random_tensor({3, 6}, rng);  // fixed mixing so the loss is non-trivial
    auto loss_fn = [&]() { return sum(mul(layernorm(x, gain, bias, 1e-5), weights)); };
    auto failures = check_gradients(loss_fn, {{"x", x}, {"gain", gain}, {"bias", bias}}, 1e-5, 1e-5);
    CHECK(failures.empty());
}

TEST_CASE("cosine similarity") {
    Rng rng(2);
    auto v = random_tensor({5}, rng);
    CHECK(cosine_sim(v, v)->item() == doctest::Approx(1.0).epsilon(1e-12));

    auto e0 = Tensor::make({2}, {1.0, 0.0});
    auto e1 = Tensor::make({2}, {0.0, 1.0});
    CHECK(cosine_sim(e0, e1)->item() == doctest::Approx(0.0));

    auto a = Tensor::make({3}, {1, 2, 3});
    auto b = Tensor::make({3}, {4, 5, 6});
    const double dot = 1 * 4 + 2 * 5 + 3 * 6;
    const double want = dot / (std::sqrt(1.0 + 4 + 9) * std::sqrt(16.0 + 25 + 36));
    CHECK(cosine_sim(a, b)->item() == doctest::Approx(want).epsilon(1e-14));

    auto zero = Tensor::zeros({3});
    CHECK_THROWS_AS(cosine_sim(zero, b), DegenerateInputError);
}

TEST_CASE("backward computes polynomial derivative") {
    auto x = Tensor::make({1}, {3.0}, true);
    auto loss = sum(mul(x, x));
    backward(loss);
    CHECK(x->grad()[0] == doctest::Approx(6.0));
    Graph::active().clear();
}

TEST_CASE("backward accumulates without reset and is deterministic with reset") {
    auto x = Tensor::make({2}, {1.0, -2.0}, true);
    auto build = [&]() { return sum(mul(x, x)); };

    auto loss = build();
    backward(loss);
    std::vector<double> g1 = x->grad();
    backward(loss);  // same graph, no reset: doubles
    CHECK(x->grad()[0] == doctest::Approx(2.0 * g1[0]));
    CHECK(x->grad()[1] == doctest::Approx(2.0 * g1[1]));

    x->zero_grad();
    backward(loss);
    CHECK(x->grad()[0] == doctest::Approx(g1[0]));
    CHECK(x->grad()[1] == doctest::Approx(g1[1]));
    Graph::active().clear();
}

TEST_CASE("backward rejects non-scalar loss") {
    auto x = Tensor::make({2}, {1.0, 2.0}, true);
    auto y = mul(x, x);
    CHECK_THROWS_AS(backward(y), ContractError);
    Graph::active().clear();
}

TEST_CASE("stop_gradient semantics") {
    Rng rng(4);
    auto x = random_tensor({6}, rng, 2.0, true);
    auto sg = stop_gradient(x);
    for (std::size_t i = 0; i < 6; ++i) CHECK(sg->data()[i] == x->data()[i]);

    // d(sum(stop_gradient(x)))/dx = 0
    auto loss1 = sum(stop_gradient(x));
    backward(loss1);
    CHECK_FALSE(x->has_grad());
    Graph::active().clear();

    // d(sum(x * stop_gradient(x)))/dx = x, not 2x
    auto loss2 = sum(mul(x, stop_gradient(x)));
    backward(loss2);
    for (std::size_t i = 0; i < 6; ++i) CHECK(x->grad()[i] == doctest::Approx(x->data()[i]));
    Graph::active().clear();
}

TEST_CASE("finite differences across the op zoo") {
    Rng rng(31);
    auto x = random_tensor({3, 4}, rng, 0.8, true);
    auto y = random_tensor({3, 4}, rng, 0.8, true);
    auto w = random_tensor({4, 3}, rng, 0.6, true);
    auto v = random_tensor({4}, rng, 0.5, true);

    std::vector<std::pair<std::string, std::function<TensorPtr()>>> losses = {
        {"add/mul/negate", [&] { return sum(mul(add(x, y), negate(y))); }},
        {"sub/div", [&] { return sum(div(sub(x, y), add_scalar(mul(y, y), 1.0))); }},
        {"gelu", [&] { return sum(gelu(x)); }},
        {"sigmoid/log", [&] { return sum(log(add_scalar(sigmoid(x), 0.5))); }},
        {"exp/sqrt", [&] { return sum(sqrt(add_scalar(exp(scale(x, 0.3)), 1.0))); }},
        {"pow", [&] { return sum(pow_const(add_scalar(mul(x, x), 0.5), 1.7)); }},
        {"max/min", [&] { return sum(add(maximum(x, y), minimum(x, y))); }},
        {"clamp", [&] { return sum(clamp(x, -0.5, 0.5)); }},
        {"matmul", [&] { return sum(matmul(x, w)); }},
        {"matmul_nt", [&] { return sum(matmul_nt(x, transpose(w))); }},
        {"softmax", [&] { return sum(mul(softmax(x, 1), y)); }},
        {"mean/mean_rows", [&] { return add(mean(x), sum(mul(mean_rows(x), v))); }},
        {"reshape/transpose", [&] { return sum(mul(transpose(reshape(x, {4, 3})), x)); }},
        {"slice/concat rows",
         [&] { return sum(mul(concat_rows({slice_rows(x, 1, 3), slice_rows(y, 0, 1)}),
                              concat_rows({slice_rows(y, 0, 2), slice_rows(x, 2, 3)}))); }},
        {"slice/concat cols",
         [&] { return sum(concat_cols({slice_cols(x, 1, 3), slice_cols(y, 0, 2)})); }},
        {"stack0", [&] { return sum(stack0({x, y})); }},
        {"row broadcast", [&] { return sum(mul(add(x, v), x)); }},
    };

    for (auto& [name, fn] : losses) {
        CAPTURE(name);
        auto failures =
            check_gradients(fn, {{"x", x}, {"y", y}, {"w", w}, {"v", v}}, 1e-5, 1e-4);
        CHECK_MESSAGE(failures.empty(), name, ": ", failures.size(), " coordinate mismatches");
    }
}

TEST_CASE("finite differences for conv and batchnorm") {
    Rng rng(77);
    auto x = random_tensor({2, 3, 3, 4}, rng, 0.9, true);
    auto w3 = random_tensor({3, 3, 4, 2}, rng, 0.4, true);
    auto b3 = random_tensor({2}, rng, 0.2, true);
    auto w1 = random_tensor({4, 3}, rng, 0.4, true);
    auto b1 = random_tensor({3}, rng, 0.2, true);
    auto gain = random_tensor({4}, rng, 0.3, true);
    auto bias = random_tensor({4}, rng, 0.3, true);

    {
        auto fn = [&] { return sum(conv3x3(x, w3, b3)); };
        auto failures = check_gradients(fn, {{"x", x}, {"w", w3}, {"b", b3}});
        CHECK(failures.empty());
    }
    {
        auto fn = [&] { return sum(mul(conv1x1(x, w1, b1), conv1x1(x, w1, b1))); };
        auto failures = check_gradients(fn, {{"x", x}, {"w", w1}, {"b", b1}});
        CHECK(failures.empty());
    }
    {
        // fresh state per call so running averages do not drift during FD
        auto fn = [&] {
            num::BatchNormState st;
            auto y = batchnorm(x, gain, bias, st, true);
            Rng mix(5);
            auto m = random_tensor({2, 3, 3, 4}, mix);
            return sum(mul(y, m));
        };
        auto failures = check_gradients(fn, {{"x", x}, {"gain", gain}, {"bias", bias}});
        CHECK(failures.empty());
    }
}

TEST_CASE("batchnorm uses batch stats when training and running stats at eval") {
    Rng rng(13);
    auto x = random_tensor({4, 2, 2, 3}, rng, 2.0);
    auto gain = Tensor::full({3}, 1.0);
    auto bias = Tensor::zeros({3});
    num::BatchNormState st;
    st.momentum = 1.0;  // running stats become exactly the batch stats
    auto y = batchnorm(x, gain, bias, st, true);
    // normalized output: per-channel mean 0, var 1
    for (std::size_t c = 0; c < 3; ++c) {
        double m = 0.0;
        for (std::size_t r = 0; r < 16; ++r) m += y->data()[r * 3 + c];
        CHECK(std::fabs(m / 16.0) < 1e-12);
    }
    auto y2 = batchnorm(x, gain, bias, st, false);
    for (std::size_t i = 0; i < y->numel(); ++i)
        CHECK(y2->data()[i] == doctest::Approx(y->data()[i]).epsilon(1e-9));
}
