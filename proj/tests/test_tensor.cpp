#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "boottod/tensor.hpp"

using namespace boottod;

namespace {

// Independent triple-loop scalar oracle for matrix products.
std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b,
                                  std::size_t m, std::size_t k, std::size_t n) {
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p) out[i * n + j] += a[i * k + p] * b[p * n + j];
    return out;
}

double l2_oracle(const std::vector<double>& a, const std::vector<double>& b) {
    double sq = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) sq += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(sq);
}

}  // namespace

TEST_CASE("matmul identity case") {
    Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
    Tensor c = matmul(eye, b);
    for (std::size_t i = 0; i < 4; ++i) CHECK(c.data()[i] == b.data()[i]);
}

TEST_CASE("matmul matches triple-loop oracle") {
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
    Tensor c = matmul(a, b);
    CHECK(c.at(0, 0) == 19.0);
    CHECK(c.at(0, 1) == 22.0);
    CHECK(c.at(1, 0) == 43.0);
    CHECK(c.at(1, 1) == 50.0);

    Rng rng(11);
    Tensor x = Tensor::randn({5, 7}, rng);
    Tensor y = Tensor::randn({7, 3}, rng);
    auto expect = matmul_oracle({x.data().begin(), x.data().end()},
                                {y.data().begin(), y.data().end()}, 5, 7, 3);
    Tensor z = matmul(x, y);
    for (std::size_t i = 0; i < expect.size(); ++i)
        CHECK(std::abs(z.data()[i] - expect[i]) < 1e-12);
}

TEST_CASE("matmul rejects mismatched inner dims naming both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 3});
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
    }
}

TEST_CASE("relu sign cases") {
    Tensor x = Tensor::from({3}, {-1, 0, 2});
    Tensor y = relu(x);
    CHECK(y.data()[0] == 0.0);
    CHECK(y.data()[1] == 0.0);
    CHECK(y.data()[2] == 2.0);
}

TEST_CASE("dropout is identity in eval mode") {
    Rng rng(3);
    Tensor x = Tensor::from({4}, {1, -2, 3, -4});
    Tensor y = dropout(x, 0.2, /*train=*/false, rng);
    for (std::size_t i = 0; i < 4; ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("dropout is unbiased (Monte Carlo)") {
    Rng rng(12345);
    Tensor x = Tensor::from({1}, {1.0});
    double acc = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) acc += dropout(x, 0.2, true, rng).data()[0];
    const double mean = acc / n;
    CHECK(std::abs(mean - 1.0) < 0.02);
}

TEST_CASE("elementwise shape errors are loud") {
    Tensor a = Tensor::zeros({2, 2});
    Tensor b = Tensor::zeros({3});
    CHECK_THROWS_AS(add(a, b), ShapeError);
    CHECK_THROWS_AS(mul(a, b), ShapeError);
    // scalar broadcast is the only permitted mismatch
    CHECK_NOTHROW(add(a, Tensor::scalar(2.0)));
}

TEST_CASE("layer_norm constant row normalizes to zero") {
    Tensor x = Tensor::from({1, 3}, {1, 1, 1});
    Tensor g = Tensor::full({3}, 1.0);
    Tensor b = Tensor::zeros({3});
    Tensor y = layer_norm(x, g, b, 1e-5);
    for (double v : y.data()) CHECK(std::abs(v) < 1e-9);
}

TEST_CASE("layer_norm symmetry with eps zero") {
    Tensor x = Tensor::from({1, 2}, {0, 2});
    Tensor g = Tensor::full({2}, 1.0);
    Tensor b = Tensor::zeros({2});
    Tensor y = layer_norm(x, g, b, 0.0);
    CHECK(y.data()[0] == Catch::Approx(-1.0).margin(1e-12));
    CHECK(y.data()[1] == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("layer_norm row statistics on random input") {
    Rng rng(7);
    const double eps = 1e-5;
    Tensor x = Tensor::randn({4, 8}, rng, 2.0);
    Tensor g = Tensor::full({8}, 1.0);
    Tensor b = Tensor::zeros({8});
    Tensor y = layer_norm(x, g, b, eps);
    for (std::size_t r = 0; r < 4; ++r) {
        double mean = 0.0;
        for (std::size_t c = 0; c < 8; ++c) mean += y.at(r, c);
        mean /= 8.0;
        CHECK(std::abs(mean) < 1e-12);
        double var = 0.0;
        for (std::size_t c = 0; c < 8; ++c) var += (y.at(r, c) - mean) * (y.at(r, c) - mean);
        var /= 8.0;
        // variance shrinks by var/(var+eps) relative to exactly 1
        CHECK(var < 1.0 + 1e-12);
        CHECK(var > 1.0 - 1e-3);
    }
}

TEST_CASE("softmax_cross_entropy uniform logits") {
    Tensor logits = Tensor::zeros({2, 4});
    Tensor loss = softmax_cross_entropy(logits, {0, 3});
    CHECK(loss.item() == Catch::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("softmax_cross_entropy peaked logits against scalar evaluation") {
    Tensor logits = Tensor::from({1, 3}, {10, 0, 0});
    Tensor loss = softmax_cross_entropy(logits, {0});
    const double expect = -std::log(std::exp(10.0) / (std::exp(10.0) + 2.0));
    CHECK(loss.item() == Catch::Approx(expect).epsilon(1e-10));
    CHECK(loss.item() == Catch::Approx(9.08e-5).epsilon(1e-2));
}

TEST_CASE("softmax_cross_entropy rejects out-of-range target") {
    Tensor logits = Tensor::zeros({1, 3});
    CHECK_THROWS_AS(softmax_cross_entropy(logits, {3}), ShapeError);
}

TEST_CASE("l2_distance basic cases") {
    Tensor a = Tensor::from({2}, {3, 0});
    Tensor b = Tensor::from({2}, {0, 4});
    CHECK(l2_distance(a, b).item() == Catch::Approx(5.0).epsilon(1e-14));
    CHECK(l2_distance(a, a).item() == 0.0);
    CHECK_THROWS_AS(l2_distance(a, Tensor::zeros({3})), ShapeError);
}

TEST_CASE("l2_distance matches scalar-loop oracle on random pairs") {
    Rng rng(99);
    Tensor a = Tensor::randn({16}, rng);
    Tensor b = Tensor::randn({16}, rng);
    const double expect = l2_oracle({a.data().begin(), a.data().end()},
                                    {b.data().begin(), b.data().end()});
    CHECK(std::abs(l2_distance(a, b).item() - expect) < 1e-12);
}

TEST_CASE("stop_gradient forward is bitwise identity") {
    Rng rng(5);
    Tensor x = Tensor::randn({7}, rng);
    Tensor y = stop_gradient(x);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.data()[i] == y.data()[i]);
}

TEST_CASE("stop_gradient blocks all gradient flow") {
    Tensor x = Tensor::from({2}, {1, 2}, /*requires_grad=*/true);
    Tensor y = Tensor::from({2}, {4, 6}, true);
    {
        Tape tape;
        Tensor loss = l2_distance(y, stop_gradient(x));
        tape.backward(loss);
    }
    auto gx = x.grad_or_zero();
    CHECK(gx[0] == 0.0);
    CHECK(gx[1] == 0.0);
    CHECK(y.has_grad());
}

TEST_CASE("stop_gradient product rule: grad of sum(x*sg(x)) is x, not 2x") {
    Tensor x = Tensor::from({3}, {1, 2, 3}, true);
    {
        Tape tape;
        Tensor loss = sum_all(mul(x, stop_gradient(x)));
        tape.backward(loss);
    }
    auto g = x.grad_or_zero();
    CHECK(g[0] == 1.0);
    CHECK(g[1] == 2.0);
    CHECK(g[2] == 3.0);
}

TEST_CASE("backward on sum gives ones") {
    Tensor x = Tensor::from({3}, {5, -1, 2}, true);
    {
        Tape tape;
        tape.backward(sum_all(x));
    }
    auto g = x.grad_or_zero();
    for (double v : g) CHECK(v == 1.0);
}

TEST_CASE("backward power rule via elementwise square") {
    Tensor x = Tensor::from({3}, {1, 2, 3}, true);
    {
        Tape tape;
        tape.backward(sum_all(mul(x, x)));
    }
    auto g = x.grad_or_zero();
    CHECK(g[0] == 2.0);
    CHECK(g[1] == 4.0);
    CHECK(g[2] == 6.0);
}

TEST_CASE("backward requires scalar loss and a fresh tape") {
    Tensor x = Tensor::from({2}, {1, 2}, true);
    Tape tape;
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), ShapeError);
    Tensor loss = sum_all(y);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), NumericError);
}

TEST_CASE("gradients of unused leaves are zero") {
    Tensor x = Tensor::from({2}, {1, 2}, true);
    Tensor unused = Tensor::from({2}, {3, 4}, true);
    {
        Tape tape;
        tape.backward(sum_all(x));
    }
    auto g = unused.grad_or_zero();
    CHECK(g[0] == 0.0);
    CHECK(g[1] == 0.0);
}

TEST_CASE("non-finite forward results raise NumericError") {
    Tensor big = Tensor::full({2}, 1e308);
    CHECK_THROWS_AS(add(big, big), NumericError);
    CHECK_THROWS_AS(mul(big, big), NumericError);
}

TEST_CASE("grad_check validates every differentiable op at random inputs") {
    // 10 random small inputs per op, 64-bit mode, threshold 1e-4.
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        Rng rng(seed);
        Tensor x = Tensor::randn({3, 4}, rng);
        Tensor other = Tensor::randn({3, 4}, rng);
        Tensor w = Tensor::randn({4, 5}, rng);
        Tensor bias = Tensor::randn({4}, rng);
        Tensor gain = add(Tensor::full({4}, 1.0), Tensor::randn({4}, rng, 0.1));

        auto check = [&](const std::function<Tensor(const Tensor&)>& f) {
            CHECK(grad_check(f, x) < 1e-4);
        };

        check([&](const Tensor& t) { return sum_all(add(t, other)); });
        check([&](const Tensor& t) { return sum_all(sub(other, t)); });
        check([&](const Tensor& t) { return sum_all(mul(t, other)); });
        check([&](const Tensor& t) { return sum_all(scale(t, -1.7)); });
        check([&](const Tensor& t) { return sum_all(mul(relu(t), other)); });
        check([&](const Tensor& t) { return sum_all(mul(matmul(t, w), Tensor::full({3, 5}, 0.3))); });
        check([&](const Tensor& t) { return sum_all(mul(transpose(t), Tensor::full({4, 3}, 0.5))); });
        check([&](const Tensor& t) { return sum_all(mul(add_bias(t, bias), other)); });
        check([&](const Tensor& t) {
            return sum_all(mul(layer_norm(t, gain, bias, 1e-5), other));
        });
        check([&](const Tensor& t) { return softmax_cross_entropy(t, {0, 2, 3}); });
        check([&](const Tensor& t) { return l2_distance(t, other); });
        check([&](const Tensor& t) { return sum_all(rowwise_distance(t, other, false)); });
        check([&](const Tensor& t) { return sum_all(rowwise_distance(t, other, true)); });
        check([&](const Tensor& t) { return mean_all(gather_rows(t, {2, 0, 0, 1})); });
        check([&](const Tensor& t) { return sum_all(mul(slice_rows(t, 1, 3), Tensor::full({2, 4}, 2.0))); });
        check([&](const Tensor& t) { return sum_all(mul(slice_cols(t, 1, 3), Tensor::full({3, 2}, 2.0))); });
        check([&](const Tensor& t) {
            return sum_all(concat_cols({t, mul(t, other)}));
        });
        check([&](const Tensor& t) {
            return sum_all(concat_rows({t, mul(t, other)}));
        });
        check([&](const Tensor& t) { return mean_all(reshape(mul(t, t), {4, 3})); });
        check([&](const Tensor& t) {
            std::vector<std::uint8_t> allowed = {1, 1, 0, 1};
            return sum_all(mul(softmax_rows_masked(t, allowed), other));
        });
        check([&](const Tensor& t) {
            Tensor targets = Tensor::from({3, 4}, {1, 0, 0, 1, 0, 1, 0, 0, 1, 1, 0, 1});
            return bce_with_logits(t, targets);
        });
        check([&](const Tensor& t) {
            Rng fixed(42);  // re-seeded per call so the mask is frozen
            return sum_all(mul(dropout(t, 0.3, true, fixed), other));
        });
    }
}

TEST_CASE("grad_check tight thresholds on the loss kernels") {
    Rng rng(2024);
    Tensor x = Tensor::randn({6}, rng);
    Tensor c = Tensor::randn({6}, rng);
    CHECK(grad_check([&](const Tensor& t) { return l2_distance(t, c); }, x) < 1e-6);

    Tensor logits = Tensor::randn({4, 7}, rng);
    CHECK(grad_check([&](const Tensor& t) { return softmax_cross_entropy(t, {1, 0, 6, 3}); },
                     logits) < 1e-6);
}

TEST_CASE("grad_check reports the expected mismatch on a detached path") {
    Rng rng(8);
    Tensor x = Tensor::randn({4}, rng);
    Tensor c = Tensor::randn({4}, rng);
    // The analytic gradient is exactly zero while the numeric one is not:
    // the mismatch is the definitional behavior of stop_gradient.
    const double err = grad_check(
        [&](const Tensor& t) { return l2_distance(stop_gradient(t), c); }, x);
    CHECK(err > 1e-2);
}

TEST_CASE("softmax_rows_masked zeroes disallowed columns exactly") {
    Tensor scores = Tensor::from({2, 4}, {1, 2, 3, 4, -1, 0, 1, 2});
    std::vector<std::uint8_t> allowed = {1, 1, 1, 0};
    Tensor p = softmax_rows_masked(scores, allowed);
    for (std::size_t r = 0; r < 2; ++r) {
        CHECK(p.at(r, 3) == 0.0);
        double s = 0.0;
        for (std::size_t c = 0; c < 4; ++c) s += p.at(r, c);
        CHECK(s == Catch::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("reductions follow the declared left-to-right order") {
    Tensor x = Tensor::from({4}, {0.1, 0.2, 0.3, 0.4});
    double expect = ((0.1 + 0.2) + 0.3) + 0.4;
    CHECK(sum_all(x).item() == expect);
}
