#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "nemesis/rng.hpp"
#include "nemesis/tensor.hpp"

using namespace nemesis;

namespace {

// Independent triple-loop product used as the matmul oracle.
std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b,
                                  std::size_t m, std::size_t k, std::size_t n) {
    std::vector<double> c(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[kk * n + j];
            c[i * n + j] = acc;
        }
    return c;
}

Tensor random_tensor(Shape shape, Rng& rng, bool rg = false, double scale = 1.0) {
    std::vector<double> d(detail::shape_numel(shape));
    for (double& v : d) v = rng.uniform(-scale, scale);
    return Tensor::from(std::move(shape), std::move(d), rg);
}

}  // namespace

TEST_CASE("matmul identity and orthogonal cases") {
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor prod = matmul(a, eye);
    for (std::size_t i = 0; i < 4; ++i) CHECK(prod.value(i) == a.value(i));

    Tensor r = Tensor::from({1, 2}, {1, 0});
    Tensor c = Tensor::from({2, 1}, {0, 1});
    CHECK(matmul(r, c).item() == 0.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
    Rng rng(17);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    auto expect = matmul_oracle(a.values(), b.values(), 3, 4, 2);
    Tensor got = matmul(a, b);
    for (std::size_t i = 0; i < expect.size(); ++i)
        CHECK_THAT(got.value(i), Catch::Matchers::WithinAbs(expect[i], 1e-12));
}

TEST_CASE("matmul shape mismatch throws") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 3});
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("matmul algebraic identities on random 5x5") {
    Rng rng(7);
    Tensor a = random_tensor({5, 5}, rng);
    Tensor b = random_tensor({5, 5}, rng);
    std::vector<double> id(25, 0.0);
    for (int i = 0; i < 5; ++i) id[i * 5 + i] = 1.0;
    Tensor eye = Tensor::from({5, 5}, id);

    Tensor ai = matmul(a, eye);
    for (std::size_t i = 0; i < 25; ++i)
        CHECK_THAT(ai.value(i), Catch::Matchers::WithinAbs(a.value(i), 1e-12));

    Tensor abt = transpose(matmul(a, b));
    Tensor btat = matmul(transpose(b), transpose(a));
    for (std::size_t i = 0; i < 25; ++i)
        CHECK_THAT(abt.value(i), Catch::Matchers::WithinAbs(btat.value(i), 1e-12));
}

TEST_CASE("softmax rows") {
    Tensor x = Tensor::from({1, 2}, {0, 0});
    Tensor y = softmax_rows(x);
    CHECK(y.value(0) == 0.5);
    CHECK(y.value(1) == 0.5);

    Tensor big = Tensor::from({1, 2}, {1000, 1000});
    Tensor yb = softmax_rows(big);
    CHECK(yb.value(0) == 0.5);
    CHECK(yb.value(1) == 0.5);

    Tensor z = Tensor::from({1, 2}, {0.0, std::log(3.0)});
    Tensor yz = softmax_rows(z);
    CHECK_THAT(yz.value(0), Catch::Matchers::WithinAbs(0.25, 1e-12));
    CHECK_THAT(yz.value(1), Catch::Matchers::WithinAbs(0.75, 1e-12));
}

TEST_CASE("softmax rows sum to one for large-range inputs") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = random_tensor({4, 7}, rng, false, 1e3);
        Tensor y = softmax_rows(x);
        for (std::size_t i = 0; i < 4; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < 7; ++j) {
                s += y.at(i, j);
                CHECK(y.at(i, j) >= 0.0);
            }
            CHECK_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-6));
        }
    }
}

TEST_CASE("softmax rejects non-finite input") {
    Tensor x = Tensor::from({1, 2}, {0.0, std::numeric_limits<double>::infinity()});
    CHECK_THROWS_AS(softmax_rows(x), NumericError);
}

TEST_CASE("layernorm basics") {
    Tensor gamma = Tensor::from({3}, {1, 1, 1});
    Tensor beta = Tensor::from({3}, {0, 0, 0});

    Tensor constant = Tensor::from({1, 3}, {4, 4, 4});
    Tensor yc = layernorm(constant, gamma, beta, 1e-5);
    for (std::size_t i = 0; i < 3; ++i) CHECK_THAT(yc.value(i), Catch::Matchers::WithinAbs(0.0, 1e-9));

    Tensor pm = Tensor::from({1, 2}, {1, -1});
    Tensor g2 = Tensor::from({2}, {1, 1});
    Tensor b2 = Tensor::from({2}, {0, 0});
    Tensor ypm = layernorm(pm, g2, b2, 1e-12);
    CHECK_THAT(ypm.value(0), Catch::Matchers::WithinAbs(1.0, 1e-9));
    CHECK_THAT(ypm.value(1), Catch::Matchers::WithinAbs(-1.0, 1e-9));

    Tensor g0 = Tensor::from({2}, {0, 0});
    Tensor bb = Tensor::from({2}, {2.5, -1.0});
    Tensor yz = layernorm(pm, g0, bb, 1e-5);
    CHECK(yz.value(0) == 2.5);
    CHECK(yz.value(1) == -1.0);
}

TEST_CASE("gelu values") {
    Tensor x = Tensor::from({3}, {0.0, 10.0, 1.0});
    Tensor y = gelu(x);
    CHECK(y.value(0) == 0.0);
    CHECK_THAT(y.value(1), Catch::Matchers::WithinAbs(10.0, 1e-6));
    // Oracle: exact normal CDF at 1.
    const double phi1 = 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0)));
    CHECK_THAT(y.value(2), Catch::Matchers::WithinAbs(phi1, 1e-3));
    CHECK_THAT(y.value(2), Catch::Matchers::WithinAbs(0.8413, 1e-3));
}

TEST_CASE("backward on sum of squares") {
    Tensor x = Tensor::from({2}, {1, 2}, true);
    Tensor loss = sum_all(mul(x, x));
    backward(loss);
    auto g = x.grad();
    CHECK(g[0] == 2.0);
    CHECK(g[1] == 4.0);
}

TEST_CASE("gradient of unused leaf is zero") {
    Tensor x = Tensor::from({2}, {1, 2}, true);
    Tensor c = Tensor::from({2}, {5, 5}, true);
    Tensor loss = sum_all(c);
    backward(loss);
    auto g = x.grad();
    CHECK(g[0] == 0.0);
    CHECK(g[1] == 0.0);
}

TEST_CASE("backward rejects non-scalar loss") {
    Tensor x = Tensor::from({2}, {1, 2}, true);
    Tensor y = mul(x, x);
    CHECK_THROWS(backward(y));
}

TEST_CASE("backward is deterministic across repeated sweeps") {
    Rng rng(11);
    Tensor a = random_tensor({4, 3}, rng, true);
    Tensor b = random_tensor({3, 5}, rng, true);
    Tensor loss = sum_all(softmax_rows(matmul(a, b)));
    backward(loss);
    auto ga1 = a.grad(), gb1 = b.grad();
    backward(loss);
    auto ga2 = a.grad(), gb2 = b.grad();
    CHECK(ga1 == ga2);
    CHECK(gb1 == gb2);
}

TEST_CASE("composed chain matches finite differences") {
    Rng rng(23);
    Tensor a0 = random_tensor({3, 4}, rng);
    Tensor b0 = random_tensor({4, 5}, rng);
    Tensor weight = random_tensor({3, 5}, rng);
    auto f = [weight](const std::vector<Tensor>& p) {
        return sum_all(mul(softmax_rows(matmul(p[0], p[1])), weight));
    };
    double err = finite_diff_check(f, {a0, b0}, 1e-3);
    CHECK(err < 1e-4);
}

TEST_CASE("finite differences exact for quadratic") {
    Tensor w = Tensor::from({3}, {0.3, -0.7, 1.9});
    auto f = [](const std::vector<Tensor>& p) {
        Tensor shifted = affine(p[0], 1.0, -0.5);
        return sum_all(mul(shifted, shifted));
    };
    double err = finite_diff_check(f, {w}, 1e-3);
    CHECK(err < 1e-8);
}

TEST_CASE("every differentiable op passes finite differences on random shapes") {
    struct NamedCase {
        const char* name;
        std::function<Tensor(const std::vector<Tensor>&)> f;
        std::vector<Shape> shapes;
    };
    std::vector<NamedCase> cases = {
        {"matmul", [](const std::vector<Tensor>& p) { return sum_all(matmul(p[0], p[1])); }, {{3, 4}, {4, 2}}},
        {"matmul_chain",
         [](const std::vector<Tensor>& p) { return sum_all(softmax_rows(matmul(p[0], p[1]))); },
         {{3, 4}, {4, 2}}},
        {"softmax",
         [](const std::vector<Tensor>& p) { return sum_all(mul(softmax_rows(p[0]), p[1])); },
         {{3, 5}, {3, 5}}},
        {"layernorm",
         [](const std::vector<Tensor>& p) { return sum_all(mul(layernorm(p[0], p[1], p[2], 1e-5), p[3])); },
         {{4, 6}, {6}, {6}, {4, 6}}},
        {"gelu", [](const std::vector<Tensor>& p) { return sum_all(gelu(p[0])); }, {{3, 3}}},
        {"sigmoid", [](const std::vector<Tensor>& p) { return sum_all(mul(sigmoid(p[0]), p[1])); }, {{2, 3}, {2, 3}}},
        {"add_sub", [](const std::vector<Tensor>& p) { return sum_all(mul(add(p[0], p[1]), sub(p[0], p[1]))); },
         {{3, 3}, {3, 3}}},
        {"add_rowvec", [](const std::vector<Tensor>& p) { return sum_all(gelu(add_rowvec(p[0], p[1]))); },
         {{4, 3}, {3}}},
        {"scale_by", [](const std::vector<Tensor>& p) { return sum_all(scale_by(p[0], p[1])); }, {{3, 3}, {1}}},
        {"take_rows",
         [](const std::vector<Tensor>& p) { return sum_all(gelu(take_rows(p[0], {2, 0, 2}))); },
         {{4, 3}}},
        {"slice_cols",
         [](const std::vector<Tensor>& p) { return sum_all(gelu(slice_cols(p[0], 1, 2))); },
         {{3, 5}}},
        {"concat_rows",
         [](const std::vector<Tensor>& p) { return sum_all(softmax_rows(concat_rows(p[0], p[1]))); },
         {{2, 3}, {4, 3}}},
        {"concat_cols",
         [](const std::vector<Tensor>& p) { return sum_all(gelu(concat_cols(p[0], p[1]))); },
         {{3, 2}, {3, 4}}},
        {"repeat_row", [](const std::vector<Tensor>& p) { return sum_all(mul(repeat_row(p[0], 4), p[1])); },
         {{3}, {4, 3}}},
        {"transpose", [](const std::vector<Tensor>& p) { return sum_all(matmul(transpose(p[0]), p[0])); }, {{3, 4}}},
        {"affine", [](const std::vector<Tensor>& p) { return sum_all(gelu(affine(p[0], 1.7, -0.3))); }, {{3, 3}}},
    };
    for (const auto& c : cases) {
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
            Rng rng(derive_seed(seed, 0x5eed));
            std::vector<Tensor> params;
            for (const Shape& s : c.shapes) params.push_back(random_tensor(s, rng));
            double err = finite_diff_check(c.f, params, 1e-3);
            INFO(c.name << " seed " << seed);
            CHECK(err < 1e-4);
        }
    }
}

TEST_CASE("finite_diff_check threaded matches single-threaded") {
    Rng rng(5);
    Tensor a = random_tensor({4, 4}, rng);
    Tensor b = random_tensor({4, 4}, rng);
    auto f = [](const std::vector<Tensor>& p) { return sum_all(softmax_rows(matmul(p[0], p[1]))); };
    double e1 = finite_diff_check(f, {a, b}, 1e-3, 1);
    double e2 = finite_diff_check(f, {a, b}, 1e-3, 2);
    CHECK(e1 == e2);
}

TEST_CASE("non-finite forward is rejected") {
    Tensor a = Tensor::from({1}, {1e308});
    CHECK_THROWS_AS(add(a, a), NumericError);
}
