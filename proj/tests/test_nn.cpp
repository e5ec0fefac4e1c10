#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "ctirf/nn.hpp"
#include "helpers.hpp"

using namespace ctirf;
using testutil::rel_err;

TEST_CASE("gelu matches high-precision reference values") {
    // Reference values computed independently at 18 significant digits.
    CHECK(gelu(0.0) == 0.0);
    CHECK_THAT(gelu(1.0), Catch::Matchers::WithinAbs(0.845795765932821296, 1e-15));
    CHECK_THAT(gelu(-1.0), Catch::Matchers::WithinAbs(-0.154204234067178704, 1e-15));
    CHECK_THAT(gelu(0.5), Catch::Matchers::WithinAbs(0.350388436606380123, 1e-15));
    CHECK_THAT(gelu(-0.5), Catch::Matchers::WithinAbs(-0.149611563393619877, 1e-15));
    CHECK_THAT(gelu(2.0), Catch::Matchers::WithinAbs(1.93565862314420815, 1e-14));
    CHECK_THAT(gelu(3.25), Catch::Matchers::WithinAbs(3.23718062047806542, 1e-14));
    CHECK_THAT(gelu(-2.0), Catch::Matchers::WithinAbs(-0.0643413768557918502, 1e-15));
}

TEST_CASE("gelu gradient matches finite differences") {
    for (double v : {-3.0, -1.0, -0.25, 0.0, 0.4, 1.0, 2.5}) {
        const double fd = testutil::fd_central([](double x) { return gelu(x); }, v);
        CHECK_THAT(gelu_grad(v), Catch::Matchers::WithinAbs(fd, 1e-8));
    }
}

TEST_CASE("gelu is stable at extreme inputs") {
    CHECK(std::isfinite(gelu(700.0)));
    CHECK(std::isfinite(gelu(-700.0)));
    CHECK_THAT(gelu(700.0), Catch::Matchers::WithinAbs(700.0, 1e-9));
    CHECK_THAT(gelu(-700.0), Catch::Matchers::WithinAbs(0.0, 1e-9));
}

TEST_CASE("single identity layer reproduces affine arithmetic") {
    Ffn net = make_ffn(1, {}, 1);
    net[0].w = {1.0};
    net[0].b = {0.0};
    CHECK(ffn_forward(net, {3.5}).output()[0] == 3.5);

    net[0].w = {2.0};
    net[0].b = {1.0};
    CHECK(ffn_forward(net, {2.0}).output()[0] == 5.0);
}

namespace {

// Independent straight-line evaluation of a 3->4->2 gelu/identity net,
// written without any of the library's loop structure.
std::vector<double> straight_line_342(const Ffn& net, const std::vector<double>& x) {
    auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    double h[4];
    for (int o = 0; o < 4; ++o) {
        double z = net[0].b[static_cast<std::size_t>(o)];
        for (int i = 0; i < 3; ++i)
            z += net[0].w[static_cast<std::size_t>(o * 3 + i)] * x[static_cast<std::size_t>(i)];
        h[o] = z * sig(1.702 * z);
    }
    std::vector<double> y(2, 0.0);
    for (int o = 0; o < 2; ++o) {
        double z = net[1].b[static_cast<std::size_t>(o)];
        for (int i = 0; i < 4; ++i)
            z += net[1].w[static_cast<std::size_t>(o * 4 + i)] * h[i];
        y[static_cast<std::size_t>(o)] = z;
    }
    return y;
}

}  // namespace

TEST_CASE("two-layer forward matches independent straight-line evaluation") {
    Rng rng(41);
    Ffn net = make_ffn(3, {4}, 2);
    glorot_init(net, rng);
    for (auto& layer : net)
        for (auto& b : layer.b) b = rng.uniform(-0.5, 0.5);
    const std::vector<double> x = {0.3, -1.2, 0.7};
    const auto got = ffn_forward(net, x).output();
    const auto want = straight_line_342(net, x);
    REQUIRE(got.size() == 2);
    CHECK_THAT(got[0], Catch::Matchers::WithinAbs(want[0], 1e-12));
    CHECK_THAT(got[1], Catch::Matchers::WithinAbs(want[1], 1e-12));
}

TEST_CASE("identity layer backward: weight grad = input, bias grad = 1") {
    Ffn net = make_ffn(1, {}, 1);
    net[0].w = {2.0};
    net[0].b = {0.5};
    const std::vector<double> x = {3.0};
    auto trace = ffn_forward(net, x);
    auto grads = zeros_like(net);
    ffn_backward(net, trace, {1.0}, grads);
    CHECK(grads.layers[0].w[0] == 3.0);
    CHECK(grads.layers[0].b[0] == 1.0);
    CHECK(grads.input[0] == 2.0);
}

TEST_CASE("zero upstream yields all-zero gradients") {
    Rng rng(7);
    Ffn net = make_ffn(3, {4}, 2);
    glorot_init(net, rng);
    auto trace = ffn_forward(net, {1.0, -2.0, 0.5});
    auto grads = zeros_like(net);
    ffn_backward(net, trace, {0.0, 0.0}, grads);
    for (const auto& lg : grads.layers) {
        for (double g : lg.w) CHECK(g == 0.0);
        for (double g : lg.b) CHECK(g == 0.0);
    }
    for (double g : grads.input) CHECK(g == 0.0);
}

TEST_CASE("backward matches central finite differences on a gelu net") {
    Rng rng(123);
    Ffn net = make_ffn(3, {4}, 2);
    glorot_init(net, rng);
    for (auto& layer : net)
        for (auto& b : layer.b) b = rng.uniform(-0.3, 0.3);
    std::vector<double> x = {0.9, -0.4, 1.3};
    const std::vector<double> upstream = {0.7, -1.1};

    auto loss = [&](const Ffn& params, const std::vector<double>& input) {
        const auto out = ffn_forward(params, input).output();
        double s = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) s += upstream[i] * out[i];
        return s;
    };

    auto trace = ffn_forward(net, x);
    auto grads = zeros_like(net);
    ffn_backward(net, trace, upstream, grads);

    const double h = 1e-5;
    for (std::size_t l = 0; l < net.size(); ++l) {
        for (std::size_t i = 0; i < net[l].w.size(); ++i) {
            Ffn plus = net, minus = net;
            plus[l].w[i] += h;
            minus[l].w[i] -= h;
            const double fd = (loss(plus, x) - loss(minus, x)) / (2.0 * h);
            CHECK(rel_err(grads.layers[l].w[i], fd) < 1e-4);
        }
        for (std::size_t i = 0; i < net[l].b.size(); ++i) {
            Ffn plus = net, minus = net;
            plus[l].b[i] += h;
            minus[l].b[i] -= h;
            const double fd = (loss(plus, x) - loss(minus, x)) / (2.0 * h);
            CHECK(rel_err(grads.layers[l].b[i], fd) < 1e-4);
        }
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
        std::vector<double> plus = x, minus = x;
        plus[i] += h;
        minus[i] -= h;
        const double fd = (loss(net, plus) - loss(net, minus)) / (2.0 * h);
        CHECK(rel_err(grads.input[i], fd) < 1e-4);
    }
}

TEST_CASE("backward with dropout mask matches finite differences") {
    Rng rng(55);
    Ffn net = make_ffn(2, {5}, 1);
    glorot_init(net, rng);
    Rng mask_rng(99);
    const DropoutMask mask = sample_dropout_mask(0.4, hidden_widths(net), mask_rng);

    auto loss = [&](const Ffn& params) {
        return ffn_forward(params, {1.2, -0.3}, &mask).output()[0];
    };
    auto trace = ffn_forward(net, {1.2, -0.3}, &mask);
    auto grads = zeros_like(net);
    ffn_backward(net, trace, {1.0}, grads, &mask);

    const double h = 1e-5;
    for (std::size_t l = 0; l < net.size(); ++l)
        for (std::size_t i = 0; i < net[l].w.size(); ++i) {
            Ffn plus = net, minus = net;
            plus[l].w[i] += h;
            minus[l].w[i] -= h;
            const double fd = (loss(plus) - loss(minus)) / (2.0 * h);
            CHECK(rel_err(grads.layers[l].w[i], fd) < 1e-4);
        }
}

TEST_CASE("dropout rate 0 gives all-ones mask with scale 1") {
    Rng rng(1);
    const auto mask = sample_dropout_mask(0.0, {8, 8}, rng);
    CHECK(mask.scale == 1.0);
    for (const auto& layer : mask.keep)
        for (auto k : layer) CHECK(k == 1);
}

TEST_CASE("dropout keep fraction approaches 1 - rate") {
    Rng rng(2024);
    std::size_t kept = 0, total = 0;
    for (int rep = 0; rep < 100; ++rep) {
        const auto mask = sample_dropout_mask(0.2, {1000}, rng);
        for (auto k : mask.keep[0]) {
            kept += k;
            ++total;
        }
    }
    const double frac = static_cast<double>(kept) / static_cast<double>(total);
    CHECK(frac > 0.79);
    CHECK(frac < 0.81);
}

TEST_CASE("dropout masks are deterministic under seed") {
    Rng a(77), b(77);
    const auto ma = sample_dropout_mask(0.5, {16, 16}, a);
    const auto mb = sample_dropout_mask(0.5, {16, 16}, b);
    CHECK(ma.keep == mb.keep);
}

TEST_CASE("dropout rate >= 1 is rejected") {
    Rng rng(3);
    CHECK_THROWS_AS(sample_dropout_mask(1.0, {4}, rng), ConfigError);
}

TEST_CASE("rate-0 mask reproduces the unmasked forward bit-for-bit") {
    Rng rng(8);
    Ffn net = make_ffn(3, {6, 6}, 2);
    glorot_init(net, rng);
    Rng mask_rng(9);
    const auto mask = sample_dropout_mask(0.0, hidden_widths(net), mask_rng);
    const std::vector<double> x = {0.1, 2.0, -0.7};
    const auto plain = ffn_forward(net, x).output();
    const auto masked = ffn_forward(net, x, &mask).output();
    CHECK(plain == masked);
}

TEST_CASE("masked hidden activation is unbiased over many masks") {
    Rng rng(14);
    Ffn net = make_ffn(2, {8}, 1);
    glorot_init(net, rng);
    const std::vector<double> x = {0.8, -0.9};
    const auto plain = ffn_forward(net, x);
    std::vector<double> mean_hidden(8, 0.0);
    const int n = 10000;
    Rng mask_rng(15);
    for (int i = 0; i < n; ++i) {
        const auto mask = sample_dropout_mask(0.2, hidden_widths(net), mask_rng);
        const auto t = ffn_forward(net, x, &mask);
        for (std::size_t u = 0; u < 8; ++u) mean_hidden[u] += t.post[0][u];
    }
    for (std::size_t u = 0; u < 8; ++u) {
        mean_hidden[u] /= n;
        const double want = plain.post[0][u];
        if (std::fabs(want) > 1e-3)
            CHECK(std::fabs(mean_hidden[u] - want) / std::fabs(want) < 0.02);
    }
}

TEST_CASE("l2 penalty values and gradient") {
    Ffn net = make_ffn(1, {}, 1);
    net[0].w = {3.0};
    CHECK(l2_penalty(net, 0.0) == 0.0);
    CHECK(l2_penalty(net, 5.0) == 45.0);

    Rng rng(31);
    Ffn big = make_ffn(3, {4}, 2);
    glorot_init(big, rng);
    auto grads = zeros_like(big);
    l2_penalty_grad(big, 5.0, grads);
    const double h = 1e-6;
    for (std::size_t l = 0; l < big.size(); ++l)
        for (std::size_t i = 0; i < big[l].w.size(); ++i) {
            Ffn plus = big, minus = big;
            plus[l].w[i] += h;
            minus[l].w[i] -= h;
            const double fd = (l2_penalty(plus, 5.0) - l2_penalty(minus, 5.0)) / (2.0 * h);
            CHECK_THAT(grads.layers[l].w[i], Catch::Matchers::WithinAbs(fd, 1e-6));
        }
}

TEST_CASE("forward rejects dimension mismatches") {
    Ffn net = make_ffn(3, {4}, 2);
    CHECK_THROWS_AS(ffn_forward(net, {1.0, 2.0}), ConfigError);
}

TEST_CASE("rng streams are deterministic and distributions behave") {
    Rng a(5), b(5);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng r(2718);
    double sum = 0.0, sum_sq = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double v = r.normal();
        sum += v;
        sum_sq += v * v;
    }
    CHECK(std::fabs(sum / n) < 0.01);
    CHECK(std::fabs(sum_sq / n - 1.0) < 0.02);

    double esum = 0.0;
    for (int i = 0; i < n; ++i) esum += r.exponential(2.0);
    CHECK(std::fabs(esum / n - 2.0) < 0.03);
}

TEST_CASE("softplus inverse round-trips") {
    for (double y : {0.01, 0.5, 1.0, 3.0, 40.0}) {
        CHECK_THAT(softplus(softplus_inverse(y)), Catch::Matchers::WithinAbs(y, 1e-10));
    }
    CHECK_THAT(softplus_inverse(1.0),
               Catch::Matchers::WithinAbs(0.541324854612918109, 1e-14));
}

TEST_CASE("quantile helper interpolates linearly") {
    std::vector<double> v = {4.0, 1.0, 3.0, 2.0};
    CHECK(ctirf::quantile(v, 0.0) == 1.0);
    CHECK(ctirf::quantile(v, 1.0) == 4.0);
    CHECK(ctirf::quantile(v, 0.5) == 2.5);
    CHECK_THAT(ctirf::quantile(v, 0.25), Catch::Matchers::WithinAbs(1.75, 1e-12));
}
