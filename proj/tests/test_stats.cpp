#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <set>

#include "ctirf/stats.hpp"
#include "helpers.hpp"

using namespace ctirf;

namespace {

ResponseTable numbered_rows(std::size_t n) {
    ResponseTable t;
    for (std::size_t i = 0; i < n; ++i)
        t.rows.push_back({"s", static_cast<double>(i), static_cast<double>(i), {}});
    return t;
}

std::multiset<double> ys(const ResponseTable& t) {
    std::multiset<double> out;
    for (const auto& row : t.rows) out.insert(row.y);
    return out;
}

}  // namespace

TEST_CASE("four rows split exactly 2/1/1") {
    const auto split = split_data(numbered_rows(4), {0.5, 0.25, 0.25}, 7);
    CHECK(split.train.rows.size() == 2);
    CHECK(split.exploratory.rows.size() == 1);
    CHECK(split.test.rows.size() == 1);

    std::multiset<double> all = ys(split.train);
    for (double v : ys(split.exploratory)) all.insert(v);
    for (double v : ys(split.test)) all.insert(v);
    CHECK(all == ys(numbered_rows(4)));
}

TEST_CASE("splits are deterministic in the seed") {
    const auto a = split_data(numbered_rows(50), {0.5, 0.25, 0.25}, 11);
    const auto b = split_data(numbered_rows(50), {0.5, 0.25, 0.25}, 11);
    CHECK(ys(a.train) == ys(b.train));
    CHECK(ys(a.test) == ys(b.test));

    const auto c = split_data(numbered_rows(50), {0.5, 0.25, 0.25}, 12);
    CHECK(ys(a.train) != ys(c.train));
}

TEST_CASE("large splits match the ratios almost exactly") {
    const std::size_t n = 100000;
    const auto split = split_data(numbered_rows(n), {0.5, 0.25, 0.25}, 13);
    const auto prop = [n](std::size_t count) {
        return static_cast<double>(count) / static_cast<double>(n);
    };
    CHECK_THAT(prop(split.train.rows.size()), Catch::Matchers::WithinAbs(0.5, 0.01));
    CHECK_THAT(prop(split.exploratory.rows.size()),
               Catch::Matchers::WithinAbs(0.25, 0.01));
    CHECK_THAT(prop(split.test.rows.size()), Catch::Matchers::WithinAbs(0.25, 0.01));
}

TEST_CASE("uneven ratios use largest remainders") {
    const auto split = split_data(numbered_rows(10), {0.8, 0.1, 0.1}, 3);
    CHECK(split.train.rows.size() == 8);
    CHECK(split.exploratory.rows.size() == 1);
    CHECK(split.test.rows.size() == 1);
}

TEST_CASE("invalid ratios are rejected") {
    CHECK_THROWS_AS(split_data(numbered_rows(4), {0.5, 0.25, 0.3}, 1), ConfigError);
    CHECK_THROWS_AS(split_data(numbered_rows(4), {1.5, -0.25, -0.25}, 1),
                    ConfigError);
}

TEST_CASE("identical ensembles give p = 1 exactly") {
    LikelihoodMatrix L;
    L.items = {"0", "1", "2"};
    L.ll = {{-1.0, -2.0, -3.0}, {-1.5, -2.5, -3.5}};
    Rng rng(21);
    const auto res = permutation_test(L, L, 500, rng);
    CHECK(res.observed == 0.0);
    CHECK(res.p == 1.0);
    CHECK(res.total0 == res.total1);
}

TEST_CASE("two-item single-model case matches the enumeration") {
    // Pools per item are {0, -1}; the four equally likely repartitions give
    // absolute differences {2, 0, 0, 2}, so the exact p is 0.5.
    LikelihoodMatrix L0, L1;
    L0.items = L1.items = {"a", "b"};
    L0.ll = {{0.0, 0.0}};
    L1.ll = {{-1.0, -1.0}};
    Rng rng(22);
    const auto res = permutation_test(L0, L1, 10000, rng);
    CHECK(res.observed == 2.0);
    CHECK_THAT(res.p, Catch::Matchers::WithinAbs(0.5, 0.02));
}

TEST_CASE("monte carlo p tracks a full 216-way enumeration") {
    // E = 2, N = 3: each item's pool of 4 values splits C(4,2) = 6 ways.
    LikelihoodMatrix L0, L1;
    L0.items = L1.items = {"a", "b", "c"};
    Rng gen(23);
    L0.ll = {{0.0, 0.0, 0.0}, {0.0, 0.0, 0.0}};
    L1.ll = {{0.0, 0.0, 0.0}, {0.0, 0.0, 0.0}};
    for (auto* m : {&L0, &L1})
        for (auto& row : m->ll)
            for (auto& v : row) v = gen.normal();

    double observed = 0.0;
    {
        double t0 = 0.0, t1 = 0.0;
        for (std::size_t n = 0; n < 3; ++n) {
            t0 += 0.5 * (L0.ll[0][n] + L0.ll[1][n]);
            t1 += 0.5 * (L1.ll[0][n] + L1.ll[1][n]);
        }
        observed = std::fabs(t1 - t0);
    }

    static const int choose2of4[6][2] = {{0, 1}, {0, 2}, {0, 3},
                                         {1, 2}, {1, 3}, {2, 3}};
    std::size_t exceed = 0, total = 0;
    for (int ca = 0; ca < 6; ++ca)
        for (int cb = 0; cb < 6; ++cb)
            for (int cc = 0; cc < 6; ++cc) {
                const int picks[3] = {ca, cb, cc};
                double sum_a = 0.0, sum_b = 0.0;
                for (std::size_t n = 0; n < 3; ++n) {
                    const double pool[4] = {L0.ll[0][n], L0.ll[1][n],
                                            L1.ll[0][n], L1.ll[1][n]};
                    bool in_a[4] = {false, false, false, false};
                    in_a[choose2of4[picks[n]][0]] = true;
                    in_a[choose2of4[picks[n]][1]] = true;
                    double a = 0.0, b = 0.0;
                    for (int i = 0; i < 4; ++i) (in_a[i] ? a : b) += pool[i];
                    sum_a += 0.5 * a;
                    sum_b += 0.5 * b;
                }
                ++total;
                if (std::fabs(sum_a - sum_b) >= observed) ++exceed;
            }
    REQUIRE(total == 216);
    const double exact_p = static_cast<double>(exceed) / 216.0;

    Rng rng(24);
    const auto res = permutation_test(L0, L1, 10000, rng);
    CHECK_THAT(res.observed, Catch::Matchers::WithinAbs(observed, 1e-12));
    CHECK_THAT(res.p, Catch::Matchers::WithinAbs(exact_p, 0.03));
}

TEST_CASE("repartitions never mix values across items") {
    // All 2E values within an item are equal, but items differ wildly. Any
    // cross-item leakage would produce nonzero resample statistics.
    LikelihoodMatrix L0, L1;
    L0.items = L1.items = {"a", "b", "c"};
    L0.ll = {{5.0, -3.0, 0.25}, {5.0, -3.0, 0.25}, {5.0, -3.0, 0.25}};
    L1.ll = L0.ll;
    Rng rng(25);
    const auto res = permutation_test(L0, L1, 2000, rng);
    CHECK(res.observed == 0.0);
    CHECK(res.p == 1.0);
}

TEST_CASE("the test is symmetric in its arguments") {
    LikelihoodMatrix L0, L1;
    L0.items = L1.items = {"a", "b", "c", "d"};
    Rng gen(26);
    L0.ll = {{0, 0, 0, 0}, {0, 0, 0, 0}};
    L1.ll = {{0, 0, 0, 0}, {0, 0, 0, 0}};
    for (auto* m : {&L0, &L1})
        for (auto& row : m->ll)
            for (auto& v : row) v = gen.normal();
    Rng ra(27), rb(27);
    const auto fwd = permutation_test(L0, L1, 4000, ra);
    const auto rev = permutation_test(L1, L0, 4000, rb);
    CHECK(fwd.observed == rev.observed);
    CHECK(fwd.total0 == rev.total1);
    CHECK_THAT(fwd.p, Catch::Matchers::WithinAbs(rev.p, 0.05));
}

TEST_CASE("p never drops below the resolution floor") {
    Rng gen(28);
    for (int rep = 0; rep < 30; ++rep) {
        LikelihoodMatrix L0, L1;
        L0.items = L1.items = {"a", "b"};
        L0.ll = {{gen.normal(), gen.normal()}};
        L1.ll = {{gen.normal() + 5.0, gen.normal() + 5.0}};
        Rng rng(static_cast<std::uint64_t>(rep));
        const auto res = permutation_test(L0, L1, 40, rng);
        CHECK(res.p >= 1.0 / 40.0);
        CHECK(res.p <= 1.0);
    }
}

TEST_CASE("mismatched comparisons are data errors") {
    LikelihoodMatrix L0, L1;
    L0.items = {"a", "b"};
    L1.items = {"a", "c"};
    L0.ll = {{1.0, 2.0}};
    L1.ll = {{1.0, 2.0}};
    Rng rng(29);
    CHECK_THROWS_AS(permutation_test(L0, L1, 10, rng), DataError);

    L1.items = {"a", "b"};
    L1.ll = {{1.0, 2.0}, {3.0, 4.0}};  // E mismatch
    CHECK_THROWS_AS(permutation_test(L0, L1, 10, rng), DataError);

    LikelihoodMatrix ragged = L0;
    ragged.ll[0].pop_back();
    CHECK_THROWS_AS(permutation_test(ragged, L0, 10, rng), DataError);
    CHECK_THROWS_AS(permutation_test(L0, L0, 0, rng), ConfigError);
}

TEST_CASE("per-ensemble totals are the summed component means") {
    LikelihoodMatrix L0, L1;
    L0.items = L1.items = {"a", "b"};
    L0.ll = {{-1.0, -3.0}, {-2.0, -5.0}};  // means: -1.5, -4 -> total -5.5
    L1.ll = {{-1.0, -1.0}, {-3.0, -2.0}};  // means: -2, -1.5 -> total -3.5
    Rng rng(30);
    const auto res = permutation_test(L0, L1, 100, rng);
    CHECK_THAT(res.total0, Catch::Matchers::WithinAbs(-5.5, 1e-12));
    CHECK_THAT(res.total1, Catch::Matchers::WithinAbs(-3.5, 1e-12));
    CHECK_THAT(res.observed, Catch::Matchers::WithinAbs(2.0, 1e-12));
}

// ---------------------------------------------------------------------------
// Ensemble fitting
// ---------------------------------------------------------------------------

namespace {

struct TinyTask {
    ModelSpec spec;
    AssembledData data;
};

TinyTask tiny_task(std::uint64_t seed) {
    Rng rng(seed);
    EventStream events;
    events.predictor_names = {"x"};
    EventStream::Series series;
    series.id = "s";
    double t = 0.0;
    for (int i = 0; i < 80; ++i) {
        t += rng.exponential(1.0);
        series.times.push_back(t);
        series.x.push_back({rng.normal()});
    }
    events.series.push_back(series);
    ResponseTable responses;
    for (int i = 0; i < 80; ++i)
        responses.rows.push_back(
            {"s", series.times[static_cast<std::size_t>(i)],
             series.x[static_cast<std::size_t>(i)][0] + rng.normal(0.0, 0.2),
             {}});

    TinyTask task;
    task.spec = default_spec({"x"});
    task.spec.history_length = 4;
    task.spec.hp.hidden = {4};
    task.spec.hp.dropout = 0.0;
    task.spec.hp.batch_size = 40;
    const auto stats = compute_stats(events, responses, task.spec);
    task.data = assemble_inputs(events, responses, task.spec, stats, {});
    return task;
}

}  // namespace

TEST_CASE("a single-component ensemble reduces to a plain fit") {
    const auto task = tiny_task(31);
    FitOptions base;
    base.max_epochs = 25;
    auto ens = ensemble_fit(task.spec, task.data, 1, 42, base);
    REQUIRE(ens.components.size() == 1);

    FitOptions direct = base;
    direct.seed = derive_seed(42, 0);
    auto solo = fit(task.spec, task.data, direct);
    auto pa = param_ptrs(ens.components[0].params);
    auto pb = param_ptrs(solo.params);
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(*pa[i] == *pb[i]);
}

TEST_CASE("ensembles are reproducible from the root seed") {
    const auto task = tiny_task(32);
    FitOptions base;
    base.max_epochs = 20;
    const auto a = ensemble_fit(task.spec, task.data, 3, 5, base);
    const auto b = ensemble_fit(task.spec, task.data, 3, 5, base);
    REQUIRE(a.manifest.seeds.size() == 3);
    CHECK(a.manifest.seeds == b.manifest.seeds);
    CHECK(a.manifest.final_losses == b.manifest.final_losses);
    CHECK(manifest_hash(a.manifest) == manifest_hash(b.manifest));

    const auto c = ensemble_fit(task.spec, task.data, 3, 6, base);
    CHECK(manifest_hash(a.manifest) != manifest_hash(c.manifest));
    // Components genuinely differ: different seeds find different weights.
    CHECK(a.components[0].final_loss != a.components[1].final_loss);
}

TEST_CASE("persistently diverging components abort with a listing") {
    auto task = tiny_task(33);
    // Poison the targets: NaN losses spike every batch, exhausting restores.
    for (auto& v : task.data.y_std) v = std::numeric_limits<double>::quiet_NaN();
    FitOptions base;
    base.max_epochs = 10;
    CHECK_THROWS_WITH(ensemble_fit(task.spec, task.data, 1, 44, base),
                      Catch::Matchers::ContainsSubstring("component 0"));
}

TEST_CASE("ensemble log-likelihood matrices line up with components") {
    const auto task = tiny_task(35);
    FitOptions base;
    base.max_epochs = 15;
    const auto ens = ensemble_fit(task.spec, task.data, 2, 7, base);
    std::vector<ParameterStore> stores;
    for (const auto& c : ens.components) stores.push_back(c.averaged);
    const auto L = ensemble_loglik(task.spec, stores, task.data);
    CHECK(L.n_models() == 2);
    CHECK(L.n_items() == task.data.n_responses);
    const auto plan = make_plan(task.spec);
    const auto direct = eval_loglik(task.spec, plan, stores[1], task.data);
    CHECK(L.ll[1] == direct);
}

TEST_CASE("test reports serialize the headline numbers") {
    TestResult res;
    res.observed = 1.25;
    res.p = 0.0625;
    res.iterations = 1600;
    res.total0 = -10.0;
    res.total1 = -8.75;
    const auto j = test_report_json(res, "aaaa", "bbbb");
    CHECK(j["observed"] == 1.25);
    CHECK(j["p"] == 0.0625);
    CHECK(j["iterations"] == 1600);
    CHECK(j["ensemble0_total"] == -10.0);
    CHECK(j["ensemble1_total"] == -8.75);
    CHECK(j["ensemble0_hash"] == "aaaa");
    CHECK(j["ensemble1_hash"] == "bbbb");
}
