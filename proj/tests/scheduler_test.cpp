#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <numeric>
#include <random>

#include "prefpack/scheduler.hpp"

using namespace prefpack;

namespace {

std::vector<SchedulerItem> uniform_items(std::size_t n, double l_in, std::vector<double> resp) {
    std::vector<LengthProfile> p(n, LengthProfile{l_in, std::move(resp)});
    return scheduler_items(p);
}

std::vector<SchedulerItem> fixture_items(std::uint64_t seed, std::size_t n = 5000) {
    LognormalFixture f;
    f.n_examples = n;
    f.seed = seed;
    return scheduler_items(lognormal_length_fixture(f));
}

Batch batch_of(std::vector<double> lengths) {
    Batch b;
    for (std::size_t i = 0; i < lengths.size(); ++i) b.push_back({std::to_string(i), i, lengths[i], lengths[i]});
    return b;
}

}  // namespace

TEST_CASE("sort_by_length") {
    const std::vector<double> a{5, 3, 9};
    CHECK(sort_by_length(a) == std::vector<std::size_t>{1, 0, 2});
    const std::vector<double> sorted{1, 2, 2, 7};
    CHECK(sort_by_length(sorted) == std::vector<std::size_t>{0, 1, 2, 3});
    const std::vector<double> ties{4, 2, 4, 2, 4};
    CHECK(sort_by_length(ties) == std::vector<std::size_t>{1, 3, 0, 2, 4});
}

TEST_CASE("form_batches: chunking and K-fold expansion") {
    const auto items = uniform_items(10, 5, {2, 3});
    const auto plan = form_batches(items, 4, BatchMode::packed);
    REQUIRE(plan.batches.size() == 3);
    CHECK(plan.batches[0].size() == 4);
    CHECK(plan.batches[1].size() == 4);
    CHECK(plan.batches[2].size() == 2);

    const auto three = uniform_items(3, 5, {2, 3});
    const auto unpacked = form_batches(three, 3, BatchMode::unpacked);
    REQUIRE(unpacked.batches.size() == 1);
    CHECK(unpacked.batches[0].size() == 6);
    for (const auto& s : unpacked.batches[0]) CHECK(s.length == 8.0);

    CHECK_THROWS_AS(form_batches(three, 0, BatchMode::packed), ValidationError);
}

TEST_CASE("padding_waste") {
    CHECK(padding_waste(batch_of({1, 3})) == doctest::Approx(1.0 / 3.0));
    CHECK(padding_waste(batch_of({4, 4, 4})) == 0.0);
    CHECK(padding_waste(batch_of({17})) == 0.0);
    CHECK(padding_waste(Batch{}) == 0.0);
}

TEST_CASE("sorting lowers padding on the lognormal fixture") {
    const auto items = fixture_items(1);
    for (auto mode : {BatchMode::unpacked, BatchMode::packed}) {
        const auto plain = form_batches(items, 8, mode);
        BatchingOptions s;
        s.sorted = true;
        const auto sorted = form_batches(items, 8, mode, s);
        CHECK(padding_tokens(sorted) < 0.5 * padding_tokens(plain));
    }
}

TEST_CASE("randomized sweep: sorting never increases padding") {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<int> n_dist(1, 60), m_dist(1, 9), len(1, 200), k_dist(2, 4);
    for (int trial = 0; trial < 500; ++trial) {
        // unpacked mode repeats each example K times, so K is shared within a trial
        const auto k = static_cast<std::size_t>(k_dist(rng));
        std::vector<LengthProfile> profiles(static_cast<std::size_t>(n_dist(rng)));
        for (auto& p : profiles) {
            p.l_in = len(rng);
            p.l_resp.resize(k);
            for (auto& r : p.l_resp) r = len(rng);
        }
        const auto items = scheduler_items(profiles);
        const auto m = static_cast<std::size_t>(m_dist(rng));
        for (auto mode : {BatchMode::unpacked, BatchMode::packed}) {
            BatchingOptions s;
            s.sorted = true;
            REQUIRE(padding_tokens(form_batches(items, m, mode, s)) <= padding_tokens(form_batches(items, m, mode)));
        }
    }
}

TEST_CASE("sorted chunking is the padding optimum over all orderings") {
    std::mt19937_64 rng(8);
    std::uniform_int_distribution<int> len(1, 30);
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t n = 2 + static_cast<std::size_t>(trial % 6);
        const bool mixed_k = trial % 2 == 0;
        std::vector<LengthProfile> profiles(n);
        for (auto& p : profiles) {
            p = LengthProfile{double(len(rng)), {double(len(rng)), double(len(rng))}};
            if (mixed_k && len(rng) % 2 == 0) p.l_resp.push_back(double(len(rng)));
        }
        for (auto mode : {BatchMode::packed, BatchMode::unpacked}) {
            if (mixed_k && mode == BatchMode::unpacked) continue;
            for (std::size_t m = 1; m <= n; ++m) {
                BatchingOptions s;
                s.sorted = true;
                const double sorted = padding_tokens(form_batches(scheduler_items(profiles), m, mode, s));
                std::vector<std::size_t> perm(n);
                std::iota(perm.begin(), perm.end(), std::size_t{0});
                double best = 1e300;
                do {
                    std::vector<LengthProfile> shuffled;
                    for (auto i : perm) shuffled.push_back(profiles[i]);
                    best = std::min(best, padding_tokens(form_batches(scheduler_items(shuffled), m, mode)));
                } while (std::next_permutation(perm.begin(), perm.end()));
                REQUIRE(sorted <= best);
            }
        }
    }
    // packed lengths [11, 3, 11]: the short chunk must lead
    BatchingOptions s;
    s.sorted = true;
    const std::vector<LengthProfile> lead = {{1, {9, 1}}, {1, {1, 1}}, {1, {9, 1}}};
    const auto a = form_batches(scheduler_items(lead), 2, BatchMode::packed, s);
    REQUIRE(a.batches.size() == 2);
    CHECK(a.batches[0].size() == 1);
    CHECK(a.batches[0][0].example == 1);
    CHECK(padding_tokens(a) == 0.0);
    // packed lengths [3, 3, 11]: the short chunk must trail
    const std::vector<LengthProfile> trail = {{1, {1, 1}}, {1, {1, 1}}, {1, {9, 1}}};
    const auto b = form_batches(scheduler_items(trail), 2, BatchMode::packed, s);
    REQUIRE(b.batches.size() == 2);
    CHECK(b.batches[1].size() == 1);
    CHECK(b.batches[1][0].example == 2);
    CHECK(padding_tokens(b) == 0.0);
}

TEST_CASE("unpacked mode with mixed K: sorting can add padding") {
    // unpacked lengths 3, 2, 2, 2 with K = 3, 2, 3, 3
    const std::vector<LengthProfile> profiles = {{1, {2, 1, 1}}, {1, {1, 1}}, {1, {1, 1, 1}}, {1, {1, 1, 1}}};
    const auto items = scheduler_items(profiles);
    BatchingOptions s;
    s.sorted = true;
    CHECK(padding_tokens(form_batches(items, 2, BatchMode::unpacked)) == 2.0);
    CHECK(padding_tokens(form_batches(items, 2, BatchMode::unpacked, s)) == 3.0);
}

TEST_CASE("simulate_throughput: single rank, uniform lengths") {
    const auto items = uniform_items(24, 10, {4, 6});
    const std::size_t m = 4;
    SimConfig sim;
    sim.step_overhead = 3.0;
    for (auto mode : {BatchMode::unpacked, BatchMode::packed}) {
        const auto plan = form_batches(items, m, mode);
        const double cost = batch_cost(plan.batches[0]);
        CHECK(simulate_throughput(plan, sim) == doctest::Approx(m / (cost + 3.0)));
    }
    // unpacked batch: K*M sequences of cost C_orig/K each
    const auto& p = items[0].profile;
    CHECK(batch_cost(form_batches(items, m, BatchMode::unpacked).batches[0]) ==
          doctest::Approx(m * compute_cost_original(p)));
    CHECK(batch_cost(form_batches(items, m, BatchMode::packed).batches[0]) ==
          doctest::Approx(m * compute_cost_packed(p)));

    // strategies collapse to the per-example packing ratio
    const auto report = strategy_report(items, m, SimConfig{});
    CHECK(report.at(Strategy::vanilla).relative == 1.0);
    CHECK(report.at(Strategy::sorting).relative == doctest::Approx(1.0));
    CHECK(report.at(Strategy::packing).relative == doctest::Approx(1.0 / compute_ratio(p)));
    CHECK(report.at(Strategy::both).relative == doctest::Approx(report.at(Strategy::packing).relative));
}

TEST_CASE("simulate_throughput: step cost is the slowest rank") {
    BatchPlan plan;
    plan.n_examples = 4;
    plan.batches = {batch_of({1}), batch_of({10}), batch_of({1}), batch_of({1})};
    SimConfig sim;
    sim.n_ranks = 4;
    CHECK(simulate_throughput(plan, sim) == doctest::Approx(4.0 / 10.0));
    sim.n_ranks = 1;
    CHECK(simulate_throughput(plan, sim) == doctest::Approx(4.0 / 13.0));
    sim.n_ranks = 2;
    CHECK(simulate_throughput(plan, sim) == doctest::Approx(4.0 / 11.0));
    sim.n_ranks = 0;
    CHECK_THROWS_AS(simulate_throughput(plan, sim), ValidationError);
}

TEST_CASE("strategy ordering on the heavy-tailed fixture") {
    SimConfig sim;
    sim.n_ranks = 8;
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto report = strategy_report(fixture_items(seed), 8, sim);
        const double v = report.at(Strategy::vanilla).relative;
        const double p = report.at(Strategy::packing).relative;
        const double s = report.at(Strategy::sorting).relative;
        const double b = report.at(Strategy::both).relative;
        CHECK(v == 1.0);
        CHECK(p > v);
        CHECK(s > p);
        CHECK(b > s);
        CHECK(b >= 1.1 * s);
        CHECK(b >= std::max({p, s}));
        CHECK(report.at(Strategy::sorting).padding_waste < report.at(Strategy::vanilla).padding_waste);
    }
}

TEST_CASE("long responses make packing slower") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> resp(800, 1200), prompt(5, 20);
    std::vector<LengthProfile> profiles(400);
    for (auto& p : profiles) p = LengthProfile{std::round(prompt(rng)), {std::round(resp(rng)), std::round(resp(rng))}};
    for (const auto& p : profiles) REQUIRE_FALSE(is_beneficial(p));
    SimConfig sim;
    sim.n_ranks = 4;
    const auto report = strategy_report(scheduler_items(profiles), 8, sim);
    CHECK(report.at(Strategy::packing).relative < 1.0);
}

TEST_CASE("conservation and relabeling invariance") {
    auto items = fixture_items(4, 300);
    for (auto strategy : {Strategy::vanilla, Strategy::packing, Strategy::sorting, Strategy::both}) {
        BatchingOptions o;
        o.sorted = sorted_of(strategy);
        const auto plan = form_batches(items, 8, mode_of(strategy), o);
        std::vector<std::size_t> seen(items.size(), 0);
        for (const auto& b : plan.batches) {
            CHECK(b.size() <= 8 * (mode_of(strategy) == BatchMode::packed ? 1 : 2));
            for (const auto& s : b) seen[s.example]++;
        }
        const std::size_t copies = mode_of(strategy) == BatchMode::packed ? 1 : 2;
        CHECK(std::all_of(seen.begin(), seen.end(), [&](std::size_t c) { return c == copies; }));
        CHECK(plan.n_examples == items.size());
    }

    SimConfig sim;
    sim.n_ranks = 8;
    const auto before = strategy_report(items, 8, sim);
    for (std::size_t i = 0; i < items.size(); ++i) items[i].id = "relabel-" + std::to_string(items.size() - i);
    const auto after = strategy_report(items, 8, sim);
    for (std::size_t r = 0; r < before.rows.size(); ++r) CHECK(before.rows[r].throughput == after.rows[r].throughput);
}

TEST_CASE("per-example cost is the cost model's") {
    for (const auto& item : fixture_items(5, 50)) {
        const auto& p = item.profile;
        CHECK(sequence_cost(p, BatchMode::packed, CostFunction::quadratic_attention) == compute_cost_packed(p));
        CHECK(sequence_cost(p, BatchMode::unpacked, CostFunction::quadratic_attention) * double(p.k()) ==
              doctest::Approx(compute_cost_original(p)));
        CHECK(sequence_cost(p, BatchMode::packed, CostFunction::linear) == p.packed_length());
    }
}

TEST_CASE("strategy report rendering and vanilla-only anchor") {
    StrategyOptions only;
    only.strategies = {Strategy::vanilla};
    const auto r = strategy_report(fixture_items(6, 100), 8, SimConfig{}, only);
    REQUIRE(r.rows.size() == 1);
    CHECK(r.rows[0].relative == 1.0);
    CHECK(strategy_report_json(r).find("\"relative_throughput\": 1.0") != std::string::npos);
    CHECK(strategy_report_table(r).find("vanilla") != std::string::npos);
    CHECK(parse_strategy("both") == Strategy::both);
    CHECK_THROWS_AS(parse_strategy("fast"), ValidationError);
    CHECK_THROWS_AS(strategy_report(std::vector<SchedulerItem>{}, 8, SimConfig{}), ValidationError);
}

TEST_CASE("lognormal fixture is seeded and has the requested medians") {
    LognormalFixture f;
    f.seed = 3;
    const auto a = lognormal_length_fixture(f);
    const auto b = lognormal_length_fixture(f);
    REQUIRE(a.size() == 5000);
    CHECK(std::equal(a.begin(), a.end(), b.begin(), [](const LengthProfile& x, const LengthProfile& y) {
        return x.l_in == y.l_in && x.l_resp == y.l_resp;
    }));
    std::vector<double> prompts, resp;
    for (const auto& p : a) {
        prompts.push_back(p.l_in);
        resp.push_back(p.l_resp[0]);
    }
    std::nth_element(prompts.begin(), prompts.begin() + 2500, prompts.end());
    std::nth_element(resp.begin(), resp.begin() + 2500, resp.end());
    CHECK(std::abs(prompts[2500] - 400.0) < 20.0);
    CHECK(std::abs(resp[2500] - 150.0) < 8.0);
}

TEST_CASE("parse_scenario") {
    const auto sc = parse_scenario(
        R"({"synthetic":{"n_examples":100,"median_prompt":300},"batch_size":4,"n_ranks":2,)"
        R"("strategies":["vanilla","both"],"seed":9,"cost":"linear","step_overhead":1.5})");
    REQUIRE(sc.synthetic.has_value());
    CHECK(sc.synthetic->n_examples == 100);
    CHECK(sc.synthetic->median_prompt == 300.0);
    CHECK(sc.synthetic->seed == 9);
    CHECK(sc.batch_size == 4);
    CHECK(sc.sim.n_ranks == 2);
    CHECK(sc.sim.cost == CostFunction::linear);
    CHECK(sc.sim.step_overhead == 1.5);
    CHECK(sc.strategies.strategies == std::vector<Strategy>{Strategy::vanilla, Strategy::both});

    CHECK(parse_scenario(R"({"dataset":"d.jsonl"})").dataset == "d.jsonl");
    CHECK_THROWS_AS(parse_scenario(R"({"batch_size":4})"), ParseError);
    CHECK_THROWS_AS(parse_scenario(R"({"dataset":"a","synthetic":{}})"), ParseError);
    CHECK_THROWS_AS(parse_scenario(R"({"dataset":"a","batch_size":0})"), ValidationError);
    CHECK_THROWS_AS(parse_scenario(R"({"dataset":"a","cost":"cubic"})"), ValidationError);
    CHECK_THROWS_AS(parse_scenario("not json"), ParseError);
}
