#include "prefpack/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

namespace prefpack {

std::vector<SchedulerItem> scheduler_items(std::span<const PreferenceExample> examples) {
    std::vector<SchedulerItem> items;
    items.reserve(examples.size());
    for (const auto& ex : examples) {
        items.push_back({ex.id, profile_of(ex)});
    }
    return items;
}

std::vector<SchedulerItem> scheduler_items(std::span<const LengthProfile> profiles) {
    std::vector<SchedulerItem> items;
    items.reserve(profiles.size());
    for (std::size_t i = 0; i < profiles.size(); ++i) {
        items.push_back({std::to_string(i), profiles[i]});
    }
    return items;
}

double effective_length(const LengthProfile& profile, BatchMode mode) {
    return mode == BatchMode::packed ? profile.packed_length() : profile.original_length();
}

std::vector<std::size_t> sort_by_length(std::span<const double> lengths) {
    std::vector<std::size_t> order(lengths.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return lengths[a] < lengths[b]; });
    return order;
}

double sequence_cost(const LengthProfile& profile, BatchMode mode, CostFunction cost) {
    if (cost == CostFunction::linear) {
        return effective_length(profile, mode);
    }
    if (mode == BatchMode::packed) {
        return compute_cost_packed(profile);
    }
    return compute_cost_original(profile) / static_cast<double>(profile.k());
}

namespace {

// Padding of chunking `order` into consecutive batches of `sizes`.
double chunk_padding(std::span<const SchedulerItem> items, const std::vector<std::size_t>& order, BatchMode mode,
                     const std::vector<std::size_t>& sizes) {
    double pad = 0.0;
    std::size_t start = 0;
    for (const std::size_t size : sizes) {
        double longest = 0.0;
        for (std::size_t i = start; i < start + size; ++i) {
            longest = std::max(longest, effective_length(items[order[i]].profile, mode));
        }
        for (std::size_t i = start; i < start + size; ++i) {
            const auto& p = items[order[i]].profile;
            const double copies = mode == BatchMode::packed ? 1.0 : static_cast<double>(p.k());
            pad += copies * (longest - effective_length(p, mode));
        }
        start += size;
    }
    return pad;
}

// In a sorted order the short chunk pads least at a slot that depends on the
// data, so try each one. Ties keep it last.
void place_remainder(std::span<const SchedulerItem> items, const std::vector<std::size_t>& order, BatchMode mode,
                     std::vector<std::size_t>& sizes) {
    auto best = sizes;
    double best_pad = chunk_padding(items, order, mode, sizes);
    for (std::size_t slot = sizes.size() - 1; slot-- > 0;) {
        std::swap(sizes[slot], sizes[slot + 1]);
        const double pad = chunk_padding(items, order, mode, sizes);
        if (pad < best_pad) {
            best_pad = pad;
            best = sizes;
        }
    }
    sizes = std::move(best);
}

}  // namespace

BatchPlan form_batches(std::span<const SchedulerItem> items, std::size_t batch_size, BatchMode mode,
                       const BatchingOptions& options) {
    if (batch_size < 1) {
        throw ValidationError("form_batches: batch size M must be >= 1");
    }
    BatchPlan plan;
    plan.mode = mode;
    plan.sorted = options.sorted;
    plan.batch_size = batch_size;
    plan.n_examples = items.size();
    plan.cost = options.cost;

    std::vector<std::size_t> order(items.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (options.sorted) {
        std::vector<double> lengths;
        lengths.reserve(items.size());
        for (const auto& it : items) {
            lengths.push_back(effective_length(it.profile, mode));
        }
        order = sort_by_length(lengths);
        if (options.shuffle_bucket > 0) {
            std::mt19937_64 rng(options.seed);
            for (std::size_t b = 0; b < order.size(); b += options.shuffle_bucket) {
                const auto end = std::min(order.size(), b + options.shuffle_bucket);
                std::shuffle(order.begin() + static_cast<std::ptrdiff_t>(b),
                             order.begin() + static_cast<std::ptrdiff_t>(end), rng);
            }
        }
    }

    std::vector<std::size_t> sizes(order.size() / batch_size, batch_size);
    if (const std::size_t remainder = order.size() % batch_size; remainder != 0) {
        sizes.push_back(remainder);
        if (options.sorted) {
            place_remainder(items, order, mode, sizes);
        }
    }
    std::size_t start = 0;
    for (const std::size_t size : sizes) {
        Batch batch;
        const std::size_t end = start + size;
        for (std::size_t i = start; i < end; ++i) {
            const auto& item = items[order[i]];
            const double len = effective_length(item.profile, mode);
            const double cost = sequence_cost(item.profile, mode, options.cost);
            const std::size_t copies = mode == BatchMode::packed ? 1 : item.profile.k();
            for (std::size_t c = 0; c < copies; ++c) {
                batch.push_back({item.id, order[i], len, cost});
            }
        }
        plan.batches.push_back(std::move(batch));
        start = end;
    }
    return plan;
}

double padding_waste(const Batch& batch) {
    if (batch.empty()) {
        return 0.0;
    }
    double total = 0.0, longest = 0.0;
    for (const auto& s : batch) {
        total += s.length;
        longest = std::max(longest, s.length);
    }
    return 1.0 - total / (static_cast<double>(batch.size()) * longest);
}

double padding_tokens(const BatchPlan& plan) {
    double pad = 0.0;
    for (const auto& batch : plan.batches) {
        double longest = 0.0, total = 0.0;
        for (const auto& s : batch) {
            longest = std::max(longest, s.length);
            total += s.length;
        }
        pad += static_cast<double>(batch.size()) * longest - total;
    }
    return pad;
}

double batch_cost(const Batch& batch) {
    double worst = 0.0;
    for (const auto& s : batch) {
        worst = std::max(worst, s.cost);
    }
    return static_cast<double>(batch.size()) * worst;
}

double simulate_throughput(const BatchPlan& plan, const SimConfig& sim) {
    if (sim.n_ranks < 1) {
        throw ValidationError("simulate_throughput: n_ranks must be >= 1");
    }
    double total = 0.0;
    for (std::size_t s = 0; s < plan.batches.size(); s += sim.n_ranks) {
        double step = 0.0;
        const std::size_t end = std::min(plan.batches.size(), s + sim.n_ranks);
        for (std::size_t b = s; b < end; ++b) {
            step = std::max(step, batch_cost(plan.batches[b]));
        }
        total += step + sim.step_overhead;
    }
    if (total <= 0.0) {
        return 0.0;
    }
    return static_cast<double>(plan.n_examples) / total;
}

std::string to_string(Strategy s) {
    switch (s) {
        case Strategy::vanilla: return "vanilla";
        case Strategy::packing: return "packing";
        case Strategy::sorting: return "sorting";
        case Strategy::both: return "both";
    }
    return "vanilla";
}

Strategy parse_strategy(const std::string& s) {
    if (s == "vanilla") return Strategy::vanilla;
    if (s == "packing") return Strategy::packing;
    if (s == "sorting") return Strategy::sorting;
    if (s == "both") return Strategy::both;
    throw ValidationError("unknown strategy '" + s + "' (expected vanilla, packing, sorting or both)");
}

BatchMode mode_of(Strategy s) {
    return s == Strategy::packing || s == Strategy::both ? BatchMode::packed : BatchMode::unpacked;
}

bool sorted_of(Strategy s) {
    return s == Strategy::sorting || s == Strategy::both;
}

const StrategyResult& StrategyReport::at(Strategy s) const {
    for (const auto& r : rows) {
        if (r.strategy == s) {
            return r;
        }
    }
    throw std::out_of_range("strategy '" + to_string(s) + "' not in report");
}

StrategyReport strategy_report(std::span<const SchedulerItem> items, std::size_t batch_size, const SimConfig& sim,
                               const StrategyOptions& options) {
    if (items.empty()) {
        throw ValidationError("strategy_report: no examples to schedule");
    }
    auto run = [&](Strategy s) {
        BatchingOptions bo;
        bo.sorted = sorted_of(s);
        bo.shuffle_bucket = options.shuffle_bucket;
        bo.seed = options.seed;
        bo.cost = sim.cost;
        const BatchPlan plan = form_batches(items, batch_size, mode_of(s), bo);
        StrategyResult r;
        r.strategy = s;
        r.throughput = simulate_throughput(plan, sim);
        r.n_batches = plan.batches.size();
        double slots = 0.0;
        for (const auto& b : plan.batches) {
            double longest = 0.0;
            for (const auto& d : b) {
                longest = std::max(longest, d.length);
            }
            slots += static_cast<double>(b.size()) * longest;
        }
        r.padding_waste = slots > 0.0 ? padding_tokens(plan) / slots : 0.0;
        return r;
    };

    const double baseline = run(Strategy::vanilla).throughput;
    StrategyReport report;
    report.n_examples = items.size();
    report.batch_size = batch_size;
    report.sim = sim;
    for (Strategy s : options.strategies) {
        StrategyResult r = run(s);
        r.relative = r.throughput / baseline;
        report.rows.push_back(r);
    }
    return report;
}

std::string strategy_report_json(const StrategyReport& report, int indent) {
    nlohmann::ordered_json j;
    j["n_examples"] = report.n_examples;
    j["batch_size"] = report.batch_size;
    j["n_ranks"] = report.sim.n_ranks;
    j["cost"] = report.sim.cost == CostFunction::linear ? "linear" : "quadratic";
    j["step_overhead"] = report.sim.step_overhead;
    j["model_predicted"] = true;
    auto rows = nlohmann::ordered_json::array();
    for (const auto& r : report.rows) {
        nlohmann::ordered_json row;
        row["strategy"] = to_string(r.strategy);
        row["relative_throughput"] = r.relative;
        row["throughput"] = r.throughput;
        row["padding_waste"] = r.padding_waste;
        row["n_batches"] = r.n_batches;
        rows.push_back(std::move(row));
    }
    j["strategies"] = std::move(rows);
    return j.dump(indent);
}

std::string strategy_report_table(const StrategyReport& report) {
    std::ostringstream out;
    char line[160];
    std::snprintf(line, sizeof line, "%-10s %18s %14s %10s\n", "strategy", "samples/cost (rel)", "padding waste",
                  "batches");
    out << line;
    for (const auto& r : report.rows) {
        std::snprintf(line, sizeof line, "%-10s %18.3f %14.3f %10zu\n", to_string(r.strategy).c_str(), r.relative,
                      r.padding_waste, r.n_batches);
        out << line;
    }
    out << "(model-predicted; " << report.n_examples << " examples, M=" << report.batch_size
        << ", ranks=" << report.sim.n_ranks << ")\n";
    return out.str();
}

std::vector<LengthProfile> lognormal_length_fixture(const LognormalFixture& config) {
    if (config.k < 2) {
        throw ValidationError("lognormal_length_fixture: need K >= 2");
    }
    std::mt19937_64 rng(config.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto draw = [&](double median, double sigma) {
        return std::max(1.0, std::round(median * std::exp(sigma * normal(rng))));
    };
    std::vector<LengthProfile> out;
    out.reserve(config.n_examples);
    for (std::size_t i = 0; i < config.n_examples; ++i) {
        LengthProfile p;
        p.l_in = draw(config.median_prompt, config.sigma_prompt);
        for (std::size_t k = 0; k < config.k; ++k) {
            p.l_resp.push_back(draw(config.median_response, config.sigma_response));
        }
        out.push_back(std::move(p));
    }
    return out;
}

Scenario parse_scenario(const std::string& json_text) {
    using json = nlohmann::json;
    Scenario sc;
    try {
        const json j = json::parse(json_text);
        if (j.contains("dataset")) {
            sc.dataset = j["dataset"].get<std::string>();
        }
        if (j.contains("synthetic")) {
            const auto& s = j["synthetic"];
            LognormalFixture f;
            f.n_examples = s.value("n_examples", f.n_examples);
            f.median_prompt = s.value("median_prompt", f.median_prompt);
            f.median_response = s.value("median_response", f.median_response);
            f.sigma_prompt = s.value("sigma_prompt", f.sigma_prompt);
            f.sigma_response = s.value("sigma_response", f.sigma_response);
            f.k = s.value("k", f.k);
            f.seed = s.value("seed", j.value("seed", std::uint64_t{0}));
            sc.synthetic = f;
        }
        if (sc.dataset.has_value() == sc.synthetic.has_value()) {
            throw ParseError("scenario needs exactly one of 'dataset' or 'synthetic'", 0);
        }
        sc.batch_size = j.value("batch_size", sc.batch_size);
        sc.sim.n_ranks = j.value("n_ranks", sc.sim.n_ranks);
        sc.sim.step_overhead = j.value("step_overhead", sc.sim.step_overhead);
        const std::string cost = j.value("cost", std::string("quadratic"));
        if (cost == "quadratic") {
            sc.sim.cost = CostFunction::quadratic_attention;
        } else if (cost == "linear") {
            sc.sim.cost = CostFunction::linear;
        } else {
            throw ValidationError("scenario: unknown cost '" + cost + "'");
        }
        if (j.contains("strategies")) {
            sc.strategies.strategies.clear();
            for (const auto& s : j["strategies"]) {
                sc.strategies.strategies.push_back(parse_strategy(s.get<std::string>()));
            }
        }
        sc.strategies.seed = j.value("seed", std::uint64_t{0});
        sc.strategies.shuffle_bucket = j.value("shuffle_bucket", std::size_t{0});
    } catch (const json::exception& e) {
        throw ParseError(std::string("malformed scenario: ") + e.what(), 0);
    }
    if (sc.batch_size < 1 || sc.sim.n_ranks < 1) {
        throw ValidationError("scenario: batch_size and n_ranks must be >= 1");
    }
    return sc;
}

}  // namespace prefpack
