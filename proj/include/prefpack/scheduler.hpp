#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "prefpack/cost_model.hpp"
#include "prefpack/dataset.hpp"

namespace prefpack {

/// unpacked: each example contributes K sequences of length l_in + max resp.
/// packed: each example is one sequence of length l_in + sum resp.
enum class BatchMode { unpacked, packed };

enum class CostFunction { quadratic_attention, linear };

struct SchedulerItem {
    std::string id;
    LengthProfile profile;
};

std::vector<SchedulerItem> scheduler_items(std::span<const PreferenceExample> examples);
/// Items named by their index.
std::vector<SchedulerItem> scheduler_items(std::span<const LengthProfile> profiles);

/// Length used for sorting and padding: original_length() unpacked,
/// packed_length() packed.
double effective_length(const LengthProfile& profile, BatchMode mode);

struct SequenceDescriptor {
    std::string id;
    std::size_t example = 0;  // index into the scheduled items
    double length = 0.0;
    double cost = 0.0;
};

using Batch = std::vector<SequenceDescriptor>;

struct BatchPlan {
    std::vector<Batch> batches;
    BatchMode mode = BatchMode::unpacked;
    bool sorted = false;
    std::size_t batch_size = 0;  // M, in examples
    std::size_t n_examples = 0;
    CostFunction cost = CostFunction::quadratic_attention;
};

/// Stable ascending order of `lengths`; ties keep their input order.
std::vector<std::size_t> sort_by_length(std::span<const double> lengths);

struct BatchingOptions {
    bool sorted = false;
    /// When > 0 (and sorted), examples are shuffled inside consecutive
    /// buckets of this many examples after the global sort.
    std::size_t shuffle_bucket = 0;
    std::uint64_t seed = 0;
    CostFunction cost = CostFunction::quadratic_attention;
};

/// Consecutive chunks of M examples plus one short chunk when M does not
/// divide the count. Unsorted plans end with the short chunk; sorted plans
/// put it where it causes the least padding. Throws ValidationError when M < 1.
BatchPlan form_batches(std::span<const SchedulerItem> items, std::size_t batch_size, BatchMode mode,
                       const BatchingOptions& options = {});

/// 1 - sum(lengths) / (count * max length). 0 for an empty batch.
double padding_waste(const Batch& batch);

/// Total padded-but-empty token slots across the plan.
double padding_tokens(const BatchPlan& plan);

/// Per-sequence cost. Quadratic costs come straight from the cost model:
/// compute_cost_packed for packed sequences and compute_cost_original / K
/// for each unpacked sequence.
double sequence_cost(const LengthProfile& profile, BatchMode mode, CostFunction cost);

/// Every sequence is padded to the batch's longest one:
/// count * max_i cost_i.
double batch_cost(const Batch& batch);

struct SimConfig {
    std::size_t n_ranks = 1;
    CostFunction cost = CostFunction::quadratic_attention;
    double step_overhead = 0.0;
};

/// Batches go to ranks round-robin; a step waits for its slowest rank, so
/// step cost = max over the step's batches + overhead. Returns examples per
/// cost unit.
double simulate_throughput(const BatchPlan& plan, const SimConfig& sim);

enum class Strategy { vanilla, packing, sorting, both };

std::string to_string(Strategy s);
Strategy parse_strategy(const std::string& s);
BatchMode mode_of(Strategy s);
bool sorted_of(Strategy s);

struct StrategyResult {
    Strategy strategy = Strategy::vanilla;
    double throughput = 0.0;
    double relative = 0.0;  // throughput / vanilla throughput
    double padding_waste = 0.0;
    std::size_t n_batches = 0;
};

struct StrategyReport {
    std::size_t n_examples = 0;
    std::size_t batch_size = 0;
    SimConfig sim;
    std::vector<StrategyResult> rows;

    const StrategyResult& at(Strategy s) const;
};

struct StrategyOptions {
    std::vector<Strategy> strategies = {Strategy::vanilla, Strategy::packing, Strategy::sorting, Strategy::both};
    std::size_t shuffle_bucket = 0;
    std::uint64_t seed = 0;
};

/// Runs each strategy over the same items; relative throughput is
/// normalised to vanilla even when vanilla is not listed.
StrategyReport strategy_report(std::span<const SchedulerItem> items, std::size_t batch_size, const SimConfig& sim,
                               const StrategyOptions& options = {});

std::string strategy_report_json(const StrategyReport& report, int indent = 2);
std::string strategy_report_table(const StrategyReport& report);

/// Synthetic profiles with log-normal prompt and response lengths,
/// rounded and clamped to >= 1.
struct LognormalFixture {
    std::size_t n_examples = 5000;
    double median_prompt = 400.0;
    double median_response = 150.0;
    double sigma_prompt = 0.5;
    double sigma_response = 0.5;
    std::size_t k = 2;
    std::uint64_t seed = 0;
};

std::vector<LengthProfile> lognormal_length_fixture(const LognormalFixture& config);

/// Simulation scenario as read from JSON:
/// {"dataset": path | "synthetic": {...}, "batch_size": M, "n_ranks": R,
///  "strategies": [...], "seed": N, "cost": "quadratic"|"linear",
///  "step_overhead": x, "shuffle_bucket": n}
struct Scenario {
    std::optional<std::string> dataset;
    std::optional<LognormalFixture> synthetic;
    std::size_t batch_size = 8;
    SimConfig sim;
    StrategyOptions strategies;
};

Scenario parse_scenario(const std::string& json_text);

}  // namespace prefpack
