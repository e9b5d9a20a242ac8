#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "prefpack/dataset.hpp"

namespace prefpack {

/// Prompt and response lengths of one example, or mean lengths of a dataset.
/// Real-valued so mean profiles can be evaluated directly.
struct LengthProfile {
    double l_in = 0.0;
    std::vector<double> l_resp;

    std::size_t k() const noexcept { return l_resp.size(); }
    double max_response() const;
    double sum_responses() const;
    /// l_in + max_k l_resp^k: the padded length of each unpacked sequence.
    double original_length() const { return l_in + max_response(); }
    /// l_in + sum_k l_resp^k: the length of the packed sequence.
    double packed_length() const { return l_in + sum_responses(); }
};

/// Throws ValidationError unless l_in >= 1, K >= 2 and every response >= 1.
void validate(const LengthProfile& profile);

LengthProfile profile_of(const PreferenceExample& example);

// Attention cost in abstract units (constant factor 1).

/// K * (l_in + max_k l_resp^k)^2
double compute_cost_original(const LengthProfile& p);
/// (l_in + sum_k l_resp^k)^2
double compute_cost_packed(const LengthProfile& p);
/// compute_cost_packed / compute_cost_original
double compute_ratio(const LengthProfile& p);
/// l_in + sum_k l_resp^k < sqrt(K) * (l_in + max_k l_resp^k)
bool is_beneficial(const LengthProfile& p);
/// Attention memory ratio when memory is linear in sequence length.
double memory_ratio_flash(const LengthProfile& p);
/// Exact number of (query, key) pairs the packed block mask admits. Never
/// exceeds compute_cost_packed, which charges the full square.
double compute_cost_packed_masked(const LengthProfile& p);

struct CostReport {
    LengthProfile profile;
    double compute_original = 0.0;
    double compute_packed = 0.0;
    double compute_packed_masked = 0.0;
    double compute_ratio = 0.0;
    double memory_ratio_flash = 0.0;
    /// compute_ratio * memory_ratio_flash (model-predicted).
    double effective_ratio = 0.0;
    bool beneficial = false;
};

CostReport cost_report(const LengthProfile& p);

/// Mean profile of a single-K dataset. For K = 2 this is
/// [mean_max_resp_len, mean_min_resp_len]; for K > 2 the middle responses
/// share the remaining mean length equally, which leaves every ratio exact
/// (the formulas depend only on l_in, max and sum).
LengthProfile mean_profile(const DatasetStats& stats);

/// Cost report at the mean profile. Throws ValidationError for mixed-K stats;
/// use dataset_cost_reports for those.
CostReport dataset_cost_report(const DatasetStats& stats);

/// One mean-profile report per K present in the dataset.
std::map<std::size_t, CostReport> dataset_cost_reports(std::span<const PreferenceExample> examples);

/// Alternative aggregation: arithmetic mean of the per-example ratios.
struct PerExampleMeans {
    double compute_ratio = 0.0;
    double memory_ratio_flash = 0.0;
    double beneficial_fraction = 0.0;
};

PerExampleMeans per_example_means(std::span<const PreferenceExample> examples);

std::string cost_report_json(const CostReport& report, int indent = -1);

}  // namespace prefpack
