#include "prefpack/cost_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "prefpack/packer.hpp"

namespace prefpack {

double LengthProfile::max_response() const {
    return l_resp.empty() ? 0.0 : *std::max_element(l_resp.begin(), l_resp.end());
}

double LengthProfile::sum_responses() const {
    return std::accumulate(l_resp.begin(), l_resp.end(), 0.0);
}

void validate(const LengthProfile& profile) {
    if (!(profile.l_in >= 1.0) || !std::isfinite(profile.l_in)) {
        throw ValidationError("length profile: l_in must be >= 1");
    }
    if (profile.l_resp.size() < 2) {
        throw ValidationError("length profile: need K >= 2 responses");
    }
    for (double r : profile.l_resp) {
        if (!(r >= 1.0) || !std::isfinite(r)) {
            throw ValidationError("length profile: every response length must be >= 1");
        }
    }
}

LengthProfile profile_of(const PreferenceExample& example) {
    LengthProfile p;
    p.l_in = static_cast<double>(example.prompt.size());
    p.l_resp.reserve(example.responses.size());
    for (const auto& r : example.responses) {
        p.l_resp.push_back(static_cast<double>(r.size()));
    }
    return p;
}

double compute_cost_original(const LengthProfile& p) {
    const double l = p.original_length();
    return static_cast<double>(p.k()) * l * l;
}

double compute_cost_packed(const LengthProfile& p) {
    const double l = p.packed_length();
    return l * l;
}

double compute_ratio(const LengthProfile& p) {
    return compute_cost_packed(p) / compute_cost_original(p);
}

bool is_beneficial(const LengthProfile& p) {
    return p.packed_length() < std::sqrt(static_cast<double>(p.k())) * p.original_length();
}

double memory_ratio_flash(const LengthProfile& p) {
    return p.packed_length() / (static_cast<double>(p.k()) * p.original_length());
}

double compute_cost_packed_masked(const LengthProfile& p) {
    return mask_true_count(p.l_in, p.l_resp);
}

CostReport cost_report(const LengthProfile& p) {
    validate(p);
    CostReport r;
    r.profile = p;
    r.compute_original = compute_cost_original(p);
    r.compute_packed = compute_cost_packed(p);
    r.compute_packed_masked = compute_cost_packed_masked(p);
    r.compute_ratio = r.compute_packed / r.compute_original;
    r.memory_ratio_flash = memory_ratio_flash(p);
    r.effective_ratio = r.compute_ratio * r.memory_ratio_flash;
    r.beneficial = is_beneficial(p);
    return r;
}

LengthProfile mean_profile(const DatasetStats& stats) {
    if (stats.k_histogram.size() != 1) {
        throw ValidationError("mean_profile: dataset mixes " + std::to_string(stats.k_histogram.size()) +
                              " different K values; report per K instead");
    }
    const std::size_t k = stats.k_histogram.begin()->first;
    LengthProfile p;
    p.l_in = stats.mean_input_len;
    p.l_resp.push_back(stats.mean_max_resp_len);
    if (k > 2) {
        const double middle = (stats.mean_sum_resp_len - stats.mean_max_resp_len - stats.mean_min_resp_len) /
                              static_cast<double>(k - 2);
        for (std::size_t i = 0; i + 2 < k; ++i) {
            p.l_resp.push_back(middle);
        }
    }
    p.l_resp.push_back(stats.mean_min_resp_len);
    return p;
}

CostReport dataset_cost_report(const DatasetStats& stats) {
    return cost_report(mean_profile(stats));
}

std::map<std::size_t, CostReport> dataset_cost_reports(std::span<const PreferenceExample> examples) {
    std::map<std::size_t, std::vector<PreferenceExample>> by_k;
    for (const auto& ex : examples) {
        by_k[ex.responses.size()].push_back(ex);
    }
    std::map<std::size_t, CostReport> reports;
    for (const auto& [k, group] : by_k) {
        reports.emplace(k, dataset_cost_report(compute_stats(group)));
    }
    return reports;
}

PerExampleMeans per_example_means(std::span<const PreferenceExample> examples) {
    if (examples.empty()) {
        throw ValidationError("per_example_means: empty example list");
    }
    PerExampleMeans m;
    for (const auto& ex : examples) {
        const auto p = profile_of(ex);
        m.compute_ratio += compute_ratio(p);
        m.memory_ratio_flash += memory_ratio_flash(p);
        m.beneficial_fraction += is_beneficial(p) ? 1.0 : 0.0;
    }
    const double n = static_cast<double>(examples.size());
    m.compute_ratio /= n;
    m.memory_ratio_flash /= n;
    m.beneficial_fraction /= n;
    return m;
}

std::string cost_report_json(const CostReport& report, int indent) {
    nlohmann::ordered_json j;
    j["profile"] = {{"l_in", report.profile.l_in}, {"l_resp", report.profile.l_resp}};
    j["compute_original"] = report.compute_original;
    j["compute_packed"] = report.compute_packed;
    j["compute_packed_masked"] = report.compute_packed_masked;
    j["compute_ratio"] = report.compute_ratio;
    j["memory_ratio_flash"] = report.memory_ratio_flash;
    j["effective_ratio"] = report.effective_ratio;
    j["beneficial"] = report.beneficial;
    j["model_predicted"] = true;
    return j.dump(indent);
}

}  // namespace prefpack
