#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "prefpack/refnet.hpp"

namespace prefpack::refnet {

/// How an example reaches the network: one packed sequence with the block
/// mask, or K causal sequences prompt ++ response_k (the batched baseline).
enum class Pipeline { packed, unpacked };

/// Reduction of K > 2 ranked responses to pairwise terms.
enum class PairReduction { all_pairs, best_vs_worst };

struct PreferencePair {
    std::size_t preferred = 0;
    std::size_t other = 0;
};

/// Pairs (w, l) with w preferred over l, i.e. w > l in ascending preference
/// order. best_vs_worst yields the single pair (K-1, 0).
std::vector<PreferencePair> preference_pairs(std::size_t k, PairReduction reduction);

template <typename T>
struct ResponseScores {
    std::vector<T> logprobs;  // log pi(y_k | x)
    std::vector<T> rewards;   // empty without a reward head
};

template <typename T>
ResponseScores<T> score_responses(const RefNetParams<T>& params, const PreferenceExample& example,
                                  Pipeline pipeline);

template <typename T>
struct LossGradient {
    T loss{};
    RefNetParams<T> grad;
};

/// Pairwise Bradley-Terry loss -log sigma(r_w - r_l), averaged over pairs.
template <typename T>
T rm_loss(const RefNetParams<T>& params, const PreferenceExample& example, Pipeline pipeline,
          PairReduction reduction = PairReduction::all_pairs);

template <typename T>
LossGradient<T> rm_loss_with_gradient(const RefNetParams<T>& params, const PreferenceExample& example,
                                      Pipeline pipeline, PairReduction reduction = PairReduction::all_pairs);

/// -log sigma(beta * ((lp_w - ref_w) - (lp_l - ref_l))), averaged over pairs.
template <typename T>
T dpo_loss(const RefNetParams<T>& policy, const RefNetParams<T>& reference, const PreferenceExample& example,
           T beta, Pipeline pipeline, PairReduction reduction = PairReduction::best_vs_worst);

template <typename T>
struct DpoGradient {
    T loss{};
    RefNetParams<T> policy_grad;
    /// The reference model is frozen: always all zeros.
    RefNetParams<T> reference_grad;
};

template <typename T>
DpoGradient<T> dpo_loss_with_gradient(const RefNetParams<T>& policy, const RefNetParams<T>& reference,
                                      const PreferenceExample& example, T beta, Pipeline pipeline,
                                      PairReduction reduction = PairReduction::best_vs_worst);

/// max_i |a_i - b_i| / max_i |b_i| over the flattened parameters.
template <typename T>
double relative_difference(const RefNetParams<T>& a, const RefNetParams<T>& b);

/// Packed-vs-unpacked comparison of one example.
struct EquivalenceResult {
    std::string example_id;
    double max_logit_diff = 0.0;
    double max_logprob_diff = 0.0;
    double max_reward_diff = 0.0;
    double rm_loss_diff = 0.0;
    double dpo_loss_diff = 0.0;
    double rm_grad_rel_diff = 0.0;
    double dpo_grad_rel_diff = 0.0;
};

struct EquivalenceOptions {
    double beta = 0.1;
    /// Negative control: let packed responses attend to earlier sibling responses.
    bool inject_cross_response_leak = false;
};

template <typename T>
EquivalenceResult check_equivalence(const RefNetParams<T>& policy, const RefNetParams<T>& reference,
                                    const PreferenceExample& example, const EquivalenceOptions& options = {});

struct EquivalenceTolerances {
    double logits = 1e-9;
    double losses = 1e-9;
    double grad_relative = 1e-8;
};

EquivalenceTolerances default_tolerances(Precision precision);

bool within(const EquivalenceResult& r, const EquivalenceTolerances& tol);

}  // namespace prefpack::refnet
