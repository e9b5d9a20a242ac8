#include "prefpack/refnet_losses.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace prefpack::refnet {

namespace {

// Where one response's log-probability and reward are read from a sequence.
struct Readout {
    std::size_t response = 0;
    std::vector<std::size_t> predict;
    std::vector<std::size_t> target;
    std::size_t reward_row = 0;
};

struct SequencePlan {
    TokenSeq tokens;
    std::vector<std::size_t> positions;
    MaskFn mask;
    std::vector<Readout> readouts;
};

std::vector<SequencePlan> make_plans(const PreferenceExample& ex, Pipeline pipeline, bool leak = false) {
    std::vector<SequencePlan> plans;
    if (pipeline == Pipeline::packed) {
        auto layout = std::make_shared<const PackedLayout>(pack(ex));
        SequencePlan plan;
        plan.tokens = layout->tokens;
        plan.positions = layout->position_ids;
        if (leak) {
            plan.mask = causal_mask();
        } else {
            plan.mask = [layout](std::size_t q, std::size_t k) { return mask_allows(*layout, q, k); };
        }
        for (const auto& s : segment_logprob_slices(*layout)) {
            plan.readouts.push_back(
                {s.response_index, s.predict_positions, s.target_positions, layout->response(s.response_index).end() - 1});
        }
        plans.push_back(std::move(plan));
        return plans;
    }
    const std::size_t l_in = ex.prompt.size();
    for (std::size_t k = 0; k < ex.responses.size(); ++k) {
        const auto& r = ex.responses[k];
        SequencePlan plan;
        plan.tokens = ex.prompt;
        plan.tokens.insert(plan.tokens.end(), r.begin(), r.end());
        plan.positions.resize(plan.tokens.size());
        for (std::size_t i = 0; i < plan.positions.size(); ++i) {
            plan.positions[i] = i;
        }
        plan.mask = causal_mask();
        Readout ro;
        ro.response = k;
        for (std::size_t i = 0; i < r.size(); ++i) {
            ro.predict.push_back(l_in - 1 + i);
            ro.target.push_back(l_in + i);
        }
        ro.reward_row = plan.tokens.size() - 1;
        plan.readouts.push_back(std::move(ro));
        plans.push_back(std::move(plan));
    }
    return plans;
}

template <typename T>
struct Evaluation {
    std::vector<Activations<T>> acts;
    ResponseScores<T> scores;
};

template <typename T>
Evaluation<T> evaluate(const RefNetParams<T>& params, const std::vector<SequencePlan>& plans, std::size_t k,
                       bool with_rewards) {
    if (with_rewards && params.reward_weight.empty()) {
        throw ValidationError("reward scores requested from a network without a reward head");
    }
    Evaluation<T> ev;
    ev.scores.logprobs.assign(k, T(0));
    if (with_rewards) {
        ev.scores.rewards.assign(k, T(0));
    }
    for (const auto& plan : plans) {
        ev.acts.push_back(forward(params, ForwardRequest{plan.tokens, plan.positions, plan.mask}));
        const auto& acts = ev.acts.back();
        for (const auto& ro : plan.readouts) {
            T lp = 0;
            for (std::size_t i = 0; i < ro.predict.size(); ++i) {
                lp += token_logprob(acts.logits, ro.predict[i], plan.tokens[ro.target[i]]);
            }
            ev.scores.logprobs[ro.response] = lp;
            if (with_rewards) {
                const T* h = acts.hidden.row(ro.reward_row);
                T r = params.reward_bias.data[0];
                for (std::size_t j = 0; j < acts.hidden.cols; ++j) {
                    r += params.reward_weight.data[j] * h[j];
                }
                ev.scores.rewards[ro.response] = r;
            }
        }
    }
    return ev;
}

template <typename T>
void add_into(RefNetParams<T>& total, const RefNetParams<T>& part) {
    std::vector<Matrix<T>*> dst;
    total.for_each([&](const std::string&, Matrix<T>& m) { dst.push_back(&m); });
    std::size_t i = 0;
    part.for_each([&](const std::string&, const Matrix<T>& m) {
        auto& d = *dst[i++];
        for (std::size_t j = 0; j < m.size(); ++j) {
            d.data[j] += m.data[j];
        }
    });
}

// Parameter gradient given d loss / d logprob_k and d loss / d reward_k.
template <typename T>
RefNetParams<T> backprop(const RefNetParams<T>& params, const std::vector<SequencePlan>& plans,
                         const Evaluation<T>& ev, const std::vector<T>& dlogprob, const std::vector<T>& dreward) {
    RefNetParams<T> total = zero_params<T>(params.config);
    const std::size_t vocab = params.config.vocab_size;
    const std::size_t d = params.config.d_model;
    for (std::size_t p = 0; p < plans.size(); ++p) {
        const auto& plan = plans[p];
        const auto& acts = ev.acts[p];
        Matrix<T> dlogits(acts.size(), vocab);
        Matrix<T> dhidden;
        if (!dreward.empty()) {
            dhidden = Matrix<T>(acts.size(), d);
        }
        for (const auto& ro : plan.readouts) {
            const T c = dlogprob[ro.response];
            if (c != T(0)) {
                for (std::size_t i = 0; i < ro.predict.size(); ++i) {
                    const T* row = acts.logits.row(ro.predict[i]);
                    T mx = row[0];
                    for (std::size_t j = 1; j < vocab; ++j) {
                        mx = std::max(mx, row[j]);
                    }
                    T sum = 0;
                    for (std::size_t j = 0; j < vocab; ++j) {
                        sum += std::exp(row[j] - mx);
                    }
                    T* g = dlogits.row(ro.predict[i]);
                    for (std::size_t j = 0; j < vocab; ++j) {
                        g[j] -= c * std::exp(row[j] - mx) / sum;
                    }
                    g[plan.tokens[ro.target[i]]] += c;
                }
            }
            if (!dreward.empty() && dreward[ro.response] != T(0)) {
                const T c_r = dreward[ro.response];
                T* g = dhidden.row(ro.reward_row);
                const T* h = acts.hidden.row(ro.reward_row);
                for (std::size_t j = 0; j < d; ++j) {
                    g[j] += c_r * params.reward_weight.data[j];
                    total.reward_weight.data[j] += c_r * h[j];
                }
                total.reward_bias.data[0] += c_r;
            }
        }
        add_into(total, backward(params, acts, dlogits, dhidden));
    }
    return total;
}

// log(1 + exp(x))
template <typename T>
T softplus(T x) {
    return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

// 1 / (1 + exp(x))
template <typename T>
T sigmoid_neg(T x) {
    return T(1) / (T(1) + std::exp(x));
}

template <typename T>
struct PairwiseTerms {
    T loss{};
    std::vector<T> dscore;  // d loss / d score_k
};

// mean over pairs of softplus(-scale * (s_w - s_l))
template <typename T>
PairwiseTerms<T> pairwise_loss(const std::vector<T>& scores, T scale, PairReduction reduction) {
    const auto pairs = preference_pairs(scores.size(), reduction);
    const T inv = T(1) / static_cast<T>(pairs.size());
    PairwiseTerms<T> out;
    out.dscore.assign(scores.size(), T(0));
    for (const auto& pr : pairs) {
        const T margin = scale * (scores[pr.preferred] - scores[pr.other]);
        out.loss += softplus(-margin) * inv;
        const T g = sigmoid_neg(margin) * scale * inv;
        out.dscore[pr.preferred] -= g;
        out.dscore[pr.other] += g;
    }
    return out;
}

template <typename T>
std::vector<T> dpo_scores(const ResponseScores<T>& policy, const ResponseScores<T>& reference) {
    std::vector<T> s(policy.logprobs.size());
    for (std::size_t k = 0; k < s.size(); ++k) {
        s[k] = policy.logprobs[k] - reference.logprobs[k];
    }
    return s;
}

void require_positive(double beta) {
    if (!(beta > 0.0)) {
        throw ValidationError("dpo: beta must be positive");
    }
}

}  // namespace

std::vector<PreferencePair> preference_pairs(std::size_t k, PairReduction reduction) {
    if (k < 2) {
        throw ValidationError("preference_pairs: need K >= 2");
    }
    if (reduction == PairReduction::best_vs_worst) {
        return {{k - 1, 0}};
    }
    std::vector<PreferencePair> pairs;
    for (std::size_t w = 1; w < k; ++w) {
        for (std::size_t l = 0; l < w; ++l) {
            pairs.push_back({w, l});
        }
    }
    return pairs;
}

template <typename T>
ResponseScores<T> score_responses(const RefNetParams<T>& params, const PreferenceExample& example,
                                  Pipeline pipeline) {
    const auto plans = make_plans(example, pipeline);
    return evaluate(params, plans, example.responses.size(), !params.reward_weight.empty()).scores;
}

template <typename T>
T rm_loss(const RefNetParams<T>& params, const PreferenceExample& example, Pipeline pipeline,
          PairReduction reduction) {
    const auto plans = make_plans(example, pipeline);
    const auto ev = evaluate(params, plans, example.responses.size(), true);
    return pairwise_loss(ev.scores.rewards, T(1), reduction).loss;
}

template <typename T>
LossGradient<T> rm_loss_with_gradient(const RefNetParams<T>& params, const PreferenceExample& example,
                                      Pipeline pipeline, PairReduction reduction) {
    const auto plans = make_plans(example, pipeline);
    const auto ev = evaluate(params, plans, example.responses.size(), true);
    const auto terms = pairwise_loss(ev.scores.rewards, T(1), reduction);
    const std::vector<T> no_logprob(example.responses.size(), T(0));
    return {terms.loss, backprop(params, plans, ev, no_logprob, terms.dscore)};
}

template <typename T>
T dpo_loss(const RefNetParams<T>& policy, const RefNetParams<T>& reference, const PreferenceExample& example,
           T beta, Pipeline pipeline, PairReduction reduction) {
    require_positive(static_cast<double>(beta));
    const auto plans = make_plans(example, pipeline);
    const std::size_t k = example.responses.size();
    const auto pol = evaluate(policy, plans, k, false);
    const auto ref = evaluate(reference, plans, k, false);
    return pairwise_loss(dpo_scores(pol.scores, ref.scores), beta, reduction).loss;
}

template <typename T>
DpoGradient<T> dpo_loss_with_gradient(const RefNetParams<T>& policy, const RefNetParams<T>& reference,
                                      const PreferenceExample& example, T beta, Pipeline pipeline,
                                      PairReduction reduction) {
    require_positive(static_cast<double>(beta));
    const auto plans = make_plans(example, pipeline);
    const std::size_t k = example.responses.size();
    const auto pol = evaluate(policy, plans, k, false);
    const auto ref = evaluate(reference, plans, k, false);
    const auto terms = pairwise_loss(dpo_scores(pol.scores, ref.scores), beta, reduction);
    DpoGradient<T> out;
    out.loss = terms.loss;
    out.policy_grad = backprop(policy, plans, pol, terms.dscore, {});
    out.reference_grad = zero_params<T>(reference.config);
    return out;
}

template <typename T>
double relative_difference(const RefNetParams<T>& a, const RefNetParams<T>& b) {
    const auto fa = a.flatten();
    const auto fb = b.flatten();
    if (fa.size() != fb.size()) {
        throw ValidationError("relative_difference: parameter shapes differ");
    }
    double diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < fa.size(); ++i) {
        diff = std::max(diff, std::abs(static_cast<double>(fa[i]) - static_cast<double>(fb[i])));
        scale = std::max(scale, std::abs(static_cast<double>(fb[i])));
    }
    if (scale == 0.0) {
        return diff;
    }
    return diff / scale;
}

template <typename T>
EquivalenceResult check_equivalence(const RefNetParams<T>& policy, const RefNetParams<T>& reference,
                                    const PreferenceExample& example, const EquivalenceOptions& options) {
    const std::size_t k = example.responses.size();
    const std::size_t l_in = example.prompt.size();
    const auto packed_plans = make_plans(example, Pipeline::packed, options.inject_cross_response_leak);
    const auto unpacked_plans = make_plans(example, Pipeline::unpacked);
    const bool rewards = !policy.reward_weight.empty();
    const auto packed = evaluate(policy, packed_plans, k, rewards);
    const auto unpacked = evaluate(policy, unpacked_plans, k, rewards);

    EquivalenceResult r;
    r.example_id = example.id;

    // Row correspondence: packed prompt row i <-> row i of every unpacked
    // sequence; packed response k row start+i <-> unpacked sequence k row l_in+i.
    const auto& packed_logits = packed.acts.front().logits;
    const auto layout = pack(example);
    auto row_diff = [&](std::size_t packed_row, const Matrix<T>& other, std::size_t other_row) {
        double m = 0.0;
        const T* a = packed_logits.row(packed_row);
        const T* b = other.row(other_row);
        for (std::size_t j = 0; j < packed_logits.cols; ++j) {
            m = std::max(m, std::abs(static_cast<double>(a[j]) - static_cast<double>(b[j])));
        }
        return m;
    };
    for (std::size_t resp = 0; resp < k; ++resp) {
        const auto& other = unpacked.acts[resp].logits;
        for (std::size_t i = 0; i < l_in; ++i) {
            r.max_logit_diff = std::max(r.max_logit_diff, row_diff(i, other, i));
        }
        const Segment& s = layout.response(resp);
        for (std::size_t i = 0; i < s.length; ++i) {
            r.max_logit_diff = std::max(r.max_logit_diff, row_diff(s.start + i, other, l_in + i));
        }
        r.max_logprob_diff = std::max(
            r.max_logprob_diff,
            std::abs(static_cast<double>(packed.scores.logprobs[resp]) - static_cast<double>(unpacked.scores.logprobs[resp])));
        if (rewards) {
            r.max_reward_diff = std::max(
                r.max_reward_diff,
                std::abs(static_cast<double>(packed.scores.rewards[resp]) - static_cast<double>(unpacked.scores.rewards[resp])));
        }
    }

    const T beta = static_cast<T>(options.beta);
    auto dpo_for = [&](const std::vector<SequencePlan>& plans) {
        const auto pol = evaluate(policy, plans, k, false);
        const auto ref = evaluate(reference, plans, k, false);
        const auto terms = pairwise_loss(dpo_scores(pol.scores, ref.scores), beta, PairReduction::best_vs_worst);
        return LossGradient<T>{terms.loss, backprop(policy, plans, pol, terms.dscore, {})};
    };
    const auto dpo_packed = dpo_for(packed_plans);
    const auto dpo_unpacked = dpo_for(unpacked_plans);
    r.dpo_loss_diff = std::abs(static_cast<double>(dpo_packed.loss) - static_cast<double>(dpo_unpacked.loss));
    r.dpo_grad_rel_diff = relative_difference(dpo_packed.grad, dpo_unpacked.grad);

    if (rewards) {
        auto rm_for = [&](const std::vector<SequencePlan>& plans, const Evaluation<T>& ev) {
            const auto terms = pairwise_loss(ev.scores.rewards, T(1), PairReduction::all_pairs);
            const std::vector<T> no_logprob(k, T(0));
            return LossGradient<T>{terms.loss, backprop(policy, plans, ev, no_logprob, terms.dscore)};
        };
        const auto rm_packed = rm_for(packed_plans, packed);
        const auto rm_unpacked = rm_for(unpacked_plans, unpacked);
        r.rm_loss_diff = std::abs(static_cast<double>(rm_packed.loss) - static_cast<double>(rm_unpacked.loss));
        r.rm_grad_rel_diff = relative_difference(rm_packed.grad, rm_unpacked.grad);
    }
    return r;
}

EquivalenceTolerances default_tolerances(Precision precision) {
    if (precision == Precision::fp32) {
        return {1e-4, 1e-4, 1e-3};
    }
    return {1e-9, 1e-9, 1e-8};
}

bool within(const EquivalenceResult& r, const EquivalenceTolerances& tol) {
    return r.max_logit_diff <= tol.logits && r.max_logprob_diff <= tol.losses && r.max_reward_diff <= tol.losses &&
           r.rm_loss_diff <= tol.losses && r.dpo_loss_diff <= tol.losses && r.rm_grad_rel_diff <= tol.grad_relative &&
           r.dpo_grad_rel_diff <= tol.grad_relative;
}

#define PREFPACK_INSTANTIATE(T)                                                                                  \
    template ResponseScores<T> score_responses<T>(const RefNetParams<T>&, const PreferenceExample&, Pipeline);   \
    template T rm_loss<T>(const RefNetParams<T>&, const PreferenceExample&, Pipeline, PairReduction);            \
    template LossGradient<T> rm_loss_with_gradient<T>(const RefNetParams<T>&, const PreferenceExample&, Pipeline, \
                                                      PairReduction);                                            \
    template T dpo_loss<T>(const RefNetParams<T>&, const RefNetParams<T>&, const PreferenceExample&, T, Pipeline, \
                           PairReduction);                                                                       \
    template DpoGradient<T> dpo_loss_with_gradient<T>(const RefNetParams<T>&, const RefNetParams<T>&,             \
                                                      const PreferenceExample&, T, Pipeline, PairReduction);     \
    template double relative_difference<T>(const RefNetParams<T>&, const RefNetParams<T>&);                      \
    template EquivalenceResult check_equivalence<T>(const RefNetParams<T>&, const RefNetParams<T>&,              \
                                                    const PreferenceExample&, const EquivalenceOptions&);

PREFPACK_INSTANTIATE(float)
PREFPACK_INSTANTIATE(double)
#undef PREFPACK_INSTANTIATE

}  // namespace prefpack::refnet
