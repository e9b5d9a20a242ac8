#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "prefpack/dataset.hpp"
#include "prefpack/packer.hpp"

// Small decoder-only transformer used as a numerical oracle: it accepts an
// arbitrary attention predicate and explicit position ids, and provides exact
// reverse-mode gradients so packed and batched computation can be compared
// on logits, losses and parameter gradients.

namespace prefpack::refnet {

enum class Precision { fp32, fp64 };
enum class PositionalScheme { learned_absolute, rotary };

struct RefNetConfig {
    std::size_t vocab_size = kByteVocabSize;
    std::size_t d_model = 32;
    std::size_t n_heads = 2;
    std::size_t n_layers = 2;
    std::size_t d_ff = 64;
    std::size_t max_position = 512;
    Precision precision = Precision::fp64;
    PositionalScheme positional = PositionalScheme::learned_absolute;
    bool reward_head = true;

    std::size_t head_dim() const noexcept { return d_model / n_heads; }
};

void validate(const RefNetConfig& config);

/// Closed-form number of scalar parameters for `config`.
std::size_t parameter_count(const RefNetConfig& config);

std::string to_string(Precision p);
std::string to_string(PositionalScheme s);
Precision parse_precision(const std::string& s);
PositionalScheme parse_positional(const std::string& s);

/// Dense row-major matrix; vectors are stored as 1 x n.
template <typename T>
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, T fill = T(0)) : rows(r), cols(c), data(r * c, fill) {}

    T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    T* row(std::size_t r) { return data.data() + r * cols; }
    const T* row(std::size_t r) const { return data.data() + r * cols; }
    std::size_t size() const noexcept { return data.size(); }
    bool empty() const noexcept { return data.empty(); }

    friend bool operator==(const Matrix&, const Matrix&) = default;
};

template <typename T>
struct LayerParams {
    Matrix<T> ln1_gain, ln1_bias;
    Matrix<T> wq, wk, wv, wo;  // d x d
    Matrix<T> ln2_gain, ln2_bias;
    Matrix<T> w1, b1;  // d x d_ff, 1 x d_ff
    Matrix<T> w2, b2;  // d_ff x d, 1 x d

    friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

/// All weights of the network. Gradients use the same type.
template <typename T>
struct RefNetParams {
    RefNetConfig config;
    Matrix<T> token_embedding;     // V x d
    Matrix<T> position_embedding;  // max_position x d, empty for rotary
    std::vector<LayerParams<T>> layers;
    Matrix<T> final_gain, final_bias;
    Matrix<T> lm_head;        // d x V
    Matrix<T> reward_weight;  // 1 x d, empty without a reward head
    Matrix<T> reward_bias;    // 1 x 1, empty without a reward head

    /// Visits every tensor in a fixed order as f(name, matrix).
    template <typename F>
    void for_each(F&& f) {
        visit(*this, f);
    }
    template <typename F>
    void for_each(F&& f) const {
        visit(*this, f);
    }

    std::size_t numel() const;
    std::vector<T> flatten() const;
    /// Scalar at a flat index in for_each order.
    T& at_flat(std::size_t index);

    friend bool operator==(const RefNetParams& a, const RefNetParams& b) {
        std::vector<const Matrix<T>*> lhs, rhs;
        a.for_each([&](const std::string&, const Matrix<T>& m) { lhs.push_back(&m); });
        b.for_each([&](const std::string&, const Matrix<T>& m) { rhs.push_back(&m); });
        return std::equal(lhs.begin(), lhs.end(), rhs.begin(), rhs.end(),
                          [](const Matrix<T>* x, const Matrix<T>* y) { return *x == *y; });
    }

private:
    template <typename Self, typename F>
    static void visit(Self& self, F& f) {
        f("token_embedding", self.token_embedding);
        if (!self.position_embedding.empty()) {
            f("position_embedding", self.position_embedding);
        }
        for (std::size_t i = 0; i < self.layers.size(); ++i) {
            auto& l = self.layers[i];
            const std::string p = "layers." + std::to_string(i) + ".";
            f(p + "ln1_gain", l.ln1_gain);
            f(p + "ln1_bias", l.ln1_bias);
            f(p + "wq", l.wq);
            f(p + "wk", l.wk);
            f(p + "wv", l.wv);
            f(p + "wo", l.wo);
            f(p + "ln2_gain", l.ln2_gain);
            f(p + "ln2_bias", l.ln2_bias);
            f(p + "w1", l.w1);
            f(p + "b1", l.b1);
            f(p + "w2", l.w2);
            f(p + "b2", l.b2);
        }
        f("final_gain", self.final_gain);
        f("final_bias", self.final_bias);
        f("lm_head", self.lm_head);
        if (!self.reward_weight.empty()) {
            f("reward_weight", self.reward_weight);
            f("reward_bias", self.reward_bias);
        }
    }
};

/// Parameters shaped like `config` with every entry zero.
template <typename T>
RefNetParams<T> zero_params(const RefNetConfig& config);

/// Deterministic scaled-uniform initialisation: weight matrices draw from
/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), norm gains are 1, biases 0.
template <typename T>
RefNetParams<T> init_params(const RefNetConfig& config, std::uint64_t seed);

template <typename To, typename From>
RefNetParams<To> cast_params(const RefNetParams<From>& params);

/// Checkpoint as JSON: {"config": {...}, "tensors": [{"name", "shape", "data"}]}.
std::string params_to_json(const RefNetParams<double>& params);
RefNetParams<double> params_from_json(const std::string& text);

using MaskFn = std::function<bool(std::size_t q, std::size_t k)>;

MaskFn causal_mask();
MaskFn packed_mask(const PackedLayout& layout);
MaskFn dense_mask(DenseMask mask);

struct ForwardRequest {
    std::span<const TokenId> tokens;
    std::span<const std::size_t> position_ids;
    MaskFn mask;
};

/// Everything the backward pass needs, plus the outputs.
template <typename T>
struct Activations {
    struct Layer {
        Matrix<T> input;
        Matrix<T> ln1_hat;
        std::vector<T> ln1_inv_std;
        Matrix<T> ln1_out;
        Matrix<T> q, k, v;  // after rotary, when enabled
        // probs[h][query][i] is the weight of visible[query][i].
        std::vector<std::vector<std::vector<T>>> probs;
        Matrix<T> context;
        Matrix<T> mid;
        Matrix<T> ln2_hat;
        std::vector<T> ln2_inv_std;
        Matrix<T> ln2_out;
        Matrix<T> ff_pre;
        Matrix<T> ff_act;
    };

    std::vector<TokenId> tokens;
    std::vector<std::size_t> position_ids;
    std::vector<std::vector<std::size_t>> visible;  // ascending key positions per query
    std::vector<Layer> layers;
    Matrix<T> final_input;
    Matrix<T> final_hat;
    std::vector<T> final_inv_std;
    Matrix<T> hidden;  // final normed hidden states, L x d
    Matrix<T> logits;  // L x V

    std::size_t size() const noexcept { return tokens.size(); }
};

/// Runs the network. Disallowed (q, k) pairs get exactly zero attention
/// weight. Throws ValidationError for malformed requests and NumericalError
/// when an activation becomes non-finite.
template <typename T>
Activations<T> forward(const RefNetParams<T>& params, const ForwardRequest& req);

/// Reverse pass for upstream gradients on logits and on the final hidden
/// states (either may be empty). Returns parameter gradients.
template <typename T>
RefNetParams<T> backward(const RefNetParams<T>& params, const Activations<T>& acts,
                         const Matrix<T>& dlogits, const Matrix<T>& dhidden);

/// log softmax(logits[row])[target]
template <typename T>
T token_logprob(const Matrix<T>& logits, std::size_t row, TokenId target);

/// Sum of next-token log-probabilities of response k read out of packed logits.
template <typename T>
T response_logprob(const Matrix<T>& logits, const PackedLayout& layout, std::size_t k);

/// Reward head applied to the hidden state of response k's last token.
template <typename T>
T reward_score(const RefNetParams<T>& params, const Matrix<T>& hidden, const PackedLayout& layout,
               std::size_t k);

}  // namespace prefpack::refnet
