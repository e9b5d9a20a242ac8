#include "prefpack/refnet.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "json.hpp"

namespace prefpack::refnet {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kRotaryBase = 10000.0;

template <typename T>
Matrix<T> matmul(const Matrix<T>& x, const Matrix<T>& w) {
    Matrix<T> y(x.rows, w.cols);
    for (std::size_t i = 0; i < x.rows; ++i) {
        T* out = y.row(i);
        const T* in = x.row(i);
        for (std::size_t p = 0; p < x.cols; ++p) {
            const T a = in[p];
            const T* wr = w.row(p);
            for (std::size_t j = 0; j < w.cols; ++j) {
                out[j] += a * wr[j];
            }
        }
    }
    return y;
}

// dx = dy * w^T
template <typename T>
Matrix<T> matmul_wt(const Matrix<T>& dy, const Matrix<T>& w) {
    Matrix<T> dx(dy.rows, w.rows);
    for (std::size_t i = 0; i < dy.rows; ++i) {
        const T* g = dy.row(i);
        T* out = dx.row(i);
        for (std::size_t p = 0; p < w.rows; ++p) {
            const T* wr = w.row(p);
            T acc = 0;
            for (std::size_t j = 0; j < w.cols; ++j) {
                acc += g[j] * wr[j];
            }
            out[p] = acc;
        }
    }
    return dx;
}

// dw += x^T * dy
template <typename T>
void accumulate_xt_dy(Matrix<T>& dw, const Matrix<T>& x, const Matrix<T>& dy) {
    for (std::size_t i = 0; i < x.rows; ++i) {
        const T* in = x.row(i);
        const T* g = dy.row(i);
        for (std::size_t p = 0; p < x.cols; ++p) {
            const T a = in[p];
            if (a == T(0)) {
                continue;
            }
            T* out = dw.row(p);
            for (std::size_t j = 0; j < dy.cols; ++j) {
                out[j] += a * g[j];
            }
        }
    }
}

template <typename T>
void add_row_bias(Matrix<T>& y, const Matrix<T>& bias) {
    for (std::size_t i = 0; i < y.rows; ++i) {
        T* r = y.row(i);
        for (std::size_t j = 0; j < y.cols; ++j) {
            r[j] += bias.data[j];
        }
    }
}

template <typename T>
void accumulate_colsum(Matrix<T>& db, const Matrix<T>& dy) {
    for (std::size_t i = 0; i < dy.rows; ++i) {
        const T* g = dy.row(i);
        for (std::size_t j = 0; j < dy.cols; ++j) {
            db.data[j] += g[j];
        }
    }
}

template <typename T>
void add_inplace(Matrix<T>& a, const Matrix<T>& b) {
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        a.data[i] += b.data[i];
    }
}

template <typename T>
void layer_norm(const Matrix<T>& x, const Matrix<T>& gain, const Matrix<T>& bias, Matrix<T>& hat,
                std::vector<T>& inv_std, Matrix<T>& out) {
    const std::size_t n = x.cols;
    hat = Matrix<T>(x.rows, n);
    out = Matrix<T>(x.rows, n);
    inv_std.assign(x.rows, T(0));
    for (std::size_t i = 0; i < x.rows; ++i) {
        const T* r = x.row(i);
        T mean = 0;
        for (std::size_t j = 0; j < n; ++j) {
            mean += r[j];
        }
        mean /= static_cast<T>(n);
        T var = 0;
        for (std::size_t j = 0; j < n; ++j) {
            const T d = r[j] - mean;
            var += d * d;
        }
        var /= static_cast<T>(n);
        const T inv = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
        inv_std[i] = inv;
        for (std::size_t j = 0; j < n; ++j) {
            const T h = (r[j] - mean) * inv;
            hat(i, j) = h;
            out(i, j) = gain.data[j] * h + bias.data[j];
        }
    }
}

template <typename T>
Matrix<T> layer_norm_backward(const Matrix<T>& dy, const Matrix<T>& hat, const std::vector<T>& inv_std,
                              const Matrix<T>& gain, Matrix<T>& dgain, Matrix<T>& dbias) {
    const std::size_t n = dy.cols;
    Matrix<T> dx(dy.rows, n);
    std::vector<T> dhat(n);
    for (std::size_t i = 0; i < dy.rows; ++i) {
        T mean_dhat = 0, mean_dhat_hat = 0;
        for (std::size_t j = 0; j < n; ++j) {
            const T g = dy(i, j);
            dgain.data[j] += g * hat(i, j);
            dbias.data[j] += g;
            dhat[j] = g * gain.data[j];
            mean_dhat += dhat[j];
            mean_dhat_hat += dhat[j] * hat(i, j);
        }
        mean_dhat /= static_cast<T>(n);
        mean_dhat_hat /= static_cast<T>(n);
        for (std::size_t j = 0; j < n; ++j) {
            dx(i, j) = inv_std[i] * (dhat[j] - mean_dhat - hat(i, j) * mean_dhat_hat);
        }
    }
    return dx;
}

// tanh approximation of GELU
template <typename T>
T gelu(T u) {
    const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
    const T t = std::tanh(c * (u + static_cast<T>(0.044715) * u * u * u));
    return static_cast<T>(0.5) * u * (T(1) + t);
}

template <typename T>
T gelu_grad(T u) {
    const T c = static_cast<T>(0.7978845608028654);
    const T a = static_cast<T>(0.044715);
    const T t = std::tanh(c * (u + a * u * u * u));
    return static_cast<T>(0.5) * (T(1) + t) +
           static_cast<T>(0.5) * u * (T(1) - t * t) * c * (T(1) + T(3) * a * u * u);
}

// Rotates consecutive pairs inside each head by pos * base^(-2i/head_dim).
// direction = -1 applies the inverse (transpose) rotation.
template <typename T>
void apply_rotary(Matrix<T>& m, const std::vector<std::size_t>& positions, std::size_t n_heads,
                  int direction) {
    const std::size_t head_dim = m.cols / n_heads;
    for (std::size_t i = 0; i < m.rows; ++i) {
        T* r = m.row(i);
        for (std::size_t p = 0; p < head_dim / 2; ++p) {
            const double freq = std::pow(kRotaryBase, -2.0 * static_cast<double>(p) / static_cast<double>(head_dim));
            const double angle = static_cast<double>(positions[i]) * freq;
            const T cs = static_cast<T>(std::cos(angle));
            const T sn = static_cast<T>(direction * std::sin(angle));
            for (std::size_t h = 0; h < n_heads; ++h) {
                T* v = r + h * head_dim + 2 * p;
                const T a = v[0], b = v[1];
                v[0] = a * cs - b * sn;
                v[1] = a * sn + b * cs;
            }
        }
    }
}

template <typename T>
void check_finite(const Matrix<T>& m, const char* what, int layer) {
    for (T v : m.data) {
        if (!std::isfinite(v)) {
            throw NumericalError(std::string("non-finite value in ") + what, layer);
        }
    }
}

template <typename T>
RefNetParams<T> shaped_params(const RefNetConfig& cfg) {
    validate(cfg);
    const std::size_t d = cfg.d_model, f = cfg.d_ff, v = cfg.vocab_size;
    RefNetParams<T> p;
    p.config = cfg;
    p.token_embedding = Matrix<T>(v, d);
    if (cfg.positional == PositionalScheme::learned_absolute) {
        p.position_embedding = Matrix<T>(cfg.max_position, d);
    }
    p.layers.resize(cfg.n_layers);
    for (auto& l : p.layers) {
        l.ln1_gain = Matrix<T>(1, d);
        l.ln1_bias = Matrix<T>(1, d);
        l.wq = Matrix<T>(d, d);
        l.wk = Matrix<T>(d, d);
        l.wv = Matrix<T>(d, d);
        l.wo = Matrix<T>(d, d);
        l.ln2_gain = Matrix<T>(1, d);
        l.ln2_bias = Matrix<T>(1, d);
        l.w1 = Matrix<T>(d, f);
        l.b1 = Matrix<T>(1, f);
        l.w2 = Matrix<T>(f, d);
        l.b2 = Matrix<T>(1, d);
    }
    p.final_gain = Matrix<T>(1, d);
    p.final_bias = Matrix<T>(1, d);
    p.lm_head = Matrix<T>(d, v);
    if (cfg.reward_head) {
        p.reward_weight = Matrix<T>(1, d);
        p.reward_bias = Matrix<T>(1, 1);
    }
    return p;
}

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

void validate(const RefNetConfig& c) {
    if (c.vocab_size < 1 || c.d_model < 1 || c.n_heads < 1 || c.d_ff < 1 || c.max_position < 1) {
        throw ValidationError("refnet config: sizes must be positive");
    }
    if (c.d_model % c.n_heads != 0) {
        throw ValidationError("refnet config: d_model " + std::to_string(c.d_model) +
                              " is not divisible by n_heads " + std::to_string(c.n_heads));
    }
    if (c.positional == PositionalScheme::rotary && c.head_dim() % 2 != 0) {
        throw ValidationError("refnet config: rotary positions need an even head dimension");
    }
}

std::size_t parameter_count(const RefNetConfig& c) {
    const std::size_t d = c.d_model, f = c.d_ff, v = c.vocab_size;
    const std::size_t per_layer = 4 * d + 4 * d * d + 2 * d * f + f + d;
    std::size_t n = v * d + c.n_layers * per_layer + 2 * d + d * v;
    if (c.positional == PositionalScheme::learned_absolute) {
        n += c.max_position * d;
    }
    if (c.reward_head) {
        n += d + 1;
    }
    return n;
}

std::string to_string(Precision p) {
    return p == Precision::fp32 ? "fp32" : "fp64";
}

std::string to_string(PositionalScheme s) {
    return s == PositionalScheme::rotary ? "rotary" : "learned-absolute";
}

Precision parse_precision(const std::string& s) {
    if (s == "fp32") return Precision::fp32;
    if (s == "fp64") return Precision::fp64;
    throw ValidationError("unknown precision '" + s + "' (expected fp32 or fp64)");
}

PositionalScheme parse_positional(const std::string& s) {
    if (s == "learned-absolute") return PositionalScheme::learned_absolute;
    if (s == "rotary") return PositionalScheme::rotary;
    throw ValidationError("unknown positional scheme '" + s + "' (expected learned-absolute or rotary)");
}

template <typename T>
std::size_t RefNetParams<T>::numel() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Matrix<T>& m) { n += m.size(); });
    return n;
}

template <typename T>
std::vector<T> RefNetParams<T>::flatten() const {
    std::vector<T> out;
    out.reserve(numel());
    for_each([&](const std::string&, const Matrix<T>& m) { out.insert(out.end(), m.data.begin(), m.data.end()); });
    return out;
}

template <typename T>
T& RefNetParams<T>::at_flat(std::size_t index) {
    T* found = nullptr;
    std::size_t offset = 0;
    for_each([&](const std::string&, Matrix<T>& m) {
        if (!found && index < offset + m.size()) {
            found = &m.data[index - offset];
        }
        offset += m.size();
    });
    if (!found) {
        throw std::out_of_range("parameter index " + std::to_string(index) + " out of range");
    }
    return *found;
}

template <typename T>
RefNetParams<T> zero_params(const RefNetConfig& config) {
    return shaped_params<T>(config);
}

template <typename T>
RefNetParams<T> init_params(const RefNetConfig& config, std::uint64_t seed) {
    RefNetParams<T> p = shaped_params<T>(config);
    std::mt19937_64 rng(seed);
    p.for_each([&](const std::string& name, Matrix<T>& m) {
        if (ends_with(name, "_gain")) {
            std::fill(m.data.begin(), m.data.end(), T(1));
            return;
        }
        if (ends_with(name, "_bias") || ends_with(name, ".b1") || ends_with(name, ".b2")) {
            return;
        }
        // Embedding tables are indexed rather than multiplied; scale them by d.
        const bool table = name == "token_embedding" || name == "position_embedding";
        const std::size_t fan_in = table || name == "reward_weight" ? config.d_model : m.rows;
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (auto& v : m.data) {
            v = static_cast<T>(dist(rng));
        }
    });
    return p;
}

template <typename To, typename From>
RefNetParams<To> cast_params(const RefNetParams<From>& params) {
    RefNetParams<To> out = shaped_params<To>(params.config);
    std::vector<Matrix<To>*> dst;
    out.for_each([&](const std::string&, Matrix<To>& m) { dst.push_back(&m); });
    std::size_t i = 0;
    params.for_each([&](const std::string&, const Matrix<From>& m) {
        auto& d = *dst[i++];
        for (std::size_t j = 0; j < m.size(); ++j) {
            d.data[j] = static_cast<To>(m.data[j]);
        }
    });
    return out;
}

std::string params_to_json(const RefNetParams<double>& params) {
    using json = nlohmann::ordered_json;
    const auto& c = params.config;
    json j;
    j["config"] = {{"vocab_size", c.vocab_size},
                   {"d_model", c.d_model},
                   {"n_heads", c.n_heads},
                   {"n_layers", c.n_layers},
                   {"d_ff", c.d_ff},
                   {"max_position", c.max_position},
                   {"precision", to_string(c.precision)},
                   {"positional_scheme", to_string(c.positional)},
                   {"reward_head", c.reward_head}};
    json tensors = json::array();
    params.for_each([&](const std::string& name, const Matrix<double>& m) {
        tensors.push_back({{"name", name}, {"shape", {m.rows, m.cols}}, {"data", m.data}});
    });
    j["tensors"] = std::move(tensors);
    return j.dump();
}

RefNetParams<double> params_from_json(const std::string& text) {
    using json = nlohmann::json;
    try {
        const json j = json::parse(text);
        const auto& jc = j.at("config");
        RefNetConfig c;
        c.vocab_size = jc.at("vocab_size").get<std::size_t>();
        c.d_model = jc.at("d_model").get<std::size_t>();
        c.n_heads = jc.at("n_heads").get<std::size_t>();
        c.n_layers = jc.at("n_layers").get<std::size_t>();
        c.d_ff = jc.at("d_ff").get<std::size_t>();
        c.max_position = jc.at("max_position").get<std::size_t>();
        c.precision = parse_precision(jc.at("precision").get<std::string>());
        c.positional = parse_positional(jc.at("positional_scheme").get<std::string>());
        c.reward_head = jc.at("reward_head").get<bool>();
        RefNetParams<double> p = shaped_params<double>(c);
        const auto& tensors = j.at("tensors");
        std::size_t i = 0;
        p.for_each([&](const std::string& name, Matrix<double>& m) {
            if (i >= tensors.size()) {
                throw ParseError("checkpoint is missing tensor '" + name + "'", 0);
            }
            const auto& t = tensors[i++];
            if (t.at("name").get<std::string>() != name) {
                throw ParseError("checkpoint tensor order mismatch at '" + name + "'", 0);
            }
            const auto shape = t.at("shape").get<std::vector<std::size_t>>();
            if (shape.size() != 2 || shape[0] != m.rows || shape[1] != m.cols) {
                throw ParseError("checkpoint tensor '" + name + "' has the wrong shape", 0);
            }
            m.data = t.at("data").get<std::vector<double>>();
            if (m.data.size() != m.rows * m.cols) {
                throw ParseError("checkpoint tensor '" + name + "' has the wrong element count", 0);
            }
        });
        if (i != tensors.size()) {
            throw ParseError("checkpoint has unexpected extra tensors", 0);
        }
        return p;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed checkpoint: ") + e.what(), 0);
    }
}

MaskFn causal_mask() {
    return [](std::size_t q, std::size_t k) { return k <= q; };
}

MaskFn packed_mask(const PackedLayout& layout) {
    return [&layout](std::size_t q, std::size_t k) { return mask_allows(layout, q, k); };
}

MaskFn dense_mask(DenseMask mask) {
    return [m = std::move(mask)](std::size_t q, std::size_t k) { return bool(m.at(q).at(k)); };
}

template <typename T>
Activations<T> forward(const RefNetParams<T>& params, const ForwardRequest& req) {
    const auto& cfg = params.config;
    const std::size_t n = req.tokens.size();
    const std::size_t d = cfg.d_model;
    const std::size_t heads = cfg.n_heads;
    const std::size_t hd = cfg.head_dim();
    if (n == 0) {
        throw ValidationError("forward: empty token sequence");
    }
    if (req.position_ids.size() != n) {
        throw ValidationError("forward: tokens and position_ids differ in length");
    }
    if (!req.mask) {
        throw ValidationError("forward: no attention mask given");
    }

    Activations<T> acts;
    acts.tokens.assign(req.tokens.begin(), req.tokens.end());
    acts.position_ids.assign(req.position_ids.begin(), req.position_ids.end());
    for (std::size_t i = 0; i < n; ++i) {
        if (acts.tokens[i] >= cfg.vocab_size) {
            throw ValidationError("forward: token id " + std::to_string(acts.tokens[i]) + " >= vocab size");
        }
        if (acts.position_ids[i] >= cfg.max_position) {
            throw ValidationError("forward: position id " + std::to_string(acts.position_ids[i]) +
                                  " >= max_position " + std::to_string(cfg.max_position));
        }
    }
    acts.visible.resize(n);
    for (std::size_t q = 0; q < n; ++q) {
        for (std::size_t k = 0; k < n; ++k) {
            if (req.mask(q, k)) {
                acts.visible[q].push_back(k);
            }
        }
        if (acts.visible[q].empty()) {
            throw ValidationError("forward: query " + std::to_string(q) + " has no visible keys");
        }
    }

    Matrix<T> x(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const T* e = params.token_embedding.row(acts.tokens[i]);
        T* r = x.row(i);
        for (std::size_t j = 0; j < d; ++j) {
            r[j] = e[j];
        }
        if (!params.position_embedding.empty()) {
            const T* pe = params.position_embedding.row(acts.position_ids[i]);
            for (std::size_t j = 0; j < d; ++j) {
                r[j] += pe[j];
            }
        }
    }
    check_finite(x, "embedding", -1);

    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    acts.layers.resize(cfg.n_layers);
    for (std::size_t li = 0; li < cfg.n_layers; ++li) {
        const auto& lp = params.layers[li];
        auto& c = acts.layers[li];
        c.input = x;
        layer_norm(c.input, lp.ln1_gain, lp.ln1_bias, c.ln1_hat, c.ln1_inv_std, c.ln1_out);
        c.q = matmul(c.ln1_out, lp.wq);
        c.k = matmul(c.ln1_out, lp.wk);
        c.v = matmul(c.ln1_out, lp.wv);
        if (cfg.positional == PositionalScheme::rotary) {
            apply_rotary(c.q, acts.position_ids, heads, +1);
            apply_rotary(c.k, acts.position_ids, heads, +1);
        }

        c.context = Matrix<T>(n, d);
        c.probs.assign(heads, std::vector<std::vector<T>>(n));
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * hd;
            for (std::size_t q = 0; q < n; ++q) {
                const auto& keys = acts.visible[q];
                auto& pr = c.probs[h][q];
                pr.resize(keys.size());
                const T* qv = c.q.row(q) + off;
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t i = 0; i < keys.size(); ++i) {
                    const T* kv = c.k.row(keys[i]) + off;
                    T s = 0;
                    for (std::size_t j = 0; j < hd; ++j) {
                        s += qv[j] * kv[j];
                    }
                    pr[i] = s * scale;
                    mx = std::max(mx, pr[i]);
                }
                T sum = 0;
                for (auto& v : pr) {
                    v = std::exp(v - mx);
                    sum += v;
                }
                T* out = c.context.row(q) + off;
                for (std::size_t i = 0; i < keys.size(); ++i) {
                    pr[i] /= sum;
                    const T* vv = c.v.row(keys[i]) + off;
                    for (std::size_t j = 0; j < hd; ++j) {
                        out[j] += pr[i] * vv[j];
                    }
                }
            }
        }

        c.mid = matmul(c.context, lp.wo);
        add_inplace(c.mid, c.input);
        layer_norm(c.mid, lp.ln2_gain, lp.ln2_bias, c.ln2_hat, c.ln2_inv_std, c.ln2_out);
        c.ff_pre = matmul(c.ln2_out, lp.w1);
        add_row_bias(c.ff_pre, lp.b1);
        c.ff_act = c.ff_pre;
        for (auto& v : c.ff_act.data) {
            v = gelu(v);
        }
        x = matmul(c.ff_act, lp.w2);
        add_row_bias(x, lp.b2);
        add_inplace(x, c.mid);
        check_finite(x, "residual stream", static_cast<int>(li));
    }

    acts.final_input = x;
    layer_norm(acts.final_input, params.final_gain, params.final_bias, acts.final_hat, acts.final_inv_std,
               acts.hidden);
    acts.logits = matmul(acts.hidden, params.lm_head);
    check_finite(acts.logits, "logits", static_cast<int>(cfg.n_layers));
    return acts;
}

template <typename T>
RefNetParams<T> backward(const RefNetParams<T>& params, const Activations<T>& acts, const Matrix<T>& dlogits,
                         const Matrix<T>& dhidden) {
    const auto& cfg = params.config;
    const std::size_t n = acts.size();
    const std::size_t d = cfg.d_model;
    const std::size_t heads = cfg.n_heads;
    const std::size_t hd = cfg.head_dim();
    RefNetParams<T> g = shaped_params<T>(cfg);

    Matrix<T> dh(n, d);
    if (!dlogits.empty()) {
        accumulate_xt_dy(g.lm_head, acts.hidden, dlogits);
        dh = matmul_wt(dlogits, params.lm_head);
    }
    if (!dhidden.empty()) {
        add_inplace(dh, dhidden);
    }
    Matrix<T> dx = layer_norm_backward(dh, acts.final_hat, acts.final_inv_std, params.final_gain, g.final_gain,
                                       g.final_bias);

    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    for (std::size_t li = cfg.n_layers; li-- > 0;) {
        const auto& lp = params.layers[li];
        auto& lg = g.layers[li];
        const auto& c = acts.layers[li];

        // x_out = mid + ff(ln2(mid))
        accumulate_colsum(lg.b2, dx);
        accumulate_xt_dy(lg.w2, c.ff_act, dx);
        Matrix<T> dpre = matmul_wt(dx, lp.w2);
        for (std::size_t i = 0; i < dpre.data.size(); ++i) {
            dpre.data[i] *= gelu_grad(c.ff_pre.data[i]);
        }
        accumulate_colsum(lg.b1, dpre);
        accumulate_xt_dy(lg.w1, c.ln2_out, dpre);
        Matrix<T> dln2 = matmul_wt(dpre, lp.w1);
        Matrix<T> dmid = layer_norm_backward(dln2, c.ln2_hat, c.ln2_inv_std, lp.ln2_gain, lg.ln2_gain, lg.ln2_bias);
        add_inplace(dmid, dx);

        // mid = input + attn(ln1(input)) * wo
        accumulate_xt_dy(lg.wo, c.context, dmid);
        Matrix<T> dctx = matmul_wt(dmid, lp.wo);
        Matrix<T> dq(n, d), dk(n, d), dv(n, d);
        std::vector<T> dp;
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * hd;
            for (std::size_t q = 0; q < n; ++q) {
                const auto& keys = acts.visible[q];
                const auto& pr = c.probs[h][q];
                const T* dc = dctx.row(q) + off;
                dp.assign(keys.size(), T(0));
                T weighted = 0;
                for (std::size_t i = 0; i < keys.size(); ++i) {
                    const T* vv = c.v.row(keys[i]) + off;
                    T* dvv = dv.row(keys[i]) + off;
                    T s = 0;
                    for (std::size_t j = 0; j < hd; ++j) {
                        s += dc[j] * vv[j];
                        dvv[j] += pr[i] * dc[j];
                    }
                    dp[i] = s;
                    weighted += pr[i] * s;
                }
                const T* qv = c.q.row(q) + off;
                T* dqv = dq.row(q) + off;
                for (std::size_t i = 0; i < keys.size(); ++i) {
                    const T ds = pr[i] * (dp[i] - weighted) * scale;
                    const T* kv = c.k.row(keys[i]) + off;
                    T* dkv = dk.row(keys[i]) + off;
                    for (std::size_t j = 0; j < hd; ++j) {
                        dqv[j] += ds * kv[j];
                        dkv[j] += ds * qv[j];
                    }
                }
            }
        }
        if (cfg.positional == PositionalScheme::rotary) {
            apply_rotary(dq, acts.position_ids, heads, -1);
            apply_rotary(dk, acts.position_ids, heads, -1);
        }
        accumulate_xt_dy(lg.wq, c.ln1_out, dq);
        accumulate_xt_dy(lg.wk, c.ln1_out, dk);
        accumulate_xt_dy(lg.wv, c.ln1_out, dv);
        Matrix<T> dln1 = matmul_wt(dq, lp.wq);
        add_inplace(dln1, matmul_wt(dk, lp.wk));
        add_inplace(dln1, matmul_wt(dv, lp.wv));
        dx = layer_norm_backward(dln1, c.ln1_hat, c.ln1_inv_std, lp.ln1_gain, lg.ln1_gain, lg.ln1_bias);
        add_inplace(dx, dmid);
    }

    for (std::size_t i = 0; i < n; ++i) {
        const T* r = dx.row(i);
        T* e = g.token_embedding.row(acts.tokens[i]);
        for (std::size_t j = 0; j < d; ++j) {
            e[j] += r[j];
        }
        if (!g.position_embedding.empty()) {
            T* pe = g.position_embedding.row(acts.position_ids[i]);
            for (std::size_t j = 0; j < d; ++j) {
                pe[j] += r[j];
            }
        }
    }

    g.for_each([](const std::string& name, const Matrix<T>& m) {
        for (T v : m.data) {
            if (!std::isfinite(v)) {
                throw NumericalError("non-finite gradient in " + name, -1);
            }
        }
    });
    return g;
}

template <typename T>
T token_logprob(const Matrix<T>& logits, std::size_t row, TokenId target) {
    const T* r = logits.row(row);
    T mx = r[0];
    for (std::size_t j = 1; j < logits.cols; ++j) {
        mx = std::max(mx, r[j]);
    }
    T sum = 0;
    for (std::size_t j = 0; j < logits.cols; ++j) {
        sum += std::exp(r[j] - mx);
    }
    return r[target] - mx - std::log(sum);
}

template <typename T>
T response_logprob(const Matrix<T>& logits, const PackedLayout& layout, std::size_t k) {
    const auto slices = segment_logprob_slices(layout);
    const auto& s = slices.at(k);
    T total = 0;
    for (std::size_t i = 0; i < s.predict_positions.size(); ++i) {
        total += token_logprob(logits, s.predict_positions[i], layout.tokens[s.target_positions[i]]);
    }
    return total;
}

template <typename T>
T reward_score(const RefNetParams<T>& params, const Matrix<T>& hidden, const PackedLayout& layout,
               std::size_t k) {
    if (params.reward_weight.empty()) {
        throw ValidationError("reward_score: network has no reward head");
    }
    const Segment& s = layout.response(k);
    const T* h = hidden.row(s.end() - 1);
    T r = params.reward_bias.data[0];
    for (std::size_t j = 0; j < hidden.cols; ++j) {
        r += params.reward_weight.data[j] * h[j];
    }
    return r;
}

#define PREFPACK_INSTANTIATE(T)                                                                           \
    template struct RefNetParams<T>;                                                                      \
    template RefNetParams<T> zero_params<T>(const RefNetConfig&);                                         \
    template RefNetParams<T> init_params<T>(const RefNetConfig&, std::uint64_t);                          \
    template Activations<T> forward<T>(const RefNetParams<T>&, const ForwardRequest&);                    \
    template RefNetParams<T> backward<T>(const RefNetParams<T>&, const Activations<T>&, const Matrix<T>&, \
                                         const Matrix<T>&);                                               \
    template T token_logprob<T>(const Matrix<T>&, std::size_t, TokenId);                                  \
    template T response_logprob<T>(const Matrix<T>&, const PackedLayout&, std::size_t);                   \
    template T reward_score<T>(const RefNetParams<T>&, const Matrix<T>&, const PackedLayout&, std::size_t);

PREFPACK_INSTANTIATE(float)
PREFPACK_INSTANTIATE(double)
#undef PREFPACK_INSTANTIATE

template RefNetParams<float> cast_params<float, double>(const RefNetParams<double>&);
template RefNetParams<double> cast_params<double, float>(const RefNetParams<float>&);
template RefNetParams<double> cast_params<double, double>(const RefNetParams<double>&);
template RefNetParams<float> cast_params<float, float>(const RefNetParams<float>&);

}  // namespace prefpack::refnet
