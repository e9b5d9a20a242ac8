#include "prefpack/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>

#include "json.hpp"

namespace prefpack {

using json = nlohmann::json;

namespace {

TokenSeq parse_token_field(const json& field, const char* name, std::size_t line) {
    if (field.is_string()) {
        return tokenize_bytes(field.get_ref<const std::string&>());
    }
    if (!field.is_array()) {
        throw ParseError(std::string("field '") + name + "' must be a string or an array of token ids",
                         line);
    }
    TokenSeq tokens;
    tokens.reserve(field.size());
    for (const auto& v : field) {
        if (v.is_number_unsigned()) {
            const auto id = v.get<std::uint64_t>();
            if (id > std::numeric_limits<TokenId>::max()) {
                throw ValidationError("line " + std::to_string(line) + ": token id " +
                                      std::to_string(id) + " out of range in '" + name + "'");
            }
            tokens.push_back(static_cast<TokenId>(id));
        } else if (v.is_number_integer()) {
            throw ValidationError("line " + std::to_string(line) + ": negative token id in '" + name +
                                  "'");
        } else {
            throw ParseError(std::string("non-integer token id in '") + name + "'", line);
        }
    }
    return tokens;
}

std::string where(std::size_t line) {
    return line == 0 ? std::string() : "line " + std::to_string(line) + ": ";
}

}  // namespace

void validate(const PreferenceExample& example, std::size_t vocab_size) {
    if (example.responses.size() < 2) {
        throw ValidationError("example '" + example.id + "' has K=" +
                              std::to_string(example.responses.size()) + " responses, need K >= 2");
    }
    if (example.prompt.empty()) {
        throw ValidationError("example '" + example.id + "' has an empty prompt");
    }
    auto check_tokens = [&](const TokenSeq& seq, const std::string& what) {
        for (TokenId t : seq) {
            if (t >= vocab_size) {
                throw ValidationError("example '" + example.id + "': token id " + std::to_string(t) +
                                      " in " + what + " >= vocab size " + std::to_string(vocab_size));
            }
        }
    };
    check_tokens(example.prompt, "prompt");
    for (std::size_t k = 0; k < example.responses.size(); ++k) {
        if (example.responses[k].empty()) {
            throw ValidationError("example '" + example.id + "': response " + std::to_string(k) +
                                  " is empty");
        }
        check_tokens(example.responses[k], "response " + std::to_string(k));
    }
}

TokenSeq tokenize_bytes(std::string_view text) {
    TokenSeq out;
    out.reserve(text.size());
    for (char c : text) {
        out.push_back(static_cast<unsigned char>(c));
    }
    return out;
}

PreferenceExample parse_preference_record(std::string_view json_line, std::size_t vocab_size,
                                          std::size_t line) {
    json j;
    try {
        j = json::parse(json_line);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("malformed JSON: ") + e.what(), line);
    }
    if (!j.is_object()) {
        throw ParseError("record is not a JSON object", line);
    }

    PreferenceExample ex;
    if (auto it = j.find("id"); it != j.end()) {
        if (it->is_string()) {
            ex.id = it->get<std::string>();
        } else if (it->is_number_integer()) {
            ex.id = std::to_string(it->get<std::int64_t>());
        } else {
            throw ParseError("field 'id' must be a string", line);
        }
    } else {
        ex.id = std::to_string(line);
    }

    if (!j.contains("prompt")) {
        throw ParseError("missing field 'prompt'", line);
    }
    ex.prompt = parse_token_field(j["prompt"], "prompt", line);

    if (auto it = j.find("responses"); it != j.end()) {
        if (!it->is_array()) {
            throw ParseError("field 'responses' must be an array", line);
        }
        for (const auto& r : *it) {
            ex.responses.push_back(parse_token_field(r, "responses", line));
        }
    } else if (j.contains("chosen") && j.contains("rejected")) {
        ex.responses.push_back(parse_token_field(j["rejected"], "rejected", line));
        ex.responses.push_back(parse_token_field(j["chosen"], "chosen", line));
    } else {
        throw ParseError("record needs 'responses' or both 'chosen' and 'rejected'", line);
    }

    try {
        validate(ex, vocab_size);
    } catch (const ValidationError& e) {
        throw ValidationError(where(line) + e.what());
    }
    return ex;
}

std::vector<PreferenceExample> load_preference_jsonl(std::istream& in, std::size_t vocab_size) {
    std::vector<PreferenceExample> examples;
    std::string line;
    std::size_t line_num = 0;
    while (std::getline(in, line)) {
        ++line_num;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) {
            continue;
        }
        examples.push_back(parse_preference_record(line, vocab_size, line_num));
    }
    return examples;
}

std::vector<PreferenceExample> load_preference_jsonl(const std::filesystem::path& path,
                                                     std::size_t vocab_size) {
    std::ifstream file(path);
    if (!file.is_open()) {
        throw Error("cannot open dataset: " + path.string());
    }
    return load_preference_jsonl(file, vocab_size);
}

std::string to_jsonl_record(const PreferenceExample& example) {
    json j;
    j["id"] = example.id;
    j["prompt"] = example.prompt;
    j["responses"] = example.responses;
    return j.dump();
}

DatasetStats compute_stats(std::span<const PreferenceExample> examples) {
    if (examples.empty()) {
        throw ValidationError("compute_stats: empty example list");
    }
    // Integer accumulation keeps the means independent of example order.
    std::uint64_t sum_in = 0, sum_max = 0, sum_min = 0, sum_total = 0;
    DatasetStats stats;
    for (const auto& ex : examples) {
        if (ex.responses.empty()) {
            throw ValidationError("compute_stats: example '" + ex.id + "' has no responses");
        }
        std::size_t mx = 0, mn = std::numeric_limits<std::size_t>::max(), total = 0;
        for (const auto& r : ex.responses) {
            mx = std::max(mx, r.size());
            mn = std::min(mn, r.size());
            total += r.size();
        }
        sum_in += ex.prompt.size();
        sum_max += mx;
        sum_min += mn;
        sum_total += total;
        ++stats.k_histogram[ex.responses.size()];
    }
    const double n = static_cast<double>(examples.size());
    stats.n_examples = examples.size();
    stats.mean_input_len = static_cast<double>(sum_in) / n;
    stats.mean_max_resp_len = static_cast<double>(sum_max) / n;
    stats.mean_min_resp_len = static_cast<double>(sum_min) / n;
    stats.mean_sum_resp_len = static_cast<double>(sum_total) / n;
    return stats;
}

std::vector<PreferenceExample> random_examples(std::size_t n, const RandomExampleSpec& spec, std::uint64_t seed) {
    if (spec.min_k < 2 || spec.min_prompt < 1 || spec.min_response < 1 || spec.vocab_size < 1 ||
        spec.max_k < spec.min_k || spec.max_prompt < spec.min_prompt || spec.max_response < spec.min_response) {
        throw ValidationError("random_examples: invalid length ranges");
    }
    std::mt19937_64 rng(seed);
    using dist = std::uniform_int_distribution<std::size_t>;
    dist prompt_len(spec.min_prompt, spec.max_prompt);
    dist response_len(spec.min_response, spec.max_response);
    dist num_responses(spec.min_k, spec.max_k);
    dist token(0, spec.vocab_size - 1);
    auto draw_seq = [&](std::size_t len) {
        TokenSeq seq(len);
        for (auto& t : seq) {
            t = static_cast<TokenId>(token(rng));
        }
        return seq;
    };

    std::vector<PreferenceExample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        PreferenceExample ex;
        char id[32];
        std::snprintf(id, sizeof id, "rand-%04zu", i);
        ex.id = id;
        ex.prompt = draw_seq(prompt_len(rng));
        const std::size_t k = num_responses(rng);
        for (std::size_t r = 0; r < k; ++r) {
            ex.responses.push_back(draw_seq(response_len(rng)));
        }
        out.push_back(std::move(ex));
    }
    return out;
}

}  // namespace prefpack
