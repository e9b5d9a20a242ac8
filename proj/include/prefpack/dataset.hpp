#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "prefpack/error.hpp"

namespace prefpack {

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

/// Vocabulary of the byte-level fallback tokenizer (256 bytes + one spare id).
inline constexpr std::size_t kByteVocabSize = 257;

/// One prompt shared by K >= 2 responses. Responses are ordered by ascending
/// preference: `responses.back()` is the most preferred, `responses.front()`
/// the least.
struct PreferenceExample {
    std::string id;
    TokenSeq prompt;
    std::vector<TokenSeq> responses;

    std::size_t num_responses() const noexcept { return responses.size(); }

    friend bool operator==(const PreferenceExample&, const PreferenceExample&) = default;
};

/// Throws ValidationError if K < 2, any sequence is empty, or a token id is
/// outside [0, vocab_size).
void validate(const PreferenceExample& example, std::size_t vocab_size);

/// Byte-level tokenizer: each UTF-8 byte becomes its value as a token id.
TokenSeq tokenize_bytes(std::string_view text);

/// Parses one JSONL record. Accepts either `responses` (ascending preference)
/// or the pairwise `rejected`/`chosen` alias. String fields go through
/// tokenize_bytes. `line` is only used for error messages.
PreferenceExample parse_preference_record(std::string_view json_line, std::size_t vocab_size,
                                          std::size_t line = 0);

std::vector<PreferenceExample> load_preference_jsonl(std::istream& in, std::size_t vocab_size);
std::vector<PreferenceExample> load_preference_jsonl(const std::filesystem::path& path,
                                                     std::size_t vocab_size);

/// Serialises an example in the canonical `responses` form (token arrays).
std::string to_jsonl_record(const PreferenceExample& example);

struct DatasetStats {
    std::size_t n_examples = 0;
    double mean_input_len = 0.0;
    double mean_max_resp_len = 0.0;
    double mean_min_resp_len = 0.0;
    double mean_sum_resp_len = 0.0;
    std::map<std::size_t, std::size_t> k_histogram;
};

/// Arithmetic means of per-example prompt length and max/min/sum response
/// length. Throws ValidationError on an empty list.
DatasetStats compute_stats(std::span<const PreferenceExample> examples);

/// Inclusive length ranges for synthetic examples.
struct RandomExampleSpec {
    std::size_t min_prompt = 4, max_prompt = 64;
    std::size_t min_response = 1, max_response = 64;
    std::size_t min_k = 2, max_k = 4;
    std::size_t vocab_size = kByteVocabSize;
};

/// Seeded uniform draws of lengths, K and token ids. Ids are "rand-NNNN".
std::vector<PreferenceExample> random_examples(std::size_t n, const RandomExampleSpec& spec, std::uint64_t seed);

}  // namespace prefpack
