#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <random>
#include <sstream>

#include "prefpack/dataset.hpp"

using namespace prefpack;

namespace {

std::vector<PreferenceExample> load_string(const std::string& text, std::size_t vocab = kByteVocabSize) {
    std::istringstream in(text);
    return load_preference_jsonl(in, vocab);
}

PreferenceExample with_lengths(std::string id, std::size_t prompt, std::vector<std::size_t> resp) {
    PreferenceExample ex;
    ex.id = std::move(id);
    ex.prompt.assign(prompt, 1);
    for (auto r : resp) {
        ex.responses.emplace_back(r, 2);
    }
    return ex;
}

}  // namespace

TEST_CASE("load: direct field mapping") {
    auto ex = load_string(R"({"id":"e1","prompt":[5,6],"responses":[[7],[8,9]]})");
    REQUIRE(ex.size() == 1);
    CHECK(ex[0].id == "e1");
    CHECK(ex[0].prompt == TokenSeq{5, 6});
    REQUIRE(ex[0].num_responses() == 2);
    CHECK(ex[0].responses[0] == TokenSeq{7});
    CHECK(ex[0].responses[1] == TokenSeq{8, 9});
}

TEST_CASE("load: K < 2 is a validation error") {
    CHECK_THROWS_AS(load_string(R"({"id":"e2","prompt":[1],"responses":[[2]]})"), ValidationError);
}

TEST_CASE("load: token id at or above vocab size is rejected") {
    CHECK_THROWS_AS(load_string(R"({"id":"e","prompt":[1],"responses":[[2],[10]]})", 10), ValidationError);
    CHECK_NOTHROW(load_string(R"({"id":"e","prompt":[1],"responses":[[2],[9]]})", 10));
    CHECK_THROWS_AS(load_string(R"({"id":"e","prompt":[-1],"responses":[[2],[3]]})"), ValidationError);
}

TEST_CASE("load: empty prompt or response is rejected") {
    CHECK_THROWS_AS(load_string(R"({"id":"e","prompt":[],"responses":[[2],[3]]})"), ValidationError);
    CHECK_THROWS_AS(load_string(R"({"id":"e","prompt":[1],"responses":[[],[3]]})"), ValidationError);
}

TEST_CASE("load: malformed JSON reports the line number") {
    const std::string text =
        "{\"id\":\"a\",\"prompt\":[1],\"responses\":[[2],[3]]}\n"
        "\n"
        "{\"id\":\"b\",\"prompt\":[1],\"responses\":[[2],[3]\n";
    try {
        load_string(text);
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.line() == 3);
        CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }
}

TEST_CASE("load: three-line fixture yields K histogram {2:2, 3:1}") {
    const std::string text =
        R"({"id":"a","prompt":[1,2],"responses":[[3],[4]]})"
        "\n"
        R"({"id":"b","prompt":[1],"responses":[[3,3],[4]]})"
        "\n"
        R"({"id":"c","prompt":[1,2,3],"responses":[[3],[4],[5,5,5]]})"
        "\n";
    const auto ex = load_string(text);
    REQUIRE(ex.size() == 3);
    CHECK(ex[0].id == "a");
    CHECK(ex[2].id == "c");
    const auto stats = compute_stats(ex);
    CHECK(stats.k_histogram == std::map<std::size_t, std::size_t>{{2, 2}, {3, 1}});
}

TEST_CASE("load: pairwise alias and string fields") {
    const auto ex = load_string(R"({"id":"p","prompt":"hi","rejected":"A","chosen":[66,67]})");
    REQUIRE(ex.size() == 1);
    CHECK(ex[0].prompt == TokenSeq{104, 105});
    REQUIRE(ex[0].num_responses() == 2);
    // rejected first, chosen last: ascending preference
    CHECK(ex[0].responses[0] == TokenSeq{65});
    CHECK(ex[0].responses[1] == TokenSeq{66, 67});
}

TEST_CASE("load: a record with neither responses nor chosen/rejected is a parse error") {
    CHECK_THROWS_AS(load_string(R"({"id":"x","prompt":[1],"chosen":[2]})"), ParseError);
    CHECK_THROWS_AS(load_string(R"([1,2,3])"), ParseError);
}

TEST_CASE("load: missing file") {
    CHECK_THROWS_AS(load_preference_jsonl(std::filesystem::path("/nonexistent/file.jsonl"), 257), Error);
}

TEST_CASE("load: serialised records read back identically") {
    const auto examples = random_examples(20, {}, 5);
    std::string text;
    for (const auto& ex : examples) {
        text += to_jsonl_record(ex) + "\n";
    }
    CHECK(load_string(text) == examples);
}

TEST_CASE("tokenize_bytes") {
    CHECK(tokenize_bytes("").empty());
    CHECK(tokenize_bytes("A") == TokenSeq{65});
    CHECK(tokenize_bytes("hi") == TokenSeq{104, 105});
    // multi-byte UTF-8 maps byte by byte
    CHECK(tokenize_bytes("\xC3\xA9") == TokenSeq{0xC3, 0xA9});
}

TEST_CASE("compute_stats: single example and two-example mean") {
    const auto one = std::vector{with_lengths("a", 4, {2, 6})};
    const auto s = compute_stats(one);
    CHECK(s.n_examples == 1);
    CHECK(s.mean_input_len == 4.0);
    CHECK(s.mean_max_resp_len == 6.0);
    CHECK(s.mean_min_resp_len == 2.0);
    CHECK(s.mean_sum_resp_len == 8.0);

    const auto two = std::vector{with_lengths("a", 2, {1, 1}), with_lengths("b", 4, {1, 1})};
    CHECK(compute_stats(two).mean_input_len == 3.0);
}

TEST_CASE("compute_stats: empty list is an error") {
    CHECK_THROWS_AS(compute_stats(std::vector<PreferenceExample>{}), ValidationError);
}

TEST_CASE("compute_stats: Orca-like fixture has the Orca length means") {
    // Integer lengths chosen so the means are 228.2 / 251.0 / 129.6.
    const std::vector<PreferenceExample> orca = {
        with_lengths("o1", 228, {251, 129}), with_lengths("o2", 228, {130, 251}),
        with_lengths("o3", 229, {251, 130}), with_lengths("o4", 228, {129, 251}),
        with_lengths("o5", 228, {130, 251}),
    };
    const auto s = compute_stats(orca);
    CHECK(std::abs(s.mean_input_len - 228.2) <= 0.05);
    CHECK(std::abs(s.mean_max_resp_len - 251.0) <= 0.05);
    CHECK(std::abs(s.mean_min_resp_len - 129.6) <= 0.05);
}

TEST_CASE("compute_stats: permutation invariance and per-example ordering") {
    RandomExampleSpec spec;
    spec.max_k = 5;
    auto examples = random_examples(200, spec, 99);
    const auto base = compute_stats(examples);
    std::mt19937 rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        std::shuffle(examples.begin(), examples.end(), rng);
        const auto s = compute_stats(examples);
        CHECK(s.mean_input_len == base.mean_input_len);
        CHECK(s.mean_max_resp_len == base.mean_max_resp_len);
        CHECK(s.mean_min_resp_len == base.mean_min_resp_len);
        CHECK(s.mean_sum_resp_len == base.mean_sum_resp_len);
        CHECK(s.k_histogram == base.k_histogram);
    }
    CHECK(base.mean_min_resp_len <= base.mean_max_resp_len);
    CHECK(base.mean_sum_resp_len >= base.mean_max_resp_len);
    for (const auto& ex : examples) {
        std::size_t mn = SIZE_MAX, mx = 0, sum = 0;
        for (const auto& r : ex.responses) {
            mn = std::min(mn, r.size());
            mx = std::max(mx, r.size());
            sum += r.size();
        }
        CHECK(mn <= mx);
        CHECK(mx <= sum);
        CHECK(sum <= ex.num_responses() * mx);
    }
}

TEST_CASE("random_examples: deterministic and within ranges") {
    RandomExampleSpec spec;
    const auto a = random_examples(30, spec, 11);
    const auto b = random_examples(30, spec, 11);
    CHECK(a == b);
    CHECK(a != random_examples(30, spec, 12));
    for (const auto& ex : a) {
        CHECK_NOTHROW(validate(ex, spec.vocab_size));
        CHECK(ex.prompt.size() >= spec.min_prompt);
        CHECK(ex.prompt.size() <= spec.max_prompt);
        CHECK(ex.num_responses() >= 2);
        CHECK(ex.num_responses() <= 4);
    }
}
