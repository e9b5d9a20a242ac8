#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "prefpack/dataset.hpp"

namespace prefpack {

enum class SegmentKind { prompt, response };

struct Segment {
    SegmentKind kind = SegmentKind::prompt;
    std::size_t response_index = 0;  // only meaningful for responses
    std::size_t start = 0;
    std::size_t length = 0;

    std::size_t end() const noexcept { return start + length; }

    friend bool operator==(const Segment&, const Segment&) = default;
};

/// A preference example restructured into one sequence:
/// prompt ++ response_0 ++ ... ++ response_{K-1}.
/// Every response's position ids restart at the prompt length, so each
/// response sees exactly the positions it would have in its own unpacked
/// sequence.
struct PackedLayout {
    std::string example_id;
    TokenSeq tokens;
    std::vector<Segment> segments;
    std::vector<std::size_t> position_ids;

    std::size_t size() const noexcept { return tokens.size(); }
    std::size_t prompt_length() const { return segments.front().length; }
    std::size_t num_responses() const noexcept { return segments.size() - 1; }
    const Segment& response(std::size_t k) const { return segments.at(k + 1); }

    friend bool operator==(const PackedLayout&, const PackedLayout&) = default;
};

PackedLayout pack(const PreferenceExample& example);

/// Throws ValidationError unless the segment table tiles `tokens` with one
/// leading prompt segment followed by responses 0..K-1 (K >= 2), and the
/// position ids follow the reset rule.
void validate_layout(const PackedLayout& layout);

/// Index into `layout.segments` of the segment covering `pos`.
std::size_t segment_of(const PackedLayout& layout, std::size_t pos);

/// Block attention rule: key k is visible from query q iff k <= q and k lies
/// in the prompt or in the same segment as q. Throws std::out_of_range for
/// positions outside the layout.
bool mask_allows(const PackedLayout& layout, std::size_t q, std::size_t k);

using DenseMask = std::vector<std::vector<bool>>;

/// L x L materialisation of mask_allows, for debugging and export only.
DenseMask render_dense_mask(const PackedLayout& layout);

/// Row-major 0/1 grid, one row per line.
std::string dense_mask_text(const DenseMask& mask);

/// Number of allowed (q, k) pairs for a prompt of length p and responses r_k:
/// p(p+1)/2 + sum_k (r_k p + r_k(r_k+1)/2).
double mask_true_count(double prompt_length, const std::vector<double>& response_lengths);

/// Next-token alignment for one response: `predict_positions[i]` produces the
/// logits whose target is `tokens[target_positions[i]]`. The first token of
/// every response is predicted from the last prompt position.
struct LogprobSlice {
    std::size_t response_index = 0;
    std::vector<std::size_t> predict_positions;
    std::vector<std::size_t> target_positions;
};

std::vector<LogprobSlice> segment_logprob_slices(const PackedLayout& layout);

/// Inverse of pack. Validates the layout first.
PreferenceExample unpack(const PackedLayout& layout);

std::string layout_to_json(const PackedLayout& layout);
PackedLayout layout_from_json(const std::string& text);

}  // namespace prefpack
