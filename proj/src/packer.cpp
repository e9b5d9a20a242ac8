#include "prefpack/packer.hpp"

#include <algorithm>
#include <stdexcept>

#include "json.hpp"

namespace prefpack {

using json = nlohmann::json;

PackedLayout pack(const PreferenceExample& example) {
    if (example.responses.size() < 2 || example.prompt.empty()) {
        throw ValidationError("pack: example '" + example.id + "' needs a prompt and K >= 2 responses");
    }
    PackedLayout layout;
    layout.example_id = example.id;

    const std::size_t l_in = example.prompt.size();
    std::size_t total = l_in;
    for (const auto& r : example.responses) {
        if (r.empty()) {
            throw ValidationError("pack: example '" + example.id + "' has an empty response");
        }
        total += r.size();
    }
    layout.tokens.reserve(total);
    layout.position_ids.reserve(total);
    layout.segments.reserve(example.responses.size() + 1);

    layout.segments.push_back({SegmentKind::prompt, 0, 0, l_in});
    layout.tokens.insert(layout.tokens.end(), example.prompt.begin(), example.prompt.end());
    for (std::size_t i = 0; i < l_in; ++i) {
        layout.position_ids.push_back(i);
    }

    for (std::size_t k = 0; k < example.responses.size(); ++k) {
        const auto& r = example.responses[k];
        layout.segments.push_back({SegmentKind::response, k, layout.tokens.size(), r.size()});
        layout.tokens.insert(layout.tokens.end(), r.begin(), r.end());
        for (std::size_t i = 0; i < r.size(); ++i) {
            layout.position_ids.push_back(l_in + i);
        }
    }
    return layout;
}

void validate_layout(const PackedLayout& layout) {
    const auto fail = [&](const std::string& why) {
        throw ValidationError("invalid layout '" + layout.example_id + "': " + why);
    };
    const auto& segs = layout.segments;
    if (segs.size() < 3) {
        fail("need one prompt segment and at least two response segments");
    }
    if (segs[0].kind != SegmentKind::prompt || segs[0].start != 0) {
        fail("first segment must be the prompt at offset 0");
    }
    std::size_t cursor = 0;
    for (std::size_t i = 0; i < segs.size(); ++i) {
        const auto& s = segs[i];
        if (s.length == 0) {
            fail("segment " + std::to_string(i) + " is empty");
        }
        if (s.start != cursor) {
            fail("segment " + std::to_string(i) + " starts at " + std::to_string(s.start) +
                 ", expected " + std::to_string(cursor) + " (gap or overlap)");
        }
        if (i > 0 && (s.kind != SegmentKind::response || s.response_index != i - 1)) {
            fail("segment " + std::to_string(i) + " must be response " + std::to_string(i - 1));
        }
        cursor = s.end();
    }
    if (cursor != layout.tokens.size()) {
        fail("segments cover " + std::to_string(cursor) + " tokens but the sequence has " +
             std::to_string(layout.tokens.size()));
    }
    if (layout.position_ids.size() != layout.tokens.size()) {
        fail("position_ids length differs from tokens length");
    }
    const std::size_t l_in = segs[0].length;
    for (const auto& s : segs) {
        const std::size_t base = s.kind == SegmentKind::prompt ? 0 : l_in;
        for (std::size_t i = 0; i < s.length; ++i) {
            if (layout.position_ids[s.start + i] != base + i) {
                fail("position id at " + std::to_string(s.start + i) + " breaks the reset rule");
            }
        }
    }
}

std::size_t segment_of(const PackedLayout& layout, std::size_t pos) {
    if (pos >= layout.size()) {
        throw std::out_of_range("position " + std::to_string(pos) + " outside layout of length " +
                                std::to_string(layout.size()));
    }
    const auto& segs = layout.segments;
    auto it = std::upper_bound(segs.begin(), segs.end(), pos,
                               [](std::size_t p, const Segment& s) { return p < s.start; });
    return static_cast<std::size_t>(std::distance(segs.begin(), it)) - 1;
}

bool mask_allows(const PackedLayout& layout, std::size_t q, std::size_t k) {
    const std::size_t sq = segment_of(layout, q);
    const std::size_t sk = segment_of(layout, k);
    if (k > q) {
        return false;
    }
    return layout.segments[sk].kind == SegmentKind::prompt || sk == sq;
}

DenseMask render_dense_mask(const PackedLayout& layout) {
    const std::size_t n = layout.size();
    DenseMask mask(n, std::vector<bool>(n, false));
    for (std::size_t q = 0; q < n; ++q) {
        for (std::size_t k = 0; k <= q; ++k) {
            mask[q][k] = mask_allows(layout, q, k);
        }
    }
    return mask;
}

std::string dense_mask_text(const DenseMask& mask) {
    std::string out;
    for (const auto& row : mask) {
        for (bool b : row) {
            out.push_back(b ? '1' : '0');
        }
        out.push_back('\n');
    }
    return out;
}

double mask_true_count(double prompt_length, const std::vector<double>& response_lengths) {
    const double p = prompt_length;
    double count = p * (p + 1.0) / 2.0;
    for (double r : response_lengths) {
        count += r * p + r * (r + 1.0) / 2.0;
    }
    return count;
}

std::vector<LogprobSlice> segment_logprob_slices(const PackedLayout& layout) {
    const std::size_t last_prompt = layout.prompt_length() - 1;
    std::vector<LogprobSlice> slices;
    slices.reserve(layout.num_responses());
    for (std::size_t k = 0; k < layout.num_responses(); ++k) {
        const Segment& s = layout.response(k);
        LogprobSlice slice;
        slice.response_index = k;
        slice.predict_positions.push_back(last_prompt);
        for (std::size_t i = 0; i + 1 < s.length; ++i) {
            slice.predict_positions.push_back(s.start + i);
        }
        for (std::size_t i = 0; i < s.length; ++i) {
            slice.target_positions.push_back(s.start + i);
        }
        slices.push_back(std::move(slice));
    }
    return slices;
}

PreferenceExample unpack(const PackedLayout& layout) {
    validate_layout(layout);
    PreferenceExample ex;
    ex.id = layout.example_id;
    const auto& prompt = layout.segments[0];
    ex.prompt.assign(layout.tokens.begin(), layout.tokens.begin() + prompt.end());
    for (std::size_t k = 0; k < layout.num_responses(); ++k) {
        const auto& s = layout.response(k);
        ex.responses.emplace_back(layout.tokens.begin() + s.start, layout.tokens.begin() + s.end());
    }
    return ex;
}

std::string layout_to_json(const PackedLayout& layout) {
    json segs = json::array();
    for (const auto& s : layout.segments) {
        segs.push_back({{"kind", s.kind == SegmentKind::prompt ? "prompt" : "response"},
                        {"index", s.response_index},
                        {"start", s.start},
                        {"len", s.length}});
    }
    json j;
    j["id"] = layout.example_id;
    j["tokens"] = layout.tokens;
    j["position_ids"] = layout.position_ids;
    j["segments"] = std::move(segs);
    return j.dump();
}

PackedLayout layout_from_json(const std::string& text) {
    PackedLayout layout;
    try {
        const json j = json::parse(text);
        layout.example_id = j.at("id").get<std::string>();
        layout.tokens = j.at("tokens").get<TokenSeq>();
        layout.position_ids = j.at("position_ids").get<std::vector<std::size_t>>();
        for (const auto& s : j.at("segments")) {
            Segment seg;
            const auto kind = s.at("kind").get<std::string>();
            if (kind == "prompt") {
                seg.kind = SegmentKind::prompt;
            } else if (kind == "response") {
                seg.kind = SegmentKind::response;
            } else {
                throw ParseError("unknown segment kind '" + kind + "'", 0);
            }
            seg.response_index = s.at("index").get<std::size_t>();
            seg.start = s.at("start").get<std::size_t>();
            seg.length = s.at("len").get<std::size_t>();
            layout.segments.push_back(seg);
        }
    } catch (const json::exception& e) {
        throw ParseError(std::string("malformed layout JSON: ") + e.what(), 0);
    }
    return layout;
}

}  // namespace prefpack
