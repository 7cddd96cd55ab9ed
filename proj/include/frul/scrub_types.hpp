#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

namespace frul::scrub {

/// A forget-relevant segment of a reasoning trace, in cot-token coordinates
/// (token 0 is the first reasoning token; end is exclusive).
struct Span {
    std::size_t start = 0;
    std::size_t end = 0;
    std::string text;
    double confidence = 1.0;
    std::string source;

    bool operator==(const Span&) const = default;
};

struct ScrubbedExample {
    std::string example_id;
    std::vector<Span> spans;  ///< aggregated, sorted, non-overlapping
    std::string cot_modified;
    std::map<std::string, std::string> placeholder_map;  ///< original value -> placeholder

    bool operator==(const ScrubbedExample&) const = default;
};

}  // namespace frul::scrub
