#pragma once

#include <string>

namespace glame::fuzzy {

// Lowercase, non-alphanumeric to space, collapsed whitespace.
std::string normalize(const std::string& s);

// Levenshtein distance with substitution cost 2 (equivalently the indel
// distance), the metric underneath the ratio scores.
int indel_distance(const std::string& a, const std::string& b);

// 100 * (1 - indel / (|a| + |b|)), on raw strings.
double ratio(const std::string& a, const std::string& b);

// Best ratio of the shorter string against every same-length window of the
// longer one. Inputs are normalized first.
double partial_ratio(const std::string& a, const std::string& b);

}  // namespace glame::fuzzy
