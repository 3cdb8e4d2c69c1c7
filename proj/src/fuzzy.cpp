#include "glamelab/fuzzy.hpp"

#include <algorithm>
#include <cctype>
#include <vector>

namespace glame::fuzzy {

std::string normalize(const std::string& s) {
    std::string out;
    bool pending_space = false;
    for (char c : s) {
        const unsigned char uc = static_cast<unsigned char>(c);
        if (std::isalnum(uc)) {
            if (pending_space && !out.empty()) out += ' ';
            pending_space = false;
            out += static_cast<char>(std::tolower(uc));
        } else {
            pending_space = true;
        }
    }
    return out;
}

int indel_distance(const std::string& a, const std::string& b) {
    const size_t n = a.size(), m = b.size();
    std::vector<int> prev(m + 1), cur(m + 1);
    for (size_t j = 0; j <= m; ++j) prev[j] = static_cast<int>(j);
    for (size_t i = 1; i <= n; ++i) {
        cur[0] = static_cast<int>(i);
        for (size_t j = 1; j <= m; ++j) {
            if (a[i - 1] == b[j - 1]) {
                cur[j] = prev[j - 1];
            } else {
                // substitution costs 2, making this the indel metric
                cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + 2});
            }
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

double ratio(const std::string& a, const std::string& b) {
    const size_t total = a.size() + b.size();
    if (total == 0) return 100.0;
    return 100.0 * (1.0 - static_cast<double>(indel_distance(a, b)) / static_cast<double>(total));
}

double partial_ratio(const std::string& a_raw, const std::string& b_raw) {
    std::string a = normalize(a_raw);
    std::string b = normalize(b_raw);
    if (a.size() > b.size()) std::swap(a, b);
    if (a.empty()) return b.empty() ? 100.0 : 0.0;
    const size_t w = a.size();
    double best = 0.0;
    for (size_t start = 0; start + w <= b.size(); ++start) {
        best = std::max(best, ratio(a, b.substr(start, w)));
        if (best == 100.0) break;
    }
    return best;
}

}  // namespace glame::fuzzy
