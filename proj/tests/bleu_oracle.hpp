#pragma once

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

namespace charmt::testing {

// Independent brute force: split on single spaces, count every n-gram by
// scanning, clip against the reference by scanning again.
inline std::vector<std::string> split(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

inline std::size_t occurrences(const std::vector<std::string>& toks, std::size_t start, std::size_t n,
                               const std::vector<std::string>& in) {
  std::size_t count = 0;
  for (std::size_t i = 0; i + n <= in.size(); ++i) {
    bool same = true;
    for (std::size_t k = 0; k < n && same; ++k) same = in[i + k] == toks[start + k];
    count += same;
  }
  return count;
}

inline double oracle_bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
  double num[4] = {0, 0, 0, 0}, den[4] = {0, 0, 0, 0};
  double c = 0, r = 0;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const auto h = split(hyps[s]);
    const auto ref = split(refs[s]);
    c += static_cast<double>(h.size());
    r += static_cast<double>(ref.size());
    for (std::size_t n = 1; n <= 4; ++n) {
      for (std::size_t i = 0; i + n <= h.size(); ++i) {
        den[n - 1] += 1;
        // Credit each distinct n-gram once, at its first occurrence.
        bool first = true;
        for (std::size_t j = 0; j < i && first; ++j) {
          bool same = true;
          for (std::size_t k = 0; k < n && same; ++k) same = h[j + k] == h[i + k];
          if (same) first = false;
        }
        if (!first) continue;
        num[n - 1] += static_cast<double>(std::min(occurrences(h, i, n, h), occurrences(h, i, n, ref)));
      }
    }
  }
  if (c == 0) return r == 0 ? 100.0 : 0.0;
  double log_p = 0;
  int k = 0;
  for (int n = 0; n < 4; ++n) {
    if (den[n] == 0) continue;
    if (num[n] == 0) return 0.0;
    log_p += std::log(num[n] / den[n]);
    ++k;
  }
  const double bp = c >= r ? 1.0 : std::exp(1.0 - r / c);
  return 100.0 * bp * std::exp(log_p / k);
}
}  // namespace charmt::testing
