#include "qclt/rng.hpp"

#include <algorithm>

namespace qclt {

int sample_from_cumulative(std::span<const double> cumulative, double u) {
  auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
  if (it == cumulative.end()) {
    // u beyond the rounded total: take the last entry that carries mass.
    int i = static_cast<int>(cumulative.size()) - 1;
    while (i > 0 && cumulative[i] == cumulative[i - 1]) --i;
    return i;
  }
  return static_cast<int>(it - cumulative.begin());
}

}  // namespace qclt
