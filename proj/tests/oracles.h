// Independent reference computations shared by the tests. Nothing here
// calls into the code under test beyond reading lattice entries.

#ifndef MLR_TESTS_ORACLES_H_
#define MLR_TESTS_ORACLES_H_

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "mlr/crf.h"
#include "mlr/numerics.h"

namespace mlr::testing {

// Calls fn for every label sequence of length m over {K, E, N}.
inline void for_each_sequence(int m, const std::function<void(const std::vector<Label>&)>& fn) {
  std::vector<Label> labels(m, Label::kKey);
  std::vector<int> digits(m, 0);
  while (true) {
    for (int i = 0; i < m; ++i) labels[i] = static_cast<Label>(digits[i]);
    fn(labels);
    int i = m - 1;
    while (i >= 0 && digits[i] == kNumLabels - 1) digits[i--] = 0;
    if (i < 0) return;
    ++digits[i];
  }
}

inline double brute_path_score(const ScoreLattice<double>& lattice,
                               const std::vector<Label>& labels) {
  double s = 0;
  Label prev = Label::kStart;
  for (int i = 0; i < static_cast<int>(labels.size()); ++i) {
    s += lattice.at(i, prev, labels[i]);
    prev = labels[i];
  }
  return s;
}

inline double brute_log_partition(const ScoreLattice<double>& lattice) {
  std::vector<double> scores;
  for_each_sequence(lattice.length(), [&](const std::vector<Label>& l) {
    scores.push_back(brute_path_score(lattice, l));
  });
  double mx = -std::numeric_limits<double>::infinity();
  for (double s : scores) mx = std::max(mx, s);
  double sum = 0;
  for (double s : scores) sum += std::exp(s - mx);
  return mx + std::log(sum);
}

// Best path; among exact ties the one that is smallest when compared from
// the last position backwards.
inline std::vector<Label> brute_viterbi(const ScoreLattice<double>& lattice) {
  std::vector<Label> best;
  double best_score = -std::numeric_limits<double>::infinity();
  auto reverse_less = [](const std::vector<Label>& a, const std::vector<Label>& b) {
    return std::lexicographical_compare(a.rbegin(), a.rend(), b.rbegin(), b.rend());
  };
  for_each_sequence(lattice.length(), [&](const std::vector<Label>& l) {
    const double s = brute_path_score(lattice, l);
    if (s > best_score || (s == best_score && reverse_less(l, best))) {
      best_score = s;
      best = l;
    }
  });
  return best;
}

inline ScoreLattice<double> random_lattice(Rng& rng, int m, double scale,
                                           bool integer_valued = false) {
  ScoreLattice<double> lattice(m);
  for (auto& v : lattice.values()) {
    v = integer_valued ? static_cast<double>(rng.below(5)) - 2.0
                       : rng.uniform(-scale, scale);
  }
  return lattice;
}

// Central differences of a scalar function of a flat value array.
inline std::vector<double> numeric_gradient(std::span<double> values,
                                            const std::function<double()>& f,
                                            double eps = 1e-6) {
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + eps;
    const double plus = f();
    values[i] = saved - eps;
    const double minus = f();
    values[i] = saved;
    out[i] = (plus - minus) / (2 * eps);
  }
  return out;
}

}  // namespace mlr::testing

#endif  // MLR_TESTS_ORACLES_H_
