// Linear-chain CRF over the word categories {K, E, N}, and fusion of the
// category vectors into encoder states.
//
// Position i scores the transition (previous label -> label) with
//   S_i[prev, cur] = W[prev, cur] . h_i + b[prev, cur],
// where prev ranges over {START, K, E, N} and cur over {K, E, N}. Only
// position 0 reads the START row; no end transition is scored.

#ifndef MLR_CRF_H_
#define MLR_CRF_H_

#include <array>
#include <span>
#include <string>
#include <vector>

#include "mlr/corpus.h"
#include "mlr/numerics.h"

namespace mlr {

inline const std::string kCrfWeightParam = "crf.W";  // (4, 3, d_enc)
inline const std::string kCrfBiasParam = "crf.b";    // (4, 3)
// Category vectors, one per emittable label, each of width d_enc.
std::string category_param_name(Label label);

template <typename T>
void add_crf_params(ParamStore<T>& params, int d_enc, std::uint64_t seed);

template <typename T>
class ScoreLattice {
 public:
  ScoreLattice() = default;
  explicit ScoreLattice(int length);

  int length() const { return length_; }
  T& at(int i, int prev, int cur) { return scores_[index(i, prev, cur)]; }
  T at(int i, int prev, int cur) const { return scores_[index(i, prev, cur)]; }
  T& at(int i, Label prev, Label cur) {
    return at(i, static_cast<int>(prev), static_cast<int>(cur));
  }
  T at(int i, Label prev, Label cur) const {
    return at(i, static_cast<int>(prev), static_cast<int>(cur));
  }
  std::span<T> values() { return scores_; }
  std::span<const T> values() const { return scores_; }
  // Row i is the 12 scores at position i, prev-major.
  MatMap<T> as_matrix();
  ConstMatMap<T> as_matrix() const;

 private:
  static std::size_t index(int i, int prev, int cur) {
    return (static_cast<std::size_t>(i) * kNumPrevLabels + prev) * kNumLabels +
           cur;
  }

  int length_ = 0;
  std::vector<T> scores_;
};

template <typename T>
ScoreLattice<T> score_lattice(const Mat<T>& h, const Tensor<T>& W,
                              const Tensor<T>& b);

// Accumulates dW, db and dh (m x d_enc) given dL/dS.
template <typename T>
void score_lattice_backward(const Mat<T>& h, const Tensor<T>& W,
                            const ScoreLattice<T>& d_scores, Tensor<T>& dW,
                            Tensor<T>& db, Mat<T>& dh);

template <typename T>
T path_score(const ScoreLattice<T>& lattice, std::span<const Label> labels);

template <typename T>
T log_partition(const ScoreLattice<T>& lattice);

template <typename T>
T log_likelihood(const ScoreLattice<T>& lattice, std::span<const Label> gold);

// Exact MAP labels. Ties prefer the lower label (K < E < N) at every
// backtrack step, starting from the last position.
template <typename T>
std::vector<Label> viterbi_decode(const ScoreLattice<T>& lattice);

template <typename T>
struct CrfMarginals {
  T log_z = 0;
  Mat<T> alpha;        // m x 3, log forward scores (including S_i)
  Mat<T> beta;         // m x 3, log backward scores (excluding S_i)
  Mat<T> node;         // m x 3, p(c_i = c)
  ScoreLattice<T> edge;  // p(c_{i-1} = prev, c_i = cur)
};

template <typename T>
CrfMarginals<T> forward_backward(const ScoreLattice<T>& lattice);

// dL/dS for L = -log_likelihood(gold).
template <typename T>
ScoreLattice<T> nll_gradient(const CrfMarginals<T>& marginals,
                             std::span<const Label> gold);

// dL/dS given dL/d(node marginals) (m x 3).
template <typename T>
ScoreLattice<T> node_marginal_backward(const ScoreLattice<T>& lattice,
                                       const CrfMarginals<T>& marginals,
                                       const Mat<T>& d_node);

// Rows K, E, N of the category vectors as a 3 x d_enc matrix.
template <typename T>
Mat<T> category_matrix(const ParamStore<T>& params);

// h^e_i = h_i + category[labels[i]].
template <typename T>
Mat<T> fuse_category(const Mat<T>& h, std::span<const Label> labels,
                     const Mat<T>& categories);

// h^e_i = h_i + sum_c p_i(c) category[c].
template <typename T>
Mat<T> fuse_soft(const Mat<T>& h, const Mat<T>& node_marginals,
                 const Mat<T>& categories);

}  // namespace mlr

#endif  // MLR_CRF_H_
