#include "mlr/crf.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace mlr {

namespace {

constexpr int kStart = static_cast<int>(Label::kStart);

template <typename T>
T lse3(T a, T b, T c) {
  const T m = std::max({a, b, c});
  return m + std::log(std::exp(a - m) + std::exp(b - m) + std::exp(c - m));
}

template <typename T>
void check_labels(std::span<const Label> labels, int m) {
  if (static_cast<int>(labels.size()) != m) {
    throw std::invalid_argument("label sequence length " +
                                std::to_string(labels.size()) +
                                " does not match lattice length " +
                                std::to_string(m));
  }
  for (Label l : labels) {
    if (l == Label::kStart) {
      throw std::invalid_argument("START in a label sequence");
    }
  }
}

}  // namespace

std::string category_param_name(Label label) {
  return std::string("crf.cat.") + label_char(label);
}

template <typename T>
void add_crf_params(ParamStore<T>& params, int d_enc, std::uint64_t seed) {
  const auto d = static_cast<std::size_t>(d_enc);
  params.add(kCrfWeightParam,
             glorot_uniform_init<T>({kNumPrevLabels, kNumLabels, d}, seed));
  params.add(kCrfBiasParam, Shape{kNumPrevLabels, kNumLabels});
  for (int c = 0; c < kNumLabels; ++c) {
    params.add(category_param_name(static_cast<Label>(c)),
               glorot_uniform_init<T>({d}, seed + 7 + c));
  }
}

template <typename T>
ScoreLattice<T>::ScoreLattice(int length)
    : length_(length),
      scores_(static_cast<std::size_t>(length) * kNumPrevLabels * kNumLabels,
              T{0}) {
  if (length < 1) throw std::invalid_argument("lattice length must be >= 1");
}

template <typename T>
MatMap<T> ScoreLattice<T>::as_matrix() {
  return MatMap<T>(scores_.data(), length_, kNumPrevLabels * kNumLabels);
}

template <typename T>
ConstMatMap<T> ScoreLattice<T>::as_matrix() const {
  return ConstMatMap<T>(scores_.data(), length_, kNumPrevLabels * kNumLabels);
}

template <typename T>
ScoreLattice<T> score_lattice(const Mat<T>& h, const Tensor<T>& W,
                              const Tensor<T>& b) {
  const Shape expected_w{kNumPrevLabels, kNumLabels,
                         static_cast<std::size_t>(h.cols())};
  if (W.shape() != expected_w) {
    throw std::invalid_argument("CRF weight shape " + shape_string(W.shape()) +
                                " does not match encoder width " +
                                std::to_string(h.cols()));
  }
  if (b.shape() != Shape{kNumPrevLabels, kNumLabels}) {
    throw std::invalid_argument("CRF bias must have shape (4,3)");
  }
  ScoreLattice<T> lattice(static_cast<int>(h.rows()));
  const ConstMatMap<T> w(W.data(), kNumPrevLabels * kNumLabels, h.cols());
  auto s = lattice.as_matrix();
  s.noalias() = h * w.transpose();
  s.rowwise() += ConstVecMap<T>(b.data(), kNumPrevLabels * kNumLabels).transpose();
  return lattice;
}

template <typename T>
void score_lattice_backward(const Mat<T>& h, const Tensor<T>& W,
                            const ScoreLattice<T>& d_scores, Tensor<T>& dW,
                            Tensor<T>& db, Mat<T>& dh) {
  const auto ds = d_scores.as_matrix();
  const ConstMatMap<T> w(W.data(), kNumPrevLabels * kNumLabels, h.cols());
  MatMap<T> dw(dW.data(), kNumPrevLabels * kNumLabels, h.cols());
  dw.noalias() += ds.transpose() * h;
  VecMap<T>(db.data(), kNumPrevLabels * kNumLabels) +=
      ds.colwise().sum().transpose();
  dh.noalias() += ds * w;
}

template <typename T>
T path_score(const ScoreLattice<T>& lattice, std::span<const Label> labels) {
  check_labels<T>(labels, lattice.length());
  T score = 0;
  int prev = kStart;
  for (int i = 0; i < lattice.length(); ++i) {
    const int cur = static_cast<int>(labels[i]);
    score += lattice.at(i, prev, cur);
    prev = cur;
  }
  return score;
}

template <typename T>
T log_partition(const ScoreLattice<T>& lattice) {
  std::array<T, kNumLabels> alpha{};
  for (int c = 0; c < kNumLabels; ++c) alpha[c] = lattice.at(0, kStart, c);
  for (int i = 1; i < lattice.length(); ++i) {
    std::array<T, kNumLabels> next{};
    for (int c = 0; c < kNumLabels; ++c) {
      next[c] = lse3(alpha[0] + lattice.at(i, 0, c), alpha[1] + lattice.at(i, 1, c),
                     alpha[2] + lattice.at(i, 2, c));
    }
    alpha = next;
  }
  return lse3(alpha[0], alpha[1], alpha[2]);
}

template <typename T>
T log_likelihood(const ScoreLattice<T>& lattice, std::span<const Label> gold) {
  return path_score(lattice, gold) - log_partition(lattice);
}

template <typename T>
std::vector<Label> viterbi_decode(const ScoreLattice<T>& lattice) {
  const int m = lattice.length();
  std::vector<std::array<int, kNumLabels>> back(static_cast<std::size_t>(m));
  std::array<T, kNumLabels> delta{};
  for (int c = 0; c < kNumLabels; ++c) delta[c] = lattice.at(0, kStart, c);
  for (int i = 1; i < m; ++i) {
    std::array<T, kNumLabels> next{};
    for (int c = 0; c < kNumLabels; ++c) {
      int best = 0;
      T best_score = delta[0] + lattice.at(i, 0, c);
      for (int p = 1; p < kNumLabels; ++p) {
        const T s = delta[p] + lattice.at(i, p, c);
        if (s > best_score) {
          best_score = s;
          best = p;
        }
      }
      next[c] = best_score;
      back[i][c] = best;
    }
    delta = next;
  }
  int cur = 0;
  for (int c = 1; c < kNumLabels; ++c) {
    if (delta[c] > delta[cur]) cur = c;
  }
  std::vector<Label> labels(static_cast<std::size_t>(m));
  for (int i = m - 1; i >= 0; --i) {
    labels[i] = static_cast<Label>(cur);
    if (i > 0) cur = back[i][cur];
  }
  return labels;
}

template <typename T>
CrfMarginals<T> forward_backward(const ScoreLattice<T>& lattice) {
  const int m = lattice.length();
  CrfMarginals<T> out;
  out.alpha.resize(m, kNumLabels);
  out.beta.resize(m, kNumLabels);
  for (int c = 0; c < kNumLabels; ++c) out.alpha(0, c) = lattice.at(0, kStart, c);
  for (int i = 1; i < m; ++i) {
    for (int c = 0; c < kNumLabels; ++c) {
      out.alpha(i, c) = lse3(out.alpha(i - 1, 0) + lattice.at(i, 0, c),
                             out.alpha(i - 1, 1) + lattice.at(i, 1, c),
                             out.alpha(i - 1, 2) + lattice.at(i, 2, c));
    }
  }
  for (int c = 0; c < kNumLabels; ++c) out.beta(m - 1, c) = 0;
  for (int i = m - 2; i >= 0; --i) {
    for (int c = 0; c < kNumLabels; ++c) {
      out.beta(i, c) = lse3(lattice.at(i + 1, c, 0) + out.beta(i + 1, 0),
                            lattice.at(i + 1, c, 1) + out.beta(i + 1, 1),
                            lattice.at(i + 1, c, 2) + out.beta(i + 1, 2));
    }
  }
  out.log_z = lse3(out.alpha(m - 1, 0), out.alpha(m - 1, 1), out.alpha(m - 1, 2));
  out.node = ((out.alpha + out.beta).array() - out.log_z).exp().matrix();
  out.edge = ScoreLattice<T>(m);
  for (int c = 0; c < kNumLabels; ++c) out.edge.at(0, kStart, c) = out.node(0, c);
  for (int i = 1; i < m; ++i) {
    for (int p = 0; p < kNumLabels; ++p) {
      for (int c = 0; c < kNumLabels; ++c) {
        out.edge.at(i, p, c) = std::exp(out.alpha(i - 1, p) + lattice.at(i, p, c) +
                                        out.beta(i, c) - out.log_z);
      }
    }
  }
  return out;
}

template <typename T>
ScoreLattice<T> nll_gradient(const CrfMarginals<T>& marginals,
                             std::span<const Label> gold) {
  const int m = marginals.edge.length();
  check_labels<T>(gold, m);
  ScoreLattice<T> grad = marginals.edge;
  int prev = kStart;
  for (int i = 0; i < m; ++i) {
    const int cur = static_cast<int>(gold[i]);
    grad.at(i, prev, cur) -= T{1};
    prev = cur;
  }
  return grad;
}

// The objective G = sum_i g_i(c_i) is additive over positions, so
// dE[G]/dS_i[p,c] = q_i(p,c) * (E[G | c_{i-1}=p, c_i=c] - E[G]). The
// conditional expectation splits into a prefix part (fa), the local term and
// a suffix part (fb), each computed by one sweep.
template <typename T>
ScoreLattice<T> node_marginal_backward(const ScoreLattice<T>& lattice,
                                       const CrfMarginals<T>& mg,
                                       const Mat<T>& g) {
  const int m = lattice.length();
  if (g.rows() != m || g.cols() != kNumLabels) {
    throw std::invalid_argument("node marginal gradient has the wrong shape");
  }
  Mat<T> fa(m, kNumLabels);
  Mat<T> fb(m, kNumLabels);
  fa.row(0) = g.row(0);
  for (int i = 1; i < m; ++i) {
    for (int c = 0; c < kNumLabels; ++c) {
      T acc = g(i, c);
      for (int p = 0; p < kNumLabels; ++p) {
        const T w = std::exp(mg.alpha(i - 1, p) + lattice.at(i, p, c) - mg.alpha(i, c));
        acc += w * fa(i - 1, p);
      }
      fa(i, c) = acc;
    }
  }
  fb.row(m - 1).setZero();
  for (int i = m - 2; i >= 0; --i) {
    for (int c = 0; c < kNumLabels; ++c) {
      T acc = 0;
      for (int n = 0; n < kNumLabels; ++n) {
        const T w = std::exp(lattice.at(i + 1, c, n) + mg.beta(i + 1, n) - mg.beta(i, c));
        acc += w * (g(i + 1, n) + fb(i + 1, n));
      }
      fb(i, c) = acc;
    }
  }
  const T expected = mg.node.cwiseProduct(g).sum();
  ScoreLattice<T> d(m);
  for (int c = 0; c < kNumLabels; ++c) {
    d.at(0, kStart, c) = mg.node(0, c) * (g(0, c) + fb(0, c) - expected);
  }
  for (int i = 1; i < m; ++i) {
    for (int p = 0; p < kNumLabels; ++p) {
      for (int c = 0; c < kNumLabels; ++c) {
        d.at(i, p, c) = mg.edge.at(i, p, c) *
                        (fa(i - 1, p) + g(i, c) + fb(i, c) - expected);
      }
    }
  }
  return d;
}

template <typename T>
Mat<T> category_matrix(const ParamStore<T>& params) {
  const auto& k = params[category_param_name(Label::kKey)];
  Mat<T> cat(kNumLabels, static_cast<Eigen::Index>(k.size()));
  for (int c = 0; c < kNumLabels; ++c) {
    const auto& v = params[category_param_name(static_cast<Label>(c))];
    if (v.size() != k.size()) {
      throw std::invalid_argument("category vectors differ in width");
    }
    cat.row(c) = v.vector().transpose();
  }
  return cat;
}

template <typename T>
Mat<T> fuse_category(const Mat<T>& h, std::span<const Label> labels,
                     const Mat<T>& categories) {
  check_labels<T>(labels, static_cast<int>(h.rows()));
  if (categories.cols() != h.cols()) {
    throw std::invalid_argument("category width does not match encoder width");
  }
  Mat<T> out = h;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) +=
        categories.row(static_cast<int>(labels[i]));
  }
  return out;
}

template <typename T>
Mat<T> fuse_soft(const Mat<T>& h, const Mat<T>& node_marginals,
                 const Mat<T>& categories) {
  if (node_marginals.rows() != h.rows() || categories.cols() != h.cols()) {
    throw std::invalid_argument("soft fusion shape mismatch");
  }
  return h + node_marginals * categories;
}

#define MLR_INSTANTIATE_CRF(T)                                                 \
  template void add_crf_params<T>(ParamStore<T>&, int, std::uint64_t);         \
  template class ScoreLattice<T>;                                              \
  template ScoreLattice<T> score_lattice<T>(const Mat<T>&, const Tensor<T>&,   \
                                            const Tensor<T>&);                 \
  template void score_lattice_backward<T>(const Mat<T>&, const Tensor<T>&,     \
                                          const ScoreLattice<T>&, Tensor<T>&,  \
                                          Tensor<T>&, Mat<T>&);                \
  template T path_score<T>(const ScoreLattice<T>&, std::span<const Label>);    \
  template T log_partition<T>(const ScoreLattice<T>&);                         \
  template T log_likelihood<T>(const ScoreLattice<T>&, std::span<const Label>); \
  template std::vector<Label> viterbi_decode<T>(const ScoreLattice<T>&);       \
  template CrfMarginals<T> forward_backward<T>(const ScoreLattice<T>&);        \
  template ScoreLattice<T> nll_gradient<T>(const CrfMarginals<T>&,             \
                                           std::span<const Label>);            \
  template ScoreLattice<T> node_marginal_backward<T>(                          \
      const ScoreLattice<T>&, const CrfMarginals<T>&, const Mat<T>&);          \
  template Mat<T> category_matrix<T>(const ParamStore<T>&);                    \
  template Mat<T> fuse_category<T>(const Mat<T>&, std::span<const Label>,      \
                                   const Mat<T>&);                             \
  template Mat<T> fuse_soft<T>(const Mat<T>&, const Mat<T>&, const Mat<T>&);

MLR_INSTANTIATE_CRF(float)
MLR_INSTANTIATE_CRF(double)

#undef MLR_INSTANTIATE_CRF

}  // namespace mlr
