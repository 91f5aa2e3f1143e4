#include "mlr/crf.h"

#include <cmath>

#include "doctest.h"
#include "oracles.h"

using namespace mlr;
using mlr::testing::brute_log_partition;
using mlr::testing::brute_path_score;
using mlr::testing::brute_viterbi;
using mlr::testing::for_each_sequence;
using mlr::testing::numeric_gradient;
using mlr::testing::random_lattice;

TEST_CASE("log partition matches enumeration on random lattices") {
  Rng rng(101);
  for (int trial = 0; trial < 300; ++trial) {
    const int m = 1 + static_cast<int>(rng.below(7));
    const auto lattice = random_lattice(rng, m, 3.0);
    const double expected = brute_log_partition(lattice);
    CHECK(log_partition(lattice) == doctest::Approx(expected).epsilon(1e-10));
    CHECK(forward_backward(lattice).log_z == doctest::Approx(expected).epsilon(1e-10));
  }
}

TEST_CASE("path score reads the START row only at position 0") {
  ScoreLattice<double> lattice(2);
  lattice.at(0, Label::kStart, Label::kKey) = 1.5;
  lattice.at(0, Label::kKey, Label::kKey) = 100;  // never read at i=0
  lattice.at(1, Label::kKey, Label::kNormal) = -0.25;
  const std::vector<Label> path{Label::kKey, Label::kNormal};
  CHECK(path_score(lattice, std::span<const Label>(path)) == 1.25);
}

TEST_CASE("label sequences with START or the wrong length are rejected") {
  ScoreLattice<double> lattice(2);
  const std::vector<Label> short_path{Label::kKey};
  const std::vector<Label> with_start{Label::kKey, Label::kStart};
  CHECK_THROWS_AS(path_score(lattice, std::span<const Label>(short_path)),
                  std::invalid_argument);
  CHECK_THROWS_AS(path_score(lattice, std::span<const Label>(with_start)),
                  std::invalid_argument);
}

TEST_CASE("viterbi attains the enumerated maximum") {
  Rng rng(202);
  for (int trial = 0; trial < 300; ++trial) {
    const int m = 1 + static_cast<int>(rng.below(8));
    const auto lattice = random_lattice(rng, m, 2.0);
    const auto path = viterbi_decode(lattice);
    const auto best = brute_viterbi(lattice);
    CHECK(path.size() == static_cast<std::size_t>(m));
    CHECK(brute_path_score(lattice, path) ==
          doctest::Approx(brute_path_score(lattice, best)).epsilon(1e-12));
  }
}

TEST_CASE("viterbi ties resolve toward lower labels from the end") {
  SUBCASE("all-zero lattice gives all K") {
    ScoreLattice<double> lattice(4);
    const auto path = viterbi_decode(lattice);
    CHECK(path == std::vector<Label>(4, Label::kKey));
  }
  SUBCASE("integer lattices with many ties match the oracle exactly") {
    Rng rng(303);
    for (int trial = 0; trial < 500; ++trial) {
      const int m = 1 + static_cast<int>(rng.below(6));
      const auto lattice = random_lattice(rng, m, 0, /*integer_valued=*/true);
      CHECK(viterbi_decode(lattice) == brute_viterbi(lattice));
    }
  }
}

TEST_CASE("likelihoods normalize over all label sequences") {
  Rng rng(404);
  for (int m = 1; m <= 6; ++m) {
    const auto lattice = random_lattice(rng, m, 2.0);
    double total = 0;
    for_each_sequence(m, [&](const std::vector<Label>& l) {
      total += std::exp(log_likelihood(lattice, std::span<const Label>(l)));
    });
    CHECK(total == doctest::Approx(1.0).epsilon(1e-10));
  }
}

TEST_CASE("log partition dominates every path score") {
  Rng rng(505);
  for (int trial = 0; trial < 50; ++trial) {
    const int m = 1 + static_cast<int>(rng.below(5));
    const auto lattice = random_lattice(rng, m, 4.0);
    const double z = log_partition(lattice);
    for_each_sequence(m, [&](const std::vector<Label>& l) {
      CHECK(z >= brute_path_score(lattice, l));
    });
  }
}

TEST_CASE("a constant shift leaves likelihood and viterbi unchanged") {
  Rng rng(606);
  for (int trial = 0; trial < 50; ++trial) {
    const int m = 1 + static_cast<int>(rng.below(6));
    const auto lattice = random_lattice(rng, m, 2.0);
    auto shifted = lattice;
    const double kappa = rng.uniform(-5, 5);
    for (auto& v : shifted.values()) v += kappa;
    std::vector<Label> gold(m);
    for (auto& l : gold) l = static_cast<Label>(rng.below(3));
    CHECK(log_likelihood(shifted, std::span<const Label>(gold)) ==
          doctest::Approx(log_likelihood(lattice, std::span<const Label>(gold)))
              .epsilon(1e-10));
    CHECK(viterbi_decode(shifted) == viterbi_decode(lattice));
  }
}

TEST_CASE("node and edge marginals match enumeration") {
  Rng rng(707);
  for (int trial = 0; trial < 20; ++trial) {
    const int m = 1 + static_cast<int>(rng.below(5));
    const auto lattice = random_lattice(rng, m, 2.0);
    const double z = brute_log_partition(lattice);
    Mat<double> node = Mat<double>::Zero(m, 3);
    ScoreLattice<double> edge(m);
    for_each_sequence(m, [&](const std::vector<Label>& l) {
      const double p = std::exp(brute_path_score(lattice, l) - z);
      Label prev = Label::kStart;
      for (int i = 0; i < m; ++i) {
        node(i, static_cast<int>(l[i])) += p;
        edge.at(i, prev, l[i]) += p;
        prev = l[i];
      }
    });
    const auto marg = forward_backward(lattice);
    for (int i = 0; i < m; ++i) {
      for (int c = 0; c < 3; ++c) {
        CHECK(marg.node(i, c) == doctest::Approx(node(i, c)).epsilon(1e-10));
      }
    }
    for (std::size_t k = 0; k < edge.values().size(); ++k) {
      CHECK(marg.edge.values()[k] ==
            doctest::Approx(edge.values()[k]).epsilon(1e-10).scale(1.0));
    }
  }
}

TEST_CASE("negative log likelihood gradient matches finite differences") {
  Rng rng(808);
  for (int trial = 0; trial < 10; ++trial) {
    const int m = 1 + static_cast<int>(rng.below(6));
    auto lattice = random_lattice(rng, m, 2.0);
    std::vector<Label> gold(m);
    for (auto& l : gold) l = static_cast<Label>(rng.below(3));
    const auto analytic = nll_gradient(forward_backward(lattice), std::span<const Label>(gold));
    const auto numeric = numeric_gradient(lattice.values(), [&] {
      return -log_likelihood(lattice, std::span<const Label>(gold));
    });
    for (std::size_t k = 0; k < numeric.size(); ++k) {
      CHECK(analytic.values()[k] == doctest::Approx(numeric[k]).epsilon(1e-6).scale(1.0));
    }
  }
}

TEST_CASE("node marginal backward matches finite differences") {
  Rng rng(909);
  for (int trial = 0; trial < 10; ++trial) {
    const int m = 1 + static_cast<int>(rng.below(6));
    auto lattice = random_lattice(rng, m, 2.0);
    Mat<double> weights(m, 3);
    for (int i = 0; i < m; ++i) {
      for (int c = 0; c < 3; ++c) weights(i, c) = rng.uniform(-1, 1);
    }
    const auto marg = forward_backward(lattice);
    const auto analytic = node_marginal_backward(lattice, marg, weights);
    const auto numeric = numeric_gradient(lattice.values(), [&] {
      return forward_backward(lattice).node.cwiseProduct(weights).sum();
    });
    for (std::size_t k = 0; k < numeric.size(); ++k) {
      CHECK(analytic.values()[k] == doctest::Approx(numeric[k]).epsilon(1e-6).scale(1.0));
    }
  }
}

TEST_CASE("lattice scores are affine in the encoder states") {
  Rng rng(111);
  const int m = 3;
  const int d = 4;
  Mat<double> h(m, d);
  for (int i = 0; i < m; ++i) {
    for (int k = 0; k < d; ++k) h(i, k) = rng.uniform(-1, 1);
  }
  Tensor<double> W({4, 3, d});
  Tensor<double> b({4, 3});
  for (auto& v : W.values()) v = rng.uniform(-1, 1);
  for (auto& v : b.values()) v = rng.uniform(-1, 1);
  const auto lattice = score_lattice(h, W, b);
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < 4; ++p) {
      for (int c = 0; c < 3; ++c) {
        double expected = b[p * 3 + c];
        for (int k = 0; k < d; ++k) expected += W[(p * 3 + c) * d + k] * h(i, k);
        CHECK(lattice.at(i, p, c) == doctest::Approx(expected).epsilon(1e-12));
      }
    }
  }

  SUBCASE("backward matches finite differences") {
    ScoreLattice<double> upstream(m);
    for (auto& v : upstream.values()) v = rng.uniform(-1, 1);
    auto objective = [&] {
      const auto s = score_lattice(h, W, b);
      double total = 0;
      for (std::size_t k = 0; k < s.values().size(); ++k) {
        total += s.values()[k] * upstream.values()[k];
      }
      return total;
    };
    Tensor<double> dW(W.shape());
    Tensor<double> db(b.shape());
    Mat<double> dh = Mat<double>::Zero(m, d);
    score_lattice_backward(h, W, upstream, dW, db, dh);
    const auto nW = numeric_gradient(W.values(), objective);
    const auto nb = numeric_gradient(b.values(), objective);
    const auto nh = numeric_gradient(std::span<double>(h.data(), h.size()), objective);
    for (std::size_t k = 0; k < nW.size(); ++k) CHECK(dW[k] == doctest::Approx(nW[k]));
    for (std::size_t k = 0; k < nb.size(); ++k) CHECK(db[k] == doctest::Approx(nb[k]));
    for (std::size_t k = 0; k < nh.size(); ++k) {
      CHECK(dh.data()[k] == doctest::Approx(nh[k]));
    }
  }
}

TEST_CASE("category fusion") {
  Mat<double> cats = Mat<double>::Zero(3, 2);
  cats.row(0) << 0.5, -0.5;

  SUBCASE("adds the category vector of the label") {
    Mat<double> h(1, 2);
    h << 1, 2;
    const std::vector<Label> labels{Label::kKey};
    const auto fused = fuse_category(h, std::span<const Label>(labels), cats);
    CHECK(fused(0, 0) == 1.5);
    CHECK(fused(0, 1) == 1.5);
  }
  SUBCASE("zero category vectors leave states unchanged") {
    Mat<double> h(2, 2);
    h << 1, 2, 3, 4;
    const std::vector<Label> labels{Label::kSep, Label::kNormal};
    CHECK(fuse_category(h, std::span<const Label>(labels), cats) == h);
  }
  SUBCASE("difference recovers the selected vector exactly") {
    Rng rng(5);
    Mat<double> random_cats(3, 4);
    Mat<double> h(6, 4);
    for (auto* m : {&random_cats, &h}) {
      for (Eigen::Index k = 0; k < m->size(); ++k) m->data()[k] = rng.uniform(-3, 3);
    }
    std::vector<Label> labels(6);
    for (auto& l : labels) l = static_cast<Label>(rng.below(3));
    const auto fused = fuse_category(h, std::span<const Label>(labels), random_cats);
    for (int i = 0; i < 6; ++i) {
      const Eigen::RowVectorXd diff = fused.row(i) - h.row(i);
      const Eigen::RowVectorXd cat = random_cats.row(static_cast<int>(labels[i]));
      CHECK((diff - cat).cwiseAbs().maxCoeff() < 1e-14);
    }
  }
  SUBCASE("length mismatch throws") {
    Mat<double> h(2, 2);
    const std::vector<Label> labels{Label::kKey};
    CHECK_THROWS_AS(fuse_category(h, std::span<const Label>(labels), cats),
                    std::invalid_argument);
  }
  SUBCASE("soft fusion with one-hot marginals equals hard fusion") {
    Mat<double> h(2, 2);
    h << 1, 2, 3, 4;
    Mat<double> onehot = Mat<double>::Zero(2, 3);
    onehot(0, 0) = 1;
    onehot(1, 2) = 1;
    const std::vector<Label> labels{Label::kKey, Label::kNormal};
    CHECK(fuse_soft(h, onehot, cats) ==
          fuse_category(h, std::span<const Label>(labels), cats));
  }
}
