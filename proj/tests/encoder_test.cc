#include "mlr/encoder.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "oracles.h"

using namespace mlr;
using mlr::testing::numeric_gradient;

namespace {

EncoderConfig small_config() {
  EncoderConfig c;
  c.vocab_size = 10;
  c.d_emb = 3;
  c.d_hid = 2;
  return c;
}

Mat<double> random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Mat<double> m(rows, cols);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = rng.uniform(-1, 1);
  return m;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Weighted sum of the outputs; its gradient w.r.t. h is `weights`.
double dot(const Mat<double>& a, const Mat<double>& weights) {
  return (a.array() * weights.array()).sum();
}

}  // namespace

TEST_CASE("scalar lstm cell") {
  // H = 1, input width 1: W is 4 x 2, gates ordered i, f, g, o.
  Tensor<double> W({4, 2}, {0.5, -0.3, 0.2, 0.4, -0.7, 0.1, 0.3, 0.8});
  Tensor<double> b({4}, {0.1, 1.0, -0.2, 0.05});
  const double x = 0.6, h = -0.4, c = 0.25;
  Vec<double> xv(1);
  xv << x;
  LstmState<double> prev{Vec<double>::Constant(1, h), Vec<double>::Constant(1, c)};
  const auto next = lstm_cell(xv, prev, W, b);

  const double i = sigmoid(0.5 * x - 0.3 * h + 0.1);
  const double f = sigmoid(0.2 * x + 0.4 * h + 1.0);
  const double g = std::tanh(-0.7 * x + 0.1 * h - 0.2);
  const double o = sigmoid(0.3 * x + 0.8 * h + 0.05);
  const double c_new = f * c + i * g;
  CHECK(next.c[0] == doctest::Approx(c_new).epsilon(1e-14));
  CHECK(next.h[0] == doctest::Approx(o * std::tanh(c_new)).epsilon(1e-14));

  CHECK_THROWS(lstm_cell(Vec<double>::Zero(2).eval(), prev, W, b));
}

TEST_CASE("reverse sweep equals a forward sweep over reversed input") {
  Rng rng(1);
  const auto x = random_matrix(rng, 6, 3);
  const auto W = glorot_uniform_init<double>({8, 5}, 2);
  Tensor<double> b({8});
  const auto rev = lstm_forward(x, W, b, true);
  const Mat<double> flipped = x.colwise().reverse();
  const auto fwd = lstm_forward(flipped, W, b, false);
  for (int i = 0; i < 6; ++i) {
    CHECK((rev.h.row(i) - fwd.h.row(5 - i)).norm() < 1e-14);
  }
  CHECK((rev.final_state().h - fwd.h.row(5).transpose()).norm() < 1e-14);
}

TEST_CASE("bilstm output shapes and dependence structure") {
  const auto config = small_config();
  ParamStore<double> params;
  add_encoder_params(params, config, 3);
  const std::vector<int> ids{5, 6, 7, 8, 9};
  const auto x = embed<double>(ids, params[kEmbeddingParam]);
  const auto states = bilstm_encode(x, params);
  REQUIRE(states.h.rows() == 5);
  REQUIRE(states.h.cols() == 4);

  SUBCASE("summary is the final forward and backward state") {
    const auto s = states.summary();
    CHECK((s.head(2) - states.h.row(4).head(2).transpose()).norm() == 0.0);
    CHECK((s.tail(2) - states.h.row(0).tail(2).transpose()).norm() == 0.0);
  }
  SUBCASE("first-layer forward states ignore later tokens") {
    auto y = x;
    y.row(4).setConstant(3.0);
    const auto other = bilstm_encode(y, params);
    const auto& a = states.traces[0].h;
    const auto& c = other.traces[0].h;
    for (int i = 0; i < 4; ++i) CHECK((a.row(i) - c.row(i)).norm() == 0.0);
    CHECK((a.row(4) - c.row(4)).norm() > 0.0);
    // The top layer mixes both directions, so everything can move there.
    CHECK((states.h.row(0) - other.h.row(0)).norm() > 0.0);
  }
  SUBCASE("forget gate bias starts at one") {
    const auto& bias = params[encoder_param_name(0, false, 'b')];
    for (int k = 0; k < 8; ++k) CHECK(bias[k] == (k >= 2 && k < 4 ? 1.0 : 0.0));
  }
  SUBCASE("parameter shapes") {
    CHECK(params[kEmbeddingParam].shape() == Shape{10, 3});
    CHECK(params[encoder_param_name(0, true, 'W')].shape() == Shape{8, 5});
    CHECK(params[encoder_param_name(1, false, 'W')].shape() == Shape{8, 6});
    CHECK(params.size() == 9);
  }
}

TEST_CASE("lstm backward matches finite differences") {
  Rng rng(4);
  auto x = random_matrix(rng, 4, 3);
  auto W = glorot_uniform_init<double>({8, 5}, 5);
  Tensor<double> b({8});
  for (auto& v : b.values()) v = rng.uniform(-0.5, 0.5);
  LstmState<double> init{random_matrix(rng, 2, 1).col(0), random_matrix(rng, 2, 1).col(0)};
  const auto weights = random_matrix(rng, 4, 2);

  for (bool reverse : {false, true}) {
    CAPTURE(reverse);
    const auto loss = [&] { return dot(lstm_forward(x, W, b, reverse, &init).h, weights); };
    const auto trace = lstm_forward(x, W, b, reverse, &init);
    Tensor<double> dW(W.shape());
    Tensor<double> db(b.shape());
    LstmState<double> d_init;
    const auto dx = lstm_backward(trace, W, weights, dW, db, &d_init);

    const auto nW = numeric_gradient(W.values(), loss);
    for (std::size_t k = 0; k < nW.size(); ++k) CHECK(dW[k] == doctest::Approx(nW[k]).epsilon(1e-6));
    const auto nb = numeric_gradient(b.values(), loss);
    for (std::size_t k = 0; k < nb.size(); ++k) CHECK(db[k] == doctest::Approx(nb[k]).epsilon(1e-6));
    const auto nx = numeric_gradient(std::span<double>(x.data(), x.size()), loss);
    for (Eigen::Index k = 0; k < x.size(); ++k) CHECK(dx.data()[k] == doctest::Approx(nx[k]).epsilon(1e-6));
    const auto nh = numeric_gradient(std::span<double>(init.h.data(), 2), loss);
    const auto nc = numeric_gradient(std::span<double>(init.c.data(), 2), loss);
    for (int k = 0; k < 2; ++k) {
      CHECK(d_init.h[k] == doctest::Approx(nh[k]).epsilon(1e-6));
      CHECK(d_init.c[k] == doctest::Approx(nc[k]).epsilon(1e-6));
    }
  }
}

TEST_CASE("bilstm backward matches finite differences") {
  const auto config = small_config();
  ParamStore<double> params;
  add_encoder_params(params, config, 6);
  Rng rng(7);
  auto x = random_matrix(rng, 4, 3);
  const auto weights = random_matrix(rng, 4, 4);
  const auto loss = [&] { return dot(bilstm_encode(x, params).h, weights); };

  auto grads = params.zeros_like();
  const auto dx = bilstm_backward(bilstm_encode(x, params), weights, params, grads);
  const auto nx = numeric_gradient(std::span<double>(x.data(), x.size()), loss);
  for (Eigen::Index k = 0; k < x.size(); ++k) CHECK(dx.data()[k] == doctest::Approx(nx[k]).epsilon(1e-6));
  for (int layer = 0; layer < 2; ++layer) {
    for (bool bwd : {false, true}) {
      for (char which : {'W', 'b'}) {
        const auto name = encoder_param_name(layer, bwd, which);
        CAPTURE(name);
        const auto n = numeric_gradient(params[name].values(), loss);
        for (std::size_t k = 0; k < n.size(); ++k) {
          CHECK(grads[name][k] == doctest::Approx(n[k]).epsilon(1e-6));
        }
      }
    }
  }
}

TEST_CASE("embedding lookup and scatter") {
  Tensor<double> table({4, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
  const std::vector<int> ids{2, 0, 2};
  const auto e = embed<double>(ids, table);
  CHECK(e(0, 1) == 5);
  CHECK(e(1, 0) == 0);
  CHECK(e(2, 0) == 4);
  CHECK_THROWS_AS(embed<double>(std::vector<int>{4}, table), std::out_of_range);
  CHECK_THROWS_AS(embed<double>(std::vector<int>{-1}, table), std::out_of_range);

  Tensor<double> grad({4, 2});
  embed_backward<double>(ids, Mat<double>::Ones(3, 2), grad);
  CHECK(grad[4] == 2);
  CHECK(grad[0] == 1);
  CHECK(grad[2] == 0);
}

TEST_CASE("pretrained embeddings") {
  const std::vector<DialogueSample> corpus{{{{"alpha", "beta"}}, {"alpha", "gamma"}}};
  const auto vocab = Vocab::build(corpus, 1);  // 5 reserved + 3 words
  const auto dir = std::filesystem::temp_directory_path();
  const auto path = (dir / "mlr_encoder_test_vectors.txt").string();

  SUBCASE("rows are overwritten and coverage reported") {
    {
      std::ofstream out(path);
      out << "3 2\nalpha 1 2\nzeta 9 9\ngamma -1 0.5\n";
    }
    Tensor<double> table({8, 2});
    const double coverage = load_pretrained_embeddings(path, vocab, table);
    CHECK(coverage == doctest::Approx(2.0 / 8.0));
    CHECK(table.matrix()(vocab.id("alpha"), 1) == 2.0);
    CHECK(table.matrix()(vocab.id("gamma"), 0) == -1.0);
    CHECK(table.matrix()(vocab.id("beta"), 0) == 0.0);
  }
  SUBCASE("dimension mismatch") {
    {
      std::ofstream out(path);
      out << "1 3\nalpha 1 2 3\n";
    }
    Tensor<double> table({8, 2});
    CHECK_THROWS_AS(load_pretrained_embeddings(path, vocab, table), std::invalid_argument);
    {
      std::ofstream out(path);
      out << "alpha 1 2 3\n";
    }
    CHECK_THROWS_AS(load_pretrained_embeddings(path, vocab, table), std::invalid_argument);
  }
  SUBCASE("missing file") {
    Tensor<double> table({8, 2});
    CHECK_THROWS(load_pretrained_embeddings((dir / "no_such_vectors.txt").string(), vocab, table));
  }
  std::remove(path.c_str());
}
