#include "mlr/decoder.h"

#include <cmath>

#include "doctest.h"
#include "mlr/model.h"

using namespace mlr;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.vocab_size = 12;
  c.d_emb = 4;
  c.d_hid = 4;
  return c;
}

Mat<double> random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Mat<double> m(rows, cols);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = rng.uniform(-1, 1);
  return m;
}

Vec<double> random_vector(Rng& rng, Eigen::Index n) {
  Vec<double> v(n);
  for (Eigen::Index k = 0; k < n; ++k) v[k] = rng.uniform(-1, 1);
  return v;
}

// Emits the token chain SOS -> 7 -> 9 -> EOS regardless of the source: the
// decoder cell copies a one-hot of the previous token into h, and Wo maps
// each one-hot to the next token.
ParamStore<double> chain_params() {
  auto params = init_params<double>(small_config(), 1);
  auto& emb = params[kEmbeddingParam];
  emb.fill(0);
  emb.matrix()(Vocab::kSos, 0) = 1;
  emb.matrix()(7, 1) = 1;
  emb.matrix()(9, 2) = 1;

  const int H = 4;
  auto& W = params[kDecLstmWeightParam];
  auto& b = params[kDecLstmBiasParam];
  W.fill(0);
  b.fill(0);
  for (int k = 0; k < H; ++k) {
    b[k] = 20;          // input gate open
    b[H + k] = -20;     // forget gate closed
    b[3 * H + k] = 20;  // output gate open
    W.matrix()(2 * H + k, k) = 5;  // candidate copies the embedding
  }
  auto& Wc = params[kOutWcParam];
  Wc.fill(0);
  for (int k = 0; k < H; ++k) Wc.matrix()(k, k) = 10;
  auto& Wo = params[kOutWoParam];
  Wo.fill(0);
  Wo.matrix()(7, 0) = 10;
  Wo.matrix()(9, 1) = 10;
  Wo.matrix()(Vocab::kEos, 2) = 10;
  return params;
}

}  // namespace

TEST_CASE("attention over a single position") {
  Rng rng(1);
  const auto params = init_params<double>(small_config(), 2);
  const auto fused = random_matrix(rng, 1, 8);
  const auto r = attention(random_vector(rng, 4), fused, {}, params);
  CHECK(r.alpha[0] == 1.0);
  for (int k = 0; k < 8; ++k) CHECK(r.context[k] == doctest::Approx(fused(0, k)));
}

TEST_CASE("identical memory rows get equal weight") {
  Rng rng(2);
  const auto params = init_params<double>(small_config(), 3);
  Mat<double> fused(2, 8);
  fused.row(0) = random_matrix(rng, 1, 8);
  fused.row(1) = fused.row(0);
  const auto r = attention(random_vector(rng, 4), fused, {}, params);
  CHECK(r.alpha[0] == doctest::Approx(0.5));
  CHECK(r.alpha[1] == doctest::Approx(0.5));
}

TEST_CASE("attention scores match a direct evaluation") {
  Rng rng(3);
  const auto params = init_params<double>(small_config(), 4);
  const auto fused = random_matrix(rng, 5, 8);
  const auto query = random_vector(rng, 4);
  const auto r = attention(query, fused, {}, params);

  const auto& W1 = params[kAttnW1Param];
  const auto& W2 = params[kAttnW2Param];
  const auto& V = params[kAttnVParam];
  const int A = 4;
  std::vector<double> u(5);
  for (int i = 0; i < 5; ++i) {
    std::vector<double> concat;
    for (int k = 0; k < 4; ++k) concat.push_back(query[k]);
    for (int k = 0; k < 8; ++k) concat.push_back(fused(i, k));
    std::vector<double> inner(A);
    for (int a = 0; a < A; ++a) {
      double s = 0;
      for (int k = 0; k < 12; ++k) s += W1[a * 12 + k] * concat[k];
      inner[a] = std::tanh(s);
    }
    u[i] = 0;
    for (int a = 0; a < A; ++a) {
      double s = 0;
      for (int k = 0; k < A; ++k) s += W2[a * A + k] * inner[k];
      u[i] += V[a] * std::tanh(s);
    }
    CHECK(r.scores[i] == doctest::Approx(u[i]).epsilon(1e-12));
  }
  double z = 0;
  for (double v : u) z += std::exp(v);
  for (int i = 0; i < 5; ++i) {
    CHECK(r.alpha[i] == doctest::Approx(std::exp(u[i]) / z).epsilon(1e-12));
  }
}

TEST_CASE("masking") {
  Rng rng(4);
  const auto params = init_params<double>(small_config(), 5);
  const auto fused = random_matrix(rng, 4, 8);
  const auto query = random_vector(rng, 4);
  const auto r = attention(query, fused, {true, false, true, false}, params);
  CHECK(r.alpha[1] == 0.0);
  CHECK(r.alpha[3] == 0.0);
  CHECK(r.alpha.sum() == doctest::Approx(1.0));
  CHECK_THROWS_AS(attention(query, fused, {false, false, false, false}, params),
                  std::invalid_argument);
  CHECK_THROWS_AS(attention(query, fused, {true}, params), std::invalid_argument);
}

TEST_CASE("context lies in the convex hull of the memory") {
  Rng rng(5);
  const auto params = init_params<double>(small_config(), 6);
  for (int trial = 0; trial < 50; ++trial) {
    const auto fused = random_matrix(rng, 1 + rng.below(6), 8);
    const auto r = attention(random_vector(rng, 4), fused, {}, params);
    for (int k = 0; k < 8; ++k) {
      CHECK(r.context[k] >= fused.col(k).minCoeff() - 1e-12);
      CHECK(r.context[k] <= fused.col(k).maxCoeff() + 1e-12);
    }
  }
}

TEST_CASE("decode step composes the cell, attention and output layer") {
  Rng rng(6);
  const auto params = init_params<double>(small_config(), 7);
  const auto memory = make_attention_memory<double>(random_matrix(rng, 3, 8), {}, params);
  DecodeStepState<double> state{{random_vector(rng, 4), random_vector(rng, 4)}, 6};
  const auto step = decode_step(state, memory, params);

  CHECK(step.probs.size() == 12);
  CHECK(step.probs.sum() == doctest::Approx(1.0).epsilon(1e-6));

  const Vec<double> x = params[kEmbeddingParam].matrix().row(6).transpose();
  const auto cell = lstm_cell<double>(x, state.lstm, params[kDecLstmWeightParam],
                                      params[kDecLstmBiasParam]);
  const auto att = attend(memory, cell.h, params);
  Vec<double> concat(12);
  concat << cell.h, att.context;
  const Vec<double> o =
      (params[kOutWcParam].matrix() * concat).array().tanh().matrix();
  const Vec<double> logits = params[kOutWoParam].matrix() * o;
  const double z = (logits.array() - logits.maxCoeff()).exp().sum();
  for (int v = 0; v < 12; ++v) {
    CHECK(step.probs[v] ==
          doctest::Approx(std::exp(logits[v] - logits.maxCoeff()) / z).epsilon(1e-12));
  }
  CHECK((step.state.lstm.h - cell.h).norm() < 1e-14);
  CHECK(step.state.prev_token == pick_token(step.probs));
}

TEST_CASE("pick_token skips <PAD> and <SOS> and breaks ties low") {
  Vec<double> p(6);
  p << 0.3, 0.1, 0.3, 0.1, 0.1, 0.1;
  CHECK(pick_token(p) == 1);
  p << 0.0, 0.2, 0.0, 0.2, 0.4, 0.2;
  CHECK(pick_token(p) == 4);
}

TEST_CASE("greedy decoding") {
  Rng rng(7);
  const auto memory_rows = random_matrix(rng, 3, 8);

  SUBCASE("rigged chain") {
    const auto params = chain_params();
    const auto memory = make_attention_memory<double>(memory_rows, {}, params);
    LstmState<double> initial{Vec<double>::Zero(4), Vec<double>::Zero(4)};
    CHECK(greedy_decode(memory, initial, params, 10) == std::vector<int>{7, 9});
    CHECK(greedy_decode(memory, initial, params, 1) == std::vector<int>{7});
  }
  SUBCASE("immediate <EOS> gives an empty output") {
    auto params = init_params<double>(small_config(), 8);
    // Saturated constant cell; one hidden unit drives the <EOS> logit.
    params[kDecLstmWeightParam].fill(0);
    auto& b = params[kDecLstmBiasParam];
    b.fill(20);
    for (int k = 0; k < 4; ++k) b[4 + k] = -20;
    params[kOutWcParam].fill(0);
    params[kOutWcParam].matrix()(0, 0) = 10;
    params[kOutWoParam].fill(0);
    params[kOutWoParam].matrix()(Vocab::kEos, 0) = 10;
    const auto memory = make_attention_memory<double>(memory_rows, {}, params);
    LstmState<double> initial{Vec<double>::Zero(4), Vec<double>::Zero(4)};
    CHECK(greedy_decode(memory, initial, params, 5).empty());
  }
  SUBCASE("never emits <PAD> or <SOS> and is deterministic") {
    auto params = init_params<double>(small_config(), 9);
    params[kOutWoParam].matrix().row(Vocab::kPad).setConstant(5);
    params[kOutWoParam].matrix().row(Vocab::kSos).setConstant(5);
    const auto memory = make_attention_memory<double>(memory_rows, {}, params);
    LstmState<double> initial{random_vector(rng, 4), Vec<double>::Zero(4)};
    const auto out = greedy_decode(memory, initial, params, 20);
    for (int id : out) {
      CHECK(id != Vocab::kPad);
      CHECK(id != Vocab::kSos);
    }
    CHECK(out == greedy_decode(memory, initial, params, 20));
  }
  SUBCASE("max_len must be positive") {
    const auto params = chain_params();
    const auto memory = make_attention_memory<double>(memory_rows, {}, params);
    LstmState<double> initial{Vec<double>::Zero(4), Vec<double>::Zero(4)};
    CHECK_THROWS(greedy_decode(memory, initial, params, 0));
  }
}
