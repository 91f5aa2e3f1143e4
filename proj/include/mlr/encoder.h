// Token embedding and the two-layer bidirectional LSTM encoder.

#ifndef MLR_ENCODER_H_
#define MLR_ENCODER_H_

#include <array>
#include <span>
#include <string>
#include <vector>

#include "mlr/corpus.h"
#include "mlr/numerics.h"

namespace mlr {

struct EncoderConfig {
  int vocab_size = 0;
  int d_emb = 64;
  int d_hid = 128;
  static constexpr int kLayers = 2;

  int d_enc() const { return 2 * d_hid; }
  void validate() const;
};

inline const std::string kEmbeddingParam = "embedding";

// "enc.l<layer>.<fwd|bwd>.<W|b>"; W is 4H x (input + H), gate rows ordered
// input, forget, candidate, output.
std::string encoder_param_name(int layer, bool backward, char which);

template <typename T>
void add_encoder_params(ParamStore<T>& params, const EncoderConfig& config,
                        std::uint64_t seed);

// Row i of the result is row input_ids[i] of the embedding matrix.
template <typename T>
Mat<T> embed(std::span<const int> input_ids, const Tensor<T>& embedding);

// Scatter-adds rows of d_embedded into the embedding gradient.
template <typename T>
void embed_backward(std::span<const int> input_ids, const Mat<T>& d_embedded,
                    Tensor<T>& d_embedding);

// Overwrites rows of `embedding` for vocab tokens found in a text vector file
// (token followed by d_emb reals per line, optional "count dim" header).
// Returns the fraction of vocab entries covered.
template <typename T>
double load_pretrained_embeddings(const std::string& path, const Vocab& vocab,
                                  Tensor<T>& embedding);

template <typename T>
struct LstmState {
  Vec<T> h;
  Vec<T> c;
};

template <typename T>
LstmState<T> lstm_cell(const Vec<T>& x, const LstmState<T>& prev,
                       const Tensor<T>& W, const Tensor<T>& b);

// Everything the backward pass needs from one directional sweep.
template <typename T>
struct LstmTrace {
  bool reverse = false;
  Mat<T> x;      // m x in
  Mat<T> gates;  // m x 4H, post-activation
  Mat<T> c;      // m x H
  Mat<T> tanh_c; // m x H
  Mat<T> h;      // m x H
  Vec<T> h0;
  Vec<T> c0;

  // State after the last step of the sweep.
  LstmState<T> final_state() const;
};

// Runs the cell over the rows of x, last-to-first when `reverse`; h[i] is the
// state at position i.
template <typename T>
LstmTrace<T> lstm_forward(const Mat<T>& x, const Tensor<T>& W,
                          const Tensor<T>& b, bool reverse,
                          const LstmState<T>* initial = nullptr);

// Accumulates into dW/db, returns dL/dx; optionally reports the gradient
// w.r.t. the initial state.
template <typename T>
Mat<T> lstm_backward(const LstmTrace<T>& trace, const Tensor<T>& W,
                     const Mat<T>& d_h, Tensor<T>& dW, Tensor<T>& db,
                     LstmState<T>* d_initial = nullptr);

template <typename T>
struct EncoderStates {
  Mat<T> h;  // m x 2H, h_i = [h_i^f, h_i^b] of the top layer
  // Index layer * 2 + direction (0 forward, 1 backward).
  std::array<LstmState<T>, 4> final_states;
  std::array<LstmTrace<T>, 4> traces;

  int length() const { return static_cast<int>(h.rows()); }
  // [final forward h, final backward h] of the top layer.
  Vec<T> summary() const;
};

template <typename T>
EncoderStates<T> bilstm_encode(const Mat<T>& embeddings,
                               const ParamStore<T>& params);

// Encodes every row of a padded batch at its true length.
template <typename T>
std::vector<EncoderStates<T>> encode_batch(const Batch& batch,
                                           const ParamStore<T>& params);

// Returns dL/d(embeddings) and accumulates LSTM weight gradients.
template <typename T>
Mat<T> bilstm_backward(const EncoderStates<T>& states, const Mat<T>& d_h,
                       const ParamStore<T>& params, ParamStore<T>& grads);

}  // namespace mlr

#endif  // MLR_ENCODER_H_
