// Attention-based LSTM decoder.
//
//   h_t   = LSTM(h_{t-1}, e_{t-1})
//   u_ti  = V . tanh(W2 tanh(W1 [h_t, h^e_i]))
//   alpha = softmax over unmasked source positions
//   c_t   = sum_i alpha_ti h^e_i
//   o_t   = tanh(Wc [h_t, c_t])
//   y_t   = softmax(Wo o_t)
//
// W1 is split column-wise into the query part and the memory part so the
// memory projection is computed once per source sequence.

#ifndef MLR_DECODER_H_
#define MLR_DECODER_H_

#include <string>
#include <vector>

#include "mlr/encoder.h"
#include "mlr/numerics.h"

namespace mlr {

struct DecoderConfig {
  int vocab_size = 0;
  int d_emb = 64;
  int d_hid = 128;
  int d_enc = 256;
  int d_attn = 128;
  int max_decode_len = 30;

  void validate() const;
};

inline const std::string kDecInitWeightParam = "dec.init.W";  // H x d_enc
inline const std::string kDecInitBiasParam = "dec.init.b";    // H
inline const std::string kDecLstmWeightParam = "dec.lstm.W";  // 4H x (E + H)
inline const std::string kDecLstmBiasParam = "dec.lstm.b";    // 4H
inline const std::string kAttnW1Param = "attn.W1";            // A x (H + d_enc)
inline const std::string kAttnW2Param = "attn.W2";            // A x A
inline const std::string kAttnVParam = "attn.V";              // A
inline const std::string kOutWcParam = "out.Wc";              // H x (H + d_enc)
inline const std::string kOutWoParam = "out.Wo";              // V x H

template <typename T>
void add_decoder_params(ParamStore<T>& params, const DecoderConfig& config,
                        std::uint64_t seed);

template <typename T>
struct AttentionMemory {
  Mat<T> values;           // m x d_enc fused states
  Mat<T> keys;             // m x A, memory half of W1 applied to values
  std::vector<bool> mask;  // true = attendable
};

// An empty mask means every position is attendable. Throws if every position
// is masked.
template <typename T>
AttentionMemory<T> make_attention_memory(const Mat<T>& fused,
                                         std::vector<bool> mask,
                                         const ParamStore<T>& params);

template <typename T>
struct AttentionResult {
  Vec<T> context;  // d_enc
  Vec<T> alpha;    // m, exactly 0 at masked positions
  Vec<T> scores;   // m, u_ti (lowest() at masked positions)
  Mat<T> inner;    // m x A, tanh(W1 [h_t, h^e_i])
  Mat<T> outer;    // m x A, tanh(W2 inner)
};

template <typename T>
AttentionResult<T> attend(const AttentionMemory<T>& memory, const Vec<T>& query,
                          const ParamStore<T>& params);

template <typename T>
AttentionResult<T> attention(const Vec<T>& query, const Mat<T>& fused,
                             std::vector<bool> mask, const ParamStore<T>& params);

// Accumulates attention weight gradients and dL/d(fused) (m x d_enc);
// returns dL/d(query).
template <typename T>
Vec<T> attention_backward(const AttentionMemory<T>& memory, const Vec<T>& query,
                          const AttentionResult<T>& result,
                          const Vec<T>& d_context, const ParamStore<T>& params,
                          ParamStore<T>& grads, Mat<T>& d_fused);

// h_0 = tanh(W_init [final fwd h, final bwd h] + b_init), c_0 = 0.
template <typename T>
LstmState<T> initial_decoder_state(const Vec<T>& encoder_summary,
                                   const ParamStore<T>& params);

// Accumulates W_init/b_init gradients; returns dL/d(encoder summary).
template <typename T>
Vec<T> initial_state_backward(const Vec<T>& encoder_summary,
                              const LstmState<T>& initial, const Vec<T>& d_h0,
                              const ParamStore<T>& params, ParamStore<T>& grads);

template <typename T>
struct DecodeStepState {
  LstmState<T> lstm;
  int prev_token = 0;
};

template <typename T>
struct OutputLayer {
  Vec<T> hidden;  // o_t
  Vec<T> logits;  // Wo o_t
  Vec<T> probs;   // y_t over the full vocabulary
  T log_norm = 0; // log sum exp(logits)
};

template <typename T>
OutputLayer<T> output_layer(const Vec<T>& h, const Vec<T>& context,
                            const ParamStore<T>& params);

template <typename T>
struct OutputLayerGrads {
  Vec<T> d_h;
  Vec<T> d_context;
};

// d_logits is dL/d(Wo o_t).
template <typename T>
OutputLayerGrads<T> output_layer_backward(const Vec<T>& h, const Vec<T>& context,
                                          const OutputLayer<T>& out,
                                          const Vec<T>& d_logits,
                                          const ParamStore<T>& params,
                                          ParamStore<T>& grads);

template <typename T>
struct StepOutput {
  Vec<T> probs;
  DecodeStepState<T> state;
  Vec<T> alpha;
};

template <typename T>
StepOutput<T> decode_step(const DecodeStepState<T>& state,
                          const AttentionMemory<T>& memory,
                          const ParamStore<T>& params);

// Argmax over y_t excluding <PAD> and <SOS>, ties to the lower id.
template <typename T>
int pick_token(const Vec<T>& probs);

// Starts from <SOS>; stops at <EOS> (not emitted) or after max_len tokens.
// When step_probs is non-null, the distribution of every step is recorded.
template <typename T>
std::vector<int> greedy_decode(const AttentionMemory<T>& memory,
                               const LstmState<T>& initial,
                               const ParamStore<T>& params, int max_len,
                               std::vector<Vec<T>>* step_probs = nullptr);

}  // namespace mlr

#endif  // MLR_DECODER_H_
