#include "mlr/decoder.h"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "mlr/corpus.h"

namespace mlr {

void DecoderConfig::validate() const {
  if (vocab_size < Vocab::kNumReserved) {
    throw std::invalid_argument("vocab_size must cover the reserved tokens");
  }
  if (d_emb < 1 || d_hid < 1 || d_enc < 1 || d_attn < 1) {
    throw std::invalid_argument("decoder widths must be >= 1");
  }
  if (max_decode_len < 1) {
    throw std::invalid_argument("max_decode_len must be >= 1");
  }
}

template <typename T>
void add_decoder_params(ParamStore<T>& params, const DecoderConfig& config,
                        std::uint64_t seed) {
  config.validate();
  const auto V = static_cast<std::size_t>(config.vocab_size);
  const auto E = static_cast<std::size_t>(config.d_emb);
  const auto H = static_cast<std::size_t>(config.d_hid);
  const auto D = static_cast<std::size_t>(config.d_enc);
  const auto A = static_cast<std::size_t>(config.d_attn);
  params.add(kDecInitWeightParam, glorot_uniform_init<T>({H, D}, seed + 1));
  params.add(kDecInitBiasParam, Shape{H});
  params.add(kDecLstmWeightParam, glorot_uniform_init<T>({4 * H, E + H}, seed + 2));
  Tensor<T> bias({4 * H});
  for (std::size_t k = H; k < 2 * H; ++k) bias[k] = T{1};
  params.add(kDecLstmBiasParam, std::move(bias));
  params.add(kAttnW1Param, glorot_uniform_init<T>({A, H + D}, seed + 3));
  params.add(kAttnW2Param, glorot_uniform_init<T>({A, A}, seed + 4));
  params.add(kAttnVParam, glorot_uniform_init<T>({A}, seed + 5));
  params.add(kOutWcParam, glorot_uniform_init<T>({H, H + D}, seed + 6));
  params.add(kOutWoParam, glorot_uniform_init<T>({V, H}, seed + 7));
}

template <typename T>
AttentionMemory<T> make_attention_memory(const Mat<T>& fused,
                                         std::vector<bool> mask,
                                         const ParamStore<T>& params) {
  if (fused.rows() == 0) throw std::invalid_argument("attention over nothing");
  if (mask.empty()) mask.assign(static_cast<std::size_t>(fused.rows()), true);
  if (mask.size() != static_cast<std::size_t>(fused.rows())) {
    throw std::invalid_argument("attention mask length mismatch");
  }
  bool any = false;
  for (bool b : mask) any = any || b;
  if (!any) throw std::invalid_argument("all attention positions are masked");
  const auto W1 = params[kAttnW1Param].matrix();
  if (W1.cols() <= fused.cols()) {
    throw std::invalid_argument("attention W1 narrower than the memory width");
  }
  AttentionMemory<T> memory;
  memory.values = fused;
  memory.keys.noalias() = fused * W1.rightCols(fused.cols()).transpose();
  memory.mask = std::move(mask);
  return memory;
}

template <typename T>
AttentionResult<T> attend(const AttentionMemory<T>& memory, const Vec<T>& query,
                          const ParamStore<T>& params) {
  const auto W1 = params[kAttnW1Param].matrix();
  const auto W2 = params[kAttnW2Param].matrix();
  const auto V = params[kAttnVParam].vector();
  const Eigen::Index H = W1.cols() - memory.values.cols();
  if (query.size() != H) throw std::invalid_argument("attention query width mismatch");
  const Eigen::Index m = memory.values.rows();

  AttentionResult<T> r;
  const Vec<T> a = W1.leftCols(H) * query;
  r.inner = (memory.keys.rowwise() + a.transpose()).array().tanh().matrix();
  r.outer = (r.inner * W2.transpose()).array().tanh().matrix();
  r.scores = r.outer * V;
  T max = std::numeric_limits<T>::lowest();
  for (Eigen::Index i = 0; i < m; ++i) {
    if (memory.mask[i]) max = std::max(max, r.scores[i]);
  }
  r.alpha = Vec<T>::Zero(m);
  T sum = 0;
  for (Eigen::Index i = 0; i < m; ++i) {
    if (memory.mask[i]) {
      r.alpha[i] = std::exp(r.scores[i] - max);
      sum += r.alpha[i];
    } else {
      r.scores[i] = std::numeric_limits<T>::lowest();
    }
  }
  r.alpha /= sum;
  r.context.noalias() = memory.values.transpose() * r.alpha;
  return r;
}

template <typename T>
AttentionResult<T> attention(const Vec<T>& query, const Mat<T>& fused,
                             std::vector<bool> mask, const ParamStore<T>& params) {
  return attend(make_attention_memory(fused, std::move(mask), params), query,
                params);
}

template <typename T>
Vec<T> attention_backward(const AttentionMemory<T>& memory, const Vec<T>& query,
                          const AttentionResult<T>& r, const Vec<T>& d_context,
                          const ParamStore<T>& params, ParamStore<T>& grads,
                          Mat<T>& d_fused) {
  const auto W1 = params[kAttnW1Param].matrix();
  const auto W2 = params[kAttnW2Param].matrix();
  const auto V = params[kAttnVParam].vector();
  const Eigen::Index D = memory.values.cols();
  const Eigen::Index H = W1.cols() - D;
  auto dW1 = grads[kAttnW1Param].matrix();
  auto dW2 = grads[kAttnW2Param].matrix();
  auto dV = grads[kAttnVParam].vector();

  d_fused.noalias() += r.alpha * d_context.transpose();
  const Vec<T> d_alpha = memory.values * d_context;
  const T mean = r.alpha.dot(d_alpha);
  const Vec<T> d_scores = r.alpha.cwiseProduct((d_alpha.array() - mean).matrix());

  dV.noalias() += r.outer.transpose() * d_scores;
  const Mat<T> d_pre2 =
      (d_scores * V.transpose()).cwiseProduct(
          (T{1} - r.outer.array().square()).matrix());
  dW2.noalias() += d_pre2.transpose() * r.inner;
  const Mat<T> d_pre1 = (d_pre2 * W2).cwiseProduct(
      (T{1} - r.inner.array().square()).matrix());
  dW1.rightCols(D).noalias() += d_pre1.transpose() * memory.values;
  d_fused.noalias() += d_pre1 * W1.rightCols(D);
  const Vec<T> d_a = d_pre1.colwise().sum().transpose();
  dW1.leftCols(H).noalias() += d_a * query.transpose();
  return W1.leftCols(H).transpose() * d_a;
}

template <typename T>
LstmState<T> initial_decoder_state(const Vec<T>& encoder_summary,
                                   const ParamStore<T>& params) {
  const auto W = params[kDecInitWeightParam].matrix();
  const auto b = params[kDecInitBiasParam].vector();
  if (W.cols() != encoder_summary.size()) {
    throw std::invalid_argument("encoder summary width mismatch");
  }
  LstmState<T> s;
  s.h = (W * encoder_summary + b).array().tanh().matrix();
  s.c = Vec<T>::Zero(W.rows());
  return s;
}

template <typename T>
Vec<T> initial_state_backward(const Vec<T>& encoder_summary,
                              const LstmState<T>& initial, const Vec<T>& d_h0,
                              const ParamStore<T>& params, ParamStore<T>& grads) {
  const auto W = params[kDecInitWeightParam].matrix();
  const Vec<T> d_pre =
      d_h0.cwiseProduct((T{1} - initial.h.array().square()).matrix());
  grads[kDecInitWeightParam].matrix().noalias() +=
      d_pre * encoder_summary.transpose();
  grads[kDecInitBiasParam].vector() += d_pre;
  return W.transpose() * d_pre;
}

template <typename T>
OutputLayer<T> output_layer(const Vec<T>& h, const Vec<T>& context,
                            const ParamStore<T>& params) {
  const auto Wc = params[kOutWcParam].matrix();
  const auto Wo = params[kOutWoParam].matrix();
  const Eigen::Index H = h.size();
  OutputLayer<T> out;
  out.hidden = (Wc.leftCols(H) * h + Wc.rightCols(context.size()) * context)
                   .array()
                   .tanh()
                   .matrix();
  out.logits = Wo * out.hidden;
  const T max = out.logits.maxCoeff();
  out.probs = (out.logits.array() - max).exp().matrix();
  const T sum = out.probs.sum();
  out.probs /= sum;
  out.log_norm = max + std::log(sum);
  return out;
}

template <typename T>
OutputLayerGrads<T> output_layer_backward(const Vec<T>& h, const Vec<T>& context,
                                          const OutputLayer<T>& out,
                                          const Vec<T>& d_logits,
                                          const ParamStore<T>& params,
                                          ParamStore<T>& grads) {
  const auto Wc = params[kOutWcParam].matrix();
  const auto Wo = params[kOutWoParam].matrix();
  const Eigen::Index H = h.size();
  const Eigen::Index D = context.size();
  grads[kOutWoParam].matrix().noalias() += d_logits * out.hidden.transpose();
  const Vec<T> d_pre = (Wo.transpose() * d_logits)
                           .cwiseProduct((T{1} - out.hidden.array().square()).matrix());
  auto dWc = grads[kOutWcParam].matrix();
  dWc.leftCols(H).noalias() += d_pre * h.transpose();
  dWc.rightCols(D).noalias() += d_pre * context.transpose();
  return {Wc.leftCols(H).transpose() * d_pre, Wc.rightCols(D).transpose() * d_pre};
}

template <typename T>
StepOutput<T> decode_step(const DecodeStepState<T>& state,
                          const AttentionMemory<T>& memory,
                          const ParamStore<T>& params) {
  const auto& table = params[kEmbeddingParam];
  const int prev = state.prev_token;
  const Vec<T> x = embed<T>(std::span<const int>(&prev, 1), table).row(0).transpose();
  StepOutput<T> out;
  out.state.lstm = lstm_cell<T>(x, state.lstm, params[kDecLstmWeightParam],
                                params[kDecLstmBiasParam]);
  const auto att = attend(memory, out.state.lstm.h, params);
  out.probs = output_layer(out.state.lstm.h, att.context, params).probs;
  out.alpha = att.alpha;
  out.state.prev_token = pick_token(out.probs);
  return out;
}

template <typename T>
int pick_token(const Vec<T>& probs) {
  int best = -1;
  for (int id = 0; id < probs.size(); ++id) {
    if (id == Vocab::kPad || id == Vocab::kSos) continue;
    if (best < 0 || probs[id] > probs[best]) best = id;
  }
  return best;
}

template <typename T>
std::vector<int> greedy_decode(const AttentionMemory<T>& memory,
                               const LstmState<T>& initial,
                               const ParamStore<T>& params, int max_len,
                               std::vector<Vec<T>>* step_probs) {
  if (max_len < 1) throw std::invalid_argument("max_len must be >= 1");
  DecodeStepState<T> state{initial, Vocab::kSos};
  std::vector<int> out;
  for (int t = 0; t < max_len; ++t) {
    auto step = decode_step(state, memory, params);
    if (step_probs) step_probs->push_back(step.probs);
    state = std::move(step.state);
    if (state.prev_token == Vocab::kEos) break;
    out.push_back(state.prev_token);
  }
  return out;
}

#define MLR_INSTANTIATE_DECODER(T)                                             \
  template void add_decoder_params<T>(ParamStore<T>&, const DecoderConfig&,    \
                                      std::uint64_t);                          \
  template AttentionMemory<T> make_attention_memory<T>(                        \
      const Mat<T>&, std::vector<bool>, const ParamStore<T>&);                 \
  template AttentionResult<T> attend<T>(const AttentionMemory<T>&,             \
                                        const Vec<T>&, const ParamStore<T>&);  \
  template AttentionResult<T> attention<T>(const Vec<T>&, const Mat<T>&,       \
                                           std::vector<bool>,                  \
                                           const ParamStore<T>&);              \
  template Vec<T> attention_backward<T>(                                       \
      const AttentionMemory<T>&, const Vec<T>&, const AttentionResult<T>&,     \
      const Vec<T>&, const ParamStore<T>&, ParamStore<T>&, Mat<T>&);           \
  template LstmState<T> initial_decoder_state<T>(const Vec<T>&,                \
                                                 const ParamStore<T>&);        \
  template Vec<T> initial_state_backward<T>(const Vec<T>&,                     \
                                            const LstmState<T>&,               \
                                            const Vec<T>&,                     \
                                            const ParamStore<T>&,              \
                                            ParamStore<T>&);                   \
  template OutputLayer<T> output_layer<T>(const Vec<T>&, const Vec<T>&,        \
                                          const ParamStore<T>&);               \
  template OutputLayerGrads<T> output_layer_backward<T>(                       \
      const Vec<T>&, const Vec<T>&, const OutputLayer<T>&, const Vec<T>&,      \
      const ParamStore<T>&, ParamStore<T>&);                                   \
  template StepOutput<T> decode_step<T>(const DecodeStepState<T>&,             \
                                        const AttentionMemory<T>&,             \
                                        const ParamStore<T>&);                 \
  template int pick_token<T>(const Vec<T>&);                                   \
  template std::vector<int> greedy_decode<T>(                                  \
      const AttentionMemory<T>&, const LstmState<T>&, const ParamStore<T>&,    \
      int, std::vector<Vec<T>>*);

MLR_INSTANTIATE_DECODER(float)
MLR_INSTANTIATE_DECODER(double)

#undef MLR_INSTANTIATE_DECODER

}  // namespace mlr
