#include "mlr/model.h"

#include <cmath>
#include <stdexcept>

namespace mlr {

std::string variant_name(Variant variant) {
  switch (variant) {
    case Variant::kSeq2Seq:
      return "seq2seq";
    case Variant::kCrfSeparate:
      return "crf_s";
    case Variant::kCrfJoint:
      return "crf_j";
  }
  throw std::invalid_argument("bad variant");
}

Variant parse_variant(std::string_view name) {
  if (name == "seq2seq") return Variant::kSeq2Seq;
  if (name == "crf_s") return Variant::kCrfSeparate;
  if (name == "crf_j") return Variant::kCrfJoint;
  throw std::invalid_argument("unknown variant '" + std::string(name) +
                              "' (expected seq2seq, crf_s or crf_j)");
}

std::string fusion_name(Fusion fusion) {
  switch (fusion) {
    case Fusion::kGold:
      return "gold";
    case Fusion::kViterbi:
      return "viterbi";
    case Fusion::kMarginal:
      return "marginal";
  }
  throw std::invalid_argument("bad fusion mode");
}

Fusion parse_fusion(std::string_view name) {
  if (name == "gold") return Fusion::kGold;
  if (name == "viterbi") return Fusion::kViterbi;
  if (name == "marginal") return Fusion::kMarginal;
  throw std::invalid_argument("unknown fusion mode '" + std::string(name) +
                              "' (expected gold, viterbi or marginal)");
}

EncoderConfig ModelConfig::encoder() const {
  return {vocab_size, d_emb, d_hid};
}

DecoderConfig ModelConfig::decoder() const {
  return {vocab_size, d_emb, d_hid, d_enc(), d_attn(), max_decode_len};
}

void ModelConfig::validate() const {
  encoder().validate();
  decoder().validate();
}

template <typename T>
ParamStore<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ParamStore<T> params;
  add_encoder_params(params, config.encoder(), seed);
  add_crf_params<T>(params, config.d_enc(), seed + 1000);
  add_decoder_params(params, config.decoder(), seed + 2000);
  return params;
}

namespace {

// Forward state of one sample, kept for the backward pass.
template <typename T>
struct Forward {
  std::vector<int> decoder_inputs;
  EncoderStates<T> encoder;
  ScoreLattice<T> lattice;
  CrfMarginals<T> marginals;
  std::vector<Label> fusion_labels;
  Mat<T> categories;
  AttentionMemory<T> memory;
  Vec<T> summary;
  LstmState<T> initial;
  LstmTrace<T> decoder;
  std::vector<AttentionResult<T>> attention;
  std::vector<OutputLayer<T>> outputs;
};

template <typename T>
void check_sample(const LabeledSample& sample, int vocab_size) {
  if (sample.input_ids.empty()) throw std::invalid_argument("empty input sequence");
  if (sample.target_ids.empty()) throw std::invalid_argument("empty target sequence");
  if (sample.labels.size() != sample.input_ids.size()) {
    throw std::invalid_argument("label/input length mismatch");
  }
  for (int id : sample.target_ids) {
    if (id < 0 || id >= vocab_size) {
      throw std::out_of_range("target id " + std::to_string(id) + " out of range");
    }
  }
}

template <typename T>
Mat<T> fused_states(Forward<T>& f, const ParamStore<T>& params, Variant variant,
                    Fusion fusion, std::span<const Label> gold) {
  if (!uses_crf(variant)) return f.encoder.h;
  f.categories = category_matrix(params);
  switch (fusion) {
    case Fusion::kGold:
      f.fusion_labels.assign(gold.begin(), gold.end());
      break;
    case Fusion::kViterbi:
      f.fusion_labels = viterbi_decode(f.lattice);
      break;
    case Fusion::kMarginal:
      return fuse_soft(f.encoder.h, f.marginals.node, f.categories);
  }
  return fuse_category(f.encoder.h, f.fusion_labels, f.categories);
}

template <typename T>
Forward<T> run_forward(const ParamStore<T>& params, const LabeledSample& sample,
                       Variant variant, Fusion fusion) {
  const auto& table = params[kEmbeddingParam];
  check_sample<T>(sample, static_cast<int>(table.dim(0)));
  Forward<T> f;
  f.encoder = bilstm_encode<T>(embed<T>(sample.input_ids, table), params);
  if (uses_crf(variant)) {
    f.lattice = score_lattice(f.encoder.h, params[kCrfWeightParam],
                              params[kCrfBiasParam]);
    f.marginals = forward_backward(f.lattice);
  }
  f.memory = make_attention_memory<T>(
      fused_states(f, params, variant, fusion, sample.labels), {}, params);
  f.summary = f.encoder.summary();
  f.initial = initial_decoder_state(f.summary, params);

  f.decoder_inputs.push_back(Vocab::kSos);
  f.decoder_inputs.insert(f.decoder_inputs.end(), sample.target_ids.begin(),
                          sample.target_ids.end() - 1);
  f.decoder = lstm_forward<T>(embed<T>(f.decoder_inputs, table),
                              params[kDecLstmWeightParam],
                              params[kDecLstmBiasParam], false, &f.initial);
  const auto n = sample.target_ids.size();
  f.attention.reserve(n);
  f.outputs.reserve(n);
  for (std::size_t t = 0; t < n; ++t) {
    const Vec<T> h = f.decoder.h.row(static_cast<Eigen::Index>(t)).transpose();
    f.attention.push_back(attend(f.memory, h, params));
    f.outputs.push_back(output_layer(h, f.attention.back().context, params));
  }
  return f;
}

}  // namespace

template <typename T>
SampleLoss<T> sample_loss(const ParamStore<T>& params, const LabeledSample& sample,
                          const LossOptions& options, ParamStore<T>* grads) {
  const Variant variant = options.variant;
  Forward<T> f = run_forward(params, sample, variant, options.fusion);

  SampleLoss<T> loss;
  for (std::size_t t = 0; t < sample.target_ids.size(); ++t) {
    const auto& out = f.outputs[t];
    loss.generation += out.log_norm - out.logits[sample.target_ids[t]];
  }
  if (uses_crf(variant)) {
    loss.labeling = f.marginals.log_z - path_score(f.lattice, sample.labels);
    if (options.predict_labels) loss.predicted = viterbi_decode(f.lattice);
  }
  if (!grads) return loss;

  const bool want_gen = options.terms != LossTerms::kLabelingOnly;
  const bool want_lab =
      uses_crf(variant) && options.terms != LossTerms::kGenerationOnly;
  if (!want_gen && !want_lab) return loss;

  const T scale = static_cast<T>(options.grad_scale);
  const Eigen::Index m = f.encoder.h.rows();
  const Eigen::Index D = f.encoder.h.cols();
  Mat<T> d_enc = Mat<T>::Zero(m, D);
  ScoreLattice<T> d_scores(static_cast<int>(m));

  if (want_gen) {
    const auto n = static_cast<Eigen::Index>(sample.target_ids.size());
    Mat<T> d_fused = Mat<T>::Zero(m, D);
    Mat<T> d_dec = Mat<T>::Zero(n, f.decoder.h.cols());
    for (Eigen::Index t = 0; t < n; ++t) {
      const auto& out = f.outputs[t];
      const Vec<T> h = f.decoder.h.row(t).transpose();
      Vec<T> d_logits = out.probs * scale;
      d_logits[sample.target_ids[t]] -= scale;
      const auto og = output_layer_backward(h, f.attention[t].context, out,
                                            d_logits, params, *grads);
      d_dec.row(t) += og.d_h.transpose();
      d_dec.row(t) += attention_backward(f.memory, h, f.attention[t], og.d_context,
                                         params, *grads, d_fused)
                          .transpose();
    }
    LstmState<T> d_initial;
    const Mat<T> d_dec_in = lstm_backward<T>(
        f.decoder, params[kDecLstmWeightParam], d_dec,
        (*grads)[kDecLstmWeightParam], (*grads)[kDecLstmBiasParam], &d_initial);
    embed_backward<T>(f.decoder_inputs, d_dec_in, (*grads)[kEmbeddingParam]);
    const Vec<T> d_summary =
        initial_state_backward(f.summary, f.initial, d_initial.h, params, *grads);
    const Eigen::Index H = D / 2;
    d_enc.row(m - 1).head(H) += d_summary.head(H).transpose();
    d_enc.row(0).tail(H) += d_summary.tail(H).transpose();

    d_enc += d_fused;
    if (uses_crf(variant)) {
      if (options.fusion == Fusion::kMarginal) {
        const Mat<T> d_cat = f.marginals.node.transpose() * d_fused;
        for (int c = 0; c < kNumLabels; ++c) {
          (*grads)[category_param_name(static_cast<Label>(c))].vector() +=
              d_cat.row(c).transpose();
        }
        const Mat<T> d_node = d_fused * f.categories.transpose();
        const auto d_marg = node_marginal_backward(f.lattice, f.marginals, d_node);
        d_scores.as_matrix() += d_marg.as_matrix();
      } else {
        for (Eigen::Index i = 0; i < m; ++i) {
          (*grads)[category_param_name(f.fusion_labels[i])].vector() +=
              d_fused.row(i).transpose();
        }
      }
    }
  }

  if (want_lab) {
    const auto nll = nll_gradient(f.marginals, sample.labels);
    d_scores.as_matrix() += nll.as_matrix() *
                            static_cast<T>(options.labeling_weight * options.grad_scale);
  }

  if (uses_crf(variant)) {
    score_lattice_backward(f.encoder.h, params[kCrfWeightParam], d_scores,
                           (*grads)[kCrfWeightParam], (*grads)[kCrfBiasParam],
                           d_enc);
  }
  const Mat<T> d_emb = bilstm_backward(f.encoder, d_enc, params, *grads);
  embed_backward<T>(sample.input_ids, d_emb, (*grads)[kEmbeddingParam]);
  return loss;
}

template <typename T>
std::vector<Vec<T>> teacher_forced_distributions(const ParamStore<T>& params,
                                                 const LabeledSample& sample,
                                                 Variant variant, Fusion fusion) {
  Forward<T> f = run_forward(params, sample, variant, fusion);
  std::vector<Vec<T>> out;
  for (const auto& o : f.outputs) out.push_back(o.probs);
  return out;
}

template <typename T>
RewriteOutput<T> rewrite_ids(const ParamStore<T>& params, Variant variant,
                             Fusion fusion, std::span<const int> input_ids,
                             int max_len, std::vector<Vec<T>>* step_probs) {
  if (input_ids.empty()) throw std::invalid_argument("empty input sequence");
  const auto encoder =
      bilstm_encode<T>(embed<T>(input_ids, params[kEmbeddingParam]), params);
  RewriteOutput<T> out;
  Mat<T> fused = encoder.h;
  if (uses_crf(variant)) {
    const auto lattice =
        score_lattice(encoder.h, params[kCrfWeightParam], params[kCrfBiasParam]);
    out.labels = viterbi_decode(lattice);
    const Mat<T> categories = category_matrix(params);
    fused = fusion == Fusion::kMarginal
                ? fuse_soft(encoder.h, forward_backward(lattice).node, categories)
                : fuse_category(encoder.h, out.labels, categories);
  }
  const auto memory = make_attention_memory<T>(fused, {}, params);
  const auto initial = initial_decoder_state(encoder.summary(), params);
  out.ids = greedy_decode(memory, initial, params, max_len, step_probs);
  return out;
}

template <typename T>
std::vector<Label> predict_labels(const ParamStore<T>& params,
                                  std::span<const int> input_ids) {
  const auto encoder =
      bilstm_encode<T>(embed<T>(input_ids, params[kEmbeddingParam]), params);
  return viterbi_decode(
      score_lattice(encoder.h, params[kCrfWeightParam], params[kCrfBiasParam]));
}

#define MLR_INSTANTIATE_MODEL(T)                                               \
  template ParamStore<T> init_params<T>(const ModelConfig&, std::uint64_t);    \
  template SampleLoss<T> sample_loss<T>(const ParamStore<T>&,                  \
                                        const LabeledSample&,                  \
                                        const LossOptions&, ParamStore<T>*);   \
  template std::vector<Vec<T>> teacher_forced_distributions<T>(                \
      const ParamStore<T>&, const LabeledSample&, Variant, Fusion);            \
  template RewriteOutput<T> rewrite_ids<T>(const ParamStore<T>&, Variant,      \
                                           Fusion, std::span<const int>, int,  \
                                           std::vector<Vec<T>>*);              \
  template std::vector<Label> predict_labels<T>(const ParamStore<T>&,          \
                                                std::span<const int>);

MLR_INSTANTIATE_MODEL(float)
MLR_INSTANTIATE_MODEL(double)

#undef MLR_INSTANTIATE_MODEL

}  // namespace mlr
