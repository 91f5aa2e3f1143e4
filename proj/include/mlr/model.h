// The full rewriting model: parameter layout, the per-sample joint loss with
// its analytic gradient, and inference.

#ifndef MLR_MODEL_H_
#define MLR_MODEL_H_

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mlr/corpus.h"
#include "mlr/crf.h"
#include "mlr/decoder.h"
#include "mlr/encoder.h"
#include "mlr/numerics.h"

namespace mlr {

// kSeq2Seq attends raw encoder states and has no labeling loss.
// kCrfSeparate alternates labeling-only and generation-only updates.
// kCrfJoint optimizes the summed objective.
enum class Variant { kSeq2Seq, kCrfSeparate, kCrfJoint };

// Which labels feed the category-vector fusion during training.
enum class Fusion { kGold, kViterbi, kMarginal };

std::string variant_name(Variant variant);  // seq2seq | crf_s | crf_j
Variant parse_variant(std::string_view name);
std::string fusion_name(Fusion fusion);     // gold | viterbi | marginal
Fusion parse_fusion(std::string_view name);
inline bool uses_crf(Variant v) { return v != Variant::kSeq2Seq; }

struct ModelConfig {
  int vocab_size = 0;
  int d_emb = 64;
  int d_hid = 64;
  int max_decode_len = 30;

  int d_enc() const { return 2 * d_hid; }
  int d_attn() const { return d_hid; }
  EncoderConfig encoder() const;
  DecoderConfig decoder() const;
  void validate() const;
};

template <typename T>
ParamStore<T> init_params(const ModelConfig& config, std::uint64_t seed);

enum class LossTerms { kJoint, kGenerationOnly, kLabelingOnly };

struct LossOptions {
  Variant variant = Variant::kCrfJoint;
  Fusion fusion = Fusion::kGold;
  // Which terms contribute to the gradient; both losses are always reported.
  LossTerms terms = LossTerms::kJoint;
  double labeling_weight = 1.0;
  // Multiplies every accumulated gradient (1 / batch size for batch means).
  double grad_scale = 1.0;
  bool predict_labels = false;
};

template <typename T>
struct SampleLoss {
  T generation = 0;  // -sum_t log y_t[target_t], <EOS> included
  T labeling = 0;    // -log p(gold labels); 0 for kSeq2Seq
  std::vector<Label> predicted;  // Viterbi labels when requested
};

// Teacher-forced loss for one sample. When grads is non-null the gradient of
// generation + labeling_weight * labeling (restricted to options.terms) is
// added into it.
template <typename T>
SampleLoss<T> sample_loss(const ParamStore<T>& params, const LabeledSample& sample,
                          const LossOptions& options, ParamStore<T>* grads);

// Step distributions when every previous token is the gold one.
template <typename T>
std::vector<Vec<T>> teacher_forced_distributions(const ParamStore<T>& params,
                                                 const LabeledSample& sample,
                                                 Variant variant, Fusion fusion);

template <typename T>
struct RewriteOutput {
  std::vector<int> ids;       // without <EOS>
  std::vector<Label> labels;  // Viterbi labels; empty for kSeq2Seq
};

// CRF variants fuse Viterbi labels, or soft marginals for models trained
// with Fusion::kMarginal.
template <typename T>
RewriteOutput<T> rewrite_ids(const ParamStore<T>& params, Variant variant,
                             Fusion fusion, std::span<const int> input_ids,
                             int max_len, std::vector<Vec<T>>* step_probs = nullptr);

// Viterbi labels alone.
template <typename T>
std::vector<Label> predict_labels(const ParamStore<T>& params,
                                  std::span<const int> input_ids);

}  // namespace mlr

#endif  // MLR_MODEL_H_
