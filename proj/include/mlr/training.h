// Joint objective, training configuration and the training loop.

#ifndef MLR_TRAINING_H_
#define MLR_TRAINING_H_

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mlr/corpus.h"
#include "mlr/model.h"
#include "mlr/numerics.h"

namespace mlr {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training configuration. Text form is one `key=value` per line, '#'
// comments allowed; unknown or repeated keys are rejected.
struct TrainConfig {
  double lr = 0.001;
  int d_emb = 64;
  int d_hid = 128;
  int batch_size = 16;
  int epochs = 30;
  std::optional<std::uint64_t> seed;  // required
  int max_len = 30;                   // generation cap
  Variant variant = Variant::kCrfJoint;
  Fusion fusion = Fusion::kGold;
  double clip_norm = 5.0;
  double labeling_weight = 1.0;
  int min_count = 1;
  int dev_limit = 200;

  // Throws ConfigError.
  void validate() const;
  ModelConfig model_config(int vocab_size) const;

  static TrainConfig parse(std::istream& in);
  static TrainConfig parse(const std::string& text);
  static TrainConfig load(const std::string& path);
  // Canonical text; parse(serialize()) reproduces the config.
  std::string serialize() const;

  bool operator==(const TrainConfig&) const = default;
};

// Per-batch means of per-sample sums. L = L_g + labeling_weight * L_c.
struct LossBreakdown {
  double L = 0;
  double L_g = 0;
  double L_c = 0;
};

// A sample produced a NaN or infinite loss.
class NonFiniteLossError : public std::runtime_error {
 public:
  NonFiniteLossError(int sample_index, const std::string& what);
  int sample_index() const { return sample_index_; }

 private:
  int sample_index_;
};

struct JointLossOptions {
  Variant variant = Variant::kCrfJoint;
  Fusion fusion = Fusion::kGold;
  LossTerms terms = LossTerms::kJoint;
  double labeling_weight = 1.0;
};

// Mean loss over the batch. When grads is non-null the gradient of the
// batch mean (restricted to options.terms) is added into it. Viterbi
// labels of every sample are appended to `predicted` when non-null.
template <typename T>
LossBreakdown joint_loss(const Batch& batch, const ParamStore<T>& params,
                         const JointLossOptions& options, ParamStore<T>* grads,
                         std::vector<std::vector<Label>>* predicted = nullptr);

struct RewriteResult {
  Tokens tokens;
  std::vector<Label> labels;  // empty for seq2seq
};

struct TrainedModel {
  TrainConfig config;
  Vocab vocab;
  ParamStore<float> params;

  ModelConfig model_config() const { return config.model_config(vocab.size()); }
  RewriteResult rewrite(const std::vector<Tokens>& context) const;
  RewriteOutput<float> rewrite_ids(std::span<const int> input_ids) const;
};

struct EpochMetrics {
  int epoch = 0;
  LossBreakdown loss;               // mean over training samples
  std::optional<double> label_acc;  // training-set Viterbi accuracy, %
  double dev_em = 0;                // %
};

// TAB-separated: epoch, L, L_g, L_c, label_acc ("NA" without a CRF), dev_EM.
std::string format_metrics(const EpochMetrics& metrics);

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(int epoch, std::int64_t step, const std::string& what);
  int epoch() const { return epoch_; }
  std::int64_t step() const { return step_; }

 private:
  int epoch_;
  std::int64_t step_;
};

// Called after every completed epoch with the model at that point.
using EpochCallback =
    std::function<void(const EpochMetrics&, const TrainedModel&)>;

// Deterministic given config.seed. With no dev samples, the first
// config.dev_limit training samples serve as the dev set. Throws
// DivergenceError on a non-finite loss or parameter; models passed to
// on_epoch before that remain valid.
TrainedModel train(const TrainConfig& config,
                   std::span<const DialogueSample> train_samples,
                   std::span<const DialogueSample> dev_samples = {},
                   const EpochCallback& on_epoch = nullptr);

// Greedy-decodes every sample and returns the exact-match percentage.
double dev_exact_match(const TrainedModel& model,
                       std::span<const LabeledSample> samples);

// The tiny double-precision model used for gradient verification:
// V = 20, d_emb = d_hid = 8, a 5-token input with one <SEP>, and a target of
// 4 ids including <EOS>. Everything is drawn from `seed`.
struct TinyProblem {
  ModelConfig config;
  ParamStore<double> params;
  LabeledSample sample;
};
TinyProblem make_tiny_problem(std::uint64_t seed);

// Finite-difference check of the batch joint loss on the tiny problem.
// The analytic gradient is multiplied by `gradient_scale` before comparison
// (1 for a real check; anything else is a negative control).
GradCheckReport joint_loss_gradcheck(std::uint64_t seed, Variant variant,
                                     Fusion fusion,
                                     const GradCheckOptions& options,
                                     double gradient_scale = 1.0);

}  // namespace mlr

#endif  // MLR_TRAINING_H_
