// Corpus BLEU, exact match, label accuracy and the evaluation report.

#ifndef MLR_EVALKIT_H_
#define MLR_EVALKIT_H_

#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mlr/corpus.h"
#include "mlr/training.h"

namespace mlr {

using IdSequence = std::vector<int>;

// Cumulative corpus BLEU-n (n in 1..3) as a percentage. Clipped k-gram
// counts and candidate k-gram counts are pooled over the corpus; a zero
// precision is replaced by 1 / (2 * candidate k-gram count).
double bleu(std::span<const IdSequence> candidates,
            std::span<const IdSequence> references, int n);

double exact_match(std::span<const IdSequence> candidates,
                   std::span<const IdSequence> references);

// Micro-averaged over all positions.
double label_accuracy(std::span<const std::vector<Label>> predicted,
                      std::span<const std::vector<Label>> gold);

struct EvalRow {
  std::string variant;
  double bleu1 = 0;
  double bleu2 = 0;
  double bleu3 = 0;
  double em = 0;
  std::optional<double> label_acc;  // CRF variants only
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::size_t sample_count = 0;
};

struct NamedModel {
  std::string name;
  const TrainedModel* model = nullptr;
};

// Greedy-decodes every sample with each model. References are the targets
// encoded with that model's vocabulary.
EvalReport evaluate(std::span<const NamedModel> models,
                    std::span<const DialogueSample> samples);

// Header plus one TAB-separated row per variant: variant, BLEU-1, BLEU-2,
// BLEU-3, EM, label_acc ("NA" when absent).
void write_report(std::ostream& out, const EvalReport& report);

}  // namespace mlr

#endif  // MLR_EVALKIT_H_
