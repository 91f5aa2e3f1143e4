#include "mlr/evalkit.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <stdexcept>

namespace mlr {

namespace {

void check_corpus(std::size_t candidates, std::size_t references) {
  if (candidates != references) {
    throw std::invalid_argument("candidate/reference count mismatch: " +
                                std::to_string(candidates) + " vs " +
                                std::to_string(references));
  }
  if (candidates == 0) throw std::invalid_argument("empty corpus");
}

std::map<std::vector<int>, int> ngram_counts(const IdSequence& seq, int k) {
  std::map<std::vector<int>, int> counts;
  for (std::size_t i = 0; i + k <= seq.size(); ++i) {
    ++counts[std::vector<int>(seq.begin() + i, seq.begin() + i + k)];
  }
  return counts;
}

}  // namespace

double bleu(std::span<const IdSequence> candidates,
            std::span<const IdSequence> references, int n) {
  check_corpus(candidates.size(), references.size());
  if (n < 1 || n > 3) throw std::invalid_argument("BLEU order must be 1, 2 or 3");

  std::size_t cand_len = 0;
  std::size_t ref_len = 0;
  std::vector<double> matched(n, 0.0);
  std::vector<double> total(n, 0.0);
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    cand_len += candidates[s].size();
    ref_len += references[s].size();
    for (int k = 1; k <= n; ++k) {
      const auto ref = ngram_counts(references[s], k);
      for (const auto& [gram, count] : ngram_counts(candidates[s], k)) {
        const auto it = ref.find(gram);
        if (it != ref.end()) matched[k - 1] += std::min(count, it->second);
        total[k - 1] += count;
      }
    }
  }
  if (cand_len == 0) return 0.0;

  double log_sum = 0;
  for (int k = 0; k < n; ++k) {
    const double p = matched[k] > 0 ? matched[k] / total[k]
                                    : 1.0 / (2.0 * std::max(total[k], 1.0));
    log_sum += std::log(p) / n;
  }
  const double bp = std::min(
      1.0, std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len)));
  return 100.0 * bp * std::exp(log_sum);
}

double exact_match(std::span<const IdSequence> candidates,
                   std::span<const IdSequence> references) {
  check_corpus(candidates.size(), references.size());
  std::size_t hits = 0;
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    hits += candidates[s] == references[s];
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(candidates.size());
}

double label_accuracy(std::span<const std::vector<Label>> predicted,
                      std::span<const std::vector<Label>> gold) {
  if (predicted.size() != gold.size()) {
    throw std::invalid_argument("label sequence count mismatch");
  }
  std::size_t hits = 0;
  std::size_t total = 0;
  for (std::size_t s = 0; s < predicted.size(); ++s) {
    if (predicted[s].size() != gold[s].size()) {
      throw std::invalid_argument("label length mismatch at sample " +
                                  std::to_string(s));
    }
    for (std::size_t i = 0; i < gold[s].size(); ++i) {
      hits += predicted[s][i] == gold[s][i];
    }
    total += gold[s].size();
  }
  if (total == 0) throw std::invalid_argument("no label positions");
  return 100.0 * static_cast<double>(hits) / static_cast<double>(total);
}

EvalReport evaluate(std::span<const NamedModel> models,
                    std::span<const DialogueSample> samples) {
  if (samples.empty()) throw std::invalid_argument("empty evaluation set");
  EvalReport report;
  report.sample_count = samples.size();
  for (const auto& named : models) {
    if (!named.model) throw std::invalid_argument("missing model " + named.name);
    const TrainedModel& model = *named.model;
    std::vector<IdSequence> candidates;
    std::vector<IdSequence> references;
    std::vector<std::vector<Label>> predicted;
    std::vector<std::vector<Label>> gold;
    for (const auto& sample : samples) {
      const auto flat = flatten(sample, model.vocab);
      auto out = model.rewrite_ids(flat.input_ids);
      candidates.push_back(std::move(out.ids));
      references.emplace_back(flat.target_ids.begin(), flat.target_ids.end() - 1);
      if (uses_crf(model.config.variant)) {
        predicted.push_back(std::move(out.labels));
        gold.push_back(flat.labels);
      }
    }
    EvalRow row;
    row.variant = named.name;
    row.bleu1 = bleu(candidates, references, 1);
    row.bleu2 = bleu(candidates, references, 2);
    row.bleu3 = bleu(candidates, references, 3);
    row.em = exact_match(candidates, references);
    if (!gold.empty()) row.label_acc = label_accuracy(predicted, gold);
    report.rows.push_back(std::move(row));
  }
  return report;
}

void write_report(std::ostream& out, const EvalReport& report) {
  const auto flags = out.flags();
  const auto precision = out.precision(2);
  out << std::fixed << "variant\tBLEU-1\tBLEU-2\tBLEU-3\tEM\tlabel_acc\n";
  for (const auto& row : report.rows) {
    out << row.variant << '\t' << row.bleu1 << '\t' << row.bleu2 << '\t'
        << row.bleu3 << '\t' << row.em << '\t';
    if (row.label_acc) {
      out << *row.label_acc;
    } else {
      out << "NA";
    }
    out << '\n';
  }
  out.flags(flags);
  out.precision(precision);
}

}  // namespace mlr
