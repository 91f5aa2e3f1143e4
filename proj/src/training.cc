#include "mlr/training.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace mlr {

namespace {

std::string trim(std::string_view s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string_view::npos) return {};
  const auto end = s.find_last_not_of(" \t\r");
  return std::string(s.substr(begin, end - begin + 1));
}

template <typename Number>
Number parse_number(const std::string& key, const std::string& value) {
  Number out{};
  const auto* first = value.data();
  const auto* last = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last) {
    throw ConfigError("config key '" + key + "': cannot parse '" + value + "'");
  }
  return out;
}

std::string format_double(double value) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, ptr);
}

}  // namespace

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid config: " + what);
  };
  require(std::isfinite(lr) && lr > 0, "lr must be positive");
  require(d_emb >= 1, "d_emb must be >= 1");
  require(d_hid >= 1, "d_hid must be >= 1");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(epochs >= 1, "epochs must be >= 1");
  require(seed.has_value(), "seed is required");
  require(max_len >= 1, "max_len must be >= 1");
  require(std::isfinite(clip_norm) && clip_norm > 0, "clip_norm must be positive");
  require(std::isfinite(labeling_weight) && labeling_weight > 0,
          "labeling_weight must be positive");
  require(min_count >= 1, "min_count must be >= 1");
  require(dev_limit >= 1, "dev_limit must be >= 1");
}

ModelConfig TrainConfig::model_config(int vocab_size) const {
  ModelConfig mc;
  mc.vocab_size = vocab_size;
  mc.d_emb = d_emb;
  mc.d_hid = d_hid;
  mc.max_decode_len = max_len;
  return mc;
}

TrainConfig TrainConfig::parse(std::istream& in) {
  TrainConfig config;
  std::set<std::string> seen;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped.front() == '#') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) +
                        ": expected key=value");
    }
    const std::string key = trim(std::string_view(stripped).substr(0, eq));
    const std::string value = trim(std::string_view(stripped).substr(eq + 1));
    if (!seen.insert(key).second) {
      throw ConfigError("config line " + std::to_string(line_no) +
                        ": duplicate key '" + key + "'");
    }
    try {
      if (key == "lr") {
        config.lr = parse_number<double>(key, value);
      } else if (key == "d_emb") {
        config.d_emb = parse_number<int>(key, value);
      } else if (key == "d_hid") {
        config.d_hid = parse_number<int>(key, value);
      } else if (key == "batch_size") {
        config.batch_size = parse_number<int>(key, value);
      } else if (key == "epochs") {
        config.epochs = parse_number<int>(key, value);
      } else if (key == "seed") {
        config.seed = parse_number<std::uint64_t>(key, value);
      } else if (key == "max_len") {
        config.max_len = parse_number<int>(key, value);
      } else if (key == "variant") {
        config.variant = parse_variant(value);
      } else if (key == "fusion") {
        config.fusion = parse_fusion(value);
      } else if (key == "clip_norm") {
        config.clip_norm = parse_number<double>(key, value);
      } else if (key == "labeling_weight") {
        config.labeling_weight = parse_number<double>(key, value);
      } else if (key == "min_count") {
        config.min_count = parse_number<int>(key, value);
      } else if (key == "dev_limit") {
        config.dev_limit = parse_number<int>(key, value);
      } else {
        throw ConfigError("unknown config key '" + key + "'");
      }
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  config.validate();
  return config;
}

TrainConfig TrainConfig::parse(const std::string& text) {
  std::istringstream in(text);
  return parse(in);
}

TrainConfig TrainConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  return parse(in);
}

std::string TrainConfig::serialize() const {
  std::ostringstream out;
  out << "lr=" << format_double(lr) << '\n'
      << "d_emb=" << d_emb << '\n'
      << "d_hid=" << d_hid << '\n'
      << "batch_size=" << batch_size << '\n'
      << "epochs=" << epochs << '\n';
  if (seed) out << "seed=" << *seed << '\n';
  out << "max_len=" << max_len << '\n'
      << "variant=" << variant_name(variant) << '\n'
      << "fusion=" << fusion_name(fusion) << '\n'
      << "clip_norm=" << format_double(clip_norm) << '\n'
      << "labeling_weight=" << format_double(labeling_weight) << '\n'
      << "min_count=" << min_count << '\n'
      << "dev_limit=" << dev_limit << '\n';
  return out.str();
}

NonFiniteLossError::NonFiniteLossError(int sample_index, const std::string& what)
    : std::runtime_error(what), sample_index_(sample_index) {}

DivergenceError::DivergenceError(int epoch, std::int64_t step,
                                 const std::string& what)
    : std::runtime_error(what), epoch_(epoch), step_(step) {}

template <typename T>
LossBreakdown joint_loss(const Batch& batch, const ParamStore<T>& params,
                         const JointLossOptions& options, ParamStore<T>* grads,
                         std::vector<std::vector<Label>>* predicted) {
  if (batch.size < 1) throw std::invalid_argument("empty batch");
  LossOptions lo;
  lo.variant = options.variant;
  lo.fusion = options.fusion;
  lo.terms = options.terms;
  lo.labeling_weight = options.labeling_weight;
  lo.grad_scale = 1.0 / batch.size;
  lo.predict_labels = predicted != nullptr && uses_crf(options.variant);

  double gen_sum = 0;
  double lab_sum = 0;
  for (int b = 0; b < batch.size; ++b) {
    auto loss = sample_loss(params, batch.sample(b), lo, grads);
    const double gen = loss.generation;
    const double lab = loss.labeling;
    if (!std::isfinite(gen) || !std::isfinite(lab)) {
      throw NonFiniteLossError(b, "non-finite loss at batch sample " +
                                      std::to_string(b));
    }
    gen_sum += gen;
    lab_sum += lab;
    if (predicted) predicted->push_back(std::move(loss.predicted));
  }
  LossBreakdown out;
  out.L_g = gen_sum / batch.size;
  out.L_c = lab_sum / batch.size;
  out.L = out.L_g + options.labeling_weight * out.L_c;
  return out;
}

template LossBreakdown joint_loss<float>(const Batch&, const ParamStore<float>&,
                                         const JointLossOptions&,
                                         ParamStore<float>*,
                                         std::vector<std::vector<Label>>*);
template LossBreakdown joint_loss<double>(const Batch&, const ParamStore<double>&,
                                          const JointLossOptions&,
                                          ParamStore<double>*,
                                          std::vector<std::vector<Label>>*);

RewriteOutput<float> TrainedModel::rewrite_ids(std::span<const int> input_ids) const {
  return mlr::rewrite_ids(params, config.variant, config.fusion, input_ids,
                          config.max_len);
}

RewriteResult TrainedModel::rewrite(const std::vector<Tokens>& context) const {
  const auto ids = vocab.encode(flatten_context(context));
  auto out = rewrite_ids(ids);
  return {vocab.decode(out.ids), std::move(out.labels)};
}

std::string format_metrics(const EpochMetrics& m) {
  std::ostringstream out;
  out.precision(6);
  out << std::fixed << m.epoch << '\t' << m.loss.L << '\t' << m.loss.L_g << '\t'
      << m.loss.L_c << '\t';
  if (m.label_acc) {
    out << *m.label_acc;
  } else {
    out << "NA";
  }
  out << '\t' << m.dev_em;
  return out.str();
}

double dev_exact_match(const TrainedModel& model,
                       std::span<const LabeledSample> samples) {
  if (samples.empty()) throw std::invalid_argument("empty dev set");
  int hits = 0;
  for (const auto& s : samples) {
    const auto out = model.rewrite_ids(s.input_ids);
    if (std::equal(out.ids.begin(), out.ids.end(), s.target_ids.begin(),
                   s.target_ids.end() - 1)) {
      ++hits;
    }
  }
  return 100.0 * hits / static_cast<double>(samples.size());
}

TrainedModel train(const TrainConfig& config,
                   std::span<const DialogueSample> train_samples,
                   std::span<const DialogueSample> dev_samples,
                   const EpochCallback& on_epoch) {
  config.validate();
  if (train_samples.empty()) throw std::invalid_argument("empty training set");
  const std::uint64_t seed = *config.seed;

  TrainedModel model;
  model.config = config;
  model.vocab = Vocab::build(train_samples, config.min_count);
  model.params = init_params<float>(model.model_config(), seed);

  const auto labeled = flatten_all(train_samples, model.vocab);
  const auto dev = dev_samples.empty()
                       ? std::vector<LabeledSample>(
                             labeled.begin(),
                             labeled.begin() + std::min<std::size_t>(
                                                   labeled.size(),
                                                   config.dev_limit))
                       : flatten_all(dev_samples, model.vocab);

  AdamConfig adam;
  adam.lr = config.lr;
  // crf_s keeps one optimizer per objective so a single-objective step
  // leaves parameters the other objective alone touches unchanged.
  auto state = AdamState<float>::for_params(model.params);
  auto labeling_state = AdamState<float>::for_params(model.params);
  auto grads = model.params.zeros_like();

  JointLossOptions options;
  options.variant = config.variant;
  options.fusion = config.fusion;
  options.labeling_weight = config.labeling_weight;
  const bool separate = config.variant == Variant::kCrfSeparate;
  const bool crf = uses_crf(config.variant);

  std::int64_t step = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto batches =
        make_batches(labeled, config.batch_size, seed + static_cast<std::uint64_t>(epoch));
    double gen_sum = 0;
    double lab_sum = 0;
    std::size_t label_hits = 0;
    std::size_t label_total = 0;
    for (const auto& batch : batches) {
      ++step;
      options.terms = !separate ? LossTerms::kJoint
                      : step % 2 == 1 ? LossTerms::kLabelingOnly
                                      : LossTerms::kGenerationOnly;
      grads.set_zero();
      std::vector<std::vector<Label>> predicted;
      LossBreakdown loss;
      try {
        loss = joint_loss(batch, model.params, options, &grads,
                          crf ? &predicted : nullptr);
      } catch (const NonFiniteLossError& e) {
        throw DivergenceError(epoch, step,
                              "divergence in epoch " + std::to_string(epoch) +
                                  ", step " + std::to_string(step) + ": " +
                                  e.what());
      }
      gen_sum += loss.L_g * batch.size;
      lab_sum += loss.L_c * batch.size;
      for (int b = 0; b < static_cast<int>(predicted.size()); ++b) {
        const auto gold = batch.label_row(b);
        for (std::size_t i = 0; i < predicted[b].size(); ++i) {
          label_hits += predicted[b][i] == gold[i];
        }
        label_total += predicted[b].size();
      }

      clip_global_norm(grads, config.clip_norm);
      auto& active =
          separate && options.terms == LossTerms::kLabelingOnly ? labeling_state : state;
      adam_step(model.params, grads, active, adam);
      for (const auto& [name, tensor] : model.params) {
        if (!tensor.all_finite()) {
          throw DivergenceError(epoch, step,
                                "divergence in epoch " + std::to_string(epoch) +
                                    ": parameter " + name + " is not finite");
        }
      }
    }

    EpochMetrics metrics;
    metrics.epoch = epoch;
    const double n = static_cast<double>(labeled.size());
    metrics.loss.L_g = gen_sum / n;
    metrics.loss.L_c = lab_sum / n;
    metrics.loss.L = metrics.loss.L_g + config.labeling_weight * metrics.loss.L_c;
    if (crf && label_total > 0) {
      metrics.label_acc = 100.0 * static_cast<double>(label_hits) / label_total;
    }
    metrics.dev_em = dev_exact_match(model, dev);
    if (on_epoch) on_epoch(metrics, model);
  }
  return model;
}

TinyProblem make_tiny_problem(std::uint64_t seed) {
  constexpr int kVocab = 20;
  constexpr int kInputLen = 5;
  constexpr int kTargetTokens = 3;
  TinyProblem p;
  p.config.vocab_size = kVocab;
  p.config.d_emb = 8;
  p.config.d_hid = 8;
  p.config.max_decode_len = 8;
  p.params = init_params<double>(p.config, seed);

  Rng rng(seed ^ 0x5eed5eedULL);
  auto word = [&] {
    return Vocab::kNumReserved +
           static_cast<int>(rng.below(kVocab - Vocab::kNumReserved));
  };
  auto& s = p.sample;
  const int sep_at = 1 + static_cast<int>(rng.below(kInputLen - 2));
  for (int i = 0; i < kInputLen; ++i) {
    s.input_ids.push_back(i == sep_at ? Vocab::kSep : word());
  }
  // Half the target copies input words so every label can occur.
  for (int t = 0; t < kTargetTokens; ++t) {
    int id = word();
    if (rng.below(2) == 0) {
      const int from = static_cast<int>(rng.below(kInputLen));
      if (s.input_ids[from] != Vocab::kSep) id = s.input_ids[from];
    }
    s.target_ids.push_back(id);
  }
  s.target_ids.push_back(Vocab::kEos);
  for (int id : s.input_ids) {
    const bool key = std::find(s.target_ids.begin(), s.target_ids.end(), id) !=
                     s.target_ids.end();
    s.labels.push_back(id == Vocab::kSep ? Label::kSep
                       : key             ? Label::kKey
                                         : Label::kNormal);
  }
  return p;
}

GradCheckReport joint_loss_gradcheck(std::uint64_t seed, Variant variant,
                                     Fusion fusion,
                                     const GradCheckOptions& options,
                                     double gradient_scale) {
  const TinyProblem problem = make_tiny_problem(seed);
  const Batch batch = make_batch(std::span<const LabeledSample>(&problem.sample, 1));
  JointLossOptions jo;
  jo.variant = variant;
  jo.fusion = fusion;
  const LossFn loss_fn = [&](const ParamStore<double>& params,
                             ParamStore<double>* grads) {
    const double loss = joint_loss(batch, params, jo, grads).L;
    if (grads && gradient_scale != 1.0) {
      for (auto& [name, g] : *grads) {
        for (auto& v : g.values()) v *= gradient_scale;
      }
    }
    return loss;
  };
  return finite_diff_gradcheck(loss_fn, problem.params, options);
}

}  // namespace mlr
