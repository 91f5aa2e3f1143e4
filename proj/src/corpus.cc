#include "mlr/corpus.h"

#include <algorithm>
#include <array>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <unordered_set>

#include "mlr/numerics.h"

namespace mlr {

namespace {

constexpr std::array<std::string_view, Vocab::kNumReserved> kReserved = {
    "<PAD>", "<UNK>", "<SOS>", "<EOS>", "<SEP>"};

}  // namespace

char label_char(Label label) {
  switch (label) {
    case Label::kKey:
      return 'K';
    case Label::kSep:
      return 'E';
    case Label::kNormal:
      return 'N';
    case Label::kStart:
      break;
  }
  throw std::invalid_argument("START is not an emittable label");
}

Label label_from_char(char c) {
  switch (c) {
    case 'K':
      return Label::kKey;
    case 'E':
      return Label::kSep;
    case 'N':
      return Label::kNormal;
    default:
      throw std::invalid_argument(std::string("unknown label '") + c + "'");
  }
}

std::string label_string(std::span<const Label> labels) {
  std::string out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (i > 0) out += ' ';
    out += label_char(labels[i]);
  }
  return out;
}

bool is_reserved_token(std::string_view token) {
  return std::find(kReserved.begin(), kReserved.end(), token) != kReserved.end();
}

namespace {

void check_turn(const Tokens& turn, const std::string& what) {
  if (turn.empty()) throw std::invalid_argument(what + " is empty");
  for (const auto& tok : turn) {
    if (tok.empty()) throw std::invalid_argument(what + " has an empty token");
    if (split_whitespace(tok).size() != 1) {
      throw std::invalid_argument(what + " has a token containing whitespace");
    }
    if (is_reserved_token(tok) && tok != "<UNK>") {
      throw std::invalid_argument(what + " contains reserved token " + tok);
    }
  }
}

}  // namespace

void validate(const DialogueSample& sample) {
  if (sample.context.empty()) {
    throw std::invalid_argument("sample has no context turns");
  }
  for (std::size_t i = 0; i < sample.context.size(); ++i) {
    check_turn(sample.context[i], "context turn " + std::to_string(i + 1));
  }
  check_turn(sample.target, "target");
}

Vocab::Vocab() {
  for (auto tok : kReserved) insert(std::string(tok));
}

Vocab::Vocab(std::span<const std::string> tokens) : Vocab() {
  for (const auto& tok : tokens) {
    if (is_reserved_token(tok)) {
      throw std::invalid_argument("reserved token in vocab list: " + tok);
    }
    if (token_to_id_.count(tok) != 0) {
      throw std::invalid_argument("duplicate vocab token: " + tok);
    }
    insert(tok);
  }
}

void Vocab::insert(const std::string& token) {
  token_to_id_.emplace(token, static_cast<int>(id_to_token_.size()));
  id_to_token_.push_back(token);
}

Vocab Vocab::build(std::span<const DialogueSample> samples, int min_count) {
  if (samples.empty()) throw std::invalid_argument("empty corpus");
  if (min_count < 1) throw std::invalid_argument("min_count must be >= 1");
  std::map<std::string, long> freq;
  auto count = [&](const Tokens& toks) {
    for (const auto& t : toks) {
      if (!is_reserved_token(t)) ++freq[t];
    }
  };
  for (const auto& s : samples) {
    for (const auto& turn : s.context) count(turn);
    count(s.target);
  }
  std::vector<std::pair<std::string, long>> kept;
  for (auto& [tok, n] : freq) {
    if (n >= min_count) kept.emplace_back(tok, n);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second > b.second;
  });
  std::vector<std::string> tokens;
  tokens.reserve(kept.size());
  for (auto& [tok, n] : kept) tokens.push_back(tok);
  return Vocab(tokens);
}

int Vocab::id(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) {
    throw std::out_of_range("token id out of range: " + std::to_string(id));
  }
  return id_to_token_[id];
}

bool Vocab::contains(const std::string& token) const {
  return token_to_id_.count(token) != 0;
}

std::vector<int> Vocab::encode(const Tokens& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

Tokens Vocab::decode(std::span<const int> ids) const {
  Tokens out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(token(i));
  return out;
}

Tokens flatten_context(const std::vector<Tokens>& context) {
  Tokens flat;
  for (std::size_t i = 0; i < context.size(); ++i) {
    if (i > 0) flat.emplace_back(Vocab::kSepToken);
    flat.insert(flat.end(), context[i].begin(), context[i].end());
  }
  return flat;
}

std::vector<Label> derive_labels(const DialogueSample& sample) {
  const std::unordered_set<std::string> in_target(sample.target.begin(),
                                                  sample.target.end());
  std::vector<Label> labels;
  for (std::size_t i = 0; i < sample.context.size(); ++i) {
    if (i > 0) labels.push_back(Label::kSep);
    for (const auto& tok : sample.context[i]) {
      labels.push_back(in_target.count(tok) ? Label::kKey : Label::kNormal);
    }
  }
  return labels;
}

LabeledSample flatten(const DialogueSample& sample, const Vocab& vocab) {
  LabeledSample out;
  out.input_ids = vocab.encode(flatten_context(sample.context));
  out.labels = derive_labels(sample);
  out.target_ids = vocab.encode(sample.target);
  out.target_ids.push_back(Vocab::kEos);
  return out;
}

std::vector<LabeledSample> flatten_all(std::span<const DialogueSample> samples,
                                       const Vocab& vocab) {
  std::vector<LabeledSample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(flatten(s, vocab));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

namespace {

constexpr std::array<std::string_view, 30> kEntities = {
    "iphone",  "galaxy",   "pixel",   "xperia",  "nokia",   "redmi",
    "oneplus", "kindle",   "ipad",    "macbook", "thinkpad", "surface",
    "switch",  "xbox",     "walkman", "fitbit",  "garmin",  "gopro",
    "roomba",  "dyson",    "tesla",   "prius",   "civic",   "corolla",
    "camry",   "leica",    "nikon",   "canon",   "vespa",   "segway"};

constexpr std::array<std::string_view, 12> kAttributes = {
    "price",    "weight", "color",  "size",       "battery",  "warranty",
    "rating",   "capacity", "speed", "resolution", "lifespan", "memory"};

// {A} and {E} are slots; the target reuses the opening turn's frame.
constexpr std::array<std::string_view, 6> kFrames = {
    "what is the {A} of {E}",        "tell me the {A} of {E}",
    "show me the {A} of {E}",        "{E} {A}",
    "i want to know the {A} of {E}", "do you know the {A} of {E}"};

constexpr std::array<std::string_view, 6> kAttributeFollowUps = {
    "what about {A}",     "and its {A}",  "how about the {A}",
    "what about its {A}", "{A} ?",        "and the {A} ?"};

constexpr std::array<std::string_view, 4> kEntityFollowUps = {
    "what about {E}", "and {E} ?", "how about {E}", "same for {E}"};

constexpr std::array<std::string_view, 2> kBothFollowUps = {
    "what about the {A} of {E}", "and the {A} of {E} ?"};

constexpr std::array<std::string_view, 4> kGreetings = {
    "hi", "hello there", "good morning", "hey assistant"};

constexpr std::array<std::string_view, 3> kFillers = {"ok", "thanks", "hmm"};

Tokens expand(std::string_view tmpl, std::string_view attr,
              std::string_view entity) {
  Tokens out = split_whitespace(tmpl);
  for (auto& tok : out) {
    if (tok == "{A}") tok = attr;
    if (tok == "{E}") tok = entity;
  }
  return out;
}

template <typename Array>
std::string_view pick(Rng& rng, const Array& options) {
  return options[rng.below(options.size())];
}

std::string_view pick_other(Rng& rng, std::span<const std::string_view> options,
                            std::string_view avoid) {
  std::string_view out;
  do {
    out = options[rng.below(options.size())];
  } while (out == avoid);
  return out;
}

bool has_key_and_normal(const DialogueSample& s) {
  const auto labels = derive_labels(s);
  return std::count(labels.begin(), labels.end(), Label::kKey) > 0 &&
         std::count(labels.begin(), labels.end(), Label::kNormal) > 0;
}

DialogueSample generate_one(Rng& rng) {
  const std::string_view frame = pick(rng, kFrames);
  std::string_view attr = pick(rng, kAttributes);
  std::string_view entity = pick(rng, kEntities);

  DialogueSample s;
  const double shape = rng.uniform();
  if (shape < 0.2) {
    s.context.push_back(split_whitespace(pick(rng, kGreetings)));
  }
  s.context.push_back(expand(frame, attr, entity));

  auto follow_up = [&]() {
    const double kind = rng.uniform();
    Tokens turn;
    if (kind < 0.5) {
      attr = pick_other(rng, kAttributes, attr);
      turn = expand(pick(rng, kAttributeFollowUps), attr, entity);
    } else if (kind < 0.85) {
      entity = pick_other(rng, kEntities, entity);
      turn = expand(pick(rng, kEntityFollowUps), attr, entity);
    } else {
      attr = pick_other(rng, kAttributes, attr);
      entity = pick_other(rng, kEntities, entity);
      turn = expand(pick(rng, kBothFollowUps), attr, entity);
    }
    if (rng.uniform() < 0.15) {
      turn.insert(turn.begin(), std::string(pick(rng, kFillers)));
    }
    return turn;
  };

  s.context.push_back(follow_up());
  if (shape >= 0.8) s.context.push_back(follow_up());
  s.target = expand(frame, attr, entity);
  return s;
}

}  // namespace

std::vector<DialogueSample> generate_synthetic_corpus(std::uint64_t seed,
                                                      int count) {
  if (count <= 0) throw std::invalid_argument("count must be >= 1");
  Rng rng(seed);
  std::vector<DialogueSample> out;
  out.reserve(static_cast<std::size_t>(count));
  while (static_cast<int>(out.size()) < count) {
    DialogueSample s = generate_one(rng);
    if (has_key_and_normal(s)) out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batching

std::span<const int> Batch::input_row(int b) const {
  return std::span<const int>(input_ids).subspan(
      static_cast<std::size_t>(b) * max_src_len, src_lengths.at(b));
}

std::span<const Label> Batch::label_row(int b) const {
  return std::span<const Label>(labels).subspan(
      static_cast<std::size_t>(b) * max_src_len, src_lengths.at(b));
}

std::span<const int> Batch::target_row(int b) const {
  return std::span<const int>(target_ids).subspan(
      static_cast<std::size_t>(b) * max_tgt_len, tgt_lengths.at(b));
}

LabeledSample Batch::sample(int b) const {
  auto in = input_row(b);
  auto lab = label_row(b);
  auto tgt = target_row(b);
  return {{in.begin(), in.end()}, {lab.begin(), lab.end()},
          {tgt.begin(), tgt.end()}};
}

Batch make_batch(std::span<const LabeledSample> samples) {
  Batch batch;
  batch.size = static_cast<int>(samples.size());
  for (const auto& s : samples) {
    batch.max_src_len =
        std::max(batch.max_src_len, static_cast<int>(s.input_ids.size()));
    batch.max_tgt_len =
        std::max(batch.max_tgt_len, static_cast<int>(s.target_ids.size()));
  }
  const auto n = samples.size();
  batch.input_ids.assign(n * batch.max_src_len, Vocab::kPad);
  batch.labels.assign(n * batch.max_src_len, Label::kNormal);
  batch.target_ids.assign(n * batch.max_tgt_len, Vocab::kPad);
  for (std::size_t b = 0; b < n; ++b) {
    const auto& s = samples[b];
    std::copy(s.input_ids.begin(), s.input_ids.end(),
              batch.input_ids.begin() + b * batch.max_src_len);
    std::copy(s.labels.begin(), s.labels.end(),
              batch.labels.begin() + b * batch.max_src_len);
    std::copy(s.target_ids.begin(), s.target_ids.end(),
              batch.target_ids.begin() + b * batch.max_tgt_len);
    batch.src_lengths.push_back(static_cast<int>(s.input_ids.size()));
    batch.tgt_lengths.push_back(static_cast<int>(s.target_ids.size()));
  }
  return batch;
}

std::vector<Batch> make_batches(std::span<const LabeledSample> samples,
                                int batch_size,
                                std::optional<std::uint64_t> shuffle_seed) {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle_seed) {
    Rng rng(*shuffle_seed);
    rng.shuffle(order.begin(), order.end());
  }
  std::vector<Batch> batches;
  std::vector<LabeledSample> chunk;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    chunk.clear();
    const auto end = std::min(order.size(), start + batch_size);
    for (std::size_t k = start; k < end; ++k) chunk.push_back(samples[order[k]]);
    batches.push_back(make_batch(chunk));
  }
  return batches;
}

// ---------------------------------------------------------------------------
// Dataset text format

DatasetError::DatasetError(int line, const std::string& what)
    : std::runtime_error("line " + std::to_string(line) + ": " + what),
      line_(line) {}

Tokens split_whitespace(std::string_view text) {
  Tokens out;
  std::size_t i = 0;
  auto is_space = [](char c) {
    return c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\f' ||
           c == '\v';
  };
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) out.emplace_back(text.substr(start, i - start));
  }
  return out;
}

std::vector<Tokens> parse_context(std::string_view field) {
  std::vector<Tokens> turns(1);
  for (auto& tok : split_whitespace(field)) {
    if (tok == Vocab::kSepToken) {
      turns.emplace_back();
    } else {
      turns.back().push_back(std::move(tok));
    }
  }
  for (std::size_t i = 0; i < turns.size(); ++i) {
    check_turn(turns[i], "context turn " + std::to_string(i + 1));
  }
  return turns;
}

std::vector<DialogueSample> read_dataset(std::istream& in) {
  std::vector<DialogueSample> samples;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty() && line.front() == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw DatasetError(line_no, "expected two TAB-separated fields");
    }
    if (line.find('\t', tab + 1) != std::string::npos) {
      throw DatasetError(line_no, "more than two TAB-separated fields");
    }
    try {
      DialogueSample s;
      s.context = parse_context(std::string_view(line).substr(0, tab));
      s.target = split_whitespace(std::string_view(line).substr(tab + 1));
      validate(s);
      samples.push_back(std::move(s));
    } catch (const std::invalid_argument& e) {
      throw DatasetError(line_no, e.what());
    }
  }
  return samples;
}

std::vector<DialogueSample> load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset " + path);
  return read_dataset(in);
}

void write_dataset(std::ostream& out, std::span<const DialogueSample> samples) {
  for (const auto& s : samples) {
    validate(s);
    if (s.context.front().front().front() == '#') {
      throw std::invalid_argument("sample would be read back as a comment");
    }
    for (std::size_t i = 0; i < s.context.size(); ++i) {
      if (i > 0) out << " <SEP> ";
      for (std::size_t j = 0; j < s.context[i].size(); ++j) {
        if (j > 0) out << ' ';
        out << s.context[i][j];
      }
    }
    out << '\t';
    for (std::size_t j = 0; j < s.target.size(); ++j) {
      if (j > 0) out << ' ';
      out << s.target[j];
    }
    out << '\n';
  }
}

void save_dataset(const std::string& path,
                  std::span<const DialogueSample> samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write dataset " + path);
  write_dataset(out, samples);
  if (!out) throw std::runtime_error("error writing dataset " + path);
}

}  // namespace mlr
