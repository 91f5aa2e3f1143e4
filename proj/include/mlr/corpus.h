// Dialogue samples, the key/separator/normal labeling rule, vocabulary,
// synthetic corpus generation, batching and the dataset text format.

#ifndef MLR_CORPUS_H_
#define MLR_CORPUS_H_

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mlr {

// Word category. kStart only appears inside CRF transition bookkeeping.
enum class Label : std::uint8_t { kKey = 0, kSep = 1, kNormal = 2, kStart = 3 };

inline constexpr int kNumLabels = 3;
inline constexpr int kNumPrevLabels = 4;

char label_char(Label label);
Label label_from_char(char c);
std::string label_string(std::span<const Label> labels);

using Tokens = std::vector<std::string>;

struct DialogueSample {
  std::vector<Tokens> context;  // q_1 .. q_{n-1}
  Tokens target;                // q_n

  bool operator==(const DialogueSample&) const = default;
};

// Throws std::invalid_argument describing the first violated invariant.
void validate(const DialogueSample& sample);

struct LabeledSample {
  std::vector<int> input_ids;
  std::vector<Label> labels;
  std::vector<int> target_ids;  // ends with the <EOS> id
};

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kSos = 2;
  static constexpr int kEos = 3;
  static constexpr int kSep = 4;
  static constexpr int kNumReserved = 5;
  static constexpr std::string_view kSepToken = "<SEP>";

  Vocab();
  // Reserved tokens must not be included; they are always ids 0..4.
  explicit Vocab(std::span<const std::string> tokens);

  // Reserved first, then tokens with frequency >= min_count by descending
  // frequency, ties lexicographic. Throws on an empty sample list.
  static Vocab build(std::span<const DialogueSample> samples, int min_count);

  int id(const std::string& token) const;
  const std::string& token(int id) const;
  bool contains(const std::string& token) const;
  int size() const { return static_cast<int>(id_to_token_.size()); }
  const std::vector<std::string>& tokens() const { return id_to_token_; }

  std::vector<int> encode(const Tokens& tokens) const;
  Tokens decode(std::span<const int> ids) const;

  bool operator==(const Vocab& other) const {
    return id_to_token_ == other.id_to_token_;
  }

 private:
  void insert(const std::string& token);

  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

bool is_reserved_token(std::string_view token);

// Labels the flattened input: E for <SEP>, K when the surface token occurs in
// the target, N otherwise.
std::vector<Label> derive_labels(const DialogueSample& sample);

// Context turns joined by <SEP>, in surface form.
Tokens flatten_context(const std::vector<Tokens>& context);

LabeledSample flatten(const DialogueSample& sample, const Vocab& vocab);
std::vector<LabeledSample> flatten_all(std::span<const DialogueSample> samples,
                                       const Vocab& vocab);

// Template-grammar product dialogues with ellipsis and coreference.
std::vector<DialogueSample> generate_synthetic_corpus(std::uint64_t seed,
                                                      int count);

struct Batch {
  int size = 0;
  int max_src_len = 0;
  int max_tgt_len = 0;
  std::vector<int> input_ids;   // size x max_src_len, <PAD>-padded
  std::vector<int> src_lengths;
  std::vector<Label> labels;    // size x max_src_len, N-padded
  std::vector<int> target_ids;  // size x max_tgt_len, <PAD>-padded
  std::vector<int> tgt_lengths;

  std::span<const int> input_row(int b) const;
  std::span<const Label> label_row(int b) const;
  std::span<const int> target_row(int b) const;
  bool src_mask(int b, int i) const { return i < src_lengths.at(b); }
  bool tgt_mask(int b, int t) const { return t < tgt_lengths.at(b); }
  // Unpadded sample b.
  LabeledSample sample(int b) const;
};

Batch make_batch(std::span<const LabeledSample> samples);
std::vector<Batch> make_batches(std::span<const LabeledSample> samples,
                                int batch_size,
                                std::optional<std::uint64_t> shuffle_seed);

class DatasetError : public std::runtime_error {
 public:
  DatasetError(int line, const std::string& what);
  int line() const { return line_; }

 private:
  int line_;
};

// One sample per line: context turns joined by " <SEP> ", TAB, target.
// '#' lines are skipped. Malformed lines raise DatasetError with the line.
std::vector<DialogueSample> read_dataset(std::istream& in);
std::vector<DialogueSample> load_dataset(const std::string& path);
void write_dataset(std::ostream& out, std::span<const DialogueSample> samples);
void save_dataset(const std::string& path,
                  std::span<const DialogueSample> samples);

// Parses the context field alone. Throws std::invalid_argument if a turn is
// empty or a reserved token other than <SEP>/<UNK> appears.
std::vector<Tokens> parse_context(std::string_view field);

Tokens split_whitespace(std::string_view text);

}  // namespace mlr

#endif  // MLR_CORPUS_H_
