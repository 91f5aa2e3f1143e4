#include "mlr/corpus.h"

#include <algorithm>
#include <set>
#include <sstream>

#include "doctest.h"

using namespace mlr;

namespace {

DialogueSample make_sample(std::vector<Tokens> context, Tokens target) {
  return {std::move(context), std::move(target)};
}

}  // namespace

TEST_CASE("label characters") {
  CHECK(label_char(Label::kKey) == 'K');
  CHECK(label_from_char('E') == Label::kSep);
  CHECK_THROWS(label_char(Label::kStart));
  CHECK_THROWS(label_from_char('X'));
  const std::vector<Label> labels{Label::kKey, Label::kKey, Label::kNormal,
                                  Label::kSep, Label::kKey};
  CHECK(label_string(labels) == "K K N E K");
}

TEST_CASE("sample validation") {
  CHECK_NOTHROW(validate(make_sample({{"a"}}, {"a"})));
  CHECK_THROWS(validate(make_sample({}, {"a"})));
  CHECK_THROWS(validate(make_sample({{}}, {"a"})));
  CHECK_THROWS(validate(make_sample({{"a"}}, {})));
  CHECK_THROWS(validate(make_sample({{"a", "<SEP>"}}, {"a"})));
  CHECK_THROWS(validate(make_sample({{"a"}}, {"<EOS>"})));
  CHECK_THROWS(validate(make_sample({{"a b"}}, {"a"})));
}

TEST_CASE("derive_labels follows the key/separator/normal rule") {
  const auto s = make_sample({{"what", "is", "the", "price", "of", "x1"},
                              {"and", "its", "weight"}},
                             {"what", "is", "the", "weight", "of", "x1"});
  const auto labels = derive_labels(s);
  CHECK(label_string(labels) == "K K K N K K E N N K");

  SUBCASE("matching is case sensitive") {
    const auto t = make_sample({{"Apple", "apple"}}, {"apple"});
    CHECK(label_string(derive_labels(t)) == "N K");
  }
}

TEST_CASE("flatten lengths") {
  Vocab vocab;
  SUBCASE("two turns of lengths 3 and 2") {
    const auto flat = flatten(make_sample({{"a", "b", "c"}, {"d", "e"}}, {"a"}), vocab);
    CHECK(flat.input_ids.size() == 6);
    CHECK(std::count(flat.input_ids.begin(), flat.input_ids.end(), Vocab::kSep) == 1);
  }
  SUBCASE("one turn has no separator") {
    const auto flat = flatten(make_sample({{"a", "b"}}, {"a"}), vocab);
    CHECK(std::count(flat.input_ids.begin(), flat.input_ids.end(), Vocab::kSep) == 0);
  }
  SUBCASE("target gets <EOS>") {
    const auto flat = flatten(make_sample({{"a"}}, {"w", "x", "y", "z"}), vocab);
    CHECK(flat.target_ids.size() == 5);
    CHECK(flat.target_ids.back() == Vocab::kEos);
  }
  SUBCASE("unknown tokens map to <UNK>") {
    const auto flat = flatten(make_sample({{"a"}}, {"a"}), vocab);
    CHECK(flat.input_ids[0] == Vocab::kUnk);
  }
}

TEST_CASE("vocabulary") {
  const std::vector<DialogueSample> corpus{
      make_sample({{"a", "b"}}, {"a"}),
      make_sample({{"a"}}, {"c"}),
  };
  // a:3, b:1, c:1
  SUBCASE("reserved ids are fixed") {
    Vocab v;
    CHECK(v.size() == 5);
    CHECK(v.token(0) == "<PAD>");
    CHECK(v.token(1) == "<UNK>");
    CHECK(v.token(2) == "<SOS>");
    CHECK(v.token(3) == "<EOS>");
    CHECK(v.token(4) == "<SEP>");
  }
  SUBCASE("min_count filters") {
    CHECK(Vocab::build(corpus, 2).size() == 6);
    CHECK(Vocab::build(corpus, 1).size() == 8);
  }
  SUBCASE("frequency order with lexicographic ties") {
    const auto v = Vocab::build(corpus, 1);
    CHECK(v.token(5) == "a");
    CHECK(v.token(6) == "b");
    CHECK(v.token(7) == "c");
    CHECK(v.id("zzz") == Vocab::kUnk);
  }
  SUBCASE("identical frequency tables give identical ids") {
    const std::vector<DialogueSample> other{
        make_sample({{"c"}}, {"a"}),
        make_sample({{"b", "a"}}, {"a"}),
    };
    CHECK(Vocab::build(other, 1) == Vocab::build(corpus, 1));
  }
  SUBCASE("empty corpus") {
    try {
      Vocab::build(std::span<const DialogueSample>(), 1);
      FAIL("expected an exception");
    } catch (const std::invalid_argument& e) {
      CHECK(std::string(e.what()) == "empty corpus");
    }
  }
  SUBCASE("injective both ways") {
    const auto v = Vocab::build(corpus, 1);
    std::set<std::string> seen;
    for (int id = 0; id < v.size(); ++id) {
      CHECK(v.id(v.token(id)) == id);
      CHECK(seen.insert(v.token(id)).second);
    }
  }
}

TEST_CASE("synthetic corpus") {
  SUBCASE("count and determinism") {
    const auto a = generate_synthetic_corpus(7, 10);
    CHECK(a.size() == 10);
    CHECK(a == generate_synthetic_corpus(7, 10));
    CHECK(a != generate_synthetic_corpus(8, 10));
  }
  SUBCASE("non-positive count throws") {
    CHECK_THROWS(generate_synthetic_corpus(1, 0));
    CHECK_THROWS(generate_synthetic_corpus(1, -3));
  }
  SUBCASE("every sample is valid and has a key and a normal word") {
    const auto corpus = generate_synthetic_corpus(11, 2000);
    std::set<std::string> vocab_words;
    for (const auto& s : corpus) {
      CHECK_NOTHROW(validate(s));
      const auto labels = derive_labels(s);
      CHECK(std::count(labels.begin(), labels.end(), Label::kKey) >= 1);
      CHECK(std::count(labels.begin(), labels.end(), Label::kNormal) >= 1);
      for (const auto& t : s.target) vocab_words.insert(t);
    }
    CHECK(vocab_words.size() > 30);
  }
  SUBCASE("context tokens that reappear in the target are keys") {
    int entity_keys = 0;
    for (const auto& s : generate_synthetic_corpus(12, 500)) {
      const std::set<std::string> target(s.target.begin(), s.target.end());
      const auto flat = flatten_context(s.context);
      const auto labels = derive_labels(s);
      REQUIRE(labels.size() == flat.size());
      for (std::size_t i = 0; i < flat.size(); ++i) {
        if (flat[i] == "<SEP>") {
          CHECK(labels[i] == Label::kSep);
        } else {
          CHECK((labels[i] == Label::kKey) == (target.count(flat[i]) > 0));
        }
      }
      // Every frame ends with a slot filler.
      const auto& filler = s.target.back();
      for (std::size_t i = 0; i < flat.size(); ++i) {
        if (flat[i] == filler) {
          CHECK(labels[i] == Label::kKey);
          ++entity_keys;
        }
      }
    }
    CHECK(entity_keys > 0);
  }
}

TEST_CASE("batching") {
  const auto corpus = generate_synthetic_corpus(3, 5);
  const auto vocab = Vocab::build(corpus, 1);
  const auto samples = flatten_all(corpus, vocab);

  SUBCASE("sizes without shuffling preserve order") {
    const auto batches = make_batches(samples, 2, std::nullopt);
    REQUIRE(batches.size() == 3);
    CHECK(batches[0].size == 2);
    CHECK(batches[1].size == 2);
    CHECK(batches[2].size == 1);
    CHECK(batches[1].sample(0).input_ids == samples[2].input_ids);
  }
  SUBCASE("seeded shuffles repeat") {
    const auto a = make_batches(samples, 2, 99);
    const auto b = make_batches(samples, 2, 99);
    for (std::size_t k = 0; k < a.size(); ++k) CHECK(a[k].input_ids == b[k].input_ids);
  }
  SUBCASE("padding") {
    const auto batch = make_batch(samples);
    for (int b = 0; b < batch.size; ++b) {
      const auto row = static_cast<std::size_t>(b) * batch.max_src_len;
      for (int i = batch.src_lengths[b]; i < batch.max_src_len; ++i) {
        CHECK(batch.input_ids[row + i] == Vocab::kPad);
        CHECK(batch.labels[row + i] == Label::kNormal);
        CHECK_FALSE(batch.src_mask(b, i));
      }
      CHECK(batch.sample(b).input_ids == samples[b].input_ids);
      CHECK(batch.sample(b).labels == samples[b].labels);
      CHECK(batch.sample(b).target_ids == samples[b].target_ids);
    }
  }
}

TEST_CASE("dataset format") {
  const auto corpus = generate_synthetic_corpus(21, 50);
  std::stringstream buf;
  write_dataset(buf, corpus);
  CHECK(read_dataset(buf) == corpus);

  SUBCASE("comments and CRLF") {
    std::istringstream in("# header\r\na b <SEP> c\ta c\r\n");
    const auto samples = read_dataset(in);
    REQUIRE(samples.size() == 1);
    CHECK(samples[0].context.size() == 2);
    CHECK(samples[0].target == Tokens{"a", "c"});
  }
  SUBCASE("errors name the line") {
    std::istringstream in("a\tb\n\nc\td\n");
    try {
      read_dataset(in);
      FAIL("expected an exception");
    } catch (const DatasetError& e) {
      CHECK(e.line() == 2);
    }
    std::istringstream empty_turn("a <SEP> <SEP> b\tc\n");
    CHECK_THROWS_AS(read_dataset(empty_turn), DatasetError);
    std::istringstream extra("a\tb\tc\n");
    CHECK_THROWS_AS(read_dataset(extra), DatasetError);
    std::istringstream no_target("a\t \n");
    CHECK_THROWS_AS(read_dataset(no_target), DatasetError);
  }
}
