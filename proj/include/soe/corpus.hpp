#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "soe/common.hpp"

namespace soe {

using TokenId = int32_t;

// Word-level vocabulary. Ids 0-5 are reserved in registration order:
// <unk>, <pad>, <eos>, <bos>, <sum>, <txt>. <bos> doubles as the section
// separator in assembled model inputs; <sum>/<txt> select the generation task.
class Vocabulary {
 public:
  static constexpr TokenId kUnk = 0;
  static constexpr TokenId kPad = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kBos = 3;
  static constexpr TokenId kTaskSum = 4;
  static constexpr TokenId kTaskTxt = 5;
  static constexpr int kNumReserved = 6;

  static const std::array<std::string, kNumReserved>& reserved_tokens();

  Vocabulary();

  int size() const { return static_cast<int>(id_to_token_.size()); }
  int min_frequency() const { return min_frequency_; }

  TokenId encode(const std::string& token) const;
  const std::string& decode(TokenId id) const;
  bool contains(const std::string& token) const;
  bool is_reserved(TokenId id) const { return id >= 0 && id < kNumReserved; }

  void add(const std::string& token);  // appends with the next free id

  uint64_t content_hash() const;

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

  friend Vocabulary build_vocab(const std::vector<struct Document>& docs, int min_frequency);

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
  int min_frequency_ = 1;
};

// A tokenized document: sentences of lowercased word tokens.
struct Document {
  std::vector<std::vector<std::string>> sentences;
  std::string source_id;

  size_t total_tokens() const;
};

// The same document mapped through a vocabulary.
struct EncodedDocument {
  std::vector<std::vector<TokenId>> sentences;
  std::string source_id;

  size_t total_tokens() const;
  std::vector<TokenId> flat() const;
  std::vector<TokenId> flat_range(int first_sentence, int last_sentence) const;  // [first, last)
};

// Sentence-index partition of a document into contiguous segments.
struct SegmentedDocument {
  EncodedDocument document;
  std::vector<std::vector<int>> groups;  // contiguous, ordered sentence indices
  int snippet_token_budget = 0;

  int num_segments() const { return static_cast<int>(groups.size()); }
  std::vector<TokenId> segment_tokens(int k) const;
  const std::vector<TokenId>& sentence(int k, int j) const;
  void validate() const;  // throws if groups do not partition the document in order
};

// Sentence split on terminal punctuation (. ! ?) followed by whitespace;
// tokens split on whitespace with punctuation detached; lowercased.
Document tokenize(const std::string& raw_text, const std::string& source_id = "");

// Deterministic id assignment: frequency desc, then token lexicographic.
// Tokens below min_frequency are dropped (they encode to <unk>).
Vocabulary build_vocab(const std::vector<Document>& docs, int min_frequency);

EncodedDocument encode(const Document& doc, const Vocabulary& vocab);
Document decode(const EncodedDocument& doc, const Vocabulary& vocab);
std::string decode_text(const std::vector<TokenId>& ids, const Vocabulary& vocab);

// Corpus files: one document per file, or blank-line-separated documents.
std::vector<Document> read_corpus_file(const std::string& path);
std::vector<Document> read_corpus_dir(const std::string& dir);
void write_corpus_file(const std::vector<Document>& docs, const std::string& path);

// ---------------------------------------------------------------------------
// Synthetic structured corpus.
//
// Documents are sequences of topical segments. Each segment carries one
// "topic sentence" naming the topic keywords and a subtype code word that
// appears nowhere else; body sentences draw from a subtype-dependent window
// of the topic vocabulary plus fillers and occasional off-topic decoys.
// Boundaries and most-informative sentences are known by construction.
// ---------------------------------------------------------------------------

struct SyntheticParams {
  int n_docs = 100;
  int topics = 6;
  int seg_len_sentences = 4;
  int segs_per_doc = 3;
  uint64_t seed = 1;

  // texture knobs
  int subtypes = 3;
  int topic_words = 12;
  int window = 8;              // body words visible per subtype
  int common_words = 12;
  int filler_sentences_pct = 20;  // % of body sentences that are generic filler
  int decoy_pct = 8;              // % chance a body word is off-topic
  int body_len_min = 5;
  int body_len_max = 9;
  int markov_stay_pct = 90;  // P(topic follows the +1 cycle), else jumps
};

struct SegmentTruth {
  int topic = 0;
  int subtype = 0;
  int topic_sentence = 0;  // index within the segment
};

struct DocumentTruth {
  std::vector<SegmentTruth> segments;
  std::vector<int> boundaries;  // sentence index starting each segment but the first
};

struct SyntheticCorpus {
  std::vector<Document> documents;
  std::vector<DocumentTruth> truth;
  SyntheticParams params;
};

SyntheticCorpus generate_synthetic_corpus(const SyntheticParams& params);
SyntheticCorpus generate_synthetic_corpus(int n_docs, int topics, int seg_len_sentences,
                                          int segs_per_doc, uint64_t seed);

}  // namespace soe
