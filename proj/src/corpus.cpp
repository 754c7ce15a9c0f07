#include "soe/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace soe {

namespace fs = std::filesystem;

const std::array<std::string, Vocabulary::kNumReserved>& Vocabulary::reserved_tokens() {
  static const std::array<std::string, kNumReserved> toks = {
      "<unk>", "<pad>", "<eos>", "<bos>", "<sum>", "<txt>"};
  return toks;
}

Vocabulary::Vocabulary() {
  for (const auto& t : reserved_tokens()) add(t);
}

void Vocabulary::add(const std::string& token) {
  auto [it, inserted] = token_to_id_.emplace(token, static_cast<TokenId>(id_to_token_.size()));
  if (!inserted) throw std::invalid_argument("vocabulary already contains '" + token + "'");
  id_to_token_.push_back(token);
}

TokenId Vocabulary::encode(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::decode(TokenId id) const {
  if (id < 0 || id >= size()) {
    throw std::out_of_range("vocabulary: id " + std::to_string(id) + " out of range");
  }
  return id_to_token_[id];
}

bool Vocabulary::contains(const std::string& token) const {
  return token_to_id_.count(token) > 0;
}

uint64_t Vocabulary::content_hash() const {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : id_to_token_) {
    h = fnv1a64(t, h);
    h = fnv1a64("\n", h);
  }
  return h;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write vocabulary to " + path);
  for (int id = 0; id < size(); ++id) {
    out << id_to_token_[id] << '\t' << id << '\n';
  }
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read vocabulary from " + path);
  Vocabulary vocab;
  std::string line;
  int row = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw std::runtime_error("malformed vocabulary line: " + line);
    const std::string token = line.substr(0, tab);
    const int id = std::stoi(line.substr(tab + 1));
    if (row < kNumReserved) {
      if (token != reserved_tokens()[row] || id != row) {
        throw std::runtime_error("vocabulary file is missing reserved tokens");
      }
    } else {
      if (id != row) throw std::runtime_error("vocabulary ids must be dense and ordered");
      vocab.add(token);
    }
    ++row;
  }
  if (row < kNumReserved) throw std::runtime_error("vocabulary file is truncated");
  return vocab;
}

size_t Document::total_tokens() const {
  size_t n = 0;
  for (const auto& s : sentences) n += s.size();
  return n;
}

size_t EncodedDocument::total_tokens() const {
  size_t n = 0;
  for (const auto& s : sentences) n += s.size();
  return n;
}

std::vector<TokenId> EncodedDocument::flat() const {
  return flat_range(0, static_cast<int>(sentences.size()));
}

std::vector<TokenId> EncodedDocument::flat_range(int first_sentence, int last_sentence) const {
  std::vector<TokenId> out;
  for (int i = first_sentence; i < last_sentence; ++i) {
    out.insert(out.end(), sentences[i].begin(), sentences[i].end());
  }
  return out;
}

std::vector<TokenId> SegmentedDocument::segment_tokens(int k) const {
  std::vector<TokenId> out;
  for (int idx : groups[k]) {
    out.insert(out.end(), document.sentences[idx].begin(), document.sentences[idx].end());
  }
  return out;
}

const std::vector<TokenId>& SegmentedDocument::sentence(int k, int j) const {
  return document.sentences[groups[k][j]];
}

void SegmentedDocument::validate() const {
  const int t = static_cast<int>(document.sentences.size());
  int expect = 0;
  for (const auto& g : groups) {
    if (g.empty()) throw std::runtime_error("segmentation has an empty group");
    for (int idx : g) {
      if (idx != expect) throw std::runtime_error("segmentation groups are not a contiguous partition");
      ++expect;
    }
  }
  if (expect != t) throw std::runtime_error("segmentation does not cover the document");
}

namespace {

bool is_terminal(char c) { return c == '.' || c == '!' || c == '?'; }

bool is_detachable(unsigned char c) {
  return std::ispunct(c) != 0;
}

}  // namespace

Document tokenize(const std::string& raw_text, const std::string& source_id) {
  Document doc;
  doc.source_id = source_id;
  std::vector<std::string> sentence;

  size_t i = 0;
  const size_t n = raw_text.size();
  while (i < n) {
    while (i < n && std::isspace(static_cast<unsigned char>(raw_text[i]))) ++i;
    if (i >= n) break;
    size_t j = i;
    while (j < n && !std::isspace(static_cast<unsigned char>(raw_text[j]))) ++j;
    std::string word = raw_text.substr(i, j - i);
    for (auto& c : word) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));

    // peel leading and trailing punctuation into their own tokens
    size_t lead = 0;
    while (lead < word.size() && is_detachable(static_cast<unsigned char>(word[lead]))) ++lead;
    size_t tail = word.size();
    while (tail > lead && is_detachable(static_cast<unsigned char>(word[tail - 1]))) --tail;

    for (size_t k = 0; k < lead; ++k) sentence.push_back(std::string(1, word[k]));
    if (tail > lead) sentence.push_back(word.substr(lead, tail - lead));
    bool closed = false;
    for (size_t k = tail; k < word.size(); ++k) {
      sentence.push_back(std::string(1, word[k]));
      // sentence ends on . ! ? when followed by whitespace or end of input
      if (k == word.size() - 1 && is_terminal(word[k])) closed = true;
    }
    if (closed && !sentence.empty()) {
      doc.sentences.push_back(std::move(sentence));
      sentence.clear();
    }
    i = j;
  }
  if (!sentence.empty()) doc.sentences.push_back(std::move(sentence));
  if (doc.sentences.empty()) throw std::runtime_error("empty document");
  return doc;
}

Vocabulary build_vocab(const std::vector<Document>& docs, int min_frequency) {
  if (docs.empty()) throw std::invalid_argument("build_vocab: need at least one document");
  std::unordered_map<std::string, int64_t> freq;
  for (const auto& doc : docs) {
    for (const auto& sent : doc.sentences) {
      for (const auto& tok : sent) ++freq[tok];
    }
  }
  std::vector<std::pair<std::string, int64_t>> items(freq.begin(), freq.end());
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary vocab;
  vocab.min_frequency_ = min_frequency;
  for (const auto& [token, count] : items) {
    if (count < min_frequency) continue;
    if (vocab.contains(token)) continue;  // someone tokenized literal "<eos>" etc.
    vocab.add(token);
  }
  return vocab;
}

EncodedDocument encode(const Document& doc, const Vocabulary& vocab) {
  EncodedDocument out;
  out.source_id = doc.source_id;
  out.sentences.reserve(doc.sentences.size());
  for (const auto& sent : doc.sentences) {
    std::vector<TokenId> ids;
    ids.reserve(sent.size());
    for (const auto& tok : sent) ids.push_back(vocab.encode(tok));
    out.sentences.push_back(std::move(ids));
  }
  return out;
}

Document decode(const EncodedDocument& doc, const Vocabulary& vocab) {
  Document out;
  out.source_id = doc.source_id;
  out.sentences.reserve(doc.sentences.size());
  for (const auto& sent : doc.sentences) {
    std::vector<std::string> toks;
    toks.reserve(sent.size());
    for (TokenId id : sent) toks.push_back(vocab.decode(id));
    out.sentences.push_back(std::move(toks));
  }
  return out;
}

std::string decode_text(const std::vector<TokenId>& ids, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : ids) {
    if (!out.empty()) out += ' ';
    out += vocab.decode(id);
  }
  return out;
}

std::vector<Document> read_corpus_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus file " + path);
  std::vector<Document> docs;
  std::string line, block;
  int index = 0;
  auto flush = [&] {
    if (block.find_first_not_of(" \t\r\n") == std::string::npos) {
      block.clear();
      return;
    }
    docs.push_back(tokenize(block, fs::path(path).filename().string() + "#" + std::to_string(index++)));
    block.clear();
  };
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      flush();
    } else {
      block += line;
      block += '\n';
    }
  }
  flush();
  if (docs.empty()) throw std::runtime_error("corpus file " + path + " contains no documents");
  return docs;
}

std::vector<Document> read_corpus_dir(const std::string& dir) {
  std::vector<std::string> paths;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file()) paths.push_back(entry.path().string());
  }
  std::sort(paths.begin(), paths.end());
  if (paths.empty()) throw std::runtime_error("corpus directory " + dir + " is empty");
  std::vector<Document> docs;
  for (const auto& p : paths) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    docs.push_back(tokenize(ss.str(), fs::path(p).filename().string()));
  }
  return docs;
}

void write_corpus_file(const std::vector<Document>& docs, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write corpus file " + path);
  for (size_t d = 0; d < docs.size(); ++d) {
    if (d) out << '\n';
    for (const auto& sent : docs[d].sentences) {
      for (size_t i = 0; i < sent.size(); ++i) {
        if (i) out << ' ';
        out << sent[i];
      }
      out << '\n';
    }
  }
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

namespace {

// Pronounceable deterministic word: CV syllables indexed by a counter.
std::string make_word(uint64_t index, int syllables) {
  static const char* cons = "bcdfgklmnprstvz";
  static const char* vows = "aeiou";
  std::string w;
  uint64_t x = index;
  for (int s = 0; s < syllables; ++s) {
    w += cons[x % 15];
    x /= 15;
    w += vows[x % 5];
    x /= 5;
  }
  return w;
}

struct WordBank {
  std::vector<std::vector<std::string>> topic;    // [topics][topic_words]
  std::vector<std::vector<std::string>> code;     // [topics][subtypes]
  std::vector<std::string> common;
  std::vector<std::string> filler;

  explicit WordBank(const SyntheticParams& p) {
    uint64_t counter = 0;
    topic.resize(p.topics);
    code.resize(p.topics);
    for (int t = 0; t < p.topics; ++t) {
      for (int i = 0; i < p.topic_words; ++i) topic[t].push_back(make_word(counter++, 3));
      for (int r = 0; r < p.subtypes; ++r) code[t].push_back(make_word(counter++, 4));
    }
    for (int i = 0; i < p.common_words; ++i) common.push_back(make_word(counter++, 2));
    for (int i = 0; i < p.common_words; ++i) filler.push_back(make_word(counter++, 2));
  }
};

}  // namespace

SyntheticCorpus generate_synthetic_corpus(const SyntheticParams& p) {
  if (p.n_docs < 1 || p.topics < 1 || p.seg_len_sentences < 1 || p.segs_per_doc < 1) {
    throw std::invalid_argument("synthetic corpus: all counts must be >= 1");
  }
  SyntheticParams params = p;
  params.subtypes = std::max(1, params.subtypes);
  params.window = std::min(params.window, params.topic_words);

  const WordBank bank(params);
  Rng root(params.seed);

  SyntheticCorpus corpus;
  corpus.params = params;
  corpus.documents.reserve(params.n_docs);
  corpus.truth.reserve(params.n_docs);

  // subtype r draws body words from an overlapping window of the topic vocab
  const int stride = params.subtypes > 1
                         ? std::max(1, (params.topic_words - params.window) / (params.subtypes - 1))
                         : 0;

  for (int d = 0; d < params.n_docs; ++d) {
    Rng rng = root.fork(d);
    Document doc;
    doc.source_id = "synthetic#" + std::to_string(d);
    DocumentTruth truth;

    int topic = rng.uniform_int(params.topics);
    for (int g = 0; g < params.segs_per_doc; ++g) {
      if (g > 0) {
        if (params.topics > 1 && rng.uniform_int(100) < params.markov_stay_pct) {
          topic = (topic + 1) % params.topics;
        } else {
          topic = rng.uniform_int(params.topics);
        }
        truth.boundaries.push_back(static_cast<int>(doc.sentences.size()));
      }
      const int subtype = rng.uniform_int(params.subtypes);
      const int topic_pos = rng.uniform_int(params.seg_len_sentences);
      truth.segments.push_back({topic, subtype, topic_pos});

      const int lo = subtype * stride;
      for (int s = 0; s < params.seg_len_sentences; ++s) {
        std::vector<std::string> sent;
        if (s == topic_pos) {
          sent.push_back(bank.topic[topic][0]);
          sent.push_back(bank.topic[topic][1]);
          sent.push_back(bank.code[topic][subtype]);
        } else if (rng.uniform_int(100) < params.filler_sentences_pct) {
          const int len = params.body_len_min +
                          rng.uniform_int(params.body_len_max - params.body_len_min + 1);
          for (int w = 0; w < len; ++w) {
            sent.push_back(bank.filler[rng.uniform_int(static_cast<int>(bank.filler.size()))]);
          }
        } else {
          const int len = params.body_len_min +
                          rng.uniform_int(params.body_len_max - params.body_len_min + 1);
          for (int w = 0; w < len; ++w) {
            const int roll = rng.uniform_int(100);
            if (roll < params.decoy_pct && params.topics > 1) {
              int other = rng.uniform_int(params.topics - 1);
              if (other >= topic) ++other;
              sent.push_back(bank.topic[other][rng.uniform_int(params.topic_words)]);
            } else if (roll < params.decoy_pct + 25) {
              sent.push_back(bank.common[rng.uniform_int(static_cast<int>(bank.common.size()))]);
            } else {
              sent.push_back(bank.topic[topic][lo + rng.uniform_int(params.window)]);
            }
          }
        }
        sent.push_back(".");
        doc.sentences.push_back(std::move(sent));
      }
    }
    corpus.documents.push_back(std::move(doc));
    corpus.truth.push_back(std::move(truth));
  }
  return corpus;
}

SyntheticCorpus generate_synthetic_corpus(int n_docs, int topics, int seg_len_sentences,
                                          int segs_per_doc, uint64_t seed) {
  SyntheticParams p;
  p.n_docs = n_docs;
  p.topics = topics;
  p.seg_len_sentences = seg_len_sentences;
  p.segs_per_doc = segs_per_doc;
  p.seed = seed;
  return generate_synthetic_corpus(p);
}

}  // namespace soe
