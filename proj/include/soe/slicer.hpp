#pragma once

#include <memory>
#include <string>
#include <vector>

#include "soe/corpus.hpp"

namespace soe {

// Coherence scores for consecutive sentence pairs: scores[i] is the score
// between sentence i and i+1, each in [0, 1].
struct CoherenceTable {
  std::vector<double> scores;

  int num_sentences() const { return static_cast<int>(scores.size()) + 1; }
  void validate() const;
};

struct SegmentationPlan {
  // breakpoints[j] = index b meaning a segment boundary between sentence b-1
  // and sentence b (1-based position in [1, T-1]), strictly increasing
  std::vector<int> breakpoints;
  double objective_value = 0.0;

  std::vector<std::vector<int>> groups(int num_sentences) const;
};

// Pluggable scorer for adjacent-sentence coherence.
class CoherenceScorer {
 public:
  virtual ~CoherenceScorer() = default;
  virtual double score(const std::vector<TokenId>& first, const std::vector<TokenId>& second) const = 0;
};

class ConstantScorer : public CoherenceScorer {
 public:
  explicit ConstantScorer(double value) : value_(value) {}
  double score(const std::vector<TokenId>&, const std::vector<TokenId>&) const override {
    return value_;
  }

 private:
  double value_;
};

// Training-free fallback: token-overlap cosine between adjacent sentences.
class LexicalOverlapScorer : public CoherenceScorer {
 public:
  double score(const std::vector<TokenId>& first, const std::vector<TokenId>& second) const override;
};

CoherenceTable score_adjacent(const EncodedDocument& doc, const CoherenceScorer& scorer);

// Exact maximizer of
//   sum of within-segment adjacent scores - sum of boundary-pair scores
// over partitions into K contiguous segments. Ties resolve to the
// lexicographically smallest breakpoint list. min_segment_len >= 1 restricts
// feasible boundaries.
SegmentationPlan slice_coherence(const CoherenceTable& table, int k, int min_segment_len = 1);

// Equal slicing: segment sizes differ by at most one, earlier segments larger.
SegmentationPlan slice_equal(int num_sentences, int k, const CoherenceTable* table = nullptr);

// Exhaustive oracle with the same objective and tie-break rule.
// Throws if C(T-1, K-1) exceeds max_candidates.
SegmentationPlan brute_force_slice(const CoherenceTable& table, int k, int min_segment_len = 1,
                                   uint64_t max_candidates = 1000000);

double plan_objective(const CoherenceTable& table, const std::vector<int>& breakpoints);

SegmentedDocument apply_plan(const EncodedDocument& doc, const SegmentationPlan& plan,
                             int snippet_token_budget);

// K policy: one segment per snippet_token_budget tokens, clamped to [1, T].
int segments_for_budget(const EncodedDocument& doc, int snippet_token_budget);

}  // namespace soe
