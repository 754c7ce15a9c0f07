#include "soe/slicer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_map>

namespace soe {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

void CoherenceTable::validate() const {
  for (double s : scores) {
    if (!std::isfinite(s) || s < 0.0 || s > 1.0) {
      throw std::runtime_error("coherence table entries must be finite and in [0,1]");
    }
  }
}

std::vector<std::vector<int>> SegmentationPlan::groups(int num_sentences) const {
  std::vector<std::vector<int>> out;
  int start = 0;
  for (int b : breakpoints) {
    std::vector<int> g;
    for (int i = start; i < b; ++i) g.push_back(i);
    out.push_back(std::move(g));
    start = b;
  }
  std::vector<int> g;
  for (int i = start; i < num_sentences; ++i) g.push_back(i);
  out.push_back(std::move(g));
  return out;
}

double LexicalOverlapScorer::score(const std::vector<TokenId>& first,
                                   const std::vector<TokenId>& second) const {
  if (first.empty() || second.empty()) return 0.0;
  std::unordered_map<TokenId, int> a, b;
  for (TokenId t : first) ++a[t];
  for (TokenId t : second) ++b[t];
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (const auto& [t, c] : a) {
    na += double(c) * c;
    auto it = b.find(t);
    if (it != b.end()) dot += double(c) * it->second;
  }
  for (const auto& [t, c] : b) nb += double(c) * c;
  if (dot == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

CoherenceTable score_adjacent(const EncodedDocument& doc, const CoherenceScorer& scorer) {
  const int t = static_cast<int>(doc.sentences.size());
  if (t < 2) throw std::runtime_error("score_adjacent: document has fewer than 2 sentences");
  CoherenceTable table;
  table.scores.reserve(t - 1);
  for (int i = 0; i + 1 < t; ++i) {
    table.scores.push_back(scorer.score(doc.sentences[i], doc.sentences[i + 1]));
  }
  table.validate();
  return table;
}

double plan_objective(const CoherenceTable& table, const std::vector<int>& breakpoints) {
  // objective = total adjacent score - 2 * (sum of boundary-pair scores)
  double total = 0.0;
  for (double s : table.scores) total += s;
  double boundary = 0.0;
  for (int b : breakpoints) boundary += table.scores[b - 1];
  return total - 2.0 * boundary;
}

SegmentationPlan slice_coherence(const CoherenceTable& table, int k, int min_segment_len) {
  table.validate();
  const int t = table.num_sentences();
  if (k < 1 || k > t) throw std::invalid_argument("slice_coherence: need 1 <= K <= T");
  if (min_segment_len < 1) throw std::invalid_argument("min_segment_len must be >= 1");
  if (static_cast<int64_t>(k) * min_segment_len > t) {
    throw std::invalid_argument("slice_coherence: K segments of min length do not fit");
  }

  const int nb = k - 1;  // breakpoints to place
  SegmentationPlan plan;
  if (nb == 0) {
    plan.objective_value = plan_objective(table, plan.breakpoints);
    return plan;
  }

  // Maximizing the objective == minimizing the summed boundary scores.
  // rem[j][p]: minimal boundary cost of placing j breakpoints at positions
  // >= p, consecutive ones >= min_segment_len apart, last <= t - min_segment_len.
  const auto cost = [&](int pos) { return table.scores[pos - 1]; };
  std::vector<std::vector<double>> rem(nb + 1, std::vector<double>(t + 2, kInf));
  for (int p = 0; p <= t + 1; ++p) rem[0][p] = 0.0;
  for (int j = 1; j <= nb; ++j) {
    // feasibility: j breakpoints starting at >= p need p + (j-1)*min_len <= t - min_len
    for (int p = t - j * min_segment_len; p >= 1; --p) {
      double take = kInf;
      const int next = std::min(p + min_segment_len, t + 1);
      if (rem[j - 1][next] < kInf) take = cost(p) + rem[j - 1][next];
      rem[j][p] = std::min(take, rem[j][p + 1]);
    }
  }
  if (rem[nb][min_segment_len] >= kInf) {
    throw std::runtime_error("slice_coherence: no feasible plan");
  }

  // Reconstruct the lexicographically smallest optimal breakpoint list.
  plan.breakpoints.reserve(nb);
  int p = min_segment_len;
  for (int j = nb; j >= 1; --j) {
    while (true) {
      const int next = std::min(p + min_segment_len, t + 1);
      if (rem[j - 1][next] < kInf && cost(p) + rem[j - 1][next] == rem[j][p]) break;
      ++p;
    }
    plan.breakpoints.push_back(p);
    p = p + min_segment_len;
  }
  plan.objective_value = plan_objective(table, plan.breakpoints);
  return plan;
}

SegmentationPlan slice_equal(int num_sentences, int k, const CoherenceTable* table) {
  if (k < 1 || k > num_sentences) throw std::invalid_argument("slice_equal: need 1 <= K <= T");
  SegmentationPlan plan;
  const int base = num_sentences / k;
  const int extra = num_sentences % k;
  int pos = 0;
  for (int seg = 0; seg + 1 < k; ++seg) {
    pos += base + (seg < extra ? 1 : 0);
    plan.breakpoints.push_back(pos);
  }
  if (table) {
    table->validate();
    if (table->num_sentences() != num_sentences) {
      throw std::invalid_argument("slice_equal: table size mismatch");
    }
    plan.objective_value = plan_objective(*table, plan.breakpoints);
  }
  return plan;
}

SegmentationPlan brute_force_slice(const CoherenceTable& table, int k, int min_segment_len,
                                   uint64_t max_candidates) {
  table.validate();
  const int t = table.num_sentences();
  if (k < 1 || k > t) throw std::invalid_argument("brute_force_slice: need 1 <= K <= T");

  // candidate count C(T-1, K-1)
  uint64_t count = 1;
  for (int i = 1; i <= k - 1; ++i) {
    count = count * static_cast<uint64_t>(t - 1 - (k - 1) + i) / i;
    if (count > max_candidates) {
      throw std::runtime_error("brute_force_slice: candidate bound exceeded");
    }
  }

  SegmentationPlan best;
  bool found = false;
  std::vector<int> bp(k - 1);
  for (int i = 0; i < k - 1; ++i) bp[i] = i + 1;

  auto feasible = [&](const std::vector<int>& b) {
    int prev = 0;
    for (int x : b) {
      if (x - prev < min_segment_len) return false;
      prev = x;
    }
    return t - prev >= min_segment_len;
  };

  // enumerate combinations in lexicographic order; strict improvement keeps
  // the lexicographically smallest optimum
  while (true) {
    if (feasible(bp)) {
      const double obj = plan_objective(table, bp);
      if (!found || obj > best.objective_value) {
        best.breakpoints = bp;
        best.objective_value = obj;
        found = true;
      }
    }
    if (k == 1) break;
    int i = k - 2;
    while (i >= 0 && bp[i] == t - 1 - (k - 2 - i)) --i;
    if (i < 0) break;
    ++bp[i];
    for (int j = i + 1; j < k - 1; ++j) bp[j] = bp[j - 1] + 1;
  }
  if (!found) throw std::runtime_error("brute_force_slice: no feasible plan");
  return best;
}

SegmentedDocument apply_plan(const EncodedDocument& doc, const SegmentationPlan& plan,
                             int snippet_token_budget) {
  SegmentedDocument seg;
  seg.document = doc;
  seg.groups = plan.groups(static_cast<int>(doc.sentences.size()));
  seg.snippet_token_budget = snippet_token_budget;
  seg.validate();
  return seg;
}

int segments_for_budget(const EncodedDocument& doc, int snippet_token_budget) {
  if (snippet_token_budget < 1) throw std::invalid_argument("snippet token budget must be >= 1");
  const int t = static_cast<int>(doc.sentences.size());
  const auto total = static_cast<int64_t>(doc.total_tokens());
  const int k = static_cast<int>((total + snippet_token_budget - 1) / snippet_token_budget);
  return std::max(1, std::min(k, t));
}

}  // namespace soe
