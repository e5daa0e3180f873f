#pragma once

#include <string>
#include <vector>

#include "mprompt/model_state.hpp"

namespace mprompt {

// Tasks x gates matrix; binarized router entries by default, raw logits when
// the logits switch is chosen.
struct RouterMatrix {
  std::vector<std::string> names;
  std::vector<std::vector<double>> rows;
};

struct Dendrogram {
  struct Merge {
    int a = 0, b = 0;     // node ids: 0..n-1 leaves, n+i for merge i
    double distance = 0;
  };
  int n_leaves = 0;
  std::vector<Merge> merges;  // n_leaves - 1 entries, non-decreasing distance

  std::string to_text(const std::vector<std::string>& names) const;
};

struct ClusterResult {
  std::vector<int> group_of;  // group ids 0..n_groups-1, numbered by smallest member
  Dendrogram dendrogram;
};

// Agglomerative clustering, average linkage; Hamming distance on binarized
// rows (Euclidean when `euclidean` is set, for the logits switch). Merge ties
// break toward the pair with the smallest task indices.
ClusterResult cluster_routers(const RouterMatrix& matrix, int n_groups, bool euclidean = false);

RouterMatrix router_matrix_from_state(const ModelState& state, bool use_logits);

// Token-overlap F1 between predicted and gold span tokens (multiset overlap).
double span_f1(const std::vector<int>& pred_tokens, const std::vector<int>& gold_tokens);

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);

}  // namespace mprompt
