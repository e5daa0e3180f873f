#include "mprompt/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

namespace mprompt {

RouterMatrix router_matrix_from_state(const ModelState& state, bool use_logits) {
  RouterMatrix m;
  for (size_t t = 0; t < state.routers.size(); ++t) {
    m.names.push_back(t < state.task_names.size() ? state.task_names[t]
                                                  : "task" + std::to_string(t));
    std::vector<double> row;
    for (const auto& router : state.routers[t]) {
      if (use_logits) {
        for (int k = 0; k < router.K(); ++k) row.push_back(static_cast<double>(router.w[k]));
      } else {
        for (int b : binarize_router(router)) row.push_back(static_cast<double>(b));
      }
    }
    m.rows.push_back(std::move(row));
  }
  return m;
}

namespace {

double row_distance(const std::vector<double>& a, const std::vector<double>& b, bool euclidean) {
  if (a.size() != b.size()) throw ShapeError("router rows differ in width");
  if (euclidean) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
  }
  double h = 0.0;
  for (size_t i = 0; i < a.size(); ++i) h += (a[i] != b[i]) ? 1.0 : 0.0;
  return h;
}

}  // namespace

ClusterResult cluster_routers(const RouterMatrix& matrix, int n_groups, bool euclidean) {
  int n = static_cast<int>(matrix.rows.size());
  if (n < 1) throw Error("cluster_routers: empty matrix");
  if (n_groups < 1 || n_groups > n)
    throw ConfigError("cluster count must be in [1, " + std::to_string(n) + "]");

  // Active clusters; Lance-Williams average-linkage updates.
  struct Cluster {
    int node;              // dendrogram node id
    int size;
    int min_leaf;          // smallest task index inside, for tie-breaks
    std::vector<int> members;
  };
  std::vector<Cluster> act;
  for (int i = 0; i < n; ++i) act.push_back({i, 1, i, {i}});
  std::vector<std::vector<double>> dist(static_cast<size_t>(n),
                                        std::vector<double>(static_cast<size_t>(n), 0.0));
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      dist[static_cast<size_t>(i)][static_cast<size_t>(j)] =
          dist[static_cast<size_t>(j)][static_cast<size_t>(i)] =
              row_distance(matrix.rows[static_cast<size_t>(i)],
                           matrix.rows[static_cast<size_t>(j)], euclidean);

  ClusterResult res;
  res.dendrogram.n_leaves = n;
  std::vector<int> partition_assignment;  // captured when |act| == n_groups

  auto capture = [&]() {
    std::vector<int> assign(static_cast<size_t>(n), -1);
    // groups numbered by smallest member
    std::vector<size_t> order(act.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return act[a].min_leaf < act[b].min_leaf; });
    for (size_t g = 0; g < order.size(); ++g)
      for (int m : act[order[g]].members) assign[static_cast<size_t>(m)] = static_cast<int>(g);
    return assign;
  };
  if (static_cast<int>(act.size()) == n_groups) partition_assignment = capture();

  int next_node = n;
  while (act.size() > 1) {
    // pick the closest pair; ties toward the smallest (min_leaf_a, min_leaf_b)
    size_t bi = 0, bj = 1;
    double bd = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < act.size(); ++i)
      for (size_t j = i + 1; j < act.size(); ++j) {
        double dd = dist[i][j];
        int a_lo = std::min(act[i].min_leaf, act[j].min_leaf);
        int a_hi = std::max(act[i].min_leaf, act[j].min_leaf);
        int b_lo = std::min(act[bi].min_leaf, act[bj].min_leaf);
        int b_hi = std::max(act[bi].min_leaf, act[bj].min_leaf);
        if (dd < bd || (dd == bd && std::make_pair(a_lo, a_hi) < std::make_pair(b_lo, b_hi))) {
          bd = dd;
          bi = i;
          bj = j;
        }
      }

    res.dendrogram.merges.push_back({act[bi].node, act[bj].node, bd});
    Cluster merged;
    merged.node = next_node++;
    merged.size = act[bi].size + act[bj].size;
    merged.min_leaf = std::min(act[bi].min_leaf, act[bj].min_leaf);
    merged.members = act[bi].members;
    merged.members.insert(merged.members.end(), act[bj].members.begin(), act[bj].members.end());

    // Lance-Williams: d(k, i+j) = (|i| d(k,i) + |j| d(k,j)) / (|i|+|j|)
    std::vector<double> new_row;
    for (size_t k = 0; k < act.size(); ++k) {
      if (k == bi || k == bj) continue;
      double d = (act[bi].size * dist[bi][k] + act[bj].size * dist[bj][k]) /
                 static_cast<double>(merged.size);
      new_row.push_back(d);
    }
    // rebuild the active set and distance matrix without bi/bj, plus merged
    std::vector<Cluster> next_act;
    std::vector<size_t> keep;
    for (size_t k = 0; k < act.size(); ++k)
      if (k != bi && k != bj) {
        keep.push_back(k);
        next_act.push_back(std::move(act[k]));
      }
    next_act.push_back(std::move(merged));
    size_t m = next_act.size();
    std::vector<std::vector<double>> nd(m, std::vector<double>(m, 0.0));
    for (size_t i = 0; i < keep.size(); ++i)
      for (size_t j = i + 1; j < keep.size(); ++j)
        nd[i][j] = nd[j][i] = dist[keep[i]][keep[j]];
    for (size_t i = 0; i < keep.size(); ++i) nd[i][m - 1] = nd[m - 1][i] = new_row[i];
    act = std::move(next_act);
    dist = std::move(nd);

    if (static_cast<int>(act.size()) == n_groups) partition_assignment = capture();
  }

  if (partition_assignment.empty()) partition_assignment = capture();
  res.group_of = std::move(partition_assignment);
  return res;
}

namespace {

void render_node(const Dendrogram& d, int node, const std::vector<std::string>& names,
                 std::ostringstream& os) {
  if (node < d.n_leaves) {
    os << (node < static_cast<int>(names.size()) ? names[static_cast<size_t>(node)]
                                                 : "t" + std::to_string(node));
    return;
  }
  const auto& m = d.merges[static_cast<size_t>(node - d.n_leaves)];
  os << '(';
  render_node(d, m.a, names, os);
  os << ' ';
  render_node(d, m.b, names, os);
  os << " :" << m.distance << ')';
}

}  // namespace

std::string Dendrogram::to_text(const std::vector<std::string>& names) const {
  if (n_leaves == 0) return "()";
  std::ostringstream os;
  if (merges.empty()) {
    render_node(*this, 0, names, os);
  } else {
    render_node(*this, n_leaves + static_cast<int>(merges.size()) - 1, names, os);
  }
  return os.str();
}

double span_f1(const std::vector<int>& pred_tokens, const std::vector<int>& gold_tokens) {
  if (pred_tokens.empty() || gold_tokens.empty()) return 0.0;
  std::map<int, int> pc, gc;
  for (int t : pred_tokens) ++pc[t];
  for (int t : gold_tokens) ++gc[t];
  double overlap = 0.0;
  for (const auto& [tok, c] : pc) {
    auto it = gc.find(tok);
    if (it != gc.end()) overlap += std::min(c, it->second);
  }
  if (overlap == 0.0) return 0.0;
  double precision = overlap / static_cast<double>(pred_tokens.size());
  double recall = overlap / static_cast<double>(gold_tokens.size());
  return 2.0 * precision * recall / (precision + recall);
}

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) throw ShapeError("partitions differ in length");
  size_t n = a.size();
  if (n == 0) throw Error("adjusted_rand_index: empty partitions");
  std::map<std::pair<int, int>, int64_t> cont;
  std::map<int, int64_t> ra, rb;
  for (size_t i = 0; i < n; ++i) {
    ++cont[{a[i], b[i]}];
    ++ra[a[i]];
    ++rb[b[i]];
  }
  auto choose2 = [](int64_t m) { return m * (m - 1) / 2.0; };
  double sum_ij = 0.0, sum_a = 0.0, sum_b = 0.0;
  for (const auto& [k, v] : cont) sum_ij += choose2(v);
  for (const auto& [k, v] : ra) sum_a += choose2(v);
  for (const auto& [k, v] : rb) sum_b += choose2(v);
  double total = choose2(static_cast<int64_t>(n));
  double expected = sum_a * sum_b / total;
  double max_index = 0.5 * (sum_a + sum_b);
  if (max_index == expected) return 1.0;  // both partitions trivial
  return (sum_ij - expected) / (max_index - expected);
}

}  // namespace mprompt
