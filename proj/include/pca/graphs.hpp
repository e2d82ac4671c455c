#pragma once
// Graph and tree construction: labeled rooted trees, Galton-Watson samplers,
// the unimodular offspring transform, random-graph generators, and boundary
// operators. Generators are pure functions of (parameters, rng state) and the
// returned values are plain data, safe to share across threads.

#include <cmath>
#include <iostream>
#include <map>
#include <sstream>
#include <unordered_map>
#include <utility>

#include "pca/core.hpp"

namespace pca {

// Vertex address in the infinite labeled tree: a sequence of positive child
// coordinates, empty for the root. Text form "ø" or dot-separated integers.
struct uhn_label {
  std::vector<int> path;

  static uhn_label root() { return {}; }
  int depth() const { return int(path.size()); }
  bool is_root() const { return path.empty(); }

  uhn_label child(int j) const {
    if (j < 1) throw std::invalid_argument("child coordinates start at 1");
    uhn_label c = *this;
    c.path.push_back(j);
    return c;
  }
  uhn_label parent() const {
    if (is_root()) throw std::logic_error("the root has no parent");
    uhn_label p = *this;
    p.path.pop_back();
    return p;
  }

  std::string text() const {
    if (is_root()) return "ø";
    std::string s;
    for (std::size_t i = 0; i < path.size(); ++i) {
      if (i) s += '.';
      s += std::to_string(path[i]);
    }
    return s;
  }

  static uhn_label parse(const std::string& s) {
    if (s == "ø") return root();
    uhn_label out;
    std::size_t pos = 0;
    while (pos <= s.size()) {
      auto dot = s.find('.', pos);
      if (dot == std::string::npos) dot = s.size();
      const std::string part = s.substr(pos, dot - pos);
      std::size_t used = 0;
      int v = 0;
      try {
        v = std::stoi(part, &used);
      } catch (...) {
        throw parse_error("bad label coordinate '" + part + "'");
      }
      if (used != part.size() || v < 1)
        throw parse_error("bad label coordinate '" + part + "'");
      out.path.push_back(v);
      pos = dot + 1;
    }
    return out;
  }

  auto operator<=>(const uhn_label&) const = default;
};

// Finite rooted tree stored in construction (breadth-first) order. Index 0 is
// the root. Children of each vertex appear in coordinate order.
struct rooted_tree {
  std::vector<uhn_label> labels;
  std::vector<int> parent;                 // -1 at the root
  std::vector<std::vector<int>> children;  // vertex indices

  rooted_tree() {
    labels.push_back(uhn_label::root());
    parent.push_back(-1);
    children.emplace_back();
    index_.emplace("ø", 0);
  }

  int vertex_count() const { return int(labels.size()); }
  int depth_of(int v) const { return labels[std::size_t(v)].depth(); }
  int depth() const {
    int d = 0;
    for (const auto& l : labels) d = std::max(d, l.depth());
    return d;
  }

  // -1 when absent.
  int index_of(const uhn_label& l) const {
    auto it = index_.find(l.text());
    return it == index_.end() ? -1 : it->second;
  }

  // Appends a child with the next free coordinate and returns its index.
  int add_child(int p) {
    const int idx = vertex_count();
    const int coord = int(children[std::size_t(p)].size()) + 1;
    labels.push_back(labels[std::size_t(p)].child(coord));
    parent.push_back(p);
    children.emplace_back();
    children[std::size_t(p)].push_back(idx);
    index_.emplace(labels.back().text(), idx);
    return idx;
  }

  // Parent (if any) then children, the neighbor order used by tree engines.
  std::vector<int> neighbors(int v) const {
    std::vector<int> out;
    if (parent[std::size_t(v)] >= 0) out.push_back(parent[std::size_t(v)]);
    for (int c : children[std::size_t(v)]) out.push_back(c);
    return out;
  }

 private:
  std::unordered_map<std::string, int> index_;
};

// Checks the three tree axioms (root present, parent-closed, child
// coordinates form 1..c_v) plus internal cross-consistency.
inline void audit_tree(const rooted_tree& t) {
  const int n = t.vertex_count();
  if (n == 0 || !t.labels[0].is_root())
    throw std::logic_error("tree axiom: the root is missing");
  for (int v = 0; v < n; ++v) {
    const auto& lab = t.labels[std::size_t(v)];
    if (t.index_of(lab) != v)
      throw std::logic_error("tree audit: duplicate or unindexed label " + lab.text());
    if (v == 0) {
      if (t.parent[0] != -1) throw std::logic_error("tree audit: root has a parent");
    } else {
      const int p = t.index_of(lab.parent());
      if (p < 0)
        throw std::logic_error("tree axiom: parent of " + lab.text() + " is missing");
      if (p != t.parent[std::size_t(v)])
        throw std::logic_error("tree audit: parent index mismatch at " + lab.text());
    }
    const auto& ch = t.children[std::size_t(v)];
    for (std::size_t j = 0; j < ch.size(); ++j) {
      const auto& cl = t.labels[std::size_t(ch[j])];
      if (cl.path.empty() || cl.parent() != lab || cl.path.back() != int(j) + 1)
        throw std::logic_error("tree axiom: child coordinates of " + lab.text() +
                               " are not 1..c");
    }
  }
}

// Rooted tree where the root has κ children and every other internal vertex
// has κ−1, cut at the given depth.
inline rooted_tree truncated_regular_tree(int kappa, int depth) {
  if (kappa < 2) throw std::invalid_argument("branching needs κ ≥ 2");
  if (depth < 0) throw std::invalid_argument("negative depth");
  rooted_tree t;
  std::vector<int> frontier{0};
  for (int d = 0; d < depth; ++d) {
    std::vector<int> next;
    for (int v : frontier) {
      const int c = d == 0 ? kappa : kappa - 1;
      for (int j = 0; j < c; ++j) next.push_back(t.add_child(v));
    }
    frontier = std::move(next);
  }
  return t;
}

// Two-parameter variant used by the tractable non-regular oracle: the root
// has κ children, vertices whose label ends in 1 have κ̃ children, all other
// internal vertices have κ−1.
inline rooted_tree truncated_regularish_tree(int kappa, int kappa_tilde,
                                             int depth) {
  if (kappa < 2 || kappa_tilde < 0) throw std::invalid_argument("bad branching");
  if (depth < 0) throw std::invalid_argument("negative depth");
  rooted_tree t;
  std::vector<int> frontier{0};
  for (int d = 0; d < depth; ++d) {
    std::vector<int> next;
    for (int v : frontier) {
      int c;
      if (d == 0)
        c = kappa;
      else if (t.labels[std::size_t(v)].path.back() == 1)
        c = kappa_tilde;
      else
        c = kappa - 1;
      for (int j = 0; j < c; ++j) next.push_back(t.add_child(v));
    }
    frontier = std::move(next);
  }
  return t;
}

// Probability mass function on child counts with cached mean.
struct offspring_distribution {
  std::vector<double> pmf;  // index = child count
  double mean = 0;

  static offspring_distribution from_pmf(std::vector<double> p) {
    if (p.empty()) throw std::invalid_argument("empty pmf");
    double s = 0;
    for (double x : p) {
      if (!(x >= 0)) throw std::invalid_argument("negative pmf entry");
      s += x;
    }
    if (std::abs(s - 1.0) > 1e-12)
      throw std::invalid_argument("offspring pmf sums to " + std::to_string(s));
    offspring_distribution d;
    d.pmf = std::move(p);
    for (std::size_t k = 0; k < d.pmf.size(); ++k) d.mean += double(k) * d.pmf[k];
    return d;
  }

  static offspring_distribution delta(int k) {
    if (k < 0) throw std::invalid_argument("negative child count");
    std::vector<double> p(std::size_t(k) + 1, 0.0);
    p.back() = 1.0;
    return from_pmf(std::move(p));
  }

  static offspring_distribution uniform(int lo, int hi) {
    if (lo < 0 || hi < lo) throw std::invalid_argument("bad uniform range");
    std::vector<double> p(std::size_t(hi) + 1, 0.0);
    for (int k = lo; k <= hi; ++k) p[std::size_t(k)] = 1.0 / double(hi - lo + 1);
    return from_pmf(std::move(p));
  }

  static offspring_distribution binomial(int n, double q) {
    if (n < 0 || q < 0 || q > 1) throw std::invalid_argument("bad binomial");
    std::vector<double> p(std::size_t(n) + 1);
    for (int k = 0; k <= n; ++k) {
      double c = 1;
      for (int i = 0; i < k; ++i) c = c * double(n - i) / double(i + 1);
      p[std::size_t(k)] = c * std::pow(q, k) * std::pow(1 - q, n - k);
    }
    double s = 0;
    for (double x : p) s += x;
    for (double& x : p) x /= s;
    return from_pmf(std::move(p));
  }

  // Tail truncated once both the remaining mass and the current term drop
  // below 1e-15, then renormalized.
  static offspring_distribution poisson(double lambda) {
    if (!(lambda >= 0)) throw std::invalid_argument("negative rate");
    std::vector<double> p;
    double term = std::exp(-lambda), cum = 0;
    int k = 0;
    while (true) {
      p.push_back(term);
      cum += term;
      ++k;
      term *= lambda / double(k);
      if (1 - cum < 1e-15 && term < 1e-15 && k > lambda) break;
      if (k > 10000) break;
    }
    double s = 0;
    for (double x : p) s += x;
    for (double& x : p) x /= s;
    return from_pmf(std::move(p));
  }

  // Truncated to counts ≤ cap, renormalized. Used where a hard support bound
  // keeps downstream enumeration finite.
  offspring_distribution truncated(int cap) const {
    if (cap < 0) throw std::invalid_argument("negative cap");
    std::vector<double> p(pmf.begin(),
                          pmf.begin() + std::min(pmf.size(), std::size_t(cap) + 1));
    double s = 0;
    for (double x : p) s += x;
    if (s <= 0) throw std::invalid_argument("truncation removes all mass");
    for (double& x : p) x /= s;
    return from_pmf(std::move(p));
  }

  int max_count() const { return int(pmf.size()) - 1; }

  int sample(double u) const { return sample_pmf(pmf, u); }
};

// Size-biased shift: out(k) ∝ (k+1) · in(k+1). Sampling children by this law
// below the first generation makes the branching process unimodular.
inline offspring_distribution unimodular_offspring(
    const offspring_distribution& rho0) {
  if (!(rho0.mean > 0))
    throw std::invalid_argument("offspring mean must be positive");
  std::vector<double> p(std::max<std::size_t>(rho0.pmf.size() - 1, 1), 0.0);
  for (std::size_t k = 0; k + 1 < rho0.pmf.size(); ++k)
    p[k] = double(k + 1) * rho0.pmf[k + 1] / rho0.mean;
  double s = 0;
  for (double x : p) s += x;
  for (double& x : p) x /= s;
  return offspring_distribution::from_pmf(std::move(p));
}

// Branching-process tree: the root draws its child count from rho0, later
// generations from rho, cut at the depth cap. Each vertex consumes a noise
// stream forked along its label, so a prefix of the tree never depends on
// draws made for deeper vertices.
inline rooted_tree sample_gw_tree(const offspring_distribution& rho0,
                                  const offspring_distribution& rho, int cap,
                                  stream s) {
  if (cap < 0) throw std::invalid_argument("negative depth cap");
  rooted_tree t;
  std::vector<int> frontier{0};
  for (int d = 0; d < cap; ++d) {
    std::vector<int> next;
    for (int v : frontier) {
      stream vs = s.fork(uint64_t(d));
      for (int coord : t.labels[std::size_t(v)].path) vs = vs.fork(uint64_t(coord));
      const int c = (d == 0 ? rho0 : rho).sample(vs.u01(0));
      for (int j = 0; j < c; ++j) next.push_back(t.add_child(v));
    }
    frontier = std::move(next);
  }
  return t;
}

// Simple undirected graph with sorted neighbor lists.
struct finite_graph {
  int n = 0;
  std::vector<std::vector<int>> adj;

  static finite_graph empty(int n) {
    if (n < 0) throw std::invalid_argument("negative vertex count");
    finite_graph g;
    g.n = n;
    g.adj.assign(std::size_t(n), {});
    return g;
  }

  void check_vertex(int v) const {
    if (v < 0 || v >= n) throw std::invalid_argument("vertex out of range");
  }

  bool has_edge(int u, int v) const {
    check_vertex(u);
    check_vertex(v);
    const auto& a = adj[std::size_t(u)];
    return std::binary_search(a.begin(), a.end(), v);
  }

  void add_edge(int u, int v) {
    check_vertex(u);
    check_vertex(v);
    if (u == v) throw std::invalid_argument("self-loop");
    auto& au = adj[std::size_t(u)];
    auto it = std::lower_bound(au.begin(), au.end(), v);
    if (it != au.end() && *it == v) throw std::invalid_argument("duplicate edge");
    au.insert(it, v);
    auto& av = adj[std::size_t(v)];
    av.insert(std::lower_bound(av.begin(), av.end(), u), u);
  }

  int degree(int v) const {
    check_vertex(v);
    return int(adj[std::size_t(v)].size());
  }

  std::size_t edge_count() const {
    std::size_t s = 0;
    for (const auto& a : adj) s += a.size();
    return s / 2;
  }

  static finite_graph path(int n) {
    auto g = empty(n);
    for (int v = 0; v + 1 < n; ++v) g.add_edge(v, v + 1);
    return g;
  }
  static finite_graph cycle(int n) {
    if (n < 3) throw std::invalid_argument("cycle needs n ≥ 3");
    auto g = path(n);
    g.add_edge(n - 1, 0);
    return g;
  }
  static finite_graph star(int n) {
    auto g = empty(n);
    for (int v = 1; v < n; ++v) g.add_edge(0, v);
    return g;
  }
  static finite_graph complete(int n) {
    auto g = empty(n);
    for (int u = 0; u < n; ++u)
      for (int v = u + 1; v < n; ++v) g.add_edge(u, v);
    return g;
  }
  static finite_graph from_tree(const rooted_tree& t) {
    auto g = empty(t.vertex_count());
    for (int v = 1; v < t.vertex_count(); ++v)
      g.add_edge(t.parent[std::size_t(v)], v);
    return g;
  }
};

// Each unordered pair is an edge independently with probability λ/n, sampled
// by geometric skips within each row.
inline finite_graph erdos_renyi(int n, double lambda, sequence& rng) {
  if (n < 1) throw std::invalid_argument("need at least one vertex");
  if (!(lambda >= 0)) throw std::invalid_argument("negative rate");
  double p = lambda / double(n);
  if (p > 1) {
    std::cerr << "erdos_renyi: edge probability " << p << " clamped to 1\n";
    p = 1;
  }
  if (p >= 1) return finite_graph::complete(n);
  auto g = finite_graph::empty(n);
  if (p <= 0) return g;
  const double logq = std::log1p(-p);
  for (int u = 0; u < n - 1; ++u) {
    int v = u;
    while (true) {
      const double x = rng.u01();
      v += 1 + int(std::floor(std::log(1.0 - x) / logq));
      if (v >= n) break;
      g.add_edge(u, v);
    }
  }
  return g;
}

// Uniform pairing of half-edges with self-loops and parallel edges erased.
inline finite_graph configuration_model(std::span<const int> degrees,
                                        sequence& rng) {
  std::size_t total = 0;
  for (int d : degrees) {
    if (d < 0) throw std::invalid_argument("negative degree");
    total += std::size_t(d);
  }
  if (total % 2 != 0) throw std::invalid_argument("odd half-edge count");
  std::vector<int> half;
  half.reserve(total);
  for (std::size_t v = 0; v < degrees.size(); ++v)
    for (int i = 0; i < degrees[v]; ++i) half.push_back(int(v));
  // Fisher-Yates; pairing consecutive entries of a uniform shuffle is a
  // uniform perfect matching.
  for (std::size_t i = half.size(); i > 1; --i)
    std::swap(half[i - 1], half[rng.below(i)]);
  auto g = finite_graph::empty(int(degrees.size()));
  for (std::size_t i = 0; i + 1 < half.size(); i += 2) {
    const int u = half[i], v = half[i + 1];
    if (u != v && !g.has_edge(u, v)) g.add_edge(u, v);
  }
  return g;
}

// Uniform κ-regular graph via pairing-model proposals rejected until simple.
inline finite_graph random_regular(int n, int kappa, sequence& rng,
                                   int retry_cap = 10000) {
  if (kappa < 0 || n < kappa + 1)
    throw std::invalid_argument("need n ≥ κ+1");
  if ((std::int64_t(n) * kappa) % 2 != 0)
    throw std::invalid_argument("nκ must be even");
  std::vector<int> half;
  half.reserve(std::size_t(n) * std::size_t(kappa));
  for (int attempt = 0; attempt < retry_cap; ++attempt) {
    half.clear();
    for (int v = 0; v < n; ++v)
      for (int i = 0; i < kappa; ++i) half.push_back(v);
    for (std::size_t i = half.size(); i > 1; --i)
      std::swap(half[i - 1], half[rng.below(i)]);
    auto g = finite_graph::empty(n);
    bool simple = true;
    for (std::size_t i = 0; simple && i + 1 < half.size(); i += 2) {
      const int u = half[i], v = half[i + 1];
      if (u == v || g.has_edge(u, v))
        simple = false;
      else
        g.add_edge(u, v);
    }
    if (simple) return g;
  }
  throw std::runtime_error("no simple pairing found within the retry cap");
}

// ∂A (neighbors of A outside A) and ∂²A = ∂A ∪ ∂(A ∪ ∂A); both sorted and
// disjoint from A.
struct boundary_result {
  std::vector<int> boundary;
  std::vector<int> second_boundary;
};

inline boundary_result boundary_sets(const finite_graph& g,
                                     std::span<const int> a) {
  std::vector<char> in_a(std::size_t(g.n), 0);
  for (int v : a) {
    g.check_vertex(v);
    in_a[std::size_t(v)] = 1;
  }
  auto neighbors_outside = [&](const std::vector<char>& set) {
    std::vector<int> out;
    for (int v = 0; v < g.n; ++v) {
      if (set[std::size_t(v)]) continue;
      for (int u : g.adj[std::size_t(v)])
        if (set[std::size_t(u)]) {
          out.push_back(v);
          break;
        }
    }
    return out;  // sorted by construction
  };
  boundary_result r;
  r.boundary = neighbors_outside(in_a);
  std::vector<char> enlarged = in_a;
  for (int v : r.boundary) enlarged[std::size_t(v)] = 1;
  std::vector<int> outer = neighbors_outside(enlarged);
  r.second_boundary = r.boundary;
  r.second_boundary.insert(r.second_boundary.end(), outer.begin(), outer.end());
  std::sort(r.second_boundary.begin(), r.second_boundary.end());
  return r;
}

// Text form: one "u v" line per edge with u < v, lines sorted.
inline std::string to_edge_list_text(const finite_graph& g) {
  std::ostringstream os;
  for (int u = 0; u < g.n; ++u)
    for (int v : g.adj[std::size_t(u)])
      if (u < v) os << u << ' ' << v << '\n';
  return os.str();
}

inline finite_graph parse_edge_list_text(const std::string& text,
                                         int n_hint = -1) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  std::vector<std::pair<int, int>> edges;
  int maxv = -1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    long u, v;
    if (!(ls >> u >> v) || u < 0 || v < 0 || u == v)
      throw parse_error("edge list line " + std::to_string(lineno) +
                        ": expected two distinct vertex ids");
    std::string rest;
    if (ls >> rest)
      throw parse_error("edge list line " + std::to_string(lineno) +
                        ": trailing tokens");
    edges.emplace_back(int(u), int(v));
    maxv = std::max(maxv, int(std::max(u, v)));
  }
  auto g = finite_graph::empty(n_hint >= 0 ? n_hint : maxv + 1);
  for (auto [u, v] : edges) g.add_edge(u, v);
  return g;
}

// Text form: one label per line in (depth, coordinates) order, root first.
inline std::string to_label_text(const rooted_tree& t) {
  std::vector<uhn_label> sorted = t.labels;
  std::sort(sorted.begin(), sorted.end(),
            [](const uhn_label& a, const uhn_label& b) {
              if (a.depth() != b.depth()) return a.depth() < b.depth();
              return a.path < b.path;
            });
  std::string out;
  for (const auto& l : sorted) {
    out += l.text();
    out += '\n';
  }
  return out;
}

inline rooted_tree parse_label_text(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::vector<uhn_label> labels;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    try {
      labels.push_back(uhn_label::parse(line));
    } catch (const parse_error& e) {
      throw parse_error("label list line " + std::to_string(lineno) + ": " +
                        e.what());
    }
  }
  std::sort(labels.begin(), labels.end(),
            [](const uhn_label& a, const uhn_label& b) {
              if (a.depth() != b.depth()) return a.depth() < b.depth();
              return a.path < b.path;
            });
  rooted_tree t;
  for (const auto& l : labels) {
    if (l.is_root()) continue;  // the constructor provides the root
    const int p = t.index_of(l.parent());
    if (p < 0)
      throw parse_error("label " + l.text() + " has no parent in the list");
    const int idx = t.add_child(p);
    if (t.labels[std::size_t(idx)] != l)
      throw parse_error("label " + l.text() +
                        " skips a child coordinate or repeats one");
  }
  if (int(labels.size()) != t.vertex_count())
    throw parse_error("label list is missing the root or repeats it");
  audit_tree(t);
  return t;
}

}  // namespace pca
