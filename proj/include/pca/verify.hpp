#pragma once

// Structural checks for synchronous dynamics: block conditional independence
// on exact trajectory laws, the Gaussian counterexamples that pin down how
// much conditioning is needed, subgraph consistency of conditional laws, and
// Monte Carlo harnesses for leaf exchangeability, mass transport, rerooting,
// and finite-graph convergence toward the tree laws.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pca/gaussian.hpp"
#include "pca/localfield.hpp"

namespace pca {

namespace detail {

inline std::string block_atom(const std::vector<traj>& xs,
                              std::span<const int> block) {
  std::string out;
  for (std::size_t i = 0; i < block.size(); ++i) {
    if (i) out += ';';
    out += xs[std::size_t(block[i])];
  }
  return out;
}

inline void check_disjoint_blocks(int n,
                                  std::initializer_list<std::span<const int>>
                                      blocks) {
  std::vector<char> used(std::size_t(n), 0);
  for (const auto& blk : blocks)
    for (int v : blk) {
      if (v < 0 || v >= n) throw std::invalid_argument("vertex out of range");
      if (used[std::size_t(v)]) throw std::invalid_argument("blocks overlap");
      used[std::size_t(v)] = 1;
    }
}

inline std::string json_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out;
}

inline std::string json_number(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Block conditional independence on exact laws.

struct independence_report {
  std::vector<std::pair<std::string, double>> atoms;  // conditioning atom, residual
  double max_residual = 0;
  double tolerance = 0;
  bool pass = false;
};

// For every positive-mass atom of the conditioning block, compares the joint
// conditional of the two blocks against the product of their conditionals
// over the full product of observed supports. Exact laws only: Monte Carlo
// conditional independence has no power at these residual scales.
inline independence_report conditional_independence_test(
    const trajectory_law& law, std::span<const int> block_a,
    std::span<const int> block_b, std::span<const int> cond,
    double tolerance) {
  if (!(tolerance >= 0)) throw std::invalid_argument("negative tolerance");
  detail::check_disjoint_blocks(law.n, {block_a, block_b, cond});

  struct table {
    double mass = 0;
    std::unordered_map<std::string, double> pa, pb;
    std::unordered_map<std::string, double> pab;
  };
  std::map<std::string, table> cells;
  law.for_each([&](const std::vector<traj>& xs, double w) {
    auto& cell = cells[detail::block_atom(xs, cond)];
    const auto a = detail::block_atom(xs, block_a);
    const auto b = detail::block_atom(xs, block_b);
    cell.mass += w;
    cell.pa[a] += w;
    cell.pb[b] += w;
    cell.pab[a + '&' + b] += w;
  });

  independence_report rep;
  rep.tolerance = tolerance;
  for (auto& [atom, cell] : cells) {
    double res = 0;
    for (const auto& [a, wa] : cell.pa)
      for (const auto& [b, wb] : cell.pb) {
        const auto it = cell.pab.find(a + '&' + b);
        const double joint = it == cell.pab.end() ? 0.0 : it->second;
        res = std::max(res,
                       std::abs(joint / cell.mass -
                                (wa / cell.mass) * (wb / cell.mass)));
      }
    rep.atoms.emplace_back(atom, res);
    rep.max_residual = std::max(rep.max_residual, res);
  }
  rep.pass = rep.max_residual < tolerance;
  return rep;
}

// ---------------------------------------------------------------------------
// Gaussian counterexamples: how much conditioning is needed.

struct counterexample_report {
  // Linear line dynamics, four sites, started at zero: conditioning on the
  // current states of the two-step boundary leaves the ends correlated.
  double current_second_boundary = 0;  // expected -1/2
  // Three sites, standard Gaussian start: conditioning on the full past of
  // the one-step boundary still leaves the ends correlated.
  double past_first_boundary = 0;  // expected -1/3
  // Same four-site system conditioned on the full past of the two-step
  // boundary: the correlation vanishes.
  double past_second_boundary = 0;  // expected 0
  double tolerance = 0;
  bool pass = false;
};

inline counterexample_report gaussian_counterexample_suite(
    double tolerance = 1e-12) {
  counterexample_report rep;
  rep.tolerance = tolerance;

  {
    dmat b(4, 4);
    b << 1, 1, 0, 0, 1, 1, 1, 0, 0, 1, 1, 1, 0, 0, 1, 1;
    // X(1) = xi(1) and X(2) = B xi(1) + xi(2), so the stacked vector
    // (X(2), X(1)) is centered with covariance [[B B^T + I, B], [B^T, I]].
    gaussian_joint j;
    j.mean = dvec::Zero(8);
    j.cov = dmat::Zero(8, 8);
    j.cov.topLeftCorner(4, 4) = b * b.transpose() + dmat::Identity(4, 4);
    j.cov.topRightCorner(4, 4) = b;
    j.cov.bottomLeftCorner(4, 4) = b.transpose();
    j.cov.bottomRightCorner(4, 4) = dmat::Identity(4, 4);

    const std::vector<int> keep{0, 3};
    const std::vector<int> given_now{1, 2};
    const std::vector<double> zeros2(2, 0.0);
    rep.current_second_boundary =
        conditional_gaussian(j, keep, given_now, zeros2).cov(0, 1);

    const std::vector<int> given_past{1, 2, 5, 6};
    const std::vector<double> zeros4(4, 0.0);
    rep.past_second_boundary =
        conditional_gaussian(j, keep, given_past, zeros4).cov(0, 1);
  }
  {
    dmat b(3, 3);
    b << 1, 1, 0, 1, 1, 1, 0, 1, 1;
    // X(0) standard Gaussian and X(1) = B X(0) + xi(1): the stacked vector
    // (X(1), X(0)) has covariance [[B B^T + I, B], [B^T, I]].
    gaussian_joint j;
    j.mean = dvec::Zero(6);
    j.cov = dmat::Zero(6, 6);
    j.cov.topLeftCorner(3, 3) = b * b.transpose() + dmat::Identity(3, 3);
    j.cov.topRightCorner(3, 3) = b;
    j.cov.bottomLeftCorner(3, 3) = b.transpose();
    j.cov.bottomRightCorner(3, 3) = dmat::Identity(3, 3);

    const std::vector<int> keep{0, 2};
    const std::vector<int> given{1, 4};  // X_2(1) and X_2(0)
    const std::vector<double> zeros2(2, 0.0);
    rep.past_first_boundary =
        conditional_gaussian(j, keep, given, zeros2).cov(0, 1);
  }

  rep.pass = std::abs(rep.current_second_boundary + 0.5) < tolerance &&
             std::abs(rep.past_first_boundary + 1.0 / 3.0) < tolerance &&
             std::abs(rep.past_second_boundary) < tolerance;
  return rep;
}

// ---------------------------------------------------------------------------
// Subgraph consistency of conditional laws.

struct consistency_report {
  std::vector<std::pair<std::string, double>> atoms;  // boundary atom, TV
  double max_tv = 0;
};

namespace detail {

struct induced {
  finite_graph graph;
  std::vector<int> to_sub;  // parent vertex -> subgraph vertex or -1
};

inline induced induced_subgraph(const finite_graph& g,
                                std::span<const int> vertices) {
  induced out;
  out.to_sub.assign(std::size_t(g.n), -1);
  for (int v : vertices) {
    g.check_vertex(v);
    if (out.to_sub[std::size_t(v)] != -1)
      throw std::invalid_argument("duplicate subgraph vertex");
    out.to_sub[std::size_t(v)] = 0;
  }
  int next = 0;
  for (int v = 0; v < g.n; ++v)
    if (out.to_sub[std::size_t(v)] != -1) out.to_sub[std::size_t(v)] = next++;
  out.graph = finite_graph::empty(next);
  for (int v = 0; v < g.n; ++v) {
    if (out.to_sub[std::size_t(v)] == -1) continue;
    for (int u : g.adj[std::size_t(v)])
      if (u > v && out.to_sub[std::size_t(u)] != -1)
        out.graph.add_edge(out.to_sub[std::size_t(v)],
                           out.to_sub[std::size_t(u)]);
  }
  return out;
}

// Conditional laws of the target block per boundary atom, normalized.
inline std::map<std::string, std::unordered_map<std::string, double>>
conditional_block_laws(const trajectory_law& law, std::span<const int> target,
                       std::span<const int> boundary) {
  std::map<std::string, std::unordered_map<std::string, double>> cells;
  std::map<std::string, double> mass;
  law.for_each([&](const std::vector<traj>& xs, double w) {
    const auto key = block_atom(xs, boundary);
    cells[key][block_atom(xs, target)] += w;
    mass[key] += w;
  });
  for (auto& [key, cell] : cells)
    for (auto& [atom, w] : cell) w /= mass.at(key);
  return cells;
}

}  // namespace detail

// Computes the conditional law of the target block given the trajectories of
// its two-step boundary, once on the full graph and once on the induced
// subgraph, and reports the per-atom total variation. The identity requires
// the whole two-step closure inside the subgraph; interior vertices then
// keep their full neighborhoods, so the homogeneous rule agrees on them by
// construction, and subgraph-edge vertices may lose neighbors freely.
inline consistency_report consistency_check(
    const finite_graph& g, std::span<const int> sub_vertices,
    std::span<const int> block_a, const kernel_rule& rule,
    std::span<const double> init, int k,
    std::size_t budget = std::size_t(1) << 24) {
  const auto bd = boundary_sets(g, block_a);
  const auto sub = detail::induced_subgraph(g, sub_vertices);
  std::vector<int> closure(block_a.begin(), block_a.end());
  closure.insert(closure.end(), bd.second_boundary.begin(),
                 bd.second_boundary.end());
  for (int v : closure)
    if (sub.to_sub[std::size_t(v)] == -1)
      throw std::invalid_argument(
          "two-step closure of the block leaves the subgraph");

  const auto law_g = propagate_exact_law(g, rule, init, k, budget);
  const auto law_h = propagate_exact_law(sub.graph, rule, init, k, budget);
  std::vector<int> a_h, bd_h;
  for (int v : block_a) a_h.push_back(sub.to_sub[std::size_t(v)]);
  for (int v : bd.second_boundary) bd_h.push_back(sub.to_sub[std::size_t(v)]);

  const auto cells_g =
      detail::conditional_block_laws(law_g, block_a, bd.second_boundary);
  const auto cells_h = detail::conditional_block_laws(law_h, a_h, bd_h);

  consistency_report rep;
  for (const auto& [atom, cell] : cells_g) {
    const auto it = cells_h.find(atom);
    const double tv = it == cells_h.end()
                          ? 1.0
                          : tv_distance(cell, it->second);
    rep.atoms.emplace_back(atom, tv);
    rep.max_tv = std::max(rep.max_tv, tv);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Leaf exchangeability on sampled branching trees.

struct exchange_report {
  int hits = 0;
  double tv = 0;
  double se = 0;
  bool pass = false;
};

// Conditional on the root having exactly n children, the law of the root
// trajectory together with the ordered child subtree summaries is invariant
// under any fixed permutation of the children. The summary of a child is its
// trajectory and the sorted multiset of its children's trajectories, exact
// in law at sampling depth k+2.
inline exchange_report exchangeability_check(
    const offspring_distribution& rho0, const offspring_distribution& rho,
    const rule_base& rule, std::span<const double> init, int k, int n,
    std::span<const int> perm, int m, stream base,
    int workers = default_workers()) {
  if (n < 1) throw std::invalid_argument("need at least one child");
  if (m < 1) throw std::invalid_argument("need at least one replica");
  {
    if (int(perm.size()) != n)
      throw std::invalid_argument("permutation size differs from n");
    std::vector<char> seen(std::size_t(n), 0);
    for (int i : perm) {
      if (i < 0 || i >= n || seen[std::size_t(i)])
        throw std::invalid_argument("not a permutation");
      seen[std::size_t(i)] = 1;
    }
  }

  std::vector<std::string> plain(static_cast<std::size_t>(m)), swapped(static_cast<std::size_t>(m));
  parallel_for(m, workers, [&](std::int64_t r) {
    const stream sub = base.fork(std::uint64_t(r));
    const auto t = sample_gw_tree(rho0, rho, k + 2, sub.fork(domain::graph));
    const auto& roots = t.children[0];
    if (int(roots.size()) != n) return;
    const auto g = finite_graph::from_tree(t);
    const auto reps = simulate(g, rule, init, k, 1, sub, 1);
    const auto& x = reps[0].x;
    std::vector<std::string> summary(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const int c = roots[std::size_t(i)];
      std::vector<traj> grand;
      for (int gc : t.children[std::size_t(c)])
        grand.push_back(x[std::size_t(gc)]);
      summary[std::size_t(i)] =
          x[std::size_t(c)] + '[' + traj_multiset::of(grand).key() + ']';
    }
    auto atom = [&](std::span<const int> order) {
      std::string out = x[0];
      out += '|';
      for (int i = 0; i < n; ++i) {
        if (i) out += ';';
        out += summary[std::size_t(order[std::size_t(i)])];
      }
      return out;
    };
    std::vector<int> id(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) id[std::size_t(i)] = i;
    plain[std::size_t(r)] = atom(id);
    swapped[std::size_t(r)] = atom(perm);
  });

  std::unordered_map<std::string, double> p, q;
  int hits = 0;
  for (int r = 0; r < m; ++r) {
    if (plain[std::size_t(r)].empty()) continue;
    ++hits;
    p[plain[std::size_t(r)]] += 1.0;
    q[swapped[std::size_t(r)]] += 1.0;
  }
  if (hits < 100)
    throw std::invalid_argument(
        "fewer than 100 replicas hit the requested child count");

  exchange_report rep;
  rep.hits = hits;
  const auto pm = normalize_measure(std::move(p));
  const auto qm = normalize_measure(std::move(q));
  rep.tv = tv_distance(pm, qm);
  // Both laws come from the same sample; under the null the per-atom count
  // difference has variance about twice the multinomial one.
  double se = 0;
  for (const auto& [atom, w] : pm.mass) {
    const auto it = qm.mass.find(atom);
    const double avg = (w + (it == qm.mass.end() ? 0.0 : it->second)) / 2;
    se += std::sqrt(avg * (1 - avg) / hits);
  }
  for (const auto& [atom, w] : qm.mass)
    if (!pm.mass.count(atom)) se += std::sqrt(w * (1 - w) / hits);
  rep.se = 0.5 * se * std::sqrt(2.0);
  rep.pass = rep.tv <= 5 * rep.se;
  return rep;
}

// ---------------------------------------------------------------------------
// Mass transport on sampled trees.

struct transport_report {
  double lhs = 0;
  double rhs = 0;
  double se = 0;
  bool pass = false;
};

using transport_fn = std::function<double(
    const rooted_tree&, const std::vector<traj>&, int, int)>;

// Estimates E[sum F(tree, X, root, v)] against E[sum F(tree, X, v, root)]
// with the sum restricted to d(root, v) <= r, where F must vanish beyond
// that radius. The depth cap makes every F input exact in law, so any gap
// is structural, not truncation bias. The gate is on the samplewise
// difference, which is exactly zero for symmetric F.
inline transport_report mass_transport_check(
    const offspring_distribution& rho0, const offspring_distribution& rho,
    const rule_base& rule, std::span<const double> init, int k, int r,
    int depth_cap, const transport_fn& f, int m, stream base,
    int workers = default_workers()) {
  if (r < 0) throw std::invalid_argument("negative radius");
  if (m < 2) throw std::invalid_argument("need at least two replicas");
  if (depth_cap < k + r + 1)
    throw std::invalid_argument("depth cap below k + r + 1");

  std::vector<double> lhs(static_cast<std::size_t>(m)), rhs(static_cast<std::size_t>(m));
  parallel_for(m, workers, [&](std::int64_t rep) {
    const stream sub = base.fork(std::uint64_t(rep));
    const auto t =
        sample_gw_tree(rho0, rho, depth_cap, sub.fork(domain::graph));
    const auto g = finite_graph::from_tree(t);
    const auto states = simulate(g, rule, init, k, 1, sub, 1);
    const auto& x = states[0].x;
    double l = 0, rr = 0;
    for (int v = 0; v < t.vertex_count(); ++v) {
      if (t.depth_of(v) > r) continue;
      l += f(t, x, 0, v);
      rr += f(t, x, v, 0);
    }
    lhs[std::size_t(rep)] = l;
    rhs[std::size_t(rep)] = rr;
  });

  transport_report rep;
  double sum = 0, sq = 0;
  for (int i = 0; i < m; ++i) {
    rep.lhs += lhs[std::size_t(i)];
    rep.rhs += rhs[std::size_t(i)];
    const double d = lhs[std::size_t(i)] - rhs[std::size_t(i)];
    sum += d;
    sq += d * d;
  }
  rep.lhs /= m;
  rep.rhs /= m;
  const double mean = sum / m;
  const double var = std::max(0.0, (sq - m * mean * mean) / (m - 1));
  rep.se = std::sqrt(var / m);
  rep.pass = std::abs(rep.lhs - rep.rhs) <= 5 * rep.se;
  return rep;
}

// ---------------------------------------------------------------------------
// Rerooting identity on sampled trees.

struct rerooting_atom {
  std::string key;  // child trajectory then root trajectory
  double ratio = 0;
  double direct = 0;
  double se = 0;
  int hits_root = 0;
  int hits_child = 0;
  bool pass = false;
};

struct rerooting_report {
  std::vector<rerooting_atom> atoms;
  bool pass = false;
};

using rerooting_fn =
    std::function<double(const traj&, const traj&, const traj_multiset&)>;

// Checks that the size-biased ratio of root-side conditional expectations,
// with weights |N_root| / |N_child|, evaluated at swapped arguments equals
// the child's direct conditional expectation of h over its own neighborhood
// multiset. The two sides use disjoint replica halves so their errors add
// in quadrature; atoms need 100 hits on each side to be gated.
inline rerooting_report rerooting_check(const offspring_distribution& rho0,
                                        const offspring_distribution& rho,
                                        const rule_base& rule,
                                        std::span<const double> init, int k,
                                        const rerooting_fn& h, int m,
                                        stream base,
                                        int workers = default_workers()) {
  if (m < 2) throw std::invalid_argument("need at least two replicas");

  struct ratio_cell {
    double num = 0, den = 0, num2 = 0, den2 = 0, cross = 0;
    int hits = 0;
  };
  struct mean_cell {
    double sum = 0, sq = 0;
    int hits = 0;
  };
  struct sample {
    std::string key;
    double wgt = 0, val = 0;
    bool root_side = false, live = false;
  };

  std::vector<sample> samples(static_cast<std::size_t>(m));
  parallel_for(m, workers, [&](std::int64_t r) {
    const stream sub = base.fork(std::uint64_t(r));
    const auto t = sample_gw_tree(rho0, rho, k + 2, sub.fork(domain::graph));
    const auto& roots = t.children[0];
    if (roots.empty()) return;
    const auto g = finite_graph::from_tree(t);
    const auto states = simulate(g, rule, init, k, 1, sub, 1);
    const auto& x = states[0].x;
    const int child = roots[0];
    auto& s = samples[std::size_t(r)];
    s.live = true;
    s.root_side = (r % 2 == 0);
    if (s.root_side) {
      std::vector<traj> nbrs;
      for (int c : roots) nbrs.push_back(x[std::size_t(c)]);
      s.key = x[0] + '|' + x[std::size_t(child)];
      s.wgt = double(roots.size()) /
              double(1 + t.children[std::size_t(child)].size());
      s.val = h(x[0], x[std::size_t(child)], traj_multiset::of(nbrs));
    } else {
      std::vector<traj> nbrs{x[0]};
      for (int c : t.children[std::size_t(child)])
        nbrs.push_back(x[std::size_t(c)]);
      s.key = x[std::size_t(child)] + '|' + x[0];
      s.val = h(x[std::size_t(child)], x[0], traj_multiset::of(nbrs));
    }
  });

  std::map<std::string, ratio_cell> root_cells;
  std::map<std::string, mean_cell> child_cells;
  for (const auto& s : samples) {
    if (!s.live) continue;
    if (s.root_side) {
      auto& c = root_cells[s.key];
      const double y = s.wgt * s.val;
      c.num += y;
      c.den += s.wgt;
      c.num2 += y * y;
      c.den2 += s.wgt * s.wgt;
      c.cross += y * s.wgt;
      c.hits += 1;
    } else {
      auto& c = child_cells[s.key];
      c.sum += s.val;
      c.sq += s.val * s.val;
      c.hits += 1;
    }
  }

  rerooting_report rep;
  rep.pass = true;
  bool any = false;
  for (const auto& [key, rc] : root_cells) {
    const auto it = child_cells.find(key);
    if (rc.hits < 100 || it == child_cells.end() || it->second.hits < 100)
      continue;
    any = true;
    const auto& cc = it->second;
    rerooting_atom a;
    a.key = key;
    a.hits_root = rc.hits;
    a.hits_child = cc.hits;
    a.ratio = rc.num / rc.den;
    a.direct = cc.sum / cc.hits;
    const double nr = rc.hits;
    const double wbar = rc.den / nr;
    const double vy = std::max(0.0, rc.num2 / nr - (rc.num / nr) * (rc.num / nr));
    const double vw = std::max(0.0, rc.den2 / nr - wbar * wbar);
    const double cyw = rc.cross / nr - (rc.num / nr) * wbar;
    const double vratio = std::max(
        0.0, (vy - 2 * a.ratio * cyw + a.ratio * a.ratio * vw) /
                 (nr * wbar * wbar));
    const double vdirect = std::max(
        0.0, (cc.sq / cc.hits - a.direct * a.direct) / double(cc.hits));
    a.se = std::sqrt(vratio + vdirect);
    a.pass = std::abs(a.ratio - a.direct) <= 5 * a.se;
    rep.pass = rep.pass && a.pass;
    rep.atoms.push_back(std::move(a));
  }
  if (!any)
    throw std::invalid_argument("no conditioning atom reached 100 hits");
  return rep;
}

// ---------------------------------------------------------------------------
// Convergence of finite-graph empirical measures toward the tree laws.

struct graph_model {
  enum class kind { regular, er, configuration };
  kind family = kind::regular;
  int kappa = 0;
  double lambda = 0;
  offspring_distribution degrees;

  static graph_model regular(int kappa) {
    if (kappa < 2) throw std::invalid_argument("degree must be at least 2");
    graph_model m;
    m.family = kind::regular;
    m.kappa = kappa;
    return m;
  }
  static graph_model er(double lambda) {
    if (!(lambda > 0)) throw std::invalid_argument("rate must be positive");
    graph_model m;
    m.family = kind::er;
    m.lambda = lambda;
    return m;
  }
  static graph_model configuration(offspring_distribution rho0) {
    graph_model m;
    m.family = kind::configuration;
    m.degrees = std::move(rho0);
    return m;
  }

  std::string label() const {
    char buf[48];
    switch (family) {
      case kind::regular:
        std::snprintf(buf, sizeof buf, "random-regular(%d)", kappa);
        return buf;
      case kind::er:
        std::snprintf(buf, sizeof buf, "erdos-renyi(%g)", lambda);
        return buf;
      case kind::configuration:
        return "configuration";
    }
    return "";
  }

  finite_graph sample(int n, sequence& rng) const {
    switch (family) {
      case kind::regular:
        return random_regular(n, kappa, rng);
      case kind::er:
        return erdos_renyi(n, lambda, rng);
      case kind::configuration: {
        // Resample whole degree vectors until the half-edge count is even;
        // parity has no influence on any single vertex's law.
        std::vector<int> deg(static_cast<std::size_t>(n));
        for (;;) {
          long total = 0;
          for (int v = 0; v < n; ++v) {
            deg[std::size_t(v)] = degrees.sample(rng.u01());
            total += deg[std::size_t(v)];
          }
          if (total % 2 == 0) break;
        }
        return configuration_model(deg, rng);
      }
    }
    throw std::logic_error("unknown family");
  }

  // The matching tree law of the root trajectory: exact for the fixed-degree
  // family, the size-biased ensemble for the locally tree-like ones.
  empirical_measure limit_root_law(const kernel_rule& rule,
                                   std::span<const double> init, int k,
                                   int replicas, stream base,
                                   int workers = default_workers()) const {
    if (family == kind::regular) {
      auto s = make_regular_lf_exact(rule.space, kappa, init);
      for (int t = 0; t < k; ++t) s = nu_exact_step(s, rule);
      return nu_root_law(s);
    }
    const auto rho0 = family == kind::er
                          ? offspring_distribution::poisson(lambda)
                          : degrees;
    auto s = make_ugw_lf_system(rule.space, rho0, init, replicas, base,
                                workers);
    for (int t = 0; t < k; ++t)
      lf_step_ugw(s, rule, base, key_miss_policy::rematch(2), workers);
    return lf_root_measure(s);
  }
};

struct convergence_row {
  int n = 0;
  double tv = 0;
  double se = 0;
  bool pass = false;  // within slack of the previous row
};

struct convergence_report {
  std::string family;
  int seeds = 0;
  std::vector<convergence_row> rows;
  bool weakly_decreasing = false;
  double final_tv = 0;
};

// For each graph size: average the per-vertex trajectory measure over
// independently sampled graphs and noise, report its distance to the tree
// law with a leave-one-seed-out error bar, and check the sequence decreases
// up to twice the combined error.
inline convergence_report convergence_experiment(
    const graph_model& fam, const kernel_rule& rule,
    std::span<const double> init, std::span<const int> n_grid, int k,
    int seeds, int engine_replicas, stream base,
    int workers = default_workers()) {
  if (n_grid.empty()) throw std::invalid_argument("empty size grid");
  for (std::size_t i = 1; i < n_grid.size(); ++i)
    if (n_grid[i] <= n_grid[i - 1])
      throw std::invalid_argument("size grid must increase");
  if (seeds < 2) throw std::invalid_argument("need at least two seeds");

  const auto limit =
      fam.limit_root_law(rule, init, k, engine_replicas, base.fork(1), workers);

  convergence_report rep;
  rep.family = fam.label();
  rep.seeds = seeds;
  const stream graphs = base.fork(2);
  for (std::size_t i = 0; i < n_grid.size(); ++i) {
    const int n = n_grid[i];
    std::vector<std::unordered_map<std::string, double>> sweep(
        static_cast<std::size_t>(seeds));
    parallel_for(seeds, workers, [&](std::int64_t s) {
      const stream sub = graphs.fork(std::uint64_t(n)).fork(std::uint64_t(s));
      sequence rng(sub.fork(domain::graph));
      const auto g = fam.sample(n, rng);
      const auto states = simulate(g, rule, init, k, 1, sub, 1);
      auto& raw = sweep[std::size_t(s)];
      for (int v = 0; v < g.n; ++v) raw[states[0].x[std::size_t(v)]] += 1.0;
    });
    for (auto& raw : sweep) {
      double tot = 0;
      for (const auto& [a, w] : raw) tot += w;
      for (auto& [a, w] : raw) w /= tot;
    }
    auto mean_without = [&](int skip) {
      std::unordered_map<std::string, double> acc;
      for (int s = 0; s < seeds; ++s) {
        if (s == skip) continue;
        for (const auto& [a, w] : sweep[std::size_t(s)]) acc[a] += w;
      }
      return normalize_measure(std::move(acc));
    };
    convergence_row row;
    row.n = n;
    row.tv = tv_distance(mean_without(-1), limit);
    double jsum = 0, jsq = 0;
    for (int s = 0; s < seeds; ++s) {
      const double t = tv_distance(mean_without(s), limit);
      jsum += t;
      jsq += t * t;
    }
    const double jmean = jsum / seeds;
    row.se = std::sqrt(std::max(
        0.0, (double(seeds) - 1) / double(seeds) * (jsq - seeds * jmean * jmean)));
    if (i == 0) {
      row.pass = true;
    } else {
      const auto& prev = rep.rows.back();
      row.pass =
          row.tv <= prev.tv + 2 * std::sqrt(row.se * row.se + prev.se * prev.se);
    }
    rep.rows.push_back(row);
  }
  rep.weakly_decreasing = true;
  for (const auto& row : rep.rows)
    rep.weakly_decreasing = rep.weakly_decreasing && row.pass;
  rep.final_tv = rep.rows.back().tv;
  return rep;
}

// ---------------------------------------------------------------------------
// Report serialization: flat JSON objects and the per-size CSV table.

inline std::string report_json(const independence_report& r) {
  std::string out = "{\"atoms\":[";
  for (std::size_t i = 0; i < r.atoms.size(); ++i) {
    if (i) out += ',';
    out += "{\"atom\":\"" + detail::json_escape(r.atoms[i].first) +
           "\",\"residual\":" + detail::json_number(r.atoms[i].second) + '}';
  }
  out += "],\"max_residual\":" + detail::json_number(r.max_residual);
  out += ",\"tolerance\":" + detail::json_number(r.tolerance);
  out += std::string(",\"pass\":") + (r.pass ? "true" : "false") + '}';
  return out;
}

inline std::string report_json(const consistency_report& r) {
  std::string out = "{\"atoms\":[";
  for (std::size_t i = 0; i < r.atoms.size(); ++i) {
    if (i) out += ',';
    out += "{\"atom\":\"" + detail::json_escape(r.atoms[i].first) +
           "\",\"tv\":" + detail::json_number(r.atoms[i].second) + '}';
  }
  out += "],\"max_tv\":" + detail::json_number(r.max_tv) + '}';
  return out;
}

inline std::string report_json(const counterexample_report& r) {
  return "{\"current_second_boundary\":" +
         detail::json_number(r.current_second_boundary) +
         ",\"past_first_boundary\":" +
         detail::json_number(r.past_first_boundary) +
         ",\"past_second_boundary\":" +
         detail::json_number(r.past_second_boundary) +
         ",\"tolerance\":" + detail::json_number(r.tolerance) +
         ",\"pass\":" + (r.pass ? "true" : "false") + '}';
}

inline std::string report_json(const exchange_report& r) {
  return "{\"hits\":" + std::to_string(r.hits) +
         ",\"tv\":" + detail::json_number(r.tv) +
         ",\"se\":" + detail::json_number(r.se) +
         ",\"pass\":" + (r.pass ? "true" : "false") + '}';
}

inline std::string report_json(const transport_report& r) {
  return "{\"lhs\":" + detail::json_number(r.lhs) +
         ",\"rhs\":" + detail::json_number(r.rhs) +
         ",\"se\":" + detail::json_number(r.se) +
         ",\"pass\":" + (r.pass ? "true" : "false") + '}';
}

inline std::string report_json(const rerooting_report& r) {
  std::string out = "{\"atoms\":[";
  for (std::size_t i = 0; i < r.atoms.size(); ++i) {
    const auto& a = r.atoms[i];
    if (i) out += ',';
    out += "{\"atom\":\"" + detail::json_escape(a.key) +
           "\",\"ratio\":" + detail::json_number(a.ratio) +
           ",\"direct\":" + detail::json_number(a.direct) +
           ",\"se\":" + detail::json_number(a.se) +
           ",\"hits_root\":" + std::to_string(a.hits_root) +
           ",\"hits_child\":" + std::to_string(a.hits_child) +
           ",\"pass\":" + (a.pass ? "true" : "false") + '}';
  }
  out += std::string("],\"pass\":") + (r.pass ? "true" : "false") + '}';
  return out;
}

inline std::string report_json(const convergence_report& r) {
  std::string out = "{\"family\":\"" + detail::json_escape(r.family) +
                    "\",\"seeds\":" + std::to_string(r.seeds) + ",\"rows\":[";
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    const auto& row = r.rows[i];
    if (i) out += ',';
    out += "{\"n\":" + std::to_string(row.n) +
           ",\"tv\":" + detail::json_number(row.tv) +
           ",\"se\":" + detail::json_number(row.se) +
           ",\"pass\":" + (row.pass ? "true" : "false") + '}';
  }
  out += "],\"weakly_decreasing\":";
  out += r.weakly_decreasing ? "true" : "false";
  out += ",\"final_tv\":" + detail::json_number(r.final_tv) + '}';
  return out;
}

inline std::string convergence_csv(const convergence_report& r) {
  std::string out = "family,n,seeds,tv,se,pass\n";
  for (const auto& row : r.rows) {
    out += r.family + ',' + std::to_string(row.n) + ',' +
           std::to_string(r.seeds) + ',' + detail::json_number(row.tv) + ',' +
           detail::json_number(row.se) + ',' + (row.pass ? "true" : "false") +
           '\n';
  }
  return out;
}

}  // namespace pca
