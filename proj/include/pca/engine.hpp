#pragma once
// Synchronous dynamics on a fixed finite graph: Monte Carlo simulation with
// replica-keyed noise, exact joint-law propagation for small systems,
// empirical measures, and the truncated-tree oracle for root-neighborhood
// laws.

#include <bit>
#include <cstdio>
#include <functional>
#include <unordered_map>

#include "pca/core.hpp"
#include "pca/graphs.hpp"

namespace pca {

// Per-vertex trajectories up to a common time. `absent` marks vertices pinned
// at the cemetery (used when a tree lives inside a larger vertex set); empty
// means every vertex is live. The graph must outlive the state.
struct system_state {
  const finite_graph* graph = nullptr;
  std::vector<traj> x;
  std::vector<char> absent;

  int time() const { return int(x.at(0).size()) - 1; }
  bool is_absent(int v) const {
    return !absent.empty() && absent[std::size_t(v)] != 0;
  }
  bool operator==(const system_state& o) const {
    return x == o.x && absent == o.absent;
  }
};

// Real-state counterpart for affine dynamics.
struct real_system_state {
  const finite_graph* graph = nullptr;
  std::vector<rtraj> x;
  int time() const { return int(x.at(0).size()) - 1; }
  bool operator==(const real_system_state& o) const { return x == o.x; }
};

namespace detail {
inline void check_state(const system_state& s, const rule_base& rule) {
  if (!s.graph || int(s.x.size()) != s.graph->n)
    throw std::invalid_argument("state does not cover the graph");
  if (!s.absent.empty() && int(s.absent.size()) != s.graph->n)
    throw std::invalid_argument("absence flags do not cover the graph");
  const std::size_t len = s.x.at(0).size();
  for (int v = 0; v < s.graph->n; ++v) {
    const traj& t = s.x[std::size_t(v)];
    if (t.size() != len)
      throw std::invalid_argument("trajectory lengths differ");
    if (is_cemetery_traj(rule.space, t) != s.is_absent(v))
      throw std::invalid_argument(
          "cemetery trajectories must match the absence flags");
  }
}
}  // namespace detail

// One synchronous step: every live vertex reads the frozen time-k snapshot
// (neighbors restricted to live vertices) and consumes u[v]; absent vertices
// stay at the cemetery.
inline system_state step_synchronous(const system_state& s,
                                     const rule_base& rule,
                                     std::span<const double> u) {
  detail::check_state(s, rule);
  if (int(u.size()) != s.graph->n)
    throw std::invalid_argument("one noise draw per vertex required");
  const int k = s.time();
  std::string next(std::size_t(s.graph->n), '\0');
  std::vector<traj> nbrs;
  for (int v = 0; v < s.graph->n; ++v) {
    if (s.is_absent(v)) {
      next[std::size_t(v)] = rule.space.cemetery_symbol();
      continue;
    }
    nbrs.clear();
    for (int w : s.graph->adj[std::size_t(v)])
      if (!s.is_absent(w)) nbrs.push_back(s.x[std::size_t(w)]);
    next[std::size_t(v)] = next_state(rule, k, s.x[std::size_t(v)], nbrs,
                                      u[std::size_t(v)]);
  }
  system_state out = s;
  for (int v = 0; v < s.graph->n; ++v)
    out.x[std::size_t(v)].push_back(next[std::size_t(v)]);
  return out;
}

inline real_system_state step_synchronous(const real_system_state& s,
                                          const affine_rule& rule,
                                          std::span<const double> xi) {
  if (!s.graph || int(s.x.size()) != s.graph->n)
    throw std::invalid_argument("state does not cover the graph");
  if (int(xi.size()) != s.graph->n)
    throw std::invalid_argument("one noise draw per vertex required");
  real_system_state out = s;
  for (int v = 0; v < s.graph->n; ++v) {
    double sum = 0;
    for (int w : s.graph->adj[std::size_t(v)]) sum += s.x[std::size_t(w)].back();
    out.x[std::size_t(v)].push_back(rule.a * s.x[std::size_t(v)].back() +
                                    rule.b * sum + rule.c + xi[std::size_t(v)]);
  }
  return out;
}

// M replicas of the horizon-k run with i.i.d. per-vertex initial states drawn
// from init. Noise is keyed by (replica, vertex[, time]), so the output is a
// pure function of the master stream and is identical for any worker count.
inline std::vector<system_state> simulate(const finite_graph& g,
                                          const rule_base& rule,
                                          std::span<const double> init, int k,
                                          int m, stream base,
                                          int workers = default_workers()) {
  if (k < 0) throw std::invalid_argument("negative horizon");
  if (m < 1) throw std::invalid_argument("need at least one replica");
  if (int(init.size()) != rule.space.size())
    throw std::invalid_argument("initial pmf does not match the alphabet");
  check_pmf(init);
  if (rule.space.cemetery >= 0 && init[std::size_t(rule.space.cemetery)] != 0)
    throw std::invalid_argument("initial pmf puts mass on the cemetery");
  const stream init_s = base.fork(domain::init);
  const stream upd_s = base.fork(domain::update);
  std::vector<system_state> out(static_cast<std::size_t>(m));
  parallel_for(std::size_t(m), workers, [&](std::size_t r) {
    system_state st;
    st.graph = &g;
    st.x.assign(std::size_t(g.n), traj());
    for (int v = 0; v < g.n; ++v)
      st.x[std::size_t(v)].push_back(
          rule.space.symbols[std::size_t(sample_pmf(
              init, init_s.u01(std::uint64_t(r), std::uint64_t(v))))]);
    std::vector<double> u(std::size_t(g.n));
    for (int t = 0; t < k; ++t) {
      for (int v = 0; v < g.n; ++v)
        u[std::size_t(v)] = upd_s.u01(std::uint64_t(r), std::uint64_t(v),
                                      std::uint64_t(t) + 1);
      st = step_synchronous(st, rule, u);
    }
    out[r] = std::move(st);
  });
  return out;
}

// Real-state analogue with N(mean0, sd0²) initials and standard normal noise.
inline std::vector<real_system_state> simulate_real(
    const finite_graph& g, const affine_rule& rule, double mean0, double sd0,
    int k, int m, stream base, int workers = default_workers()) {
  if (k < 0) throw std::invalid_argument("negative horizon");
  if (m < 1) throw std::invalid_argument("need at least one replica");
  if (!(sd0 >= 0)) throw std::invalid_argument("negative initial sd");
  const stream init_s = base.fork(domain::init);
  const stream upd_s = base.fork(domain::update);
  std::vector<real_system_state> out(static_cast<std::size_t>(m));
  parallel_for(std::size_t(m), workers, [&](std::size_t r) {
    real_system_state st;
    st.graph = &g;
    st.x.assign(std::size_t(g.n), rtraj());
    for (int v = 0; v < g.n; ++v)
      st.x[std::size_t(v)].push_back(
          mean0 + sd0 * init_s.gauss(std::uint64_t(r), std::uint64_t(v)));
    std::vector<double> xi(std::size_t(g.n));
    for (int t = 0; t < k; ++t) {
      for (int v = 0; v < g.n; ++v)
        xi[std::size_t(v)] = upd_s.gauss(std::uint64_t(r), std::uint64_t(v),
                                         std::uint64_t(t) + 1);
      st = step_synchronous(st, rule, xi);
    }
    out[r] = std::move(st);
  });
  return out;
}

// Exact joint law of all per-vertex trajectories, stored sparsely over packed
// configurations (one symbol index per (vertex, time) slot).
struct trajectory_law {
  state_space space = state_space::binary();
  int n = 0;
  int horizon = 0;
  int bits = 1;
  std::unordered_map<std::uint64_t, double> mass;

  int offset(int v, int t) const { return (v * (horizon + 1) + t) * bits; }
  std::uint64_t symbol_mask() const { return (std::uint64_t(1) << bits) - 1; }

  char symbol(std::uint64_t cfg, int v, int t) const {
    return space.symbols[std::size_t((cfg >> offset(v, t)) & symbol_mask())];
  }

  std::vector<traj> decode(std::uint64_t cfg, int upto = -1) const {
    const int last = upto < 0 ? horizon : upto;
    std::vector<traj> xs(static_cast<std::size_t>(n));
    for (int v = 0; v < n; ++v) {
      xs[std::size_t(v)].reserve(std::size_t(last) + 1);
      for (int t = 0; t <= last; ++t)
        xs[std::size_t(v)].push_back(symbol(cfg, v, t));
    }
    return xs;
  }

  std::uint64_t encode(std::span<const traj> xs) const {
    if (int(xs.size()) != n) throw std::invalid_argument("vertex count mismatch");
    std::uint64_t cfg = 0;
    for (int v = 0; v < n; ++v) {
      if (int(xs[std::size_t(v)].size()) != horizon + 1)
        throw std::invalid_argument("trajectory length mismatch");
      for (int t = 0; t <= horizon; ++t)
        cfg |= std::uint64_t(space.index_of(xs[std::size_t(v)][std::size_t(t)]))
               << offset(v, t);
    }
    return cfg;
  }

  template <class F>
  void for_each(F&& f) const {
    for (const auto& [cfg, w] : mass) f(decode(cfg), w);
  }

  // Projected law: key(config trajectories) -> accumulated probability.
  template <class K>
  std::unordered_map<std::string, double> project(K&& key) const {
    std::unordered_map<std::string, double> out;
    for (const auto& [cfg, w] : mass) out[key(decode(cfg))] += w;
    return out;
  }

  double total() const {
    double s = 0;
    for (const auto& [cfg, w] : mass) s += w;
    return s;
  }
};

inline trajectory_law propagate_exact_law(const finite_graph& g,
                                          const kernel_rule& rule,
                                          std::span<const double> init, int k,
                                          std::size_t budget = std::size_t(1)
                                                               << 24) {
  if (k < 0) throw std::invalid_argument("negative horizon");
  if (int(init.size()) != rule.space.size())
    throw std::invalid_argument("initial pmf does not match the alphabet");
  check_pmf(init);
  const int a = rule.space.size();
  trajectory_law law;
  law.space = rule.space;
  law.n = g.n;
  law.horizon = k;
  law.bits = std::max(1, int(std::bit_width(unsigned(a - 1))));
  if (law.bits * g.n * (k + 1) > 64)
    throw budget_error("packed configuration needs " +
                       std::to_string(law.bits * g.n * (k + 1)) +
                       " bits; at most 64 are supported");

  auto guard = [&](std::size_t size) {
    if (size > budget)
      throw budget_error("law support exceeds the budget of " +
                         std::to_string(budget) + " entries");
  };

  // Time 0: product of per-vertex initial masses over nonzero entries.
  std::unordered_map<std::uint64_t, double> cur;
  {
    std::vector<int> pick(std::size_t(g.n), 0);
    auto rec = [&](auto&& self, int v, std::uint64_t cfg, double w) -> void {
      if (v == g.n) {
        cur.emplace(cfg, w);
        guard(cur.size());
        return;
      }
      for (int s = 0; s < a; ++s) {
        if (init[std::size_t(s)] == 0) continue;
        self(self, v + 1, cfg | (std::uint64_t(s) << law.offset(v, 0)),
             w * init[std::size_t(s)]);
      }
    };
    rec(rec, 0, 0, 1.0);
  }

  std::vector<double> row(static_cast<std::size_t>(a));
  std::vector<std::vector<double>> pv(
      static_cast<std::size_t>(g.n), std::vector<double>(static_cast<std::size_t>(a)));
  for (int t = 0; t < k; ++t) {
    std::unordered_map<std::uint64_t, double> next;
    for (const auto& [cfg, w] : cur) {
      const auto xs = law.decode(cfg, t);
      for (int v = 0; v < g.n; ++v) {
        std::vector<traj> nbrs;
        for (int u : g.adj[std::size_t(v)]) nbrs.push_back(xs[std::size_t(u)]);
        rule.probs(t, xs[std::size_t(v)], nbrs, row);
        check_pmf(row);
        if (rule.space.cemetery >= 0 && row[std::size_t(rule.space.cemetery)] != 0)
          throw std::domain_error("kernel assigns mass to the cemetery");
        pv[std::size_t(v)] = row;
      }
      auto rec = [&](auto&& self, int v, std::uint64_t c, double pw) -> void {
        if (v == g.n) {
          next[c] += pw;
          guard(next.size());
          return;
        }
        for (int s = 0; s < a; ++s) {
          const double p = pv[std::size_t(v)][std::size_t(s)];
          if (p == 0) continue;
          self(self, v + 1, c | (std::uint64_t(s) << law.offset(v, t + 1)),
               pw * p);
        }
      };
      rec(rec, 0, cfg, w);
    }
    cur = std::move(next);
  }
  law.mass = std::move(cur);
  if (std::abs(law.total() - 1.0) > 1e-10)
    throw std::logic_error("exact law mass drifted from 1");
  return law;
}

// Normalized weighted multiset of atom strings.
struct empirical_measure {
  std::unordered_map<std::string, double> mass;

  double total() const {
    double s = 0;
    for (const auto& [k, w] : mass) s += w;
    return s;
  }
};

inline empirical_measure normalize_measure(
    std::unordered_map<std::string, double> raw) {
  double s = 0;
  for (const auto& [k, w] : raw) {
    if (!(w >= 0)) throw std::invalid_argument("negative atom weight");
    s += w;
  }
  if (!(s > 0)) throw std::invalid_argument("empty measure");
  for (auto& [k, w] : raw) w /= s;
  return empirical_measure{std::move(raw)};
}

// One atom per replica.
template <class F>
empirical_measure measure_over_replicas(const std::vector<system_state>& reps,
                                        F&& proj) {
  if (reps.empty()) throw std::invalid_argument("no replicas");
  std::unordered_map<std::string, double> raw;
  for (const auto& r : reps) raw[proj(r)] += 1.0;
  return normalize_measure(std::move(raw));
}

// One atom per vertex of a single replica (the vertex-sweep mode).
template <class F>
empirical_measure measure_vertex_sweep(const system_state& rep, F&& proj) {
  if (!rep.graph || rep.graph->n == 0) throw std::invalid_argument("no vertices");
  std::unordered_map<std::string, double> raw;
  for (int v = 0; v < rep.graph->n; ++v) raw[proj(rep, v)] += 1.0;
  return normalize_measure(std::move(raw));
}

// Total variation distance between normalized atom measures.
inline double tv_distance(const std::unordered_map<std::string, double>& a,
                          const std::unordered_map<std::string, double>& b) {
  double s = 0;
  for (const auto& [k, w] : a) {
    auto it = b.find(k);
    s += std::abs(w - (it == b.end() ? 0.0 : it->second));
  }
  for (const auto& [k, w] : b)
    if (!a.count(k)) s += w;
  return s / 2;
}

inline double tv_distance(const empirical_measure& a,
                          const empirical_measure& b) {
  return tv_distance(a.mass, b.mass);
}

// Root-neighborhood atom of a tree-shaped state: own trajectory plus the
// unordered child trajectories.
inline std::string root_neighborhood_atom(const system_state& s,
                                          const rooted_tree& t) {
  std::vector<traj> kids;
  for (int c : t.children[0]) kids.push_back(s.x[std::size_t(c)]);
  return neighborhood_atom(s.x[0], kids);
}

// Empirical law of (root trajectory, unordered neighbor trajectories) at
// horizon k from M replicas on the truncated tree. Exact in law whenever the
// tree depth is at least k+1: influence from the cut boundary needs k+1 steps
// to reach the root's neighbors.
inline empirical_measure truncated_tree_oracle(const rooted_tree& t,
                                               const rule_base& rule,
                                               std::span<const double> init,
                                               int k, int m, stream base,
                                               int workers = default_workers()) {
  if (t.depth() < k + 1)
    throw std::invalid_argument("tree depth " + std::to_string(t.depth()) +
                                " is below the required " +
                                std::to_string(k + 1));
  const auto g = finite_graph::from_tree(t);
  auto reps = simulate(g, rule, init, k, m, base, workers);
  return measure_over_replicas(
      reps, [&](const system_state& s) { return root_neighborhood_atom(s, t); });
}

inline empirical_measure truncated_tree_oracle(int kappa, const rule_base& rule,
                                               std::span<const double> init,
                                               int k, int m, stream base,
                                               int workers = default_workers()) {
  const auto t = truncated_regular_tree(kappa, k + 1);
  return truncated_tree_oracle(t, rule, init, k, m, base, workers);
}

// Branching-process analogue: every replica simulates on its own sampled
// tree, truncated one level beyond the exactness depth. The tree draw and
// the run share a per-replica substream, so replicas are independent and the
// result does not depend on the worker count.
inline empirical_measure truncated_tree_oracle(
    const offspring_distribution& rho0, const offspring_distribution& rho,
    const rule_base& rule, std::span<const double> init, int k, int m,
    stream base, int workers = default_workers()) {
  if (k < 0) throw std::invalid_argument("negative horizon");
  if (m < 1) throw std::invalid_argument("need at least one replica");
  std::vector<std::string> atoms(static_cast<std::size_t>(m));
  parallel_for(m, workers, [&](std::int64_t r) {
    const stream sub = base.fork(std::uint64_t(r));
    const auto t = sample_gw_tree(rho0, rho, k + 2, sub.fork(domain::graph));
    const auto g = finite_graph::from_tree(t);
    const auto reps = simulate(g, rule, init, k, 1, sub, 1);
    atoms[std::size_t(r)] = root_neighborhood_atom(reps[0], t);
  });
  std::unordered_map<std::string, double> raw;
  for (const auto& a : atoms) raw[a] += 1.0;
  return normalize_measure(std::move(raw));
}

// Root-trajectory marginal of a measure over neighborhood atoms.
inline empirical_measure root_marginal(const empirical_measure& m) {
  std::unordered_map<std::string, double> raw;
  for (const auto& [atom, w] : m.mass)
    raw[atom.substr(0, atom.find('|'))] += w;
  return normalize_measure(std::move(raw));
}

// Exact root-neighborhood law at the middle vertex of an odd path. Given the
// trajectories of a vertex and both its neighbors, the update factors of the
// two sides never share a variable, so the joint trajectory law is a chain in
// per-vertex trajectory variables and can be summed out vertex by vertex over
// pair tables. Cost O(n · |S|^{3(k+1)}) where exhaustive support enumeration
// would need |S|^{n(k+1)}.
inline empirical_measure exact_path_neighborhood_law(
    int n, const kernel_rule& rule, std::span<const double> init, int k,
    std::size_t budget = std::size_t(1) << 24) {
  if (n < 3 || n % 2 == 0)
    throw std::invalid_argument("need an odd path with n >= 3");
  if (k < 0) throw std::invalid_argument("negative horizon");
  if (int(init.size()) != rule.space.size())
    throw std::invalid_argument("initial pmf does not match the alphabet");
  check_pmf(init);
  if (rule.space.cemetery >= 0 && init[std::size_t(rule.space.cemetery)] != 0)
    throw std::invalid_argument("initial pmf puts mass on the cemetery");
  const int a = rule.space.size();
  std::size_t traj_count = 1;
  for (int t = 0; t <= k; ++t) {
    traj_count *= std::size_t(a);
    if (traj_count > budget / std::max<std::size_t>(traj_count * traj_count, 1))
      throw budget_error("pair-table elimination needs " +
                         std::to_string(traj_count) +
                         "^3 cells and exceeds the budget");
  }
  const std::size_t tc = traj_count;

  // Trajectory codes are base-|S| integers, time-major.
  std::vector<traj> tab(tc);
  for (std::size_t code = 0; code < tc; ++code) {
    traj t(std::size_t(k) + 1, '?');
    std::size_t rest = code;
    for (int s = 0; s <= k; ++s) {
      t[std::size_t(s)] = rule.space.symbols[rest % std::size_t(a)];
      rest /= std::size_t(a);
    }
    tab[code] = std::move(t);
  }
  std::vector<std::vector<traj>> pref(tc);
  for (std::size_t code = 0; code < tc; ++code) {
    pref[code].reserve(std::size_t(k) + 1);
    for (int s = 0; s <= k; ++s) pref[code].push_back(tab[code].substr(0, std::size_t(s) + 1));
  }

  std::vector<double> row(static_cast<std::size_t>(a));
  auto step_prob = [&](int t, std::size_t c, std::span<const traj> nbrs) {
    rule.probs(t, pref[c][std::size_t(t)], nbrs, row);
    check_pmf(row);
    if (rule.space.cemetery >= 0 && row[std::size_t(rule.space.cemetery)] != 0)
      throw std::domain_error("kernel assigns mass to the cemetery");
    return row[std::size_t(rule.space.index_of(tab[c][std::size_t(t) + 1]))];
  };
  // Per-vertex factor: initial mass of the own trajectory times the product
  // of its update probabilities given the neighbor trajectories.
  auto interior = [&](std::size_t l, std::size_t c, std::size_t r) {
    double w = init[c % std::size_t(a)];
    std::vector<traj> nb{traj(), traj()};
    for (int t = 0; w > 0 && t < k; ++t) {
      nb[0] = pref[l][std::size_t(t)];
      nb[1] = pref[r][std::size_t(t)];
      w *= step_prob(t, c, nb);
    }
    return w;
  };
  std::vector<double> g_end(tc * tc);
  {
    std::vector<traj> nb{traj()};
    for (std::size_t c = 0; c < tc; ++c)
      for (std::size_t o = 0; o < tc; ++o) {
        double w = init[c % std::size_t(a)];
        for (int t = 0; w > 0 && t < k; ++t) {
          nb[0] = pref[o][std::size_t(t)];
          w *= step_prob(t, c, nb);
        }
        g_end[c * tc + o] = w;
      }
  }
  std::vector<double> g_int(tc * tc * tc);
  for (std::size_t l = 0; l < tc; ++l)
    for (std::size_t c = 0; c < tc; ++c)
      for (std::size_t r = 0; r < tc; ++r)
        g_int[(l * tc + c) * tc + r] = interior(l, c, r);

  const int mid = (n - 1) / 2;
  // fwd(prev, cur) sums the factors of vertices 0..v-1 over their variables.
  std::vector<double> fwd(tc * tc), nxt(tc * tc);
  for (std::size_t y0 = 0; y0 < tc; ++y0)
    for (std::size_t y1 = 0; y1 < tc; ++y1) fwd[y0 * tc + y1] = g_end[y0 * tc + y1];
  for (int v = 1; v < mid; ++v) {
    std::fill(nxt.begin(), nxt.end(), 0.0);
    for (std::size_t p = 0; p < tc; ++p)
      for (std::size_t c = 0; c < tc; ++c) {
        const double base = fwd[p * tc + c];
        if (base == 0) continue;
        const double* g = &g_int[(p * tc + c) * tc];
        for (std::size_t r = 0; r < tc; ++r) nxt[c * tc + r] += base * g[r];
      }
    std::swap(fwd, nxt);
  }
  std::vector<double> bwd(tc * tc);
  for (std::size_t c = 0; c < tc; ++c)
    for (std::size_t o = 0; o < tc; ++o) bwd[c * tc + o] = g_end[o * tc + c];
  for (int v = n - 2; v > mid; --v) {
    std::fill(nxt.begin(), nxt.end(), 0.0);
    for (std::size_t c = 0; c < tc; ++c)
      for (std::size_t x = 0; x < tc; ++x) {
        double s = 0;
        const double* g = &g_int[(c * tc + x) * tc];
        const double* b = &bwd[x * tc];
        for (std::size_t r = 0; r < tc; ++r) s += g[r] * b[r];
        nxt[c * tc + x] = s;
      }
    std::swap(bwd, nxt);
  }

  std::unordered_map<std::string, double> raw;
  double total = 0;
  std::vector<traj> pair(2);
  for (std::size_t l = 0; l < tc; ++l)
    for (std::size_t c = 0; c < tc; ++c) {
      const double base = fwd[l * tc + c];
      if (base == 0) continue;
      for (std::size_t r = 0; r < tc; ++r) {
        const double w = base * g_int[(l * tc + c) * tc + r] * bwd[c * tc + r];
        if (w == 0) continue;
        pair[0] = tab[l];
        pair[1] = tab[r];
        raw[neighborhood_atom(tab[c], pair)] += w;
        total += w;
      }
    }
  if (std::abs(total - 1.0) > 1e-8)
    throw std::logic_error("path elimination mass drifted from 1");
  return normalize_measure(std::move(raw));
}

// CSV with columns replica,vertex,time,state.
inline std::string trajectory_csv(const std::vector<system_state>& reps) {
  std::string out = "replica,vertex,time,state\n";
  for (std::size_t r = 0; r < reps.size(); ++r) {
    const auto& st = reps[r];
    for (std::size_t v = 0; v < st.x.size(); ++v)
      for (std::size_t t = 0; t < st.x[v].size(); ++t) {
        out += std::to_string(r);
        out += ',';
        out += std::to_string(v);
        out += ',';
        out += std::to_string(t);
        out += ',';
        out += st.x[v][t];
        out += '\n';
      }
  }
  return out;
}

inline std::string trajectory_csv(const std::vector<real_system_state>& reps) {
  std::string out = "replica,vertex,time,state\n";
  char buf[40];
  for (std::size_t r = 0; r < reps.size(); ++r) {
    const auto& st = reps[r];
    for (std::size_t v = 0; v < st.x.size(); ++v)
      for (std::size_t t = 0; t < st.x[v].size(); ++t) {
        std::snprintf(buf, sizeof buf, "%zu,%zu,%zu,%.17g\n", r, v, t,
                      st.x[v][t]);
        out += buf;
      }
  }
  return out;
}

// CSV with columns atom,weight, lines sorted by atom.
inline std::string measure_csv(const empirical_measure& m) {
  std::vector<std::pair<std::string, double>> rows(m.mass.begin(),
                                                   m.mass.end());
  std::sort(rows.begin(), rows.end());
  std::string out = "atom,weight\n";
  char buf[40];
  for (const auto& [k, w] : rows) {
    out += k;
    std::snprintf(buf, sizeof buf, ",%.17g\n", w);
    out += buf;
  }
  return out;
}

}  // namespace pca
