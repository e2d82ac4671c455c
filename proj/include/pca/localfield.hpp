#pragma once

// Local-field engines. A replica is a root neighborhood, not a whole tree:
// whatever the synchronous update needs beyond the stored slice is drawn from
// a conditional kernel, estimated over the replica population for the Monte
// Carlo engines and computed in closed form for the exact and Gaussian ones.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pca/core.hpp"
#include "pca/engine.hpp"
#include "pca/gaussian.hpp"
#include "pca/graphs.hpp"
#include "pca/prng.hpp"

namespace pca {

// ---------------------------------------------------------------------------
// Conditional kernel table. A class key pairs the trajectory of the vertex
// whose unseen neighborhood is wanted (the center) with the trajectory of its
// one known neighbor. Options hold the payloads seen for that key, weighted
// and normalized within the class.

struct conditional_kernel {
  struct option {
    std::vector<traj> payload;  // sorted. Regular engines store the absent
                                // siblings; tree engines the full multiset.
    double weight = 0;
  };
  struct kernel_class {
    traj center, neighbor;
    std::vector<option> options;  // population first-appearance order
    std::vector<double> cum;      // running weight sums; cum.back() == 1
    double datapoints = 0;        // raw class mass before normalization
  };
  std::unordered_map<std::string, kernel_class> classes;

  static std::string key_text(const traj& center, const traj& neighbor) {
    std::string k = center;
    k += '|';
    k += neighbor;
    return k;
  }
  const kernel_class* find(const traj& center, const traj& neighbor) const {
    auto it = classes.find(key_text(center, neighbor));
    return it == classes.end() ? nullptr : &it->second;
  }
};

// Inverse-CDF pick over the class options from one uniform draw. Every
// option has positive weight, so the rounding gap falls back to the last.
inline const std::vector<traj>& sample_kernel_class(
    const conditional_kernel::kernel_class& cls, double u) {
  auto it = std::upper_bound(cls.cum.begin(), cls.cum.end(), u);
  auto i = std::size_t(it - cls.cum.begin());
  if (i >= cls.options.size()) i = cls.options.size() - 1;
  return cls.options[i].payload;
}

// What to do when a conditioning key has no population mass: abort (the
// default), or rematch on the trailing `window` symbols of both key parts.
// Rematches are always counted on the system and logged once per step.
struct key_miss_policy {
  bool windowed = false;
  int window = 0;

  static key_miss_policy strict() { return {}; }
  static key_miss_policy rematch(int window) {
    if (window < 1) throw std::invalid_argument("window must be >= 1");
    return {true, window};
  }
};

namespace detail {

inline traj trailing(const traj& x, int w) {
  return x.size() <= std::size_t(w) ? x : x.substr(x.size() - std::size_t(w));
}

struct kernel_builder {
  conditional_kernel out;
  // class key -> payload key -> option position, for deduplication
  std::unordered_map<std::string, std::unordered_map<std::string, std::size_t>>
      index;

  void add(const traj& center, const traj& neighbor,
           const std::vector<traj>& payload, double weight) {
    auto key = conditional_kernel::key_text(center, neighbor);
    auto& cls = out.classes[key];
    if (cls.options.empty()) {
      cls.center = center;
      cls.neighbor = neighbor;
    }
    std::string pkey;
    for (std::size_t i = 0; i < payload.size(); ++i) {
      if (i) pkey += ';';
      pkey += payload[i];
    }
    auto& pos = index[key];
    auto it = pos.find(pkey);
    if (it == pos.end()) {
      pos.emplace(std::move(pkey), cls.options.size());
      cls.options.push_back({payload, weight});
    } else {
      cls.options[it->second].weight += weight;
    }
    cls.datapoints += weight;
  }

  conditional_kernel finish() {
    for (auto& [key, cls] : out.classes) {
      if (!(cls.datapoints > 0))
        throw std::logic_error("kernel class '" + key + "' has zero mass");
      cls.cum.reserve(cls.options.size());
      double run = 0;
      for (auto& o : cls.options) {
        o.weight /= cls.datapoints;
        run += o.weight;
        cls.cum.push_back(run);
      }
      cls.cum.back() = 1.0;  // close the CDF against float drift
    }
    return std::move(out);
  }
};

// '|' and ';' are structural in atoms and class keys.
inline void check_lf_space(const state_space& sp) {
  if (sp.real()) throw std::invalid_argument("finite alphabet required");
  if (sp.symbols.find('|') != std::string::npos ||
      sp.symbols.find(';') != std::string::npos)
    throw std::invalid_argument("alphabet symbols '|' and ';' are reserved");
}

inline void check_lf_init(const state_space& sp, std::span<const double> init) {
  if (int(init.size()) != sp.size())
    throw std::invalid_argument("initial pmf does not match the alphabet");
  check_pmf(init);
  if (sp.cemetery >= 0 && init[std::size_t(sp.cemetery)] != 0)
    throw std::invalid_argument("initial pmf puts mass on the cemetery");
}

inline void check_lf_rule(const rule_base& rule, const state_space& sp) {
  if (rule.space.symbols != sp.symbols || rule.space.cemetery != sp.cemetery)
    throw std::invalid_argument("rule alphabet differs from the system");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Exact regular-tree backend: the joint trajectory law of a root and its
// kappa neighbors, advanced in closed form. The unseen block around each
// neighbor is integrated out against the kernel read off the law itself.

struct regular_lf_exact {
  int kappa = 0;
  trajectory_law nu;  // joint law over (root, neighbors 1..kappa)

  int time() const { return nu.horizon; }
};

inline regular_lf_exact make_regular_lf_exact(const state_space& sp, int kappa,
                                              std::span<const double> init) {
  if (kappa < 2) throw std::invalid_argument("branching degree must be >= 2");
  detail::check_lf_space(sp);
  detail::check_lf_init(sp, init);
  regular_lf_exact s;
  s.kappa = kappa;
  s.nu.space = sp;
  s.nu.n = kappa + 1;
  s.nu.horizon = 0;
  s.nu.bits = std::max(1, int(std::bit_width(unsigned(sp.size() - 1))));
  if (s.nu.bits * (kappa + 1) > 64)
    throw budget_error("packed neighborhood needs " +
                       std::to_string(s.nu.bits * (kappa + 1)) +
                       " bits; at most 64 are supported");
  auto rec = [&](auto&& self, int v, std::uint64_t cfg, double w) -> void {
    if (v == kappa + 1) {
      s.nu.mass.emplace(cfg, w);
      return;
    }
    for (int sym = 0; sym < sp.size(); ++sym) {
      if (init[std::size_t(sym)] == 0) continue;
      self(self, v + 1, cfg | (std::uint64_t(sym) << s.nu.offset(v, 0)),
           w * init[std::size_t(sym)]);
    }
  };
  rec(rec, 0, 0, 1.0);
  return s;
}

// Kernel read off the current law: every support configuration contributes,
// per designated neighbor, the root's remaining neighbors keyed by
// (root, designated neighbor). The first key slot always names the vertex
// whose unseen block the payload stands for; pair-flip exchangeability of
// the law then guarantees every (mover, root) lookup key has support.
inline conditional_kernel exact_kernel_regular(const regular_lf_exact& s) {
  detail::kernel_builder b;
  std::vector<traj> others;
  s.nu.for_each([&](const std::vector<traj>& xs, double w) {
    for (std::size_t v = 1; v < xs.size(); ++v) {
      others.clear();
      for (std::size_t u = 1; u < xs.size(); ++u)
        if (u != v) others.push_back(xs[u]);
      std::sort(others.begin(), others.end());
      b.add(xs[0], xs[v], others, w);
    }
  });
  return b.finish();
}

// One closed-form step. The root updates against its stored neighbors; each
// neighbor's next-state row is the kernel average over phantom blocks, which
// is exact because blocks around distinct neighbors are conditionally
// independent given the stored slice.
inline regular_lf_exact nu_exact_step(const regular_lf_exact& s,
                                      const kernel_rule& rule,
                                      std::size_t budget = std::size_t(1)
                                                           << 24) {
  detail::check_lf_rule(rule, s.nu.space);
  const int k = s.nu.horizon;
  const int a = s.nu.space.size();
  const int n = s.nu.n;

  regular_lf_exact out;
  out.kappa = s.kappa;
  out.nu.space = s.nu.space;
  out.nu.n = n;
  out.nu.horizon = k + 1;
  out.nu.bits = s.nu.bits;
  if (out.nu.bits * n * (k + 2) > 64)
    throw budget_error("packed neighborhood needs " +
                       std::to_string(out.nu.bits * n * (k + 2)) +
                       " bits; at most 64 are supported");

  const auto kern = exact_kernel_regular(s);

  auto check_row = [&](std::span<const double> row) {
    check_pmf(row);
    if (rule.space.cemetery >= 0 &&
        row[std::size_t(rule.space.cemetery)] != 0)
      throw std::domain_error("kernel assigns mass to the cemetery");
  };

  // Per-class next-state row: the kernel average of update rows with the
  // known neighbor prepended to each payload.
  std::unordered_map<std::string, std::vector<double>> qrow;
  qrow.reserve(kern.classes.size());
  {
    std::vector<double> row(static_cast<std::size_t>(a));
    std::vector<traj> nbrs;
    for (const auto& [key, cls] : kern.classes) {
      std::vector<double> q(static_cast<std::size_t>(a), 0.0);
      for (const auto& o : cls.options) {
        nbrs.clear();
        nbrs.push_back(cls.neighbor);
        nbrs.insert(nbrs.end(), o.payload.begin(), o.payload.end());
        rule.probs(k, cls.center, nbrs, row);
        check_row(row);
        for (int i = 0; i < a; ++i)
          q[std::size_t(i)] += o.weight * row[std::size_t(i)];
      }
      qrow.emplace(key, std::move(q));
    }
  }

  std::vector<double> root_row(static_cast<std::size_t>(a));
  std::vector<const std::vector<double>*> q(static_cast<std::size_t>(n),
                                            nullptr);
  for (const auto& [cfg, w] : s.nu.mass) {
    const auto xs = s.nu.decode(cfg);
    // repack under the grown horizon layout
    std::uint64_t grown = 0;
    for (int v = 0; v < n; ++v)
      for (int t = 0; t <= k; ++t)
        grown |= std::uint64_t(s.nu.space.index_of(
                     xs[std::size_t(v)][std::size_t(t)]))
                 << out.nu.offset(v, t);
    {
      std::vector<traj> nbrs(xs.begin() + 1, xs.end());
      rule.probs(k, xs[0], nbrs, root_row);
      check_row(root_row);
    }
    for (int v = 1; v < n; ++v) {
      auto it =
          qrow.find(conditional_kernel::key_text(xs[std::size_t(v)], xs[0]));
      if (it == qrow.end())
        throw std::logic_error("support configuration conditions on the "
                               "unseen key ('" +
                               xs[std::size_t(v)] + "' | '" + xs[0] +
                               "') at time " + std::to_string(k));
      q[std::size_t(v)] = &it->second;
    }
    auto rec = [&](auto&& self, int v, std::uint64_t c, double pw) -> void {
      if (v == n) {
        out.nu.mass[c] += pw;
        if (out.nu.mass.size() > budget)
          throw budget_error("law support exceeds the budget of " +
                             std::to_string(budget) + " entries");
        return;
      }
      const std::vector<double>& pr = v == 0 ? root_row : *q[std::size_t(v)];
      for (int sym = 0; sym < a; ++sym) {
        const double p = pr[std::size_t(sym)];
        if (p == 0) continue;
        self(self, v + 1, c | (std::uint64_t(sym) << out.nu.offset(v, k + 1)),
             pw * p);
      }
    };
    rec(rec, 0, grown, w);
  }
  if (std::abs(out.nu.total() - 1.0) > 1e-10)
    throw std::logic_error("neighborhood law mass drifted from 1");
  return out;
}

inline empirical_measure nu_root_law(const regular_lf_exact& s) {
  return normalize_measure(
      s.nu.project([](const std::vector<traj>& xs) { return xs[0]; }));
}

// Joint law of (root, designated neighbor v). Exchangeability makes the
// choice of v immaterial.
inline empirical_measure nu_pair_law(const regular_lf_exact& s, int v) {
  if (v < 1 || v > s.kappa)
    throw std::invalid_argument("neighbor index out of range");
  return normalize_measure(s.nu.project([v](const std::vector<traj>& xs) {
    std::string key = xs[0];
    key += '|';
    key += xs[std::size_t(v)];
    return key;
  }));
}

inline empirical_measure nu_neighborhood_law(const regular_lf_exact& s) {
  return normalize_measure(s.nu.project([](const std::vector<traj>& xs) {
    return neighborhood_atom(xs[0],
                             std::span<const traj>(xs).subspan(1));
  }));
}

// ---------------------------------------------------------------------------
// Monte Carlo regular-tree ensemble: replicas of (root, kappa neighbors).

struct regular_lf_ensemble {
  int kappa = 0;
  state_space space;
  std::vector<std::vector<traj>> reps;  // replica -> root, neighbors 1..kappa
  std::int64_t rematches = 0;           // windowed key rematches so far

  int time() const { return int(reps.at(0).at(0).size()) - 1; }
  int replicas() const { return int(reps.size()); }
};

inline regular_lf_ensemble make_regular_lf_ensemble(
    const state_space& sp, int kappa, std::span<const double> init, int m,
    stream base, int workers = default_workers()) {
  if (kappa < 2) throw std::invalid_argument("branching degree must be >= 2");
  if (m < 1) throw std::invalid_argument("need at least one replica");
  detail::check_lf_space(sp);
  detail::check_lf_init(sp, init);
  regular_lf_ensemble s;
  s.kappa = kappa;
  s.space = sp;
  s.reps.assign(std::size_t(m),
                std::vector<traj>(std::size_t(kappa) + 1));
  const stream init_s = base.fork(domain::init);
  parallel_for(std::size_t(m), workers, [&](std::size_t r) {
    for (int v = 0; v <= kappa; ++v)
      s.reps[r][std::size_t(v)] = traj(
          1, sp.symbols[std::size_t(sample_pmf(
                 init, init_s.u01(std::uint64_t(r), std::uint64_t(v))))]);
  });
  return s;
}

namespace detail {

// Every replica contributes kappa datapoints, one per designated neighbor:
// the root's remaining neighbors keyed by (root, designated neighbor), so
// exchangeable pairs share statistics. Replica order is kept so weight sums
// are bit-reproducible whatever the worker count.
template <class KeyFn>
void regular_datapoints(const regular_lf_ensemble& s, kernel_builder& b,
                        KeyFn&& kf) {
  std::vector<traj> others;
  for (const auto& rep : s.reps)
    for (int v = 1; v <= s.kappa; ++v) {
      others.clear();
      for (int u = 1; u <= s.kappa; ++u)
        if (u != v) others.push_back(rep[std::size_t(u)]);
      std::sort(others.begin(), others.end());
      b.add(kf(rep[0]), kf(rep[std::size_t(v)]), others, 1.0);
    }
}

inline const traj& full_key(const traj& t) { return t; }

}  // namespace detail

inline conditional_kernel estimate_kernel_regular(
    const regular_lf_ensemble& s) {
  if (s.replicas() < 2)
    throw std::invalid_argument(
        "kernel estimation needs at least two replicas");
  detail::kernel_builder b;
  detail::regular_datapoints(s, b, detail::full_key);
  return b.finish();
}

namespace detail {

// Shared per-replica miss bookkeeping for the Monte Carlo steps. Updates run
// in parallel against a frozen kernel, so a miss is recorded, the surviving
// buffers are discarded, and the lowest-replica diagnostic is thrown after
// the join; the system is only mutated once every replica went through.
struct step_log {
  std::vector<std::string> miss;
  std::vector<std::int64_t> rematched;

  explicit step_log(std::size_t m) : miss(m), rematched(m, 0) {}

  void record_miss(std::size_t r, const traj& center, const traj& neighbor,
                   int k) {
    miss[r] = "no population mass for conditioning key ('" + center +
              "' | '" + neighbor + "') at time " + std::to_string(k) +
              " (replica " + std::to_string(r) + ")";
  }
  void raise_first() const {
    for (const auto& m : miss)
      if (!m.empty()) throw key_miss_error(m);
  }
  std::int64_t rematch_total() const {
    std::int64_t t = 0;
    for (auto c : rematched) t += c;
    return t;
  }
};

inline const conditional_kernel::kernel_class* lookup_class(
    const conditional_kernel& kern, const conditional_kernel& wkern,
    const key_miss_policy& policy, const traj& center, const traj& neighbor,
    std::int64_t& rematched) {
  if (const auto* cls = kern.find(center, neighbor)) return cls;
  if (!policy.windowed) return nullptr;
  const auto* cls = wkern.find(trailing(center, policy.window),
                               trailing(neighbor, policy.window));
  if (cls) ++rematched;
  return cls;
}

inline void log_rematches(const char* op, std::int64_t total, int window,
                          int k, std::int64_t& counter) {
  if (total <= 0) return;
  counter += total;
  std::cerr << op << ": " << total
            << " phantom draw(s) rematched on trailing " << window
            << "-symbol keys at time " << k << "\n";
}

}  // namespace detail

// One synchronous step. The kernel is estimated from the frozen population,
// then replicas update in parallel against that snapshot: the root against
// its stored neighbors, each neighbor against the root plus a phantom block
// drawn from the kernel keyed (neighbor, root), the neighbor playing the
// center whose unseen block is wanted.
inline void lf_step_regular(regular_lf_ensemble& s, const rule_base& rule,
                            stream base,
                            key_miss_policy policy = key_miss_policy::strict(),
                            int workers = default_workers()) {
  detail::check_lf_rule(rule, s.space);
  const int k = s.time();
  const auto kern = estimate_kernel_regular(s);
  conditional_kernel wkern;
  if (policy.windowed) {
    detail::kernel_builder b;
    detail::regular_datapoints(
        s, b, [&](const traj& t) { return detail::trailing(t, policy.window); });
    wkern = b.finish();
  }

  const std::size_t m = s.reps.size();
  const stream upd_s = base.fork(domain::update);
  const stream ph_s = base.fork(domain::phantom);
  std::vector<std::string> nexts(m);
  detail::step_log log(m);
  parallel_for(m, workers, [&](std::size_t r) {
    const auto& rep = s.reps[r];
    std::string nx(std::size_t(s.kappa) + 1, '?');
    {
      std::vector<traj> nbrs(rep.begin() + 1, rep.end());
      nx[0] = next_state(rule, k, rep[0], nbrs,
                         upd_s.u01(std::uint64_t(r), 0, std::uint64_t(k + 1)));
    }
    std::vector<traj> nbrs;
    for (int v = 1; v <= s.kappa; ++v) {
      const auto* cls =
          detail::lookup_class(kern, wkern, policy, rep[std::size_t(v)],
                               rep[0], log.rematched[r]);
      if (!cls) {
        log.record_miss(r, rep[std::size_t(v)], rep[0], k);
        return;
      }
      const auto& block = sample_kernel_class(
          *cls, ph_s.u01(std::uint64_t(r), std::uint64_t(v),
                         std::uint64_t(k + 1), 0));
      nbrs.clear();
      nbrs.push_back(rep[0]);
      nbrs.insert(nbrs.end(), block.begin(), block.end());
      nx[std::size_t(v)] =
          next_state(rule, k, rep[std::size_t(v)], nbrs,
                     upd_s.u01(std::uint64_t(r), std::uint64_t(v),
                               std::uint64_t(k + 1)));
    }
    nexts[r] = std::move(nx);
  });
  log.raise_first();
  detail::log_rematches("lf_step_regular", log.rematch_total(), policy.window,
                        k, s.rematches);
  for (std::size_t r = 0; r < m; ++r)
    for (int v = 0; v <= s.kappa; ++v)
      s.reps[r][std::size_t(v)].push_back(nexts[r][std::size_t(v)]);
}

inline empirical_measure lf_neighborhood_measure(
    const regular_lf_ensemble& s) {
  std::unordered_map<std::string, double> raw;
  for (const auto& rep : s.reps)
    raw[neighborhood_atom(rep[0],
                          std::span<const traj>(rep).subspan(1))] += 1.0;
  return normalize_measure(std::move(raw));
}

inline empirical_measure lf_root_measure(const regular_lf_ensemble& s) {
  std::unordered_map<std::string, double> raw;
  for (const auto& rep : s.reps) raw[rep[0]] += 1.0;
  return normalize_measure(std::move(raw));
}

// ---------------------------------------------------------------------------
// Branching-tree ensemble: each replica stores a root, its children, and
// their children. The slice never changes shape; vertices outside it were
// never born and stay outside for all time.

struct gw_lf_replica {
  std::vector<int> parent;                 // -1 at the root
  std::vector<std::vector<int>> children;  // ids in creation order
  std::vector<traj> x;

  int n() const { return int(x.size()); }
  int gen1() const { return int(children.at(0).size()); }
};

struct gw_lf_system {
  state_space space;
  std::vector<gw_lf_replica> reps;
  std::int64_t rematches = 0;

  int time() const { return int(reps.at(0).x.at(0).size()) - 1; }
  int replicas() const { return int(reps.size()); }
};

inline gw_lf_system make_gw_lf_system(const state_space& sp,
                                      const offspring_distribution& rho0,
                                      const offspring_distribution& rho,
                                      std::span<const double> init, int m,
                                      stream base,
                                      int workers = default_workers()) {
  if (m < 1) throw std::invalid_argument("need at least one replica");
  detail::check_lf_space(sp);
  detail::check_lf_init(sp, init);
  gw_lf_system s;
  s.space = sp;
  s.reps.resize(std::size_t(m));
  const stream off_s = base.fork(domain::offspring);
  const stream init_s = base.fork(domain::init);
  parallel_for(std::size_t(m), workers, [&](std::size_t r) {
    auto& rep = s.reps[r];
    const int n1 = rho0.sample(off_s.u01(std::uint64_t(r), 0));
    rep.parent.assign(1, -1);
    rep.children.assign(1, {});
    for (int i = 1; i <= n1; ++i) {
      rep.parent.push_back(0);
      rep.children[0].push_back(i);
      rep.children.push_back({});
    }
    for (int i = 1; i <= n1; ++i) {
      const int ci = rho.sample(off_s.u01(std::uint64_t(r), std::uint64_t(i)));
      for (int j = 0; j < ci; ++j) {
        const int id = int(rep.parent.size());
        rep.parent.push_back(i);
        rep.children[std::size_t(i)].push_back(id);
        rep.children.push_back({});
      }
    }
    rep.x.resize(rep.parent.size());
    for (std::size_t v = 0; v < rep.x.size(); ++v)
      rep.x[v] = traj(
          1, sp.symbols[std::size_t(sample_pmf(
                 init, init_s.u01(std::uint64_t(r), std::uint64_t(v))))]);
  });
  return s;
}

namespace detail {

// One datapoint per first-generation vertex: its full neighbor multiset
// (parent included) keyed by (itself, the root).
template <class KeyFn>
void gw_datapoints(const gw_lf_system& s, kernel_builder& b, KeyFn&& kf) {
  std::vector<traj> payload;
  for (const auto& rep : s.reps)
    for (int v : rep.children[0]) {
      payload.clear();
      payload.push_back(rep.x[0]);
      for (int c : rep.children[std::size_t(v)])
        payload.push_back(rep.x[std::size_t(c)]);
      std::sort(payload.begin(), payload.end());
      b.add(kf(rep.x[std::size_t(v)]), kf(rep.x[0]), payload, 1.0);
    }
}

}  // namespace detail

inline conditional_kernel estimate_kernel_gw(const gw_lf_system& s) {
  if (s.replicas() < 1) throw std::invalid_argument("empty ensemble");
  detail::kernel_builder b;
  detail::gw_datapoints(s, b, detail::full_key);
  return b.finish();
}

// One synchronous step. The root and its children update against their true
// stored neighborhoods; each second-generation vertex updates against a
// phantom multiset alone, drawn conditioned on (itself, its parent). A
// replica without second-generation vertices draws no phantoms.
inline void lf_step_gw(gw_lf_system& s, const rule_base& rule, stream base,
                       key_miss_policy policy = key_miss_policy::strict(),
                       int workers = default_workers()) {
  detail::check_lf_rule(rule, s.space);
  const int k = s.time();
  conditional_kernel kern, wkern;
  {
    detail::kernel_builder b;
    detail::gw_datapoints(s, b, detail::full_key);
    kern = b.finish();
  }
  if (policy.windowed) {
    detail::kernel_builder b;
    detail::gw_datapoints(
        s, b, [&](const traj& t) { return detail::trailing(t, policy.window); });
    wkern = b.finish();
  }

  const std::size_t m = s.reps.size();
  const stream upd_s = base.fork(domain::update);
  const stream ph_s = base.fork(domain::phantom);
  std::vector<std::string> nexts(m);
  detail::step_log log(m);
  parallel_for(m, workers, [&](std::size_t r) {
    const auto& rep = s.reps[r];
    std::string nx(rep.x.size(), '?');
    std::vector<traj> nbrs;
    for (int v = 0; v < rep.n(); ++v) {
      nbrs.clear();
      if (v == 0) {
        for (int c : rep.children[0]) nbrs.push_back(rep.x[std::size_t(c)]);
      } else if (rep.parent[std::size_t(v)] == 0) {
        nbrs.push_back(rep.x[0]);
        for (int c : rep.children[std::size_t(v)])
          nbrs.push_back(rep.x[std::size_t(c)]);
      } else {
        const traj& up = rep.x[std::size_t(rep.parent[std::size_t(v)])];
        const auto* cls =
            detail::lookup_class(kern, wkern, policy, rep.x[std::size_t(v)],
                                 up, log.rematched[r]);
        if (!cls) {
          log.record_miss(r, rep.x[std::size_t(v)], up, k);
          return;
        }
        const auto& block = sample_kernel_class(
            *cls, ph_s.u01(std::uint64_t(r), std::uint64_t(v),
                           std::uint64_t(k + 1), 0));
        nbrs.assign(block.begin(), block.end());
      }
      nx[std::size_t(v)] =
          next_state(rule, k, rep.x[std::size_t(v)], nbrs,
                     upd_s.u01(std::uint64_t(r), std::uint64_t(v),
                               std::uint64_t(k + 1)));
    }
    nexts[r] = std::move(nx);
  });
  log.raise_first();
  detail::log_rematches("lf_step_gw", log.rematch_total(), policy.window, k,
                        s.rematches);
  for (std::size_t r = 0; r < m; ++r) {
    auto& rep = s.reps[r];
    for (std::size_t v = 0; v < rep.x.size(); ++v)
      rep.x[v].push_back(nexts[r][v]);
  }
}

inline empirical_measure lf_neighborhood_measure(const gw_lf_system& s) {
  std::unordered_map<std::string, double> raw;
  std::vector<traj> nbrs;
  for (const auto& rep : s.reps) {
    nbrs.clear();
    for (int c : rep.children[0]) nbrs.push_back(rep.x[std::size_t(c)]);
    raw[neighborhood_atom(rep.x[0], nbrs)] += 1.0;
  }
  return normalize_measure(std::move(raw));
}

inline empirical_measure lf_root_measure(const gw_lf_system& s) {
  std::unordered_map<std::string, double> raw;
  for (const auto& rep : s.reps) raw[rep.x[0]] += 1.0;
  return normalize_measure(std::move(raw));
}

// ---------------------------------------------------------------------------
// Size-biased one-generation ensemble: each replica stores the root, its
// neighbors, and a running neighbor-count estimate used as the importance
// normalizer during kernel estimation.

struct ugw_lf_replica {
  std::vector<traj> x;  // root first, then its neighbors
  int nhat = 0;         // 0 exactly when the root is isolated

  int gen1() const { return int(x.size()) - 1; }
};

struct ugw_lf_system {
  state_space space;
  std::vector<ugw_lf_replica> reps;
  std::int64_t rematches = 0;

  int time() const { return int(reps.at(0).x.at(0).size()) - 1; }
  int replicas() const { return int(reps.size()); }
};

// The root degree follows rho0; the count estimate starts as the degree of a
// uniformly chosen neighbor, whose offspring law is the size-biased shift of
// rho0. Sampling one extra generation and keeping only that count matches
// initializing the joint law and discarding the unneeded slice.
inline ugw_lf_system make_ugw_lf_system(const state_space& sp,
                                        const offspring_distribution& rho0,
                                        std::span<const double> init, int m,
                                        stream base,
                                        int workers = default_workers()) {
  if (m < 1) throw std::invalid_argument("need at least one replica");
  detail::check_lf_space(sp);
  detail::check_lf_init(sp, init);
  const auto rho_hat = unimodular_offspring(rho0);
  ugw_lf_system s;
  s.space = sp;
  s.reps.resize(std::size_t(m));
  const stream off_s = base.fork(domain::offspring);
  const stream init_s = base.fork(domain::init);
  parallel_for(std::size_t(m), workers, [&](std::size_t r) {
    auto& rep = s.reps[r];
    const int n1 = rho0.sample(off_s.u01(std::uint64_t(r), 0));
    rep.nhat =
        n1 == 0 ? 0 : 1 + rho_hat.sample(off_s.u01(std::uint64_t(r), 1));
    rep.x.resize(std::size_t(n1) + 1);
    for (std::size_t v = 0; v < rep.x.size(); ++v)
      rep.x[v] = traj(
          1, sp.symbols[std::size_t(sample_pmf(
                 init, init_s.u01(std::uint64_t(r), std::uint64_t(v))))]);
  });
  return s;
}

namespace detail {

// One datapoint per (replica, designated neighbor): the full neighbor
// multiset of the root keyed by (root, neighbor). Rotating the designated
// slot over all neighbors already supplies the degree factor of the
// size-biased reweighting, so each datapoint carries only the reciprocal
// count estimate. Isolated roots contribute nothing.
template <class KeyFn>
void ugw_datapoints(const ugw_lf_system& s, kernel_builder& b, KeyFn&& kf) {
  std::vector<traj> payload;
  for (const auto& rep : s.reps) {
    const int n1 = rep.gen1();
    if (n1 == 0) continue;
    if (rep.nhat < 1)
      throw std::logic_error(
          "neighbor-count estimate vanished on a populated replica");
    const double w = 1.0 / double(rep.nhat);
    payload.assign(rep.x.begin() + 1, rep.x.end());
    std::sort(payload.begin(), payload.end());
    for (int v = 1; v <= n1; ++v)
      b.add(kf(rep.x[0]), kf(rep.x[std::size_t(v)]), payload, w);
  }
}

}  // namespace detail

inline conditional_kernel estimate_kernel_ugw(const ugw_lf_system& s) {
  if (s.replicas() < 1) throw std::invalid_argument("empty ensemble");
  detail::kernel_builder b;
  detail::ugw_datapoints(s, b, detail::full_key);
  return b.finish();
}

// One synchronous step. The root updates against its stored neighbors; each
// neighbor updates against a phantom multiset alone, drawn conditioned on
// (itself, the root). The count estimate becomes the size of the first
// neighbor's drawn multiset, which is never empty since every recorded
// multiset contains at least the designated neighbor. Isolated roots update
// against the empty neighborhood forever.
inline void lf_step_ugw(ugw_lf_system& s, const rule_base& rule, stream base,
                        key_miss_policy policy = key_miss_policy::strict(),
                        int workers = default_workers()) {
  detail::check_lf_rule(rule, s.space);
  const int k = s.time();
  conditional_kernel kern, wkern;
  {
    detail::kernel_builder b;
    detail::ugw_datapoints(s, b, detail::full_key);
    kern = b.finish();
  }
  if (policy.windowed) {
    detail::kernel_builder b;
    detail::ugw_datapoints(
        s, b, [&](const traj& t) { return detail::trailing(t, policy.window); });
    wkern = b.finish();
  }

  const std::size_t m = s.reps.size();
  const stream upd_s = base.fork(domain::update);
  const stream ph_s = base.fork(domain::phantom);
  std::vector<std::string> nexts(m);
  std::vector<int> nhats(m, 0);
  detail::step_log log(m);
  parallel_for(m, workers, [&](std::size_t r) {
    const auto& rep = s.reps[r];
    const int n1 = rep.gen1();
    std::string nx(rep.x.size(), '?');
    std::vector<traj> nbrs(rep.x.begin() + 1, rep.x.end());
    nx[0] = next_state(rule, k, rep.x[0], nbrs,
                       upd_s.u01(std::uint64_t(r), 0, std::uint64_t(k + 1)));
    for (int v = 1; v <= n1; ++v) {
      const auto* cls =
          detail::lookup_class(kern, wkern, policy, rep.x[std::size_t(v)],
                               rep.x[0], log.rematched[r]);
      if (!cls) {
        log.record_miss(r, rep.x[std::size_t(v)], rep.x[0], k);
        return;
      }
      const auto& block = sample_kernel_class(
          *cls, ph_s.u01(std::uint64_t(r), std::uint64_t(v),
                         std::uint64_t(k + 1), 0));
      if (v == 1) nhats[r] = int(block.size());
      nx[std::size_t(v)] =
          next_state(rule, k, rep.x[std::size_t(v)], block,
                     upd_s.u01(std::uint64_t(r), std::uint64_t(v),
                               std::uint64_t(k + 1)));
    }
    nexts[r] = std::move(nx);
  });
  log.raise_first();
  detail::log_rematches("lf_step_ugw", log.rematch_total(), policy.window, k,
                        s.rematches);
  for (std::size_t r = 0; r < m; ++r) {
    auto& rep = s.reps[r];
    for (std::size_t v = 0; v < rep.x.size(); ++v)
      rep.x[v].push_back(nexts[r][v]);
    if (rep.gen1() > 0) rep.nhat = nhats[r];
  }
}

inline empirical_measure lf_neighborhood_measure(const ugw_lf_system& s) {
  std::unordered_map<std::string, double> raw;
  for (const auto& rep : s.reps)
    raw[neighborhood_atom(rep.x[0],
                          std::span<const traj>(rep.x).subspan(1))] += 1.0;
  return normalize_measure(std::move(raw));
}

inline empirical_measure lf_root_measure(const ugw_lf_system& s) {
  std::unordered_map<std::string, double> raw;
  for (const auto& rep : s.reps) raw[rep.x[0]] += 1.0;
  return normalize_measure(std::move(raw));
}

// ---------------------------------------------------------------------------
// Gaussian regular-tree ensemble for affine dynamics. Phantoms come from the
// exact conditional implied by the analytic covariance state, which advances
// alongside the population, so no kernel is ever estimated.

struct regular_lf_gaussian {
  double a = 0, b = 0, c = 0;
  cov_state cov;                         // shared analytic state
  std::vector<std::vector<rtraj>> reps;  // replica -> root, neighbors

  int kappa() const { return cov.kappa; }
  int time() const { return int(reps.at(0).at(0).size()) - 1; }
  int replicas() const { return int(reps.size()); }
};

inline regular_lf_gaussian make_regular_lf_gaussian(
    int kappa, double a, double b, double c, int m, stream base,
    int workers = default_workers()) {
  if (kappa < 2) throw std::invalid_argument("branching degree must be >= 2");
  if (m < 1) throw std::invalid_argument("need at least one replica");
  regular_lf_gaussian s;
  s.a = a;
  s.b = b;
  s.c = c;
  s.cov = make_cov_state(kappa, a, b, c);
  s.reps.assign(std::size_t(m), std::vector<rtraj>(std::size_t(kappa) + 1));
  const stream init_s = base.fork(domain::init);
  parallel_for(std::size_t(m), workers, [&](std::size_t r) {
    for (int v = 0; v <= kappa; ++v)
      s.reps[r][std::size_t(v)].push_back(
          init_s.gauss(std::uint64_t(r), std::uint64_t(v)));
  });
  return s;
}

// Closed-form conditional of one phantom block. All kappa-1 phantoms of a
// mover share the same regression onto the stacked (mover, root) trajectory
// pair, so their joint conditional covariance is equicorrelated and one
// Cholesky factor serves every replica at a given horizon.
struct phantom_conditional {
  dvec coeff;         // regression onto the centered stacked pair
  double mean_k = 0;  // marginal mean at the current horizon
  dmat cov;           // conditional covariance of the block's latest states
  dmat chol;          // its lower Cholesky factor
};

inline phantom_conditional make_phantom_conditional(const cov_state& s) {
  const int n = s.k + 1;
  dvec cross(2 * n);
  cross.head(n) = s.c1;  // phantom against the mover: distance 1
  cross.tail(n) = s.c2;  // phantom against the mover's root: distance 2
  phantom_conditional out;
  out.coeff = upsilon_inv_blocked(s) * cross;
  out.mean_k = s.m.back();
  const double q = cross.dot(out.coeff);
  const int width = s.kappa - 1;
  out.cov = dmat::Constant(width, width, s.a2 - q);
  out.cov.diagonal().array() = s.a0 - q;
  Eigen::LLT<dmat> llt(out.cov);
  if (llt.info() != Eigen::Success)
    throw singular_error(
        "phantom conditional covariance is not positive definite at horizon " +
        std::to_string(s.k));
  out.chol = llt.matrixL();
  return out;
}

// One synchronous step of the Gaussian ensemble.
inline void lf_step_gaussian(regular_lf_gaussian& s, double a, double b,
                             double c, stream base,
                             int workers = default_workers()) {
  if (a != s.a || b != s.b || c != s.c)
    throw std::invalid_argument("update coefficients differ from the system");
  const int k = s.time();
  if (s.cov.k != k)
    throw std::logic_error("analytic state horizon drifted from the ensemble");
  const auto pc = make_phantom_conditional(s.cov);
  const int kp = s.kappa();
  const int n = k + 1;
  const std::size_t m = s.reps.size();
  const stream upd_s = base.fork(domain::update);
  const stream ph_s = base.fork(domain::phantom);
  const affine_rule rule{a, b, c};
  std::vector<std::vector<double>> nexts(
      m, std::vector<double>(std::size_t(kp) + 1));
  parallel_for(m, workers, [&](std::size_t r) {
    const auto& rep = s.reps[r];
    nexts[r][0] = apply_transition(
        rule, rep[0], std::span<const rtraj>(rep).subspan(1),
        upd_s.gauss(std::uint64_t(r), 0, std::uint64_t(k + 1)));
    dvec stacked(2 * n), g(kp - 1), z(kp - 1);
    for (int v = 1; v <= kp; ++v) {
      for (int t = 0; t <= k; ++t) {
        stacked[t] = rep[std::size_t(v)][std::size_t(t)] - s.cov.m[std::size_t(t)];
        stacked[n + t] = rep[0][std::size_t(t)] - s.cov.m[std::size_t(t)];
      }
      const double mu = pc.mean_k + pc.coeff.dot(stacked);
      for (int j = 0; j < kp - 1; ++j)
        g[j] = ph_s.gauss(std::uint64_t(r), std::uint64_t(v),
                          std::uint64_t(k + 1), std::uint64_t(j));
      z.noalias() = pc.chol * g;
      double sum = rep[0].back();
      for (int j = 0; j < kp - 1; ++j) sum += mu + z[j];
      nexts[r][std::size_t(v)] =
          a * rep[std::size_t(v)].back() + b * sum + c +
          upd_s.gauss(std::uint64_t(r), std::uint64_t(v),
                      std::uint64_t(k + 1));
    }
  });
  for (std::size_t r = 0; r < m; ++r)
    for (int v = 0; v <= kp; ++v)
      s.reps[r][std::size_t(v)].push_back(nexts[r][std::size_t(v)]);
  s.cov = cov_step(s.cov);
}

// Sample mean and variance of the root's latest state.
inline std::pair<double, double> lf_root_moments(
    const regular_lf_gaussian& s) {
  double sum = 0, sq = 0;
  for (const auto& rep : s.reps) {
    const double x = rep[0].back();
    sum += x;
    sq += x * x;
  }
  const double m = double(s.replicas());
  const double mean = sum / m;
  return {mean, sq / m - mean * mean};
}

}  // namespace pca
