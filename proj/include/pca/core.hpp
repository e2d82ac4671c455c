#pragma once
// State spaces, trajectories, unordered trajectory multisets, and transition
// rules shared by every engine. Finite states are single printable symbols;
// a trajectory is the string of symbols at times 0..k.

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "pca/prng.hpp"

namespace pca {

// Thrown when an ensemble engine or kernel table is queried with a
// conditioning key that has no population mass (strict key-miss policy).
struct key_miss_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown when an exact-law computation would exceed its support budget.
struct budget_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown on malformed text input (rule files, edge lists, label lists);
// messages carry "name:line:col" where that is known.
struct parse_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Finite alphabet of distinct single-character symbols, optionally with one
// designated cemetery symbol, or the real-scalar line (empty alphabet).
struct state_space {
  std::string symbols;  // empty means real-scalar
  int cemetery = -1;    // index into symbols, or -1

  bool real() const { return symbols.empty(); }
  int size() const { return int(symbols.size()); }

  int index_of(char s) const {
    auto p = symbols.find(s);
    if (p == std::string::npos)
      throw std::invalid_argument(std::string("unknown symbol '") + s + "'");
    return int(p);
  }
  char cemetery_symbol() const { return symbols[std::size_t(cemetery)]; }
  bool is_cemetery(char s) const {
    return cemetery >= 0 && s == cemetery_symbol();
  }

  static state_space finite(std::string alphabet, int cemetery_index = -1) {
    if (alphabet.empty()) throw std::invalid_argument("empty alphabet");
    for (std::size_t i = 0; i < alphabet.size(); ++i)
      for (std::size_t j = i + 1; j < alphabet.size(); ++j)
        if (alphabet[i] == alphabet[j])
          throw std::invalid_argument("duplicate alphabet symbol");
    if (cemetery_index >= int(alphabet.size()))
      throw std::invalid_argument("cemetery index out of range");
    return state_space{std::move(alphabet), cemetery_index};
  }
  static state_space binary() { return finite("01"); }
  static state_space real_scalar() { return state_space{}; }
};

// Finite-state trajectory: symbol at index t is the state at time t.
using traj = std::string;
// Real-state trajectory for the Gaussian engines.
using rtraj = std::vector<double>;

inline traj constant_traj(char s, int len) { return traj(std::size_t(len), s); }

// A vertex is in the tree or not for all time, so cemetery trajectories are
// all-cemetery; anything mixed is a bug upstream.
inline bool is_cemetery_traj(const state_space& sp, const traj& x) {
  if (sp.cemetery < 0 || x.empty()) return false;
  const char c = sp.cemetery_symbol();
  bool any = x.find(c) != traj::npos;
  if (any && x.find_first_not_of(c) != traj::npos)
    throw std::logic_error("trajectory mixes cemetery and live states");
  return any;
}

// Unordered finite collection of equal-length trajectories; the canonical
// form keeps items sorted, so equality is order-insensitive.
struct traj_multiset {
  std::vector<traj> items;  // sorted

  static traj_multiset of(std::vector<traj> v) {
    std::sort(v.begin(), v.end());
    return traj_multiset{std::move(v)};
  }
  std::size_t size() const { return items.size(); }
  bool operator==(const traj_multiset&) const = default;

  // Canonical text key: parts joined by ';'. The empty multiset is "".
  std::string key() const {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (i) out += ';';
      out += items[i];
    }
    return out;
  }
};

// Canonical atom for a (root trajectory, neighbor multiset) pair.
inline std::string neighborhood_atom(const traj& own, std::span<const traj> nbrs) {
  std::vector<traj> v(nbrs.begin(), nbrs.end());
  std::sort(v.begin(), v.end());
  std::string out = own;
  out += '|';
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ';';
    out += v[i];
  }
  return out;
}

// Probability vector over the alphabet, in alphabet order.
inline void check_pmf(std::span<const double> p, double tol = 1e-12) {
  double s = 0;
  for (double x : p) {
    if (!(x >= 0)) throw std::invalid_argument("negative probability");
    s += x;
  }
  if (std::abs(s - 1.0) > tol)
    throw std::invalid_argument("probabilities sum to " + std::to_string(s));
}

// Inverse-CDF sample in index order from a single uniform draw.
inline int sample_pmf(std::span<const double> p, double u) {
  double cum = 0;
  int last_pos = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    cum += p[i];
    if (p[i] > 0) last_pos = int(i);
    if (u < cum) return int(i);
  }
  return last_pos;  // u landed in the rounding gap below 1
}

// Update map F^k. Kernel rules emit a probability vector over next states;
// custom rules map the noise draw directly. The markov flag tells engines the
// rule reads only last states, so trajectory storage may be truncated.
struct rule_base {
  state_space space;
  bool markov = true;

  explicit rule_base(state_space sp, bool mk = true)
      : space(std::move(sp)), markov(mk) {}
  virtual ~rule_base() = default;
};

struct kernel_rule : rule_base {
  using rule_base::rule_base;
  // out has space.size() entries; k is the current time (own has k+1 states).
  virtual void probs(int k, const traj& own, std::span<const traj> nbrs,
                     std::span<double> out) const = 0;
};

struct custom_rule : rule_base {
  using rule_base::rule_base;
  virtual char next(int k, const traj& own, std::span<const traj> nbrs,
                    double u) const = 0;
};

// Affine real-state rule x' = a x + b * sum(neighbor states) + c + noise.
struct affine_rule {
  double a = 0, b = 0, c = 0;
};

namespace detail {
inline void check_arguments(const rule_base& r, const traj& own,
                            std::span<const traj> nbrs) {
  if (own.empty()) throw std::invalid_argument("empty own trajectory");
  for (const traj& t : nbrs)
    if (t.size() != own.size())
      throw std::invalid_argument("neighbor trajectory length mismatch");
  if (r.space.cemetery >= 0) {
    const char c = r.space.cemetery_symbol();
    if (own.back() == c)
      throw std::invalid_argument("own trajectory is at the cemetery");
    for (const traj& t : nbrs)
      if (t.back() == c)
        throw std::invalid_argument("neighbor trajectory is at the cemetery");
  }
}

// Counts of neighbor last states per alphabet index.
inline void last_state_histogram(const state_space& sp,
                                 std::span<const traj> nbrs, int* counts) {
  for (int i = 0; i < sp.size(); ++i) counts[i] = 0;
  for (const traj& t : nbrs) ++counts[sp.index_of(t.back())];
}
}  // namespace detail

// One synchronous update from a single uniform draw. Kernel rules sample by
// inverse CDF in alphabet order; the result is never the cemetery.
inline char apply_transition(const kernel_rule& r, int k, const traj& own,
                             std::span<const traj> nbrs, double u) {
  detail::check_arguments(r, own, nbrs);
  std::vector<double> p(std::size_t(r.space.size()));
  r.probs(k, own, nbrs, p);
  check_pmf(p);
  if (r.space.cemetery >= 0 && p[std::size_t(r.space.cemetery)] != 0.0)
    throw std::domain_error("kernel assigns mass to the cemetery");
  return r.space.symbols[std::size_t(sample_pmf(p, u))];
}

inline char apply_transition(const custom_rule& r, int k, const traj& own,
                             std::span<const traj> nbrs, double u) {
  detail::check_arguments(r, own, nbrs);
  char s = r.next(k, own, nbrs, u);
  if (r.space.is_cemetery(s))
    throw std::domain_error("custom rule produced the cemetery");
  return s;
}

inline double apply_transition(const affine_rule& r, const rtraj& own,
                               std::span<const rtraj> nbrs, double xi) {
  if (own.empty()) throw std::invalid_argument("empty own trajectory");
  double s = 0;
  for (const rtraj& t : nbrs) {
    if (t.size() != own.size())
      throw std::invalid_argument("neighbor trajectory length mismatch");
    s += t.back();
  }
  return r.a * own.back() + r.b * s + r.c + xi;
}

// Dispatch for engines that hold a rule polymorphically.
inline char next_state(const rule_base& r, int k, const traj& own,
                       std::span<const traj> nbrs, double u) {
  if (auto* kr = dynamic_cast<const kernel_rule*>(&r))
    return apply_transition(*kr, k, own, nbrs, u);
  if (auto* cr = dynamic_cast<const custom_rule*>(&r))
    return apply_transition(*cr, k, own, nbrs, u);
  throw std::logic_error("unsupported rule kind");
}

// Built-in kernels. All are defined through last-state counts, so neighbor
// order never matters.

// Pick a uniform neighbor, copy its last state with probability 1-q, else
// flip it. Isolated vertices flip their own last state with probability q.
struct voter_flip final : kernel_rule {
  double q;
  explicit voter_flip(double q_) : kernel_rule(state_space::binary()), q(q_) {
    if (q < 0 || q > 1) throw std::invalid_argument("q outside [0,1]");
  }
  void probs(int, const traj& own, std::span<const traj> nbrs,
             std::span<double> out) const override {
    int cnt[2];
    detail::last_state_histogram(space, nbrs, cnt);
    const double n = double(cnt[0] + cnt[1]);
    if (n == 0) {
      const int o = space.index_of(own.back());
      out[std::size_t(o)] = 1 - q;
      out[std::size_t(1 - o)] = q;
      return;
    }
    out[1] = (1 - q) * cnt[1] / n + q * cnt[0] / n;
    out[0] = 1 - out[1];
  }
};

// Majority of neighbor last states (ties and isolation fall back to the own
// last state), then flip with probability q.
struct majority_flip final : kernel_rule {
  double q;
  explicit majority_flip(double q_)
      : kernel_rule(state_space::binary()), q(q_) {
    if (q < 0 || q > 1) throw std::invalid_argument("q outside [0,1]");
  }
  void probs(int, const traj& own, std::span<const traj> nbrs,
             std::span<double> out) const override {
    int cnt[2];
    detail::last_state_histogram(space, nbrs, cnt);
    int m;
    if (cnt[0] > cnt[1])
      m = 0;
    else if (cnt[1] > cnt[0])
      m = 1;
    else
      m = space.index_of(own.back());
    out[std::size_t(m)] = 1 - q;
    out[std::size_t(1 - m)] = q;
  }
};

// History-dependent: own initial state xor the parity of ones among neighbor
// last states, flipped with probability q. Reads the whole own trajectory.
struct parity_flip final : kernel_rule {
  double q;
  explicit parity_flip(double q_)
      : kernel_rule(state_space::binary(), /*markov=*/false), q(q_) {
    if (q < 0 || q > 1) throw std::invalid_argument("q outside [0,1]");
  }
  void probs(int, const traj& own, std::span<const traj> nbrs,
             std::span<double> out) const override {
    int cnt[2];
    detail::last_state_histogram(space, nbrs, cnt);
    const int base = (space.index_of(own.front()) + cnt[1]) & 1;
    out[std::size_t(base)] = 1 - q;
    out[std::size_t(1 - base)] = q;
  }
};

// Kernel that outputs a fixed symbol regardless of input.
struct constant_rule final : kernel_rule {
  char s;
  constant_rule(state_space sp, char s_) : kernel_rule(std::move(sp)), s(s_) {
    if (space.is_cemetery(s))
      throw std::invalid_argument("constant output is the cemetery");
  }
  void probs(int, const traj&, std::span<const traj>,
             std::span<double> out) const override {
    for (auto& x : out) x = 0;
    out[std::size_t(space.index_of(s))] = 1;
  }
};

// Kernel that keeps the own last state.
struct identity_rule final : kernel_rule {
  explicit identity_rule(state_space sp) : kernel_rule(std::move(sp)) {}
  void probs(int, const traj& own, std::span<const traj>,
             std::span<double> out) const override {
    for (auto& x : out) x = 0;
    out[std::size_t(space.index_of(own.back()))] = 1;
  }
};

// Deliberately order-sensitive rule: copy the last state of the neighbor at
// a fixed position, flipped with probability q. Violates neighbor symmetry;
// used as a negative control for the symmetry audit.
struct nth_neighbor_copy final : custom_rule {
  std::size_t pos;
  double q;
  explicit nth_neighbor_copy(std::size_t pos_, double q_ = 0.0)
      : custom_rule(state_space::binary()), pos(pos_), q(q_) {}
  char next(int, const traj& own, std::span<const traj> nbrs,
            double u) const override {
    const char base =
        nbrs.empty() ? own.back() : nbrs[std::min(pos, nbrs.size() - 1)].back();
    if (u < q) return base == '0' ? '1' : '0';
    return base;
  }
};

// Neighbor-symmetry audit: random probes, each compared across random
// permutations of the neighbor list with the same noise draw.
struct symmetry_report {
  bool pass = true;
  int probes = 0;
  std::string witness;  // first violating probe, empty when pass
};

inline symmetry_report verify_symmetry(const rule_base& rule, int probe_count,
                                       stream rng) {
  if (probe_count < 1) throw std::invalid_argument("probe count must be >= 1");
  symmetry_report rep;
  rep.probes = probe_count;
  std::string live;  // non-cemetery symbols
  for (int i = 0; i < rule.space.size(); ++i)
    if (i != rule.space.cemetery) live += rule.space.symbols[std::size_t(i)];
  for (int p = 0; p < probe_count; ++p) {
    sequence seq(rng.fork(std::uint64_t(p)));
    const int k = int(seq.below(4));
    const int deg = int(seq.below(5));
    auto random_traj = [&] {
      traj t(std::size_t(k) + 1, '?');
      for (int i = 0; i <= k; ++i)
        t[std::size_t(i)] = live[std::size_t(seq.below(live.size()))];
      return t;
    };
    const traj own = random_traj();
    std::vector<traj> nbrs(static_cast<std::size_t>(deg));
    for (auto& t : nbrs) t = random_traj();
    const double u = seq.u01();
    const char ref = next_state(rule, k, own, nbrs, u);
    for (int trial = 0; trial < 4; ++trial) {
      std::vector<traj> perm = nbrs;
      for (std::size_t i = perm.size(); i > 1; --i)
        std::swap(perm[i - 1], perm[std::size_t(seq.below(i))]);
      const char got = next_state(rule, k, own, perm, u);
      if (got != ref) {
        rep.pass = false;
        rep.witness = "probe " + std::to_string(p) + ": own=" + own +
                      " nbrs=" + traj_multiset::of(nbrs).key() + " u=" +
                      std::to_string(u) + " -> '" + ref + "' vs '" + got + "'";
        return rep;
      }
    }
  }
  return rep;
}

// Deterministic worker-count helpers shared by the engines. Results never
// depend on the worker count; it only sets how replica ranges are split.
inline int default_workers() {
  if (const char* e = std::getenv("PCASIM_WORKERS")) {
    const int v = std::atoi(e);
    if (v >= 1) return v;
  }
  const unsigned h = std::thread::hardware_concurrency();
  return h ? int(h) : 1;
}

template <class F>
void parallel_for(std::int64_t n, int workers, F&& f) {
  workers = int(std::min<std::int64_t>(std::max(workers, 1), std::max<std::int64_t>(n, 1)));
  if (workers == 1) {
    for (std::int64_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(std::size_t(workers));
  for (int w = 0; w < workers; ++w) {
    const std::int64_t lo = n * w / workers, hi = n * (w + 1) / workers;
    pool.emplace_back([lo, hi, &f] {
      for (std::int64_t i = lo; i < hi; ++i) f(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace pca
