#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "pca/engine.hpp"

using namespace pca;
using Catch::Approx;

namespace {
system_state fresh_state(const finite_graph& g, const std::string& symbols) {
  system_state s;
  s.graph = &g;
  for (char c : symbols) s.x.push_back(traj(1, c));
  return s;
}

std::string joined(const std::vector<traj>& xs) {
  std::string k;
  for (const auto& t : xs) {
    k += t;
    k += '|';
  }
  return k;
}
}  // namespace

TEST_CASE("synchronous step semantics") {
  SECTION("noiseless majority on a triangle holds its fixed point") {
    auto g = finite_graph::complete(3);
    auto s = fresh_state(g, "000");
    majority_flip rule(0.0);
    std::vector<double> u{0.3, 0.6, 0.9};
    auto next = step_synchronous(s, rule, u);
    CHECK(next.x == std::vector<traj>{"00", "00", "00"});
  }

  SECTION("updates read the frozen snapshot") {
    // Deterministic neighbor copy on an edge swaps the two states; a
    // sequential scan would instead level them.
    auto g = finite_graph::path(2);
    auto s = fresh_state(g, "01");
    voter_flip rule(0.0);
    std::vector<double> u{0.5, 0.5};
    auto next = step_synchronous(s, rule, u);
    CHECK(next.x == std::vector<traj>{"01", "10"});
  }

  SECTION("absent vertices stay at the cemetery and drop out of neighborhoods") {
    auto sp = state_space::finite("01*", 2);
    struct copy_single final : kernel_rule {
      explicit copy_single(state_space s) : kernel_rule(std::move(s)) {}
      void probs(int, const traj&, std::span<const traj> nbrs,
                 std::span<double> out) const override {
        REQUIRE(nbrs.size() == 1);  // the absent neighbor must be excluded
        for (auto& x : out) x = 0;
        out[std::size_t(space.index_of(nbrs[0].back()))] = 1;
      }
    } rule(sp);
    auto g = finite_graph::path(3);
    system_state s;
    s.graph = &g;
    s.x = {"*", "0", "1"};
    s.absent = {1, 0, 0};
    std::vector<double> u{0.5, 0.5, 0.5};
    auto next = step_synchronous(s, rule, u);
    CHECK(next.x[0] == "**");
    CHECK(next.x[1] == "01");  // copies vertex 2, not the absent vertex 0
  }

  SECTION("mismatched states are rejected") {
    auto g = finite_graph::path(2);
    auto s = fresh_state(g, "0x");
    voter_flip rule(0.1);
    std::vector<double> u{0.5, 0.5};
    CHECK_THROWS_AS(step_synchronous(s, rule, u), std::invalid_argument);

    auto s2 = fresh_state(g, "01");
    std::vector<double> short_u{0.5};
    CHECK_THROWS_AS(step_synchronous(s2, rule, short_u), std::invalid_argument);
  }
}

TEST_CASE("replica simulation") {
  stream base(71);
  std::vector<double> half{0.5, 0.5};

  SECTION("horizon zero reproduces the initial pmf") {
    auto g = finite_graph::empty(1);
    voter_flip rule(0.1);
    std::vector<double> init{0.3, 0.7};
    const int m = 100000;
    auto reps = simulate(g, rule, init, 0, m, base.fork(1));
    int ones = 0;
    for (const auto& r : reps) ones += r.x[0] == "1";
    const double p = double(ones) / m;
    const double se = std::sqrt(p * (1 - p) / m);
    CHECK(std::abs(p - 0.7) < 4 * se);
  }

  SECTION("identity dynamics freeze every trajectory") {
    auto g = finite_graph::cycle(5);
    identity_rule rule(state_space::binary());
    auto reps = simulate(g, rule, half, 4, 50, base.fork(2));
    for (const auto& r : reps)
      for (const auto& t : r.x) {
        CHECK(t.size() == 5);
        CHECK(t.find_first_not_of(t[0]) == traj::npos);
      }
  }

  SECTION("same master stream, same output; workers do not matter") {
    auto g = finite_graph::cycle(6);
    voter_flip rule(0.2);
    auto a = simulate(g, rule, half, 3, 40, base.fork(3), 1);
    auto b = simulate(g, rule, half, 3, 40, base.fork(3), 4);
    auto c = simulate(g, rule, half, 3, 40, base.fork(3), 3);
    CHECK(a == b);
    CHECK(a == c);
  }

  SECTION("isolated vertex flips with probability q") {
    auto g = finite_graph::empty(1);
    voter_flip rule(0.3);
    std::vector<double> at_zero{1.0, 0.0};
    const int m = 100000;
    auto reps = simulate(g, rule, at_zero, 1, m, base.fork(4));
    int flips = 0;
    for (const auto& r : reps) flips += r.x[0] == "01";
    const double p = double(flips) / m;
    const double se = std::sqrt(p * (1 - p) / m);
    CHECK(std::abs(p - 0.3) < 4 * se);
  }

  SECTION("decoupled affine updates ignore the graph") {
    affine_rule rule{0.7, 0.0, 0.2};
    auto g1 = finite_graph::empty(1);
    auto g3 = finite_graph::complete(3);
    auto lone = simulate_real(g1, rule, 0.5, 1.0, 4, 30, base.fork(5));
    auto trio = simulate_real(g3, rule, 0.5, 1.0, 4, 30, base.fork(5));
    for (int r = 0; r < 30; ++r)
      CHECK(lone[std::size_t(r)].x[0] == trio[std::size_t(r)].x[0]);
  }

  SECTION("argument validation") {
    auto g = finite_graph::empty(1);
    voter_flip rule(0.1);
    CHECK_THROWS_AS(simulate(g, rule, half, -1, 1, base), std::invalid_argument);
    CHECK_THROWS_AS(simulate(g, rule, half, 1, 0, base), std::invalid_argument);
    std::vector<double> bad{1.0};
    CHECK_THROWS_AS(simulate(g, rule, bad, 1, 1, base), std::invalid_argument);
  }
}

TEST_CASE("exact law propagation") {
  SECTION("single-vertex flip probability appears verbatim") {
    auto g = finite_graph::empty(1);
    voter_flip rule(0.25);
    std::vector<double> at_zero{1.0, 0.0};
    auto law = propagate_exact_law(g, rule, at_zero, 1);
    REQUIRE(law.mass.size() == 2);
    std::vector<traj> flip{"01"};
    std::vector<traj> stay{"00"};
    CHECK(law.mass.at(law.encode(flip)) == Approx(0.25).margin(1e-15));
    CHECK(law.mass.at(law.encode(stay)) == Approx(0.75).margin(1e-15));
  }

  SECTION("identity dynamics lift the product initial law") {
    auto g = finite_graph::path(3);
    identity_rule rule(state_space::binary());
    std::vector<double> init{0.3, 0.7};
    auto law = propagate_exact_law(g, rule, init, 2);
    CHECK(law.mass.size() == 8);
    std::vector<traj> cfg{"000", "000", "111"};
    CHECK(law.mass.at(law.encode(cfg)) ==
          Approx(0.3 * 0.3 * 0.7).margin(1e-15));
    CHECK(law.total() == Approx(1.0).margin(1e-12));
  }

  SECTION("Monte Carlo agrees on a three-vertex path") {
    auto g = finite_graph::path(3);
    voter_flip rule(0.1);
    std::vector<double> init{0.9, 0.1};
    auto law = propagate_exact_law(g, rule, init, 2);
    auto exact = law.project(joined);

    stream base(555);
    auto reps = simulate(g, rule, init, 2, 1000000, base);
    auto mc = measure_over_replicas(
        reps, [](const system_state& s) { return joined(s.x); });
    CHECK(tv_distance(exact, mc.mass) < 5e-3);

    // Generic union-bound gate relating support size and replica count.
    CHECK(tv_distance(exact, mc.mass) <
          5 * std::sqrt(double(law.mass.size()) / 1e6));
  }

  SECTION("relabeling by a cycle rotation preserves the law") {
    auto g = finite_graph::cycle(4);
    voter_flip rule(0.25);
    std::vector<double> init{0.6, 0.4};
    auto law = propagate_exact_law(g, rule, init, 2);
    for (const auto& [cfg, w] : law.mass) {
      auto xs = law.decode(cfg);
      std::vector<traj> rot{xs[3], xs[0], xs[1], xs[2]};
      CHECK(law.mass.at(law.encode(rot)) == Approx(w).margin(1e-12));
    }
  }

  SECTION("budget violations are reported, not silently truncated") {
    auto g = finite_graph::path(3);
    voter_flip rule(0.5);
    std::vector<double> half{0.5, 0.5};
    CHECK_THROWS_AS(propagate_exact_law(g, rule, half, 2, 100), budget_error);
    auto big = finite_graph::path(40);
    CHECK_THROWS_AS(propagate_exact_law(big, rule, half, 2), budget_error);
  }
}

TEST_CASE("path elimination oracle") {
  std::vector<double> half{0.5, 0.5};

  SECTION("matches full-support propagation on a seven-vertex path") {
    voter_flip rule(0.25);
    for (int k : {0, 1, 2}) {
      auto law = propagate_exact_law(finite_graph::path(7), rule, half, k);
      auto ref =
          normalize_measure(law.project([](const std::vector<traj>& xs) {
            std::vector<traj> pair{xs[2], xs[4]};
            return neighborhood_atom(xs[3], pair);
          }));
      auto got = exact_path_neighborhood_law(7, rule, half, k);
      CHECK(tv_distance(ref, got) < 1e-12);
    }
  }

  SECTION("biased kernel and skewed initial law agree too") {
    voter_flip rule(0.1);
    std::vector<double> init{0.85, 0.15};
    auto law = propagate_exact_law(finite_graph::path(5), rule, init, 2);
    auto ref = normalize_measure(law.project([](const std::vector<traj>& xs) {
      std::vector<traj> pair{xs[1], xs[3]};
      return neighborhood_atom(xs[2], pair);
    }));
    auto got = exact_path_neighborhood_law(5, rule, init, 2);
    CHECK(tv_distance(ref, got) < 1e-12);
  }

  SECTION("horizon zero is the product of initial draws") {
    voter_flip rule(0.5);
    std::vector<double> init{0.7, 0.3};
    auto got = exact_path_neighborhood_law(3, rule, init, 0);
    CHECK(got.mass.at("0|0;0") == Approx(0.7 * 0.7 * 0.7).margin(1e-12));
    CHECK(got.mass.at("0|0;1") == Approx(2 * 0.7 * 0.7 * 0.3).margin(1e-12));
    CHECK(got.mass.at("1|0;1") == Approx(2 * 0.3 * 0.7 * 0.3).margin(1e-12));
    CHECK(got.total() == Approx(1.0).margin(1e-12));
  }

  SECTION("root marginal projection collapses the neighbor part") {
    voter_flip rule(0.25);
    auto got = exact_path_neighborhood_law(7, rule, half, 1);
    auto roots = root_marginal(got);
    double s = 0;
    for (const auto& [atom, w] : roots.mass) {
      CHECK(atom.find('|') == std::string::npos);
      s += w;
    }
    CHECK(s == Approx(1.0).margin(1e-12));
    CHECK(roots.mass.size() == 4);
  }

  SECTION("even paths and tiny budgets are refused") {
    voter_flip rule(0.5);
    CHECK_THROWS_AS(exact_path_neighborhood_law(4, rule, half, 1),
                    std::invalid_argument);
    CHECK_THROWS_AS(exact_path_neighborhood_law(7, rule, half, 4, 1000),
                    budget_error);
  }
}

TEST_CASE("sampled tree oracle") {
  stream base(91);
  std::vector<double> half{0.5, 0.5};

  SECTION("degenerate offspring laws reproduce the fixed-tree oracle") {
    voter_flip rule(0.3);
    const int m = 100000, k = 1;
    auto fixed = truncated_tree_oracle(3, rule, half, k, m, base.fork(1));
    auto gw = truncated_tree_oracle(offspring_distribution::delta(3),
                                    offspring_distribution::delta(2), rule,
                                    half, k, m, base.fork(2));
    std::size_t support = fixed.mass.size();
    for (const auto& [a, w] : gw.mass) support += !fixed.mass.count(a);
    CHECK(tv_distance(fixed, gw) < 5 * std::sqrt(double(support) / m));
  }

  SECTION("lone roots evolve as single-site chains") {
    voter_flip rule(0.25);
    std::vector<double> at_zero{1.0, 0.0};
    const int m = 40000;
    auto got = truncated_tree_oracle(offspring_distribution::delta(0),
                                     offspring_distribution::delta(0), rule,
                                     at_zero, 1, m, base.fork(3));
    for (const auto& [a, w] : got.mass) CHECK(a.back() == '|');
    const double se = std::sqrt(0.75 * 0.25 / m);
    CHECK(std::abs(got.mass.at("00|") - 0.75) < 4 * se);
    CHECK(std::abs(got.mass.at("01|") - 0.25) < 4 * se);
  }
}

TEST_CASE("truncated tree oracle") {
  stream base(88);
  std::vector<double> half{0.5, 0.5};

  SECTION("horizon zero returns the initial neighborhood law") {
    voter_flip rule(0.2);
    const int m = 20000;
    auto meas = truncated_tree_oracle(2, rule, half, 0, m, base.fork(1));
    // Root and two children, i.i.d. fair bits: P(x|ab) with a ≤ b.
    auto expect = [&](const std::string& atom, double p) {
      const double got = meas.mass.count(atom) ? meas.mass.at(atom) : 0.0;
      const double se = std::sqrt(p * (1 - p) / m);
      CHECK(std::abs(got - p) < 4 * se);
    };
    expect("0|0;0", 0.125);
    expect("0|0;1", 0.25);
    expect("0|1;1", 0.125);
    expect("1|0;1", 0.25);
  }

  SECTION("depth beyond k+1 changes nothing in law") {
    voter_flip rule(0.3);
    const int m = 100000;
    auto near = truncated_tree_oracle(truncated_regular_tree(3, 2), rule, half,
                                      1, m, base.fork(2));
    auto deep = truncated_tree_oracle(truncated_regular_tree(3, 3), rule, half,
                                      1, m, base.fork(3));
    std::size_t support = 0;
    for (const auto& [k, w] : near.mass) support += 1;
    for (const auto& [k, w] : deep.mass) support += !near.mass.count(k);
    CHECK(tv_distance(near, deep) < 5 * std::sqrt(double(support) / m));
  }

  SECTION("depth below k+1 is refused") {
    voter_flip rule(0.3);
    CHECK_THROWS_AS(truncated_tree_oracle(truncated_regular_tree(3, 1), rule,
                                          half, 1, 10, base.fork(4)),
                    std::invalid_argument);
  }

  SECTION("decoupled affine root variance follows the scalar recursion") {
    affine_rule rule{0.8, 0.0, 0.0};
    const int k = 2, m = 200000;
    auto g = finite_graph::from_tree(truncated_regular_tree(3, k + 1));
    auto reps = simulate_real(g, rule, 0.0, 1.0, k, m, base.fork(5));
    double sum = 0, sq = 0;
    for (const auto& r : reps) {
      const double x = r.x[0].back();
      sum += x;
      sq += x * x;
    }
    const double var = sq / m - (sum / m) * (sum / m);
    double want = 1.0;
    for (int t = 0; t < k; ++t) want = 0.8 * 0.8 * want + 1.0;
    const double se = want * std::sqrt(2.0 / (m - 1));
    CHECK(std::abs(var - want) < 4 * se);
  }
}

TEST_CASE("empirical measures") {
  auto g = finite_graph::empty(1);
  auto mk = [&](const std::string& t) {
    system_state s;
    s.graph = &g;
    s.x = {t};
    return s;
  };

  SECTION("identical atoms merge") {
    std::vector<system_state> reps{mk("01"), mk("01")};
    auto m = measure_over_replicas(
        reps, [](const system_state& s) { return s.x[0]; });
    REQUIRE(m.mass.size() == 1);
    CHECK(m.mass.at("01") == 1.0);
  }

  SECTION("four atoms, two equal") {
    std::vector<system_state> reps{mk("00"), mk("00"), mk("01"), mk("11")};
    auto m = measure_over_replicas(
        reps, [](const system_state& s) { return s.x[0]; });
    CHECK(m.mass.at("00") == Approx(0.5));
    CHECK(m.mass.at("01") == Approx(0.25));
    CHECK(m.mass.at("11") == Approx(0.25));
    CHECK(m.total() == Approx(1.0).margin(1e-12));
  }

  SECTION("vertex sweep averages over vertices") {
    auto p3 = finite_graph::path(3);
    system_state s;
    s.graph = &p3;
    s.x = {"0", "0", "1"};
    auto m = measure_vertex_sweep(
        s, [](const system_state& st, int v) { return st.x[std::size_t(v)]; });
    CHECK(m.mass.at("0") == Approx(2.0 / 3));
    CHECK(m.mass.at("1") == Approx(1.0 / 3));
  }

  SECTION("empty input is refused") {
    std::vector<system_state> none;
    CHECK_THROWS_AS(measure_over_replicas(
                        none, [](const system_state& s) { return s.x[0]; }),
                    std::invalid_argument);
  }

  SECTION("total variation basics") {
    std::unordered_map<std::string, double> a{{"x", 0.5}, {"y", 0.5}};
    std::unordered_map<std::string, double> b{{"x", 0.5}, {"y", 0.5}};
    CHECK(tv_distance(a, b) == 0.0);
    std::unordered_map<std::string, double> c{{"z", 1.0}};
    CHECK(tv_distance(a, c) == 1.0);
    std::unordered_map<std::string, double> d{{"x", 1.0}};
    CHECK(tv_distance(a, d) == Approx(0.5));
  }
}

TEST_CASE("text outputs") {
  auto g = finite_graph::path(2);
  system_state s;
  s.graph = &g;
  s.x = {"01", "10"};
  std::vector<system_state> reps{s};
  CHECK(trajectory_csv(reps) ==
        "replica,vertex,time,state\n"
        "0,0,0,0\n0,0,1,1\n0,1,0,1\n0,1,1,0\n");

  real_system_state rs;
  rs.graph = &g;
  rs.x = {{0.5, 1.25}, {1.0, -2.0}};
  std::vector<real_system_state> rreps{rs};
  CHECK(trajectory_csv(rreps) ==
        "replica,vertex,time,state\n"
        "0,0,0,0.5\n0,0,1,1.25\n0,1,0,1\n0,1,1,-2\n");

  empirical_measure m;
  m.mass = {{"b|x;y", 0.25}, {"a|x;y", 0.75}};
  CHECK(measure_csv(m) == "atom,weight\na|x;y,0.75\nb|x;y,0.25\n");
}
