#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "pca/verify.hpp"

using namespace pca;
using Catch::Approx;
using Catch::Matchers::ContainsSubstring;

namespace {

// Distance-one indicator on a rooted tree; parent links are enough because
// the harness only evaluates radius-limited pairs.
bool tree_adjacent(const rooted_tree& t, int o, int v) {
  if (o == v) return false;
  return t.parent[std::size_t(v)] == o || t.parent[std::size_t(o)] == v;
}

const std::vector<double> fair_init{0.5, 0.5};
const std::vector<double> skew_init{0.8, 0.2};

}  // namespace

TEST_CASE("independence residuals on exact laws") {
  const voter_flip rule(0.25);

  SECTION("product law with empty conditioning block") {
    // No edges, so the two trajectories are independent by construction.
    const auto law = propagate_exact_law(finite_graph::empty(2), rule,
                                         skew_init, 2);
    const std::vector<int> a{0}, b{1}, none{};
    const auto rep = conditional_independence_test(law, a, b, none, 1e-12);
    REQUIRE(rep.atoms.size() == 1);
    CHECK(rep.atoms[0].first.empty());
    CHECK(rep.max_residual < 1e-14);
    CHECK(rep.pass);
  }

  SECTION("two-step boundary trajectories split a path") {
    const auto law = propagate_exact_law(finite_graph::path(5),
                                         majority_flip(0.25), skew_init, 3);
    const std::vector<int> a{0}, s{1, 2}, b{3, 4};
    const auto rep = conditional_independence_test(law, a, b, s, 1e-12);
    CHECK(rep.max_residual < 1e-12);
    CHECK(rep.pass);
    for (const auto& [atom, res] : rep.atoms) CHECK(res >= 0);
  }

  SECTION("one-step boundary is not enough") {
    const auto law = propagate_exact_law(finite_graph::path(5),
                                         majority_flip(0.25), skew_init, 3);
    const std::vector<int> a{0}, s{1}, b{3, 4};
    const auto rep = conditional_independence_test(law, a, b, s, 1e-3);
    CHECK(rep.max_residual > 1e-3);
    CHECK_FALSE(rep.pass);
  }

  SECTION("cycle whose complement block is empty") {
    const auto g = finite_graph::cycle(5);
    const std::vector<int> a{0};
    const auto bd = boundary_sets(g, a);
    REQUIRE(bd.second_boundary.size() == 4);  // everything else
    const auto law = propagate_exact_law(g, rule, skew_init, 2);
    const std::vector<int> b{};
    const auto rep =
        conditional_independence_test(law, a, b, bd.second_boundary, 1e-12);
    CHECK(rep.max_residual == 0.0);
    CHECK(rep.pass);
  }

  SECTION("argument validation") {
    const auto law = propagate_exact_law(finite_graph::path(3), rule,
                                         skew_init, 1);
    const std::vector<int> a{0}, b{1}, s{1};
    CHECK_THROWS_AS(conditional_independence_test(law, a, b, s, 1e-6),
                    std::invalid_argument);
    const std::vector<int> big{3};
    CHECK_THROWS_AS(conditional_independence_test(law, a, big, s, 1e-6),
                    std::invalid_argument);
    const std::vector<int> c{2};
    CHECK_THROWS_AS(conditional_independence_test(law, a, b, c, -1.0),
                    std::invalid_argument);
  }
}

TEST_CASE("gaussian conditioning counterexamples") {
  const auto rep = gaussian_counterexample_suite();
  CHECK(rep.current_second_boundary == Approx(-0.5).margin(1e-12));
  CHECK(rep.past_first_boundary == Approx(-1.0 / 3.0).margin(1e-12));
  CHECK(std::abs(rep.past_second_boundary) < 1e-12);
  CHECK(rep.tolerance == 1e-12);
  CHECK(rep.pass);
}

TEST_CASE("subgraph consistency of conditional laws") {
  const voter_flip rule(0.25);

  SECTION("identical graphs agree exactly") {
    const auto g = finite_graph::path(5);
    const std::vector<int> all{0, 1, 2, 3, 4}, a{2};
    const auto rep = consistency_check(g, all, a, rule, skew_init, 2);
    CHECK(rep.max_tv == 0.0);
    CHECK_FALSE(rep.atoms.empty());
  }

  SECTION("middle of a longer path carries the same conditional law") {
    // The subgraph's edge vertices lose a neighbor each; conditioning on the
    // two-step boundary trajectories makes that invisible from the center.
    const auto g = finite_graph::path(7);
    const std::vector<int> sub{1, 2, 3, 4, 5}, a{3};
    const auto rep = consistency_check(g, sub, a, rule, skew_init, 2);
    CHECK(rep.max_tv < 1e-12);
    CHECK_FALSE(rep.atoms.empty());
  }

  SECTION("subgraph missing part of the closure is rejected") {
    const auto g = finite_graph::path(7);
    const std::vector<int> sub{2, 3, 4}, a{3};
    CHECK_THROWS_WITH(consistency_check(g, sub, a, rule, skew_init, 2),
                      ContainsSubstring("closure"));
  }
}

TEST_CASE("leaf exchangeability gate") {
  SECTION("swapping two children preserves the law") {
    const auto off = offspring_distribution::uniform(0, 2);
    const voter_flip rule(0.2);
    const std::vector<int> swap{1, 0};
    const auto rep = exchangeability_check(off, off, rule, skew_init, 2, 2,
                                           swap, 100000, stream(81001));
    CHECK(rep.hits >= 100);
    CHECK(rep.se > 0);
    CHECK(rep.tv <= 5 * rep.se);
    CHECK(rep.pass);
  }

  SECTION("single child leaves nothing to permute") {
    const auto off = offspring_distribution::uniform(0, 2);
    const voter_flip rule(0.2);
    const std::vector<int> id{0};
    const auto rep = exchangeability_check(off, off, rule, skew_init, 2, 1,
                                           id, 30000, stream(81001));
    CHECK(rep.tv == 0.0);
    CHECK(rep.pass);
  }

  SECTION("a child-order-sensitive rule fails the gate") {
    const auto off = offspring_distribution::delta(2);
    const nth_neighbor_copy rule(0, 0.0);
    const std::vector<int> swap{1, 0};
    const auto rep = exchangeability_check(off, off, rule, fair_init, 1, 2,
                                           swap, 60000, stream(81002));
    CHECK(rep.tv > 5 * rep.se);
    CHECK_FALSE(rep.pass);
  }

  SECTION("argument validation") {
    const auto off = offspring_distribution::delta(1);
    const voter_flip rule(0.2);
    const std::vector<int> swap{1, 0};
    // No replica ever has two children.
    CHECK_THROWS_AS(exchangeability_check(off, off, rule, fair_init, 1, 2,
                                          swap, 500, stream(81003)),
                    std::invalid_argument);
    const std::vector<int> bad{0, 0};
    CHECK_THROWS_AS(exchangeability_check(off, off, rule, fair_init, 1, 2,
                                          bad, 500, stream(81003)),
                    std::invalid_argument);
    const std::vector<int> short_perm{0};
    CHECK_THROWS_AS(exchangeability_check(off, off, rule, fair_init, 1, 2,
                                          short_perm, 500, stream(81003)),
                    std::invalid_argument);
  }
}

TEST_CASE("mass transport balance") {
  const auto pois = offspring_distribution::poisson(2.0);
  const auto pois_hat = unimodular_offspring(pois);
  const voter_flip rule(0.25);

  SECTION("state indicator across one edge balances on the unimodular tree") {
    const transport_fn f = [](const rooted_tree& t, const std::vector<traj>& x,
                              int o, int v) {
      return tree_adjacent(t, o, v) && x[std::size_t(v)].back() == '1' ? 1.0
                                                                       : 0.0;
    };
    const auto rep = mass_transport_check(pois, pois_hat, rule, skew_init, 2,
                                          1, 4, f, 100000, stream(82001));
    CHECK(std::abs(rep.lhs - rep.rhs) <= 5 * rep.se);
    CHECK(rep.se > 0);
    CHECK(rep.pass);
  }

  SECTION("symmetric functionals cancel samplewise") {
    const transport_fn f = [](const rooted_tree& t, const std::vector<traj>&,
                              int o, int v) {
      return tree_adjacent(t, o, v) ? 1.0 : 0.0;
    };
    const auto rep = mass_transport_check(pois, pois_hat, rule, skew_init, 1,
                                          1, 3, f, 2000, stream(82002));
    CHECK(rep.lhs == rep.rhs);
    CHECK(rep.se == 0.0);
    CHECK(rep.pass);
  }

  SECTION("a plain branching tree is caught") {
    // One child at the root, two below: the size-biased shift of delta(1)
    // is delta(0), so this pair is not unimodular and the root and its
    // child see different degree environments.
    const transport_fn f = [](const rooted_tree& t, const std::vector<traj>& x,
                              int o, int v) {
      return tree_adjacent(t, o, v) && x[std::size_t(v)].back() == '1' ? 1.0
                                                                       : 0.0;
    };
    const auto rep = mass_transport_check(
        offspring_distribution::delta(1), offspring_distribution::delta(2),
        majority_flip(0.05), skew_init, 1, 1, 3, f, 30000, stream(82003));
    CHECK(std::abs(rep.lhs - rep.rhs) > 5 * rep.se);
    CHECK_FALSE(rep.pass);
  }

  SECTION("argument validation") {
    const transport_fn f = [](const rooted_tree&, const std::vector<traj>&,
                              int, int) { return 0.0; };
    CHECK_THROWS_AS(mass_transport_check(pois, pois_hat, rule, skew_init, 2,
                                         1, 3, f, 1000, stream(82001)),
                    std::invalid_argument);
    CHECK_THROWS_AS(mass_transport_check(pois, pois_hat, rule, skew_init, 0,
                                         -1, 3, f, 1000, stream(82001)),
                    std::invalid_argument);
    CHECK_THROWS_AS(mass_transport_check(pois, pois_hat, rule, skew_init, 0,
                                         0, 1, f, 1, stream(82001)),
                    std::invalid_argument);
  }
}

TEST_CASE("rerooting identity gate") {
  const auto rho0 = offspring_distribution::poisson(2.0).truncated(4);
  const auto rho = unimodular_offspring(rho0);
  const voter_flip rule(0.2);

  SECTION("constant functionals give one on both sides") {
    const rerooting_fn h = [](const traj&, const traj&, const traj_multiset&) {
      return 1.0;
    };
    const auto rep =
        rerooting_check(rho0, rho, rule, fair_init, 1, h, 40000, stream(83001));
    REQUIRE_FALSE(rep.atoms.empty());
    for (const auto& a : rep.atoms) {
      CHECK(a.ratio == 1.0);
      CHECK(a.direct == 1.0);
      CHECK(a.pass);
    }
    CHECK(rep.pass);
  }

  SECTION("neighborhood size indicator passes on the unimodular family") {
    const rerooting_fn h = [](const traj&, const traj&,
                              const traj_multiset& m) {
      return m.size() == 2 ? 1.0 : 0.0;
    };
    const auto rep = rerooting_check(rho0, rho, rule, fair_init, 1, h, 200000,
                                     stream(83002));
    REQUIRE_FALSE(rep.atoms.empty());
    for (const auto& a : rep.atoms) {
      CHECK(a.hits_root >= 100);
      CHECK(a.hits_child >= 100);
      CHECK(std::abs(a.ratio - a.direct) <= 5 * a.se);
    }
    CHECK(rep.pass);
  }

  SECTION("a plain branching tree is caught") {
    // Two children everywhere: the root neighborhood has size two but any
    // rerooted vertex sees three neighbors, so the two sides separate.
    const auto two = offspring_distribution::delta(2);
    const rerooting_fn h = [](const traj&, const traj&,
                              const traj_multiset& m) {
      return m.size() == 2 ? 1.0 : 0.0;
    };
    const auto rep =
        rerooting_check(two, two, rule, fair_init, 1, h, 10000, stream(83003));
    REQUIRE_FALSE(rep.atoms.empty());
    for (const auto& a : rep.atoms) {
      CHECK(a.ratio == 1.0);
      CHECK(a.direct == 0.0);
      CHECK_FALSE(a.pass);
    }
    CHECK_FALSE(rep.pass);
  }

  SECTION("argument validation") {
    const rerooting_fn h = [](const traj&, const traj&, const traj_multiset&) {
      return 1.0;
    };
    CHECK_THROWS_AS(rerooting_check(rho0, rho, rule, fair_init, 1, h, 1,
                                    stream(83004)),
                    std::invalid_argument);
    // Too few replicas for any atom to reach the hit threshold.
    CHECK_THROWS_AS(rerooting_check(rho0, rho, rule, fair_init, 1, h, 150,
                                    stream(83004)),
                    std::invalid_argument);
  }
}

TEST_CASE("finite graphs approach the tree laws") {
  const voter_flip rule(0.25);

  SECTION("regular family from the complete graph upward") {
    const auto fam = graph_model::regular(3);
    const std::vector<int> grid{4, 16, 64};
    const auto rep = convergence_experiment(fam, rule, skew_init, grid, 2, 5,
                                            1, stream(84001));
    CHECK(rep.family == "random-regular(3)");
    CHECK(rep.seeds == 5);
    REQUIRE(rep.rows.size() == 3);
    for (std::size_t i = 0; i < rep.rows.size(); ++i) {
      CHECK(rep.rows[i].n == grid[i]);
      CHECK(rep.rows[i].tv >= 0.0);
      CHECK(rep.rows[i].tv <= 1.0);
      CHECK(rep.rows[i].se >= 0.0);
    }
    CHECK(rep.rows[0].pass);  // first row has nothing to compare against
    CHECK(rep.final_tv == rep.rows.back().tv);
    CHECK(rep.rows.back().tv < rep.rows.front().tv + 0.2);

    const auto csv = convergence_csv(rep);
    CHECK_THAT(csv, ContainsSubstring("family,n,seeds,tv,se,pass\n"));
    CHECK_THAT(csv, ContainsSubstring("random-regular(3),4,5,"));
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  }

  SECTION("sparse random graphs against the size-biased engine") {
    const auto fam = graph_model::er(2.0);
    const std::vector<int> grid{32, 128};
    const auto rep = convergence_experiment(fam, rule, skew_init, grid, 1, 4,
                                            20000, stream(84002));
    CHECK(rep.family == "erdos-renyi(2)");
    REQUIRE(rep.rows.size() == 2);
    CHECK(rep.rows[1].tv <= 1.0);
  }

  SECTION("configuration model with a fixed degree law") {
    const auto fam =
        graph_model::configuration(offspring_distribution::uniform(1, 3));
    const std::vector<int> grid{32, 128};
    const auto rep = convergence_experiment(fam, rule, skew_init, grid, 1, 4,
                                            20000, stream(84003));
    CHECK(rep.family == "configuration");
    REQUIRE(rep.rows.size() == 2);
    CHECK(rep.rows[1].tv <= 1.0);
  }

  SECTION("argument validation") {
    CHECK_THROWS_AS(graph_model::regular(1), std::invalid_argument);
    CHECK_THROWS_AS(graph_model::er(0.0), std::invalid_argument);
    const auto fam = graph_model::regular(3);
    const std::vector<int> empty{};
    CHECK_THROWS_AS(convergence_experiment(fam, rule, skew_init, empty, 1, 2,
                                           1, stream(84001)),
                    std::invalid_argument);
    const std::vector<int> flat{16, 16};
    CHECK_THROWS_AS(convergence_experiment(fam, rule, skew_init, flat, 1, 2,
                                           1, stream(84001)),
                    std::invalid_argument);
    const std::vector<int> grid{4, 16};
    CHECK_THROWS_AS(convergence_experiment(fam, rule, skew_init, grid, 1, 1,
                                           1, stream(84001)),
                    std::invalid_argument);
  }
}

TEST_CASE("reports serialize to flat json") {
  SECTION("independence report with escaping") {
    independence_report r;
    r.atoms = {{"0\"1", 0.5}};
    r.max_residual = 0.5;
    r.tolerance = 1e-3;
    const auto s = report_json(r);
    CHECK_THAT(s, ContainsSubstring("\"atom\":\"0\\\"1\""));
    CHECK_THAT(s, ContainsSubstring("\"max_residual\":0.5"));
    CHECK_THAT(s, ContainsSubstring("\"pass\":false"));
  }

  SECTION("counterexample and gate reports") {
    const auto cx = gaussian_counterexample_suite();
    const auto s = report_json(cx);
    CHECK_THAT(s, ContainsSubstring("\"current_second_boundary\":-0.5"));
    CHECK_THAT(s, ContainsSubstring("\"pass\":true"));

    exchange_report ex;
    ex.hits = 123;
    ex.tv = 0.25;
    ex.se = 0.1;
    CHECK_THAT(report_json(ex), ContainsSubstring("\"hits\":123"));

    transport_report tr;
    tr.lhs = 1.0;
    tr.rhs = 1.5;
    CHECK_THAT(report_json(tr), ContainsSubstring("\"rhs\":1.5"));

    consistency_report cs;
    cs.atoms = {{"00", 0.0}};
    CHECK_THAT(report_json(cs), ContainsSubstring("\"max_tv\":0"));

    rerooting_report rr;
    rr.atoms.push_back({"0|1", 1.0, 1.0, 0.0, 200, 150, true});
    rr.pass = true;
    const auto rjs = report_json(rr);
    CHECK_THAT(rjs, ContainsSubstring("\"hits_child\":150"));
    CHECK_THAT(rjs, ContainsSubstring("\"atom\":\"0|1\""));

    convergence_report cv;
    cv.family = "erdos-renyi(2)";
    cv.seeds = 4;
    cv.rows = {{200, 0.2, 0.01, true}};
    cv.weakly_decreasing = true;
    cv.final_tv = 0.2;
    const auto cjs = report_json(cv);
    CHECK_THAT(cjs, ContainsSubstring("\"family\":\"erdos-renyi(2)\""));
    CHECK_THAT(cjs, ContainsSubstring("\"weakly_decreasing\":true"));
  }
}
