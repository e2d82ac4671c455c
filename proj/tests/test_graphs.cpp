#include <catch2/catch_amalgamated.hpp>
#include <numeric>
#include <set>

#include "pca/graphs.hpp"

using namespace pca;
using Catch::Approx;

TEST_CASE("labels parse, print and navigate") {
  auto root = uhn_label::root();
  CHECK(root.text() == "ø");
  CHECK(uhn_label::parse("ø") == root);
  auto v = root.child(1).child(2).child(3);
  CHECK(v.text() == "1.2.3");
  CHECK(uhn_label::parse("1.2.3") == v);
  CHECK(v.parent().text() == "1.2");
  CHECK(v.depth() == 3);
  CHECK_THROWS_AS(root.parent(), std::logic_error);
  CHECK_THROWS_AS(root.child(0), std::invalid_argument);
  CHECK_THROWS_AS(uhn_label::parse("0"), parse_error);
  CHECK_THROWS_AS(uhn_label::parse("1..2"), parse_error);
  CHECK_THROWS_AS(uhn_label::parse("a"), parse_error);
  CHECK_THROWS_AS(uhn_label::parse(""), parse_error);
}

TEST_CASE("regular tree truncations") {
  auto t = truncated_regular_tree(2, 2);
  CHECK(t.vertex_count() == 5);
  CHECK_NOTHROW(audit_tree(t));
  // κ=2 gives the integer-line picture: a path.
  auto g = finite_graph::from_tree(t);
  int leaves = 0;
  for (int v = 0; v < g.n; ++v) {
    CHECK(g.degree(v) <= 2);
    leaves += g.degree(v) == 1;
  }
  CHECK(leaves == 2);

  auto star = truncated_regular_tree(3, 1);
  CHECK(star.vertex_count() == 4);
  CHECK(star.children[0].size() == 3);

  auto t3 = truncated_regular_tree(3, 3);
  CHECK(t3.vertex_count() == 22);
  CHECK_NOTHROW(audit_tree(t3));
  CHECK(t3.depth() == 3);
  // Interior non-root vertices have κ−1 children.
  for (int v = 1; v < t3.vertex_count(); ++v)
    CHECK(t3.children[std::size_t(v)].size() ==
          (t3.depth_of(v) < 3 ? 2u : 0u));

  CHECK_THROWS_AS(truncated_regular_tree(1, 2), std::invalid_argument);
  CHECK_THROWS_AS(truncated_regular_tree(3, -1), std::invalid_argument);
}

TEST_CASE("two-parameter branching tree has linear-width levels") {
  // κ=3, κ̃=1: level d ≥ 1 holds 2d+1 vertices, so depth 7 gives 64 total.
  auto t = truncated_regularish_tree(3, 1, 7);
  CHECK_NOTHROW(audit_tree(t));
  CHECK(t.vertex_count() == 64);
  std::vector<int> per_level(8, 0);
  for (int v = 0; v < t.vertex_count(); ++v) ++per_level[std::size_t(t.depth_of(v))];
  for (int d = 1; d <= 7; ++d) CHECK(per_level[std::size_t(d)] == 2 * d + 1);
  // Vertices whose label ends in 1 have κ̃ children when interior.
  for (int v = 1; v < t.vertex_count(); ++v) {
    if (t.depth_of(v) == 7) continue;
    const auto& path = t.labels[std::size_t(v)].path;
    CHECK(t.children[std::size_t(v)].size() == (path.back() == 1 ? 1u : 2u));
  }
}

TEST_CASE("offspring distributions expose pmf and mean") {
  auto b = offspring_distribution::binomial(2, 0.5);
  CHECK(b.pmf.size() == 3);
  CHECK(b.pmf[0] == Approx(0.25).margin(1e-15));
  CHECK(b.pmf[1] == Approx(0.5).margin(1e-15));
  CHECK(b.mean == Approx(1.0).margin(1e-12));

  auto pois = offspring_distribution::poisson(2.0);
  double s = std::accumulate(pois.pmf.begin(), pois.pmf.end(), 0.0);
  CHECK(s == Approx(1.0).margin(1e-12));
  CHECK(pois.mean == Approx(2.0).margin(1e-9));

  CHECK(offspring_distribution::delta(3).mean == 3.0);
  CHECK(offspring_distribution::uniform(0, 2).mean == Approx(1.0));

  CHECK_THROWS_AS(offspring_distribution::from_pmf({0.5, 0.6}),
                  std::invalid_argument);
  CHECK_THROWS_AS(offspring_distribution::from_pmf({1.5, -0.5}),
                  std::invalid_argument);

  auto trunc = pois.truncated(4);
  CHECK(trunc.pmf.size() == 5);
  CHECK(std::accumulate(trunc.pmf.begin(), trunc.pmf.end(), 0.0) ==
        Approx(1.0).margin(1e-12));
}

TEST_CASE("size-biased offspring shift") {
  auto d2 = unimodular_offspring(offspring_distribution::delta(3));
  REQUIRE(d2.pmf.size() == 3);
  CHECK(d2.pmf[2] == Approx(1.0).margin(1e-15));

  auto half = unimodular_offspring(
      offspring_distribution::from_pmf({0.0, 0.5, 0.5}));
  CHECK(half.pmf[0] == Approx(1.0 / 3).margin(1e-14));
  CHECK(half.pmf[1] == Approx(2.0 / 3).margin(1e-14));

  // Poisson is the fixed point of the shift.
  auto pois = offspring_distribution::poisson(2.0);
  auto shifted = unimodular_offspring(pois);
  for (int k = 0; k <= 40; ++k) {
    const double a = k < int(pois.pmf.size()) ? pois.pmf[std::size_t(k)] : 0.0;
    const double b =
        k < int(shifted.pmf.size()) ? shifted.pmf[std::size_t(k)] : 0.0;
    CHECK(std::abs(a - b) < 1e-12);
  }

  CHECK_THROWS_AS(unimodular_offspring(offspring_distribution::delta(0)),
                  std::invalid_argument);
}

TEST_CASE("branching-process sampler") {
  stream base(2024);
  auto d0 = offspring_distribution::delta(0);

  for (int r = 0; r < 10; ++r) {
    auto t = sample_gw_tree(d0, d0, 5, base.fork(uint64_t(r)));
    CHECK(t.vertex_count() == 1);
  }

  auto t = sample_gw_tree(offspring_distribution::delta(2), d0, 3,
                          base.fork(77));
  REQUIRE(t.vertex_count() == 3);
  CHECK(t.labels[1].text() == "1");
  CHECK(t.labels[2].text() == "2");
  CHECK_NOTHROW(audit_tree(t));

  SECTION("two-generation mean vertex count") {
    auto bin = offspring_distribution::binomial(2, 0.5);
    const int m = 100000;
    double sum = 0, sq = 0;
    for (int r = 0; r < m; ++r) {
      auto tr = sample_gw_tree(bin, bin, 2, base.fork(1000).fork(uint64_t(r)));
      const double n = tr.vertex_count();
      sum += n;
      sq += n * n;
    }
    const double mean = sum / m;
    const double se = std::sqrt((sq / m - mean * mean) / m);
    CHECK(std::abs(mean - 3.0) < 4 * se);
  }

  SECTION("per-generation child counts match the requested pmf") {
    auto uni = offspring_distribution::uniform(0, 2);
    const int m = 20000;
    double gen1[3] = {0, 0, 0}, gen2[3] = {0, 0, 0};
    double n1 = 0, n2 = 0;
    for (int r = 0; r < m; ++r) {
      auto tr = sample_gw_tree(uni, uni, 2, base.fork(2000).fork(uint64_t(r)));
      for (int v = 0; v < tr.vertex_count(); ++v) {
        const int d = tr.depth_of(v);
        const auto c = tr.children[std::size_t(v)].size();
        if (d == 0) {
          ++gen1[c];
          ++n1;
        } else if (d == 1) {
          ++gen2[c];
          ++n2;
        }
      }
    }
    for (int k = 0; k < 3; ++k) {
      const double p1 = gen1[k] / n1;
      const double se1 = std::sqrt(p1 * (1 - p1) / n1);
      CHECK(std::abs(p1 - 1.0 / 3) < 4 * se1);
      const double p2 = gen2[k] / n2;
      const double se2 = std::sqrt(p2 * (1 - p2) / n2);
      CHECK(std::abs(p2 - 1.0 / 3) < 4 * se2);
    }
  }

  SECTION("deeper caps extend rather than reshuffle") {
    auto uni = offspring_distribution::uniform(0, 2);
    auto small = sample_gw_tree(uni, uni, 2, base.fork(3000));
    auto big = sample_gw_tree(uni, uni, 4, base.fork(3000));
    std::set<std::string> big_labels;
    for (const auto& l : big.labels) big_labels.insert(l.text());
    for (const auto& l : small.labels)
      CHECK(big_labels.count(l.text()) == 1);
    // Depth-2 prefix of the deeper tree matches exactly.
    int big_upto2 = 0;
    for (const auto& l : big.labels) big_upto2 += l.depth() <= 2;
    CHECK(big_upto2 == small.vertex_count());
  }

  SECTION("delta offspring reproduce the regular truncation") {
    auto rho0 = offspring_distribution::delta(3);
    auto rho = unimodular_offspring(rho0);
    auto grown = sample_gw_tree(rho0, rho, 4, base.fork(4000));
    auto exact = truncated_regular_tree(3, 4);
    CHECK(to_label_text(grown) == to_label_text(exact));
  }
}

TEST_CASE("independent-edge random graph") {
  sequence rng(5, 11);
  auto g0 = erdos_renyi(20, 0.0, rng);
  CHECK(g0.edge_count() == 0);

  auto k3 = erdos_renyi(3, 3.0, rng);
  CHECK(k3.edge_count() == 3);

  CHECK_THROWS_AS(erdos_renyi(0, 1.0, rng), std::invalid_argument);

  // Probability above 1 clamps to the complete graph.
  auto k2 = erdos_renyi(2, 5.0, rng);
  CHECK(k2.edge_count() == 1);

  SECTION("mean degree at n=10000, rate 2") {
    const int seeds = 50, n = 10000;
    double sum = 0, sq = 0;
    for (int sdx = 0; sdx < seeds; ++sdx) {
      sequence r(900 + sdx, 11);
      auto g = erdos_renyi(n, 2.0, r);
      const double md = 2.0 * double(g.edge_count()) / n;
      sum += md;
      sq += md * md;
    }
    const double mean = sum / seeds;
    const double se = std::sqrt((sq / seeds - mean * mean) / seeds);
    CHECK(std::abs(mean - 2.0) < 4 * se);
  }

  SECTION("same seed, same graph") {
    sequence a(42, 11), b(42, 11);
    auto ga = erdos_renyi(500, 3.0, a);
    auto gb = erdos_renyi(500, 3.0, b);
    CHECK(ga.adj == gb.adj);
  }
}

TEST_CASE("half-edge matching with erasure") {
  sequence rng(7, 11);
  std::vector<int> zeros(6, 0);
  CHECK(configuration_model(zeros, rng).edge_count() == 0);

  std::vector<int> pair{1, 1};
  auto g = configuration_model(pair, rng);
  REQUIRE(g.edge_count() == 1);
  CHECK(g.has_edge(0, 1));

  std::vector<int> odd{1, 1, 1};
  CHECK_THROWS_AS(configuration_model(odd, rng), std::invalid_argument);

  SECTION("erasure touches few vertices at three-regular degrees") {
    const int n = 1000, seeds = 20;
    std::vector<int> deg(n, 3);
    double frac = 0;
    for (int sdx = 0; sdx < seeds; ++sdx) {
      sequence r(300 + sdx, 11);
      auto gg = configuration_model(deg, r);
      int ok = 0;
      for (int v = 0; v < n; ++v) ok += gg.degree(v) == 3;
      frac += double(ok) / n;
    }
    CHECK(frac / seeds >= 0.99);
  }
}

TEST_CASE("uniform regular graph by pairing rejection") {
  sequence rng(13, 11);
  auto k4 = random_regular(4, 3, rng);
  CHECK(k4.edge_count() == 6);
  for (int v = 0; v < 4; ++v) CHECK(k4.degree(v) == 3);

  CHECK_THROWS_AS(random_regular(5, 3, rng), std::invalid_argument);
  CHECK_THROWS_AS(random_regular(3, 3, rng), std::invalid_argument);
  CHECK_THROWS_AS(random_regular(100, 3, rng, 0), std::runtime_error);

  for (int sdx = 0; sdx < 5; ++sdx) {
    sequence r(600 + sdx, 11);
    auto g = random_regular(100, 2, r);
    for (int v = 0; v < 100; ++v) CHECK(g.degree(v) == 2);
  }
}

TEST_CASE("boundary operators") {
  auto p5 = finite_graph::path(5);
  std::vector<int> a{0};
  auto r = boundary_sets(p5, a);
  CHECK(r.boundary == std::vector<int>{1});
  CHECK(r.second_boundary == std::vector<int>{1, 2});

  std::vector<int> all{0, 1, 2, 3, 4};
  r = boundary_sets(p5, all);
  CHECK(r.boundary.empty());
  CHECK(r.second_boundary.empty());

  std::vector<int> mid{2};
  r = boundary_sets(p5, mid);
  CHECK(r.boundary == std::vector<int>{1, 3});
  CHECK(r.second_boundary == std::vector<int>{0, 1, 3, 4});

  std::vector<int> bad{7};
  CHECK_THROWS_AS(boundary_sets(p5, bad), std::invalid_argument);

  SECTION("disjointness and edge coverage on random graphs") {
    for (int sdx = 0; sdx < 5; ++sdx) {
      sequence rg(80 + sdx, 11);
      auto g = erdos_renyi(30, 3.0, rg);
      std::vector<int> set;
      for (int v = 0; v < g.n; ++v)
        if (rg.below(3) == 0) set.push_back(v);
      auto b = boundary_sets(g, set);
      std::set<int> in_a(set.begin(), set.end());
      std::set<int> d1(b.boundary.begin(), b.boundary.end());
      std::set<int> d2(b.second_boundary.begin(), b.second_boundary.end());
      for (int v : d1) {
        CHECK(in_a.count(v) == 0);
        CHECK(d2.count(v) == 1);  // ∂A ⊆ ∂²A
      }
      for (int v : d2) CHECK(in_a.count(v) == 0);
      // Every edge leaving A lands in ∂A.
      for (int u : set)
        for (int w : g.adj[std::size_t(u)])
          if (!in_a.count(w)) CHECK(d1.count(w) == 1);
    }
  }
}

TEST_CASE("edge list text round trip") {
  sequence rng(21, 11);
  auto g = erdos_renyi(40, 4.0, rng);
  const std::string text = to_edge_list_text(g);
  auto h = parse_edge_list_text(text);
  CHECK(h.n == g.n);
  CHECK(h.adj == g.adj);

  // Lines are sorted "u v" pairs with u < v.
  std::istringstream is(text);
  std::string prev, line;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    int u, v;
    ls >> u >> v;
    CHECK(u < v);
    if (!prev.empty()) {
      std::istringstream lp(prev);
      int pu, pv;
      lp >> pu >> pv;
      CHECK((pu < u || (pu == u && pv < v)));
    }
    prev = line;
  }

  CHECK_THROWS_AS(parse_edge_list_text("0 0\n"), parse_error);
  CHECK_THROWS_AS(parse_edge_list_text("1 2 3\n"), parse_error);
  CHECK_THROWS_AS(parse_edge_list_text("x y\n"), parse_error);
}

TEST_CASE("label list text round trip") {
  stream base(31);
  auto uni = offspring_distribution::uniform(0, 3);
  auto t = sample_gw_tree(uni, uni, 3, base.fork(1));
  const std::string text = to_label_text(t);
  auto back = parse_label_text(text);
  CHECK(to_label_text(back) == text);
  CHECK(back.vertex_count() == t.vertex_count());

  CHECK(parse_label_text("ø\n").vertex_count() == 1);
  CHECK_THROWS_AS(parse_label_text("ø\n1.1\n"), parse_error);  // parent gap
  CHECK_THROWS_AS(parse_label_text("ø\n2\n"), parse_error);    // coordinate gap
  CHECK_THROWS_AS(parse_label_text("1\n"), parse_error);       // no root
  CHECK_THROWS_AS(parse_label_text("ø\nbad\n"), parse_error);
}

TEST_CASE("audit rejects hand-corrupted trees") {
  auto t = truncated_regular_tree(2, 1);
  t.labels[2] = uhn_label::parse("5");
  CHECK_THROWS_AS(audit_tree(t), std::logic_error);
}
