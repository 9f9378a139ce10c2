#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "rtvar/errors.hpp"
#include "rtvar/forest.hpp"
#include "rtvar/random.hpp"

using namespace rtvar;

namespace {

/// y = x0 + 0.5 x1 * noise on [0,1]^d.
OfflineDataset synthetic(std::size_t n, std::size_t d, std::uint64_t seed, bool integer_y = false) {
  RngStream rng(seed);
  OfflineDataset data{Matrix(n, d), std::vector<double>(n), seed};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) data.x(i, k) = rng.uniform();
    const double y = 10.0 * data.x(i, 0) + 5.0 * data.x(i, 1 % d) * rng.normal();
    data.loss[i] = integer_y ? std::round(y) : y;
  }
  return data;
}

ForestConfig small_forest(std::size_t trees = 20) {
  ForestConfig c;
  c.n_trees = trees;
  c.seed = 123;
  return c;
}

double sum(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

Tree root_only(std::size_t n) {
  Tree t;
  t.nodes.push_back(TreeNode{TreeNode::kLeaf, 0.0, 0, static_cast<std::uint32_t>(n)});
  t.members.resize(n);
  std::iota(t.members.begin(), t.members.end(), 0u);
  return t;
}

}  // namespace

TEST_SUITE("fit_tree") {
  TEST_CASE("a single point gives a single leaf") {
    const auto data = synthetic(1, 3, 1);
    const Tree t = fit_tree(data, small_forest().resolved(3), 0);
    REQUIRE(t.nodes.size() == 1);
    CHECK(t.nodes[0].is_leaf());
    CHECK(t.members == std::vector<std::uint32_t>{0});
  }

  TEST_CASE("constant responses predict the constant everywhere") {
    auto data = synthetic(200, 3, 2);
    std::fill(data.loss.begin(), data.loss.end(), 7.25);
    const Forest f = Forest::fit(data, small_forest());
    RngStream rng(3);
    for (int i = 0; i < 20; ++i) {
      const std::vector<double> x{rng.uniform(), rng.uniform(), rng.uniform()};
      CHECK(f.predict_quantile(x, 0.1) == 7.25);
      CHECK(f.predict_quantile(x, 0.9) == 7.25);
    }
  }

  TEST_CASE("min_node_size = n forces a root-only tree") {
    const auto data = synthetic(50, 2, 4);
    ForestConfig c = small_forest();
    c.min_node_size = 50;
    const Tree t = fit_tree(data, c.resolved(2), 0);
    CHECK(t.nodes.size() == 1);
  }

  TEST_CASE("empty dataset is rejected") {
    const OfflineDataset empty{Matrix(0, 2), {}, 0};
    CHECK_THROWS_AS(fit_tree(empty, small_forest().resolved(2), 0), std::invalid_argument);
  }

  TEST_CASE("constant features make the node a leaf") {
    auto data = synthetic(100, 2, 5);
    for (std::size_t i = 0; i < 100; ++i) data.x(i, 0) = data.x(i, 1) = 1.0;
    ForestConfig c = small_forest();
    c.bootstrap = false;
    CHECK(fit_tree(data, c.resolved(2), 0).nodes.size() == 1);
  }

  TEST_CASE("leaf sizes and child balance are respected") {
    const auto data = synthetic(2000, 3, 6);
    ForestConfig c = small_forest();
    c.bootstrap = false;
    c.min_node_size = 7;
    c.min_child_fraction = 0.2;
    const auto rc = c.resolved(3);
    for (std::size_t b = 0; b < 5; ++b) {
      const Tree t = fit_tree(data, rc, b);
      // Count training points reaching each node.
      std::vector<std::size_t> count(t.nodes.size(), 0);
      for (std::size_t i = 0; i < data.size(); ++i) {
        std::size_t node = 0;
        while (true) {
          ++count[node];
          const TreeNode& nd = t.nodes[node];
          if (nd.is_leaf()) break;
          node = data.x(i, static_cast<std::size_t>(nd.feature)) <= nd.threshold ? nd.left : nd.right;
        }
      }
      for (std::size_t k = 0; k < t.nodes.size(); ++k) {
        const TreeNode& nd = t.nodes[k];
        if (nd.is_leaf()) {
          CHECK(nd.right >= 7);
          CHECK(count[k] == nd.right);
        } else {
          const double parent = static_cast<double>(count[k]);
          CHECK(count[nd.left] + count[nd.right] == count[k]);
          CHECK(static_cast<double>(count[nd.left]) >= std::ceil(0.2 * parent));
          CHECK(static_cast<double>(count[nd.right]) >= std::ceil(0.2 * parent));
        }
      }
    }
  }

  TEST_CASE("oversized leaves are split when max_leaf_fraction is active") {
    auto data = synthetic(400, 1, 7);
    std::fill(data.loss.begin(), data.loss.end(), 1.0);  // zero gain everywhere
    ForestConfig c = small_forest();
    c.bootstrap = false;
    c.max_leaf_fraction = 0.1;
    const Tree t = fit_tree(data, c.resolved(1), 0);
    for (const auto& nd : t.nodes) {
      if (nd.is_leaf()) CHECK(nd.right <= 40);
    }
  }

  TEST_CASE("every feature is eventually tried") {
    const auto data = synthetic(1000, 4, 8);
    ForestConfig c = small_forest(30);
    c.mtry = 1;
    const Forest f = Forest::fit(data, c);
    std::set<std::int32_t> used;
    for (const auto& t : f.trees()) {
      for (const auto& nd : t.nodes) {
        if (!nd.is_leaf()) used.insert(nd.feature);
      }
    }
    CHECK(used.size() == 4);
  }
}

TEST_SUITE("honesty") {
  TEST_CASE("estimation members are disjoint from the structure sample") {
    const auto data = synthetic(600, 3, 9);
    for (bool bootstrap : {false, true}) {
      ForestConfig c = small_forest(10);
      c.honest = true;
      c.bootstrap = bootstrap;
      const Forest f = Forest::fit(data, c);
      CHECK(f.config().min_node_size == 10);
      for (const Tree& t : f.trees()) {
        const std::set<std::uint32_t> structure(t.structure_indices.begin(),
                                                t.structure_indices.end());
        REQUIRE(!structure.empty());
        for (const auto m : t.members) CHECK(structure.count(m) == 0);
        for (const auto& nd : t.nodes) {
          if (nd.is_leaf()) CHECK(nd.right >= 10);
        }
      }
    }
  }
}

TEST_SUITE("weights") {
  TEST_CASE("root-only tree weights are uniform") {
    const Tree t = root_only(4);
    const auto w = tree_weights(t, std::vector<double>{0.3}, 4);
    for (double v : w) CHECK(v == 0.25);
  }

  TEST_CASE("weights spread over the query's leaf") {
    Tree t;
    t.nodes = {TreeNode{0, 0.5, 1, 2}, TreeNode{TreeNode::kLeaf, 0.0, 0, 2},
               TreeNode{TreeNode::kLeaf, 0.0, 2, 8}};
    t.members = {2, 7, 0, 1, 3, 4, 5, 6, 8, 9};
    const auto w = tree_weights(t, std::vector<double>{0.1}, 10);
    for (std::size_t i = 0; i < 10; ++i) CHECK(w[i] == ((i == 2 || i == 7) ? 0.5 : 0.0));
    CHECK(sum(tree_weights(t, std::vector<double>{0.9}, 10)) == 1.0);
  }

  TEST_CASE("bootstrap duplicates count with multiplicity") {
    Tree t = root_only(0);
    t.nodes[0].right = 4;
    t.members = {1, 1, 1, 3};
    const auto w = tree_weights(t, std::vector<double>{0.0}, 5);
    CHECK(w == std::vector<double>{0.0, 0.75, 0.0, 0.25, 0.0});
  }

  TEST_CASE("single-tree forest equals its tree") {
    const auto data = synthetic(300, 2, 10);
    const Forest f = Forest::fit(data, small_forest(1));
    const std::vector<double> x{0.4, 0.6};
    CHECK(forest_weights(f, x) == tree_weights(f.trees()[0], x, data.size()));
  }

  TEST_CASE("two root-only trees give uniform weights") {
    const Forest f(small_forest(2).resolved(1), 1, {1, 2, 3, 4, 5}, {root_only(5), root_only(5)});
    for (double v : forest_weights(f, std::vector<double>{0.0})) CHECK(v == doctest::Approx(0.2));
  }

  TEST_CASE("averaging two disagreeing trees") {
    Tree a = root_only(0);
    a.nodes[0].right = 1;
    a.members = {0};
    Tree b = a;
    b.members = {1};
    const Forest f(small_forest(2).resolved(1), 1, {3.0, 4.0}, {a, b});
    CHECK(forest_weights(f, std::vector<double>{0.0}) == std::vector<double>{0.5, 0.5});
  }

  TEST_CASE("forest weights are a probability vector") {
    const auto data = synthetic(1500, 3, 11);
    const Forest f = Forest::fit(data, small_forest(40));
    RngStream rng(12);
    for (int q = 0; q < 50; ++q) {
      const std::vector<double> x{rng.uniform() * 1.4 - 0.2, rng.uniform(), rng.uniform()};
      const auto w = forest_weights(f, x);
      for (double v : w) CHECK(v >= 0.0);
      CHECK(std::abs(sum(w) - 1.0) < 1e-12);
    }
  }

  TEST_CASE("sparse and dense ECDFs agree bit for bit") {
    const auto data = synthetic(800, 3, 13);
    const Forest f = Forest::fit(data, small_forest(25));
    const std::vector<double> x{0.2, 0.7, 0.5};
    const WeightedEcdf dense(f.responses(), f.weights(x));
    const WeightedEcdf sparse = f.ecdf(x);
    CHECK(std::equal(dense.responses().begin(), dense.responses().end(),
                     sparse.responses().begin(), sparse.responses().end()));
    CHECK(std::equal(dense.weights().begin(), dense.weights().end(), sparse.weights().begin(),
                     sparse.weights().end()));
  }
}

TEST_SUITE("quantiles") {
  TEST_CASE("uniform weights over 1..5") {
    const Forest f(small_forest(1).resolved(1), 1, {4, 1, 5, 2, 3}, {root_only(5)});
    const std::vector<double> x{0.0};
    CHECK(predict_quantile(f, x, 0.5) == 3.0);
    CHECK(predict_quantile(f, x, 0.999) == 5.0);
    CHECK(predict_quantile(f, x, 0.1) == 1.0);
  }

  TEST_CASE("root-only tree equals the sort-based empirical quantile") {
    RngStream rng(14);
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t n = 1 + rng.below(60);
      auto data = synthetic(n, 2, 100 + static_cast<std::uint64_t>(trial));
      for (auto& y : data.loss) y = std::round(rng.normal() * 4.0);  // force ties
      ForestConfig c = small_forest(1);
      c.bootstrap = false;
      c.min_node_size = n;
      const Forest f = Forest::fit(data, c);
      const double alpha = rng.uniform();
      CHECK(predict_quantile(f, std::vector<double>{0.5, 0.5}, alpha) ==
            oracle::sorted_quantile(data.loss, alpha));
    }
  }

  TEST_CASE("cdf limits and consistency with the quantile") {
    const auto data = synthetic(500, 2, 15);
    const Forest f = Forest::fit(data, small_forest());
    const std::vector<double> x{0.5, 0.5};
    const double lo = *std::min_element(data.loss.begin(), data.loss.end());
    const double hi = *std::max_element(data.loss.begin(), data.loss.end());
    CHECK(predict_cdf(f, x, lo - 1.0) == 0.0);
    CHECK(predict_cdf(f, x, hi + 1.0) == doctest::Approx(1.0).epsilon(1e-12));
    double previous = 0.0;
    for (double y = lo - 1; y <= hi + 1; y += 0.25) {
      const double v = predict_cdf(f, x, y);
      CHECK(v >= previous);
      CHECK(v <= 1.0);
      previous = v;
    }
    for (double a : {0.05, 0.3, 0.5, 0.9, 0.99}) {
      CHECK(predict_cdf(f, x, predict_quantile(f, x, a)) >= a);
    }
  }

  TEST_CASE("monotone in the level") {
    const auto data = synthetic(700, 3, 16);
    const Forest f = Forest::fit(data, small_forest());
    RngStream rng(17);
    for (int q = 0; q < 30; ++q) {
      const std::vector<double> x{rng.uniform(), rng.uniform(), rng.uniform()};
      double previous = -1e300;
      for (double a = 0.01; a < 1.0; a += 0.01) {
        const double v = predict_quantile(f, x, a);
        CHECK(v >= previous);
        previous = v;
      }
    }
  }

  TEST_CASE("shifting responses shifts every quantile exactly") {
    const auto data = synthetic(600, 3, 18, true);
    auto shifted = data;
    for (auto& y : shifted.loss) y += 1000.0;
    const Forest f = Forest::fit(data, small_forest());
    const Forest g = Forest::fit(shifted, small_forest());
    RngStream rng(19);
    for (int q = 0; q < 40; ++q) {
      const std::vector<double> x{rng.uniform(), rng.uniform(), rng.uniform()};
      for (double a : {0.1, 0.5, 0.9, 0.99}) {
        CHECK(predict_quantile(g, x, a) == predict_quantile(f, x, a) + 1000.0);
      }
    }
  }

  TEST_CASE("level outside (0,1) and wrong dimension are rejected") {
    const auto data = synthetic(50, 2, 20);
    const Forest f = Forest::fit(data, small_forest(2));
    CHECK_THROWS(predict_quantile(f, std::vector<double>{0.5, 0.5}, 0.0));
    CHECK_THROWS(predict_quantile(f, std::vector<double>{0.5, 0.5}, 1.0));
    CHECK_THROWS_AS(predict_quantile(f, std::vector<double>{0.5}, 0.5), DimensionError);
  }
}

TEST_SUITE("determinism and config") {
  TEST_CASE("refits and thread counts give identical forests") {
    const auto data = synthetic(1000, 3, 21);
    const Forest a = Forest::fit(data, small_forest(16), 1);
    const Forest b = Forest::fit(data, small_forest(16), 1);
    const Forest c = Forest::fit(data, small_forest(16), 4);
    CHECK(a == b);
    CHECK(a == c);
    const std::vector<double> x{0.3, 0.3, 0.3};
    CHECK(a.predict_quantile(x, 0.95) == c.predict_quantile(x, 0.95));
  }

  TEST_CASE("defaults resolve from the dimension") {
    const auto c = ForestConfig{}.resolved(4);
    CHECK(c.mtry == 2);
    CHECK(c.min_node_size == 5);
    ForestConfig h;
    h.honest = true;
    CHECK(h.resolved(9).min_node_size == 10);
    CHECK(h.resolved(9).mtry == 3);
  }

  TEST_CASE("leaf-size schedule grows the minimum leaf with n") {
    ForestConfig c;
    CHECK(c.resolved(4, 10000).min_node_size == 5);
    c.leaf_growth_scale = 1.0;
    CHECK(c.resolved(4, 10000).min_node_size == 100);
    CHECK(c.resolved(4, 16).min_node_size == 5);
    c.leaf_growth_exponent = 0.25;
    c.leaf_growth_scale = 2.0;
    CHECK(c.resolved(4, 10000).min_node_size == 20);

    const auto data = synthetic(2500, 2, 22);
    ForestConfig g = small_forest(5);
    g.leaf_growth_scale = 1.0;
    const Forest f = Forest::fit(data, g);
    CHECK(f.config().min_node_size == 50);
    for (const Tree& t : f.trees()) {
      for (const auto& nd : t.nodes) {
        if (nd.is_leaf()) CHECK(nd.right >= 50);
      }
    }
  }

  TEST_CASE("invalid settings are rejected") {
    ForestConfig c;
    c.mtry = 5;
    CHECK_THROWS_AS(c.resolved(4), ConfigError);
    c = ForestConfig{};
    c.min_child_fraction = 0.6;
    CHECK_THROWS_AS(c.resolved(4), ConfigError);
    c = ForestConfig{};
    c.n_trees = 0;
    CHECK_THROWS_AS(c.resolved(4), ConfigError);
    c = ForestConfig{};
    c.leaf_growth_exponent = 1.0;
    CHECK_THROWS_AS(c.resolved(4), ConfigError);
  }
}
