#include "rtvar/forest.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

#include "rtvar/errors.hpp"
#include "rtvar/parallel.hpp"
#include "rtvar/random.hpp"

namespace rtvar {

ForestConfig ForestConfig::resolved(std::size_t d) const {
  ForestConfig c = *this;
  if (c.mtry == 0) c.mtry = std::max<std::size_t>(1, (d + 2) / 3);
  if (c.min_node_size == 0) c.min_node_size = c.honest ? 10 : 5;
  c.validate(d);
  return c;
}

ForestConfig ForestConfig::resolved(std::size_t d, std::size_t n) const {
  ForestConfig c = resolved(d);
  if (c.leaf_growth_scale > 0.0) {
    const double grown =
        std::ceil(c.leaf_growth_scale * std::pow(static_cast<double>(n), c.leaf_growth_exponent));
    c.min_node_size = std::max(c.min_node_size, static_cast<std::size_t>(grown));
  }
  return c;
}

void ForestConfig::validate(std::size_t d) const {
  if (n_trees < 1) throw ConfigError("n_trees", "must be >= 1");
  if (mtry < 1 || mtry > d) {
    throw ConfigError("mtry", "must lie in [1, " + std::to_string(d) + "]");
  }
  if (min_node_size < 1) throw ConfigError("min_node_size", "must be >= 1");
  if (!(min_child_fraction > 0.0 && min_child_fraction <= 0.5)) {
    throw ConfigError("min_child_fraction", "must lie in (0, 0.5]");
  }
  if (!(max_leaf_fraction > 0.0 && max_leaf_fraction <= 1.0)) {
    throw ConfigError("max_leaf_fraction", "must lie in (0, 1]");
  }
  if (!(leaf_growth_scale >= 0.0)) throw ConfigError("leaf_growth_scale", "must be >= 0");
  if (!(leaf_growth_exponent >= 0.0 && leaf_growth_exponent < 1.0)) {
    throw ConfigError("leaf_growth_exponent", "must lie in [0, 1)");
  }
}

const TreeNode& Tree::leaf_for(std::span<const double> x) const {
  const TreeNode* node = &nodes.front();
  while (!node->is_leaf()) {
    node = &nodes[x[static_cast<std::size_t>(node->feature)] <= node->threshold ? node->left
                                                                                : node->right];
  }
  return *node;
}

std::size_t Tree::leaf_count() const {
  return static_cast<std::size_t>(
      std::count_if(nodes.begin(), nodes.end(), [](const TreeNode& n) { return n.is_leaf(); }));
}

namespace {

struct Split {
  std::int32_t feature = TreeNode::kLeaf;
  double threshold = 0.0;
  double gain = 0.0;
};

struct SplitLimits {
  std::size_t min_structure = 1;   // per child, structure sample
  std::size_t min_estimation = 0;  // per child, estimation sample (honest only)
  double min_gain = 0.0;           // candidates must strictly exceed this
};

class TreeGrower {
 public:
  TreeGrower(const OfflineDataset& data, const ForestConfig& config, RngStream& rng)
      : data_(data), config_(config), rng_(rng), features_(data.dim()) {
    std::iota(features_.begin(), features_.end(), 0);
  }

  Tree grow(std::vector<std::uint32_t> structure, std::vector<std::uint32_t> estimation) {
    structure_ = std::move(structure);
    estimation_ = std::move(estimation);
    const std::size_t sample_size = honest() ? estimation_.size() : structure_.size();
    max_leaf_size_ = config_.max_leaf_fraction * static_cast<double>(sample_size);

    Tree tree;
    tree.nodes.emplace_back();
    struct Pending {
      std::uint32_t node;
      std::size_t s_begin, s_end, e_begin, e_end;
    };
    std::vector<Pending> stack{{0, 0, structure_.size(), 0, estimation_.size()}};
    while (!stack.empty()) {
      const Pending p = stack.back();
      stack.pop_back();
      std::span<std::uint32_t> s(structure_.data() + p.s_begin, p.s_end - p.s_begin);
      std::span<std::uint32_t> e(estimation_.data() + p.e_begin, p.e_end - p.e_begin);

      const Split split = choose_split(s, e);
      if (split.feature == TreeNode::kLeaf) {
        const auto members = honest() ? e : s;
        TreeNode& leaf = tree.nodes[p.node];
        leaf.left = static_cast<std::uint32_t>(tree.members.size());
        leaf.right = static_cast<std::uint32_t>(members.size());
        tree.members.insert(tree.members.end(), members.begin(), members.end());
        continue;
      }

      const auto goes_left = [&](std::uint32_t i) {
        return data_.x(i, static_cast<std::size_t>(split.feature)) <= split.threshold;
      };
      const std::size_t s_mid =
          p.s_begin + static_cast<std::size_t>(
                          std::stable_partition(s.begin(), s.end(), goes_left) - s.begin());
      std::size_t e_mid = p.e_begin;
      if (honest()) {
        e_mid += static_cast<std::size_t>(std::stable_partition(e.begin(), e.end(), goes_left) -
                                          e.begin());
      }

      const auto left = static_cast<std::uint32_t>(tree.nodes.size());
      tree.nodes.emplace_back();
      tree.nodes.emplace_back();
      TreeNode& node = tree.nodes[p.node];
      node.feature = split.feature;
      node.threshold = split.threshold;
      node.left = left;
      node.right = left + 1;
      // Right child pushed first so the left subtree is laid out first.
      stack.push_back({left + 1, s_mid, p.s_end, e_mid, p.e_end});
      stack.push_back({left, p.s_begin, s_mid, p.e_begin, e_mid});
    }
    if (honest()) tree.structure_indices = std::move(structure_);
    return tree;
  }

 private:
  bool honest() const { return config_.honest; }

  Split choose_split(std::span<const std::uint32_t> s, std::span<const std::uint32_t> e) {
    const std::size_t m = s.size();
    const std::size_t node_size = honest() ? e.size() : m;
    const std::size_t min_node = config_.min_node_size;
    if (m < 2 * min_node || (honest() && e.size() < 2 * min_node)) return {};

    draw_candidates();
    SplitLimits limits;
    limits.min_structure = std::max<std::size_t>(
        min_node,
        static_cast<std::size_t>(std::ceil(config_.min_child_fraction * static_cast<double>(m))));
    limits.min_estimation = honest() ? min_node : 0;
    Split best = search(s, e, limits);
    if (best.feature == TreeNode::kLeaf && static_cast<double>(node_size) > max_leaf_size_) {
      // Oversized leaf: drop the balance requirement and accept zero-gain splits.
      limits.min_structure = min_node;
      limits.min_gain = -1.0;
      best = search(s, e, limits);
    }
    return best;
  }

  void draw_candidates() {
    const std::size_t d = features_.size();
    for (std::size_t i = 0; i < config_.mtry; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng_.below(d - i));
      std::swap(features_[i], features_[j]);
    }
    candidates_.assign(features_.begin(),
                       features_.begin() + static_cast<std::ptrdiff_t>(config_.mtry));
    std::sort(candidates_.begin(), candidates_.end());
  }

  Split search(std::span<const std::uint32_t> s, std::span<const std::uint32_t> e,
               const SplitLimits& limits) {
    const std::size_t m = s.size();
    Split best;
    best.gain = limits.min_gain;
    for (const std::size_t f : candidates_) {
      pairs_.resize(m);
      double total = 0.0;
      for (std::size_t k = 0; k < m; ++k) {
        pairs_[k] = {data_.x(s[k], f), data_.loss[s[k]]};
        total += pairs_[k].second;
      }
      std::sort(pairs_.begin(), pairs_.end(),
                [](const auto& a, const auto& b) { return a.first < b.first; });
      if (!(pairs_.front().first < pairs_.back().first)) continue;

      if (honest()) {
        est_values_.resize(e.size());
        for (std::size_t k = 0; k < e.size(); ++k) est_values_[k] = data_.x(e[k], f);
        std::sort(est_values_.begin(), est_values_.end());
      }

      double left_sum = 0.0;
      std::size_t est_left = 0;
      const double md = static_cast<double>(m);
      for (std::size_t i = 1; i < m; ++i) {
        left_sum += pairs_[i - 1].second;
        const double lo = pairs_[i - 1].first;
        const double hi = pairs_[i].first;
        if (!(lo < hi)) continue;
        if (i < limits.min_structure) continue;
        if (m - i < limits.min_structure) break;

        double threshold = lo + 0.5 * (hi - lo);
        if (!(threshold < hi)) threshold = lo;

        if (honest()) {
          while (est_left < est_values_.size() && est_values_[est_left] <= threshold) ++est_left;
          if (est_left < limits.min_estimation) continue;
          if (est_values_.size() - est_left < limits.min_estimation) break;
        }

        // Variance reduction n_L n_R / n * (mean_L - mean_R)^2 in a form that
        // is exactly shift-invariant whenever the sums are exact.
        const double nl = static_cast<double>(i);
        const double nr = md - nl;
        const double right_sum = total - left_sum;
        const double diff = left_sum * nr - right_sum * nl;
        const double gain = diff * diff / (nl * nr * md);
        if (gain > best.gain) {
          best.feature = static_cast<std::int32_t>(f);
          best.threshold = threshold;
          best.gain = gain;
        }
      }
    }
    return best;
  }

  const OfflineDataset& data_;
  const ForestConfig& config_;
  RngStream& rng_;
  std::vector<std::size_t> features_;
  std::vector<std::size_t> candidates_;
  std::vector<std::uint32_t> structure_;
  std::vector<std::uint32_t> estimation_;
  std::vector<std::pair<double, double>> pairs_;
  std::vector<double> est_values_;
  double max_leaf_size_ = 0.0;
};

std::vector<std::uint32_t> resample(std::span<const std::uint32_t> pool, RngStream& rng) {
  std::vector<std::uint32_t> out(pool.size());
  for (auto& v : out) v = pool[rng.below(pool.size())];
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

Tree fit_tree(const OfflineDataset& data, const ForestConfig& config, std::size_t tree_index) {
  const std::size_t n = data.size();
  if (n == 0) throw std::invalid_argument("fit_tree: empty dataset");
  if (n > std::numeric_limits<std::uint32_t>::max()) {
    throw std::invalid_argument("fit_tree: dataset too large");
  }
  RngStream rng(config.seed, StreamTag::Forest, tree_index);

  std::vector<std::uint32_t> all(n);
  std::iota(all.begin(), all.end(), 0u);
  std::vector<std::uint32_t> structure;
  std::vector<std::uint32_t> estimation;
  if (config.honest) {
    for (std::size_t i = n; i > 1; --i) std::swap(all[i - 1], all[rng.below(i)]);
    const std::size_t half = n / 2;
    structure.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(half));
    estimation.assign(all.begin() + static_cast<std::ptrdiff_t>(half), all.end());
    std::sort(structure.begin(), structure.end());
    std::sort(estimation.begin(), estimation.end());
    if (config.bootstrap) {
      if (!structure.empty()) structure = resample(structure, rng);
      estimation = resample(estimation, rng);
    }
  } else {
    structure = config.bootstrap ? resample(all, rng) : std::move(all);
  }

  TreeGrower grower(data, config, rng);
  return grower.grow(std::move(structure), std::move(estimation));
}

std::vector<double> tree_weights(const Tree& tree, std::span<const double> x, std::size_t n) {
  std::vector<double> w(n, 0.0);
  const auto members = tree.leaf_members(tree.leaf_for(x));
  const double share = 1.0 / static_cast<double>(members.size());
  for (const auto i : members) w[i] += share;
  return w;
}

WeightedEcdf::WeightedEcdf(std::span<const double> responses, std::span<const double> weights) {
  if (responses.size() != weights.size()) {
    throw DimensionError("WeightedEcdf: responses and weights differ in length");
  }
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < responses.size(); ++i) {
    if (weights[i] < 0.0) throw std::invalid_argument("WeightedEcdf: negative weight");
    if (weights[i] > 0.0) order.push_back(i);
  }
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return responses[a] < responses[b] || (responses[a] == responses[b] && a < b);
  });
  responses_.reserve(order.size());
  weights_.reserve(order.size());
  for (const auto i : order) {
    responses_.push_back(responses[i]);
    weights_.push_back(weights[i]);
  }
}

double WeightedEcdf::quantile(double alpha) const {
  if (responses_.empty()) throw std::logic_error("WeightedEcdf: no mass");
  double cumulative = 0.0;
  for (std::size_t i = 0; i < responses_.size(); ++i) {
    cumulative += weights_[i];
    if (cumulative >= alpha) return responses_[i];
  }
  // Rounding left the total a hair below alpha.
  return responses_.back();
}

double WeightedEcdf::cdf(double y) const {
  double cumulative = 0.0;
  for (std::size_t i = 0; i < responses_.size() && responses_[i] <= y; ++i) {
    cumulative += weights_[i];
  }
  return std::min(cumulative, 1.0);
}

Forest::Forest(ForestConfig config, std::size_t dim, std::vector<double> responses,
               std::vector<Tree> trees)
    : config_(config), dim_(dim), responses_(std::move(responses)), trees_(std::move(trees)) {
  index_responses();
}

Forest Forest::fit(const OfflineDataset& data, const ForestConfig& config, unsigned threads) {
  if (data.size() == 0) throw std::invalid_argument("Forest::fit: empty dataset");
  const ForestConfig resolved = config.resolved(data.dim(), data.size());
  std::vector<Tree> trees(resolved.n_trees);
  parallel_for(trees.size(), threads,
               [&](std::size_t b) { trees[b] = fit_tree(data, resolved, b); });
  return Forest(resolved, data.dim(), data.loss, std::move(trees));
}

void Forest::index_responses() {
  const std::size_t n = responses_.size();
  by_rank_.resize(n);
  std::iota(by_rank_.begin(), by_rank_.end(), 0u);
  std::sort(by_rank_.begin(), by_rank_.end(), [&](std::uint32_t a, std::uint32_t b) {
    return responses_[a] < responses_[b] || (responses_[a] == responses_[b] && a < b);
  });
  rank_of_.resize(n);
  for (std::size_t r = 0; r < n; ++r) rank_of_[by_rank_[r]] = static_cast<std::uint32_t>(r);
}

void Forest::check_dim(std::span<const double> x) const {
  if (x.size() != dim_) {
    throw DimensionError("query has " + std::to_string(x.size()) +
                         " features, model was trained on " + std::to_string(dim_));
  }
}

std::vector<double> Forest::weights(std::span<const double> x) const {
  check_dim(x);
  std::vector<double> w(responses_.size(), 0.0);
  for (const Tree& tree : trees_) {
    const auto members = tree.leaf_members(tree.leaf_for(x));
    const double share = 1.0 / static_cast<double>(members.size());
    for (const auto i : members) w[i] += share;
  }
  const double scale = 1.0 / static_cast<double>(trees_.size());
  for (double& v : w) v *= scale;
  return w;
}

WeightedEcdf Forest::ecdf(std::span<const double> x) const {
  check_dim(x);
  // Sparse version of weights(): same accumulation order, so identical bits,
  // but only the touched training points are sorted.
  thread_local std::vector<double> acc;
  thread_local std::vector<std::uint32_t> touched;
  if (acc.size() < responses_.size()) acc.resize(responses_.size(), 0.0);
  touched.clear();
  for (const Tree& tree : trees_) {
    const auto members = tree.leaf_members(tree.leaf_for(x));
    const double share = 1.0 / static_cast<double>(members.size());
    for (const auto i : members) {
      const std::uint32_t r = rank_of_[i];
      if (acc[r] == 0.0) touched.push_back(r);
      acc[r] += share;
    }
  }
  std::sort(touched.begin(), touched.end());
  const double scale = 1.0 / static_cast<double>(trees_.size());
  WeightedEcdf out;
  out.responses_.reserve(touched.size());
  out.weights_.reserve(touched.size());
  for (const auto r : touched) {
    out.responses_.push_back(responses_[by_rank_[r]]);
    out.weights_.push_back(acc[r] * scale);
    acc[r] = 0.0;
  }
  return out;
}

double Forest::predict_quantile(std::span<const double> x, double alpha) const {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must lie in (0, 1)");
  return ecdf(x).quantile(alpha);
}

std::vector<double> Forest::predict_quantiles(std::span<const double> x,
                                              std::span<const double> alphas) const {
  for (double a : alphas) {
    if (!(a > 0.0 && a < 1.0)) throw std::invalid_argument("alpha must lie in (0, 1)");
  }
  const WeightedEcdf f = ecdf(x);
  std::vector<double> out;
  out.reserve(alphas.size());
  for (double a : alphas) out.push_back(f.quantile(a));
  return out;
}

double Forest::predict_cdf(std::span<const double> x, double y) const { return ecdf(x).cdf(y); }

bool Forest::operator==(const Forest& other) const {
  return dim_ == other.dim_ && responses_ == other.responses_ && trees_ == other.trees_;
}

std::vector<double> forest_weights(const Forest& forest, std::span<const double> x) {
  return forest.weights(x);
}

double predict_quantile(const Forest& forest, std::span<const double> x, double alpha) {
  return forest.predict_quantile(x, alpha);
}

double predict_cdf(const Forest& forest, std::span<const double> x, double y) {
  return forest.predict_cdf(x, y);
}

}  // namespace rtvar
