#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rtvar/market.hpp"
#include "rtvar/quantile_model.hpp"

namespace rtvar {

/// Growth parameters for the quantile regression forest. Zero for mtry or
/// min_node_size means "use the default for this dimension / honesty mode".
struct ForestConfig {
  std::size_t n_trees = 500;
  std::size_t mtry = 0;            // default ceil(d/3)
  std::size_t min_node_size = 0;   // default 5, or 10 when honest
  double max_leaf_fraction = 1.0;  // leaves larger than this share of the tree sample force a split
  double min_child_fraction = 0.1; // gamma: each child keeps at least this share of its parent
  // Leaf-size schedule: when leaf_growth_scale > 0 the minimum leaf size for a
  // training set of n points is max(min_node_size, ceil(scale * n^exponent)).
  double leaf_growth_scale = 0.0;
  double leaf_growth_exponent = 0.5;
  bool honest = false;
  bool bootstrap = true;
  std::uint64_t seed = 0;

  /// Copy with the dimension-dependent defaults filled in, validated against d.
  ForestConfig resolved(std::size_t d) const;
  /// Same, with the leaf-size schedule applied for n training points.
  ForestConfig resolved(std::size_t d, std::size_t n) const;
  void validate(std::size_t d) const;
};

/// Flat tree node. Internal nodes route x[feature] <= threshold to `left`.
/// Leaves have feature == kLeaf and index their members as
/// members[left, left + right).
struct TreeNode {
  static constexpr std::int32_t kLeaf = -1;

  std::int32_t feature = kLeaf;
  double threshold = 0.0;
  std::uint32_t left = 0;
  std::uint32_t right = 0;

  bool is_leaf() const { return feature == kLeaf; }
  bool operator==(const TreeNode&) const = default;
};

class Tree {
 public:
  std::vector<TreeNode> nodes;
  /// Training indices per leaf, with bootstrap multiplicity. In honest mode
  /// these are estimation-half indices only.
  std::vector<std::uint32_t> members;
  /// Sample used to choose splits (honest mode only; not serialized).
  std::vector<std::uint32_t> structure_indices;

  const TreeNode& leaf_for(std::span<const double> x) const;
  std::span<const std::uint32_t> leaf_members(const TreeNode& leaf) const {
    return {members.data() + leaf.left, leaf.right};
  }
  std::size_t leaf_count() const;

  bool operator==(const Tree& other) const {
    return nodes == other.nodes && members == other.members;
  }
};

/// Grows tree `tree_index` of a forest. All randomness comes from the stream
/// (config.seed, Forest, tree_index). `config` must already be resolved.
Tree fit_tree(const OfflineDataset& data, const ForestConfig& config, std::size_t tree_index);

/// w_i = (multiplicity of i in x's leaf) / (leaf size), over the n training points.
std::vector<double> tree_weights(const Tree& tree, std::span<const double> x, std::size_t n);

/// Weighted empirical CDF, stored as (response, weight) pairs sorted by
/// response with zero-weight points dropped.
class WeightedEcdf {
 public:
  WeightedEcdf() = default;
  WeightedEcdf(std::span<const double> responses, std::span<const double> weights);

  /// inf{y : F(y) >= alpha}.
  double quantile(double alpha) const;
  /// F(y) = sum of weights with response <= y.
  double cdf(double y) const;

  std::span<const double> responses() const { return responses_; }
  std::span<const double> weights() const { return weights_; }

 private:
  friend class Forest;
  std::vector<double> responses_;
  std::vector<double> weights_;
};

/// Quantile regression forest. Immutable after fit; safe to share across threads.
class Forest final : public QuantileModel {
 public:
  Forest() = default;
  Forest(ForestConfig config, std::size_t dim, std::vector<double> responses,
         std::vector<Tree> trees);

  static Forest fit(const OfflineDataset& data, const ForestConfig& config,
                    unsigned threads = 1);

  std::size_t dim() const override { return dim_; }
  std::size_t training_size() const { return responses_.size(); }
  const ForestConfig& config() const { return config_; }
  const std::vector<Tree>& trees() const { return trees_; }
  const std::vector<double>& responses() const { return responses_; }

  /// Dense forest weights: the average of tree_weights over trees.
  std::vector<double> weights(std::span<const double> x) const;
  WeightedEcdf ecdf(std::span<const double> x) const;

  double predict_quantile(std::span<const double> x, double alpha) const override;
  std::vector<double> predict_quantiles(std::span<const double> x,
                                        std::span<const double> alphas) const;
  double predict_cdf(std::span<const double> x, double y) const;

  bool operator==(const Forest& other) const;

 private:
  void check_dim(std::span<const double> x) const;
  void index_responses();

  ForestConfig config_;
  std::size_t dim_ = 0;
  std::vector<double> responses_;
  std::vector<Tree> trees_;
  // Position of each training index in the (response, index) order, and the
  // inverse permutation.
  std::vector<std::uint32_t> rank_of_;
  std::vector<std::uint32_t> by_rank_;
};

/// Free-function spellings of the forest queries.
std::vector<double> forest_weights(const Forest& forest, std::span<const double> x);
double predict_quantile(const Forest& forest, std::span<const double> x, double alpha);
double predict_cdf(const Forest& forest, std::span<const double> x, double y);

}  // namespace rtvar
