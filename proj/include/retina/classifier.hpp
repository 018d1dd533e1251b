#pragma once

// Binary good/bad quality classifier: L2-regularized logistic regression and
// a CART random forest, stratified splitting, k-fold grid search and F2-based
// evaluation. "good" (label 1) is the positive class throughout.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "retina/error.hpp"
#include "retina/features.hpp"
#include "retina/format.hpp"
#include "retina/parallel.hpp"
#include "retina/random.hpp"

namespace retina {

using FeatureMatrix = std::vector<std::vector<double>>;
using Labels = std::vector<int>;  // 1 = good, 0 = bad

enum class ModelKind { logistic, forest };

[[nodiscard]] inline std::string_view to_string(ModelKind k) noexcept {
  return k == ModelKind::logistic ? "logistic" : "forest";
}

struct TreeNode {
  int feature = -1;  ///< -1 marks a leaf
  double threshold = 0.0;  ///< go left when x[feature] <= threshold
  int left = -1;
  int right = -1;
  double prob = 0.0;  ///< leaf probability of "good"
};

struct DecisionTree {
  std::uint64_t seed = 0;
  std::vector<TreeNode> nodes;

  [[nodiscard]] double predict(std::span<const double> x) const {
    int i = 0;
    while (nodes[static_cast<std::size_t>(i)].feature >= 0) {
      const auto& n = nodes[static_cast<std::size_t>(i)];
      i = x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right;
    }
    return nodes[static_cast<std::size_t>(i)].prob;
  }
};

struct LogisticParams {
  double l2 = 1e-3;
  int epochs = 500;
  double lr = 0.5;
  bool class_weighted = true;
};

struct ForestParams {
  int trees = 200;
  int max_depth = 8;
  int min_leaf = 2;
  int max_features = 0;  ///< 0 = ceil(sqrt(d))
  bool bootstrap = true;
  bool class_weighted = true;
  std::uint64_t seed = 0;
};

struct ClassifierModel {
  ModelKind kind = ModelKind::logistic;
  std::vector<std::string> schema;
  std::vector<double> mean;   ///< standardization, applied before the logistic
  std::vector<double> scale;  ///< layer; identity for forests
  std::vector<double> weights;
  double bias = 0.0;
  std::vector<DecisionTree> trees;

  void check_schema(std::size_t d) const {
    if (d != schema.size())
      throw SchemaMismatch("feature vector has " + std::to_string(d) + " values, model schema has " +
                           std::to_string(schema.size()));
  }

  /// Probability that x is "good".
  [[nodiscard]] double predict_proba(std::span<const double> x) const {
    check_schema(x.size());
    if (kind == ModelKind::logistic) {
      double z = bias;
      for (std::size_t k = 0; k < x.size(); ++k) z += weights[k] * ((x[k] - mean[k]) / scale[k]);
      return 1.0 / (1.0 + std::exp(-z));
    }
    double sum = 0.0;
    for (const auto& t : trees) sum += t.predict(x);
    return sum / static_cast<double>(trees.size());
  }
};

struct Prediction {
  double probability = 0.0;
  bool good = false;
};

[[nodiscard]] inline Prediction predict(const ClassifierModel& model, std::span<const double> features) {
  const double p = model.predict_proba(features);
  return {p, p >= 0.5};
}

namespace detail {

inline void check_training_set(const FeatureMatrix& X, const Labels& y) {
  if (X.empty()) throw InvalidArgument("empty training set");
  if (X.size() != y.size()) throw InvalidArgument("feature matrix and label vector differ in length");
  const auto d = X.front().size();
  if (d == 0) throw InvalidArgument("feature vectors are empty");
  for (const auto& row : X) {
    if (row.size() != d) throw InvalidArgument("ragged feature matrix");
    for (double v : row)
      if (!std::isfinite(v)) throw InvalidArgument("non-finite feature value in training set");
  }
  for (int l : y)
    if (l != 0 && l != 1) throw InvalidArgument("labels must be 0 (bad) or 1 (good)");
}

/// Per-sample weights inversely proportional to class frequency.
inline std::vector<double> class_weights(const Labels& y, bool enabled) {
  std::vector<double> w(y.size(), 1.0);
  if (!enabled) return w;
  const double n = static_cast<double>(y.size());
  const double pos = static_cast<double>(std::count(y.begin(), y.end(), 1));
  const double neg = n - pos;
  for (std::size_t i = 0; i < y.size(); ++i) w[i] = y[i] == 1 ? n / (2.0 * pos) : n / (2.0 * neg);
  return w;
}

inline std::vector<std::string> default_schema(std::size_t d) {
  std::vector<std::string> s;
  for (std::size_t k = 0; k < d; ++k)
    s.push_back(k < kFeatureNames.size() ? std::string(kFeatureNames[k]) : "f" + std::to_string(k));
  return s;
}

}  // namespace detail

struct LogisticFit {
  ClassifierModel model;
  std::vector<double> loss_history;  ///< objective after each accepted epoch, starting with the initial loss
};

/// Full-batch gradient descent on the class-weighted, L2-regularized
/// log-loss over z-scored features. A step that would raise the loss is
/// retried with half the learning rate, so the loss history never increases.
[[nodiscard]] inline LogisticFit fit_logistic(const FeatureMatrix& X, const Labels& y, const LogisticParams& p = {},
                                              std::vector<std::string> schema = {}) {
  detail::check_training_set(X, y);
  if (!(p.lr > 0.0) || p.epochs < 0 || p.l2 < 0.0) throw InvalidArgument("invalid logistic hyperparameters");
  const std::size_t n = X.size(), d = X.front().size();
  ClassifierModel m;
  m.kind = ModelKind::logistic;
  m.schema = schema.empty() ? detail::default_schema(d) : std::move(schema);
  if (m.schema.size() != d) throw SchemaMismatch("schema length differs from feature count");
  m.mean.assign(d, 0.0);
  m.scale.assign(d, 1.0);
  for (std::size_t k = 0; k < d; ++k) {
    double s = 0.0;
    for (const auto& r : X) s += r[k];
    m.mean[k] = s / static_cast<double>(n);
    double v = 0.0;
    for (const auto& r : X) v += (r[k] - m.mean[k]) * (r[k] - m.mean[k]);
    const double sd = std::sqrt(v / static_cast<double>(n));
    m.scale[k] = sd > 1e-12 ? sd : 1.0;
  }
  FeatureMatrix Z(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) Z[i][k] = (X[i][k] - m.mean[k]) / m.scale[k];
  const auto sw = detail::class_weights(y, p.class_weighted);
  const double wsum = std::accumulate(sw.begin(), sw.end(), 0.0);

  auto objective = [&](const std::vector<double>& w, double b) {
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double z = b;
      for (std::size_t k = 0; k < d; ++k) z += w[k] * Z[i][k];
      // log(1 + exp(-s z)) computed stably
      const double s = y[i] == 1 ? z : -z;
      loss += sw[i] * (s > 0 ? std::log1p(std::exp(-s)) : -s + std::log1p(std::exp(s)));
    }
    double reg = 0.0;
    for (double v : w) reg += v * v;
    return loss / wsum + 0.5 * p.l2 * reg;
  };

  std::vector<double> w(d, 0.0);
  double b = 0.0, lr = p.lr;
  double loss = objective(w, b);
  LogisticFit fit;
  fit.loss_history.push_back(loss);
  std::vector<double> gw(d), cand(d);
  for (int epoch = 0; epoch < p.epochs; ++epoch) {
    std::fill(gw.begin(), gw.end(), 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double z = b;
      for (std::size_t k = 0; k < d; ++k) z += w[k] * Z[i][k];
      const double r = sw[i] * (1.0 / (1.0 + std::exp(-z)) - y[i]) / wsum;
      for (std::size_t k = 0; k < d; ++k) gw[k] += r * Z[i][k];
      gb += r;
    }
    for (std::size_t k = 0; k < d; ++k) gw[k] += p.l2 * w[k];
    bool accepted = false;
    for (int tries = 0; tries < 60 && !accepted; ++tries) {
      for (std::size_t k = 0; k < d; ++k) cand[k] = w[k] - lr * gw[k];
      const double cb = b - lr * gb;
      const double cl = objective(cand, cb);
      if (cl <= loss) {
        w = cand;
        b = cb;
        loss = cl;
        accepted = true;
      } else {
        lr *= 0.5;
      }
    }
    if (!accepted) break;
    fit.loss_history.push_back(loss);
  }
  m.weights = std::move(w);
  m.bias = b;
  fit.model = std::move(m);
  return fit;
}

[[nodiscard]] inline ClassifierModel train_logistic(const FeatureMatrix& X, const Labels& y, const LogisticParams& p = {},
                                                    std::vector<std::string> schema = {}) {
  return fit_logistic(X, y, p, std::move(schema)).model;
}

namespace detail {

class TreeBuilder {
 public:
  TreeBuilder(const FeatureMatrix& X, const Labels& y, const std::vector<double>& class_w, const ForestParams& p,
              Rng& rng)
      : X_(X), y_(y), cw_(class_w), p_(p), rng_(rng), d_(X.front().size()) {
    mtry_ = p.max_features > 0 ? std::min<std::size_t>(static_cast<std::size_t>(p.max_features), d_)
                               : static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(d_))));
  }

  DecisionTree build(std::vector<std::size_t> sample) {
    DecisionTree t;
    nodes_.clear();
    grow(std::move(sample), 0);
    t.nodes = std::move(nodes_);
    return t;
  }

 private:
  struct Totals {
    double w = 0.0, wpos = 0.0;
    std::size_t n = 0;
  };

  static double gini(double w, double wpos) {
    if (w <= 0.0) return 0.0;
    const double q = wpos / w;
    return 2.0 * q * (1.0 - q);
  }

  Totals totals(const std::vector<std::size_t>& s) const {
    Totals t;
    for (auto i : s) {
      t.w += cw_[i];
      if (y_[i] == 1) t.wpos += cw_[i];
    }
    t.n = s.size();
    return t;
  }

  int make_leaf(const Totals& t) {
    TreeNode leaf;
    leaf.prob = t.w > 0.0 ? t.wpos / t.w : 0.0;
    nodes_.push_back(leaf);
    return static_cast<int>(nodes_.size() - 1);
  }

  int grow(std::vector<std::size_t> sample, int depth) {
    const Totals tot = totals(sample);
    const auto min_leaf = static_cast<std::size_t>(std::max(1, p_.min_leaf));
    const bool pure = tot.wpos <= 0.0 || tot.wpos >= tot.w;
    if (depth >= p_.max_depth || pure || tot.n < 2 * min_leaf) return make_leaf(tot);

    // Candidate features: first mtry_ entries of a partial shuffle.
    std::vector<std::size_t> feats(d_);
    std::iota(feats.begin(), feats.end(), 0);
    for (std::size_t i = 0; i < mtry_; ++i) {
      const auto j = i + static_cast<std::size_t>(uniform_index(rng_, d_ - i));
      std::swap(feats[i], feats[j]);
    }

    const double parent = gini(tot.w, tot.wpos) * tot.w;
    double best_gain = 1e-12;
    int best_feat = -1;
    double best_thr = 0.0;
    std::vector<std::size_t> order = sample;
    for (std::size_t fi = 0; fi < mtry_; ++fi) {
      const auto f = feats[fi];
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return X_[a][f] < X_[b][f]; });
      double lw = 0.0, lpos = 0.0;
      for (std::size_t k = 0; k + 1 < order.size(); ++k) {
        const auto i = order[k];
        lw += cw_[i];
        if (y_[i] == 1) lpos += cw_[i];
        const double xv = X_[i][f], xn = X_[order[k + 1]][f];
        if (xv == xn) continue;
        const std::size_t nl = k + 1, nr = order.size() - nl;
        if (nl < min_leaf || nr < min_leaf) continue;
        const double rw = tot.w - lw, rpos = tot.wpos - lpos;
        const double gain = parent - gini(lw, lpos) * lw - gini(rw, rpos) * rw;
        if (gain > best_gain) {
          best_gain = gain;
          best_feat = static_cast<int>(f);
          best_thr = 0.5 * (xv + xn);
          if (best_thr >= xn) best_thr = xv;  // guard midpoint rounding up
        }
      }
    }
    if (best_feat < 0) return make_leaf(tot);

    std::vector<std::size_t> left, right;
    for (auto i : sample) (X_[i][static_cast<std::size_t>(best_feat)] <= best_thr ? left : right).push_back(i);
    const int self = static_cast<int>(nodes_.size());
    TreeNode node;
    node.feature = best_feat;
    node.threshold = best_thr;
    node.prob = tot.w > 0.0 ? tot.wpos / tot.w : 0.0;
    nodes_.push_back(node);
    sample.clear();
    sample.shrink_to_fit();
    const int l = grow(std::move(left), depth + 1);
    const int r = grow(std::move(right), depth + 1);
    nodes_[static_cast<std::size_t>(self)].left = l;
    nodes_[static_cast<std::size_t>(self)].right = r;
    return self;
  }

  const FeatureMatrix& X_;
  const Labels& y_;
  const std::vector<double>& cw_;
  const ForestParams& p_;
  Rng& rng_;
  std::size_t d_;
  std::size_t mtry_ = 1;
  std::vector<TreeNode> nodes_;
};

}  // namespace detail

/// Bagged CART trees with Gini impurity. Tree t is grown from its own seed,
/// so the forest is reproducible and trees can be fitted in any order.
[[nodiscard]] inline ClassifierModel train_forest(const FeatureMatrix& X, const Labels& y, const ForestParams& p = {},
                                                  std::vector<std::string> schema = {}, int jobs = 1) {
  detail::check_training_set(X, y);
  if (p.trees < 1) throw InvalidArgument("forest needs at least one tree");
  if (p.max_depth < 0 || p.min_leaf < 1) throw InvalidArgument("invalid forest hyperparameters");
  const std::size_t n = X.size(), d = X.front().size();
  ClassifierModel m;
  m.kind = ModelKind::forest;
  m.schema = schema.empty() ? detail::default_schema(d) : std::move(schema);
  if (m.schema.size() != d) throw SchemaMismatch("schema length differs from feature count");
  m.mean.assign(d, 0.0);
  m.scale.assign(d, 1.0);
  const auto cw = detail::class_weights(y, p.class_weighted);
  m.trees.resize(static_cast<std::size_t>(p.trees));
  parallel_for(m.trees.size(), jobs, [&](std::size_t t) {
    const std::uint64_t seed = splitmix64(p.seed ^ splitmix64(t + 1));
    Rng rng(seed);
    std::vector<std::size_t> sample(n);
    if (p.bootstrap) {
      for (auto& s : sample) s = static_cast<std::size_t>(uniform_index(rng, n));
    } else {
      std::iota(sample.begin(), sample.end(), 0);
    }
    detail::TreeBuilder builder(X, y, cw, p, rng);
    m.trees[t] = builder.build(std::move(sample));
    m.trees[t].seed = seed;
  });
  return m;
}

struct EvalReport {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f2 = 0.0;
  double accuracy = 0.0;

  [[nodiscard]] std::size_t total() const noexcept { return tp + fp + fn + tn; }
};

/// F-beta with the 0-denominator convention (returns 0).
[[nodiscard]] inline double f_beta(double precision, double recall, double beta) {
  const double b2 = beta * beta;
  const double den = b2 * precision + recall;
  return den > 0.0 ? (1.0 + b2) * precision * recall / den : 0.0;
}

[[nodiscard]] inline EvalReport make_report(std::size_t tp, std::size_t fp, std::size_t fn, std::size_t tn) {
  EvalReport r{tp, fp, fn, tn};
  r.precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  r.recall = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  r.f2 = f_beta(r.precision, r.recall, 2.0);
  const auto n = r.total();
  r.accuracy = n > 0 ? static_cast<double>(tp + tn) / static_cast<double>(n) : 0.0;
  return r;
}

[[nodiscard]] inline EvalReport evaluate_predictions(const std::vector<bool>& predicted_good, const Labels& y) {
  if (predicted_good.size() != y.size()) throw InvalidArgument("prediction/label count mismatch");
  if (y.empty()) throw InvalidArgument("empty test set");
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (predicted_good[i]) {
      (y[i] == 1 ? tp : fp)++;
    } else {
      (y[i] == 1 ? fn : tn)++;
    }
  }
  return make_report(tp, fp, fn, tn);
}

[[nodiscard]] inline EvalReport evaluate(const ClassifierModel& model, const FeatureMatrix& X, const Labels& y) {
  std::vector<bool> pred;
  pred.reserve(X.size());
  for (const auto& row : X) pred.push_back(predict(model, row).good);
  return evaluate_predictions(pred, y);
}

// ---------------------------------------------------------------------------
// Splitting and model selection

struct LabeledId {
  std::string id;
  int label = 0;
};

struct Split {
  std::vector<std::string> train;
  std::vector<std::string> test;
};

/// Stratified split: each class contributes round(ratio * n_c) members to
/// the training part (at least one to each side). Both parts are returned
/// sorted by id.
[[nodiscard]] inline Split split_dataset(std::vector<LabeledId> items, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw InvalidArgument("split ratio must lie strictly between 0 and 1");
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  for (std::size_t i = 1; i < items.size(); ++i)
    if (items[i].id == items[i - 1].id) throw InvalidArgument("duplicate id in split: " + items[i].id);
  Split s;
  Rng rng(seed);
  for (int cls : {1, 0}) {
    std::vector<std::string> members;
    for (const auto& it : items)
      if (it.label == cls) members.push_back(it.id);
    if (members.empty()) continue;
    if (members.size() < 2)
      throw InvalidArgument(std::string("class '") + (cls == 1 ? "good" : "bad") + "' has fewer than 2 members");
    shuffle(members, rng);
    auto k = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(members.size()) + 0.5));
    k = std::clamp<std::size_t>(k, 1, members.size() - 1);
    s.train.insert(s.train.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(k));
    s.test.insert(s.test.end(), members.begin() + static_cast<std::ptrdiff_t>(k), members.end());
  }
  if (s.train.empty() || s.test.empty()) throw InvalidArgument("split produced an empty part");
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

/// Fold index per sample; classes are dealt round-robin after a seeded shuffle.
[[nodiscard]] inline std::vector<int> stratified_folds(const Labels& y, int folds, std::uint64_t seed) {
  if (folds < 2) throw InvalidArgument("cross-validation needs at least 2 folds");
  if (y.size() < static_cast<std::size_t>(folds)) throw InvalidArgument("fewer samples than folds");
  std::vector<int> assign(y.size(), 0);
  Rng rng(seed);
  std::size_t offset = 0;
  for (int cls : {1, 0}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < y.size(); ++i)
      if (y[i] == cls) idx.push_back(i);
    shuffle(idx, rng);
    for (std::size_t k = 0; k < idx.size(); ++k)
      assign[idx[k]] = static_cast<int>((k + offset) % static_cast<std::size_t>(folds));
    offset += idx.size();
  }
  return assign;
}

struct ModelParams {
  ModelKind kind = ModelKind::forest;
  ForestParams forest;
  LogisticParams logistic;

  [[nodiscard]] std::string describe() const {
    if (kind == ModelKind::forest)
      return "forest trees=" + std::to_string(forest.trees) + " max_depth=" + std::to_string(forest.max_depth) +
             " min_leaf=" + std::to_string(forest.min_leaf);
    return "logistic l2=" + format_double(logistic.l2) + " epochs=" + std::to_string(logistic.epochs) +
           " lr=" + format_double(logistic.lr);
  }
};

[[nodiscard]] inline ClassifierModel train(const ModelParams& p, const FeatureMatrix& X, const Labels& y,
                                           std::vector<std::string> schema = {}, int jobs = 1) {
  return p.kind == ModelKind::forest ? train_forest(X, y, p.forest, std::move(schema), jobs)
                                     : train_logistic(X, y, p.logistic, std::move(schema));
}

struct ForestGrid {
  std::vector<int> trees{100, 200};
  std::vector<int> max_depth{4, 8};
  std::vector<int> min_leaf{2};
};

struct LogisticGrid {
  std::vector<double> l2{1e-4, 1e-3, 1e-2};
  std::vector<int> epochs{500};
  std::vector<double> lr{0.5};
};

[[nodiscard]] inline std::vector<ModelParams> expand_grid(const ForestGrid& g, const ForestParams& base = {}) {
  std::vector<ModelParams> cells;
  for (int t : g.trees)
    for (int d : g.max_depth)
      for (int l : g.min_leaf) {
        ModelParams p;
        p.kind = ModelKind::forest;
        p.forest = base;
        p.forest.trees = t;
        p.forest.max_depth = d;
        p.forest.min_leaf = l;
        cells.push_back(p);
      }
  return cells;
}

[[nodiscard]] inline std::vector<ModelParams> expand_grid(const LogisticGrid& g, const LogisticParams& base = {}) {
  std::vector<ModelParams> cells;
  for (double l2 : g.l2)
    for (int e : g.epochs)
      for (double lr : g.lr) {
        ModelParams p;
        p.kind = ModelKind::logistic;
        p.logistic = base;
        p.logistic.l2 = l2;
        p.logistic.epochs = e;
        p.logistic.lr = lr;
        cells.push_back(p);
      }
  return cells;
}

struct CvRow {
  ModelParams params;
  std::vector<double> fold_f2;
  std::vector<double> fold_accuracy;
  double mean_f2 = 0.0;
  double mean_accuracy = 0.0;
};

struct GridSearchResult {
  ModelParams best;
  std::size_t best_index = 0;
  std::vector<CvRow> table;  ///< one row per grid cell, in grid order
};

namespace detail {

// "Smaller model" ordering used as the last tie-breaker.
inline bool simpler(const ModelParams& a, const ModelParams& b) {
  if (a.kind == ModelKind::forest && b.kind == ModelKind::forest) {
    if (a.forest.trees != b.forest.trees) return a.forest.trees < b.forest.trees;
    return a.forest.max_depth < b.forest.max_depth;
  }
  if (a.kind == ModelKind::logistic && b.kind == ModelKind::logistic) return a.logistic.l2 > b.logistic.l2;
  return false;
}

}  // namespace detail

/// Stratified k-fold search scored by mean F2. Ties go to higher mean
/// accuracy, then the smaller model, then the earlier grid cell.
[[nodiscard]] inline GridSearchResult grid_search(const std::vector<ModelParams>& grid, const FeatureMatrix& X,
                                                  const Labels& y, int folds = 5, std::uint64_t seed = 0,
                                                  int jobs = 1) {
  if (grid.empty()) throw InvalidArgument("parameter grid is empty");
  detail::check_training_set(X, y);
  const auto fold_of = stratified_folds(y, folds, seed);
  GridSearchResult res;
  res.table.resize(grid.size());
  const std::size_t tasks = grid.size() * static_cast<std::size_t>(folds);
  std::vector<EvalReport> reports(tasks);
  parallel_for(tasks, jobs, [&](std::size_t task) {
    const auto cell = task / static_cast<std::size_t>(folds);
    const int f = static_cast<int>(task % static_cast<std::size_t>(folds));
    FeatureMatrix Xtr, Xte;
    Labels ytr, yte;
    for (std::size_t i = 0; i < X.size(); ++i) {
      if (fold_of[i] == f) {
        Xte.push_back(X[i]);
        yte.push_back(y[i]);
      } else {
        Xtr.push_back(X[i]);
        ytr.push_back(y[i]);
      }
    }
    auto params = grid[cell];
    params.forest.seed = splitmix64(seed + static_cast<std::uint64_t>(f));
    const auto model = train(params, Xtr, ytr);
    reports[task] = evaluate(model, Xte, yte);
  });
  for (std::size_t c = 0; c < grid.size(); ++c) {
    auto& row = res.table[c];
    row.params = grid[c];
    for (int f = 0; f < folds; ++f) {
      const auto& r = reports[c * static_cast<std::size_t>(folds) + static_cast<std::size_t>(f)];
      row.fold_f2.push_back(r.f2);
      row.fold_accuracy.push_back(r.accuracy);
    }
    row.mean_f2 = std::accumulate(row.fold_f2.begin(), row.fold_f2.end(), 0.0) / folds;
    row.mean_accuracy = std::accumulate(row.fold_accuracy.begin(), row.fold_accuracy.end(), 0.0) / folds;
  }
  constexpr double eps = 1e-12;
  std::size_t best = 0;
  for (std::size_t c = 1; c < grid.size(); ++c) {
    const auto& a = res.table[c];
    const auto& b = res.table[best];
    bool better = false;
    if (a.mean_f2 > b.mean_f2 + eps) {
      better = true;
    } else if (std::fabs(a.mean_f2 - b.mean_f2) <= eps) {
      if (a.mean_accuracy > b.mean_accuracy + eps) {
        better = true;
      } else if (std::fabs(a.mean_accuracy - b.mean_accuracy) <= eps) {
        better = detail::simpler(a.params, b.params);
      }
    }
    if (better) best = c;
  }
  res.best_index = best;
  res.best = grid[best];
  return res;
}

[[nodiscard]] inline std::string cv_table_csv(const GridSearchResult& r) {
  std::string out = "cell,kind,trees,max_depth,min_leaf,l2,epochs,lr,mean_f2,mean_accuracy,fold_f2,selected\n";
  for (std::size_t c = 0; c < r.table.size(); ++c) {
    const auto& row = r.table[c];
    const auto& p = row.params;
    out += std::to_string(c) + ',' + std::string(to_string(p.kind)) + ',';
    if (p.kind == ModelKind::forest) {
      out += std::to_string(p.forest.trees) + ',' + std::to_string(p.forest.max_depth) + ',' +
             std::to_string(p.forest.min_leaf) + ",,,";
    } else {
      out += ",,," + format_double(p.logistic.l2) + ',' + std::to_string(p.logistic.epochs) + ',' +
             format_double(p.logistic.lr);
    }
    out += ',' + format_double(row.mean_f2) + ',' + format_double(row.mean_accuracy) + ',';
    for (std::size_t f = 0; f < row.fold_f2.size(); ++f) {
      if (f) out += ';';
      out += format_double(row.fold_f2[f]);
    }
    out += c == r.best_index ? ",1\n" : ",0\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

inline constexpr int kModelFormatVersion = 1;

[[nodiscard]] inline nlohmann::json model_to_json(const ClassifierModel& m) {
  nlohmann::json j;
  j["format"] = "retina-quality-model";
  j["version"] = kModelFormatVersion;
  j["kind"] = std::string(to_string(m.kind));
  j["schema"] = m.schema;
  j["standardization"] = {{"mean", m.mean}, {"scale", m.scale}};
  if (m.kind == ModelKind::logistic) {
    j["logistic"] = {{"weights", m.weights}, {"bias", m.bias}};
  } else {
    auto trees = nlohmann::json::array();
    for (const auto& t : m.trees) {
      auto nodes = nlohmann::json::array();
      for (const auto& n : t.nodes) {
        if (n.feature < 0) {
          nodes.push_back({{"leaf", n.prob}});
        } else {
          nodes.push_back({{"feature", n.feature}, {"threshold", n.threshold}, {"left", n.left}, {"right", n.right}});
        }
      }
      trees.push_back({{"seed", t.seed}, {"nodes", std::move(nodes)}});
    }
    j["forest"] = {{"tree_count", m.trees.size()}, {"trees", std::move(trees)}};
  }
  return j;
}

[[nodiscard]] inline ClassifierModel model_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "retina-quality-model") throw SchemaMismatch("not a quality model document");
    if (j.at("version").get<int>() != kModelFormatVersion)
      throw SchemaMismatch("unsupported model version " + j.at("version").dump());
    ClassifierModel m;
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "logistic") {
      m.kind = ModelKind::logistic;
    } else if (kind == "forest") {
      m.kind = ModelKind::forest;
    } else {
      throw SchemaMismatch("unknown model kind '" + kind + "'");
    }
    m.schema = j.at("schema").get<std::vector<std::string>>();
    m.mean = j.at("standardization").at("mean").get<std::vector<double>>();
    m.scale = j.at("standardization").at("scale").get<std::vector<double>>();
    const auto d = m.schema.size();
    if (m.mean.size() != d || m.scale.size() != d) throw SchemaMismatch("standardization length differs from schema");
    if (m.kind == ModelKind::logistic) {
      m.weights = j.at("logistic").at("weights").get<std::vector<double>>();
      m.bias = j.at("logistic").at("bias").get<double>();
      if (m.weights.size() != d) throw SchemaMismatch("weight vector length differs from schema");
    } else {
      for (const auto& tj : j.at("forest").at("trees")) {
        DecisionTree t;
        t.seed = tj.at("seed").get<std::uint64_t>();
        for (const auto& nj : tj.at("nodes")) {
          TreeNode n;
          if (nj.contains("leaf")) {
            n.prob = nj.at("leaf").get<double>();
            if (!(n.prob >= 0.0 && n.prob <= 1.0)) throw SchemaMismatch("leaf probability outside [0,1]");
          } else {
            n.feature = nj.at("feature").get<int>();
            n.threshold = nj.at("threshold").get<double>();
            n.left = nj.at("left").get<int>();
            n.right = nj.at("right").get<int>();
            if (n.feature < 0 || static_cast<std::size_t>(n.feature) >= d)
              throw SchemaMismatch("split feature index outside schema");
          }
          t.nodes.push_back(n);
        }
        const auto count = static_cast<int>(t.nodes.size());
        if (count == 0) throw SchemaMismatch("empty tree");
        // Children always follow their parent, which also rules out cycles.
        for (int i = 0; i < count; ++i) {
          const auto& n = t.nodes[static_cast<std::size_t>(i)];
          if (n.feature >= 0 && (n.left <= i || n.right <= i || n.left >= count || n.right >= count))
            throw SchemaMismatch("child index outside tree");
        }
        m.trees.push_back(std::move(t));
      }
      if (m.trees.empty()) throw SchemaMismatch("forest has no trees");
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaMismatch(std::string("malformed model document: ") + e.what());
  }
}

}  // namespace retina
