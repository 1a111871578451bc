#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "exprscore/quality.hpp"
#include "exprscore/scorers.hpp"

namespace exprscore {

class FusionError : public std::runtime_error {
 public:
  enum class Kind { InsufficientData, InvalidParams, InvalidDataset, VersionMismatch, CorruptModel, Io };

  FusionError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

using FusionFeatures = std::array<double, 3>;  // s_emo, s_pros, s_spon

inline constexpr std::array<const char*, 3> kFusionFeatureNames{"s_emo", "s_pros", "s_spon"};

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;

  bool is_leaf() const noexcept { return feature < 0; }
};

/// Binary regression tree stored in pre-order; samples with
/// x[feature] < threshold go left.
class RegressionTree {
 public:
  RegressionTree() = default;
  explicit RegressionTree(std::vector<TreeNode> nodes) : nodes_(std::move(nodes)) {}

  double eval(const FusionFeatures& x) const {
    std::size_t i = 0;
    while (!nodes_[i].is_leaf()) {
      const auto& n = nodes_[i];
      i = static_cast<std::size_t>(x[static_cast<std::size_t>(n.feature)] < n.threshold ? n.left : n.right);
    }
    return nodes_[i].value;
  }

  int depth() const { return nodes_.empty() ? 0 : depth_from(0); }
  const std::vector<TreeNode>& nodes() const noexcept { return nodes_; }

 private:
  int depth_from(std::size_t i) const {
    const auto& n = nodes_[i];
    if (n.is_leaf()) return 0;
    return 1 + std::max(depth_from(static_cast<std::size_t>(n.left)), depth_from(static_cast<std::size_t>(n.right)));
  }

  std::vector<TreeNode> nodes_;
};

/// Gradient-boosted tree ensemble mapping sub-scores to the overall score.
struct FusionModel {
  static constexpr int kFormatVersion = 1;

  double base_score = 0.0;
  double shrinkage = 0.1;
  int max_depth = 3;
  double clamp_lo = 0.0;
  double clamp_hi = 100.0;
  std::vector<RegressionTree> trees;

  double predict(const FusionFeatures& x) const {
    double sum = 0.0;
    for (const auto& t : trees) sum += t.eval(x);
    const double raw = base_score + shrinkage * sum;
    return std::clamp(raw, clamp_lo, clamp_hi);
  }

  double predict(const SubScores& s) const { return predict(FusionFeatures{s.s_emo, s.s_pros, s.s_spon}); }

  static FusionModel constant(double value) {
    FusionModel m;
    m.base_score = value;
    return m;
  }
};

struct FusionParams {
  int rounds = 200;
  int max_depth = 3;
  double shrinkage = 0.1;
  int min_leaf = 5;
  double validation_fraction = 0.2;
  int patience = 20;
  std::uint64_t seed = 0;

  void validate() const {
    if (rounds <= 0 || max_depth <= 0 || min_leaf <= 0 || patience <= 0 || !(shrinkage > 0.0 && shrinkage <= 1.0) ||
        !(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
      throw FusionError(FusionError::Kind::InvalidParams, "fusion parameters out of range");
    }
  }
};

struct PreferenceRow {
  std::string clip_id;
  FusionFeatures features{};
  double target = 0.0;  // 0-100
};

struct PreferenceDataset {
  std::vector<PreferenceRow> rows;
  std::string provenance;

  void validate() const {
    for (const auto& r : rows) {
      if (!(r.target >= 0.0 && r.target <= 100.0)) {
        throw FusionError(FusionError::Kind::InvalidDataset, "target outside [0, 100] for " + r.clip_id);
      }
      for (double f : r.features) {
        if (!(f >= 0.0 && f <= 100.0)) {
          throw FusionError(FusionError::Kind::InvalidDataset, "sub-score outside [0, 100] for " + r.clip_id);
        }
      }
    }
  }
};

/// Reads an annotation export: clip_id,s_emo,s_pros,s_spon,target.
inline PreferenceDataset load_preference_csv(const std::filesystem::path& path) {
  using Kind = FusionError::Kind;
  std::ifstream in(path);
  if (!in) throw FusionError(Kind::Io, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FusionError(Kind::InvalidDataset, "empty export " + path.string());
  const auto header = detail::split_csv_line(line);
  constexpr std::array<const char*, 5> names{"clip_id", "s_emo", "s_pros", "s_spon", "target"};
  std::array<std::size_t, 5> col{};
  for (std::size_t k = 0; k < names.size(); ++k) {
    const auto it = std::find(header.begin(), header.end(), names[k]);
    if (it == header.end()) throw FusionError(Kind::InvalidDataset, std::string("export missing column ") + names[k]);
    col[k] = static_cast<std::size_t>(it - header.begin());
  }
  PreferenceDataset data;
  data.provenance = path.filename().string();
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != header.size()) {
      throw FusionError(Kind::InvalidDataset, "export line " + std::to_string(line_no) + ": wrong field count");
    }
    PreferenceRow row;
    row.clip_id = fields[col[0]];
    for (std::size_t k = 1; k < 5; ++k) {
      const auto v = detail::parse_double(fields[col[k]]);
      if (!v) throw FusionError(Kind::InvalidDataset, "export line " + std::to_string(line_no) + ": bad number");
      if (k < 4) {
        row.features[k - 1] = *v;
      } else {
        row.target = *v;
      }
    }
    data.rows.push_back(std::move(row));
  }
  data.validate();
  return data;
}

/// Maps a mean rating on [lo, hi] affinely onto [0, 100].
inline double rating_to_target(double mean_rating, double lo = 1.0, double hi = 5.0) {
  return std::clamp((mean_rating - lo) / (hi - lo) * 100.0, 0.0, 100.0);
}

struct TrainingLog {
  // Entry 0 is the constant base model; entry k follows round k.
  std::vector<double> train_rmse;
  std::vector<double> validation_rmse;
  int rounds_run = 0;
  int best_round = 0;
  std::string stop_reason;
};

struct TrainResult {
  FusionModel model;
  TrainingLog log;
  bool degenerate_target = false;
  std::size_t n_train = 0;
  std::size_t n_validation = 0;
};

namespace detail {

struct TreeBuilder {
  const std::vector<FusionFeatures>& x;
  const std::vector<double>& residual;
  int max_depth;
  int min_leaf;
  std::vector<TreeNode> nodes;

  struct Split {
    int feature = -1;
    double threshold = 0.0;
    double gain = 0.0;
  };

  Split best_split(const std::vector<std::size_t>& idx) const {
    Split best;
    const double n = static_cast<double>(idx.size());
    double total = 0.0;
    for (auto i : idx) total += residual[i];
    const double parent = total * total / n;
    std::vector<std::size_t> order(idx);
    for (int f = 0; f < 3; ++f) {
      const auto fu = static_cast<std::size_t>(f);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a][fu] < x[b][fu]; });
      double left_sum = 0.0;
      for (std::size_t k = 0; k + 1 < order.size(); ++k) {
        left_sum += residual[order[k]];
        const double a = x[order[k]][fu];
        const double b = x[order[k + 1]][fu];
        if (a == b) continue;
        const auto n_left = static_cast<double>(k + 1);
        const double n_right = n - n_left;
        if (n_left < min_leaf || n_right < min_leaf) continue;
        const double right_sum = total - left_sum;
        const double gain = left_sum * left_sum / n_left + right_sum * right_sum / n_right - parent;
        // Strict comparison keeps the lowest feature, then lowest threshold, on ties.
        if (gain > best.gain + 1e-12) {
          double threshold = a + (b - a) / 2.0;
          if (!(threshold > a)) threshold = b;
          best = {f, threshold, gain};
        }
      }
    }
    return best;
  }

  int build(const std::vector<std::size_t>& idx, int depth) {
    const int self = static_cast<int>(nodes.size());
    nodes.emplace_back();
    Split split;
    if (depth < max_depth && idx.size() >= 2 * static_cast<std::size_t>(min_leaf)) split = best_split(idx);
    if (split.feature < 0) {
      double sum = 0.0;
      for (auto i : idx) sum += residual[i];
      nodes[static_cast<std::size_t>(self)].value = sum / static_cast<double>(idx.size());
      return self;
    }
    std::vector<std::size_t> left, right;
    const auto fu = static_cast<std::size_t>(split.feature);
    for (auto i : idx) (x[i][fu] < split.threshold ? left : right).push_back(i);
    const int l = build(left, depth + 1);
    const int r = build(right, depth + 1);
    auto& node = nodes[static_cast<std::size_t>(self)];
    node.feature = split.feature;
    node.threshold = split.threshold;
    node.left = l;
    node.right = r;
    return self;
  }
};

inline double rmse(const std::vector<double>& pred, const std::vector<double>& target) {
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += (pred[i] - target[i]) * (pred[i] - target[i]);
  return std::sqrt(acc / static_cast<double>(pred.size()));
}

}  // namespace detail

/// Least-squares gradient boosting: each round fits a depth-limited tree to
/// the residuals by exact split enumeration and adds it with shrinkage.
/// Training stops early when a round fails to lower the training RMSE, or
/// when validation RMSE has not improved for `patience` rounds; with a
/// validation split the ensemble is cut back to its best validation round.
inline TrainResult train_fusion(const PreferenceDataset& data, const FusionParams& params = {}) {
  params.validate();
  data.validate();
  const std::size_t n = data.rows.size();
  if (n < 2) throw FusionError(FusionError::Kind::InsufficientData, "need at least two rows to train");

  TrainResult result;
  result.model.shrinkage = params.shrinkage;
  result.model.max_depth = params.max_depth;

  const double first = data.rows.front().target;
  if (std::all_of(data.rows.begin(), data.rows.end(), [&](const auto& r) { return r.target == first; })) {
    result.model.base_score = first;
    result.degenerate_target = true;
    result.n_train = n;
    result.log.train_rmse.push_back(0.0);
    result.log.stop_reason = "degenerate target";
    return result;
  }

  // Seeded Fisher-Yates on raw engine output, independent of library
  // distribution implementations.
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(params.seed);
  for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[static_cast<std::size_t>(rng() % (i + 1))]);
  std::size_t n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * params.validation_fraction));
  if (n - n_val < 2) n_val = n - 2;
  std::vector<std::size_t> train_idx(perm.begin() + static_cast<std::ptrdiff_t>(n_val), perm.end());
  std::vector<std::size_t> val_idx(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(val_idx.begin(), val_idx.end());
  result.n_train = train_idx.size();
  result.n_validation = val_idx.size();

  std::vector<FusionFeatures> x_train, x_val;
  std::vector<double> y_train, y_val;
  for (auto i : train_idx) {
    x_train.push_back(data.rows[i].features);
    y_train.push_back(data.rows[i].target);
  }
  for (auto i : val_idx) {
    x_val.push_back(data.rows[i].features);
    y_val.push_back(data.rows[i].target);
  }

  auto& model = result.model;
  auto& log = result.log;
  model.base_score = std::accumulate(y_train.begin(), y_train.end(), 0.0) / static_cast<double>(y_train.size());
  std::vector<double> f_train(y_train.size(), model.base_score);
  std::vector<double> f_val(y_val.size(), model.base_score);
  log.train_rmse.push_back(detail::rmse(f_train, y_train));
  const bool validate = !y_val.empty();
  double best_val = validate ? detail::rmse(f_val, y_val) : 0.0;
  if (validate) log.validation_rmse.push_back(best_val);
  int since_best = 0;
  log.stop_reason = "round limit";

  std::vector<double> residual(y_train.size());
  std::vector<std::size_t> all(y_train.size());
  std::iota(all.begin(), all.end(), 0);
  for (int round = 1; round <= params.rounds; ++round) {
    for (std::size_t i = 0; i < residual.size(); ++i) residual[i] = y_train[i] - f_train[i];
    detail::TreeBuilder builder{x_train, residual, params.max_depth, params.min_leaf, {}};
    builder.build(all, 0);
    RegressionTree tree(std::move(builder.nodes));

    std::vector<double> candidate(f_train);
    for (std::size_t i = 0; i < candidate.size(); ++i) candidate[i] += params.shrinkage * tree.eval(x_train[i]);
    const double train_rmse = detail::rmse(candidate, y_train);
    if (!(train_rmse < log.train_rmse.back())) {
      log.stop_reason = "no training improvement";
      break;
    }
    f_train = std::move(candidate);
    log.train_rmse.push_back(train_rmse);
    log.rounds_run = round;

    if (validate) {
      for (std::size_t i = 0; i < f_val.size(); ++i) f_val[i] += params.shrinkage * tree.eval(x_val[i]);
      const double v = detail::rmse(f_val, y_val);
      log.validation_rmse.push_back(v);
      model.trees.push_back(std::move(tree));
      if (v < best_val) {
        best_val = v;
        log.best_round = round;
        since_best = 0;
      } else if (++since_best >= params.patience) {
        log.stop_reason = "validation patience exhausted";
        break;
      }
    } else {
      model.trees.push_back(std::move(tree));
      log.best_round = round;
    }
  }
  model.trees.resize(static_cast<std::size_t>(log.best_round));
  return result;
}

// ---------------------------------------------------------------------------
// Model file
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const FusionModel& m) {
  nlohmann::json trees = nlohmann::json::array();
  for (const auto& t : m.trees) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& n : t.nodes()) {
      if (n.is_leaf()) {
        nodes.push_back({{"leaf", n.value}});
      } else {
        nodes.push_back({{"feature", n.feature}, {"threshold", n.threshold}, {"left", n.left}, {"right", n.right}});
      }
    }
    trees.push_back(std::move(nodes));
  }
  return {{"format", "exprscore-fusion"},
          {"format_version", FusionModel::kFormatVersion},
          {"feature_names", kFusionFeatureNames},
          {"base_score", m.base_score},
          {"shrinkage", m.shrinkage},
          {"max_depth", m.max_depth},
          {"output_clamp", {m.clamp_lo, m.clamp_hi}},
          {"trees", std::move(trees)}};
}

inline FusionModel fusion_model_from_json(const nlohmann::json& j) {
  using Kind = FusionError::Kind;
  auto corrupt = [](const std::string& why) { return FusionError(Kind::CorruptModel, "corrupt fusion model: " + why); };
  try {
    if (!j.is_object() || j.value("format", "") != "exprscore-fusion") throw corrupt("not a fusion model document");
    const int version = j.at("format_version").get<int>();
    if (version != FusionModel::kFormatVersion) {
      throw FusionError(Kind::VersionMismatch, "fusion model format_version " + std::to_string(version) +
                                                   " is not supported (expected " +
                                                   std::to_string(FusionModel::kFormatVersion) + ")");
    }
    const auto names = j.at("feature_names").get<std::vector<std::string>>();
    if (names.size() != 3 || names[0] != "s_emo" || names[1] != "s_pros" || names[2] != "s_spon") {
      throw corrupt("unexpected feature names");
    }
    FusionModel m;
    m.base_score = j.at("base_score").get<double>();
    m.shrinkage = j.at("shrinkage").get<double>();
    m.max_depth = j.at("max_depth").get<int>();
    const auto clamp = j.at("output_clamp").get<std::vector<double>>();
    if (clamp.size() != 2 || !(clamp[0] <= clamp[1])) throw corrupt("bad output clamp");
    m.clamp_lo = clamp[0];
    m.clamp_hi = clamp[1];
    if (!std::isfinite(m.base_score) || !std::isfinite(m.shrinkage) || m.max_depth < 0) throw corrupt("bad header");
    for (const auto& jt : j.at("trees")) {
      std::vector<TreeNode> nodes;
      for (const auto& jn : jt) {
        TreeNode node;
        if (jn.contains("leaf")) {
          node.value = jn.at("leaf").get<double>();
        } else {
          node.feature = jn.at("feature").get<int>();
          node.threshold = jn.at("threshold").get<double>();
          node.left = jn.at("left").get<int>();
          node.right = jn.at("right").get<int>();
        }
        nodes.push_back(node);
      }
      if (nodes.empty()) throw corrupt("empty tree");
      for (std::size_t i = 0; i < nodes.size(); ++i) {
        const auto& n = nodes[i];
        if (n.is_leaf()) continue;
        const auto size = static_cast<int>(nodes.size());
        if (n.feature > 2 || n.left <= static_cast<int>(i) || n.right <= static_cast<int>(i) || n.left >= size ||
            n.right >= size) {
          throw corrupt("invalid node " + std::to_string(i));
        }
      }
      RegressionTree tree(std::move(nodes));
      if (tree.depth() > m.max_depth) throw corrupt("tree deeper than max_depth");
      m.trees.push_back(std::move(tree));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw corrupt(e.what());
  }
}

inline std::string serialize_model(const FusionModel& m) { return to_json(m).dump(2) + "\n"; }

inline void save_model(const FusionModel& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FusionError(FusionError::Kind::Io, "cannot write " + path.string());
  out << serialize_model(m);
}

inline FusionModel parse_model(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FusionError(FusionError::Kind::CorruptModel, std::string("corrupt fusion model: ") + e.what());
  }
  return fusion_model_from_json(j);
}

inline FusionModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FusionError(FusionError::Kind::Io, "cannot open fusion model " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_model(buf.str());
}

}  // namespace exprscore
