#include "misfitlab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>

#include "misfitlab/errors.hpp"

namespace misfitlab {

namespace {

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

}  // namespace

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j = {{"mae", optional_json(mae)},
                      {"binary_accuracy", optional_json(binary_accuracy)},
                      {"exact_match", optional_json(exact_match)},
                      {"auc", optional_json(auc)},
                      {"outfits", outfits},
                      {"items", items},
                      {"auc_outfits", auc_outfits}};
  if (!auc_note.empty()) j["auc_note"] = auc_note;
  return j;
}

AucResult roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ContractError("roc_auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::size_t pos = 0;
  for (int l : labels) pos += l != 0;
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0)
    return {std::nullopt, pos == 0 ? "no positive (fully compatible) outfits" : "no negative (fully incompatible) outfits"};

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the sum of 1-based ranks of the positives, tied runs sharing their
  // mean rank; doubling keeps every quantity an exact integer.
  std::uint64_t rank_sum_x2 = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const std::uint64_t mean_rank_x2 = i + 1 + j + 1;
    for (std::size_t k = i; k <= j; ++k)
      if (labels[order[k]] != 0) rank_sum_x2 += mean_rank_x2;
    i = j + 1;
  }
  const std::uint64_t u_x2 = rank_sum_x2 - pos * (pos + 1);
  return {static_cast<double>(u_x2) / static_cast<double>(2 * pos * neg), {}};
}

MetricReport compute_metrics(std::span<const OutfitPrediction> predictions, std::span<const OutfitSample> targets,
                             const MetricOptions& options) {
  if (predictions.size() != targets.size())
    throw ContractError("compute_metrics: " + std::to_string(predictions.size()) + " predictions for " +
                        std::to_string(targets.size()) + " outfits");
  MetricReport r;
  r.outfits = targets.size();
  if (targets.empty()) return r;

  double abs_err = 0;
  std::size_t agree = 0, exact = 0;
  std::vector<double> auc_scores;
  std::vector<int> auc_labels;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& p = predictions[i];
    const auto& t = targets[i];
    if (p.y_mid.size() != t.size())
      throw ContractError("compute_metrics: outfit " + t.outfit_id + " has " + std::to_string(p.y_mid.size()) +
                          " item predictions for " + std::to_string(t.size()) + " garments");
    abs_err += std::abs(p.y_ocr - t.t_ocr);
    bool all = true;
    for (std::size_t k = 0; k < t.size(); ++k) {
      const bool flagged = p.y_mid[k] >= options.threshold;
      const bool ok = flagged == (t.t_mid[k] != 0);
      agree += ok;
      all = all && ok;
    }
    exact += all;
    r.items += t.size();
    if (t.t_ocr == 0.0 || t.t_ocr == 1.0) {
      double score = p.y_ocr;
      if (options.auc_score == AucScore::mid_complement)
        score = 1.0 - std::accumulate(p.y_mid.begin(), p.y_mid.end(), 0.0) / static_cast<double>(p.y_mid.size());
      auc_scores.push_back(score);
      auc_labels.push_back(t.t_ocr == 1.0 ? 1 : 0);
    }
  }
  r.mae = abs_err / static_cast<double>(targets.size());
  r.binary_accuracy = 100.0 * static_cast<double>(agree) / static_cast<double>(r.items);
  r.exact_match = 100.0 * static_cast<double>(exact) / static_cast<double>(targets.size());
  r.auc_outfits = auc_scores.size();
  const auto auc = roc_auc(auc_scores, auc_labels);
  r.auc = auc.value;
  r.auc_note = auc.note;
  return r;
}

Eigen::VectorXd topsis_scores(const Eigen::MatrixXd& matrix, std::span<const Criterion> criteria) {
  if (matrix.rows() == 0) throw ContractError("topsis: no alternatives");
  if (matrix.cols() != static_cast<Eigen::Index>(criteria.size()) || criteria.empty())
    throw ContractError("topsis: " + std::to_string(matrix.cols()) + " columns for " + std::to_string(criteria.size()) +
                        " criteria");
  double weight_sum = 0;
  for (const auto& c : criteria) weight_sum += c.weight;
  if (!(weight_sum > 0)) throw ContractError("topsis: weights must sum to a positive value");

  Eigen::MatrixXd v(matrix.rows(), matrix.cols());
  for (Eigen::Index j = 0; j < matrix.cols(); ++j) {
    const double norm = matrix.col(j).norm();
    if (norm == 0.0) throw ContractError("topsis: criterion '" + criteria[static_cast<std::size_t>(j)].name + "' is zero everywhere");
    v.col(j) = matrix.col(j) * (criteria[static_cast<std::size_t>(j)].weight / weight_sum / norm);
  }
  Eigen::RowVectorXd ideal(v.cols()), anti(v.cols());
  for (Eigen::Index j = 0; j < v.cols(); ++j) {
    const bool benefit = criteria[static_cast<std::size_t>(j)].benefit;
    ideal(j) = benefit ? v.col(j).maxCoeff() : v.col(j).minCoeff();
    anti(j) = benefit ? v.col(j).minCoeff() : v.col(j).maxCoeff();
  }
  Eigen::VectorXd score(v.rows());
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    const double d_best = (v.row(i) - ideal).norm();
    const double d_worst = (v.row(i) - anti).norm();
    // Every alternative identical: no preference.
    score(i) = d_best + d_worst == 0.0 ? 0.0 : d_worst / (d_best + d_worst);
  }
  return score;
}

std::size_t topsis_select(const Eigen::MatrixXd& matrix, std::span<const Criterion> criteria) {
  const auto s = topsis_scores(matrix, criteria);
  std::size_t best = 0;
  for (Eigen::Index i = 1; i < s.size(); ++i)
    if (s(i) > s(static_cast<Eigen::Index>(best))) best = static_cast<std::size_t>(i);
  return best;
}

std::size_t select_checkpoint(std::span<const CheckpointRecord> records) {
  if (records.empty()) throw ContractError("select_checkpoint: no checkpoint records");
  struct Column {
    Criterion criterion;
    std::optional<double> MetricReport::*field;
  };
  const Column all[] = {{{"mae", false, 1.0}, &MetricReport::mae},
                        {{"binary_accuracy", true, 1.0}, &MetricReport::binary_accuracy},
                        {{"exact_match", true, 1.0}, &MetricReport::exact_match}};
  std::vector<Criterion> used;
  std::vector<std::vector<double>> cols;
  for (const auto& c : all) {
    std::vector<double> col;
    bool present = true, nonzero = false;
    for (const auto& r : records) {
      const auto& v = r.valid.*(c.field);
      if (!v) {
        present = false;
        break;
      }
      col.push_back(*v);
      nonzero = nonzero || *v != 0.0;
    }
    if (present && nonzero) {
      used.push_back(c.criterion);
      cols.push_back(std::move(col));
    }
  }
  if (used.empty()) return 0;
  Eigen::MatrixXd m(static_cast<Eigen::Index>(records.size()), static_cast<Eigen::Index>(used.size()));
  for (std::size_t j = 0; j < cols.size(); ++j)
    for (std::size_t i = 0; i < records.size(); ++i) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = cols[j][i];
  return topsis_select(m, used);
}

}  // namespace misfitlab
