#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "misfitlab/flip.hpp"
#include "misfitlab/victor.hpp"

namespace misfitlab {

// Analytic cost model: a dense or matmul of (m x k)·(k x n) costs 2·m·n·k;
// every elementwise op costs one FLOP per element. Backward passes are taken
// as twice the forward cost, so a training step costs 3x forward.

/// 2·m·k·n for an (m x k)·(k x n) product.
constexpr std::uint64_t dense_flops(std::uint64_t m, std::uint64_t k, std::uint64_t n) { return 2 * m * k * n; }

struct FlopsLedger {
  std::map<std::string, std::uint64_t> components;

  std::uint64_t total() const;
  void add(const std::string& name, std::uint64_t flops) { components[name] += flops; }
  nlohmann::json to_json() const;
};

/// Forward FLOPs of VICTOR on one outfit of `items` garments.
FlopsLedger count_flops(const VictorConfig& config, int items);
/// Forward FLOPs of the FLIP encoders and projections on one image/text pair
/// with `tokens` text tokens.
FlopsLedger count_flip_flops(const FlipConfig& config, int tokens);
/// Forward FLOPs of the visual encoder alone on one image.
std::uint64_t count_visual_encoder_flops(const FlipConfig& config);

inline constexpr int kTrainingMultiplier = 3;

/// Percent reduction of `a` relative to `b`: (1 - a/b)·100. Throws
/// ContractError unless b > 0.
double compare_flops(double a, double b);

/// One row of the published per-instance FLOPs comparison.
struct FlopsRow {
  std::string model;
  double parameters = 0;
  double flip = 0;
  double victor = 0;
  double flip_plus_victor = 0;
  double e2e = 0;
  double reported_reduction = 0;  // as printed, percent

  double recomputed_reduction() const { return compare_flops(flip_plus_victor, e2e); }
};

/// The four backbones' published FLOPs columns.
std::vector<FlopsRow> reference_flops_table();
double mean_recomputed_reduction(const std::vector<FlopsRow>& rows);

/// Desk-scale analogue of a row: cached-feature training (FLIP pair + VICTOR
/// on cached features) against end-to-end training through the visual
/// encoder for every garment.
FlopsRow desk_flops_row(const FlipConfig& flip, const VictorConfig& victor, int items, int tokens);

std::string format_flops_table(const std::vector<FlopsRow>& rows);
nlohmann::json flops_report_json(const std::vector<FlopsRow>& reference, const FlopsRow& desk, const FlopsLedger& victor,
                                 const FlopsLedger& flip);

}  // namespace misfitlab
