#include "misfitlab/flops.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "misfitlab/errors.hpp"

namespace misfitlab {

std::uint64_t FlopsLedger::total() const {
  std::uint64_t t = 0;
  for (const auto& [_, v] : components) t += v;
  return t;
}

nlohmann::json FlopsLedger::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : components) j[k] = v;
  return {{"components", j}, {"total", total()}};
}

namespace {

constexpr auto dense = dense_flops;

}  // namespace

FlopsLedger count_flops(const VictorConfig& c, int items) {
  validate(c);
  if (items < 2 || items > c.max_items) throw ContractError("count_flops: items must lie in [2, max_items]");
  const std::uint64_t n = static_cast<std::uint64_t>(items), t = n + 1, d = static_cast<std::uint64_t>(c.d),
                      L = static_cast<std::uint64_t>(c.layers), f = static_cast<std::uint64_t>(c.ffn_dim),
                      h = static_cast<std::uint64_t>(c.heads), in = static_cast<std::uint64_t>(c.input_dim()),
                      half = static_cast<std::uint64_t>(c.e / 2);
  FlopsLedger l;
  l.add("input_projection", dense(n, in, d) + n * d);
  // Per layer: two layernorms (~5 ops per element), qkv, scores, softmax,
  // weighted sum, output projection, feed-forward with GELU, two residuals.
  l.add("layernorm", L * 2 * 5 * t * d);
  l.add("attention.qkv", L * (dense(t, d, 3 * d) + t * 3 * d));
  l.add("attention.scores", L * (dense(t, d, t) + h * t * t));
  l.add("attention.softmax", L * 3 * h * t * t);
  l.add("attention.weighted_sum", L * dense(t, t, d));
  l.add("attention.output", L * (dense(t, d, d) + t * d));
  l.add("feed_forward", L * (dense(t, d, f) + t * f + dense(t, f, d) + t * d));
  l.add("feed_forward.gelu", L * t * f);
  l.add("residual", L * 2 * t * d);
  l.add("ocr_head", 5 * d + dense(1, d, half) + 2 * half + dense(1, half, 1) + 2);
  l.add("mid_head", n * (5 * d + d + dense(1, d, 1) + 2));
  return l;
}

std::uint64_t count_visual_encoder_flops(const FlipConfig& c) {
  validate(c);
  const std::uint64_t s = static_cast<std::uint64_t>(c.image_size), k2 = static_cast<std::uint64_t>(c.kernel * c.kernel),
                      c1 = static_cast<std::uint64_t>(c.conv1_channels), c2 = static_cast<std::uint64_t>(c.conv2_channels),
                      e = static_cast<std::uint64_t>(c.embed_dim);
  const std::uint64_t hw1 = s * s, hw2 = hw1 / 4, hw3 = hw2 / 4;
  std::uint64_t total = 0;
  total += dense(hw1, 3 * k2, c1) + hw1 * c1;  // conv1 + bias
  total += hw1 * c1 + hw1 * c1;                // gelu + pool
  total += dense(hw2, c1 * k2, c2) + hw2 * c2;
  total += hw2 * c2 + hw2 * c2;
  total += dense(1, hw3 * c2, e) + e;
  return total;
}

FlopsLedger count_flip_flops(const FlipConfig& c, int tokens) {
  const std::uint64_t e = static_cast<std::uint64_t>(c.embed_dim), p = static_cast<std::uint64_t>(c.proj_dim);
  FlopsLedger l;
  l.add("visual_encoder", count_visual_encoder_flops(c));
  l.add("text_encoder", static_cast<std::uint64_t>(tokens) * e + dense(1, e, e) + e);
  l.add("projections", 2 * (dense(1, e, p) + p + 3 * p));
  return l;
}

double compare_flops(double a, double b) {
  if (!(b > 0)) throw ContractError("compare_flops: reference FLOPs must be positive");
  return (1.0 - a / b) * 100.0;
}

std::vector<FlopsRow> reference_flops_table() {
  return {{"ResNet18", 1.14e7, 5.36e9, 1.82e8, 5.54e9, 4.55e10, 87.8},
          {"EfficientNetV2-B3", 1.30e7, 6.07e9, 1.55e9, 7.63e9, 6.02e10, 87.3},
          {"MLP-Mixer B/16", 5.93e7, 7.31e9, 4.00e8, 7.71e9, 2.40e11, 96.8},
          {"ViT B/32", 8.76e7, 1.56e10, 4.00e8, 1.60e10, 8.26e10, 80.62}};
}

double mean_recomputed_reduction(const std::vector<FlopsRow>& rows) {
  if (rows.empty()) throw ContractError("mean_recomputed_reduction: no rows");
  double s = 0;
  for (const auto& r : rows) s += r.recomputed_reduction();
  return s / static_cast<double>(rows.size());
}

FlopsRow desk_flops_row(const FlipConfig& flip, const VictorConfig& victor, int items, int tokens) {
  FlopsRow r;
  r.model = "desk conv encoder";
  std::size_t params = 0;
  const auto model = init_flip(flip);
  for (const auto* p : model.parameters()) params += static_cast<std::size_t>(p->size());
  r.parameters = static_cast<double>(params);
  const double victor_train = kTrainingMultiplier * static_cast<double>(count_flops(victor, items).total());
  r.flip = kTrainingMultiplier * static_cast<double>(count_flip_flops(flip, tokens).total());
  r.victor = victor_train;
  r.flip_plus_victor = r.flip + r.victor;
  r.e2e = victor_train + items * kTrainingMultiplier * static_cast<double>(count_visual_encoder_flops(flip));
  r.reported_reduction = r.recomputed_reduction();
  return r;
}

namespace {

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2E", v);
  return buf;
}

}  // namespace

std::string format_flops_table(const std::vector<FlopsRow>& rows) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-20s %12s %10s %10s %14s %14s %10s %12s\n", "Model", "Parameters", "FLIP", "VICTOR",
                "FLIP + VICTOR", "VICTOR (E2E)", "% reduced", "recomputed");
  os << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-20s %12s %10s %10s %14s %14s %10.2f %12.2f\n", r.model.c_str(), sci(r.parameters).c_str(),
                  sci(r.flip).c_str(), sci(r.victor).c_str(), sci(r.flip_plus_victor).c_str(), sci(r.e2e).c_str(),
                  r.reported_reduction, r.recomputed_reduction());
    os << line;
  }
  return os.str();
}

nlohmann::json flops_report_json(const std::vector<FlopsRow>& reference, const FlopsRow& desk, const FlopsLedger& victor,
                                 const FlopsLedger& flip) {
  auto row = [](const FlopsRow& r) {
    return nlohmann::json{{"model", r.model},
                          {"parameters", r.parameters},
                          {"flip", r.flip},
                          {"victor", r.victor},
                          {"flip_plus_victor", r.flip_plus_victor},
                          {"e2e", r.e2e},
                          {"reported_reduction", r.reported_reduction},
                          {"recomputed_reduction", r.recomputed_reduction()}};
  };
  nlohmann::json ref = nlohmann::json::array();
  std::vector<std::string> notes;
  for (const auto& r : reference) {
    ref.push_back(row(r));
    const double diff = std::abs(r.recomputed_reduction() - r.reported_reduction);
    if (diff > 0.005) {
      std::ostringstream os;
      os.precision(4);
      os << r.model << ": printed reduction " << r.reported_reduction << "% differs from the value recomputed from its own FLOP columns ("
         << r.recomputed_reduction() << "%)";
      notes.push_back(os.str());
    }
  }
  return {{"reference", ref},
          {"reference_mean_recomputed", mean_recomputed_reduction(reference)},
          {"discrepancies", notes},
          {"desk", row(desk)},
          {"victor_forward", victor.to_json()},
          {"flip_forward", flip.to_json()}};
}

}  // namespace misfitlab
