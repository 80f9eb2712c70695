#include "misfitlab/victor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "misfitlab/core/adam.hpp"
#include "misfitlab/core/init.hpp"
#include "misfitlab/core/io.hpp"
#include "misfitlab/core/weights.hpp"
#include "misfitlab/errors.hpp"

namespace misfitlab {

using core::Graph;
using core::Matrix;
using core::Parameter;
using Var = core::Var<double>;
namespace ops = core;

std::string to_string(TaskMode m) {
  switch (m) {
    case TaskMode::OCb: return "OCb";
    case TaskMode::OCr: return "OCr";
    case TaskMode::MID: return "MID";
    case TaskMode::MTL: return "MTL";
  }
  return "?";
}

TaskMode parse_task_mode(const std::string& s) {
  if (s == "OCb") return TaskMode::OCb;
  if (s == "OCr") return TaskMode::OCr;
  if (s == "MID") return TaskMode::MID;
  if (s == "MTL") return TaskMode::MTL;
  throw ConfigError("unknown task mode '" + s + "' (expected OCb, OCr, MID or MTL)");
}

std::string VictorConfig::label(int m) const {
  std::ostringstream os;
  os << "VICTOR[" << to_string(task_mode);
  if (task_mode == TaskMode::MTL) os << ';' << alpha;
  os << ';' << m << ']';
  return os.str();
}

void validate(const VictorConfig& c) {
  if (c.layers < 1) throw ConfigError("victor: layers must be at least 1");
  if (c.d < 1 || c.heads < 1) throw ConfigError("victor: d and heads must be positive");
  if (c.d % c.heads != 0)
    throw ConfigError("victor: d=" + std::to_string(c.d) + " is not divisible by h=" + std::to_string(c.heads));
  if (c.ffn_dim < 1) throw ConfigError("victor: ffn_dim must be positive");
  if (!(c.dropout >= 0.0 && c.dropout < 1.0)) throw ConfigError("victor: dropout must lie in [0, 1)");
  if (c.max_items < 2 || c.max_items > static_cast<int>(kMaxOutfitSize))
    throw ConfigError("victor: max_items must lie in [2, 19]");
  if (c.e < 2) throw ConfigError("victor: e must be at least 2 (the OC_r head is e/2 wide)");
  if (c.task_mode == TaskMode::MTL && !(c.alpha > 0.0)) throw ConfigError("victor: alpha must be > 0 in MTL mode");
  if (c.batch < 1 || c.epochs < 0) throw ConfigError("victor: batch must be positive and epochs non-negative");
  if (!(c.learning_rate > 0.0)) throw ConfigError("victor: learning_rate must be positive");
  if (c.lr_step_epochs < 1) throw ConfigError("victor: lr_step_epochs must be positive");
}

nlohmann::json to_json(const VictorConfig& c) {
  return {{"layers", c.layers},
          {"d", c.d},
          {"heads", c.heads},
          {"ffn_dim", c.ffn_dim},
          {"dropout", c.dropout},
          {"max_items", c.max_items},
          {"e", c.e},
          {"multimodal", c.multimodal},
          {"task_mode", to_string(c.task_mode)},
          {"alpha", c.alpha},
          {"batch", c.batch},
          {"epochs", c.epochs},
          {"learning_rate", c.learning_rate},
          {"lr_factor", c.lr_factor},
          {"lr_step_epochs", c.lr_step_epochs},
          {"seed", c.seed}};
}

VictorConfig victor_config_from_json(const nlohmann::json& j) {
  VictorConfig c;
  try {
    c.layers = j.value("layers", c.layers);
    c.d = j.value("d", c.d);
    c.heads = j.value("heads", c.heads);
    c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
    c.dropout = j.value("dropout", c.dropout);
    c.max_items = j.value("max_items", c.max_items);
    c.e = j.value("e", c.e);
    c.multimodal = j.value("multimodal", c.multimodal);
    c.task_mode = parse_task_mode(j.value("task_mode", to_string(c.task_mode)));
    c.alpha = j.value("alpha", c.alpha);
    c.batch = j.value("batch", c.batch);
    c.epochs = j.value("epochs", c.epochs);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.lr_factor = j.value("lr_factor", c.lr_factor);
    c.lr_step_epochs = j.value("lr_step_epochs", c.lr_step_epochs);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("victor config: ") + e.what());
  }
  validate(c);
  return c;
}

std::vector<Parameter<double>*> VictorModel::parameters() {
  std::vector<Parameter<double>*> ps{&input_w, &input_b, &reg_token};
  for (auto& l : layers)
    for (auto* p : {&l.ln1_g, &l.ln1_b, &l.qkv_w, &l.qkv_b, &l.out_w, &l.out_b, &l.ln2_g, &l.ln2_b, &l.ff1_w, &l.ff1_b,
                    &l.ff2_w, &l.ff2_b})
      ps.push_back(p);
  for (auto* p : {&ocr_ln_g, &ocr_ln_b, &ocr_w0, &ocr_b0, &ocr_w1, &ocr_b1, &mid_ln_g, &mid_ln_b, &mid_w, &mid_b})
    ps.push_back(p);
  return ps;
}

std::vector<const Parameter<double>*> VictorModel::parameters() const {
  auto ps = const_cast<VictorModel*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

std::vector<Parameter<double>*> VictorModel::state() {
  auto ps = parameters();
  ps.insert(ps.begin(), {&input_mean, &input_inv_std});
  return ps;
}

std::vector<const Parameter<double>*> VictorModel::state() const {
  auto ps = const_cast<VictorModel*>(this)->state();
  return {ps.begin(), ps.end()};
}

namespace {

Matrix<double> zeros(Eigen::Index r, Eigen::Index c) { return Matrix<double>::Zero(r, c); }
Matrix<double> ones(Eigen::Index r, Eigen::Index c) { return Matrix<double>::Ones(r, c); }

}  // namespace

VictorModel init_victor(const VictorConfig& c) {
  validate(c);
  std::mt19937_64 rng(c.seed);
  const int d = c.d, f = c.ffn_dim, half = c.e / 2;
  VictorModel m;
  m.config = c;
  m.input_mean = {"victor.input.mean", zeros(1, c.input_dim())};
  m.input_inv_std = {"victor.input.inv_std", ones(1, c.input_dim())};
  m.input_w = {"victor.input.w", core::xavier_uniform<double>(c.input_dim(), d, rng)};
  m.input_b = {"victor.input.b", zeros(1, d)};
  m.reg_token = {"victor.reg", core::normal_init<double>(1, d, 0.02, rng)};
  for (int i = 0; i < c.layers; ++i) {
    const std::string p = "victor.layer" + std::to_string(i) + ".";
    VictorLayer l;
    l.ln1_g = {p + "ln1.g", ones(1, d)};
    l.ln1_b = {p + "ln1.b", zeros(1, d)};
    l.qkv_w = {p + "qkv.w", core::xavier_uniform<double>(d, 3 * d, rng)};
    l.qkv_b = {p + "qkv.b", zeros(1, 3 * d)};
    l.out_w = {p + "out.w", core::xavier_uniform<double>(d, d, rng)};
    l.out_b = {p + "out.b", zeros(1, d)};
    l.ln2_g = {p + "ln2.g", ones(1, d)};
    l.ln2_b = {p + "ln2.b", zeros(1, d)};
    l.ff1_w = {p + "ff1.w", core::xavier_uniform<double>(d, f, rng)};
    l.ff1_b = {p + "ff1.b", zeros(1, f)};
    l.ff2_w = {p + "ff2.w", core::xavier_uniform<double>(f, d, rng)};
    l.ff2_b = {p + "ff2.b", zeros(1, d)};
    m.layers.push_back(std::move(l));
  }
  m.ocr_ln_g = {"victor.ocr.ln.g", ones(1, d)};
  m.ocr_ln_b = {"victor.ocr.ln.b", zeros(1, d)};
  m.ocr_w0 = {"victor.ocr.w0", core::xavier_uniform<double>(d, half, rng)};
  m.ocr_b0 = {"victor.ocr.b0", zeros(1, half)};
  m.ocr_w1 = {"victor.ocr.w1", core::xavier_uniform<double>(half, 1, rng)};
  m.ocr_b1 = {"victor.ocr.b1", zeros(1, 1)};
  m.mid_ln_g = {"victor.mid.ln.g", ones(1, d)};
  m.mid_ln_b = {"victor.mid.ln.b", zeros(1, d)};
  m.mid_w = {"victor.mid.w", core::xavier_uniform<double>(d, 1, rng)};
  m.mid_b = {"victor.mid.b", zeros(1, 1)};
  return m;
}

void fit_input_standardisation(VictorModel& model, std::span<const OutfitSample* const> outfits, const FeatureCache& cache) {
  const auto& c = model.config;
  std::unordered_set<std::string> seen;
  Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(c.input_dim()), sq = sum;
  std::size_t count = 0;
  for (const auto* o : outfits)
    for (const auto& id : o->garment_ids) {
      if (!seen.insert(id).second) continue;
      const auto* f = cache.find(id);
      if (!f) throw LookupError("garment '" + id + "' missing from the feature cache");
      Eigen::RowVectorXd x(c.input_dim());
      for (int k = 0; k < c.e; ++k) x(k) = f->visual[static_cast<std::size_t>(k)];
      if (c.multimodal)
        for (int k = 0; k < c.e; ++k) x(c.e + k) = f->text[static_cast<std::size_t>(k)];
      sum += x;
      sq += x.cwiseProduct(x);
      ++count;
    }
  if (count < 2) throw ContractError("fit_input_standardisation: needs at least two garments");
  const Eigen::RowVectorXd mean = sum / static_cast<double>(count);
  const Eigen::RowVectorXd var = (sq / static_cast<double>(count) - mean.cwiseProduct(mean)).cwiseMax(0.0);
  model.input_mean.value = mean;
  for (Eigen::Index k = 0; k < var.size(); ++k)
    model.input_inv_std.value(0, k) = var(k) > 1e-12 ? 1.0 / std::sqrt(var(k)) : 1.0;
}

std::size_t BatchedOutfits::items_in(std::size_t b) const {
  std::size_t n = 0;
  for (int s = 0; s < max_items; ++s) n += pad_mask[b * static_cast<std::size_t>(max_items) + static_cast<std::size_t>(s)];
  return n;
}

BatchedOutfits make_batch(std::span<const OutfitSample* const> outfits, const FeatureCache& cache, const VictorConfig& config) {
  if (cache.e != config.e)
    throw ConfigError("feature cache width e=" + std::to_string(cache.e) + " does not match model e=" + std::to_string(config.e));
  const auto slots = static_cast<std::size_t>(config.max_items);
  BatchedOutfits b;
  b.max_items = config.max_items;
  b.features = zeros(static_cast<Eigen::Index>(outfits.size() * slots), config.input_dim());
  b.pad_mask.assign(outfits.size() * slots, 0);
  b.t_mid.assign(outfits.size() * slots, 0.0);
  std::vector<std::string> missing;
  for (std::size_t i = 0; i < outfits.size(); ++i) {
    const auto& o = *outfits[i];
    if (o.size() < kMinOutfitSize || o.size() > slots)
      throw ContractError("outfit " + o.outfit_id + " has " + std::to_string(o.size()) + " garments; expected 2.." +
                          std::to_string(slots));
    b.t_ocr.push_back(o.t_ocr);
    for (std::size_t s = 0; s < o.size(); ++s) {
      const auto row = i * slots + s;
      b.pad_mask[row] = 1;
      b.t_mid[row] = o.t_mid.empty() ? 0.0 : o.t_mid[s];
      const auto* f = cache.find(o.garment_ids[s]);
      if (!f) {
        if (std::find(missing.begin(), missing.end(), o.garment_ids[s]) == missing.end()) missing.push_back(o.garment_ids[s]);
        continue;
      }
      auto dst = b.features.row(static_cast<Eigen::Index>(row));
      for (int k = 0; k < config.e; ++k) dst(k) = f->visual[static_cast<std::size_t>(k)];
      if (config.multimodal)
        for (int k = 0; k < config.e; ++k) dst(config.e + k) = f->text[static_cast<std::size_t>(k)];
    }
  }
  if (!missing.empty()) {
    std::string msg = std::to_string(missing.size()) + " garment(s) missing from the feature cache:";
    for (std::size_t i = 0; i < missing.size() && i < 20; ++i) msg += " " + missing[i];
    if (missing.size() > 20) msg += " ...";
    throw LookupError(msg);
  }
  return b;
}

namespace {

struct Binder {
  Graph<double>& g;
  bool train;
  Var operator()(Parameter<double>& p) const { return train ? g.parameter(p) : g.constant(p.value); }
};

}  // namespace

VictorForward victor_forward(Graph<double>& g, VictorModel& m, const BatchedOutfits& batch, bool train, std::mt19937_64* rng) {
  const auto& c = m.config;
  if (batch.features.cols() != c.input_dim())
    throw DimensionError("victor_forward: feature width " + std::to_string(batch.features.cols()) + " != " +
                         std::to_string(c.input_dim()));
  if (batch.max_items != c.max_items) throw DimensionError("victor_forward: batch padded to a different max_items");
  if (train && !rng) throw ContractError("victor_forward: training mode needs an rng");
  const Binder bind{g, train};
  const std::size_t B = batch.size();
  const auto slots = static_cast<std::size_t>(c.max_items);

  // Pack real garments outfit-major; each outfit's REG token follows its items.
  std::vector<Eigen::Index> item_rows;
  VictorForward out;
  for (std::size_t b = 0; b < B; ++b) {
    out.offsets.push_back(item_rows.size());
    for (std::size_t s = 0; s < slots; ++s)
      if (batch.pad_mask[b * slots + s]) item_rows.push_back(static_cast<Eigen::Index>(b * slots + s));
    if (item_rows.size() - out.offsets.back() < kMinOutfitSize)
      throw ContractError("victor_forward: batch row " + std::to_string(b) + " has fewer than 2 real garments");
  }
  const auto n_items = static_cast<Eigen::Index>(item_rows.size());
  Matrix<double> x(n_items, c.input_dim());
  for (Eigen::Index i = 0; i < n_items; ++i)
    x.row(i) = (batch.features.row(item_rows[static_cast<std::size_t>(i)]) - m.input_mean.value).cwiseProduct(m.input_inv_std.value);

  auto tokens = ops::linear(g.constant(std::move(x)), bind(m.input_w), bind(m.input_b));
  auto regs = ops::gather_rows(bind(m.reg_token), std::vector<Eigen::Index>(B, 0));
  auto stacked = ops::concat_rows(tokens, regs);

  std::vector<Eigen::Index> order, item_pos, reg_pos;
  std::vector<ops::Segment> segments;
  for (std::size_t b = 0; b < B; ++b) {
    const auto begin = out.offsets[b];
    const auto end = b + 1 < B ? out.offsets[b + 1] : item_rows.size();
    segments.push_back({static_cast<Eigen::Index>(order.size()), static_cast<Eigen::Index>(end - begin + 1)});
    for (auto i = begin; i < end; ++i) {
      item_pos.push_back(static_cast<Eigen::Index>(order.size()));
      order.push_back(static_cast<Eigen::Index>(i));
    }
    reg_pos.push_back(static_cast<Eigen::Index>(order.size()));
    order.push_back(n_items + static_cast<Eigen::Index>(b));
  }
  auto h = ops::gather_rows(stacked, std::move(order));

  for (auto& l : m.layers) {
    auto a = ops::layernorm(h, bind(l.ln1_g), bind(l.ln1_b));
    a = ops::segment_self_attention(ops::linear(a, bind(l.qkv_w), bind(l.qkv_b)), segments, c.heads);
    a = ops::linear(a, bind(l.out_w), bind(l.out_b));
    h = ops::add(h, train ? ops::dropout(a, c.dropout, true, *rng) : a);
    auto f = ops::layernorm(h, bind(l.ln2_g), bind(l.ln2_b));
    f = ops::linear(ops::gelu(ops::linear(f, bind(l.ff1_w), bind(l.ff1_b))), bind(l.ff2_w), bind(l.ff2_b));
    h = ops::add(h, train ? ops::dropout(f, c.dropout, true, *rng) : f);
  }

  auto reg = ops::layernorm(ops::gather_rows(h, std::move(reg_pos)), bind(m.ocr_ln_g), bind(m.ocr_ln_b));
  reg = ops::gelu(ops::linear(reg, bind(m.ocr_w0), bind(m.ocr_b0)));
  out.y_ocr = ops::sigmoid(ops::linear(reg, bind(m.ocr_w1), bind(m.ocr_b1)));

  auto items = ops::gelu(ops::layernorm(ops::gather_rows(h, std::move(item_pos)), bind(m.mid_ln_g), bind(m.mid_ln_b)));
  out.y_mid_packed = ops::sigmoid(ops::linear(items, bind(m.mid_w), bind(m.mid_b)));

  out.y_mid = Matrix<double>::Constant(static_cast<Eigen::Index>(B), c.max_items, 0.5);
  const auto& ym = out.y_mid_packed.value();
  for (std::size_t i = 0; i < item_rows.size(); ++i) {
    const auto r = static_cast<std::size_t>(item_rows[i]);
    out.y_mid(static_cast<Eigen::Index>(r / slots), static_cast<Eigen::Index>(r % slots)) = ym(static_cast<Eigen::Index>(i), 0);
  }
  return out;
}

namespace {

Matrix<double> ocr_targets(const BatchedOutfits& batch) {
  Matrix<double> t(static_cast<Eigen::Index>(batch.size()), 1);
  for (std::size_t b = 0; b < batch.size(); ++b) t(static_cast<Eigen::Index>(b), 0) = batch.t_ocr[b];
  return t;
}

Matrix<double> mid_targets(const BatchedOutfits& batch) {
  std::vector<double> v;
  for (std::size_t i = 0; i < batch.pad_mask.size(); ++i)
    if (batch.pad_mask[i]) v.push_back(batch.t_mid[i]);
  return Eigen::Map<const Matrix<double>>(v.data(), static_cast<Eigen::Index>(v.size()), 1);
}

}  // namespace

Var victor_loss(const VictorForward& f, const BatchedOutfits& batch, TaskMode mode, double alpha) {
  switch (mode) {
    case TaskMode::OCr:
      return ops::mse_loss(f.y_ocr, ocr_targets(batch));
    case TaskMode::MID:
      return ops::bce_loss(f.y_mid_packed, mid_targets(batch));
    case TaskMode::OCb:
      for (double t : batch.t_ocr)
        if (t != 0.0 && t != 1.0) throw ContractError("victor_loss: OCb mode needs binary t_ocr, got " + std::to_string(t));
      return ops::bce_loss(f.y_ocr, ocr_targets(batch));
    case TaskMode::MTL:
      if (!(alpha > 0.0)) throw ConfigError("victor_loss: alpha must be > 0 in MTL mode");
      return ops::add(ops::mse_loss(f.y_ocr, ocr_targets(batch)),
                      ops::scale(ops::bce_loss(f.y_mid_packed, mid_targets(batch)), alpha));
  }
  throw ContractError("victor_loss: unknown task mode");
}

nlohmann::json EpochMetrics::to_json() const {
  nlohmann::json j = valid.to_json();
  j["epoch"] = epoch;
  j["lr"] = lr;
  j["train_loss"] = train_loss;
  j["valid_loss"] = valid_loss;
  return j;
}

MetricOptions metric_options(TaskMode mode, double threshold) {
  return {threshold, mode == TaskMode::MID ? AucScore::mid_complement : AucScore::ocr};
}

MetricReport mode_metrics(const MetricReport& full, TaskMode mode) {
  MetricReport r = full;
  if (mode == TaskMode::OCr || mode == TaskMode::OCb) {
    r.binary_accuracy.reset();
    r.exact_match.reset();
  }
  if (mode == TaskMode::MID) r.mae.reset();
  return r;
}

namespace {

std::vector<const OutfitSample*> pointers(std::span<const OutfitSample> outfits) {
  std::vector<const OutfitSample*> ps;
  for (const auto& o : outfits) ps.push_back(&o);
  return ps;
}

struct EvalPass {
  std::vector<OutfitPrediction> predictions;
  double loss = 0;
};

EvalPass eval_pass(const VictorModel& model, std::span<const OutfitSample* const> outfits, const FeatureCache& cache,
                   bool with_loss) {
  EvalPass res;
  const auto chunk = static_cast<std::size_t>(std::max(model.config.batch, 1));
  double weighted = 0;
  for (std::size_t start = 0; start < outfits.size(); start += chunk) {
    const auto len = std::min(chunk, outfits.size() - start);
    const auto batch = make_batch(outfits.subspan(start, len), cache, model.config);
    Graph<double> g;
    // Eval mode binds every parameter as a constant copy; nothing is written.
    const auto f = victor_forward(g, const_cast<VictorModel&>(model), batch, false);
    if (with_loss) weighted += victor_loss(f, batch, model.config.task_mode, model.config.alpha).value()(0, 0) * static_cast<double>(len);
    const auto& yo = f.y_ocr.value();
    const auto& ym = f.y_mid_packed.value();
    for (std::size_t b = 0; b < len; ++b) {
      OutfitPrediction p;
      p.y_ocr = yo(static_cast<Eigen::Index>(b), 0);
      const auto n = outfits[start + b]->size();
      for (std::size_t k = 0; k < n; ++k) p.y_mid.push_back(ym(static_cast<Eigen::Index>(f.offsets[b] + k), 0));
      res.predictions.push_back(std::move(p));
    }
  }
  if (!outfits.empty()) res.loss = weighted / static_cast<double>(outfits.size());
  return res;
}

std::vector<Matrix<double>> snapshot(VictorModel& m) {
  std::vector<Matrix<double>> w;
  for (auto* p : m.parameters()) w.push_back(p->value);
  return w;
}

void restore(VictorModel& m, const std::vector<Matrix<double>>& w) {
  auto ps = m.parameters();
  for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->value = w[i];
}

}  // namespace

std::vector<OutfitPrediction> predict(const VictorModel& model, std::span<const OutfitSample> outfits, const FeatureCache& cache) {
  const auto ps = pointers(outfits);
  return eval_pass(model, ps, cache, false).predictions;
}

MetricReport evaluate_victor(const VictorModel& model, std::span<const OutfitSample> outfits, const FeatureCache& cache,
                             double threshold) {
  const auto preds = predict(model, outfits, cache);
  const auto mode = model.config.task_mode;
  return mode_metrics(compute_metrics(preds, outfits, metric_options(mode, threshold)), mode);
}

VictorTrainResult train_victor(std::span<const OutfitSample> train, std::span<const OutfitSample> valid,
                               const FeatureCache& cache, const VictorConfig& config, const EpochCallback& on_epoch) {
  validate(config);
  if (cache.e != config.e)
    throw ConfigError("feature cache width e=" + std::to_string(cache.e) + " does not match model e=" + std::to_string(config.e));
  auto binary = [](const OutfitSample& o) { return o.t_ocr == 0.0 || o.t_ocr == 1.0; };
  std::vector<const OutfitSample*> tr, va;
  for (const auto& o : train)
    if (config.task_mode != TaskMode::OCb || binary(o)) tr.push_back(&o);
  for (const auto& o : valid)
    if (config.task_mode != TaskMode::OCb || binary(o)) va.push_back(&o);
  if (tr.empty()) throw ConfigError("train_victor: no training outfits for task mode " + to_string(config.task_mode));
  if (va.empty()) throw ConfigError("train_victor: no validation outfits for task mode " + to_string(config.task_mode));
  {
    std::vector<std::string> ids;
    for (const auto* o : tr) ids.insert(ids.end(), o->garment_ids.begin(), o->garment_ids.end());
    for (const auto* o : va) ids.insert(ids.end(), o->garment_ids.begin(), o->garment_ids.end());
    cache.require(ids);
  }

  VictorTrainResult res;
  res.model = init_victor(config);
  fit_input_standardisation(res.model, tr, cache);
  auto params = res.model.parameters();
  core::AdamState<double> adam(params, config.learning_rate);
  const core::StepDecay schedule{config.learning_rate, config.lr_factor, config.lr_step_epochs};
  std::mt19937_64 rng(config.seed ^ 0x5851f42d4c957f2dULL);
  const auto chunk = static_cast<std::size_t>(config.batch);
  std::vector<const OutfitSample*> order = tr;
  std::vector<OutfitSample> valid_targets;
  for (const auto* o : va) valid_targets.push_back(*o);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    adam.lr = schedule(epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0;
    for (std::size_t start = 0; start < order.size(); start += chunk) {
      const auto len = std::min(chunk, order.size() - start);
      const auto batch = make_batch(std::span(order).subspan(start, len), cache, config);
      for (auto* p : params) p->zero_grad();
      Graph<double> g;
      const auto f = victor_forward(g, res.model, batch, true, &rng);
      const auto loss = victor_loss(f, batch, config.task_mode, config.alpha);
      g.backward(loss);
      core::adam_step<double>(params, adam);
      total += loss.value()(0, 0) * static_cast<double>(len);
    }
    const auto ev = eval_pass(res.model, va, cache, true);
    EpochMetrics em;
    em.epoch = epoch + 1;
    em.lr = adam.lr;
    em.train_loss = total / static_cast<double>(order.size());
    em.valid_loss = ev.loss;
    em.valid = mode_metrics(compute_metrics(ev.predictions, valid_targets, metric_options(config.task_mode)), config.task_mode);
    res.history.push_back(em);
    res.checkpoints.push_back({em.epoch, em.lr, em.train_loss, em.valid, snapshot(res.model)});
    if (on_epoch) on_epoch(em);
  }
  if (!res.checkpoints.empty()) {
    res.selected = select_checkpoint(res.checkpoints);
    restore(res.model, res.checkpoints[res.selected].weights);
  }
  return res;
}

std::vector<OutfitPrediction> predict_outfits(const std::vector<std::vector<std::string>>& lists, const VictorModel& model,
                                              const FeatureCache& cache) {
  std::vector<OutfitSample> outfits;
  for (const auto& ids : lists) {
    if (ids.size() < kMinOutfitSize || ids.size() > static_cast<std::size_t>(model.config.max_items))
      throw ContractError("an outfit needs 2.." + std::to_string(model.config.max_items) + " garments, got " +
                          std::to_string(ids.size()));
    for (const auto& id : ids)
      if (!cache.find(id)) throw LookupError("unknown garment id '" + id + "'");
    OutfitSample o;
    o.outfit_id = "query";
    o.garment_ids = ids;
    o.t_mid.assign(ids.size(), 0);
    outfits.push_back(std::move(o));
  }
  const auto ps = pointers(outfits);
  return eval_pass(model, ps, cache, false).predictions;
}

OutfitPrediction predict_outfit(std::span<const std::string> garment_ids, const VictorModel& model, const FeatureCache& cache) {
  return predict_outfits({{garment_ids.begin(), garment_ids.end()}}, model, cache).front();
}

void save_victor(const std::filesystem::path& path, const VictorModel& model, const nlohmann::json& extra) {
  nlohmann::json meta = {{"kind", "victor"}, {"config", to_json(model.config)}};
  if (!extra.is_null()) meta["extra"] = extra;
  const auto ps = model.state();
  core::save_weights(path, ps, meta);
}

VictorModel load_victor(const std::filesystem::path& path) {
  const auto file = core::read_weight_file(path);
  if (file.metadata.value("kind", "") != "victor") throw ParseError(path.string() + "#/metadata/kind", "not a VICTOR model file");
  if (!file.metadata.contains("config")) throw ParseError(path.string() + "#/metadata/config", "missing");
  auto m = init_victor(victor_config_from_json(file.metadata["config"]));
  auto ps = m.state();
  core::assign_weights(file, ps);
  return m;
}

nlohmann::json read_victor_extra(const std::filesystem::path& path) {
  const auto file = core::read_weight_file(path);
  if (file.metadata.value("kind", "") != "victor") throw ParseError(path.string() + "#/metadata/kind", "not a VICTOR model file");
  return file.metadata.value("extra", nlohmann::json::object());
}

std::string model_hash(const VictorModel& model) {
  const auto ps = model.state();
  core::Fnv1a h;
  h.update(to_json(model.config).dump()).update(core::weights_hash(ps));
  return h.hex();
}

}  // namespace misfitlab
