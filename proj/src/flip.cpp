#include "misfitlab/flip.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>

#include "misfitlab/core/adam.hpp"
#include "misfitlab/core/init.hpp"
#include "misfitlab/core/io.hpp"
#include "misfitlab/core/ops.hpp"
#include "misfitlab/core/weights.hpp"
#include "misfitlab/errors.hpp"

namespace misfitlab {

using core::Graph;
using core::Matrix;
using core::Parameter;
namespace ops = core;

nlohmann::json to_json(const FlipConfig& c) {
  return {{"embed_dim", c.embed_dim},
          {"proj_dim", c.proj_dim},
          {"conv1_channels", c.conv1_channels},
          {"conv2_channels", c.conv2_channels},
          {"kernel", c.kernel},
          {"image_size", c.image_size},
          {"vocabulary_size", c.vocabulary_size},
          {"epochs", c.epochs},
          {"batch", c.batch},
          {"learning_rate", c.learning_rate},
          {"lr_factor", c.lr_factor},
          {"lr_step_epochs", c.lr_step_epochs},
          {"logit_scale_init", c.logit_scale_init},
          {"logit_scale_max", c.logit_scale_max},
          {"seed", c.seed}};
}

FlipConfig flip_config_from_json(const nlohmann::json& j) {
  FlipConfig c;
  try {
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.proj_dim = j.value("proj_dim", c.proj_dim);
    c.conv1_channels = j.value("conv1_channels", c.conv1_channels);
    c.conv2_channels = j.value("conv2_channels", c.conv2_channels);
    c.kernel = j.value("kernel", c.kernel);
    c.image_size = j.value("image_size", c.image_size);
    c.vocabulary_size = j.value("vocabulary_size", c.vocabulary_size);
    c.epochs = j.value("epochs", c.epochs);
    c.batch = j.value("batch", c.batch);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.lr_factor = j.value("lr_factor", c.lr_factor);
    c.lr_step_epochs = j.value("lr_step_epochs", c.lr_step_epochs);
    c.logit_scale_init = j.value("logit_scale_init", c.logit_scale_init);
    c.logit_scale_max = j.value("logit_scale_max", c.logit_scale_max);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("flip config: ") + e.what());
  }
  return c;
}

void validate(const FlipConfig& c) {
  if (c.embed_dim < 1 || c.proj_dim < 1) throw ConfigError("flip: embed_dim and proj_dim must be positive");
  if (c.conv1_channels < 1 || c.conv2_channels < 1) throw ConfigError("flip: conv channels must be positive");
  if (c.kernel < 1 || c.kernel % 2 == 0) throw ConfigError("flip: kernel must be odd");
  if (c.image_size < 4 || c.image_size % 4 != 0) throw ConfigError("flip: image_size must be a positive multiple of 4");
  if (c.vocabulary_size < 1) throw ConfigError("flip: vocabulary_size must be positive");
  if (c.epochs < 0) throw ConfigError("flip: epochs must be non-negative");
  if (c.batch < 2) throw ConfigError("flip: batch must be at least 2");
  if (!(c.learning_rate > 0)) throw ConfigError("flip: learning_rate must be positive");
  if (c.lr_step_epochs < 1) throw ConfigError("flip: lr_step_epochs must be positive");
}

std::vector<Parameter<double>*> FlipModel::parameters() {
  return {&conv1_w,     &conv1_b,         &conv2_w,         &conv2_b,     &visual_w,    &visual_b,
          &token_embedding, &text_w,      &text_b,          &proj_visual_w, &proj_visual_b, &proj_text_w,
          &proj_text_b, &logit_scale};
}

std::vector<const Parameter<double>*> FlipModel::parameters() const {
  auto ps = const_cast<FlipModel*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

namespace {

Matrix<double> zeros(Eigen::Index r, Eigen::Index c) { return Matrix<double>::Zero(r, c); }

int pooled_size(const FlipConfig& c) { return c.image_size / 4; }

}  // namespace

FlipModel init_flip(const FlipConfig& config) {
  validate(config);
  std::mt19937_64 rng(config.seed);
  const int k2 = config.kernel * config.kernel;
  const int e = config.embed_dim, p = config.proj_dim;
  const int flat = config.conv2_channels * pooled_size(config) * pooled_size(config);
  FlipModel m;
  m.config = config;
  // Conv weights are (out, in·k·k); Xavier over the receptive field.
  m.conv1_w = {"flip.conv1.w", core::xavier_uniform<double>(3 * k2, config.conv1_channels, rng).transpose()};
  m.conv1_b = {"flip.conv1.b", zeros(1, config.conv1_channels)};
  m.conv2_w = {"flip.conv2.w", core::xavier_uniform<double>(config.conv1_channels * k2, config.conv2_channels, rng).transpose()};
  m.conv2_b = {"flip.conv2.b", zeros(1, config.conv2_channels)};
  m.visual_w = {"flip.visual.w", core::xavier_uniform<double>(flat, e, rng)};
  m.visual_b = {"flip.visual.b", zeros(1, e)};
  m.token_embedding = {"flip.text.embedding", core::normal_init<double>(config.vocabulary_size, e, 0.02, rng)};
  m.text_w = {"flip.text.w", core::xavier_uniform<double>(e, e, rng)};
  m.text_b = {"flip.text.b", zeros(1, e)};
  m.proj_visual_w = {"flip.proj_visual.w", core::xavier_uniform<double>(e, p, rng)};
  m.proj_visual_b = {"flip.proj_visual.b", zeros(1, p)};
  m.proj_text_w = {"flip.proj_text.w", core::xavier_uniform<double>(e, p, rng)};
  m.proj_text_b = {"flip.proj_text.b", zeros(1, p)};
  m.logit_scale = {"flip.logit_scale", Matrix<double>::Constant(1, 1, config.logit_scale_init)};
  return m;
}

FlipModel make_stub_model(FlipConfig config) { return init_flip(config); }

FlipBatch make_flip_batch(std::span<const Garment* const> garments, int image_size) {
  FlipBatch b;
  const Eigen::Index pixels = 3 * image_size * image_size;
  b.images.resize(static_cast<Eigen::Index>(garments.size()), pixels);
  for (std::size_t i = 0; i < garments.size(); ++i) {
    const Garment& g = *garments[i];
    if (!g.image) throw ConfigError("garment '" + g.id + "' has no image");
    if (g.image->height != image_size || g.image->width != image_size)
      throw ConfigError("garment '" + g.id + "' image is not " + std::to_string(image_size) + "x" + std::to_string(image_size));
    if (g.text_tokens.empty()) throw ConfigError("garment '" + g.id + "' has no text tokens");
    for (Eigen::Index j = 0; j < pixels; ++j) b.images(static_cast<Eigen::Index>(i), j) = g.image->pixels[static_cast<std::size_t>(j)];
    b.tokens.push_back(g.text_tokens);
  }
  return b;
}

namespace {

Var bind(Graph<double>& g, Parameter<double>& p, bool train) { return train ? g.parameter(p) : g.constant(p.value); }

}  // namespace

Var encode_images(Graph<double>& g, FlipModel& m, const Matrix<double>& images, bool train) {
  const auto& c = m.config;
  const Eigen::Index s = c.image_size;
  auto x = g.constant(images);
  auto h = ops::conv2d(x, bind(g, m.conv1_w, train), bind(g, m.conv1_b, train), {3, s, s}, c.kernel);
  h = ops::avg_pool2(ops::gelu(h), {c.conv1_channels, s, s});
  h = ops::conv2d(h, bind(g, m.conv2_w, train), bind(g, m.conv2_b, train), {c.conv1_channels, s / 2, s / 2}, c.kernel);
  h = ops::avg_pool2(ops::gelu(h), {c.conv2_channels, s / 2, s / 2});
  return ops::linear(h, bind(g, m.visual_w, train), bind(g, m.visual_b, train));
}

Var encode_texts(Graph<double>& g, FlipModel& m, const std::vector<std::vector<int>>& tokens, bool train) {
  auto pooled = ops::embedding_mean(bind(g, m.token_embedding, train), tokens);
  return ops::linear(pooled, bind(g, m.text_w, train), bind(g, m.text_b, train));
}

Var contrastive_loss_from_projections(Var f_visual, Var f_text, Var logit_scale) {
  if (f_visual.rows() < 2) throw ContractError("flip_contrastive_loss: batch needs at least 2 pairs");
  auto logits = ops::scalar_mul(ops::matmul(f_visual, ops::transpose(f_text)), ops::exp(logit_scale));
  auto both = ops::add(ops::cross_entropy_diagonal(logits), ops::cross_entropy_diagonal(ops::transpose(logits)));
  return ops::scale(both, 0.5);
}

FlipForward flip_contrastive_loss(Graph<double>& g, FlipModel& m, const FlipBatch& batch, bool train) {
  if (batch.size() < 2) throw ContractError("flip_contrastive_loss: batch needs at least 2 pairs");
  auto ev = encode_images(g, m, batch.images, train);
  auto et = encode_texts(g, m, batch.tokens, train);
  FlipForward f;
  f.f_visual = ops::l2_normalize_rows(ops::linear(ev, bind(g, m.proj_visual_w, train), bind(g, m.proj_visual_b, train)));
  f.f_text = ops::l2_normalize_rows(ops::linear(et, bind(g, m.proj_text_w, train), bind(g, m.proj_text_b, train)));
  auto scale = bind(g, m.logit_scale, train);
  f.logits = ops::scalar_mul(ops::matmul(f.f_visual, ops::transpose(f.f_text)), ops::exp(scale));
  f.loss = ops::scale(ops::add(ops::cross_entropy_diagonal(f.logits), ops::cross_entropy_diagonal(ops::transpose(f.logits))), 0.5);
  return f;
}

nlohmann::json FlipEpoch::to_json() const {
  return {{"epoch", epoch}, {"lr", lr}, {"train_loss", train_loss}, {"valid_loss", valid_loss}, {"valid_top1", valid_top1}};
}

FlipEvaluation evaluate_flip(FlipModel& model, std::span<const Garment* const> garments, int batch) {
  FlipEvaluation ev;
  std::size_t hits = 0, rows = 0;
  for (std::size_t start = 0; start < garments.size(); start += static_cast<std::size_t>(batch)) {
    const auto len = std::min<std::size_t>(static_cast<std::size_t>(batch), garments.size() - start);
    if (len < 2) break;
    const auto fb = make_flip_batch(garments.subspan(start, len), model.config.image_size);
    Graph<double> g;
    const auto f = flip_contrastive_loss(g, model, fb, false);
    ev.loss += f.loss.value()(0, 0);
    ++ev.batches;
    const auto& z = f.logits.value();
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      Eigen::Index best = 0;
      z.row(r).maxCoeff(&best);
      hits += best == r;
    }
    rows += len;
  }
  if (ev.batches == 0) throw ContractError("evaluate_flip: needs at least 2 garments");
  ev.loss /= static_cast<double>(ev.batches);
  ev.top1 = static_cast<double>(hits) / static_cast<double>(rows);
  return ev;
}

FlipTrainResult train_flip(const Catalog& catalog, FlipConfig config) {
  if (config.vocabulary_size == 0) config.vocabulary_size = catalog.vocabulary_size();
  validate(config);
  std::vector<const Garment*> train, valid;
  for (const auto& g : catalog.garments()) {
    if (!g.split) throw ConfigError("train_flip: garment '" + g.id + "' has no split; FLIP trains on the garment-level train split");
    if (!g.image) throw ConfigError("train_flip: garment '" + g.id + "' is missing the image modality");
    if (g.text_tokens.empty()) throw ConfigError("train_flip: garment '" + g.id + "' is missing the text modality");
    if (*g.split == Split::train) train.push_back(&g);
    if (*g.split == Split::valid) valid.push_back(&g);
  }
  if (train.size() < 2 || valid.size() < 2) throw ConfigError("train_flip: train and valid splits need at least 2 garments each");

  FlipTrainResult res;
  res.model = init_flip(config);
  res.train_garments = train.size();
  res.valid_garments = valid.size();
  auto params = res.model.parameters();
  core::AdamState<double> adam(params, config.learning_rate);
  const core::StepDecay schedule{config.learning_rate, config.lr_factor, config.lr_step_epochs};
  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);

  const auto initial = evaluate_flip(res.model, valid, config.batch);
  res.curve.push_back({0, 0.0, std::nan(""), initial.loss, initial.top1});

  std::vector<std::size_t> order(train.size());
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    adam.lr = schedule(epoch);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0;
    std::size_t steps = 0;
    std::vector<const Garment*> chunk;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch)) {
      const auto len = std::min<std::size_t>(static_cast<std::size_t>(config.batch), order.size() - start);
      if (len < 2) break;
      chunk.clear();
      for (std::size_t i = 0; i < len; ++i) chunk.push_back(train[order[start + i]]);
      const auto fb = make_flip_batch(chunk, config.image_size);
      for (auto* p : params) p->zero_grad();
      Graph<double> g;
      const auto f = flip_contrastive_loss(g, res.model, fb, true);
      g.backward(f.loss);
      core::adam_step<double>(params, adam);
      // Same cap as the reference recipe: the temperature may not exceed 100.
      auto& s = res.model.logit_scale.value(0, 0);
      s = std::min(s, config.logit_scale_max);
      total += f.loss.value()(0, 0);
      ++steps;
    }
    const auto ev = evaluate_flip(res.model, valid, config.batch);
    res.curve.push_back({epoch + 1, adam.lr, total / static_cast<double>(std::max<std::size_t>(steps, 1)), ev.loss, ev.top1});
  }
  return res;
}

void save_flip(const std::filesystem::path& path, const FlipModel& model, const std::vector<FlipEpoch>& curve) {
  nlohmann::json meta = {{"kind", "flip"}, {"config", to_json(model.config)}};
  if (!curve.empty()) {
    meta["curve"] = nlohmann::json::array();
    for (const auto& e : curve) meta["curve"].push_back(e.to_json());
  }
  const auto ps = model.parameters();
  core::save_weights(path, ps, meta);
}

FlipModel load_flip(const std::filesystem::path& path) {
  const auto file = core::read_weight_file(path);
  if (file.metadata.value("kind", "") != "flip") throw ParseError(path.string() + "#/metadata/kind", "not a FLIP model file");
  FlipModel m = init_flip(flip_config_from_json(file.metadata.at("config")));
  auto ps = m.parameters();
  core::assign_weights(file, ps);
  return m;
}

// ---------------------------------------------------------------------------
// Feature cache

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::flip: return "flip";
    case Provenance::imagenet_stub: return "imagenet-stub";
    case Provenance::raw: return "raw";
  }
  return "?";
}

Provenance parse_provenance(const std::string& s) {
  if (s == "flip") return Provenance::flip;
  if (s == "imagenet-stub") return Provenance::imagenet_stub;
  if (s == "raw") return Provenance::raw;
  throw ConfigError("unknown provenance '" + s + "' (expected flip, imagenet-stub or raw)");
}

const CachedFeatures* FeatureCache::find(const std::string& garment_id) const {
  auto it = entries.find(garment_id);
  return it == entries.end() ? nullptr : &it->second;
}

void FeatureCache::require(std::span<const std::string> garment_ids) const {
  std::vector<std::string> missing;
  for (const auto& id : garment_ids)
    if (!entries.contains(id) && std::find(missing.begin(), missing.end(), id) == missing.end()) missing.push_back(id);
  if (missing.empty()) return;
  std::string msg = "feature cache is missing " + std::to_string(missing.size()) + " garment(s):";
  for (std::size_t i = 0; i < missing.size() && i < 20; ++i) msg += " " + missing[i];
  if (missing.size() > 20) msg += " ...";
  throw DataError(msg);
}

void save_feature_cache(const std::filesystem::path& path, const FeatureCache& cache) {
  nlohmann::json header = {{"e", cache.e},
                           {"provenance", to_string(cache.provenance)},
                           {"content_hash", cache.content_hash},
                           {"count", cache.entries.size()}};
  const auto text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  core::write_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [id, f] : cache.entries) {
    if (f.visual.size() != static_cast<std::size_t>(cache.e) || f.text.size() != static_cast<std::size_t>(cache.e))
      throw ContractError("feature cache entry '" + id + "' does not have length e");
    core::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(id.size()));
    out.write(id.data(), static_cast<std::streamsize>(id.size()));
    for (double v : f.visual) core::write_le(out, v);
    for (double v : f.text) core::write_le(out, v);
  }
  if (!out) throw DataError("write failed for " + path.string());
}

namespace {

nlohmann::json read_header(std::istream& in, const std::string& where) {
  const auto n = core::read_le<std::uint64_t>(in, where);
  if (n > (1ULL << 24)) throw ParseError(where, "implausible header length");
  std::string text(n, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(n))) throw ParseError(where, "truncated header");
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(where + "#/", e.what());
  }
}

}  // namespace

nlohmann::json read_feature_cache_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return read_header(in, path.string());
}

FeatureCache load_feature_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  const std::string where = path.string();
  const auto h = read_header(in, where);
  FeatureCache c;
  std::size_t count = 0;
  try {
    c.e = h.at("e").get<int>();
    c.provenance = parse_provenance(h.at("provenance").get<std::string>());
    c.content_hash = h.at("content_hash").get<std::string>();
    count = h.at("count").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(where + "#/", e.what());
  }
  if (c.e < 1) throw ParseError(where + "#/e", "must be positive");
  for (std::size_t i = 0; i < count; ++i) {
    const auto len = core::read_le<std::uint32_t>(in, where);
    std::string id(len, '\0');
    if (!in.read(id.data(), len)) throw ParseError(where, "truncated record " + std::to_string(i));
    CachedFeatures f;
    f.visual.resize(static_cast<std::size_t>(c.e));
    f.text.resize(static_cast<std::size_t>(c.e));
    for (auto& v : f.visual) v = core::read_le<double>(in, where);
    for (auto& v : f.text) v = core::read_le<double>(in, where);
    for (double v : f.visual)
      if (!std::isfinite(v)) throw ParseError(where, "non-finite feature for '" + id + "'");
    for (double v : f.text)
      if (!std::isfinite(v)) throw ParseError(where, "non-finite feature for '" + id + "'");
    c.entries.emplace(std::move(id), std::move(f));
  }
  return c;
}

namespace {

constexpr int kRawGrid = 4;

std::optional<std::string> missing_modality(const Garment& g, Provenance p, int image_size) {
  if (!g.image) return "no image";
  if (g.text_tokens.empty()) return "no text tokens";
  if (p != Provenance::raw && (g.image->height != image_size || g.image->width != image_size))
    return "image size does not match the encoder";
  return std::nullopt;
}

}  // namespace

CachedFeatures raw_features(const Garment& g, int vocabulary_size, int e) {
  const Image& img = *g.image;
  if (img.height % kRawGrid != 0 || img.width % kRawGrid != 0) throw DataError("raw features need image sides divisible by 4");
  if (e < 3 * kRawGrid * kRawGrid || e < vocabulary_size)
    throw ConfigError("raw features need e >= max(48, vocabulary size)");
  CachedFeatures f{std::vector<double>(static_cast<std::size_t>(e), 0.0), std::vector<double>(static_cast<std::size_t>(e), 0.0)};
  const int ch = img.height / kRawGrid, cw = img.width / kRawGrid;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        f.visual[static_cast<std::size_t>((c * kRawGrid + y / ch) * kRawGrid + x / cw)] += img.at(c, y, x);
  for (int i = 0; i < 3 * kRawGrid * kRawGrid; ++i) f.visual[static_cast<std::size_t>(i)] /= ch * cw;
  for (int t : g.text_tokens) {
    if (t < 0 || t >= vocabulary_size) throw DataError("garment '" + g.id + "' has token outside the vocabulary");
    f.text[static_cast<std::size_t>(t)] += 1.0 / static_cast<double>(g.text_tokens.size());
  }
  return f;
}

std::string feature_content_hash(const Catalog& catalog, Provenance provenance, const FlipModel* model, int e) {
  core::Fnv1a h;
  h.update(to_string(provenance)).update_value(e);
  if (model && provenance != Provenance::raw) {
    const auto ps = model->parameters();
    h.update(core::weights_hash(ps));
  }
  for (const auto& g : catalog.garments()) {
    h.update(g.id).update_value(g.category_id);
    if (g.image) {
      h.update_value(g.image->height).update_value(g.image->width);
      h.update(std::span(reinterpret_cast<const unsigned char*>(g.image->pixels.data()), g.image->pixels.size() * sizeof(float)));
    }
    h.update_value(g.text_tokens.size());
    for (int t : g.text_tokens) h.update_value(t);
  }
  return h.hex();
}

ExtractionResult extract_features(const Catalog& catalog, Provenance provenance, const FlipModel* model, int e,
                                  const std::optional<std::filesystem::path>& cache_path) {
  if (provenance != Provenance::raw) {
    if (!model) throw ConfigError("extract_features: " + to_string(provenance) + " provenance needs an encoder model");
    if (model->config.embed_dim != e)
      throw ConfigError("extract_features: encoder width " + std::to_string(model->config.embed_dim) + " != e " + std::to_string(e));
  }
  ExtractionResult res;
  const int image_size = model ? model->config.image_size : 0;
  const int vocab = model ? model->config.vocabulary_size : catalog.vocabulary_size();
  std::vector<const Garment*> usable;
  for (const auto& g : catalog.garments()) {
    if (auto why = missing_modality(g, provenance, image_size))
      res.omissions.push_back({g.id, *why});
    else
      usable.push_back(&g);
  }

  const auto hash = feature_content_hash(catalog, provenance, model, e);
  if (cache_path && std::filesystem::exists(*cache_path)) {
    try {
      const auto header = read_feature_cache_header(*cache_path);
      if (header.value("content_hash", "") == hash) {
        res.cache = load_feature_cache(*cache_path);
        res.reused = true;
        return res;
      }
    } catch (const ParseError&) {
      // Unreadable caches are rebuilt.
    }
  }

  res.cache.e = e;
  res.cache.provenance = provenance;
  res.cache.content_hash = hash;
  if (provenance == Provenance::raw) {
    for (const auto* g : usable) res.cache.entries.emplace(g->id, raw_features(*g, vocab, e));
    res.encoder_evaluations = usable.size();
  } else {
    auto& m = const_cast<FlipModel&>(*model);  // encoders are only read: parameters enter the tape as constants
    constexpr std::size_t kChunk = 64;
    for (std::size_t start = 0; start < usable.size(); start += kChunk) {
      const auto len = std::min(kChunk, usable.size() - start);
      const auto fb = make_flip_batch(std::span(usable).subspan(start, len), image_size);
      Graph<double> g;
      const auto vv = encode_images(g, m, fb.images, false);
      const auto tv = encode_texts(g, m, fb.tokens, false);
      const auto& v = vv.value();
      const auto& t = tv.value();
      for (std::size_t i = 0; i < len; ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        CachedFeatures f{{v.row(r).begin(), v.row(r).end()}, {t.row(r).begin(), t.row(r).end()}};
        res.cache.entries.emplace(usable[start + i]->id, std::move(f));
      }
      res.encoder_evaluations += len;
    }
  }
  for (const auto& [id, f] : res.cache.entries)
    for (double x : f.visual)
      if (!std::isfinite(x)) throw DataError("non-finite feature for garment '" + id + "'");
  if (cache_path) save_feature_cache(*cache_path, res.cache);
  return res;
}

}  // namespace misfitlab
