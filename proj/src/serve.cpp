#include "misfitlab/serve.hpp"

#include <httplib.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <set>

#include "misfitlab/errors.hpp"

namespace misfitlab {

namespace {

using nlohmann::json;

constexpr int kDefaultPageSize = 50;
constexpr int kMaxPageSize = 1000;

// A request-level failure carried to the handler boundary.
struct Reject {
  Response response;
};

[[noreturn]] void reject(int status, std::string code, std::string message, json details = json::object()) {
  throw Reject{error_response(status, std::move(code), std::move(message), std::move(details))};
}

std::optional<std::string> query_value(const Query& q, const std::string& key) {
  const auto it = q.find(key);
  if (it == q.end()) return std::nullopt;
  return it->second;
}

long long parse_int(const std::string& text, const std::string& name) {
  long long v = 0;
  const auto* end = text.data() + text.size();
  const auto [p, ec] = std::from_chars(text.data(), end, v);
  if (text.empty() || ec != std::errc() || p != end)
    reject(400, "bad_request", "query parameter '" + name + "' must be an integer", {{"value", text}});
  return v;
}

double threshold_of(const ServeContext& ctx, const Query& q) {
  const auto raw = query_value(q, "threshold");
  if (!raw) return ctx.default_threshold;
  char* end = nullptr;
  const double t = std::strtod(raw->c_str(), &end);
  if (raw->empty() || end != raw->c_str() + raw->size() || !std::isfinite(t) || t < 0.0 || t > 1.0)
    reject(400, "bad_request", "threshold must be a number in [0, 1]", {{"value", *raw}});
  return t;
}

json parse_body(const std::string& body) {
  auto j = json::parse(body, nullptr, false);
  if (j.is_discarded()) reject(400, "malformed_json", "request body is not valid JSON");
  if (!j.is_object()) reject(400, "bad_request", "request body must be a JSON object");
  return j;
}

std::vector<std::string> id_list(const json& j, const std::string& field) {
  if (!j.is_array()) reject(400, "bad_request", "'" + field + "' must be an array of garment ids");
  std::vector<std::string> ids;
  for (const auto& x : j) {
    if (!x.is_string()) reject(400, "bad_request", "'" + field + "' must contain only strings");
    ids.push_back(x.get<std::string>());
  }
  return ids;
}

void require_known(const ServeContext& ctx, const std::vector<std::string>& ids) {
  json unknown = json::array();
  std::set<std::string> seen;
  for (const auto& id : ids)
    if ((!ctx.catalog.find(id) || !ctx.cache.find(id)) && seen.insert(id).second) unknown.push_back(id);
  if (!unknown.empty()) reject(404, "unknown_garment", "unknown garment id(s)", {{"garment_ids", unknown}});
}

std::vector<std::string> outfit_ids(const ServeContext& ctx, const json& req) {
  if (!req.contains("garment_ids")) reject(400, "bad_request", "missing 'garment_ids'");
  auto ids = id_list(req["garment_ids"], "garment_ids");
  const auto max = static_cast<std::size_t>(ctx.model.config.max_items);
  if (ids.size() < kMinOutfitSize || ids.size() > max)
    reject(422, "outfit_size", "an outfit needs between 2 and " + std::to_string(max) + " garments",
           {{"count", ids.size()}});
  require_known(ctx, ids);
  return ids;
}

json items_json(const std::vector<std::string>& ids, const OutfitPrediction& p, double threshold) {
  json items = json::array();
  for (std::size_t i = 0; i < ids.size(); ++i)
    items.push_back({{"garment_id", ids[i]}, {"mismatch_probability", p.y_mid[i]}, {"flagged", p.y_mid[i] >= threshold}});
  return items;
}

template <typename F>
Response guarded(F&& f) {
  try {
    return f();
  } catch (const Reject& r) {
    return r.response;
  }
}

}  // namespace

ServeContext make_context(Catalog catalog, FeatureCache cache, VictorModel model) {
  if (cache.e != model.config.e)
    throw ConfigError("feature cache width e=" + std::to_string(cache.e) + " does not match model e=" +
                      std::to_string(model.config.e));
  ServeContext ctx;
  ctx.catalog = std::move(catalog);
  ctx.cache = std::move(cache);
  ctx.model = std::move(model);
  ctx.model_version = model_hash(ctx.model);
  return ctx;
}

Response error_response(int status, std::string code, std::string message, nlohmann::json details) {
  return {status, {{"code", std::move(code)}, {"message", std::move(message)}, {"details", std::move(details)}}};
}

Response handle_score(const ServeContext& ctx, const std::string& body, const Query& query) {
  return guarded([&] {
    const double threshold = threshold_of(ctx, query);
    const auto ids = outfit_ids(ctx, parse_body(body));
    const auto p = predict_outfit(ids, ctx.model, ctx.cache);
    return Response{200, {{"model_version", ctx.model_version},
                          {"threshold", threshold},
                          {"oc_r", p.y_ocr},
                          {"items", items_json(ids, p, threshold)}}};
  });
}

Response handle_recommend(const ServeContext& ctx, const std::string& body, const Query& query) {
  return guarded([&] {
    const double threshold = threshold_of(ctx, query);
    const auto req = parse_body(body);
    const auto ids = outfit_ids(ctx, req);

    int top_k = 5;
    if (req.contains("top_k")) {
      if (!req["top_k"].is_number_integer() || req["top_k"].get<long long>() < 1)
        reject(400, "bad_request", "'top_k' must be a positive integer");
      top_k = static_cast<int>(std::min<long long>(req["top_k"].get<long long>(), 100000));
    }
    std::optional<std::vector<std::string>> pool;
    if (req.contains("candidate_pool") && !req["candidate_pool"].is_null()) {
      pool = id_list(req["candidate_pool"], "candidate_pool");
      require_known(ctx, *pool);
    }

    const auto baseline = predict_outfit(ids, ctx.model, ctx.cache);
    std::vector<std::size_t> targets;
    if (req.contains("target_position") && !req["target_position"].is_null()) {
      const auto& t = req["target_position"];
      if (!t.is_number_integer() || t.get<long long>() < 0 || t.get<long long>() >= static_cast<long long>(ids.size()))
        reject(400, "bad_request", "'target_position' must index the outfit", {{"count", ids.size()}});
      targets.push_back(t.get<std::size_t>());
    } else {
      for (std::size_t i = 0; i < ids.size(); ++i)
        if (baseline.y_mid[i] >= threshold) targets.push_back(i);
    }

    json positions = json::array();
    for (const auto pos : targets) {
      const int category = ctx.catalog.at(ids[pos]).category_id;
      // Garments already worn elsewhere in the outfit are not offered.
      std::set<std::string> occupied(ids.begin(), ids.end());
      occupied.erase(ids[pos]);
      std::vector<std::string> candidates;
      auto consider = [&](const std::string& id) {
        const auto* g = ctx.catalog.find(id);
        if (g && g->category_id == category && ctx.cache.find(id) && !occupied.contains(id)) candidates.push_back(id);
      };
      if (pool) {
        std::set<std::string> dedup;
        for (const auto& id : *pool)
          if (dedup.insert(id).second) consider(id);
      } else {
        for (const auto idx : ctx.catalog.in_category(category)) consider(ctx.catalog.garments()[idx].id);
      }
      if (candidates.empty())
        reject(422, "empty_candidate_pool", "no candidate of the replaced garment's category",
               {{"position", pos}, {"category_id", category}});

      std::vector<std::vector<std::string>> variants;
      for (const auto& c : candidates) {
        auto v = ids;
        v[pos] = c;
        variants.push_back(std::move(v));
      }
      const auto preds = predict_outfits(variants, ctx.model, ctx.cache);
      std::vector<std::size_t> order(candidates.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (preds[a].y_ocr != preds[b].y_ocr) return preds[a].y_ocr > preds[b].y_ocr;
        return candidates[a] < candidates[b];
      });
      json ranked = json::array();
      for (std::size_t r = 0; r < order.size() && r < static_cast<std::size_t>(top_k); ++r) {
        const auto i = order[r];
        ranked.push_back({{"garment_id", candidates[i]},
                          {"oc_r", preds[i].y_ocr},
                          {"mismatch_probability", preds[i].y_mid[pos]}});
      }
      positions.push_back({{"position", pos},
                           {"garment_id", ids[pos]},
                           {"category_id", category},
                           {"pool_size", candidates.size()},
                           {"candidates", std::move(ranked)}});
    }
    return Response{200, {{"model_version", ctx.model_version},
                          {"threshold", threshold},
                          {"baseline", {{"oc_r", baseline.y_ocr}, {"items", items_json(ids, baseline, threshold)}}},
                          {"positions", std::move(positions)}}};
  });
}

std::vector<std::string> swatch(const Image& image) {
  std::vector<std::string> colours;
  if (image.height <= 0 || image.width <= 0) return colours;
  for (int by = 0; by < 4; ++by)
    for (int bx = 0; bx < 4; ++bx) {
      // Block centres sit well inside the category border.
      const int y = std::min(image.height - 1, (2 * by + 1) * image.height / 8);
      const int x = std::min(image.width - 1, (2 * bx + 1) * image.width / 8);
      char buf[8];
      int rgb[3];
      for (int c = 0; c < 3; ++c)
        rgb[c] = static_cast<int>(std::lround(std::clamp(image.at(c, y, x), 0.0f, 1.0f) * 255.0f));
      std::snprintf(buf, sizeof buf, "#%02x%02x%02x", rgb[0], rgb[1], rgb[2]);
      colours.emplace_back(buf);
    }
  return colours;
}

Response handle_catalog(const ServeContext& ctx, const Query& query) {
  return guarded([&] {
    std::optional<int> category;
    if (auto c = query_value(query, "category"); c && !c->empty()) category = static_cast<int>(parse_int(*c, "category"));
    long long page = 0, page_size = kDefaultPageSize;
    if (auto p = query_value(query, "page")) page = parse_int(*p, "page");
    if (auto p = query_value(query, "page_size")) page_size = parse_int(*p, "page_size");
    if (page < 0) reject(400, "bad_request", "page must be >= 0", {{"page", page}});
    if (page_size < 1 || page_size > kMaxPageSize)
      reject(400, "bad_request", "page_size must be in [1, " + std::to_string(kMaxPageSize) + "]", {{"page_size", page_size}});

    std::vector<const Garment*> matches;
    for (const auto& g : ctx.catalog.garments())
      if (!category || g.category_id == *category) matches.push_back(&g);
    const auto total = static_cast<long long>(matches.size());
    json items = json::array();
    for (long long i = page * page_size; i < std::min(total, (page + 1) * page_size); ++i) {
      const auto& g = *matches[static_cast<std::size_t>(i)];
      json item = {{"id", g.id}, {"category_id", g.category_id}, {"category_name", g.category_name}};
      item["swatch"] = g.image ? json(swatch(*g.image)) : json(nullptr);
      items.push_back(std::move(item));
    }
    return Response{200, {{"total", total},
                          {"page", page},
                          {"page_size", page_size},
                          {"pages", (total + page_size - 1) / page_size},
                          {"items", std::move(items)}}};
  });
}

Response handle_health(const ServeContext& ctx) {
  return {200, {{"status", "ok"}, {"version", kVersion}, {"model_version", ctx.model_version}}};
}

Response handle_model(const ServeContext& ctx) {
  return {200, {{"model_version", ctx.model_version},
                {"config", to_json(ctx.model.config)},
                {"features", {{"e", ctx.cache.e}, {"provenance", to_string(ctx.cache.provenance)}, {"content_hash", ctx.cache.content_hash}}},
                {"catalog_size", ctx.catalog.size()},
                {"default_threshold", ctx.default_threshold}}};
}

ServeSettings resolve_settings(ServeSettings s, bool port_given, const std::function<const char*(const char*)>& getenv) {
  auto env = [&](const char* name) -> const char* { return getenv ? getenv(name) : std::getenv(name); };
  if (s.model.empty())
    if (const char* v = env("MISFITLAB_MODEL"); v && *v) s.model = v;
  if (s.catalog.empty())
    if (const char* v = env("MISFITLAB_CATALOG"); v && *v) s.catalog = v;
  if (!port_given)
    if (const char* v = env("MISFITLAB_PORT"); v && *v) {
      const std::string text = v;
      int port = 0;
      const auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), port);
      if (ec != std::errc() || p != text.data() + text.size() || port < 0 || port > 65535)
        throw ConfigError("MISFITLAB_PORT must be a port number, got '" + text + "'");
      s.port = port;
    }
  if (s.model.empty()) throw ConfigError("no model: pass --model or set MISFITLAB_MODEL");
  if (s.catalog.empty()) throw ConfigError("no catalog: pass --catalog or set MISFITLAB_CATALOG");
  if (s.port < 0 || s.port > 65535) throw ConfigError("port out of range: " + std::to_string(s.port));
  return s;
}

ServeContext load_context(const ServeSettings& settings) {
  auto model = load_victor(settings.model);
  const auto extra = read_victor_extra(settings.model);
  auto features = settings.features;
  if (features.empty()) {
    if (!extra.contains("features"))
      throw ConfigError("model file does not name its feature cache; pass --features");
    features = extra["features"].get<std::string>();
    if (features.is_relative()) features = settings.model.parent_path() / features;
  }
  auto cache = load_feature_cache(features);
  if (extra.contains("features_hash") && extra["features_hash"].get<std::string>() != cache.content_hash)
    throw DataError("feature cache " + features.string() + " does not match the one the model was trained on; rerun extract-features");
  auto corpus = load_corpus(settings.catalog);
  return make_context(std::move(corpus.catalog), std::move(cache), std::move(model));
}

Service::Service(std::shared_ptr<const ServeContext> ctx, std::string cors_origin)
    : ctx_(std::move(ctx)), server_(std::make_unique<httplib::Server>()) {
  auto& s = *server_;
  s.set_default_headers({{"Access-Control-Allow-Origin", cors_origin},
                         {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                         {"Access-Control-Allow-Headers", "Content-Type"}});
  auto send = [](httplib::Response& res, const Response& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  const auto ctx_ptr = ctx_;
  s.Post("/score", [=](const httplib::Request& req, httplib::Response& res) {
    send(res, handle_score(*ctx_ptr, req.body, req.params));
  });
  s.Post("/recommend", [=](const httplib::Request& req, httplib::Response& res) {
    send(res, handle_recommend(*ctx_ptr, req.body, req.params));
  });
  s.Get("/catalog", [=](const httplib::Request& req, httplib::Response& res) { send(res, handle_catalog(*ctx_ptr, req.params)); });
  s.Get("/health", [=](const httplib::Request&, httplib::Response& res) { send(res, handle_health(*ctx_ptr)); });
  s.Get("/model", [=](const httplib::Request&, httplib::Response& res) { send(res, handle_model(*ctx_ptr)); });
  s.Options(".*", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  s.set_exception_handler([=](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "unknown error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    send(res, error_response(500, "internal", what));
  });
  s.set_error_handler([=](const httplib::Request& req, httplib::Response& res) {
    if (!res.body.empty()) return httplib::Server::HandlerResponse::Unhandled;
    const int status = res.status;
    send(res, error_response(status, status == 404 ? "not_found" : "http_error", "no route for " + req.method + " " + req.path));
    return httplib::Server::HandlerResponse::Handled;
  });
}

Service::~Service() { stop(); }

bool Service::listen(const std::string& host, int port) { return server_->listen(host, port); }
int Service::bind_any(const std::string& host) { return server_->bind_to_any_port(host); }
bool Service::listen_after_bind() { return server_->listen_after_bind(); }
void Service::stop() {
  if (server_->is_running()) server_->stop();
}
bool Service::running() const { return server_->is_running(); }

}  // namespace misfitlab
