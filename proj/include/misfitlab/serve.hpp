#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include <json.hpp>

#include "misfitlab/catalog.hpp"
#include "misfitlab/flip.hpp"
#include "misfitlab/victor.hpp"

namespace httplib {
class Server;
}

namespace misfitlab {

inline constexpr const char* kVersion = "0.1.0";

/// Everything a request may read. Built once, never mutated while serving.
struct ServeContext {
  Catalog catalog;
  FeatureCache cache;
  VictorModel model;
  std::string model_version;  // model_hash(model)
  double default_threshold = 0.5;
};

ServeContext make_context(Catalog catalog, FeatureCache cache, VictorModel model);

/// Status plus JSON body. Errors carry {code, message, details}.
struct Response {
  int status = 200;
  nlohmann::json body;
};

Response error_response(int status, std::string code, std::string message, nlohmann::json details = nlohmann::json::object());

using Query = std::multimap<std::string, std::string>;

// Handlers are pure functions of the context and the request; safe to call
// from any number of threads.
Response handle_score(const ServeContext& ctx, const std::string& body, const Query& query = {});
Response handle_recommend(const ServeContext& ctx, const std::string& body, const Query& query = {});
Response handle_catalog(const ServeContext& ctx, const Query& query);
Response handle_health(const ServeContext& ctx);
Response handle_model(const ServeContext& ctx);

/// Hex colours of the 4x4 colour blocks of a synthetic render, row-major.
std::vector<std::string> swatch(const Image& image);

struct ServeSettings {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path model;
  std::filesystem::path catalog;
  std::filesystem::path features;  // empty: taken from the model file
  std::string cors_origin = "*";
};

/// Fills unset fields from MISFITLAB_MODEL, MISFITLAB_CATALOG and
/// MISFITLAB_PORT; explicit values win. `getenv` is injectable for tests.
ServeSettings resolve_settings(ServeSettings flags, bool port_given,
                               const std::function<const char*(const char*)>& getenv = {});

/// Loads model, corpus catalog and feature cache named by the settings.
ServeContext load_context(const ServeSettings& settings);

/// Routes, CORS headers and JSON error mapping over an httplib server.
class Service {
 public:
  Service(std::shared_ptr<const ServeContext> ctx, std::string cors_origin = "*");
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds and serves until stop(); returns false if the bind failed.
  bool listen(const std::string& host, int port);
  /// Binds to an ephemeral port and returns it (or -1).
  int bind_any(const std::string& host);
  bool listen_after_bind();
  void stop();
  bool running() const;

 private:
  std::shared_ptr<const ServeContext> ctx_;
  std::unique_ptr<httplib::Server> server_;
};

}  // namespace misfitlab
