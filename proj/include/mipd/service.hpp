#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "mipd/loop.hpp"
#include "mipd/model_io.hpp"

namespace mipd {

struct ServiceOptions {
  std::string token;                          // empty: no auth
  std::optional<std::filesystem::path> snapshot_dir;  // written after each accepted iterate
  std::vector<double> dose_grid{0, 1, 2, 3, 4, 6, 8};
  std::string level_feature = "Hb";
  std::size_t preview_samples = 20;
  std::uint64_t seed = 1;
};

struct ApiResponse {
  int status = 200;
  Json body;
};

/// The /api/v1 surface as plain function calls. Reads run concurrently;
/// submissions are serialised; one iterate at a time (409 otherwise).
class Service {
 public:
  Service(LoopState state, Dataset train, Dataset test, ServiceOptions options = {});

  ApiResponse handle(const std::string& method, const std::string& path,
                     const std::map<std::string, std::string>& query = {}, const std::string& body = "",
                     const std::string& authorization = "");

  LoopState state() const;
  int version() const;
  /// Advice and edits staged for the next iterate.
  AdvicePool staged() const;
  /// Called after every accepted iterate with the new version.
  void on_iterate(std::function<void(int)> callback);

 private:
  ApiResponse route(const std::string& method, const std::vector<std::string>& parts,
                    const std::map<std::string, std::string>& query, const std::string& body);
  ApiResponse get_rules() const;
  ApiResponse get_rule(int id) const;
  ApiResponse post_edit(int id, const std::string& body, bool dry_run);
  ApiResponse get_patients(const std::map<std::string, std::string>& query) const;
  ApiResponse get_trajectory(const std::string& patient) const;
  ApiResponse get_dose_response(const std::string& patient, const std::map<std::string, std::string>& query) const;
  ApiResponse post_annotation(const std::string& body);
  ApiResponse get_annotations(const std::map<std::string, std::string>& query) const;
  ApiResponse get_agreement() const;
  ApiResponse post_iterate();
  ApiResponse get_metrics() const;
  ApiResponse get_versions() const;

  Json with_version(Json body) const;  // caller holds state_mu_
  std::vector<std::size_t> patient_rows(const std::string& patient) const;

  mutable std::shared_mutex state_mu_;
  LoopState state_;
  const Dataset train_;
  const Dataset test_;
  const Dataset all_;  // train and test, for browsing
  std::vector<bool> in_test_;
  ServiceOptions options_;

  mutable std::mutex staged_mu_;
  AdvicePool staged_;
  struct Submitted {
    int version;
    AdviceRecord record;
  };
  std::vector<Submitted> submitted_;  // every accepted POST, for listing
  std::vector<Submitted> quarantined_;

  std::mutex iterate_mu_;
  std::function<void(int)> on_iterate_;
};

/// Binds `service` to host:port (port 0 picks a free one) and serves until
/// stop() is called from another thread.
class HttpServer {
 public:
  explicit HttpServer(Service& service);
  ~HttpServer();
  /// Returns the bound port; throws io on bind failure.
  int bind(const std::string& host, int port);
  void run();  // blocks
  void stop();
  void wait_until_ready() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace mipd
