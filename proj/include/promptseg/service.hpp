#pragma once

#include "promptseg/app.hpp"

#include <json.hpp>

#include <memory>
#include <string>

namespace httplib {
class Server;
}

namespace promptseg {

struct ApiResponse {
    int status = 200;
    nlohmann::json body;
};

// Transport-independent handlers, one per endpoint.
ApiResponse handle_health(const AppContext& ctx);
ApiResponse handle_backends(const AppContext& ctx);
ApiResponse handle_segment(const AppContext& ctx, const nlohmann::json& request);
ApiResponse handle_saliency(const AppContext& ctx, const nlohmann::json& request);
ApiResponse handle_metrics(const AppContext& ctx, const nlohmann::json& request);

nlohmann::json to_json(const SegmentArtifacts& a);
nlohmann::json to_json(const SaliencyArtifacts& a);

class Service {
  public:
    explicit Service(const AppContext& ctx);
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    // Binds host:port (port 0 picks a free port) and returns the bound port.
    int bind(const std::string& host, int port);
    void listen(); // blocks until stop()
    void stop();
    void wait_until_ready() const;

  private:
    const AppContext& ctx_;
    std::unique_ptr<httplib::Server> server_;
};

void serve(const AppContext& ctx);

} // namespace promptseg
