#pragma once

// HTTP adapter over Engine. Routes:
//   POST /jobs[?parallelism=N]   manifest JSON body -> 202 {"job_id"}; runs in background
//   GET  /jobs/{id}              JobState JSON (same bytes as `replica status`)
//   GET  /jobs/{id}/report       eval.json (same bytes as `replica results --format json`)
//   GET  /trials/{id}/bundle     bundle bytes, X-Bundle-Digest header
// Errors: 400 invalid manifest, 404 unknown id, 409 job not terminal.

#include <string>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "replica/scheduler.hpp"

namespace replica {

class Gateway {
public:
    explicit Gateway(Engine& engine, unsigned default_parallelism = 4)
        : engine_(engine), parallelism_(default_parallelism) {
        routes();
    }

    /// Blocks until stop().
    bool listen(const std::string& host, int port) { return server_.listen(host, port); }

    /// Binds an ephemeral port; call listen_after_bind() on another thread.
    int bind_any(const std::string& host = "127.0.0.1") { return server_.bind_to_any_port(host); }
    bool listen_after_bind() { return server_.listen_after_bind(); }
    void wait_until_ready() { server_.wait_until_ready(); }
    void stop() { server_.stop(); }

private:
    static void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
        res.status = status;
        res.set_content(body.dump(2) + "\n", "application/json");
    }

    static void send_error(httplib::Response& res, int status, const std::string& msg) {
        send_json(res, status, {{"error", msg}});
    }

    void routes() {
        server_.Post("/jobs", [this](const httplib::Request& req, httplib::Response& res) {
            unsigned par = parallelism_;
            if (req.has_param("parallelism")) {
                try {
                    par = static_cast<unsigned>(std::stoul(req.get_param_value("parallelism")));
                } catch (const std::exception&) {
                    return send_error(res, 400, "invalid parallelism");
                }
                if (par < 1) return send_error(res, 400, "invalid parallelism");
            }
            try {
                auto m = parse_manifest(req.body);
                auto id = engine_.submit(m);
                engine_.execute_async(id, par);
                send_json(res, 202, {{"job_id", id}});
            } catch (const ValidationFailed& e) {
                nlohmann::json v = nlohmann::json::array();
                for (const auto& item : e.report.items)
                    v.push_back({{"severity", item.severity == Severity::error ? "error" : "warning"},
                                 {"message", item.message}});
                send_json(res, 400, {{"error", e.what()}, {"violations", v}});
            } catch (const ManifestError& e) {
                send_error(res, 400, e.what());
            }
        });
        server_.Get(R"(/jobs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
            try {
                res.set_content(to_json(engine_.status(req.matches[1])).dump(2) + "\n", "application/json");
            } catch (const NotFound& e) {
                send_error(res, 404, e.what());
            }
        });
        server_.Get(R"(/jobs/([^/]+)/report)", [this](const httplib::Request& req, httplib::Response& res) {
            try {
                res.set_content(engine_.eval_artifact(req.matches[1], "eval.json"), "application/json");
            } catch (const NotFound& e) {
                send_error(res, 404, e.what());
            } catch (const StateError& e) {
                send_error(res, 409, e.what());
            }
        });
        server_.Get(R"(/trials/([^/]+)/bundle)", [this](const httplib::Request& req, httplib::Response& res) {
            try {
                auto bytes = engine_.store().export_bundle(req.matches[1].str());
                res.set_header("X-Bundle-Digest", sha256_hex(bytes));
                res.set_content(std::move(bytes), "application/x-tar");
            } catch (const NotFound& e) {
                send_error(res, 404, e.what());
            }
        });
        server_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
            try {
                std::rethrow_exception(ep);
            } catch (const std::exception& e) {
                send_error(res, 500, e.what());
            }
        });
    }

    Engine& engine_;
    unsigned parallelism_;
    httplib::Server server_;
};

} // namespace replica
