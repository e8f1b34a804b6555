#pragma once

#include <atomic>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "rebalance/controller.hpp"
#include "rebalance/json_util.hpp"

namespace rebalance::protocol {

/// Loaded, hash-linked artifacts shared by every session of a server.
struct ControlArtifacts {
  surface::ControlSurface surface;
  std::shared_ptr<const steering::SteeringVector> steering;
  std::string surface_hash;
  std::string steering_hash;
};

/// Loads both files and refuses a surface that was fit from another vector.
ControlArtifacts load_artifacts(const std::string& surface_path, const std::string& steering_path);

struct SessionSummary {
  std::string session;  // JSON-encoded id
  std::size_t steps = 0;
  std::size_t tokens = 0;
  std::size_t directives = 0;
  bool completed = false;  // ended with an end frame rather than an error or EOF
};

/**
 * NDJSON control protocol.
 *
 *   -> hello   {session, surface_hash, window?, delimiter?, think_end_marker?,
 *               actuator?, vector_hash?, width?}
 *   <- ready   {session, layer, dim, vector_hash, v?}   (v omitted when the
 *               client already holds the vector with that hash)
 *   -> token   {session, i, text, p_max}
 *   <- directive {session, step, alpha, lambda, delta, layer}  or  temp {session, value}
 *   -> end     {session}
 *   <- bye     {session, steps, tokens}
 *   <- error   {code, message, session?}   (the offending session is closed)
 *
 * handle_line is safe to call from several threads; events of one session
 * must still come from one producer at a time.
 */
class Server {
 public:
  explicit Server(std::shared_ptr<const ControlArtifacts> artifacts);

  /// Processes one input line and returns the output lines (without newlines).
  std::vector<std::string> handle_line(std::string_view line);

  /// Serves until end of input; output is flushed after every reply.
  void serve(std::istream& in, std::ostream& out);

  /// Summaries of finished sessions followed by still-open ones.
  std::vector<SessionSummary> summaries() const;
  std::size_t open_sessions() const;
  /// Error frames emitted so far.
  std::size_t errors() const;

 private:
  struct Entry {
    std::mutex mu;
    control::Session session;
    SessionSummary summary;
    explicit Entry(control::Session s) : session(std::move(s)) {}
  };

  std::vector<std::string> dispatch(std::string_view line);
  std::vector<std::string> on_hello(const Json& msg, const std::string& key, const Json& id);
  std::vector<std::string> on_token(const Json& msg, const std::string& key, const Json& id);
  std::vector<std::string> on_end(const std::string& key, const Json& id);
  std::shared_ptr<Entry> find(const std::string& key) const;
  void retire(const std::string& key, bool completed);

  std::shared_ptr<const ControlArtifacts> artifacts_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
  std::vector<SessionSummary> finished_;
  std::atomic<std::size_t> errors_{0};
};

std::string error_frame(const std::string& code, const std::string& message,
                        const Json* session = nullptr);

/// Line-oriented TCP front end; one thread per connection, all connections
/// share one Server so sessions may move between connections.
class TcpServer {
 public:
  TcpServer(std::shared_ptr<Server> server, std::string host, std::uint16_t port);
  ~TcpServer();
  TcpServer(const TcpServer&) = delete;
  TcpServer& operator=(const TcpServer&) = delete;

  /// Binds and starts accepting; returns the bound port (useful with port 0).
  std::uint16_t start();
  /// Stops accepting and joins connection threads.
  void stop();
  /// Blocks until stop() is called from elsewhere.
  void wait();

 private:
  void accept_loop();
  void connection(int fd);

  std::shared_ptr<Server> server_;
  std::string host_;
  std::uint16_t port_;
  int listen_fd_ = -1;
  std::atomic<bool> running_{false};
  std::thread acceptor_;
  std::mutex conn_mu_;
  std::vector<std::thread> connections_;
};

}  // namespace rebalance::protocol
