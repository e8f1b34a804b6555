#include "rebalance/protocol.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <iostream>

#include "rebalance/artifacts.hpp"
#include "rebalance/error.hpp"

namespace rebalance::protocol {

namespace ju = json_util;

ControlArtifacts load_artifacts(const std::string& surface_path,
                                const std::string& steering_path) {
  const std::string surface_bytes = artifacts::read_file(surface_path);
  const std::string steering_bytes = artifacts::read_file(steering_path);
  const auto surf = artifacts::read_surface(surface_bytes);
  const auto steer = artifacts::read_steering(steering_bytes);

  ControlArtifacts out;
  out.steering_hash = artifacts::sha256_hex(steering_bytes);
  out.surface_hash = artifacts::sha256_hex(surface_bytes);
  if (surf.steering_hash != out.steering_hash) {
    throw data_error("hash_mismatch", "surface " + surface_path + " was fit from steering hash " +
                                          surf.steering_hash + ", but " + steering_path +
                                          " hashes to " + out.steering_hash);
  }
  if (surf.layer != steer.vector.layer) {
    throw data_error("hash_mismatch", "surface and steering vector name different layers");
  }
  out.surface = surf.surface;
  out.steering = std::make_shared<const steering::SteeringVector>(steer.vector);
  return out;
}

std::string error_frame(const std::string& code, const std::string& message,
                        const Json* session) {
  Json j{{"kind", "error"}, {"code", code}, {"message", message}};
  if (session) j["session"] = *session;
  return j.dump();
}

Server::Server(std::shared_ptr<const ControlArtifacts> artifacts)
    : artifacts_(std::move(artifacts)) {
  if (!artifacts_) throw config_error("server needs loaded artifacts");
}

std::shared_ptr<Server::Entry> Server::find(const std::string& key) const {
  std::lock_guard lk(mu_);
  auto it = sessions_.find(key);
  return it == sessions_.end() ? nullptr : it->second;
}

void Server::retire(const std::string& key, bool completed) {
  std::lock_guard lk(mu_);
  auto it = sessions_.find(key);
  if (it == sessions_.end()) return;
  SessionSummary s = it->second->summary;
  s.completed = completed;
  finished_.push_back(std::move(s));
  sessions_.erase(it);
}

std::vector<std::string> Server::dispatch(std::string_view line) {
  Json msg;
  try {
    msg = ju::parse(line, "frame");
  } catch (const Error& e) {
    return {error_frame("parse", e.what())};
  }
  if (!msg.is_object()) return {error_frame("parse", "frame: expected a JSON object")};

  auto kind_it = msg.find("kind");
  auto sess_it = msg.find("session");
  if (sess_it == msg.end() || !(sess_it->is_string() || sess_it->is_number_integer())) {
    return {error_frame("schema", "frame: 'session' must be a string or integer")};
  }
  const Json id = *sess_it;
  const std::string key = id.dump();
  if (kind_it == msg.end() || !kind_it->is_string()) {
    retire(key, false);
    return {error_frame("schema", "frame: missing string field 'kind'", &id)};
  }
  const std::string kind = kind_it->get<std::string>();

  try {
    if (kind == "hello") return on_hello(msg, key, id);
    if (kind == "token") return on_token(msg, key, id);
    if (kind == "end") return on_end(key, id);
    throw protocol_error("schema", "frame: unknown kind '" + kind + "'");
  } catch (const Error& e) {
    if (e.code() != "duplicate_session") retire(key, false);
    return {error_frame(e.code(), e.what(), &id)};
  }
}

std::vector<std::string> Server::handle_line(std::string_view line) {
  auto out = dispatch(line);
  for (const auto& r : out) {
    if (r.starts_with(R"({"kind":"error")")) errors_.fetch_add(1, std::memory_order_relaxed);
  }
  return out;
}

std::vector<std::string> Server::on_hello(const Json& msg, const std::string& key,
                                          const Json& id) {
  const std::string where = "hello";
  // Checked first: a second hello must never close the session already open.
  if (find(key)) throw protocol_error("duplicate_session", "session " + key + " is already open");
  ju::only_keys(msg, {"kind", "session", "surface_hash", "window", "delimiter",
                      "think_end_marker", "actuator", "vector_hash", "width"},
                where);
  if (ju::string(msg, "surface_hash", where) != artifacts_->surface_hash) {
    throw protocol_error("hash_mismatch", "hello: surface_hash does not match the loaded surface");
  }

  control::SessionConfig cfg;
  cfg.surface = artifacts_->surface;
  cfg.steering = artifacts_->steering;
  cfg.actuator = artifacts_->surface.actuator;
  if (msg.contains("window")) {
    const auto w = ju::index(msg, "window", where);
    if (w < 1) throw protocol_error("config", "hello: window must be >= 1");
    cfg.window.size = w;
  }
  if (msg.contains("delimiter")) cfg.segment.delimiter = ju::string(msg, "delimiter", where);
  if (msg.contains("think_end_marker")) {
    cfg.segment.think_end_marker = ju::string(msg, "think_end_marker", where);
  }
  if (msg.contains("actuator")) {
    const auto name = ju::string(msg, "actuator", where);
    try {
      cfg.actuator = surface::parse_actuator(name);
    } catch (const Error& e) {
      throw protocol_error("config", e.what());
    }
  }
  if (msg.contains("width")) cfg.declared_width = ju::index(msg, "width", where);
  const bool client_has_vector =
      msg.contains("vector_hash") &&
      ju::string(msg, "vector_hash", where) == artifacts_->steering_hash;

  auto entry = std::make_shared<Entry>(
      control::Session(std::make_shared<const control::SessionConfig>(std::move(cfg))));
  entry->summary.session = key;
  {
    std::lock_guard lk(mu_);
    if (!sessions_.emplace(key, entry).second) {
      throw protocol_error("duplicate_session", "session " + key + " is already open");
    }
  }

  const auto& sv = *artifacts_->steering;
  Json ready{{"kind", "ready"},
             {"session", id},
             {"layer", sv.layer},
             {"dim", sv.v.size()},
             {"vector_hash", artifacts_->steering_hash}};
  if (!client_has_vector) ready["v"] = sv.v;
  return {ready.dump()};
}

std::vector<std::string> Server::on_token(const Json& msg, const std::string& key,
                                          const Json& id) {
  const std::string where = "token";
  auto entry = find(key);
  if (!entry) throw protocol_error("unknown_session", "no open session " + key);
  ju::only_keys(msg, {"kind", "session", "i", "text", "p_max"}, where);
  trace::TokenEvent ev;
  ev.index = ju::index(msg, "i", where);
  ev.text = ju::string(msg, "text", where);
  ev.p_max = ju::number(msg, "p_max", where);

  std::lock_guard lk(entry->mu);
  auto& s = entry->session;
  std::vector<std::string> out;
  if (s.config().actuator == surface::Actuator::HiddenAdditive) {
    if (auto d = s.feed(ev)) {
      out.push_back(Json{{"kind", "directive"},
                         {"session", id},
                         {"step", d->step},
                         {"alpha", d->alpha},
                         {"lambda", d->lambda},
                         {"delta", d->delta},
                         {"layer", d->layer}}
                        .dump());
    }
  } else if (auto d = s.drive_temperature(ev)) {
    out.push_back(Json{{"kind", "temp"}, {"session", id}, {"value", d->temperature}}.dump());
  }
  entry->summary.tokens = s.tokens_seen();
  entry->summary.steps = s.steps_seen();
  entry->summary.directives += out.size();
  return out;
}

std::vector<std::string> Server::on_end(const std::string& key, const Json& id) {
  auto entry = find(key);
  if (!entry) throw protocol_error("unknown_session", "no open session " + key);
  Json bye;
  {
    std::lock_guard lk(entry->mu);
    bye = Json{{"kind", "bye"},
               {"session", id},
               {"steps", entry->session.steps_seen()},
               {"tokens", entry->session.tokens_seen()}};
  }
  retire(key, true);
  return {bye.dump()};
}

void Server::serve(std::istream& in, std::ostream& out) {
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    for (const auto& reply : handle_line(line)) out << reply << '\n';
    out.flush();
  }
  std::vector<std::string> open;
  {
    std::lock_guard lk(mu_);
    for (const auto& [k, _] : sessions_) open.push_back(k);
  }
  for (const auto& k : open) retire(k, false);
}

std::vector<SessionSummary> Server::summaries() const {
  std::lock_guard lk(mu_);
  std::vector<SessionSummary> out = finished_;
  for (const auto& [_, e] : sessions_) out.push_back(e->summary);
  return out;
}

std::size_t Server::errors() const { return errors_.load(std::memory_order_relaxed); }

std::size_t Server::open_sessions() const {
  std::lock_guard lk(mu_);
  return sessions_.size();
}

// ---------------------------------------------------------------------------

TcpServer::TcpServer(std::shared_ptr<Server> server, std::string host, std::uint16_t port)
    : server_(std::move(server)), host_(std::move(host)), port_(port) {}

TcpServer::~TcpServer() { stop(); }

std::uint16_t TcpServer::start() {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw config_error(std::string("socket: ") + std::strerror(errno));
  int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port_);
  if (::inet_pton(AF_INET, host_.c_str(), &addr.sin_addr) != 1) {
    ::close(listen_fd_);
    listen_fd_ = -1;
    throw config_error("invalid IPv4 host '" + host_ + "'");
  }
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 ||
      ::listen(listen_fd_, 16) < 0) {
    const std::string why = std::strerror(errno);
    ::close(listen_fd_);
    listen_fd_ = -1;
    throw config_error("cannot listen on " + host_ + ":" + std::to_string(port_) + ": " + why);
  }
  socklen_t len = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
  running_ = true;
  acceptor_ = std::thread([this] { accept_loop(); });
  return port_;
}

void TcpServer::accept_loop() {
  while (running_) {
    pollfd p{listen_fd_, POLLIN, 0};
    if (::poll(&p, 1, 100) <= 0) continue;
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) continue;
    std::lock_guard lk(conn_mu_);
    connections_.emplace_back([this, fd] { connection(fd); });
  }
}

namespace {
bool send_all(int fd, const std::string& s) {
  std::size_t off = 0;
  while (off < s.size()) {
    const ssize_t n = ::send(fd, s.data() + off, s.size() - off, MSG_NOSIGNAL);
    if (n <= 0) return false;
    off += static_cast<std::size_t>(n);
  }
  return true;
}
}  // namespace

void TcpServer::connection(int fd) {
  std::string buf;
  char chunk[4096];
  bool ok = true;
  while (ok && running_) {
    pollfd p{fd, POLLIN, 0};
    const int r = ::poll(&p, 1, 100);
    if (r == 0) continue;
    if (r < 0) break;
    const ssize_t n = ::recv(fd, chunk, sizeof chunk, 0);
    if (n <= 0) break;
    buf.append(chunk, static_cast<std::size_t>(n));
    std::size_t start = 0;
    for (std::size_t nl; ok && (nl = buf.find('\n', start)) != std::string::npos; start = nl + 1) {
      std::string_view line(buf.data() + start, nl - start);
      if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
      if (line.empty()) continue;
      std::string reply;
      for (const auto& f : server_->handle_line(line)) reply += f + '\n';
      if (!reply.empty()) ok = send_all(fd, reply);
    }
    buf.erase(0, start);
  }
  ::close(fd);
}

void TcpServer::stop() {
  if (!running_.exchange(false)) return;
  if (acceptor_.joinable()) acceptor_.join();
  std::vector<std::thread> threads;
  {
    std::lock_guard lk(conn_mu_);
    threads.swap(connections_);
  }
  for (auto& t : threads) t.join();
  if (listen_fd_ >= 0) ::close(listen_fd_);
  listen_fd_ = -1;
}

void TcpServer::wait() {
  while (running_) std::this_thread::sleep_for(std::chrono::milliseconds(100));
}

}  // namespace rebalance::protocol
