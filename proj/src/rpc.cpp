// SPDX-License-Identifier: Apache-2.0

#include "aligner/rpc.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <condition_variable>
#include <cstring>

#include "aligner/timing.hpp"

namespace aligner::rpc {

namespace {

constexpr char kB64Table[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int b64_value(char c) {
  if (c >= 'A' && c <= 'Z') return c - 'A';
  if (c >= 'a' && c <= 'z') return c - 'a' + 26;
  if (c >= '0' && c <= '9') return c - '0' + 52;
  if (c == '+') return 62;
  if (c == '/') return 63;
  return -1;
}

std::string b64_encode(const unsigned char* data, std::size_t len) {
  std::string out;
  out.reserve((len + 2) / 3 * 4);
  for (std::size_t i = 0; i < len; i += 3) {
    const unsigned b0 = data[i];
    const unsigned b1 = i + 1 < len ? data[i + 1] : 0;
    const unsigned b2 = i + 2 < len ? data[i + 2] : 0;
    out.push_back(kB64Table[b0 >> 2]);
    out.push_back(kB64Table[((b0 & 0x3) << 4) | (b1 >> 4)]);
    out.push_back(i + 1 < len ? kB64Table[((b1 & 0xf) << 2) | (b2 >> 6)] : '=');
    out.push_back(i + 2 < len ? kB64Table[b2 & 0x3f] : '=');
  }
  return out;
}

std::vector<unsigned char> b64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw RpcError("base64: length not a multiple of 4");
  std::vector<unsigned char> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int vals[4] = {0, 0, 0, 0};
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = text[i + k];
      if (c == '=') {
        ++pad;
        vals[k] = 0;
      } else {
        vals[k] = b64_value(c);
        if (vals[k] < 0) throw RpcError("base64: invalid character");
        if (pad > 0) throw RpcError("base64: data after padding");
      }
    }
    out.push_back(static_cast<unsigned char>((vals[0] << 2) | (vals[1] >> 4)));
    if (pad < 2) out.push_back(static_cast<unsigned char>(((vals[1] & 0xf) << 4) | (vals[2] >> 2)));
    if (pad < 1) out.push_back(static_cast<unsigned char>(((vals[2] & 0x3) << 6) | vals[3]));
  }
  return out;
}

bool write_all(int fd, const char* data, std::size_t len) {
  std::size_t sent = 0;
  while (sent < len) {
    const ssize_t n = ::send(fd, data + sent, len - sent, MSG_NOSIGNAL);
    if (n <= 0) return false;
    sent += static_cast<std::size_t>(n);
  }
  return true;
}

bool read_all(int fd, char* data, std::size_t len) {
  std::size_t got = 0;
  while (got < len) {
    const ssize_t n = ::recv(fd, data + got, len - got, 0);
    if (n <= 0) return false;
    got += static_cast<std::size_t>(n);
  }
  return true;
}

bool discard_bytes(int fd, std::size_t len) {
  char buf[4096];
  while (len > 0) {
    const std::size_t chunk = std::min(len, sizeof(buf));
    if (!read_all(fd, buf, chunk)) return false;
    len -= chunk;
  }
  return true;
}

// length-prefixed frame write; a single locked send keeps frames atomic.
bool write_frame(int fd, std::mutex& mu, const std::string& payload) {
  std::string buf = encode_frame_header(static_cast<std::uint32_t>(payload.size()));
  buf += payload;
  std::lock_guard lock(mu);
  return write_all(fd, buf.data(), buf.size());
}

// Reads one frame; returns false on EOF/socket error. Oversized frames are
// drained and flagged instead of killing the connection.
enum class FrameRead { kOk, kClosed, kOversized };

FrameRead read_frame(int fd, std::size_t max_frame, std::string& payload, std::size_t& dropped) {
  unsigned char hdr[4];
  if (!read_all(fd, reinterpret_cast<char*>(hdr), 4)) return FrameRead::kClosed;
  const std::uint32_t len = (static_cast<std::uint32_t>(hdr[0]) << 24) |
                            (static_cast<std::uint32_t>(hdr[1]) << 16) |
                            (static_cast<std::uint32_t>(hdr[2]) << 8) |
                            static_cast<std::uint32_t>(hdr[3]);
  if (len > max_frame) {
    dropped = len;
    if (!discard_bytes(fd, len)) return FrameRead::kClosed;
    return FrameRead::kOversized;
  }
  payload.resize(len);
  if (len > 0 && !read_all(fd, payload.data(), len)) return FrameRead::kClosed;
  return FrameRead::kOk;
}

int tcp_connect(const std::string& host, std::uint16_t port) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw RpcError("connect: cannot create socket");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    ::close(fd);
    throw RpcError("connect: bad address " + host);
  }
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(fd);
    throw RpcError("connect: cannot reach " + host + ":" + std::to_string(port));
  }
  const int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  return fd;
}

}  // namespace

std::string encode_frame_header(std::uint32_t payload_len) {
  std::string out(4, '\0');
  out[0] = static_cast<char>((payload_len >> 24) & 0xff);
  out[1] = static_cast<char>((payload_len >> 16) & 0xff);
  out[2] = static_cast<char>((payload_len >> 8) & 0xff);
  out[3] = static_cast<char>(payload_len & 0xff);
  return out;
}

std::string encode_floats(std::span<const double> values) {
  std::vector<unsigned char> bytes(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, &values[i], 8);
    for (int k = 0; k < 8; ++k) {
      bytes[i * 8 + static_cast<std::size_t>(k)] =
          static_cast<unsigned char>((bits >> (8 * k)) & 0xff);
    }
  }
  return b64_encode(bytes.data(), bytes.size());
}

std::vector<double> decode_floats(const std::string& b64) {
  const auto bytes = b64_decode(b64);
  if (bytes.size() % 8 != 0) throw RpcError("decode_floats: byte count not a multiple of 8");
  std::vector<double> out(bytes.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t bits = 0;
    for (int k = 0; k < 8; ++k) {
      bits |= static_cast<std::uint64_t>(bytes[i * 8 + static_cast<std::size_t>(k)]) << (8 * k);
    }
    std::memcpy(&out[i], &bits, 8);
  }
  return out;
}

namespace detail {

struct PendingState {
  std::uint64_t msg_id = 0;
  std::mutex mu;
  std::condition_variable cv;
  bool done = false;
  bool failed = false;
  nlohmann::json body;
  std::string error_message;
  std::shared_ptr<std::atomic<double>> wait_book;

  void complete(bool ok, nlohmann::json b, std::string err) {
    std::lock_guard lock(mu);
    if (done) return;  // exactly-once
    done = true;
    failed = !ok;
    body = std::move(b);
    error_message = std::move(err);
    cv.notify_all();
  }
};

struct ClientState {
  int fd = -1;
  std::size_t max_frame = kDefaultMaxFrame;
  std::atomic<std::uint64_t> next_id = 1;
  std::mutex write_mu;
  std::mutex pending_mu;
  std::map<std::uint64_t, std::shared_ptr<PendingState>> pending;
  std::atomic<bool> closed = false;
  std::thread reader;
  std::shared_ptr<std::atomic<double>> wait_book = std::make_shared<std::atomic<double>>(0.0);

  void fail_all(const std::string& why) {
    std::map<std::uint64_t, std::shared_ptr<PendingState>> taken;
    {
      std::lock_guard lock(pending_mu);
      taken.swap(pending);
    }
    for (auto& [id, st] : taken) st->complete(false, {}, why);
  }

  void reader_loop() {
    std::string payload;
    std::size_t dropped = 0;
    while (!closed.load()) {
      const auto status = read_frame(fd, max_frame, payload, dropped);
      if (status == FrameRead::kClosed) break;
      if (status == FrameRead::kOversized) continue;  // nothing to match it to
      nlohmann::json msg = nlohmann::json::parse(payload, nullptr, false);
      if (msg.is_discarded() || !msg.contains("msg_id") || !msg.contains("kind")) continue;
      const auto id = msg["msg_id"].get<std::uint64_t>();
      std::shared_ptr<PendingState> st;
      {
        std::lock_guard lock(pending_mu);
        auto it = pending.find(id);
        if (it == pending.end()) continue;
        st = it->second;
        pending.erase(it);
      }
      const std::string kind = msg["kind"].get<std::string>();
      if (kind == kKindResult) {
        st->complete(true, msg.value("body", nlohmann::json::object()), {});
      } else {
        std::string why = "server error";
        if (msg.contains("body") && msg["body"].contains("message")) {
          why = msg["body"]["message"].get<std::string>();
        }
        st->complete(false, {}, why);
      }
    }
    closed.store(true);
    fail_all("connection closed");
  }
};

}  // namespace detail

std::uint64_t PendingHandle::msg_id() const { return state_ ? state_->msg_id : 0; }

bool PendingHandle::completed() const {
  if (!state_) return false;
  std::lock_guard lock(state_->mu);
  return state_->done;
}

AwaitOutcome await(const PendingHandle& handle, double timeout_seconds) {
  if (!handle.state_) throw RpcError("await: empty handle");
  auto& st = *handle.state_;
  Stopwatch sw;
  AwaitOutcome out;
  {
    std::unique_lock lock(st.mu);
    // system_clock deadline: the clockwait path is invisible to older
    // sanitizer runtimes.
    const auto deadline = std::chrono::system_clock::now() +
                          std::chrono::duration_cast<std::chrono::system_clock::duration>(
                              std::chrono::duration<double>(timeout_seconds));
    const bool ready = st.cv.wait_until(lock, deadline, [&] { return st.done; });
    if (!ready) {
      out.status = AwaitStatus::kTimeout;
      out.error_message = "timeout after " + std::to_string(timeout_seconds) + "s";
    } else if (st.failed) {
      out.status = AwaitStatus::kError;
      out.error_message = st.error_message;
    } else {
      out.status = AwaitStatus::kResult;
      out.body = st.body;
    }
  }
  if (st.wait_book) {
    const double waited = sw.seconds();
    double cur = st.wait_book->load();
    while (!st.wait_book->compare_exchange_weak(cur, cur + waited)) {
    }
  }
  return out;
}

Client::~Client() { close(); }

Client::Client(Client&& other) noexcept : state_(std::move(other.state_)) {}

Client& Client::operator=(Client&& other) noexcept {
  if (this != &other) {
    close();
    state_ = std::move(other.state_);
  }
  return *this;
}

Client Client::connect(const std::string& host, std::uint16_t port, std::size_t max_frame) {
  Client c;
  c.state_ = std::make_shared<detail::ClientState>();
  c.state_->fd = tcp_connect(host, port);
  c.state_->max_frame = max_frame;
  auto st = c.state_;
  c.state_->reader = std::thread([st] { st->reader_loop(); });
  return c;
}

Client Client::connect_with_retry(const std::string& host, std::uint16_t port,
                                  double timeout_seconds, std::size_t max_frame) {
  Stopwatch sw;
  while (true) {
    try {
      return connect(host, port, max_frame);
    } catch (const RpcError&) {
      if (sw.seconds() >= timeout_seconds) throw;
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
  }
}

PendingHandle Client::send_request(const std::string& kind, nlohmann::json body) {
  if (!state_) throw RpcError("send_request: client not connected");
  auto st = std::make_shared<detail::PendingState>();
  st->msg_id = state_->next_id.fetch_add(1);
  st->wait_book = state_->wait_book;
  PendingHandle handle;
  handle.state_ = st;

  if (state_->closed.load()) {
    st->complete(false, {}, "connection closed");
    return handle;
  }
  nlohmann::json msg;
  msg["msg_id"] = st->msg_id;
  msg["kind"] = kind;
  msg["body"] = std::move(body);
  const std::string payload = msg.dump();
  if (payload.size() > state_->max_frame) {
    st->complete(false, {}, "request exceeds max frame size " + std::to_string(state_->max_frame));
    return handle;
  }
  {
    std::lock_guard lock(state_->pending_mu);
    state_->pending.emplace(st->msg_id, st);
  }
  if (!write_frame(state_->fd, state_->write_mu, payload)) {
    state_->closed.store(true);
    state_->fail_all("connection closed");
  }
  return handle;
}

double Client::wait_seconds() const { return state_ ? state_->wait_book->load() : 0.0; }

bool Client::open() const { return state_ && !state_->closed.load(); }

void Client::close() {
  if (!state_) return;
  if (!state_->closed.exchange(true)) {
    ::shutdown(state_->fd, SHUT_RDWR);
  }
  if (state_->reader.joinable()) state_->reader.join();
  if (state_->fd >= 0) {
    ::close(state_->fd);
    state_->fd = -1;
  }
  state_->fail_all("connection closed");
}

struct Server::Connection {
  std::mutex fd_mu;
  int fd = -1;  // guarded by fd_mu after handoff to the connection thread
  std::mutex write_mu;
  std::vector<std::thread> handler_threads;
  std::mutex handlers_mu;

  void shutdown_fd() {
    std::lock_guard lock(fd_mu);
    if (fd >= 0) ::shutdown(fd, SHUT_RDWR);
  }
  void close_fd() {
    std::lock_guard lock(fd_mu);
    if (fd >= 0) {
      ::close(fd);
      fd = -1;
    }
  }
};

void Server::register_handler(const std::string& kind, Handler handler, bool serialized) {
  if (running_.load()) throw RpcError("register_handler: server already running");
  if (handlers_.count(kind)) throw RpcError("register_handler: duplicate kind " + kind);
  Registered reg;
  reg.fn = std::move(handler);
  reg.serialized = serialized;
  reg.gate = std::make_unique<std::mutex>();
  handlers_.emplace(kind, std::move(reg));
}

void Server::start(const std::string& host, std::uint16_t port, std::size_t max_frame) {
  max_frame_ = max_frame;
  const int lfd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (lfd < 0) throw RpcError("server: cannot create socket");
  const int one = 1;
  ::setsockopt(lfd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    ::close(lfd);
    throw RpcError("server: bad address " + host);
  }
  if (::bind(lfd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(lfd);
    throw RpcError("server: cannot bind " + host + ":" + std::to_string(port));
  }
  if (::listen(lfd, 16) != 0) {
    ::close(lfd);
    throw RpcError("server: listen failed");
  }
  sockaddr_in bound{};
  socklen_t len = sizeof(bound);
  ::getsockname(lfd, reinterpret_cast<sockaddr*>(&bound), &len);
  port_ = ntohs(bound.sin_port);
  listen_fd_.store(lfd);
  running_.store(true);
  accept_thread_ = std::thread([this] { accept_loop(); });
}

void Server::accept_loop() {
  while (running_.load()) {
    const int lfd = listen_fd_.load();
    if (lfd < 0) break;
    const int fd = ::accept(lfd, nullptr, nullptr);
    if (fd < 0) break;
    const int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    auto conn = std::make_shared<Connection>();
    conn->fd = fd;
    std::lock_guard lock(conns_mu_);
    conns_.push_back(conn);
    conn_threads_.emplace_back([this, conn] { serve_connection(conn); });
  }
}

void Server::serve_connection(std::shared_ptr<Connection> conn) {
  const int fd = conn->fd;  // stays valid until close_fd below
  std::string payload;
  std::size_t dropped = 0;
  while (running_.load()) {
    const auto status = read_frame(fd, max_frame_, payload, dropped);
    if (status == FrameRead::kClosed) break;
    if (status == FrameRead::kOversized) {
      nlohmann::json err;
      err["msg_id"] = 0;
      err["kind"] = kKindError;
      err["body"] = {{"message", "frame of " + std::to_string(dropped) +
                                     " bytes exceeds max frame size " +
                                     std::to_string(max_frame_)}};
      write_frame(fd, conn->write_mu, err.dump());
      continue;
    }
    nlohmann::json msg = nlohmann::json::parse(payload, nullptr, false);
    std::uint64_t msg_id = 0;
    std::string kind;
    if (!msg.is_discarded() && msg.contains("msg_id") && msg["msg_id"].is_number_unsigned()) {
      msg_id = msg["msg_id"].get<std::uint64_t>();
    }
    if (!msg.is_discarded() && msg.contains("kind") && msg["kind"].is_string()) {
      kind = msg["kind"].get<std::string>();
    }
    if (msg.is_discarded() || kind.empty()) {
      nlohmann::json err;
      err["msg_id"] = msg_id;
      err["kind"] = kKindError;
      err["body"] = {{"message", "malformed frame"}};
      write_frame(fd, conn->write_mu, err.dump());
      continue;
    }
    const auto it = handlers_.find(kind);
    if (it == handlers_.end()) {
      nlohmann::json err;
      err["msg_id"] = msg_id;
      err["kind"] = kKindError;
      err["body"] = {{"message", "unknown request kind: " + kind}};
      write_frame(fd, conn->write_mu, err.dump());
      continue;
    }
    // One handler task per in-flight request keeps slow handlers from
    // blocking the read loop (that is the whole point of async requests).
    Registered& reg = it->second;
    nlohmann::json body = msg.value("body", nlohmann::json::object());
    auto task = std::thread([conn, fd, &reg, msg_id, body = std::move(body)] {
      nlohmann::json reply;
      reply["msg_id"] = msg_id;
      try {
        nlohmann::json result;
        if (reg.serialized) {
          std::lock_guard gate(*reg.gate);
          result = reg.fn(body);
        } else {
          result = reg.fn(body);
        }
        reply["kind"] = kKindResult;
        reply["body"] = std::move(result);
      } catch (const std::exception& e) {
        reply["kind"] = kKindError;
        reply["body"] = {{"message", e.what()}};
      }
      write_frame(fd, conn->write_mu, reply.dump());
    });
    {
      std::lock_guard lock(conn->handlers_mu);
      conn->handler_threads.push_back(std::move(task));
    }
  }
  {
    std::lock_guard lock(conn->handlers_mu);
    for (auto& t : conn->handler_threads) {
      if (t.joinable()) t.join();
    }
    conn->handler_threads.clear();
  }
  conn->close_fd();
}

void Server::stop() {
  if (!running_.exchange(false)) return;
  // Unblock the accept loop, join it, and only then close the socket so the
  // descriptor number cannot be recycled under a live accept call.
  const int lfd = listen_fd_.exchange(-1);
  if (lfd >= 0) ::shutdown(lfd, SHUT_RDWR);
  if (accept_thread_.joinable()) accept_thread_.join();
  if (lfd >= 0) ::close(lfd);
  std::vector<std::shared_ptr<Connection>> conns;
  std::vector<std::thread> threads;
  {
    std::lock_guard lock(conns_mu_);
    conns.swap(conns_);
    threads.swap(conn_threads_);
  }
  for (auto& conn : conns) conn->shutdown_fd();
  for (auto& t : threads) {
    if (t.joinable()) t.join();
  }
}

Server::~Server() { stop(); }

}  // namespace aligner::rpc
