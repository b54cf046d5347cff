// SPDX-License-Identifier: Apache-2.0

#ifndef ALIGNER_RPC_HPP_
#define ALIGNER_RPC_HPP_

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

namespace aligner::rpc {

struct RpcError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Request kinds understood by the critic-side server.
inline constexpr const char* kKindInferRmCritic = "infer_rm_critic";
inline constexpr const char* kKindTrainCritic = "train_critic";
inline constexpr const char* kKindSaveCritic = "save_critic";
// Reply kinds.
inline constexpr const char* kKindResult = "result";
inline constexpr const char* kKindError = "error";

inline constexpr std::size_t kDefaultMaxFrame = 16 * 1024 * 1024;

// Frames are a 4-byte big-endian length followed by a UTF-8 JSON payload.
std::string encode_frame_header(std::uint32_t payload_len);

// Float arrays cross the wire as base64 little-endian 64-bit floats so the
// round trip is bit-exact while frames stay printable.
std::string encode_floats(std::span<const double> values);
std::vector<double> decode_floats(const std::string& b64);

enum class AwaitStatus { kResult, kError, kTimeout };

struct AwaitOutcome {
  AwaitStatus status = AwaitStatus::kTimeout;
  nlohmann::json body;        // result payload
  std::string error_message;  // set for kError
};

namespace detail {
struct PendingState;
struct ClientState;
}  // namespace detail

/// Completion handle for one in-flight request. Transitions once, from
/// pending to done or failed; stays awaitable after a timeout.
class PendingHandle {
 public:
  PendingHandle() = default;
  std::uint64_t msg_id() const;
  bool completed() const;

 private:
  friend class Client;
  friend AwaitOutcome await(const PendingHandle&, double);
  std::shared_ptr<detail::PendingState> state_;
};

/// Blocks up to timeout_seconds; wait time is charged to the client's
/// critic-wait account.
AwaitOutcome await(const PendingHandle& handle, double timeout_seconds);

/// Thread-safe async request client over one connection.
class Client {
 public:
  Client() = default;
  ~Client();
  Client(Client&&) noexcept;
  Client& operator=(Client&&) noexcept;
  Client(const Client&) = delete;
  Client& operator=(const Client&) = delete;

  static Client connect(const std::string& host, std::uint16_t port,
                        std::size_t max_frame = kDefaultMaxFrame);
  /// Retries the connection until deadline; the server may still be starting.
  static Client connect_with_retry(const std::string& host, std::uint16_t port,
                                   double timeout_seconds,
                                   std::size_t max_frame = kDefaultMaxFrame);

  /// Returns immediately; the reply is matched by msg_id. On a closed
  /// connection the handle comes back already failed.
  PendingHandle send_request(const std::string& kind, nlohmann::json body);

  /// Total time spent blocked in await() on this client's handles.
  double wait_seconds() const;
  bool open() const;
  void close();

 private:
  std::shared_ptr<detail::ClientState> state_;
};

/// Per-kind request handler; throw to produce an error reply.
using Handler = std::function<nlohmann::json(const nlohmann::json& body)>;

/// Accepts concurrent connections, dispatches one handler task per in-flight
/// request. Malformed or oversized frames get an error reply and the
/// connection stays alive.
class Server {
 public:
  Server() = default;
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  void register_handler(const std::string& kind, Handler handler, bool serialized = false);
  /// Binds (port 0 picks a free port) and starts the accept loop.
  void start(const std::string& host = "127.0.0.1", std::uint16_t port = 0,
             std::size_t max_frame = kDefaultMaxFrame);
  std::uint16_t port() const { return port_; }
  void stop();

 private:
  struct Registered {
    Handler fn;
    bool serialized = false;
    std::unique_ptr<std::mutex> gate;
  };
  struct Connection;

  void accept_loop();
  void serve_connection(std::shared_ptr<Connection> conn);

  std::map<std::string, Registered> handlers_;
  std::atomic<int> listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::size_t max_frame_ = kDefaultMaxFrame;
  std::thread accept_thread_;
  std::atomic<bool> running_ = false;
  std::mutex conns_mu_;
  std::vector<std::shared_ptr<Connection>> conns_;
  std::vector<std::thread> conn_threads_;
};

}  // namespace aligner::rpc

#endif  // ALIGNER_RPC_HPP_
