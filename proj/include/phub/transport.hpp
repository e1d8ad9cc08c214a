#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>

#include "phub/wire.hpp"

namespace phub {

enum class RecvStatus { kData, kEmpty, kClosed };

/// A reliable, ordered byte stream. send() may be called from several
/// threads; receiving is owned by a single reader.
class Connection {
 public:
  virtual ~Connection() = default;

  virtual void send(Bytes frame) = 0;
  /// Appends available bytes to `out`. Blocks for data when `blocking`.
  virtual RecvStatus recv_some(Bytes& out, bool blocking) = 0;
  virtual void close() = 0;

  void send_message(const Message& m) { send(encode_message(m)); }
};

class Listener {
 public:
  virtual ~Listener() = default;
  /// Blocks until a peer connects; returns nullptr once the listener closes.
  virtual std::unique_ptr<Connection> accept() = 0;
  virtual std::string address() const = 0;
  virtual void close() = 0;
};

class Transport {
 public:
  virtual ~Transport() = default;
  virtual std::unique_ptr<Listener> listen(const std::string& address) = 0;
  virtual std::unique_ptr<Connection> connect(const std::string& address) = 0;
};

/// Process-local transport: addresses are arbitrary names, connections are
/// pairs of in-memory frame queues.
class InProcessTransport : public Transport {
 public:
  std::unique_ptr<Listener> listen(const std::string& address) override;
  std::unique_ptr<Connection> connect(const std::string& address) override;

  struct Backlog;

 private:
  std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Backlog>> listeners_;
};

/// Creates a connected in-process pair without a listener.
std::pair<std::unique_ptr<Connection>, std::unique_ptr<Connection>> make_channel_pair();

/// TCP over IPv4; addresses are "host:port". Port 0 binds an ephemeral port,
/// reported by Listener::address().
class TcpTransport : public Transport {
 public:
  std::unique_ptr<Listener> listen(const std::string& address) override;
  std::unique_ptr<Connection> connect(const std::string& address) override;
};

}  // namespace phub
