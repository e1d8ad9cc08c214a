#include "phub/transport.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <thread>

#include "phub/error.hpp"

namespace phub {

namespace {

// One direction of an in-process channel.
struct Pipe {
  std::mutex mutex;
  std::condition_variable ready;
  std::deque<Bytes> frames;
  bool closed = false;
};

class ChannelConnection : public Connection {
 public:
  ChannelConnection(std::shared_ptr<Pipe> in, std::shared_ptr<Pipe> out) : in_(std::move(in)), out_(std::move(out)) {}
  ~ChannelConnection() override { close(); }

  void send(Bytes frame) override {
    {
      std::lock_guard lock(out_->mutex);
      if (out_->closed) throw Error(ErrorCode::kTransport, "send on closed channel");
      out_->frames.push_back(std::move(frame));
    }
    out_->ready.notify_one();
  }

  RecvStatus recv_some(Bytes& out, bool blocking) override {
    std::unique_lock lock(in_->mutex);
    if (blocking) in_->ready.wait(lock, [&] { return !in_->frames.empty() || in_->closed; });
    if (in_->frames.empty()) return in_->closed ? RecvStatus::kClosed : RecvStatus::kEmpty;
    auto& f = in_->frames.front();
    if (out.empty()) {
      out.swap(f);
    } else {
      out.insert(out.end(), f.begin(), f.end());
    }
    in_->frames.pop_front();
    return RecvStatus::kData;
  }

  void close() override {
    for (auto* p : {in_.get(), out_.get()}) {
      {
        std::lock_guard lock(p->mutex);
        p->closed = true;
      }
      p->ready.notify_all();
    }
  }

 private:
  std::shared_ptr<Pipe> in_;
  std::shared_ptr<Pipe> out_;
};

}  // namespace

struct InProcessTransport::Backlog {
  std::mutex mutex;
  std::condition_variable ready;
  std::deque<std::unique_ptr<Connection>> pending;
  bool closed = false;
};

namespace {

class InProcessListener : public Listener {
 public:
  InProcessListener(std::string address, std::shared_ptr<InProcessTransport::Backlog> backlog)
      : address_(std::move(address)), backlog_(std::move(backlog)) {}
  ~InProcessListener() override { close(); }

  std::unique_ptr<Connection> accept() override {
    std::unique_lock lock(backlog_->mutex);
    backlog_->ready.wait(lock, [&] { return !backlog_->pending.empty() || backlog_->closed; });
    if (backlog_->pending.empty()) return nullptr;
    auto c = std::move(backlog_->pending.front());
    backlog_->pending.pop_front();
    return c;
  }

  std::string address() const override { return address_; }

  void close() override {
    {
      std::lock_guard lock(backlog_->mutex);
      backlog_->closed = true;
    }
    backlog_->ready.notify_all();
  }

 private:
  std::string address_;
  std::shared_ptr<InProcessTransport::Backlog> backlog_;
};

}  // namespace

std::pair<std::unique_ptr<Connection>, std::unique_ptr<Connection>> make_channel_pair() {
  auto a_to_b = std::make_shared<Pipe>();
  auto b_to_a = std::make_shared<Pipe>();
  return {std::make_unique<ChannelConnection>(b_to_a, a_to_b), std::make_unique<ChannelConnection>(a_to_b, b_to_a)};
}

std::unique_ptr<Listener> InProcessTransport::listen(const std::string& address) {
  std::lock_guard lock(mutex_);
  auto& slot = listeners_[address];
  if (slot && !slot->closed) throw Error(ErrorCode::kTransport, "address in use: " + address);
  slot = std::make_shared<Backlog>();
  return std::make_unique<InProcessListener>(address, slot);
}

std::unique_ptr<Connection> InProcessTransport::connect(const std::string& address) {
  std::shared_ptr<Backlog> backlog;
  {
    std::lock_guard lock(mutex_);
    auto it = listeners_.find(address);
    if (it == listeners_.end()) throw Error(ErrorCode::kTransport, "connection refused: " + address);
    backlog = it->second;
  }
  auto [client, server] = make_channel_pair();
  {
    std::lock_guard lock(backlog->mutex);
    if (backlog->closed) throw Error(ErrorCode::kTransport, "connection refused: " + address);
    backlog->pending.push_back(std::move(server));
  }
  backlog->ready.notify_one();
  return std::move(client);
}

// TCP

namespace {

std::pair<std::string, std::uint16_t> split_host_port(const std::string& address) {
  const auto colon = address.rfind(':');
  if (colon == std::string::npos) throw Error(ErrorCode::kInvalidConfig, "address needs host:port: " + address);
  const std::string host = address.substr(0, colon);
  const int port = std::stoi(address.substr(colon + 1));
  if (port < 0 || port > 65535) throw Error(ErrorCode::kInvalidConfig, "bad port in " + address);
  return {host.empty() ? "0.0.0.0" : host, static_cast<std::uint16_t>(port)};
}

sockaddr_in resolve(const std::string& host, std::uint16_t port) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (inet_pton(AF_INET, host.c_str(), &addr.sin_addr) == 1) return addr;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  addrinfo* res = nullptr;
  if (getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0 || res == nullptr) {
    throw Error(ErrorCode::kTransport, "cannot resolve " + host);
  }
  addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  freeaddrinfo(res);
  return addr;
}

[[noreturn]] void throw_errno(const std::string& what) {
  throw Error(ErrorCode::kTransport, what + ": " + std::strerror(errno));
}

class TcpConnection : public Connection {
 public:
  explicit TcpConnection(int fd) : fd_(fd) {
    int one = 1;
    setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }
  ~TcpConnection() override {
    close();
    ::close(fd_);
  }

  void send(Bytes frame) override {
    std::lock_guard lock(send_mutex_);
    std::size_t sent = 0;
    while (sent < frame.size()) {
      const ssize_t n = ::send(fd_, frame.data() + sent, frame.size() - sent, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw_errno("send");
      }
      sent += static_cast<std::size_t>(n);
    }
  }

  RecvStatus recv_some(Bytes& out, bool blocking) override {
    if (!blocking) {
      pollfd p{fd_, POLLIN, 0};
      if (::poll(&p, 1, 0) == 0) return RecvStatus::kEmpty;
    }
    std::uint8_t buf[1 << 16];
    for (;;) {
      const ssize_t n = ::recv(fd_, buf, sizeof(buf), 0);
      if (n > 0) {
        out.insert(out.end(), buf, buf + n);
        return RecvStatus::kData;
      }
      if (n == 0) return RecvStatus::kClosed;
      if (errno == EINTR) continue;
      if (errno == ECONNRESET || errno == EBADF || errno == ENOTCONN) return RecvStatus::kClosed;
      throw_errno("recv");
    }
  }

  void close() override { ::shutdown(fd_, SHUT_RDWR); }

 private:
  int fd_;
  std::mutex send_mutex_;
};

class TcpListener : public Listener {
 public:
  explicit TcpListener(const std::string& address) {
    auto [host, port] = split_host_port(address);
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw_errno("socket");
    int one = 1;
    setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr = resolve(host, port);
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0) {
      ::close(fd_);
      throw_errno("bind " + address);
    }
    if (::listen(fd_, 128) < 0) {
      ::close(fd_);
      throw_errno("listen " + address);
    }
    socklen_t len = sizeof(addr);
    getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    char text[INET_ADDRSTRLEN] = {};
    inet_ntop(AF_INET, &addr.sin_addr, text, sizeof(text));
    address_ = std::string(text) + ":" + std::to_string(ntohs(addr.sin_port));
  }
  ~TcpListener() override {
    close();
    ::close(fd_);
  }

  std::unique_ptr<Connection> accept() override {
    for (;;) {
      const int c = ::accept(fd_, nullptr, nullptr);
      if (c >= 0) return std::make_unique<TcpConnection>(c);
      if (errno == EINTR) continue;
      return nullptr;
    }
  }

  std::string address() const override { return address_; }
  void close() override { ::shutdown(fd_, SHUT_RDWR); }

 private:
  int fd_ = -1;
  std::string address_;
};

}  // namespace

std::unique_ptr<Listener> TcpTransport::listen(const std::string& address) {
  return std::make_unique<TcpListener>(address);
}

std::unique_ptr<Connection> TcpTransport::connect(const std::string& address) {
  auto [host, port] = split_host_port(address);
  sockaddr_in addr = resolve(host == "0.0.0.0" ? "127.0.0.1" : host, port);
  // Peers started concurrently may not be listening yet.
  for (int attempt = 0;; ++attempt) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw_errno("socket");
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0) {
      return std::make_unique<TcpConnection>(fd);
    }
    const int err = errno;
    ::close(fd);
    if (err != ECONNREFUSED || attempt >= 100) {
      errno = err;
      throw_errno("connect " + address);
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
}

}  // namespace phub
