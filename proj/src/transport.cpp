// Copyright 2026 The STIP Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "stip/transport.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <future>
#include <thread>

#include "json.hpp"

namespace stip {

namespace {

struct FrameQueue {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<Bytes> frames;
  bool closed = false;
};

class InProcChannel : public Channel {
 public:
  InProcChannel(std::shared_ptr<FrameQueue> out, std::shared_ptr<FrameQueue> in)
      : out_(std::move(out)), in_(std::move(in)) {}
  ~InProcChannel() override { close(); }

  void send(const WireMessage& msg) override {
    Bytes frame = encode_frame(msg);
    const std::size_t n = frame.size();
    {
      std::lock_guard lock(out_->mu);
      if (out_->closed) throw ChannelClosed("in-process channel closed");
      out_->frames.push_back(std::move(frame));
    }
    out_->cv.notify_one();
    ++stats_.messages_sent;
    stats_.bytes_sent += n;
  }

  WireMessage receive() override {
    Bytes frame;
    {
      std::unique_lock lock(in_->mu);
      in_->cv.wait(lock, [&] { return !in_->frames.empty() || in_->closed; });
      if (in_->frames.empty()) throw ChannelClosed("in-process channel closed by peer");
      frame = std::move(in_->frames.front());
      in_->frames.pop_front();
    }
    ++stats_.messages_received;
    stats_.bytes_received += frame.size();
    return decode_frame(frame);
  }

  void close() override {
    for (auto* q : {out_.get(), in_.get()}) {
      {
        std::lock_guard lock(q->mu);
        q->closed = true;
      }
      q->cv.notify_all();
    }
  }

  TrafficStats traffic() const override { return stats_; }

 private:
  std::shared_ptr<FrameQueue> out_;
  std::shared_ptr<FrameQueue> in_;
  TrafficStats stats_;
};

[[noreturn]] void io_error(const std::string& what) {
  throw Error(ErrorCode::kIo, what + ": " + std::strerror(errno));
}

sockaddr_in make_addr(const std::string& host, std::uint16_t port) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  const std::string h = host == "localhost" ? "127.0.0.1" : host;
  if (inet_pton(AF_INET, h.c_str(), &addr.sin_addr) != 1) {
    throw Error(ErrorCode::kInvalidConfig, "not an IPv4 address: " + host);
  }
  return addr;
}

class SocketChannel : public Channel {
 public:
  explicit SocketChannel(int fd) : fd_(fd) {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }
  ~SocketChannel() override { close(); }

  void send(const WireMessage& msg) override {
    const Bytes frame = encode_frame(msg);
    std::size_t off = 0;
    while (off < frame.size()) {
      const ssize_t n = ::send(fd_, frame.data() + off, frame.size() - off, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        if (errno == EPIPE || errno == ECONNRESET) throw ChannelClosed("socket closed by peer");
        io_error("socket send");
      }
      off += static_cast<std::size_t>(n);
    }
    ++stats_.messages_sent;
    stats_.bytes_sent += frame.size();
  }

  WireMessage receive() override {
    Bytes frame(kFrameHeaderSize);
    read_exact(frame.data(), kFrameHeaderSize, true);
    const FrameHeader h = decode_frame_header(frame);
    frame.resize(kFrameHeaderSize + h.payload_len);
    read_exact(frame.data() + kFrameHeaderSize, h.payload_len, false);
    ++stats_.messages_received;
    stats_.bytes_received += frame.size();
    return decode_frame(frame);
  }

  void close() override {
    if (fd_ >= 0) {
      ::shutdown(fd_, SHUT_RDWR);
      ::close(fd_);
      fd_ = -1;
    }
  }

  TrafficStats traffic() const override { return stats_; }

 private:
  void read_exact(std::uint8_t* dst, std::size_t len, bool at_frame_start) {
    std::size_t off = 0;
    while (off < len) {
      if (fd_ < 0) throw ChannelClosed("socket closed");
      const ssize_t n = ::recv(fd_, dst + off, len - off, 0);
      if (n == 0) {
        if (at_frame_start && off == 0) throw ChannelClosed("socket closed by peer");
        throw Error(ErrorCode::kProtocol, "connection closed mid-frame");
      }
      if (n < 0) {
        if (errno == EINTR) continue;
        if (errno == ECONNRESET) throw ChannelClosed("socket reset by peer");
        io_error("socket recv");
      }
      off += static_cast<std::size_t>(n);
    }
  }

  int fd_;
  TrafficStats stats_;
};

}  // namespace

ChannelPair make_inproc_pair() {
  auto a = std::make_shared<FrameQueue>();
  auto b = std::make_shared<FrameQueue>();
  return {std::make_unique<InProcChannel>(a, b), std::make_unique<InProcChannel>(b, a)};
}

TcpListener::TcpListener(const std::string& host, std::uint16_t port) {
  sockaddr_in addr = make_addr(host, port);
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd_ < 0) io_error("socket");
  int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(fd_);
    io_error("bind " + host + ":" + std::to_string(port));
  }
  if (::listen(fd_, 8) != 0) {
    ::close(fd_);
    io_error("listen");
  }
  socklen_t len = sizeof(addr);
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

TcpListener::~TcpListener() {
  if (fd_ >= 0) ::close(fd_);
}

ChannelPtr TcpListener::accept() {
  for (;;) {
    const int fd = ::accept(fd_, nullptr, nullptr);
    if (fd >= 0) return std::make_unique<SocketChannel>(fd);
    if (errno != EINTR) io_error("accept");
  }
}

ChannelPtr tcp_connect(const std::string& host, std::uint16_t port) {
  sockaddr_in addr = make_addr(host, port);
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) io_error("socket");
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(fd);
    io_error("connect " + host + ":" + std::to_string(port));
  }
  return std::make_unique<SocketChannel>(fd);
}

ChannelPair make_socket_pair(const std::string& host, std::uint16_t port) {
  TcpListener listener(host, port);
  auto accepted = std::async(std::launch::async, [&] { return listener.accept(); });
  ChannelPtr client = tcp_connect(host, listener.port());
  return {accepted.get(), std::move(client)};
}

void DelayedChannel::send(const WireMessage& msg) {
  if (delay_.count() > 0) std::this_thread::sleep_for(delay_);
  inner_->send(msg);
}

void TranscriptLog::record(std::string_view direction, const WireMessage& msg) {
  nlohmann::json rec;
  const auto now = std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch());
  rec["timestamp"] = now.count();
  rec["direction"] = direction;
  rec["msg_type"] = to_string(msg.type);
  rec["epoch"] = msg.epoch;
  if ((msg.type == MsgType::kInferRequest || msg.type == MsgType::kInferResponse) && msg.payload.size() >= 8) {
    ByteReader r(msg.payload);
    const std::uint32_t rows = r.u32();
    rec["dims"] = {rows, r.u32()};
  } else {
    rec["dims"] = nlohmann::json::array();
  }
  rec["payload_bytes"] = msg.payload.size();
  std::lock_guard lock(mu_);
  if (out_ != nullptr) *out_ << rec.dump() << '\n';
  ++lines_;
}

std::size_t TranscriptLog::lines() const {
  std::lock_guard lock(mu_);
  return lines_;
}

}  // namespace stip
