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

#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <mutex>
#include <ostream>
#include <string>
#include <utility>

#include "stip/wire.hpp"

namespace stip {

/// Raised by receive() once the peer has closed and nothing is queued.
class ChannelClosed : public Error {
 public:
  explicit ChannelClosed(const std::string& what) : Error(ErrorCode::kProtocol, what) {}
};

struct TrafficStats {
  std::uint64_t messages_sent = 0;
  std::uint64_t bytes_sent = 0;
  std::uint64_t messages_received = 0;
  std::uint64_t bytes_received = 0;
};

// One endpoint of a bidirectional, message-oriented link. Endpoints are not
// shared between threads.
class Channel {
 public:
  virtual ~Channel() = default;
  virtual void send(const WireMessage& msg) = 0;
  virtual WireMessage receive() = 0;
  virtual void close() = 0;
  virtual TrafficStats traffic() const = 0;
};

using ChannelPtr = std::unique_ptr<Channel>;
using ChannelPair = std::pair<ChannelPtr, ChannelPtr>;

/// Two connected endpoints backed by in-memory queues. Frames are still
/// encoded and decoded at the boundary.
ChannelPair make_inproc_pair();

class TcpListener {
 public:
  /// Port 0 picks an ephemeral port.
  explicit TcpListener(const std::string& host = "127.0.0.1", std::uint16_t port = 0);
  ~TcpListener();
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  std::uint16_t port() const noexcept { return port_; }
  ChannelPtr accept();

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

ChannelPtr tcp_connect(const std::string& host, std::uint16_t port);

/// Loopback socket pair; the first element is the accepting side.
ChannelPair make_socket_pair(const std::string& host = "127.0.0.1", std::uint16_t port = 0);

/// Sleeps for a fixed delay before every send.
class DelayedChannel : public Channel {
 public:
  DelayedChannel(ChannelPtr inner, std::chrono::microseconds delay)
      : inner_(std::move(inner)), delay_(delay) {}
  void send(const WireMessage& msg) override;
  WireMessage receive() override { return inner_->receive(); }
  void close() override { inner_->close(); }
  TrafficStats traffic() const override { return inner_->traffic(); }

 private:
  ChannelPtr inner_;
  std::chrono::microseconds delay_;
};

// JSON-lines audit log: one record per message sent, with timestamp,
// direction, msg_type, epoch and payload dims.
class TranscriptLog {
 public:
  explicit TranscriptLog(std::ostream* out = nullptr) : out_(out) {}
  void record(std::string_view direction, const WireMessage& msg);
  std::size_t lines() const;

 private:
  mutable std::mutex mu_;
  std::ostream* out_;
  std::size_t lines_ = 0;
};

/// Records every sent message under a fixed direction label such as "P3->P2".
class TranscriptChannel : public Channel {
 public:
  TranscriptChannel(ChannelPtr inner, TranscriptLog& log, std::string direction)
      : inner_(std::move(inner)), log_(log), direction_(std::move(direction)) {}
  void send(const WireMessage& msg) override {
    log_.record(direction_, msg);
    inner_->send(msg);
  }
  WireMessage receive() override { return inner_->receive(); }
  void close() override { inner_->close(); }
  TrafficStats traffic() const override { return inner_->traffic(); }

 private:
  ChannelPtr inner_;
  TranscriptLog& log_;
  std::string direction_;
};

}  // namespace stip
