#include "rlcore/distributed.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <bit>
#include <chrono>
#include <cstring>
#include <sstream>
#include <thread>

namespace rlcore {

namespace {

constexpr char kMagic[4] = {'R', 'L', 'D', 'D'};

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

uint32_t get_u32(const uint8_t* p) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
  return v;
}

uint64_t get_u64(const uint8_t* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
  return v;
}

void send_all(int fd, const uint8_t* data, size_t len, const std::string& what) {
  size_t sent = 0;
  while (sent < len) {
    const ssize_t n = ::send(fd, data + sent, len - sent, MSG_NOSIGNAL);
    if (n <= 0) {
      if (n < 0 && errno == EINTR) continue;
      throw ProtocolError("send failed while " + what);
    }
    sent += static_cast<size_t>(n);
  }
}

void recv_all(int fd, uint8_t* data, size_t len, const std::string& what) {
  size_t got = 0;
  while (got < len) {
    const ssize_t n = ::recv(fd, data + got, len - got, 0);
    if (n <= 0) {
      if (n < 0 && errno == EINTR) continue;
      throw ProtocolError("peer closed or recv failed while " + what);
    }
    got += static_cast<size_t>(n);
  }
}

void send_message(int fd, const WireMessage& msg, const std::string& what) {
  auto bytes = encode_message(msg);
  send_all(fd, bytes.data(), bytes.size(), what);
}

WireMessage recv_message(int fd, const std::string& what) {
  uint8_t header[kWireHeaderSize];
  recv_all(fd, header, sizeof(header), what);
  if (std::memcmp(header, kMagic, 4) != 0) throw ProtocolError("bad magic while " + what);
  WireMessage msg;
  msg.version = header[4];
  if (msg.version != 0x01) throw ProtocolError("unsupported protocol version");
  const uint8_t type = header[5];
  if (type > 4) throw ProtocolError("unknown message type while " + what);
  msg.type = static_cast<MsgType>(type);
  msg.rank = get_u32(header + 6);
  const uint64_t payload_len = get_u64(header + 10);
  if (payload_len % 4 != 0) throw ProtocolError("payload length not float-aligned");
  msg.payload.resize(payload_len / 4);
  if (payload_len > 0) {
    std::vector<uint8_t> raw(payload_len);
    recv_all(fd, raw.data(), payload_len, what);
    for (size_t i = 0; i < msg.payload.size(); ++i) {
      msg.payload[i] = std::bit_cast<float>(get_u32(raw.data() + 4 * i));
    }
  }
  return msg;
}

void expect(const WireMessage& msg, MsgType type, int64_t payload_count,
            const std::string& what) {
  if (msg.type != type) throw ProtocolError("unexpected message type while " + what);
  if (payload_count >= 0 && static_cast<int64_t>(msg.payload.size()) != payload_count) {
    throw ProtocolError("payload size mismatch while " + what + ": got " +
                        std::to_string(msg.payload.size()) + " floats, expected " +
                        std::to_string(payload_count));
  }
}

void set_socket_options(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

}  // namespace

std::vector<uint8_t> encode_message(const WireMessage& msg) {
  std::vector<uint8_t> out;
  out.reserve(kWireHeaderSize + msg.payload.size() * 4);
  out.insert(out.end(), kMagic, kMagic + 4);
  out.push_back(msg.version);
  out.push_back(static_cast<uint8_t>(msg.type));
  put_u32(out, msg.rank);
  put_u64(out, static_cast<uint64_t>(msg.payload.size()) * 4);
  for (float f : msg.payload) put_u32(out, std::bit_cast<uint32_t>(f));
  return out;
}

WireMessage decode_message(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < kWireHeaderSize) throw ProtocolError("message shorter than header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw ProtocolError("bad magic");
  WireMessage msg;
  msg.version = bytes[4];
  if (msg.version != 0x01) throw ProtocolError("unsupported protocol version");
  if (bytes[5] > 4) throw ProtocolError("unknown message type");
  msg.type = static_cast<MsgType>(bytes[5]);
  msg.rank = get_u32(bytes.data() + 6);
  const uint64_t payload_len = get_u64(bytes.data() + 10);
  if (payload_len % 4 != 0) throw ProtocolError("payload length not float-aligned");
  if (bytes.size() != kWireHeaderSize + payload_len) {
    throw ProtocolError("message length mismatch");
  }
  msg.payload.resize(payload_len / 4);
  for (size_t i = 0; i < msg.payload.size(); ++i) {
    msg.payload[i] = std::bit_cast<float>(get_u32(bytes.data() + kWireHeaderSize + 4 * i));
  }
  return msg;
}

uint16_t pick_free_port() {
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw ProtocolError("socket() failed");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = 0;
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(fd);
    throw ProtocolError("bind() failed while picking a port");
  }
  socklen_t len = sizeof(addr);
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  const uint16_t port = ntohs(addr.sin_port);
  ::close(fd);
  return port;
}

Collective::Collective(WorkerIdentity id, int64_t param_count)
    : id_(std::move(id)), param_count_(param_count) {}

Collective::~Collective() {
  for (int fd : sockets_) {
    if (fd >= 0) ::close(fd);
  }
  if (listen_fd_ >= 0) ::close(listen_fd_);
}

std::unique_ptr<Collective> Collective::connect(const WorkerIdentity& id, int64_t param_count,
                                                double timeout_s) {
  if (id.world_size < 1) throw ConfigError("world_size must be >= 1");
  if (id.rank < 0 || id.rank >= id.world_size) throw ConfigError("rank out of range");
  auto col = std::unique_ptr<Collective>(new Collective(id, param_count));
  if (id.world_size == 1) return col;

  const auto deadline = std::chrono::steady_clock::now() +
                        std::chrono::milliseconds(static_cast<int64_t>(timeout_s * 1000));

  if (id.rank == 0) {
    col->listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (col->listen_fd_ < 0) throw ProtocolError("socket() failed");
    int one = 1;
    ::setsockopt(col->listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_ANY);
    addr.sin_port = htons(id.coordinator_port);
    if (::bind(col->listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      throw ProtocolError("coordinator could not bind port " +
                          std::to_string(id.coordinator_port));
    }
    if (::listen(col->listen_fd_, id.world_size) != 0) throw ProtocolError("listen() failed");

    col->sockets_.assign(id.world_size, -1);
    int connected = 0;
    while (connected < id.world_size - 1) {
      timeval tv{1, 0};
      ::setsockopt(col->listen_fd_, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
      const int fd = ::accept(col->listen_fd_, nullptr, nullptr);
      if (fd < 0) {
        if (std::chrono::steady_clock::now() > deadline) {
          std::ostringstream os;
          os << "startup timeout; missing ranks:";
          for (int r = 1; r < id.world_size; ++r) {
            if (col->sockets_[r] < 0) os << " " << r;
          }
          throw ProtocolError(os.str());
        }
        continue;
      }
      set_socket_options(fd);
      auto hello = recv_message(fd, "waiting for hello");
      expect(hello, MsgType::kHello, 0, "handshake");
      if (hello.rank == 0 || hello.rank >= static_cast<uint32_t>(id.world_size) ||
          col->sockets_[hello.rank] >= 0) {
        ::close(fd);
        throw ProtocolError("invalid or duplicate hello from rank " + std::to_string(hello.rank));
      }
      col->sockets_[hello.rank] = fd;
      ++connected;
    }
  } else {
    int fd = -1;
    while (true) {
      fd = ::socket(AF_INET, SOCK_STREAM, 0);
      if (fd < 0) throw ProtocolError("socket() failed");
      sockaddr_in addr{};
      addr.sin_family = AF_INET;
      addr.sin_port = htons(id.coordinator_port);
      if (::inet_pton(AF_INET, id.coordinator_host.c_str(), &addr.sin_addr) != 1) {
        addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
      }
      if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0) break;
      ::close(fd);
      if (std::chrono::steady_clock::now() > deadline) {
        throw ProtocolError("rank " + std::to_string(id.rank) +
                            " could not reach the coordinator");
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
    set_socket_options(fd);
    WireMessage hello;
    hello.type = MsgType::kHello;
    hello.rank = static_cast<uint32_t>(id.rank);
    send_message(fd, hello, "handshake");
    col->sockets_.assign(1, fd);
  }
  return col;
}

void Collective::broadcast(std::vector<float>& params) {
  if (id_.world_size == 1) return;
  if (static_cast<int64_t>(params.size()) != param_count_) {
    throw ProtocolError("broadcast size mismatch");
  }
  if (id_.rank == 0) {
    WireMessage msg;
    msg.type = MsgType::kParams;
    msg.rank = 0;
    msg.payload = params;
    for (int r = 1; r < id_.world_size; ++r) send_message(sockets_[r], msg, "broadcast");
  } else {
    auto msg = recv_message(sockets_[0], "broadcast");
    expect(msg, MsgType::kParams, param_count_, "broadcast");
    params = std::move(msg.payload);
  }
}

void Collective::allreduce_mean(std::vector<float>& grads) {
  if (static_cast<int64_t>(grads.size()) != param_count_) {
    throw ProtocolError("allreduce size mismatch");
  }
  if (id_.world_size == 1) return;

  if (id_.rank == 0) {
    // sum in ascending rank order: rank 0 first, then each worker
    std::vector<double> acc(grads.begin(), grads.end());
    for (int r = 1; r < id_.world_size; ++r) {
      auto msg = recv_message(sockets_[r], "reduce from rank " + std::to_string(r));
      expect(msg, MsgType::kGrads, param_count_, "reduce from rank " + std::to_string(r));
      if (msg.rank != static_cast<uint32_t>(r)) {
        throw ProtocolError("rank mismatch during reduce");
      }
      for (size_t i = 0; i < acc.size(); ++i) acc[i] += msg.payload[i];
    }
    for (size_t i = 0; i < grads.size(); ++i) {
      grads[i] = static_cast<float>(acc[i] / static_cast<double>(id_.world_size));
    }
    WireMessage reply;
    reply.type = MsgType::kAvgGrads;
    reply.rank = 0;
    reply.payload = grads;
    for (int r = 1; r < id_.world_size; ++r) send_message(sockets_[r], reply, "reduce reply");
  } else {
    WireMessage msg;
    msg.type = MsgType::kGrads;
    msg.rank = static_cast<uint32_t>(id_.rank);
    msg.payload = grads;
    send_message(sockets_[0], msg, "reduce send");
    auto reply = recv_message(sockets_[0], "reduce reply");
    expect(reply, MsgType::kAvgGrads, param_count_, "reduce reply");
    grads = std::move(reply.payload);
  }
}

void Collective::verify_params(const std::vector<float>& params) {
  if (id_.world_size == 1) return;
  if (id_.rank == 0) {
    WireMessage msg;
    msg.type = MsgType::kParams;
    msg.rank = 0;
    msg.payload = params;
    for (int r = 1; r < id_.world_size; ++r) send_message(sockets_[r], msg, "checksum exchange");
  } else {
    auto msg = recv_message(sockets_[0], "checksum exchange");
    expect(msg, MsgType::kParams, param_count_, "checksum exchange");
    if (std::memcmp(msg.payload.data(), params.data(), params.size() * sizeof(float)) != 0) {
      throw ProtocolError("parameter divergence detected on rank " + std::to_string(id_.rank));
    }
  }
}

void Collective::shutdown() {
  if (id_.world_size == 1) return;
  if (id_.rank == 0) {
    WireMessage msg;
    msg.type = MsgType::kShutdown;
    msg.rank = 0;
    for (int r = 1; r < id_.world_size; ++r) send_message(sockets_[r], msg, "shutdown");
  } else {
    auto msg = recv_message(sockets_[0], "shutdown");
    expect(msg, MsgType::kShutdown, 0, "shutdown");
  }
}

}  // namespace rlcore
