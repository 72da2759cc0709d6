#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "rlcore/ppo.hpp"

namespace rlcore {

struct WorkerIdentity {
  int rank = 0;
  int world_size = 1;
  std::string coordinator_host = "127.0.0.1";
  uint16_t coordinator_port = 0;
};

enum class MsgType : uint8_t {
  kHello = 0,
  kParams = 1,
  kGrads = 2,
  kAvgGrads = 3,
  kShutdown = 4,
};

// Framing: "RLDD" | version 0x01 | msg_type u8 | rank u32 LE | payload_len
// u64 LE | payload (float32 LE, canonical parameter order). payload_len is
// 4 * total parameter count for types 1-3 and 0 otherwise.
struct WireMessage {
  uint8_t version = 0x01;
  MsgType type = MsgType::kHello;
  uint32_t rank = 0;
  std::vector<float> payload;
};

inline constexpr size_t kWireHeaderSize = 18;

std::vector<uint8_t> encode_message(const WireMessage& msg);
WireMessage decode_message(const std::vector<uint8_t>& bytes);

// Synchronous hub-and-spoke collective. Rank 0 listens, accepts world_size-1
// workers, and reduces gradients by summing in ascending rank order (fixed
// order, deterministic float sum) before dividing by world_size. world_size 1
// degenerates to in-process no-ops.
class Collective : public GradientReducer {
 public:
  // Blocks until the full world is connected (default timeout 30 s) and
  // raises ProtocolError naming the missing ranks otherwise. param_count is
  // the canonical total parameter count used to validate payloads.
  static std::unique_ptr<Collective> connect(const WorkerIdentity& id, int64_t param_count,
                                             double timeout_s = 30.0);
  ~Collective() override;

  int rank() const { return id_.rank; }
  int world_size() const { return id_.world_size; }

  // Rank 0 sends its parameters; workers overwrite theirs.
  void broadcast(std::vector<float>& params);
  // Every rank contributes once; all ranks receive the identical average.
  void allreduce_mean(std::vector<float>& grads) override;
  // Rank 0 re-sends its parameters; workers compare bitwise and abort on any
  // divergence.
  void verify_params(const std::vector<float>& params);
  // Rank 0 tells everyone to exit; workers block until told.
  void shutdown();

 private:
  Collective(WorkerIdentity id, int64_t param_count);

  WorkerIdentity id_;
  int64_t param_count_;
  std::vector<int> sockets_;  // rank -> fd (coordinator); [0] on workers
  int listen_fd_ = -1;
};

// Binds an ephemeral port and returns it (test/launcher convenience).
uint16_t pick_free_port();

}  // namespace rlcore
