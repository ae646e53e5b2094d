#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>

#include "spindle/error.hpp"
#include "spindle/item.hpp"

namespace spindle::wire {

/// Framed message exchanged with subprocess workers over stdin/stdout.
///
/// On the wire, little-endian:
///   [length:u32][opcode:u8][task_id:u64][payload bytes...]
/// where length = 1 + 8 + payload size. Frames are self-delimiting; an
/// unknown opcode or an oversized length is a protocol error.
enum class Opcode : std::uint8_t {
  call = 0,
  result = 1,
  error = 2,
  shutdown = 3,
};

struct Frame {
  Opcode opcode = Opcode::call;
  std::uint64_t task_id = 0;
  Bytes payload;

  bool operator==(const Frame&) const = default;
};

inline constexpr std::uint32_t kFrameHeaderBytes = 1 + 8;  // opcode + task_id
inline constexpr std::uint32_t kMaxFrameBytes = 64u << 20;
inline constexpr std::uint32_t kProtocolVersion = 1;

Bytes encode(const Frame& f);

/// Decodes one frame from the front of `buf`. Returns nullopt when more
/// bytes are needed; on success sets `*consumed`. Throws ProtocolError on a
/// bad opcode or a length outside [header, kMaxFrameBytes].
std::optional<Frame> decode(std::span<const std::uint8_t> buf, std::size_t* consumed);

/// Blocking fd helpers used by the pool and worker loops.
/// read_exact returns false on clean EOF before the first byte; EOF mid-read
/// throws ProtocolError.
bool read_exact(int fd, void* dst, std::size_t n);
void write_all(int fd, const void* src, std::size_t n);
std::optional<Frame> read_frame(int fd);  // nullopt on clean EOF
void write_frame(int fd, const Frame& f);

/// Call payloads carry the target function name ahead of the user bytes:
///   [name_len:u32][name][args...]
Bytes encode_call_payload(std::string_view func, std::span<const std::uint8_t> args);
std::pair<std::string, Bytes> decode_call_payload(std::span<const std::uint8_t> payload);

/// Little-endian scalar packing, shared by payload formats.
void put_u32(Bytes& out, std::uint32_t v);
void put_u64(Bytes& out, std::uint64_t v);
std::uint32_t get_u32(std::span<const std::uint8_t> b);  // b.size() >= 4
std::uint64_t get_u64(std::span<const std::uint8_t> b);  // b.size() >= 8

}  // namespace spindle::wire
