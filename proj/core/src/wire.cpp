#include "spindle/wire.hpp"

#include <unistd.h>

#include <cerrno>
#include <cstring>

namespace spindle::wire {

void put_u32(Bytes& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 24));
}

void put_u64(Bytes& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> b) {
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

std::uint64_t get_u64(std::span<const std::uint8_t> b) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = v << 8 | b[static_cast<std::size_t>(i)];
  return v;
}

Bytes encode(const Frame& f) {
  if (f.payload.size() > kMaxFrameBytes - kFrameHeaderBytes) {
    throw ProtocolError("frame payload exceeds " + std::to_string(kMaxFrameBytes) + " bytes");
  }
  Bytes out;
  out.reserve(4 + kFrameHeaderBytes + f.payload.size());
  put_u32(out, static_cast<std::uint32_t>(kFrameHeaderBytes + f.payload.size()));
  out.push_back(static_cast<std::uint8_t>(f.opcode));
  put_u64(out, f.task_id);
  out.insert(out.end(), f.payload.begin(), f.payload.end());
  return out;
}

std::optional<Frame> decode(std::span<const std::uint8_t> buf, std::size_t* consumed) {
  if (buf.size() < 4) return std::nullopt;
  std::uint32_t len = get_u32(buf);
  if (len < kFrameHeaderBytes || len > kMaxFrameBytes) {
    throw ProtocolError("bad frame length " + std::to_string(len));
  }
  if (buf.size() < 4u + len) return std::nullopt;
  Frame f;
  std::uint8_t op = buf[4];
  if (op > static_cast<std::uint8_t>(Opcode::shutdown)) {
    throw ProtocolError("unknown opcode " + std::to_string(op));
  }
  f.opcode = static_cast<Opcode>(op);
  f.task_id = get_u64(buf.subspan(5, 8));
  f.payload.assign(buf.begin() + 4 + kFrameHeaderBytes, buf.begin() + 4 + len);
  *consumed = 4u + len;
  return f;
}

bool read_exact(int fd, void* dst, std::size_t n) {
  auto* p = static_cast<std::uint8_t*>(dst);
  std::size_t got = 0;
  while (got < n) {
    ssize_t r = ::read(fd, p + got, n - got);
    if (r == 0) {
      if (got == 0) return false;
      throw ProtocolError("unexpected EOF mid-frame");
    }
    if (r < 0) {
      if (errno == EINTR) continue;
      throw ProtocolError(std::string("read failed: ") + std::strerror(errno));
    }
    got += static_cast<std::size_t>(r);
  }
  return true;
}

void write_all(int fd, const void* src, std::size_t n) {
  const auto* p = static_cast<const std::uint8_t*>(src);
  std::size_t sent = 0;
  while (sent < n) {
    ssize_t w = ::write(fd, p + sent, n - sent);
    if (w < 0) {
      if (errno == EINTR) continue;
      throw ProtocolError(std::string("write failed: ") + std::strerror(errno));
    }
    sent += static_cast<std::size_t>(w);
  }
}

std::optional<Frame> read_frame(int fd) {
  std::uint8_t head[4];
  if (!read_exact(fd, head, 4)) return std::nullopt;
  std::uint32_t len = get_u32(head);
  if (len < kFrameHeaderBytes || len > kMaxFrameBytes) {
    throw ProtocolError("bad frame length " + std::to_string(len));
  }
  Bytes body(len);
  if (!read_exact(fd, body.data(), len)) throw ProtocolError("unexpected EOF mid-frame");
  Frame f;
  if (body[0] > static_cast<std::uint8_t>(Opcode::shutdown)) {
    throw ProtocolError("unknown opcode " + std::to_string(body[0]));
  }
  f.opcode = static_cast<Opcode>(body[0]);
  f.task_id = get_u64(std::span<const std::uint8_t>(body).subspan(1, 8));
  f.payload.assign(body.begin() + kFrameHeaderBytes, body.end());
  return f;
}

void write_frame(int fd, const Frame& f) {
  Bytes encoded = encode(f);
  write_all(fd, encoded.data(), encoded.size());
}

Bytes encode_call_payload(std::string_view func, std::span<const std::uint8_t> args) {
  Bytes out;
  out.reserve(4 + func.size() + args.size());
  put_u32(out, static_cast<std::uint32_t>(func.size()));
  out.insert(out.end(), func.begin(), func.end());
  out.insert(out.end(), args.begin(), args.end());
  return out;
}

std::pair<std::string, Bytes> decode_call_payload(std::span<const std::uint8_t> payload) {
  if (payload.size() < 4) throw ProtocolError("call payload too short");
  std::uint32_t name_len = get_u32(payload);
  if (payload.size() < 4u + name_len) throw ProtocolError("call payload truncated name");
  std::string name(payload.begin() + 4, payload.begin() + 4 + name_len);
  Bytes args(payload.begin() + 4 + name_len, payload.end());
  return {std::move(name), std::move(args)};
}

}  // namespace spindle::wire
