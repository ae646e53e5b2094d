#pragma once

#include <atomic>
#include <cstdint>
#include <mutex>
#include <vector>

#include "spindle/error.hpp"
#include "spindle/item.hpp"

namespace spindle::media {

class DecodeError : public Error {
  using Error::Error;
};

/// Decoded image: row-major interleaved RGB, 8 bits per sample, no padding.
struct ImageFrame {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<std::uint8_t> pixels;  // size == width * height * 3

  std::size_t byte_size() const { return pixels.size(); }
  bool operator==(const ImageFrame&) const = default;
};

/// Binary PPM: "P6\n<w> <h>\n255\n" followed by raw samples.
Bytes encode_ppm(const ImageFrame& frame);

/// Inverse of encode_ppm. `cpu_burn` adds that many extra passes over the
/// pixel data to emulate heavier codecs in benchmarks; 0 decodes only.
/// Throws DecodeError on bad magic, dimension overflow, or truncation.
ImageFrame decode_ppm(const Bytes& data, int cpu_burn = 0);

/// Box-filter area average with fractional box weights on non-integer
/// ratios; integer downscales are exact means. Rounding is half-up per
/// channel so outputs are bit-reproducible.
ImageFrame resize_area(const ImageFrame& src, std::uint32_t out_w, std::uint32_t out_h);

struct BatchShape {
  std::uint32_t count = 0;
  std::uint32_t height = 0;
  std::uint32_t width = 0;

  std::size_t bytes() const {
    return static_cast<std::size_t>(count) * height * width * 3;
  }
  bool operator==(const BatchShape&) const = default;
};

enum class BufferOrigin { fresh, reused };

/// Contiguous storage for one batch of frames.
struct BatchBuffer {
  std::vector<std::uint8_t> data;  // size == shape.bytes()
  BatchShape shape;
  std::uint32_t filled = 0;
  BufferOrigin origin = BufferOrigin::fresh;
};

/// Free list of fixed-shape batch buffers. A buffer belongs to exactly one
/// owner (pool, producer, or consumer) at a time; created() counts fresh
/// allocations and stays flat once the pipeline reaches steady state.
class BufferPool {
 public:
  explicit BufferPool(BatchShape shape) : shape_(shape) {}

  BatchBuffer acquire();
  void release(BatchBuffer buf);

  const BatchShape& shape() const { return shape_; }
  std::uint64_t created() const;
  std::uint64_t outstanding() const;

 private:
  const BatchShape shape_;
  mutable std::mutex mu_;
  std::vector<std::vector<std::uint8_t>> free_;
  std::uint64_t created_ = 0;
  std::uint64_t outstanding_ = 0;
};

/// Copies each frame's bytes exactly once into a buffer from the pool.
/// Frames must all match the pool shape and fill it exactly; a mismatch
/// names the offending index.
BatchBuffer make_batch(const std::vector<ImageFrame>& frames, BufferPool& pool);

/// Process-wide count of frame-into-batch copies (the copy-once counter).
std::uint64_t frame_copy_count();

struct DeviceBatch {
  std::vector<std::uint8_t> data;
  BatchShape shape;
  std::uint64_t transfer_seq = 0;  // 1-based, strictly increasing per arena
};

/// Host-side stand-in for the device transfer path. Transfers serialize on a
/// single-flight gate; max_in_flight_seen() proves at most one was active.
class DeviceArena {
 public:
  DeviceBatch transfer(const BatchBuffer& batch);

  std::uint64_t transfers() const { return seq_.load(std::memory_order_relaxed); }
  int max_in_flight_seen() const { return max_in_flight_.load(std::memory_order_relaxed); }

 private:
  std::mutex gate_;
  std::atomic<std::uint64_t> seq_{0};
  std::atomic<int> in_flight_{0};
  std::atomic<int> max_in_flight_{0};
};

}  // namespace spindle::media
