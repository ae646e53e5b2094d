#pragma once

#include <chrono>
#include <filesystem>
#include <memory>

#include "spindle/media.hpp"
#include "spindle/pipeline.hpp"
#include "spindle/timer.hpp"

namespace spindle::stages {

/// Item(std::string path) -> Item(Bytes): reads a file from disk.
StageFn read_file();

/// Item(Bytes PPM) -> Item(media::ImageFrame): decode + area resize, with the
/// codec burn knob.
StageFn decode_resize(std::uint32_t out_w, std::uint32_t out_h, int cpu_burn = 0);

/// Item(ItemList of media::ImageFrame) -> Item(media::BatchBuffer): copy-once
/// batching through the pool.
StageFn make_batch(std::shared_ptr<media::BufferPool> pool);

/// Item(media::BatchBuffer) -> Item(media::DeviceBatch): single-flight
/// transfer; returns the buffer to the pool afterwards.
StageFn transfer(std::shared_ptr<media::DeviceArena> arena,
                 std::shared_ptr<media::BufferPool> pool);

/// Deferred timer sleep; holds no pool worker while waiting. The item passes
/// through unchanged.
StageFn sleep_for(std::shared_ptr<TimerService> timers, std::chrono::microseconds delay);

/// Payload format for the registered "spindle.decode_resize" remote
/// function: [burn:u32][out_w:u32][out_h:u32][ppm bytes]; the result is
/// [w:u32][h:u32][pixels].
Bytes pack_decode_request(int cpu_burn, std::uint32_t out_w, std::uint32_t out_h,
                          const Bytes& ppm);
media::ImageFrame unpack_decoded(const Bytes& payload);

/// Registers the built-in remote functions ("spindle.echo",
/// "spindle.decode_resize") in FunctionRegistry::global(). Call before the
/// worker hook in main() of any binary that uses subprocess stages.
void register_builtin_remote_functions();

}  // namespace spindle::stages
