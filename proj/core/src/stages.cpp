#include "spindle/stages.hpp"

#include <fstream>

#include "spindle/subprocess.hpp"
#include "spindle/wire.hpp"

namespace spindle::stages {

StageFn read_file() {
  return [](Item item) -> StageOutcome {
    auto path = item.take<std::string>();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path);
    Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return Item::of(std::move(data));
  };
}

StageFn decode_resize(std::uint32_t out_w, std::uint32_t out_h, int cpu_burn) {
  return [=](Item item) -> StageOutcome {
    auto data = item.take<Bytes>();
    media::ImageFrame frame = media::decode_ppm(data, cpu_burn);
    return Item::of(media::resize_area(frame, out_w, out_h));
  };
}

StageFn make_batch(std::shared_ptr<media::BufferPool> pool) {
  return [pool](Item item) -> StageOutcome {
    auto items = item.take<ItemList>();
    std::vector<media::ImageFrame> frames;
    frames.reserve(items.size());
    for (auto& it : items) frames.push_back(it.take<media::ImageFrame>());
    return Item::of(media::make_batch(frames, *pool));
  };
}

StageFn transfer(std::shared_ptr<media::DeviceArena> arena,
                 std::shared_ptr<media::BufferPool> pool) {
  return [arena, pool](Item item) -> StageOutcome {
    auto batch = item.take<media::BatchBuffer>();
    media::DeviceBatch out = arena->transfer(batch);
    pool->release(std::move(batch));
    return Item::of(std::move(out));
  };
}

StageFn sleep_for(std::shared_ptr<TimerService> timers, std::chrono::microseconds delay) {
  return [timers, delay](Item item) -> StageOutcome {
    auto [deferred, completer] = Deferred::make();
    auto boxed = std::make_shared<Item>(std::move(item));
    timers->schedule_after(delay,
                           [completer, boxed]() mutable { completer.complete(std::move(*boxed)); });
    return deferred;
  };
}

Bytes pack_decode_request(int cpu_burn, std::uint32_t out_w, std::uint32_t out_h,
                          const Bytes& ppm) {
  Bytes out;
  out.reserve(12 + ppm.size());
  wire::put_u32(out, static_cast<std::uint32_t>(cpu_burn));
  wire::put_u32(out, out_w);
  wire::put_u32(out, out_h);
  out.insert(out.end(), ppm.begin(), ppm.end());
  return out;
}

media::ImageFrame unpack_decoded(const Bytes& payload) {
  if (payload.size() < 8) throw Error("decoded frame payload too short");
  media::ImageFrame f;
  f.width = wire::get_u32(std::span<const std::uint8_t>(payload).subspan(0, 4));
  f.height = wire::get_u32(std::span<const std::uint8_t>(payload).subspan(4, 4));
  std::size_t need = static_cast<std::size_t>(f.width) * f.height * 3;
  if (payload.size() != 8 + need) throw Error("decoded frame payload size mismatch");
  f.pixels.assign(payload.begin() + 8, payload.end());
  return f;
}

void register_builtin_remote_functions() {
  auto& reg = FunctionRegistry::global();
  reg.register_fn("spindle.echo", [](const Bytes& in) { return in; });
  reg.register_fn("spindle.decode_resize", [](const Bytes& in) -> Bytes {
    if (in.size() < 12) throw Error("decode_resize payload too short");
    auto span = std::span<const std::uint8_t>(in);
    int burn = static_cast<int>(wire::get_u32(span.subspan(0, 4)));
    std::uint32_t out_w = wire::get_u32(span.subspan(4, 4));
    std::uint32_t out_h = wire::get_u32(span.subspan(8, 4));
    Bytes ppm(in.begin() + 12, in.end());
    media::ImageFrame frame = media::resize_area(media::decode_ppm(ppm, burn), out_w, out_h);
    Bytes out;
    out.reserve(8 + frame.pixels.size());
    wire::put_u32(out, frame.width);
    wire::put_u32(out, frame.height);
    out.insert(out.end(), frame.pixels.begin(), frame.pixels.end());
    return out;
  });
}

}  // namespace spindle::stages
