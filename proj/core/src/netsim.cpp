#include "spindle/netsim.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

#include "spindle/media.hpp"

namespace spindle::netsim {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

double unit_double(std::uint64_t h) {
  return static_cast<double>(h >> 11) * (1.0 / 9007199254740992.0);  // [0, 1)
}

constexpr std::uint64_t kDelaySalt = 0x64656c6179ull;    // "delay"
constexpr std::uint64_t kFailSalt = 0x6661696cull;       // "fail"

}  // namespace

std::chrono::microseconds planned_delay(const FetchProfile& p, std::uint64_t ordinal) {
  if (p.jitter.count() == 0) return p.base_latency;
  double u = unit_double(splitmix64(p.seed ^ splitmix64(ordinal ^ kDelaySalt)));
  double us = static_cast<double>(p.base_latency.count()) +
              (2.0 * u - 1.0) * static_cast<double>(p.jitter.count());
  return std::chrono::microseconds(static_cast<std::int64_t>(std::max(0.0, us)));
}

bool planned_failure(const FetchProfile& p, std::uint64_t ordinal) {
  if (p.failure_rate <= 0.0) return false;
  if (p.failure_rate >= 1.0) return true;
  double u = unit_double(splitmix64(p.seed ^ splitmix64(ordinal ^ kFailSalt)));
  return u < p.failure_rate;
}

CorpusManifest gen_corpus(std::size_t n, std::uint32_t width, std::uint32_t height,
                          std::uint64_t seed, const std::filesystem::path& root) {
  if (n == 0) throw Error("corpus size must be >= 1");
  std::error_code ec;
  std::filesystem::create_directories(root, ec);
  if (!std::filesystem::is_directory(root)) {
    throw Error("corpus root " + root.string() + " is not a writable directory");
  }

  CorpusManifest m;
  m.root = root;
  m.width = width;
  m.height = height;
  m.seed = seed;

  const std::size_t pixel_bytes = static_cast<std::size_t>(width) * height * 3;
  std::ostringstream manifest_text;
  for (std::size_t i = 0; i < n; ++i) {
    media::ImageFrame f;
    f.width = width;
    f.height = height;
    f.pixels.resize(pixel_bytes);
    std::uint64_t stream = splitmix64(seed ^ splitmix64(i));
    for (std::size_t off = 0; off < pixel_bytes; off += 8) {
      stream = splitmix64(stream);
      for (std::size_t b = 0; b < 8 && off + b < pixel_bytes; ++b) {
        f.pixels[off + b] = static_cast<std::uint8_t>(stream >> (8 * b));
      }
    }
    char name[32];
    std::snprintf(name, sizeof name, "img_%06zu.ppm", i);
    Bytes ppm = media::encode_ppm(f);
    std::ofstream out(root / name, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write corpus file " + (root / name).string());
    out.write(reinterpret_cast<const char*>(ppm.data()), static_cast<std::streamsize>(ppm.size()));
    if (!out) throw Error("short write on corpus file " + (root / name).string());
    m.entries.emplace_back(name);
    manifest_text << name << '\n';
  }

  std::ofstream mf(root / "manifest.txt", std::ios::binary | std::ios::trunc);
  if (!mf) throw Error("cannot write manifest under " + root.string());
  mf << manifest_text.str();
  return m;
}

CorpusManifest load_manifest(const std::filesystem::path& manifest_file) {
  std::ifstream in(manifest_file);
  if (!in) throw Error("cannot read manifest " + manifest_file.string());
  CorpusManifest m;
  m.root = manifest_file.parent_path();
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) m.entries.push_back(line);
  }
  return m;
}

TokenBucket::TokenBucket(double rate_per_sec, double capacity)
    : rate_(rate_per_sec), capacity_(capacity), tokens_(0.0),
      last_(std::chrono::steady_clock::now()) {
  if (rate_per_sec <= 0.0) throw Error("token bucket rate must be positive");
}

std::chrono::microseconds TokenBucket::reserve() {
  std::lock_guard lock(mu_);
  auto now = std::chrono::steady_clock::now();
  std::chrono::duration<double> dt = now - last_;
  last_ = now;
  tokens_ = std::min(capacity_, tokens_ + dt.count() * rate_);
  tokens_ -= 1.0;  // may borrow; the debt is the wait
  if (tokens_ >= 0.0) return std::chrono::microseconds(0);
  double wait_s = -tokens_ / rate_;
  return std::chrono::microseconds(static_cast<std::int64_t>(wait_s * 1e6) + 1);
}

FetchClient::FetchClient(CorpusManifest manifest, FetchProfile profile)
    : manifest_(std::move(manifest)), profile_(profile) {
  if (profile_.failure_rate < 0.0 || profile_.failure_rate > 1.0) {
    throw Error("failure_rate must lie in [0, 1]");
  }
  if (profile_.rate_limit) {
    bucket_ = std::make_unique<TokenBucket>(*profile_.rate_limit, *profile_.rate_limit);
  }
}

FetchClient::Planned FetchClient::plan(std::size_t entry_index) {
  if (entry_index >= manifest_.entries.size()) {
    throw Error("manifest has no entry " + std::to_string(entry_index));
  }
  Planned pl;
  pl.ordinal = ordinal_.fetch_add(1, std::memory_order_relaxed);
  auto admission = bucket_ ? bucket_->reserve() : std::chrono::microseconds(0);
  pl.total_wait = admission + planned_delay(profile_, pl.ordinal);
  pl.fails = planned_failure(profile_, pl.ordinal);
  if (!pl.fails) {
    auto path = manifest_.root / manifest_.entries[entry_index];
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("missing corpus file " + path.string());
    pl.bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  return pl;
}

Bytes FetchClient::fetch_blocking(std::size_t entry_index) {
  Planned pl = plan(entry_index);
  if (pl.total_wait.count() > 0) std::this_thread::sleep_for(pl.total_wait);
  if (pl.fails) throw FetchError(pl.ordinal, "simulated network failure");
  return std::move(pl.bytes);
}

StageFn FetchClient::stage() {
  return [this](Item item) -> StageOutcome {
    auto index = item.take<std::uint64_t>();
    Planned pl = plan(static_cast<std::size_t>(index));
    auto [deferred, completer] = Deferred::make();
    timers_.schedule_after(pl.total_wait, [completer, pl = std::move(pl)]() mutable {
      if (pl.fails) {
        completer.fail("fetch #" + std::to_string(pl.ordinal) + ": simulated network failure");
      } else {
        completer.complete(Item::of(std::move(pl.bytes)));
      }
    });
    return deferred;
  };
}

}  // namespace spindle::netsim
