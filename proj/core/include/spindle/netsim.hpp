#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "spindle/error.hpp"
#include "spindle/item.hpp"
#include "spindle/pipeline.hpp"
#include "spindle/timer.hpp"

namespace spindle::netsim {

class FetchError : public Error {
 public:
  FetchError(std::uint64_t ordinal, const std::string& what)
      : Error("fetch #" + std::to_string(ordinal) + " failed: " + what), ordinal_(ordinal) {}

  std::uint64_t ordinal() const { return ordinal_; }

 private:
  std::uint64_t ordinal_;
};

/// Simulated remote-storage behavior. Delay and failure outcome are pure
/// functions of (seed, request ordinal), so runs are reproducible no matter
/// how requests interleave.
struct FetchProfile {
  std::chrono::microseconds base_latency{50000};
  std::chrono::microseconds jitter{0};  // uniform half-range around base
  double failure_rate = 0.0;            // in [0, 1]
  std::optional<double> rate_limit;     // max requests per second
  std::uint64_t seed = 0;
};

std::chrono::microseconds planned_delay(const FetchProfile& p, std::uint64_t ordinal);
bool planned_failure(const FetchProfile& p, std::uint64_t ordinal);

struct CorpusManifest {
  std::filesystem::path root;
  std::vector<std::string> entries;  // relative paths
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::uint64_t seed = 0;
};

/// Writes n deterministic pseudo-random PPM files plus root/manifest.txt
/// (newline-separated relative paths). The same seed reproduces the corpus
/// byte for byte.
CorpusManifest gen_corpus(std::size_t n, std::uint32_t width, std::uint32_t height,
                          std::uint64_t seed, const std::filesystem::path& root);

/// Reads a manifest file; entries resolve relative to its directory.
CorpusManifest load_manifest(const std::filesystem::path& manifest_file);

/// Token bucket with continuous refill. The bucket starts empty, so a
/// saturated caller is paced from the first request and no sliding second
/// ever admits more than the rate; bursts only follow idle periods.
class TokenBucket {
 public:
  TokenBucket(double rate_per_sec, double capacity);

  /// Duration the caller must wait before its admission takes effect.
  /// Thread-safe; admissions are sequenced in call order.
  std::chrono::microseconds reserve();

 private:
  const double rate_;
  const double capacity_;
  std::mutex mu_;
  double tokens_;
  std::chrono::steady_clock::time_point last_;
};

/// Client for fetching corpus entries under a FetchProfile. fetch_blocking
/// sleeps through the simulated delay; stage() yields a pipeline stage whose
/// waits are timer-driven, so a pending fetch holds no pool worker.
class FetchClient {
 public:
  FetchClient(CorpusManifest manifest, FetchProfile profile);

  /// Throws FetchError on a simulated failure, Error on a missing entry.
  Bytes fetch_blocking(std::size_t entry_index);

  /// Stage: Item(std::uint64_t entry index) -> Item(Bytes).
  StageFn stage();

  std::uint64_t requests() const { return ordinal_.load(std::memory_order_relaxed); }
  const CorpusManifest& manifest() const { return manifest_; }

 private:
  struct Planned {
    std::uint64_t ordinal = 0;
    std::chrono::microseconds total_wait{0};
    bool fails = false;
    Bytes bytes;
  };
  Planned plan(std::size_t entry_index);

  CorpusManifest manifest_;
  FetchProfile profile_;
  std::unique_ptr<TokenBucket> bucket_;
  TimerService timers_;
  std::atomic<std::uint64_t> ordinal_{0};
};

}  // namespace spindle::netsim
