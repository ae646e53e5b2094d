#pragma once

#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <utility>

#include "spindle/item.hpp"

namespace spindle {

namespace detail {

struct DeferredState {
  std::mutex mu;
  bool settled = false;
  bool abandoned = false;
  bool ok = false;
  bool delivered = false;
  Item value;
  std::string error;
  std::function<void(bool ok, Item&& value, const std::string& error)> callback;
};

}  // namespace detail

class Completer;

/// Placeholder returned by a stage function when the result will arrive
/// later (timer expiry, remote worker, ...). The producing side settles it
/// through the paired Completer; settlement is single-shot and thread-safe.
/// A completion that lands after the pipeline abandoned the task is dropped.
class Deferred {
 public:
  /// Creates a linked pair. The stage function returns the Deferred and
  /// hands the Completer to whatever finishes the work.
  static std::pair<Deferred, Completer> make();

  /// Engine side: registers the settlement callback. Invoked exactly once,
  /// immediately if the deferred already settled.
  void on_settle(std::function<void(bool ok, Item&& value, const std::string& error)> cb);

  /// Engine side: drop any future completion silently.
  void abandon();

  bool valid() const { return st_ != nullptr; }

 private:
  friend class Completer;
  std::shared_ptr<detail::DeferredState> st_;
};

/// Producer half of a Deferred. Copyable so it can be captured by
/// std::function; the first complete()/fail() wins, later calls are no-ops.
class Completer {
 public:
  void complete(Item result);
  void fail(std::string error);

 private:
  friend class Deferred;
  std::shared_ptr<detail::DeferredState> st_;
};

}  // namespace spindle
