#include "spindle/deferred.hpp"

namespace spindle {

std::pair<Deferred, Completer> Deferred::make() {
  auto st = std::make_shared<detail::DeferredState>();
  Deferred d;
  d.st_ = st;
  Completer c;
  c.st_ = std::move(st);
  return {std::move(d), std::move(c)};
}

void Deferred::on_settle(std::function<void(bool, Item&&, const std::string&)> cb) {
  std::function<void(bool, Item&&, const std::string&)> fire;
  bool ok = false;
  Item value;
  std::string error;
  {
    std::lock_guard lock(st_->mu);
    if (st_->abandoned) return;
    if (st_->settled && !st_->delivered) {
      st_->delivered = true;
      fire = std::move(cb);
      ok = st_->ok;
      value = std::move(st_->value);
      error = std::move(st_->error);
    } else if (!st_->settled) {
      st_->callback = std::move(cb);
    }
  }
  if (fire) fire(ok, std::move(value), error);
}

void Deferred::abandon() {
  std::lock_guard lock(st_->mu);
  st_->abandoned = true;
  st_->callback = nullptr;
  st_->value = Item();
}

static void settle(const std::shared_ptr<detail::DeferredState>& st, bool ok, Item&& value,
                   std::string error) {
  std::function<void(bool, Item&&, const std::string&)> fire;
  {
    std::lock_guard lock(st->mu);
    if (st->settled || st->abandoned) return;
    st->settled = true;
    st->ok = ok;
    if (st->callback) {
      st->delivered = true;
      fire = std::move(st->callback);
      st->callback = nullptr;
    } else {
      st->value = std::move(value);
      st->error = std::move(error);
      return;
    }
  }
  fire(ok, std::move(value), error);
}

void Completer::complete(Item result) { settle(st_, true, std::move(result), {}); }

void Completer::fail(std::string error) { settle(st_, false, Item(), std::move(error)); }

}  // namespace spindle
