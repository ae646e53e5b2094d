#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <typeinfo>
#include <utility>
#include <vector>

#include "spindle/error.hpp"

namespace spindle {

using Bytes = std::vector<std::uint8_t>;

/// Move-only type-erased value passed between pipeline stages.
///
/// Stage functions receive their input by value and must not keep references
/// to it after returning; the move-only box makes that the path of least
/// resistance.
class Item {
 public:
  Item() = default;
  Item(Item&&) noexcept = default;
  Item& operator=(Item&&) noexcept = default;
  Item(const Item&) = delete;
  Item& operator=(const Item&) = delete;

  template <class T>
  static Item of(T value) {
    Item it;
    it.ptr_ = std::make_unique<Typed<T>>(std::move(value));
    return it;
  }

  bool empty() const { return ptr_ == nullptr; }

  const std::type_info& type() const { return ptr_ ? ptr_->type() : typeid(void); }

  template <class T>
  bool holds() const {
    return ptr_ && ptr_->type() == typeid(T);
  }

  template <class T>
  T& as() {
    check<T>();
    return static_cast<Typed<T>*>(ptr_.get())->value;
  }

  template <class T>
  const T& as() const {
    check<T>();
    return static_cast<const Typed<T>*>(ptr_.get())->value;
  }

  /// Moves the value out, leaving the item empty.
  template <class T>
  T take() {
    check<T>();
    T out = std::move(static_cast<Typed<T>*>(ptr_.get())->value);
    ptr_.reset();
    return out;
  }

 private:
  struct Holder {
    virtual ~Holder() = default;
    virtual const std::type_info& type() const = 0;
  };

  template <class T>
  struct Typed final : Holder {
    explicit Typed(T v) : value(std::move(v)) {}
    const std::type_info& type() const override { return typeid(T); }
    T value;
  };

  template <class T>
  void check() const {
    if (!holds<T>()) {
      throw Error(std::string("item holds '") + type().name() + "', requested '" +
                  typeid(T).name() + "'");
    }
  }

  std::unique_ptr<Holder> ptr_;
};

/// Payload emitted by aggregate stages.
using ItemList = std::vector<Item>;

}  // namespace spindle
