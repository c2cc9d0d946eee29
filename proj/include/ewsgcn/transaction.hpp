#pragma once

#include <cstdint>
#include <optional>
#include <vector>

namespace ewsgcn {

/// One card operation. Purchases carry an MCC group; transfers between
/// clients do not.
struct Transaction {
  double amount = 0.0;
  std::int32_t currency = 0;
  std::optional<std::int32_t> mcc;
  std::int64_t timestamp = 0;  // seconds since epoch

  bool is_transfer() const noexcept { return !mcc.has_value(); }
  friend bool operator==(const Transaction&, const Transaction&) = default;
};

/// Time-ordered list of operations.
using EventSequence = std::vector<Transaction>;

inline bool is_time_ordered(const EventSequence& seq) {
  for (std::size_t i = 1; i < seq.size(); ++i) {
    if (seq[i].timestamp < seq[i - 1].timestamp) return false;
  }
  return true;
}

}  // namespace ewsgcn
