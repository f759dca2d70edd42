#pragma once

#include <chrono>
#include <functional>
#include <thread>

#include "rpcool/cluster.hpp"

namespace rpcool::testing {

using rpcool::Child;
using rpcool::LocalCluster;

/// Polls `pred` until true or timeout.
inline bool eventually(const std::function<bool()>& pred, std::chrono::milliseconds timeout = std::chrono::seconds(10)) {
  auto deadline = std::chrono::steady_clock::now() + timeout;
  while (std::chrono::steady_clock::now() < deadline) {
    if (pred()) return true;
    std::this_thread::sleep_for(std::chrono::milliseconds(1));
  }
  return pred();
}

}  // namespace rpcool::testing
