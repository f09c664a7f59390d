// SPDX-License-Identifier: Apache-2.0
#include "picr/mac_counter.hpp"

namespace picr {

namespace {
thread_local MacTally* g_sink = nullptr;
}

std::uint64_t MacTally::total() const {
  std::uint64_t t = 0;
  for (const auto& [kind, n] : by_kind) t += n;
  return t;
}

MacRecorder::MacRecorder(MacTally& sink) : previous_(g_sink) { g_sink = &sink; }
MacRecorder::~MacRecorder() { g_sink = previous_; }

void record_macs(const char* kind, std::uint64_t macs) {
  if (g_sink) g_sink->by_kind[kind] += macs;
}

}  // namespace picr
