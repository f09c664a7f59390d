// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace picr {

/// Multiply-accumulate tally recorded by the compute kernels as they run.
///
/// Install a `MacRecorder` on the current thread to observe the kernels
/// executed by a forward pass. Keys are layer kinds ("conv", "conv_transpose",
/// "linear", "attention").
struct MacTally {
  std::map<std::string, std::uint64_t> by_kind;

  std::uint64_t total() const;
};

class MacRecorder {
 public:
  explicit MacRecorder(MacTally& sink);
  ~MacRecorder();
  MacRecorder(const MacRecorder&) = delete;
  MacRecorder& operator=(const MacRecorder&) = delete;

 private:
  MacTally* previous_;
};

void record_macs(const char* kind, std::uint64_t macs);

}  // namespace picr
