#pragma once

#include <cstdint>

namespace dicache {

// Block-evaluation accounting. The output head is charged as part of the
// last block.
struct CostMeter {
  std::uint64_t block_evals = 0;
  std::uint64_t recompute_steps = 0;
  std::uint64_t reuse_steps = 0;

  void charge_blocks(std::uint64_t n) noexcept { block_evals += n; }
};

}  // namespace dicache
