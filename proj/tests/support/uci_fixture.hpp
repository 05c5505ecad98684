#pragma once

#include <cstdint>
#include <utility>
#include <vector>

namespace mstage::testing {

// Reference two-stage confusion counts on one UCI HAR test fold.
// Rows actual, columns predicted: walk, upstairs, downstairs, sit, stand, lay.
inline constexpr std::uint64_t kUciTwoStageCounts[6][6] = {
    {466, 20, 5, 0, 0, 0},  {7, 525, 0, 0, 0, 0},   {0, 0, 537, 0, 0, 0},
    {0, 0, 0, 469, 2, 0},   {0, 0, 0, 6, 414, 0},   {0, 0, 0, 0, 0, 495},
};

/// Prediction and label lists that reproduce the table, pair by pair.
inline std::pair<std::vector<int>, std::vector<int>> uci_two_stage_lists() {
  std::vector<int> pred, label;
  for (int a = 0; a < 6; ++a)
    for (int p = 0; p < 6; ++p)
      for (std::uint64_t i = 0; i < kUciTwoStageCounts[a][p]; ++i) {
        pred.push_back(p);
        label.push_back(a);
      }
  return {pred, label};
}

}  // namespace mstage::testing
