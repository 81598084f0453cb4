#pragma once

#include <array>
#include <map>

#include "bpim/autograd.hpp"

namespace bpim {

/// Scale levels of the detector; level i has stride 2^i.
inline constexpr std::array<int, 4> kLevels{2, 3, 4, 5};

/// Ordered map from scale level to a batched feature map [N, C, H, W].
using Pyramid = std::map<int, Var>;

inline int level_stride(int level) { return 1 << level; }

}  // namespace bpim
