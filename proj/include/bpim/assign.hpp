#pragma once

#include <map>
#include <vector>

#include "bpim/geometry.hpp"
#include "bpim/model.hpp"

namespace bpim::train {

/// One ground-truth box of a batch; `box` is normalised to the network input.
struct Target {
    int image = 0;
    int cls = 0;
    geometry::Box box;
};

/// A (target, level, anchor, cell) pairing that trains one prediction.
struct Match {
    int target = 0;  // index into the target list
    int level = 0;
    int image = 0;
    int anchor = 0;
    int gx = 0, gy = 0;  // cell column and row
    bool operator==(const Match&) const = default;
    auto operator<=>(const Match&) const = default;
};

struct Assignment {
    std::vector<Match> matches;
    std::vector<int> unmatched;  // targets that matched no anchor at any level
};

struct AssignOptions {
    double anchor_ratio = 4.0;  // a match needs max(r, 1/r) < anchor_ratio on both sides
};

/// Anchor-ratio assignment on every level. A target trains the anchors whose
/// width and height ratios are within the bound, at its centre cell and at the
/// horizontal and vertical neighbours nearest its centre (never diagonals).
Assignment assign_targets(const std::vector<Target>& targets, const std::map<int, model::AnchorSet>& anchors,
                          int input_size, const AssignOptions& opt = {});

}  // namespace bpim::train
