#include "bpim/assign.hpp"

#include <algorithm>
#include <cmath>

namespace bpim::train {

Assignment assign_targets(const std::vector<Target>& targets, const std::map<int, model::AnchorSet>& anchors,
                          int input_size, const AssignOptions& opt) {
    Assignment out;
    std::vector<bool> hit(targets.size(), false);
    for (const auto& [level, set] : anchors) {
        const int grid = static_cast<int>(input_size / level_stride(level));
        for (std::size_t t = 0; t < targets.size(); ++t) {
            const auto& tg = targets[t];
            const double gx = tg.box.cx * grid, gy = tg.box.cy * grid;
            const double gw = tg.box.w * input_size, gh = tg.box.h * input_size;
            const int ci = std::clamp(static_cast<int>(std::floor(gx)), 0, grid - 1);
            const int cj = std::clamp(static_cast<int>(std::floor(gy)), 0, grid - 1);
            const double fx = gx - std::floor(gx), fy = gy - std::floor(gy);
            std::vector<std::pair<int, int>> cells{{ci, cj}};
            if (fx < 0.5 && ci - 1 >= 0) cells.emplace_back(ci - 1, cj);
            if (fx > 0.5 && ci + 1 < grid) cells.emplace_back(ci + 1, cj);
            if (fy < 0.5 && cj - 1 >= 0) cells.emplace_back(ci, cj - 1);
            if (fy > 0.5 && cj + 1 < grid) cells.emplace_back(ci, cj + 1);
            for (int a = 0; a < static_cast<int>(set.size()); ++a) {
                const auto [aw, ah] = set[static_cast<std::size_t>(a)];
                const double rw = gw / aw, rh = gh / ah;
                if (std::max({rw, 1.0 / rw, rh, 1.0 / rh}) >= opt.anchor_ratio) continue;
                hit[t] = true;
                for (const auto& [x, y] : cells) out.matches.push_back({static_cast<int>(t), level, tg.image, a, x, y});
            }
        }
    }
    for (std::size_t t = 0; t < targets.size(); ++t)
        if (!hit[t]) out.unmatched.push_back(static_cast<int>(t));
    return out;
}

}  // namespace bpim::train
