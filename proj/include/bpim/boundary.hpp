#pragma once

#include <array>
#include <memory>

#include "bpim/nn.hpp"

namespace bpim::boundary {

/// Scan direction of the running max. `right` is the suffix max along a row
/// (seeded at the right border), `left` the prefix max; `top` and `bottom`
/// are the column-wise analogues.
enum class Direction { left, right, top, bottom };

inline constexpr std::array<Direction, 4> kDirections{Direction::left, Direction::right, Direction::top,
                                                      Direction::bottom};

const char* to_string(Direction d);

/// Running max over the trailing [H, W] axes of any tensor with rank >= 2.
Tensor directional_boundary(const Tensor& x, Direction d);

/// Differentiable form; the gradient routes to each output's argmax source.
Var directional_boundary(const Var& x, Direction d);

/// The four directional maps concatenated on channels in the order
/// left, right, top, bottom. x is [N, C, H, W]; the result is [N, 4C, H, W].
Var boundary(const Var& x);

/// BG block: a GSConv of the backbone tap plus its boundary maps, the latter
/// reduced from 4C to the output width by a 1x1 convolution.
class BoundaryGlobal : public nn::Module {
public:
    BoundaryGlobal(Rng& rng, std::int64_t in_channels, std::int64_t out_channels,
                   nn::GSConvKind kind = nn::GSConvKind::gsconv);
    /// Injects the global branch; used to isolate the boundary path.
    BoundaryGlobal(Rng& rng, std::shared_ptr<nn::Unary> global, std::int64_t in_channels, std::int64_t out_channels);

    Var forward(const Var& tap);

    std::shared_ptr<nn::Unary> global;
    std::shared_ptr<nn::Conv2d> reducer;
};

/// BIG block: BG + SiLU(GroupNorm(Conv1x1(Concat(BG, GSConv(N))))).
/// The output has the neck feature's shape.
class BoundaryGuidance : public nn::Module {
public:
    BoundaryGuidance(Rng& rng, std::int64_t tap_channels, std::int64_t neck_channels,
                     nn::GSConvKind kind = nn::GSConvKind::gsconv);

    Var forward(const Var& neck, const Var& tap);

    std::shared_ptr<BoundaryGlobal> bg;
    std::shared_ptr<nn::Unary> neck_proj;
    std::shared_ptr<nn::Conv2d> fuse;
    std::shared_ptr<nn::GroupNorm> norm;
};

}  // namespace bpim::boundary
