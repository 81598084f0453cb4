#pragma once

#include <map>
#include <memory>

#include "bpim/nn.hpp"
#include "bpim/pyramid.hpp"

namespace bpim::cross_scale {

/// Channel-aligns B2..B5 to a common width, resamples them to the level-2
/// size and stacks them on a new scale axis: [N, C, 4, H2, W2].
class ScaleSequence : public nn::Module {
public:
    ScaleSequence(Rng& rng, const std::map<int, std::int64_t>& tap_channels, std::int64_t channels);

    Var build(const Pyramid& taps);

    std::map<int, std::shared_ptr<nn::Conv2d>> align;
    std::int64_t channels;
};

/// CBL over the scale sequence (3x3x3 conv, batch norm, SiLU, max over the
/// scale axis), squeezed to [N, C, H2, W2].
class CrossScaleFusion : public nn::Module {
public:
    CrossScaleFusion(Rng& rng, std::int64_t channels);

    Var forward(const Var& cs);

    Var weight;  // [C, C, 3, 3, 3]
    Var bias;
    std::shared_ptr<nn::BatchNorm> bn;
};

/// The full CSF path into P2: scale sequence, CBL, nearest resize to the
/// consumer and a 1x1 alignment to its width.
class CSFBlock : public nn::Module {
public:
    CSFBlock(Rng& rng, const std::map<int, std::int64_t>& tap_channels, std::int64_t channels,
             std::int64_t out_channels);

    /// Cross-scale feature resized to [h, w] and aligned to out_channels.
    Var forward(const Pyramid& taps, std::int64_t h, std::int64_t w);

    std::shared_ptr<ScaleSequence> sequence;
    std::shared_ptr<CrossScaleFusion> csf;
    std::shared_ptr<nn::Conv2d> out;
};

struct TFFInputs {
    Var n;       // N_i
    Var p_prev;  // P_{i-1}, levels 3..5
    Var pig;     // PIG_i, levels 2..4
};

struct TFFChannels {
    std::int64_t p_prev = 0;  // 0 when the branch is absent
    std::int64_t n = 0;
    std::int64_t pig = 0;
    std::int64_t branch = 0;  // output width of every primed branch
};

/// Level-wise three-branch fusion. P'_{i-1} = Conv1x1(Concat(Max(Conv(P)), Avg(Conv(P))))
/// with 2x2 stride-2 pools, N'_i = Conv(N_i), PIG'_i = Conv(PIG_i); the
/// present branches are concatenated on channels.
class TFF : public nn::Module {
public:
    TFF(Rng& rng, int level, const TFFChannels& ch);

    Var forward(const TFFInputs& in);
    std::int64_t out_channels() const;

    /// Which branches a level carries.
    static bool has_prev(int level) { return level >= 3; }
    static bool has_pig(int level) { return level <= 4; }

    int level;
    std::shared_ptr<nn::ConvBnAct> prev_conv, prev_fuse, n_conv, pig_conv;

private:
    TFFChannels ch_;
};

}  // namespace bpim::cross_scale
