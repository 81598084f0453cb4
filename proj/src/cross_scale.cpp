#include "bpim/cross_scale.hpp"

#include <cmath>

namespace bpim::cross_scale {

ScaleSequence::ScaleSequence(Rng& rng, const std::map<int, std::int64_t>& tap_channels, std::int64_t channels_)
    : channels(channels_) {
    for (int level : kLevels) {
        require(tap_channels.count(level), "scale sequence: missing channel count for level " + std::to_string(level));
        align[level] = register_module("align" + std::to_string(level),
                                       std::make_shared<nn::Conv2d>(rng, tap_channels.at(level), channels, 1));
    }
}

Var ScaleSequence::build(const Pyramid& taps) {
    for (int level : kLevels)
        require(taps.count(level), "scale sequence: taps are missing level " + std::to_string(level));
    for (int level : {3, 4, 5})
        require(taps.at(level - 1).dim(2) == 2 * taps.at(level).dim(2) &&
                    taps.at(level - 1).dim(3) == 2 * taps.at(level).dim(3),
                "scale sequence: tap sizes are not stride-consistent");
    const std::int64_t h = taps.at(2).dim(2), w = taps.at(2).dim(3);
    std::vector<Var> slices;
    for (int level : kLevels) {
        Var a = align.at(level)->forward(taps.at(level));
        slices.push_back(ops::upsample_nearest(a, static_cast<int>(h / a.dim(2))));
    }
    return ops::stack_depth(slices);
}

CrossScaleFusion::CrossScaleFusion(Rng& rng, std::int64_t channels) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(channels * 27));
    weight = register_parameter("weight", rng.uniform_tensor({channels, channels, 3, 3, 3}, -bound, bound));
    bias = register_parameter("bias", rng.uniform_tensor({channels}, -bound, bound));
    bn = register_module("bn", std::make_shared<nn::BatchNorm>(channels));
    bn->single_sample_uses_running = true;
}

Var CrossScaleFusion::forward(const Var& cs) {
    require(cs.value().rank() == 5, "CSF: expected [N, C, S, H, W], got " + shape_str(cs.shape()));
    require(cs.dim(2) == static_cast<std::int64_t>(kLevels.size()), "CSF: scale axis must have 4 entries");
    require(cs.dim(1) == weight.dim(1), "CSF: channel count does not match the 3D kernel");
    Var y = ops::silu(bn->forward(ops::conv3d(cs, weight, bias, 1, 1, 1)));
    return ops::max_over_depth(y);
}

CSFBlock::CSFBlock(Rng& rng, const std::map<int, std::int64_t>& tap_channels, std::int64_t channels,
                   std::int64_t out_channels) {
    sequence = register_module("sequence", std::make_shared<ScaleSequence>(rng, tap_channels, channels));
    csf = register_module("cbl", std::make_shared<CrossScaleFusion>(rng, channels));
    out = register_module("out", std::make_shared<nn::Conv2d>(rng, channels, out_channels, 1));
}

Var CSFBlock::forward(const Pyramid& taps, std::int64_t h, std::int64_t w) {
    Var fused = csf->forward(sequence->build(taps));
    return out->forward(ops::resize_nearest(fused, h, w));
}

TFF::TFF(Rng& rng, int level_, const TFFChannels& ch) : level(level_), ch_(ch) {
    require(level >= kLevels.front() && level <= kLevels.back(), "TFF: level out of range");
    require(ch.branch > 0 && ch.n > 0, "TFF: neck and branch widths must be positive");
    require((ch.p_prev > 0) == has_prev(level), "TFF: previous-level branch does not match level");
    if (ch.p_prev > 0) {
        // 3x3 so the branch strictly extends the strided conv it replaces.
        prev_conv = register_module("prev_conv", std::make_shared<nn::ConvBnAct>(rng, ch.p_prev, ch.branch, 3));
        prev_fuse = register_module("prev_fuse", std::make_shared<nn::ConvBnAct>(rng, 2 * ch.branch, ch.branch, 1));
    }
    n_conv = register_module("n_conv", std::make_shared<nn::ConvBnAct>(rng, ch.n, ch.branch, 1));
    if (ch.pig > 0) {
        require(has_pig(level), "TFF: level 5 has no PIG branch");
        pig_conv = register_module("pig_conv", std::make_shared<nn::ConvBnAct>(rng, ch.pig, ch.branch, 1));
    }
}

std::int64_t TFF::out_channels() const {
    return ch_.branch * (1 + (prev_conv ? 1 : 0) + (pig_conv ? 1 : 0));
}

Var TFF::forward(const TFFInputs& in) {
    require(in.n.defined(), "TFF: N_i is required");
    require(in.p_prev.defined() == static_cast<bool>(prev_conv),
            "TFF: previous-level input does not match level " + std::to_string(level));
    require(in.pig.defined() == static_cast<bool>(pig_conv),
            "TFF: PIG input does not match level " + std::to_string(level));
    std::vector<Var> parts;
    if (prev_conv) {
        Var c = prev_conv->forward(in.p_prev);
        Var pooled = ops::concat({ops::max_pool2d(c, 2, 2, 0), ops::avg_pool2d(c, 2, 2)});
        parts.push_back(prev_fuse->forward(pooled));
    }
    parts.push_back(n_conv->forward(in.n));
    if (pig_conv) parts.push_back(pig_conv->forward(in.pig));
    for (const auto& p : parts)
        require(p.dim(2) == parts.front().dim(2) && p.dim(3) == parts.front().dim(3),
                "TFF: branches disagree on the level-" + std::to_string(level) + " size");
    return parts.size() == 1 ? parts.front() : ops::concat(parts);
}

}  // namespace bpim::cross_scale
