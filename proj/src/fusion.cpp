#include "bpim/fusion.hpp"

namespace bpim::fusion {

namespace {
// Floor on the per-pixel denominator; only reached when every numerator is ~0.
constexpr double kMinDenominator = 1e-12;
}  // namespace

WeightBranch::WeightBranch(Rng& rng, std::int64_t channels) {
    to_logit = register_module("logit", std::make_shared<nn::Conv2d>(rng, channels, 1, 1));
    rescale = register_module("rescale", std::make_shared<nn::Conv2d>(rng, 1, 1, 1));
    // Start as a plain softmax over the logits.
    rescale->weight.mutable_value().fill(1.0);
    rescale->bias.mutable_value().fill(0.0);
}

Var WeightBranch::logits(const Var& contributor) { return to_logit->forward(contributor); }

Var WeightBranch::numerator(const Var& lg) { return ops::abs(rescale->forward(ops::exp(lg))); }

FusionWeightsLayer::FusionWeightsLayer(Rng& rng, const std::vector<std::int64_t>& channels, int level_)
    : level(level_) {
    require(channels.size() >= 2, "fusion weights need at least 2 contributors");
    for (std::size_t j = 0; j < channels.size(); ++j)
        branches.push_back(register_module("w" + std::to_string(j), std::make_shared<WeightBranch>(rng, channels[j])));
}

FusionWeights FusionWeightsLayer::compute(const std::vector<Var>& contributors) {
    require(contributors.size() >= 2, "fusion weights need at least 2 contributors");
    require(contributors.size() == branches.size(), "fusion weights: contributor count does not match layer");
    const Shape& s0 = contributors.front().shape();
    for (const auto& c : contributors)
        require(c.value().rank() == 4 && c.dim(0) == s0[0] && c.dim(2) == s0[2] && c.dim(3) == s0[3],
                "fusion weights: contributors must share batch and spatial size");
    FusionWeights fw;
    fw.level = level;
    std::vector<Var> nums;
    for (std::size_t j = 0; j < contributors.size(); ++j) {
        Var lg = branches[j]->logits(contributors[j]);
        fw.logits.push_back(lg);
        nums.push_back(branches[j]->numerator(lg));
    }
    Var denom = nums.front();
    for (std::size_t j = 1; j < nums.size(); ++j) denom = ops::add(denom, nums[j]);
    denom = ops::clamp_min(denom, kMinDenominator);
    for (auto& n : nums) fw.omega.push_back(ops::div(n, denom));
    return fw;
}

Var fuse(const std::vector<Var>& contributors, const FusionWeights& weights) {
    require(contributors.size() == weights.omega.size(), "fuse: weight count does not match contributors");
    Var out;
    for (std::size_t j = 0; j < contributors.size(); ++j) {
        Var term = ops::mul_channel_broadcast(contributors[j], weights.omega[j]);
        out = out.defined() ? ops::add(out, term) : term;
    }
    return out;
}

std::vector<int> AdaptiveFusion::contributors_of(int level) {
    std::vector<int> out;
    for (int k = level - 1; k <= level + 1; ++k)
        if (k >= kLevels.front() && k <= kLevels.back()) out.push_back(k);
    return out;
}

AdaptiveFusion::AdaptiveFusion(Rng& rng, const std::map<int, std::int64_t>& channels) : channels_(channels) {
    for (int level : kLevels) require(channels_.count(level), "AWF: missing channel count for a level");
    for (int level : kLevels) {
        std::vector<std::int64_t> widths;
        for (int src : contributors_of(level)) {
            if (src != level && channels_.at(src) != channels_.at(level)) {
                align_[{src, level}] = register_module(
                    "align" + std::to_string(src) + std::to_string(level),
                    std::make_shared<nn::Conv2d>(rng, channels_.at(src), channels_.at(level), 1));
            }
            widths.push_back(channels_.at(level));
        }
        weights_[level] =
            register_module("weights" + std::to_string(level), std::make_shared<FusionWeightsLayer>(rng, widths, level));
    }
}

Var AdaptiveFusion::resample(const Var& x, int from, int to) {
    Var y = x;
    if (from < to) y = ops::max_pool2d(y, 2, 2, 0);
    if (from > to) y = ops::upsample_nearest(y, 2);
    auto it = align_.find({from, to});
    if (it != align_.end()) y = it->second->forward(y);
    return y;
}

Pyramid AdaptiveFusion::forward(const Pyramid& pyramid) {
    for (int level : kLevels) require(pyramid.count(level), "AWF: pyramid is missing level " + std::to_string(level));
    for (int level : {3, 4, 5}) {
        const Var& fine = pyramid.at(level - 1);
        const Var& coarse = pyramid.at(level);
        require(fine.dim(2) == 2 * coarse.dim(2) && fine.dim(3) == 2 * coarse.dim(3),
                "AWF: level sizes are not stride-consistent");
    }
    Pyramid out;
    last_.clear();
    for (int level : kLevels) {
        std::vector<Var> xs;
        for (int src : contributors_of(level)) xs.push_back(resample(pyramid.at(src), src, level));
        FusionWeights fw = weights_.at(level)->compute(xs);
        out[level] = fuse(xs, fw);
        last_[level] = std::move(fw);
    }
    return out;
}

}  // namespace bpim::fusion
