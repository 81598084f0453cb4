#pragma once

#include <memory>
#include <vector>

#include "bpim/nn.hpp"
#include "bpim/pyramid.hpp"

namespace bpim::fusion {

/// Per-pixel fusion weights at one level: one [N, 1, H, W] map per
/// contributing layer, normalised across contributors at every pixel.
struct FusionWeights {
    int level = 0;
    std::vector<Var> omega;
    std::vector<Var> logits;  // the per-pixel values fed to exp()
};

/// Produces one contributor's unnormalised weight: |Conv1x1(exp(lambda))|
/// with lambda = Conv1x1(contributor) collapsed to one channel.
class WeightBranch : public nn::Module {
public:
    WeightBranch(Rng& rng, std::int64_t channels);

    Var logits(const Var& contributor);
    Var numerator(const Var& logits);

    std::shared_ptr<nn::Conv2d> to_logit;
    std::shared_ptr<nn::Conv2d> rescale;
};

/// Normalised weights for 2 or 3 contributors already resampled to a common
/// spatial size.
class FusionWeightsLayer : public nn::Module {
public:
    FusionWeightsLayer(Rng& rng, const std::vector<std::int64_t>& channels, int level = 0);

    FusionWeights compute(const std::vector<Var>& contributors);

    std::vector<std::shared_ptr<WeightBranch>> branches;
    int level;
};

/// Weighted convex combination: sum_j omega_j (.) x_j, omega broadcast over channels.
Var fuse(const std::vector<Var>& contributors, const FusionWeights& weights);

/// Adaptive weight fusion over the P2..P5 neck outputs. Each level mixes
/// itself with its adjacent levels: the finer neighbour is max-pooled by 2,
/// the coarser one upsampled by 2 (nearest), and both are channel-aligned by a
/// 1x1 convolution when widths differ.
class AdaptiveFusion : public nn::Module {
public:
    AdaptiveFusion(Rng& rng, const std::map<int, std::int64_t>& channels);

    Pyramid forward(const Pyramid& pyramid);
    /// Weights computed during the most recent forward, by level.
    const std::map<int, FusionWeights>& last_weights() const { return last_; }

    /// Contributing levels of level k in fusion order.
    static std::vector<int> contributors_of(int level);
    std::shared_ptr<FusionWeightsLayer> weights_at(int level) { return weights_.at(level); }

private:
    Var resample(const Var& x, int from, int to);

    std::map<int, std::int64_t> channels_;
    std::map<int, std::shared_ptr<FusionWeightsLayer>> weights_;
    std::map<std::pair<int, int>, std::shared_ptr<nn::Conv2d>> align_;
    std::map<int, FusionWeights> last_;
};

}  // namespace bpim::fusion
