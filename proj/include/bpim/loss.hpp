#pragma once

#include <map>
#include <vector>

#include "bpim/assign.hpp"
#include "bpim/model.hpp"

namespace bpim::train {

struct LossWeights {
    double box = 0.05;
    double obj = 1.0;
    double cls = 0.5;
    std::map<int, double> balance{{2, 4.0}, {3, 1.0}, {4, 0.4}, {5, 0.1}};  // per-level objectness weight
    /// Multiply the total by the batch size (gradient scale used with lr0 = 0.01).
    bool scale_by_batch = true;
};

/// Unweighted terms and the weighted total.
struct LossParts {
    double box = 0.0;  // mean (1 - CIoU) over matches
    double obj = 0.0;  // sum over levels of balance * mean BCE
    double cls = 0.0;  // mean BCE over matches and classes
    double total = 0.0;
};

/// Values that the analytic gradient treats as constants: the CIoU
/// trade-off weight of every match and the objectness targets. Evaluating
/// the loss with them frozen gives the function whose exact gradient
/// backward() returns, which is what finite-difference checks need.
struct FrozenTerms {
    std::vector<double> alpha;                      // one per match
    std::map<int, std::vector<double>> obj_target;  // per level, [N, A, H, W]
};

struct LossResult {
    Var total;  // scalar; backward reaches the head tensors
    LossParts parts;
    Assignment assignment;
    FrozenTerms frozen;
};

/// Decoded box of one prediction in grid units relative to its cell origin:
/// xy = 2 sigmoid(t) - 0.5, wh = (2 sigmoid(t))^2 * anchor / stride.
geometry::Box decode_cell(double tx, double ty, double tw, double th, double anchor_w, double anchor_h, double stride);

LossResult compute_loss(const model::PredictionSet& preds, const std::vector<Target>& targets,
                        const model::ModelConfig& cfg, const LossWeights& w = {}, const AssignOptions& assign = {},
                        const FrozenTerms* frozen = nullptr);

}  // namespace bpim::train
