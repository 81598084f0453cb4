#pragma once

#include <map>
#include <vector>

#include <json.hpp>

#include "bpim/data.hpp"
#include "bpim/geometry.hpp"
#include "bpim/model.hpp"

namespace bpim::train {

struct EvalResult {
    double map50 = 0.0;
    double map5095 = 0.0;
    std::map<int, double> per_class_ap;    // AP@.5:.95 by class
    std::map<int, double> per_class_ap50;  // AP@.5 by class
    double params_m = 0.0;
    double gflops = 0.0;
    int images = 0;
    int ground_truth = 0;
    int detections = 0;

    nlohmann::json to_json() const;
};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
std::vector<double> iou_thresholds();

/// 101-point interpolated AP from a ranked list: `tp[k]` tells whether the
/// k-th most confident detection is a true positive; `num_gt` > 0.
double average_precision(const std::vector<bool>& tp, int num_gt);

/// Greedy one-to-one matching per image and class by descending confidence;
/// each detection takes the unmatched ground truth of highest IoU at or
/// above the threshold. Classes without ground truth are left out of the mean.
EvalResult evaluate_detections(const std::vector<std::vector<geometry::Detection>>& dets,
                               const std::vector<std::vector<data::Annotation>>& gts, int num_classes);

struct EvalOptions {
    double conf_threshold = 0.001;
    double iou_threshold = 0.6;  // NMS
    int batch_size = 8;
};

/// Runs the model in evaluation mode over letterboxed items (already at the
/// model's input size) and scores the detections. Fills params_m and gflops.
EvalResult evaluate(model::Model& m, const std::vector<data::AnnotatedImage>& items, const EvalOptions& opt = {});

/// Stacks [3, S, S] images into a [N, 3, S, S] batch.
Tensor stack_images(const std::vector<const Tensor*>& images);

}  // namespace bpim::train
