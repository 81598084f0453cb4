#pragma once

#include <array>
#include <optional>
#include <stdexcept>
#include <vector>

namespace bpim::geometry {

class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Axis-aligned box in centre format. Normalised to [0,1] when it describes
/// an annotation; the arithmetic below is unit-agnostic.
struct Box {
    double cx = 0.0;
    double cy = 0.0;
    double w = 0.0;
    double h = 0.0;

    double x1() const { return cx - 0.5 * w; }
    double x2() const { return cx + 0.5 * w; }
    double y1() const { return cy - 0.5 * h; }
    double y2() const { return cy + 0.5 * h; }
    double area() const { return w * h; }
    bool valid() const { return w > 0.0 && h > 0.0; }

    static Box from_corners(double x1, double y1, double x2, double y2);
    /// Clips the corners to [0,1]^2.
    Box clipped() const;

    bool operator==(const Box&) const = default;
};

struct Detection {
    Box box;
    int cls = 0;
    double conf = 0.0;
};

struct CIoUParts {
    double iou = 0.0;
    double rho2 = 0.0;   // squared centre distance
    double c2 = 0.0;     // squared diagonal of the smallest enclosing box
    double v = 0.0;      // aspect-ratio consistency term
    double alpha = 0.0;  // trade-off weight on v
};

struct CIoU {
    double value = 0.0;
    CIoUParts parts;
};

/// Intersection over union. Throws DomainError for a box with w<=0 or h<=0.
double iou(const Box& a, const Box& b);

CIoU ciou(const Box& pred, const Box& gt);

/// CIoU with the trade-off weight alpha supplied instead of derived.
double ciou_with_alpha(const Box& pred, const Box& gt, double alpha);

/// Objectness regression target: the CIoU value clamped to [0,1].
double confidence_target(const Box& pred, const Box& gt);

struct CIoULossGrad {
    double loss = 0.0;              // 1 - CIoU
    CIoUParts parts;
    std::array<double, 4> d_pred{};  // d loss / d (cx, cy, w, h)
};

/// 1 - CIoU and its gradient w.r.t. the predicted box. alpha is a constant
/// of differentiation; pass `alpha` to evaluate at a frozen value.
CIoULossGrad ciou_loss_grad(const Box& pred, const Box& gt, std::optional<double> alpha = std::nullopt);

/// Greedy class-wise suppression by descending confidence. Detections with
/// conf <= conf_threshold are dropped first; output is sorted by confidence.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold = 0.45, double conf_threshold = 0.25,
                           std::size_t max_det = 300);

}  // namespace bpim::geometry
