#include "bpim/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace bpim::geometry {

namespace {

constexpr double kFourOverPi2 = 4.0 / (std::numbers::pi * std::numbers::pi);

void check(const Box& b, const char* who) {
    if (!(b.w > 0.0) || !(b.h > 0.0)) throw DomainError(std::string(who) + ": box must have positive width and height");
}

double intersection(const Box& a, const Box& b) {
    const double iw = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
    const double ih = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
    return (iw > 0.0 && ih > 0.0) ? iw * ih : 0.0;
}

// Area from the same corners as the intersection, so iou(b, b) is exactly 1.
double corner_area(const Box& b) { return (b.x2() - b.x1()) * (b.y2() - b.y1()); }

CIoUParts parts_of(const Box& pred, const Box& gt) {
    CIoUParts p;
    const double inter = intersection(pred, gt);
    p.iou = inter / (corner_area(pred) + corner_area(gt) - inter);
    const double cw = std::max(pred.x2(), gt.x2()) - std::min(pred.x1(), gt.x1());
    const double ch = std::max(pred.y2(), gt.y2()) - std::min(pred.y1(), gt.y1());
    p.c2 = cw * cw + ch * ch;
    p.rho2 = (pred.cx - gt.cx) * (pred.cx - gt.cx) + (pred.cy - gt.cy) * (pred.cy - gt.cy);
    const double da = std::atan(gt.w / gt.h) - std::atan(pred.w / pred.h);
    p.v = kFourOverPi2 * da * da;
    const double denom = 1.0 - p.iou + p.v;
    p.alpha = denom > 0.0 ? p.v / denom : 0.0;
    return p;
}

}  // namespace

Box Box::from_corners(double x1, double y1, double x2, double y2) {
    return Box{0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1};
}

Box Box::clipped() const {
    return from_corners(std::clamp(x1(), 0.0, 1.0), std::clamp(y1(), 0.0, 1.0), std::clamp(x2(), 0.0, 1.0),
                        std::clamp(y2(), 0.0, 1.0));
}

double iou(const Box& a, const Box& b) {
    check(a, "iou");
    check(b, "iou");
    const double inter = intersection(a, b);
    return inter / (corner_area(a) + corner_area(b) - inter);
}

CIoU ciou(const Box& pred, const Box& gt) {
    check(pred, "ciou");
    check(gt, "ciou");
    CIoU r;
    r.parts = parts_of(pred, gt);
    if (r.parts.c2 <= 0.0) {
        r.value = 1.0;
        return r;
    }
    r.value = r.parts.iou - r.parts.rho2 / r.parts.c2 - r.parts.alpha * r.parts.v;
    return r;
}

double ciou_with_alpha(const Box& pred, const Box& gt, double alpha) {
    check(pred, "ciou");
    check(gt, "ciou");
    const CIoUParts p = parts_of(pred, gt);
    if (p.c2 <= 0.0) return 1.0;
    return p.iou - p.rho2 / p.c2 - alpha * p.v;
}

double confidence_target(const Box& pred, const Box& gt) {
    const double v = std::clamp(ciou(pred, gt).value, -1.0, 1.0);
    return std::clamp(v, 0.0, 1.0);
}

CIoULossGrad ciou_loss_grad(const Box& pred, const Box& gt, std::optional<double> alpha) {
    check(pred, "ciou");
    check(gt, "ciou");
    CIoULossGrad out;
    out.parts = parts_of(pred, gt);
    const CIoUParts& p = out.parts;
    const double a = alpha.value_or(p.alpha);
    if (p.c2 <= 0.0) {
        out.loss = 0.0;
        return out;
    }
    out.loss = 1.0 - (p.iou - p.rho2 / p.c2 - a * p.v);

    // Work in edge coordinates (x1, x2, y1, y2), then map to (cx, cy, w, h).
    const double px1 = pred.x1(), px2 = pred.x2(), py1 = pred.y1(), py2 = pred.y2();
    const double gx1 = gt.x1(), gx2 = gt.x2(), gy1 = gt.y1(), gy2 = gt.y2();

    const double iw = std::min(px2, gx2) - std::max(px1, gx1);
    const double ih = std::min(py2, gy2) - std::max(py1, gy1);
    const bool overlap = iw > 0.0 && ih > 0.0;
    const double inter = overlap ? iw * ih : 0.0;
    const double uni = corner_area(pred) + corner_area(gt) - inter;

    // d inter / d edges
    std::array<double, 4> d_inter{};  // x1, x2, y1, y2
    if (overlap) {
        d_inter[0] = (px1 > gx1) ? -ih : 0.0;
        d_inter[1] = (px2 < gx2) ? ih : 0.0;
        d_inter[2] = (py1 > gy1) ? -iw : 0.0;
        d_inter[3] = (py2 < gy2) ? iw : 0.0;
    }
    // d (pred area) / d edges: area = (x2-x1)(y2-y1)
    const std::array<double, 4> d_area{-pred.h, pred.h, -pred.w, pred.w};
    std::array<double, 4> d_iou{};
    for (int k = 0; k < 4; ++k) {
        const double d_uni = d_area[k] - d_inter[k];
        d_iou[k] = (d_inter[k] * uni - inter * d_uni) / (uni * uni);
    }

    const double cw = std::max(px2, gx2) - std::min(px1, gx1);
    const double ch = std::max(py2, gy2) - std::min(py1, gy1);
    const std::array<double, 4> d_c2{(px1 < gx1) ? -2.0 * cw : 0.0, (px2 > gx2) ? 2.0 * cw : 0.0,
                                     (py1 < gy1) ? -2.0 * ch : 0.0, (py2 > gy2) ? 2.0 * ch : 0.0};

    // Edge gradients of the CIoU terms that depend on edges, mapped to centre
    // format: d/dcx = d/dx1 + d/dx2, d/dw = (d/dx2 - d/dx1) / 2.
    std::array<double, 4> d_edges{};
    for (int k = 0; k < 4; ++k) d_edges[k] = d_iou[k] + p.rho2 * d_c2[k] / (p.c2 * p.c2);
    std::array<double, 4> d_ciou{};
    d_ciou[0] = d_edges[0] + d_edges[1];
    d_ciou[1] = d_edges[2] + d_edges[3];
    d_ciou[2] = 0.5 * (d_edges[1] - d_edges[0]);
    d_ciou[3] = 0.5 * (d_edges[3] - d_edges[2]);

    // Centre distance term.
    d_ciou[0] -= 2.0 * (pred.cx - gt.cx) / p.c2;
    d_ciou[1] -= 2.0 * (pred.cy - gt.cy) / p.c2;

    // Aspect term: v = k (atan(W/H) - atan(w/h))^2.
    const double da = std::atan(gt.w / gt.h) - std::atan(pred.w / pred.h);
    const double r2 = pred.w * pred.w + pred.h * pred.h;
    const double dv_dw = -2.0 * kFourOverPi2 * da * pred.h / r2;
    const double dv_dh = 2.0 * kFourOverPi2 * da * pred.w / r2;
    d_ciou[2] -= a * dv_dw;
    d_ciou[3] -= a * dv_dh;

    for (int k = 0; k < 4; ++k) out.d_pred[k] = -d_ciou[k];
    return out;
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold, double conf_threshold,
                           std::size_t max_det) {
    if (!(iou_threshold > 0.0 && iou_threshold < 1.0)) throw DomainError("nms: iou_threshold must be in (0,1)");
    if (!(conf_threshold >= 0.0 && conf_threshold < 1.0)) throw DomainError("nms: conf_threshold must be in [0,1)");
    std::erase_if(dets, [&](const Detection& d) { return !(d.conf > conf_threshold); });
    std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.conf > b.conf; });
    std::vector<Detection> keep;
    for (const auto& d : dets) {
        bool suppressed = false;
        for (const auto& k : keep) {
            if (k.cls == d.cls && iou(k.box, d.box) > iou_threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) {
            keep.push_back(d);
            if (keep.size() >= max_det) break;
        }
    }
    return keep;
}

}  // namespace bpim::geometry
