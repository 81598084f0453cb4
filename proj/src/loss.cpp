#include "bpim/loss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace bpim::train {

namespace {

constexpr double kMinSide = 1e-9;

double sigmoid(double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); }

// Numerically stable binary cross-entropy on a logit; d/dx = sigmoid(x) - t.
double bce_logit(double x, double t) { return std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x))); }

}  // namespace

geometry::Box decode_cell(double tx, double ty, double tw, double th, double anchor_w, double anchor_h, double stride) {
    const double sw = sigmoid(tw), sh = sigmoid(th);
    return {2.0 * sigmoid(tx) - 0.5, 2.0 * sigmoid(ty) - 0.5, 4.0 * sw * sw * anchor_w / stride,
            4.0 * sh * sh * anchor_h / stride};
}

LossResult compute_loss(const model::PredictionSet& preds, const std::vector<Target>& targets,
                        const model::ModelConfig& cfg, const LossWeights& w, const AssignOptions& assign,
                        const FrozenTerms* frozen) {
    require(!preds.levels.empty(), "loss: empty prediction set");
    const int na = preds.anchors_per_cell, no = preds.attributes(), nc = preds.num_classes;
    const std::int64_t batch = preds.levels.begin()->second.dim(0);
    for (const auto& t : targets) {
        require(t.image >= 0 && t.image < batch, "loss: target image index out of range");
        require(t.cls >= 0 && t.cls < nc, "loss: target class out of range");
    }

    LossResult res;
    res.assignment = assign_targets(targets, cfg.anchors, cfg.input_size, assign);
    const auto& matches = res.assignment.matches;
    if (frozen) require(frozen->alpha.size() == matches.size(), "loss: frozen terms do not match the assignment");

    // Gradient of the unweighted terms w.r.t. every head value.
    std::map<int, Tensor> grad_box, grad_obj, grad_cls;
    std::vector<Var> inputs;
    for (const auto& [level, raw] : preds.levels) {
        require(raw.value().rank() == 4 && raw.dim(1) == na * no, "loss: head tensor has the wrong channel count");
        grad_box[level] = Tensor(raw.shape());
        grad_obj[level] = Tensor(raw.shape());
        grad_cls[level] = Tensor(raw.shape());
        inputs.push_back(raw);
    }

    auto index = [&](int level, std::int64_t b, int a, int attr, std::int64_t y, std::int64_t x) {
        const Tensor& t = preds.levels.at(level).value();
        return ((b * t.dim(1) + static_cast<std::int64_t>(a) * no + attr) * t.dim(2) + y) * t.dim(3) + x;
    };

    // Objectness targets, filled from the matches in order (later matches win).
    std::map<int, std::vector<double>> tobj;
    for (const auto& [level, raw] : preds.levels)
        tobj[level].assign(static_cast<std::size_t>(batch * na * raw.dim(2) * raw.dim(3)), 0.0);
    res.frozen.alpha.resize(matches.size());

    const double inv_matches = matches.empty() ? 0.0 : 1.0 / static_cast<double>(matches.size());
    double box_sum = 0.0, cls_sum = 0.0;
    for (std::size_t m = 0; m < matches.size(); ++m) {
        const Match& mt = matches[m];
        const Target& tg = targets[static_cast<std::size_t>(mt.target)];
        const Tensor& v = preds.levels.at(mt.level).value();
        const double stride = level_stride(mt.level);
        const auto [aw, ah] = cfg.anchors.at(mt.level)[static_cast<std::size_t>(mt.anchor)];
        const std::int64_t b = mt.image, y = mt.gy, x = mt.gx;
        double t[4];
        for (int k = 0; k < 4; ++k) t[k] = v[index(mt.level, b, mt.anchor, k, y, x)];
        geometry::Box pbox = decode_cell(t[0], t[1], t[2], t[3], aw, ah, stride);
        if (!std::isfinite(pbox.cx) || !std::isfinite(pbox.cy) || !std::isfinite(pbox.w) || !std::isfinite(pbox.h)) {
            // let the caller see a non-finite loss instead of a geometry error
            box_sum = std::numeric_limits<double>::quiet_NaN();
            continue;
        }
        pbox.w = std::max(pbox.w, kMinSide);  // sigmoid underflow on very negative logits
        pbox.h = std::max(pbox.h, kMinSide);
        const double grid = static_cast<double>(cfg.input_size) / stride;
        const geometry::Box gbox{tg.box.cx * grid - x, tg.box.cy * grid - y, tg.box.w * grid, tg.box.h * grid};

        const auto lg = geometry::ciou_loss_grad(pbox, gbox, frozen ? std::optional<double>(frozen->alpha[m]) : std::nullopt);
        res.frozen.alpha[m] = lg.parts.alpha;
        box_sum += lg.loss;
        const double sx = sigmoid(t[0]), sy = sigmoid(t[1]), sw = sigmoid(t[2]), sh = sigmoid(t[3]);
        const double dt[4] = {lg.d_pred[0] * 2.0 * sx * (1 - sx), lg.d_pred[1] * 2.0 * sy * (1 - sy),
                              lg.d_pred[2] * 8.0 * sw * sw * (1 - sw) * aw / stride,
                              lg.d_pred[3] * 8.0 * sh * sh * (1 - sh) * ah / stride};
        Tensor& gb = grad_box.at(mt.level);
        for (int k = 0; k < 4; ++k) gb[index(mt.level, b, mt.anchor, k, y, x)] += dt[k] * inv_matches;

        const double value = 1.0 - lg.loss;
        const std::int64_t h = v.dim(2), wd = v.dim(3);
        tobj.at(mt.level)[static_cast<std::size_t>(((b * na + mt.anchor) * h + y) * wd + x)] =
            std::clamp(std::clamp(value, -1.0, 1.0), 0.0, 1.0);

        Tensor& gc = grad_cls.at(mt.level);
        const double inv_cls = inv_matches / nc;
        for (int k = 0; k < nc; ++k) {
            const std::int64_t i = index(mt.level, b, mt.anchor, 5 + k, y, x);
            const double target = k == tg.cls ? 1.0 : 0.0;
            cls_sum += bce_logit(v[i], target);
            gc[i] += (sigmoid(v[i]) - target) * inv_cls;
        }
    }
    if (frozen) tobj = frozen->obj_target;
    res.frozen.obj_target = tobj;

    double obj_sum = 0.0;
    for (const auto& [level, raw] : preds.levels) {
        const Tensor& v = raw.value();
        const std::int64_t h = v.dim(2), wd = v.dim(3);
        const auto& tl = tobj.at(level);
        require(tl.size() == static_cast<std::size_t>(batch * na * h * wd), "loss: frozen objectness has wrong size");
        const double bal = w.balance.count(level) ? w.balance.at(level) : 1.0;
        const double inv = bal / static_cast<double>(tl.size());
        Tensor& go = grad_obj.at(level);
        double s = 0.0;
        for (std::int64_t b = 0; b < batch; ++b)
            for (int a = 0; a < na; ++a)
                for (std::int64_t y = 0; y < h; ++y)
                    for (std::int64_t x = 0; x < wd; ++x) {
                        const std::int64_t i = index(level, b, a, 4, y, x);
                        const double tv = tl[static_cast<std::size_t>(((b * na + a) * h + y) * wd + x)];
                        s += bce_logit(v[i], tv);
                        go[i] += (sigmoid(v[i]) - tv) * inv;
                    }
        obj_sum += s * inv;
    }

    res.parts.box = box_sum * inv_matches;
    res.parts.cls = matches.empty() ? 0.0 : cls_sum * inv_matches / nc;
    res.parts.obj = obj_sum;
    const double scale = w.scale_by_batch ? static_cast<double>(batch) : 1.0;
    res.parts.total = scale * (w.box * res.parts.box + w.obj * res.parts.obj + w.cls * res.parts.cls);

    std::vector<Tensor> grads;
    for (const auto& [level, raw] : preds.levels) {
        Tensor g(raw.shape());
        const Tensor &gb = grad_box.at(level), &go = grad_obj.at(level), &gc = grad_cls.at(level);
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] = scale * (w.box * gb[i] + w.obj * go[i] + w.cls * gc[i]);
        grads.push_back(std::move(g));
    }
    res.total = make_result(Tensor({1}, std::vector<double>{res.parts.total}), inputs,
                            [grads = std::move(grads)](Node& self) {
                                const double up = self.grad[0];
                                for (std::size_t i = 0; i < self.inputs.size(); ++i) {
                                    Node* in = self.inputs[i].get();
                                    if (!in || !in->requires_grad) continue;
                                    Tensor& g = in->grad_buffer();
                                    for (std::int64_t k = 0; k < g.numel(); ++k) g[k] += up * grads[i][k];
                                }
                            });
    return res;
}

}  // namespace bpim::train
