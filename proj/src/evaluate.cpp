#include "bpim/evaluate.hpp"

#include <algorithm>
#include <numeric>

namespace bpim::train {

nlohmann::json EvalResult::to_json() const {
    nlohmann::json pc = nlohmann::json::object(), pc50 = nlohmann::json::object();
    for (const auto& [k, v] : per_class_ap) pc[std::to_string(k)] = v;
    for (const auto& [k, v] : per_class_ap50) pc50[std::to_string(k)] = v;
    return {{"map50", map50},         {"map5095", map5095},       {"per_class_ap", pc},
            {"per_class_ap50", pc50}, {"params_m", params_m},     {"gflops", gflops},
            {"images", images},       {"ground_truth", ground_truth}, {"detections", detections}};
}

std::vector<double> iou_thresholds() {
    std::vector<double> t;
    for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
    return t;
}

double average_precision(const std::vector<bool>& tp, int num_gt) {
    require(num_gt > 0, "average_precision: no ground truth");
    const std::size_t n = tp.size();
    std::vector<double> recall(n), precision(n);
    double ctp = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        ctp += tp[k] ? 1.0 : 0.0;
        recall[k] = ctp / num_gt;
        precision[k] = ctp / static_cast<double>(k + 1);
    }
    // Precision envelope: best precision at any recall at or beyond this rank.
    for (std::size_t k = n; k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
    double sum = 0.0;
    for (int i = 0; i <= 100; ++i) {
        const double r = i / 100.0;
        auto it = std::lower_bound(recall.begin(), recall.end(), r);
        if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
    }
    return sum / 101.0;
}

EvalResult evaluate_detections(const std::vector<std::vector<geometry::Detection>>& dets,
                               const std::vector<std::vector<data::Annotation>>& gts, int num_classes) {
    require(dets.size() == gts.size(), "evaluate: detection and ground-truth image counts differ");
    EvalResult res;
    res.images = static_cast<int>(gts.size());
    const auto thresholds = iou_thresholds();
    double sum50 = 0.0, sum5095 = 0.0;
    int counted = 0;
    for (int c = 0; c < num_classes; ++c) {
        int num_gt = 0;
        for (const auto& g : gts)
            for (const auto& a : g) num_gt += a.cls == c;
        res.ground_truth += num_gt;
        // Ranked detections of class c: (conf, image, index within image).
        struct Ranked {
            double conf;
            std::size_t image, index;
        };
        std::vector<Ranked> ranked;
        for (std::size_t i = 0; i < dets.size(); ++i)
            for (std::size_t k = 0; k < dets[i].size(); ++k)
                if (dets[i][k].cls == c) ranked.push_back({dets[i][k].conf, i, k});
        res.detections += static_cast<int>(ranked.size());
        if (num_gt == 0) continue;
        std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.conf > b.conf; });

        double ap_sum = 0.0, ap50 = 0.0;
        for (std::size_t ti = 0; ti < thresholds.size(); ++ti) {
            const double thr = thresholds[ti];
            std::vector<std::vector<bool>> used(gts.size());
            for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), false);
            std::vector<bool> tp;
            tp.reserve(ranked.size());
            for (const auto& r : ranked) {
                const auto& box = dets[r.image][r.index].box;
                double best = -1.0;
                std::size_t best_j = 0;
                for (std::size_t j = 0; j < gts[r.image].size(); ++j) {
                    const auto& g = gts[r.image][j];
                    if (g.cls != c || used[r.image][j]) continue;
                    const double v = geometry::iou(box, g.box);
                    if (v >= thr && v > best) {
                        best = v;
                        best_j = j;
                    }
                }
                if (best >= 0.0) used[r.image][best_j] = true;
                tp.push_back(best >= 0.0);
            }
            const double ap = average_precision(tp, num_gt);
            ap_sum += ap;
            if (ti == 0) ap50 = ap;
        }
        res.per_class_ap[c] = ap_sum / static_cast<double>(thresholds.size());
        res.per_class_ap50[c] = ap50;
        sum50 += ap50;
        sum5095 += res.per_class_ap[c];
        ++counted;
    }
    if (counted > 0) {
        res.map50 = sum50 / counted;
        res.map5095 = sum5095 / counted;
    }
    return res;
}

Tensor stack_images(const std::vector<const Tensor*>& images) {
    require(!images.empty(), "stack_images: empty batch");
    const Shape& s = images.front()->shape();
    Tensor out({static_cast<std::int64_t>(images.size()), s[0], s[1], s[2]});
    const std::int64_t n = shape_numel(s);
    for (std::size_t i = 0; i < images.size(); ++i) {
        require(images[i]->shape() == s, "stack_images: images differ in shape");
        std::copy_n(images[i]->ptr(), n, out.ptr() + static_cast<std::int64_t>(i) * n);
    }
    return out;
}

EvalResult evaluate(model::Model& m, const std::vector<data::AnnotatedImage>& items, const EvalOptions& opt) {
    const bool was_training = m.training();
    m.set_training(false);
    NoGradGuard ng;
    std::vector<std::vector<geometry::Detection>> dets;
    std::vector<std::vector<data::Annotation>> gts;
    model::DecodeOptions dopt{opt.conf_threshold, opt.iou_threshold, 300};
    for (std::size_t start = 0; start < items.size(); start += static_cast<std::size_t>(opt.batch_size)) {
        const std::size_t end = std::min(items.size(), start + static_cast<std::size_t>(opt.batch_size));
        std::vector<const Tensor*> imgs;
        for (std::size_t i = start; i < end; ++i) {
            imgs.push_back(&items[i].image);
            gts.push_back(items[i].boxes);
        }
        auto batch = model::decode(m.forward(Var(stack_images(imgs))), m.config(), dopt);
        for (auto& d : batch) dets.push_back(std::move(d));
    }
    m.set_training(was_training);
    EvalResult res = evaluate_detections(dets, gts, m.config().num_classes);
    res.params_m = static_cast<double>(model::count_params(m)) / 1e6;
    res.gflops = model::count_flops(m, m.config().input_size) / 1e9;
    return res;
}

}  // namespace bpim::train
