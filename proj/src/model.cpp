#include "bpim/model.hpp"

#include <algorithm>
#include <cmath>

namespace bpim::model {

namespace {

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

Var upsample2(const Var& x) { return ops::upsample_nearest(x, 2); }

}  // namespace

std::string ModuleFlags::label() const {
    std::string s;
    auto add = [&](bool on, const char* name) {
        if (!on) return;
        if (!s.empty()) s += '+';
        s += name;
    };
    add(big, "big");
    add(awf, "awf");
    add(pig, "pig");
    add(csf_tff, "csf");
    return s.empty() ? "baseline" : s;
}

std::vector<ModuleFlags> ModuleFlags::all_subsets() {
    std::vector<ModuleFlags> out;
    for (int m = 0; m < 16; ++m) out.push_back({(m & 1) != 0, (m & 2) != 0, (m & 4) != 0, (m & 8) != 0});
    return out;
}

std::map<int, AnchorSet> ModelConfig::default_anchors() {
    static constexpr AnchorSet base{{{1.25, 1.625}, {2.0, 3.75}, {4.125, 2.875}}};
    std::map<int, AnchorSet> out;
    for (int level : kLevels) {
        AnchorSet a = base;
        for (auto& [w, h] : a) {
            w *= level_stride(level);
            h *= level_stride(level);
        }
        out[level] = a;
    }
    return out;
}

void ModelConfig::validate() const {
    if (!(width_multiple > 0.0) || width_multiple > 4.0) throw ConfigError("width_multiple must be in (0, 4]");
    if (!(depth_multiple > 0.0) || depth_multiple > 4.0) throw ConfigError("depth_multiple must be in (0, 4]");
    if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
    if (input_size <= 0 || input_size % 32 != 0) throw ConfigError("input_size must be a positive multiple of 32");
    if (heads < 1) throw ConfigError("heads must be >= 1");
    if (ff_dim < 1) throw ConfigError("ff_dim must be >= 1");
    if (enable.pig && channels(1024) % heads != 0)
        throw ConfigError("PIG: B5 width " + std::to_string(channels(1024)) + " is not divisible by " +
                          std::to_string(heads) + " heads");
    for (int level : kLevels) {
        auto it = anchors.find(level);
        if (it == anchors.end()) throw ConfigError("anchors: missing level " + std::to_string(level));
        for (const auto& [w, h] : it->second)
            if (!(w > 0.0) || !(h > 0.0)) throw ConfigError("anchors must be positive");
    }
}

std::int64_t ModelConfig::channels(std::int64_t nominal) const {
    const double c = std::ceil(static_cast<double>(nominal) * width_multiple / 8.0) * 8.0;
    return std::max<std::int64_t>(8, static_cast<std::int64_t>(c));
}

int ModelConfig::depth(int nominal) const {
    return std::max(1, static_cast<int>(std::lround(nominal * depth_multiple)));
}

nlohmann::json ModelConfig::to_json() const {
    nlohmann::json a = nlohmann::json::object();
    for (const auto& [level, set] : anchors) {
        nlohmann::json pairs = nlohmann::json::array();
        for (const auto& [w, h] : set) pairs.push_back({w, h});
        a[std::to_string(level)] = pairs;
    }
    return {
        {"width_multiple", width_multiple},
        {"depth_multiple", depth_multiple},
        {"num_classes", num_classes},
        {"enable", {{"big", enable.big}, {"awf", enable.awf}, {"pig", enable.pig}, {"csf_tff", enable.csf_tff}}},
        {"heads", heads},
        {"ff_dim", ff_dim},
        {"anchors", a},
        {"input_size", input_size},
        {"gsconv", gsconv == nn::GSConvKind::gsconv ? "gsconv" : "plain"},
        {"positional_embedding", positional_embedding},
    };
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.width_multiple = j.at("width_multiple").get<double>();
    c.depth_multiple = j.at("depth_multiple").get<double>();
    c.num_classes = j.at("num_classes").get<int>();
    const auto& e = j.at("enable");
    c.enable = {e.at("big").get<bool>(), e.at("awf").get<bool>(), e.at("pig").get<bool>(),
                e.at("csf_tff").get<bool>()};
    c.heads = j.at("heads").get<int>();
    c.ff_dim = j.at("ff_dim").get<std::int64_t>();
    c.anchors.clear();
    for (const auto& [key, pairs] : j.at("anchors").items()) {
        AnchorSet set{};
        require(pairs.size() == set.size(), "anchors: expected 3 pairs per level");
        for (std::size_t i = 0; i < set.size(); ++i) set[i] = {pairs[i][0].get<double>(), pairs[i][1].get<double>()};
        c.anchors[std::stoi(key)] = set;
    }
    c.input_size = j.at("input_size").get<int>();
    const std::string g = j.at("gsconv").get<std::string>();
    if (g != "gsconv" && g != "plain") throw ConfigError("gsconv must be 'gsconv' or 'plain'");
    c.gsconv = g == "plain" ? nn::GSConvKind::plain : nn::GSConvKind::gsconv;
    c.positional_embedding = j.at("positional_embedding").get<bool>();
    c.validate();
    return c;
}

double PredictionSet::at(int level, std::int64_t b, int a, int attr, std::int64_t y, std::int64_t x) const {
    const Tensor& t = levels.at(level).value();
    const std::int64_t h = t.dim(2), w = t.dim(3);
    const std::int64_t ch = static_cast<std::int64_t>(a) * attributes() + attr;
    return t[((b * t.dim(1) + ch) * h + y) * w + x];
}

Backbone::Backbone(Rng& rng, const ModelConfig& cfg) {
    const auto c = [&](std::int64_t n) { return cfg.channels(n); };
    stem = register_module("stem", std::make_shared<nn::ConvBnAct>(rng, 3, c(64), 3, 2));
    down2 = register_module("down2", std::make_shared<nn::ConvBnAct>(rng, c(64), c(128), 3, 2));
    stage2 = register_module("stage2", std::make_shared<nn::C3>(rng, c(128), c(128), cfg.depth(3)));
    down3 = register_module("down3", std::make_shared<nn::ConvBnAct>(rng, c(128), c(256), 3, 2));
    stage3 = register_module("stage3", std::make_shared<nn::C3>(rng, c(256), c(256), cfg.depth(6)));
    down4 = register_module("down4", std::make_shared<nn::ConvBnAct>(rng, c(256), c(512), 3, 2));
    stage4 = register_module("stage4", std::make_shared<nn::C3>(rng, c(512), c(512), cfg.depth(9)));
    down5 = register_module("down5", std::make_shared<nn::ConvBnAct>(rng, c(512), c(1024), 3, 2));
    stage5 = register_module("stage5", std::make_shared<nn::C3>(rng, c(1024), c(1024), cfg.depth(3)));
    sppf = register_module("sppf", std::make_shared<nn::SPPF>(rng, c(1024), c(1024)));
    channels_ = {{2, c(128)}, {3, c(256)}, {4, c(512)}, {5, c(1024)}};
}

Pyramid Backbone::forward(const Var& images) {
    Pyramid taps;
    taps[2] = stage2->forward(down2->forward(stem->forward(images)));
    taps[3] = stage3->forward(down3->forward(taps[2]));
    taps[4] = stage4->forward(down4->forward(taps[3]));
    taps[5] = sppf->forward(stage5->forward(down5->forward(taps[4])));
    return taps;
}

Detect::Detect(Rng& rng, const ModelConfig& cfg, const std::map<int, std::int64_t>& in_channels)
    : num_classes(cfg.num_classes) {
    const int na = 3, no = 5 + cfg.num_classes;
    for (int level : kLevels) {
        auto conv = std::make_shared<nn::Conv2d>(rng, in_channels.at(level), na * no, 1);
        // Prior: about 8 objects per image, and class scores near 0.6 / nc.
        const double cells = std::pow(cfg.input_size / static_cast<double>(level_stride(level)), 2);
        Tensor& b = conv->bias.mutable_value();
        for (int a = 0; a < na; ++a) {
            b[a * no + 4] += std::log(8.0 / cells);
            for (int k = 0; k < cfg.num_classes; ++k) b[a * no + 5 + k] += std::log(0.6 / (cfg.num_classes - 0.99));
        }
        heads[level] = register_module("m" + std::to_string(level), conv);
    }
}

PredictionSet Detect::forward(const Pyramid& p) {
    PredictionSet out;
    out.num_classes = num_classes;
    for (int level : kLevels) out.levels[level] = heads.at(level)->forward(p.at(level));
    return out;
}

NeckWidths neck_widths(const ModelConfig& cfg) {
    NeckWidths w;
    const auto c = [&](std::int64_t n) { return cfg.channels(n); };
    w.tap = {{2, c(128)}, {3, c(256)}, {4, c(512)}, {5, c(1024)}};
    w.n = {{2, c(128)}, {3, c(128)}, {4, c(256)}, {5, c(512)}};
    const bool pig = cfg.enable.pig;
    w.p[2] = w.n[2] * (pig ? 2 : 1);
    for (int level : {3, 4, 5}) w.p[level] = 2 * w.n[level];
    return w;
}

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    widths_ = neck_widths(cfg_);
    const auto& W = widths_;
    const auto& f = cfg_.enable;
    const auto c = [&](std::int64_t n) { return cfg_.channels(n); };
    const int d3 = cfg_.depth(3);

    backbone = register_module("backbone", std::make_shared<Backbone>(rng, cfg_));
    lat5 = register_module("lat5", std::make_shared<nn::ConvBnAct>(rng, c(1024), c(512), 1));
    td4 = register_module("td4", std::make_shared<nn::C3>(rng, c(512) + c(512), c(512), d3, false));
    lat4 = register_module("lat4", std::make_shared<nn::ConvBnAct>(rng, c(512), c(256), 1));
    td3 = register_module("td3", std::make_shared<nn::C3>(rng, c(256) + c(256), c(256), d3, false));
    lat3 = register_module("lat3", std::make_shared<nn::ConvBnAct>(rng, c(256), c(128), 1));
    td2 = register_module("td2", std::make_shared<nn::C3>(rng, c(128) + c(128), c(128), d3, false));

    if (f.big)
        for (int level : kLevels)
            big[level] = register_module("big" + std::to_string(level),
                                         std::make_shared<boundary::BoundaryGuidance>(rng, W.tap.at(level),
                                                                                       W.n.at(level), cfg_.gsconv));
    if (f.pig) {
        attention::AttentionConfig ac{cfg_.heads, W.tap.at(5), cfg_.ff_dim};
        const std::int64_t side = cfg_.input_size / 32;
        pig = register_module("pig", std::make_shared<attention::PositionGuidance>(
                                         rng, ac, std::map<int, std::int64_t>{{2, W.n.at(2)}, {3, W.n.at(3)}, {4, W.n.at(4)}},
                                         cfg_.positional_embedding, side * side));
    }
    if (f.csf_tff) {
        csf = register_module("csf", std::make_shared<cross_scale::CSFBlock>(rng, W.tap, W.n.at(2), W.p.at(2)));
        for (int level : kLevels) {
            cross_scale::TFFChannels ch;
            ch.p_prev = level >= 3 ? W.p.at(level - 1) : 0;
            ch.n = W.n.at(level);
            ch.pig = f.pig && level <= 4 ? W.n.at(level) : 0;
            ch.branch = W.n.at(level);
            tff[level] = register_module("tff" + std::to_string(level), std::make_shared<cross_scale::TFF>(rng, level, ch));
        }
    }
    for (int level : {3, 4, 5}) {
        if (!f.csf_tff)
            down[level] = register_module("down" + std::to_string(level),
                                          std::make_shared<nn::ConvBnAct>(rng, W.p.at(level - 1), W.n.at(level), 3, 2));
        const int branches = 2 + (f.pig && level <= 4 ? 1 : 0);
        bottom_up[level] = register_module(
            "bu" + std::to_string(level),
            std::make_shared<nn::C3>(rng, branches * W.n.at(level), W.p.at(level), d3, false));
    }
    if (f.awf) awf = register_module("awf", std::make_shared<fusion::AdaptiveFusion>(rng, W.p));
    detect = register_module("detect", std::make_shared<Detect>(rng, cfg_, W.p));
}

PredictionSet Model::forward(const Var& images) {
    require(images.value().rank() == 4 && images.dim(1) == 3, "forward: expected [N, 3, S, S] images");
    require(images.dim(2) == cfg_.input_size && images.dim(3) == cfg_.input_size,
            "forward: images must be " + std::to_string(cfg_.input_size) + "x" + std::to_string(cfg_.input_size) +
                ", got " + shape_str(images.shape()));
    const auto& f = cfg_.enable;
    Trace t;
    t.taps = backbone->forward(images);
    const Pyramid& b = t.taps;
    auto guided = [&](int level, const Var& n) { return f.big ? big.at(level)->forward(n, b.at(level)) : n; };

    t.n[5] = guided(5, lat5->forward(b.at(5)));
    t.n[4] = guided(4, lat4->forward(td4->forward(ops::concat({upsample2(t.n[5]), b.at(4)}))));
    t.n[3] = guided(3, lat3->forward(td3->forward(ops::concat({upsample2(t.n[4]), b.at(3)}))));
    t.n[2] = guided(2, td2->forward(ops::concat({upsample2(t.n[3]), b.at(2)})));

    if (f.pig) t.pig = pig->forward(b.at(5)).levels;
    auto pig_at = [&](int level) { return t.pig.count(level) ? t.pig.at(level) : Var(); };

    if (f.csf_tff) {
        t.p[2] = tff.at(2)->forward({t.n[2], Var(), pig_at(2)});
        t.csf = csf->forward(b, t.p[2].dim(2), t.p[2].dim(3));
        t.p[2] = ops::add(t.p[2], t.csf);
    } else {
        t.p[2] = f.pig ? ops::concat({t.n[2], pig_at(2)}) : t.n[2];
    }
    for (int level : {3, 4, 5}) {
        Var merged;
        if (f.csf_tff) {
            merged = tff.at(level)->forward({t.n[level], t.p[level - 1], pig_at(level)});
        } else {
            std::vector<Var> parts{down.at(level)->forward(t.p[level - 1]), t.n[level]};
            if (f.pig && level <= 4) parts.push_back(pig_at(level));
            merged = ops::concat(parts);
        }
        t.p[level] = bottom_up.at(level)->forward(merged);
    }
    t.out = f.awf ? awf->forward(t.p) : t.p;
    PredictionSet out = detect->forward(t.out);
    trace_ = std::move(t);
    return out;
}

Baseline::Baseline(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const auto c = [&](std::int64_t n) { return cfg_.channels(n); };
    const int d3 = cfg_.depth(3);
    backbone = register_module("backbone", std::make_shared<Backbone>(rng, cfg_));
    lat5 = register_module("lat5", std::make_shared<nn::ConvBnAct>(rng, c(1024), c(512), 1));
    td4 = register_module("td4", std::make_shared<nn::C3>(rng, 2 * c(512), c(512), d3, false));
    lat4 = register_module("lat4", std::make_shared<nn::ConvBnAct>(rng, c(512), c(256), 1));
    td3 = register_module("td3", std::make_shared<nn::C3>(rng, 2 * c(256), c(256), d3, false));
    lat3 = register_module("lat3", std::make_shared<nn::ConvBnAct>(rng, c(256), c(128), 1));
    td2 = register_module("td2", std::make_shared<nn::C3>(rng, 2 * c(128), c(128), d3, false));
    down3 = register_module("down3", std::make_shared<nn::ConvBnAct>(rng, c(128), c(128), 3, 2));
    bu3 = register_module("bu3", std::make_shared<nn::C3>(rng, 2 * c(128), c(256), d3, false));
    down4 = register_module("down4", std::make_shared<nn::ConvBnAct>(rng, c(256), c(256), 3, 2));
    bu4 = register_module("bu4", std::make_shared<nn::C3>(rng, 2 * c(256), c(512), d3, false));
    down5 = register_module("down5", std::make_shared<nn::ConvBnAct>(rng, c(512), c(512), 3, 2));
    bu5 = register_module("bu5", std::make_shared<nn::C3>(rng, 2 * c(512), c(1024), d3, false));
    detect = register_module(
        "detect", std::make_shared<Detect>(rng, cfg_,
                                           std::map<int, std::int64_t>{{2, c(128)}, {3, c(256)}, {4, c(512)}, {5, c(1024)}}));
}

PredictionSet Baseline::forward(const Var& images) {
    require(images.value().rank() == 4 && images.dim(2) == cfg_.input_size && images.dim(3) == cfg_.input_size,
            "forward: wrong input size");
    Pyramid b = backbone->forward(images);
    Var x10 = lat5->forward(b[5]);
    Var x14 = lat4->forward(td4->forward(ops::concat({upsample2(x10), b[4]})));
    Var x18 = lat3->forward(td3->forward(ops::concat({upsample2(x14), b[3]})));
    Var p2 = td2->forward(ops::concat({upsample2(x18), b[2]}));
    Var p3 = bu3->forward(ops::concat({down3->forward(p2), x18}));
    Var p4 = bu4->forward(ops::concat({down4->forward(p3), x14}));
    Var p5 = bu5->forward(ops::concat({down5->forward(p4), x10}));
    return detect->forward({{2, p2}, {3, p3}, {4, p4}, {5, p5}});
}

std::int64_t count_params(const nn::Module& m) { return m.parameter_count(); }

namespace {

template <class M>
double flops_of(M& m, int input_size) {
    const bool was_training = m.training();
    m.set_training(false);
    NoGradGuard ng;
    FlopCounter counter;
    m.forward(Var(Tensor::zeros({1, 3, input_size, input_size})));
    m.set_training(was_training);
    return 2.0 * counter.macs();
}

}  // namespace

double count_flops(Model& m, int input_size) { return flops_of(m, input_size); }
double count_flops(Baseline& m, int input_size) { return flops_of(m, input_size); }

std::vector<std::string> copy_state(const nn::Module& from, nn::Module& to) {
    std::map<std::string, Var> params;
    for (const auto& [name, v] : from.named_parameters()) params.emplace(name, v);
    std::map<std::string, Tensor*> buffers;
    for (const auto& [name, t] : from.named_buffers()) buffers.emplace(name, t);
    std::vector<std::string> missing;
    for (auto& [name, v] : to.named_parameters()) {
        auto it = params.find(name);
        if (it == params.end()) {
            missing.push_back(name);
            continue;
        }
        require(it->second.shape() == v.shape(), "copy_state: shape mismatch for " + name);
        Var dst = v;
        dst.mutable_value() = it->second.value();
    }
    for (auto& [name, t] : to.named_buffers()) {
        auto it = buffers.find(name);
        if (it == buffers.end()) {
            missing.push_back(name);
            continue;
        }
        require(it->second->shape() == t->shape(), "copy_state: shape mismatch for " + name);
        *t = *it->second;
    }
    return missing;
}

std::vector<std::vector<geometry::Detection>> decode(const PredictionSet& preds, const ModelConfig& cfg,
                                                     const DecodeOptions& opt) {
    require(!preds.levels.empty(), "decode: empty prediction set");
    const std::int64_t batch = preds.levels.begin()->second.dim(0);
    const double size = cfg.input_size;
    std::vector<std::vector<geometry::Detection>> out(static_cast<std::size_t>(batch));
    for (std::int64_t b = 0; b < batch; ++b) {
        std::vector<geometry::Detection> cand;
        for (const auto& [level, raw] : preds.levels) {
            const std::int64_t h = raw.dim(2), w = raw.dim(3);
            const double stride = level_stride(level);
            for (int a = 0; a < preds.anchors_per_cell; ++a) {
                const auto [aw, ah] = cfg.anchors.at(level)[static_cast<std::size_t>(a)];
                for (std::int64_t y = 0; y < h; ++y)
                    for (std::int64_t x = 0; x < w; ++x) {
                        const double obj = sigmoid(preds.at(level, b, a, 4, y, x));
                        if (obj <= opt.conf_threshold) continue;
                        int best = 0;
                        double best_score = -1.0;
                        for (int k = 0; k < preds.num_classes; ++k) {
                            const double s = sigmoid(preds.at(level, b, a, 5 + k, y, x));
                            if (s > best_score) {
                                best_score = s;
                                best = k;
                            }
                        }
                        const double conf = obj * best_score;
                        if (conf <= opt.conf_threshold) continue;
                        const double sx = sigmoid(preds.at(level, b, a, 0, y, x));
                        const double sy = sigmoid(preds.at(level, b, a, 1, y, x));
                        const double sw = sigmoid(preds.at(level, b, a, 2, y, x));
                        const double sh = sigmoid(preds.at(level, b, a, 3, y, x));
                        const double cx = (2.0 * sx - 0.5 + static_cast<double>(x)) * stride;
                        const double cy = (2.0 * sy - 0.5 + static_cast<double>(y)) * stride;
                        const double bw = 4.0 * sw * sw * aw, bh = 4.0 * sh * sh * ah;
                        geometry::Box box{cx / size, cy / size, bw / size, bh / size};
                        box = box.clipped();
                        if (!box.valid()) continue;
                        cand.push_back({box, best, conf});
                    }
            }
        }
        out[static_cast<std::size_t>(b)] =
            geometry::nms(std::move(cand), opt.iou_threshold, opt.conf_threshold, opt.max_det);
    }
    return out;
}

}  // namespace bpim::model
