#pragma once

#include <array>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "bpim/attention.hpp"
#include "bpim/boundary.hpp"
#include "bpim/cross_scale.hpp"
#include "bpim/fusion.hpp"
#include "bpim/geometry.hpp"
#include "bpim/nn.hpp"
#include "bpim/pyramid.hpp"

namespace bpim::model {

/// Module toggles; every subset is a valid graph.
struct ModuleFlags {
    bool big = false;
    bool awf = false;
    bool pig = false;
    bool csf_tff = false;

    bool any() const { return big || awf || pig || csf_tff; }
    bool all() const { return big && awf && pig && csf_tff; }
    /// "baseline" or the enabled names joined with '+', e.g. "big+awf".
    std::string label() const;
    bool operator==(const ModuleFlags&) const = default;

    /// The 16 subsets in bit order (big = bit 0 ... csf_tff = bit 3).
    static std::vector<ModuleFlags> all_subsets();
};

using AnchorSet = std::array<std::pair<double, double>, 3>;  // (w, h) in pixels

struct ModelConfig {
    double width_multiple = 0.25;
    double depth_multiple = 0.33;
    int num_classes = 2;
    ModuleFlags enable;
    int heads = 8;
    std::int64_t ff_dim = 1024;
    std::map<int, AnchorSet> anchors = default_anchors();
    int input_size = 640;
    nn::GSConvKind gsconv = nn::GSConvKind::gsconv;
    bool positional_embedding = false;

    /// Throws ConfigError.
    void validate() const;

    /// Stride-scaled defaults: stride * {(1.25, 1.625), (2, 3.75), (4.125, 2.875)}.
    static std::map<int, AnchorSet> default_anchors();

    /// Width of a nominal channel count after the multiplier (rounded up to 8).
    std::int64_t channels(std::int64_t nominal) const;
    /// Repeat count of a nominal C3 depth after the multiplier (at least 1).
    int depth(int nominal) const;

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

/// Raw head outputs, one [N, A * (5 + classes), H_i, W_i] tensor per level.
struct PredictionSet {
    std::map<int, Var> levels;
    int num_classes = 0;
    int anchors_per_cell = 3;

    int attributes() const { return 5 + num_classes; }
    /// Raw value of attribute `attr` for anchor `a` at cell (y, x) of image b.
    double at(int level, std::int64_t b, int a, int attr, std::int64_t y, std::int64_t x) const;
};

/// CSP-style backbone with taps B2..B5 at strides 4/8/16/32.
class Backbone : public nn::Module {
public:
    Backbone(Rng& rng, const ModelConfig& cfg);

    Pyramid forward(const Var& images);
    std::map<int, std::int64_t> channels() const { return channels_; }

    std::shared_ptr<nn::ConvBnAct> stem, down2, down3, down4, down5;
    std::shared_ptr<nn::C3> stage2, stage3, stage4, stage5;
    std::shared_ptr<nn::SPPF> sppf;

private:
    std::map<int, std::int64_t> channels_;
};

/// Anchor-based 1x1 heads, one per level.
class Detect : public nn::Module {
public:
    Detect(Rng& rng, const ModelConfig& cfg, const std::map<int, std::int64_t>& in_channels);

    PredictionSet forward(const Pyramid& p);

    std::map<int, std::shared_ptr<nn::Conv2d>> heads;
    int num_classes;
};

/// Widths of the neck tensors for a config.
struct NeckWidths {
    std::map<int, std::int64_t> tap;  // B_i
    std::map<int, std::int64_t> n;    // N_i
    std::map<int, std::int64_t> p;    // P_i after the bottom-up merge
};

/// Intermediate tensors of the most recent forward.
struct Trace {
    Pyramid taps;
    Pyramid n;  // after BIG when enabled
    std::map<int, Var> pig;
    Var csf;
    Pyramid p;    // bottom-up outputs
    Pyramid out;  // after AWF when enabled
};

/// The detector. With every flag off the graph and the parameter names equal
/// Baseline's; each flag splices its module into that graph.
class Model : public nn::Module {
public:
    Model(const ModelConfig& cfg, std::uint64_t seed);

    PredictionSet forward(const Var& images);
    const ModelConfig& config() const { return cfg_; }
    const NeckWidths& widths() const { return widths_; }
    const Trace& last_trace() const { return trace_; }

    std::shared_ptr<Backbone> backbone;
    std::shared_ptr<nn::ConvBnAct> lat5, lat4, lat3;
    std::shared_ptr<nn::C3> td4, td3, td2;
    std::map<int, std::shared_ptr<boundary::BoundaryGuidance>> big;
    std::shared_ptr<attention::PositionGuidance> pig;
    std::shared_ptr<cross_scale::CSFBlock> csf;
    std::map<int, std::shared_ptr<cross_scale::TFF>> tff;
    std::map<int, std::shared_ptr<nn::ConvBnAct>> down;
    std::map<int, std::shared_ptr<nn::C3>> bottom_up;
    std::shared_ptr<fusion::AdaptiveFusion> awf;
    std::shared_ptr<Detect> detect;

private:
    ModelConfig cfg_;
    NeckWidths widths_;
    Trace trace_;
};

/// Plain YOLOv5-P2 style detector: backbone, PANet neck and four heads.
class Baseline : public nn::Module {
public:
    Baseline(const ModelConfig& cfg, std::uint64_t seed);

    PredictionSet forward(const Var& images);

    std::shared_ptr<Backbone> backbone;
    std::shared_ptr<nn::ConvBnAct> lat5, lat4, lat3, down3, down4, down5;
    std::shared_ptr<nn::C3> td4, td3, td2, bu3, bu4, bu5;
    std::shared_ptr<Detect> detect;

private:
    ModelConfig cfg_;
};

NeckWidths neck_widths(const ModelConfig& cfg);

std::int64_t count_params(const nn::Module& m);
/// Forward FLOPs (2 x multiply-accumulates) for one image at input_size.
double count_flops(Model& m, int input_size);
double count_flops(Baseline& m, int input_size);

/// Copies every parameter and buffer of `from` into the same-named entry of
/// `to`. Names missing from `from` are returned; shape mismatches throw.
std::vector<std::string> copy_state(const nn::Module& from, nn::Module& to);

struct DecodeOptions {
    double conf_threshold = 0.25;
    double iou_threshold = 0.45;
    int max_det = 300;
};

/// Decodes raw head outputs into per-image detections (normalised boxes)
/// followed by class-wise NMS.
std::vector<std::vector<geometry::Detection>> decode(const PredictionSet& preds, const ModelConfig& cfg,
                                                     const DecodeOptions& opt = {});

}  // namespace bpim::model
