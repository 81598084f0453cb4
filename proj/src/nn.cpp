#include "bpim/nn.hpp"

#include <algorithm>
#include <cmath>

namespace bpim::nn {

void Module::set_training(bool on) {
    training_ = on;
    for (auto& [name, child] : children_) child->set_training(on);
}

std::vector<std::pair<std::string, Var>> Module::named_parameters() const {
    std::vector<std::pair<std::string, Var>> out;
    collect("", out);
    return out;
}

std::vector<std::pair<std::string, Tensor*>> Module::named_buffers() const {
    std::vector<std::pair<std::string, Tensor*>> out;
    collect_buffers("", out);
    return out;
}

void Module::collect(const std::string& prefix, std::vector<std::pair<std::string, Var>>& out) const {
    for (const auto& [name, v] : params_) out.emplace_back(prefix + name, v);
    for (const auto& [name, child] : children_) child->collect(prefix + name + ".", out);
}

void Module::collect_buffers(const std::string& prefix, std::vector<std::pair<std::string, Tensor*>>& out) const {
    for (const auto& [name, t] : buffers_) out.emplace_back(prefix + name, t);
    for (const auto& [name, child] : children_) child->collect_buffers(prefix + name + ".", out);
}

std::int64_t Module::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& [name, v] : named_parameters()) n += v.value().numel();
    return n;
}

void Module::zero_grad() {
    for (auto& [name, v] : named_parameters()) v.zero_grad();
}

Var Module::register_parameter(const std::string& name, Tensor init) {
    Var v(std::move(init), true);
    params_.emplace_back(name, v);
    return v;
}

void Module::register_buffer(const std::string& name, Tensor* t) { buffers_.emplace_back(name, t); }

Conv2d::Conv2d(Rng& rng, std::int64_t in, std::int64_t out, int kernel, int stride, int padding, int groups,
               bool with_bias) {
    require(in > 0 && out > 0 && kernel > 0, "Conv2d: channel counts and kernel must be positive");
    require(in % groups == 0 && out % groups == 0, "Conv2d: channels not divisible by groups");
    options.stride = stride;
    options.padding = padding < 0 ? kernel / 2 : padding;
    options.groups = groups;
    const double bound = 1.0 / std::sqrt(static_cast<double>(in / groups * kernel * kernel));
    weight = register_parameter("weight", rng.uniform_tensor({out, in / groups, kernel, kernel}, -bound, bound));
    if (with_bias) bias = register_parameter("bias", rng.uniform_tensor({out}, -bound, bound));
}

Var Conv2d::forward(const Var& x) { return ops::conv2d(x, weight, bias, options); }

BatchNorm::BatchNorm(std::int64_t channels, double momentum_, double eps_) : momentum(momentum_), eps(eps_) {
    gamma = register_parameter("weight", Tensor::ones({channels}));
    beta = register_parameter("bias", Tensor::zeros({channels}));
    stats.mean = Tensor::zeros({channels});
    stats.var = Tensor::ones({channels});
    register_buffer("running_mean", &stats.mean);
    register_buffer("running_var", &stats.var);
}

Var BatchNorm::forward(const Var& x) {
    const bool batch_stats = training() && !(single_sample_uses_running && x.dim(0) == 1);
    return ops::batch_norm(x, gamma, beta, stats, batch_stats, momentum, eps);
}

ConvBnAct::ConvBnAct(Rng& rng, std::int64_t in, std::int64_t out, int kernel, int stride, int groups, bool act_)
    : act(act_) {
    conv = register_module("conv", std::make_shared<Conv2d>(rng, in, out, kernel, stride, -1, groups, false));
    bn = register_module("bn", std::make_shared<BatchNorm>(out));
}

Var ConvBnAct::forward(const Var& x) {
    Var y = bn->forward(conv->forward(x));
    return act ? ops::silu(y) : y;
}

int default_group_count(std::int64_t channels) {
    int g = static_cast<int>(std::min<std::int64_t>(16, channels));
    while (g > 1 && channels % g != 0) --g;
    return std::max(g, 1);
}

GroupNorm::GroupNorm(std::int64_t channels, int groups_, double eps_) : groups(groups_), eps(eps_) {
    require(groups >= 1 && channels % groups == 0, "GroupNorm: channels not divisible by groups");
    gamma = register_parameter("weight", Tensor::ones({channels}));
    beta = register_parameter("bias", Tensor::zeros({channels}));
}

Var GroupNorm::forward(const Var& x) { return ops::group_norm(x, groups, gamma, beta, eps); }

LayerNorm::LayerNorm(std::int64_t dim, double eps_) : eps(eps_) {
    gamma = register_parameter("weight", Tensor::ones({dim}));
    beta = register_parameter("bias", Tensor::zeros({dim}));
}

Var LayerNorm::forward(const Var& x) { return ops::layer_norm(x, gamma, beta, eps); }

Linear::Linear(Rng& rng, std::int64_t in, std::int64_t out, bool with_bias) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = register_parameter("weight", rng.uniform_tensor({out, in}, -bound, bound));
    if (with_bias) bias = register_parameter("bias", rng.uniform_tensor({out}, -bound, bound));
}

Var Linear::forward(const Var& x) { return ops::linear(x, weight, bias); }

Bottleneck::Bottleneck(Rng& rng, std::int64_t in, std::int64_t out, bool shortcut) : add_(shortcut && in == out) {
    cv1_ = register_module("cv1", std::make_shared<ConvBnAct>(rng, in, out, 1));
    cv2_ = register_module("cv2", std::make_shared<ConvBnAct>(rng, out, out, 3));
}

Var Bottleneck::forward(const Var& x) {
    Var y = cv2_->forward(cv1_->forward(x));
    return add_ ? ops::add(x, y) : y;
}

C3::C3(Rng& rng, std::int64_t in, std::int64_t out, int depth, bool shortcut) {
    const std::int64_t hidden = std::max<std::int64_t>(1, out / 2);
    cv1_ = register_module("cv1", std::make_shared<ConvBnAct>(rng, in, hidden, 1));
    cv2_ = register_module("cv2", std::make_shared<ConvBnAct>(rng, in, hidden, 1));
    cv3_ = register_module("cv3", std::make_shared<ConvBnAct>(rng, 2 * hidden, out, 1));
    for (int i = 0; i < depth; ++i)
        blocks_.push_back(register_module("m" + std::to_string(i), std::make_shared<Bottleneck>(rng, hidden, hidden, shortcut)));
}

Var C3::forward(const Var& x) {
    Var a = cv1_->forward(x);
    for (auto& b : blocks_) a = b->forward(a);
    return cv3_->forward(ops::concat({a, cv2_->forward(x)}));
}

SPPF::SPPF(Rng& rng, std::int64_t in, std::int64_t out) {
    const std::int64_t hidden = std::max<std::int64_t>(1, in / 2);
    cv1_ = register_module("cv1", std::make_shared<ConvBnAct>(rng, in, hidden, 1));
    cv2_ = register_module("cv2", std::make_shared<ConvBnAct>(rng, hidden * 4, out, 1));
}

Var SPPF::forward(const Var& x) {
    Var a = cv1_->forward(x);
    Var y1 = ops::max_pool2d(a, 5, 1, 2);
    Var y2 = ops::max_pool2d(y1, 5, 1, 2);
    Var y3 = ops::max_pool2d(y2, 5, 1, 2);
    return cv2_->forward(ops::concat({a, y1, y2, y3}));
}

GSConv::GSConv(Rng& rng, std::int64_t in, std::int64_t out, int kernel) {
    require(out % 2 == 0, "GSConv: output channels must be even");
    const std::int64_t half = out / 2;
    dense_ = register_module("cv1", std::make_shared<ConvBnAct>(rng, in, half, kernel));
    depthwise_ = register_module("cv2", std::make_shared<ConvBnAct>(rng, half, half, 5, 1, static_cast<int>(half)));
}

Var GSConv::forward(const Var& x) {
    Var a = dense_->forward(x);
    return ops::channel_shuffle(ops::concat({a, depthwise_->forward(a)}));
}

std::shared_ptr<Unary> make_gsconv(Rng& rng, GSConvKind kind, std::int64_t in, std::int64_t out, int kernel) {
    if (kind == GSConvKind::gsconv && out % 2 == 0) return std::make_shared<GSConv>(rng, in, out, kernel);
    return std::make_shared<ConvBnAct>(rng, in, out, kernel);
}

}  // namespace bpim::nn
