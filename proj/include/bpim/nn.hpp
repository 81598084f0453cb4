#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "bpim/ops.hpp"

namespace bpim::nn {

/// Parameter container with named children, in the style of torch::nn::Module.
///
/// Parameters and buffers are registered in construction order; that order
/// fixes both the initialisation sequence and the checkpoint layout.
class Module {
public:
    Module() = default;
    virtual ~Module() = default;
    Module(const Module&) = delete;
    Module& operator=(const Module&) = delete;

    void set_training(bool on);
    bool training() const { return training_; }

    std::vector<std::pair<std::string, Var>> named_parameters() const;
    std::vector<std::pair<std::string, Tensor*>> named_buffers() const;
    std::int64_t parameter_count() const;
    void zero_grad();

protected:
    Var register_parameter(const std::string& name, Tensor init);
    void register_buffer(const std::string& name, Tensor* t);
    template <class M>
    std::shared_ptr<M> register_module(const std::string& name, std::shared_ptr<M> m) {
        children_.emplace_back(name, m);
        return m;
    }

private:
    void collect(const std::string& prefix, std::vector<std::pair<std::string, Var>>& out) const;
    void collect_buffers(const std::string& prefix, std::vector<std::pair<std::string, Tensor*>>& out) const;

    bool training_ = true;
    std::vector<std::pair<std::string, Var>> params_;
    std::vector<std::pair<std::string, Tensor*>> buffers_;
    std::vector<std::pair<std::string, std::shared_ptr<Module>>> children_;
};

/// A block with one input and one output.
class Unary : public Module {
public:
    virtual Var forward(const Var& x) = 0;
};

class Identity : public Unary {
public:
    Var forward(const Var& x) override { return x; }
};

/// Plain convolution with optional bias; uniform(+-1/sqrt(fan_in)) init.
class Conv2d : public Unary {
public:
    Conv2d(Rng& rng, std::int64_t in, std::int64_t out, int kernel, int stride = 1, int padding = -1, int groups = 1,
           bool bias = true);
    Var forward(const Var& x) override;

    Var weight;
    Var bias;
    ops::Conv2dOptions options;
};

class BatchNorm : public Unary {
public:
    explicit BatchNorm(std::int64_t channels, double momentum = 0.03, double eps = 1e-3);
    Var forward(const Var& x) override;

    Var gamma;
    Var beta;
    ops::RunningStats stats;
    double momentum;
    double eps;
    /// Normalise with running statistics when a training batch has one sample.
    bool single_sample_uses_running = false;
};

/// Conv -> BatchNorm -> SiLU, the standard detector building block.
class ConvBnAct : public Unary {
public:
    ConvBnAct(Rng& rng, std::int64_t in, std::int64_t out, int kernel = 1, int stride = 1, int groups = 1,
              bool act = true);
    Var forward(const Var& x) override;

    std::shared_ptr<Conv2d> conv;
    std::shared_ptr<BatchNorm> bn;
    bool act;
};

/// Group count used throughout: 16, clamped to <= channels and dividing them.
int default_group_count(std::int64_t channels);

class GroupNorm : public Unary {
public:
    GroupNorm(std::int64_t channels, int groups, double eps = 1e-5);
    Var forward(const Var& x) override;

    Var gamma;
    Var beta;
    int groups;
    double eps;
};

class LayerNorm : public Unary {
public:
    explicit LayerNorm(std::int64_t dim, double eps = 1e-5);
    Var forward(const Var& x) override;

    Var gamma;
    Var beta;
    double eps;
};

class Linear : public Unary {
public:
    Linear(Rng& rng, std::int64_t in, std::int64_t out, bool bias = true);
    Var forward(const Var& x) override;

    Var weight;
    Var bias;
};

class Bottleneck : public Unary {
public:
    Bottleneck(Rng& rng, std::int64_t in, std::int64_t out, bool shortcut);
    Var forward(const Var& x) override;

private:
    std::shared_ptr<ConvBnAct> cv1_, cv2_;
    bool add_;
};

/// CSP bottleneck with three convolutions.
class C3 : public Unary {
public:
    C3(Rng& rng, std::int64_t in, std::int64_t out, int depth, bool shortcut = true);
    Var forward(const Var& x) override;

private:
    std::shared_ptr<ConvBnAct> cv1_, cv2_, cv3_;
    std::vector<std::shared_ptr<Bottleneck>> blocks_;
};

/// Spatial pyramid pooling, fast variant (three chained 5x5 max pools).
class SPPF : public Unary {
public:
    SPPF(Rng& rng, std::int64_t in, std::int64_t out);
    Var forward(const Var& x) override;

private:
    std::shared_ptr<ConvBnAct> cv1_, cv2_;
};

/// Lightweight stand-in for GSConv: half the output channels from a dense
/// conv, half from a 5x5 depthwise conv on those, then a channel shuffle.
class GSConv : public Unary {
public:
    GSConv(Rng& rng, std::int64_t in, std::int64_t out, int kernel = 1);
    Var forward(const Var& x) override;

private:
    std::shared_ptr<ConvBnAct> dense_, depthwise_;
};

enum class GSConvKind { gsconv, plain };

/// GSConv or, for `plain`, a ConvBnAct with the same kernel.
std::shared_ptr<Unary> make_gsconv(Rng& rng, GSConvKind kind, std::int64_t in, std::int64_t out, int kernel = 1);

}  // namespace bpim::nn
