#include <doctest.h>

#include <cmath>
#include <functional>

#include "bpim/nn.hpp"
#include "support.hpp"

using namespace bpim;

namespace {

Tensor conv2d_direct(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad, int groups) {
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3), o = w.dim(0), k = w.dim(2);
    const std::int64_t oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
    const std::int64_t cg = c / groups, og = o / groups;
    Tensor out({n, o, oh, ow});
    for (std::int64_t s = 0; s < n; ++s)
        for (std::int64_t oc = 0; oc < o; ++oc)
            for (std::int64_t y = 0; y < oh; ++y)
                for (std::int64_t xx = 0; xx < ow; ++xx) {
                    double acc = b.empty() ? 0.0 : b[oc];
                    const std::int64_t g = oc / og;
                    for (std::int64_t ic = 0; ic < cg; ++ic)
                        for (std::int64_t ky = 0; ky < k; ++ky)
                            for (std::int64_t kx = 0; kx < k; ++kx) {
                                const std::int64_t iy = y * stride + ky - pad, ix = xx * stride + kx - pad;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                                acc += w[((oc * cg + ic) * k + ky) * k + kx] * x[((s * c + g * cg + ic) * h + iy) * wd + ix];
                            }
                    out[((s * o + oc) * oh + y) * ow + xx] = acc;
                }
    return out;
}

void check_close(const Tensor& a, const Tensor& b, double tol) {
    REQUIRE(a.shape() == b.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a[i] - b[i]) <= tol);
}

}  // namespace

TEST_CASE("conv2d matches direct summation across strides, padding and groups") {
    Rng rng(1);
    struct Case {
        int c, o, k, stride, pad, groups;
    };
    for (const Case& cs : {Case{3, 4, 3, 1, 1, 1}, Case{4, 6, 3, 2, 1, 2}, Case{4, 4, 5, 1, 2, 4}, Case{2, 3, 1, 1, 0, 1},
                           Case{6, 2, 1, 2, 0, 2}}) {
        const Tensor x = rng.uniform_tensor({2, cs.c, 7, 6}, -1, 1);
        const Tensor w = rng.uniform_tensor({cs.o, cs.c / cs.groups, cs.k, cs.k}, -1, 1);
        const Tensor b = rng.uniform_tensor({cs.o}, -1, 1);
        const Tensor got = ops::conv2d(Var(x), Var(w), Var(b), {cs.stride, cs.pad, cs.groups}).value();
        check_close(got, conv2d_direct(x, w, b, cs.stride, cs.pad, cs.groups), 1e-12);
    }
}

TEST_CASE("op gradients match central differences") {
    Rng rng(2);
    using Fn = std::function<Var(const std::vector<Var>&)>;
    struct Case {
        const char* name;
        std::vector<Shape> shapes;
        Fn f;
    };
    const Tensor r4 = rng.uniform_tensor({2, 3, 4, 4}, -1, 1);
    Rng prng(0);  // reseeded per evaluation so every call sees the same probe weights
    auto probe = [&](const Var& v) { return testing::probe(v, prng.uniform_tensor(v.shape(), -1, 1)); };
    ops::RunningStats stats{Tensor({3}), Tensor({3}, 1.0)};
    const std::vector<Case> cases{
        {"conv2d", {{2, 4, 5, 5}, {6, 2, 3, 3}, {6}},
         [&](const std::vector<Var>& in) { return probe(ops::conv2d(in[0], in[1], in[2], {2, 1, 2})); }},
        {"conv3d", {{1, 2, 3, 3, 4}, {2, 2, 3, 3, 3}, {2}},
         [&](const std::vector<Var>& in) { return probe(ops::conv3d(in[0], in[1], in[2], 1, 1, 1)); }},
        {"batch_norm", {{2, 3, 4, 4}, {3}, {3}},
         [&](const std::vector<Var>& in) {
             ops::RunningStats s = stats;
             return testing::probe(ops::batch_norm(in[0], in[1], in[2], s, true, 0.03, 1e-3), r4);
         }},
        {"group_norm", {{2, 4, 3, 3}, {4}, {4}},
         [&](const std::vector<Var>& in) { return probe(ops::group_norm(in[0], 2, in[1], in[2], 1e-5)); }},
        {"layer_norm", {{2, 5, 6}, {6}, {6}},
         [&](const std::vector<Var>& in) { return probe(ops::layer_norm(in[0], in[1], in[2], 1e-5)); }},
        {"pools", {{1, 2, 6, 6}},
         [&](const std::vector<Var>& in) {
             return ops::add(probe(ops::max_pool2d(in[0], 5, 1, 2)), probe(ops::avg_pool2d(in[0], 2, 2)));
         }},
        {"resample", {{1, 2, 3, 3}},
         [&](const std::vector<Var>& in) {
             return ops::add(probe(ops::upsample_nearest(in[0], 2)), probe(ops::resize_nearest(in[0], 7, 5)));
         }},
        {"depth", {{1, 2, 3, 3}, {1, 2, 3, 3}},
         [&](const std::vector<Var>& in) { return probe(ops::max_over_depth(ops::stack_depth({in[0], in[1]}))); }},
        {"pointwise", {{2, 3, 2, 2}, {2, 3, 2, 2}},
         [&](const std::vector<Var>& in) {
             Var y = ops::mul(ops::silu(in[0]), ops::sigmoid(in[1]));
             y = ops::add(y, ops::div(ops::gelu(in[0]), ops::add(ops::exp(in[1]), ops::abs(in[0]))));
             return probe(ops::clamp_min(ops::sub(y, ops::scale(in[1], 0.5)), -0.3));
         }},
        {"attention algebra", {{2, 4, 6}, {6, 6}, {6}},
         [&](const std::vector<Var>& in) {
             Var q = ops::split_heads(ops::linear(in[0], in[1], in[2]), 2);
             Var a = ops::softmax_last(ops::matmul(q, ops::transpose_last2(q)));
             return probe(ops::merge_heads(ops::matmul(a, q), 2));
         }},
        {"layout", {{1, 4, 2, 3}, {1, 1, 2, 3}},
         [&](const std::vector<Var>& in) {
             Var t = ops::unflatten_tokens(ops::flatten_tokens(in[0]), 2, 3);
             Var s = ops::channel_shuffle(ops::concat({t, in[0]}));
             return probe(ops::reshape(ops::mul_channel_broadcast(s, in[1]), {1, 48}));
         }},
    };
    for (const auto& c : cases) {
        CAPTURE(c.name);
        std::vector<Var> inputs;
        for (const auto& s : c.shapes) inputs.push_back(Var(rng.uniform_tensor(s, -1, 1), true));
        if (c.shapes.size() == 3 && c.shapes[1].size() == 1) inputs[1].mutable_value() = rng.uniform_tensor(c.shapes[1], 0.5, 1.5);
        const double worst = testing::check_gradients(inputs, [&](const std::vector<Var>& in) {
            prng = Rng(99);
            return c.f(in);
        });
        CHECK(worst <= 1e-5);
    }
}

TEST_CASE("channel shuffle takes even channels first") {
    Tensor x({1, 4, 1, 1}, {0, 1, 2, 3});
    CHECK(ops::channel_shuffle(Var(x)).value() == Tensor({1, 4, 1, 1}, {0, 2, 1, 3}));
}

TEST_CASE("batch norm: batch statistics in training, running statistics in evaluation") {
    Rng rng(3);
    nn::BatchNorm bn(2);
    const Var x(rng.uniform_tensor({4, 2, 3, 3}, -1, 1));
    const Tensor y = bn.forward(x).value();
    for (std::int64_t c = 0; c < 2; ++c) {
        double mean = 0.0;
        for (std::int64_t b = 0; b < 4; ++b)
            for (std::int64_t i = 0; i < 9; ++i) mean += y[(b * 2 + c) * 9 + i];
        CHECK(std::abs(mean / 36.0) <= 1e-12);
    }
    CHECK(bn.stats.mean[0] != 0.0);  // moved by momentum
    bn.set_training(false);
    const Tensor e = bn.forward(x).value();
    const double want = (x.value()[0] - bn.stats.mean[0]) / std::sqrt(bn.stats.var[0] + bn.eps);
    CHECK(e[0] == doctest::Approx(want).epsilon(1e-14));
}
