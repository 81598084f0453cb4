#include <doctest.h>

#include <cmath>

#include "bpim/boundary.hpp"
#include "support.hpp"

using namespace bpim;
using boundary::Direction;

namespace {

// out[.., i, j] = max of x over the scanned half-line ending at (i, j), by brute force.
Tensor scan_oracle(const Tensor& x, Direction d) {
    const std::int64_t h = x.dim(-2), w = x.dim(-1), planes = x.numel() / (h * w);
    Tensor out(x.shape());
    for (std::int64_t p = 0; p < planes; ++p)
        for (std::int64_t i = 0; i < h; ++i)
            for (std::int64_t j = 0; j < w; ++j) {
                double m = -INFINITY;
                for (std::int64_t i2 = 0; i2 < h; ++i2)
                    for (std::int64_t j2 = 0; j2 < w; ++j2) {
                        bool in = false;
                        switch (d) {
                            case Direction::left: in = i2 == i && j2 <= j; break;
                            case Direction::right: in = i2 == i && j2 >= j; break;
                            case Direction::top: in = j2 == j && i2 <= i; break;
                            case Direction::bottom: in = j2 == j && i2 >= i; break;
                        }
                        if (in) m = std::max(m, x[(p * h + i2) * w + j2]);
                    }
                out[(p * h + i) * w + j] = m;
            }
    return out;
}

Tensor flip(const Tensor& x, bool horizontal) {
    const std::int64_t h = x.dim(-2), w = x.dim(-1), planes = x.numel() / (h * w);
    Tensor out(x.shape());
    for (std::int64_t p = 0; p < planes; ++p)
        for (std::int64_t i = 0; i < h; ++i)
            for (std::int64_t j = 0; j < w; ++j)
                out[(p * h + i) * w + j] = horizontal ? x[(p * h + i) * w + (w - 1 - j)] : x[(p * h + (h - 1 - i)) * w + j];
    return out;
}

// Straight-line reference pieces for the BIG composition.
Tensor conv1x1(const Tensor& x, const Tensor& w, const Tensor& b) {
    const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3), o = w.dim(0);
    Tensor out({n, o, x.dim(2), x.dim(3)});
    for (std::int64_t s = 0; s < n; ++s)
        for (std::int64_t oc = 0; oc < o; ++oc)
            for (std::int64_t p = 0; p < hw; ++p) {
                double acc = b.empty() ? 0.0 : b[oc];
                for (std::int64_t ic = 0; ic < c; ++ic) acc += w[oc * c + ic] * x[(s * c + ic) * hw + p];
                out[(s * o + oc) * hw + p] = acc;
            }
    return out;
}

Tensor silu(Tensor x) {
    for (auto& v : x.storage()) v = v / (1.0 + std::exp(-v));
    return x;
}

Tensor cat(const Tensor& a, const Tensor& b) {
    const std::int64_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
    Tensor out({n, ca + cb, a.dim(2), a.dim(3)});
    for (std::int64_t s = 0; s < n; ++s) {
        std::copy_n(a.ptr() + s * ca * hw, ca * hw, out.ptr() + s * (ca + cb) * hw);
        std::copy_n(b.ptr() + s * cb * hw, cb * hw, out.ptr() + (s * (ca + cb) + ca) * hw);
    }
    return out;
}

// Conv -> BN with fresh running statistics (mean 0, var 1) -> SiLU.
Tensor conv_bn_act_eval(const Tensor& x, nn::ConvBnAct& m) {
    Tensor y = conv1x1(x, m.conv->weight.value(), m.conv->bias.defined() ? m.conv->bias.value() : Tensor());
    const std::int64_t c = y.dim(1), hw = y.dim(2) * y.dim(3);
    for (std::int64_t s = 0; s < y.dim(0); ++s)
        for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t p = 0; p < hw; ++p) {
                double& v = y[(s * c + ch) * hw + p];
                v = v / std::sqrt(1.0 + m.bn->eps) * m.bn->gamma.value()[ch] + m.bn->beta.value()[ch];
            }
    return silu(y);
}

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, double eps) {
    const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3), cg = c / groups;
    Tensor out(x.shape());
    for (std::int64_t s = 0; s < n; ++s)
        for (int g = 0; g < groups; ++g) {
            double mean = 0.0, var = 0.0;
            for (std::int64_t k = 0; k < cg * hw; ++k) mean += x[(s * c + g * cg) * hw + k];
            mean /= static_cast<double>(cg * hw);
            for (std::int64_t k = 0; k < cg * hw; ++k) var += std::pow(x[(s * c + g * cg) * hw + k] - mean, 2);
            var /= static_cast<double>(cg * hw);
            for (std::int64_t ch = g * cg; ch < (g + 1) * cg; ++ch)
                for (std::int64_t p = 0; p < hw; ++p) {
                    const std::int64_t i = (s * c + ch) * hw + p;
                    out[i] = (x[i] - mean) / std::sqrt(var + eps) * gamma[ch] + beta[ch];
                }
        }
    return out;
}

}  // namespace

TEST_CASE("directional boundary: single row examples") {
    const Tensor row({1, 1, 3}, {1, 3, 2});
    CHECK(boundary::directional_boundary(row, Direction::right) == Tensor({1, 1, 3}, {3, 3, 2}));
    CHECK(boundary::directional_boundary(row, Direction::left) == Tensor({1, 1, 3}, {1, 3, 3}));
    CHECK(boundary::directional_boundary(row, Direction::top) == row);
    CHECK(boundary::directional_boundary(row, Direction::bottom) == row);
}

TEST_CASE("directional boundary: constant map stays constant") {
    const Tensor c({2, 5, 4}, 0.75);
    for (Direction d : boundary::kDirections) CHECK(boundary::directional_boundary(c, d) == c);
}

TEST_CASE("boundary: four maps in left, right, top, bottom order") {
    const Var x(Tensor({1, 1, 1, 3}, {1, 3, 2}));
    const Tensor out = boundary::boundary(x).value();
    CHECK(out == Tensor({1, 4, 1, 3}, {1, 3, 3, 3, 3, 2, 1, 3, 2, 1, 3, 2}));
    CHECK(boundary::boundary(Var(Tensor({1, 2, 3, 3}))).value() == Tensor({1, 8, 3, 3}));
}

TEST_CASE("boundary: random input matches four scan oracles channel by channel") {
    Rng rng(8);
    const Tensor x = rng.uniform_tensor({1, 2, 8, 8}, -1, 1);
    const Tensor out = boundary::boundary(Var(x)).value();
    for (std::size_t k = 0; k < boundary::kDirections.size(); ++k) {
        const Tensor want = scan_oracle(x, boundary::kDirections[k]);
        for (std::int64_t i = 0; i < want.numel(); ++i) CHECK(out[static_cast<std::int64_t>(k) * want.numel() + i] == want[i]);
    }
}

TEST_CASE("directional boundary: idempotent, dominant and flip-equivariant") {
    Rng rng(9);
    for (int t = 0; t < 20; ++t) {
        const Tensor x = rng.uniform_tensor({3, rng.randint(1, 9), rng.randint(1, 9)}, -2, 2);
        for (Direction d : boundary::kDirections) {
            const Tensor y = boundary::directional_boundary(x, d);
            CHECK(boundary::directional_boundary(y, d) == y);
            for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y[i] >= x[i]);
        }
        CHECK(flip(boundary::directional_boundary(flip(x, true), Direction::left), true) ==
              boundary::directional_boundary(x, Direction::right));
        CHECK(flip(boundary::directional_boundary(flip(x, false), Direction::top), false) ==
              boundary::directional_boundary(x, Direction::bottom));
    }
}

TEST_CASE("directional boundary: gradient routes to the argmax source") {
    Rng rng(10);
    const Tensor r = rng.uniform_tensor({1, 2, 5, 6}, -1, 1);
    for (Direction d : boundary::kDirections) {
        Var x(rng.uniform_tensor({1, 2, 5, 6}, -1, 1), true);  // continuous values: no ties
        const double worst = testing::check_gradients({x}, [&](const std::vector<Var>& in) {
            return testing::probe(boundary::directional_boundary(in[0], d), r);
        });
        CHECK(worst <= 1e-6);
        // The gradient of a single output is a one-hot indicator.
        Var y = boundary::directional_boundary(x, d);
        Tensor pick({1, 2, 5, 6});
        pick[37] = 1.0;
        x.zero_grad();
        backward(testing::probe(y, pick));
        int ones = 0;
        for (double g : x.grad().data()) {
            CHECK((g == 0.0 || g == 1.0));
            ones += g == 1.0;
        }
        CHECK(ones == 1);
    }
}

TEST_CASE("BG: zero reducer leaves the global branch") {
    Rng rng(1);
    boundary::BoundaryGlobal bg(rng, 4, 6);
    bg.set_training(false);
    bg.reducer->weight.mutable_value().fill(0.0);
    bg.reducer->bias.mutable_value().fill(0.0);
    const Var x(rng.uniform_tensor({2, 4, 8, 8}, -1, 1));
    CHECK(bg.forward(x).value() == bg.global->forward(x).value());
    CHECK(bg.forward(x).shape() == Shape{2, 6, 8, 8});
}

TEST_CASE("BG: identity global plus the right-scan slice") {
    Rng rng(2);
    const std::int64_t c = 3;
    boundary::BoundaryGlobal bg(rng, std::make_shared<nn::Identity>(), c, c);
    Tensor& w = bg.reducer->weight.mutable_value();
    w.fill(0.0);
    for (std::int64_t o = 0; o < c; ++o) w[o * 4 * c + (c + o)] = 1.0;  // channel block 1 is the right scan
    bg.reducer->bias.mutable_value().fill(0.0);
    const Tensor x = rng.uniform_tensor({1, c, 6, 7}, -1, 1);
    const Tensor want = scan_oracle(x, Direction::right);
    const Tensor got = bg.forward(Var(x)).value();
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(got[i] == doctest::Approx(x[i] + want[i]).epsilon(1e-15));
}

TEST_CASE("BIG: zero fuse branch reduces to BG") {
    Rng rng(3);
    boundary::BoundaryGuidance big(rng, 8, 4);
    big.set_training(false);
    big.fuse->weight.mutable_value().fill(0.0);
    big.fuse->bias.mutable_value().fill(0.0);
    const Var n(rng.uniform_tensor({2, 4, 8, 8}, -1, 1)), b(rng.uniform_tensor({2, 8, 8, 8}, -1, 1));
    CHECK(big.forward(n, b).value() == big.bg->forward(b).value());
}

TEST_CASE("BIG: output keeps the neck shape; level mismatch is rejected") {
    Rng rng(4);
    boundary::BoundaryGuidance big(rng, 16, 8);
    for (int s : {4, 8, 16}) {
        const Var n(rng.uniform_tensor({1, 8, s, s}, -1, 1)), b(rng.uniform_tensor({1, 16, s, s}, -1, 1));
        CHECK(big.forward(n, b).shape() == n.shape());
    }
    CHECK_THROWS_AS(big.forward(Var(Tensor({1, 8, 4, 4})), Var(Tensor({1, 16, 8, 8}))), ContractError);
}

TEST_CASE("BIG: fixed-seed 4-channel 8x8 instance matches a straight-line reference") {
    Rng rng(5);
    boundary::BoundaryGuidance big(rng, 4, 4, nn::GSConvKind::plain);
    big.set_training(false);
    // Give the affine parameters non-trivial values so every step matters.
    for (auto& [name, p] : big.named_parameters())
        if (p.value().rank() == 1) p.mutable_value() = rng.uniform_tensor(p.shape(), -0.5, 1.5);
    const Tensor n = rng.uniform_tensor({1, 4, 8, 8}, -1, 1), b = rng.uniform_tensor({1, 4, 8, 8}, -1, 1);

    auto& global = dynamic_cast<nn::ConvBnAct&>(*big.bg->global);
    auto& proj = dynamic_cast<nn::ConvBnAct&>(*big.neck_proj);
    Tensor maps = scan_oracle(b, Direction::left);
    for (Direction d : {Direction::right, Direction::top, Direction::bottom}) maps = cat(maps, scan_oracle(b, d));
    Tensor bg = conv_bn_act_eval(b, global);
    bg += conv1x1(maps, big.bg->reducer->weight.value(), big.bg->reducer->bias.value());
    const Tensor fused = conv1x1(cat(bg, conv_bn_act_eval(n, proj)), big.fuse->weight.value(), big.fuse->bias.value());
    Tensor want = silu(group_norm(fused, big.norm->groups, big.norm->gamma.value(), big.norm->beta.value(), big.norm->eps));
    want += bg;

    const Tensor got = big.forward(Var(n), Var(b)).value();
    REQUIRE(got.same_shape(want));
    for (std::int64_t i = 0; i < got.numel(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("BIG: gradients match central differences") {
    Rng rng(6);
    boundary::BoundaryGuidance big(rng, 4, 4);
    big.set_training(false);
    const Tensor r = rng.uniform_tensor({1, 4, 6, 6}, -1, 1);
    Var n(rng.uniform_tensor({1, 4, 6, 6}, -1, 1), true), b(rng.uniform_tensor({1, 4, 6, 6}, -1, 1), true);
    std::vector<Var> inputs{n, b};
    for (auto& [name, p] : big.named_parameters()) inputs.push_back(p);
    const double worst = testing::check_gradients(inputs, [&](const std::vector<Var>& in) {
        return testing::probe(big.forward(in[0], in[1]), r);
    });
    CHECK(worst <= 1e-5);
}
