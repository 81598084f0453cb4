#include <doctest.h>

#include <cmath>

#include "bpim/fusion.hpp"
#include "support.hpp"

using namespace bpim;

namespace {

std::map<int, std::int64_t> widths(std::int64_t c2, std::int64_t c3, std::int64_t c4, std::int64_t c5) {
    return {{2, c2}, {3, c3}, {4, c4}, {5, c5}};
}

Pyramid random_pyramid(Rng& rng, const std::map<int, std::int64_t>& ch, std::int64_t n, std::int64_t s2) {
    Pyramid p;
    for (const auto& [level, c] : ch) {
        const std::int64_t s = s2 >> (level - 2);
        p[level] = Var(rng.uniform_tensor({n, c, s, s}, -1, 1));
    }
    return p;
}

// Sets a branch to a constant numerator: |w * exp(lambda) + b| with w = 0.
void constant_numerator(fusion::WeightBranch& br, double value) {
    br.rescale->weight.mutable_value().fill(0.0);
    br.rescale->bias.mutable_value().fill(value);
}

}  // namespace

TEST_CASE("fusion weights: identical inputs through identical layers give 1/2") {
    Rng rng(1);
    fusion::FusionWeightsLayer layer(rng, {3, 3});
    layer.branches[1]->to_logit->weight.mutable_value() = layer.branches[0]->to_logit->weight.value();
    layer.branches[1]->to_logit->bias.mutable_value() = layer.branches[0]->to_logit->bias.value();
    const Var x(rng.uniform_tensor({2, 3, 5, 4}, -1, 1));
    const auto fw = layer.compute({x, x});
    for (const auto& om : fw.omega)
        for (double v : om.value().data()) CHECK(v == 0.5);
}

TEST_CASE("fusion weights: fewer than two contributors is rejected") {
    Rng rng(2);
    CHECK_THROWS_AS(fusion::FusionWeightsLayer(rng, {4}), ContractError);
    fusion::FusionWeightsLayer layer(rng, {2, 2});
    CHECK_THROWS_AS(layer.compute({Var(Tensor({1, 2, 3, 3}))}), ContractError);
    CHECK_THROWS_AS(layer.compute({Var(Tensor({1, 2, 3, 3})), Var(Tensor({1, 2, 4, 4}))}), ContractError);
}

TEST_CASE("fusion weights: fixed-seed 3-contributor instance matches a scalar oracle") {
    Rng rng(3);
    const std::vector<std::int64_t> ch{2, 3, 4};
    fusion::FusionWeightsLayer layer(rng, ch);
    for (auto& br : layer.branches) {  // arbitrary signed rescale so the |.| matters
        br->rescale->weight.mutable_value()[0] = rng.uniform(-2, 2);
        br->rescale->bias.mutable_value()[0] = rng.uniform(-0.5, 0.5);
    }
    std::vector<Var> xs;
    for (auto c : ch) xs.push_back(Var(rng.uniform_tensor({1, c, 4, 5}, -1, 1)));
    const auto fw = layer.compute(xs);
    for (std::int64_t p = 0; p < 20; ++p) {
        double num[3], den = 0.0;
        for (std::size_t j = 0; j < 3; ++j) {
            const auto& br = *layer.branches[j];
            double lambda = br.to_logit->bias.value()[0];
            for (std::int64_t c = 0; c < ch[j]; ++c) lambda += br.to_logit->weight.value()[c] * xs[j].value()[c * 20 + p];
            num[j] = std::abs(br.rescale->weight.value()[0] * std::exp(lambda) + br.rescale->bias.value()[0]);
            den += num[j];
        }
        for (std::size_t j = 0; j < 3; ++j) CHECK(fw.omega[j].value()[p] == doctest::Approx(num[j] / den).epsilon(1e-13));
    }
}

TEST_CASE("fusion: random 2- and 3-contributor instances are convex combinations") {
    Rng rng(4);
    for (int t = 0; t < 100; ++t) {
        const int k = t % 2 ? 3 : 2;
        const std::int64_t c = rng.randint(1, 4), h = rng.randint(1, 6), w = rng.randint(1, 6);
        fusion::FusionWeightsLayer layer(rng, std::vector<std::int64_t>(static_cast<std::size_t>(k), c));
        std::vector<Var> xs;
        for (int j = 0; j < k; ++j) xs.push_back(Var(rng.uniform_tensor({2, c, h, w}, -3, 3)));
        const auto fw = layer.compute(xs);
        const Tensor out = fusion::fuse(xs, fw).value();
        for (std::int64_t p = 0; p < 2 * h * w; ++p) {
            double s = 0.0;
            for (const auto& om : fw.omega) {
                CHECK(om.value()[p] >= 0.0);
                CHECK(om.value()[p] <= 1.0);
                s += om.value()[p];
            }
            CHECK(std::abs(s - 1.0) <= 1e-6);
        }
        for (std::int64_t i = 0; i < out.numel(); ++i) {
            double lo = INFINITY, hi = -INFINITY;
            for (const auto& x : xs) {
                lo = std::min(lo, x.value()[i]);
                hi = std::max(hi, x.value()[i]);
            }
            CHECK(out[i] >= lo - 1e-12);
            CHECK(out[i] <= hi + 1e-12);
        }
    }
}

TEST_CASE("AWF: contributors are the adjacent levels") {
    CHECK(fusion::AdaptiveFusion::contributors_of(2) == std::vector<int>{2, 3});
    CHECK(fusion::AdaptiveFusion::contributors_of(3) == std::vector<int>{2, 3, 4});
    CHECK(fusion::AdaptiveFusion::contributors_of(4) == std::vector<int>{3, 4, 5});
    CHECK(fusion::AdaptiveFusion::contributors_of(5) == std::vector<int>{4, 5});
}

TEST_CASE("AWF: shapes are preserved at every level") {
    Rng rng(5);
    const auto ch = widths(8, 16, 16, 32);
    fusion::AdaptiveFusion awf(rng, ch);
    const Pyramid p = random_pyramid(rng, ch, 2, 16);
    const Pyramid out = awf.forward(p);
    for (const auto& [level, v] : p) CHECK(out.at(level).shape() == v.shape());
}

TEST_CASE("AWF: on-level weight 1 makes it the identity") {
    Rng rng(6);
    const auto ch = widths(4, 8, 8, 16);
    fusion::AdaptiveFusion awf(rng, ch);
    for (int level : kLevels) {
        const auto srcs = fusion::AdaptiveFusion::contributors_of(level);
        auto layer = awf.weights_at(level);
        for (std::size_t j = 0; j < srcs.size(); ++j) constant_numerator(*layer->branches[j], srcs[j] == level ? 1.0 : 0.0);
    }
    const Pyramid p = random_pyramid(rng, ch, 1, 16);
    const Pyramid out = awf.forward(p);
    for (const auto& [level, v] : p) CHECK(out.at(level).value() == v.value());
}

TEST_CASE("AWF: two-level case with 0.25 / 0.75 weights") {
    Rng rng(7);
    const auto ch = widths(3, 3, 3, 3);  // equal widths: no alignment convs
    fusion::AdaptiveFusion awf(rng, ch);
    auto layer = awf.weights_at(2);
    constant_numerator(*layer->branches[0], 0.25);
    constant_numerator(*layer->branches[1], 0.75);
    const Pyramid p = random_pyramid(rng, ch, 1, 8);
    const Tensor out = awf.forward(p).at(2).value();
    const Tensor& p2 = p.at(2).value();
    const Tensor& p3 = p.at(3).value();
    for (std::int64_t c = 0; c < 3; ++c)
        for (std::int64_t y = 0; y < 8; ++y)
            for (std::int64_t x = 0; x < 8; ++x) {
                const double want = 0.25 * p2[(c * 8 + y) * 8 + x] + 0.75 * p3[(c * 4 + y / 2) * 4 + x / 2];
                CHECK(out[(c * 8 + y) * 8 + x] == doctest::Approx(want).epsilon(1e-14));
            }
}

TEST_CASE("AWF: weights sum to one per pixel at every level") {
    Rng rng(8);
    const auto ch = widths(8, 16, 16, 32);
    fusion::AdaptiveFusion awf(rng, ch);
    awf.forward(random_pyramid(rng, ch, 2, 16));
    for (const auto& [level, fw] : awf.last_weights()) {
        const std::int64_t n = fw.omega.front().value().numel();
        for (std::int64_t p = 0; p < n; ++p) {
            double s = 0.0;
            for (const auto& om : fw.omega) s += om.value()[p];
            CHECK(std::abs(s - 1.0) <= 1e-6);
        }
    }
}

TEST_CASE("AWF: missing level or inconsistent strides are rejected") {
    Rng rng(9);
    const auto ch = widths(4, 4, 4, 4);
    fusion::AdaptiveFusion awf(rng, ch);
    Pyramid p = random_pyramid(rng, ch, 1, 16);
    Pyramid missing = p;
    missing.erase(4);
    CHECK_THROWS_AS(awf.forward(missing), ContractError);
    p[3] = Var(Tensor({1, 4, 5, 5}));
    CHECK_THROWS_AS(awf.forward(p), ContractError);
}

TEST_CASE("AWF: gradients w.r.t. inputs and weight layers match central differences") {
    Rng rng(10);
    const auto ch = widths(2, 3, 3, 4);
    fusion::AdaptiveFusion awf(rng, ch);
    Pyramid p = random_pyramid(rng, ch, 1, 8);
    std::vector<Var> inputs;
    for (auto& [level, v] : p) {
        v = Var(v.value(), true);
        inputs.push_back(v);
    }
    for (auto& [name, prm] : awf.named_parameters()) inputs.push_back(prm);
    std::map<int, Tensor> r;
    for (const auto& [level, v] : p) r[level] = rng.uniform_tensor(v.shape(), -1, 1);
    const double worst = testing::check_gradients(inputs, [&](const std::vector<Var>& in) {
        Pyramid q{{2, in[0]}, {3, in[1]}, {4, in[2]}, {5, in[3]}};
        const Pyramid out = awf.forward(q);
        Var total;
        for (const auto& [level, v] : out) {
            Var t = testing::probe(v, r.at(level));
            total = total.defined() ? ops::add(total, t) : t;
        }
        return total;
    });
    CHECK(worst <= 1e-3);
}
