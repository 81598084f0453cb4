#include <doctest.h>

#include "bpim/config.hpp"

using namespace bpim;
using nlohmann::json;

TEST_CASE("yaml: scalars, sequences and quoted strings") {
    const json j = config::yaml_to_json("a: 1\nb: 0.5\nc: true\nd: '7'\ne: [1, 2]\nf:\n  g: x\n");
    CHECK(j.at("a") == 1);
    CHECK(j.at("b") == 0.5);
    CHECK(j.at("c") == true);
    CHECK(j.at("d") == "7");
    CHECK(j.at("e") == json::array({1, 2}));
    CHECK(j.at("f").at("g") == "x");
}

TEST_CASE("run config: defaults follow the training recipe") {
    const auto rc = config::parse_run_config("seed: 3\n");
    CHECK(rc.seed == 3);
    CHECK(rc.train.lr0 == 0.01);
    CHECK(rc.train.weight_decay == 0.0005);
    CHECK(rc.train.momentum == 0.9);
    CHECK(rc.train.warmup_epochs == 3);
    CHECK(rc.train.warmup_bias_lr == 0.1);
    CHECK(rc.train.warmup_momentum == 0.8);
    CHECK(rc.train.batch_size == 8);
    CHECK(rc.train.loss.box == 0.05);
    CHECK(rc.train.loss.obj == 1.0);
    CHECK(rc.train.loss.cls == 0.5);
    CHECK(rc.train.loss.balance == std::map<int, double>{{2, 4.0}, {3, 1.0}, {4, 0.4}, {5, 0.1}});
    CHECK(rc.model.heads == 8);
    CHECK(rc.model.input_size == 640);
    CHECK_FALSE(rc.model.enable.any());
}

TEST_CASE("run config: nested settings are applied and resolved") {
    const auto rc = config::parse_run_config(R"(
seed: 11
model:
  width_multiple: 0.125
  input_size: 128
  enable: {big: true, awf: false, pig: true, csf_tff: true}
  anchors:
    p2: [[4, 5], [8, 10], [12, 9]]
train:
  epochs: 20
  loss: {box: 0.5, balance: {p2: 2.0}}
data:
  name: toy
  synthetic: {seed: 1, num_images: 4, image_size: 64}
ablation:
  rows: [baseline, all]
)");
    CHECK(rc.model.width_multiple == 0.125);
    CHECK(rc.model.enable == model::ModuleFlags{true, false, true, true});
    CHECK(rc.model.anchors.at(2)[1] == std::pair<double, double>{8, 10});
    CHECK(rc.train.epochs == 20);
    CHECK(rc.train.loss.box == 0.5);
    CHECK(rc.train.loss.balance.at(2) == 2.0);
    CHECK(rc.train.loss.balance.at(5) == 0.1);
    REQUIRE(rc.data.synthetic);
    CHECK(rc.data.synthetic->num_images == 4);
    CHECK(rc.ablation_rows == std::vector<std::string>{"baseline", "all"});
    const json r = rc.resolved();
    CHECK(r.at("seed") == 11);
    CHECK(r.at("train").at("lr0") == 0.01);
    CHECK(r.at("data").at("name") == "toy");
}

TEST_CASE("run config: unknown keys and bad values are rejected") {
    CHECK_THROWS_AS(config::parse_run_config("sed: 1\n"), ConfigError);
    CHECK_THROWS_AS(config::parse_run_config("model: {widht_multiple: 0.5}\n"), ConfigError);
    CHECK_THROWS_AS(config::parse_run_config("train: {lr0: -1}\n"), ConfigError);
    CHECK_THROWS_AS(config::parse_run_config("train: {epochs: many}\n"), ConfigError);
    CHECK_THROWS_AS(config::parse_run_config("model: {input_size: 100}\n"), ConfigError);
    CHECK_THROWS_AS(config::parse_run_config("ablation: {rows: [big+xyz]}\n"), ConfigError);
    CHECK_THROWS_AS(config::parse_run_config("model: {gsconv: fancy}\n"), ConfigError);
    CHECK_THROWS_AS(config::parse_run_config("a: [unclosed\n"), ConfigError);
}

TEST_CASE("run config: every violation is reported") {
    try {
        config::parse_run_config("sed: 1\ntrain: {lr0: -1}\n");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("sed") != std::string::npos);
        CHECK(msg.find("lr0") != std::string::npos);
    }
}

TEST_CASE("schema validator: the supported keywords") {
    const json schema{{"type", "object"},
                      {"additionalProperties", false},
                      {"required", {"n"}},
                      {"properties",
                       {{"n", {{"type", "integer"}, {"minimum", 1}, {"maximum", 5}}},
                        {"r", {{"type", "number"}, {"exclusiveMinimum", 0}}},
                        {"k", {{"enum", {"a", "b"}}}},
                        {"l", {{"type", "array"}, {"items", {{"type", "string"}}}, {"minItems", 1}, {"maxItems", 2}}}}}};
    CHECK(config::validate({{"n", 3}, {"r", 0.1}, {"k", "a"}, {"l", {"x"}}}, schema).empty());
    CHECK(config::validate(json::object(), schema).size() == 1);
    CHECK(config::validate({{"n", 0}}, schema).size() == 1);
    CHECK(config::validate({{"n", 6}}, schema).size() == 1);
    CHECK(config::validate({{"n", 1.5}}, schema).size() == 1);
    CHECK(config::validate({{"n", 1}, {"r", 0}}, schema).size() == 1);
    CHECK(config::validate({{"n", 1}, {"k", "c"}}, schema).size() == 1);
    CHECK(config::validate({{"n", 1}, {"l", json::array()}}, schema).size() == 1);
    CHECK(config::validate({{"n", 1}, {"l", {"a", "b", "c"}}}, schema).size() == 1);
    CHECK(config::validate({{"n", 1}, {"l", {1}}}, schema).size() == 1);
    CHECK(config::validate({{"n", 1}, {"zz", 1}}, schema).size() == 1);
}

TEST_CASE("synthetic spec: parsed and validated") {
    const auto s = config::parse_synthetic_spec("seed: 7\nnum_images: 16\nimage_size: 256\n");
    CHECK(s.seed == 7);
    CHECK(s.num_images == 16);
    CHECK(s.image_size == 256);
    CHECK(s.min_size == 6);
    CHECK(s.max_size == 24);
    CHECK_THROWS_AS(config::parse_synthetic_spec("image_size: 250\n"), ConfigError);
    CHECK_THROWS_AS(config::parse_synthetic_spec("colour: red\n"), ConfigError);
}
