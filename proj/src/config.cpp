#include "bpim/config.hpp"

#include "bpim/ablate.hpp"

#include <yaml-cpp/yaml.h>

#include <cmath>
#include <fstream>
#include <sstream>

namespace bpim::config {

using nlohmann::json;

namespace {

json num(double lo) { return {{"type", "number"}, {"exclusiveMinimum", lo}}; }
json num_range(double lo, double hi) { return {{"type", "number"}, {"minimum", lo}, {"maximum", hi}}; }
json integer(std::int64_t lo) { return {{"type", "integer"}, {"minimum", lo}}; }
json boolean() { return {{"type", "boolean"}}; }
json string() { return {{"type", "string"}}; }
json object(json props) { return {{"type", "object"}, {"additionalProperties", false}, {"properties", std::move(props)}}; }

json synthetic_props() {
    return {{"seed", integer(0)},        {"num_images", integer(1)}, {"image_size", integer(32)},
            {"min_objects", integer(0)}, {"max_objects", integer(0)}, {"min_size", integer(2)},
            {"max_size", integer(2)}};
}

json level_map(const json& value) {
    return object({{"p2", value}, {"p3", value}, {"p4", value}, {"p5", value}});
}

json scalar_to_json(const YAML::Node& n) {
    const std::string& s = n.Scalar();
    if (n.Tag() == "!") return s;  // quoted
    if (s == "true" || s == "True" || s == "yes") return true;
    if (s == "false" || s == "False" || s == "no") return false;
    if (s == "null" || s == "~" || s.empty()) return nullptr;
    try {
        std::size_t used = 0;
        const long long i = std::stoll(s, &used);
        if (used == s.size()) return i;
    } catch (const std::exception&) {
    }
    try {
        std::size_t used = 0;
        const double d = std::stod(s, &used);
        if (used == s.size() && std::isfinite(d)) return d;
    } catch (const std::exception&) {
    }
    return s;
}

json node_to_json(const YAML::Node& n) {
    switch (n.Type()) {
        case YAML::NodeType::Null:
        case YAML::NodeType::Undefined:
            return nullptr;
        case YAML::NodeType::Scalar:
            return scalar_to_json(n);
        case YAML::NodeType::Sequence: {
            json a = json::array();
            for (const auto& e : n) a.push_back(node_to_json(e));
            return a;
        }
        case YAML::NodeType::Map: {
            json o = json::object();
            for (const auto& kv : n) o[kv.first.as<std::string>()] = node_to_json(kv.second);
            return o;
        }
    }
    return nullptr;
}

void check(const json& doc, const json& schema, const std::string& path, std::vector<std::string>& errors) {
    const std::string where = path.empty() ? "<root>" : path;
    if (schema.contains("type")) {
        const std::string t = schema.at("type");
        bool ok = false;
        if (t == "object") ok = doc.is_object();
        else if (t == "array") ok = doc.is_array();
        else if (t == "string") ok = doc.is_string();
        else if (t == "boolean") ok = doc.is_boolean();
        else if (t == "integer") ok = doc.is_number_integer();
        else if (t == "number") ok = doc.is_number();
        if (!ok) {
            errors.push_back(where + ": expected " + t);
            return;
        }
    }
    if (schema.contains("enum")) {
        bool found = false;
        for (const auto& e : schema.at("enum")) found = found || e == doc;
        if (!found) errors.push_back(where + ": value " + doc.dump() + " is not one of " + schema.at("enum").dump());
    }
    if (doc.is_number()) {
        const double v = doc.get<double>();
        if (schema.contains("minimum") && v < schema.at("minimum").get<double>())
            errors.push_back(where + ": must be >= " + schema.at("minimum").dump());
        if (schema.contains("maximum") && v > schema.at("maximum").get<double>())
            errors.push_back(where + ": must be <= " + schema.at("maximum").dump());
        if (schema.contains("exclusiveMinimum") && v <= schema.at("exclusiveMinimum").get<double>())
            errors.push_back(where + ": must be > " + schema.at("exclusiveMinimum").dump());
    }
    if (doc.is_object()) {
        const json props = schema.value("properties", json::object());
        for (const auto& [key, value] : doc.items()) {
            const std::string sub = path.empty() ? key : path + "." + key;
            if (props.contains(key)) {
                check(value, props.at(key), sub, errors);
            } else if (schema.contains("additionalProperties")) {
                const auto& ap = schema.at("additionalProperties");
                if (ap.is_boolean() && !ap.get<bool>()) errors.push_back(sub + ": unknown key");
                else if (ap.is_object()) check(value, ap, sub, errors);
            }
        }
        if (schema.contains("required"))
            for (const auto& r : schema.at("required"))
                if (!doc.contains(r.get<std::string>())) errors.push_back(where + ": missing key " + r.get<std::string>());
    }
    if (doc.is_array()) {
        if (schema.contains("minItems") && doc.size() < schema.at("minItems").get<std::size_t>())
            errors.push_back(where + ": needs at least " + schema.at("minItems").dump() + " items");
        if (schema.contains("maxItems") && doc.size() > schema.at("maxItems").get<std::size_t>())
            errors.push_back(where + ": allows at most " + schema.at("maxItems").dump() + " items");
        if (schema.contains("items"))
            for (std::size_t i = 0; i < doc.size(); ++i)
                check(doc[i], schema.at("items"), path + "[" + std::to_string(i) + "]", errors);
    }
}

template <class T>
void take(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

data::SyntheticSpec synthetic_from(const json& j, data::SyntheticSpec s = {}) {
    take(j, "seed", s.seed);
    take(j, "num_images", s.num_images);
    take(j, "image_size", s.image_size);
    take(j, "min_objects", s.min_objects);
    take(j, "max_objects", s.max_objects);
    take(j, "min_size", s.min_size);
    take(j, "max_size", s.max_size);
    return s;
}

json synthetic_json(const data::SyntheticSpec& s) {
    return {{"seed", s.seed},          {"num_images", s.num_images}, {"image_size", s.image_size},
            {"min_objects", s.min_objects}, {"max_objects", s.max_objects}, {"min_size", s.min_size},
            {"max_size", s.max_size}};
}

}  // namespace

const json& run_schema() {
    static const json schema = [] {
        const json pair = {{"type", "array"}, {"items", num(0.0)}, {"minItems", 2}, {"maxItems", 2}};
        const json anchor_set = {{"type", "array"}, {"items", pair}, {"minItems", 3}, {"maxItems", 3}};
        const json model = object({
            {"width_multiple", num(0.0)},
            {"depth_multiple", num(0.0)},
            {"num_classes", integer(1)},
            {"heads", integer(1)},
            {"ff_dim", integer(1)},
            {"input_size", integer(32)},
            {"gsconv", {{"type", "string"}, {"enum", {"gsconv", "plain"}}}},
            {"positional_embedding", boolean()},
            {"enable", object({{"big", boolean()}, {"awf", boolean()}, {"pig", boolean()}, {"csf_tff", boolean()}})},
            {"anchors", level_map(anchor_set)},
        });
        const json train = object({
            {"lr0", num(0.0)},
            {"lrf", num(0.0)},
            {"momentum", {{"type", "number"}, {"exclusiveMinimum", 0.0}, {"maximum", 0.999}}},
            {"weight_decay", num_range(0.0, 1.0)},
            {"warmup_epochs", integer(0)},
            {"warmup_bias_lr", num(0.0)},
            {"warmup_momentum", {{"type", "number"}, {"exclusiveMinimum", 0.0}, {"maximum", 0.999}}},
            {"batch_size", integer(1)},
            {"epochs", integer(1)},
            {"nesterov", boolean()},
            {"grad_clip", num_range(0.0, 1e9)},
            {"hflip", boolean()},
            {"eval_interval", integer(0)},
            {"loss", object({{"box", num(0.0)},
                             {"obj", num(0.0)},
                             {"cls", num(0.0)},
                             {"balance", level_map(num_range(0.0, 1e6))},
                             {"scale_by_batch", boolean()},
                             {"anchor_ratio", num(1.0)}})},
            {"eval", object({{"conf_threshold", num_range(0.0, 0.999)}, {"iou_threshold", {{"type", "number"}, {"exclusiveMinimum", 0.0}, {"maximum", 0.999}}}})},
        });
        const json data = object({{"name", string()},
                                  {"train", string()},
                                  {"val", string()},
                                  {"synthetic", object(synthetic_props())}});
        return object({{"seed", integer(0)},
                       {"model", model},
                       {"train", train},
                       {"data", data},
                       {"ablation", object({{"rows", {{"type", "array"}, {"items", string()}, {"minItems", 1}}}})}});
    }();
    return schema;
}

const json& synthetic_schema() {
    static const json schema = object(synthetic_props());
    return schema;
}

std::vector<std::string> validate(const json& doc, const json& schema) {
    std::vector<std::string> errors;
    check(doc, schema, "", errors);
    return errors;
}

json yaml_to_json(const std::string& yaml_text) {
    try {
        return node_to_json(YAML::Load(yaml_text));
    } catch (const YAML::Exception& e) {
        throw ConfigError(std::string("YAML: ") + e.what());
    }
}

namespace {

void throw_errors(const std::vector<std::string>& errors) {
    if (errors.empty()) return;
    std::string msg = "invalid config:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
}

json as_document(const std::string& yaml_text) {
    json doc = yaml_to_json(yaml_text);
    if (doc.is_null()) doc = json::object();
    return doc;
}

}  // namespace

RunConfig parse_run_config(const std::string& yaml_text) {
    const json doc = as_document(yaml_text);
    throw_errors(validate(doc, run_schema()));
    RunConfig rc;
    take(doc, "seed", rc.seed);
    if (doc.contains("model")) {
        const json& m = doc.at("model");
        auto& mc = rc.model;
        take(m, "width_multiple", mc.width_multiple);
        take(m, "depth_multiple", mc.depth_multiple);
        take(m, "num_classes", mc.num_classes);
        take(m, "heads", mc.heads);
        take(m, "ff_dim", mc.ff_dim);
        take(m, "input_size", mc.input_size);
        take(m, "positional_embedding", mc.positional_embedding);
        if (m.contains("gsconv")) mc.gsconv = m.at("gsconv") == "plain" ? nn::GSConvKind::plain : nn::GSConvKind::gsconv;
        if (m.contains("enable")) {
            const json& e = m.at("enable");
            take(e, "big", mc.enable.big);
            take(e, "awf", mc.enable.awf);
            take(e, "pig", mc.enable.pig);
            take(e, "csf_tff", mc.enable.csf_tff);
        }
        if (m.contains("anchors"))
            for (const auto& [key, sets] : m.at("anchors").items()) {
                model::AnchorSet s{};
                for (std::size_t i = 0; i < s.size(); ++i) s[i] = {sets[i][0].get<double>(), sets[i][1].get<double>()};
                mc.anchors[std::stoi(key.substr(1))] = s;
            }
    }
    if (doc.contains("train")) {
        const json& t = doc.at("train");
        auto& tc = rc.train;
        take(t, "lr0", tc.lr0);
        take(t, "lrf", tc.lrf);
        take(t, "momentum", tc.momentum);
        take(t, "weight_decay", tc.weight_decay);
        take(t, "warmup_epochs", tc.warmup_epochs);
        take(t, "warmup_bias_lr", tc.warmup_bias_lr);
        take(t, "warmup_momentum", tc.warmup_momentum);
        take(t, "batch_size", tc.batch_size);
        take(t, "epochs", tc.epochs);
        take(t, "nesterov", tc.nesterov);
        take(t, "grad_clip", tc.grad_clip);
        take(t, "hflip", tc.hflip);
        take(t, "eval_interval", tc.eval_interval);
        if (t.contains("loss")) {
            const json& l = t.at("loss");
            take(l, "box", tc.loss.box);
            take(l, "obj", tc.loss.obj);
            take(l, "cls", tc.loss.cls);
            take(l, "scale_by_batch", tc.loss.scale_by_batch);
            take(l, "anchor_ratio", tc.assign.anchor_ratio);
            if (l.contains("balance"))
                for (const auto& [key, v] : l.at("balance").items()) tc.loss.balance[std::stoi(key.substr(1))] = v.get<double>();
        }
        if (t.contains("eval")) {
            take(t.at("eval"), "conf_threshold", tc.eval.conf_threshold);
            take(t.at("eval"), "iou_threshold", tc.eval.iou_threshold);
        }
    }
    if (doc.contains("data")) {
        const json& d = doc.at("data");
        take(d, "name", rc.data.name);
        take(d, "train", rc.data.train);
        take(d, "val", rc.data.val);
        if (d.contains("synthetic")) rc.data.synthetic = synthetic_from(d.at("synthetic"));
    }
    if (doc.contains("ablation") && doc.at("ablation").contains("rows"))
        rc.ablation_rows = doc.at("ablation").at("rows").get<std::vector<std::string>>();
    rc.model.validate();
    rc.train.validate();
    if (rc.data.synthetic) rc.data.synthetic->validate();
    for (const auto& row : rc.ablation_rows) train::parse_flags(row);
    return rc;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str());
}

data::SyntheticSpec parse_synthetic_spec(const std::string& yaml_text) {
    const json doc = as_document(yaml_text);
    throw_errors(validate(doc, synthetic_schema()));
    data::SyntheticSpec s = synthetic_from(doc);
    s.validate();
    return s;
}

json RunConfig::resolved() const {
    json d{{"name", data.name}, {"train", data.train}, {"val", data.val}};
    if (data.synthetic) d["synthetic"] = synthetic_json(*data.synthetic);
    return {{"seed", seed}, {"model", model.to_json()}, {"train", train.to_json()}, {"data", d}, {"ablation", {{"rows", ablation_rows}}}};
}

}  // namespace bpim::config
