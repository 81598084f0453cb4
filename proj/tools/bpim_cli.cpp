// bpim: synth, train, eval, detect, inspect, ablate.
//
// Exit codes: 0 ok, 1 runtime failure, 2 invalid config/spec/usage,
// 3 missing dataset, 4 training diverged.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>

#include "bpim/ablate.hpp"
#include "bpim/checkpoint.hpp"
#include "bpim/config.hpp"
#include "bpim/data.hpp"
#include "bpim/image.hpp"
#include "bpim/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace bpim;

namespace {

enum Exit { kOk = 0, kFailure = 1, kInvalid = 2, kNoDataset = 3, kDiverged = 4 };

void log(const std::string& msg) { std::cerr << "[bpim] " << msg << '\n'; }

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string device = "cpu";
    std::string out;
};

void add_common(CLI::App* cmd, Common& c, const std::string& default_out) {
    c.out = default_out;
    cmd->add_option("--config", c.config, "YAML run config");
    cmd->add_option("--seed", c.seed, "Overrides the config seed");
    cmd->add_option("--device", c.device, "Only cpu is supported")->capture_default_str();
    cmd->add_option("--out", c.out, "Output directory")->capture_default_str();
}

config::RunConfig load_config(const Common& c) {
    if (c.device != "cpu") throw ConfigError("unsupported device '" + c.device + "' (only cpu)");
    config::RunConfig rc = c.config.empty() ? config::parse_run_config("{}") : config::load_run_config(c.config);
    if (c.seed) rc.seed = *c.seed;
    return rc;
}

void write_text(const fs::path& p, const std::string& s) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    f << s;
}

void write_manifest(const fs::path& out, const std::string& command, const json& extra) {
    json m{{"command", command}, {"format", 1}, {"files", json::array()}};
    for (const auto& e : fs::recursive_directory_iterator(out))
        if (e.is_regular_file() && e.path().filename() != "manifest.json")
            m["files"].push_back(fs::relative(e.path(), out).generic_string());
    std::sort(m["files"].begin(), m["files"].end());
    m.update(extra);
    write_text(out / "manifest.json", m.dump(2) + "\n");
}

fs::path cache_dir(const fs::path& out) {
    if (const char* env = std::getenv("BPIM_CACHE"); env && *env) return env;
    return out / "cache";
}

// FNV-1a; names cache entries by the spec that produced them.
std::string digest(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : s) h = (h ^ ch) * 1099511628211ull;
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

json spec_json(const data::SyntheticSpec& s) {
    return {{"seed", s.seed},           {"num_images", s.num_images}, {"image_size", s.image_size},
            {"min_objects", s.min_objects}, {"max_objects", s.max_objects}, {"min_size", s.min_size},
            {"max_size", s.max_size}};
}

fs::path resolve_root(const std::string& root, const fs::path& out) {
    fs::path p(root);
    if (p.is_relative() && !fs::exists(p) && fs::exists(cache_dir(out) / p)) return cache_dir(out) / p;
    return p;
}

// The training root: an explicit path, else the synthetic spec materialised in the cache.
fs::path train_root(const config::RunConfig& rc, const fs::path& out) {
    if (!rc.data.train.empty()) return resolve_root(rc.data.train, out);
    if (!rc.data.synthetic) throw data::DatasetError("config names no dataset (data.train or data.synthetic)");
    const fs::path dir = cache_dir(out) / ("synthetic-" + digest(spec_json(*rc.data.synthetic).dump()));
    if (!fs::exists(dir / "dataset.json")) {
        log("generating synthetic dataset in " + dir.string());
        data::generate_synthetic(*rc.data.synthetic, dir);
    }
    return dir;
}

fs::path val_root(const config::RunConfig& rc, const fs::path& out) {
    return rc.data.val.empty() ? train_root(rc, out) : resolve_root(rc.data.val, out);
}

struct Loaded {
    data::Dataset raw;
    std::vector<data::AnnotatedImage> items;  // letterboxed
};

Loaded load(const fs::path& root, int num_classes, int input_size) {
    Loaded l;
    l.raw = data::load_dataset(root, num_classes);
    for (const auto& d : l.raw.diagnostics) log("warning: " + d.file + ":" + std::to_string(d.line) + ": " + d.message);
    if (l.raw.items.empty()) throw data::DatasetError("no images under " + root.string());
    for (const auto& it : l.raw.items) l.items.push_back(data::letterbox(it, input_size));
    log("loaded " + std::to_string(l.items.size()) + " images from " + root.string());
    return l;
}

std::unique_ptr<model::Model> load_model(const fs::path& ckpt_path, json* meta_out = nullptr) {
    const auto ckpt = checkpoint::read(ckpt_path);
    if (!ckpt.meta.contains("model")) throw std::runtime_error("checkpoint has no model config");
    auto m = std::make_unique<model::Model>(model::ModelConfig::from_json(ckpt.meta.at("model")), 0);
    checkpoint::load_into(ckpt, *m);
    m->set_training(false);
    if (meta_out) *meta_out = ckpt.meta;
    return m;
}

// ---- synth ------------------------------------------------------------------

struct SynthArgs {
    std::string spec;
    std::optional<std::uint64_t> seed;
    std::optional<int> n, size, min_objects, max_objects, min_size, max_size;
    std::string out = "synthetic";
};

int cmd_synth(const SynthArgs& a) {
    data::SyntheticSpec s;
    if (!a.spec.empty()) {
        std::ifstream in(a.spec);
        if (!in) throw ConfigError("cannot read spec " + a.spec);
        std::stringstream ss;
        ss << in.rdbuf();
        s = config::parse_synthetic_spec(ss.str());
    }
    if (a.seed) s.seed = *a.seed;
    if (a.n) s.num_images = *a.n;
    if (a.size) s.image_size = *a.size;
    if (a.min_objects) s.min_objects = *a.min_objects;
    if (a.max_objects) s.max_objects = *a.max_objects;
    if (a.min_size) s.min_size = *a.min_size;
    if (a.max_size) s.max_size = *a.max_size;
    s.validate();
    log("synthetic spec " + spec_json(s).dump());
    data::generate_synthetic(s, a.out);
    write_manifest(a.out, "synth", {{"spec", spec_json(s)}});
    log("wrote " + std::to_string(s.num_images) + " images to " + a.out);
    return kOk;
}

// ---- train ------------------------------------------------------------------

int cmd_train(const Common& c) {
    const auto rc = load_config(c);
    const fs::path out = c.out;
    fs::create_directories(out);
    log("resolved config " + rc.resolved().dump());
    write_text(out / "config.resolved.json", rc.resolved().dump(2) + "\n");

    const auto tr = load(train_root(rc, out), rc.model.num_classes, rc.model.input_size);
    const auto va = load(val_root(rc, out), rc.model.num_classes, rc.model.input_size);

    model::Model m(rc.model, rc.seed);
    log("model " + rc.model.enable.label() + ", " + std::to_string(m.parameter_count()) + " parameters");
    std::ofstream metrics(out / "metrics.ndjson");
    json meta{{"model", rc.model.to_json()}, {"seed", rc.seed}, {"class_names", tr.raw.class_names}};
    train::TrainHooks hooks;
    hooks.metrics = &metrics;
    hooks.val = &va.items;
    hooks.divergence_checkpoint = out / "diverged.ckpt";
    hooks.checkpoint_meta = meta;
    hooks.on_epoch = [](const train::EpochRecord& r) {
        std::ostringstream os;
        os << "epoch " << r.epoch << " loss " << r.loss.total << " (box " << r.loss.box << ", obj " << r.loss.obj
           << ", cls " << r.loss.cls << ")";
        if (r.eval) os << " map50 " << r.eval->map50 << " map50_95 " << r.eval->map5095;
        log(os.str());
    };
    const auto res = train::train(m, rc.train, tr.items, rc.seed, hooks);
    meta["epochs"] = res.epochs.size();
    meta["final_loss"] = res.final_loss;
    checkpoint::save(out / "model.ckpt", meta, m);
    json ev;
    if (!res.epochs.empty() && res.epochs.back().eval) {
        ev = res.epochs.back().eval->to_json();
        write_text(out / "eval.json", ev.dump(2) + "\n");
    }
    metrics.close();
    write_manifest(out, "train", {{"seed", rc.seed}, {"final_loss", res.final_loss}});
    std::cout << std::setprecision(10) << "final_loss " << res.final_loss << '\n';
    return kOk;
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint, predictions, data;
};

int cmd_eval(const Common& c, const EvalArgs& a) {
    const auto rc = load_config(c);
    const fs::path out = c.out;
    fs::create_directories(out);
    if (a.checkpoint.empty() == a.predictions.empty())
        throw ConfigError("eval needs exactly one of --checkpoint or --predictions");
    train::EvalResult r;
    if (!a.checkpoint.empty()) {
        auto m = load_model(a.checkpoint);
        const fs::path root = a.data.empty() ? val_root(rc, out) : resolve_root(a.data, out);
        const auto va = load(root, m->config().num_classes, m->config().input_size);
        r = train::evaluate(*m, va.items, rc.train.eval);
    } else {
        const fs::path root = a.data.empty() ? val_root(rc, out) : resolve_root(a.data, out);
        const auto ds = data::load_dataset(root);
        if (ds.items.empty()) throw data::DatasetError("no images under " + root.string());
        int nc = rc.model.num_classes;
        std::vector<std::vector<geometry::Detection>> dets;
        std::vector<std::vector<data::Annotation>> gts;
        for (const auto& it : ds.items) {
            gts.push_back(it.boxes);
            std::vector<geometry::Detection> d;
            const fs::path file = fs::path(a.predictions) / (it.source_id + ".txt");
            if (std::ifstream in(file); in) {
                const auto parsed = data::parse_labels(in, file.string());
                for (const auto& diag : parsed.diagnostics) log("warning: " + diag.file + ":" + std::to_string(diag.line) + ": " + diag.message);
                for (const auto& p : parsed.boxes) d.push_back({p.box, p.cls, p.conf.value_or(1.0)});
            }
            for (const auto& g : it.boxes) nc = std::max(nc, g.cls + 1);
            for (const auto& p : d) nc = std::max(nc, p.cls + 1);
            dets.push_back(std::move(d));
        }
        r = train::evaluate_detections(dets, gts, nc);
    }
    write_text(out / "eval.json", r.to_json().dump(2) + "\n");
    write_manifest(out, "eval", {{"map50", r.map50}, {"map50_95", r.map5095}});
    std::cout << std::fixed << std::setprecision(4) << "map50 " << r.map50 << "\nmap50_95 " << r.map5095 << '\n';
    return kOk;
}

// ---- detect -----------------------------------------------------------------

struct DetectArgs {
    std::string checkpoint, images;
    double conf = 0.25, iou = 0.45;
};

int cmd_detect(const Common& c, const DetectArgs& a) {
    if (c.device != "cpu") throw ConfigError("unsupported device '" + c.device + "' (only cpu)");
    const fs::path out = c.out;
    if (!fs::is_directory(a.images)) throw data::DatasetError("image directory not found: " + a.images);
    const auto m = load_model(a.checkpoint);
    fs::create_directories(out / "overlays");
    fs::create_directories(out / "detections");

    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(a.images))
        if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
    std::sort(files.begin(), files.end());

    int ok = 0;
    for (const auto& f : files) {
        Tensor img;
        try {
            img = image::read_png(f);
        } catch (const std::exception& e) {
            log("warning: skipping " + f.string() + ": " + e.what());
            continue;
        }
        const auto [boxed, tf] = data::letterbox(img, m->config().input_size);
        NoGradGuard ng;
        const auto preds = m->forward(Var(boxed.reshaped({1, 3, boxed.dim(1), boxed.dim(2)})));
        const auto dets = model::decode(preds, m->config(), {a.conf, a.iou, 300}).front();

        Tensor overlay = img;
        std::ofstream txt(out / "detections" / (f.stem().string() + ".txt"));
        for (const auto& d : dets) {
            const data::Annotation ann{d.cls, tf.to_original(d.box), d.conf};
            txt << data::format_label(ann) << '\n';
            const auto px = image::pixel_corners(ann.box, img.dim(2), img.dim(1));
            image::draw_rect(overlay, px[0], px[1], px[2], px[3], image::class_color(d.cls));
        }
        image::write_png(out / "overlays" / (f.stem().string() + ".png"), overlay);
        log(f.filename().string() + ": " + std::to_string(dets.size()) + " detections");
        ++ok;
    }
    write_manifest(out, "detect", {{"images", files.size()}, {"processed", ok}});
    if (ok == 0 && !files.empty()) {
        log("no image could be processed");
        return kFailure;
    }
    return kOk;
}

// ---- inspect ----------------------------------------------------------------

int cmd_inspect(const Common& c, const std::string& ckpt) {
    json info;
    std::unique_ptr<model::Model> m;
    if (!ckpt.empty()) {
        json meta;
        m = load_model(ckpt, &meta);
        info["meta"] = meta;
    } else {
        const auto rc = load_config(c);
        info["config"] = rc.resolved();
        m = std::make_unique<model::Model>(rc.model, rc.seed);
    }
    const auto w = m->widths();
    json widths;
    for (const auto& [name, map] : {std::pair{"tap", &w.tap}, std::pair{"n", &w.n}, std::pair{"p", &w.p}})
        for (const auto& [level, ch] : *map) widths[name]["p" + std::to_string(level)] = ch;
    info["flags"] = m->config().enable.label();
    info["widths"] = widths;
    info["params"] = m->parameter_count();
    info["gflops"] = model::count_flops(*m, m->config().input_size) / 1e9;
    std::cout << info.dump(2) << '\n';
    return kOk;
}

// ---- ablate -----------------------------------------------------------------

int cmd_ablate(const Common& c, const std::vector<std::string>& rows_override) {
    auto rc = load_config(c);
    if (!rows_override.empty()) rc.ablation_rows = rows_override;
    const fs::path out = c.out;
    fs::create_directories(out);
    log("resolved config " + rc.resolved().dump());
    write_text(out / "config.resolved.json", rc.resolved().dump(2) + "\n");

    const auto tr = load(train_root(rc, out), rc.model.num_classes, rc.model.input_size);
    const auto va = load(val_root(rc, out), rc.model.num_classes, rc.model.input_size);
    std::vector<model::ModuleFlags> rows;
    for (const auto& r : rc.ablation_rows) rows.push_back(train::parse_flags(r));
    const auto res = train::ablate(rc.model, rc.train, tr.items, va.items, rows, rc.seed, &std::cerr);
    const std::string csv = train::ablation_csv(res, rc.data.name, rc.seed);
    write_text(out / "ablation.csv", csv);
    write_manifest(out, "ablate", {{"seed", rc.seed}, {"rows", rc.ablation_rows}});
    std::cout << csv;
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"bpim: small-object detector with boundary, position and cross-scale fusion modules"};
    app.require_subcommand(1);

    SynthArgs sa;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
    synth->add_option("spec", sa.spec, "Optional YAML spec file");
    synth->add_option("--seed", sa.seed);
    synth->add_option("--n", sa.n, "Number of images");
    synth->add_option("--size", sa.size, "Image side, a multiple of 32");
    synth->add_option("--min-objects", sa.min_objects);
    synth->add_option("--max-objects", sa.max_objects);
    synth->add_option("--min-size", sa.min_size, "Smallest object side in px");
    synth->add_option("--max-size", sa.max_size, "Largest object side in px");
    synth->add_option("--out", sa.out)->capture_default_str();

    Common tc, ec, dc, ic, ac;
    auto* train_cmd = app.add_subcommand("train", "Train a model; writes model.ckpt and metrics.ndjson");
    add_common(train_cmd, tc, "runs/train");

    EvalArgs ea;
    auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint or a directory of prediction files");
    add_common(eval_cmd, ec, "runs/eval");
    eval_cmd->add_option("--checkpoint", ea.checkpoint);
    eval_cmd->add_option("--predictions", ea.predictions, "Directory of <stem>.txt files with confidences");
    eval_cmd->add_option("--data", ea.data, "Dataset root (default: the config's val set)");

    DetectArgs da;
    auto* detect_cmd = app.add_subcommand("detect", "Write overlays and detection files for a directory of PNGs");
    add_common(detect_cmd, dc, "runs/detect");
    detect_cmd->add_option("--checkpoint", da.checkpoint)->required();
    detect_cmd->add_option("--images", da.images)->required();
    detect_cmd->add_option("--conf", da.conf)->capture_default_str();
    detect_cmd->add_option("--iou", da.iou)->capture_default_str();

    std::string inspect_ckpt;
    auto* inspect_cmd = app.add_subcommand("inspect", "Print widths, parameter count and GFLOPs");
    add_common(inspect_cmd, ic, "runs/inspect");
    inspect_cmd->add_option("--checkpoint", inspect_ckpt);

    std::vector<std::string> rows;
    auto* ablate_cmd = app.add_subcommand("ablate", "Train one model per flag row and write ablation.csv");
    add_common(ablate_cmd, ac, "runs/ablate");
    ablate_cmd->add_option("--rows", rows, "Row specs such as baseline, big+awf, all");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kInvalid;
    }

    try {
        if (*synth) return cmd_synth(sa);
        if (*train_cmd) return cmd_train(tc);
        if (*eval_cmd) return cmd_eval(ec, ea);
        if (*detect_cmd) return cmd_detect(dc, da);
        if (*inspect_cmd) return cmd_inspect(ic, inspect_ckpt);
        if (*ablate_cmd) return cmd_ablate(ac, rows);
    } catch (const ConfigError& e) {
        log(std::string("error: ") + e.what());
        return kInvalid;
    } catch (const data::DatasetError& e) {
        log(std::string("error: ") + e.what());
        return kNoDataset;
    } catch (const train::DivergenceError& e) {
        log(std::string("error: ") + e.what());
        return kDiverged;
    } catch (const std::exception& e) {
        log(std::string("error: ") + e.what());
        return kFailure;
    }
    return kFailure;
}
