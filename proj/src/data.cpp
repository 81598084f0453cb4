#include "bpim/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "bpim/image.hpp"

namespace bpim::data {

namespace fs = std::filesystem;

ParsedLabels parse_labels(std::istream& in, const std::string& file, int num_classes) {
    ParsedLabels out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        auto reject = [&](const std::string& why) { out.diagnostics.push_back({file, lineno, why}); };
        std::istringstream ss(line);
        std::vector<std::string> fields;
        for (std::string f; ss >> f;) fields.push_back(f);
        if (fields.size() != 5 && fields.size() != 6) {
            reject("expected 5 or 6 fields, got " + std::to_string(fields.size()));
            continue;
        }
        std::vector<double> v;
        bool ok = true;
        for (const auto& f : fields) {
            std::size_t used = 0;
            try {
                v.push_back(std::stod(f, &used));
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != f.size() || !std::isfinite(v.back())) {
                ok = false;
                break;
            }
        }
        if (!ok) {
            reject("non-numeric field");
            continue;
        }
        const double cls = v[0];
        if (cls < 0 || cls != std::floor(cls) || (num_classes > 0 && cls >= num_classes)) {
            reject("class index out of range");
            continue;
        }
        Annotation a{static_cast<int>(cls), {v[1], v[2], v[3], v[4]}, std::nullopt};
        const double eps = 1e-6;
        if (!a.box.valid() || a.box.x1() < -eps || a.box.y1() < -eps || a.box.x2() > 1 + eps || a.box.y2() > 1 + eps) {
            reject("box outside [0,1] or degenerate");
            continue;
        }
        if (fields.size() == 6) {
            if (v[5] < 0.0 || v[5] > 1.0) {
                reject("confidence outside [0,1]");
                continue;
            }
            a.conf = v[5];
        }
        out.boxes.push_back(a);
    }
    return out;
}

std::string format_label(const Annotation& a) {
    char buf[128];
    int n = std::snprintf(buf, sizeof(buf), "%d %.6f %.6f %.6f %.6f", a.cls, a.box.cx, a.box.cy, a.box.w, a.box.h);
    if (a.conf) std::snprintf(buf + n, sizeof(buf) - static_cast<std::size_t>(n), " %.6f", *a.conf);
    return buf;
}

Dataset load_dataset(const fs::path& root, int num_classes) {
    const fs::path images = root / "images", labels = root / "labels";
    if (!fs::is_directory(images)) throw DatasetError("dataset not found: " + images.string() + " is not a directory");
    Dataset ds;
    if (fs::exists(root / "dataset.json")) {
        std::ifstream js(root / "dataset.json");
        const auto meta = nlohmann::json::parse(js);
        if (meta.contains("names")) ds.class_names = meta.at("names").get<std::vector<std::string>>();
    }
    if (num_classes <= 0) num_classes = static_cast<int>(ds.class_names.size());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(images))
        if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        AnnotatedImage item;
        item.source_id = f.stem().string();
        item.image = image::read_png(f);
        const fs::path lf = labels / (item.source_id + ".txt");
        if (!fs::exists(lf)) {
            std::cerr << "warning: no label file for " << f.filename().string() << "; treating as empty\n";
            ds.diagnostics.push_back({lf.string(), 0, "missing label file"});
        } else {
            std::ifstream in(lf);
            auto parsed = parse_labels(in, lf.string(), num_classes);
            item.boxes = std::move(parsed.boxes);
            for (auto& d : parsed.diagnostics) {
                std::cerr << "warning: " << d.file << ":" << d.line << ": " << d.message << "\n";
                ds.diagnostics.push_back(std::move(d));
            }
        }
        ds.items.push_back(std::move(item));
    }
    return ds;
}

geometry::Box LetterboxTransform::to_padded(const geometry::Box& b) const {
    const double t = static_cast<double>(target);
    return {(b.cx * new_w + pad_left) / t, (b.cy * new_h + pad_top) / t, b.w * new_w / t, b.h * new_h / t};
}

geometry::Box LetterboxTransform::to_original(const geometry::Box& b) const {
    const double t = static_cast<double>(target);
    return {(b.cx * t - pad_left) / new_w, (b.cy * t - pad_top) / new_h, b.w * t / new_w, b.h * t / new_h};
}

std::pair<Tensor, LetterboxTransform> letterbox(const Tensor& img, int target) {
    require(img.rank() == 3 && img.dim(0) == 3, "letterbox: expected [3, H, W]");
    if (target <= 0 || target % 32 != 0) throw ConfigError("letterbox: target must be a positive multiple of 32");
    LetterboxTransform tf;
    tf.src_h = img.dim(1);
    tf.src_w = img.dim(2);
    tf.target = target;
    const double r = static_cast<double>(target) / static_cast<double>(std::max(tf.src_w, tf.src_h));
    tf.new_w = std::clamp<std::int64_t>(std::llround(tf.src_w * r), 1, target);
    tf.new_h = std::clamp<std::int64_t>(std::llround(tf.src_h * r), 1, target);
    tf.pad_left = (target - tf.new_w) / 2;
    tf.pad_top = (target - tf.new_h) / 2;
    const Tensor resized = image::resize_bilinear(img, tf.new_h, tf.new_w);
    Tensor out({3, target, target}, 114.0 / 255.0);
    for (int c = 0; c < 3; ++c)
        for (std::int64_t y = 0; y < tf.new_h; ++y)
            std::copy_n(resized.ptr() + (c * tf.new_h + y) * tf.new_w, tf.new_w,
                        out.ptr() + (c * target + y + tf.pad_top) * target + tf.pad_left);
    return {std::move(out), tf};
}

AnnotatedImage letterbox(const AnnotatedImage& item, int target) {
    auto [img, tf] = letterbox(item.image, target);
    AnnotatedImage out{std::move(img), item.boxes, item.source_id};
    for (auto& a : out.boxes) a.box = tf.to_padded(a.box);
    return out;
}

AnnotatedImage flip_horizontal(const AnnotatedImage& item) {
    AnnotatedImage out{item.image, item.boxes, item.source_id};
    const std::int64_t c = item.image.dim(0), h = item.image.dim(1), w = item.image.dim(2);
    for (std::int64_t k = 0; k < c; ++k)
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x)
                out.image[(k * h + y) * w + x] = item.image[(k * h + y) * w + (w - 1 - x)];
    for (auto& a : out.boxes) a.box.cx = 1.0 - a.box.cx;
    return out;
}

void SyntheticSpec::validate() const {
    if (num_images < 1) throw ConfigError("synthetic: num_images must be >= 1");
    if (image_size <= 0 || image_size % 32 != 0) throw ConfigError("synthetic: image size must be a positive multiple of 32");
    if (min_objects < 0 || max_objects < min_objects) throw ConfigError("synthetic: invalid object count range");
    if (min_size < 2 || max_size < min_size) throw ConfigError("synthetic: invalid object size range");
    if (max_size + 4 > image_size) throw ConfigError("synthetic: objects do not fit the image");
}

namespace {

struct Rect {
    int x0, y0, x1, y1;  // half-open pixel extent
};

bool overlaps(const Rect& a, const Rect& b, int gap) {
    return a.x0 < b.x1 + gap && b.x0 < a.x1 + gap && a.y0 < b.y1 + gap && b.y0 < a.y1 + gap;
}

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

}  // namespace

AnnotatedImage render_synthetic(const SyntheticSpec& spec, int index) {
    spec.validate();
    require(index >= 0 && index < spec.num_images, "render_synthetic: index out of range");
    // Each image has its own stream so any one can be regenerated alone.
    Rng rng(spec.seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(index) + 1);
    const int s = spec.image_size;
    const std::int64_t plane = static_cast<std::int64_t>(s) * s;

    double base[3], amp[3];
    for (int c = 0; c < 3; ++c) {
        base[c] = rng.uniform(0.3, 0.7);
        amp[c] = rng.uniform(0.03, 0.08);
    }
    const double fx = rng.uniform(0.05, 0.3), fy = rng.uniform(0.05, 0.3);
    const double px = rng.uniform(0.0, 2 * std::numbers::pi), py = rng.uniform(0.0, 2 * std::numbers::pi);
    Tensor img({3, s, s});
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            const double wave = std::sin(fx * x + px) * std::sin(fy * y + py);
            for (int c = 0; c < 3; ++c)
                img[c * plane + y * s + x] = base[c] + amp[c] * wave + rng.uniform(-0.03, 0.03);
        }

    AnnotatedImage item;
    item.source_id = [&] {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "synth_%05d", index);
        return std::string(buf);
    }();
    std::vector<Rect> placed;
    const int count = static_cast<int>(rng.randint(spec.min_objects, spec.max_objects));
    for (int k = 0; k < count; ++k) {
        const int cls = static_cast<int>(rng.randint(0, 1));
        const int size = static_cast<int>(rng.randint(spec.min_size, spec.max_size));
        Rect r{};
        bool ok = false;
        for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
            const int x0 = static_cast<int>(rng.randint(1, s - size - 1));
            const int y0 = static_cast<int>(rng.randint(1, s - size - 1));
            r = {x0, y0, x0 + size, y0 + size};
            ok = std::none_of(placed.begin(), placed.end(), [&](const Rect& o) { return overlaps(r, o, 2); });
        }
        if (!ok) continue;
        // A colour that stands apart from the background on average.
        double color[3];
        for (int attempt = 0;; ++attempt) {
            double diff = 0.0;
            for (int c = 0; c < 3; ++c) {
                color[c] = rng.uniform(0.0, 1.0);
                diff += std::abs(color[c] - base[c]);
            }
            if (diff / 3.0 > 0.25 || attempt > 50) break;
        }
        const double cx = r.x0 + size / 2.0, cy = r.y0 + size / 2.0, rad2 = size * size / 4.0;
        int mx0 = s, my0 = s, mx1 = -1, my1 = -1;
        for (int y = r.y0; y < r.y1; ++y)
            for (int x = r.x0; x < r.x1; ++x) {
                const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
                if (cls == 0 && dx * dx + dy * dy > rad2) continue;
                for (int c = 0; c < 3; ++c) img[c * plane + y * s + x] = color[c];
                mx0 = std::min(mx0, x);
                my0 = std::min(my0, y);
                mx1 = std::max(mx1, x);
                my1 = std::max(my1, y);
            }
        placed.push_back(r);
        item.boxes.push_back({cls,
                              geometry::Box::from_corners(mx0 / double(s), my0 / double(s), (mx1 + 1) / double(s),
                                                          (my1 + 1) / double(s)),
                              std::nullopt});
    }
    for (auto& v : img.storage()) v = quantize(v);
    item.image = std::move(img);
    return item;
}

void generate_synthetic(const SyntheticSpec& spec, const fs::path& out) {
    spec.validate();
    fs::create_directories(out / "images");
    fs::create_directories(out / "labels");
    std::size_t total = 0;
    for (int i = 0; i < spec.num_images; ++i) {
        const AnnotatedImage item = render_synthetic(spec, i);
        image::write_png(out / "images" / (item.source_id + ".png"), item.image);
        std::ofstream lf(out / "labels" / (item.source_id + ".txt"), std::ios::binary | std::ios::trunc);
        for (const auto& a : item.boxes) lf << format_label(a) << '\n';
        total += item.boxes.size();
    }
    const nlohmann::json meta{{"names", kSyntheticClasses},
                              {"num_images", spec.num_images},
                              {"num_boxes", total},
                              {"image_size", spec.image_size},
                              {"seed", spec.seed},
                              {"object_size_px", {spec.min_size, spec.max_size}},
                              {"objects_per_image", {spec.min_objects, spec.max_objects}}};
    std::ofstream js(out / "dataset.json", std::ios::binary | std::ios::trunc);
    js << meta.dump(2) << '\n';
}

}  // namespace bpim::data
