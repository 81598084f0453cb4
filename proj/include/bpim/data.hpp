#pragma once

#include <filesystem>
#include <istream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "bpim/geometry.hpp"
#include "bpim/tensor.hpp"

namespace bpim::data {

/// Missing or unreadable dataset root.
class DatasetError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Annotation {
    int cls = 0;
    geometry::Box box;
    std::optional<double> conf;  // present in detection files only
};

struct AnnotatedImage {
    Tensor image;  // [3, H, W] in [0, 1]
    std::vector<Annotation> boxes;
    std::string source_id;
};

struct Diagnostic {
    std::string file;
    int line = 0;
    std::string message;
};

struct ParsedLabels {
    std::vector<Annotation> boxes;
    std::vector<Diagnostic> diagnostics;
};

/// Parses `class cx cy w h [conf]` lines. Blank lines are skipped; malformed
/// or out-of-range lines are rejected with a diagnostic. `num_classes` <= 0
/// disables the class bound.
ParsedLabels parse_labels(std::istream& in, const std::string& file, int num_classes = 0);

/// Formats one label line with six decimals; conf is appended when present.
std::string format_label(const Annotation& a);

struct Dataset {
    std::vector<AnnotatedImage> items;  // sorted by source_id
    std::vector<std::string> class_names;
    std::vector<Diagnostic> diagnostics;
};

/// Loads root/images/*.png with root/labels/<stem>.txt. Class names come from
/// root/dataset.json when present. Throws DatasetError if root/images is missing.
Dataset load_dataset(const std::filesystem::path& root, int num_classes = 0);

/// Maps normalised boxes between an image and its letterboxed square.
struct LetterboxTransform {
    std::int64_t src_w = 0, src_h = 0, target = 0;
    std::int64_t new_w = 0, new_h = 0;  // resized content size
    std::int64_t pad_left = 0, pad_top = 0;

    geometry::Box to_padded(const geometry::Box& b) const;
    geometry::Box to_original(const geometry::Box& b) const;
};

/// Aspect-preserving resize to fit `target`, then symmetric padding with 114/255.
std::pair<Tensor, LetterboxTransform> letterbox(const Tensor& image, int target);

/// Letterboxes an annotated image and its boxes.
AnnotatedImage letterbox(const AnnotatedImage& item, int target);

/// Mirrors the image and its boxes left to right.
AnnotatedImage flip_horizontal(const AnnotatedImage& item);

struct SyntheticSpec {
    std::uint64_t seed = 0;
    int num_images = 16;
    int image_size = 256;
    int min_objects = 2;
    int max_objects = 6;
    int min_size = 6;  // px
    int max_size = 24;

    /// Throws ConfigError.
    void validate() const;
};

inline const std::vector<std::string> kSyntheticClasses{"disc", "square"};

/// Renders one synthetic image in memory. Box extents are measured from the
/// rasterised masks.
AnnotatedImage render_synthetic(const SyntheticSpec& spec, int index);

/// Writes spec.num_images images and labels plus dataset.json under `out`.
void generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out);

}  // namespace bpim::data
