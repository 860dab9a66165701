#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lbt/box.hpp"
#include "lbt/image.hpp"

namespace lbt {

struct Annotation {
    Box box;
    int class_id = 0;
};

struct AnnotatedImage {
    std::string image_id;
    Image pixels;
    std::vector<Annotation> annotations;
};

// Generation parameters for the synthetic shapes dataset. Sizes are the
// longest side of the annotation box in pixels. Class weights skew the class
// distribution (circles deliberately dominate triangles).
struct ShapesConfig {
    int n_train = 2000;
    int n_test = 500;
    int image_size = 96;
    std::vector<std::string> class_names = {"circle", "square", "triangle"};
    std::vector<double> class_weights = {3.0, 2.0, 1.0};
    int min_objects = 1;
    int max_objects = 4;
    double min_size = 12.0;
    double max_size = 40.0;
    double max_overlap_iou = 0.4;
    double max_rotation_deg = 25.0;  // squares and triangles only
    double texture_amplitude = 0.12;
    double pixel_noise = 0.04;
    double min_contrast = 0.15;
};

struct DatasetManifest {
    int image_size = 0;
    std::vector<std::string> class_names;
    std::uint64_t seed = 0;
    std::vector<std::string> train_ids;
    std::vector<std::string> test_ids;
};

// Result of carving the train set into labeled/unlabeled parts. Keeps its own
// provenance so runs can be reproduced from the record alone.
struct LabeledSplit {
    double fraction = 0.0;
    std::uint64_t seed = 0;
    std::vector<std::string> labeled_ids;
    std::vector<std::string> unlabeled_ids;
};

// Weak augmentation is flip-only; strong augmentation is photometric-only
// (no geometric transform), so boxes valid for the input stay valid for the
// output.
struct AugmentationConfig {
    double flip_probability = 0.5;

    double brightness_min = 0.6, brightness_max = 1.4;
    double contrast_min = 0.6, contrast_max = 1.4;
    double saturation_min = 0.6, saturation_max = 1.4;
    double grayscale_probability = 0.2;
    double blur_sigma_min = 0.5, blur_sigma_max = 1.5;
    int cutout_count = 1;
    double cutout_min_size = 8.0, cutout_max_size = 20.0;
    double cutout_fill = 0.5;
};

std::string shapes_config_to_json_string(const ShapesConfig& config);
ShapesConfig shapes_config_from_json_string(const std::string& text);

// Renders one scene deterministically from its seed. Exposed for tests.
AnnotatedImage generate_scene(const ShapesConfig& config, std::uint64_t scene_seed,
                              const std::string& image_id);

// Writes images/, annotations_{train,test}.json and manifest.json under
// out_dir. Deterministic given (config, seed).
DatasetManifest generate_dataset(const ShapesConfig& config, std::uint64_t seed,
                                 const std::string& out_dir);

// floor(fraction * N) train ids chosen uniformly without replacement.
// Throws if the labeled count comes out zero.
LabeledSplit split_labeled(const DatasetManifest& manifest, double fraction,
                           std::uint64_t seed);

AnnotatedImage weak_augment(const AnnotatedImage& img, std::uint64_t seed,
                            std::optional<bool> force_flip = std::nullopt,
                            double flip_probability = 0.5);

Image strong_augment(const Image& pixels, std::uint64_t seed,
                     const AugmentationConfig& config);

// On-disk dataset handle. Loads the manifest and annotations eagerly and the
// pixel data into an 8-bit cache (a 2500-image split is ~70 MB).
class Dataset {
public:
    static Dataset load(const std::string& dir);

    const DatasetManifest& manifest() const { return manifest_; }
    const std::string& dir() const { return dir_; }
    int num_classes() const { return static_cast<int>(manifest_.class_names.size()); }

    const std::vector<Annotation>& annotations(const std::string& image_id) const;
    AnnotatedImage load_image(const std::string& image_id) const;

private:
    std::string dir_;
    DatasetManifest manifest_;
    std::map<std::string, std::vector<Annotation>> annotations_;
    std::map<std::string, std::vector<std::uint8_t>> pixel_cache_;
};

}  // namespace lbt
