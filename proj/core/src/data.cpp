#include "lbt/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include <json.hpp>

#include "lbt/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace lbt {

namespace {

constexpr int kClassCircle = 0;
constexpr int kClassSquare = 1;
constexpr int kClassTriangle = 2;

double luma(double r, double g, double b) {
    return 0.299 * r + 0.587 * g + 0.114 * b;
}

struct Vec2 {
    double x, y;
};

// Convex polygon in CCW order (image coordinates, y down).
bool point_in_convex(const std::vector<Vec2>& poly, double px, double py) {
    bool any_neg = false, any_pos = false;
    const std::size_t n = poly.size();
    for (std::size_t i = 0; i < n; ++i) {
        const Vec2& a = poly[i];
        const Vec2& b = poly[(i + 1) % n];
        const double cross = (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x);
        if (cross < 0) any_neg = true;
        if (cross > 0) any_pos = true;
        if (any_neg && any_pos) return false;
    }
    return true;
}

struct ShapeGeometry {
    int class_id;
    Box box;                    // exact extent of the support
    double radius = 0;          // circle
    std::vector<Vec2> polygon;  // square / triangle, absolute coordinates
};

// Builds a shape whose exact bounding box has longest side `size`, centered
// at (cx, cy).
ShapeGeometry make_shape(int class_id, double cx, double cy, double size,
                         double rotation) {
    ShapeGeometry g;
    g.class_id = class_id;
    if (class_id == kClassCircle) {
        const double r = 0.5 * size;
        g.radius = r;
        g.box = Box{cx - r, cy - r, cx + r, cy + r};
        return g;
    }

    std::vector<Vec2> base;
    if (class_id == kClassSquare) {
        base = {{-1, -1}, {1, -1}, {1, 1}, {-1, 1}};
    } else {
        base = {{0, -1}, {1, 1}, {-1, 1}};  // apex up, flat base
    }
    const double c = std::cos(rotation), s = std::sin(rotation);
    double min_x = 1e30, max_x = -1e30, min_y = 1e30, max_y = -1e30;
    for (auto& p : base) {
        const double rx = c * p.x - s * p.y;
        const double ry = s * p.x + c * p.y;
        p = {rx, ry};
        min_x = std::min(min_x, rx);
        max_x = std::max(max_x, rx);
        min_y = std::min(min_y, ry);
        max_y = std::max(max_y, ry);
    }
    // Scale so the rotated extent's longest side equals `size`, then center.
    const double scale = size / std::max(max_x - min_x, max_y - min_y);
    const double mid_x = 0.5 * (min_x + max_x);
    const double mid_y = 0.5 * (min_y + max_y);
    const double bw = (max_x - min_x) * scale;
    const double bh = (max_y - min_y) * scale;
    g.polygon = std::move(base);
    for (auto& p : g.polygon) {
        p.x = (p.x - mid_x) * scale + cx;
        p.y = (p.y - mid_y) * scale + cy;
    }
    g.box = Box{cx - 0.5 * bw, cy - 0.5 * bh, cx + 0.5 * bw, cy + 0.5 * bh};
    return g;
}

double coverage(const ShapeGeometry& g, int px, int py) {
    int inside = 0;
    for (int sy = 0; sy < 4; ++sy) {
        for (int sx = 0; sx < 4; ++sx) {
            const double x = px + (sx + 0.5) / 4.0;
            const double y = py + (sy + 0.5) / 4.0;
            bool in;
            if (g.class_id == kClassCircle) {
                const double dx = x - g.box.cx();
                const double dy = y - g.box.cy();
                in = dx * dx + dy * dy <= g.radius * g.radius;
            } else {
                in = point_in_convex(g.polygon, x, y);
            }
            inside += in ? 1 : 0;
        }
    }
    return inside / 16.0;
}

int sample_class(Rng& rng, const std::vector<double>& weights) {
    double total = 0;
    for (double w : weights) total += w;
    double u = rng.uniform() * total;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        u -= weights[i];
        if (u < 0) return static_cast<int>(i);
    }
    return static_cast<int>(weights.size()) - 1;
}

// One placement attempt for a whole scene; returns nullopt when an object
// cannot be placed within the rejection budget.
std::optional<AnnotatedImage> try_scene(const ShapesConfig& cfg, Rng& rng,
                                        const std::string& image_id) {
    const int W = cfg.image_size;
    AnnotatedImage out;
    out.image_id = image_id;
    out.pixels = Image(W, W);

    // Background: muted base color + bilinear value-noise lattice + fine noise.
    const double base_r = rng.uniform(0.15, 0.85);
    const double base_g = rng.uniform(0.15, 0.85);
    const double base_b = rng.uniform(0.15, 0.85);
    constexpr int kLattice = 7;
    double lattice[kLattice][kLattice];
    for (auto& row : lattice)
        for (double& v : row)
            v = rng.uniform(-cfg.texture_amplitude, cfg.texture_amplitude);

    for (int y = 0; y < W; ++y) {
        for (int x = 0; x < W; ++x) {
            const double fy = y * (kLattice - 1.0) / (W - 1.0);
            const double fx = x * (kLattice - 1.0) / (W - 1.0);
            const int iy = std::min(static_cast<int>(fy), kLattice - 2);
            const int ix = std::min(static_cast<int>(fx), kLattice - 2);
            const double ty = fy - iy, tx = fx - ix;
            const double tex =
                lattice[iy][ix] * (1 - ty) * (1 - tx) +
                lattice[iy][ix + 1] * (1 - ty) * tx +
                lattice[iy + 1][ix] * ty * (1 - tx) +
                lattice[iy + 1][ix + 1] * ty * tx;
            out.pixels.at(y, x, 0) = base_r + tex + rng.uniform(-cfg.pixel_noise, cfg.pixel_noise);
            out.pixels.at(y, x, 1) = base_g + tex + rng.uniform(-cfg.pixel_noise, cfg.pixel_noise);
            out.pixels.at(y, x, 2) = base_b + tex + rng.uniform(-cfg.pixel_noise, cfg.pixel_noise);
        }
    }

    const double bg_luma = luma(base_r, base_g, base_b);
    const int n_objects =
        cfg.min_objects +
        static_cast<int>(rng.uniform_int(cfg.max_objects - cfg.min_objects + 1));

    std::vector<ShapeGeometry> placed;
    for (int obj = 0; obj < n_objects; ++obj) {
        const int class_id = sample_class(rng, cfg.class_weights);
        const double size = rng.uniform(cfg.min_size, cfg.max_size);
        const double max_rot = cfg.max_rotation_deg * std::numbers::pi / 180.0;
        const double rotation =
            class_id == kClassCircle ? 0.0 : rng.uniform(-max_rot, max_rot);

        bool done = false;
        for (int attempt = 0; attempt < 100 && !done; ++attempt) {
            // Probe extent first so the center range keeps the box inside.
            ShapeGeometry probe = make_shape(class_id, 0, 0, size, rotation);
            const double bw = probe.box.width(), bh = probe.box.height();
            if (bw > W || bh > W) break;
            const double cx = rng.uniform(0.5 * bw, W - 0.5 * bw);
            const double cy = rng.uniform(0.5 * bh, W - 0.5 * bh);
            ShapeGeometry g = make_shape(class_id, cx, cy, size, rotation);
            bool ok = true;
            for (const auto& other : placed) {
                if (iou(g.box, other.box) > cfg.max_overlap_iou) {
                    ok = false;
                    break;
                }
            }
            if (!ok) continue;
            placed.push_back(std::move(g));
            done = true;
        }
        if (!done) return std::nullopt;
    }

    for (const auto& g : placed) {
        double cr, cg, cb;
        for (int tries = 0;; ++tries) {
            cr = rng.uniform(0.05, 0.95);
            cg = rng.uniform(0.05, 0.95);
            cb = rng.uniform(0.05, 0.95);
            if (std::abs(luma(cr, cg, cb) - bg_luma) >= cfg.min_contrast) break;
            if (tries >= 50) break;
        }
        const int x_lo = std::max(0, static_cast<int>(std::floor(g.box.x1)));
        const int y_lo = std::max(0, static_cast<int>(std::floor(g.box.y1)));
        const int x_hi = std::min(W - 1, static_cast<int>(std::ceil(g.box.x2)));
        const int y_hi = std::min(W - 1, static_cast<int>(std::ceil(g.box.y2)));
        for (int y = y_lo; y <= y_hi; ++y) {
            for (int x = x_lo; x <= x_hi; ++x) {
                const double cov = coverage(g, x, y);
                if (cov <= 0) continue;
                out.pixels.at(y, x, 0) = (1 - cov) * out.pixels.at(y, x, 0) + cov * cr;
                out.pixels.at(y, x, 1) = (1 - cov) * out.pixels.at(y, x, 1) + cov * cg;
                out.pixels.at(y, x, 2) = (1 - cov) * out.pixels.at(y, x, 2) + cov * cb;
            }
        }
        out.annotations.push_back(Annotation{g.box, g.class_id});
    }

    quantize_u8(out.pixels);
    return out;
}

json annotations_to_json(const std::vector<AnnotatedImage>& images) {
    json arr = json::array();
    for (const auto& img : images) {
        json objects = json::array();
        for (const auto& a : img.annotations) {
            objects.push_back({{"x1", a.box.x1},
                               {"y1", a.box.y1},
                               {"x2", a.box.x2},
                               {"y2", a.box.y2},
                               {"class", a.class_id}});
        }
        arr.push_back({{"image_id", img.image_id},
                       {"width", img.pixels.width},
                       {"height", img.pixels.height},
                       {"objects", std::move(objects)}});
    }
    return arr;
}

void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

std::string format_id(const char* prefix, int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%06d", prefix, index);
    return buf;
}

}  // namespace

std::string shapes_config_to_json_string(const ShapesConfig& c) {
    json j = {{"n_train", c.n_train},
              {"n_test", c.n_test},
              {"image_size", c.image_size},
              {"class_names", c.class_names},
              {"class_weights", c.class_weights},
              {"min_objects", c.min_objects},
              {"max_objects", c.max_objects},
              {"min_size", c.min_size},
              {"max_size", c.max_size},
              {"max_overlap_iou", c.max_overlap_iou},
              {"max_rotation_deg", c.max_rotation_deg},
              {"texture_amplitude", c.texture_amplitude},
              {"pixel_noise", c.pixel_noise},
              {"min_contrast", c.min_contrast}};
    return j.dump(2) + "\n";
}

ShapesConfig shapes_config_from_json_string(const std::string& text) {
    json j = json::parse(text);
    ShapesConfig c;  // missing keys keep their defaults
    c.n_train = j.value("n_train", c.n_train);
    c.n_test = j.value("n_test", c.n_test);
    c.image_size = j.value("image_size", c.image_size);
    c.class_names = j.value("class_names", c.class_names);
    c.class_weights = j.value("class_weights", c.class_weights);
    c.min_objects = j.value("min_objects", c.min_objects);
    c.max_objects = j.value("max_objects", c.max_objects);
    c.min_size = j.value("min_size", c.min_size);
    c.max_size = j.value("max_size", c.max_size);
    c.max_overlap_iou = j.value("max_overlap_iou", c.max_overlap_iou);
    c.max_rotation_deg = j.value("max_rotation_deg", c.max_rotation_deg);
    c.texture_amplitude = j.value("texture_amplitude", c.texture_amplitude);
    c.pixel_noise = j.value("pixel_noise", c.pixel_noise);
    c.min_contrast = j.value("min_contrast", c.min_contrast);
    return c;
}

AnnotatedImage generate_scene(const ShapesConfig& config, std::uint64_t scene_seed,
                              const std::string& image_id) {
    for (std::uint64_t attempt = 0; attempt < 64; ++attempt) {
        Rng rng(derive_seed(scene_seed, "scene", attempt));
        if (auto scene = try_scene(config, rng, image_id)) return std::move(*scene);
    }
    throw std::runtime_error("generate_scene: could not place objects for " + image_id);
}

DatasetManifest generate_dataset(const ShapesConfig& config, std::uint64_t seed,
                                 const std::string& out_dir) {
    if (config.n_train <= 0 || config.n_test <= 0 || config.image_size < 32)
        throw std::invalid_argument("generate_dataset: invalid config");
    if (config.class_names.size() != config.class_weights.size() ||
        config.class_names.empty() || config.class_names.size() > 3)
        throw std::invalid_argument("generate_dataset: bad class config");
    if (config.min_objects < 1 || config.max_objects < config.min_objects)
        throw std::invalid_argument("generate_dataset: bad object counts");

    fs::create_directories(fs::path(out_dir) / "images");

    DatasetManifest manifest;
    manifest.image_size = config.image_size;
    manifest.class_names = config.class_names;
    manifest.seed = seed;

    std::vector<AnnotatedImage> train, test;
    for (int i = 0; i < config.n_train; ++i) {
        const std::string id = format_id("train", i);
        train.push_back(generate_scene(config, derive_seed(seed, "image", i), id));
        manifest.train_ids.push_back(id);
    }
    for (int i = 0; i < config.n_test; ++i) {
        const std::string id = format_id("test", i);
        test.push_back(generate_scene(
            config, derive_seed(seed, "image", 0x100000 + i), id));
        manifest.test_ids.push_back(id);
    }

    for (const auto& img : train)
        write_png((fs::path(out_dir) / "images" / (img.image_id + ".png")).string(),
                  img.pixels);
    for (const auto& img : test)
        write_png((fs::path(out_dir) / "images" / (img.image_id + ".png")).string(),
                  img.pixels);

    write_text_file(fs::path(out_dir) / "annotations_train.json",
                    annotations_to_json(train).dump(2) + "\n");
    write_text_file(fs::path(out_dir) / "annotations_test.json",
                    annotations_to_json(test).dump(2) + "\n");

    json m = {{"dataset", "shapesworld"},
              {"version", 1},
              {"image_size", manifest.image_size},
              {"class_names", manifest.class_names},
              {"seed", manifest.seed},
              {"n_train", config.n_train},
              {"n_test", config.n_test},
              {"train_ids", manifest.train_ids},
              {"test_ids", manifest.test_ids}};
    write_text_file(fs::path(out_dir) / "manifest.json", m.dump(2) + "\n");
    return manifest;
}

LabeledSplit split_labeled(const DatasetManifest& manifest, double fraction,
                           std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0))
        throw std::invalid_argument("split_labeled: fraction must be in (0,1)");
    const std::size_t n = manifest.train_ids.size();
    const std::size_t k = static_cast<std::size_t>(fraction * static_cast<double>(n));
    if (k == 0)
        throw std::invalid_argument("split_labeled: labeled count is zero");

    std::vector<std::string> ids = manifest.train_ids;
    Rng rng(derive_seed(seed, "labeled-split"));
    rng.shuffle(ids);

    LabeledSplit split;
    split.fraction = fraction;
    split.seed = seed;
    split.labeled_ids.assign(ids.begin(), ids.begin() + static_cast<long>(k));
    split.unlabeled_ids.assign(ids.begin() + static_cast<long>(k), ids.end());
    std::sort(split.labeled_ids.begin(), split.labeled_ids.end());
    std::sort(split.unlabeled_ids.begin(), split.unlabeled_ids.end());
    return split;
}

AnnotatedImage weak_augment(const AnnotatedImage& img, std::uint64_t seed,
                            std::optional<bool> force_flip,
                            double flip_probability) {
    bool flip;
    if (force_flip.has_value()) {
        flip = *force_flip;
    } else {
        Rng rng(derive_seed(seed, "weak-flip"));
        flip = rng.bernoulli(flip_probability);
    }
    if (!flip) return img;

    AnnotatedImage out;
    out.image_id = img.image_id;
    out.pixels = hflip_image(img.pixels);
    out.annotations.reserve(img.annotations.size());
    for (const auto& a : img.annotations)
        out.annotations.push_back(
            Annotation{hflip_box(a.box, img.pixels.width), a.class_id});
    return out;
}

namespace {

void gaussian_blur_inplace(Image& img, double sigma) {
    const int radius = static_cast<int>(std::ceil(2.5 * sigma));
    if (radius < 1) return;
    std::vector<double> kernel(2 * radius + 1);
    double norm = 0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        norm += kernel[i + radius];
    }
    for (double& k : kernel) k /= norm;

    const int W = img.width, H = img.height;
    auto reflect = [](int i, int n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - 1 - i;
        return i;
    };
    Image tmp(W, H);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c) {
                double acc = 0;
                for (int k = -radius; k <= radius; ++k)
                    acc += kernel[k + radius] * img.at(y, reflect(x + k, W), c);
                tmp.at(y, x, c) = acc;
            }
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c) {
                double acc = 0;
                for (int k = -radius; k <= radius; ++k)
                    acc += kernel[k + radius] * tmp.at(reflect(y + k, H), x, c);
                img.at(y, x, c) = acc;
            }
}

}  // namespace

Image strong_augment(const Image& pixels, std::uint64_t seed,
                     const AugmentationConfig& config) {
    Rng rng(derive_seed(seed, "strong-aug"));
    Image img = pixels;
    const std::size_t n = img.px.size();

    // Photometric jitter, fixed order: brightness, contrast, saturation.
    const double brightness = rng.uniform(config.brightness_min, config.brightness_max);
    const double contrast = rng.uniform(config.contrast_min, config.contrast_max);
    const double saturation = rng.uniform(config.saturation_min, config.saturation_max);

    for (double& v : img.px) v *= brightness;

    double mean = 0;
    for (std::size_t i = 0; i + 2 < n; i += 3)
        mean += luma(img.px[i], img.px[i + 1], img.px[i + 2]);
    mean /= static_cast<double>(n / 3);
    for (double& v : img.px) v = (v - mean) * contrast + mean;

    for (std::size_t i = 0; i + 2 < n; i += 3) {
        const double g = luma(img.px[i], img.px[i + 1], img.px[i + 2]);
        for (int c = 0; c < 3; ++c)
            img.px[i + c] = g + (img.px[i + c] - g) * saturation;
    }

    if (rng.bernoulli(config.grayscale_probability)) {
        for (std::size_t i = 0; i + 2 < n; i += 3) {
            const double g = luma(img.px[i], img.px[i + 1], img.px[i + 2]);
            img.px[i] = img.px[i + 1] = img.px[i + 2] = g;
        }
    }

    const double sigma = rng.uniform(config.blur_sigma_min, config.blur_sigma_max);
    if (sigma > 1e-6) gaussian_blur_inplace(img, sigma);

    for (int patch = 0; patch < config.cutout_count; ++patch) {
        const int size = static_cast<int>(
            std::lround(rng.uniform(config.cutout_min_size, config.cutout_max_size)));
        if (size <= 0 || size > img.width || size > img.height) continue;
        const int x0 = static_cast<int>(rng.uniform_int(img.width - size + 1));
        const int y0 = static_cast<int>(rng.uniform_int(img.height - size + 1));
        for (int y = y0; y < y0 + size; ++y)
            for (int x = x0; x < x0 + size; ++x)
                for (int c = 0; c < 3; ++c)
                    img.at(y, x, c) = config.cutout_fill;
    }

    for (double& v : img.px) v = std::min(std::max(v, 0.0), 1.0);
    return img;
}

Dataset Dataset::load(const std::string& dir) {
    Dataset ds;
    ds.dir_ = dir;

    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw std::runtime_error("Dataset::load: missing manifest.json in " + dir);
    json m = json::parse(mf);
    ds.manifest_.image_size = m.at("image_size").get<int>();
    ds.manifest_.class_names = m.at("class_names").get<std::vector<std::string>>();
    ds.manifest_.seed = m.at("seed").get<std::uint64_t>();
    ds.manifest_.train_ids = m.at("train_ids").get<std::vector<std::string>>();
    ds.manifest_.test_ids = m.at("test_ids").get<std::vector<std::string>>();

    for (const char* name : {"annotations_train.json", "annotations_test.json"}) {
        std::ifstream af(fs::path(dir) / name);
        if (!af) throw std::runtime_error(std::string("Dataset::load: missing ") + name);
        json arr = json::parse(af);
        for (const auto& entry : arr) {
            std::vector<Annotation> anns;
            for (const auto& obj : entry.at("objects")) {
                anns.push_back(Annotation{
                    Box{obj.at("x1").get<double>(), obj.at("y1").get<double>(),
                        obj.at("x2").get<double>(), obj.at("y2").get<double>()},
                    obj.at("class").get<int>()});
            }
            ds.annotations_[entry.at("image_id").get<std::string>()] = std::move(anns);
        }
    }

    auto cache_pixels = [&](const std::string& id) {
        Image img = read_png((fs::path(dir) / "images" / (id + ".png")).string());
        if (img.width != ds.manifest_.image_size || img.height != ds.manifest_.image_size)
            throw std::runtime_error("Dataset::load: unexpected image size for " + id);
        std::vector<std::uint8_t> u8(img.px.size());
        for (std::size_t i = 0; i < img.px.size(); ++i)
            u8[i] = static_cast<std::uint8_t>(std::lround(img.px[i] * 255.0));
        ds.pixel_cache_[id] = std::move(u8);
    };
    for (const auto& id : ds.manifest_.train_ids) cache_pixels(id);
    for (const auto& id : ds.manifest_.test_ids) cache_pixels(id);
    return ds;
}

const std::vector<Annotation>& Dataset::annotations(const std::string& image_id) const {
    auto it = annotations_.find(image_id);
    if (it == annotations_.end())
        throw std::out_of_range("Dataset: unknown image id " + image_id);
    return it->second;
}

AnnotatedImage Dataset::load_image(const std::string& image_id) const {
    auto it = pixel_cache_.find(image_id);
    if (it == pixel_cache_.end())
        throw std::out_of_range("Dataset: unknown image id " + image_id);
    AnnotatedImage out;
    out.image_id = image_id;
    out.pixels = Image(manifest_.image_size, manifest_.image_size);
    for (std::size_t i = 0; i < it->second.size(); ++i)
        out.pixels.px[i] = it->second[i] / 255.0;
    out.annotations = annotations(image_id);
    return out;
}

}  // namespace lbt
