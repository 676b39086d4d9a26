#pragma once

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "array.hpp"
#include "box.hpp"
#include "png_io.hpp"

namespace patchproto {

enum class LesionKind { Clean, BrightBlob, DarkEllipse };

inline LesionKind lesion_kind_from_name(const std::string& s) {
    if (s == "normal" || s == "clean") return LesionKind::Clean;
    if (s == "bright_blob" || s == "blob") return LesionKind::BrightBlob;
    if (s == "dark_ellipse" || s == "ellipse") return LesionKind::DarkEllipse;
    throw ConfigError("unknown lesion class recipe: " + s);
}

struct ClassRecipe {
    std::string name;
    LesionKind kind = LesionKind::Clean;
};

struct SyntheticSpec {
    int image_size = 64;
    std::vector<ClassRecipe> classes = {{"fluid", LesionKind::DarkEllipse},
                                        {"drusen", LesionKind::BrightBlob}};
    int lesions_min = 1, lesions_max = 3;
    double radius_min = 5.0, radius_max = 10.0;  // lesion radius range in pixels
    double noise_sigma = 0.05;
    int train_count = 200, val_count = 50, test_count = 50;
    std::uint64_t seed = 0;

    void validate() const {
        if (image_size <= 0) throw ConfigError("image_size must be positive");
        if (classes.empty()) throw ConfigError("at least one class required");
        if (lesions_min < 1 || lesions_max < lesions_min)
            throw ConfigError("invalid lesions_per_image range");
        if (radius_min <= 0 || radius_max < radius_min)
            throw ConfigError("invalid lesion_radius range");
        if (noise_sigma < 0) throw ConfigError("noise_sigma must be non-negative");
        if (train_count <= 0 || val_count <= 0 || test_count <= 0)
            throw ConfigError("split counts must be positive");
    }
};

struct Sample {
    std::string path;
    Array image;  // {H, W} gray in [0,1]
    int label = 0;
    std::vector<Box> boxes;
};

namespace detail {

struct Lesion {
    LesionKind kind;
    double cx, cy;        // center, pixels
    double sx, sy;        // Gaussian sigmas per axis
    double amplitude;
    Box box;
};

// Detection cutoff for box extents: a single lesion's contribution exceeds
// 3*noise_sigma only inside its box, even with up to `max_lesions` lesions
// present (per-lesion threshold 3*sigma/max_lesions).
inline double cut_radius(double amplitude, double sigma_axis, double noise_sigma,
                         int max_lesions) {
    double thresh = noise_sigma > 0 ? 3.0 * noise_sigma / max_lesions : amplitude / 100.0;
    if (amplitude <= thresh) return sigma_axis;  // degenerate recipe, keep a minimal box
    return sigma_axis * std::sqrt(2.0 * std::log(amplitude / thresh));
}

inline Array render_background(int size, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> phase(0.0, 2.0 * M_PI);
    std::uniform_int_distribution<int> waves(1, 2);
    double p1 = phase(rng), p2 = phase(rng);
    int k1 = waves(rng), k2 = waves(rng);
    Array bg({size, size});
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            double v = 0.55 + 0.03 * std::sin(2.0 * M_PI * k1 * y / size + p1) +
                       0.02 * std::sin(2.0 * M_PI * k2 * x / size + p2);
            bg.data[y * size + x] = static_cast<float>(v);
        }
    return bg;
}

inline void add_lesion(Array& img, const Lesion& l) {
    int size = img.shape[0];
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            double ex = (x - l.cx) / l.sx;
            double ey = (y - l.cy) / l.sy;
            double g = l.amplitude * std::exp(-0.5 * (ex * ex + ey * ey));
            float& v = img.data[y * size + x];
            v += static_cast<float>(l.kind == LesionKind::DarkEllipse ? -g : g);
        }
}

}  // namespace detail

/// Noise-free rendering of one sample, fully determined by (spec, index).
/// The generator adds seeded Gaussian noise on top of this; the separation
/// lets tests scan lesion pixels against the clean background.
struct CleanSample {
    Array background;
    Array clean;  // background + lesions, unclamped
    int label;
    std::vector<Box> boxes;
};

/// Labels cycle through the classes within each split, so every split is
/// exactly balanced (any remainder goes to the lowest class ids).
inline int label_for_index(const SyntheticSpec& spec, std::uint64_t index) {
    std::uint64_t pos = index;
    for (std::uint64_t count : {static_cast<std::uint64_t>(spec.train_count),
                                static_cast<std::uint64_t>(spec.val_count)}) {
        if (pos < count) break;
        pos -= count;
    }
    return static_cast<int>(pos % spec.classes.size());
}

inline CleanSample render_clean_sample(const SyntheticSpec& spec, std::uint64_t index) {
    std::mt19937_64 rng(spec.seed ^ index);
    int size = spec.image_size;
    int label = label_for_index(spec, index);
    CleanSample out;
    out.label = label;
    out.background = detail::render_background(size, rng);
    out.clean = out.background;
    const ClassRecipe& recipe = spec.classes[static_cast<std::size_t>(label)];
    if (recipe.kind == LesionKind::Clean) return out;

    std::uniform_int_distribution<int> count_pick(spec.lesions_min, spec.lesions_max);
    std::uniform_real_distribution<double> radius_pick(spec.radius_min, spec.radius_max);
    std::uniform_real_distribution<double> amp_pick(0.35, 0.45);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    int count = count_pick(rng);
    std::vector<detail::Lesion> lesions;
    for (int i = 0; i < count; ++i) {
        detail::Lesion l;
        l.kind = recipe.kind;
        l.amplitude = amp_pick(rng);
        l.sx = radius_pick(rng) * 0.5;
        l.sy = l.sx;
        if (recipe.kind == LesionKind::DarkEllipse) l.sy = l.sx * (0.5 + unit(rng));
        double cutx = detail::cut_radius(l.amplitude, l.sx, spec.noise_sigma, spec.lesions_max);
        double cuty = detail::cut_radius(l.amplitude, l.sy, spec.noise_sigma, spec.lesions_max);
        int hx = static_cast<int>(std::ceil(cutx));
        int hy = static_cast<int>(std::ceil(cuty));
        if (2 * hx + 2 >= size || 2 * hy + 2 >= size)
            throw ConfigError("lesion too large for image size");
        // keep boxes inside bounds and separated so detectability stays per-lesion
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
            l.cx = hx + 1 + unit(rng) * (size - 2.0 * (hx + 1));
            l.cy = hy + 1 + unit(rng) * (size - 2.0 * (hy + 1));
            placed = true;
            for (const auto& other : lesions) {
                double dx = l.cx - other.cx, dy = l.cy - other.cy;
                double min_sep = std::max({2.0 * hx, 2.0 * hy,
                                           2.0 * static_cast<double>(other.box.width())});
                if (dx * dx + dy * dy < min_sep * min_sep) { placed = false; break; }
            }
        }
        if (!placed) continue;  // crowded image: fewer lesions than drawn
        int icx = static_cast<int>(std::lround(l.cx));
        int icy = static_cast<int>(std::lround(l.cy));
        l.box = Box{icx - hx, icy - hy, icx + hx + 1, icy + hy + 1}.clipped(size, size);
        lesions.push_back(l);
    }
    if (lesions.empty()) {
        // guarantee at least one lesion for lesion classes: center placement
        detail::Lesion l;
        l.kind = recipe.kind;
        l.amplitude = 0.5;
        l.sx = l.sy = spec.radius_min * 0.5;
        l.cx = l.cy = size / 2.0;
        double cut = detail::cut_radius(l.amplitude, l.sx, spec.noise_sigma, spec.lesions_max);
        int hx = static_cast<int>(std::ceil(cut));
        int icx = size / 2;
        l.box = Box{icx - hx, icx - hx, icx + hx + 1, icx + hx + 1}.clipped(size, size);
        lesions.push_back(l);
    }
    for (const auto& l : lesions) {
        detail::add_lesion(out.clean, l);
        out.boxes.push_back(l.box);
    }
    return out;
}

inline Sample render_sample(const SyntheticSpec& spec, std::uint64_t index) {
    CleanSample cs = render_clean_sample(spec, index);
    // noise drawn from an independent stream so clean renders stay comparable
    std::mt19937_64 rng(spec.seed ^ index ^ 0x6e6f697365ULL);
    std::normal_distribution<double> noise(0.0, spec.noise_sigma);
    Sample s;
    s.label = cs.label;
    s.boxes = cs.boxes;
    s.image = std::move(cs.clean);
    for (auto& v : s.image.data)
        v = std::clamp(static_cast<float>(v + noise(rng)), 0.0f, 1.0f);
    return s;
}

inline void write_manifests(const std::filesystem::path& split_dir,
                            const std::vector<Sample>& samples) {
    std::ofstream labels(split_dir / "labels.jsonl");
    std::ofstream boxes(split_dir / "boxes.jsonl");
    if (!labels || !boxes) throw IoError("cannot write manifests in " + split_dir.string());
    for (const auto& s : samples) {
        nlohmann::json jb = nlohmann::json::array();
        for (const auto& b : s.boxes) jb.push_back({b.x_min, b.y_min, b.x_max, b.y_max});
        nlohmann::json rec = {{"path", s.path}, {"label", s.label}, {"boxes", jb}};
        labels << rec.dump() << "\n";
        boxes << rec.dump() << "\n";
    }
}

/// Writes train/val/test folders of 8-bit grayscale PNGs plus JSON-lines
/// manifests. Byte-identical output for a fixed spec.
inline void generate_synthetic_dataset(const SyntheticSpec& spec,
                                       const std::filesystem::path& out_dir) {
    spec.validate();
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

    nlohmann::json meta;
    meta["image_size"] = spec.image_size;
    meta["seed"] = spec.seed;
    nlohmann::json jc = nlohmann::json::array();
    for (const auto& c : spec.classes) {
        std::string kind = c.kind == LesionKind::Clean ? "normal"
                           : c.kind == LesionKind::BrightBlob ? "bright_blob" : "dark_ellipse";
        jc.push_back({{"name", c.name}, {"kind", kind}});
    }
    meta["classes"] = jc;
    {
        std::ofstream mf(out_dir / "dataset.json");
        if (!mf) throw IoError("cannot write " + (out_dir / "dataset.json").string());
        mf << meta.dump(2) << "\n";
    }

    std::uint64_t index = 0;
    const std::pair<const char*, int> splits[] = {
        {"train", spec.train_count}, {"val", spec.val_count}, {"test", spec.test_count}};
    for (const auto& [name, count] : splits) {
        fs::path dir = out_dir / name;
        fs::create_directories(dir, ec);
        if (ec) throw IoError("cannot create " + dir.string());
        std::vector<Sample> samples;
        samples.reserve(static_cast<std::size_t>(count));
        for (int i = 0; i < count; ++i, ++index) {
            Sample s = render_sample(spec, index);
            char buf[32];
            std::snprintf(buf, sizeof(buf), "img_%05llu.png",
                          static_cast<unsigned long long>(index));
            s.path = buf;
            write_png_gray8((dir / s.path).string(), s.image);
            samples.push_back(std::move(s));
        }
        write_manifests(dir, samples);
    }
}

struct Dataset {
    std::vector<Sample> samples;
    int num_classes = 0;
    std::vector<std::string> class_names;
    int skipped_files = 0;  // files in the folder not referenced by the manifest
};

/// Loads one split directory (containing labels.jsonl / boxes.jsonl).
inline Dataset load_dataset(const std::filesystem::path& split_dir) {
    namespace fs = std::filesystem;
    fs::path manifest = split_dir / "labels.jsonl";
    std::ifstream in(manifest);
    if (!in) throw DataError("missing manifest: " + manifest.string());
    Dataset ds;
    std::string line;
    int lineno = 0;
    std::set<std::string> referenced;
    std::set<int> labels_seen;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(manifest.string() + ":" + std::to_string(lineno) +
                            ": malformed JSON (" + e.what() + ")");
        }
        if (!rec.contains("path") || !rec.contains("label"))
            throw DataError(manifest.string() + ":" + std::to_string(lineno) +
                            ": record needs path and label");
        Sample s;
        s.path = rec["path"].get<std::string>();
        s.label = rec["label"].get<int>();
        if (rec.contains("boxes"))
            for (const auto& jb : rec["boxes"]) {
                if (!jb.is_array() || jb.size() != 4)
                    throw DataError(manifest.string() + ":" + std::to_string(lineno) +
                                    ": box must be [x_min,y_min,x_max,y_max]");
                s.boxes.push_back(Box{jb[0].get<int>(), jb[1].get<int>(), jb[2].get<int>(),
                                      jb[3].get<int>()});
            }
        fs::path img = split_dir / s.path;
        if (!fs::exists(img))
            throw DataError("manifest references missing file: " + img.string());
        s.image = read_png_gray(img.string());
        referenced.insert(s.path);
        labels_seen.insert(s.label);
        ds.samples.push_back(std::move(s));
    }
    if (ds.samples.empty()) throw DataError("empty manifest: " + manifest.string());
    // contiguous label check / remap
    std::map<int, int> remap;
    for (int l : labels_seen) remap[l] = static_cast<int>(remap.size());
    for (auto& s : ds.samples) s.label = remap[s.label];
    ds.num_classes = static_cast<int>(remap.size());
    for (const auto& entry : fs::directory_iterator(split_dir)) {
        if (!entry.is_regular_file()) continue;
        std::string name = entry.path().filename().string();
        if (name == "labels.jsonl" || name == "boxes.jsonl") continue;
        if (entry.path().extension() != ".png" || !referenced.count(name)) ++ds.skipped_files;
    }
    fs::path meta = split_dir.parent_path() / "dataset.json";
    if (fs::exists(meta)) {
        std::ifstream mf(meta);
        nlohmann::json jm;
        mf >> jm;
        for (const auto& jc : jm["classes"])
            ds.class_names.push_back(jc["name"].get<std::string>());
    }
    return ds;
}

struct AugmentConfig {
    double brightness = 0.2;    // additive, uniform in [-b, b] per view
    double contrast_lo = 0.8;   // multiplicative range per view
    double contrast_hi = 1.25;
    double noise_sigma = 0.02;  // per-view Gaussian noise
    bool flip = true;           // horizontal flip, applied identically to both views
};

/// Two photometrically perturbed, spatially aligned views. Any flip is
/// shared so grid cells of the two views still correspond.
inline std::pair<Array, Array> two_view_augment(const Array& image, std::uint64_t seed,
                                                const AugmentConfig& cfg = {}) {
    std::mt19937_64 rng(seed);
    int h = image.shape[0], w = image.shape[1];
    bool do_flip = cfg.flip && (rng() & 1u);
    auto make_view = [&]() {
        std::uniform_real_distribution<double> bright(-cfg.brightness, cfg.brightness);
        std::uniform_real_distribution<double> contrast(cfg.contrast_lo, cfg.contrast_hi);
        std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
        double b = cfg.brightness > 0 ? bright(rng) : 0.0;
        double c = cfg.contrast_hi > cfg.contrast_lo ? contrast(rng) : cfg.contrast_lo;
        Array v({h, w});
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                int sx = do_flip ? w - 1 - x : x;
                double px = image.data[y * w + sx];
                px = (px - 0.5) * c + 0.5 + b;
                if (cfg.noise_sigma > 0) px += noise(rng);
                v.data[y * w + x] = std::clamp(static_cast<float>(px), 0.0f, 1.0f);
            }
        return v;
    };
    Array v1 = make_view();
    Array v2 = make_view();
    return {std::move(v1), std::move(v2)};
}

}  // namespace patchproto
