#include "probe/datagen.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "probe/rng.hpp"

namespace probe::datagen {

namespace fs = std::filesystem;

DomainSpec DomainSpec::far_preset() {
    DomainSpec s;
    s.texture_freq = 7.0;
    s.base_brightness = 0.45;
    s.contrast = 0.20;
    s.noise_sigma = 0.06;
    s.defect_contrast = 0.22;
    s.crack_width_min = 1.0;
    s.crack_width_max = 2.0;
    s.pothole_radius_min = 3.0;
    s.pothole_radius_max = 6.0;
    return s;
}

DomainSpec DomainSpec::interpolate(const DomainSpec& a, const DomainSpec& b, double t) {
    auto lerp = [t](double x, double y) { return x + t * (y - x); };
    DomainSpec s;
    s.texture_freq = lerp(a.texture_freq, b.texture_freq);
    s.base_brightness = lerp(a.base_brightness, b.base_brightness);
    s.contrast = lerp(a.contrast, b.contrast);
    s.noise_sigma = lerp(a.noise_sigma, b.noise_sigma);
    s.defect_contrast = lerp(a.defect_contrast, b.defect_contrast);
    s.crack_width_min = lerp(a.crack_width_min, b.crack_width_min);
    s.crack_width_max = lerp(a.crack_width_max, b.crack_width_max);
    s.pothole_radius_min = lerp(a.pothole_radius_min, b.pothole_radius_min);
    s.pothole_radius_max = lerp(a.pothole_radius_max, b.pothole_radius_max);
    return s;
}

namespace {

struct PixelExtent {
    int x0 = 1 << 30, y0 = 1 << 30, x1 = -1, y1 = -1;
    void cover(int x, int y) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
    }
    bool empty() const { return x1 < 0; }
};

void render_background(Raster& img, const DomainSpec& spec, Rng& rng) {
    const int s = img.height;
    const double theta = rng.uniform(0.0, 3.14159265358979323846);
    const double phase = rng.uniform(0.0, 6.2831853071795862);
    const double ct = std::cos(theta), st = std::sin(theta);
    // three low-frequency blotch components
    double bf[3], bpx[3], bpy[3];
    for (int i = 0; i < 3; ++i) {
        bf[i] = rng.uniform(0.5, 2.0);
        bpx[i] = rng.uniform(0.0, 6.2831853071795862);
        bpy[i] = rng.uniform(0.0, 6.2831853071795862);
    }
    const double tau = 6.2831853071795862;
    // darkest background stays above half the defect dip so the label
    // oracle (dip >= contrast/2 implies inside a box) cannot be fooled
    const double floor = 0.55 * spec.defect_contrast;
    for (int y = 0; y < s; ++y) {
        for (int x = 0; x < s; ++x) {
            const double u = static_cast<double>(x) / s;
            const double v = static_cast<double>(y) / s;
            const double stripe = std::sin(tau * spec.texture_freq * (u * ct + v * st) + phase);
            double blotch = 0.0;
            for (int i = 0; i < 3; ++i)
                blotch += std::cos(tau * bf[i] * u + bpx[i]) * std::cos(tau * bf[i] * v + bpy[i]);
            blotch /= 3.0;
            double val = spec.base_brightness + spec.contrast * (0.6 * stripe + 0.4 * blotch) +
                         spec.noise_sigma * rng.normal();
            img.at(y, x) = std::min(1.0, std::max(floor, val));
        }
    }
}

void darken(Raster& img, int x, int y, double amount, PixelExtent& ext) {
    if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
    img.at(y, x) = std::max(0.0, img.at(y, x) - amount);
    ext.cover(x, y);
}

// Returns false when the sampled geometry leaves the usable area.
bool draw_crack(Raster& img, const DomainSpec& spec, Rng& rng, PixelExtent& ext) {
    const int s = img.height;
    const double margin = 3.0;
    double x = rng.uniform(margin, s - margin);
    double y = rng.uniform(margin, s - margin);
    double dir = rng.uniform(0.0, 6.2831853071795862);
    const double w = rng.uniform(spec.crack_width_min, spec.crack_width_max);
    const int segments = 4 + static_cast<int>(rng.uniform_int(4));
    const double seg_len = s / 10.0;
    const double half = 0.5 * w;

    std::vector<std::pair<std::pair<double, double>, std::pair<double, double>>> segs;
    for (int i = 0; i < segments; ++i) {
        double nx = x + seg_len * std::cos(dir);
        double ny = y + seg_len * std::sin(dir);
        // bounce off the usable band so cracks fit small rasters too
        if (nx < margin || nx > s - margin) {
            dir = 3.14159265358979323846 - dir;
            nx = x + seg_len * std::cos(dir);
        }
        if (ny < margin || ny > s - margin) {
            dir = -dir;
            ny = y + seg_len * std::sin(dir);
        }
        if (nx < margin || ny < margin || nx > s - margin || ny > s - margin) return false;
        segs.push_back({{x, y}, {nx, ny}});
        x = nx;
        y = ny;
        dir += rng.uniform(-0.6, 0.6);
    }
    for (const auto& seg : segs) {
        const double ax = seg.first.first, ay = seg.first.second;
        const double bx = seg.second.first, by = seg.second.second;
        const int x0 = static_cast<int>(std::floor(std::min(ax, bx) - half - 1));
        const int x1 = static_cast<int>(std::ceil(std::max(ax, bx) + half + 1));
        const int y0 = static_cast<int>(std::floor(std::min(ay, by) - half - 1));
        const int y1 = static_cast<int>(std::ceil(std::max(ay, by) + half + 1));
        const double dx = bx - ax, dy = by - ay;
        const double len2 = dx * dx + dy * dy;
        for (int py = y0; py <= y1; ++py) {
            for (int px = x0; px <= x1; ++px) {
                const double cx = px + 0.5, cy = py + 0.5;
                double t = len2 > 0.0 ? ((cx - ax) * dx + (cy - ay) * dy) / len2 : 0.0;
                t = std::min(1.0, std::max(0.0, t));
                const double qx = ax + t * dx, qy = ay + t * dy;
                const double d2 = (cx - qx) * (cx - qx) + (cy - qy) * (cy - qy);
                if (d2 <= half * half) darken(img, px, py, spec.defect_contrast, ext);
            }
        }
    }
    return !ext.empty();
}

bool draw_pothole(Raster& img, const DomainSpec& spec, Rng& rng, PixelExtent& ext) {
    const int s = img.height;
    const double scale = s / 64.0;  // radius ranges are given at the 64-pixel reference size
    const double rx = std::max(1.0, scale * rng.uniform(spec.pothole_radius_min, spec.pothole_radius_max));
    const double ry = std::max(1.0, scale * rng.uniform(spec.pothole_radius_min, spec.pothole_radius_max));
    const double margin = std::max(rx, ry) + 2.0;
    if (2.0 * margin >= s) return false;
    const double cx = rng.uniform(margin, s - margin);
    const double cy = rng.uniform(margin, s - margin);
    const int x0 = static_cast<int>(std::floor(cx - rx - 1)), x1 = static_cast<int>(std::ceil(cx + rx + 1));
    const int y0 = static_cast<int>(std::floor(cy - ry - 1)), y1 = static_cast<int>(std::ceil(cy + ry + 1));
    for (int py = y0; py <= y1; ++py) {
        for (int px = x0; px <= x1; ++px) {
            const double u = (px + 0.5 - cx) / rx;
            const double v = (py + 0.5 - cy) / ry;
            if (u * u + v * v <= 1.0) darken(img, px, py, spec.defect_contrast, ext);
        }
    }
    return !ext.empty();
}

bool draw_patch(Raster& img, const DomainSpec& spec, Rng& rng, PixelExtent& ext) {
    const int s = img.height;
    const double scale = s / 64.0;
    const double w = rng.uniform(8.0, 20.0) * scale;
    const double h = rng.uniform(8.0, 20.0) * scale;
    if (w + 4 >= s || h + 4 >= s) return false;
    const double x0 = rng.uniform(2.0, s - w - 2.0);
    const double y0 = rng.uniform(2.0, s - h - 2.0);
    // a repaired patch reads as a milder tonal step than a crack or pothole
    const double amount = 0.7 * spec.defect_contrast;
    for (int py = static_cast<int>(y0); py < static_cast<int>(y0 + h); ++py)
        for (int px = static_cast<int>(x0); px < static_cast<int>(x0 + w); ++px)
            darken(img, px, py, amount, ext);
    return !ext.empty();
}

}  // namespace

LabeledScene generate_scene(const DomainSpec& spec, int image_size, int n_defects,
                            std::uint64_t seed) {
    if (n_defects < 0) throw ContractError("generate_scene: n_defects must be >= 0");
    if (image_size < 16) throw ConfigError("generate_scene: image_size too small");
    LabeledScene scene;
    scene.scene_seed = seed;
    scene.image = Raster(image_size, image_size);
    Rng rng(seed);
    render_background(scene.image, spec, rng);

    for (int i = 0; i < n_defects; ++i) {
        const int cls = static_cast<int>(rng.uniform_int(kNumClasses));
        bool placed = false;
        for (int attempt = 0; attempt < 20 && !placed; ++attempt) {
            Raster backup = scene.image;
            PixelExtent ext;
            bool ok = false;
            switch (cls) {
                case kCrack: ok = draw_crack(scene.image, spec, rng, ext); break;
                case kPothole: ok = draw_pothole(scene.image, spec, rng, ext); break;
                case kPatch: ok = draw_patch(scene.image, spec, rng, ext); break;
                default: break;
            }
            if (!ok) {
                scene.image = std::move(backup);
                continue;
            }
            Box box;
            box.x_min = static_cast<double>(ext.x0) / image_size;
            box.y_min = static_cast<double>(ext.y0) / image_size;
            box.x_max = static_cast<double>(ext.x1 + 1) / image_size;
            box.y_max = static_cast<double>(ext.y1 + 1) / image_size;
            scene.boxes.emplace_back(cls, box);
            placed = true;
        }
        if (!placed)
            throw DataError("generate_scene: could not place defect " + std::to_string(i) +
                            " within retry budget (seed " + std::to_string(seed) + ")");
    }
    return scene;
}

std::pair<std::vector<LabeledScene>, std::vector<LabeledScene>> generate_domain_pair(
    const DomainSpec& source_spec, double shift_knob, int n_per_domain, const PairOptions& opt,
    std::uint64_t seed) {
    if (shift_knob < 0.0 || shift_knob > 1.0)
        throw ContractError("generate_domain_pair: shift_knob outside [0,1]");
    const DomainSpec target_spec =
        DomainSpec::interpolate(source_spec, DomainSpec::far_preset(), shift_knob);

    auto make_domain = [&](const DomainSpec& spec, int domain_tag, const char* name) {
        std::vector<LabeledScene> scenes;
        scenes.reserve(n_per_domain);
        Rng counts(derive_seed(seed, std::string(name) + "_counts"));
        for (int i = 0; i < n_per_domain; ++i) {
            const int span = opt.defects_max - opt.defects_min + 1;
            const int n = opt.defects_min + static_cast<int>(counts.uniform_int(span));
            LabeledScene s = generate_scene(spec, opt.image_size, n, derive_seed(seed, name, i));
            s.domain_tag = domain_tag;
            scenes.push_back(std::move(s));
        }
        return scenes;
    };
    return {make_domain(source_spec, 0, "source"), make_domain(target_spec, 1, "target")};
}

// ---------------------------------------------------------------------------
// dataset container io

namespace {
constexpr const char* kMagic = "PROBE-DATASET";
constexpr int kVersion = 1;

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}
}  // namespace

void save_dataset(const std::vector<LabeledScene>& scenes, const std::string& path) {
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_dataset: cannot open " + path);
    int h = 0, w = 0;
    if (!scenes.empty()) {
        h = scenes.front().image.height;
        w = scenes.front().image.width;
    }
    out << kMagic << " " << kVersion << "\n";
    out << "count " << scenes.size() << " height " << h << " width " << w << "\n";
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        const LabeledScene& s = scenes[i];
        if (s.image.height != h || s.image.width != w)
            throw DataError("save_dataset: scene " + std::to_string(i) + " has mixed dimensions");
        out << "scene " << i << " seed " << s.scene_seed << " domain " << s.domain_tag << " boxes "
            << s.boxes.size() << "\n";
        for (const auto& [cls, box] : s.boxes) {
            out << "box " << cls << " " << fmt_double(box.x_min) << " " << fmt_double(box.y_min)
                << " " << fmt_double(box.x_max) << " " << fmt_double(box.y_max) << "\n";
        }
        const std::size_t nbytes = s.image.px.size() * sizeof(double);
        out << "raster " << nbytes << "\n";
        out.write(reinterpret_cast<const char*>(s.image.px.data()),
                  static_cast<std::streamsize>(nbytes));
        out << "\n";
    }
    if (!out) throw IoError("save_dataset: write failed for " + path);
}

namespace {

struct LineReader {
    explicit LineReader(std::istream& s) : in(s) {}
    std::istream& in;
    int line_no = 0;
    std::string line;

    bool next() {
        if (!std::getline(in, line)) return false;
        ++line_no;
        return true;
    }
    [[noreturn]] void fail(const std::string& msg) const {
        throw ParseError(msg + " (line " + std::to_string(line_no) + ")");
    }
};

}  // namespace

std::vector<LabeledScene> load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_dataset: cannot open " + path);
    LineReader r(in);

    if (!r.next()) r.fail("empty file");
    {
        std::istringstream hs(r.line);
        std::string magic;
        int version = 0;
        hs >> magic >> version;
        if (magic != kMagic) r.fail("bad magic '" + magic + "'");
        if (version != kVersion) r.fail("unsupported dataset version " + std::to_string(version));
    }
    if (!r.next()) r.fail("missing count header");
    std::size_t count = 0;
    int h = 0, w = 0;
    {
        std::istringstream hs(r.line);
        std::string kw_count, kw_h, kw_w;
        hs >> kw_count >> count >> kw_h >> h >> kw_w >> w;
        if (kw_count != "count" || kw_h != "height" || kw_w != "width" || hs.fail())
            r.fail("malformed count header");
    }

    std::vector<LabeledScene> scenes;
    scenes.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        if (!r.next()) r.fail("truncated: scene " + std::to_string(i) + " header missing");
        std::size_t idx = 0, nboxes = 0;
        std::uint64_t seed = 0;
        int domain = 0;
        {
            std::istringstream hs(r.line);
            std::string kw, kws, kwd, kwb;
            hs >> kw >> idx >> kws >> seed >> kwd >> domain >> kwb >> nboxes;
            if (kw != "scene" || kws != "seed" || kwd != "domain" || kwb != "boxes" || hs.fail())
                r.fail("malformed scene header");
            if (idx != i) r.fail("scene index out of order");
        }
        LabeledScene s;
        s.scene_seed = seed;
        s.domain_tag = domain;
        for (std::size_t b = 0; b < nboxes; ++b) {
            if (!r.next()) r.fail("truncated: box record missing");
            std::istringstream bs(r.line);
            std::string kw;
            int cls = 0;
            Box box;
            bs >> kw >> cls >> box.x_min >> box.y_min >> box.x_max >> box.y_max;
            if (kw != "box" || bs.fail()) r.fail("malformed box record");
            if (cls < 0 || cls >= kNumClasses)
                r.fail("scene " + std::to_string(i) + ": class id " + std::to_string(cls) +
                       " out of range");
            if (box.x_min >= box.x_max || box.y_min >= box.y_max)
                r.fail("scene " + std::to_string(i) + ": degenerate box (min >= max)");
            if (box.x_min < 0.0 || box.y_min < 0.0 || box.x_max > 1.0 || box.y_max > 1.0)
                r.fail("scene " + std::to_string(i) + ": box outside [0,1]^2");
            s.boxes.emplace_back(cls, box);
        }
        if (!r.next()) r.fail("truncated: raster header missing");
        std::size_t nbytes = 0;
        {
            std::istringstream rs(r.line);
            std::string kw;
            rs >> kw >> nbytes;
            if (kw != "raster" || rs.fail()) r.fail("malformed raster header");
        }
        if (nbytes != static_cast<std::size_t>(h) * w * sizeof(double))
            r.fail("raster byte count does not match header dimensions");
        s.image = Raster(h, w);
        in.read(reinterpret_cast<char*>(s.image.px.data()), static_cast<std::streamsize>(nbytes));
        if (in.gcount() != static_cast<std::streamsize>(nbytes))
            r.fail("truncated raster payload in scene " + std::to_string(i));
        in.get();  // trailing newline
        scenes.push_back(std::move(s));
    }
    return scenes;
}

// ---------------------------------------------------------------------------
// portable graymap import/export

void write_pgm(const Raster& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("write_pgm: cannot open " + path);
    out << "P5\n" << img.width << " " << img.height << "\n255\n";
    for (double v : img.px) {
        const double c = std::min(1.0, std::max(0.0, v));
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
    }
}

Raster read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("read_pgm: cannot open " + path);
    auto next_token = [&in, &path]() {
        std::string tok;
        while (in >> tok) {
            if (tok[0] == '#') {
                std::string rest;
                std::getline(in, rest);
                continue;
            }
            return tok;
        }
        throw ParseError("read_pgm: truncated header in " + path);
    };
    const std::string magic = next_token();
    if (magic != "P5") throw ParseError("read_pgm: unsupported magic '" + magic + "' in " + path);
    const int w = std::stoi(next_token());
    const int h = std::stoi(next_token());
    const int maxval = std::stoi(next_token());
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
        throw ParseError("read_pgm: bad dimensions in " + path);
    in.get();  // single whitespace after maxval
    Raster img(h, w);
    std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() != static_cast<std::streamsize>(buf.size()))
        throw ParseError("read_pgm: truncated pixel data in " + path);
    for (std::size_t i = 0; i < buf.size(); ++i)
        img.px[i] = static_cast<double>(buf[i]) / maxval;
    return img;
}

void save_dataset_dir(const std::vector<LabeledScene>& scenes, const std::string& dir) {
    fs::create_directories(dir);
    std::ofstream ann(fs::path(dir) / "annotations.txt");
    if (!ann) throw IoError("save_dataset_dir: cannot open annotations.txt");
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "scene_%04zu.pgm", i);
        write_pgm(scenes[i].image, (fs::path(dir) / name).string());
        for (const auto& [cls, box] : scenes[i].boxes) {
            ann << name << "," << cls << "," << fmt_double(box.x_min) << "," << fmt_double(box.y_min)
                << "," << fmt_double(box.x_max) << "," << fmt_double(box.y_max) << "\n";
        }
    }
}

std::vector<LabeledScene> load_dataset_dir(const std::string& dir) {
    if (!fs::is_directory(dir)) throw IoError("load_dataset_dir: not a directory: " + dir);
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.path().extension() == ".pgm") names.push_back(e.path().filename().string());
    }
    std::sort(names.begin(), names.end());
    std::map<std::string, std::vector<std::pair<int, Box>>> annotations;

    const fs::path ann_path = fs::path(dir) / "annotations.txt";
    if (fs::exists(ann_path)) {
        std::ifstream ann(ann_path);
        LineReader r(ann);
        while (r.next()) {
            if (r.line.empty() || r.line[0] == '#') continue;
            std::istringstream ls(r.line);
            std::string image, field;
            std::vector<std::string> fields;
            while (std::getline(ls, field, ',')) fields.push_back(field);
            if (fields.size() != 6) r.fail("expected image,class,x_min,y_min,x_max,y_max");
            image = fields[0];
            Box box;
            int cls;
            try {
                cls = std::stoi(fields[1]);
                box.x_min = std::stod(fields[2]);
                box.y_min = std::stod(fields[3]);
                box.x_max = std::stod(fields[4]);
                box.y_max = std::stod(fields[5]);
            } catch (const std::exception&) {
                r.fail("malformed number");
            }
            if (box.x_min >= box.x_max || box.y_min >= box.y_max)
                r.fail("degenerate box for image " + image);
            annotations[image].emplace_back(cls, box);
        }
    }
    std::vector<LabeledScene> scenes;
    scenes.reserve(names.size());
    for (std::size_t i = 0; i < names.size(); ++i) {
        LabeledScene s;
        s.image = read_pgm((fs::path(dir) / names[i]).string());
        auto it = annotations.find(names[i]);
        if (it != annotations.end()) s.boxes = it->second;
        annotations.erase(names[i]);
        scenes.push_back(std::move(s));
    }
    if (!annotations.empty())
        throw DataError("load_dataset_dir: annotation references missing image '" +
                        annotations.begin()->first + "'");
    return scenes;
}

}  // namespace probe::datagen
