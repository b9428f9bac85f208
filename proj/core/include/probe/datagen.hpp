#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "probe/box.hpp"
#include "probe/raster.hpp"

namespace probe::datagen {

constexpr int kNumClasses = 3;  // crack, pothole, patch

enum DefectClass : int { kCrack = 0, kPothole = 1, kPatch = 2 };

// Appearance parameters of one synthetic pavement domain.
struct DomainSpec {
    double texture_freq = 3.0;
    double base_brightness = 0.65;
    double contrast = 0.12;
    double noise_sigma = 0.02;
    double defect_contrast = 0.35;
    double crack_width_min = 1.5;
    double crack_width_max = 3.0;
    double pothole_radius_min = 4.0;
    double pothole_radius_max = 9.0;

    static DomainSpec source_default() { return DomainSpec{}; }

    // Appearance end-point a shift knob of 1.0 interpolates to.
    static DomainSpec far_preset();

    static DomainSpec interpolate(const DomainSpec& a, const DomainSpec& b, double t);
};

struct LabeledScene {
    Raster image;
    std::vector<std::pair<int, Box>> boxes;  // (class id, tight box)
    int domain_tag = 0;                      // 0 source, 1 target
    std::uint64_t scene_seed = 0;
};

// Textured background plus n_defects dark defects with tight boxes.
// Deterministic per (spec, image_size, n_defects, seed).
LabeledScene generate_scene(const DomainSpec& spec, int image_size, int n_defects,
                            std::uint64_t seed);

struct PairOptions {
    int image_size = 64;
    int defects_min = 1;
    int defects_max = 3;
};

// Source scenes from `source_spec`, target scenes from the spec interpolated
// toward the far preset by `shift_knob`.
std::pair<std::vector<LabeledScene>, std::vector<LabeledScene>> generate_domain_pair(
    const DomainSpec& source_spec, double shift_knob, int n_per_domain, const PairOptions& opt,
    std::uint64_t seed);

// Self-describing container with a text header and raw float64 rasters.
// Layout documented in docs/formats.md; save -> load roundtrips bit-exactly.
void save_dataset(const std::vector<LabeledScene>& scenes, const std::string& path);
std::vector<LabeledScene> load_dataset(const std::string& path);

// Directory import: portable graymaps plus a sidecar annotations.txt with
// one line per box: image,class,x_min,y_min,x_max,y_max.
std::vector<LabeledScene> load_dataset_dir(const std::string& dir);
void save_dataset_dir(const std::vector<LabeledScene>& scenes, const std::string& dir);

void write_pgm(const Raster& img, const std::string& path);
Raster read_pgm(const std::string& path);

}  // namespace probe::datagen
