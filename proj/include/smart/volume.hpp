#pragma once

#include <array>
#include <optional>
#include <vector>

#include "smart/grid.hpp"
#include "smart/rng.hpp"

namespace smart {

// A 3D scalar volume with voxel spacing and optional class label / ROI mask.
struct VolumeSample {
    GridD voxels;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm per axis (d, h, w)
    std::optional<int> label;
    std::optional<GridU8> roi;

    void validate() const;
};

enum class StructureKind : int { sphere = 0, box = 1, shell = 2 };

const char* to_string(StructureKind k);
StructureKind structure_kind_from_string(const std::string& s);

struct PhantomSpec {
    int grid_size = 48;
    int n_structures = 1;
    std::vector<StructureKind> structure_classes{StructureKind::sphere};
    double intensity_contrast = 1.0;
    uint64_t seed = 0;
    // Structure size range as a fraction of grid_size. Narrow the range to pin
    // an exact size (tests do).
    double min_size_frac = 0.10;
    double max_size_frac = 0.16;
    double noise_scale = 0.1;  // background noise sd, relative to |contrast|

    void validate() const;
};

// One placed structure, reported back for ground-truth-aware tests and evals.
struct PlacedStructure {
    StructureKind kind;
    std::array<double, 3> center;
    double size;  // sphere/shell radius or box half-edge
};

struct Phantom {
    VolumeSample sample;
    std::vector<PlacedStructure> structures;
};

// Deterministic synthetic phantom: Gaussian background noise plus
// non-overlapping foreground structures at +contrast. roi marks all foreground
// voxels; label is the class with the largest foreground voxel count.
Phantom generate_phantom(const PhantomSpec& spec);

// Voxelization helpers (also the oracle surface for shape-volume tests).
void rasterize_sphere(GridU8& mask, const std::array<double, 3>& center, double radius);
void rasterize_box(GridU8& mask, const std::array<double, 3>& center, double half_edge);
void rasterize_shell(GridU8& mask, const std::array<double, 3>& center, double outer_radius,
                     double inner_radius);

// Trilinear resample onto a new voxel spacing. Output dims are
// round(dim * spacing / target) per axis, clamped to >= 1. ROI (when present)
// is resampled nearest-neighbor.
VolumeSample resample(const VolumeSample& volume, const std::array<double, 3>& target_spacing);

struct ViewConfig {
    bool augment = true;
    bool normalize = true;       // per-crop zero mean / unit variance
    double scale_jitter = 0.1;   // multiplicative jitter half-width
    double shift_jitter = 0.1;   // additive jitter half-width
};

struct ViewProvenance {
    std::array<int, 3> offset_u{0, 0, 0};
    std::array<int, 3> offset_v{0, 0, 0};
    double scale_u = 1.0, shift_u = 0.0;
    double scale_v = 1.0, shift_v = 0.0;
};

struct ViewPair {
    GridD u;
    GridD v;
    ViewProvenance provenance;
};

// Two independently positioned cubic crops with independent intensity
// augmentation. Offsets are uniform over the full valid range per axis.
ViewPair sample_views(const VolumeSample& volume, int crop_size, const ViewConfig& cfg,
                      RngStream& rng);

// Single crop at a given offset (shared by sample_views and evaluation tiling).
GridD crop_volume(const GridD& voxels, const std::array<int, 3>& offset, int crop_size);

// In-place zero-mean / unit-variance normalization; constant grids become zero.
void normalize_zscore(GridD& g);

}  // namespace smart
