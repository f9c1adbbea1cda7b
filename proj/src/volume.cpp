#include "smart/volume.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace smart {

void VolumeSample::validate() const {
    for (double s : spacing) {
        if (!(s > 0.0)) throw ValidationError("VolumeSample: spacing must be positive");
    }
    if (roi && !roi->same_shape(GridU8(voxels.dims())))
        throw ValidationError("VolumeSample: roi shape differs from voxels");
    for (double v : voxels.data()) {
        if (!std::isfinite(v)) throw ValidationError("VolumeSample: non-finite intensity");
    }
}

const char* to_string(StructureKind k) {
    switch (k) {
        case StructureKind::sphere: return "sphere";
        case StructureKind::box: return "box";
        case StructureKind::shell: return "shell";
    }
    return "?";
}

StructureKind structure_kind_from_string(const std::string& s) {
    if (s == "sphere") return StructureKind::sphere;
    if (s == "box") return StructureKind::box;
    if (s == "shell") return StructureKind::shell;
    throw ValidationError("unknown structure kind: " + s);
}

void PhantomSpec::validate() const {
    if (grid_size < 8) throw ValidationError("PhantomSpec: grid_size must be >= 8");
    if (n_structures < 0) throw ValidationError("PhantomSpec: n_structures must be >= 0");
    if (n_structures > 0 && intensity_contrast == 0.0)
        throw ValidationError("PhantomSpec: contrast must be nonzero when placing structures");
    if (n_structures > 0 && structure_classes.empty())
        throw ValidationError("PhantomSpec: no structure classes given");
    if (!(min_size_frac > 0.0) || max_size_frac < min_size_frac)
        throw ValidationError("PhantomSpec: bad size fraction range");
}

void rasterize_sphere(GridU8& mask, const std::array<double, 3>& c, double radius) {
    const double r2 = radius * radius;
    for (int z = 0; z < mask.depth(); ++z)
        for (int y = 0; y < mask.height(); ++y)
            for (int x = 0; x < mask.width(); ++x) {
                const double dz = z - c[0], dy = y - c[1], dx = x - c[2];
                if (dz * dz + dy * dy + dx * dx <= r2) mask.at(z, y, x) = 1;
            }
}

void rasterize_box(GridU8& mask, const std::array<double, 3>& c, double half_edge) {
    for (int z = 0; z < mask.depth(); ++z)
        for (int y = 0; y < mask.height(); ++y)
            for (int x = 0; x < mask.width(); ++x) {
                if (std::abs(z - c[0]) <= half_edge && std::abs(y - c[1]) <= half_edge &&
                    std::abs(x - c[2]) <= half_edge)
                    mask.at(z, y, x) = 1;
            }
}

void rasterize_shell(GridU8& mask, const std::array<double, 3>& c, double outer_r,
                     double inner_r) {
    const double o2 = outer_r * outer_r, i2 = inner_r * inner_r;
    for (int z = 0; z < mask.depth(); ++z)
        for (int y = 0; y < mask.height(); ++y)
            for (int x = 0; x < mask.width(); ++x) {
                const double dz = z - c[0], dy = y - c[1], dx = x - c[2];
                const double d2 = dz * dz + dy * dy + dx * dx;
                if (d2 <= o2 && d2 > i2) mask.at(z, y, x) = 1;
            }
}

namespace {

void rasterize(GridU8& mask, const PlacedStructure& s) {
    switch (s.kind) {
        case StructureKind::sphere: rasterize_sphere(mask, s.center, s.size); break;
        case StructureKind::box: rasterize_box(mask, s.center, s.size); break;
        case StructureKind::shell: rasterize_shell(mask, s.center, s.size, 0.6 * s.size); break;
    }
}

bool overlaps_or_empty(const GridU8& roi, const GridU8& candidate) {
    size_t fg = 0;
    for (size_t i = 0; i < candidate.size(); ++i) {
        if (candidate[i]) {
            if (roi[i]) return true;
            ++fg;
        }
    }
    return fg == 0;
}

}  // namespace

Phantom generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    RngStream rng(spec.seed);

    const int g = spec.grid_size;
    Phantom out;
    out.sample.voxels = GridD(g, g, g);
    out.sample.spacing = {1.0, 1.0, 1.0};
    GridU8 roi(g, g, g, 0);

    const double noise_sd = spec.noise_scale * std::abs(spec.intensity_contrast);
    for (auto& v : out.sample.voxels.data()) v = rng.normal(0.0, noise_sd);

    std::map<StructureKind, size_t> class_voxels;
    constexpr int kMaxRetries = 200;
    for (int i = 0; i < spec.n_structures; ++i) {
        const StructureKind kind =
            spec.structure_classes[static_cast<size_t>(rng.uniform_int(
                static_cast<int>(spec.structure_classes.size())))];
        bool placed = false;
        for (int attempt = 0; attempt < kMaxRetries && !placed; ++attempt) {
            const double size = rng.uniform(spec.min_size_frac * g, spec.max_size_frac * g);
            const double margin = size + 1.0;
            if (2.0 * margin >= g) continue;
            std::array<double, 3> center;
            for (auto& c : center) c = rng.uniform(margin, g - margin);
            GridU8 candidate(g, g, g, 0);
            rasterize(candidate, {kind, center, size});
            if (overlaps_or_empty(roi, candidate)) continue;
            size_t fg = 0;
            for (size_t j = 0; j < roi.size(); ++j) {
                if (candidate[j]) {
                    roi[j] = 1;
                    ++fg;
                }
            }
            class_voxels[kind] += fg;
            out.structures.push_back({kind, center, size});
            placed = true;
        }
        if (!placed)
            throw PlacementError("generate_phantom: could not place structure " +
                                 std::to_string(i) + " without overlap");
    }

    for (size_t j = 0; j < roi.size(); ++j) {
        if (roi[j]) out.sample.voxels[j] += spec.intensity_contrast;
    }

    if (!class_voxels.empty()) {
        auto best = class_voxels.begin();
        for (auto it = class_voxels.begin(); it != class_voxels.end(); ++it) {
            if (it->second > best->second) best = it;
        }
        out.sample.label = static_cast<int>(best->first);
    }
    out.sample.roi = std::move(roi);
    return out;
}

namespace {

double sample_trilinear(const GridD& v, double z, double y, double x) {
    const auto clampi = [](int i, int hi) { return std::min(std::max(i, 0), hi); };
    const int z0 = clampi(static_cast<int>(std::floor(z)), v.depth() - 1);
    const int y0 = clampi(static_cast<int>(std::floor(y)), v.height() - 1);
    const int x0 = clampi(static_cast<int>(std::floor(x)), v.width() - 1);
    const int z1 = clampi(z0 + 1, v.depth() - 1);
    const int y1 = clampi(y0 + 1, v.height() - 1);
    const int x1 = clampi(x0 + 1, v.width() - 1);
    const double fz = std::clamp(z - z0, 0.0, 1.0);
    const double fy = std::clamp(y - y0, 0.0, 1.0);
    const double fx = std::clamp(x - x0, 0.0, 1.0);

    const double c00 = v.at(z0, y0, x0) * (1 - fx) + v.at(z0, y0, x1) * fx;
    const double c01 = v.at(z0, y1, x0) * (1 - fx) + v.at(z0, y1, x1) * fx;
    const double c10 = v.at(z1, y0, x0) * (1 - fx) + v.at(z1, y0, x1) * fx;
    const double c11 = v.at(z1, y1, x0) * (1 - fx) + v.at(z1, y1, x1) * fx;
    const double c0 = c00 * (1 - fy) + c01 * fy;
    const double c1 = c10 * (1 - fy) + c11 * fy;
    return c0 * (1 - fz) + c1 * fz;
}

}  // namespace

VolumeSample resample(const VolumeSample& volume, const std::array<double, 3>& target) {
    volume.validate();
    for (double t : target) {
        if (!(t > 0.0)) throw ValidationError("resample: target spacing must be positive");
    }
    std::array<int, 3> out_dims;
    std::array<double, 3> ratio;  // output index -> input index scale
    for (int a = 0; a < 3; ++a) {
        ratio[a] = target[a] / volume.spacing[a];
        out_dims[a] = std::max(1, static_cast<int>(std::llround(volume.voxels.dims()[a] / ratio[a])));
    }

    VolumeSample out;
    out.voxels = GridD(out_dims);
    out.spacing = target;
    out.label = volume.label;

    // Center-aligned mapping: identity when ratio == 1.
    const auto to_input = [&](int i, int axis) {
        return (i + 0.5) * ratio[axis] - 0.5;
    };
    for (int z = 0; z < out_dims[0]; ++z)
        for (int y = 0; y < out_dims[1]; ++y)
            for (int x = 0; x < out_dims[2]; ++x)
                out.voxels.at(z, y, x) = sample_trilinear(volume.voxels, to_input(z, 0),
                                                          to_input(y, 1), to_input(x, 2));

    if (volume.roi) {
        GridU8 roi(out_dims);
        const auto& src = *volume.roi;
        for (int z = 0; z < out_dims[0]; ++z)
            for (int y = 0; y < out_dims[1]; ++y)
                for (int x = 0; x < out_dims[2]; ++x) {
                    const int zi = std::clamp(static_cast<int>(std::llround(to_input(z, 0))), 0,
                                              src.depth() - 1);
                    const int yi = std::clamp(static_cast<int>(std::llround(to_input(y, 1))), 0,
                                              src.height() - 1);
                    const int xi = std::clamp(static_cast<int>(std::llround(to_input(x, 2))), 0,
                                              src.width() - 1);
                    roi.at(z, y, x) = src.at(zi, yi, xi);
                }
        out.roi = std::move(roi);
    }
    return out;
}

GridD crop_volume(const GridD& voxels, const std::array<int, 3>& offset, int crop_size) {
    for (int a = 0; a < 3; ++a) {
        if (offset[a] < 0 || offset[a] + crop_size > voxels.dims()[a])
            throw ValidationError("crop_volume: crop exceeds volume bounds");
    }
    GridD out(crop_size, crop_size, crop_size);
    for (int z = 0; z < crop_size; ++z)
        for (int y = 0; y < crop_size; ++y)
            for (int x = 0; x < crop_size; ++x)
                out.at(z, y, x) = voxels.at(offset[0] + z, offset[1] + y, offset[2] + x);
    return out;
}

void normalize_zscore(GridD& g) {
    if (g.empty()) return;
    double mean = 0.0;
    for (double v : g.data()) mean += v;
    mean /= static_cast<double>(g.size());
    double var = 0.0;
    for (double v : g.data()) var += (v - mean) * (v - mean);
    var /= static_cast<double>(g.size());
    const double sd = std::sqrt(var);
    if (sd < 1e-12) {
        for (auto& v : g.data()) v = 0.0;
        return;
    }
    for (auto& v : g.data()) v = (v - mean) / sd;
}

ViewPair sample_views(const VolumeSample& volume, int crop_size, const ViewConfig& cfg,
                      RngStream& rng) {
    if (crop_size <= 0) throw ValidationError("sample_views: crop_size must be positive");
    for (int a = 0; a < 3; ++a) {
        if (crop_size > volume.voxels.dims()[a])
            throw ValidationError("sample_views: crop larger than volume");
    }

    ViewPair out;
    const auto draw_offset = [&](std::array<int, 3>& off) {
        for (int a = 0; a < 3; ++a)
            off[a] = rng.uniform_int(volume.voxels.dims()[a] - crop_size + 1);
    };
    draw_offset(out.provenance.offset_u);
    draw_offset(out.provenance.offset_v);
    out.u = crop_volume(volume.voxels, out.provenance.offset_u, crop_size);
    out.v = crop_volume(volume.voxels, out.provenance.offset_v, crop_size);

    if (cfg.normalize) {
        normalize_zscore(out.u);
        normalize_zscore(out.v);
    }
    if (cfg.augment) {
        out.provenance.scale_u = 1.0 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter);
        out.provenance.shift_u = rng.uniform(-cfg.shift_jitter, cfg.shift_jitter);
        out.provenance.scale_v = 1.0 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter);
        out.provenance.shift_v = rng.uniform(-cfg.shift_jitter, cfg.shift_jitter);
        for (auto& v : out.u.data()) v = v * out.provenance.scale_u + out.provenance.shift_u;
        for (auto& v : out.v.data()) v = v * out.provenance.scale_v + out.provenance.shift_v;
    }
    return out;
}

}  // namespace smart
