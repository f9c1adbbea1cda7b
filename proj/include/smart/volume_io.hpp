#pragma once

#include <string>

#include "smart/volume.hpp"

namespace smart {

// Raw volume container:
//   48-byte header: magic "SMRTVOL1", 3x uint32 dims (d,h,w), 3x float32
//   spacing (mm), uint32 label (0xFFFFFFFF = unlabeled), uint32 roi-present
//   flag, 8 reserved zero bytes. Followed by d*h*w little-endian float32
//   voxels in raster order, then (if flagged) d*h*w uint8 roi values.
void write_svol(const std::string& path, const VolumeSample& volume);
VolumeSample read_svol(const std::string& path);

// Minimal NIfTI-1 reader (.nii, .nii.gz): little-endian headers, datatypes
// uint8/int16/int32/float32/float64, scl_slope/scl_inter applied.
VolumeSample read_nifti(const std::string& path);

// Reads a volume (raw container or NIfTI, detected by magic) and resamples it
// to the target spacing.
VolumeSample ingest_volume(const std::string& path, const std::array<double, 3>& target_spacing);

}  // namespace smart
