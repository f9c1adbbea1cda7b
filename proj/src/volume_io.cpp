#include "smart/volume_io.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <vector>

namespace smart {

namespace {

constexpr char kMagic[8] = {'S', 'M', 'R', 'T', 'V', 'O', 'L', '1'};
constexpr uint32_t kNoLabel = 0xFFFFFFFFu;
constexpr size_t kHeaderSize = 48;

void put_u32(std::vector<unsigned char>& buf, uint32_t v) {
    buf.push_back(static_cast<unsigned char>(v & 0xFF));
    buf.push_back(static_cast<unsigned char>((v >> 8) & 0xFF));
    buf.push_back(static_cast<unsigned char>((v >> 16) & 0xFF));
    buf.push_back(static_cast<unsigned char>((v >> 24) & 0xFF));
}

void put_f32(std::vector<unsigned char>& buf, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(buf, bits);
}

uint32_t get_u32(const unsigned char* p) {
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

float get_f32(const unsigned char* p) {
    const uint32_t bits = get_u32(p);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace

void write_svol(const std::string& path, const VolumeSample& volume) {
    volume.validate();
    std::vector<unsigned char> header;
    header.reserve(kHeaderSize);
    header.insert(header.end(), kMagic, kMagic + 8);
    for (int a = 0; a < 3; ++a) put_u32(header, static_cast<uint32_t>(volume.voxels.dims()[a]));
    for (int a = 0; a < 3; ++a) put_f32(header, static_cast<float>(volume.spacing[a]));
    put_u32(header, volume.label ? static_cast<uint32_t>(*volume.label) : kNoLabel);
    put_u32(header, volume.roi ? 1u : 0u);
    header.resize(kHeaderSize, 0);

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("write_svol: cannot open " + path);
    f.write(reinterpret_cast<const char*>(header.data()), static_cast<std::streamsize>(header.size()));

    std::vector<unsigned char> voxbuf;
    voxbuf.reserve(volume.voxels.size() * 4);
    for (double v : volume.voxels.data()) put_f32(voxbuf, static_cast<float>(v));
    f.write(reinterpret_cast<const char*>(voxbuf.data()), static_cast<std::streamsize>(voxbuf.size()));

    if (volume.roi) {
        f.write(reinterpret_cast<const char*>(volume.roi->data().data()),
                static_cast<std::streamsize>(volume.roi->size()));
    }
    if (!f) throw IoError("write_svol: write failed for " + path);
}

VolumeSample read_svol(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_svol: cannot open " + path);
    std::vector<unsigned char> header(kHeaderSize);
    f.read(reinterpret_cast<char*>(header.data()), kHeaderSize);
    if (f.gcount() != static_cast<std::streamsize>(kHeaderSize))
        throw FormatError("read_svol: truncated header in " + path);
    if (std::memcmp(header.data(), kMagic, 8) != 0)
        throw FormatError("read_svol: bad magic in " + path);

    std::array<int, 3> dims;
    for (int a = 0; a < 3; ++a) {
        const uint32_t d = get_u32(header.data() + 8 + 4 * a);
        if (d == 0 || d > (1u << 24)) throw FormatError("read_svol: implausible dimension");
        dims[a] = static_cast<int>(d);
    }
    VolumeSample out;
    out.voxels = GridD(dims);
    for (int a = 0; a < 3; ++a) {
        out.spacing[a] = static_cast<double>(get_f32(header.data() + 20 + 4 * a));
        if (!(out.spacing[a] > 0.0)) throw ValidationError("read_svol: non-positive spacing");
    }
    const uint32_t label = get_u32(header.data() + 32);
    if (label != kNoLabel) out.label = static_cast<int>(label);
    const bool has_roi = get_u32(header.data() + 36) != 0;

    const size_t n = out.voxels.size();
    std::vector<unsigned char> voxbuf(n * 4);
    f.read(reinterpret_cast<char*>(voxbuf.data()), static_cast<std::streamsize>(voxbuf.size()));
    if (f.gcount() != static_cast<std::streamsize>(voxbuf.size()))
        throw FormatError("read_svol: truncated voxel data in " + path);
    for (size_t i = 0; i < n; ++i)
        out.voxels[i] = static_cast<double>(get_f32(voxbuf.data() + 4 * i));

    if (has_roi) {
        GridU8 roi(dims);
        f.read(reinterpret_cast<char*>(roi.data().data()), static_cast<std::streamsize>(n));
        if (f.gcount() != static_cast<std::streamsize>(n))
            throw FormatError("read_svol: truncated roi data in " + path);
        out.roi = std::move(roi);
    }
    out.validate();
    return out;
}

namespace {

// gzread handles both plain and gzip-compressed files.
std::vector<unsigned char> read_file_maybe_gz(const std::string& path) {
    gzFile gz = gzopen(path.c_str(), "rb");
    if (!gz) throw IoError("cannot open " + path);
    std::vector<unsigned char> out;
    unsigned char buf[1 << 16];
    int n;
    while ((n = gzread(gz, buf, sizeof(buf))) > 0) out.insert(out.end(), buf, buf + n);
    const bool failed = n < 0;
    gzclose(gz);
    if (failed) throw FormatError("decompression failed for " + path);
    return out;
}

int16_t get_i16(const unsigned char* p) {
    return static_cast<int16_t>(static_cast<uint16_t>(p[0]) | (static_cast<uint16_t>(p[1]) << 8));
}

}  // namespace

VolumeSample read_nifti(const std::string& path) {
    const auto bytes = read_file_maybe_gz(path);
    if (bytes.size() < 352) throw FormatError("read_nifti: file too small: " + path);
    const unsigned char* h = bytes.data();

    const uint32_t sizeof_hdr = get_u32(h);
    if (sizeof_hdr != 348) {
        if (sizeof_hdr == 0x5c010000u)
            throw FormatError("read_nifti: big-endian files are not supported: " + path);
        throw FormatError("read_nifti: bad header size in " + path);
    }
    if (std::memcmp(h + 344, "n+1", 3) != 0 && std::memcmp(h + 344, "ni1", 3) != 0)
        throw FormatError("read_nifti: missing NIfTI-1 magic in " + path);

    const int ndim = get_i16(h + 40);
    if (ndim < 3) throw FormatError("read_nifti: need a 3D volume");
    std::array<int, 3> dims;  // stored fastest-first in the header: x, y, z
    for (int a = 0; a < 3; ++a) {
        dims[2 - a] = get_i16(h + 42 + 2 * a);
        if (dims[2 - a] <= 0) throw FormatError("read_nifti: non-positive dimension");
    }
    for (int a = 4; a <= ndim; ++a) {
        if (get_i16(h + 40 + 2 * a) > 1)
            throw FormatError("read_nifti: >3D volumes are not supported");
    }

    const int16_t datatype = get_i16(h + 70);
    const float slope_raw = get_f32(h + 112);
    const float inter = get_f32(h + 116);
    const double slope = (slope_raw == 0.0f) ? 1.0 : static_cast<double>(slope_raw);

    VolumeSample out;
    out.voxels = GridD(dims);
    for (int a = 0; a < 3; ++a) {
        const float sp = get_f32(h + 76 + 4 * (a + 1));  // pixdim[1..3] = x,y,z
        if (!(sp > 0.0f)) throw ValidationError("read_nifti: non-positive spacing");
        out.spacing[2 - a] = static_cast<double>(sp);
    }

    const auto vox_offset = static_cast<size_t>(get_f32(h + 108));
    const size_t n = out.voxels.size();
    const auto need = [&](size_t elem) {
        if (bytes.size() < vox_offset + n * elem)
            throw FormatError("read_nifti: truncated voxel data in " + path);
    };
    const unsigned char* d = bytes.data() + vox_offset;

    // NIfTI raster order is x-fastest; our grids are x-fastest within rows as
    // well (index = (z*H + y)*W + x), so the flat order matches directly.
    switch (datatype) {
        case 2:  // uint8
            need(1);
            for (size_t i = 0; i < n; ++i) out.voxels[i] = d[i];
            break;
        case 4:  // int16
            need(2);
            for (size_t i = 0; i < n; ++i) out.voxels[i] = get_i16(d + 2 * i);
            break;
        case 8:  // int32
            need(4);
            for (size_t i = 0; i < n; ++i) out.voxels[i] = static_cast<int32_t>(get_u32(d + 4 * i));
            break;
        case 16:  // float32
            need(4);
            for (size_t i = 0; i < n; ++i) out.voxels[i] = get_f32(d + 4 * i);
            break;
        case 64: {  // float64
            need(8);
            for (size_t i = 0; i < n; ++i) {
                uint64_t bits = 0;
                for (int b = 7; b >= 0; --b) bits = (bits << 8) | d[8 * i + b];
                double v;
                std::memcpy(&v, &bits, 8);
                out.voxels[i] = v;
            }
            break;
        }
        default:
            throw FormatError("read_nifti: unsupported datatype " + std::to_string(datatype));
    }
    if (slope != 1.0 || inter != 0.0f) {
        for (auto& v : out.voxels.data()) v = v * slope + inter;
    }
    out.validate();
    return out;
}

VolumeSample ingest_volume(const std::string& path, const std::array<double, 3>& target_spacing) {
    for (double t : target_spacing) {
        if (!(t > 0.0)) throw ValidationError("ingest_volume: non-positive target spacing");
    }
    VolumeSample vol;
    {
        std::ifstream probe(path, std::ios::binary);
        if (!probe) throw IoError("ingest_volume: cannot open " + path);
        char magic[8] = {};
        probe.read(magic, 8);
        if (probe.gcount() == 8 && std::memcmp(magic, kMagic, 8) == 0)
            vol = read_svol(path);
        else
            vol = read_nifti(path);
    }
    return resample(vol, target_spacing);
}

}  // namespace smart
