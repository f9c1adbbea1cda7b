#include "smart/checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "smart/common.hpp"

namespace smart {

namespace {
constexpr char kMagic[8] = {'S', 'M', 'R', 'T', 'C', 'K', 'P', 'T'};
constexpr uint32_t kFormatVersion = 1;

void put_u32(std::ofstream& f, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    f.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::ifstream& f) {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}
}  // namespace

const Mat& CheckpointData::tensor(const std::string& name) const {
    for (const auto& [n, m] : tensors) {
        if (n == name) return m;
    }
    throw Error("checkpoint: missing tensor " + name);
}

bool CheckpointData::has_tensor(const std::string& name) const {
    for (const auto& [n, m] : tensors) {
        if (n == name) return true;
    }
    return false;
}

void write_checkpoint(const std::string& path, const CheckpointData& data) {
    // Pack the data section first so offsets and checksum are known.
    std::vector<char> blob;
    nlohmann::json tensor_list = nlohmann::json::array();
    for (const auto& [name, m] : data.tensors) {
        const size_t offset = blob.size();
        const size_t bytes = static_cast<size_t>(m.size()) * sizeof(double);
        blob.resize(offset + bytes);
        std::memcpy(blob.data() + offset, m.data(), bytes);
        tensor_list.push_back({{"name", name},
                               {"rows", m.rows()},
                               {"cols", m.cols()},
                               {"offset", offset}});
    }
    const auto crc =
        crc32(0L, reinterpret_cast<const Bytef*>(blob.data()), static_cast<uInt>(blob.size()));

    nlohmann::json manifest = {{"format_version", kFormatVersion},
                               {"meta", data.meta},
                               {"tensors", tensor_list},
                               {"data_bytes", blob.size()},
                               {"crc32", crc}};
    const std::string mstr = manifest.dump();

    // Atomic write: temp file in the same directory, then rename.
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("write_checkpoint: cannot open " + tmp);
        f.write(kMagic, 8);
        put_u32(f, kFormatVersion);
        put_u32(f, static_cast<uint32_t>(mstr.size()));
        f.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
        f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
        if (!f) throw IoError("write_checkpoint: write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

CheckpointData read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_checkpoint: cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (f.gcount() != 8 || std::memcmp(magic, kMagic, 8) != 0)
        throw FormatError("read_checkpoint: bad magic in " + path);
    const uint32_t version = read_u32(f);
    if (version != kFormatVersion)
        throw FormatError("read_checkpoint: unsupported format version " +
                          std::to_string(version));
    const uint32_t mlen = read_u32(f);
    std::string mstr(mlen, '\0');
    f.read(mstr.data(), mlen);
    if (f.gcount() != static_cast<std::streamsize>(mlen))
        throw FormatError("read_checkpoint: truncated manifest in " + path);

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mstr);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("read_checkpoint: manifest parse error: ") + e.what());
    }

    const size_t data_bytes = manifest.at("data_bytes").get<size_t>();
    std::vector<char> blob(data_bytes);
    f.read(blob.data(), static_cast<std::streamsize>(data_bytes));
    if (f.gcount() != static_cast<std::streamsize>(data_bytes))
        throw FormatError("read_checkpoint: truncated data section in " + path);

    const auto crc =
        crc32(0L, reinterpret_cast<const Bytef*>(blob.data()), static_cast<uInt>(blob.size()));
    if (crc != manifest.at("crc32").get<unsigned long>())
        throw FormatError("read_checkpoint: checksum mismatch in " + path);

    CheckpointData out;
    out.meta = manifest.at("meta");
    for (const auto& t : manifest.at("tensors")) {
        const auto rows = t.at("rows").get<long>();
        const auto cols = t.at("cols").get<long>();
        const auto offset = t.at("offset").get<size_t>();
        const size_t bytes = static_cast<size_t>(rows) * static_cast<size_t>(cols) * sizeof(double);
        if (offset + bytes > blob.size())
            throw FormatError("read_checkpoint: tensor exceeds data section");
        Mat m(rows, cols);
        std::memcpy(m.data(), blob.data() + offset, bytes);
        out.tensors.emplace_back(t.at("name").get<std::string>(), std::move(m));
    }
    return out;
}

}  // namespace smart
