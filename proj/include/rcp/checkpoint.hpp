#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "rcp/error.hpp"
#include "rcp/tensor.hpp"

// Self-describing flat binary checkpoint. Layout, all little-endian:
//   magic "ROVT" | version u32 | records...
// record: name_len u32 | name bytes | rank u32 | dims u64[rank] | payload f64[]
namespace rcp {

struct CheckpointRecord {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> data;
};

namespace detail {

template <typename T>
void write_raw(std::ofstream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::ifstream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw InputError("checkpoint: truncated file");
    return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const std::vector<CheckpointRecord>& records,
                            std::uint32_t version = 1) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("save_checkpoint: cannot open " + path);
    os.write("ROVT", 4);
    detail::write_raw<std::uint32_t>(os, version);
    for (const auto& rec : records) {
        detail::write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(rec.name.size()));
        os.write(rec.name.data(), static_cast<std::streamsize>(rec.name.size()));
        detail::write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(rec.shape.size()));
        for (std::size_t d : rec.shape) detail::write_raw<std::uint64_t>(os, d);
        os.write(reinterpret_cast<const char*>(rec.data.data()),
                 static_cast<std::streamsize>(rec.data.size() * sizeof(double)));
    }
    if (!os) throw InputError("save_checkpoint: write failed for " + path);
}

inline std::vector<CheckpointRecord> load_checkpoint(const std::string& path,
                                                     std::uint32_t* version_out = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("load_checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "ROVT", 4) != 0) {
        throw InputError("load_checkpoint: bad magic in " + path);
    }
    const auto version = detail::read_raw<std::uint32_t>(is);
    if (version_out) *version_out = version;
    std::vector<CheckpointRecord> records;
    while (true) {
        std::uint32_t name_len;
        is.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
        if (is.eof()) break;
        if (!is) throw InputError("checkpoint: truncated record header");
        CheckpointRecord rec;
        rec.name.resize(name_len);
        is.read(rec.name.data(), name_len);
        const auto rank = detail::read_raw<std::uint32_t>(is);
        std::size_t numel = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            const auto d = detail::read_raw<std::uint64_t>(is);
            rec.shape.push_back(static_cast<std::size_t>(d));
            numel *= static_cast<std::size_t>(d);
        }
        rec.data.resize(numel);
        is.read(reinterpret_cast<char*>(rec.data.data()),
                static_cast<std::streamsize>(numel * sizeof(double)));
        if (!is) throw InputError("checkpoint: truncated payload in record " + rec.name);
        records.push_back(std::move(rec));
    }
    return records;
}

}  // namespace rcp
