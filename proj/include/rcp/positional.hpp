#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "rcp/error.hpp"
#include "rcp/ops.hpp"
#include "rcp/rng.hpp"
#include "rcp/tensor.hpp"

// Positional-embedding variants and the cropped-PE pipeline:
// upsample the grid, sample a normalized crop region, and bilinearly resize
// the region back to the patch-grid size.
namespace rcp {

enum class PEKind { learnable, sincos, none };

// [H x W x D] positional-embedding grid.
struct PEGrid {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t dim = 0;
    PEKind kind = PEKind::learnable;
    Tensor values;  // [H x W x D]

    PEGrid() = default;
    PEGrid(std::size_t h, std::size_t w, std::size_t d, PEKind k, Tensor v)
        : height(h), width(w), dim(d), kind(k), values(std::move(v)) {}

    static PEGrid zeros(std::size_t h, std::size_t w, std::size_t d,
                        PEKind k = PEKind::none) {
        return PEGrid(h, w, d, k, Tensor({h, w, d}));
    }
};

// Normalized crop rectangle, (x1,y1,x2,y2) inside the unit square.
struct CropRegion {
    double x1 = 0.0, y1 = 0.0, x2 = 1.0, y2 = 1.0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() * height(); }
    double aspect() const { return width() / height(); }

    bool valid() const {
        return 0.0 <= x1 && x1 < x2 && x2 <= 1.0 && 0.0 <= y1 && y1 < y2 && y2 <= 1.0;
    }
};

struct CpeConfig {
    std::size_t upsample_size = 64;   // patches per side after upsampling
    std::size_t out_size = 14;        // patches per side of the cropped result
    double scale_min = 0.1;           // crop area, relative to the unit square
    double scale_max = 1.0;
    double aspect_min = 0.5;
    double aspect_max = 2.0;
    std::size_t max_rejection_attempts = 100;

    void validate() const {
        if (!(scale_min > 0.0 && scale_min <= scale_max && scale_max <= 1.0)) {
            throw InputError("CpeConfig: scale range must be within (0, 1]");
        }
        if (!(aspect_min > 0.0 && aspect_min <= aspect_max)) {
            throw InputError("CpeConfig: aspect range must be positive");
        }
        if (out_size > upsample_size) {
            throw InputError("CpeConfig: out_size must not exceed upsample_size");
        }
        if (out_size == 0 || max_rejection_attempts == 0) {
            throw InputError("CpeConfig: out_size and max_rejection_attempts must be positive");
        }
    }
};

// Corner coordinates drawn as x1 ~ U(0,1), y1 ~ U(0,1), x2 ~ U(x1,1),
// y2 ~ U(y1,1); rejected until the scale and aspect constraints hold.
// After max_rejection_attempts the full region (0,0,1,1) is returned.
inline CropRegion sample_crop_region(Rng& rng, const CpeConfig& cfg) {
    cfg.validate();
    for (std::size_t attempt = 0; attempt < cfg.max_rejection_attempts; ++attempt) {
        CropRegion r;
        r.x1 = rng.uniform();
        r.y1 = rng.uniform();
        r.x2 = rng.uniform(r.x1, 1.0);
        r.y2 = rng.uniform(r.y1, 1.0);
        if (!(r.x2 > r.x1 && r.y2 > r.y1)) continue;
        const double area = r.area();
        const double aspect = r.aspect();
        if (area < cfg.scale_min || area > cfg.scale_max) continue;
        if (aspect < cfg.aspect_min || aspect > cfg.aspect_max) continue;
        return r;
    }
    return CropRegion{0.0, 0.0, 1.0, 1.0};
}

namespace detail {

// out_size uniformly spaced sample points spanning [lo, hi] inclusive
// (align-corners within the region); a single point sits at the center.
inline std::vector<double> span_points(double lo, double hi, std::size_t n) {
    std::vector<double> pts(n);
    if (n == 1) {
        pts[0] = 0.5 * (lo + hi);
        return pts;
    }
    const double step = (hi - lo) / static_cast<double>(n - 1);
    for (std::size_t i = 0; i < n; ++i) pts[i] = lo + step * static_cast<double>(i);
    return pts;
}

}  // namespace detail

// Deterministic core of the CPE: upsample the grid, sample out_size^2 points
// spanning `region`, and return them as a new [out x out x D] grid. Gradients
// flow back into the source grid through both interpolation stages.
inline Tensor cpe_from_region(const Tensor& grid, const CropRegion& region,
                              const CpeConfig& cfg) {
    cfg.validate();
    if (grid.rank() != 3) throw DimensionError("cpe_from_region: grid must be [HxWxD]");
    if (!region.valid()) throw InputError("cpe_from_region: invalid crop region");
    const Tensor up = bilinear_resize(grid, cfg.upsample_size, cfg.upsample_size);
    const double hy = static_cast<double>(cfg.upsample_size - 1);
    const double hx = static_cast<double>(cfg.upsample_size - 1);
    const auto ys = detail::span_points(region.y1 * hy, region.y2 * hy, cfg.out_size);
    const auto xs = detail::span_points(region.x1 * hx, region.x2 * hx, cfg.out_size);
    std::vector<std::pair<double, double>> pts;
    pts.reserve(cfg.out_size * cfg.out_size);
    for (double y : ys)
        for (double x : xs) pts.emplace_back(y, x);
    Tensor flat = bilinear_sample(up, pts);  // [out^2 x D]
    return reshape(flat, {cfg.out_size, cfg.out_size, grid.dim(2)});
}

// Cropped Positional Embedding: random region of the up-sampled grid, resized
// back to out_size^2 and used as the image-level PE during pretraining.
inline Tensor cropped_positional_embedding(const PEGrid& grid, const CpeConfig& cfg, Rng& rng) {
    if (grid.kind != PEKind::learnable) {
        throw ContractError("cropped_positional_embedding: grid must be learnable");
    }
    const CropRegion region = sample_crop_region(rng, cfg);
    return cpe_from_region(grid.values, region, cfg);
}

// Fixed 2-D sinusoidal embeddings; d/4 frequencies per axis, interleaved as
// [sin(y w), cos(y w), sin(x w), cos(x w)] blocks. Deterministic in (h, w, d).
inline PEGrid sincos_pe(std::size_t h, std::size_t w, std::size_t d) {
    if (d % 4 != 0) {
        throw DimensionError("sincos_pe: dim must be divisible by 4, got " + std::to_string(d));
    }
    const std::size_t q = d / 4;
    Tensor values({h, w, d});
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            for (std::size_t k = 0; k < q; ++k) {
                const double omega =
                    1.0 / std::pow(10000.0, static_cast<double>(k) / static_cast<double>(q));
                values.at(r, c, 2 * k) = std::sin(static_cast<double>(r) * omega);
                values.at(r, c, 2 * k + 1) = std::cos(static_cast<double>(r) * omega);
                values.at(r, c, 2 * q + 2 * k) = std::sin(static_cast<double>(c) * omega);
                values.at(r, c, 2 * q + 2 * k + 1) = std::cos(static_cast<double>(c) * omega);
            }
        }
    }
    return PEGrid(h, w, d, PEKind::sincos, std::move(values));
}

// H*W tiles of H*W cosine similarities: tile(r,c)[i,j] = cos(pe[r,c], pe[i,j]).
// Rows with zero norm produce 0 similarity.
struct SimilarityMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> values;  // ((r*W + c) * H + i) * W + j

    double tile(std::size_t r, std::size_t c, std::size_t i, std::size_t j) const {
        return values[((r * width + c) * height + i) * width + j];
    }
};

inline SimilarityMap pe_similarity_map(const PEGrid& grid) {
    const std::size_t h = grid.height, w = grid.width, d = grid.dim;
    SimilarityMap map;
    map.height = h;
    map.width = w;
    map.values.assign(h * w * h * w, 0.0);
    std::vector<double> norms(h * w, 0.0);
    const auto& v = grid.values.data();
    for (std::size_t p = 0; p < h * w; ++p) {
        double sq = 0.0;
        for (std::size_t k = 0; k < d; ++k) sq += v[p * d + k] * v[p * d + k];
        norms[p] = std::sqrt(sq);
    }
    for (std::size_t p = 0; p < h * w; ++p) {
        for (std::size_t q = 0; q < h * w; ++q) {
            if (norms[p] == 0.0 || norms[q] == 0.0) continue;
            double dot = 0.0;
            for (std::size_t k = 0; k < d; ++k) dot += v[p * d + k] * v[q * d + k];
            map.values[p * h * w + q] = dot / (norms[p] * norms[q]);
        }
    }
    return map;
}

// CSV serialization: one tile per block (H lines of W comma-separated values),
// blocks in row-major tile order, separated by blank lines.
inline void write_similarity_csv(const SimilarityMap& map, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw InputError("write_similarity_csv: cannot open " + path);
    char buf[64];
    const std::size_t h = map.height, w = map.width;
    for (std::size_t t = 0; t < h * w; ++t) {
        if (t) os << "\n";
        for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                std::snprintf(buf, sizeof(buf), "%.12g", map.values[(t * h + i) * w + j]);
                os << buf << (j + 1 < w ? "," : "");
            }
            os << "\n";
        }
    }
}

inline SimilarityMap read_similarity_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw InputError("read_similarity_csv: cannot open " + path);
    std::vector<std::vector<double>> rows;
    std::string line;
    std::size_t tile_rows = 0, seen_tiles = 0;
    SimilarityMap map;
    while (std::getline(is, line)) {
        if (line.empty()) {
            ++seen_tiles;
            continue;
        }
        std::vector<double> row;
        std::size_t pos = 0;
        while (pos <= line.size()) {
            std::size_t next = line.find(',', pos);
            if (next == std::string::npos) next = line.size();
            row.push_back(std::stod(line.substr(pos, next - pos)));
            pos = next + 1;
        }
        rows.push_back(std::move(row));
        if (seen_tiles == 0) ++tile_rows;
    }
    if (rows.empty()) throw InputError("read_similarity_csv: empty file");
    map.height = tile_rows;
    map.width = rows[0].size();
    map.values.reserve(rows.size() * map.width);
    for (const auto& r : rows)
        for (double v : r) map.values.push_back(v);
    if (map.values.size() != map.height * map.width * map.height * map.width) {
        throw InputError("read_similarity_csv: malformed tile structure");
    }
    return map;
}

// Binary PGM (P5) of the tile grid: tiles laid out row-major at their patch
// positions, cosine values mapped [-1,1] -> [0,255].
inline void write_similarity_pgm(const SimilarityMap& map, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("write_similarity_pgm: cannot open " + path);
    const std::size_t h = map.height, w = map.width;
    const std::size_t rows = h * h, cols = w * w;
    os << "P5\n" << cols << " " << rows << "\n255\n";
    std::vector<unsigned char> line(cols);
    for (std::size_t tr = 0; tr < h; ++tr) {
        for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t tc = 0; tc < w; ++tc) {
                for (std::size_t j = 0; j < w; ++j) {
                    const double v = map.tile(tr, tc, i, j);
                    const double mapped = (v + 1.0) * 0.5 * 255.0;
                    const long px = std::lround(std::min(std::max(mapped, 0.0), 255.0));
                    line[tc * w + j] = static_cast<unsigned char>(px);
                }
            }
            os.write(reinterpret_cast<const char*>(line.data()),
                     static_cast<std::streamsize>(line.size()));
        }
    }
}

}  // namespace rcp
