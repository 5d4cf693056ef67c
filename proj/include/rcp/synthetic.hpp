#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "rcp/error.hpp"
#include "rcp/rng.hpp"
#include "rcp/scoring.hpp"
#include "rcp/tensor.hpp"

// Procedural image-text corpus: one or more colored glyphs rendered onto a
// noisy background, captioned by three attribute tokens. Everything is a
// pure function of (seed, config), so samples are regenerable and never need
// to be stored.
namespace rcp {

struct SyntheticConfig {
    std::size_t image_size = 32;
    std::size_t channels = 3;
    std::size_t cells = 3;         // cells x cells placement grid
    std::size_t object_half = 4;   // glyph half-extent in pixels
    double noise_amplitude = 0.1;

    std::size_t num_shapes() const { return 3; }
    std::size_t num_colors() const { return channels; }
    std::size_t num_positions() const { return cells * cells; }
    std::size_t num_combos() const { return num_shapes() * num_colors() * num_positions(); }

    // Center of placement cell k along one axis.
    std::size_t cell_center(std::size_t k) const {
        return (2 * k + 1) * image_size / (2 * cells);
    }
};

// Ground-truth attribute triple; combo ids enumerate (shape, color, position).
struct Attributes {
    std::size_t shape = 0;  // 0 square, 1 cross, 2 disc
    std::size_t color = 0;  // channel index
    std::size_t position = 0;

    std::size_t combo_id(const SyntheticConfig& cfg) const {
        return (shape * cfg.num_colors() + color) * cfg.num_positions() + position;
    }

    static Attributes from_combo(std::size_t id, const SyntheticConfig& cfg) {
        Attributes a;
        a.position = id % cfg.num_positions();
        id /= cfg.num_positions();
        a.color = id % cfg.num_colors();
        a.shape = id / cfg.num_colors();
        return a;
    }

    bool operator==(const Attributes& o) const {
        return shape == o.shape && color == o.color && position == o.position;
    }
};

// Token layout: 0 is reserved, shapes occupy [1, 1+S), colors [1+S, 1+S+C),
// positions the next block. Injective over attribute triples by construction.
inline std::vector<std::size_t> tokens_for(const Attributes& a, const SyntheticConfig& cfg) {
    const std::size_t shape_base = 1;
    const std::size_t color_base = shape_base + cfg.num_shapes();
    const std::size_t pos_base = color_base + cfg.num_colors();
    return {shape_base + a.shape, color_base + a.color, pos_base + a.position};
}

inline Attributes attributes_from_tokens(const std::vector<std::size_t>& tokens,
                                         const SyntheticConfig& cfg) {
    if (tokens.size() != 3) throw InputError("attributes_from_tokens: expected 3 tokens");
    const std::size_t shape_base = 1;
    const std::size_t color_base = shape_base + cfg.num_shapes();
    const std::size_t pos_base = color_base + cfg.num_colors();
    Attributes a;
    if (tokens[0] < shape_base || tokens[0] >= color_base ||
        tokens[1] < color_base || tokens[1] >= pos_base ||
        tokens[2] < pos_base || tokens[2] >= pos_base + cfg.num_positions()) {
        throw InputError("attributes_from_tokens: malformed caption");
    }
    a.shape = tokens[0] - shape_base;
    a.color = tokens[1] - color_base;
    a.position = tokens[2] - pos_base;
    return a;
}

struct SyntheticPair {
    Tensor image;  // [S x S x C]
    std::vector<std::size_t> tokens;
    Attributes attributes;
};

namespace detail {

inline bool glyph_hit(std::size_t shape, long dy, long dx, long half) {
    switch (shape) {
        case 0:  // filled square
            return std::labs(dy) <= half && std::labs(dx) <= half;
        case 1:  // plus sign, 3px arms
            return (std::labs(dy) <= 1 && std::labs(dx) <= half) ||
                   (std::labs(dx) <= 1 && std::labs(dy) <= half);
        case 2:  // disc, radius slightly over half so it differs from the square
            return dy * dy + dx * dx <= half * half + 2;
        default:
            return false;
    }
}

inline void render_object(Tensor& image, const Attributes& a, const SyntheticConfig& cfg) {
    const std::size_t cells = cfg.cells;
    const long cy = static_cast<long>(cfg.cell_center(a.position / cells));
    const long cx = static_cast<long>(cfg.cell_center(a.position % cells));
    const long half = static_cast<long>(cfg.object_half);
    const long s = static_cast<long>(cfg.image_size);
    for (long dy = -half; dy <= half; ++dy) {
        for (long dx = -half; dx <= half; ++dx) {
            if (!glyph_hit(a.shape, dy, dx, half)) continue;
            const long y = cy + dy, x = cx + dx;
            if (y < 0 || y >= s || x < 0 || x >= s) continue;
            image.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), a.color) = 1.0;
        }
    }
}

}  // namespace detail

// Tight normalized box around the glyph at position bin `pos`.
inline RegionBox object_box(std::size_t pos, const SyntheticConfig& cfg) {
    const double s = static_cast<double>(cfg.image_size);
    const double cy = static_cast<double>(cfg.cell_center(pos / cfg.cells));
    const double cx = static_cast<double>(cfg.cell_center(pos % cfg.cells));
    const double half = static_cast<double>(cfg.object_half);
    RegionBox b;
    b.x1 = (cx - half) / s;
    b.x2 = (cx + half + 1.0) / s;
    b.y1 = (cy - half) / s;
    b.y2 = (cy + half + 1.0) / s;
    return b;
}

// Deterministic pair: attributes drawn uniformly, then background noise, then
// the glyph. Same seed, same bits.
inline SyntheticPair gen_pair(std::uint64_t seed, const SyntheticConfig& cfg = {}) {
    Rng rng(seed);
    Attributes a;
    a.shape = rng.below(cfg.num_shapes());
    a.color = rng.below(cfg.num_colors());
    a.position = rng.below(cfg.num_positions());
    SyntheticPair pair;
    pair.attributes = a;
    pair.tokens = tokens_for(a, cfg);
    pair.image = Tensor({cfg.image_size, cfg.image_size, cfg.channels});
    for (auto& v : pair.image.data()) v = rng.uniform(0.0, cfg.noise_amplitude);
    detail::render_object(pair.image, a, cfg);
    return pair;
}

// Same, with attributes drawn uniformly from an explicit combo list (used to
// keep held-out combos out of the training stream).
inline SyntheticPair gen_pair_from(std::uint64_t seed, const std::vector<std::size_t>& combos,
                                   const SyntheticConfig& cfg = {}) {
    if (combos.empty()) throw InputError("gen_pair_from: empty combo list");
    Rng rng(seed);
    const Attributes a = Attributes::from_combo(combos[rng.below(combos.size())], cfg);
    SyntheticPair pair;
    pair.attributes = a;
    pair.tokens = tokens_for(a, cfg);
    pair.image = Tensor({cfg.image_size, cfg.image_size, cfg.channels});
    for (auto& v : pair.image.data()) v = rng.uniform(0.0, cfg.noise_amplitude);
    detail::render_object(pair.image, a, cfg);
    return pair;
}

// Deterministic 80/20 split of the combo universe into training ("base") and
// held-out ("novel") sets. The shuffle seed is a fixed constant so the split
// does not move with the run seed.
inline void split_combos(const SyntheticConfig& cfg, std::vector<std::size_t>& train,
                         std::vector<std::size_t>& novel) {
    constexpr std::uint64_t kSplitSeed = 0xC0FFEE;
    std::vector<std::size_t> all(cfg.num_combos());
    std::iota(all.begin(), all.end(), 0);
    Rng rng(kSplitSeed);
    for (std::size_t i = all.size(); i > 1; --i) {
        std::swap(all[i - 1], all[rng.below(i)]);
    }
    const std::size_t novel_count = cfg.num_combos() / 5;
    novel.assign(all.begin(), all.begin() + novel_count);
    train.assign(all.begin() + novel_count, all.end());
    std::sort(novel.begin(), novel.end());
    std::sort(train.begin(), train.end());
}

// One rendered object with its ground truth.
struct RegionObject {
    RegionBox box;
    std::vector<std::size_t> tokens;
    Attributes attributes;
    double objectness = 1.0;  // centerness of the ground-truth box: exactly 1
};

struct RegionTask {
    Tensor image;
    std::vector<RegionObject> objects;
    bool reduced_k = false;  // requested count could not be placed
};

// Centerness of a point inside a box (FCOS-style): sqrt of the products of
// the min/max distance ratios to the box sides; 1 at the center, 0 outside.
inline double centerness(const RegionBox& box, double y, double x) {
    const double l = x - box.x1, r = box.x2 - x;
    const double t = y - box.y1, b = box.y2 - y;
    if (l < 0.0 || r < 0.0 || t < 0.0 || b < 0.0) return 0.0;
    const double fx = std::min(l, r) / std::max(l, r);
    const double fy = std::min(t, b) / std::max(t, b);
    return std::sqrt(fx * fy);
}

// K objects in distinct placement cells (so boxes never overlap), each with
// its own attributes, caption and unit objectness. If K exceeds the number of
// cells it is reduced and the task is flagged.
inline RegionTask gen_region_task(std::uint64_t seed, std::size_t k,
                                  const SyntheticConfig& cfg = {},
                                  const std::vector<std::size_t>* combo_pool = nullptr) {
    RegionTask task;
    Rng rng(seed);
    std::size_t want = k;
    if (want > cfg.num_positions()) {
        want = cfg.num_positions();
        task.reduced_k = true;
    }
    if (want == 0) throw InputError("gen_region_task: k must be positive");

    std::vector<std::size_t> cells(cfg.num_positions());
    std::iota(cells.begin(), cells.end(), 0);
    for (std::size_t i = cells.size(); i > 1; --i) std::swap(cells[i - 1], cells[rng.below(i)]);
    cells.resize(want);

    task.image = Tensor({cfg.image_size, cfg.image_size, cfg.channels});
    for (auto& v : task.image.data()) v = rng.uniform(0.0, cfg.noise_amplitude);

    for (std::size_t pos : cells) {
        Attributes a;
        if (combo_pool) {
            // Keep drawing from the pool until the position bin matches the
            // assigned cell; falls back to forcing the position if the pool
            // lacks it entirely.
            bool found = false;
            for (std::size_t attempt = 0; attempt < 64 && !found; ++attempt) {
                const Attributes cand =
                    Attributes::from_combo((*combo_pool)[rng.below(combo_pool->size())], cfg);
                if (cand.position == pos) {
                    a = cand;
                    found = true;
                }
            }
            if (!found) {
                a = Attributes::from_combo((*combo_pool)[rng.below(combo_pool->size())], cfg);
                a.position = pos;
            }
        } else {
            a.shape = rng.below(cfg.num_shapes());
            a.color = rng.below(cfg.num_colors());
            a.position = pos;
        }
        detail::render_object(task.image, a, cfg);
        RegionObject obj;
        obj.box = object_box(pos, cfg);
        obj.attributes = a;
        obj.tokens = tokens_for(a, cfg);
        obj.objectness = 1.0;
        task.objects.push_back(std::move(obj));
    }
    return task;
}

// Corpus dump, one record per line: seed, attribute ids, token ids. Images
// are regenerable from the seeds and are never written.
inline void write_corpus_csv(const std::vector<std::uint64_t>& seeds, const std::string& path,
                             const SyntheticConfig& cfg = {}) {
    std::ofstream os(path);
    if (!os) throw InputError("write_corpus_csv: cannot open " + path);
    os << "seed,shape,color,position,tok0,tok1,tok2\n";
    for (std::uint64_t s : seeds) {
        const SyntheticPair pair = gen_pair(s, cfg);
        os << s << "," << pair.attributes.shape << "," << pair.attributes.color << ","
           << pair.attributes.position << "," << pair.tokens[0] << "," << pair.tokens[1] << ","
           << pair.tokens[2] << "\n";
    }
}

}  // namespace rcp
