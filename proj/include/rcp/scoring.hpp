#pragma once

#include <cmath>
#include <cstddef>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "rcp/error.hpp"
#include "rcp/ops.hpp"
#include "rcp/tensor.hpp"

// Open-vocabulary detection score composition: region embeddings via RoI
// pooling, VLM/detection score fusion by geometric means with base/novel
// weights, objectness exponentiation, and the normalized output layer.
namespace rcp {

// Normalized box over a feature map; same ordering rules as CropRegion.
struct RegionBox {
    double x1 = 0.0, y1 = 0.0, x2 = 1.0, y2 = 1.0;

    bool valid() const {
        return 0.0 <= x1 && x1 < x2 && x2 <= 1.0 && 0.0 <= y1 && y1 < y2 && y2 <= 1.0;
    }
    double area() const { return (x2 - x1) * (y2 - y1); }
};

struct ScoreConfig {
    double alpha = 0.65;   // base-category geometric-mean weight
    double beta = 0.3;     // novel-category geometric-mean weight
    double delta = 3.0;    // objectness exponent
    double tau_cls = 20.0; // normalized-layer scale
    std::set<int> base_ids;
    std::set<int> novel_ids;
    int background_id = -1;  // < 0: no background category

    void validate() const {
        if (!(alpha >= 0.0 && alpha <= 1.0) || !(beta >= 0.0 && beta <= 1.0)) {
            throw InputError("ScoreConfig: alpha and beta must lie in [0, 1]");
        }
        if (!(delta >= 0.0)) throw InputError("ScoreConfig: delta must be >= 0");
        for (int id : base_ids) {
            if (novel_ids.count(id)) {
                throw InputError("ScoreConfig: base and novel sets must be disjoint");
            }
        }
        if (background_id >= 0 &&
            (base_ids.count(background_id) || novel_ids.count(background_id))) {
            throw InputError("ScoreConfig: background id cannot be base or novel");
        }
    }
};

// Per-region score bundle; every entry lives in [0, 1].
struct CategoryScores {
    std::vector<double> vlm;        // z
    std::vector<double> detection;  // p
    double objectness = 1.0;        // o
    std::vector<double> combined;   // s^OVD
    std::vector<double> final;      // S^OVD = o^delta * s^OVD
};

// RoI pooling: samples x samples bilinear lattice at the RoI-Align bin
// centers inside the box (feature cell (i,j) centered at ((i+0.5)/H,
// (j+0.5)/W)), averaged and L2-normalized. samples = 1 degenerates to a
// single point at the box center. Differentiable in the feature map.
inline Tensor region_embed(const Tensor& feature_map, const RegionBox& box,
                           std::size_t samples = 2) {
    if (feature_map.rank() != 3) throw DimensionError("region_embed: expects [HxWxD]");
    if (samples == 0) throw InputError("region_embed: samples must be positive");
    RegionBox b = box;
    b.x1 = std::min(std::max(b.x1, 0.0), 1.0);
    b.x2 = std::min(std::max(b.x2, 0.0), 1.0);
    b.y1 = std::min(std::max(b.y1, 0.0), 1.0);
    b.y2 = std::min(std::max(b.y2, 0.0), 1.0);
    if (!(b.x2 > b.x1 && b.y2 > b.y1)) {
        throw InputError("region_embed: degenerate box after clamping");
    }
    const double h = static_cast<double>(feature_map.dim(0));
    const double w = static_cast<double>(feature_map.dim(1));
    std::vector<std::pair<double, double>> pts;
    pts.reserve(samples * samples);
    for (std::size_t i = 0; i < samples; ++i) {
        const double fy = b.y1 + (b.y2 - b.y1) * (static_cast<double>(i) + 0.5) /
                                     static_cast<double>(samples);
        for (std::size_t j = 0; j < samples; ++j) {
            const double fx = b.x1 + (b.x2 - b.x1) * (static_cast<double>(j) + 0.5) /
                                         static_cast<double>(samples);
            pts.emplace_back(fy * h - 0.5, fx * w - 0.5);
        }
    }
    return l2_normalize(mean_over_rows(bilinear_sample(feature_map, pts)));
}

// VLM region scores: softmax over cosine similarity / temperature against the
// category text embeddings. Inputs are assumed unit-norm.
inline Tensor vlm_scores(const Tensor& region_emb, const Tensor& text_embs, double temperature) {
    if (region_emb.rank() != 2 || region_emb.dim(0) != 1) {
        throw DimensionError("vlm_scores: region embedding must be [1xD]");
    }
    if (text_embs.rank() != 2 || text_embs.dim(1) != region_emb.dim(1)) {
        throw DimensionError("vlm_scores: text embeddings must be [CxD]");
    }
    if (!(temperature > 0.0)) throw InputError("vlm_scores: temperature must be positive");
    Tensor cos = reshape(matmul(text_embs, transpose(region_emb)), {text_embs.dim(0)});
    return softmax(scale(cos, 1.0 / temperature), 0);
}

namespace detail {

// Geometric-mean factor x^e with the x = e = 0 corner pinned to 1
// (continuity from the e = 0 limit); e = 1 passes x through untouched so the
// exponent-collapse identities hold bit-exactly.
inline double pow_or_one(double x, double e) {
    if (e == 0.0) return 1.0;
    if (e == 1.0) return x;
    return std::pow(x, e);
}

}  // namespace detail

// Combined open-vocabulary detection score:
//   s = z^(1-alpha) * p^alpha   for base categories
//   s = z^(1-beta)  * p^beta    for novel categories
//   s = p                       for the background category
inline double combine_scores(double z, double p, const ScoreConfig& cfg, int category_id) {
    cfg.validate();
    if (!(z >= 0.0 && z <= 1.0 && p >= 0.0 && p <= 1.0)) {
        throw InputError("combine_scores: z and p must lie in [0, 1]");
    }
    if (category_id == cfg.background_id && cfg.background_id >= 0) return p;
    double weight;
    if (cfg.base_ids.count(category_id)) {
        weight = cfg.alpha;
    } else if (cfg.novel_ids.count(category_id)) {
        weight = cfg.beta;
    } else {
        throw InputError("combine_scores: category id " + std::to_string(category_id) +
                         " is neither base, novel, nor background");
    }
    if (z == p) return p;  // geometric mean of equal scores is the score
    return detail::pow_or_one(z, 1.0 - weight) * detail::pow_or_one(p, weight);
}

// Final OVD score S = o^delta * s.
inline double apply_objectness(double s, double o, double delta) {
    if (!(o >= 0.0 && o <= 1.0)) throw InputError("apply_objectness: o must lie in [0, 1]");
    if (!(delta >= 0.0)) throw InputError("apply_objectness: delta must be >= 0");
    return detail::pow_or_one(o, delta) * s;
}

// Normalized output layer: per category, (tau / (||w_c|| ||x||)) w_c.x + b_c,
// i.e. tau * cos(w_c, x) + b_c. Invariant to positive rescaling of either x
// or the weight rows; eps guards zero norms (documented: the clamped side
// degrades to a fixed-denominator linear map). Differentiable in x, w and b.
inline Tensor normalized_layer(const Tensor& x, const Tensor& w, const Tensor& b,
                               double tau_cls = 20.0, double eps = 1e-6) {
    if (x.rank() != 2 || x.dim(0) != 1) throw DimensionError("normalized_layer: x must be [1xD]");
    if (w.rank() != 2 || w.dim(1) != x.dim(1)) {
        throw DimensionError("normalized_layer: w must be [CxD]");
    }
    if (b.rank() != 1 || b.dim(0) != w.dim(0)) {
        throw DimensionError("normalized_layer: b must be rank-1 [C]");
    }
    const std::size_t c = w.dim(0), d = x.dim(1);
    double xsq = 0.0;
    for (std::size_t j = 0; j < d; ++j) xsq += x.data()[j] * x.data()[j];
    const double xnorm_raw = std::sqrt(xsq);
    const double xnorm = std::max(xnorm_raw, eps);

    Tensor out({c});
    std::vector<double> wnorm(c), cosine(c);
    for (std::size_t i = 0; i < c; ++i) {
        double wsq = 0.0, dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            wsq += w.data()[i * d + j] * w.data()[i * d + j];
            dot += w.data()[i * d + j] * x.data()[j];
        }
        wnorm[i] = std::max(std::sqrt(wsq), eps);
        cosine[i] = dot / (wnorm[i] * xnorm);
        out.data()[i] = tau_cls * cosine[i] + b.data()[i];
    }

    const bool nx = detail::taped(x), nw = detail::taped(w), nb = detail::taped(b);
    if (nx || nw || nb) {
        auto xi = x.impl(), wi = w.impl(), bi = b.impl(), oi = out.impl();
        std::vector<std::shared_ptr<rcp::detail::TensorImpl>> touched;
        if (nx) touched.push_back(xi);
        if (nw) touched.push_back(wi);
        if (nb) touched.push_back(bi);
        const bool x_clamped = xnorm_raw < eps;
        rcp::detail::record_node(
            oi, std::move(touched),
            [=, wn = std::move(wnorm), cs = std::move(cosine)]() {
                for (std::size_t i = 0; i < c; ++i) {
                    const double g = oi->grad[i];
                    if (nb) bi->grad[i] += g;
                    if (g == 0.0 || (!nx && !nw)) continue;
                    const bool w_clamped = wn[i] <= eps;
                    for (std::size_t j = 0; j < d; ++j) {
                        if (nx) {
                            double dcos = wi->data[i * d + j] / (wn[i] * xnorm);
                            if (!x_clamped) {
                                dcos -= cs[i] * xi->data[j] / (xnorm * xnorm);
                            }
                            xi->grad[j] += g * tau_cls * dcos;
                        }
                        if (nw) {
                            double dcos = xi->data[j] / (wn[i] * xnorm);
                            if (!w_clamped) {
                                dcos -= cs[i] * wi->data[i * d + j] / (wn[i] * wn[i]);
                            }
                            wi->grad[i * d + j] += g * tau_cls * dcos;
                        }
                    }
                }
            });
    }
    return out;
}

// Full per-region composition from precomputed probability vectors. Category
// c is looked up through `category_ids[c]`.
inline CategoryScores compose_scores(const std::vector<double>& z, const std::vector<double>& p,
                                     double objectness, const ScoreConfig& cfg,
                                     const std::vector<int>& category_ids) {
    if (z.size() != p.size() || z.size() != category_ids.size()) {
        throw DimensionError("compose_scores: z, p and category ids must align");
    }
    CategoryScores out;
    out.vlm = z;
    out.detection = p;
    out.objectness = objectness;
    out.combined.reserve(z.size());
    out.final.reserve(z.size());
    for (std::size_t c = 0; c < z.size(); ++c) {
        const double s = combine_scores(z[c], p[c], cfg, category_ids[c]);
        out.combined.push_back(s);
        out.final.push_back(apply_objectness(s, objectness, cfg.delta));
    }
    return out;
}

}  // namespace rcp
