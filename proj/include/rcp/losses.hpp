#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "rcp/error.hpp"
#include "rcp/ops.hpp"
#include "rcp/tensor.hpp"

// Batch contrastive objectives over L2-normalized embedding batches:
// softmax cross-entropy with the diagonal as positives, and the
// non-alpha-balanced sigmoid focal variant summed over all B^2 pairs.
namespace rcp {

enum class LossKind { softmax_ce, focal };

// Eq. 2 normalizes its B^2 pair terms by 1/B; per_pair switches to 1/B^2 for
// batch-size-comparable magnitudes.
enum class FocalNormalize { as_paper, per_pair };

struct LossConfig {
    LossKind kind = LossKind::focal;
    double gamma = 2.0;
    FocalNormalize normalize = FocalNormalize::as_paper;

    void validate() const {
        if (!(gamma >= 0.0) || !std::isfinite(gamma)) {
            throw InputError("LossConfig: gamma must be finite and >= 0");
        }
    }
};

// v_i . l_j / tau for unit-norm rows; [B x B], differentiable in V, L and tau.
inline Tensor similarity_matrix(const Tensor& v, const Tensor& l, const Tensor& tau) {
    if (v.rank() != 2 || l.rank() != 2 || v.shape() != l.shape()) {
        throw DimensionError("similarity_matrix: embedding batches must share [BxD] shape");
    }
    if (tau.numel() != 1) throw DimensionError("similarity_matrix: tau must be scalar");
    if (!(tau.data()[0] > 0.0)) throw InputError("similarity_matrix: tau must be positive");
    return mul_scalar_t(matmul(v, transpose(l)), pow_const(tau, -1.0));
}

// I2T softmax cross-entropy (positives on the diagonal):
//   -(1/B) sum_i [ s_ii - logsumexp_j s_ij ]
inline Tensor softmax_contrastive_loss(const Tensor& v, const Tensor& l, const Tensor& tau) {
    const Tensor s = similarity_matrix(v, l, tau);
    const Tensor lse = logsumexp_rows(s);
    const Tensor pos = diag_part(s);
    return mean_all(sub(lse, pos));
}

// I2T sigmoid focal loss over all B^2 pairs. With the true-class probability
//   p = sigmoid(s_ij)      if i == j
//   p = 1 - sigmoid(s_ij)  if i != j
// the term -(1-p)^g log(p) rewrites, via t = s_ij on the diagonal and -s_ij
// off it, to sigmoid(-t)^g * softplus(-t), which is evaluated in that
// overflow-safe form.
inline Tensor focal_contrastive_loss(const Tensor& v, const Tensor& l, const Tensor& tau,
                                     double gamma,
                                     FocalNormalize normalize = FocalNormalize::as_paper) {
    if (!(gamma >= 0.0)) throw InputError("focal_contrastive_loss: gamma must be >= 0");
    const Tensor s = similarity_matrix(v, l, tau);
    const std::size_t b = s.dim(0);
    Tensor sign_mask({b, b}, -1.0);
    for (std::size_t i = 0; i < b; ++i) sign_mask.at(i, i) = 1.0;
    const Tensor t = cwise_scale(s, sign_mask);
    const Tensor neg_t = neg(t);
    const Tensor terms = mul(pow_const(sigmoid(neg_t), gamma), softplus(neg_t));
    const double denom = normalize == FocalNormalize::as_paper
                             ? static_cast<double>(b)
                             : static_cast<double>(b) * static_cast<double>(b);
    return scale(sum_all(terms), 1.0 / denom);
}

// T2I mirrors I2T with the summation loops exchanged, i.e. the roles of the
// two batches swapped; the total is the sum of both directions.
inline Tensor total_contrastive_loss(const Tensor& v, const Tensor& l, const Tensor& tau,
                                     const LossConfig& cfg) {
    cfg.validate();
    if (cfg.kind == LossKind::softmax_ce) {
        return add(softmax_contrastive_loss(v, l, tau), softmax_contrastive_loss(l, v, tau));
    }
    return add(focal_contrastive_loss(v, l, tau, cfg.gamma, cfg.normalize),
               focal_contrastive_loss(l, v, tau, cfg.gamma, cfg.normalize));
}

inline LossKind loss_kind_from_string(const std::string& s) {
    if (s == "softmax") return LossKind::softmax_ce;
    if (s == "focal") return LossKind::focal;
    throw InputError("unknown loss kind: " + s);
}

inline std::string to_string(LossKind k) {
    return k == LossKind::softmax_ce ? "softmax" : "focal";
}

}  // namespace rcp
