#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "rcp/error.hpp"
#include "rcp/ops.hpp"
#include "rcp/positional.hpp"
#include "rcp/rng.hpp"
#include "rcp/tensor.hpp"

// Tiny dual encoder: a patch-based transformer image tower with pluggable
// positional embeddings and a token transformer text tower. Both pool with a
// global average and L2-normalize to unit embeddings.
namespace rcp {

enum class PeMode { learnable, cpe, sincos, none, feat_crop_resize };

inline PeMode pe_mode_from_string(const std::string& s) {
    if (s == "learnable") return PeMode::learnable;
    if (s == "cpe") return PeMode::cpe;
    if (s == "sincos") return PeMode::sincos;
    if (s == "none") return PeMode::none;
    if (s == "feat_crop_resize") return PeMode::feat_crop_resize;
    throw InputError("unknown pe_mode: " + s);
}

inline std::string to_string(PeMode m) {
    switch (m) {
        case PeMode::learnable: return "learnable";
        case PeMode::cpe: return "cpe";
        case PeMode::sincos: return "sincos";
        case PeMode::none: return "none";
        case PeMode::feat_crop_resize: return "feat_crop_resize";
    }
    return "?";
}

struct VitConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 8;
    std::size_t channels = 3;
    std::size_t dim = 32;
    std::size_t depth = 2;
    std::size_t heads = 4;
    PeMode pe_mode = PeMode::cpe;

    std::size_t grid() const { return image_size / patch_size; }

    void validate() const {
        if (image_size % patch_size != 0) {
            throw DimensionError("VitConfig: image_size must be divisible by patch_size");
        }
        if (dim % heads != 0) {
            throw DimensionError("VitConfig: dim must be divisible by heads");
        }
        if (depth == 0 || channels == 0) throw InputError("VitConfig: depth/channels must be positive");
    }
};

struct TextConfig {
    std::size_t vocab_size = 64;
    std::size_t max_len = 16;
    std::size_t dim = 32;
    std::size_t depth = 2;
    std::size_t heads = 4;

    void validate() const {
        if (max_len < 1) throw InputError("TextConfig: max_len must be >= 1");
        if (dim % heads != 0) throw DimensionError("TextConfig: dim must be divisible by heads");
        if (depth == 0 || vocab_size == 0) throw InputError("TextConfig: depth/vocab must be positive");
    }
};

// Flatten [H x W x C] into one row per patch_size x patch_size patch,
// row-major in both the patch grid and within each patch. Lossless.
inline Tensor patchify(const Tensor& image, std::size_t patch_size) {
    if (image.rank() != 3) throw DimensionError("patchify: image must be [HxWxC]");
    const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
    if (h % patch_size != 0 || w % patch_size != 0) {
        throw DimensionError("patchify: image dims must be divisible by patch size");
    }
    const std::size_t gh = h / patch_size, gw = w / patch_size;
    const std::size_t cols = patch_size * patch_size * c;
    std::vector<std::size_t> idx(gh * gw * cols);
    std::size_t n = 0;
    for (std::size_t pr = 0; pr < gh; ++pr)
        for (std::size_t pc = 0; pc < gw; ++pc)
            for (std::size_t py = 0; py < patch_size; ++py)
                for (std::size_t px = 0; px < patch_size; ++px)
                    for (std::size_t ch = 0; ch < c; ++ch)
                        idx[n++] = ((pr * patch_size + py) * w + pc * patch_size + px) * c + ch;
    return gather_linear(image, std::move(idx), {gh * gw, cols});
}

// Inverse of patchify.
inline Tensor unpatchify(const Tensor& patches, std::size_t h, std::size_t w, std::size_t c,
                         std::size_t patch_size) {
    if (patches.rank() != 2) throw DimensionError("unpatchify: expects rank-2");
    const std::size_t gh = h / patch_size, gw = w / patch_size;
    const std::size_t cols = patch_size * patch_size * c;
    if (patches.dim(0) != gh * gw || patches.dim(1) != cols) {
        throw DimensionError("unpatchify: patch matrix does not match target dims");
    }
    std::vector<std::size_t> idx(h * w * c);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const std::size_t pr = y / patch_size, pc = x / patch_size;
                const std::size_t py = y % patch_size, px = x % patch_size;
                idx[(y * w + x) * c + ch] =
                    (pr * gw + pc) * cols + (py * patch_size + px) * c + ch;
            }
    return gather_linear(patches, std::move(idx), {h, w, c});
}

// Pre-norm transformer block parameters.
struct BlockParams {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor w1, b1, w2, b2;
};

// Residual pre-norm multi-head self-attention followed by a GELU MLP.
inline Tensor attention_block(const Tensor& x, const BlockParams& p, std::size_t heads) {
    const std::size_t d = x.dim(1);
    if (d % heads != 0) throw DimensionError("attention_block: width not divisible by heads");
    const std::size_t dh = d / heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor h = layer_norm(x, p.ln1_g, p.ln1_b);
    Tensor q = add_rowvec(matmul(h, p.wq), p.bq);
    Tensor k = add_rowvec(matmul(h, p.wk), p.bk);
    Tensor v = add_rowvec(matmul(h, p.wv), p.bv);

    std::vector<Tensor> head_outs;
    head_outs.reserve(heads);
    for (std::size_t hd = 0; hd < heads; ++hd) {
        Tensor qh = slice_cols(q, hd * dh, (hd + 1) * dh);
        Tensor kh = slice_cols(k, hd * dh, (hd + 1) * dh);
        Tensor vh = slice_cols(v, hd * dh, (hd + 1) * dh);
        Tensor att = softmax(scale(matmul(qh, transpose(kh)), att_scale), 1);
        head_outs.push_back(matmul(att, vh));
    }
    Tensor attn = add_rowvec(matmul(concat_cols(head_outs), p.wo), p.bo);
    Tensor x1 = add(x, attn);

    Tensor m = layer_norm(x1, p.ln2_g, p.ln2_b);
    m = gelu(add_rowvec(matmul(m, p.w1), p.b1));
    m = add_rowvec(matmul(m, p.w2), p.b2);
    return add(x1, m);
}

enum class ParamGroup { image_backbone, text_tower, temperature };

struct ParamRef {
    std::string name;
    Tensor tensor;
    ParamGroup group;
};

// The two towers plus the learnable temperature (stored as log tau so that
// tau stays positive). The learnable image PE grid exists for every pe_mode
// and is drawn from the same init stream, so runs that differ only in
// pe_mode start from identical weights; cpe and learnable use the same
// underlying tensor.
class DualEncoder {
public:
    DualEncoder(const VitConfig& vit, const TextConfig& text, const CpeConfig& cpe,
                Rng& rng, double tau_init = 0.07)
        : vit_(vit), text_(text), cpe_(cpe) {
        vit_.validate();
        text_.validate();
        cpe_.validate();
        if (vit_.dim != text_.dim) {
            throw DimensionError("DualEncoder: image and text towers must share dim");
        }
        if (cpe_.out_size != vit_.grid()) {
            throw DimensionError("DualEncoder: cpe out_size must equal the patch grid side");
        }
        if (!(tau_init > 0.0)) throw InputError("DualEncoder: tau_init must be positive");

        const std::size_t d = vit_.dim;
        const std::size_t g = vit_.grid();
        const std::size_t pvec = vit_.patch_size * vit_.patch_size * vit_.channels;

        patch_w_ = param("img.patch_w", {pvec, d}, ParamGroup::image_backbone, &rng);
        patch_b_ = param("img.patch_b", {1, d}, ParamGroup::image_backbone, nullptr);
        img_pe_ = param("img.pe", {g, g, d}, ParamGroup::image_backbone, &rng);
        img_blocks_ = make_blocks("img", vit_.depth, d, ParamGroup::image_backbone, rng);
        img_ln_g_ = param("img.ln_g", {1, d}, ParamGroup::image_backbone, nullptr, 1.0);
        img_ln_b_ = param("img.ln_b", {1, d}, ParamGroup::image_backbone, nullptr);

        tok_table_ = param("txt.tok", {text_.vocab_size, d}, ParamGroup::text_tower, &rng);
        txt_pe_ = param("txt.pe", {text_.max_len, d}, ParamGroup::text_tower, &rng);
        txt_blocks_ = make_blocks("txt", text_.depth, d, ParamGroup::text_tower, rng);
        txt_ln_g_ = param("txt.ln_g", {1, d}, ParamGroup::text_tower, nullptr, 1.0);
        txt_ln_b_ = param("txt.ln_b", {1, d}, ParamGroup::text_tower, nullptr);

        log_tau_ = param("log_tau", {1}, ParamGroup::temperature, nullptr);
        log_tau_.data()[0] = std::log(tau_init);

        if (d % 4 == 0) sincos_ = sincos_pe(g, g, d).values;
    }

    const VitConfig& vit() const { return vit_; }
    const TextConfig& text() const { return text_; }
    const CpeConfig& cpe_config() const { return cpe_; }

    const std::vector<ParamRef>& params() const { return params_; }

    Tensor image_pe_grid() const { return img_pe_; }

    // tau = exp(log_tau); differentiable so the temperature can be learned.
    Tensor tau() const { return exp(log_tau_); }
    double tau_value() const { return std::exp(log_tau_.data()[0]); }

    // Patch embed + positional embedding (per mode) -> blocks -> final LN ->
    // global average pool -> L2 normalize. Returns a unit-norm [1 x D] row.
    Tensor image_forward(const Tensor& image, PeMode mode, Rng* rng = nullptr) const {
        if ((mode == PeMode::cpe || mode == PeMode::feat_crop_resize) && rng == nullptr) {
            throw ContractError("image_forward: pe_mode requires an rng");
        }
        const std::size_t g = vit_.grid();
        const std::size_t d = vit_.dim;
        Tensor tokens = add_rowvec(matmul(patchify(image, vit_.patch_size), patch_w_), patch_b_);

        switch (mode) {
            case PeMode::learnable:
            case PeMode::feat_crop_resize:
                tokens = add(tokens, reshape(img_pe_, {g * g, d}));
                break;
            case PeMode::cpe: {
                PEGrid grid(g, g, d, PEKind::learnable, img_pe_);
                Tensor cpe = cropped_positional_embedding(grid, cpe_, *rng);
                tokens = add(tokens, reshape(cpe, {g * g, d}));
                break;
            }
            case PeMode::sincos:
                if (sincos_.numel() == 0) {
                    throw DimensionError("image_forward: sincos PE needs dim divisible by 4");
                }
                tokens = add(tokens, reshape(sincos_, {g * g, d}));
                break;
            case PeMode::none:
                break;
        }

        for (const auto& blk : img_blocks_) tokens = attention_block(tokens, blk, vit_.heads);
        tokens = layer_norm(tokens, img_ln_g_, img_ln_b_);

        if (mode == PeMode::feat_crop_resize) {
            const CropRegion region = sample_crop_region(*rng, cpe_);
            Tensor map = reshape(tokens, {g, g, d});
            const double hi = static_cast<double>(g - 1);
            const auto ys = detail::span_points(region.y1 * hi, region.y2 * hi, g);
            const auto xs = detail::span_points(region.x1 * hi, region.x2 * hi, g);
            std::vector<std::pair<double, double>> pts;
            pts.reserve(g * g);
            for (double y : ys)
                for (double x : xs) pts.emplace_back(y, x);
            tokens = bilinear_sample(map, pts);
        }

        return l2_normalize(mean_over_rows(tokens));
    }

    // Token embed + positional rows -> blocks -> final LN -> mean over the
    // real tokens -> L2 normalize. Sequences are processed at their true
    // length, so no padding is involved.
    Tensor text_forward(const std::vector<std::size_t>& tokens) const {
        if (tokens.empty()) throw InputError("text_forward: empty token sequence");
        if (tokens.size() > text_.max_len) {
            throw InputError("text_forward: sequence longer than max_len");
        }
        for (std::size_t id : tokens) {
            if (id >= text_.vocab_size) {
                throw InputError("text_forward: token id " + std::to_string(id) +
                                 " out of vocabulary");
            }
        }
        Tensor x = add(row_gather(tok_table_, tokens),
                       slice_rows(txt_pe_, 0, tokens.size()));
        for (const auto& blk : txt_blocks_) x = attention_block(x, blk, text_.heads);
        x = layer_norm(x, txt_ln_g_, txt_ln_b_);
        return l2_normalize(mean_over_rows(x));
    }

    // Final-layer token map as an [g x g x D] feature grid (for region
    // pooling at evaluation time). Full-image PE, no random cropping.
    Tensor feature_map(const Tensor& image) const {
        const std::size_t g = vit_.grid();
        Tensor tokens = add_rowvec(matmul(patchify(image, vit_.patch_size), patch_w_), patch_b_);
        if (vit_.pe_mode != PeMode::none) {
            if (vit_.pe_mode == PeMode::sincos) {
                tokens = add(tokens, reshape(sincos_, {g * g, vit_.dim}));
            } else {
                tokens = add(tokens, reshape(img_pe_, {g * g, vit_.dim}));
            }
        }
        for (const auto& blk : img_blocks_) tokens = attention_block(tokens, blk, vit_.heads);
        tokens = layer_norm(tokens, img_ln_g_, img_ln_b_);
        return reshape(tokens, {g, g, vit_.dim});
    }

    // Evaluation uses whole-image positional embeddings: the random-crop
    // modes fall back to the full learnable grid.
    PeMode eval_pe_mode(PeMode train_mode) const {
        if (train_mode == PeMode::cpe || train_mode == PeMode::feat_crop_resize) {
            return PeMode::learnable;
        }
        return train_mode;
    }

private:
    Tensor param(const std::string& name, std::vector<std::size_t> shape, ParamGroup group,
                 Rng* rng, double fill = 0.0) {
        Tensor t(std::move(shape), fill);
        if (rng) {
            for (auto& v : t.data()) v = rng->normal(0.0, 0.02);
        }
        t.set_requires_grad(true);
        params_.push_back({name, t, group});
        return t;
    }

    std::vector<BlockParams> make_blocks(const std::string& prefix, std::size_t depth,
                                         std::size_t d, ParamGroup group, Rng& rng) {
        std::vector<BlockParams> blocks;
        blocks.reserve(depth);
        const std::size_t hidden = 4 * d;
        for (std::size_t i = 0; i < depth; ++i) {
            const std::string b = prefix + ".blk" + std::to_string(i) + ".";
            BlockParams p;
            p.ln1_g = param(b + "ln1_g", {1, d}, group, nullptr, 1.0);
            p.ln1_b = param(b + "ln1_b", {1, d}, group, nullptr);
            p.wq = param(b + "wq", {d, d}, group, &rng);
            p.bq = param(b + "bq", {1, d}, group, nullptr);
            p.wk = param(b + "wk", {d, d}, group, &rng);
            p.bk = param(b + "bk", {1, d}, group, nullptr);
            p.wv = param(b + "wv", {d, d}, group, &rng);
            p.bv = param(b + "bv", {1, d}, group, nullptr);
            p.wo = param(b + "wo", {d, d}, group, &rng);
            p.bo = param(b + "bo", {1, d}, group, nullptr);
            p.ln2_g = param(b + "ln2_g", {1, d}, group, nullptr, 1.0);
            p.ln2_b = param(b + "ln2_b", {1, d}, group, nullptr);
            p.w1 = param(b + "w1", {d, hidden}, group, &rng);
            p.b1 = param(b + "b1", {1, hidden}, group, nullptr);
            p.w2 = param(b + "w2", {hidden, d}, group, &rng);
            p.b2 = param(b + "b2", {1, d}, group, nullptr);
            blocks.push_back(std::move(p));
        }
        return blocks;
    }

    VitConfig vit_;
    TextConfig text_;
    CpeConfig cpe_;
    std::vector<ParamRef> params_;

    Tensor patch_w_, patch_b_, img_pe_;
    std::vector<BlockParams> img_blocks_;
    Tensor img_ln_g_, img_ln_b_;
    Tensor tok_table_, txt_pe_;
    std::vector<BlockParams> txt_blocks_;
    Tensor txt_ln_g_, txt_ln_b_;
    Tensor log_tau_;
    Tensor sincos_;
};

}  // namespace rcp
