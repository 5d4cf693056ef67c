#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rcp/checkpoint.hpp"
#include "rcp/config.hpp"
#include "rcp/encoders.hpp"
#include "rcp/error.hpp"
#include "rcp/finite_diff.hpp"
#include "rcp/losses.hpp"
#include "rcp/optimizer.hpp"
#include "rcp/positional.hpp"
#include "rcp/rng.hpp"
#include "rcp/scoring.hpp"
#include "rcp/synthetic.hpp"
#include "rcp/tensor.hpp"

// Training, evaluation and verification harness tying the library together.
namespace rcp {

// Disjoint seed streams derived from one run seed.
namespace seed_tag {
constexpr std::uint64_t init = 1;    // parameter initialization
constexpr std::uint64_t data = 2;    // training pairs
constexpr std::uint64_t cpe = 3;     // per-image crop sampling
constexpr std::uint64_t eval = 4;    // held-out retrieval pairs
constexpr std::uint64_t region = 5;  // region tasks
}  // namespace seed_tag

struct RunConfig {
    VitConfig vit;
    TextConfig text;
    CpeConfig cpe;
    LossConfig loss;
    OptimConfig optim;
    SyntheticConfig synth;
    std::size_t steps = 2000;
    std::size_t batch_size = 8;
    std::uint64_t seed = 0;
    double tau_init = 0.07;
    double vlm_temperature = 0.1;
    double tau_cls = 20.0;

    void validate() const {
        if (batch_size < 1) throw InputError("RunConfig: batch_size must be >= 1");
        vit.validate();
        text.validate();
        cpe.validate();
        loss.validate();
        optim.validate();
        if (vit.image_size != synth.image_size || vit.channels != synth.channels) {
            throw InputError("RunConfig: encoder image size/channels must match the corpus");
        }
    }

    static RunConfig desk_default() {
        RunConfig cfg;
        cfg.vit.image_size = 32;
        cfg.vit.patch_size = 8;
        cfg.vit.channels = 3;
        cfg.vit.dim = 32;
        cfg.vit.depth = 2;
        cfg.vit.heads = 4;
        cfg.vit.pe_mode = PeMode::cpe;
        cfg.text.vocab_size = 64;
        cfg.text.max_len = 16;
        cfg.text.dim = 32;
        cfg.text.depth = 2;
        cfg.text.heads = 4;
        // 4x4 patch grid upsampled 4x, mirroring the paper's 14 -> 64 ratio.
        cfg.cpe.upsample_size = 16;
        cfg.cpe.out_size = 4;
        cfg.optim.lr = 0.5;
        cfg.optim.momentum = 0.9;
        cfg.optim.warmup_steps = 100;
        return cfg;
    }
};

// Flat `key = value` surface for RunConfig; unknown keys are rejected.
inline RunConfig run_config_from_kv(KvConfig& kv) {
    RunConfig cfg = RunConfig::desk_default();
    cfg.steps = static_cast<std::size_t>(kv.get_int("run.steps", static_cast<long>(cfg.steps)));
    cfg.batch_size =
        static_cast<std::size_t>(kv.get_int("run.batch", static_cast<long>(cfg.batch_size)));
    cfg.seed = static_cast<std::uint64_t>(kv.get_int("run.seed", 0));

    cfg.optim.lr = kv.get_double("optim.lr", cfg.optim.lr);
    cfg.optim.momentum = kv.get_double("optim.momentum", cfg.optim.momentum);
    cfg.optim.weight_decay = kv.get_double("optim.weight_decay", cfg.optim.weight_decay);
    cfg.optim.warmup_steps = static_cast<std::size_t>(
        kv.get_int("optim.warmup", static_cast<long>(cfg.optim.warmup_steps)));
    cfg.optim.backbone_lr_ratio =
        kv.get_double("optim.backbone_lr_ratio", cfg.optim.backbone_lr_ratio);
    cfg.optim.freeze_backbone = kv.get_bool("optim.freeze_backbone", cfg.optim.freeze_backbone);
    cfg.optim.freeze_tau = kv.get_bool("optim.freeze_tau", cfg.optim.freeze_tau);

    cfg.loss.kind = loss_kind_from_string(kv.get_string("loss.kind", to_string(cfg.loss.kind)));
    cfg.loss.gamma = kv.get_double("loss.gamma", cfg.loss.gamma);
    const std::string norm = kv.get_string("loss.normalize", "as_paper");
    if (norm == "as_paper") {
        cfg.loss.normalize = FocalNormalize::as_paper;
    } else if (norm == "per_pair") {
        cfg.loss.normalize = FocalNormalize::per_pair;
    } else {
        throw InputError("loss.normalize must be as_paper or per_pair");
    }

    cfg.vit.image_size =
        static_cast<std::size_t>(kv.get_int("image.size", static_cast<long>(cfg.vit.image_size)));
    cfg.vit.patch_size =
        static_cast<std::size_t>(kv.get_int("image.patch", static_cast<long>(cfg.vit.patch_size)));
    cfg.vit.channels =
        static_cast<std::size_t>(kv.get_int("image.channels", static_cast<long>(cfg.vit.channels)));
    cfg.vit.dim = static_cast<std::size_t>(kv.get_int("image.dim", static_cast<long>(cfg.vit.dim)));
    cfg.vit.depth =
        static_cast<std::size_t>(kv.get_int("image.depth", static_cast<long>(cfg.vit.depth)));
    cfg.vit.heads =
        static_cast<std::size_t>(kv.get_int("image.heads", static_cast<long>(cfg.vit.heads)));
    cfg.vit.pe_mode = pe_mode_from_string(kv.get_string("image.pe_mode", to_string(cfg.vit.pe_mode)));

    cfg.text.vocab_size =
        static_cast<std::size_t>(kv.get_int("text.vocab", static_cast<long>(cfg.text.vocab_size)));
    cfg.text.max_len =
        static_cast<std::size_t>(kv.get_int("text.max_len", static_cast<long>(cfg.text.max_len)));
    cfg.text.dim = static_cast<std::size_t>(kv.get_int("text.dim", static_cast<long>(cfg.text.dim)));
    cfg.text.depth =
        static_cast<std::size_t>(kv.get_int("text.depth", static_cast<long>(cfg.text.depth)));
    cfg.text.heads =
        static_cast<std::size_t>(kv.get_int("text.heads", static_cast<long>(cfg.text.heads)));

    cfg.cpe.upsample_size = static_cast<std::size_t>(
        kv.get_int("cpe.upsample", static_cast<long>(cfg.cpe.upsample_size)));
    cfg.cpe.scale_min = kv.get_double("cpe.scale_min", cfg.cpe.scale_min);
    cfg.cpe.scale_max = kv.get_double("cpe.scale_max", cfg.cpe.scale_max);
    cfg.cpe.aspect_min = kv.get_double("cpe.aspect_min", cfg.cpe.aspect_min);
    cfg.cpe.aspect_max = kv.get_double("cpe.aspect_max", cfg.cpe.aspect_max);
    cfg.cpe.max_rejection_attempts = static_cast<std::size_t>(
        kv.get_int("cpe.max_attempts", static_cast<long>(cfg.cpe.max_rejection_attempts)));
    cfg.cpe.out_size = cfg.vit.grid();

    cfg.tau_init = kv.get_double("model.tau_init", cfg.tau_init);
    cfg.vlm_temperature = kv.get_double("score.vlm_temperature", cfg.vlm_temperature);
    cfg.tau_cls = kv.get_double("score.tau_cls", cfg.tau_cls);

    cfg.synth.image_size = cfg.vit.image_size;
    cfg.synth.channels = cfg.vit.channels;
    cfg.validate();
    return cfg;
}

inline DualEncoder build_model(const RunConfig& cfg) {
    Rng rng(mix_seed(cfg.seed, seed_tag::init, 0));
    return DualEncoder(cfg.vit, cfg.text, cfg.cpe, rng, cfg.tau_init);
}

// ---------------------------------------------------------------------------
// checkpoint glue
// ---------------------------------------------------------------------------

// Model checkpoints store the architecture as numeric cfg.* records ahead of
// the parameters, so a file is sufficient to rebuild the encoder.
inline std::vector<CheckpointRecord> model_records(const DualEncoder& model, double tau_init) {
    std::vector<CheckpointRecord> recs;
    const VitConfig& v = model.vit();
    const TextConfig& t = model.text();
    const CpeConfig& c = model.cpe_config();
    recs.push_back({"cfg.image",
                    {7},
                    {static_cast<double>(v.image_size), static_cast<double>(v.patch_size),
                     static_cast<double>(v.channels), static_cast<double>(v.dim),
                     static_cast<double>(v.depth), static_cast<double>(v.heads),
                     static_cast<double>(static_cast<int>(v.pe_mode))}});
    recs.push_back({"cfg.text",
                    {5},
                    {static_cast<double>(t.vocab_size), static_cast<double>(t.max_len),
                     static_cast<double>(t.dim), static_cast<double>(t.depth),
                     static_cast<double>(t.heads)}});
    recs.push_back({"cfg.cpe",
                    {7},
                    {static_cast<double>(c.upsample_size), static_cast<double>(c.out_size),
                     c.scale_min, c.scale_max, c.aspect_min, c.aspect_max,
                     static_cast<double>(c.max_rejection_attempts)}});
    recs.push_back({"cfg.tau_init", {1}, {tau_init}});
    for (const auto& p : model.params()) {
        recs.push_back({p.name, p.tensor.shape(), p.tensor.data()});
    }
    return recs;
}

inline void save_model(const DualEncoder& model, double tau_init, const std::string& path) {
    save_checkpoint(path, model_records(model, tau_init));
}

inline DualEncoder load_model(const std::string& path) {
    const auto recs = load_checkpoint(path);
    auto find = [&](const std::string& name) -> const CheckpointRecord& {
        for (const auto& r : recs) {
            if (r.name == name) return r;
        }
        throw InputError("checkpoint: missing record " + name);
    };
    const auto& ci = find("cfg.image").data;
    const auto& ct = find("cfg.text").data;
    const auto& cc = find("cfg.cpe").data;
    const double tau_init = find("cfg.tau_init").data.at(0);
    if (ci.size() != 7 || ct.size() != 5 || cc.size() != 7) {
        throw InputError("checkpoint: malformed cfg records");
    }
    VitConfig vit;
    vit.image_size = static_cast<std::size_t>(ci[0]);
    vit.patch_size = static_cast<std::size_t>(ci[1]);
    vit.channels = static_cast<std::size_t>(ci[2]);
    vit.dim = static_cast<std::size_t>(ci[3]);
    vit.depth = static_cast<std::size_t>(ci[4]);
    vit.heads = static_cast<std::size_t>(ci[5]);
    vit.pe_mode = static_cast<PeMode>(static_cast<int>(ci[6]));
    TextConfig text;
    text.vocab_size = static_cast<std::size_t>(ct[0]);
    text.max_len = static_cast<std::size_t>(ct[1]);
    text.dim = static_cast<std::size_t>(ct[2]);
    text.depth = static_cast<std::size_t>(ct[3]);
    text.heads = static_cast<std::size_t>(ct[4]);
    CpeConfig cpe;
    cpe.upsample_size = static_cast<std::size_t>(cc[0]);
    cpe.out_size = static_cast<std::size_t>(cc[1]);
    cpe.scale_min = cc[2];
    cpe.scale_max = cc[3];
    cpe.aspect_min = cc[4];
    cpe.aspect_max = cc[5];
    cpe.max_rejection_attempts = static_cast<std::size_t>(cc[6]);

    Rng rng(0);
    DualEncoder model(vit, text, cpe, rng, tau_init);
    for (const auto& p : model.params()) {
        const auto& rec = find(p.name);
        if (rec.shape != p.tensor.shape()) {
            throw InputError("checkpoint: shape mismatch for " + p.name);
        }
        p.tensor.impl()->data = rec.data;
    }
    return model;
}

// ---------------------------------------------------------------------------
// pretraining
// ---------------------------------------------------------------------------

struct TraceRow {
    std::size_t step;
    double loss;
    double per_term_mean;  // mean over the individual I2T/T2I summands
};

struct PretrainResult {
    std::shared_ptr<DualEncoder> model;
    std::vector<TraceRow> trace;
    std::vector<std::size_t> train_combos;
    std::vector<std::size_t> novel_combos;
};

// Deterministic contrastive pretraining on the synthetic corpus. Captions are
// drawn from the training combos only; the held-out 20% stay novel. Aborts
// with the failing step index if the loss leaves the finite range.
inline PretrainResult pretrain(const RunConfig& cfg, std::ostream* log = nullptr) {
    cfg.validate();
    PretrainResult result;
    result.model = std::make_shared<DualEncoder>(build_model(cfg));
    split_combos(cfg.synth, result.train_combos, result.novel_combos);

    SgdOptimizer opt(cfg.optim);
    DualEncoder& model = *result.model;
    const std::size_t b = cfg.batch_size;

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const double tau_now = model.tau_value();
        if (!std::isfinite(tau_now) || !(tau_now > 0.0)) {
            throw DivergenceError(static_cast<long>(step),
                                  "pretrain: temperature degenerated at step " +
                                      std::to_string(step));
        }
        Tape tape;
        std::vector<Tensor> img_rows, txt_rows;
        img_rows.reserve(b);
        txt_rows.reserve(b);
        for (std::size_t j = 0; j < b; ++j) {
            const std::uint64_t sample_index = step * b + j;
            const SyntheticPair pair = gen_pair_from(
                mix_seed(cfg.seed, seed_tag::data, sample_index), result.train_combos, cfg.synth);
            Rng crop_rng(mix_seed(cfg.seed, seed_tag::cpe, sample_index));
            img_rows.push_back(model.image_forward(pair.image, cfg.vit.pe_mode, &crop_rng));
            txt_rows.push_back(model.text_forward(pair.tokens));
        }
        const Tensor v = concat_rows(img_rows);
        const Tensor l = concat_rows(txt_rows);
        const Tensor loss = total_contrastive_loss(v, l, model.tau(), cfg.loss);
        const double loss_val = loss.value();
        if (!std::isfinite(loss_val)) {
            throw DivergenceError(static_cast<long>(step),
                                  "pretrain: non-finite loss at step " + std::to_string(step));
        }
        const double terms_per_dir = cfg.loss.kind == LossKind::focal
                                         ? static_cast<double>(b) * static_cast<double>(b)
                                         : static_cast<double>(b);
        result.trace.push_back(
            {step, loss_val, loss_val * static_cast<double>(b) / (2.0 * terms_per_dir)});
        tape.backward(loss);
        opt.step(model.params(), step);
        if (log && (step % 100 == 0 || step + 1 == cfg.steps)) {
            (*log) << "step " << step << "  loss " << std::setprecision(6) << loss_val << "\n";
        }
    }
    return result;
}

inline void write_trace_csv(const std::vector<TraceRow>& trace, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw InputError("write_trace_csv: cannot open " + path);
    os << "step,loss,per_term_mean\n";
    char buf[96];
    for (const auto& row : trace) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g\n", row.step, row.loss,
                      row.per_term_mean);
        os << buf;
    }
}

// ---------------------------------------------------------------------------
// retrieval evaluation
// ---------------------------------------------------------------------------

struct RetrievalReport {
    std::size_t queries = 0;
    std::vector<std::size_t> ks;
    std::vector<double> i2t;  // recall@ks[i], image-to-text
    std::vector<double> t2i;
};

namespace detail {

// Rank of the true match among the scores, ties broken toward lower index.
inline std::size_t match_rank(const std::vector<double>& scores, std::size_t true_idx) {
    std::size_t rank = 0;
    for (std::size_t j = 0; j < scores.size(); ++j) {
        if (scores[j] > scores[true_idx] ||
            (scores[j] == scores[true_idx] && j < true_idx)) {
            ++rank;
        }
    }
    return rank;
}

}  // namespace detail

// Recall@K from explicit embedding batches (rows unit-norm, pair i matches i).
inline RetrievalReport retrieval_from_embeddings(const Tensor& img, const Tensor& txt,
                                                 std::vector<std::size_t> ks) {
    if (img.shape() != txt.shape() || img.rank() != 2) {
        throw DimensionError("retrieval_from_embeddings: batches must share [NxD]");
    }
    const std::size_t n = img.dim(0), d = img.dim(1);
    std::sort(ks.begin(), ks.end());
    RetrievalReport report;
    report.queries = n;
    report.ks = ks;
    report.i2t.assign(ks.size(), 0.0);
    report.t2i.assign(ks.size(), 0.0);
    for (std::size_t dir = 0; dir < 2; ++dir) {
        const Tensor& q = dir == 0 ? img : txt;
        const Tensor& g = dir == 0 ? txt : img;
        auto& out = dir == 0 ? report.i2t : report.t2i;
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> scores(n, 0.0);
            for (std::size_t j = 0; j < n; ++j) {
                double dot = 0.0;
                for (std::size_t kk = 0; kk < d; ++kk)
                    dot += q.data()[i * d + kk] * g.data()[j * d + kk];
                scores[j] = dot;
            }
            const std::size_t rank = detail::match_rank(scores, i);
            for (std::size_t kidx = 0; kidx < ks.size(); ++kidx) {
                if (rank < ks[kidx]) out[kidx] += 1.0;
            }
        }
        for (auto& v : out) v /= static_cast<double>(n);
    }
    return report;
}

// Zero-shot retrieval over n freshly generated held-out pairs (a seed stream
// disjoint from the training data). Images are embedded with whole-image
// positional embeddings.
inline RetrievalReport eval_retrieval(const DualEncoder& model, const RunConfig& cfg,
                                      std::size_t n, const std::vector<std::size_t>& ks) {
    if (n == 0) throw InputError("eval_retrieval: need at least one pair");
    const PeMode mode = model.eval_pe_mode(cfg.vit.pe_mode);
    std::vector<Tensor> img_rows, txt_rows;
    img_rows.reserve(n);
    txt_rows.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const SyntheticPair pair = gen_pair(mix_seed(cfg.seed, seed_tag::eval, i), cfg.synth);
        img_rows.push_back(model.image_forward(pair.image, mode));
        txt_rows.push_back(model.text_forward(pair.tokens));
    }
    return retrieval_from_embeddings(concat_rows(img_rows), concat_rows(txt_rows), ks);
}

inline void write_retrieval_csv(const RetrievalReport& r, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw InputError("write_retrieval_csv: cannot open " + path);
    os << "direction,k,recall,queries\n";
    for (std::size_t i = 0; i < r.ks.size(); ++i) {
        os << "i2t," << r.ks[i] << "," << r.i2t[i] << "," << r.queries << "\n";
    }
    for (std::size_t i = 0; i < r.ks.size(); ++i) {
        os << "t2i," << r.ks[i] << "," << r.t2i[i] << "," << r.queries << "\n";
    }
}

// ---------------------------------------------------------------------------
// region retrieval evaluation
// ---------------------------------------------------------------------------

struct RegionReport {
    std::size_t objects = 0;
    double top1 = 0.0;      // accuracy over held-out combos
    double mean_gap = 0.0;  // mean (S_true - best wrong S)
};

// Desk-scale open-vocabulary protocol: region tasks are built from the
// held-out combos; every combo (train = base, held-out = novel) is a
// category. Each ground-truth box runs region_embed -> vlm_scores ->
// combine_scores -> apply_objectness; top-1 is scored over all categories.
// The detection branch p comes from the normalized output layer over the
// same category embeddings.
inline RegionReport eval_region_retrieval(const DualEncoder& model, const RunConfig& cfg,
                                          const ScoreConfig& score_base, std::size_t num_tasks,
                                          std::size_t objects_per_task = 2) {
    std::vector<std::size_t> train, novel;
    split_combos(cfg.synth, train, novel);

    ScoreConfig score = score_base;
    score.base_ids.clear();
    score.novel_ids.clear();
    for (std::size_t c : train) score.base_ids.insert(static_cast<int>(c));
    for (std::size_t c : novel) score.novel_ids.insert(static_cast<int>(c));
    score.background_id = -1;
    score.validate();

    const std::size_t num_cats = cfg.synth.num_combos();
    std::vector<Tensor> cat_rows;
    std::vector<int> cat_ids;
    cat_rows.reserve(num_cats);
    for (std::size_t c = 0; c < num_cats; ++c) {
        const Attributes a = Attributes::from_combo(c, cfg.synth);
        cat_rows.push_back(model.text_forward(tokens_for(a, cfg.synth)));
        cat_ids.push_back(static_cast<int>(c));
    }
    const Tensor cat_embs = concat_rows(cat_rows);
    Tensor zero_bias({num_cats});

    RegionReport report;
    double gap_sum = 0.0;
    for (std::size_t t = 0; t < num_tasks; ++t) {
        const RegionTask task = gen_region_task(mix_seed(cfg.seed, seed_tag::region, t),
                                                objects_per_task, cfg.synth, &novel);
        const Tensor fmap = model.feature_map(task.image);
        for (const auto& obj : task.objects) {
            const Tensor remb = region_embed(fmap, obj.box);
            const Tensor z = vlm_scores(remb, cat_embs, cfg.vlm_temperature);
            const Tensor p =
                softmax(normalized_layer(remb, cat_embs, zero_bias, cfg.tau_cls), 0);
            const CategoryScores scores =
                compose_scores(z.data(), p.data(), obj.objectness, score, cat_ids);
            const std::size_t truth = obj.attributes.combo_id(cfg.synth);
            std::size_t best = 0;
            double best_wrong = -1.0;
            for (std::size_t c = 0; c < num_cats; ++c) {
                if (scores.final[c] > scores.final[best]) best = c;
                if (c != truth && scores.final[c] > best_wrong) best_wrong = scores.final[c];
            }
            if (best == truth) report.top1 += 1.0;
            gap_sum += scores.final[truth] - best_wrong;
            ++report.objects;
        }
    }
    if (report.objects > 0) {
        report.top1 /= static_cast<double>(report.objects);
        report.mean_gap = gap_sum / static_cast<double>(report.objects);
    }
    return report;
}

// ---------------------------------------------------------------------------
// score-file composition
// ---------------------------------------------------------------------------

// Sorted category-id column order shared by the score CLI's input and output.
inline std::vector<int> score_category_columns(const ScoreConfig& cfg) {
    std::vector<int> ids(cfg.base_ids.begin(), cfg.base_ids.end());
    ids.insert(ids.end(), cfg.novel_ids.begin(), cfg.novel_ids.end());
    if (cfg.background_id >= 0) ids.push_back(cfg.background_id);
    std::sort(ids.begin(), ids.end());
    return ids;
}

// Streams rows of (region id, z per category, p per category, o) into rows of
// (region id, S^OVD per category). An optional leading header starting with
// "region" is skipped. Returns the number of data rows.
inline std::size_t process_score_csv(std::istream& in, std::ostream& out,
                                     const ScoreConfig& cfg) {
    cfg.validate();
    const std::vector<int> ids = score_category_columns(cfg);
    if (ids.empty()) throw InputError("process_score_csv: config names no categories");
    const std::size_t c = ids.size();
    out << "region_id";
    for (int id : ids) out << ",S_" << id;
    out << "\n";
    std::string line;
    std::size_t rows = 0;
    bool first = true;
    char buf[48];
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (first && line.rfind("region", 0) == 0) {
            first = false;
            continue;
        }
        first = false;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, ',')) fields.push_back(f);
        if (fields.size() != 2 * c + 2) {
            throw InputError("process_score_csv: row has " + std::to_string(fields.size()) +
                             " fields, expected " + std::to_string(2 * c + 2));
        }
        std::vector<double> z(c), p(c);
        for (std::size_t i = 0; i < c; ++i) {
            z[i] = std::stod(fields[1 + i]);
            p[i] = std::stod(fields[1 + c + i]);
        }
        const double o = std::stod(fields[1 + 2 * c]);
        const CategoryScores scores = compose_scores(z, p, o, cfg, ids);
        out << fields[0];
        for (std::size_t i = 0; i < c; ++i) {
            std::snprintf(buf, sizeof(buf), ",%.12g", scores.final[i]);
            out << buf;
        }
        out << "\n";
        ++rows;
    }
    return rows;
}

// ---------------------------------------------------------------------------
// gradient-check runner
// ---------------------------------------------------------------------------

struct GradCheckRow {
    std::string name;
    std::size_t trials = 0;
    double max_rel_err = 0.0;
    bool pass = false;
};

namespace detail {

inline Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double lo = -2.0,
                            double hi = 2.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

// Checks d/dx of f_weighted(x) = sum(w . op(x)) against central differences,
// with a fixed random weighting so the whole Jacobian is exercised.
inline double check_against_fd(const std::function<Tensor(const Tensor&)>& op, const Tensor& x,
                               Rng& rng, double h = 1e-5) {
    Tensor probe = x.clone();
    probe.set_requires_grad(true);
    Tensor weights;
    {
        Tape tape;
        Tensor y = op(probe);
        weights = random_tensor(rng, y.shape(), -1.0, 1.0);
        Tensor obj = sum_all(cwise_scale(y, weights));
        tape.backward(obj);
    }
    Tensor analytic = Tensor::from(x.shape(), probe.grad());
    auto f = [&](const Tensor& q) {
        Tensor y = op(q);
        double acc = 0.0;
        for (std::size_t i = 0; i < y.numel(); ++i) acc += y.data()[i] * weights.data()[i];
        return acc;
    };
    const Tensor fd = finite_diff_grad(f, x, h);
    return grad_rel_error(analytic, fd);
}

}  // namespace detail

constexpr double kGradCheckTolerance = 1e-4;

// Finite-difference verification of every differentiable op, both contrastive
// losses (also w.r.t. tau), the full CPE path, region pooling and the
// normalized layer. Returns one row per check; `pass` uses the 1e-4 ceiling.
inline std::vector<GradCheckRow> gradcheck_all(std::size_t trials_per_op = 100) {
    std::vector<GradCheckRow> rows;
    Rng rng(20240601);

    auto run = [&](const std::string& name, std::size_t trials,
                   const std::function<double(Rng&)>& one_trial) {
        GradCheckRow row;
        row.name = name;
        row.trials = trials;
        for (std::size_t t = 0; t < trials; ++t) {
            row.max_rel_err = std::max(row.max_rel_err, one_trial(rng));
        }
        row.pass = row.max_rel_err < kGradCheckTolerance;
        rows.push_back(row);
    };

    using detail::check_against_fd;
    using detail::random_tensor;

    auto elementwise = [&](const std::string& name, std::function<Tensor(const Tensor&)> op,
                           double lo = -2.0, double hi = 2.0) {
        run(name, trials_per_op, [=](Rng& r) {
            Tensor x = random_tensor(r, {2, 3}, lo, hi);
            return check_against_fd(op, x, r);
        });
    };

    elementwise("add", [&](const Tensor& x) { return add(x, x); });
    elementwise("sub", [&](const Tensor& x) { return sub(scale(x, 2.0), x); });
    elementwise("mul", [&](const Tensor& x) { return mul(x, add(x, x)); });
    elementwise("neg", [](const Tensor& x) { return neg(x); });
    elementwise("affine", [](const Tensor& x) { return affine(x, 1.7, -0.3); });
    elementwise("exp", [](const Tensor& x) { return exp(x); });
    elementwise("log", [](const Tensor& x) { return log(x); }, 0.2, 2.5);
    elementwise("sigmoid", [](const Tensor& x) { return sigmoid(x); });
    elementwise("softplus", [](const Tensor& x) { return softplus(x); });
    elementwise("gelu", [](const Tensor& x) { return gelu(x); });
    elementwise("pow_const", [](const Tensor& x) { return pow_const(x, 2.5); }, 0.2, 2.0);

    run("mul_scalar_t(x)", trials_per_op, [&](Rng& r) {
        Tensor s = Tensor::scalar(r.uniform(0.5, 2.0));
        return check_against_fd([&](const Tensor& x) { return mul_scalar_t(x, s); },
                                random_tensor(r, {2, 3}), r);
    });
    run("mul_scalar_t(s)", trials_per_op, [&](Rng& r) {
        Tensor x = random_tensor(r, {2, 3});
        return check_against_fd([&](const Tensor& s) { return mul_scalar_t(x, s); },
                                Tensor::scalar(r.uniform(0.5, 2.0)), r);
    });
    run("matmul(a)", trials_per_op, [&](Rng& r) {
        Tensor b = random_tensor(r, {3, 4});
        return check_against_fd([&](const Tensor& a) { return matmul(a, b); },
                                random_tensor(r, {2, 3}), r);
    });
    run("matmul(b)", trials_per_op, [&](Rng& r) {
        Tensor a = random_tensor(r, {2, 3});
        return check_against_fd([&](const Tensor& b) { return matmul(a, b); },
                                random_tensor(r, {3, 4}), r);
    });
    elementwise("transpose", [](const Tensor& x) { return transpose(x); });
    elementwise("reshape", [](const Tensor& x) { return reshape(x, {3, 2}); });
    run("patchify", trials_per_op, [&](Rng& r) {
        Tensor img = random_tensor(r, {4, 4, 2});
        return check_against_fd([](const Tensor& x) { return patchify(x, 2); }, img, r);
    });
    run("row_gather", trials_per_op, [&](Rng& r) {
        Tensor table = random_tensor(r, {5, 3});
        const std::vector<std::size_t> ids = {1, 4, 1, 0};
        return check_against_fd([&](const Tensor& t) { return row_gather(t, ids); }, table, r);
    });
    elementwise("slice_rows", [](const Tensor& x) { return slice_rows(x, 0, 1); });
    elementwise("slice_cols", [](const Tensor& x) { return slice_cols(x, 1, 3); });
    run("concat_cols", trials_per_op, [&](Rng& r) {
        Tensor y = random_tensor(r, {2, 2});
        return check_against_fd(
            [&](const Tensor& x) { return concat_cols({x, y, x}); }, random_tensor(r, {2, 3}), r);
    });
    run("concat_rows", trials_per_op, [&](Rng& r) {
        Tensor y = random_tensor(r, {1, 3});
        return check_against_fd(
            [&](const Tensor& x) { return concat_rows({y, x}); }, random_tensor(r, {2, 3}), r);
    });
    run("add_rowvec(x)", trials_per_op, [&](Rng& r) {
        Tensor b = random_tensor(r, {1, 3});
        return check_against_fd([&](const Tensor& x) { return add_rowvec(x, b); },
                                random_tensor(r, {4, 3}), r);
    });
    run("add_rowvec(b)", trials_per_op, [&](Rng& r) {
        Tensor x = random_tensor(r, {4, 3});
        return check_against_fd([&](const Tensor& b) { return add_rowvec(x, b); },
                                random_tensor(r, {1, 3}), r);
    });
    elementwise("sum_all", [](const Tensor& x) { return sum_all(x); });
    elementwise("mean_all", [](const Tensor& x) { return mean_all(x); });
    elementwise("mean_over_rows", [](const Tensor& x) { return mean_over_rows(x); });
    run("diag_part", trials_per_op, [&](Rng& r) {
        return check_against_fd([](const Tensor& x) { return diag_part(x); },
                                random_tensor(r, {3, 3}), r);
    });
    elementwise("softmax", [](const Tensor& x) { return softmax(x, 1); });
    elementwise("logsumexp_rows", [](const Tensor& x) { return logsumexp_rows(x); });
    elementwise("l2_normalize", [](const Tensor& x) { return l2_normalize(x); });
    run("layer_norm(x)", trials_per_op, [&](Rng& r) {
        Tensor g = random_tensor(r, {1, 4}, 0.5, 1.5);
        Tensor b = random_tensor(r, {1, 4});
        return check_against_fd([&](const Tensor& x) { return layer_norm(x, g, b); },
                                random_tensor(r, {3, 4}), r);
    });
    run("layer_norm(gain)", trials_per_op, [&](Rng& r) {
        Tensor x = random_tensor(r, {3, 4});
        Tensor b = random_tensor(r, {1, 4});
        return check_against_fd([&](const Tensor& g) { return layer_norm(x, g, b); },
                                random_tensor(r, {1, 4}, 0.5, 1.5), r);
    });
    run("bilinear_resize", trials_per_op, [&](Rng& r) {
        return check_against_fd([](const Tensor& g) { return bilinear_resize(g, 5, 4); },
                                random_tensor(r, {3, 3, 2}), r);
    });
    run("bilinear_sample", trials_per_op, [&](Rng& r) {
        std::vector<std::pair<double, double>> pts;
        for (int i = 0; i < 5; ++i) pts.emplace_back(r.uniform(0.0, 2.0), r.uniform(0.0, 2.0));
        return check_against_fd([&](const Tensor& g) { return bilinear_sample(g, pts); },
                                random_tensor(r, {3, 3, 2}), r);
    });

    // -- composites -------------------------------------------------------
    auto unit_rows = [](Tensor t) { return l2_normalize(t); };
    run("softmax_loss(V)", trials_per_op, [&](Rng& r) {
        Tensor l = unit_rows(random_tensor(r, {3, 4}));
        Tensor tau = Tensor::scalar(r.uniform(0.3, 1.5));
        return check_against_fd(
            [&](const Tensor& v) { return softmax_contrastive_loss(l2_normalize(v), l, tau); },
            random_tensor(r, {3, 4}), r);
    });
    run("softmax_loss(L)", trials_per_op, [&](Rng& r) {
        Tensor v = unit_rows(random_tensor(r, {3, 4}));
        Tensor tau = Tensor::scalar(r.uniform(0.3, 1.5));
        return check_against_fd(
            [&](const Tensor& l) { return softmax_contrastive_loss(v, l2_normalize(l), tau); },
            random_tensor(r, {3, 4}), r);
    });
    run("softmax_loss(tau)", trials_per_op, [&](Rng& r) {
        Tensor v = unit_rows(random_tensor(r, {3, 4}));
        Tensor l = unit_rows(random_tensor(r, {3, 4}));
        return check_against_fd(
            [&](const Tensor& tau) { return softmax_contrastive_loss(v, l, tau); },
            Tensor::scalar(r.uniform(0.3, 1.5)), r);
    });
    run("focal_loss(V)", trials_per_op, [&](Rng& r) {
        Tensor l = unit_rows(random_tensor(r, {3, 4}));
        Tensor tau = Tensor::scalar(r.uniform(0.3, 1.5));
        return check_against_fd(
            [&](const Tensor& v) {
                return focal_contrastive_loss(l2_normalize(v), l, tau, 2.0);
            },
            random_tensor(r, {3, 4}), r);
    });
    run("focal_loss(L)", trials_per_op, [&](Rng& r) {
        Tensor v = unit_rows(random_tensor(r, {3, 4}));
        Tensor tau = Tensor::scalar(r.uniform(0.3, 1.5));
        return check_against_fd(
            [&](const Tensor& l) {
                return focal_contrastive_loss(v, l2_normalize(l), tau, 2.0);
            },
            random_tensor(r, {3, 4}), r);
    });
    run("focal_loss(tau)", trials_per_op, [&](Rng& r) {
        Tensor v = unit_rows(random_tensor(r, {3, 4}));
        Tensor l = unit_rows(random_tensor(r, {3, 4}));
        return check_against_fd(
            [&](const Tensor& tau) { return focal_contrastive_loss(v, l, tau, 2.0); },
            Tensor::scalar(r.uniform(0.3, 1.5)), r);
    });
    run("cpe_path", trials_per_op, [&](Rng& r) {
        CpeConfig cfg;
        cfg.upsample_size = 8;
        cfg.out_size = 3;
        CropRegion region = sample_crop_region(r, cfg);
        return check_against_fd(
            [&](const Tensor& g) { return cpe_from_region(g, region, cfg); },
            random_tensor(r, {3, 3, 2}), r);
    });
    run("region_embed", trials_per_op, [&](Rng& r) {
        RegionBox box{0.2, 0.25, 0.8, 0.7};
        return check_against_fd([&](const Tensor& m) { return region_embed(m, box); },
                                random_tensor(r, {4, 4, 3}), r);
    });
    run("normalized_layer(x)", trials_per_op, [&](Rng& r) {
        Tensor w = random_tensor(r, {3, 4});
        Tensor b = random_tensor(r, {3});
        return check_against_fd(
            [&](const Tensor& x) { return normalized_layer(x, w, b); },
            random_tensor(r, {1, 4}), r);
    });
    run("normalized_layer(w)", trials_per_op, [&](Rng& r) {
        Tensor x = random_tensor(r, {1, 4});
        Tensor b = random_tensor(r, {3});
        return check_against_fd(
            [&](const Tensor& w) { return normalized_layer(x, w, b); },
            random_tensor(r, {3, 4}), r);
    });
    run("attention_block", 20, [&](Rng& r) {
        const std::size_t d = 8;
        BlockParams p;
        p.ln1_g = random_tensor(r, {1, d}, 0.5, 1.5);
        p.ln1_b = random_tensor(r, {1, d}, -0.1, 0.1);
        p.wq = random_tensor(r, {d, d}, -0.3, 0.3);
        p.bq = random_tensor(r, {1, d}, -0.1, 0.1);
        p.wk = random_tensor(r, {d, d}, -0.3, 0.3);
        p.bk = random_tensor(r, {1, d}, -0.1, 0.1);
        p.wv = random_tensor(r, {d, d}, -0.3, 0.3);
        p.bv = random_tensor(r, {1, d}, -0.1, 0.1);
        p.wo = random_tensor(r, {d, d}, -0.3, 0.3);
        p.bo = random_tensor(r, {1, d}, -0.1, 0.1);
        p.ln2_g = random_tensor(r, {1, d}, 0.5, 1.5);
        p.ln2_b = random_tensor(r, {1, d}, -0.1, 0.1);
        p.w1 = random_tensor(r, {d, 2 * d}, -0.3, 0.3);
        p.b1 = random_tensor(r, {1, 2 * d}, -0.1, 0.1);
        p.w2 = random_tensor(r, {2 * d, d}, -0.3, 0.3);
        p.b2 = random_tensor(r, {1, d}, -0.1, 0.1);
        return check_against_fd(
            [&](const Tensor& x) { return attention_block(x, p, 2); },
            random_tensor(r, {3, d}, -1.0, 1.0), r);
    });

    // End-to-end: contrastive loss through both towers w.r.t. every encoder
    // parameter on a 2-sample batch with dim 8, depth 1.
    run("encoder_end_to_end", 2, [&](Rng& r) {
        RunConfig cfg = RunConfig::desk_default();
        cfg.vit.image_size = 16;
        cfg.vit.patch_size = 8;
        cfg.vit.channels = 1;
        cfg.vit.dim = 8;
        cfg.vit.depth = 1;
        cfg.vit.heads = 2;
        cfg.vit.pe_mode = PeMode::cpe;
        cfg.text.vocab_size = 16;
        cfg.text.max_len = 4;
        cfg.text.dim = 8;
        cfg.text.depth = 1;
        cfg.text.heads = 2;
        cfg.cpe.upsample_size = 8;
        cfg.cpe.out_size = 2;
        cfg.synth.image_size = 16;
        cfg.synth.channels = 1;
        cfg.seed = r.next_u64();
        DualEncoder model = build_model(cfg);

        Tensor img0 = detail::random_tensor(r, {16, 16, 1}, 0.0, 1.0);
        Tensor img1 = detail::random_tensor(r, {16, 16, 1}, 0.0, 1.0);
        const std::vector<std::vector<std::size_t>> captions = {{1, 5, 9}, {2, 6, 10}};
        const std::uint64_t crop_seed = r.next_u64();

        auto forward = [&]() {
            Rng crop0(crop_seed);
            Rng crop1(crop_seed + 1);
            Tensor v = concat_rows({model.image_forward(img0, PeMode::cpe, &crop0),
                                    model.image_forward(img1, PeMode::cpe, &crop1)});
            Tensor l =
                concat_rows({model.text_forward(captions[0]), model.text_forward(captions[1])});
            LossConfig lc;
            lc.kind = LossKind::focal;
            lc.gamma = 2.0;
            return total_contrastive_loss(v, l, model.tau(), lc);
        };

        {
            Tape tape;
            tape.backward(forward());
        }
        double worst = 0.0;
        for (const auto& p : model.params()) {
            const Tensor analytic = Tensor::from(p.tensor.shape(), p.tensor.grad());
            auto f = [&](const Tensor& q) {
                auto& slot = p.tensor.impl()->data;
                const std::vector<double> saved = slot;
                slot = q.data();
                const double out = forward().value();
                slot = saved;
                return out;
            };
            const Tensor fd = finite_diff_grad(f, p.tensor);
            worst = std::max(worst, grad_rel_error(analytic, fd));
        }
        return worst;
    });

    return rows;
}

inline bool gradcheck_passed(const std::vector<GradCheckRow>& rows) {
    for (const auto& r : rows) {
        if (!r.pass) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// PE visualization export
// ---------------------------------------------------------------------------

// Writes the cosine-similarity tiles of the learnable PE grid as CSV and PGM.
inline void export_pe_viz(const DualEncoder& model, const std::string& out_dir) {
    if (model.vit().pe_mode == PeMode::none || model.vit().pe_mode == PeMode::sincos) {
        throw InputError("export_pe_viz: checkpoint has no learnable PE grid (pe_mode " +
                         to_string(model.vit().pe_mode) + ")");
    }
    std::filesystem::create_directories(out_dir);
    const std::size_t g = model.vit().grid();
    PEGrid grid(g, g, model.vit().dim, PEKind::learnable, model.image_pe_grid());
    const SimilarityMap map = pe_similarity_map(grid);
    write_similarity_csv(map, out_dir + "/pe_similarity.csv");
    write_similarity_pgm(map, out_dir + "/pe_similarity.pgm");
}

// ---------------------------------------------------------------------------
// ablation matrix
// ---------------------------------------------------------------------------

struct AblationRow {
    PeMode pe_mode;
    LossKind loss;
    double step0_loss = 0.0;
    double final_loss = 0.0;
    double i2t_r1 = 0.0;
    double t2i_r1 = 0.0;
    double region_top1 = 0.0;
};

// Pretraining-strategy matrix on identical seeds: {learnable, none, sincos,
// feat crop-resize, cpe} x {softmax, focal}. Reports per-cell losses,
// retrieval R@1 and region top-1.
inline std::vector<AblationRow> run_ablation(const RunConfig& base, std::size_t eval_pairs,
                                             std::size_t region_tasks,
                                             std::ostream* log = nullptr) {
    const PeMode modes[] = {PeMode::learnable, PeMode::none, PeMode::sincos,
                            PeMode::feat_crop_resize, PeMode::cpe};
    const LossKind kinds[] = {LossKind::softmax_ce, LossKind::focal};
    std::vector<AblationRow> rows;
    for (PeMode mode : modes) {
        for (LossKind kind : kinds) {
            RunConfig cfg = base;
            cfg.vit.pe_mode = mode;
            cfg.loss.kind = kind;
            if (log) {
                (*log) << "ablation: pe_mode=" << to_string(mode) << " loss=" << to_string(kind)
                       << "\n";
            }
            PretrainResult res = pretrain(cfg);
            const RetrievalReport ret = eval_retrieval(*res.model, cfg, eval_pairs, {1});
            ScoreConfig score;
            const RegionReport reg = eval_region_retrieval(*res.model, cfg, score, region_tasks);
            AblationRow row;
            row.pe_mode = mode;
            row.loss = kind;
            row.step0_loss = res.trace.front().loss;
            row.final_loss = res.trace.back().loss;
            row.i2t_r1 = ret.i2t[0];
            row.t2i_r1 = ret.t2i[0];
            row.region_top1 = reg.top1;
            rows.push_back(row);
        }
    }
    return rows;
}

inline void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw InputError("write_ablation_csv: cannot open " + path);
    os << "pe_mode,loss,step0_loss,final_loss,i2t_r1,t2i_r1,region_top1\n";
    for (const auto& r : rows) {
        os << to_string(r.pe_mode) << "," << to_string(r.loss) << "," << r.step0_loss << ","
           << r.final_loss << "," << r.i2t_r1 << "," << r.t2i_r1 << "," << r.region_top1 << "\n";
    }
}

}  // namespace rcp
