#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "rcp/config.hpp"
#include "rcp/harness.hpp"

using namespace rcp;

namespace {

RunConfig tiny_run(std::size_t steps = 10) {
    RunConfig cfg = RunConfig::desk_default();
    cfg.vit.image_size = 16;
    cfg.vit.patch_size = 8;
    cfg.vit.channels = 3;
    cfg.vit.dim = 8;
    cfg.vit.depth = 1;
    cfg.vit.heads = 2;
    cfg.text.vocab_size = 32;
    cfg.text.max_len = 8;
    cfg.text.dim = 8;
    cfg.text.depth = 1;
    cfg.text.heads = 2;
    cfg.cpe.upsample_size = 8;
    cfg.cpe.out_size = 2;
    cfg.synth.image_size = 16;
    cfg.synth.channels = 3;
    cfg.steps = steps;
    cfg.batch_size = 2;
    cfg.optim.lr = 0.1;
    cfg.optim.warmup_steps = 2;
    return cfg;
}

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST(KvConfig, ParsesSectionsCommentsAndTypes) {
    KvConfig kv = KvConfig::from_string(
        "# a comment\n"
        "run.steps = 42   # trailing comment\n"
        "optim.lr = 0.25\n"
        "loss.kind = focal\n"
        "optim.freeze_backbone = true\n");
    EXPECT_EQ(kv.get_int("run.steps", 0), 42);
    EXPECT_DOUBLE_EQ(kv.get_double("optim.lr", 0.0), 0.25);
    EXPECT_EQ(kv.get_string("loss.kind", ""), "focal");
    EXPECT_TRUE(kv.get_bool("optim.freeze_backbone", false));
    kv.ensure_all_consumed();
}

TEST(KvConfig, UnknownKeysAreErrors) {
    KvConfig kv = KvConfig::from_string("run.steps = 5\nrun.stepz = 7\n");
    RunConfig cfg = run_config_from_kv(kv);
    EXPECT_EQ(cfg.steps, 5u);
    EXPECT_THROW(kv.ensure_all_consumed(), InputError);
}

TEST(KvConfig, MalformedInputRejected) {
    EXPECT_THROW(KvConfig::from_string("just words\n"), InputError);
    EXPECT_THROW(KvConfig::from_string("a = 1\na = 2\n"), InputError);
    KvConfig kv = KvConfig::from_string("x = abc\nb = maybe\n");
    EXPECT_THROW(kv.get_double("x", 0.0), InputError);
    EXPECT_THROW(kv.get_bool("b", false), InputError);
}

TEST(Checkpoint, ModelRoundTripBitIdentical) {
    RunConfig cfg = tiny_run();
    cfg.seed = 12;
    DualEncoder model = build_model(cfg);
    const std::string path = temp_path("rcp_ckpt_test.ckpt");
    save_model(model, cfg.tau_init, path);
    DualEncoder back = load_model(path);
    ASSERT_EQ(back.params().size(), model.params().size());
    for (std::size_t i = 0; i < model.params().size(); ++i) {
        EXPECT_EQ(model.params()[i].name, back.params()[i].name);
        EXPECT_EQ(model.params()[i].tensor.data(), back.params()[i].tensor.data());
    }
    EXPECT_EQ(back.vit().pe_mode, cfg.vit.pe_mode);
    EXPECT_EQ(back.vit().dim, cfg.vit.dim);
    EXPECT_EQ(back.text().max_len, cfg.text.max_len);
    std::filesystem::remove(path);
}

TEST(Checkpoint, BadMagicRejected) {
    const std::string path = temp_path("rcp_ckpt_bad.ckpt");
    {
        std::ofstream os(path, std::ios::binary);
        os << "NOPExxxxxxxxxxxx";
    }
    EXPECT_THROW(load_checkpoint(path), InputError);
    std::filesystem::remove(path);
}

TEST(Pretrain, TraceIsFiniteAndDecreasesSomewhat) {
    RunConfig cfg = tiny_run(30);
    PretrainResult res = pretrain(cfg);
    ASSERT_EQ(res.trace.size(), 30u);
    for (const auto& row : res.trace) {
        EXPECT_TRUE(std::isfinite(row.loss));
    }
}

TEST(Pretrain, DeterministicReruns) {
    RunConfig cfg = tiny_run(12);
    cfg.seed = 5;
    PretrainResult a = pretrain(cfg);
    PretrainResult b = pretrain(cfg);
    ASSERT_EQ(a.trace.size(), b.trace.size());
    for (std::size_t i = 0; i < a.trace.size(); ++i) {
        EXPECT_EQ(a.trace[i].loss, b.trace[i].loss);  // bit-identical
    }
    const std::string pa = temp_path("rcp_det_a.ckpt");
    const std::string pb = temp_path("rcp_det_b.ckpt");
    save_model(*a.model, cfg.tau_init, pa);
    save_model(*b.model, cfg.tau_init, pb);
    EXPECT_EQ(slurp(pa), slurp(pb));
    std::filesystem::remove(pa);
    std::filesystem::remove(pb);
}

TEST(Pretrain, StepZeroSoftmaxLossNearUniformLimit) {
    // with a large temperature the logits are near-uniform, so the first
    // recorded total loss sits near 2 ln B
    RunConfig cfg = tiny_run(1);
    cfg.batch_size = 8;
    cfg.loss.kind = LossKind::softmax_ce;
    cfg.tau_init = 50.0;
    PretrainResult res = pretrain(cfg);
    const double expected = 2.0 * std::log(8.0);
    EXPECT_NEAR(res.trace[0].loss, expected, 0.1 * expected);
}

TEST(Pretrain, FreezeBackboneKeepsParametersBitIdentical) {
    RunConfig cfg = tiny_run(8);
    cfg.optim.freeze_backbone = true;
    DualEncoder reference = build_model(cfg);
    PretrainResult res = pretrain(cfg);
    bool text_changed = false;
    for (std::size_t i = 0; i < reference.params().size(); ++i) {
        const auto& before = reference.params()[i];
        const auto& after = res.model->params()[i];
        if (before.group == ParamGroup::image_backbone) {
            EXPECT_EQ(before.tensor.data(), after.tensor.data()) << before.name;
        } else if (before.group == ParamGroup::text_tower) {
            if (before.tensor.data() != after.tensor.data()) text_changed = true;
        }
    }
    EXPECT_TRUE(text_changed);
}

TEST(Pretrain, ZeroBackboneRatioEqualsFreezeExactly) {
    RunConfig cfg = tiny_run(8);
    cfg.optim.freeze_backbone = false;
    cfg.optim.backbone_lr_ratio = 0.0;
    PretrainResult ratio_run = pretrain(cfg);
    RunConfig froz = tiny_run(8);
    froz.optim.freeze_backbone = true;
    PretrainResult freeze_run = pretrain(froz);
    for (std::size_t i = 0; i < ratio_run.model->params().size(); ++i) {
        const auto& a = ratio_run.model->params()[i];
        const auto& b = freeze_run.model->params()[i];
        if (a.group == ParamGroup::image_backbone) {
            EXPECT_EQ(a.tensor.data(), b.tensor.data()) << a.name;
        }
    }
}

TEST(Pretrain, FrozenTauStaysPut) {
    RunConfig cfg = tiny_run(8);
    cfg.optim.freeze_tau = true;
    PretrainResult res = pretrain(cfg);
    EXPECT_DOUBLE_EQ(res.model->tau_value(), cfg.tau_init);
}

TEST(Pretrain, DivergenceAbortsWithStepIndex) {
    RunConfig cfg = tiny_run(40);
    cfg.loss.kind = LossKind::softmax_ce;
    cfg.optim.lr = 1e18;  // guaranteed blow-up
    cfg.optim.warmup_steps = 0;
    try {
        pretrain(cfg);
        FAIL() << "expected DivergenceError";
    } catch (const DivergenceError& e) {
        EXPECT_GE(e.step, 1);
        EXPECT_LT(e.step, 40);
    }
}

TEST(Optimizer, WarmupSchedule) {
    OptimConfig cfg;
    cfg.lr = 1.0;
    cfg.warmup_steps = 4;
    SgdOptimizer opt(cfg);
    EXPECT_DOUBLE_EQ(opt.lr_at(0), 0.25);
    EXPECT_DOUBLE_EQ(opt.lr_at(1), 0.5);
    EXPECT_DOUBLE_EQ(opt.lr_at(3), 1.0);
    EXPECT_DOUBLE_EQ(opt.lr_at(100), 1.0);
}

TEST(Retrieval, OracleEmbeddingsGivePerfectRecall) {
    // image embedding i equals text embedding i, all rows distinct
    Tensor img = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    RetrievalReport r = retrieval_from_embeddings(img, img.clone(), {1, 5});
    EXPECT_DOUBLE_EQ(r.i2t[0], 1.0);
    EXPECT_DOUBLE_EQ(r.t2i[0], 1.0);
}

TEST(Retrieval, RecallMonotoneInKAndSaturates) {
    Rng rng(3);
    Tensor img({20, 6}), txt({20, 6});
    for (auto& v : img.data()) v = rng.uniform(-1.0, 1.0);
    for (auto& v : txt.data()) v = rng.uniform(-1.0, 1.0);
    RetrievalReport r =
        retrieval_from_embeddings(l2_normalize(img), l2_normalize(txt), {1, 5, 20});
    EXPECT_LE(r.i2t[0], r.i2t[1]);
    EXPECT_LE(r.i2t[1], r.i2t[2]);
    EXPECT_DOUBLE_EQ(r.i2t[2], 1.0);  // K = N
    EXPECT_DOUBLE_EQ(r.t2i[2], 1.0);
}

TEST(Retrieval, TiesBreakTowardLowerIndex) {
    // two identical gallery rows: query 0 ties -> index 0 wins, query 1 loses
    Tensor img = Tensor::from({2, 2}, {1, 0, 1, 0});
    Tensor txt = Tensor::from({2, 2}, {1, 0, 1, 0});
    RetrievalReport r = retrieval_from_embeddings(img, txt, {1});
    EXPECT_DOUBLE_EQ(r.i2t[0], 0.5);
    EXPECT_DOUBLE_EQ(r.t2i[0], 0.5);
}

TEST(Retrieval, UntrainedModelSitsNearChance) {
    double acc = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        RunConfig cfg = tiny_run();
        cfg.seed = 1000 + seed;
        DualEncoder model = build_model(cfg);
        const RetrievalReport r = eval_retrieval(model, cfg, 100, {1});
        acc += r.i2t[0];
    }
    EXPECT_LT(acc / 5.0, 0.05);
}

TEST(RegionEval, ObjectnessOneWithAnyDeltaKeepsRanking) {
    ScoreConfig a;
    a.base_ids = {0, 1};
    a.novel_ids = {2};
    a.delta = 0.0;
    ScoreConfig b = a;
    b.delta = 50.0;
    const std::vector<double> z = {0.5, 0.3, 0.2};
    const std::vector<double> p = {0.4, 0.4, 0.2};
    const std::vector<int> ids = {0, 1, 2};
    const CategoryScores sa = compose_scores(z, p, 1.0, a, ids);
    const CategoryScores sb = compose_scores(z, p, 1.0, b, ids);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(sa.final[i], sb.final[i]);
}

TEST(RegionEval, OracleEmbeddingsScorePerfectly) {
    // region embedding identical to the true category's text embedding and
    // orthogonal to the others -> top-1 must pick the truth
    ScoreConfig cfg;
    cfg.base_ids = {0, 1};
    cfg.novel_ids = {2};
    Tensor region = Tensor::from({1, 3}, {1.0, 0.0, 0.0});
    Tensor texts = Tensor::from({3, 3}, {0, 1, 0, 0, 0, 1, 1, 0, 0});
    Tensor z = vlm_scores(region, texts, 0.1);
    Tensor p = softmax(normalized_layer(region, texts, Tensor({3}), 20.0), 0);
    const CategoryScores s = compose_scores(z.data(), p.data(), 1.0, cfg, {0, 1, 2});
    std::size_t best = 0;
    for (std::size_t i = 1; i < 3; ++i) {
        if (s.final[i] > s.final[best]) best = i;
    }
    EXPECT_EQ(best, 2u);  // the category whose text embedding matches
}

TEST(RegionEval, RunsOnHeldOutCombos) {
    RunConfig cfg = tiny_run();
    cfg.text.vocab_size = 32;
    DualEncoder model = build_model(cfg);
    ScoreConfig score;
    const RegionReport report = eval_region_retrieval(model, cfg, score, 4, 2);
    EXPECT_EQ(report.objects, 8u);
    EXPECT_GE(report.top1, 0.0);
    EXPECT_LE(report.top1, 1.0);
}

TEST(ScoreCsv, ComposesRowsWithHeader) {
    ScoreConfig cfg;
    cfg.base_ids = {0, 1};
    cfg.novel_ids = {2};
    cfg.background_id = 3;
    cfg.alpha = 0.65;
    cfg.beta = 0.3;
    cfg.delta = 3.0;
    std::istringstream in(
        "region_id,z_0,z_1,z_2,z_3,p_0,p_1,p_2,p_3,o\n"
        "r0,0.8,0.1,0.05,0.05,0.5,0.3,0.1,0.1,1.0\n"
        "r1,0.25,0.25,0.25,0.25,0.25,0.25,0.25,0.25,0.5\n");
    std::ostringstream out;
    const std::size_t rows = process_score_csv(in, out, cfg);
    EXPECT_EQ(rows, 2u);
    std::istringstream parsed(out.str());
    std::string line;
    std::getline(parsed, line);
    EXPECT_EQ(line, "region_id,S_0,S_1,S_2,S_3");
    std::getline(parsed, line);
    {
        std::stringstream ss(line);
        std::string f;
        std::getline(ss, f, ',');
        EXPECT_EQ(f, "r0");
        std::getline(ss, f, ',');
        EXPECT_NEAR(std::stod(f), std::pow(0.8, 0.35) * std::pow(0.5, 0.65), 1e-9);
        std::getline(ss, f, ',');
        std::getline(ss, f, ',');
        std::getline(ss, f, ',');
        EXPECT_NEAR(std::stod(f), 0.1, 1e-12);  // background passes p through
    }
    std::getline(parsed, line);
    {
        // equal z and p collapse to p, then o^3 scales every column
        std::stringstream ss(line);
        std::string f;
        std::getline(ss, f, ',');
        EXPECT_EQ(f, "r1");
        while (std::getline(ss, f, ',')) {
            EXPECT_NEAR(std::stod(f), 0.125 * 0.25, 1e-12);
        }
    }
}

TEST(ScoreCsv, MalformedRowRejected) {
    ScoreConfig cfg;
    cfg.base_ids = {0};
    std::istringstream in("r0,0.5,0.5\n");
    std::ostringstream out;
    EXPECT_THROW(process_score_csv(in, out, cfg), InputError);
}

TEST(VizExport, WritesCsvAndPgm) {
    RunConfig cfg = tiny_run();
    DualEncoder model = build_model(cfg);
    const std::string dir = temp_path("rcp_viz_test");
    export_pe_viz(model, dir);
    EXPECT_TRUE(std::filesystem::exists(dir + "/pe_similarity.csv"));
    EXPECT_TRUE(std::filesystem::exists(dir + "/pe_similarity.pgm"));
    const SimilarityMap map = read_similarity_csv(dir + "/pe_similarity.csv");
    EXPECT_EQ(map.height, cfg.vit.grid());
    std::filesystem::remove_all(dir);
}

TEST(VizExport, RejectsModelsWithoutLearnablePe) {
    RunConfig cfg = tiny_run();
    cfg.vit.pe_mode = PeMode::sincos;
    DualEncoder model = build_model(cfg);
    EXPECT_THROW(export_pe_viz(model, temp_path("rcp_viz_reject")), InputError);
}

TEST(Ablation, EmitsFullMatrix) {
    RunConfig cfg = tiny_run(2);
    const auto rows = run_ablation(cfg, 6, 2);
    ASSERT_EQ(rows.size(), 10u);  // 5 pe modes x 2 losses
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& r : rows) {
        seen.insert({to_string(r.pe_mode), to_string(r.loss)});
        EXPECT_TRUE(std::isfinite(r.final_loss));
    }
    EXPECT_EQ(seen.size(), 10u);
    const std::string path = temp_path("rcp_ablation_test.csv");
    write_ablation_csv(rows, path);
    std::ifstream is(path);
    std::string header;
    std::getline(is, header);
    EXPECT_EQ(header, "pe_mode,loss,step0_loss,final_loss,i2t_r1,t2i_r1,region_top1");
    std::filesystem::remove(path);
}
