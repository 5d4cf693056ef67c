#include <gtest/gtest.h>

#include <cmath>

#include "rcp/finite_diff.hpp"
#include "rcp/rng.hpp"
#include "rcp/scoring.hpp"

using namespace rcp;

namespace {

ScoreConfig demo_config() {
    ScoreConfig cfg;
    cfg.base_ids = {0, 1, 2};
    cfg.novel_ids = {3, 4};
    cfg.background_id = 5;
    return cfg;
}

double cosine(const Tensor& a, const Tensor& b) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        dot += a.data()[i] * b.data()[i];
        na += a.data()[i] * a.data()[i];
        nb += b.data()[i] * b.data()[i];
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

TEST(RegionEmbed, FullBoxOnConstantMap) {
    Tensor map({4, 4, 3});
    for (std::size_t i = 0; i < map.numel(); ++i) {
        map.data()[i] = (i % 3 == 0) ? 2.0 : ((i % 3 == 1) ? -1.0 : 0.5);
    }
    Tensor emb = region_embed(map, RegionBox{0, 0, 1, 1});
    const double norm = std::sqrt(2.0 * 2.0 + 1.0 + 0.25);
    EXPECT_NEAR(emb.at(0, 0), 2.0 / norm, 1e-12);
    EXPECT_NEAR(emb.at(0, 1), -1.0 / norm, 1e-12);
    EXPECT_NEAR(emb.at(0, 2), 0.5 / norm, 1e-12);
    double n = 0.0;
    for (double v : emb.data()) n += v * v;
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-10);
}

TEST(RegionEmbed, SingleCellBoxPointSamplesThatCell) {
    // cell (1, 2) of a 4x4 map covers [0.5, 0.75] x [0.25, 0.5]; with a
    // single sample the lattice degenerates to the cell center
    Rng rng(3);
    Tensor map({4, 4, 3});
    for (auto& v : map.data()) v = rng.uniform(-1.0, 1.0);
    RegionBox box{0.5, 0.25, 0.75, 0.5};
    Tensor emb = region_embed(map, box, 1);
    double norm = 0.0;
    for (std::size_t k = 0; k < 3; ++k) norm += map.at(1, 2, k) * map.at(1, 2, k);
    norm = std::sqrt(norm);
    for (std::size_t k = 0; k < 3; ++k) {
        EXPECT_NEAR(emb.at(0, k), map.at(1, 2, k) / norm, 1e-12);
    }
}

TEST(RegionEmbed, MatchesDenseSamplingOracle) {
    Rng rng(11);
    Tensor map({6, 6, 4});
    for (auto& v : map.data()) v = rng.uniform(-1.0, 1.0);
    RegionBox box{0.25, 0.25, 0.75, 0.75};
    Tensor coarse = region_embed(map, box, 2);
    Tensor dense = region_embed(map, box, 64);
    EXPECT_GT(cosine(coarse, dense), 1.0 - 0.05);
}

TEST(RegionEmbed, DegenerateBoxRejected) {
    Tensor map({4, 4, 2}, 1.0);
    EXPECT_THROW(region_embed(map, RegionBox{0.5, 0.2, 0.5, 0.8}), InputError);
    EXPECT_THROW(region_embed(map, RegionBox{-2.0, 0.2, -1.0, 0.8}), InputError);
}

TEST(RegionEmbed, GradientCheck) {
    Rng rng(13);
    Tensor map({4, 4, 3});
    for (auto& v : map.data()) v = rng.uniform(-1.0, 1.0);
    RegionBox box{0.2, 0.3, 0.85, 0.75};
    Tensor w({1, 3});
    for (auto& v : w.data()) v = rng.uniform(-1.0, 1.0);

    Tensor mp = map.clone();
    mp.set_requires_grad(true);
    {
        Tape tape;
        tape.backward(sum_all(cwise_scale(region_embed(mp, box), w)));
    }
    auto f = [&](const Tensor& q) {
        Tensor emb = region_embed(q, box);
        double acc = 0.0;
        for (std::size_t i = 0; i < emb.numel(); ++i) acc += emb.data()[i] * w.data()[i];
        return acc;
    };
    EXPECT_LT(grad_rel_error(Tensor::from(map.shape(), mp.grad()), finite_diff_grad(f, map)),
              1e-4);
}

TEST(VlmScores, DominantLogit) {
    Tensor region = Tensor::from({1, 2}, {1.0, 0.0});
    Tensor texts = Tensor::from({3, 2}, {1, 0, 0, 1, 0, -1});
    Tensor z = vlm_scores(region, texts, 0.01);
    EXPECT_GT(z.at(0), 0.999);
    EXPECT_LT(z.at(1), 1e-3);
}

TEST(VlmScores, IdenticalCategoriesUniform) {
    Tensor region = Tensor::from({1, 2}, {1.0, 0.0});
    Tensor texts = Tensor::from({4, 2}, {0, 1, 0, 1, 0, 1, 0, 1});
    Tensor z = vlm_scores(region, texts, 0.5);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(z.at(i), 0.25, 1e-12);
}

TEST(VlmScores, DirectEvaluation) {
    // cosines (0.9, 0.1, -0.5) at temperature 0.2 -> softmax([4.5, 0.5, -2.5])
    Tensor region = Tensor::from({1, 1}, {1.0});
    Tensor texts = Tensor::from({3, 1}, {0.9, 0.1, -0.5});
    Tensor z = vlm_scores(region, texts, 0.2);
    const double e0 = std::exp(4.5), e1 = std::exp(0.5), e2 = std::exp(-2.5);
    const double denom = e0 + e1 + e2;
    EXPECT_NEAR(z.at(0), e0 / denom, 1e-12);
    EXPECT_NEAR(z.at(1), e1 / denom, 1e-12);
    EXPECT_NEAR(z.at(2), e2 / denom, 1e-12);
    double sum = z.at(0) + z.at(1) + z.at(2);
    EXPECT_NEAR(sum, 1.0, 1e-12);
}

TEST(CombineScores, AlphaOneCollapsesToDetection) {
    ScoreConfig cfg = demo_config();
    cfg.alpha = 1.0;
    EXPECT_EQ(combine_scores(0.8, 0.37, cfg, 0), 0.37);
}

TEST(CombineScores, EqualScoreFixedPoint) {
    ScoreConfig cfg = demo_config();
    for (double a : {0.0, 0.3, 0.65, 1.0}) {
        cfg.alpha = a;
        cfg.beta = 1.0 - a;
        EXPECT_EQ(combine_scores(0.37, 0.37, cfg, 1), 0.37);
        EXPECT_EQ(combine_scores(0.37, 0.37, cfg, 3), 0.37);
    }
}

TEST(CombineScores, IndependentCalculatorValue) {
    // 0.8^0.35 * 0.5^0.65 = exp(0.35 ln 0.8 + 0.65 ln 0.5) = 0.5894025335
    ScoreConfig cfg = demo_config();
    cfg.alpha = 0.65;
    const double s = combine_scores(0.8, 0.5, cfg, 0);
    EXPECT_NEAR(s, 0.5894025335, 1e-6);
    EXPECT_NEAR(s, 0.5894, 1e-4);
    EXPECT_NEAR(s, std::exp(0.35 * std::log(0.8) + 0.65 * std::log(0.5)), 1e-12);
}

TEST(CombineScores, NovelBranchUsesBeta) {
    ScoreConfig cfg = demo_config();
    cfg.beta = 0.3;
    const double s = combine_scores(0.8, 0.5, cfg, 4);
    EXPECT_NEAR(s, std::pow(0.8, 0.7) * std::pow(0.5, 0.3), 1e-15);
}

TEST(CombineScores, BackgroundComesFromDetection) {
    ScoreConfig cfg = demo_config();
    EXPECT_EQ(combine_scores(0.9, 0.123, cfg, 5), 0.123);
}

TEST(CombineScores, UnknownCategoryRejected) {
    ScoreConfig cfg = demo_config();
    EXPECT_THROW(combine_scores(0.5, 0.5, cfg, 42), InputError);
    EXPECT_THROW(combine_scores(1.5, 0.5, cfg, 0), InputError);
}

TEST(CombineScores, OverlappingSetsRejected) {
    ScoreConfig cfg = demo_config();
    cfg.novel_ids.insert(0);
    EXPECT_THROW(cfg.validate(), InputError);
}

TEST(CombineScores, ZeroToTheZeroIsOne) {
    ScoreConfig cfg = demo_config();
    cfg.alpha = 0.0;
    // z^1 * p^0 with p = 0: the 0^0 corner is pinned to 1
    EXPECT_EQ(combine_scores(0.7, 0.0, cfg, 0), 0.7);
}

TEST(CombineScores, TransferModeBaseEqualsVlm) {
    // transfer setting (alpha, beta) = (0.0, 0.65): base scores equal z
    ScoreConfig cfg = demo_config();
    cfg.alpha = 0.0;
    cfg.beta = 0.65;
    for (double z : {0.0, 0.2, 0.5, 0.9, 1.0}) {
        EXPECT_EQ(combine_scores(z, 0.31, cfg, 2), z);
    }
}

TEST(CombineScores, MonotoneAndBounded) {
    ScoreConfig cfg = demo_config();
    for (int id : {0, 3}) {
        double prev_row = -1.0;
        for (int zi = 0; zi < 50; ++zi) {
            const double z = zi / 49.0;
            double prev = -1.0;
            for (int pi = 0; pi < 50; ++pi) {
                const double p = pi / 49.0;
                const double s = combine_scores(z, p, cfg, id);
                EXPECT_GE(s, 0.0);
                EXPECT_LE(s, 1.0);
                EXPECT_GE(s, prev - 1e-12);  // non-decreasing in p
                prev = s;
            }
            const double s_fixed_p = combine_scores(z, 0.5, cfg, id);
            EXPECT_GE(s_fixed_p, prev_row - 1e-12);  // non-decreasing in z
            prev_row = s_fixed_p;
        }
    }
}

TEST(ApplyObjectness, NeutralCases) {
    EXPECT_EQ(apply_objectness(0.6, 1.0, 3.0), 0.6);
    EXPECT_EQ(apply_objectness(0.6, 0.2, 0.0), 0.6);
}

TEST(ApplyObjectness, DirectEvaluation) {
    EXPECT_NEAR(apply_objectness(0.6, 0.5, 3.0), 0.075, 1e-15);
}

TEST(ApplyObjectness, DefaultDeltaNeverIncreases) {
    Rng rng(5);
    for (int i = 0; i < 1000; ++i) {
        const double s = rng.uniform();
        const double o = rng.uniform();
        EXPECT_LE(apply_objectness(s, o, 3.0), s + 1e-15);
    }
}

TEST(NormalizedLayer, CosineOneGivesTau) {
    Tensor x = Tensor::from({1, 2}, {3.0, 4.0});
    Tensor w = Tensor::from({1, 2}, {3.0, 4.0});
    Tensor b({1});
    Tensor out = normalized_layer(x, w, b, 20.0);
    EXPECT_EQ(out.at(0), 20.0);  // exact
}

TEST(NormalizedLayer, OrthogonalRowGivesBias) {
    Tensor x = Tensor::from({1, 2}, {1.0, 0.0});
    Tensor w = Tensor::from({1, 2}, {0.0, 1.0});
    Tensor b = Tensor::from({1}, {1.0});
    EXPECT_EQ(normalized_layer(x, w, b, 20.0).at(0), 1.0);
}

TEST(NormalizedLayer, DirectEvaluation) {
    Tensor x = Tensor::from({1, 2}, {1.0, 0.0});
    Tensor w = Tensor::from({1, 2}, {1.0, 1.0});
    Tensor b = Tensor::from({1}, {1.0});
    const double out = normalized_layer(x, w, b, 20.0).at(0);
    EXPECT_NEAR(out, 20.0 / std::sqrt(2.0) + 1.0, 1e-12);
    EXPECT_NEAR(out, 15.1421, 1e-4);
}

TEST(NormalizedLayer, ScaleInvariance) {
    Rng rng(7);
    for (int trial = 0; trial < 30; ++trial) {
        Tensor x({1, 5});
        Tensor w({3, 5});
        Tensor b({3});
        for (auto& v : x.data()) v = rng.uniform(-2.0, 2.0);
        for (auto& v : w.data()) v = rng.uniform(-2.0, 2.0);
        for (auto& v : b.data()) v = rng.uniform(-1.0, 1.0);
        const double cx = rng.uniform(0.1, 10.0);
        const double cw = rng.uniform(0.1, 10.0);
        Tensor xs = scale(x, cx);
        Tensor ws = scale(w, cw);
        Tensor base = normalized_layer(x, w, b);
        Tensor sx = normalized_layer(xs, w, b);
        Tensor sw = normalized_layer(x, ws, b);
        for (std::size_t i = 0; i < 3; ++i) {
            EXPECT_NEAR(base.at(i), sx.at(i), 1e-10);
            EXPECT_NEAR(base.at(i), sw.at(i), 1e-10);
        }
    }
}

TEST(NormalizedLayer, GradientCheck) {
    Rng rng(9);
    Tensor x({1, 4});
    Tensor w({3, 4});
    Tensor b({3});
    for (auto& v : x.data()) v = rng.uniform(-2.0, 2.0);
    for (auto& v : w.data()) v = rng.uniform(-2.0, 2.0);
    for (auto& v : b.data()) v = rng.uniform(-1.0, 1.0);
    Tensor wt({3});
    for (auto& v : wt.data()) v = rng.uniform(-1.0, 1.0);

    for (int which = 0; which < 3; ++which) {
        Tensor target = which == 0 ? x : (which == 1 ? w : b);
        Tensor probe = target.clone();
        probe.set_requires_grad(true);
        {
            Tape tape;
            Tensor out = which == 0   ? normalized_layer(probe, w, b)
                         : which == 1 ? normalized_layer(x, probe, b)
                                      : normalized_layer(x, w, probe);
            tape.backward(sum_all(cwise_scale(out, wt)));
        }
        auto f = [&](const Tensor& q) {
            Tensor out = which == 0   ? normalized_layer(q, w, b)
                         : which == 1 ? normalized_layer(x, q, b)
                                      : normalized_layer(x, w, q);
            double acc = 0.0;
            for (std::size_t i = 0; i < 3; ++i) acc += out.at(i) * wt.at(i);
            return acc;
        };
        EXPECT_LT(grad_rel_error(Tensor::from(target.shape(), probe.grad()),
                                 finite_diff_grad(f, target)),
                  1e-4)
            << "argument " << which;
    }
}

TEST(ComposeScores, BundlesAllStages) {
    ScoreConfig cfg = demo_config();
    const std::vector<double> z = {0.5, 0.2, 0.1, 0.1, 0.05, 0.05};
    const std::vector<double> p = {0.4, 0.3, 0.1, 0.1, 0.05, 0.05};
    const std::vector<int> ids = {0, 1, 2, 3, 4, 5};
    const CategoryScores s = compose_scores(z, p, 0.5, cfg, ids);
    ASSERT_EQ(s.combined.size(), 6u);
    EXPECT_NEAR(s.combined[0], std::pow(0.5, 0.35) * std::pow(0.4, 0.65), 1e-15);
    EXPECT_EQ(s.combined[5], 0.05);  // background from p
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_NEAR(s.final[i], std::pow(0.5, 3.0) * s.combined[i], 1e-15);
    }
}
