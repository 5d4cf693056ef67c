// Command-line surface for the region-aware contrastive pretraining lab:
// training, retrieval/region evaluation, score composition, PE visualization
// and the gradient-check release gate.
//
// Exit codes: 0 success, 1 assertion or divergence failure, 2 usage error.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rcp/config.hpp"
#include "rcp/harness.hpp"

namespace {

std::vector<std::size_t> parse_k_list(const std::string& spec) {
    std::vector<std::size_t> ks;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        const long v = std::stol(item);
        if (v < 1) throw rcp::InputError("--k entries must be >= 1");
        ks.push_back(static_cast<std::size_t>(v));
    }
    if (ks.empty()) throw rcp::InputError("--k must name at least one cutoff");
    return ks;
}

rcp::RunConfig load_run_config(const std::string& path) {
    rcp::KvConfig kv = rcp::KvConfig::from_file(path);
    rcp::RunConfig cfg = rcp::run_config_from_kv(kv);
    kv.ensure_all_consumed();
    return cfg;
}

void print_retrieval(const rcp::RetrievalReport& report) {
    std::printf("retrieval over %zu held-out pairs\n", report.queries);
    for (std::size_t i = 0; i < report.ks.size(); ++i) {
        std::printf("  i2t R@%zu = %.4f   t2i R@%zu = %.4f\n", report.ks[i], report.i2t[i],
                    report.ks[i], report.t2i[i]);
    }
}

int cmd_pretrain(const std::string& config_path, const std::string& out_dir) {
    rcp::RunConfig cfg = load_run_config(config_path);
    std::filesystem::create_directories(out_dir);
    const auto t0 = std::chrono::steady_clock::now();
    rcp::PretrainResult result = rcp::pretrain(cfg, &std::cout);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rcp::save_model(*result.model, cfg.tau_init, out_dir + "/model.ckpt");
    rcp::write_trace_csv(result.trace, out_dir + "/trace.csv");
    std::printf("pretrain done: %zu steps in %.1fs, loss %.6f -> %.6f\n", cfg.steps, secs,
                result.trace.front().loss, result.trace.back().loss);
    std::printf("wrote %s/model.ckpt and %s/trace.csv\n", out_dir.c_str(), out_dir.c_str());
    return 0;
}

int cmd_eval_retrieval(const std::string& ckpt, std::size_t n, const std::string& k_spec,
                       std::uint64_t seed, const std::string& out_csv) {
    rcp::DualEncoder model = rcp::load_model(ckpt);
    rcp::RunConfig cfg = rcp::RunConfig::desk_default();
    cfg.vit = model.vit();
    cfg.text = model.text();
    cfg.cpe = model.cpe_config();
    cfg.synth.image_size = cfg.vit.image_size;
    cfg.synth.channels = cfg.vit.channels;
    cfg.seed = seed;
    const rcp::RetrievalReport report = rcp::eval_retrieval(model, cfg, n, parse_k_list(k_spec));
    print_retrieval(report);
    if (!out_csv.empty()) {
        rcp::write_retrieval_csv(report, out_csv);
        std::printf("wrote %s\n", out_csv.c_str());
    }
    return 0;
}

int cmd_eval_region(const std::string& ckpt, const std::string& config_path,
                    std::size_t tasks, std::size_t objects, const std::string& out_csv) {
    rcp::DualEncoder model = rcp::load_model(ckpt);
    rcp::RunConfig cfg = load_run_config(config_path);
    cfg.vit = model.vit();
    cfg.text = model.text();
    cfg.cpe = model.cpe_config();
    cfg.synth.image_size = cfg.vit.image_size;
    cfg.synth.channels = cfg.vit.channels;
    rcp::ScoreConfig score;
    const rcp::RegionReport report =
        rcp::eval_region_retrieval(model, cfg, score, tasks, objects);
    std::printf("region retrieval over %zu held-out objects\n", report.objects);
    std::printf("  top-1 accuracy = %.4f\n", report.top1);
    std::printf("  mean S_OVD gap = %.6f\n", report.mean_gap);
    if (!out_csv.empty()) {
        std::ofstream os(out_csv);
        os << "objects,top1,mean_gap\n"
           << report.objects << "," << report.top1 << "," << report.mean_gap << "\n";
        std::printf("wrote %s\n", out_csv.c_str());
    }
    return 0;
}

// Score CSV columns: region_id, z per category, p per category, o. Category
// columns follow ascending category-id order from the config.
int cmd_score(const std::string& in_csv, const std::string& config_path,
              const std::string& out_csv) {
    rcp::KvConfig kv = rcp::KvConfig::from_file(config_path);
    rcp::ScoreConfig cfg;
    cfg.alpha = kv.get_double("score.alpha", cfg.alpha);
    cfg.beta = kv.get_double("score.beta", cfg.beta);
    cfg.delta = kv.get_double("score.delta", cfg.delta);
    cfg.tau_cls = kv.get_double("score.tau_cls", cfg.tau_cls);
    for (long id : kv.get_int_list("score.base_ids", {})) cfg.base_ids.insert(static_cast<int>(id));
    for (long id : kv.get_int_list("score.novel_ids", {})) {
        cfg.novel_ids.insert(static_cast<int>(id));
    }
    cfg.background_id = static_cast<int>(kv.get_int("score.background_id", -1));
    kv.ensure_all_consumed();

    std::ifstream is(in_csv);
    if (!is) throw rcp::InputError("score: cannot open " + in_csv);
    std::ofstream os(out_csv);
    if (!os) throw rcp::InputError("score: cannot open " + out_csv);
    const std::size_t rows = rcp::process_score_csv(is, os, cfg);
    std::printf("score: composed %zu regions x %zu categories -> %s\n", rows,
                rcp::score_category_columns(cfg).size(), out_csv.c_str());
    return 0;
}

int cmd_viz_pe(const std::string& ckpt, const std::string& out_dir) {
    rcp::DualEncoder model = rcp::load_model(ckpt);
    rcp::export_pe_viz(model, out_dir);
    std::printf("wrote %s/pe_similarity.csv and %s/pe_similarity.pgm\n", out_dir.c_str(),
                out_dir.c_str());
    return 0;
}

int cmd_gradcheck() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto rows = rcp::gradcheck_all();
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (const auto& r : rows) {
        std::printf("%-24s trials=%-4zu max_rel_err=%.3e  %s\n", r.name.c_str(), r.trials,
                    r.max_rel_err, r.pass ? "PASS" : "FAIL");
    }
    const bool ok = rcp::gradcheck_passed(rows);
    std::printf("gradcheck: %zu checks in %.1fs -> %s\n", rows.size(), secs,
                ok ? "ALL PASS" : "FAILURES");
    return ok ? 0 : 1;
}

int cmd_ablate(const std::string& config_path, const std::string& out_dir, long steps_override) {
    rcp::RunConfig cfg = load_run_config(config_path);
    if (steps_override > 0) cfg.steps = static_cast<std::size_t>(steps_override);
    std::filesystem::create_directories(out_dir);
    const auto rows = rcp::run_ablation(cfg, 50, 10, &std::cout);
    rcp::write_ablation_csv(rows, out_dir + "/ablation.csv");
    std::printf("%-18s %-8s %10s %10s %8s %8s %8s\n", "pe_mode", "loss", "step0", "final",
                "i2t@1", "t2i@1", "reg@1");
    for (const auto& r : rows) {
        std::printf("%-18s %-8s %10.4f %10.4f %8.3f %8.3f %8.3f\n",
                    rcp::to_string(r.pe_mode).c_str(), rcp::to_string(r.loss).c_str(),
                    r.step0_loss, r.final_loss, r.i2t_r1, r.t2i_r1, r.region_top1);
    }
    std::printf("wrote %s/ablation.csv\n", out_dir.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"region-aware contrastive pretraining lab"};
    app.require_subcommand(1);

    std::string config_path, out_path, ckpt_path, in_path, k_spec = "1,5";
    std::size_t n_pairs = 100, region_tasks = 50, objects_per_task = 2;
    std::uint64_t seed = 0;
    long steps_override = -1;

    auto* c_pre = app.add_subcommand("pretrain", "train a dual encoder");
    c_pre->add_option("--config", config_path, "run config file")->required();
    c_pre->add_option("--out", out_path, "output directory")->required();

    auto* c_ret = app.add_subcommand("eval-retrieval", "zero-shot image-text retrieval");
    c_ret->add_option("--ckpt", ckpt_path, "model checkpoint")->required();
    c_ret->add_option("--n", n_pairs, "held-out pair count");
    c_ret->add_option("--k", k_spec, "comma-separated recall cutoffs");
    c_ret->add_option("--seed", seed, "evaluation seed");
    c_ret->add_option("--out", out_path, "report CSV path");

    auto* c_reg = app.add_subcommand("eval-region", "held-out region retrieval");
    c_reg->add_option("--ckpt", ckpt_path, "model checkpoint")->required();
    c_reg->add_option("--config", config_path, "run config file")->required();
    c_reg->add_option("--tasks", region_tasks, "number of region tasks");
    c_reg->add_option("--objects", objects_per_task, "objects per task");
    c_reg->add_option("--out", out_path, "report CSV path");

    auto* c_score = app.add_subcommand("score", "compose OVD scores from a CSV");
    c_score->add_option("--in", in_path, "input CSV (region id, z..., p..., o)")->required();
    c_score->add_option("--config", config_path, "score config file")->required();
    c_score->add_option("--out", out_path, "output CSV")->required();

    auto* c_viz = app.add_subcommand("viz-pe", "export PE similarity tiles");
    c_viz->add_option("--ckpt", ckpt_path, "model checkpoint")->required();
    c_viz->add_option("--out", out_path, "output directory")->required();

    app.add_subcommand("gradcheck", "finite-difference verification of all ops");

    auto* c_abl = app.add_subcommand("ablate", "pretraining-strategy matrix");
    c_abl->add_option("--config", config_path, "run config file")->required();
    c_abl->add_option("--out", out_path, "output directory")->required();
    c_abl->add_option("--steps", steps_override, "override run.steps for every cell");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (c_pre->parsed()) return cmd_pretrain(config_path, out_path);
        if (c_ret->parsed()) return cmd_eval_retrieval(ckpt_path, n_pairs, k_spec, seed, out_path);
        if (c_reg->parsed()) {
            return cmd_eval_region(ckpt_path, config_path, region_tasks, objects_per_task,
                                   out_path);
        }
        if (c_score->parsed()) return cmd_score(in_path, config_path, out_path);
        if (c_viz->parsed()) return cmd_viz_pe(ckpt_path, out_path);
        if (app.get_subcommand("gradcheck")->parsed()) return cmd_gradcheck();
        if (c_abl->parsed()) return cmd_ablate(config_path, out_path, steps_override);
    } catch (const rcp::InputError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const rcp::DivergenceError& e) {
        std::fprintf(stderr, "diverged: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "failure: %s\n", e.what());
        return 1;
    }
    return 2;
}
