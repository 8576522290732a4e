#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "demondnc/compare.hpp"
#include "demondnc/train.hpp"
#include "demondnc/validation.hpp"

using namespace demondnc;

namespace {

int run_train(const std::string& config_path, std::uint64_t seed, bool seed_set, const std::string& out_dir) {
    ExperimentConfig cfg = config_load(config_path);
    if (seed_set) cfg.seed = seed;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    Trainer<float> trainer(cfg);
    const std::vector<MetricsRecord> logged = trainer.train();
    for (const auto& rec : logged) std::cout << metrics_line(rec) << "\n";
    if (!logged.empty()) std::cout << metrics_summary_line(logged) << "\n";
    if (!cfg.out_dir.empty()) std::cout << "out_dir=" << cfg.out_dir << "\n";
    return 0;
}

int run_eval(const std::string& ckpt, const std::string& task, std::size_t n, std::uint64_t seed) {
    const std::string dir = std::filesystem::path(ckpt).parent_path().string();
    const ExperimentConfig trained = config_load(dir + "/config.json");
    ExperimentConfig cfg = trained;
    if (!task.empty() && trained.babi_dir.empty()) cfg.task.kind = task_kind_from_name(task);
    Trainer<float> trainer(cfg);
    trainer.load_checkpoint(ckpt, config_digest(trained));
    const EvalResult<float> r = trainer.evaluate(n, seed);
    std::cout << "eval n=" << r.n << " task=" << (cfg.babi_dir.empty() ? task_kind_name(cfg.task.kind) : "babi")
              << (r.babi ? " babi_error_mean=" : " bit_error_mean=") << r.mean_error
              << " error_std=" << r.std_error << " seed=" << seed << "\n";
    return 0;
}

int run_compare(const std::vector<std::string>& dirs) {
    std::vector<RunSeries> runs;
    for (const auto& dir : dirs) runs.push_back(load_run(dir));
    std::cout << compare_report(runs);
    return 0;
}

int run_mi_check(std::uint64_t seed, std::size_t updates, double tol) {
    const double rhos[] = {0.0, 0.5, 0.9};
    bool all_ok = true;
    for (const double rho : rhos) {
        const auto r = validate_gaussian_mi<double>(rho, seed, updates, tol);
        const bool ok = std::abs(r.estimate - r.oracle) <= tol;
        all_ok = all_ok && ok;
        std::cout << "mi-check rho=" << rho << " oracle=" << r.oracle << " estimate=" << r.estimate
                  << " updates=" << r.updates << " ok=" << (ok ? 1 : 0) << "\n";
    }
    const double disc = discrete_tables_max_err<double>(20, seed);
    const bool disc_ok = disc <= 1e-12;
    all_ok = all_ok && disc_ok;
    std::cout << "mi-check discrete_max_err=" << disc << " ok=" << (disc_ok ? 1 : 0) << "\n";
    return all_ok ? 0 : 1;
}

int run_grad_check(std::uint64_t seed, std::size_t seeds, double tol) {
    bool all_ok = true;
    for (std::uint64_t s = seed; s < seed + seeds; ++s) {
        const OpGradReport ops = validate_diffcore_ops(s);
        const GradCheckReport<double> step = validate_dnc_step_gradients(s);
        const bool ok = ops.ok(tol) && step.ok(tol);
        all_ok = all_ok && ok;
        std::cout << "grad-check seed=" << s << " ops_max_rel_err=" << ops.max_rel_err
                  << " dnc_step_max_rel_err=" << step.max_rel_err << " checked="
                  << ops.checked + step.checked << " ok=" << (ok ? 1 : 0) << "\n";
    }
    const DncInvariantReport inv = validate_dnc_invariants(seed);
    all_ok = all_ok && inv.ok();
    std::cout << "grad-check invariants steps=" << inv.steps << " violations=" << inv.violations
              << " gated_write_identity=" << (inv.gated_write_identity ? 1 : 0)
              << " ok=" << (inv.ok() ? 1 : 0) << "\n";
    return all_ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"demon-dnc training toolkit"};
    app.require_subcommand(1);

    std::string config_path, out_dir, ckpt_path, task_name;
    std::uint64_t seed = 0;
    std::size_t eval_n = 64, mi_updates = 20000, gc_seeds = 3;
    double mi_tol = 0.05, gc_tol = 1e-4;
    std::vector<std::string> dirs;

    auto* train = app.add_subcommand("train", "train a model from a config file");
    train->add_option("--config", config_path, "experiment config json")->required();
    auto* seed_opt = train->add_option("--seed", seed, "override the config seed");
    train->add_option("--out", out_dir, "override the output directory");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("--checkpoint", ckpt_path, "checkpoint path (config.json beside it)")->required();
    eval->add_option("--task", task_name, "task name override (copy, repeat-copy, associative-recall)");
    eval->add_option("--n", eval_n, "number of samples");
    eval->add_option("--seed", seed, "evaluation seed");

    auto* compare = app.add_subcommand("compare", "align metrics across run directories");
    compare->add_option("dirs", dirs, "run directories")->expected(-2);

    auto* mi = app.add_subcommand("mi-check", "estimator self-test on closed-form cases");
    mi->add_option("--seed", seed, "rng seed");
    mi->add_option("--updates", mi_updates, "max estimator updates");
    mi->add_option("--tol", mi_tol, "tolerance against the closed form");

    auto* gc = app.add_subcommand("grad-check", "finite-difference and invariant sweep");
    gc->add_option("--seed", seed, "first rng seed");
    gc->add_option("--seeds", gc_seeds, "number of seeds");
    gc->add_option("--tol", gc_tol, "max relative error allowed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return run_train(config_path, seed, seed_opt->count() > 0, out_dir);
        if (eval->parsed()) return run_eval(ckpt_path, task_name, eval_n, seed);
        if (compare->parsed()) return run_compare(dirs);
        if (mi->parsed()) return run_mi_check(seed == 0 ? 7 : seed, mi_updates, mi_tol);
        if (gc->parsed()) return run_grad_check(seed == 0 ? 1 : seed, gc_seeds, gc_tol);
    } catch (const std::exception& e) {
        std::cerr << "error message=\"" << e.what() << "\"\n";
        return 1;
    }
    return 0;
}
