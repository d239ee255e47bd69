#include <exception>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "koa/config.hpp"
#include "koa/errors.hpp"
#include "koa/pipeline.hpp"

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out_dir;
    std::string task;
    uint64_t seed = 0;
    bool seed_set = false;
    bool resume = false;
};

void add_common(CLI::App* cmd, CommonOpts& opts, bool with_resume = true) {
    cmd->add_option("--config", opts.config_path, "Run configuration (JSON)")->required();
    cmd->add_option("--out", opts.out_dir, "Override the output directory");
    cmd->add_option("--task", opts.task, "Override the task")
        ->check(CLI::IsMember({"multiclass", "binary"}));
    cmd->add_option_function<uint64_t>(
        "--seed",
        [&opts](const uint64_t& v) {
            opts.seed = v;
            opts.seed_set = true;
        },
        "Override the master seed");
    if (with_resume) {
        cmd->add_flag("--stage-resume", opts.resume,
                      "Reuse existing stage artifacts after verifying their config hash");
    }
}

koa::config::RunConfig resolve_config(const CommonOpts& opts) {
    koa::config::RunConfig cfg = koa::config::load(opts.config_path);
    if (!opts.out_dir.empty()) cfg.out_dir = opts.out_dir;
    if (!opts.task.empty()) cfg.task = koa::config::task_from_name(opts.task);
    if (opts.seed_set) {
        // Re-resolve, so every derived seed (synth, split, init) follows.
        nlohmann::json j = koa::config::to_json(cfg);
        j["seed"] = opts.seed;
        cfg = koa::config::from_json(j);
    }
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Knee-radiograph KL grading pipeline: CLAHE preprocessing, miniature CNN base "
                 "learners with class-weighted losses, and stacked meta-learners"};
    app.require_subcommand(1);

    CommonOpts opts;

    auto* synth = app.add_subcommand("synth", "Generate the synthetic dataset into data_root");
    add_common(synth, opts, false);

    auto* prep = app.add_subcommand("prep", "Ingest, split, and preprocess the dataset");
    add_common(prep, opts);

    auto* train_base = app.add_subcommand("train-base", "Train the base CNN backbones");
    add_common(train_base, opts);

    auto* extract = app.add_subcommand("extract", "Extract base-learner class probabilities");
    add_common(extract, opts);

    auto* tune_meta = app.add_subcommand("tune-meta", "Select bases and tune meta-learners by CV");
    add_common(tune_meta, opts);

    auto* stack = app.add_subcommand("stack", "Fit the tuned meta-learner and evaluate the stack");
    add_common(stack, opts);

    auto* report = app.add_subcommand("report", "Aggregate all reports into summary.txt");
    add_common(report, opts);

    auto* run = app.add_subcommand("run", "Run every stage in order");
    add_common(run, opts);

    std::string model_path, data_dir, manifest_path, eval_split, eval_out;
    auto* eval = app.add_subcommand("eval", "Evaluate a saved CNN model on a dataset directory");
    add_common(eval, opts, false);
    eval->add_option("--model", model_path, "Saved model file")->required();
    eval->add_option("--data", data_dir, "Dataset directory (root/<grade>/images)")->required();
    eval->add_option("--manifest", manifest_path, "Split manifest to restrict samples");
    eval->add_option("--split", eval_split, "Split name within the manifest (train/val/test)");
    eval->add_option("--report-out", eval_out, "Where to write the EvalReport CSV");

    CLI11_PARSE(app, argc, argv);

    try {
        koa::config::RunConfig cfg = resolve_config(opts);
        if (synth->parsed()) {
            koa::pipeline::run_synth(cfg);
        } else if (prep->parsed()) {
            koa::pipeline::run_prep(cfg, opts.resume);
        } else if (train_base->parsed()) {
            koa::pipeline::run_train_base(cfg, opts.resume);
        } else if (extract->parsed()) {
            koa::pipeline::run_extract(cfg, opts.resume);
        } else if (tune_meta->parsed()) {
            koa::pipeline::run_tune_meta(cfg, opts.resume);
        } else if (stack->parsed()) {
            koa::pipeline::run_stack_stage(cfg, opts.resume);
        } else if (report->parsed()) {
            koa::pipeline::run_report(cfg, opts.resume);
        } else if (run->parsed()) {
            koa::pipeline::run_all(cfg, opts.resume);
        } else if (eval->parsed()) {
            if (eval_out.empty()) {
                eval_out = (std::filesystem::path(cfg.out_dir) / "reports" / "eval.csv").string();
            }
            koa::metrics::EvalReport r = koa::pipeline::evaluate_model(
                cfg, model_path, data_dir, manifest_path, eval_split, eval_out);
            std::cout << "eval: split=" << r.split << " n=" << r.n_samples
                      << " accuracy=" << r.accuracy << " balanced_accuracy=" << r.balanced_accuracy
                      << " auc=" << r.auc << "\n";
        }
    } catch (const koa::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const koa::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const koa::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
