// nbscan command line.  Every subcommand except `report` runs a one-stage
// plan in the --out run directory, so separate invocations share models,
// checkpoints and reports exactly like a plan file would.

#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "nbscan/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nbscan;

namespace {

struct Globals {
    uint64_t seed = 0;
    std::string out = "runs/default";
    int workers = 1;
    std::string config;
    std::string dataset = "synthetic-shapes-10";
    std::string data_dir;
};

json stage_body(const Globals& g, const std::string& stage) {
    json body = g.config.empty() ? json::object() : harness::read_json_file(g.config);
    if (!body.is_object()) throw ConfigurationError("--config must hold a JSON object");
    body["stage"] = stage;
    return body;
}

template <typename T>
void set_if(json& body, const char* key, const std::optional<T>& value) {
    if (value) body[key] = *value;
}

template <typename T>
void set_if(json& body, const char* key, const std::vector<T>& values) {
    if (!values.empty()) body[key] = values;
}

int print_result(const harness::PlanResult& r) {
    for (const auto& s : r.stages) {
        std::cout << "stage " << s.stage << " [" << s.key << "]: ";
        if (s.skipped) std::cout << "already complete";
        else if (s.ok) std::cout << "done";
        else std::cout << "FAILED: " << s.diagnostics;
        std::cout << " (" << s.artifacts.size() << " artifacts)\n";
    }
    return r.status;
}

int run_single(const Globals& g, const json& body) {
    harness::ExperimentPlan plan;
    plan.seed = g.seed;
    plan.out = g.out;
    plan.workers = g.workers;
    json dataset{{"id", g.dataset}};
    if (!g.data_dir.empty()) dataset["directory"] = g.data_dir;
    plan.dataset = harness::DatasetConfig::from_json(dataset);
    plan.stages.push_back({harness::parse_stage_kind(body.at("stage").get<std::string>()), body});
    return print_result(harness::run_plan(plan));
}

}  // namespace

int main(int argc, char** argv) {
    torch::set_num_threads(1);
    CLI::App app{"Backdoor vulnerability scanner for image classifiers"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may follow the subcommand
    Globals g;
    app.add_option("--seed", g.seed, "Global seed");
    app.add_option("--out", g.out, "Run directory");
    app.add_option("--workers", g.workers, "Concurrent scans")->check(CLI::PositiveNumber);
    app.add_option("--config", g.config, "Plan file (run) or stage body JSON (other subcommands)");
    app.add_option("--dataset", g.dataset, "synthetic-shapes-10 or small-natural-10");
    app.add_option("--data-dir", g.data_dir, "Image folder for small-natural-10");

    // train
    auto* train = app.add_subcommand("train", "Train clean classifiers (and optionally the encoder)");
    std::string train_id = "clean", train_arch = "plain";
    std::optional<int64_t> train_epochs;
    bool train_encoder = false;
    train->add_option("--id", train_id, "Model id");
    train->add_option("--arch", train_arch, "Architecture: plain, residual, separable");
    train->add_option("--epochs", train_epochs, "Training epochs");
    train->add_flag("--encoder", train_encoder, "Also train the autoencoder and calibrate bounds");

    // poison
    auto* poison = app.add_subcommand("poison", "Train a model with an injected backdoor");
    std::string poison_id = "poisoned", poison_arch = "plain", poison_kind = "patch";
    int64_t poison_target = 0;
    double poison_rate = 0.1;
    std::optional<int64_t> poison_epochs;
    poison->add_option("--id", poison_id, "Model id");
    poison->add_option("--arch", poison_arch, "Architecture");
    poison->add_option("--attack", poison_kind, "Attack kind");
    poison->add_option("--target", poison_target, "Target label");
    poison->add_option("--rate", poison_rate, "Poison rate");
    poison->add_option("--epochs", poison_epochs, "Training epochs");

    // scan
    auto* scan = app.add_subcommand("scan", "Invert triggers on stored models");
    std::vector<std::string> scan_models, scan_classes;
    std::vector<int64_t> scan_targets;
    std::optional<std::string> scan_mode;
    std::optional<int64_t> scan_steps, scan_gen_steps, scan_samples, scan_count;
    scan->add_option("--model", scan_models, "Model id (repeatable)");
    scan->add_option("--class", scan_classes, "Scanner class (repeatable; default all)");
    scan->add_option("--mode", scan_mode, "universal or label-specific");
    scan->add_option("--target", scan_targets, "Target label (repeatable)");
    scan->add_option("--target-count", scan_count, "Random targets drawn when none are given");
    scan->add_option("--steps", scan_steps, "Steps for constant-trigger classes");
    scan->add_option("--generator-steps", scan_gen_steps, "Steps for generator classes");
    scan->add_option("--samples", scan_samples, "Samples per scan");

    // harden
    auto* hard = app.add_subcommand("harden", "Harden a model against inverted triggers");
    std::optional<std::string> hard_model, hard_id, hard_preset;
    std::optional<int64_t> hard_rounds, hard_steps;
    std::vector<int64_t> hard_targets;
    bool hard_rescan = false;
    hard->add_option("--model", hard_model, "Model id");
    hard->add_option("--id", hard_id, "Id of the hardened model");
    hard->add_option("--preset", hard_preset, "GenL0-patch or FeatureL2");
    hard->add_option("--rounds", hard_rounds, "Hardening rounds");
    hard->add_option("--scan-steps", hard_steps, "Steps per inversion");
    hard->add_option("--target", hard_targets, "Targets to invert (repeatable; default all)");
    hard->add_flag("--rescan", hard_rescan, "Re-scan the hardened model");

    // defend
    auto* defend = app.add_subcommand("defend", "Evaluate STRIP, activation clustering or fine-pruning");
    std::optional<std::string> def_model, def_kind, def_scan, def_name, def_id;
    bool def_injected = false;
    std::optional<double> def_frr, def_fraction;
    std::optional<int64_t> def_samples;
    defend->add_option("--model", def_model, "Model id");
    defend->add_option("--defense", def_kind, "strip, activation-clustering or fine-prune");
    defend->add_flag("--injected", def_injected, "Use the model's injected trigger");
    defend->add_option("--scan", def_scan, "Use a stored scan trigger: <model>/<stem>");
    defend->add_option("--frr", def_frr, "STRIP false rejection rate");
    defend->add_option("--samples", def_samples, "Samples evaluated");
    defend->add_option("--prune-fraction", def_fraction, "Fine-pruning channel fraction");
    defend->add_option("--name", def_name, "Report name");
    defend->add_option("--id", def_id, "Id of the pruned model");

    // transfer
    auto* transfer = app.add_subcommand("transfer", "Cross-model ASR matrix of inverted triggers");
    std::vector<std::string> tr_sources, tr_models, tr_classes;
    std::vector<int64_t> tr_targets;
    std::optional<int64_t> tr_steps, tr_gen_steps, tr_samples;
    transfer->add_option("--source", tr_sources, "Model the triggers are built on (repeatable)");
    transfer->add_option("--model", tr_models, "Model evaluated (repeatable)");
    transfer->add_option("--class", tr_classes, "Scanner class (repeatable)");
    transfer->add_option("--target", tr_targets, "Target label (repeatable)");
    transfer->add_option("--steps", tr_steps, "Steps for constant-trigger classes");
    transfer->add_option("--generator-steps", tr_gen_steps, "Steps for generator classes");
    transfer->add_option("--samples", tr_samples, "Samples per scan");

    // report
    auto* report = app.add_subcommand("report", "Aggregate scan reports into JSON, CSV and plots");
    std::string rep_in;
    std::vector<std::string> rep_formats;
    report->add_option("--in", rep_in, "Directory searched for scan reports (default <out>/scans)");
    report->add_option("--format", rep_formats, "json, csv, plots (repeatable; default all)");

    // run
    auto* run = app.add_subcommand("run", "Run a plan file");
    std::string plan_file;
    run->add_option("plan", plan_file, "Plan file (or use --config)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : harness::kExitValidation;
    }

    try {
        if (*run) {
            const auto path = plan_file.empty() ? g.config : plan_file;
            if (path.empty()) throw ConfigurationError("run needs a plan file");
            auto plan = harness::ExperimentPlan::load(path);
            if (app.count("--seed")) plan.seed = g.seed;
            if (app.count("--out")) plan.out = g.out;
            if (app.count("--workers")) plan.workers = g.workers;
            return print_result(harness::run_plan(plan));
        }
        if (*report) {
            const fs::path in = rep_in.empty() ? fs::path(g.out) / "scans" : fs::path(rep_in);
            std::set<harness::ReportFormat> formats;
            for (const auto& f : rep_formats) formats.insert(harness::parse_report_format(f));
            if (formats.empty())
                formats = {harness::ReportFormat::json, harness::ReportFormat::csv, harness::ReportFormat::plots};
            const fs::path dest = rep_in.empty() ? fs::path(g.out) / "reports" : fs::path(g.out);
            std::vector<harness::ReportRow> rows;
            if (fs::exists(in)) rows = harness::collect_reports(in);
            for (const auto& p : harness::emit_report(rows, dest, formats)) std::cout << p.string() << "\n";
            return harness::kExitOk;
        }

        json body;
        if (*train) {
            body = stage_body(g, "train");
            json model{{"id", train_id}, {"architecture", train_arch}};
            if (train_epochs) model["train"] = {{"epochs", *train_epochs}};
            if (!body.contains("models")) body["models"] = json::array({model});
            if (train_encoder && !body.contains("encoder")) body["encoder"] = json::object();
        } else if (*poison) {
            body = stage_body(g, "poison");
            json model{{"id", poison_id},
                       {"architecture", poison_arch},
                       {"attack", {{"kind", poison_kind}, {"target", poison_target}, {"poison_rate", poison_rate}}}};
            if (poison_epochs) model["train"] = {{"epochs", *poison_epochs}};
            if (!body.contains("models")) body["models"] = json::array({model});
        } else if (*scan) {
            body = stage_body(g, "scan");
            set_if(body, "models", scan_models);
            set_if(body, "classes", scan_classes);
            set_if(body, "mode", scan_mode);
            set_if(body, "targets", scan_targets);
            set_if(body, "target_count", scan_count);
            set_if(body, "steps", scan_steps);
            set_if(body, "generator_steps", scan_gen_steps);
            set_if(body, "sample_count", scan_samples);
        } else if (*hard) {
            body = stage_body(g, "harden");
            set_if(body, "model", hard_model);
            set_if(body, "id", hard_id);
            if (hard_rescan) body["rescan"] = true;
            auto cfg = body.value("config", json::object());
            set_if(cfg, "preset", hard_preset);
            set_if(cfg, "rounds", hard_rounds);
            set_if(cfg, "scan_steps", hard_steps);
            set_if(cfg, "targets", hard_targets);
            body["config"] = cfg;
        } else if (*defend) {
            body = stage_body(g, "defend");
            set_if(body, "model", def_model);
            set_if(body, "defense", def_kind);
            set_if(body, "frr", def_frr);
            set_if(body, "samples", def_samples);
            set_if(body, "prune_fraction", def_fraction);
            set_if(body, "name", def_name);
            set_if(body, "id", def_id);
            if (def_injected) body["trigger"] = {{"injected", true}};
            if (def_scan) body["trigger"] = {{"scan", *def_scan}};
        } else if (*transfer) {
            body = stage_body(g, "transfer");
            set_if(body, "sources", tr_sources);
            set_if(body, "models", tr_models);
            set_if(body, "classes", tr_classes);
            set_if(body, "targets", tr_targets);
            set_if(body, "steps", tr_steps);
            set_if(body, "generator_steps", tr_gen_steps);
            set_if(body, "sample_count", tr_samples);
        }
        return run_single(g, body);
    } catch (const ConfigurationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return harness::kExitValidation;
    } catch (const ArgumentError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return harness::kExitValidation;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return harness::kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return harness::kExitStageFailure;
    }
}
