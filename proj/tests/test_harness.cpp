#include <filesystem>
#include <fstream>
#include <sstream>

#include "nbscan/harness.hpp"
#include "oracles.hpp"

#include "doctest_torch.hpp"

using namespace nbscan;
using namespace nbscan::harness;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path fresh(const std::string& name) {
    const auto dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

nlohmann::json fake_report(const std::string& cls, int64_t target, double asr) {
    return {{"scanner_class", cls}, {"mode", "universal"}, {"target", target}, {"victim", nullptr},
            {"asr", asr},           {"regulation_distance", 1.0}, {"exact_l0", nullptr}, {"bound", 2.0},
            {"valid", asr >= 0.8},  {"steps_run", 10}, {"seed", 1}, {"wall_seconds", 0.5},
            {"trigger_path", "x.nbt"}};
}

}  // namespace

TEST_CASE("scan report schema checks") {
    CHECK(scan_report_fields().size() == 13);
    const auto ok = fake_report("GenL2", 1, 0.5);
    CHECK_NOTHROW(validate_scan_json(ok));
    auto extra = ok;
    extra["note"] = 1;
    CHECK_THROWS_AS(validate_scan_json(extra), ArgumentError);
    auto missing = ok;
    missing.erase("bound");
    CHECK_THROWS_AS(validate_scan_json(missing), ArgumentError);
    auto typed = ok;
    typed["asr"] = "high";
    CHECK_THROWS_AS(validate_scan_json(typed), ArgumentError);
}

TEST_CASE("an empty report set still writes the schema header") {
    const auto dir = fresh("nbscan_report_empty");
    const auto written = emit_report({}, dir, {ReportFormat::json, ReportFormat::csv});
    CHECK_FALSE(written.empty());
    const auto j = read_json_file(dir / "aggregate.json");
    CHECK(j.at("schema").at("version") == 1);
    CHECK(j.at("reports").empty());
    CHECK(slurp(dir / "reports.csv").find("scanner_class") != std::string::npos);
}

TEST_CASE("aggregates summarise by class and are byte-stable") {
    const auto classes = std::vector<std::string>{"GenL0-patch",      "GenL0-dynamic", "GenL0-inputaware",
                                                  "GenL0-composite", "GenL2",         "GenLinf",
                                                  "FeatureL2",       "FreeB"};
    std::vector<ReportRow> rows;
    for (size_t c = 0; c < classes.size(); ++c)
        for (int64_t t = 0; t < 5; ++t) rows.push_back({"m", fake_report(classes[c], t, 0.1 * static_cast<double>(t))});
    REQUIRE(rows.size() == 40);
    const auto agg = aggregate_json(rows);
    CHECK(agg.at("summary_by_class").size() == 8);
    CHECK(agg.at("reports").size() == 40);
    CHECK_FALSE(agg.at("reports")[0].contains("wall_seconds"));

    const auto a = fresh("nbscan_report_a");
    const auto b = fresh("nbscan_report_b");
    emit_report(rows, a, {ReportFormat::json, ReportFormat::csv, ReportFormat::plots});
    rows[0].scan["wall_seconds"] = 99.0;  // timings never reach the aggregate
    emit_report(rows, b, {ReportFormat::json, ReportFormat::csv, ReportFormat::plots});
    CHECK(slurp(a / "aggregate.json") == slurp(b / "aggregate.json"));
    CHECK(slurp(a / "summary.csv") == slurp(b / "summary.csv"));
    CHECK(fs::exists(a / "asr_by_class.svg"));
    CHECK(slurp(a / "asr_by_class.svg").rfind("<svg", 0) == 0);
}

TEST_CASE("collect_reports finds scan reports and skips details") {
    const auto dir = fresh("nbscan_collect");
    fs::create_directories(dir / "m1");
    fs::create_directories(dir / "m2");
    write_json_file(dir / "m1" / "a.json", fake_report("GenL2", 1, 0.2));
    write_json_file(dir / "m1" / "a.details.json", {{"failed", false}});
    write_json_file(dir / "m2" / "b.json", fake_report("FreeB", 2, 0.9));
    const auto rows = collect_reports(dir);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].model == "m1");
    CHECK(rows[1].model == "m2");
    CHECK_THROWS_AS(parse_report_format("xml"), ConfigurationError);
}

TEST_CASE("plans parse with comments and reject unknown keys and stages") {
    const auto dir = fresh("nbscan_plan_parse");
    {
        std::ofstream f(dir / "plan.json");
        f << "// a plan\n{ \"seed\": 3, \"out\": \"" << (dir / "run").string() << "\", /* inline */\n"
          << "\"stages\": [{\"stage\": \"train\", \"models\": [{\"id\": \"a\", \"architecture\": \"plain\"}]},\n"
          << "{\"stage\": \"scan\", \"models\": [\"a\"], \"classes\": [\"GenL0-patch\"]}]}\n";
    }
    const auto plan = ExperimentPlan::load(dir / "plan.json");
    CHECK(plan.seed == 3);
    CHECK(plan.stages.size() == 2);
    CHECK_NOTHROW(plan.validate());
    CHECK(ExperimentPlan::from_json(plan.to_json()).to_json() == plan.to_json());

    auto j = plan.to_json();
    j["stages"][1]["colour"] = "red";
    CHECK_THROWS_AS(ExperimentPlan::from_json(j).validate(), ConfigurationError);

    auto unknown = plan.to_json();
    unknown["stages"][0]["stage"] = "bake";
    CHECK_THROWS_AS(ExperimentPlan::from_json(unknown), ConfigurationError);

    auto dangling = plan.to_json();
    dangling["stages"][1]["models"] = {"ghost"};
    CHECK_THROWS_AS(ExperimentPlan::from_json(dangling).validate(), ConfigurationError);

    std::ofstream(dir / "broken.json") << "{ \"seed\": ";
    CHECK_THROWS_AS(ExperimentPlan::load(dir / "broken.json"), ConfigurationError);
}

TEST_CASE("a train-only plan writes one bundle and reruns as a no-op") {
    const auto dir = fresh("nbscan_plan_run");
    ExperimentPlan plan = ExperimentPlan::from_json({
        {"seed", 5},
        {"out", (dir / "run").string()},
        {"dataset", {{"train", 200}, {"validation", 50}, {"test", 50}}},
        {"stages",
         {{{"stage", "train"},
           {"models", {{{"id", "a"}, {"architecture", "plain"}, {"train", {{"epochs", 1}, {"accuracy_floor", 0.0}}}}}}}}},
    });
    const auto first = run_plan(plan);
    REQUIRE(first.status == kExitOk);
    const RunLayout layout{plan.out};
    CHECK(fs::exists(layout.checkpoint()));
    size_t bundles = 0;
    for (const auto& e : fs::directory_iterator(layout.models()))
        if (e.path().extension() == ".pt") ++bundles;
    CHECK(bundles == 1);
    const auto stamp = fs::last_write_time(first.stages[0].artifacts.front());

    const auto second = run_plan(plan);
    REQUIRE(second.status == kExitOk);
    CHECK(second.stages[0].skipped);
    CHECK(fs::last_write_time(first.stages[0].artifacts.front()) == stamp);
}

TEST_CASE("a failing stage returns the stage-failure status") {
    const auto dir = fresh("nbscan_plan_fail");
    ExperimentPlan plan = ExperimentPlan::from_json({
        {"seed", 5},
        {"out", (dir / "run").string()},
        {"dataset", {{"train", 100}, {"validation", 20}, {"test", 20}}},
        {"stages",
         {{{"stage", "train"},
           {"models", {{{"id", "a"}, {"architecture", "plain"}, {"train", {{"epochs", 1}, {"accuracy_floor", 1.0}}}}}}}}},
    });
    const auto r = run_plan(plan);
    CHECK(r.status == kExitStageFailure);
    REQUIRE(r.failed_stage.has_value());
    CHECK(*r.failed_stage == 0);
}

TEST_CASE("transfer matrices mark source cells and reproduce the scan ASR there") {
    const auto splits = oracle::small_splits(71, 300);
    const auto a = oracle::quick_model(splits, "plain", 71, 2);
    const auto b = oracle::quick_model(splits, "residual", 72, 2);
    auto cfg = scanner::preset(scanner::ScannerClass::genl0_patch,
                               scanner::DatasetProfile::cifar({}, ""), 3);
    cfg.steps = 20;
    cfg.sample_count = 60;
    const auto r = scanner::invert_trigger(a, scanner::draw_samples(splits.test, cfg), cfg);
    TriggerRef ref{"t", r.trigger, cfg, {"a"}};
    const auto m = transfer_matrix({ref}, {{"a", a}, {"b", b}}, splits.test);
    REQUIRE(m.asr.size() == 1);
    CHECK(m.asr[0][0] == r.verdict.asr);
    CHECK(m.source[0][0]);
    CHECK_FALSE(m.source[0][1]);
    CHECK(m.cross_model_mean == m.asr[0][1]);
    CHECK(m.to_json().contains("cross_model_mean"));

    Dataset five = splits.test;
    five.num_classes = 5;
    CHECK_THROWS_AS(transfer_matrix({ref}, {{"a", a}}, five), ArgumentError);
}
