#include "nbscan/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "nbscan/triggers.hpp"

namespace fs = std::filesystem;

namespace nbscan::harness {

// ---------------------------------------------------------------------------
// JSON files
// ---------------------------------------------------------------------------

nlohmann::json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigurationError("cannot read " + path.string());
    try {
        return nlohmann::json::parse(in, nullptr, true, true);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigurationError(path.string() + ": " + e.what());
    }
}

void write_json_file(const fs::path& path, const nlohmann::json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << "\n";
    if (!out) throw IoError("write failed: " + path.string());
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("write failed: " + path.string());
}

uint64_t fnv1a(std::string_view bytes, uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string hex(uint64_t v) {
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << v;
    return s.str();
}

std::string file_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Fixed-precision numbers keep CSV bytes stable.
std::string num(double v) {
    if (std::isnan(v)) return "nan";
    std::ostringstream s;
    s << std::setprecision(17) << v;
    return s.str();
}

std::string csv_field(const nlohmann::json& v) {
    if (v.is_null()) return "";
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    if (v.is_number_float()) return num(v.get<double>());
    return v.dump();
}

}  // namespace

// ---------------------------------------------------------------------------
// Transferability
// ---------------------------------------------------------------------------

nlohmann::json TransferMatrix::to_json() const {
    auto rows = nlohmann::json::array();
    for (size_t i = 0; i < triggers.size(); ++i) {
        auto cells = nlohmann::json::array();
        for (size_t j = 0; j < models.size(); ++j)
            cells.push_back({{"model", models[j]}, {"asr", asr[i][j]}, {"source", static_cast<bool>(source[i][j])}});
        rows.push_back({{"trigger", triggers[i]}, {"cells", cells}});
    }
    auto mean = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
    return {{"triggers", triggers},
            {"models", models},
            {"rows", rows},
            {"cross_model_mean", mean(cross_model_mean)},
            {"source_mean", mean(source_mean)}};
}

TransferMatrix transfer_matrix(const std::vector<TriggerRef>& triggers, const std::vector<NamedModel>& models,
                               const Dataset& pool) {
    if (pool.empty()) throw ArgumentError("transfer_matrix: empty sample pool");
    for (const auto& m : models) {
        if (!m.model.meta.dataset.empty() && !pool.id.empty() && m.model.meta.dataset != pool.id)
            throw ArgumentError("model " + m.name + " was trained on " + m.model.meta.dataset + ", not " + pool.id);
        if (m.model.num_classes() != pool.num_classes)
            throw ArgumentError("model " + m.name + " has " + std::to_string(m.model.num_classes()) +
                                " classes, the pool " + std::to_string(pool.num_classes));
    }
    TransferMatrix out;
    for (const auto& m : models) out.models.push_back(m.name);
    double cross = 0.0, own = 0.0;
    int64_t n_cross = 0, n_own = 0;
    for (const auto& t : triggers) {
        if (!t.trigger) throw ArgumentError("trigger " + t.name + " has no parameters");
        out.triggers.push_back(t.name);
        const auto samples = scanner::draw_samples(pool, t.config);
        std::vector<double> row;
        std::vector<bool> flags;
        for (const auto& m : models) {
            const double a = scanner::reported_asr(m.model, *t.trigger, samples, t.config);
            const bool is_source = std::find(t.source_models.begin(), t.source_models.end(), m.name) !=
                                   t.source_models.end();
            row.push_back(a);
            flags.push_back(is_source);
            if (is_source) own += a, ++n_own;
            else cross += a, ++n_cross;
        }
        out.asr.push_back(std::move(row));
        out.source.push_back(std::move(flags));
    }
    out.cross_model_mean = n_cross ? cross / static_cast<double>(n_cross) : std::nan("");
    out.source_mean = n_own ? own / static_cast<double>(n_own) : std::nan("");
    return out;
}

// ---------------------------------------------------------------------------
// Report aggregation
// ---------------------------------------------------------------------------

const std::vector<std::string>& scan_report_fields() {
    static const std::vector<std::string> fields{"scanner_class", "mode",     "target",        "victim", "asr",
                                                 "regulation_distance", "exact_l0", "bound", "valid", "steps_run",
                                                 "seed",          "wall_seconds", "trigger_path"};
    return fields;
}

void validate_scan_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ArgumentError("scan report must be an object");
    const auto& fields = scan_report_fields();
    if (j.size() != fields.size()) throw ArgumentError("scan report has " + std::to_string(j.size()) + " fields");
    for (const auto& f : fields)
        if (!j.contains(f)) throw ArgumentError("scan report lacks '" + f + "'");
    auto expect = [&](const std::string& key, bool ok) {
        if (!ok) throw ArgumentError("scan report field '" + key + "' has the wrong type");
    };
    expect("scanner_class", j["scanner_class"].is_string());
    expect("mode", j["mode"].is_string());
    expect("target", j["target"].is_number_integer());
    expect("victim", j["victim"].is_null() || j["victim"].is_number_integer());
    for (const auto* key : {"asr", "regulation_distance", "bound", "wall_seconds"})
        expect(key, j[key].is_number());
    expect("exact_l0", j["exact_l0"].is_null() || j["exact_l0"].is_number());
    expect("valid", j["valid"].is_boolean());
    expect("steps_run", j["steps_run"].is_number_integer());
    expect("seed", j["seed"].is_number_unsigned() || j["seed"].is_number_integer());
    expect("trigger_path", j["trigger_path"].is_string());
    scanner::parse_scanner_class(j["scanner_class"].get<std::string>());
    scanner::parse_scan_mode(j["mode"].get<std::string>());
    const double asr = j["asr"].get<double>();
    if (!(asr >= 0.0 && asr <= 1.0)) throw ArgumentError("scan report asr outside [0, 1]");
}

ReportFormat parse_report_format(std::string_view text) {
    if (text == "json") return ReportFormat::json;
    if (text == "csv") return ReportFormat::csv;
    if (text == "plots") return ReportFormat::plots;
    throw ConfigurationError("unknown report format '" + std::string(text) + "'");
}

std::vector<ReportRow> collect_reports(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
    std::vector<fs::path> paths;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        const auto name = entry.path().filename().string();
        if (!entry.is_regular_file() || entry.path().extension() != ".json") continue;
        if (name.ends_with(".details.json")) continue;
        paths.push_back(entry.path());
    }
    std::sort(paths.begin(), paths.end());
    std::vector<ReportRow> rows;
    for (const auto& p : paths) {
        auto j = read_json_file(p);
        if (!j.is_object() || !j.contains("scanner_class")) continue;
        validate_scan_json(j);
        rows.push_back({p.parent_path().filename().string(), std::move(j)});
    }
    return rows;
}

namespace {

struct Group {
    int64_t count = 0;
    int64_t valid = 0;
    int64_t failed_free = 0;
    std::vector<double> asr;
};

nlohmann::json summarise(const std::map<std::string, Group>& groups, const std::string& key) {
    auto out = nlohmann::json::array();
    for (const auto& [name, g] : groups) {
        double sum = 0.0;
        for (double a : g.asr) sum += a;
        auto sorted = g.asr;
        std::sort(sorted.begin(), sorted.end());
        const double median = sorted.empty() ? 0.0
                              : sorted.size() % 2 ? sorted[sorted.size() / 2]
                                                  : 0.5 * (sorted[sorted.size() / 2 - 1] + sorted[sorted.size() / 2]);
        out.push_back({{key, name},
                       {"reports", g.count},
                       {"valid", g.valid},
                       {"mean_asr", g.count ? sum / static_cast<double>(g.count) : 0.0},
                       {"median_asr", median},
                       {"max_asr", sorted.empty() ? 0.0 : sorted.back()}});
    }
    return out;
}

}  // namespace

nlohmann::json aggregate_json(const std::vector<ReportRow>& rows) {
    auto schema = nlohmann::json::array();
    schema.push_back("model");
    for (const auto& f : scan_report_fields())
        if (f != "wall_seconds") schema.push_back(f);

    auto table = nlohmann::json::array();
    std::map<std::string, Group> by_class, by_model;
    int64_t valid = 0;
    for (const auto& r : rows) {
        validate_scan_json(r.scan);
        auto entry = r.scan;
        entry.erase("wall_seconds");  // timing varies run to run
        entry["model"] = r.model;
        table.push_back(entry);
        const auto cls = r.scan["scanner_class"].get<std::string>();
        const bool v = r.scan["valid"].get<bool>();
        const double a = r.scan["asr"].get<double>();
        for (auto* g : {&by_class[cls], &by_model[r.model]}) {
            ++g->count;
            g->valid += v;
            g->asr.push_back(a);
        }
        valid += v;
    }
    return {{"schema", {{"version", 1}, {"fields", schema}}},
            {"reports", table},
            {"summary_by_class", summarise(by_class, "scanner_class")},
            {"summary_by_model", summarise(by_model, "model")},
            {"totals", {{"reports", static_cast<int64_t>(rows.size())}, {"valid", valid}}}};
}

std::vector<fs::path> emit_report(const std::vector<ReportRow>& rows, const fs::path& dir,
                                  const std::set<ReportFormat>& formats) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create report directory " + dir.string());
    const auto aggregate = aggregate_json(rows);
    std::vector<fs::path> written;

    if (formats.count(ReportFormat::json)) {
        write_json_file(dir / "aggregate.json", aggregate);
        written.push_back(dir / "aggregate.json");
    }
    if (formats.count(ReportFormat::csv)) {
        std::ostringstream reports;
        std::vector<std::string> fields;
        for (const auto& f : aggregate["schema"]["fields"]) fields.push_back(f.get<std::string>());
        for (size_t i = 0; i < fields.size(); ++i) reports << (i ? "," : "") << fields[i];
        reports << "\n";
        for (const auto& r : aggregate["reports"]) {
            for (size_t i = 0; i < fields.size(); ++i) reports << (i ? "," : "") << csv_field(r[fields[i]]);
            reports << "\n";
        }
        write_text(dir / "reports.csv", reports.str());
        written.push_back(dir / "reports.csv");

        std::ostringstream summary;
        summary << "scanner_class,reports,valid,mean_asr,median_asr,max_asr\n";
        for (const auto& s : aggregate["summary_by_class"])
            summary << s["scanner_class"].get<std::string>() << "," << s["reports"] << "," << s["valid"] << ","
                    << num(s["mean_asr"]) << "," << num(s["median_asr"]) << "," << num(s["max_asr"]) << "\n";
        write_text(dir / "summary.csv", summary.str());
        written.push_back(dir / "summary.csv");
    }
    if (formats.count(ReportFormat::plots)) {
        std::vector<BarSeries> bars;
        for (const auto& s : aggregate["summary_by_class"])
            bars.push_back({s["scanner_class"].get<std::string>(), s["mean_asr"].get<double>()});
        write_text(dir / "asr_by_class.svg", bar_chart_svg("Mean ASR by scanner class", bars));
        written.push_back(dir / "asr_by_class.svg");

        std::map<std::string, std::vector<double>> per_class, per_model;
        for (const auto& r : aggregate["reports"]) {
            per_class[r["scanner_class"].get<std::string>()].push_back(r["asr"].get<double>());
            per_model[r["model"].get<std::string>()].push_back(r["asr"].get<double>());
        }
        write_text(dir / "asr_box_by_class.svg",
                   box_plot_svg("ASR by scanner class", {per_class.begin(), per_class.end()}));
        write_text(dir / "asr_box_by_model.svg", box_plot_svg("ASR by model", {per_model.begin(), per_model.end()}));
        written.push_back(dir / "asr_box_by_class.svg");
        written.push_back(dir / "asr_box_by_model.svg");
    }
    return written;
}

// ---------------------------------------------------------------------------
// Plans
// ---------------------------------------------------------------------------

std::string to_string(StageKind kind) {
    switch (kind) {
    case StageKind::train: return "train";
    case StageKind::poison: return "poison";
    case StageKind::scan: return "scan";
    case StageKind::harden: return "harden";
    case StageKind::defend: return "defend";
    case StageKind::transfer: return "transfer";
    }
    return "?";
}

StageKind parse_stage_kind(std::string_view text) {
    for (auto k : {StageKind::train, StageKind::poison, StageKind::scan, StageKind::harden, StageKind::defend,
                   StageKind::transfer})
        if (to_string(k) == text) return k;
    throw ConfigurationError("unknown stage '" + std::string(text) + "'");
}

nlohmann::json DatasetConfig::to_json() const {
    return {{"id", id},
            {"directory", directory.string()},
            {"train", shapes.train},
            {"validation", shapes.validation},
            {"test", shapes.test},
            {"image_size", shapes.image_size}};
}

DatasetConfig DatasetConfig::from_json(const nlohmann::json& j) {
    DatasetConfig d;
    d.id = j.value("id", d.id);
    d.directory = j.value("directory", std::string{});
    d.shapes.train = j.value("train", d.shapes.train);
    d.shapes.validation = j.value("validation", d.shapes.validation);
    d.shapes.test = j.value("test", d.shapes.test);
    d.shapes.image_size = j.value("image_size", d.shapes.image_size);
    if (d.id != "synthetic-shapes-10" && d.id != "small-natural-10")
        throw ConfigurationError("unknown dataset id '" + d.id + "'");
    if (d.id == "small-natural-10" && d.directory.empty())
        throw ConfigurationError("small-natural-10 needs a dataset directory");
    if (d.shapes.train < 10 || d.shapes.validation < 10 || d.shapes.test < 10 || d.shapes.image_size < 8)
        throw ConfigurationError("dataset sizes are too small");
    return d;
}

namespace {

const std::map<StageKind, std::set<std::string>>& allowed_keys() {
    static const std::map<StageKind, std::set<std::string>> keys{
        {StageKind::train, {"stage", "models", "encoder"}},
        {StageKind::poison, {"stage", "models"}},
        {StageKind::scan, {"stage", "models", "classes", "mode", "targets", "pairs", "target_count", "steps",
                           "generator_steps", "sample_count", "profile"}},
        {StageKind::harden, {"stage", "model", "id", "config", "rescan"}},
        {StageKind::defend, {"stage", "name", "defense", "model", "trigger", "samples", "frr", "overlays", "blend",
                             "prune_fraction", "finetune", "max_accuracy_drop", "id"}},
        {StageKind::transfer, {"stage", "sources", "models", "classes", "targets", "steps", "generator_steps",
                               "sample_count"}},
    };
    return keys;
}

std::vector<std::string> string_list(const nlohmann::json& j, const char* key) {
    if (!j.contains(key)) return {};
    if (!j.at(key).is_array()) throw ConfigurationError(std::string("'") + key + "' must be a list");
    return j.at(key).get<std::vector<std::string>>();
}

// Models a stage writes and reads.
std::vector<std::string> produced_models(const Stage& s) {
    std::vector<std::string> ids;
    if (s.kind == StageKind::train || s.kind == StageKind::poison)
        for (const auto& m : s.config.value("models", nlohmann::json::array())) ids.push_back(m.at("id"));
    if (s.kind == StageKind::harden) ids.push_back(s.config.value("id", s.config.at("model").get<std::string>() + "-hardened"));
    if (s.kind == StageKind::defend && s.config.value("defense", "") == "fine-prune")
        ids.push_back(s.config.value("id", s.config.at("model").get<std::string>() + "-pruned"));
    return ids;
}

std::vector<std::string> consumed_models(const Stage& s) {
    switch (s.kind) {
    case StageKind::train: return {};
    case StageKind::poison: {
        std::vector<std::string> ids;
        for (const auto& m : s.config.at("models"))
            if (m.contains("reference")) ids.push_back(m.at("reference"));
        return ids;
    }
    case StageKind::scan: return string_list(s.config, "models");
    case StageKind::harden:
    case StageKind::defend: return {s.config.at("model").get<std::string>()};
    case StageKind::transfer: {
        auto ids = string_list(s.config, "sources");
        for (const auto& m : string_list(s.config, "models"))
            if (std::find(ids.begin(), ids.end(), m) == ids.end()) ids.push_back(m);
        return ids;
    }
    }
    return {};
}

void validate_stage(const Stage& s) {
    const auto& c = s.config;
    if (!c.is_object()) throw ConfigurationError("stage " + to_string(s.kind) + " must be an object");
    const auto& keys = allowed_keys().at(s.kind);
    for (const auto& [key, value] : c.items())
        if (!keys.count(key)) throw ConfigurationError("stage " + to_string(s.kind) + ": unknown key '" + key + "'");
    const auto archs = zoo::architectures();
    auto check_arch = [&](const std::string& a) {
        if (std::find(archs.begin(), archs.end(), a) == archs.end())
            throw ConfigurationError("unknown architecture '" + a + "'");
    };
    switch (s.kind) {
    case StageKind::train:
    case StageKind::poison:
        if (!c.contains("models") || !c.at("models").is_array() || c.at("models").empty())
            throw ConfigurationError(to_string(s.kind) + " stage needs a non-empty 'models' list");
        for (const auto& m : c.at("models")) {
            if (!m.contains("id") || !m.at("id").is_string() || m.at("id").get<std::string>().empty())
                throw ConfigurationError("every model needs an id");
            check_arch(m.value("architecture", "plain"));
            if (m.contains("train")) zoo::TrainConfig::from_json(m.at("train"));
            if (s.kind == StageKind::poison) {
                if (!m.contains("attack")) throw ConfigurationError("poison models need an 'attack'");
                const auto& a = m.at("attack");
                attacks::parse_attack_kind(a.at("kind").get<std::string>());
                const double rate = a.value("poison_rate", 0.1);
                if (!(rate > 0.0 && rate <= attacks::kMaxPoisonRate))
                    throw ConfigurationError("poison_rate must lie in (0, " + std::to_string(attacks::kMaxPoisonRate) + "]");
            }
        }
        break;
    case StageKind::scan:
    case StageKind::transfer: {
        for (const auto& cls : string_list(c, "classes")) scanner::parse_scanner_class(cls);
        if (c.contains("mode")) scanner::parse_scan_mode(c.at("mode").get<std::string>());
        for (const auto* key : {"steps", "generator_steps", "sample_count", "target_count"})
            if (c.contains(key) && c.at(key).get<int64_t>() < 1)
                throw ConfigurationError(std::string(key) + " must be positive");
        if (s.kind == StageKind::scan && string_list(c, "models").empty())
            throw ConfigurationError("scan stage needs 'models'");
        if (s.kind == StageKind::transfer && string_list(c, "sources").empty())
            throw ConfigurationError("transfer stage needs 'sources'");
        break;
    }
    case StageKind::harden:
        if (!c.contains("model")) throw ConfigurationError("harden stage needs 'model'");
        defenses::HardenConfig::from_json(c.value("config", nlohmann::json::object()));
        break;
    case StageKind::defend: {
        if (!c.contains("model")) throw ConfigurationError("defend stage needs 'model'");
        const auto d = c.value("defense", "");
        if (d != "strip" && d != "activation-clustering" && d != "fine-prune")
            throw ConfigurationError("defense must be strip, activation-clustering or fine-prune");
        if (d != "fine-prune" && !c.contains("trigger")) throw ConfigurationError("defend stage needs a 'trigger'");
        if (c.contains("samples") && c.at("samples").get<int64_t>() < 1)
            throw ConfigurationError("samples must be positive");
        break;
    }
    }
}

}  // namespace

void ExperimentPlan::validate() const {
    if (out.empty()) throw ConfigurationError("plan needs an output directory");
    if (workers < 1) throw ConfigurationError("workers must be >= 1");
    if (stages.empty()) throw ConfigurationError("plan has no stages");
    const RunLayout layout{out};
    std::set<std::string> known;
    for (const auto& s : stages) {
        validate_stage(s);
        for (const auto& id : consumed_models(s))
            if (!known.count(id) && !fs::exists(fs::path(layout.model(id)) += ".pt"))
                throw ConfigurationError("stage " + to_string(s.kind) + " needs model '" + id +
                                         "', which no earlier stage or run directory provides");
        for (const auto& id : produced_models(s)) known.insert(id);
    }
}

nlohmann::json ExperimentPlan::to_json() const {
    auto list = nlohmann::json::array();
    for (const auto& s : stages) {
        auto body = s.config;
        body["stage"] = to_string(s.kind);
        list.push_back(body);
    }
    return {{"seed", seed}, {"out", out.string()}, {"workers", workers}, {"dataset", dataset.to_json()}, {"stages", list}};
}

ExperimentPlan ExperimentPlan::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigurationError("plan must be a JSON object");
    for (const auto& [key, value] : j.items())
        if (key != "seed" && key != "out" && key != "workers" && key != "dataset" && key != "stages")
            throw ConfigurationError("plan: unknown key '" + key + "'");
    ExperimentPlan p;
    try {
        p.seed = j.value("seed", uint64_t{0});
        p.out = j.value("out", std::string{});
        p.workers = j.value("workers", 1);
        p.dataset = DatasetConfig::from_json(j.value("dataset", nlohmann::json::object()));
        for (const auto& s : j.value("stages", nlohmann::json::array())) {
            if (!s.is_object() || !s.contains("stage")) throw ConfigurationError("every stage needs a 'stage' name");
            p.stages.push_back({parse_stage_kind(s.at("stage").get<std::string>()), s});
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigurationError(std::string("plan: ") + e.what());
    }
    return p;
}

ExperimentPlan ExperimentPlan::load(const fs::path& path) {
    return from_json(read_json_file(path));
}

// ---------------------------------------------------------------------------
// Plan execution
// ---------------------------------------------------------------------------

namespace {

class StageFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Runner {
    const ExperimentPlan& plan;
    RunLayout layout;
    std::optional<zoo::DatasetSplits> splits;
    std::vector<fs::path> artifacts;

    const zoo::DatasetSplits& data() {
        if (!splits) {
            if (plan.dataset.id == "synthetic-shapes-10") splits = zoo::synthetic_shapes(plan.seed, plan.dataset.shapes);
            else splits = zoo::provision_dataset(plan.dataset.id, plan.seed, plan.dataset.directory);
        }
        return *splits;
    }

    std::vector<int64_t> shape() {
        const auto& d = data();
        return {d.train.channels(), d.train.height(), d.train.width()};
    }

    ClassifierHandle load_model(const std::string& id) {
        auto m = zoo::load_bundle(layout.model(id));
        m.net->eval();
        return m;
    }

    void save_model(const ClassifierHandle& m, const std::string& id) {
        fs::create_directories(layout.models());
        zoo::save_bundle(m, layout.model(id));
        artifacts.push_back(fs::path(layout.model(id)) += ".pt");
        artifacts.push_back(fs::path(layout.model(id)) += ".json");
    }

    void json_artifact(const fs::path& path, const nlohmann::json& j) {
        write_json_file(path, j);
        artifacts.push_back(path);
    }

    // Encoder and calibrated bounds, when a train stage produced them.
    scanner::DatasetProfile profile(const std::string& name) {
        attacks::ReferenceBounds bounds;
        std::string encoder_id;
        if (fs::exists(layout.bounds())) bounds = attacks::ReferenceBounds::from_json(read_json_file(layout.bounds()));
        if (fs::exists(fs::path(layout.encoder()) += ".pt")) {
            auto pair = zoo::load_encoder(layout.encoder());
            zoo::register_encoder(pair);
            encoder_id = pair.id;
        }
        if (name == "imagenet") return scanner::DatasetProfile::imagenet(bounds, encoder_id);
        if (name != "cifar") throw ConfigurationError("unknown profile '" + name + "'");
        auto p = scanner::DatasetProfile::cifar(bounds, encoder_id);
        p.image_shape = shape();
        return p;
    }

    static void require_bounds(const scanner::DatasetProfile& p, const std::vector<scanner::ScannerClass>& classes) {
        for (auto cls : classes) {
            const bool needs_encoder = cls == scanner::ScannerClass::genl2 || cls == scanner::ScannerClass::featurel2;
            const bool calibrated = cls == scanner::ScannerClass::genl2       ? p.bounds.warp_l2 > 0
                                    : cls == scanner::ScannerClass::featurel2 ? p.bounds.feature_l2 > 0
                                    : cls == scanner::ScannerClass::freeb     ? p.bounds.frequency_l1 > 0
                                                                              : true;
            if (!calibrated || (needs_encoder && p.encoder_id.empty()))
                throw StageFailure(scanner::to_string(cls) +
                                   " needs calibrated bounds and an encoder: add 'encoder' to a train stage");
        }
    }

    static std::vector<scanner::ScannerClass> classes_of(const nlohmann::json& c) {
        std::vector<scanner::ScannerClass> out;
        for (const auto& name : string_list(c, "classes")) out.push_back(scanner::parse_scanner_class(name));
        if (out.empty()) out = scanner::all_scanner_classes();
        return out;
    }

    scanner::CampaignOptions campaign_options(const nlohmann::json& c, const scanner::DatasetProfile& p) {
        scanner::CampaignOptions o;
        o.profile = p;
        o.pool = data().test;
        o.workers = plan.workers;
        if (c.contains("steps")) o.steps = c.at("steps").get<int64_t>();
        if (c.contains("generator_steps")) o.generator_steps = c.at("generator_steps").get<int64_t>();
        if (c.contains("sample_count")) o.sample_count = c.at("sample_count").get<int64_t>();
        return o;
    }

    scanner::LabelPlan label_plan(const nlohmann::json& c, scanner::ScanMode mode) {
        scanner::LabelPlan lp;
        if (c.contains("targets")) lp.targets = c.at("targets").get<std::vector<int64_t>>();
        if (c.contains("pairs"))
            for (const auto& p : c.at("pairs")) lp.pairs.emplace_back(p.at(0).get<int64_t>(), p.at(1).get<int64_t>());
        const bool explicit_labels = mode == scanner::ScanMode::universal ? !lp.targets.empty() : !lp.pairs.empty();
        if (!explicit_labels)
            lp = scanner::draw_label_plan(mode, data().train.num_classes, plan.seed, c.value("target_count", 5));
        return lp;
    }

    void train(const nlohmann::json& c) {
        const auto& d = data();
        int64_t index = 0;
        for (const auto& m : c.at("models")) {
            const auto id = m.at("id").get<std::string>();
            const auto cfg = zoo::TrainConfig::from_json(m.value("train", nlohmann::json::object()));
            auto r = zoo::train_classifier(m.value("architecture", "plain"), d, cfg, plan.seed + index++);
            if (!r.ok || !r.model) throw StageFailure("model " + id + ": " + r.diagnostics);
            r.model->meta.dataset = plan.dataset.id;
            save_model(*r.model, id);
        }
        if (c.contains("encoder")) {
            const auto& e = c.at("encoder");
            zoo::AutoencoderConfig ac;
            ac.epochs = e.value("epochs", ac.epochs);
            ac.batch_size = e.value("batch_size", ac.batch_size);
            ac.learning_rate = e.value("learning_rate", ac.learning_rate);
            ac.width = e.value("width", ac.width);
            ac.latent_channels = e.value("latent_channels", ac.latent_channels);
            ac.stride = e.value("stride", ac.stride);
            ac.rmse_ceiling = e.value("rmse_ceiling", ac.rmse_ceiling);
            auto r = zoo::train_autoencoder(d, ac, plan.seed, e.value("id", std::string("ae-shapes")));
            if (!r.ok || !r.pair) throw StageFailure("encoder: " + r.diagnostics);
            fs::create_directories(layout.models());
            zoo::save_encoder(*r.pair, layout.encoder());
            zoo::register_encoder(*r.pair);
            artifacts.push_back(fs::path(layout.encoder()) += ".pt");
            const auto n = std::min<int64_t>(d.train.size(), e.value("calibration_samples", 500));
            const auto bounds = attacks::calibrate_reference_bounds(d.train.subset(torch::arange(n)), *r.pair, plan.seed);
            json_artifact(layout.bounds(), bounds.to_json());
        }
    }

    void poison(const nlohmann::json& c) {
        const auto& d = data();
        int64_t index = 0;
        for (const auto& m : c.at("models")) {
            const auto id = m.at("id").get<std::string>();
            auto a = m.at("attack");
            a["image_shape"] = shape();
            if (!a.contains("asset_seed")) a["asset_seed"] = plan.seed;
            auto recipe = attacks::recipe_from_json(a);
            attacks::attach_donors(recipe, d.train);
            recipe.validate();
            attacks::BackdoorTrainOptions opts;
            opts.asr_target = m.value("asr_target", opts.asr_target);
            opts.max_accuracy_drop = m.value("max_accuracy_drop", opts.max_accuracy_drop);
            if (m.contains("reference")) opts.reference_accuracy = load_model(m.at("reference")).meta.accuracy;
            const auto cfg = zoo::TrainConfig::from_json(m.value("train", nlohmann::json::object()));
            auto r = attacks::train_backdoored_model(d, recipe, m.value("architecture", "plain"), cfg,
                                                     plan.seed + 100 + index++, opts);
            if (!r.ok || !r.model) throw StageFailure("poisoned model " + id + ": " + r.diagnostics);
            r.model->meta.dataset = plan.dataset.id;
            save_model(*r.model, id);
            auto rj = recipe.to_json();
            rj["injected_asr"] = r.injected_asr;
            rj["clean_accuracy"] = r.clean_accuracy;
            json_artifact(fs::path(layout.model(id)) += ".recipe.json", rj);
        }
    }

    void scan(const nlohmann::json& c) {
        const auto mode = scanner::parse_scan_mode(c.value("mode", "universal"));
        const auto classes = classes_of(c);
        const auto p = profile(c.value("profile", "cifar"));
        require_bounds(p, classes);
        const auto lp = label_plan(c, mode);
        for (const auto& id : string_list(c, "models")) {
            auto opts = campaign_options(c, p);
            opts.out_dir = layout.scans() / id;
            const auto reports = scanner::run_campaign(load_model(id), mode, lp, classes, plan.seed, opts);
            for (const auto& r : reports) {
                const auto stem = scanner::report_stem(r.config);
                artifacts.push_back(opts.out_dir / (stem + ".json"));
                if (r.failed) throw StageFailure("scan " + id + "/" + stem + ": " + r.diagnostics);
            }
        }
        emit(collect_reports(layout.scans()));
    }

    void emit(const std::vector<ReportRow>& rows) {
        for (auto& p : emit_report(rows, layout.reports(),
                                   {ReportFormat::json, ReportFormat::csv, ReportFormat::plots}))
            artifacts.push_back(p);
    }

    std::unique_ptr<TriggerFunction> trigger_of(const nlohmann::json& t, const std::string& model_id,
                                                std::string& source, int64_t& target) {
        if (t.value("injected", false)) {
            const auto recipe_path = fs::path(layout.model(model_id)) += ".recipe.json";
            if (!fs::exists(recipe_path)) throw StageFailure(model_id + " has no injected recipe");
            auto recipe = attacks::recipe_from_json(read_json_file(recipe_path));
            attacks::attach_donors(recipe, data().train);
            source = "injected";
            target = recipe.target;
            return attacks::as_trigger(recipe, plan.seed);
        }
        const auto stem = t.at("scan").get<std::string>();  // "<model>/<stem>"
        const auto report = read_json_file(layout.scans() / (stem + ".json"));
        if (report.at("trigger_path").get<std::string>().empty()) throw StageFailure(stem + " stored no trigger");
        auto stored = load_trigger((layout.scans() / stem).parent_path() / report.at("trigger_path").get<std::string>());
        source = report.at("scanner_class").get<std::string>();
        target = report.at("target").get<int64_t>();
        return std::move(stored.trigger);
    }

    double trigger_asr(const ClassifierHandle& m, const TriggerFunction& trigger, const Dataset& eval, int64_t target) {
        torch::NoGradGuard no_grad;
        return attack_success_rate(m, [&](const torch::Tensor& x) { return trigger.apply(x); }, eval, target);
    }

    void defend(const nlohmann::json& c) {
        const auto& d = data();
        const auto model_id = c.at("model").get<std::string>();
        const auto model = load_model(model_id);
        const auto defense = c.at("defense").get<std::string>();
        defenses::DefenseReport report;
        report.defense = defense;
        report.model_provenance = model.meta.provenance;
        report.seed = plan.seed;
        report.config = c;

        std::unique_ptr<TriggerFunction> trigger;
        int64_t target = 0;
        if (c.contains("trigger")) trigger = trigger_of(c.at("trigger"), model_id, report.trigger_source, target);
        const auto samples = c.value("samples", int64_t{200});

        if (defense == "strip") {
            defenses::StripOptions so;
            so.overlays = c.value("overlays", so.overlays);
            so.blend = c.value("blend", so.blend);
            const auto frr = c.value("frr", 0.01);
            const auto eligible = eligible_samples(d.test, target, std::nullopt);
            const auto n = std::min(eligible.size(), samples);
            const auto clean = d.test.images.slice(0, 0, std::min(d.test.size(), samples));
            torch::Tensor attack;
            {
                torch::NoGradGuard no_grad;
                attack = trigger->apply(eligible.images.slice(0, 0, n)).detach();
            }
            const auto r = defenses::strip_far(model, clean, attack, d.validation, frr, plan.seed, so);
            report.far = r.far;
            report.frr = frr;
        } else if (defense == "activation-clustering") {
            // a training-like mix: clean samples plus 10% stamped ones relabelled to the target
            auto base = d.test.subset(torch::arange(std::min(d.test.size(), samples)));
            const auto eligible = eligible_samples(base, target, std::nullopt);
            const auto k = std::max<int64_t>(1, base.size() / 10);
            auto stamped = eligible.subset(torch::arange(std::min(k, eligible.size())));
            {
                torch::NoGradGuard no_grad;
                stamped.images = trigger->apply(stamped.images).detach();
            }
            stamped.labels = torch::full_like(stamped.labels, target);
            const auto r = defenses::activation_clustering(model, Dataset::concat(base, stamped), plan.seed);
            report.silhouette_by_label = r.silhouette_by_label;
        } else {
            defenses::FinePruneConfig fc;
            if (c.contains("finetune")) fc.finetune = zoo::TrainConfig::from_json(c.at("finetune"));
            fc.max_accuracy_drop = c.value("max_accuracy_drop", fc.max_accuracy_drop);
            const auto eval = eligible_samples(d.test, target, std::nullopt);
            if (trigger) report.asr_before = trigger_asr(model, *trigger, eval, target);
            auto r = defenses::fine_prune(model, d.validation, d.test, c.value("prune_fraction", 0.2), fc, plan.seed);
            report.acc_before = r.accuracy_before;
            report.acc_after = r.accuracy_after;
            if (!r.ok || !r.model) throw StageFailure("fine-prune: " + r.diagnostics);
            if (trigger) report.asr_after = trigger_asr(*r.model, *trigger, eval, target);
            save_model(*r.model, c.value("id", model_id + "-pruned"));
        }
        report.validate();
        const auto name = c.value("name", defense + "_" + model_id);
        json_artifact(layout.defenses() / (name + ".json"), report.to_json());
    }

    void harden(const nlohmann::json& c) {
        const auto model_id = c.at("model").get<std::string>();
        const auto model = load_model(model_id);
        const auto cfg = defenses::HardenConfig::from_json(c.value("config", nlohmann::json::object()));
        const auto p = profile("cifar");
        require_bounds(p, {cfg.preset});
        auto r = defenses::harden(model, data(), p, cfg, plan.seed);

        defenses::DefenseReport report;
        report.defense = "harden";
        report.model_provenance = model.meta.provenance;
        report.trigger_source = scanner::to_string(cfg.preset);
        report.acc_before = r.accuracy_before;
        report.acc_after = r.accuracy_after;
        report.seed = plan.seed;
        report.config = cfg.to_json();
        double before = 0.0;
        int64_t n = 0;
        const auto per_round = cfg.targets.empty() ? static_cast<size_t>(model.num_classes()) : cfg.targets.size();
        for (size_t i = 0; i < r.scans.size() && i < per_round; ++i)
            before += r.scans[i].verdict.asr, ++n;
        if (n) report.asr_before = before / static_cast<double>(n);
        if (c.value("rescan", false) && r.model) {
            double after = 0.0;
            for (size_t i = 0; i < static_cast<size_t>(n); ++i) {
                const auto& cfg_i = r.scans[i].config;
                after += scanner::invert_trigger(*r.model, scanner::draw_samples(data().validation, cfg_i), cfg_i).verdict.asr;
            }
            report.asr_after = after / static_cast<double>(n);
        }
        const auto out_id = c.value("id", model_id + "-hardened");
        report.validate();
        json_artifact(layout.defenses() / ("harden_" + out_id + ".json"), report.to_json());
        if (!r.ok || !r.model) throw StageFailure("harden: " + r.diagnostics);
        save_model(*r.model, out_id);
    }

    void transfer(const nlohmann::json& c) {
        const auto classes = classes_of(c);
        const auto p = profile("cifar");
        require_bounds(p, classes);
        const auto sources = string_list(c, "sources");
        auto model_ids = string_list(c, "models");
        for (const auto& s : sources)
            if (std::find(model_ids.begin(), model_ids.end(), s) == model_ids.end()) model_ids.push_back(s);

        scanner::LabelPlan lp;
        lp.targets = c.contains("targets") ? c.at("targets").get<std::vector<int64_t>>()
                                           : scanner::draw_label_plan(scanner::ScanMode::universal,
                                                                      data().train.num_classes, plan.seed, 2).targets;
        std::vector<TriggerRef> refs;
        for (const auto& s : sources) {
            auto opts = campaign_options(c, p);
            opts.out_dir = layout.transfer() / "scans" / s;
            const auto reports = scanner::run_campaign(load_model(s), scanner::ScanMode::universal, lp, classes,
                                                       plan.seed, opts);
            for (const auto& r : reports) {
                if (r.failed || !r.trigger) throw StageFailure("transfer scan on " + s + ": " + r.diagnostics);
                refs.push_back({s + "/" + scanner::report_stem(r.config), r.trigger, r.config, {s}});
                artifacts.push_back(opts.out_dir / (scanner::report_stem(r.config) + ".json"));
            }
        }
        std::vector<NamedModel> models;
        for (const auto& id : model_ids) models.push_back({id, load_model(id)});
        auto pool = data().test;
        pool.id = plan.dataset.id;
        const auto matrix = transfer_matrix(refs, models, pool);
        json_artifact(layout.transfer() / "matrix.json", matrix.to_json());
        write_text(layout.transfer() / "matrix.svg", matrix_svg("Transfer ASR", matrix));
        artifacts.push_back(layout.transfer() / "matrix.svg");
    }

    void run(const Stage& s) {
        switch (s.kind) {
        case StageKind::train: train(s.config); break;
        case StageKind::poison: poison(s.config); break;
        case StageKind::scan: scan(s.config); break;
        case StageKind::harden: harden(s.config); break;
        case StageKind::defend: defend(s.config); break;
        case StageKind::transfer: transfer(s.config); break;
        }
    }
};

std::string stage_key(const ExperimentPlan& plan, const Stage& s, const RunLayout& layout) {
    auto h = fnv1a(s.config.dump());
    h = fnv1a(plan.dataset.to_json().dump(), h);
    h = fnv1a(std::to_string(plan.seed), h);
    for (const auto& id : consumed_models(s)) {
        const auto weights = fs::path(layout.model(id)) += ".pt";
        h = fnv1a(fs::exists(weights) ? file_bytes(weights) : std::string("missing"), h);
    }
    if (s.kind == StageKind::scan || s.kind == StageKind::harden || s.kind == StageKind::transfer) {
        h = fnv1a(fs::exists(layout.bounds()) ? file_bytes(layout.bounds()) : std::string{}, h);
        const auto encoder = fs::path(layout.encoder()) += ".pt";
        h = fnv1a(fs::exists(encoder) ? file_bytes(encoder) : std::string{}, h);
    }
    return hex(h);
}

}  // namespace

PlanResult run_plan(const ExperimentPlan& plan) {
    plan.validate();
    const RunLayout layout{plan.out};
    fs::create_directories(layout.root);
    write_json_file(layout.root / "plan.json", plan.to_json());

    nlohmann::json checkpoint = fs::exists(layout.checkpoint()) ? read_json_file(layout.checkpoint())
                                                                 : nlohmann::json{{"completed", nlohmann::json::object()}};
    Runner runner{plan, layout, std::nullopt, {}};
    PlanResult result;
    for (size_t i = 0; i < plan.stages.size(); ++i) {
        const auto& s = plan.stages[i];
        StageOutcome outcome;
        outcome.stage = to_string(s.kind);
        outcome.key = stage_key(plan, s, layout);
        if (checkpoint["completed"].contains(outcome.key)) {
            const auto& done = checkpoint["completed"][outcome.key];
            bool present = true;
            for (const auto& a : done.value("artifacts", nlohmann::json::array()))
                present = present && fs::exists(layout.root / a.get<std::string>());
            if (present) {
                outcome.skipped = true;
                for (const auto& a : done.value("artifacts", nlohmann::json::array()))
                    outcome.artifacts.push_back(layout.root / a.get<std::string>());
                result.stages.push_back(std::move(outcome));
                continue;
            }
        }
        runner.artifacts.clear();
        try {
            runner.run(s);
        } catch (const ConfigurationError& e) {
            outcome.ok = false;
            outcome.diagnostics = e.what();
        } catch (const StageFailure& e) {
            outcome.ok = false;
            outcome.diagnostics = e.what();
        } catch (const std::exception& e) {
            outcome.ok = false;
            outcome.diagnostics = e.what();
        }
        outcome.artifacts = runner.artifacts;
        if (!outcome.ok) {
            result.status = kExitStageFailure;
            result.failed_stage = i;
            result.stages.push_back(std::move(outcome));
            break;
        }
        auto rel = nlohmann::json::array();
        std::set<std::string> seen;
        for (const auto& a : outcome.artifacts) {
            const auto r = fs::relative(a, layout.root).generic_string();
            if (seen.insert(r).second) rel.push_back(r);
        }
        checkpoint["completed"][outcome.key] = {{"stage", outcome.stage}, {"index", i}, {"artifacts", rel}};
        write_json_file(layout.checkpoint(), checkpoint);
        result.stages.push_back(std::move(outcome));
    }
    return result;
}

}  // namespace nbscan::harness
