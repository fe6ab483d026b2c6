#include <omp.h>

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <sstream>

#include "objmask/errors.hpp"
#include "objmask/experiment.hpp"
#include "objmask/maskgen.hpp"
#include "objmask/model.hpp"
#include "objmask/rng.hpp"
#include "objmask/synth.hpp"

namespace fs = std::filesystem;
using namespace objmask;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitThreshold = 3;

struct ThresholdFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Files and directories created by the running command; removed if it fails.
class Outputs {
public:
    void track(const fs::path& p) { created_.push_back(p); }
    void rollback() {
        for (auto it = created_.rbegin(); it != created_.rend(); ++it) {
            std::error_code ec;
            fs::remove_all(*it, ec);
        }
        created_.clear();
    }
    void commit() { created_.clear(); }

private:
    std::vector<fs::path> created_;
};

Outputs g_outputs;
std::string g_stage = "startup";
const auto g_start = std::chrono::steady_clock::now();

void log_line(const std::string& msg) {
    const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - g_start).count();
    std::fprintf(stderr, "[%8.1fs] %s\n", t, msg.c_str());
}

void ensure_dir(const fs::path& dir) {
    if (dir.empty() || fs::exists(dir)) return;
    ensure_dir(dir.parent_path());
    fs::create_directory(dir);
    g_outputs.track(dir);
}

void write_text(const fs::path& path, const std::string& text) {
    ensure_dir(path.parent_path());
    const fs::path tmp = path.string() + ".partial";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + path.string());
        out << text;
        if (!out) throw std::runtime_error("write failed for " + path.string());
    }
    g_outputs.track(path);
    fs::rename(tmp, path);
}

nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("invalid JSON in " + path.string() + ": " + e.what());
    }
}

// Experiment options shared by train / eval / profile; flags override the file.
struct ExperimentFlags {
    std::string config;
    std::optional<std::string> name, train_data, eval_data, output_dir, checkpoint, mask_source, omg_checkpoint,
        execution, target;
    std::optional<int> steps;
    std::optional<std::uint64_t> seed;

    void add(CLI::App* cmd) {
        cmd->add_option("-c,--config", config, "Experiment config (JSON)");
        cmd->add_option("--name", name, "Run name");
        cmd->add_option("--train-data", train_data, "Training dataset directory");
        cmd->add_option("--eval-data", eval_data, "Evaluation dataset directory");
        cmd->add_option("-o,--output-dir", output_dir, "Output directory");
        cmd->add_option("--checkpoint", checkpoint, "Model checkpoint");
        cmd->add_option("--mask-source", mask_source,
                        "vanilla | gt_instance | gt_box | random(p) | spectral(th) | omg_pipeline | omg_e2e");
        cmd->add_option("--omg-checkpoint", omg_checkpoint, "Checkpoint whose OMG produces omg_pipeline masks");
        cmd->add_option("--execution", execution, "dense | sparse");
        cmd->add_option("--target", target, "detector | omg");
        cmd->add_option("--steps", steps, "Training steps");
        cmd->add_option("--seed", seed, "Run seed");
    }

    ExperimentConfig resolve() const {
        nlohmann::json j = config.empty() ? nlohmann::json::object() : read_json(config);
        if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
        if (name) j["name"] = *name;
        if (train_data) j["train_data"] = *train_data;
        if (eval_data) j["eval_data"] = *eval_data;
        if (output_dir) j["output_dir"] = *output_dir;
        if (checkpoint) j["checkpoint"] = *checkpoint;
        if (mask_source) j["mask_source"] = *mask_source;
        if (omg_checkpoint) j["omg_checkpoint"] = *omg_checkpoint;
        if (execution) j["execution"] = *execution;
        if (target) j["target"] = *target;
        if (steps) j["steps"] = *steps;
        if (seed) j["seed"] = *seed;
        return ExperimentConfig::from_json(j);
    }
};

fs::path checkpoint_path(const ExperimentConfig& c) {
    return c.checkpoint.empty() ? c.output_dir / (c.name + ".ckpt") : c.checkpoint;
}

std::vector<SyntheticScene> load_data(const fs::path& dir, const char* what) {
    if (dir.empty()) throw ConfigError(std::string(what) + " dataset path is not set");
    if (!fs::is_directory(dir)) throw ConfigError(std::string(what) + " dataset not found: " + dir.string());
    return read_dataset(dir);
}

std::optional<Model> load_mask_model(const ExperimentConfig& c) {
    if (c.source.kind != MaskKind::OmgPipeline) return std::nullopt;
    if (!fs::exists(c.source.omg_checkpoint)) throw ConfigError("omg checkpoint not found: " + c.source.omg_checkpoint.string());
    return Model::load(c.source.omg_checkpoint);
}

Background parse_background(const std::string& s) {
    if (s == "noise") return Background::Noise;
    if (s == "gradient") return Background::Gradient;
    if (s == "texture") return Background::Texture;
    throw ConfigError("unknown background '" + s + "'");
}

// ---- gen-data ----
struct GenDataArgs {
    std::string out;
    std::size_t count = 2000;
    std::uint64_t seed = 1;
    SceneConfig scene;
    std::vector<std::string> backgrounds;
};

int cmd_gen_data(const GenDataArgs& a) {
    g_stage = "gen-data";
    SceneConfig cfg = a.scene;
    for (const auto& b : a.backgrounds) cfg.backgrounds.push_back(parse_background(b));
    cfg.validate();
    if (fs::exists(a.out) && !fs::is_empty(a.out)) throw ConfigError("output directory is not empty: " + a.out);
    ensure_dir(a.out);
    g_outputs.track(a.out);
    const auto scenes = generate_dataset(cfg, a.count, a.seed);
    write_dataset(a.out, scenes, cfg, a.seed);
    std::printf("wrote %zu scenes to %s (checksum %016llx)\n", scenes.size(), a.out.c_str(),
                static_cast<unsigned long long>(dataset_checksum(scenes)));
    return kExitOk;
}

// ---- gen-masks ----
struct GenMasksArgs {
    std::string data, out, source = "gt_instance", omg_checkpoint;
    std::uint64_t seed = 1;
    bool pgm = false;
};

int cmd_gen_masks(const GenMasksArgs& a) {
    g_stage = "gen-masks";
    MaskSource src = MaskSource::parse(a.source);
    if (src.kind == MaskKind::Vanilla || src.kind == MaskKind::OmgE2e) {
        throw ConfigError("gen-masks needs a mask generator, not '" + a.source + "'");
    }
    std::optional<Model> mm;
    if (src.kind == MaskKind::OmgPipeline) {
        if (a.omg_checkpoint.empty()) throw ConfigError("omg_pipeline masks need --omg-checkpoint");
        mm = Model::load(a.omg_checkpoint);
    }
    g_stage = "gen-masks: reading data";
    const auto scenes = load_data(a.data, "input");
    g_stage = "gen-masks: generating";
    std::vector<BinaryMask> masks;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        if (mm) {
            masks.push_back(omg_mask(*mm, scenes[i].image));
        } else {
            masks.push_back(scene_mask(src, scenes[i], mix_seed(a.seed, i)));
        }
    }
    const BinaryMask all = masks.empty() ? BinaryMask() : stack_masks(masks);
    ensure_dir(a.out);
    const fs::path raw = fs::path(a.out) / "masks.bin";
    write_mask_file(raw, all);
    g_outputs.track(raw);
    if (a.pgm) {
        for (std::size_t i = 0; i < masks.size(); ++i) {
            char name[32];
            std::snprintf(name, sizeof name, "mask_%06zu.pgm", i);
            const fs::path p = fs::path(a.out) / name;
            write_pgm(p, masks[i]);
            g_outputs.track(p);
        }
    }
    std::printf("wrote %zu %s masks to %s, mean fg-ratio %.4f\n", masks.size(), src.name().c_str(), a.out.c_str(),
                masks.empty() ? 0.0 : fg_ratio(all));
    return kExitOk;
}

// ---- train ----
int cmd_train(const ExperimentFlags& f) {
    g_stage = "train: config";
    const ExperimentConfig c = f.resolve();
    const auto mask_model = load_mask_model(c);
    g_stage = "train: reading data";
    const auto data = load_data(c.train_data, "training");
    std::vector<SyntheticScene> eval_set;
    if (c.model.train.eval_every > 0 && !c.eval_data.empty()) eval_set = load_data(c.eval_data, "evaluation");

    g_stage = "train";
    Model model(c.model);
    TrainOptions opt;
    opt.target = c.target;
    opt.source = c.source;
    opt.mask_model = mask_model ? &*mask_model : nullptr;
    opt.steps = c.steps;
    opt.eval_set = eval_set.empty() ? nullptr : &eval_set;
    const int total = default_steps(c.model, opt);
    log_line("training " + c.name + " (" + c.source.name() + ", " + std::to_string(total) + " steps, " +
             std::to_string(data.size()) + " scenes)");
    opt.on_log = [&](const TrainLogRow& r) {
        std::ostringstream os;
        os << "step " << r.step << "/" << total << " det " << r.det_loss << " omg " << r.omg_loss << " lr " << r.lr;
        if (r.map) os << " map " << *r.map;
        log_line(os.str());
    };
    const auto rows = train(model, data, opt);

    g_stage = "train: writing outputs";
    ensure_dir(c.output_dir);
    write_text(c.output_dir / (c.name + ".train.csv"), train_log_csv(rows));
    write_text(c.output_dir / (c.name + ".config.json"), c.to_json().dump(2) + "\n");
    const fs::path ckpt = checkpoint_path(c);
    ensure_dir(ckpt.parent_path());
    model.save(ckpt);
    g_outputs.track(ckpt);
    std::printf("checkpoint %s\n", ckpt.c_str());
    return kExitOk;
}

// ---- eval / profile ----
struct EvalArgs {
    ExperimentFlags flags;
    std::string detections;
    std::optional<double> min_map, max_mac_star;
};

EvalResult run_eval(const ExperimentConfig& c, bool keep_detections) {
    const fs::path ckpt = checkpoint_path(c);
    if (!fs::exists(ckpt)) throw ConfigError("checkpoint not found: " + ckpt.string());
    const Model model = Model::load(ckpt);
    const auto mask_model = load_mask_model(c);
    g_stage = "eval: reading data";
    const auto data = load_data(c.eval_data, "evaluation");
    g_stage = "eval";
    EvalOptions eo;
    eo.source = c.source;
    eo.exec = c.exec;
    eo.mask_model = mask_model ? &*mask_model : nullptr;
    eo.batch = c.eval_batch;
    eo.seed = c.seed;
    eo.keep_detections = keep_detections;
    log_line("evaluating " + c.name + " on " + std::to_string(data.size()) + " scenes");
    return evaluate(model, data, eo);
}

int cmd_eval(const EvalArgs& a) {
    g_stage = "eval: config";
    const ExperimentConfig c = a.flags.resolve();
    const EvalResult r = run_eval(c, !a.detections.empty());
    EvalOptions eo;
    eo.source = c.source;
    eo.exec = c.exec;
    g_stage = "eval: writing outputs";
    const fs::path out = c.output_dir / (c.name + ".eval.json");
    write_text(out, eval_json(c.name, eo, r).dump(2) + "\n");
    if (!a.detections.empty()) write_text(a.detections, detections_csv(r.detections));
    std::printf("%s: mAP %.4f  MAC* %.0f (omg %.0f, od %.0f)  fg %.4f  recall %.4f\n", c.name.c_str(), r.ap.map,
                r.report.total_mac_star, r.report.omg_mac_star, r.report.od_mac_star, r.fg_ratio, r.recall.overall());
    std::printf("report %s\n", out.c_str());
    if (a.min_map && !(r.ap.map >= *a.min_map)) {
        throw ThresholdFailure("mAP " + std::to_string(r.ap.map) + " below " + std::to_string(*a.min_map));
    }
    if (a.max_mac_star && !(r.report.total_mac_star <= *a.max_mac_star)) {
        throw ThresholdFailure("MAC* " + std::to_string(r.report.total_mac_star) + " above " + std::to_string(*a.max_mac_star));
    }
    return kExitOk;
}

int cmd_profile(const ExperimentFlags& f) {
    g_stage = "profile: config";
    const ExperimentConfig c = f.resolve();
    const EvalResult r = run_eval(c, false);
    g_stage = "profile: writing outputs";
    write_text(c.output_dir / (c.name + ".profile.csv"), r.report.to_csv());
    write_text(c.output_dir / (c.name + ".profile.json"), r.report.to_json() + "\n");
    std::printf("%-12s %14s %14s %8s %8s\n", "layer", "mac", "mac_star", "zeros", "by_mask");
    for (const auto& l : r.report.layers) {
        std::printf("%-12s %14.0f %14.1f %8.4f %8.4f\n", l.layer_id.c_str(), l.mac, l.mac_star, l.zero_fraction(),
                    l.input_elems > 0 ? l.zeros_by_mask / l.input_elems : 0.0);
    }
    return kExitOk;
}

// ---- report ----
struct ReportArgs {
    std::vector<std::string> runs;
    std::string out = "report.csv";
    std::string layers_out, recall_out;
};

std::string csv_num(const nlohmann::json& v) {
    if (v.is_null()) return "";
    std::ostringstream os;
    os.precision(10);
    os << v.get<double>();
    return os.str();
}

int cmd_report(const ReportArgs& a) {
    g_stage = "report";
    std::ostringstream table, layers, recall;
    table << "run,mode,mask_source,execution,images,map,mac_star_sum,mac_star_omg,mac_star_od,mac,mean_zero_fraction,"
             "zeros_by_mask_fraction,fg_ratio,instance_recall\n";
    layers << "run,layer_id,group,mac,mac_star,zero_fraction,mask_zero_fraction\n";
    recall << "run,bin,recall,recovered,total,fg_ratio\n";
    for (const auto& path : a.runs) {
        const nlohmann::json j = read_json(path);
        try {
            const std::string run = j.at("run").get<std::string>();
            table << run << ',' << j.at("mode").get<std::string>() << ',' << j.at("mask_source").get<std::string>()
                  << ',' << j.at("execution").get<std::string>() << ',' << j.at("images").get<std::size_t>() << ','
                  << csv_num(j.at("map")) << ',' << csv_num(j.at("mac_star").at("sum")) << ','
                  << csv_num(j.at("mac_star").at("omg")) << ',' << csv_num(j.at("mac_star").at("od")) << ','
                  << csv_num(j.at("mac")) << ',' << csv_num(j.at("mean_zero_fraction")) << ','
                  << csv_num(j.at("zeros_by_mask_fraction")) << ',' << csv_num(j.at("fg_ratio")) << ','
                  << csv_num(j.at("instance_recall").at("overall")) << '\n';
            for (const auto& l : j.at("layers")) {
                layers << run << ',' << l.at("layer_id").get<std::string>() << ',' << l.at("group").get<std::string>()
                       << ',' << csv_num(l.at("mac")) << ',' << csv_num(l.at("mac_star")) << ','
                       << csv_num(l.at("zero_fraction")) << ',' << csv_num(l.at("mask_zero_fraction")) << '\n';
            }
            for (const auto& b : j.at("instance_recall").at("bins")) {
                recall << run << ',' << b.at("bin").get<std::string>() << ',' << csv_num(b.at("recall")) << ','
                       << b.at("recovered").get<std::size_t>() << ',' << b.at("total").get<std::size_t>() << ','
                       << csv_num(j.at("fg_ratio")) << '\n';
            }
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("malformed run report " + path + ": " + e.what());
        }
    }
    write_text(a.out, table.str());
    if (!a.layers_out.empty()) write_text(a.layers_out, layers.str());
    if (!a.recall_out.empty()) write_text(a.recall_out, recall.str());
    std::printf("merged %zu runs into %s\n", a.runs.size(), a.out.c_str());
    return kExitOk;
}

// ---- equiv-check ----
struct EquivArgs {
    std::string checkpoint, masks = "gt";
    int images = 100;
    int batch = 10;
    std::uint64_t seed = 1;
    double fg = 0.3;
    double tolerance = 1e-5;
};

int cmd_equiv_check(const EquivArgs& a) {
    g_stage = "equiv-check: config";
    if (a.images < 1 || a.batch < 1) throw ConfigError("--images and --batch must be positive");
    if (!(a.fg >= 0.0 && a.fg <= 1.0)) throw ConfigError("--fg must be in [0, 1]");
    const Model model = a.checkpoint.empty() ? Model(ModelConfig{}) : Model::load(a.checkpoint);
    const ModelConfig& mc = model.config();
    SceneConfig sc;
    sc.hw = mc.image_hw;
    g_stage = "equiv-check";
    EquivReport total;
    for (int start = 0; start < a.images; start += a.batch) {
        const int n = std::min(a.batch, a.images - start);
        std::vector<SyntheticScene> scenes;
        std::vector<BinaryMask> ms;
        for (int i = 0; i < n; ++i) {
            const auto idx = static_cast<std::size_t>(start + i);
            scenes.push_back(generate_scene(sc, scene_seed(a.seed, idx)));
            const SyntheticScene& s = scenes.back();
            if (a.masks == "ones") ms.emplace_back(1, s.h(), s.w(), 1, 1);
            else if (a.masks == "zeros") ms.emplace_back(1, s.h(), s.w(), 1, 0);
            else if (a.masks == "gt") ms.push_back(dilate(gt_instance_mask(s), 5));
            else if (a.masks == "random") ms.push_back(random_mask(s.h(), s.w(), a.fg, mix_seed(a.seed, idx)));
            else throw ConfigError("unknown --masks '" + a.masks + "' (ones | zeros | gt | random)");
        }
        std::vector<const SyntheticScene*> ptrs;
        for (const auto& s : scenes) ptrs.push_back(&s);
        total.merge(equivalence_check(model, stack_images(ptrs), stack_masks(ms)));
    }
    std::printf("%-10s %12s %14s\n", "layer", "active", "max_abs_dev");
    for (const auto& l : total.layers) {
        std::printf("%-10s %5zu/%-6zu %14.3e\n", l.layer_id.c_str(), l.active_tiles, l.total_tiles, l.max_abs);
    }
    std::printf("images %zu  max layer deviation %.3e  max output deviation %.3e\n", total.images,
                total.max_layer_deviation, total.max_output_deviation);
    const double worst = std::max(total.max_layer_deviation, total.max_output_deviation);
    if (!(worst <= a.tolerance)) throw ThresholdFailure("deviation above " + std::to_string(a.tolerance));
    return kExitOk;
}

void apply_thread_env() {
    if (const char* t = std::getenv("OBJMASK_THREADS")) {
        char* end = nullptr;
        const long n = std::strtol(t, &end, 10);
        if (end == t || *end != '\0' || n < 1) throw ConfigError(std::string("OBJMASK_THREADS must be a positive integer, got '") + t + "'");
        omp_set_num_threads(static_cast<int>(n));
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Objectness-masked detection experiments"};
    app.require_subcommand(1);

    GenDataArgs gd;
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic scene dataset");
    gen->add_option("-o,--out", gd.out, "Output directory")->required();
    gen->add_option("-n,--count", gd.count, "Number of scenes");
    gen->add_option("--seed", gd.seed, "Base seed");
    gen->add_option("--hw", gd.scene.hw, "Image side");
    gen->add_option("--min-objects", gd.scene.min_objects);
    gen->add_option("--max-objects", gd.scene.max_objects);
    gen->add_option("--min-size", gd.scene.min_size);
    gen->add_option("--max-size", gd.scene.max_size);
    gen->add_option("--background", gd.backgrounds, "noise | gradient | texture (repeatable)");

    GenMasksArgs gm;
    auto* genm = app.add_subcommand("gen-masks", "Pre-generate objectness masks for a dataset");
    genm->add_option("-d,--data", gm.data, "Dataset directory")->required();
    genm->add_option("-o,--out", gm.out, "Output directory")->required();
    genm->add_option("-s,--source", gm.source, "gt_instance | gt_box | random(p) | spectral(th) | omg_pipeline");
    genm->add_option("--omg-checkpoint", gm.omg_checkpoint);
    genm->add_option("--seed", gm.seed);
    genm->add_flag("--pgm", gm.pgm, "Also write one PGM per scene");

    ExperimentFlags tf;
    auto* tr = app.add_subcommand("train", "Train a detector or an OMG subnet");
    tf.add(tr);

    EvalArgs ea;
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint and write the run report JSON");
    ea.flags.add(ev);
    ev->add_option("--detections", ea.detections, "Also write detections CSV here");
    ev->add_option("--min-map", ea.min_map, "Exit 3 if mAP is below this");
    ev->add_option("--max-mac-star", ea.max_mac_star, "Exit 3 if total MAC* is above this");

    ExperimentFlags pf;
    auto* pr = app.add_subcommand("profile", "Per-layer MAC / MAC* / zero accounting");
    pf.add(pr);

    ReportArgs ra;
    auto* rep = app.add_subcommand("report", "Merge run reports into comparison CSVs");
    rep->add_option("runs", ra.runs, "Run report JSON files");
    rep->add_option("-o,--out", ra.out, "Summary CSV");
    rep->add_option("--layers-out", ra.layers_out, "Per-layer zero-fraction CSV");
    rep->add_option("--recall-out", ra.recall_out, "Instance-recall-by-size CSV");

    EquivArgs eq;
    auto* eqc = app.add_subcommand("equiv-check", "Compare sparse and dense execution");
    eqc->add_option("--checkpoint", eq.checkpoint, "Model (default: freshly initialized)");
    eqc->add_option("--images", eq.images);
    eqc->add_option("--batch", eq.batch);
    eqc->add_option("--seed", eq.seed);
    eqc->add_option("--masks", eq.masks, "ones | zeros | gt | random");
    eqc->add_option("--fg", eq.fg, "Foreground probability of random masks");
    eqc->add_option("--tolerance", eq.tolerance);

    auto* defaults = app.add_subcommand("defaults", "Print the default experiment config");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        apply_thread_env();
        int rc = kExitOk;
        if (*gen) rc = cmd_gen_data(gd);
        else if (*genm) rc = cmd_gen_masks(gm);
        else if (*tr) rc = cmd_train(tf);
        else if (*ev) rc = cmd_eval(ea);
        else if (*pr) rc = cmd_profile(pf);
        else if (*rep) rc = cmd_report(ra);
        else if (*eqc) rc = cmd_equiv_check(eq);
        else if (*defaults) std::cout << ExperimentConfig{}.to_json().dump(2) << "\n";
        g_outputs.commit();
        return rc;
    } catch (const ThresholdFailure& e) {
        // Outputs stay: they document the failing run.
        g_outputs.commit();
        std::fprintf(stderr, "error [%s]: threshold not met: %s\n", g_stage.c_str(), e.what());
        return kExitThreshold;
    } catch (const ConfigError& e) {
        g_outputs.rollback();
        std::fprintf(stderr, "error [%s]: configuration: %s\n", g_stage.c_str(), e.what());
        return kExitConfig;
    } catch (const std::exception& e) {
        g_outputs.rollback();
        std::fprintf(stderr, "error [%s]: %s\n", g_stage.c_str(), e.what());
        return kExitRuntime;
    }
}
