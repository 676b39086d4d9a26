#pragma once

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "data.hpp"
#include "evaluation.hpp"
#include "explain.hpp"
#include "training.hpp"

namespace patchproto::cli {

namespace fs = std::filesystem;

// exit-code taxonomy: 0 success, 2 config error, 3 data/IO error, 4 numeric
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

// ---- key-value config files -------------------------------------------------

using KvConfig = std::map<std::string, std::string>;

inline KvConfig parse_kv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file: " + path);
    KvConfig kv;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        auto eq = line.find('=');
        if (eq == std::string::npos) {
            if (line.find_first_not_of(" \t\r") != std::string::npos)
                throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
            continue;
        }
        auto trim = [](std::string s) {
            auto b = s.find_first_not_of(" \t\r");
            auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError(path + ":" + std::to_string(lineno) + ": empty key");
        kv[key] = value;
    }
    return kv;
}

inline std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') { out.push_back(cur); cur.clear(); }
        else cur += c;
    }
    out.push_back(cur);
    return out;
}

inline double kv_double(const KvConfig& kv, const std::string& key, double dflt) {
    auto it = kv.find(key);
    if (it == kv.end()) return dflt;
    try { return std::stod(it->second); }
    catch (...) { throw ConfigError("config key " + key + ": bad number '" + it->second + "'"); }
}

inline long kv_long(const KvConfig& kv, const std::string& key, long dflt) {
    auto it = kv.find(key);
    if (it == kv.end()) return dflt;
    try { return std::stol(it->second); }
    catch (...) { throw ConfigError("config key " + key + ": bad integer '" + it->second + "'"); }
}

inline std::vector<int> kv_int_list(const KvConfig& kv, const std::string& key,
                                    std::vector<int> dflt) {
    auto it = kv.find(key);
    if (it == kv.end()) return dflt;
    std::vector<int> out;
    for (const auto& tok : split_commas(it->second)) {
        try { out.push_back(std::stoi(tok)); }
        catch (...) { throw ConfigError("config key " + key + ": bad integer '" + tok + "'"); }
    }
    return out;
}

inline SyntheticSpec synthetic_spec_from_kv(const KvConfig& kv) {
    SyntheticSpec spec;
    spec.image_size = static_cast<int>(kv_long(kv, "image_size", spec.image_size));
    if (kv.count("classes")) {
        spec.classes.clear();
        for (const auto& name : split_commas(kv.at("classes")))
            spec.classes.push_back({name, lesion_kind_from_name(name)});
    }
    auto lp = kv_int_list(kv, "lesions_per_image", {spec.lesions_min, spec.lesions_max});
    if (lp.size() != 2) throw ConfigError("lesions_per_image wants 'min,max'");
    spec.lesions_min = lp[0];
    spec.lesions_max = lp[1];
    if (kv.count("lesion_radius")) {
        auto lr = split_commas(kv.at("lesion_radius"));
        if (lr.size() != 2) throw ConfigError("lesion_radius wants 'min,max'");
        spec.radius_min = std::stod(lr[0]);
        spec.radius_max = std::stod(lr[1]);
    }
    spec.noise_sigma = kv_double(kv, "noise_sigma", spec.noise_sigma);
    spec.train_count = static_cast<int>(kv_long(kv, "train_count", spec.train_count));
    spec.val_count = static_cast<int>(kv_long(kv, "val_count", spec.val_count));
    spec.test_count = static_cast<int>(kv_long(kv, "test_count", spec.test_count));
    spec.seed = static_cast<std::uint64_t>(kv_long(kv, "seed", static_cast<long>(spec.seed)));
    return spec;
}

inline TrainConfig train_config_from_kv(const KvConfig& kv) {
    TrainConfig c;
    c.encoder.patch_size = static_cast<int>(kv_long(kv, "patch_size", c.encoder.patch_size));
    c.encoder.embed_dim = static_cast<int>(kv_long(kv, "embed_dim", c.encoder.embed_dim));
    c.encoder.depth = static_cast<int>(kv_long(kv, "depth", c.encoder.depth));
    c.encoder.heads = static_cast<int>(kv_long(kv, "heads", c.encoder.heads));
    c.encoder.mlp_ratio = kv_double(kv, "mlp_ratio", c.encoder.mlp_ratio);
    c.encoder.resolutions = kv_int_list(kv, "encoder_resolutions", c.encoder.resolutions);
    c.resolutions = kv_int_list(kv, "resolutions", c.encoder.resolutions);
    c.weights.lambda_a = kv_double(kv, "lambda_a", c.weights.lambda_a);
    c.weights.lambda_t = kv_double(kv, "lambda_t", c.weights.lambda_t);
    c.weights.lambda_koleo = kv_double(kv, "lambda_koleo", c.weights.lambda_koleo);
    c.weights.lambda_c = kv_double(kv, "lambda_c", c.weights.lambda_c);
    c.weights.eps = kv_double(kv, "eps", c.weights.eps);
    c.weights.warmup_fraction = kv_double(kv, "warmup_fraction", c.weights.warmup_fraction);
    c.reg_order = static_cast<int>(kv_long(kv, "reg_order", c.reg_order));
    c.epochs_per_resolution =
        static_cast<int>(kv_long(kv, "epochs_per_resolution", c.epochs_per_resolution));
    c.finetune_epochs = static_cast<int>(kv_long(kv, "finetune_epochs", c.finetune_epochs));
    c.batch_size = static_cast<int>(kv_long(kv, "batch_size", c.batch_size));
    c.learning_rate = kv_double(kv, "learning_rate", c.learning_rate);
    c.weight_decay = kv_double(kv, "weight_decay", c.weight_decay);
    c.seed = static_cast<std::uint64_t>(kv_long(kv, "seed", static_cast<long>(c.seed)));
    return c;
}

// ---- run manifest -----------------------------------------------------------

struct ManifestWriter {
    fs::path dir;
    nlohmann::json manifest;
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

    void finish(int exit_status) {
        if (dir.empty()) return;
        std::error_code ec;
        fs::create_directories(dir, ec);
        if (ec) return;
        auto elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start);
        manifest["wall_clock_sec"] = elapsed.count();
        manifest["exit_status"] = exit_status;
        std::ofstream out(dir / "run_manifest.json");
        if (out) out << manifest.dump(2) << "\n";
    }
};

// ---- detection harness shared by eval-detect and the acceptance suite -------

struct DetectionReport {
    std::vector<PRPoint> points;
    double ap = 0.0;
    int prototype = 0;
    int cases = 0;
};

// lesion class: the class whose samples carry the most ground-truth boxes
inline int most_annotated_class(const Dataset& ds) {
    std::vector<long> box_count(static_cast<std::size_t>(ds.num_classes), 0);
    for (const auto& s : ds.samples)
        box_count[static_cast<std::size_t>(s.label)] += static_cast<long>(s.boxes.size());
    return static_cast<int>(std::max_element(box_count.begin(), box_count.end()) -
                            box_count.begin());
}

inline int auto_lesion_prototype(const Model& m, const Dataset& ds) {
    int lesion_class = most_annotated_class(ds);
    auto ranked = relevant_prototypes(m.classifier, lesion_class, 0.0f);
    if (ranked.empty()) throw DataError("classifier has no positive weight for the lesion class");
    return ranked[0].first;
}

/// only_label >= 0 restricts the protocol to annotated images of one class,
/// mirroring a per-lesion evaluation (the prototype under test is judged
/// against the lesion type it scores for, not against other classes' boxes)
inline std::vector<DetectionCase> build_detection_cases(const Model& m, const Dataset& ds,
                                                        int prototype, double tau,
                                                        int resolution, int only_label = -1) {
    std::vector<DetectionCase> cases;
    for (const auto& s : ds.samples) {
        if (s.boxes.empty()) continue;  // only annotated images enter the protocol
        if (only_label >= 0 && s.label != only_label) continue;
        int img_h = s.image.shape[0], img_w = s.image.shape[1];
        Array input = img_h == resolution ? s.image
                                          : bilinear_resize(s.image, resolution, resolution);
        ProtoGrid pg = model_proto_grid(m, input);
        ActivationMap map = activation_map(pg, prototype, img_w, img_h);
        DetectionCase c;
        c.regions = regions_from_activation(map.raster, tau);
        c.gt = s.boxes;
        c.img_w = img_w;
        c.img_h = img_h;
        cases.push_back(std::move(c));
    }
    if (cases.empty()) throw DataError("no annotated samples for detection evaluation");
    return cases;
}

inline DetectionReport detection_report(const std::vector<DetectionCase>& cases,
                                        const std::vector<double>& scales, int prototype) {
    DetectionReport r;
    r.points = pr_sweep(cases, scales);
    r.ap = average_precision(r.points);
    r.prototype = prototype;
    r.cases = static_cast<int>(cases.size());
    return r;
}

// ---- subcommands -------------------------------------------------------------

inline int dispatch(const std::vector<std::string>& args) {
    CLI::App app{"prototype patch-transformer pipeline"};
    app.require_subcommand(1);

    std::string spec_file, config_file, data_dir, out_path, init_ckpt, ckpt_path, image_path;
    std::string prototype_arg = "auto", log_file, maps_dir, csv_path;
    long seed_flag = -1;
    int topk = 5, bootstrap_replicates = 1000;
    double tau = 0.5;

    auto* synth = app.add_subcommand("synth-data", "generate a synthetic lesion dataset");
    synth->add_option("--spec", spec_file, "key=value spec file");
    synth->add_option("--out", out_path, "output dataset directory")->required();
    synth->add_option("--seed", seed_flag, "override spec seed");

    auto* pre = app.add_subcommand("pretrain", "multi-resolution self-supervised pre-training");
    pre->add_option("--config", config_file, "key=value training config");
    pre->add_option("--data", data_dir, "dataset root (expects train/ inside)")->required();
    pre->add_option("--out", out_path, "output directory")->required();
    pre->add_option("--seed", seed_flag, "override config seed");
    pre->add_option("--log", log_file, "JSON-lines training log");

    auto* fine = app.add_subcommand("finetune", "supervised fine-tuning from a checkpoint");
    fine->add_option("--config", config_file, "key=value training config");
    fine->add_option("--data", data_dir, "dataset root (expects train/ and val/)")->required();
    fine->add_option("--init", init_ckpt, "pre-trained checkpoint")->required();
    fine->add_option("--out", out_path, "output directory")->required();
    fine->add_option("--seed", seed_flag, "override config seed");
    fine->add_option("--log", log_file, "JSON-lines training log");

    auto* expl = app.add_subcommand("explain", "scoring sheet and prototype heatmaps");
    expl->add_option("--ckpt", ckpt_path, "model checkpoint")->required();
    expl->add_option("--image", image_path, "grayscale PNG input")->required();
    expl->add_option("--topk", topk, "number of prototypes to render");
    expl->add_option("--out", out_path, "output directory")->required();

    auto* det = app.add_subcommand("eval-detect", "activation-map detection protocol");
    det->add_option("--ckpt", ckpt_path, "model checkpoint")->required();
    det->add_option("--data", data_dir, "split directory with boxes.jsonl")->required();
    det->add_option("--prototype", prototype_arg, "prototype id or 'auto'");
    det->add_option("--tau", tau, "relative binarization threshold");
    det->add_option("--out", out_path, "report JSON path")->required();
    det->add_option("--csv", csv_path, "optional CSV of PR points");
    det->add_option("--maps", maps_dir,
                    "read 16-bit grayscale activation maps from this directory instead of "
                    "running the model");
    det->add_option("--seed", seed_flag, "unused; accepted for uniformity");

    auto* cls = app.add_subcommand("eval-class", "classification metrics with bootstrap CIs");
    cls->add_option("--ckpt", ckpt_path, "model checkpoint")->required();
    cls->add_option("--data", data_dir, "split directory")->required();
    cls->add_option("--bootstrap", bootstrap_replicates, "bootstrap replicate count");
    cls->add_option("--out", out_path, "report JSON path")->required();
    cls->add_option("--seed", seed_flag, "bootstrap seed");

    std::vector<std::string> argv_mut = args;
    try {
        std::vector<const char*> argv;
        argv.push_back("patchproto");
        for (const auto& a : argv_mut) argv.push_back(a.c_str());
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    ManifestWriter mw;
    auto out_dir_of = [](const std::string& p, bool is_file) {
        fs::path path(p);
        return is_file ? (path.has_parent_path() ? path.parent_path() : fs::path(".")) : path;
    };
    nlohmann::json cmd_args = nlohmann::json::array();
    for (const auto& a : args) cmd_args.push_back(a);
    mw.manifest["command"] = cmd_args;

    int status = kExitOk;
    try {
        if (synth->parsed()) {
            mw.dir = out_dir_of(out_path, false);
            KvConfig kv = spec_file.empty() ? KvConfig{} : parse_kv_file(spec_file);
            SyntheticSpec spec = synthetic_spec_from_kv(kv);
            if (seed_flag >= 0) spec.seed = static_cast<std::uint64_t>(seed_flag);
            mw.manifest["seed"] = spec.seed;
            mw.manifest["config"] = {{"image_size", spec.image_size},
                                     {"noise_sigma", spec.noise_sigma},
                                     {"train_count", spec.train_count},
                                     {"val_count", spec.val_count},
                                     {"test_count", spec.test_count}};
            generate_synthetic_dataset(spec, out_path);
            mw.manifest["artifacts"] = {out_path};
        } else if (pre->parsed()) {
            mw.dir = out_dir_of(out_path, false);
            KvConfig kv = config_file.empty() ? KvConfig{} : parse_kv_file(config_file);
            TrainConfig cfg = train_config_from_kv(kv);
            if (seed_flag >= 0) cfg.seed = static_cast<std::uint64_t>(seed_flag);
            cfg.validate();
            mw.manifest["seed"] = cfg.seed;
            mw.manifest["config"] = train_config_json(cfg);
            Dataset train = load_dataset(fs::path(data_dir) / "train");
            TrainLog log;
            Checkpoint ckpt = pretrain(cfg, train, &log);
            fs::create_directories(out_path);
            fs::path ckpt_file = fs::path(out_path) / "pretrain.ckpt";
            save_checkpoint(ckpt, ckpt_file);
            if (!log_file.empty()) log.write(log_file);
            else log.write(fs::path(out_path) / "pretrain_log.jsonl");
            mw.manifest["artifacts"] = {ckpt_file.string()};
        } else if (fine->parsed()) {
            mw.dir = out_dir_of(out_path, false);
            KvConfig kv = config_file.empty() ? KvConfig{} : parse_kv_file(config_file);
            TrainConfig cfg = train_config_from_kv(kv);
            if (seed_flag >= 0) cfg.seed = static_cast<std::uint64_t>(seed_flag);
            cfg.validate();
            mw.manifest["seed"] = cfg.seed;
            mw.manifest["config"] = train_config_json(cfg);
            Dataset train = load_dataset(fs::path(data_dir) / "train");
            Dataset val = load_dataset(fs::path(data_dir) / "val");
            Checkpoint start = load_checkpoint(init_ckpt);
            TrainLog log;
            Checkpoint best = finetune(cfg, train, val, start, &log);
            fs::create_directories(out_path);
            fs::path ckpt_file = fs::path(out_path) / "finetune.ckpt";
            save_checkpoint(best, ckpt_file);
            if (!log_file.empty()) log.write(log_file);
            else log.write(fs::path(out_path) / "finetune_log.jsonl");
            mw.manifest["artifacts"] = {ckpt_file.string()};
        } else if (expl->parsed()) {
            mw.dir = out_dir_of(out_path, false);
            Model m = model_from_checkpoint(load_checkpoint(ckpt_path));
            Array image = read_png_gray(image_path);
            fs::create_directories(out_path);
            ScoringSheet sheet = scoring_sheet(m, image);
            {
                std::ofstream out(fs::path(out_path) / "scoring_sheet.json");
                if (!out) throw IoError("cannot write scoring sheet");
                out << scoring_sheet_json(sheet).dump(2) << "\n";
            }
            auto top = topk_prototypes(m, image, topk);
            ProtoGrid pg = model_proto_grid(m, image);
            nlohmann::json artifacts = {(fs::path(out_path) / "scoring_sheet.json").string()};
            for (const auto& pa : top) {
                ActivationMap map =
                    activation_map(pg, pa.id, image.shape[1], image.shape[0]);
                fs::path png = fs::path(out_path) /
                               ("heatmap_proto" + std::to_string(pa.id) + ".png");
                render_heatmap(image, map, png.string());
                artifacts.push_back(png.string());
            }
            mw.manifest["artifacts"] = artifacts;
            mw.manifest["seed"] = 0;
        } else if (det->parsed()) {
            mw.dir = out_dir_of(out_path, true);
            Model m = model_from_checkpoint(load_checkpoint(ckpt_path));
            Dataset ds = load_dataset(data_dir);
            int proto_id;
            if (prototype_arg == "auto") proto_id = auto_lesion_prototype(m, ds);
            else {
                try { proto_id = std::stoi(prototype_arg); }
                catch (...) { throw ConfigError("--prototype wants an id or 'auto'"); }
            }
            std::vector<DetectionCase> cases;
            if (!maps_dir.empty()) {
                for (const auto& s : ds.samples) {
                    if (s.boxes.empty()) continue;
                    fs::path map_path = fs::path(maps_dir) / s.path;
                    Array raster = read_png_gray(map_path.string());
                    DetectionCase c;
                    c.regions = regions_from_activation(raster, tau);
                    c.gt = s.boxes;
                    c.img_h = raster.shape[0];
                    c.img_w = raster.shape[1];
                    cases.push_back(std::move(c));
                }
                if (cases.empty()) throw DataError("no annotated samples in " + data_dir);
            } else {
                int resolution = m.config.native_resolution();
                int only = prototype_arg == "auto" ? most_annotated_class(ds) : -1;
                cases = build_detection_cases(m, ds, proto_id, tau, resolution, only);
            }
            auto scales = default_scales();
            DetectionReport rep = detection_report(cases, scales, proto_id);
            nlohmann::json j;
            j["tau"] = tau;
            j["prototype"] = proto_id;
            j["scales"] = scales;
            j["cases"] = rep.cases;
            nlohmann::json pts = nlohmann::json::array();
            for (const auto& p : rep.points)
                pts.push_back({{"scale", p.scale},
                               {"precision", p.precision},
                               {"recall", p.recall},
                               {"TP", p.tp},
                               {"FP", p.fp},
                               {"FN", p.fn}});
            j["points"] = pts;
            j["AP"] = rep.ap;
            j["config"] = m.classifier.class_names;
            {
                std::ofstream out(out_path);
                if (!out) throw IoError("cannot write report: " + out_path);
                out << j.dump(2) << "\n";
            }
            if (!csv_path.empty()) {
                std::ofstream csv(csv_path);
                if (!csv) throw IoError("cannot write CSV: " + csv_path);
                csv << "scale,precision,recall,tp,fp,fn\n";
                for (const auto& p : rep.points)
                    csv << p.scale << "," << p.precision << "," << p.recall << "," << p.tp
                        << "," << p.fp << "," << p.fn << "\n";
            }
            mw.manifest["artifacts"] = {out_path};
            mw.manifest["seed"] = seed_flag < 0 ? 0 : seed_flag;
        } else if (cls->parsed()) {
            mw.dir = out_dir_of(out_path, true);
            Model m = model_from_checkpoint(load_checkpoint(ckpt_path));
            Dataset ds = load_dataset(data_dir);
            std::uint64_t seed = seed_flag < 0 ? 0 : static_cast<std::uint64_t>(seed_flag);
            mw.manifest["seed"] = seed;
            int resolution = m.config.native_resolution();
            std::vector<int> y_true, y_pred;
            std::vector<std::vector<double>> probs;
            for (const auto& s : ds.samples) {
                Array img = s.image.shape[0] == resolution
                                ? s.image
                                : bilinear_resize(s.image, resolution, resolution);
                auto sc = model_scores(m, img);
                y_true.push_back(s.label);
                y_pred.push_back(argmax_index(sc));
                probs.push_back(softmax_probs(sc));
            }
            ClassificationMetrics point = classification_metrics(y_true, y_pred, probs);
            auto ci = [&](auto pick) {
                return bootstrap_ci(
                    [&](const std::vector<std::size_t>& idx) {
                        std::vector<int> t, p;
                        std::vector<std::vector<double>> s;
                        for (std::size_t i : idx) {
                            t.push_back(y_true[i]);
                            p.push_back(y_pred[i]);
                            s.push_back(probs[i]);
                        }
                        return pick(classification_metrics(t, p, s));
                    },
                    y_true.size(), bootstrap_replicates, seed);
            };
            auto bacc_ci = ci([](const ClassificationMetrics& m2) { return m2.bacc; });
            auto f1_ci = ci([](const ClassificationMetrics& m2) { return m2.f1_macro; });
            auto auc_ci = ci([](const ClassificationMetrics& m2) { return m2.auc_ovr; });
            nlohmann::json j;
            j["BAcc"] = {{"point", point.bacc}, {"low", bacc_ci.low}, {"high", bacc_ci.high}};
            j["F1_macro"] = {{"point", point.f1_macro}, {"low", f1_ci.low}, {"high", f1_ci.high}};
            j["AUC_ovr"] = {{"point", point.auc_ovr}, {"low", auc_ci.low}, {"high", auc_ci.high}};
            j["auc_skipped_classes"] = point.auc_skipped_classes;
            j["replicates"] = bootstrap_replicates;
            j["samples"] = y_true.size();
            std::ofstream out(out_path);
            if (!out) throw IoError("cannot write report: " + out_path);
            out << j.dump(2) << "\n";
            mw.manifest["artifacts"] = {out_path};
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        status = kExitConfig;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        status = kExitNumeric;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        status = kExitData;
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        status = kExitData;
    } catch (const ShapeError& e) {
        std::cerr << "shape error: " << e.what() << "\n";
        status = kExitData;
    }
    mw.finish(status);
    return status;
}

inline int dispatch(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return dispatch(args);
}

}  // namespace patchproto::cli
