#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "patchproto/cli.hpp"

#include "json.hpp"

namespace fs = std::filesystem;
using namespace patchproto;

namespace {

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / ("patchproto_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    REQUIRE(out.good());
    out << text;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

nlohmann::json slurp_json(const fs::path& path) { return nlohmann::json::parse(slurp(path)); }

std::string tiny_data_spec(int train, int val, int test) {
    std::ostringstream ss;
    ss << "image_size = 16\n"
       << "classes = normal,blob\n"
       << "lesions_per_image = 1,2\n"
       << "lesion_radius = 1.5,2.5\n"
       << "noise_sigma = 0.05\n"
       << "train_count = " << train << "\n"
       << "val_count = " << val << "\n"
       << "test_count = " << test << "\n"
       << "seed = 7\n";
    return ss.str();
}

std::string tiny_train_config() {
    return "patch_size = 8\n"
           "embed_dim = 8\n"
           "depth = 1\n"
           "heads = 2\n"
           "mlp_ratio = 1.0\n"
           "encoder_resolutions = 16\n"
           "resolutions = 16\n"
           "epochs_per_resolution = 1\n"
           "finetune_epochs = 1\n"
           "batch_size = 2\n"
           "learning_rate = 0.001\n"
           "seed = 7\n";
}

int run(std::initializer_list<std::string> args) {
    return cli::dispatch(std::vector<std::string>(args));
}

}  // namespace

TEST_CASE("argument errors exit with the config code") {
    CHECK(run({"no-such-command"}) == cli::kExitConfig);
    CHECK(run({"synth-data"}) == cli::kExitConfig);  // missing required --out
    CHECK(run({"pretrain", "--data", "x", "--out", "y", "--bogus-flag"}) == cli::kExitConfig);
    CHECK(run({}) == cli::kExitConfig);
}

TEST_CASE("full pipeline via the CLI at tiny scale") {
    fs::path root = fresh_dir("pipeline");
    fs::path data = root / "data";
    fs::path spec = root / "spec.cfg";
    write_file(spec, tiny_data_spec(8, 4, 4));

    CHECK(run({"synth-data", "--spec", spec.string(), "--out", data.string()}) == cli::kExitOk);
    for (const char* split : {"train", "val", "test"}) {
        CHECK(fs::exists(data / split / "labels.jsonl"));
        CHECK(fs::exists(data / split / "boxes.jsonl"));
    }
    nlohmann::json synth_manifest = slurp_json(data / "run_manifest.json");
    CHECK(synth_manifest["exit_status"] == 0);
    CHECK(synth_manifest["seed"] == 7);
    CHECK(synth_manifest["wall_clock_sec"].get<double>() >= 0.0);

    fs::path cfg = root / "train.cfg";
    write_file(cfg, tiny_train_config());
    fs::path pre_out = root / "pre";
    CHECK(run({"pretrain", "--config", cfg.string(), "--data", data.string(), "--out",
               pre_out.string()}) == cli::kExitOk);
    CHECK(fs::exists(pre_out / "pretrain.ckpt"));
    CHECK(fs::exists(pre_out / "pretrain_log.jsonl"));
    CHECK(slurp_json(pre_out / "run_manifest.json")["exit_status"] == 0);

    fs::path fine_out = root / "fine";
    CHECK(run({"finetune", "--config", cfg.string(), "--data", data.string(), "--init",
               (pre_out / "pretrain.ckpt").string(), "--out", fine_out.string()}) ==
          cli::kExitOk);
    fs::path ckpt = fine_out / "finetune.ckpt";
    CHECK(fs::exists(ckpt));
    CHECK(fs::exists(fine_out / "finetune_log.jsonl"));

    // explain: scoring sheet plus one heatmap per requested prototype
    Dataset train = load_dataset(data / "train");
    fs::path expl_out = root / "explain";
    fs::path image = data / "train" / train.samples[0].path;
    CHECK(run({"explain", "--ckpt", ckpt.string(), "--image", image.string(), "--topk", "2",
               "--out", expl_out.string()}) == cli::kExitOk);
    nlohmann::json sheet = slurp_json(expl_out / "scoring_sheet.json");
    CHECK(sheet.contains("prediction"));
    CHECK(sheet.contains("classes"));
    CHECK(sheet.contains("prototypes"));
    int heatmaps = 0;
    for (const auto& entry : fs::directory_iterator(expl_out)) {
        std::string name = entry.path().filename().string();
        if (name.rfind("heatmap_proto", 0) == 0) ++heatmaps;
    }
    CHECK(heatmaps == 2);

    // eval-detect: 99 PR points, CSV mirrors them
    fs::path det_report = root / "detect.json";
    fs::path det_csv = root / "detect.csv";
    CHECK(run({"eval-detect", "--ckpt", ckpt.string(), "--data", (data / "test").string(),
               "--out", det_report.string(), "--csv", det_csv.string()}) == cli::kExitOk);
    nlohmann::json det = slurp_json(det_report);
    CHECK(det["points"].size() == 99);
    CHECK(det["AP"].get<double>() >= 0.0);
    CHECK(det["AP"].get<double>() <= 1.0);
    CHECK(det["cases"].get<int>() >= 1);
    CHECK(det["tau"].get<double>() == doctest::Approx(0.5));
    std::string csv = slurp(det_csv);
    CHECK(csv.rfind("scale,precision,recall,tp,fp,fn\n", 0) == 0);

    // eval-class: point estimates with CI bounds
    fs::path cls_report = root / "class.json";
    CHECK(run({"eval-class", "--ckpt", ckpt.string(), "--data", (data / "test").string(),
               "--bootstrap", "50", "--out", cls_report.string()}) == cli::kExitOk);
    nlohmann::json cm = slurp_json(cls_report);
    for (const char* key : {"BAcc", "F1_macro", "AUC_ovr"}) {
        CHECK(cm[key].contains("point"));
        CHECK(cm[key]["low"].get<double>() <= cm[key]["high"].get<double>());
    }
    CHECK(cm["replicates"] == 50);
    CHECK(cm["samples"] == 4);
}

TEST_CASE("data and config failures map to their exit codes and still write manifests") {
    fs::path root = fresh_dir("failures");

    fs::path out = root / "pre";
    CHECK(run({"pretrain", "--data", (root / "missing").string(), "--out", out.string()}) ==
          cli::kExitData);
    nlohmann::json mf = slurp_json(out / "run_manifest.json");
    CHECK(mf["exit_status"] == cli::kExitData);

    fs::path bad_cfg = root / "bad.cfg";
    write_file(bad_cfg, "batch_size = 1\n");
    fs::path out2 = root / "pre2";
    CHECK(run({"pretrain", "--config", bad_cfg.string(), "--data", root.string(), "--out",
               out2.string()}) == cli::kExitConfig);
    CHECK(slurp_json(out2 / "run_manifest.json")["exit_status"] == cli::kExitConfig);

    // a checkpoint that is not a checkpoint
    fs::path junk = root / "junk.ckpt";
    write_file(junk, "not a checkpoint\n");
    fs::path rep = root / "rep.json";
    CHECK(run({"eval-class", "--ckpt", junk.string(), "--data", root.string(), "--out",
               rep.string()}) == cli::kExitData);

    // malformed --prototype value
    CHECK(run({"eval-detect", "--ckpt", junk.string(), "--data", root.string(), "--prototype",
               "banana", "--out", rep.string()}) == cli::kExitData);  // ckpt read fails first
}

TEST_CASE("synth-data is reproducible and --seed overrides the spec") {
    fs::path root = fresh_dir("repro");
    fs::path spec = root / "spec.cfg";
    write_file(spec, tiny_data_spec(4, 2, 2));

    fs::path a = root / "a", b = root / "b", c = root / "c";
    CHECK(run({"synth-data", "--spec", spec.string(), "--out", a.string()}) == cli::kExitOk);
    CHECK(run({"synth-data", "--spec", spec.string(), "--out", b.string()}) == cli::kExitOk);
    CHECK(run({"synth-data", "--spec", spec.string(), "--out", c.string(), "--seed", "11"}) ==
          cli::kExitOk);

    for (const char* split : {"train", "val", "test"}) {
        CHECK(slurp(a / split / "labels.jsonl") == slurp(b / split / "labels.jsonl"));
        Dataset da = load_dataset(a / split);
        Dataset db = load_dataset(b / split);
        Dataset dc = load_dataset(c / split);
        REQUIRE(da.samples.size() == db.samples.size());
        for (std::size_t i = 0; i < da.samples.size(); ++i)
            CHECK(da.samples[i].image.data == db.samples[i].image.data);
        bool any_diff = false;
        for (std::size_t i = 0; i < da.samples.size(); ++i)
            if (da.samples[i].image.data != dc.samples[i].image.data) any_diff = true;
        CHECK(any_diff);
    }
    CHECK(slurp_json(c / "run_manifest.json")["seed"] == 11);
}

TEST_CASE("installed binary reports parse failures through its process exit code") {
#ifdef PATCHPROTO_CLI_PATH
    std::string cmd = std::string("\"") + PATCHPROTO_CLI_PATH + "\" no-such-command 2>/dev/null";
    int rc = std::system(cmd.c_str());
    REQUIRE(rc != -1);
    CHECK(WEXITSTATUS(rc) == cli::kExitConfig);

    cmd = std::string("\"") + PATCHPROTO_CLI_PATH + "\" --help >/dev/null 2>&1";
    rc = std::system(cmd.c_str());
    REQUIRE(rc != -1);
    CHECK(WEXITSTATUS(rc) == cli::kExitOk);
#else
    MESSAGE("PATCHPROTO_CLI_PATH not defined; skipping subprocess check");
#endif
}
