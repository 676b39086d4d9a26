// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure.  The expensive end-to-end run is shared across criteria 6-8 and 10.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <patchproto/cli.hpp>

#include "test_util.hpp"

using namespace patchproto;
namespace fs = std::filesystem;
using clk = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report(int n, bool ok, const std::string& desc, const std::string& detail = "") {
    std::printf("criterion %2d: %s  %s%s%s\n", n, ok ? "PASS" : "FAIL", desc.c_str(),
                detail.empty() ? "" : "  -- ", detail.c_str());
    std::fflush(stdout);
    if (!ok) ++g_failures;
}

double seconds_since(clk::time_point t0) {
    return std::chrono::duration<double>(clk::now() - t0).count();
}

// ---- criterion 1: finite-difference gradient suite ---------------------------

bool gradient_suite(std::string& detail) {
    using testutil::check_gradients;
    using testutil::random_array;
    constexpr double kEps = 1e-8;
    const int L = 9, D = 4, B = 4, K = 3;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::mt19937_64 rng(seed);
        std::map<std::string, Array> grids = {{"z1", random_array({L, D}, rng, -2.0, 2.0)},
                                              {"z2", random_array({L, D}, rng, -2.0, 2.0)}};
        auto align = [&](DiffGraph& g, const std::map<std::string, NodeId>& in) {
            NodeId p1 = g.softmax(in.at("z1"), 1);
            NodeId p2 = g.softmax(in.at("z2"), 1);
            return build_alignment_loss(g, p1, p2, kEps);
        };
        auto r = check_gradients(align, grids);
        if (!r.ok) { detail = "alignment: " + r.detail; return false; }

        std::map<std::string, Array> pres = {{"p", random_array({B, D}, rng, 0.05, 0.95)}};
        auto tanh_fn = [&](DiffGraph& g, const std::map<std::string, NodeId>& in) {
            return build_tanh_loss(g, in.at("p"), kEps);
        };
        r = check_gradients(tanh_fn, pres);
        if (!r.ok) { detail = "tanh: " + r.detail; return false; }

        std::map<std::string, Array> vecs;
        for (int i = 0; i < B; ++i)
            vecs["v" + std::to_string(i)] = random_array({D}, rng, -1.0, 1.0);
        auto koleo = [&](DiffGraph& g, const std::map<std::string, NodeId>& in) {
            std::vector<NodeId> vs;
            for (int i = 0; i < B; ++i)
                vs.push_back(build_l2_normalize(g, in.at("v" + std::to_string(i))));
            return build_koleo_loss(g, vs, kEps);
        };
        r = check_gradients(koleo, vecs);
        if (!r.ok) { detail = "koleo: " + r.detail; return false; }

        std::map<std::string, Array> sc = {{"s", random_array({K}, rng, -2.0, 2.0)}};
        auto nll = [&](DiffGraph& g, const std::map<std::string, NodeId>& in) {
            return build_nll(g, in.at("s"), static_cast<int>(seed) % K);
        };
        r = check_gradients(nll, sc);
        if (!r.ok) { detail = "nll: " + r.detail; return false; }

        for (int order : {2, 4}) {
            std::map<std::string, Array> cls = {{"p", random_array({1, D}, rng, 0.05, 0.95)},
                                                {"w", random_array({D, K}, rng, 0.0, 1.0)}};
            auto score_fn = [&](DiffGraph& g, const std::map<std::string, NodeId>& in) {
                return g.sum_all(build_score(g, in.at("p"), in.at("w"), order));
            };
            r = check_gradients(score_fn, cls);
            if (!r.ok) { detail = "score n=" + std::to_string(order) + ": " + r.detail; return false; }
        }

        // channel softmax and presence pooling (subgradient at the argmax)
        std::map<std::string, Array> feat = {{"z", random_array({L, D}, rng, -1.5, 1.5)},
                                             {"u", random_array({D}, rng, -1.0, 1.0)}};
        auto pool = [&](DiffGraph& g, const std::map<std::string, NodeId>& in) {
            NodeId proto = g.softmax(in.at("z"), 1);
            NodeId presence = g.max_reduce(proto, 0);
            return g.sum_all(g.mul(presence, in.at("u")));
        };
        r = check_gradients(pool, feat);
        if (!r.ok) { detail = "presence_pool: " + r.detail; return false; }

        // positional-embedding resize: constant interpolation matrix times table
        const int g0 = 3, g1 = 5;
        Array M = bilinear_matrix(g0, g0, g1, g1);
        std::map<std::string, Array> pe = {{"table", random_array({g0 * g0, D}, rng, -1.0, 1.0)},
                                           {"u", random_array({g1 * g1, D}, rng, -1.0, 1.0)}};
        auto resize = [&](DiffGraph& g, const std::map<std::string, NodeId>& in) {
            NodeId out = g.matmul(g.constant(M), in.at("table"));
            return g.sum_all(g.mul(out, in.at("u")));
        };
        r = check_gradients(resize, pe);
        if (!r.ok) { detail = "pe_resize: " + r.detail; return false; }
    }
    return true;
}

// ---- criterion 2: loss identities ---------------------------------------------

bool loss_identities(std::string& detail) {
    constexpr double kEps = 1e-8;
    ProtoGrid hot{2, 3, 4, Array({2, 3, 4})};
    for (int l = 0; l < 6; ++l) hot.values.data[l * 4 + 2] = 1.0f;
    if (std::abs(alignment_loss(hot, hot, kEps)) >= 1e-6) {
        detail = "one-hot self-alignment not ~0";
        return false;
    }
    Array dead({3, 2});
    if (std::abs(tanh_loss(dead, kEps) + std::log(kEps)) >= 1e-6) {
        detail = "dead-prototype tanh value off";
        return false;
    }
    Array e({3}, {1.0f, 0.0f, 0.0f});
    Array ne({3}, {-1.0f, 0.0f, 0.0f});
    if (std::abs(koleo_loss({e, ne}, kEps) + std::log(2.0)) >= 1e-6) {
        detail = "antipodal KoLeo != -log 2";
        return false;
    }
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 2.0);
    for (int t = 0; t < 50; ++t) {
        double a = u(rng), tt = u(rng), k = u(rng), c = u(rng), prog = u(rng) / 2.0;
        LossWeights w;
        LossBreakdown pre = pretrain_objective(a, tt, k, w, prog);
        double expect = w.effective_lambda_a(prog) * a + w.lambda_t * tt + w.lambda_koleo * k;
        if (std::abs(pre.total - expect) >= 1e-6) { detail = "pretrain recombination"; return false; }
        LossBreakdown fin = finetune_objective(a, tt, k, c, w);
        expect = w.lambda_a * a + w.lambda_t * tt + w.lambda_koleo * k + w.lambda_c * c;
        if (std::abs(fin.total - expect) >= 1e-6) { detail = "finetune recombination"; return false; }
    }
    return true;
}

// ---- criterion 3: detection-harness oracle ------------------------------------

Box random_box(std::mt19937_64& rng, int extent) {
    std::uniform_int_distribution<int> pos(0, extent - 2);
    Box b;
    b.x_min = pos(rng);
    b.y_min = pos(rng);
    std::uniform_int_distribution<int> len(1, extent - 1);
    b.x_max = std::min(extent, b.x_min + len(rng));
    b.y_max = std::min(extent, b.y_min + len(rng));
    return b;
}

bool detection_oracle(std::string& detail) {
    // activation exactly covering ground truth: PR = (1,1) at scale 1, AP = 1
    Array map({16, 16});
    std::vector<Box> gt = {Box{2, 2, 5, 6}, Box{9, 10, 13, 14}};
    for (const auto& b : gt)
        for (int y = b.y_min; y < b.y_max; ++y)
            for (int x = b.x_min; x < b.x_max; ++x) map.data[y * 16 + x] = 1.0f;
    DetectionCase c;
    c.regions = regions_from_activation(map, 0.5);
    c.gt = gt;
    c.img_w = c.img_h = 16;
    auto pt = pr_sweep({c}, {1.0});
    if (pt[0].precision != 1.0 || pt[0].recall != 1.0) { detail = "exact cover PR != 1"; return false; }
    if (average_precision(pr_sweep({c}, default_scales())) != 1.0) { detail = "exact cover AP != 1"; return false; }

    DetectionCase empty = c;
    empty.regions.clear();
    if (average_precision(pr_sweep({empty}, default_scales())) != 0.0) { detail = "empty map AP != 0"; return false; }

    std::mt19937_64 rng(11);
    std::uniform_int_distribution<int> count(0, 10);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<Box> pred, truth;
        for (int i = count(rng); i > 0; --i) pred.push_back(random_box(rng, 20));
        for (int i = count(rng); i > 0; --i) truth.push_back(random_box(rng, 20));
        MatchCounts m = match_boxes(pred, truth);
        auto overlap = [](const Box& a, const Box& b) {
            return std::min(a.x_max, b.x_max) > std::max(a.x_min, b.x_min) &&
                   std::min(a.y_max, b.y_max) > std::max(a.y_min, b.y_min);
        };
        int tp = 0, fp = 0;
        for (const auto& g : truth) {
            bool hit = false;
            for (const auto& p : pred) hit = hit || overlap(g, p);
            tp += hit ? 1 : 0;
        }
        for (const auto& p : pred) {
            bool hit = false;
            for (const auto& g : truth) hit = hit || overlap(g, p);
            fp += hit ? 0 : 1;
        }
        if (m.tp != tp || m.fp != fp || m.fn != static_cast<int>(truth.size()) - tp) {
            detail = "brute-force mismatch at trial " + std::to_string(trial);
            return false;
        }
    }
    return true;
}

// ---- criterion 4: recall monotone in scale -------------------------------------

bool recall_monotone(std::string& detail) {
    std::mt19937_64 rng(13);
    std::uniform_int_distribution<int> count(0, 6);
    auto scales = default_scales();
    for (int trial = 0; trial < 200; ++trial) {
        DetectionCase c;
        c.img_w = c.img_h = 24;
        for (int i = count(rng); i > 0; --i) {
            Region r;
            r.box = random_box(rng, 24);
            r.cx = 0.5 * (r.box.x_min + r.box.x_max);
            r.cy = 0.5 * (r.box.y_min + r.box.y_max);
            r.area = r.box.width() * r.box.height();
            c.regions.push_back(r);
        }
        for (int i = count(rng); i > 0; --i) c.gt.push_back(random_box(rng, 24));
        if (c.gt.empty()) c.gt.push_back(random_box(rng, 24));
        auto pts = pr_sweep({c}, scales);
        for (std::size_t i = 1; i < pts.size(); ++i)
            if (pts[i].recall < pts[i - 1].recall - 1e-12) {
                detail = "recall drops at trial " + std::to_string(trial);
                return false;
            }
    }
    return true;
}

// ---- criterion 5: metrics oracle ------------------------------------------------

bool metrics_oracle(std::string& detail) {
    std::mt19937_64 rng(17);
    std::uniform_int_distribution<int> kd(2, 4), nd(1, 20);
    for (int trial = 0; trial < 10000; ++trial) {
        int k = kd(rng), n = nd(rng);
        std::uniform_int_distribution<int> cls(0, k - 1);
        std::vector<int> yt(n), yp(n);
        for (int i = 0; i < n; ++i) { yt[i] = cls(rng); yp[i] = cls(rng); }
        std::vector<std::vector<double>> sc(n, std::vector<double>(k, 1.0 / k));
        ClassificationMetrics m = classification_metrics(yt, yp, sc);
        double recall_sum = 0.0, f1_sum = 0.0;
        int present = 0;
        for (int c = 0; c < k; ++c) {
            int tp = 0, fp = 0, fn = 0, support = 0;
            for (int i = 0; i < n; ++i) {
                support += yt[i] == c;
                tp += yt[i] == c && yp[i] == c;
                fn += yt[i] == c && yp[i] != c;
                fp += yt[i] != c && yp[i] == c;
            }
            if (!support) continue;
            ++present;
            recall_sum += double(tp) / support;
            f1_sum += (2 * tp + fp + fn) > 0 ? 2.0 * tp / (2 * tp + fp + fn) : 0.0;
        }
        if (std::abs(m.bacc - recall_sum / present) > 1e-12 ||
            std::abs(m.f1_macro - f1_sum / present) > 1e-12) {
            detail = "tally mismatch at trial " + std::to_string(trial);
            return false;
        }
    }
    // confusion [[8,2,0],[1,9,0],[0,3,7]]: BAcc = (0.8+0.9+0.7)/3 = 0.8 exactly
    std::vector<int> yt, yp;
    int conf[3][3] = {{8, 2, 0}, {1, 9, 0}, {0, 3, 7}};
    for (int t = 0; t < 3; ++t)
        for (int p = 0; p < 3; ++p)
            for (int c = 0; c < conf[t][p]; ++c) { yt.push_back(t); yp.push_back(p); }
    std::vector<std::vector<double>> flat(yt.size(), {1.0 / 3, 1.0 / 3, 1.0 / 3});
    if (std::abs(classification_metrics(yt, yp, flat).bacc - 0.8) > 1e-12) {
        detail = "3-class example BAcc != 0.8";
        return false;
    }
    return true;
}

// ---- criterion 9: scoring-sheet exactness ----------------------------------------

bool scoring_exactness(std::string& detail) {
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> uw(0.0, 1.0), upix(0.0, 1.0);
    std::uniform_int_distribution<int> kd(2, 4), od(2, 4);
    for (int trial = 0; trial < 100; ++trial) {
        EncoderConfig ec;
        ec.patch_size = 8;
        ec.embed_dim = 8;
        ec.depth = 1;
        ec.heads = 2;
        ec.resolutions = {16};
        Model m;
        m.config = ec;
        m.encoder = init_encoder_params(ec, rng());
        int k = kd(rng);
        m.classifier.reg_order = od(rng);
        m.classifier.weights = Array({ec.embed_dim, k});
        for (auto& w : m.classifier.weights.data)
            w = uw(rng) < 0.4 ? 0.0f : static_cast<float>(uw(rng));
        Array img({16, 16});
        for (auto& p : img.data) p = static_cast<float>(upix(rng));
        ScoringSheet s = scoring_sheet(m, img);
        for (int j = 0; j < k; ++j) {
            double resum = 0.0;
            for (const auto& row : s.prototypes) resum += row.contributions[j];
            if (std::abs(resum - s.evidence[j]) > 1e-5) { detail = "contribution re-sum"; return false; }
            double expect = std::log(std::pow(s.evidence[j], m.classifier.reg_order) + 1.0);
            if (std::abs(s.scores[j] - expect) > 1e-6) { detail = "score transform"; return false; }
        }
    }
    return true;
}

// ---- criteria 6-8, 10: shared end-to-end run --------------------------------------

struct PipelineRun {
    Checkpoint finetuned;
    std::string pretrain_log, finetune_log;
    std::string metrics;
};

PipelineRun run_pipeline(const TrainConfig& cfg, const Dataset& train, const Dataset& val) {
    TrainLog plog, flog;
    Checkpoint pre = pretrain(cfg, train, &plog);
    PipelineRun r;
    r.finetuned = finetune(cfg, train, val, pre, &flog);
    r.pretrain_log = plog.dump();
    r.finetune_log = flog.dump();
    r.metrics = r.finetuned.metrics.dump();
    return r;
}

double bacc_at(const Model& m, const Dataset& ds, int res) {
    std::vector<int> yt, yp;
    std::vector<std::vector<double>> pr;
    for (const auto& s : ds.samples) {
        Array img = s.image.shape[0] == res ? s.image : bilinear_resize(s.image, res, res);
        auto sc = model_scores(m, img);
        yt.push_back(s.label);
        yp.push_back(argmax_index(sc));
        pr.push_back(softmax_probs(sc));
    }
    return classification_metrics(yt, yp, pr).bacc;
}

double small_weight_fraction(const Model& m) {
    int small = 0;
    for (float w : m.classifier.weights.data) small += w < 1e-3f;
    return double(small) / double(m.classifier.weights.numel());
}

void end_to_end() {
    fs::path dir = fs::temp_directory_path() / "patchproto_acceptance_data";
    SyntheticSpec spec;  // defaults: 64px, 2 classes, 200/50/50, seed 0
    fs::remove_all(dir);  // never reuse a dataset from an older recipe
    generate_synthetic_dataset(spec, dir);
    Dataset train = load_dataset(dir / "train");
    Dataset val = load_dataset(dir / "val");
    Dataset test = load_dataset(dir / "test");

    TrainConfig cfg;  // defaults: {32,48,64} x5 epochs, 30 finetune epochs, seed 0, n=2
    auto t0 = clk::now();
    PipelineRun a = run_pipeline(cfg, train, val);
    Model model = model_from_checkpoint(a.finetuned);

    double bacc64 = bacc_at(model, test, 64);
    int proto = cli::auto_lesion_prototype(model, test);
    auto cases = cli::build_detection_cases(model, test, proto, 0.5, 64,
                                            cli::most_annotated_class(test));
    auto scales = default_scales();
    double ap = cli::detection_report(cases, scales, proto).ap;
    double ap_base = cli::detection_report(random_centroid_baseline(cases, cfg.seed), scales, proto).ap;
    double elapsed = seconds_since(t0);

    std::ostringstream d6;
    d6 << "BAcc=" << bacc64 << " AP=" << ap << " baseline=" << ap_base << " ("
       << elapsed << "s)";
    report(6, bacc64 >= 0.9 && ap >= 2.0 * ap_base && elapsed <= 1200.0,
           "end-to-end synthetic run", d6.str());

    // criterion 7: sparsity with n=2, not lower with n=4
    double frac2 = small_weight_fraction(model);
    TrainConfig cfg4 = cfg;
    cfg4.reg_order = 4;
    PipelineRun run4 = run_pipeline(cfg4, train, val);
    double frac4 = small_weight_fraction(model_from_checkpoint(run4.finetuned));
    std::ostringstream d7;
    d7 << "small-weight fraction n=2: " << frac2 << ", n=4: " << frac4;
    report(7, frac2 >= 0.5 && frac4 >= frac2 - 1e-12, "classifier sparsity", d7.str());

    // criterion 8: multi-resolution robustness and exact resize identity
    double b32 = bacc_at(model, test, 32), b48 = bacc_at(model, test, 48);
    double best = std::max({b32, b48, bacc64});
    bool identity = true;
    const Array& img0 = test.samples[0].image;
    Array same = bilinear_resize(img0, img0.shape[0], img0.shape[1]);
    for (std::size_t i = 0; i < img0.numel(); ++i)
        if (same.data[i] != img0.data[i]) identity = false;
    std::ostringstream d8;
    d8 << "BAcc@32=" << b32 << " @48=" << b48 << " @64=" << bacc64;
    report(8,
           best - b32 <= 0.1 && best - b48 <= 0.1 && best - bacc64 <= 0.1 && identity,
           "multi-resolution evaluation", d8.str());

    // criterion 10: a second identical run reproduces logs and metrics bit for bit
    PipelineRun b = run_pipeline(cfg, train, val);
    bool repro = a.pretrain_log == b.pretrain_log && a.finetune_log == b.finetune_log &&
                 a.metrics == b.metrics;
    report(10, repro, "reproducibility of the end-to-end run",
           repro ? "logs and metrics identical" : "runs diverged");
}

}  // namespace

int main() {
    {
        auto t0 = clk::now();
        std::string d;
        bool ok = gradient_suite(d);
        double sec = seconds_since(t0);
        report(1, ok && sec < 60.0, "finite-difference gradient suite",
               d.empty() ? std::to_string(sec) + "s" : d);
    }
    {
        std::string d;
        report(2, loss_identities(d), "loss identities and breakdown recombination", d);
    }
    {
        auto t0 = clk::now();
        std::string d;
        bool ok = detection_oracle(d);
        double sec = seconds_since(t0);
        report(3, ok && sec < 60.0, "detection-harness oracle",
               d.empty() ? std::to_string(sec) + "s" : d);
    }
    {
        std::string d;
        report(4, recall_monotone(d), "recall monotone in box scale", d);
    }
    {
        std::string d;
        report(5, metrics_oracle(d), "classification metrics oracle", d);
    }
    {
        std::string d;
        report(9, scoring_exactness(d), "scoring-sheet exactness on random models", d);
    }
    end_to_end();
    if (g_failures) std::printf("%d criterion(s) failed\n", g_failures);
    else std::printf("all criteria passed\n");
    return g_failures ? 1 : 0;
}
