#pragma once

#include <json.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "data.hpp"
#include "evaluation.hpp"
#include "losses.hpp"
#include "model.hpp"

namespace patchproto {

struct TrainConfig {
    EncoderConfig encoder;
    LossWeights weights;
    AugmentConfig augment;
    int reg_order = 2;
    std::vector<int> resolutions = {32, 48, 64};
    int epochs_per_resolution = 5;
    int finetune_epochs = 30;
    int batch_size = 4;
    double learning_rate = 3e-4;
    double weight_decay = 1e-4;
    double lr_warmup_fraction = 0.1;  // fraction of steps with linear lr warm-up
    double grad_clip_norm = 1.0;
    double eval_subset_fraction = 0.1;
    std::uint64_t seed = 0;
    std::string checkpoint_dir;

    int finetune_resolution() const {
        int m = 0;
        for (int r : resolutions) m = std::max(m, r);
        return m;
    }

    void validate() const {
        encoder.validate();
        weights.validate();
        if (epochs_per_resolution < 1) throw ConfigError("epochs_per_resolution must be >= 1");
        if (batch_size < 2) throw ConfigError("batch_size must be >= 2 (pairwise loss)");
        if (resolutions.empty()) throw ConfigError("resolutions must be non-empty");
        for (int r : resolutions) {
            if (r % encoder.patch_size != 0)
                throw ConfigError("resolution " + std::to_string(r) +
                                  " not divisible by patch size");
            if (std::find(encoder.resolutions.begin(), encoder.resolutions.end(), r) ==
                encoder.resolutions.end())
                throw ConfigError("resolution " + std::to_string(r) +
                                  " not in encoder.resolutions");
        }
    }
};

inline nlohmann::json train_config_json(const TrainConfig& c) {
    nlohmann::json j;
    j["patch_size"] = c.encoder.patch_size;
    j["embed_dim"] = c.encoder.embed_dim;
    j["depth"] = c.encoder.depth;
    j["heads"] = c.encoder.heads;
    j["mlp_ratio"] = c.encoder.mlp_ratio;
    j["encoder_resolutions"] = c.encoder.resolutions;
    j["lambda_a"] = c.weights.lambda_a;
    j["lambda_t"] = c.weights.lambda_t;
    j["lambda_koleo"] = c.weights.lambda_koleo;
    j["lambda_c"] = c.weights.lambda_c;
    j["eps"] = c.weights.eps;
    j["warmup_fraction"] = c.weights.warmup_fraction;
    j["reg_order"] = c.reg_order;
    j["resolutions"] = c.resolutions;
    j["epochs_per_resolution"] = c.epochs_per_resolution;
    j["finetune_epochs"] = c.finetune_epochs;
    j["batch_size"] = c.batch_size;
    j["learning_rate"] = c.learning_rate;
    j["weight_decay"] = c.weight_decay;
    j["seed"] = c.seed;
    return j;
}

// ---- checkpoint container ---------------------------------------------------
//
// File layout: one UTF-8 JSON header line
//   {"format_version":1,"arrays":[{name,shape,dtype:"f32",byte_offset}],
//    "config":...,"epoch":...,"metrics":...}
// terminated by '\n', followed by the raw little-endian float payload.

struct Checkpoint {
    std::map<std::string, Array> arrays;
    nlohmann::json config;
    int epoch = 0;
    nlohmann::json metrics;
};

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
    nlohmann::json header;
    header["format_version"] = 1;
    nlohmann::json arrs = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& [name, arr] : c.arrays) {
        if (!arr.all_finite())
            throw NumericError("checkpoint array " + name + " holds non-finite values");
        arrs.push_back({{"name", name},
                        {"shape", arr.shape},
                        {"dtype", "f32"},
                        {"byte_offset", offset}});
        offset += arr.numel() * sizeof(float);
    }
    header["arrays"] = arrs;
    header["config"] = c.config;
    header["epoch"] = c.epoch;
    header["metrics"] = c.metrics;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path.string());
    out << header.dump() << "\n";
    for (const auto& [name, arr] : c.arrays) {
        static_assert(sizeof(float) == 4);
        out.write(reinterpret_cast<const char*>(arr.data.data()),
                  static_cast<std::streamsize>(arr.numel() * sizeof(float)));
    }
    if (!out) throw IoError("checkpoint write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint: " + path.string());
    std::string header_line;
    if (!std::getline(in, header_line))
        throw DataError("checkpoint format error: missing header line");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_line);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint format error: header: ") + e.what());
    }
    if (!header.contains("format_version") || header["format_version"].get<int>() != 1)
        throw DataError("checkpoint format error: field format_version");
    Checkpoint c;
    c.config = header.value("config", nlohmann::json::object());
    c.epoch = header.value("epoch", 0);
    c.metrics = header.value("metrics", nlohmann::json::object());
    std::vector<char> payload((std::istreambuf_iterator<char>(in)),
                              std::istreambuf_iterator<char>());
    for (const auto& ja : header["arrays"]) {
        std::string name = ja.at("name").get<std::string>();
        if (ja.at("dtype").get<std::string>() != "f32")
            throw DataError("checkpoint format error: field dtype for " + name);
        Shape shape = ja.at("shape").get<Shape>();
        std::size_t off = ja.at("byte_offset").get<std::size_t>();
        std::size_t bytes = shape_numel(shape) * sizeof(float);
        if (off + bytes > payload.size())
            throw DataError("checkpoint format error: payload span for " + name);
        Array arr(shape);
        std::memcpy(arr.data.data(), payload.data() + off, bytes);
        if (!arr.all_finite())
            throw DataError("checkpoint format error: non-finite values in " + name);
        c.arrays[name] = std::move(arr);
    }
    return c;
}

inline Checkpoint checkpoint_from_model(const Model& m, int epoch, nlohmann::json metrics,
                                        nlohmann::json config) {
    Checkpoint c;
    c.arrays = m.encoder;
    c.arrays["cls.w"] = m.classifier.weights;
    c.epoch = epoch;
    c.metrics = std::move(metrics);
    c.config = std::move(config);
    return c;
}

inline Model model_from_checkpoint(const Checkpoint& c) {
    Model m;
    const auto& j = c.config;
    m.config.patch_size = j.value("patch_size", 8);
    m.config.embed_dim = j.value("embed_dim", 32);
    m.config.depth = j.value("depth", 2);
    m.config.heads = j.value("heads", 4);
    m.config.mlp_ratio = j.value("mlp_ratio", 2.0);
    if (j.contains("encoder_resolutions"))
        m.config.resolutions = j["encoder_resolutions"].get<std::vector<int>>();
    m.encoder = c.arrays;
    auto it = m.encoder.find("cls.w");
    if (it != m.encoder.end()) {
        m.classifier.weights = it->second;
        m.encoder.erase(it);
    } else {
        m.classifier.weights = Array({m.config.embed_dim, 2});
    }
    m.classifier.reg_order = j.value("reg_order", 2);
    if (j.contains("class_names"))
        m.classifier.class_names = j["class_names"].get<std::vector<std::string>>();
    return m;
}

// ---- optimizer --------------------------------------------------------------

/// Decoupled weight decay Adam with linear warm-up and cosine annealing.
/// Decay skips the classifier weights and all rank-1 parameters (biases,
/// norm gains, the positional table rows are 2-D and do decay).
class AdamW {
  public:
    AdamW(double lr, double weight_decay, long total_steps, double warmup_fraction)
        : lr_(lr),
          decay_(weight_decay),
          total_steps_(std::max<long>(total_steps, 1)),
          warmup_steps_(static_cast<long>(warmup_fraction * static_cast<double>(total_steps))) {}

    double current_lr() const {
        long t = step_;
        if (warmup_steps_ > 0 && t < warmup_steps_)
            return lr_ * static_cast<double>(t + 1) / static_cast<double>(warmup_steps_);
        double progress = total_steps_ > warmup_steps_
                              ? static_cast<double>(t - warmup_steps_) /
                                    static_cast<double>(total_steps_ - warmup_steps_)
                              : 1.0;
        progress = std::clamp(progress, 0.0, 1.0);
        return 0.5 * lr_ * (1.0 + std::cos(M_PI * progress));
    }

    void step(std::map<std::string, Array>& params, const std::map<std::string, Array>& grads,
              double clip_norm) {
        double lr = current_lr();
        // global-norm clipping across all parameters
        double norm_sq = 0.0;
        for (const auto& [name, g] : grads)
            for (float v : g.data) norm_sq += static_cast<double>(v) * v;
        double clip_scale = 1.0;
        double norm = std::sqrt(norm_sq);
        if (clip_norm > 0.0 && norm > clip_norm) clip_scale = clip_norm / norm;
        for (auto& [name, p] : params) {
            auto git = grads.find(name);
            if (git == grads.end()) continue;
            const Array& g = git->second;
            auto& st = state_[name];
            if (st.m.empty()) {
                st.m.assign(p.numel(), 0.0);
                st.v.assign(p.numel(), 0.0);
            }
            bool decay = decay_ > 0.0 && name != "cls.w" && p.rank() > 1;
            for (std::size_t i = 0; i < p.numel(); ++i) {
                double gi = static_cast<double>(g.data[i]) * clip_scale;
                st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * gi;
                st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * gi * gi;
                double mhat = st.m[i] / (1.0 - std::pow(beta1_, step_ + 1));
                double vhat = st.v[i] / (1.0 - std::pow(beta2_, step_ + 1));
                double upd = mhat / (std::sqrt(vhat) + eps_);
                double w = static_cast<double>(p.data[i]);
                if (decay) w -= lr * decay_ * w;
                if (gi != 0.0 || st.m[i] != 0.0) w -= lr * upd;
                p.data[i] = static_cast<float>(w);
            }
        }
        ++step_;
    }

  private:
    struct State {
        std::vector<double> m, v;
    };
    double lr_, decay_;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    long total_steps_, warmup_steps_;
    long step_ = 0;
    std::map<std::string, State> state_;
};

// ---- training loops ---------------------------------------------------------

struct TrainLogEntry {
    nlohmann::json record;
};

struct TrainLog {
    std::vector<nlohmann::json> entries;
    void add(nlohmann::json j) { entries.push_back(std::move(j)); }
    void write(const std::filesystem::path& path) const {
        std::ofstream out(path);
        if (!out) throw IoError("cannot write log: " + path.string());
        for (const auto& e : entries) out << e.dump() << "\n";
    }
    std::string dump() const {
        std::string s;
        for (const auto& e : entries) s += e.dump() + "\n";
        return s;
    }
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = seed + 0x9E3779B97F4A7C15ULL * (a + 1) + 0xBF58476D1CE4E5B9ULL * (b + 1);
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ULL;
    x ^= x >> 27;
    return x;
}

struct BatchLoss {
    LossBreakdown breakdown;
    std::map<std::string, Array> grads;
};

// One pre-training or fine-tuning batch on the tape. If labels is null the
// classification term is skipped (pre-training is label-free).
inline BatchLoss batch_step(const TrainConfig& cfg, const Params& enc_params,
                            const SparseClassifier* cls, int resolution,
                            const std::vector<const Sample*>& batch,
                            const std::vector<std::uint64_t>& view_seeds, double progress,
                            bool with_class_loss, bool compute_grads) {
    DiffGraph g;
    NodeMap ids = register_params(g, enc_params);
    NodeId cls_w = -1;
    if (with_class_loss) cls_w = g.input("cls.w", cls->weights);
    int grid = resolution / cfg.encoder.patch_size;
    std::vector<NodeId> align_terms, presence_rows, koleo_vecs, nll_terms;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const Sample& s = *batch[i];
        Array img = s.image.shape[0] == resolution
                        ? s.image
                        : bilinear_resize(s.image, resolution, resolution);
        auto [v1, v2] = two_view_augment(img, view_seeds[i], cfg.augment);
        for (const Array* view : {&v1, &v2}) {
            NodeId tokens = g.constant(patchify(*view, cfg.encoder.patch_size));
            NodeId feat = build_encoder(g, ids, cfg.encoder, tokens, grid, grid);
            NodeId proto = g.softmax(feat, 1);
            NodeId presence = g.max_reduce(proto, 0);
            presence_rows.push_back(g.reshape(presence, {1, cfg.encoder.embed_dim}));
            koleo_vecs.push_back(
                build_l2_normalize(g, g.reshape(feat, {grid * grid * cfg.encoder.embed_dim})));
            if (view == &v1)
                align_terms.push_back(proto);
            else {
                NodeId a = build_alignment_loss(g, align_terms.back(), proto, cfg.weights.eps);
                align_terms.back() = g.reshape(a, {1});
            }
            if (with_class_loss) {
                NodeId scores =
                    build_score(g, g.reshape(presence, {1, cfg.encoder.embed_dim}), cls_w,
                                cls->reg_order);
                nll_terms.push_back(g.reshape(build_nll(g, scores, s.label), {1}));
            }
        }
    }
    NodeId la = g.mean_all(g.concat(align_terms, 0));
    NodeId lt = build_tanh_loss(g, g.concat(presence_rows, 0), cfg.weights.eps);
    NodeId lk = build_koleo_loss(g, koleo_vecs, cfg.weights.eps);
    double la_w = with_class_loss ? cfg.weights.lambda_a : cfg.weights.effective_lambda_a(progress);
    NodeId total = g.add(g.add(g.scale(la, la_w), g.scale(lt, cfg.weights.lambda_t)),
                         g.scale(lk, cfg.weights.lambda_koleo));
    BatchLoss out;
    out.breakdown.alignment = g.value_scalar(la);
    out.breakdown.tanh_term = g.value_scalar(lt);
    out.breakdown.koleo = g.value_scalar(lk);
    out.breakdown.lambda_a_eff = la_w;
    if (with_class_loss) {
        NodeId lc = g.mean_all(g.concat(nll_terms, 0));
        out.breakdown.classification = g.value_scalar(lc);
        total = g.add(total, g.scale(lc, cfg.weights.lambda_c));
    }
    out.breakdown.total = g.value_scalar(total);
    if (!std::isfinite(out.breakdown.total))
        throw NumericError("non-finite training loss: L_A=" +
                           std::to_string(out.breakdown.alignment) +
                           " L_T=" + std::to_string(out.breakdown.tanh_term) +
                           " L_KoLeo=" + std::to_string(out.breakdown.koleo) +
                           " L_C=" + std::to_string(out.breakdown.classification));
    if (compute_grads) {
        auto res = g.evaluate_with_gradients(total);
        out.grads = std::move(res.gradients);
    }
    return out;
}

inline std::vector<std::vector<const Sample*>> make_batches(
    const Dataset& ds, int batch_size, std::uint64_t shuffle_seed) {
    // class-stratified order: shuffle within each class, then interleave
    // round-robin so every batch is close to class-balanced; this keeps the
    // per-batch classification gradient on non-discriminative channels near
    // zero instead of injecting class-imbalance noise
    std::mt19937_64 rng(shuffle_seed);
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < ds.samples.size(); ++i)
        by_class[ds.samples[i].label].push_back(i);
    for (auto& [label, idx] : by_class) std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<std::size_t> order;
    order.reserve(ds.samples.size());
    for (std::size_t round = 0; order.size() < ds.samples.size(); ++round)
        for (auto& [label, idx] : by_class)
            if (round < idx.size()) order.push_back(idx[round]);
    std::vector<std::vector<const Sample*>> batches;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
        std::vector<const Sample*> b;
        for (std::size_t j = i; j < std::min(order.size(), i + batch_size); ++j)
            b.push_back(&ds.samples[order[j]]);
        if (b.size() >= 2) batches.push_back(std::move(b));
    }
    return batches;
}

// fixed seeded 10% subset used for L_pre-train checkpoint selection
inline std::vector<const Sample*> eval_subset(const Dataset& ds, double fraction,
                                              std::uint64_t seed) {
    std::vector<std::size_t> order(ds.samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(mix_seed(seed, 0xE7A1, 0));
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t count = std::max<std::size_t>(2, static_cast<std::size_t>(
                                                     fraction * static_cast<double>(order.size())));
    count = std::min(count, order.size());
    std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
    std::vector<const Sample*> out;
    for (std::size_t i = 0; i < count; ++i) out.push_back(&ds.samples[order[i]]);
    return out;
}

inline double eval_pretrain_loss(const TrainConfig& cfg, const Params& enc_params,
                                 int resolution, const std::vector<const Sample*>& subset) {
    double total = 0.0;
    int batches = 0;
    for (std::size_t i = 0; i < subset.size(); i += static_cast<std::size_t>(cfg.batch_size)) {
        std::vector<const Sample*> b(subset.begin() + static_cast<std::ptrdiff_t>(i),
                                     subset.begin() +
                                         static_cast<std::ptrdiff_t>(std::min(
                                             subset.size(), i + cfg.batch_size)));
        if (b.size() < 2) break;
        std::vector<std::uint64_t> seeds;
        for (std::size_t j = 0; j < b.size(); ++j)
            seeds.push_back(mix_seed(cfg.seed, 0xEA11 + i + j, 7));
        BatchLoss bl = batch_step(cfg, enc_params, nullptr, resolution, b, seeds,
                                  /*progress=*/1.0, false, false);
        total += bl.breakdown.total;
        ++batches;
    }
    return batches > 0 ? total / batches : 0.0;
}

}  // namespace detail

/// Label-free multi-resolution pre-training. Trains epochs_per_resolution
/// epochs at each ladder resolution; the lambda_a warm-up spans the whole
/// schedule. Returns the checkpoint with the lowest recorded evaluation loss.
inline Checkpoint pretrain(const TrainConfig& cfg, const Dataset& train, TrainLog* log = nullptr) {
    cfg.validate();
    if (train.samples.empty()) throw DataError("pretrain: empty dataset");
    Params params = init_encoder_params(cfg.encoder, cfg.seed);
    auto subset = detail::eval_subset(train, cfg.eval_subset_fraction, cfg.seed);
    long steps_per_epoch =
        static_cast<long>((train.samples.size() + cfg.batch_size - 1) / cfg.batch_size);
    long total_steps = steps_per_epoch * cfg.epochs_per_resolution *
                       static_cast<long>(cfg.resolutions.size());
    AdamW opt(cfg.learning_rate, cfg.weight_decay, total_steps, cfg.lr_warmup_fraction);
    long global_step = 0;
    double best_eval = std::numeric_limits<double>::infinity();
    Params best_params = params;
    int best_epoch = -1;
    int epoch_counter = 0;
    for (int resolution : cfg.resolutions) {
        for (int e = 0; e < cfg.epochs_per_resolution; ++e, ++epoch_counter) {
            auto batches = detail::make_batches(train, cfg.batch_size,
                                                detail::mix_seed(cfg.seed, 0xB, epoch_counter));
            LossBreakdown epoch_mean;
            for (std::size_t bi = 0; bi < batches.size(); ++bi) {
                std::vector<std::uint64_t> seeds;
                for (std::size_t j = 0; j < batches[bi].size(); ++j)
                    seeds.push_back(detail::mix_seed(cfg.seed, epoch_counter * 131071ULL + bi,
                                                     j));
                double progress =
                    total_steps > 0 ? static_cast<double>(global_step) / total_steps : 1.0;
                auto step = detail::batch_step(cfg, params, nullptr, resolution, batches[bi],
                                               seeds, progress, false, true);
                opt.step(params, step.grads, cfg.grad_clip_norm);
                ++global_step;
                epoch_mean.alignment += step.breakdown.alignment;
                epoch_mean.tanh_term += step.breakdown.tanh_term;
                epoch_mean.koleo += step.breakdown.koleo;
                epoch_mean.total += step.breakdown.total;
            }
            double nb = static_cast<double>(std::max<std::size_t>(batches.size(), 1));
            double eval_loss = detail::eval_pretrain_loss(cfg, params, resolution, subset);
            if (eval_loss < best_eval) {
                best_eval = eval_loss;
                best_params = params;
                best_epoch = epoch_counter;
            }
            if (log)
                log->add({{"epoch", epoch_counter},
                          {"resolution", resolution},
                          {"L_A", epoch_mean.alignment / nb},
                          {"L_T", epoch_mean.tanh_term / nb},
                          {"L_KoLeo", epoch_mean.koleo / nb},
                          {"L_C", 0.0},
                          {"total", epoch_mean.total / nb}});
        }
    }
    Model m;
    m.config = cfg.encoder;
    m.encoder = std::move(best_params);
    m.classifier.weights = Array({cfg.encoder.embed_dim, 1});
    m.classifier.reg_order = cfg.reg_order;
    nlohmann::json metrics = {{"best_eval_pretrain_loss", best_eval},
                              {"best_epoch", best_epoch}};
    return checkpoint_from_model(m, best_epoch, metrics, train_config_json(cfg));
}

inline double validation_bacc(const Model& m, const Dataset& val, int resolution) {
    std::vector<int> y_true, y_pred;
    std::vector<std::vector<double>> probs;
    for (const auto& s : val.samples) {
        Array img = s.image.shape[0] == resolution
                        ? s.image
                        : bilinear_resize(s.image, resolution, resolution);
        auto sc = model_scores(m, img);
        y_true.push_back(s.label);
        y_pred.push_back(argmax_index(sc));
        probs.push_back(softmax_probs(sc));
    }
    return classification_metrics(y_true, y_pred, probs).bacc;
}

/// End-to-end fine-tuning from a pre-trained checkpoint: Eq.-5-style joint
/// objective, non-negative projection after every step, best-validation-BAcc
/// model selection at the largest ladder resolution.
inline Checkpoint finetune(const TrainConfig& cfg, const Dataset& train, const Dataset& val,
                           const Checkpoint& start, TrainLog* log = nullptr) {
    cfg.validate();
    Model m = model_from_checkpoint(start);
    if (m.config.embed_dim != cfg.encoder.embed_dim || m.config.patch_size != cfg.encoder.patch_size)
        throw ConfigError("checkpoint dimensions incompatible with config");
    if (cfg.finetune_epochs == 0) return start;
    int k = train.num_classes;
    if (k < 2) throw ConfigError("fine-tuning needs at least 2 classes");
    if (val.num_classes > k) throw ConfigError("val has more classes than train");
    // fresh classifier head sized to the dataset
    {
        // constant symmetric start: class separation must come from the data,
        // not from init noise the short schedule cannot undo. Starting high
        // makes the log(e^n+1) transform prune: at large evidence its slope
        // falls off as 1/e, so entries that carry no class signal are driven
        // down to the non-negativity clamp instead of drifting upward
        m.classifier.weights = Array({cfg.encoder.embed_dim, k});
        for (auto& w : m.classifier.weights.data) w = 0.1f;
        m.classifier.reg_order = cfg.reg_order;
        m.classifier.class_names = train.class_names;
    }
    int resolution = cfg.finetune_resolution();
    long steps_per_epoch =
        static_cast<long>((train.samples.size() + cfg.batch_size - 1) / cfg.batch_size);
    AdamW opt(cfg.learning_rate, cfg.weight_decay, steps_per_epoch * cfg.finetune_epochs,
              cfg.lr_warmup_fraction);
    double best_bacc = -1.0;
    Model best = m;
    int best_epoch = -1;
    for (int epoch = 0; epoch < cfg.finetune_epochs; ++epoch) {
        auto batches = detail::make_batches(train, cfg.batch_size,
                                            detail::mix_seed(cfg.seed, 0xFE, epoch));
        LossBreakdown mean;
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            std::vector<std::uint64_t> seeds;
            for (std::size_t j = 0; j < batches[bi].size(); ++j)
                seeds.push_back(detail::mix_seed(cfg.seed, 0xF00000ULL + epoch * 131071ULL + bi, j));
            // combined parameter map: encoder + classifier
            auto step = detail::batch_step(cfg, m.encoder, &m.classifier, resolution,
                                           batches[bi], seeds, 1.0, true, true);
            std::map<std::string, Array> all = m.encoder;
            all["cls.w"] = m.classifier.weights;
            opt.step(all, step.grads, cfg.grad_clip_norm);
            m.classifier.weights = all["cls.w"];
            all.erase("cls.w");
            m.encoder = std::move(all);
            project_nonnegative(m.classifier);
            mean.alignment += step.breakdown.alignment;
            mean.tanh_term += step.breakdown.tanh_term;
            mean.koleo += step.breakdown.koleo;
            mean.classification += step.breakdown.classification;
            mean.total += step.breakdown.total;
        }
        double nb = static_cast<double>(std::max<std::size_t>(batches.size(), 1));
        double bacc = validation_bacc(m, val, resolution);
        if (bacc > best_bacc) {
            best_bacc = bacc;
            best = m;
            best_epoch = epoch;
        }
        if (log)
            log->add({{"epoch", epoch},
                      {"resolution", resolution},
                      {"L_A", mean.alignment / nb},
                      {"L_T", mean.tanh_term / nb},
                      {"L_KoLeo", mean.koleo / nb},
                      {"L_C", mean.classification / nb},
                      {"total", mean.total / nb},
                      {"val_BAcc", bacc}});
    }
    nlohmann::json metrics = {{"best_val_bacc", best_bacc}, {"best_epoch", best_epoch}};
    nlohmann::json config = train_config_json(cfg);
    config["class_names"] = best.classifier.class_names;
    return checkpoint_from_model(best, best_epoch, metrics, config);
}

}  // namespace patchproto
