#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "array.hpp"
#include "autodiff.hpp"
#include "prototype.hpp"

namespace patchproto {

struct EncoderConfig {
    int patch_size = 8;
    int embed_dim = 32;  // D, the upper bound on the number of prototypes
    int depth = 2;
    int heads = 4;
    double mlp_ratio = 2.0;
    std::vector<int> resolutions = {32, 48, 64};

    int head_dim() const { return embed_dim / heads; }
    int mlp_hidden() const { return static_cast<int>(embed_dim * mlp_ratio); }
    int native_resolution() const {
        int m = 0;
        for (int r : resolutions) m = std::max(m, r);
        return m;
    }
    int native_grid() const { return native_resolution() / patch_size; }

    void validate() const {
        if (depth < 1) throw ConfigError("encoder depth must be >= 1");
        if (heads < 1 || embed_dim % heads != 0)
            throw ConfigError("embed_dim must be divisible by heads");
        if (resolutions.empty()) throw ConfigError("at least one resolution required");
        for (int r : resolutions)
            if (r % patch_size != 0)
                throw ConfigError("resolution " + std::to_string(r) +
                                  " not divisible by patch size " + std::to_string(patch_size));
    }
};

struct PositionalEmbedding {
    int grid_w = 0, grid_h = 0;
    Array table;  // {grid_h * grid_w, D}
};

/// Bilinear resampling of the learnable position table to a new token grid.
/// Resizing to the native grid is the exact identity.
inline PositionalEmbedding resize_positional_embeddings(const PositionalEmbedding& pe,
                                                        int new_w, int new_h) {
    if (new_w <= 0 || new_h <= 0) throw ShapeError("positional grid must be positive");
    if (new_w == pe.grid_w && new_h == pe.grid_h) return pe;
    int d = pe.table.shape[1];
    PositionalEmbedding out;
    out.grid_w = new_w;
    out.grid_h = new_h;
    out.table = Array({new_h * new_w, d});
    Array channel({pe.grid_h, pe.grid_w});
    for (int c = 0; c < d; ++c) {
        for (int i = 0; i < pe.grid_h * pe.grid_w; ++i)
            channel.data[i] = pe.table.data[static_cast<std::size_t>(i) * d + c];
        Array resized = bilinear_resize(channel, new_h, new_w);
        for (int i = 0; i < new_h * new_w; ++i)
            out.table.data[static_cast<std::size_t>(i) * d + c] = resized.data[i];
    }
    return out;
}

/// Row-major rearrangement of an {H, W} image into {n_patches, patch²} tokens.
inline Array patchify(const Array& image, int patch_size) {
    if (image.rank() != 2) throw ShapeError("patchify expects a rank-2 image");
    int h = image.shape[0], w = image.shape[1];
    if (h % patch_size != 0 || w % patch_size != 0)
        throw ShapeError("image " + std::to_string(w) + "x" + std::to_string(h) +
                         " not divisible by patch size " + std::to_string(patch_size));
    int gh = h / patch_size, gw = w / patch_size;
    Array tokens({gh * gw, patch_size * patch_size});
    for (int py = 0; py < gh; ++py)
        for (int px = 0; px < gw; ++px) {
            float* tok = &tokens.data[static_cast<std::size_t>(py * gw + px) * patch_size *
                                      patch_size];
            for (int y = 0; y < patch_size; ++y)
                for (int x = 0; x < patch_size; ++x)
                    tok[y * patch_size + x] =
                        image.data[static_cast<std::size_t>(py * patch_size + y) * w +
                                   px * patch_size + x];
        }
    return tokens;
}

using Params = std::map<std::string, Array>;

namespace detail {

inline float trunc_normal(std::mt19937_64& rng, double sigma) {
    std::normal_distribution<double> dist(0.0, sigma);
    double v;
    do { v = dist(rng); } while (std::abs(v) > 2.0 * sigma);
    return static_cast<float>(v);
}

inline Array trunc_normal_array(std::mt19937_64& rng, Shape s, double sigma) {
    Array a(std::move(s));
    for (auto& v : a.data) v = trunc_normal(rng, sigma);
    return a;
}

}  // namespace detail

inline Params init_encoder_params(const EncoderConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    int d = cfg.embed_dim, dh = cfg.head_dim(), hid = cfg.mlp_hidden();
    int pp = cfg.patch_size * cfg.patch_size;
    Params p;
    p["embed.w"] = detail::trunc_normal_array(rng, {pp, d}, 0.02);
    p["embed.b"] = Array({d});
    int ng = cfg.native_grid();
    {
        Array table({ng * ng, d});
        std::normal_distribution<double> dist(0.0, 0.02);
        for (auto& v : table.data) v = static_cast<float>(dist(rng));
        p["pos.table"] = std::move(table);
    }
    for (int b = 0; b < cfg.depth; ++b) {
        std::string pre = "blk" + std::to_string(b) + ".";
        Array ones({d});
        std::fill(ones.data.begin(), ones.data.end(), 1.0f);
        p[pre + "ln1.g"] = ones;
        p[pre + "ln1.b"] = Array({d});
        for (int h = 0; h < cfg.heads; ++h) {
            std::string hs = std::to_string(h);
            p[pre + "attn.q" + hs] = detail::trunc_normal_array(rng, {d, dh}, 0.02);
            p[pre + "attn.k" + hs] = detail::trunc_normal_array(rng, {d, dh}, 0.02);
            p[pre + "attn.v" + hs] = detail::trunc_normal_array(rng, {d, dh}, 0.02);
        }
        p[pre + "attn.wo"] = detail::trunc_normal_array(rng, {d, d}, 0.02);
        p[pre + "attn.bo"] = Array({d});
        p[pre + "ln2.g"] = ones;
        p[pre + "ln2.b"] = Array({d});
        p[pre + "mlp.w1"] = detail::trunc_normal_array(rng, {d, hid}, 0.02);
        p[pre + "mlp.b1"] = Array({hid});
        p[pre + "mlp.w2"] = detail::trunc_normal_array(rng, {hid, d}, 0.02);
        p[pre + "mlp.b2"] = Array({d});
    }
    {
        Array ones({d});
        std::fill(ones.data.begin(), ones.data.end(), 1.0f);
        p["final.ln.g"] = ones;
        p["final.ln.b"] = Array({d});
    }
    return p;
}

using NodeMap = std::map<std::string, NodeId>;

inline NodeMap register_params(DiffGraph& g, const Params& params) {
    NodeMap ids;
    for (const auto& [name, arr] : params) ids[name] = g.input(name, arr);
    return ids;
}

/// Builds the encoder forward pass on the tape: patch projection, resized
/// positional embeddings, pre-norm attention/MLP blocks, final layer norm.
/// `tokens` is an {S², patch²} node; the result is an {S², D} node.
inline NodeId build_encoder(DiffGraph& g, const NodeMap& p, const EncoderConfig& cfg,
                            NodeId tokens, int grid_h, int grid_w) {
    int d = cfg.embed_dim, dh = cfg.head_dim();
    NodeId x = g.add(g.matmul(tokens, p.at("embed.w")), p.at("embed.b"));
    int ng = cfg.native_grid();
    NodeId pe = p.at("pos.table");
    if (grid_h != ng || grid_w != ng) {
        NodeId m = g.constant(bilinear_matrix(ng, ng, grid_h, grid_w));
        pe = g.matmul(m, pe);
    }
    x = g.add(x, pe);
    double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int b = 0; b < cfg.depth; ++b) {
        std::string pre = "blk" + std::to_string(b) + ".";
        NodeId xn = g.layer_norm(x, p.at(pre + "ln1.g"), p.at(pre + "ln1.b"));
        std::vector<NodeId> head_outs;
        for (int h = 0; h < cfg.heads; ++h) {
            std::string hs = std::to_string(h);
            NodeId q = g.matmul(xn, p.at(pre + "attn.q" + hs));
            NodeId k = g.matmul(xn, p.at(pre + "attn.k" + hs));
            NodeId v = g.matmul(xn, p.at(pre + "attn.v" + hs));
            NodeId scores = g.scale(g.matmul(q, g.transpose(k)), scale);
            NodeId att = g.softmax(scores, 1);
            head_outs.push_back(g.matmul(att, v));
        }
        NodeId merged = head_outs.size() == 1 ? head_outs[0] : g.concat(head_outs, 1);
        NodeId proj = g.add(g.matmul(merged, p.at(pre + "attn.wo")), p.at(pre + "attn.bo"));
        x = g.add(x, proj);
        NodeId yn = g.layer_norm(x, p.at(pre + "ln2.g"), p.at(pre + "ln2.b"));
        NodeId hidden = g.tanh(g.add(g.matmul(yn, p.at(pre + "mlp.w1")), p.at(pre + "mlp.b1")));
        NodeId mlp = g.add(g.matmul(hidden, p.at(pre + "mlp.w2")), p.at(pre + "mlp.b2"));
        x = g.add(x, mlp);
    }
    return g.layer_norm(x, p.at("final.ln.g"), p.at("final.ln.b"));
}

/// Inference path: image at any resolution divisible by the patch size.
inline FeatureGrid encode(const Params& params, const EncoderConfig& cfg, const Array& image) {
    int gh = image.shape[0] / cfg.patch_size;
    int gw = image.shape[1] / cfg.patch_size;
    DiffGraph g;
    NodeMap ids = register_params(g, params);
    NodeId tokens = g.constant(patchify(image, cfg.patch_size));
    NodeId out = build_encoder(g, ids, cfg, tokens, gh, gw);
    FeatureGrid fg;
    fg.h = gh;
    fg.w = gw;
    fg.d = cfg.embed_dim;
    fg.values = g.value_array(g.reshape(out, {gh, gw, cfg.embed_dim}));
    return fg;
}

}  // namespace patchproto
