#pragma once

// The network: adaptive dual-pathway patch embedding with NT tokens,
// plane/axis/dual mask generation, MATB encoder/decoder stacks, the
// masked-MSE objective, stitched full-volume reconstruction, and the
// NEMC checkpoint format.

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "nemesis/errors.hpp"
#include "nemesis/rng.hpp"
#include "nemesis/superpatch.hpp"
#include "nemesis/tensor.hpp"
#include "nemesis/volume.hpp"

namespace nemesis {

constexpr double kLayerNormEps = 1e-6;

enum class MaskStrategy : std::uint8_t { plane = 0, axis = 1, dual = 2 };
enum class Axis3 : std::uint8_t { x = 0, y = 1, z = 2 };

inline std::string to_string(MaskStrategy s) {
    switch (s) {
        case MaskStrategy::plane: return "plane";
        case MaskStrategy::axis: return "axis";
        case MaskStrategy::dual: return "dual";
    }
    return "?";
}

inline MaskStrategy mask_strategy_from_string(const std::string& s) {
    if (s == "plane") return MaskStrategy::plane;
    if (s == "axis") return MaskStrategy::axis;
    if (s == "dual") return MaskStrategy::dual;
    throw ParamError("unknown mask strategy '" + s + "' (expected plane|axis|dual)");
}

inline std::string to_string(Axis3 a) {
    switch (a) {
        case Axis3::x: return "x";
        case Axis3::y: return "y";
        case Axis3::z: return "z";
    }
    return "?";
}

inline Axis3 axis_from_string(const std::string& s) {
    if (s == "x") return Axis3::x;
    if (s == "y") return Axis3::y;
    if (s == "z") return Axis3::z;
    throw ParamError("unknown axis '" + s + "' (expected x|y|z)");
}

struct ModelConfig {
    std::size_t superpatch_side = 32;
    std::size_t patch_side = 8;
    std::size_t embed_dim = 64;
    std::size_t encoder_depth = 2;
    std::size_t decoder_depth = 2;
    std::size_t decoder_dim = 32;
    std::size_t heads = 4;
    std::size_t nt_count = 4;
    double mask_ratio = 0.75;
    MaskStrategy strategy = MaskStrategy::dual;
    Axis3 anisotropic_axis = Axis3::z;
    std::uint64_t seed = 42;

    std::size_t grid_side() const { return superpatch_side / patch_side; }
    std::size_t token_count() const { return grid_side() * grid_side() * grid_side(); }
    std::size_t token_dim() const { return patch_side * patch_side * patch_side; }

    void validate() const {
        if (patch_side == 0 || superpatch_side % patch_side)
            throw ParamError("model: patch side must divide superpatch side");
        if (grid_side() < 2) throw ParamError("model: token grid side must be >= 2");
        if (embed_dim == 0 || embed_dim % heads)
            throw ParamError("model: embed dim must be a positive multiple of heads");
        if (decoder_dim == 0 || decoder_dim % heads)
            throw ParamError("model: decoder dim must be a positive multiple of heads");
        if (encoder_depth == 0 || decoder_depth == 0) throw ParamError("model: depth must be >= 1");
        if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ParamError("model: mask ratio must be in (0,1)");
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"superpatch_side", c.superpatch_side},
                       {"patch_side", c.patch_side},
                       {"embed_dim", c.embed_dim},
                       {"encoder_depth", c.encoder_depth},
                       {"decoder_depth", c.decoder_depth},
                       {"decoder_dim", c.decoder_dim},
                       {"heads", c.heads},
                       {"nt_count", c.nt_count},
                       {"mask_ratio", c.mask_ratio},
                       {"strategy", to_string(c.strategy)},
                       {"axis", to_string(c.anisotropic_axis)},
                       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    j.at("superpatch_side").get_to(c.superpatch_side);
    j.at("patch_side").get_to(c.patch_side);
    j.at("embed_dim").get_to(c.embed_dim);
    j.at("encoder_depth").get_to(c.encoder_depth);
    j.at("decoder_depth").get_to(c.decoder_depth);
    j.at("decoder_dim").get_to(c.decoder_dim);
    j.at("heads").get_to(c.heads);
    j.at("nt_count").get_to(c.nt_count);
    j.at("mask_ratio").get_to(c.mask_ratio);
    c.strategy = mask_strategy_from_string(j.at("strategy").get<std::string>());
    c.anisotropic_axis = axis_from_string(j.at("axis").get<std::string>());
    j.at("seed").get_to(c.seed);
}

// ---------------------------------------------------------------------------
// Mask generation

struct MaskSpec {
    MaskStrategy strategy = MaskStrategy::dual;
    std::size_t grid_side = 0;
    std::vector<std::size_t> visible;  // sorted token ids
    std::vector<std::size_t> masked;   // sorted token ids
    std::vector<std::size_t> planes;   // plane coordinates fully masked
    std::vector<std::size_t> columns;  // column ids fully masked
};

namespace detail {

inline std::size_t axis_coord(std::size_t x, std::size_t y, std::size_t z, Axis3 axis) {
    switch (axis) {
        case Axis3::x: return x;
        case Axis3::y: return y;
        case Axis3::z: return z;
    }
    return 0;
}

// Flattened in-plane coordinate: identifies the token column along `axis`.
inline std::size_t column_coord(std::size_t x, std::size_t y, std::size_t z, Axis3 axis,
                                std::size_t g) {
    switch (axis) {
        case Axis3::x: return y * g + z;
        case Axis3::y: return x * g + z;
        case Axis3::z: return x * g + y;
    }
    return 0;
}

inline std::size_t llround_positive(double v) { return static_cast<std::size_t>(v + 0.5); }

}  // namespace detail

// Plane strategy masks round(r*G) whole planes orthogonal to `axis`; the
// axis strategy masks round(r*G^2) whole columns parallel to it. Dual takes
// ceil(half) of the round(r*G^3) token budget from planes, fills with
// columns, and tops up with uniform single tokens to hit the budget exactly.
inline MaskSpec gen_mask(std::size_t grid_side, double ratio, MaskStrategy strategy, Axis3 axis,
                         std::uint64_t seed) {
    if (grid_side < 2) throw ParamError("gen_mask: grid side must be >= 2");
    const std::size_t g = grid_side;
    const std::size_t total = g * g * g;
    const std::size_t budget = detail::llround_positive(ratio * static_cast<double>(total));
    if (budget < 1 || budget >= total)
        throw ParamError("gen_mask: ratio " + std::to_string(ratio) + " leaves no visible or no masked tokens");

    TokenGrid tg(g);
    Rng rng(seed);
    std::vector<char> is_masked(total, 0);
    MaskSpec spec;
    spec.strategy = strategy;
    spec.grid_side = g;

    auto mark_plane = [&](std::size_t plane) {
        for (std::size_t t = 0; t < total; ++t) {
            std::size_t x, y, z;
            tg.coords(t, x, y, z);
            if (detail::axis_coord(x, y, z, axis) == plane) is_masked[t] = 1;
        }
    };
    auto mark_column = [&](std::size_t col) {
        for (std::size_t t = 0; t < total; ++t) {
            std::size_t x, y, z;
            tg.coords(t, x, y, z);
            if (detail::column_coord(x, y, z, axis, g) == col) is_masked[t] = 1;
        }
    };

    switch (strategy) {
        case MaskStrategy::plane: {
            const std::size_t n_planes = detail::llround_positive(ratio * static_cast<double>(g));
            if (n_planes < 1 || n_planes >= g)
                throw ParamError("gen_mask: plane strategy needs 1 <= round(r*G) < G");
            spec.planes = rng.sample_without_replacement(g, n_planes);
            for (std::size_t pl : spec.planes) mark_plane(pl);
            break;
        }
        case MaskStrategy::axis: {
            const std::size_t n_cols = detail::llround_positive(ratio * static_cast<double>(g * g));
            if (n_cols < 1 || n_cols >= g * g)
                throw ParamError("gen_mask: axis strategy needs 1 <= round(r*G^2) < G^2");
            spec.columns = rng.sample_without_replacement(g * g, n_cols);
            for (std::size_t col : spec.columns) mark_column(col);
            break;
        }
        case MaskStrategy::dual: {
            const std::size_t plane_budget = (budget + 1) / 2;
            const std::size_t n_planes = std::min(plane_budget / (g * g), g - 1);
            spec.planes = rng.sample_without_replacement(g, n_planes);
            for (std::size_t pl : spec.planes) mark_plane(pl);
            const std::size_t after_planes = n_planes * g * g;
            const std::size_t per_column_new = g - n_planes;
            const std::size_t n_cols = std::min((budget - after_planes) / per_column_new, g * g);
            spec.columns = rng.sample_without_replacement(g * g, n_cols);
            for (std::size_t col : spec.columns) mark_column(col);
            std::size_t marked = after_planes + n_cols * per_column_new;
            if (marked < budget) {
                std::vector<std::size_t> pool;
                for (std::size_t t = 0; t < total; ++t)
                    if (!is_masked[t]) pool.push_back(t);
                const auto extra = rng.sample_without_replacement(pool.size(), budget - marked);
                for (std::size_t e : extra) is_masked[pool[e]] = 1;
            }
            break;
        }
    }

    for (std::size_t t = 0; t < total; ++t)
        (is_masked[t] ? spec.masked : spec.visible).push_back(t);
    return spec;
}

// ---------------------------------------------------------------------------
// Parameters

struct AttentionWeights {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct SabWeights {
    Tensor ln1_g, ln1_b;
    AttentionWeights attn;
    Tensor ln2_g, ln2_b;
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct MatbWeights {
    Tensor ln1_g, ln1_b;
    AttentionWeights axis_attn, plane_attn;
    Tensor fc_w, fc_b;  // [2d x d], [d]
    Tensor ln2_g, ln2_b;
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct ModelParams {
    Tensor w_lp, b_lp;          // linear-projection pathway [p^3 x d], [d]
    Tensor w_se, b_se;          // projection feeding the SAB [p^3 x d], [d]
    SabWeights sab;
    Tensor nt;                  // [K x d] learnable tokens (undefined when K = 0)
    Tensor gate_logit;          // [1], alpha = sigmoid(gate_logit)
    Tensor enc_pos;             // [G^3 x d]
    std::vector<MatbWeights> encoder;
    Tensor dec_proj_w, dec_proj_b;  // [d x dd], [dd]
    Tensor mask_token;              // [dd]
    Tensor dec_pos;                 // [G^3 x dd]
    std::vector<MatbWeights> decoder;
    Tensor head_w, head_b;  // [dd x p^3], [p^3]
};

namespace detail {

template <typename Fn>
void visit_attention(AttentionWeights& a, const std::string& prefix, Fn&& fn) {
    fn(prefix + ".wq", a.wq);
    fn(prefix + ".bq", a.bq);
    fn(prefix + ".wk", a.wk);
    fn(prefix + ".bk", a.bk);
    fn(prefix + ".wv", a.wv);
    fn(prefix + ".bv", a.bv);
    fn(prefix + ".wo", a.wo);
    fn(prefix + ".bo", a.bo);
}

template <typename Fn>
void visit_matb(MatbWeights& m, const std::string& prefix, Fn&& fn) {
    fn(prefix + ".ln1_g", m.ln1_g);
    fn(prefix + ".ln1_b", m.ln1_b);
    visit_attention(m.axis_attn, prefix + ".axis", fn);
    visit_attention(m.plane_attn, prefix + ".plane", fn);
    fn(prefix + ".fc_w", m.fc_w);
    fn(prefix + ".fc_b", m.fc_b);
    fn(prefix + ".ln2_g", m.ln2_g);
    fn(prefix + ".ln2_b", m.ln2_b);
    fn(prefix + ".mlp_w1", m.mlp_w1);
    fn(prefix + ".mlp_b1", m.mlp_b1);
    fn(prefix + ".mlp_w2", m.mlp_w2);
    fn(prefix + ".mlp_b2", m.mlp_b2);
}

}  // namespace detail

// Canonical parameter enumeration; the order fixes optimizer-state layout
// and the checkpoint tensor order.
template <typename Fn>
void for_each_param(ModelParams& p, Fn&& fn) {
    fn("w_lp", p.w_lp);
    fn("b_lp", p.b_lp);
    fn("w_se", p.w_se);
    fn("b_se", p.b_se);
    fn("sab.ln1_g", p.sab.ln1_g);
    fn("sab.ln1_b", p.sab.ln1_b);
    detail::visit_attention(p.sab.attn, "sab.attn", fn);
    fn("sab.ln2_g", p.sab.ln2_g);
    fn("sab.ln2_b", p.sab.ln2_b);
    fn("sab.mlp_w1", p.sab.mlp_w1);
    fn("sab.mlp_b1", p.sab.mlp_b1);
    fn("sab.mlp_w2", p.sab.mlp_w2);
    fn("sab.mlp_b2", p.sab.mlp_b2);
    if (p.nt.defined()) fn("nt", p.nt);
    fn("gate_logit", p.gate_logit);
    fn("enc_pos", p.enc_pos);
    for (std::size_t i = 0; i < p.encoder.size(); ++i)
        detail::visit_matb(p.encoder[i], "enc." + std::to_string(i), fn);
    fn("dec_proj_w", p.dec_proj_w);
    fn("dec_proj_b", p.dec_proj_b);
    fn("mask_token", p.mask_token);
    fn("dec_pos", p.dec_pos);
    for (std::size_t i = 0; i < p.decoder.size(); ++i)
        detail::visit_matb(p.decoder[i], "dec." + std::to_string(i), fn);
    fn("head_w", p.head_w);
    fn("head_b", p.head_b);
}

namespace detail {

inline Tensor xavier(Rng& rng, std::size_t fan_in, std::size_t fan_out, bool rg) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> d(fan_in * fan_out);
    for (double& v : d) v = rng.uniform(-a, a);
    return Tensor::from({fan_in, fan_out}, std::move(d), rg);
}

inline Tensor gauss(Rng& rng, Shape shape, double stddev, bool rg) {
    std::vector<double> d(shape_numel(shape));
    for (double& v : d) v = rng.normal(0.0, stddev);
    return Tensor::from(std::move(shape), std::move(d), rg);
}

inline AttentionWeights init_attention(Rng& rng, std::size_t d, bool rg) {
    AttentionWeights a;
    a.wq = xavier(rng, d, d, rg);
    a.bq = gauss(rng, {d}, 0.02, rg);
    a.wk = xavier(rng, d, d, rg);
    a.bk = gauss(rng, {d}, 0.02, rg);
    a.wv = xavier(rng, d, d, rg);
    a.bv = gauss(rng, {d}, 0.02, rg);
    a.wo = xavier(rng, d, d, rg);
    a.bo = gauss(rng, {d}, 0.02, rg);
    return a;
}

inline MatbWeights init_matb(Rng& rng, std::size_t d, bool rg) {
    MatbWeights m;
    m.ln1_g = Tensor::full({d}, 1.0, rg);
    m.ln1_b = gauss(rng, {d}, 0.02, rg);
    m.axis_attn = init_attention(rng, d, rg);
    m.plane_attn = init_attention(rng, d, rg);
    m.fc_w = xavier(rng, 2 * d, d, rg);
    m.fc_b = gauss(rng, {d}, 0.02, rg);
    m.ln2_g = Tensor::full({d}, 1.0, rg);
    m.ln2_b = gauss(rng, {d}, 0.02, rg);
    m.mlp_w1 = xavier(rng, d, 4 * d, rg);
    m.mlp_b1 = gauss(rng, {4 * d}, 0.02, rg);
    m.mlp_w2 = xavier(rng, 4 * d, d, rg);
    m.mlp_b2 = gauss(rng, {d}, 0.02, rg);
    return m;
}

}  // namespace detail

// Seeded initialization: weight matrices uniform(-a, a) with
// a = sqrt(6/(fan_in+fan_out)); biases, NT, positional tables and the mask
// token N(0, 0.02^2); layernorm gains 1; gate logit 0 (alpha = 0.5).
inline ModelParams init_params(const ModelConfig& cfg, bool requires_grad = false) {
    cfg.validate();
    const std::size_t d = cfg.embed_dim, dd = cfg.decoder_dim;
    const std::size_t pd = cfg.token_dim(), n = cfg.token_count();
    Rng rng(derive_seed(cfg.seed, 0x1a17));
    ModelParams p;
    p.w_lp = detail::xavier(rng, pd, d, requires_grad);
    p.b_lp = detail::gauss(rng, {d}, 0.02, requires_grad);
    p.w_se = detail::xavier(rng, pd, d, requires_grad);
    p.b_se = detail::gauss(rng, {d}, 0.02, requires_grad);
    p.sab.ln1_g = Tensor::full({d}, 1.0, requires_grad);
    p.sab.ln1_b = detail::gauss(rng, {d}, 0.02, requires_grad);
    p.sab.attn = detail::init_attention(rng, d, requires_grad);
    p.sab.ln2_g = Tensor::full({d}, 1.0, requires_grad);
    p.sab.ln2_b = detail::gauss(rng, {d}, 0.02, requires_grad);
    p.sab.mlp_w1 = detail::xavier(rng, d, 4 * d, requires_grad);
    p.sab.mlp_b1 = detail::gauss(rng, {4 * d}, 0.02, requires_grad);
    p.sab.mlp_w2 = detail::xavier(rng, 4 * d, d, requires_grad);
    p.sab.mlp_b2 = detail::gauss(rng, {d}, 0.02, requires_grad);
    if (cfg.nt_count > 0) p.nt = detail::gauss(rng, {cfg.nt_count, d}, 0.02, requires_grad);
    p.gate_logit = Tensor::from({1}, {0.0}, requires_grad);
    p.enc_pos = detail::gauss(rng, {n, d}, 0.02, requires_grad);
    for (std::size_t i = 0; i < cfg.encoder_depth; ++i)
        p.encoder.push_back(detail::init_matb(rng, d, requires_grad));
    p.dec_proj_w = detail::xavier(rng, d, dd, requires_grad);
    p.dec_proj_b = detail::gauss(rng, {dd}, 0.02, requires_grad);
    p.mask_token = detail::gauss(rng, {dd}, 0.02, requires_grad);
    p.dec_pos = detail::gauss(rng, {n, dd}, 0.02, requires_grad);
    for (std::size_t i = 0; i < cfg.decoder_depth; ++i)
        p.decoder.push_back(detail::init_matb(rng, dd, requires_grad));
    p.head_w = detail::xavier(rng, dd, pd, requires_grad);
    p.head_b = detail::gauss(rng, {pd}, 0.02, requires_grad);
    return p;
}

inline ModelParams clone_params(const ModelParams& src, bool requires_grad) {
    ModelParams copy = src;
    for_each_param(copy, [&](const std::string&, Tensor& t) { t = t.detached(requires_grad); });
    return copy;
}

inline void set_requires_grad(ModelParams& p, bool rg) {
    for_each_param(p, [&](const std::string&, Tensor& t) { t.set_requires_grad(rg); });
}

// ---------------------------------------------------------------------------
// Attention

// Full per-head weight matrices assembled from the group blocks; entries
// outside a group's support stay exactly zero.
struct AttentionProbe {
    std::size_t rows = 0;
    std::vector<std::vector<double>> head_weights;  // heads x (rows*rows)
};

// Group-restricted multi-head self-attention over x [n x d]. Rows
// [0, n_tokens) are spatial tokens partitioned by `groups`; the trailing
// n - n_tokens rows attend globally and are attendable from every group.
inline Tensor grouped_attention(const Tensor& x, const AttentionWeights& w, std::size_t heads,
                                const std::vector<std::vector<std::size_t>>& groups,
                                std::size_t n_tokens, AttentionProbe* probe = nullptr) {
    const std::size_t n = x.rows(), d = x.cols();
    if (d % heads) throw ShapeError("attention: width not divisible by head count");
    const std::size_t dh = d / heads;
    const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));
    if (n_tokens > n) throw ShapeError("attention: token count exceeds rows");

    std::vector<char> covered(n_tokens, 0);
    for (const auto& g : groups)
        for (std::size_t r : g) {
            if (r >= n_tokens || covered[r]) throw ShapeError("attention: groups must partition token rows");
            covered[r] = 1;
        }
    for (char c : covered)
        if (!c) throw ShapeError("attention: groups must cover all token rows");

    if (probe) {
        probe->rows = n;
        probe->head_weights.assign(heads, std::vector<double>(n * n, 0.0));
    }

    Tensor q = add_rowvec(matmul(x, w.wq), w.bq);
    Tensor k = add_rowvec(matmul(x, w.wk), w.bk);
    Tensor v = add_rowvec(matmul(x, w.wv), w.bv);

    std::vector<std::size_t> global_rows(n - n_tokens);
    for (std::size_t i = 0; i < global_rows.size(); ++i) global_rows[i] = n_tokens + i;

    std::vector<Tensor> blocks;
    std::vector<std::size_t> emitted_rows;
    emitted_rows.reserve(n);

    auto attend = [&](const std::vector<std::size_t>& q_rows, const std::vector<std::size_t>& kv_rows) {
        Tensor qg = take_rows(q, q_rows);
        Tensor kg = take_rows(k, kv_rows);
        Tensor vg = take_rows(v, kv_rows);
        std::vector<Tensor> head_out;
        head_out.reserve(heads);
        for (std::size_t h = 0; h < heads; ++h) {
            Tensor qh = slice_cols(qg, h * dh, dh);
            Tensor kh = slice_cols(kg, h * dh, dh);
            Tensor vh = slice_cols(vg, h * dh, dh);
            Tensor weights = softmax_rows(scale(matmul(qh, transpose(kh)), scale_factor));
            if (probe)
                for (std::size_t i = 0; i < q_rows.size(); ++i)
                    for (std::size_t j = 0; j < kv_rows.size(); ++j)
                        probe->head_weights[h][q_rows[i] * n + kv_rows[j]] = weights.at(i, j);
            head_out.push_back(matmul(weights, vh));
        }
        blocks.push_back(heads == 1 ? head_out[0] : concat_cols(head_out));
        emitted_rows.insert(emitted_rows.end(), q_rows.begin(), q_rows.end());
    };

    for (const auto& g : groups) {
        if (g.empty()) continue;
        std::vector<std::size_t> kv = g;
        kv.insert(kv.end(), global_rows.begin(), global_rows.end());
        attend(g, kv);
    }
    if (!global_rows.empty()) {
        std::vector<std::size_t> all(n);
        for (std::size_t i = 0; i < n; ++i) all[i] = i;
        attend(global_rows, all);
    }

    Tensor stacked = blocks.size() == 1 ? blocks[0] : concat_rows(blocks);
    std::vector<std::size_t> src_of(n);
    for (std::size_t pos = 0; pos < emitted_rows.size(); ++pos) src_of[emitted_rows[pos]] = pos;
    Tensor ordered = take_rows(stacked, src_of);
    return add_rowvec(matmul(ordered, w.wo), w.bo);
}

namespace detail {

inline Tensor mlp_forward(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                          const Tensor& b2) {
    return add_rowvec(matmul(gelu(add_rowvec(matmul(x, w1), b1)), w2), b2);
}

}  // namespace detail

// Pre-norm transformer block with full self-attention (the SAB).
inline Tensor sab_block(const Tensor& x, const SabWeights& w, std::size_t heads) {
    std::vector<std::vector<std::size_t>> all_rows(1, std::vector<std::size_t>(x.rows()));
    for (std::size_t i = 0; i < x.rows(); ++i) all_rows[0][i] = i;
    Tensor attn = grouped_attention(layernorm(x, w.ln1_g, w.ln1_b, kLayerNormEps), w.attn, heads,
                                    all_rows, x.rows());
    Tensor h = add(x, attn);
    Tensor m = detail::mlp_forward(layernorm(h, w.ln2_g, w.ln2_b, kLayerNormEps), w.mlp_w1, w.mlp_b1,
                                   w.mlp_w2, w.mlp_b2);
    return add(h, m);
}

struct MatbProbe {
    AttentionProbe axis, plane;
};

using TokenCoord = std::array<std::size_t, 3>;

inline std::vector<TokenCoord> coords_for(const std::vector<std::size_t>& token_ids, std::size_t g) {
    TokenGrid tg(g);
    std::vector<TokenCoord> out(token_ids.size());
    for (std::size_t i = 0; i < token_ids.size(); ++i) {
        tg.coords(token_ids[i], out[i][0], out[i][1], out[i][2]);
    }
    return out;
}

namespace detail {

inline std::vector<std::vector<std::size_t>> group_rows(const std::vector<TokenCoord>& coords,
                                                        Axis3 axis, std::size_t g, bool by_plane) {
    std::map<std::size_t, std::vector<std::size_t>> by_key;
    for (std::size_t r = 0; r < coords.size(); ++r) {
        const auto& c = coords[r];
        const std::size_t key = by_plane ? axis_coord(c[0], c[1], c[2], axis)
                                         : column_coord(c[0], c[1], c[2], axis, g);
        by_key[key].push_back(r);
    }
    std::vector<std::vector<std::size_t>> groups;
    groups.reserve(by_key.size());
    for (auto& [key, rows] : by_key) groups.push_back(std::move(rows));
    return groups;
}

}  // namespace detail

// One MATB: pre-norm parallel column-restricted (axis) and plane-restricted
// streams fused by an FC layer, residual add, then a pre-norm MLP sub-block.
// Rows beyond coords.size() are treated as global (NT) rows in both streams.
inline Tensor matb_block(const Tensor& x, const std::vector<TokenCoord>& coords, std::size_t grid_side,
                         Axis3 axis, const MatbWeights& w, std::size_t heads,
                         MatbProbe* probe = nullptr) {
    if (coords.size() > x.rows())
        throw ShapeError("matb_block: more coords than rows");
    const std::size_t n_tok = coords.size();
    Tensor u = layernorm(x, w.ln1_g, w.ln1_b, kLayerNormEps);
    Tensor h_axis = grouped_attention(u, w.axis_attn, heads,
                                      detail::group_rows(coords, axis, grid_side, false), n_tok,
                                      probe ? &probe->axis : nullptr);
    Tensor h_plane = grouped_attention(u, w.plane_attn, heads,
                                       detail::group_rows(coords, axis, grid_side, true), n_tok,
                                       probe ? &probe->plane : nullptr);
    Tensor fused = add_rowvec(matmul(concat_cols(h_axis, h_plane), w.fc_w), w.fc_b);
    Tensor h = add(x, fused);
    Tensor m = detail::mlp_forward(layernorm(h, w.ln2_g, w.ln2_b, kLayerNormEps), w.mlp_w1, w.mlp_b1,
                                   w.mlp_w2, w.mlp_b2);
    return add(h, m);
}

// ---------------------------------------------------------------------------
// Patch embedding (dual pathway with adaptive gate)

struct EmbedResult {
    Tensor tokens;  // fused embedding + positions, [m x d]
    Tensor nt_out;  // [K x d]; undefined when K = 0
    Tensor h_lp;    // linear-projection pathway, [m x d]
    Tensor h_se;    // attention pathway, [m x d]
    Tensor fused;   // gate blend before positions, [m x d]
};

// Embeds the token rows selected by `token_ids`. The LP pathway is a per-
// token projection; the SE pathway runs the SAB over the selected rows plus
// the NT tokens, so embeddings never see patches outside the selection.
inline EmbedResult embed_patch_subset(const PatchTokens& t, const std::vector<std::size_t>& token_ids,
                                      const ModelParams& p, const ModelConfig& cfg) {
    if (t.grid_side != cfg.grid_side() || t.patch_side != cfg.patch_side)
        throw ShapeError("embed: token geometry does not match the model config");
    if (token_ids.empty()) throw ShapeError("embed: empty token selection");
    const std::size_t m = token_ids.size(), pd = cfg.token_dim();
    std::vector<double> sel(m * pd);
    for (std::size_t i = 0; i < m; ++i) {
        if (token_ids[i] >= t.token_count()) throw ShapeError("embed: token id out of range");
        std::copy(t.row(token_ids[i]), t.row(token_ids[i]) + pd, sel.data() + i * pd);
    }
    Tensor x = Tensor::from({m, pd}, std::move(sel));

    EmbedResult r;
    r.h_lp = add_rowvec(matmul(x, p.w_lp), p.b_lp);
    Tensor x_se = add_rowvec(matmul(x, p.w_se), p.b_se);
    if (cfg.nt_count > 0) {
        Tensor seq = sab_block(concat_rows(x_se, p.nt), p.sab, cfg.heads);
        std::vector<std::size_t> front(m), back(cfg.nt_count);
        for (std::size_t i = 0; i < m; ++i) front[i] = i;
        for (std::size_t i = 0; i < cfg.nt_count; ++i) back[i] = m + i;
        r.h_se = take_rows(seq, front);
        r.nt_out = take_rows(seq, back);
    } else {
        r.h_se = sab_block(x_se, p.sab, cfg.heads);
    }
    Tensor alpha = sigmoid(p.gate_logit);
    Tensor one_minus = affine(alpha, -1.0, 1.0);
    r.fused = add(scale_by(r.h_lp, alpha), scale_by(r.h_se, one_minus));
    r.tokens = add(r.fused, take_rows(p.enc_pos, token_ids));
    return r;
}

inline EmbedResult embed_patches(const PatchTokens& t, const ModelParams& p, const ModelConfig& cfg) {
    std::vector<std::size_t> all(t.token_count());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return embed_patch_subset(t, all, p, cfg);
}

// ---------------------------------------------------------------------------
// Encoder / decoder / objective

// Visible tokens are embedded (masked rows never enter any attention), NT
// rows are appended, then the MATB encoder stack runs.
inline Tensor encode(const PatchTokens& t, const MaskSpec& mask, const ModelParams& p,
                     const ModelConfig& cfg) {
    if (mask.grid_side != cfg.grid_side())
        throw ShapeError("encode: mask grid does not match the model config");
    EmbedResult emb = embed_patch_subset(t, mask.visible, p, cfg);
    Tensor seq = cfg.nt_count > 0 ? concat_rows(emb.tokens, emb.nt_out) : emb.tokens;
    const std::vector<TokenCoord> coords = coords_for(mask.visible, cfg.grid_side());
    for (const MatbWeights& block : p.encoder)
        seq = matb_block(seq, coords, cfg.grid_side(), cfg.anisotropic_axis, block, cfg.heads);
    return seq;
}

// Encoder forward over the full (unmasked) token set; used by probing.
inline Tensor encode_full(const PatchTokens& t, const ModelParams& p, const ModelConfig& cfg) {
    EmbedResult emb = embed_patches(t, p, cfg);
    Tensor seq = cfg.nt_count > 0 ? concat_rows(emb.tokens, emb.nt_out) : emb.tokens;
    std::vector<std::size_t> all(cfg.token_count());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const std::vector<TokenCoord> coords = coords_for(all, cfg.grid_side());
    for (const MatbWeights& block : p.encoder)
        seq = matb_block(seq, coords, cfg.grid_side(), cfg.anisotropic_axis, block, cfg.heads);
    return seq;
}

// Projects the latent to decoder width, re-inserts the learnable mask token
// at masked grid positions, adds decoder positions, runs the decoder MATB
// stack over the full grid (+ NT rows), and maps tokens to p^3 voxels.
inline Tensor decode(const Tensor& latent, const MaskSpec& mask, const ModelParams& p,
                     const ModelConfig& cfg) {
    const std::size_t n_vis = mask.visible.size(), n_masked = mask.masked.size();
    const std::size_t n_tok = cfg.token_count(), K = cfg.nt_count;
    if (latent.rows() != n_vis + K)
        throw ShapeError("decode: latent rows " + std::to_string(latent.rows()) + " != visible+NT " +
                         std::to_string(n_vis + K));
    Tensor lat = add_rowvec(matmul(latent, p.dec_proj_w), p.dec_proj_b);

    std::vector<Tensor> parts;
    parts.push_back(lat);  // rows:[0, n_vis) visible latents, [n_vis, n_vis+K) NT
    parts.push_back(repeat_row(p.mask_token, n_masked));
    Tensor stacked = concat_rows(parts);

    // canonical order: grid tokens 0..n_tok-1, then NT rows
    std::vector<std::size_t> src_of(n_tok + K);
    for (std::size_t i = 0; i < n_vis; ++i) src_of[mask.visible[i]] = i;
    for (std::size_t i = 0; i < n_masked; ++i) src_of[mask.masked[i]] = n_vis + K + i;
    for (std::size_t i = 0; i < K; ++i) src_of[n_tok + i] = n_vis + i;
    Tensor seq = take_rows(stacked, src_of);

    Tensor pos = K > 0 ? concat_rows(p.dec_pos, Tensor::zeros({K, cfg.decoder_dim})) : p.dec_pos;
    seq = add(seq, pos);

    std::vector<std::size_t> all(n_tok);
    for (std::size_t i = 0; i < n_tok; ++i) all[i] = i;
    const std::vector<TokenCoord> coords = coords_for(all, cfg.grid_side());
    for (const MatbWeights& block : p.decoder)
        seq = matb_block(seq, coords, cfg.grid_side(), cfg.anisotropic_axis, block, cfg.heads);

    Tensor tokens_out = K > 0 ? take_rows(seq, all) : seq;
    return add_rowvec(matmul(tokens_out, p.head_w), p.head_b);
}

// Mean squared error over masked token rows only; the norm sums the p^3
// entries of each patch and the mean is over |M|.
inline Tensor masked_mse(const PatchTokens& x, const Tensor& xhat, const MaskSpec& mask) {
    if (mask.masked.empty()) throw ParamError("masked_mse: empty mask");
    if (xhat.rows() != x.token_count() || xhat.cols() != x.token_dim())
        throw ShapeError("masked_mse: prediction shape mismatch");
    Tensor target = Tensor::from({x.token_count(), x.token_dim()}, x.data);
    Tensor diff = sub(take_rows(xhat, mask.masked), take_rows(target, mask.masked));
    return scale(sum_all(mul(diff, diff)), 1.0 / static_cast<double>(mask.masked.size()));
}

// ---------------------------------------------------------------------------
// Full-volume reconstruction

struct ReconstructOptions {
    double noise_sigma = 0.1;
    std::uint64_t seed = 0;
    unsigned threads = 1;
};

struct ReconstructResult {
    Volume volume;
    std::vector<std::uint8_t> masked_voxels;  // 1 where the voxel's token was masked
};

// Per superpatch: corrupt, tokenize, mask (seeded by superpatch index),
// encode, decode; visible tokens are copied from the clean input and masked
// tokens come from the prediction. Parallel fan-out is bit-identical to
// sequential execution because every superpatch derives its own seed.
inline ReconstructResult reconstruct_volume(const Volume& v, const ModelParams& params,
                                            const ModelConfig& cfg, const ReconstructOptions& opt) {
    cfg.validate();
    SuperpatchGrid grid(v.height, v.width, v.depth, cfg.superpatch_side);
    const std::size_t count = grid.count();
    std::vector<std::pair<GridIndex, Volume>> parts(count);
    std::vector<std::vector<std::uint8_t>> masks(count);

    auto process = [&](std::size_t li) {
        const GridIndex g = grid.index(li);
        Volume clean = extract_superpatch(v, grid, g);
        const std::uint64_t sp_seed = derive_seed(opt.seed, 0xc357, li);
        Volume noisy = corrupt_gaussian(clean, opt.noise_sigma, derive_seed(sp_seed, 1));
        MaskSpec mask = gen_mask(cfg.grid_side(), cfg.mask_ratio, cfg.strategy, cfg.anisotropic_axis,
                                 derive_seed(sp_seed, 2));
        PatchTokens tok_noisy = patchify(noisy, cfg.patch_side);
        PatchTokens tok_clean = patchify(clean, cfg.patch_side);
        Tensor latent = encode(tok_noisy, mask, params, cfg);
        Tensor xhat = decode(latent, mask, params, cfg);

        PatchTokens out = tok_clean;
        const std::size_t pd = out.token_dim();
        for (std::size_t mi : mask.masked) {
            const double* src = xhat.values().data() + mi * pd;
            std::copy(src, src + pd, out.row(mi));
        }
        parts[li] = {g, unpatchify(out)};

        std::vector<std::uint8_t> masked_flag(cfg.token_count(), 0);
        for (std::size_t mi : mask.masked) masked_flag[mi] = 1;
        masks[li] = std::move(masked_flag);
    };

    if (opt.threads <= 1) {
        for (std::size_t li = 0; li < count; ++li) process(li);
    } else {
        std::vector<std::thread> pool;
        std::atomic<std::size_t> next{0};
        for (unsigned t = 0; t < opt.threads; ++t)
            pool.emplace_back([&] {
                for (std::size_t li = next.fetch_add(1); li < count; li = next.fetch_add(1)) process(li);
            });
        for (auto& th : pool) th.join();
    }

    ReconstructResult result;
    result.volume = stitch(parts, grid);
    result.masked_voxels.assign(v.size(), 0);
    const std::size_t s = cfg.superpatch_side, ps = cfg.patch_side, gs = cfg.grid_side();
    TokenGrid tg(gs);
    for (std::size_t li = 0; li < count; ++li) {
        const GridIndex g = grid.index(li);
        for (std::size_t t = 0; t < tg.count(); ++t) {
            if (!masks[li][t]) continue;
            std::size_t x, y, z;
            tg.coords(t, x, y, z);
            for (std::size_t di = 0; di < ps; ++di)
                for (std::size_t dj = 0; dj < ps; ++dj) {
                    const std::size_t base =
                        v.index(g.a * s + x * ps + di, g.b * s + y * ps + dj, g.c * s + z * ps);
                    for (std::size_t dk = 0; dk < ps; ++dk) result.masked_voxels[base + dk] = 1;
                }
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Checkpoints (NEMC)
//
//   "NEMC" | version u32 = 1 | json_len u32 | UTF-8 JSON | tensor_count u32 |
//   per tensor: name_len u32 | name | rank u32 | extents u32 ... |
//               numel float64 little-endian
//
// The JSON blob holds the model config under "model" plus optional extras
// (training state); tensors appear in canonical order, optimizer moments
// ride along under "opt.m." / "opt.v." names.

struct Checkpoint {
    ModelConfig config;
    ModelParams params;
    nlohmann::json extra;  // anything beyond "model"
    std::vector<std::pair<std::string, Tensor>> aux;  // e.g. optimizer state
};

namespace detail {

inline void put_tensor(std::string& out, const std::string& name, const Tensor& t) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.shape().size()));
    for (std::size_t e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    const std::size_t base = out.size();
    out.resize(base + t.numel() * 8);
    std::memcpy(out.data() + base, t.values().data(), t.numel() * 8);
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    nlohmann::json j = ck.extra;
    j["model"] = ck.config;
    const std::string blob = j.dump();

    std::string out;
    out += "NEMC";
    detail::put_u32(out, 1);
    detail::put_u32(out, static_cast<std::uint32_t>(blob.size()));
    out += blob;

    std::vector<std::pair<std::string, Tensor>> tensors;
    for_each_param(const_cast<ModelParams&>(ck.params),
                   [&](const std::string& name, Tensor& t) { tensors.emplace_back(name, t); });
    for (const auto& [name, t] : ck.aux) tensors.emplace_back(name, t);

    detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) detail::put_tensor(out, name, t);
    detail::write_file(path, out, "checkpoint");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    const std::string buf = detail::read_file(path, "checkpoint");
    detail::ByteReader r(buf, "checkpoint");
    char magic[4];
    r.raw(magic, 4);
    if (std::memcmp(magic, "NEMC", 4) != 0)
        throw FormatError("checkpoint: bad magic at byte offset 0 in " + path);
    const std::uint32_t version = r.u32();
    if (version != 1)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " at byte offset 4");
    const std::uint32_t json_len = r.u32();
    r.need(json_len);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(buf.substr(r.pos, json_len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint: bad config blob: ") + e.what());
    }
    r.pos += json_len;

    Checkpoint ck;
    if (!j.contains("model")) throw FormatError("checkpoint: config blob lacks a model section");
    ck.config = j.at("model").get<ModelConfig>();
    j.erase("model");
    ck.extra = std::move(j);

    const std::uint32_t tensor_count = r.u32();
    std::map<std::string, Tensor> by_name;
    std::vector<std::pair<std::string, Tensor>> in_order;
    for (std::uint32_t i = 0; i < tensor_count; ++i) {
        const std::uint32_t name_len = r.u32();
        r.need(name_len);
        std::string name = buf.substr(r.pos, name_len);
        r.pos += name_len;
        const std::uint32_t rank = r.u32();
        Shape shape(rank);
        std::size_t numel = 1;
        for (std::uint32_t k = 0; k < rank; ++k) {
            shape[k] = r.u32();
            numel *= shape[k];
        }
        std::vector<double> data(numel);
        r.raw(data.data(), numel * 8);
        Tensor t = Tensor::from(std::move(shape), std::move(data));
        if (!by_name.emplace(name, t).second)
            throw FormatError("checkpoint: duplicate tensor '" + name + "'");
        in_order.emplace_back(std::move(name), std::move(t));
    }

    ck.params = init_params(ck.config);
    for_each_param(ck.params, [&](const std::string& name, Tensor& t) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw FormatError("checkpoint: missing tensor '" + name + "'");
        if (it->second.shape() != t.shape())
            throw FormatError("checkpoint: tensor '" + name + "' has unexpected shape");
        t = it->second;
        by_name.erase(it);
    });
    for (auto& [name, t] : in_order)
        if (by_name.count(name)) ck.aux.emplace_back(name, t);
    return ck;
}

}  // namespace nemesis
