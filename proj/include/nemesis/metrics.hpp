#pragma once

// Reconstruction quality (PSNR, SSIM over cubic sliding windows) and the
// analytic transformer FLOP model behind the efficiency report.
//
// FLOP convention, counted as 2 FLOPs per multiply-accumulate, attention
// projections and MLP only (no layernorm/softmax/bias terms):
//   per block: 8*n*d^2 (QKV + output projections)
//            + 4*n^2*d (scores + weighted sum)
//            + 4*e*n*d^2 (MLP at expansion e)
//   total: depth * block + 2*n*io_dim*d (input embedding, when io_dim > 0)
//        + 2*n*d*io_dim (output head, when io_dim > 0 and include_decoder)
// Head count does not change the MAC count and is kept for bookkeeping.

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "nemesis/errors.hpp"
#include "nemesis/model.hpp"
#include "nemesis/volume.hpp"

namespace nemesis {

// ---------------------------------------------------------------------------
// PSNR

// 10*log10(peak^2/MSE); +inf when the volumes agree on the region.
// `region` (optional) restricts the mean to voxels with nonzero flags.
inline double psnr(const Volume& ref, const Volume& test, double peak,
                   const std::vector<std::uint8_t>* region = nullptr) {
    if (ref.height != test.height || ref.width != test.width || ref.depth != test.depth)
        throw ShapeError("psnr: volume extents differ");
    if (peak <= 0.0) throw ParamError("psnr: peak must be > 0");
    if (region && region->size() != ref.size()) throw ShapeError("psnr: region mask size mismatch");
    double se = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        if (region && !(*region)[i]) continue;
        const double d = static_cast<double>(ref.voxels[i]) - static_cast<double>(test.voxels[i]);
        se += d * d;
        ++n;
    }
    if (n == 0) throw ParamError("psnr: empty region");
    const double mse = se / static_cast<double>(n);
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

// "inf" sentinel for report output.
inline std::string format_db(double db) {
    if (std::isinf(db)) return "inf";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", db);
    return buf;
}

// ---------------------------------------------------------------------------
// SSIM

// Mean local SSIM over all fully-contained cubic windows, uniform weights,
// population statistics; C1 = (k1*peak)^2, C2 = (k2*peak)^2.
inline double ssim(const Volume& ref, const Volume& test, std::size_t window = 7, double k1 = 0.01,
                   double k2 = 0.03, double peak = 1.0) {
    if (ref.height != test.height || ref.width != test.width || ref.depth != test.depth)
        throw ShapeError("ssim: volume extents differ");
    if (window % 2 == 0 || window == 0) throw ParamError("ssim: window must be odd");
    if (window > ref.height || window > ref.width || window > ref.depth)
        throw ParamError("ssim: window exceeds volume extent");
    const double c1 = (k1 * peak) * (k1 * peak);
    const double c2 = (k2 * peak) * (k2 * peak);
    const std::size_t wn = window * window * window;
    const double n = static_cast<double>(wn);

    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i + window <= ref.height; ++i)
        for (std::size_t j = 0; j + window <= ref.width; ++j)
            for (std::size_t k = 0; k + window <= ref.depth; ++k) {
                double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
                for (std::size_t a = 0; a < window; ++a)
                    for (std::size_t b = 0; b < window; ++b) {
                        const float* xr = ref.voxels.data() + ref.index(i + a, j + b, k);
                        const float* yr = test.voxels.data() + test.index(i + a, j + b, k);
                        for (std::size_t c = 0; c < window; ++c) {
                            const double x = xr[c], y = yr[c];
                            sx += x;
                            sy += y;
                            sxx += x * x;
                            syy += y * y;
                            sxy += x * y;
                        }
                    }
                const double mx = sx / n, my = sy / n;
                const double vx = sxx / n - mx * mx;
                const double vy = syy / n - my * my;
                const double cov = sxy / n - mx * my;
                const double val = ((2 * mx * my + c1) * (2 * cov + c2)) /
                                   ((mx * mx + my * my + c1) * (vx + vy + c2));
                total += val;
                ++count;
            }
    return total / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// FLOP model

struct CostConfig {
    std::size_t tokens = 512;      // n
    std::size_t embed_dim = 768;   // d
    std::size_t depth = 12;
    std::size_t mlp_expansion = 4;
    std::size_t heads = 12;
    bool include_decoder = false;  // adds the output head when io_dim > 0
    std::size_t io_dim = 0;        // p^3; 0 drops the embed/head terms

    void validate() const {
        if (tokens == 0 || embed_dim == 0 || depth == 0 || mlp_expansion == 0 || heads == 0)
            throw ParamError("cost: all extents must be positive");
    }
};

struct FlopsBreakdown {
    double projections = 0;  // 8*n*d^2 per block
    double attention = 0;    // 4*n^2*d per block
    double mlp = 0;          // 4*e*n*d^2 per block
    double embed = 0;        // 2*n*io*d
    double head = 0;         // 2*n*d*io
    double total() const { return projections + attention + mlp + embed + head; }
};

inline FlopsBreakdown flops_breakdown(const CostConfig& cc) {
    cc.validate();
    const double n = static_cast<double>(cc.tokens);
    const double d = static_cast<double>(cc.embed_dim);
    const double e = static_cast<double>(cc.mlp_expansion);
    const double depth = static_cast<double>(cc.depth);
    FlopsBreakdown b;
    b.projections = depth * 8.0 * n * d * d;
    b.attention = depth * 4.0 * n * n * d;
    b.mlp = depth * 4.0 * e * n * d * d;
    if (cc.io_dim > 0) {
        const double io = static_cast<double>(cc.io_dim);
        b.embed = 2.0 * n * io * d;
        if (cc.include_decoder) b.head = 2.0 * n * d * io;
    }
    return b;
}

inline double flops_forward(const CostConfig& cc) { return flops_breakdown(cc).total(); }

inline double gflops_forward(const CostConfig& cc) { return flops_forward(cc) * 1e-9; }

// ---------------------------------------------------------------------------
// Efficiency report

struct EfficiencyRow {
    std::string label;
    std::size_t tokens = 0;
    std::size_t embed_dim = 0;
    std::size_t depth = 0;
    double gflops_per_pass = 0.0;
    double passes_per_volume = 0.0;
    double gflops_full_volume = 0.0;
    double ratio_vs_full_vit = 0.0;  // full-volume ViT pass / this row's pass
};

struct EfficiencyReport {
    std::vector<EfficiencyRow> rows;
};

// Compares one superpatch pass against a hypothetical full-volume ViT pass
// at equal width/depth, and prices the stitched whole-volume run.
inline EfficiencyReport efficiency_report(const ModelConfig& mc, std::size_t vol_h, std::size_t vol_w,
                                          std::size_t vol_d, std::size_t depth, std::size_t embed_dim) {
    if (vol_h % mc.superpatch_side || vol_w % mc.superpatch_side || vol_d % mc.superpatch_side)
        throw GeometryError("efficiency: superpatch side does not divide the volume");
    if (vol_h % mc.patch_side || vol_w % mc.patch_side || vol_d % mc.patch_side)
        throw GeometryError("efficiency: patch side does not divide the volume");
    const std::size_t passes = (vol_h / mc.superpatch_side) * (vol_w / mc.superpatch_side) *
                               (vol_d / mc.superpatch_side);
    const std::size_t n_sp = mc.token_count();
    const std::size_t n_full = (vol_h / mc.patch_side) * (vol_w / mc.patch_side) * (vol_d / mc.patch_side);

    CostConfig sp;
    sp.tokens = n_sp;
    sp.embed_dim = embed_dim;
    sp.depth = depth;
    sp.heads = mc.heads;
    sp.io_dim = mc.token_dim();
    sp.include_decoder = true;
    const double g_sp = gflops_forward(sp);

    CostConfig full = sp;
    full.tokens = n_full;
    const double g_full = gflops_forward(full);

    CostConfig masked = sp;
    masked.tokens = std::max<std::size_t>(1, n_sp - detail::llround_positive(
                                                     mc.mask_ratio * static_cast<double>(n_sp)));
    const double g_masked = gflops_forward(masked);

    EfficiencyReport rep;
    rep.rows.push_back({"superpatch_pass", n_sp, embed_dim, depth, g_sp,
                        static_cast<double>(passes), g_sp * static_cast<double>(passes),
                        g_full / g_sp});
    rep.rows.push_back({"superpatch_pass_masked_encoder", masked.tokens, embed_dim, depth, g_masked,
                        static_cast<double>(passes), g_masked * static_cast<double>(passes),
                        g_full / g_masked});
    rep.rows.push_back({"full_volume_vit", n_full, embed_dim, depth, g_full, 1.0, g_full, 1.0});
    return rep;
}

inline std::string efficiency_csv(const EfficiencyReport& rep) {
    std::string out = "label,tokens,embed_dim,depth,gflops_per_pass,passes_per_volume,"
                      "gflops_full_volume,ratio_vs_full_vit\n";
    char line[256];
    for (const EfficiencyRow& r : rep.rows) {
        std::snprintf(line, sizeof(line), "%s,%zu,%zu,%zu,%.6f,%.1f,%.6f,%.3f\n", r.label.c_str(),
                      r.tokens, r.embed_dim, r.depth, r.gflops_per_pass, r.passes_per_volume,
                      r.gflops_full_volume, r.ratio_vs_full_vit);
        out += line;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Quality report

struct QualityReport {
    std::string strategy;
    double ratio = 0.0;
    double psnr_masked_db = 0.0;  // +inf possible
    double psnr_full_db = 0.0;
    double ssim_value = 0.0;
    nlohmann::json config_snapshot;
};

inline std::string quality_csv(const std::vector<QualityReport>& rows) {
    std::string out = "strategy,ratio,psnr_masked_db,psnr_full_db,ssim\n";
    char line[256];
    for (const QualityReport& r : rows) {
        std::snprintf(line, sizeof(line), "%s,%.2f,%s,%s,%.6f\n", r.strategy.c_str(), r.ratio,
                      format_db(r.psnr_masked_db).c_str(), format_db(r.psnr_full_db).c_str(),
                      r.ssim_value);
        out += line;
    }
    return out;
}

inline nlohmann::json quality_json(const std::vector<QualityReport>& rows) {
    nlohmann::json arr = nlohmann::json::array();
    for (const QualityReport& r : rows) {
        nlohmann::json j;
        j["strategy"] = r.strategy;
        j["ratio"] = r.ratio;
        j["psnr_masked_db"] = std::isinf(r.psnr_masked_db) ? nlohmann::json("inf")
                                                           : nlohmann::json(r.psnr_masked_db);
        j["psnr_full_db"] = std::isinf(r.psnr_full_db) ? nlohmann::json("inf")
                                                       : nlohmann::json(r.psnr_full_db);
        j["ssim"] = r.ssim_value;
        j["config"] = r.config_snapshot;
        arr.push_back(j);
    }
    return arr;
}

}  // namespace nemesis
