#pragma once

// Downstream protocol on labelled volumes: superpatch-level multi-label
// organ presence by voxel threshold, frozen-backbone feature extraction
// (mean pool over patch tokens), per-class logistic regression, AUROC with
// midrank tie handling, macro F1, and the label-efficiency sweep.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "nemesis/errors.hpp"
#include "nemesis/model.hpp"
#include "nemesis/rng.hpp"
#include "nemesis/superpatch.hpp"
#include "nemesis/volume.hpp"

namespace nemesis {

struct ProbeConfig {
    std::size_t voxel_threshold = 100;
    std::size_t organ_count = 8;  // C
    std::vector<double> label_fractions = {0.10, 0.25, 0.50, 1.00};
    std::size_t classifier_epochs = 400;
    double classifier_lr = 0.5;
    double f1_threshold = 0.5;
    std::uint64_t seed = 5;
    bool pool_nt = false;  // exploratory: pool NT rows instead of patch tokens

    void validate() const {
        if (voxel_threshold < 1) throw ParamError("probe: voxel threshold must be >= 1");
        if (organ_count == 0) throw ParamError("probe: organ count must be >= 1");
        if (!(f1_threshold > 0.0 && f1_threshold < 1.0))
            throw ParamError("probe: F1 threshold must lie in (0,1)");
        for (double f : label_fractions)
            if (!(f > 0.0 && f <= 1.0)) throw ParamError("probe: label fractions must lie in (0,1]");
    }
};

struct ProbeRow {
    std::string id;
    std::vector<double> features;   // [d]
    std::vector<std::uint8_t> targets;  // [C]
};

struct ProbeTable {
    std::vector<ProbeRow> rows;

    std::size_t feature_dim() const { return rows.empty() ? 0 : rows[0].features.size(); }
    std::size_t class_count() const { return rows.empty() ? 0 : rows[0].targets.size(); }
};

// ---------------------------------------------------------------------------
// Labels

// Organ c is present in a superpatch iff its voxel count there reaches the
// threshold (inclusive).
inline std::vector<std::vector<std::uint8_t>> label_superpatches(const LabelGrid& labels,
                                                                 const SuperpatchGrid& grid,
                                                                 std::size_t threshold,
                                                                 std::size_t organ_count) {
    if (labels.height != grid.height || labels.width != grid.width || labels.depth != grid.depth)
        throw ShapeError("label_superpatches: label grid extents do not match the superpatch grid");
    if (threshold < 1) throw ParamError("label_superpatches: threshold must be >= 1");
    std::vector<std::vector<std::size_t>> counts(grid.count(),
                                                 std::vector<std::size_t>(organ_count, 0));
    const std::size_t s = grid.side;
    for (std::size_t i = 0; i < labels.height; ++i)
        for (std::size_t j = 0; j < labels.width; ++j)
            for (std::size_t k = 0; k < labels.depth; ++k) {
                const std::uint16_t organ = labels.at(i, j, k);
                if (organ == 0 || organ > organ_count) continue;
                const std::size_t li = grid.linear({i / s, j / s, k / s});
                counts[li][organ - 1] += 1;
            }
    std::vector<std::vector<std::uint8_t>> bits(grid.count(),
                                                std::vector<std::uint8_t>(organ_count, 0));
    for (std::size_t li = 0; li < grid.count(); ++li)
        for (std::size_t c = 0; c < organ_count; ++c) bits[li][c] = counts[li][c] >= threshold ? 1 : 0;
    return bits;
}

// ---------------------------------------------------------------------------
// Features

// Frozen-backbone features for every superpatch of a clean volume: full
// token set (no mask, no corruption), encoder forward, mean pool over patch
// tokens (NT rows excluded; pool_nt pools NT rows instead).
inline std::vector<std::vector<double>> extract_features(const Volume& v, const ModelParams& params,
                                                         const ModelConfig& cfg, bool pool_nt = false) {
    SuperpatchGrid grid(v.height, v.width, v.depth, cfg.superpatch_side);
    const std::size_t n_tok = cfg.token_count(), d = cfg.embed_dim, K = cfg.nt_count;
    if (pool_nt && K == 0) throw ParamError("extract_features: NT pooling requires nt_count > 0");
    std::vector<std::vector<double>> features(grid.count());
    for (std::size_t li = 0; li < grid.count(); ++li) {
        Volume sp = extract_superpatch(v, grid, grid.index(li));
        PatchTokens tokens = patchify(sp, cfg.patch_side);
        Tensor out = encode_full(tokens, params, cfg);
        std::vector<double> pooled(d, 0.0);
        const std::size_t begin = pool_nt ? n_tok : 0;
        const std::size_t end = pool_nt ? n_tok + K : n_tok;
        for (std::size_t r = begin; r < end; ++r)
            for (std::size_t c = 0; c < d; ++c) pooled[c] += out.at(r, c);
        for (double& x : pooled) x /= static_cast<double>(end - begin);
        features[li] = std::move(pooled);
    }
    return features;
}

// Builds the probe table for one labelled volume; row ids are
// "<volume_id>_sp<linear index>".
inline void append_probe_rows(ProbeTable& table, const std::string& volume_id, const Volume& v,
                              const LabelGrid& labels, const ModelParams& params,
                              const ModelConfig& cfg, const ProbeConfig& pc) {
    SuperpatchGrid grid(v.height, v.width, v.depth, cfg.superpatch_side);
    auto feats = extract_features(v, params, cfg, pc.pool_nt);
    auto bits = label_superpatches(labels, grid, pc.voxel_threshold, pc.organ_count);
    for (std::size_t li = 0; li < grid.count(); ++li) {
        ProbeRow row;
        row.id = volume_id + "_sp" + std::to_string(li);
        row.features = std::move(feats[li]);
        row.targets = std::move(bits[li]);
        table.rows.push_back(std::move(row));
    }
}

// ---------------------------------------------------------------------------
// Linear classifier

struct LinearProbe {
    std::vector<double> weights;       // [d x C], column-major per class c: weights[f*C + c]
    std::vector<double> bias;          // [C]
    std::vector<std::uint8_t> degenerate;  // per class: 1 if train split had one class only
};

inline double probe_logit(const LinearProbe& lp, const std::vector<double>& feat, std::size_t c) {
    const std::size_t C = lp.bias.size();
    double z = lp.bias[c];
    for (std::size_t f = 0; f < feat.size(); ++f) z += feat[f] * lp.weights[f * C + c];
    return z;
}

// Per-class logistic regression by full-batch gradient descent on
// standardized features; the returned weights fold the standardization back
// into raw feature space. Deterministic for a fixed config.
inline LinearProbe train_linear(const ProbeTable& train, const ProbeConfig& pc) {
    if (train.rows.empty()) throw ParamError("train_linear: empty table");
    const std::size_t n = train.rows.size(), d = train.feature_dim(), C = train.class_count();

    // feature standardization (population std, floor for constants)
    std::vector<double> mean(d, 0.0), stddev(d, 0.0);
    for (const ProbeRow& r : train.rows)
        for (std::size_t f = 0; f < d; ++f) mean[f] += r.features[f];
    for (double& m : mean) m /= static_cast<double>(n);
    for (const ProbeRow& r : train.rows)
        for (std::size_t f = 0; f < d; ++f) {
            const double dv = r.features[f] - mean[f];
            stddev[f] += dv * dv;
        }
    for (double& s : stddev) s = std::max(std::sqrt(s / static_cast<double>(n)), 1e-8);

    std::vector<double> z(n * d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t f = 0; f < d; ++f)
            z[i * d + f] = (train.rows[i].features[f] - mean[f]) / stddev[f];

    LinearProbe lp;
    lp.weights.assign(d * C, 0.0);
    lp.bias.assign(C, 0.0);
    lp.degenerate.assign(C, 0);

    for (std::size_t c = 0; c < C; ++c) {
        std::size_t positives = 0;
        for (const ProbeRow& r : train.rows) positives += r.targets[c];
        if (positives == 0 || positives == n) {
            lp.degenerate[c] = 1;
            continue;
        }
        std::vector<double> w(d, 0.0);
        double b = 0.0;
        for (std::size_t epoch = 0; epoch < pc.classifier_epochs; ++epoch) {
            std::vector<double> gw(d, 0.0);
            double gb = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                double logit = b;
                const double* zi = z.data() + i * d;
                for (std::size_t f = 0; f < d; ++f) logit += zi[f] * w[f];
                const double prob = logit >= 0.0 ? 1.0 / (1.0 + std::exp(-logit))
                                                 : std::exp(logit) / (1.0 + std::exp(logit));
                const double err = prob - static_cast<double>(train.rows[i].targets[c]);
                for (std::size_t f = 0; f < d; ++f) gw[f] += err * zi[f];
                gb += err;
            }
            const double inv_n = 1.0 / static_cast<double>(n);
            for (std::size_t f = 0; f < d; ++f) w[f] -= pc.classifier_lr * gw[f] * inv_n;
            b -= pc.classifier_lr * gb * inv_n;
        }
        // fold standardization into raw-space weights
        double shift = 0.0;
        for (std::size_t f = 0; f < d; ++f) {
            const double raw_w = w[f] / stddev[f];
            lp.weights[f * C + c] = raw_w;
            shift += raw_w * mean[f];
        }
        lp.bias[c] = b - shift;
    }
    return lp;
}

// Mean logistic loss of a trained probe on its table (convexity checks).
inline double logistic_loss(const LinearProbe& lp, const ProbeTable& table, std::size_t c) {
    double total = 0.0;
    for (const ProbeRow& r : table.rows) {
        const double zl = probe_logit(lp, r.features, c);
        // log(1 + exp(-y*z)) with y in {-1, +1}, stable form
        const double yz = (r.targets[c] ? 1.0 : -1.0) * zl;
        total += yz > 0.0 ? std::log1p(std::exp(-yz)) : -yz + std::log1p(std::exp(yz));
    }
    return total / static_cast<double>(table.rows.size());
}

// ---------------------------------------------------------------------------
// Metrics

// Rank-based AUROC (Mann-Whitney) with midrank tie handling. Requires both
// classes; callers treat absent classes as "undefined".
inline double auroc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
    if (scores.size() != labels.size()) throw ShapeError("auroc: scores/labels size mismatch");
    const std::size_t n = scores.size();
    std::size_t n_pos = 0;
    for (std::uint8_t l : labels) n_pos += l ? 1 : 0;
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) throw ParamError("auroc: needs both classes");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // midranks: ties share the average of their 1-based rank range
    std::vector<double> rank(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double mid = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
        i = j + 1;
    }
    double rank_sum_pos = 0.0;
    for (std::size_t k = 0; k < n; ++k)
        if (labels[k]) rank_sum_pos += rank[k];
    const double u = rank_sum_pos - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0;
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// Macro AUROC across classes; classes with a single label value are skipped
// and reported through `evaluated` when provided.
inline double macro_auroc(const std::vector<std::vector<double>>& scores,
                          const std::vector<std::vector<std::uint8_t>>& labels,
                          std::vector<std::uint8_t>* evaluated = nullptr) {
    const std::size_t C = scores.size();
    if (labels.size() != C) throw ShapeError("macro_auroc: class count mismatch");
    double total = 0.0;
    std::size_t used = 0;
    if (evaluated) evaluated->assign(C, 0);
    for (std::size_t c = 0; c < C; ++c) {
        std::size_t pos = 0;
        for (std::uint8_t l : labels[c]) pos += l ? 1 : 0;
        if (pos == 0 || pos == labels[c].size()) continue;
        total += auroc(scores[c], labels[c]);
        ++used;
        if (evaluated) (*evaluated)[c] = 1;
    }
    if (used == 0) throw ParamError("macro_auroc: no class has both labels");
    return total / static_cast<double>(used);
}

// Per-class F1 at the probability threshold, macro-averaged. F1 = 0 when a
// class has no true positives and no predicted positives.
inline double macro_f1(const std::vector<std::vector<double>>& probs,
                       const std::vector<std::vector<std::uint8_t>>& labels, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0)) throw ParamError("macro_f1: threshold must be in (0,1)");
    const std::size_t C = probs.size();
    if (labels.size() != C) throw ShapeError("macro_f1: class count mismatch");
    double total = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
        std::size_t tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < probs[c].size(); ++i) {
            const bool pred = probs[c][i] > threshold;
            const bool truth = labels[c][i] != 0;
            tp += pred && truth;
            fp += pred && !truth;
            fn += !pred && truth;
        }
        const double denom = 2.0 * tp + fp + fn;
        total += denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(tp) / denom;
    }
    return total / static_cast<double>(C);
}

inline double sigmoid_value(double z) {
    return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

// ---------------------------------------------------------------------------
// Evaluation + label sweep

struct ProbeEval {
    double auroc_macro = 0.0;
    double f1_macro = 0.0;
    std::vector<std::uint8_t> auroc_evaluated;  // per class
};

inline ProbeEval evaluate_probe(const LinearProbe& lp, const ProbeTable& test, double f1_threshold) {
    if (test.rows.empty()) throw ParamError("evaluate_probe: empty test table");
    const std::size_t C = test.class_count();
    std::vector<std::vector<double>> scores(C), probs(C);
    std::vector<std::vector<std::uint8_t>> labels(C);
    for (std::size_t c = 0; c < C; ++c) {
        for (const ProbeRow& r : test.rows) {
            const double z = lp.degenerate[c] ? 0.0 : probe_logit(lp, r.features, c);
            scores[c].push_back(z);
            probs[c].push_back(lp.degenerate[c] ? 0.0 : sigmoid_value(z));
            labels[c].push_back(r.targets[c]);
        }
    }
    ProbeEval ev;
    ev.auroc_macro = macro_auroc(scores, labels, &ev.auroc_evaluated);
    ev.f1_macro = macro_f1(probs, labels, f1_threshold);
    return ev;
}

struct SweepRow {
    double fraction = 0.0;
    std::size_t train_rows = 0;
    double auroc_macro = 0.0;
    double f1_macro = 0.0;
    std::size_t skipped_classes = 0;  // flagged out of the AUROC mean
};

// Stratified-where-possible subsample: one positive row per class first
// (when the full split has one), remainder uniform; selected rows keep
// their original order so fraction 1.0 reproduces the full result exactly.
inline std::vector<std::size_t> subsample_rows(const ProbeTable& train, double fraction,
                                               std::uint64_t seed) {
    const std::size_t n = train.rows.size();
    const std::size_t target = std::max<std::size_t>(1, detail::llround_positive(fraction * n));
    if (target >= n) {
        std::vector<std::size_t> all(n);
        std::iota(all.begin(), all.end(), 0);
        return all;
    }
    Rng rng(seed);
    const std::size_t C = train.class_count();
    std::vector<char> chosen(n, 0);
    std::size_t chosen_count = 0;
    for (std::size_t c = 0; c < C && chosen_count < target; ++c) {
        std::vector<std::size_t> pos;
        for (std::size_t i = 0; i < n; ++i)
            if (train.rows[i].targets[c] && !chosen[i]) pos.push_back(i);
        bool covered = false;
        for (std::size_t i = 0; i < n; ++i)
            if (chosen[i] && train.rows[i].targets[c]) covered = true;
        if (covered || pos.empty()) continue;
        const std::size_t pick = pos[rng.uniform_index(pos.size())];
        chosen[pick] = 1;
        ++chosen_count;
    }
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < n; ++i)
        if (!chosen[i]) rest.push_back(i);
    rng.shuffle(rest);
    for (std::size_t i = 0; chosen_count < target && i < rest.size(); ++i) {
        chosen[rest[i]] = 1;
        ++chosen_count;
    }
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < n; ++i)
        if (chosen[i]) out.push_back(i);
    return out;
}

inline std::vector<SweepRow> label_sweep(const ProbeTable& train, const ProbeTable& test,
                                         const ProbeConfig& pc) {
    pc.validate();
    if (train.feature_dim() != test.feature_dim() || train.class_count() != test.class_count())
        throw ShapeError("label_sweep: train/test tables disagree");
    std::vector<SweepRow> out;
    for (double f : pc.label_fractions) {
        const auto keep = subsample_rows(train, f, derive_seed(pc.seed, 0xf2ac,
                                                               static_cast<std::uint64_t>(f * 1e6)));
        ProbeTable sub;
        for (std::size_t i : keep) sub.rows.push_back(train.rows[i]);
        LinearProbe lp = train_linear(sub, pc);
        ProbeEval ev = evaluate_probe(lp, test, pc.f1_threshold);
        SweepRow row;
        row.fraction = f;
        row.train_rows = keep.size();
        row.auroc_macro = ev.auroc_macro;
        row.f1_macro = ev.f1_macro;
        for (std::size_t c = 0; c < lp.degenerate.size(); ++c)
            row.skipped_classes += lp.degenerate[c] || !ev.auroc_evaluated[c];
        out.push_back(row);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Serialization

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::string out = "fraction,train_rows,auroc_macro,f1_macro,skipped_classes\n";
    char line[160];
    for (const SweepRow& r : rows) {
        std::snprintf(line, sizeof(line), "%.2f,%zu,%.6f,%.6f,%zu\n", r.fraction, r.train_rows,
                      r.auroc_macro, r.f1_macro, r.skipped_classes);
        out += line;
    }
    return out;
}

// CSV: id, d feature columns, C label columns.
inline void write_probe_table_csv(const ProbeTable& table, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("probe table: cannot open " + path);
    const std::size_t d = table.feature_dim(), C = table.class_count();
    out << "id";
    for (std::size_t f = 0; f < d; ++f) out << ",f" << f;
    for (std::size_t c = 0; c < C; ++c) out << ",y" << c;
    out << "\n";
    char num[40];
    for (const ProbeRow& r : table.rows) {
        out << r.id;
        for (double v : r.features) {
            std::snprintf(num, sizeof(num), ",%.17g", v);
            out << num;
        }
        for (std::uint8_t t : r.targets) out << "," << static_cast<int>(t);
        out << "\n";
    }
}

}  // namespace nemesis
