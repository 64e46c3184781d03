#pragma once

// Pretraining loop: per-step superpatch sampling, Gaussian corruption,
// fresh mask, masked-MSE backward, AdamW update with warmup + cosine decay.
// Every random draw is keyed by (seed, step), so a run is fully determined
// by its config and corpus, and resuming from a checkpoint is bit-exact.

#include <chrono>
#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "nemesis/errors.hpp"
#include "nemesis/model.hpp"
#include "nemesis/rng.hpp"
#include "nemesis/superpatch.hpp"
#include "nemesis/tensor.hpp"
#include "nemesis/volume.hpp"

namespace nemesis {

struct TrainConfig {
    std::size_t steps = 500;
    std::size_t batch = 1;  // superpatches accumulated per optimizer step
    double lr = 1e-3;
    std::size_t warmup = 50;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double noise_sigma = 0.1;
    std::uint64_t seed = 7;
    std::size_t checkpoint_interval = 0;  // 0 = final checkpoint only

    void validate() const {
        if (batch == 0) throw ParamError("train: batch must be >= 1");
        if (lr <= 0.0) throw ParamError("train: lr must be > 0");
        if (warmup > steps) throw ParamError("train: warmup must be <= steps");
        if (noise_sigma < 0.0) throw ParamError("train: noise sigma must be >= 0");
        if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1))
            throw ParamError("train: betas must lie in [0,1)");
    }
};

struct TrainRecord {
    std::size_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double seconds = 0.0;  // wall time; zeroed in deterministic logs
};

struct TrainLog {
    std::vector<TrainRecord> records;
};

// Linear warmup to `lr`, then cosine decay to 0 at `steps`.
inline double lr_at(std::size_t step, const TrainConfig& tc) {
    if (step > tc.steps) throw ParamError("lr_at: step beyond schedule end");
    if (tc.warmup > 0 && step < tc.warmup)
        return tc.lr * static_cast<double>(step) / static_cast<double>(tc.warmup);
    if (tc.steps == tc.warmup) return tc.lr;
    const double t = static_cast<double>(step - tc.warmup) / static_cast<double>(tc.steps - tc.warmup);
    return tc.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

// ---------------------------------------------------------------------------
// Optimizer: adaptive moments with bias correction and decoupled decay.
// Decay multiplies weights by (1 - lr_t * weight_decay), applied separately
// from the adaptive term so zero gradients still shrink parameters.

struct AdamState {
    std::vector<std::vector<double>> m, v;
    std::uint64_t step = 0;  // completed optimizer steps

    static AdamState for_params(ModelParams& p) {
        AdamState s;
        for_each_param(p, [&](const std::string&, Tensor& t) {
            s.m.emplace_back(t.numel(), 0.0);
            s.v.emplace_back(t.numel(), 0.0);
        });
        return s;
    }
};

// grads are keyed by canonical parameter order; lr_t is the scheduled rate
// for this step. Throws on non-finite gradients, naming the tensor.
inline void optimizer_step(ModelParams& params, const std::vector<std::vector<double>>& grads,
                           AdamState& state, const TrainConfig& tc, double lr_t) {
    state.step += 1;
    const double bc1 = 1.0 - std::pow(tc.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(tc.beta2, static_cast<double>(state.step));
    std::size_t i = 0;
    for_each_param(params, [&](const std::string& name, Tensor& t) {
        const std::vector<double>& g = grads[i];
        if (g.size() != t.numel())
            throw ShapeError("optimizer: gradient size mismatch for " + name);
        std::vector<double>& w = t.leaf_values();
        std::vector<double>& m = state.m[i];
        std::vector<double>& v = state.v[i];
        for (std::size_t c = 0; c < g.size(); ++c) {
            if (!std::isfinite(g[c])) throw NumericError("optimizer: non-finite gradient in " + name);
            m[c] = tc.beta1 * m[c] + (1.0 - tc.beta1) * g[c];
            v[c] = tc.beta2 * v[c] + (1.0 - tc.beta2) * g[c] * g[c];
            const double mhat = m[c] / bc1;
            const double vhat = v[c] / bc2;
            w[c] = w[c] * (1.0 - lr_t * tc.weight_decay) - lr_t * mhat / (std::sqrt(vhat) + tc.eps);
        }
        ++i;
    });
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainResult {
    TrainLog log;
    AdamState opt_state;
};

// One gradient step: sample volume + superpatch, corrupt, mask, forward,
// masked MSE against the clean tokens. All seeds derive from (seed, step).
inline double train_step_loss(ModelParams& params, const std::vector<Volume>& volumes,
                              const ModelConfig& mc, const TrainConfig& tc, std::size_t step,
                              std::vector<std::vector<double>>& grads_out) {
    double loss_sum = 0.0;
    grads_out.clear();
    for_each_param(params, [&](const std::string&, Tensor& t) { grads_out.emplace_back(t.numel(), 0.0); });

    for (std::size_t b = 0; b < tc.batch; ++b) {
        const std::uint64_t step_seed = derive_seed(tc.seed, step, b);
        Rng pick(derive_seed(step_seed, 0x10));
        const Volume& vol = volumes[pick.uniform_index(volumes.size())];
        auto [gi, clean] = sample_superpatch(vol, mc.superpatch_side, derive_seed(step_seed, 0x11));
        Volume noisy = corrupt_gaussian(clean, tc.noise_sigma, derive_seed(step_seed, 0x12));
        MaskSpec mask = gen_mask(mc.grid_side(), mc.mask_ratio, mc.strategy, mc.anisotropic_axis,
                                 derive_seed(step_seed, 0x13));
        PatchTokens tok_clean = patchify(clean, mc.patch_side);
        PatchTokens tok_noisy = patchify(noisy, mc.patch_side);

        Tensor loss = masked_mse(tok_clean, decode(encode(tok_noisy, mask, params, mc), mask, params, mc), mask);
        backward(loss);
        loss_sum += loss.item();
        std::size_t i = 0;
        const double inv_batch = 1.0 / static_cast<double>(tc.batch);
        for_each_param(params, [&](const std::string&, Tensor& t) {
            const auto g = t.grad();
            for (std::size_t c = 0; c < g.size(); ++c) grads_out[i][c] += g[c] * inv_batch;
            ++i;
        });
    }
    return loss_sum / static_cast<double>(tc.batch);
}

// Full loop. `on_checkpoint(step, params, state)` fires at the configured
// interval and after the final step; `start_step` resumes mid-schedule.
inline TrainResult train(ModelParams& params, const std::vector<Volume>& volumes,
                         const ModelConfig& mc, const TrainConfig& tc,
                         const std::function<void(std::size_t, ModelParams&, AdamState&)>& on_checkpoint = {},
                         std::size_t start_step = 0, AdamState* resume_state = nullptr) {
    mc.validate();
    tc.validate();
    if (volumes.empty()) throw ParamError("train: empty volume corpus");
    for (const Volume& v : volumes)
        SuperpatchGrid(v.height, v.width, v.depth, mc.superpatch_side);  // geometry check

    set_requires_grad(params, true);
    TrainResult result;
    result.opt_state = resume_state ? *resume_state : AdamState::for_params(params);

    std::vector<std::vector<double>> grads;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t step = start_step; step < tc.steps; ++step) {
        const double lr_t = lr_at(step, tc);
        double loss;
        try {
            loss = train_step_loss(params, volumes, mc, tc, step, grads);
            optimizer_step(params, grads, result.opt_state, tc, lr_t);
        } catch (const Error& e) {
            throw NumericError("train: step " + std::to_string(step) + ": " + e.what());
        }
        TrainRecord rec;
        rec.step = step;
        rec.loss = loss;
        rec.lr = lr_t;
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.log.records.push_back(rec);
        if (on_checkpoint && tc.checkpoint_interval > 0 && (step + 1) % tc.checkpoint_interval == 0 &&
            step + 1 < tc.steps)
            on_checkpoint(step + 1, params, result.opt_state);
    }
    if (on_checkpoint) on_checkpoint(tc.steps, params, result.opt_state);
    set_requires_grad(params, false);
    return result;
}

// CSV: step,loss,lr,seconds. Timing is wall clock when include_timing is
// set and 0 otherwise, which keeps default outputs byte-reproducible.
inline void write_train_log_csv(const TrainLog& log, const std::string& path, bool include_timing) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("train log: cannot open " + path);
    out << "step,loss,lr,seconds\n";
    char line[160];
    for (const TrainRecord& r : log.records) {
        std::snprintf(line, sizeof(line), "%zu,%.17g,%.17g,%.6f\n", r.step, r.loss, r.lr,
                      include_timing ? r.seconds : 0.0);
        out << line;
    }
}

}  // namespace nemesis
