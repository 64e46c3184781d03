// Command-line surface: phantom | pretrain | reconstruct | probe | bench.
//
// Shared flags: --config PATH (strict JSON, unknown keys rejected),
// --seed U64 (overrides every section seed), --threads N (inference
// fan-out only), --out DIR. Exit codes: 0 success, 2 usage/config,
// 3 data/format, 4 numeric failure. All outputs are byte-reproducible
// for a fixed seed; wall-clock timing in the train log is opt-in.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "nemesis/metrics.hpp"
#include "nemesis/model.hpp"
#include "nemesis/probe.hpp"
#include "nemesis/training.hpp"
#include "nemesis/volume.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nemesis;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct PhantomSection {
    std::size_t count = 30;
    std::size_t train_count = 18;
    std::size_t dim = 64;
    std::size_t organ_count = 8;
    double background_hu = -950.0;
    double radius_lo = 4.0;
    double radius_hi = 8.0;
    std::uint64_t seed = 2024;
    std::vector<OrganSpec> explicit_organs;  // fixed layout for every volume
};

struct WindowSection {
    double lo = -1000.0;
    double hi = 1000.0;
};

struct BenchSection {
    std::size_t vol_h = 512, vol_w = 512, vol_d = 384;
    std::size_t superpatch_side = 128;
    std::size_t patch_side = 16;
    std::size_t depth = 12;
    std::size_t embed_dim = 768;
    std::size_t heads = 12;
};

struct TrainSection {
    TrainConfig tc;
    bool log_timing = false;
};

struct RunConfig {
    ModelConfig model;
    TrainSection train;
    PhantomSection phantom;
    ProbeConfig probe;
    BenchSection bench;
    WindowSection window;
};

void check_keys(const json& j, const std::string& section, std::initializer_list<const char*> allowed) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : allowed) ok = ok || it.key() == k;
        if (!ok) throw ParamError("config: unknown key '" + it.key() + "' in section '" + section + "'");
    }
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) j.at(key).get_to(out);
}

OrganSpec parse_organ(const json& j) {
    check_keys(j, "phantom.organs[]", {"id", "shape", "center", "radii", "intensity"});
    OrganSpec o;
    o.id = j.at("id").get<std::uint16_t>();
    const std::string shape = j.at("shape").get<std::string>();
    if (shape == "sphere") o.shape = OrganShape::sphere;
    else if (shape == "ellipsoid") o.shape = OrganShape::ellipsoid;
    else if (shape == "box") o.shape = OrganShape::box;
    else throw ParamError("config: organ shape must be sphere|ellipsoid|box");
    const auto center = j.at("center").get<std::vector<double>>();
    const auto radii = j.at("radii").get<std::vector<double>>();
    if (center.size() != 3 || radii.size() != 3)
        throw ParamError("config: organ center/radii must have 3 entries");
    o.cx = center[0];
    o.cy = center[1];
    o.cz = center[2];
    o.rx = radii[0];
    o.ry = radii[1];
    o.rz = radii[2];
    o.intensity = j.at("intensity").get<float>();
    return o;
}

RunConfig load_run_config(const std::string& path) {
    RunConfig rc;
    if (path.empty()) return rc;
    std::ifstream in(path);
    if (!in) throw ParamError("config: cannot open " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ParamError(std::string("config: parse failure: ") + e.what());
    }
    check_keys(j, "<top>", {"model", "train", "phantom", "probe", "bench", "window"});

    if (j.contains("model")) {
        const json& m = j["model"];
        check_keys(m, "model",
                   {"superpatch_side", "patch_side", "embed_dim", "encoder_depth", "decoder_depth",
                    "decoder_dim", "heads", "nt_count", "mask_ratio", "strategy", "axis", "seed"});
        get_if(m, "superpatch_side", rc.model.superpatch_side);
        get_if(m, "patch_side", rc.model.patch_side);
        get_if(m, "embed_dim", rc.model.embed_dim);
        get_if(m, "encoder_depth", rc.model.encoder_depth);
        get_if(m, "decoder_depth", rc.model.decoder_depth);
        get_if(m, "decoder_dim", rc.model.decoder_dim);
        get_if(m, "heads", rc.model.heads);
        get_if(m, "nt_count", rc.model.nt_count);
        get_if(m, "mask_ratio", rc.model.mask_ratio);
        if (m.contains("strategy")) rc.model.strategy = mask_strategy_from_string(m["strategy"]);
        if (m.contains("axis")) rc.model.anisotropic_axis = axis_from_string(m["axis"]);
        get_if(m, "seed", rc.model.seed);
    }
    if (j.contains("train")) {
        const json& t = j["train"];
        check_keys(t, "train",
                   {"steps", "batch", "lr", "warmup", "weight_decay", "beta1", "beta2", "eps",
                    "noise_sigma", "seed", "checkpoint_interval", "log_timing"});
        get_if(t, "steps", rc.train.tc.steps);
        get_if(t, "batch", rc.train.tc.batch);
        get_if(t, "lr", rc.train.tc.lr);
        get_if(t, "warmup", rc.train.tc.warmup);
        get_if(t, "weight_decay", rc.train.tc.weight_decay);
        get_if(t, "beta1", rc.train.tc.beta1);
        get_if(t, "beta2", rc.train.tc.beta2);
        get_if(t, "eps", rc.train.tc.eps);
        get_if(t, "noise_sigma", rc.train.tc.noise_sigma);
        get_if(t, "seed", rc.train.tc.seed);
        get_if(t, "checkpoint_interval", rc.train.tc.checkpoint_interval);
        get_if(t, "log_timing", rc.train.log_timing);
    }
    if (j.contains("phantom")) {
        const json& p = j["phantom"];
        check_keys(p, "phantom",
                   {"count", "train_count", "dim", "organ_count", "background_hu", "radius_lo",
                    "radius_hi", "seed", "organs"});
        get_if(p, "count", rc.phantom.count);
        get_if(p, "train_count", rc.phantom.train_count);
        get_if(p, "dim", rc.phantom.dim);
        get_if(p, "organ_count", rc.phantom.organ_count);
        get_if(p, "background_hu", rc.phantom.background_hu);
        get_if(p, "radius_lo", rc.phantom.radius_lo);
        get_if(p, "radius_hi", rc.phantom.radius_hi);
        get_if(p, "seed", rc.phantom.seed);
        if (p.contains("organs"))
            for (const json& o : p["organs"]) rc.phantom.explicit_organs.push_back(parse_organ(o));
    }
    if (j.contains("probe")) {
        const json& p = j["probe"];
        check_keys(p, "probe",
                   {"voxel_threshold", "organ_count", "label_fractions", "classifier_epochs",
                    "classifier_lr", "f1_threshold", "seed", "pool_nt"});
        get_if(p, "voxel_threshold", rc.probe.voxel_threshold);
        get_if(p, "organ_count", rc.probe.organ_count);
        get_if(p, "label_fractions", rc.probe.label_fractions);
        get_if(p, "classifier_epochs", rc.probe.classifier_epochs);
        get_if(p, "classifier_lr", rc.probe.classifier_lr);
        get_if(p, "f1_threshold", rc.probe.f1_threshold);
        get_if(p, "seed", rc.probe.seed);
        get_if(p, "pool_nt", rc.probe.pool_nt);
    }
    if (j.contains("bench")) {
        const json& b = j["bench"];
        check_keys(b, "bench",
                   {"volume_dims", "superpatch_side", "patch_side", "depth", "embed_dim", "heads"});
        if (b.contains("volume_dims")) {
            const auto dims = b["volume_dims"].get<std::vector<std::size_t>>();
            if (dims.size() != 3) throw ParamError("config: bench.volume_dims must have 3 entries");
            rc.bench.vol_h = dims[0];
            rc.bench.vol_w = dims[1];
            rc.bench.vol_d = dims[2];
        }
        get_if(b, "superpatch_side", rc.bench.superpatch_side);
        get_if(b, "patch_side", rc.bench.patch_side);
        get_if(b, "depth", rc.bench.depth);
        get_if(b, "embed_dim", rc.bench.embed_dim);
        get_if(b, "heads", rc.bench.heads);
    }
    if (j.contains("window")) {
        const json& w = j["window"];
        check_keys(w, "window", {"lo", "hi"});
        get_if(w, "lo", rc.window.lo);
        get_if(w, "hi", rc.window.hi);
    }
    return rc;
}

// --seed overrides every per-section seed through independent streams.
void apply_seed_override(RunConfig& rc, std::optional<std::uint64_t> seed) {
    if (!seed) return;
    rc.model.seed = derive_seed(*seed, 0x01);
    rc.train.tc.seed = derive_seed(*seed, 0x02);
    rc.phantom.seed = derive_seed(*seed, 0x03);
    rc.probe.seed = derive_seed(*seed, 0x04);
}

std::vector<fs::path> list_files(const fs::path& dir, const std::string& extension) {
    if (!fs::is_directory(dir)) throw ParamError("missing directory: " + dir.string());
    std::vector<fs::path> out;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == extension)
            out.push_back(entry.path());
    std::sort(out.begin(), out.end());
    return out;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << text;
}

// ---------------------------------------------------------------------------
// phantom

int cmd_phantom(const RunConfig& rc, const fs::path& out_dir) {
    const PhantomSection& ps = rc.phantom;
    if (ps.train_count > ps.count) throw ParamError("phantom: train_count exceeds count");
    fs::create_directories(out_dir / "train");
    fs::create_directories(out_dir / "test");

    CorpusSpec cs;
    cs.volume_count = ps.count;
    cs.train_count = ps.train_count;
    cs.dim = ps.dim;
    cs.organ_count = ps.organ_count;
    cs.background_hu = static_cast<float>(ps.background_hu);
    cs.radius_lo = ps.radius_lo;
    cs.radius_hi = ps.radius_hi;
    cs.seed = ps.seed;

    for (std::size_t i = 0; i < ps.count; ++i) {
        PhantomSpec spec;
        if (ps.explicit_organs.empty()) {
            spec = random_phantom_spec(cs, derive_seed(cs.seed, i));
        } else {
            spec.height = spec.width = spec.depth = ps.dim;
            spec.background = static_cast<float>(ps.background_hu);
            spec.organs = ps.explicit_organs;
            spec.seed = derive_seed(cs.seed, i);
        }
        auto [vol, labels] = make_phantom(spec);
        const fs::path split = i < ps.train_count ? out_dir / "train" : out_dir / "test";
        char name[32];
        std::snprintf(name, sizeof(name), "vol_%03zu", i);
        save_volume(vol, (split / (std::string(name) + ".nemv")).string());
        save_labels(labels, (split / (std::string(name) + ".neml")).string());
    }
    std::printf("phantom: wrote %zu volumes (%zu train / %zu test) to %s\n", ps.count, ps.train_count,
                ps.count - ps.train_count, out_dir.string().c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// pretrain

std::vector<Volume> load_corpus(const fs::path& dir, const WindowSection& window) {
    const auto files = list_files(dir, ".nemv");
    if (files.empty()) throw ParamError("no .nemv volumes found in " + dir.string());
    std::vector<Volume> out;
    out.reserve(files.size());
    for (const auto& f : files) out.push_back(normalize(load_volume(f.string()), window.lo, window.hi));
    return out;
}

int cmd_pretrain(const RunConfig& rc, const fs::path& corpus_dir, const fs::path& out_dir,
                 const std::string& resume_path) {
    fs::create_directories(out_dir);
    const std::vector<Volume> corpus = load_corpus(corpus_dir, rc.window);

    ModelConfig mc = rc.model;
    TrainConfig tc = rc.train.tc;
    ModelParams params;
    std::size_t start_step = 0;
    AdamState resume_state;
    AdamState* resume_ptr = nullptr;

    if (!resume_path.empty()) {
        Checkpoint ck = load_checkpoint(resume_path);
        mc = ck.config;
        params = clone_params(ck.params, true);
        if (!ck.extra.contains("train_step"))
            throw FormatError("checkpoint: missing train_step, cannot resume");
        start_step = ck.extra.at("train_step").get<std::size_t>();
        resume_state = AdamState::for_params(params);
        std::size_t i = 0;
        for_each_param(params, [&](const std::string& name, Tensor&) {
            for (const auto& [aux_name, aux] : ck.aux) {
                if (aux_name == "opt.m." + name) resume_state.m[i] = aux.values();
                if (aux_name == "opt.v." + name) resume_state.v[i] = aux.values();
            }
            ++i;
        });
        resume_state.step = start_step;
        resume_ptr = &resume_state;
    } else {
        params = init_params(mc, true);
    }

    auto save_at = [&](std::size_t step, ModelParams& p, AdamState& st) {
        Checkpoint ck;
        ck.config = mc;
        ck.params = p;
        ck.extra = {{"train_step", step}};
        std::size_t i = 0;
        for_each_param(p, [&](const std::string& name, Tensor&) {
            ck.aux.emplace_back("opt.m." + name, Tensor::from({st.m[i].size()}, st.m[i]));
            ck.aux.emplace_back("opt.v." + name, Tensor::from({st.v[i].size()}, st.v[i]));
            ++i;
        });
        save_checkpoint(ck, (out_dir / ("ckpt_" + std::to_string(step) + ".nemc")).string());
    };

    TrainResult result = train(params, corpus, mc, tc, save_at, start_step, resume_ptr);
    write_train_log_csv(result.log, (out_dir / "train_log.csv").string(), rc.train.log_timing);

    double mean_loss = 0.0;
    for (const auto& r : result.log.records) mean_loss += r.loss;
    if (!result.log.records.empty()) mean_loss /= static_cast<double>(result.log.records.size());
    std::printf("pretrain: %zu steps, mean loss %.6f, final checkpoint ckpt_%zu.nemc\n",
                result.log.records.size(), mean_loss, tc.steps);
    return 0;
}

// ---------------------------------------------------------------------------
// reconstruct

int cmd_reconstruct(const RunConfig& rc, const std::string& ckpt_path, const std::string& volume_path,
                    const fs::path& out_dir, std::vector<std::string> strategies, double ratio,
                    double sigma, std::uint64_t seed, unsigned threads) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw ParamError("reconstruct: ratio must lie in (0,1)");
    fs::create_directories(out_dir);
    Checkpoint ck = load_checkpoint(ckpt_path);
    Volume input = normalize(load_volume(volume_path), rc.window.lo, rc.window.hi);

    if (strategies.empty()) strategies.push_back(to_string(ck.config.strategy));
    std::vector<QualityReport> reports;
    for (const std::string& sname : strategies) {
        ModelConfig cfg = ck.config;
        cfg.strategy = mask_strategy_from_string(sname);
        cfg.mask_ratio = ratio;
        ReconstructOptions opt;
        opt.noise_sigma = sigma;
        opt.seed = derive_seed(seed, std::hash<std::string>{}(sname));
        opt.threads = threads;
        ReconstructResult res = reconstruct_volume(input, ck.params, cfg, opt);
        save_volume(res.volume, (out_dir / ("recon_" + sname + ".nemv")).string());

        QualityReport q;
        q.strategy = sname;
        q.ratio = ratio;
        q.psnr_masked_db = psnr(input, res.volume, 1.0, &res.masked_voxels);
        q.psnr_full_db = psnr(input, res.volume, 1.0);
        q.ssim_value = ssim(input, res.volume);
        nlohmann::json snapshot;
        to_json(snapshot, cfg);
        snapshot["noise_sigma"] = sigma;
        snapshot["seed"] = opt.seed;
        q.config_snapshot = snapshot;
        reports.push_back(q);
    }
    write_text(out_dir / "quality_report.csv", quality_csv(reports));
    write_text(out_dir / "quality_report.json", quality_json(reports).dump(2) + "\n");
    std::fputs(quality_csv(reports).c_str(), stdout);
    return 0;
}

// ---------------------------------------------------------------------------
// probe

ProbeTable build_probe_table(const fs::path& split_dir, const Checkpoint& ck, const ProbeConfig& pc,
                             const WindowSection& window) {
    const auto vols = list_files(split_dir, ".nemv");
    if (vols.empty()) throw ParamError("no .nemv volumes found in " + split_dir.string());
    ProbeTable table;
    for (const auto& vf : vols) {
        fs::path lf = vf;
        lf.replace_extension(".neml");
        if (!fs::exists(lf)) throw ParamError("missing label grid " + lf.string());
        Volume v = normalize(load_volume(vf.string()), window.lo, window.hi);
        LabelGrid labels = load_labels(lf.string());
        append_probe_rows(table, vf.stem().string(), v, labels, ck.params, ck.config, pc);
    }
    return table;
}

int cmd_probe(const RunConfig& rc, bool model_section_present, const std::string& ckpt_path,
              const fs::path& corpus_dir, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    Checkpoint ck = load_checkpoint(ckpt_path);
    if (model_section_present && rc.model.embed_dim != ck.config.embed_dim)
        throw ParamError("probe: config embed_dim " + std::to_string(rc.model.embed_dim) +
                         " does not match checkpoint embed_dim " +
                         std::to_string(ck.config.embed_dim));
    rc.probe.validate();

    ProbeTable train_table = build_probe_table(corpus_dir / "train", ck, rc.probe, rc.window);
    ProbeTable test_table = build_probe_table(corpus_dir / "test", ck, rc.probe, rc.window);
    write_probe_table_csv(train_table, (out_dir / "train_features.csv").string());
    write_probe_table_csv(test_table, (out_dir / "test_features.csv").string());

    const auto rows = label_sweep(train_table, test_table, rc.probe);
    write_text(out_dir / "sweep.csv", sweep_csv(rows));
    std::fputs(sweep_csv(rows).c_str(), stdout);
    return 0;
}

// ---------------------------------------------------------------------------
// bench

int cmd_bench(const RunConfig& rc, const fs::path& out_dir) {
    if (rc.bench.vol_h % rc.bench.superpatch_side || rc.bench.vol_w % rc.bench.superpatch_side ||
        rc.bench.vol_d % rc.bench.superpatch_side || rc.bench.vol_h % rc.bench.patch_side ||
        rc.bench.vol_w % rc.bench.patch_side || rc.bench.vol_d % rc.bench.patch_side)
        throw ParamError("bench: superpatch/patch side must divide the volume dims");
    fs::create_directories(out_dir);
    ModelConfig mc;
    mc.superpatch_side = rc.bench.superpatch_side;
    mc.patch_side = rc.bench.patch_side;
    mc.heads = rc.bench.heads;
    mc.embed_dim = rc.bench.embed_dim;
    mc.mask_ratio = rc.model.mask_ratio;
    EfficiencyReport rep = efficiency_report(mc, rc.bench.vol_h, rc.bench.vol_w, rc.bench.vol_d,
                                             rc.bench.depth, rc.bench.embed_dim);
    write_text(out_dir / "bench.csv", efficiency_csv(rep));
    std::fputs(efficiency_csv(rep).c_str(), stdout);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"masked-autoencoder pipeline for 3D volumes"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed_override;
    unsigned threads = 1;
    std::string out_dir = "out";

    auto add_shared = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON config (strict schema)");
        cmd->add_option("--seed", seed_override, "override every section seed");
        cmd->add_option("--threads", threads, "worker threads for inference fan-out")
            ->check(CLI::Range(1u, 64u))
            ->capture_default_str();
        cmd->add_option("--out", out_dir, "output directory")->capture_default_str();
    };

    CLI::App* phantom = app.add_subcommand("phantom", "generate a synthetic labelled corpus");
    add_shared(phantom);

    CLI::App* pretrain = app.add_subcommand("pretrain", "masked-reconstruction pretraining");
    add_shared(pretrain);
    std::string corpus_dir, resume_path;
    pretrain->add_option("--corpus", corpus_dir, "directory of .nemv training volumes")->required();
    pretrain->add_option("--resume", resume_path, "checkpoint to resume from");

    CLI::App* reconstruct = app.add_subcommand("reconstruct", "stitched masked reconstruction + quality report");
    add_shared(reconstruct);
    std::string ckpt_path, volume_path;
    std::vector<std::string> strategies;
    double ratio = 0.75, sigma = 0.1;
    reconstruct->add_option("--ckpt", ckpt_path, "model checkpoint (.nemc)")->required();
    reconstruct->add_option("--in", volume_path, "input volume (.nemv)")->required();
    reconstruct->add_option("--strategy", strategies, "masking strategy rows (repeatable: plane|axis|dual)");
    reconstruct->add_option("--ratio", ratio, "mask ratio in (0,1)")->capture_default_str();
    reconstruct->add_option("--sigma", sigma, "corruption noise sigma")->capture_default_str();

    CLI::App* probe = app.add_subcommand("probe", "frozen-backbone linear probe + label sweep");
    add_shared(probe);
    std::string probe_ckpt, probe_corpus;
    probe->add_option("--ckpt", probe_ckpt, "model checkpoint (.nemc)")->required();
    probe->add_option("--corpus", probe_corpus, "corpus dir with train/ and test/ splits")->required();

    CLI::App* bench = app.add_subcommand("bench", "analytic FLOP efficiency report");
    add_shared(bench);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return kExitUsage;
    }

    try {
        RunConfig rc = load_run_config(config_path);
        bool model_section = false;
        if (!config_path.empty()) {
            std::ifstream in(config_path);
            json j = json::parse(in);
            model_section = j.contains("model");
        }
        apply_seed_override(rc, seed_override);
        const std::uint64_t run_seed = seed_override ? *seed_override : rc.model.seed;

        if (phantom->parsed()) return cmd_phantom(rc, out_dir);
        if (pretrain->parsed()) return cmd_pretrain(rc, corpus_dir, out_dir, resume_path);
        if (reconstruct->parsed())
            return cmd_reconstruct(rc, ckpt_path, volume_path, out_dir, strategies, ratio, sigma,
                                   derive_seed(run_seed, 0x7ec0), threads);
        if (probe->parsed()) return cmd_probe(rc, model_section, probe_ckpt, probe_corpus, out_dir);
        if (bench->parsed()) return cmd_bench(rc, out_dir);
        std::fprintf(stderr, "nemesis: error: no subcommand\n");
        return kExitUsage;
    } catch (const ParamError& e) {
        std::fprintf(stderr, "nemesis: error: %s\n", e.what());
        return kExitUsage;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "nemesis: error: %s\n", e.what());
        return kExitNumeric;
    } catch (const Error& e) {
        std::fprintf(stderr, "nemesis: error: %s\n", e.what());
        return kExitData;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "nemesis: error: %s\n", e.what());
        return kExitData;
    }
}
