// Command-line front end: generate watermarked images, run forgeries,
// detect/calibrate, and drive the scenario benchmark.
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "latentmark/ddim.hpp"
#include "latentmark/errors.hpp"
#include "latentmark/experiment.hpp"
#include "latentmark/forgery.hpp"
#include "latentmark/image_io.hpp"
#include "latentmark/metrics.hpp"
#include "latentmark/model.hpp"
#include "latentmark/rng.hpp"
#include "latentmark/watermark_gs.hpp"
#include "latentmark/watermark_tr.hpp"

namespace fs = std::filesystem;
using namespace latentmark;

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out_dir;          // empty -> config output_dir
    std::optional<std::uint64_t> seed;  // overrides master_seed
    bool verbose = false;
};

ExperimentConfig load_config(const CommonOpts& c) {
    ExperimentConfig cfg = ExperimentConfig::load_file(c.config_path);
    if (c.seed) cfg.master_seed = *c.seed;
    return cfg;
}

std::string out_dir_of(const CommonOpts& c, const ExperimentConfig& cfg) {
    return c.out_dir.empty() ? cfg.output_dir : c.out_dir;
}

std::string resolve_model_name(const ExperimentConfig& cfg, const std::string& flag) {
    if (!flag.empty()) {
        cfg.model_json(flag);  // throws with the known-name list
        return flag;
    }
    if (cfg.models.size() == 1) return cfg.models.begin()->first;
    throw ConfigError("--model is required when the config defines " +
                      std::to_string(cfg.models.size()) + " models");
}

using KeyVariant = std::variant<GsKey, TrKey>;

KeyVariant load_key(const ExperimentConfig& cfg, const std::string& name) {
    const nlohmann::json& j = cfg.key_json(name);
    std::string type = j.value("type", std::string());
    if (type.empty()) {
        if (j.contains("cipher_key_hex") || j.contains("k")) type = "gs";
        else if (j.contains("radius")) type = "tr";
    }
    if (type == "gs") {
        if (j.contains("cipher_key_hex")) return gs_key_from_json(j);
        try {
            return gs_make_key(j.at("seed").get<std::uint64_t>(), j.at("k").get<int>(),
                               j.at("rho").get<int>(), j.value("user_id", 0));
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("key '" + name + "': malformed gs generator: " + e.what());
        }
    }
    if (type == "tr") return tr_key_from_json(j);
    throw ConfigError("key '" + name + "': unknown or missing type (want 'gs' or 'tr')");
}

LatentTensor embed_latent(const KeyVariant& key, const Shape& shape, std::uint64_t seed) {
    if (std::holds_alternative<GsKey>(key))
        return gs_embed(std::get<GsKey>(key), shape, seed);
    return tr_embed(std::get<TrKey>(key), shape, seed);
}

double tr_threshold_for(const ExperimentConfig& cfg, const std::string& model_name,
                        const ModelBundle& bundle, const std::string& key_name,
                        const TrKey& key, std::vector<double>& nulls_out) {
    nulls_out = load_or_build_tr_nulls((fs::path(cfg.output_dir) / "cache").string(),
                                       cfg.model_json(model_name), cfg.key_json(key_name),
                                       bundle, key, cfg.defaults.null_n, cfg.defaults.n_steps);
    return calibrate_threshold(nulls_out, cfg.defaults.fpr_tr, true);
}

// ------------------------------------------------------------------ generate

struct GenerateOpts {
    CommonOpts common;
    std::string model, key, condition;
    int count = 1;
    bool save_latents = false;
};

void run_generate(const GenerateOpts& o) {
    ExperimentConfig cfg = load_config(o.common);
    const std::string model_name = resolve_model_name(cfg, o.model);
    const ModelBundle bundle = ModelBundle::from_json(cfg.model_json(model_name));
    std::optional<KeyVariant> key;
    if (!o.key.empty()) key = load_key(cfg, o.key);

    SamplerConfig scfg;
    scfg.n_steps = cfg.defaults.n_steps;
    scfg.guidance_scale = cfg.defaults.guidance_scale;
    if (!o.condition.empty()) scfg.condition = o.condition;

    const fs::path dir = out_dir_of(o.common, cfg);
    fs::create_directories(dir);
    const std::string ext = image_extension_for(bundle.shape());
    for (int i = 0; i < o.count; ++i) {
        const std::uint64_t s = derive_seed(cfg.master_seed, static_cast<std::uint64_t>(i) + 1);
        LatentTensor z = key ? embed_latent(*key, bundle.shape(), s)
                             : Rng(s).normal_latent(bundle.shape());
        const ImageTensor img =
            bundle.codec.decode(ddim_sample(bundle.mixture, bundle.schedule, z, scfg));
        char name[32];
        std::snprintf(name, sizeof(name), "gen_%04d", i);
        save_image(img, (dir / (std::string(name) + ext)).string());
        if (o.save_latents)
            save_latent_lmf1(z, (dir / (std::string(name) + "_z0.lmf1")).string());
        if (o.common.verbose)
            std::cerr << "wrote " << (dir / (std::string(name) + ext)).string() << "\n";
    }
}

// --------------------------------------------------------------------- embed

struct EmbedOpts {
    CommonOpts common;
    std::string model, key;
    int count = 1;
};

void run_embed(const EmbedOpts& o) {
    ExperimentConfig cfg = load_config(o.common);
    const std::string model_name = resolve_model_name(cfg, o.model);
    const ModelBundle bundle = ModelBundle::from_json(cfg.model_json(model_name));
    if (o.key.empty()) throw ConfigError("embed: --key is required");
    const KeyVariant key = load_key(cfg, o.key);

    const fs::path dir = out_dir_of(o.common, cfg);
    fs::create_directories(dir);
    for (int i = 0; i < o.count; ++i) {
        const std::uint64_t s = derive_seed(cfg.master_seed, static_cast<std::uint64_t>(i) + 1);
        const LatentTensor z = embed_latent(key, bundle.shape(), s);
        char name[32];
        std::snprintf(name, sizeof(name), "latent_%04d.lmf1", i);
        save_latent_lmf1(z, (dir / name).string());
        if (o.common.verbose) std::cerr << "wrote " << (dir / name).string() << "\n";
    }
}

// -------------------------------------------------------------------- detect

struct DetectOpts {
    CommonOpts common;
    std::string model, key;
    std::vector<std::string> images;
};

void run_detect(const DetectOpts& o) {
    ExperimentConfig cfg = load_config(o.common);
    const std::string model_name = resolve_model_name(cfg, o.model);
    const ModelBundle bundle = ModelBundle::from_json(cfg.model_json(model_name));
    if (o.key.empty()) throw ConfigError("detect: --key is required");
    const KeyVariant key = load_key(cfg, o.key);

    SamplerConfig scfg;
    scfg.n_steps = cfg.defaults.n_steps;
    scfg.guidance_scale = cfg.defaults.guidance_scale;

    double tr_threshold = 0.0;
    std::vector<double> nulls;
    if (std::holds_alternative<TrKey>(key))
        tr_threshold = tr_threshold_for(cfg, model_name, bundle, o.key,
                                        std::get<TrKey>(key), nulls);

    for (const std::string& path : o.images) {
        const ImageTensor img = load_image(path);
        require_same_shape(img.shape, bundle.shape(), "detect input");
        const LatentTensor back = ddim_invert_naive(bundle.mixture, bundle.schedule,
                                                    bundle.codec.encode(img), scfg);
        nlohmann::json line;
        line["image"] = path;
        line["key"] = o.key;
        if (std::holds_alternative<GsKey>(key)) {
            const GsDetectionReport rep =
                gs_detect(std::get<GsKey>(key), back, cfg.defaults.fpr_gs);
            line["type"] = "gs";
            line["bit_accuracy"] = rep.bit_accuracy;
            line["threshold"] = rep.threshold;
            line["fpr"] = cfg.defaults.fpr_gs;
            line["detected"] = rep.detected;
        } else {
            const TrDetectionReport rep =
                tr_detect(std::get<TrKey>(key), back, tr_threshold, &nulls);
            line["type"] = "tr";
            line["distance"] = rep.distance;
            line["p_value"] = rep.p_value;
            line["threshold"] = rep.threshold;
            line["fpr"] = cfg.defaults.fpr_tr;
            line["detected"] = rep.detected;
        }
        std::cout << line.dump() << "\n";
    }
}

// --------------------------------------------------------------------- forge

struct ForgeOpts {
    CommonOpts common;
    std::string method;  // pnp | imprint | reprompt
    std::string model, proxy, target_image, cover, condition, reprompt_condition;
    double lambda = 0.2, gamma = 1.0, xi = 0.0, mu = 1e-4;
    int invert_steps = 50, regen_steps = 50, n_iters = 50;
};

void run_forge(const ForgeOpts& o) {
    ExperimentConfig cfg = load_config(o.common);
    const std::string proxy_name =
        o.proxy.empty() ? resolve_model_name(cfg, o.model) : o.proxy;
    ModelBundle proxy = ModelBundle::from_json(cfg.model_json(proxy_name));
    if (o.xi > 0.0) proxy = proxy.with_codec_mismatch(o.xi);

    const ImageTensor target = load_image(o.target_image);
    require_same_shape(target.shape, proxy.shape(), "target image");

    std::optional<std::string> condition;
    if (!o.condition.empty()) condition = o.condition;

    ImageTensor forged;
    LatentTensor estimated(proxy.shape());
    if (o.method == "reprompt") {
        std::optional<std::string> new_condition;
        if (!o.reprompt_condition.empty()) new_condition = o.reprompt_condition;
        estimated = estimate_watermark_latent(target, proxy, o.invert_steps, condition);
        forged = reprompt(target, proxy, new_condition, o.invert_steps, o.regen_steps);
    } else {
        if (o.cover.empty())
            throw ConfigError("forge " + o.method + ": --cover is required");
        const ImageTensor cover = load_image(o.cover);
        require_same_shape(cover.shape, proxy.shape(), "cover image");
        if (o.method == "pnp") {
            ForgeryConfig fc;
            fc.invert_steps = o.invert_steps;
            fc.regen_steps = o.regen_steps;
            fc.lambda = o.lambda;
            fc.gamma = o.gamma;
            fc.condition = condition;
            ForgeOutput out = pnp_forge(target, cover, proxy, fc);
            forged = std::move(out.image);
            estimated = std::move(out.estimated_latent);
        } else {  // imprint
            estimated = estimate_watermark_latent(target, proxy, o.invert_steps, condition);
            ImprintConfig ic;
            ic.n_iters = o.n_iters;
            ic.mu = o.mu;
            ic.invert_steps = o.invert_steps;
            ic.condition = condition;
            forged = imprint_forge(estimated, cover, proxy, ic).image;
        }
    }

    const fs::path dir = out_dir_of(o.common, cfg);
    fs::create_directories(dir);
    const std::string img_path =
        (dir / ("forged" + image_extension_for(forged.shape))).string();
    save_image(forged, img_path);
    save_latent_lmf1(estimated, (dir / "forged_z0.lmf1").string());
    if (o.common.verbose) {
        std::cerr << "wrote " << img_path << " and forged_z0.lmf1\n";
        if (!o.cover.empty()) {
            const ImageTensor cover = load_image(o.cover);
            std::cerr << "psnr to cover: " << format_double(psnr_db(forged, cover))
                      << " dB, ssim: " << format_double(ssim(forged, cover)) << "\n";
        }
    }
}

// ----------------------------------------------------------------- calibrate

struct CalibrateOpts {
    CommonOpts common;
    std::string model, key;
};

void run_calibrate(const CalibrateOpts& o) {
    ExperimentConfig cfg = load_config(o.common);
    if (o.key.empty()) throw ConfigError("calibrate: --key is required");
    const KeyVariant key = load_key(cfg, o.key);

    nlohmann::json line;
    line["key"] = o.key;
    if (std::holds_alternative<GsKey>(key)) {
        const GsKey& k = std::get<GsKey>(key);
        line["type"] = "gs";
        line["k"] = k.k;
        line["fpr"] = cfg.defaults.fpr_gs;
        line["threshold"] = gs_threshold(k.k, cfg.defaults.fpr_gs);
    } else {
        const std::string model_name = resolve_model_name(cfg, o.model);
        const ModelBundle bundle = ModelBundle::from_json(cfg.model_json(model_name));
        std::vector<double> nulls;
        const double thr = tr_threshold_for(cfg, model_name, bundle, o.key,
                                            std::get<TrKey>(key), nulls);
        line["type"] = "tr";
        line["model"] = model_name;
        line["fpr"] = cfg.defaults.fpr_tr;
        line["null_n"] = cfg.defaults.null_n;
        line["threshold"] = thr;
    }
    std::cout << line.dump() << "\n";
}

// --------------------------------------------------------------- bench/report

struct BenchOpts {
    CommonOpts common;
    int jobs = 0;
};

void run_bench(const BenchOpts& o) {
    ExperimentConfig cfg = load_config(o.common);
    if (!o.common.out_dir.empty()) cfg.output_dir = o.common.out_dir;
    int jobs = o.jobs;
    if (jobs <= 0) jobs = std::max(1u, std::thread::hardware_concurrency());
    MatrixResult res =
        run_matrix_to_files(cfg, jobs, o.common.verbose ? &std::cerr : nullptr);
    nlohmann::json line;
    line["rows"] = res.rows.size();
    line["output_dir"] = cfg.output_dir;
    std::cout << line.dump() << "\n";
}

struct ReportOpts {
    std::string rows_path;
    std::string out_path;
};

void run_report(const ReportOpts& o) {
    const std::vector<RowResult> rows = read_rows_csv(o.rows_path);
    const nlohmann::json summary = summarize_rows(rows);
    if (!o.out_path.empty()) {
        std::ofstream f(o.out_path, std::ios::binary);
        if (!f) throw IoError("cannot open for writing: " + o.out_path);
        f << summary.dump(2) << "\n";
        if (!f) throw IoError("write failed: " + o.out_path);
    }
    std::cout << summary.dump(2) << "\n";
}

void add_common(CLI::App* cmd, CommonOpts& c, bool config_required = true) {
    auto* opt = cmd->add_option("--config", c.config_path, "experiment config (json)");
    if (config_required) opt->required();
    cmd->add_option("--out", c.out_dir, "output directory (default: config output_dir)");
    cmd->add_option("--seed", c.seed, "override the config master_seed");
    cmd->add_flag("--verbose", c.verbose, "progress notes on stderr");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"analytic latent-watermark testbed"};
    app.require_subcommand(1);

    GenerateOpts gen;
    auto* c_gen = app.add_subcommand("generate", "sample images, optionally watermarked");
    add_common(c_gen, gen.common);
    c_gen->add_option("--model", gen.model, "model name from the config");
    c_gen->add_option("--key", gen.key, "watermark key name (omit for unwatermarked)");
    c_gen->add_option("--condition", gen.condition, "class label to condition on");
    c_gen->add_option("--count", gen.count, "number of images")->check(CLI::PositiveNumber);
    c_gen->add_flag("--save-latents", gen.save_latents, "also write initial latents (.lmf1)");
    c_gen->callback([&] { run_generate(gen); });

    EmbedOpts emb;
    auto* c_emb = app.add_subcommand("embed", "write watermarked initial latents (.lmf1)");
    add_common(c_emb, emb.common);
    c_emb->add_option("--model", emb.model, "model name (for the latent shape)");
    c_emb->add_option("--key", emb.key, "watermark key name")->required();
    c_emb->add_option("--count", emb.count, "number of latents")->check(CLI::PositiveNumber);
    c_emb->callback([&] { run_embed(emb); });

    DetectOpts det;
    auto* c_det = app.add_subcommand("detect", "invert images and score a key");
    add_common(c_det, det.common);
    c_det->add_option("--model", det.model, "model name from the config");
    c_det->add_option("--key", det.key, "watermark key name")->required();
    c_det->add_option("--image", det.images, "image file(s) to score")
        ->required()
        ->expected(-1);
    c_det->callback([&] { run_detect(det); });

    ForgeOpts fo;
    auto* c_forge = app.add_subcommand("forge", "transplant a watermark onto a cover");
    add_common(c_forge, fo.common);
    c_forge->add_option("method", fo.method, "pnp | imprint | reprompt")
        ->required()
        ->check(CLI::IsMember({"pnp", "imprint", "reprompt"}));
    c_forge->add_option("--model", fo.model, "proxy model name");
    c_forge->add_option("--proxy", fo.proxy, "proxy model name (alias of --model)");
    c_forge->add_option("--target-image", fo.target_image, "watermarked image")->required();
    c_forge->add_option("--cover", fo.cover, "cover image (pnp/imprint)");
    c_forge->add_option("--lambda", fo.lambda, "guidance strength in [0,1]");
    c_forge->add_option("--gamma", fo.gamma, "guidance ramp exponent");
    c_forge->add_option("--xi", fo.xi, "proxy codec mismatch in [0,1]");
    c_forge->add_option("--mu", fo.mu, "imprint ridge weight");
    c_forge->add_option("--n-iters", fo.n_iters, "imprint accepted steps");
    c_forge->add_option("--invert-steps", fo.invert_steps, "attacker inversion ladder");
    c_forge->add_option("--regen-steps", fo.regen_steps, "attacker regeneration ladder");
    c_forge->add_option("--condition", fo.condition, "attacker condition label");
    c_forge->add_option("--reprompt-condition", fo.reprompt_condition,
                        "new condition for reprompt");
    c_forge->callback([&] { run_forge(fo); });

    CalibrateOpts cal;
    auto* c_cal = app.add_subcommand("calibrate", "print a key's detection threshold");
    add_common(c_cal, cal.common);
    c_cal->add_option("--model", cal.model, "model name (tr keys)");
    c_cal->add_option("--key", cal.key, "watermark key name")->required();
    c_cal->callback([&] { run_calibrate(cal); });

    BenchOpts ben;
    auto* c_ben = app.add_subcommand("bench", "run the scenario matrix to rows.csv");
    add_common(c_ben, ben.common);
    c_ben->add_option("--jobs", ben.jobs, "worker threads (default: logical cores)");
    c_ben->callback([&] { run_bench(ben); });

    ReportOpts rep;
    auto* c_rep = app.add_subcommand("report", "re-aggregate a rows.csv into summary json");
    c_rep->add_option("--rows", rep.rows_path, "rows.csv path")->required();
    c_rep->add_option("--out", rep.out_path, "also write summary json here");
    c_rep->callback([&] { run_report(rep); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help() << std::flush;
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
