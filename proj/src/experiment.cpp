#include "latentmark/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>
#include <variant>

#include "latentmark/ddim.hpp"
#include "latentmark/errors.hpp"
#include "latentmark/forgery.hpp"
#include "latentmark/image_io.hpp"
#include "latentmark/metrics.hpp"
#include "latentmark/rng.hpp"

namespace latentmark {

namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------- utilities

std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

std::string hex16(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[i] = digits[v & 0xF];
        v >>= 4;
    }
    return s;
}

double parse_double_field(const std::string& s, const std::string& where) {
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw IoError("rows csv: bad numeric field '" + s + "' in " + where);
    return v;
}

double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return (n % 2 == 1) ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

void require_clean_name(const std::string& name, const char* what) {
    if (name.empty()) throw ConfigError(std::string(what) + ": empty name");
    for (char c : name) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                        (c >= '0' && c <= '9') || c == '_' || c == '-' || c == '.' ||
                        c == '=' || c == '+' || c == '@';
        if (!ok)
            throw ConfigError(std::string(what) + ": name '" + name +
                              "' may only use [A-Za-z0-9_.=+@-]");
    }
}

}  // namespace

std::string format_double(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

// ------------------------------------------------------------- config parse

namespace {

AttackParams parse_params(const nlohmann::json& j, const ExperimentDefaults& defs) {
    AttackParams p;
    p.invert_steps = defs.n_steps;
    p.regen_steps = defs.n_steps;
    if (j.is_null()) return p;
    p.lambda = j.value("lambda", p.lambda);
    p.gamma = j.value("gamma", p.gamma);
    p.xi = j.value("xi", p.xi);
    p.invert_steps = j.value("invert_steps", p.invert_steps);
    p.regen_steps = j.value("regen_steps", p.regen_steps);
    p.n_iters = j.value("n_iters", p.n_iters);
    p.mu = j.value("mu", p.mu);
    if (j.contains("condition")) p.condition = j.at("condition").get<std::string>();
    if (j.contains("reprompt_condition"))
        p.reprompt_condition = j.at("reprompt_condition").get<std::string>();
    return p;
}

CoverSpec parse_covers(const nlohmann::json& j) {
    CoverSpec c;
    c.count = j.value("count", 0);
    c.seed = j.value("seed", 0ULL);
    c.source = j.value("source", std::string("mixture"));
    c.dir = j.value("dir", std::string());
    if (c.source != "mixture" && c.source != "dir")
        throw ConfigError("covers: source must be 'mixture' or 'dir', got '" + c.source + "'");
    if (c.source == "dir" && c.dir.empty())
        throw ConfigError("covers: source 'dir' requires a 'dir' path");
    return c;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    ExperimentConfig cfg;
    try {
        if (!j.contains("master_seed"))
            throw ConfigError("config: master_seed is required");
        cfg.master_seed = j.at("master_seed").get<std::uint64_t>();
        cfg.output_dir = j.value("output_dir", cfg.output_dir);

        if (j.contains("defaults")) {
            const auto& d = j.at("defaults");
            cfg.defaults.fpr_gs = d.value("fpr_gs", cfg.defaults.fpr_gs);
            cfg.defaults.fpr_tr = d.value("fpr_tr", cfg.defaults.fpr_tr);
            cfg.defaults.null_n = d.value("null_n", cfg.defaults.null_n);
            cfg.defaults.n_users = d.value("n_users", cfg.defaults.n_users);
            cfg.defaults.n_steps = d.value("n_steps", cfg.defaults.n_steps);
            cfg.defaults.guidance_scale = d.value("guidance_scale", cfg.defaults.guidance_scale);
        }
        if (cfg.defaults.n_users < 1) throw ConfigError("config: n_users must be >= 1");
        if (cfg.defaults.null_n < 1) throw ConfigError("config: null_n must be >= 1");

        if (j.contains("models"))
            for (const auto& [name, mj] : j.at("models").items()) {
                require_clean_name(name, "model");
                cfg.models.emplace(name, mj);
            }
        if (j.contains("keys"))
            for (const auto& [name, kj] : j.at("keys").items()) {
                require_clean_name(name, "key");
                cfg.keys.emplace(name, kj);
            }

        int auto_idx = 0;
        if (j.contains("scenarios"))
            for (const auto& sj : j.at("scenarios")) {
                ScenarioSpec s;
                s.model = sj.at("model").get<std::string>();
                s.proxy = sj.value("proxy", std::string());
                s.key = sj.at("key").get<std::string>();
                s.attack = sj.value("attack", std::string("none"));
                s.name = sj.value("name", s.key + "-" + s.attack + "-" +
                                              std::to_string(auto_idx));
                require_clean_name(s.name, "scenario");
                s.params = parse_params(sj.contains("params") ? sj.at("params")
                                                              : nlohmann::json(nullptr),
                                        cfg.defaults);
                if (!sj.contains("covers")) throw ConfigError("scenario '" + s.name +
                                                              "': covers block is required");
                s.covers = parse_covers(sj.at("covers"));
                cfg.scenarios.push_back(std::move(s));
                ++auto_idx;
            }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: malformed json: ") + e.what());
    }
    return cfg;
}

ExperimentConfig ExperimentConfig::load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config: cannot open " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config: json parse error in " + path + " at byte " +
                          std::to_string(e.byte) + ": " + e.what());
    }
    return from_json(j);
}

const nlohmann::json& ExperimentConfig::model_json(const std::string& name) const {
    auto it = models.find(name);
    if (it == models.end()) {
        std::string known;
        for (const auto& [n, _] : models) known += (known.empty() ? "" : ", ") + n;
        throw ConfigError("config: unknown model '" + name + "' (known: " + known + ")");
    }
    return it->second;
}

const nlohmann::json& ExperimentConfig::key_json(const std::string& name) const {
    auto it = keys.find(name);
    if (it == keys.end()) {
        std::string known;
        for (const auto& [n, _] : keys) known += (known.empty() ? "" : ", ") + n;
        throw ConfigError("config: unknown key '" + name + "' (known: " + known + ")");
    }
    return it->second;
}

// ------------------------------------------------------------------ CSV i/o

namespace {

constexpr const char* kCsvHeader =
    "scenario,target,watermark,attack,cover_id,bit_acc,distance,p_value,detected,attributed,"
    "psnr_db,ssim,wall_s";

std::string opt_field(const std::optional<double>& v) {
    return v ? format_double(*v) : std::string();
}

}  // namespace

void write_rows_csv(const std::vector<RowResult>& rows, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << kCsvHeader << "\n";
    for (const RowResult& r : rows) {
        f << r.scenario << ',' << r.target << ',' << r.watermark << ',' << r.attack << ','
          << r.cover_id << ',' << opt_field(r.bit_acc) << ',' << opt_field(r.distance) << ','
          << opt_field(r.p_value) << ',' << (r.detected ? '1' : '0') << ','
          << (r.attributed ? (*r.attributed ? "1" : "0") : "") << ',' << opt_field(r.psnr_db)
          << ',' << opt_field(r.ssim) << ',' << format_double(r.wall_s) << "\n";
    }
    if (!f) throw IoError("write failed: " + path);
}

std::vector<RowResult> read_rows_csv(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path);
    std::string line;
    if (!std::getline(f, line)) throw IoError("rows csv: empty file " + path);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kCsvHeader) throw IoError("rows csv: unexpected header in " + path);

    std::vector<RowResult> rows;
    std::size_t lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::string cell;
        std::stringstream ss(line);
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (line.back() == ',') cells.push_back("");
        if (cells.size() != 13)
            throw IoError("rows csv: line " + std::to_string(lineno) + " has " +
                          std::to_string(cells.size()) + " fields, expected 13");
        const std::string where = path + ":" + std::to_string(lineno);
        RowResult r;
        r.scenario = cells[0];
        r.target = cells[1];
        r.watermark = cells[2];
        r.attack = cells[3];
        r.cover_id = static_cast<int>(parse_double_field(cells[4], where));
        if (!cells[5].empty()) r.bit_acc = parse_double_field(cells[5], where);
        if (!cells[6].empty()) r.distance = parse_double_field(cells[6], where);
        if (!cells[7].empty()) r.p_value = parse_double_field(cells[7], where);
        r.detected = cells[8] == "1";
        if (!cells[9].empty()) r.attributed = cells[9] == "1";
        if (!cells[10].empty()) r.psnr_db = parse_double_field(cells[10], where);
        if (!cells[11].empty()) r.ssim = parse_double_field(cells[11], where);
        r.wall_s = parse_double_field(cells[12], where);
        rows.push_back(std::move(r));
    }
    return rows;
}

// ---------------------------------------------------------------- summaries

nlohmann::json summarize_rows(const std::vector<RowResult>& rows) {
    struct Bucket {
        std::string target, watermark, attack;
        std::vector<double> bit_acc, distance, p_value, psnr, ssim, wall;
        int n = 0, detected = 0, attr_n = 0, attr_yes = 0;
    };
    std::map<std::string, Bucket> buckets;
    for (const RowResult& r : rows) {
        Bucket& b = buckets[r.scenario];
        b.target = r.target;
        b.watermark = r.watermark;
        b.attack = r.attack;
        b.n += 1;
        b.detected += r.detected ? 1 : 0;
        if (r.attributed) {
            b.attr_n += 1;
            b.attr_yes += *r.attributed ? 1 : 0;
        }
        if (r.bit_acc) b.bit_acc.push_back(*r.bit_acc);
        if (r.distance) b.distance.push_back(*r.distance);
        if (r.p_value) b.p_value.push_back(*r.p_value);
        if (r.psnr_db) b.psnr.push_back(*r.psnr_db);
        if (r.ssim) b.ssim.push_back(*r.ssim);
        b.wall.push_back(r.wall_s);
    }

    nlohmann::json scenarios = nlohmann::json::object();
    for (const auto& [name, b] : buckets) {
        nlohmann::json s;
        s["target"] = b.target;
        s["watermark"] = b.watermark;
        s["attack"] = b.attack;
        s["rows"] = b.n;
        s["detection_rate"] = static_cast<double>(b.detected) / b.n;
        if (b.attr_n > 0)
            s["attribution_rate"] = static_cast<double>(b.attr_yes) / b.attr_n;
        if (!b.bit_acc.empty())
            s["bit_acc"] = {{"median", median_of(b.bit_acc)}, {"mean", mean_of(b.bit_acc)}};
        if (!b.distance.empty()) s["distance"] = {{"median", median_of(b.distance)}};
        if (!b.p_value.empty()) s["p_value"] = {{"median", median_of(b.p_value)}};
        // PSNR can be +inf (identical images); serialize through the same
        // text form the CSV uses.
        if (!b.psnr.empty()) s["psnr_db"] = {{"median", format_double(median_of(b.psnr))}};
        if (!b.ssim.empty()) s["ssim"] = {{"median", median_of(b.ssim)}};
        s["timing"] = {{"wall_s_median", median_of(b.wall)}, {"wall_s_mean", mean_of(b.wall)}};
        scenarios[name] = std::move(s);
    }
    nlohmann::json out;
    out["n_rows"] = rows.size();
    out["scenarios"] = std::move(scenarios);
    return out;
}

// ----------------------------------------------------------- TR null tables

std::vector<double> tr_pipeline_nulls(const ModelBundle& bundle, const TrKey& key, int n,
                                      int n_steps) {
    if (n < 1) throw ConfigError("tr nulls: n must be >= 1");
    const std::uint64_t seed0 =
        fnv1a64(bundle.to_json().dump() + "|" + tr_key_to_json(key).dump() + "|" +
                std::to_string(n_steps));
    SamplerConfig scfg;
    scfg.n_steps = n_steps;

    std::vector<double> nulls(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        Rng rng(derive_seed(seed0, static_cast<std::uint64_t>(i) + 1));
        const LatentTensor z0 = rng.normal_latent(bundle.shape());
        const ImageTensor img =
            bundle.codec.decode(ddim_sample(bundle.mixture, bundle.schedule, z0, scfg));
        const LatentTensor back =
            ddim_invert_naive(bundle.mixture, bundle.schedule, bundle.codec.encode(img), scfg);
        nulls[static_cast<std::size_t>(i)] = tr_distance(key, back);
    }
    return nulls;
}

std::vector<double> load_or_build_tr_nulls(const std::string& cache_dir,
                                           const nlohmann::json& model_json,
                                           const nlohmann::json& key_json,
                                           const ModelBundle& bundle, const TrKey& key, int n,
                                           int n_steps) {
    const std::uint64_t h = fnv1a64(model_json.dump() + "|" + key_json.dump() + "|" +
                                    std::to_string(n) + "|" + std::to_string(n_steps));
    const fs::path path = fs::path(cache_dir) / ("tr_nulls_" + hex16(h) + ".csv");

    if (fs::exists(path)) {
        std::ifstream f(path);
        std::string line;
        std::vector<double> nulls;
        if (f && std::getline(f, line) && line == "distance") {
            while (std::getline(f, line))
                if (!line.empty()) nulls.push_back(parse_double_field(line, path.string()));
            if (static_cast<int>(nulls.size()) == n) return nulls;
        }
        // fall through: stale or corrupt cache entry gets rebuilt
    }

    std::vector<double> nulls = tr_pipeline_nulls(bundle, key, n, n_steps);
    fs::create_directories(cache_dir);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f << "distance\n";
    for (double v : nulls) f << format_double(v) << "\n";
    if (!f) throw IoError("write failed: " + path.string());
    return nulls;
}

// --------------------------------------------------------------- run_matrix

namespace {

using KeyVariant = std::variant<GsKey, TrKey>;

KeyVariant materialize_key(const nlohmann::json& j, const std::string& name) {
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

struct ScenarioRuntime {
    const ScenarioSpec* spec = nullptr;
    std::shared_ptr<const ModelBundle> target;
    std::shared_ptr<const ModelBundle> proxy;
    KeyVariant key;
    std::vector<GsKey> users;  // multi-bit scenarios; empty when attribution infeasible
    int true_user_index = -1;
    std::vector<double> tr_nulls;
    double tr_threshold = 0.0;
    std::vector<ImageTensor> covers;
    std::size_t first_row = 0;
};

std::vector<fs::path> list_cover_files(const CoverSpec& spec) {
    std::vector<fs::path> files;
    if (!fs::is_directory(spec.dir)) throw ConfigError("covers: not a directory: " + spec.dir);
    for (const auto& e : fs::directory_iterator(spec.dir)) {
        if (!e.is_regular_file()) continue;
        const std::string ext = e.path().extension().string();
        if (ext == ".pgm" || ext == ".ppm" || ext == ".lmf1") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (spec.count > 0 && static_cast<int>(files.size()) > spec.count)
        files.resize(static_cast<std::size_t>(spec.count));
    return files;
}

// Pure validation: every name resolves, parameters are in range, cover sets
// are non-empty. Runs before anything heavy is built or written.
void validate_scenario(const ExperimentConfig& cfg, const ScenarioSpec& s) {
    cfg.model_json(s.model);
    if (!s.proxy.empty()) cfg.model_json(s.proxy);
    materialize_key(cfg.key_json(s.key), s.key);
    if (s.attack != "none" && s.attack != "pnp" && s.attack != "imprint" &&
        s.attack != "reprompt")
        throw ConfigError("scenario '" + s.name + "': unknown attack '" + s.attack + "'");
    if (!(s.params.lambda >= 0.0 && s.params.lambda <= 1.0))
        throw ConfigError("scenario '" + s.name + "': lambda must lie in [0, 1]");
    if (!(s.params.gamma >= 0.0))
        throw ConfigError("scenario '" + s.name + "': gamma must be >= 0");
    if (!(s.params.xi >= 0.0 && s.params.xi <= 1.0))
        throw ConfigError("scenario '" + s.name + "': xi must lie in [0, 1]");
    if (s.covers.source == "mixture") {
        if (s.covers.count < 1)
            throw ConfigError("scenario '" + s.name + "': empty cover set (count < 1)");
    } else {
        if (list_cover_files(s.covers).empty())
            throw ConfigError("scenario '" + s.name + "': empty cover set in " + s.covers.dir);
    }
}

constexpr std::uint64_t kUserListStream = 0x75736572ULL;    // attribution user pool
constexpr std::uint64_t kTrueUserStream = 0x74727565ULL;    // slot of the true key
constexpr std::uint64_t kEmbedStream = 0x656D6264ULL;       // per-row embedding draw

RowResult compute_row(const ExperimentConfig& cfg, const ScenarioRuntime& rt, int cover_idx,
                      std::uint64_t row_seed) {
    const ScenarioSpec& spec = *rt.spec;
    const ModelBundle& target = *rt.target;
    const ModelBundle& proxy = *rt.proxy;

    RowResult row;
    row.scenario = spec.name;
    row.target = spec.model;
    row.watermark = spec.key;
    row.attack = spec.attack;
    row.cover_id = cover_idx;

    SamplerConfig gen;
    gen.n_steps = cfg.defaults.n_steps;
    gen.guidance_scale = cfg.defaults.guidance_scale;

    // Watermarked image (defender side).
    const std::uint64_t embed_seed = derive_seed(row_seed, kEmbedStream);
    const auto t_gen0 = std::chrono::steady_clock::now();
    LatentTensor z_w = std::holds_alternative<GsKey>(rt.key)
                           ? gs_embed(std::get<GsKey>(rt.key), target.shape(), embed_seed)
                           : tr_embed(std::get<TrKey>(rt.key), target.shape(), embed_seed);
    const ImageTensor x_w =
        target.codec.decode(ddim_sample(target.mixture, target.schedule, z_w, gen));
    const double gen_wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_gen0).count();

    // Attack.
    const ImageTensor& cover = rt.covers[static_cast<std::size_t>(cover_idx)];
    ImageTensor scored;
    double attack_wall = 0.0;
    if (spec.attack == "none") {
        scored = x_w;
    } else {
        const auto t0 = std::chrono::steady_clock::now();
        if (spec.attack == "pnp") {
            ForgeryConfig fc;
            fc.invert_steps = spec.params.invert_steps;
            fc.regen_steps = spec.params.regen_steps;
            fc.lambda = spec.params.lambda;
            fc.gamma = spec.params.gamma;
            fc.condition = spec.params.condition;
            scored = pnp_forge(x_w, cover, proxy, fc).image;
        } else if (spec.attack == "imprint") {
            const LatentTensor z_star = estimate_watermark_latent(
                x_w, proxy, spec.params.invert_steps, spec.params.condition);
            ImprintConfig ic;
            ic.n_iters = spec.params.n_iters;
            ic.mu = spec.params.mu;
            ic.invert_steps = spec.params.invert_steps;
            ic.condition = spec.params.condition;
            scored = imprint_forge(z_star, cover, proxy, ic).image;
        } else {  // reprompt
            scored = reprompt(x_w, proxy, spec.params.reprompt_condition,
                              spec.params.invert_steps, spec.params.regen_steps);
        }
        attack_wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    row.wall_s = spec.attack == "none" ? gen_wall : attack_wall;

    // Defender: invert with the real codec/model, then score.
    const LatentTensor back = ddim_invert_naive(target.mixture, target.schedule,
                                                target.codec.encode(scored), gen);
    if (std::holds_alternative<GsKey>(rt.key)) {
        const GsKey& key = std::get<GsKey>(rt.key);
        const GsDetectionReport rep = gs_detect(key, back, cfg.defaults.fpr_gs);
        row.bit_acc = rep.bit_accuracy;
        row.detected = rep.detected;
        if (!rt.users.empty()) {
            const GsAttributionResult att = gs_attribute(rt.users, back, cfg.defaults.fpr_gs);
            row.attributed = att.matched_user == rt.true_user_index;
        }
    } else {
        const TrKey& key = std::get<TrKey>(rt.key);
        const TrDetectionReport rep = tr_detect(key, back, rt.tr_threshold, &rt.tr_nulls);
        row.distance = rep.distance;
        row.p_value = rep.p_value;
        row.detected = rep.detected;
    }

    // Quality metrics: forged output vs its cover; unattacked rows compare
    // the published image with itself (identity by construction).
    const ImageTensor& reference = spec.attack == "none" ? x_w : cover;
    row.psnr_db = psnr_db(scored, reference);
    row.ssim = ssim(scored, reference);
    return row;
}

}  // namespace

MatrixResult run_matrix(const ExperimentConfig& cfg, int jobs, std::ostream* log) {
    if (cfg.scenarios.empty()) throw ConfigError("config: no scenarios to run");
    if (jobs < 1) jobs = 1;
    for (const ScenarioSpec& s : cfg.scenarios) validate_scenario(cfg, s);

    // Heavy shared state per scenario (bundles are cached by name + mismatch).
    std::map<std::string, std::shared_ptr<const ModelBundle>> bundle_cache;
    auto bundle_for = [&](const std::string& name, double xi) {
        const std::string cache_key = name + "#" + format_double(xi);
        auto it = bundle_cache.find(cache_key);
        if (it != bundle_cache.end()) return it->second;
        ModelBundle b = ModelBundle::from_json(cfg.model_json(name));
        if (xi > 0.0) b = b.with_codec_mismatch(xi);
        auto sp = std::make_shared<const ModelBundle>(std::move(b));
        bundle_cache.emplace(cache_key, sp);
        return sp;
    };

    std::vector<ScenarioRuntime> runtimes;
    runtimes.reserve(cfg.scenarios.size());
    std::size_t row_count = 0;
    for (const ScenarioSpec& s : cfg.scenarios) {
        ScenarioRuntime rt;
        rt.spec = &s;
        rt.target = bundle_for(s.model, 0.0);
        const std::string proxy_name = s.proxy.empty() ? s.model : s.proxy;
        rt.proxy = bundle_for(proxy_name, s.params.xi);
        rt.key = materialize_key(cfg.key_json(s.key), s.key);

        if (std::holds_alternative<GsKey>(rt.key)) {
            const GsKey& key = std::get<GsKey>(rt.key);
            if (static_cast<std::size_t>(key.k) * static_cast<std::size_t>(key.rho) !=
                rt.target->shape().volume())
                throw ConfigError("scenario '" + s.name + "': key k*rho does not match model " +
                                  rt.target->shape().str());
            if (cfg.defaults.n_users > 1) {
                // Attribution pool with the true key at a seeded slot. If the
                // Bonferroni threshold is infeasible for this k, attribution
                // is skipped (column stays empty).
                try {
                    gs_threshold(key.k, cfg.defaults.fpr_gs / cfg.defaults.n_users);
                    const std::uint64_t users_seed =
                        derive_seed(cfg.master_seed, fnv1a64(s.name) ^ kUserListStream);
                    rt.users.resize(static_cast<std::size_t>(cfg.defaults.n_users));
                    for (int u = 0; u < cfg.defaults.n_users; ++u)
                        rt.users[static_cast<std::size_t>(u)] = gs_make_key(
                            derive_seed(users_seed, static_cast<std::uint64_t>(u) + 1), key.k,
                            key.rho, u);
                    rt.true_user_index = static_cast<int>(
                        derive_seed(users_seed, kTrueUserStream) %
                        static_cast<std::uint64_t>(cfg.defaults.n_users));
                    GsKey true_key = key;
                    true_key.user_id = rt.true_user_index;
                    rt.users[static_cast<std::size_t>(rt.true_user_index)] = true_key;
                } catch (const InfeasibleError&) {
                    rt.users.clear();
                    rt.true_user_index = -1;
                }
            }
        } else {
            const TrKey& key = std::get<TrKey>(rt.key);
            tr_pattern(key, rt.target->shape());  // validates radius/channel vs shape
            rt.tr_nulls = load_or_build_tr_nulls(
                (fs::path(cfg.output_dir) / "cache").string(), cfg.model_json(s.model),
                cfg.key_json(s.key), *rt.target, key, cfg.defaults.null_n, cfg.defaults.n_steps);
            rt.tr_threshold = calibrate_threshold(rt.tr_nulls, cfg.defaults.fpr_tr, true);
        }

        // Covers.
        if (s.covers.source == "mixture") {
            SamplerConfig gen;
            gen.n_steps = cfg.defaults.n_steps;
            gen.guidance_scale = cfg.defaults.guidance_scale;
            rt.covers.reserve(static_cast<std::size_t>(s.covers.count));
            for (int i = 0; i < s.covers.count; ++i) {
                Rng rng(derive_seed(s.covers.seed, static_cast<std::uint64_t>(i) + 1));
                const LatentTensor z = rng.normal_latent(rt.target->shape());
                rt.covers.push_back(rt.target->codec.decode(
                    ddim_sample(rt.target->mixture, rt.target->schedule, z, gen)));
            }
        } else {
            for (const fs::path& p : list_cover_files(s.covers)) {
                ImageTensor img = load_image(p.string());
                require_same_shape(img.shape, rt.target->shape(), "cover file");
                rt.covers.push_back(std::move(img));
            }
        }

        rt.first_row = row_count;
        row_count += rt.covers.size();
        runtimes.push_back(std::move(rt));
        if (log)
            *log << "scenario " << s.name << ": " << runtimes.back().covers.size()
                 << " covers ready\n";
    }

    // Row tasks, deterministically seeded by global row index.
    struct Task {
        const ScenarioRuntime* rt;
        int cover_idx;
        std::uint64_t row_seed;
    };
    std::vector<Task> tasks;
    tasks.reserve(row_count);
    for (const ScenarioRuntime& rt : runtimes)
        for (std::size_t i = 0; i < rt.covers.size(); ++i)
            tasks.push_back(Task{&rt, static_cast<int>(i),
                                 derive_seed(cfg.master_seed, rt.first_row + i + 1)});

    std::vector<RowResult> rows(tasks.size());
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= tasks.size()) return;
            try {
                rows[i] = compute_row(cfg, *tasks[i].rt, tasks[i].cover_idx, tasks[i].row_seed);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
    };
    const int n_threads = std::min<int>(jobs, static_cast<int>(tasks.size()));
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (first_error) std::rethrow_exception(first_error);

    MatrixResult res;
    res.rows = std::move(rows);
    res.summary = summarize_rows(res.rows);
    if (log) *log << "completed " << res.rows.size() << " rows\n";
    return res;
}

MatrixResult run_matrix_to_files(const ExperimentConfig& cfg, int jobs, std::ostream* log) {
    MatrixResult res = run_matrix(cfg, jobs, log);
    fs::create_directories(cfg.output_dir);
    write_rows_csv(res.rows, (fs::path(cfg.output_dir) / "rows.csv").string());
    std::ofstream f(fs::path(cfg.output_dir) / "summary.json", std::ios::binary);
    if (!f) throw IoError("cannot open summary.json for writing under " + cfg.output_dir);
    f << res.summary.dump(2) << "\n";
    if (!f) throw IoError("write failed: summary.json");
    return res;
}

}  // namespace latentmark
