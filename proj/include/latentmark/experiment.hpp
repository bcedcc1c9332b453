#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "latentmark/model.hpp"
#include "latentmark/watermark_gs.hpp"
#include "latentmark/watermark_tr.hpp"

namespace latentmark {

// Attack knobs a scenario may set; unset fields fall back to these defaults.
struct AttackParams {
    double lambda = 0.0;
    double gamma = 1.0;
    double xi = 0.0;  // proxy codec mismatch in [0, 1]
    int invert_steps = 50;
    int regen_steps = 50;
    int n_iters = 50;     // imprint
    double mu = 1e-4;     // imprint
    std::optional<std::string> condition;
    std::optional<std::string> reprompt_condition;
};

struct CoverSpec {
    int count = 0;                  // for "dir": 0 means all files
    std::uint64_t seed = 0;         // dataset identity for "mixture"
    std::string source = "mixture"; // "mixture" | "dir"
    std::string dir;
};

struct ScenarioSpec {
    std::string name;
    std::string model;   // defender's bundle
    std::string proxy;   // attacker's bundle; empty = same as model
    std::string key;
    std::string attack;  // none | pnp | imprint | reprompt
    AttackParams params;
    CoverSpec covers;
};

struct ExperimentDefaults {
    double fpr_gs = 1e-3;
    double fpr_tr = 1e-2;
    int null_n = 5000;
    int n_users = 1000;
    int n_steps = 50;            // generation / defender inversion ladder
    double guidance_scale = 7.5; // carried into SamplerConfig (inert here)
};

// Top-level config consumed by the CLI. Models and keys are kept as raw JSON
// so caches can be keyed by content.
struct ExperimentConfig {
    std::uint64_t master_seed = 0;
    std::string output_dir = "out";
    std::map<std::string, nlohmann::json> models;
    std::map<std::string, nlohmann::json> keys;
    std::vector<ScenarioSpec> scenarios;
    ExperimentDefaults defaults;

    static ExperimentConfig from_json(const nlohmann::json& j);
    // Throws ConfigError, including the byte offset for JSON syntax errors.
    static ExperimentConfig load_file(const std::string& path);

    const nlohmann::json& model_json(const std::string& name) const;
    const nlohmann::json& key_json(const std::string& name) const;
};

// One scored image; optional fields stay empty where a column does not apply
// (e.g. distance for a multi-bit key, bit_acc for a zero-bit key).
struct RowResult {
    std::string scenario;
    std::string target;
    std::string watermark;
    std::string attack;
    int cover_id = 0;
    std::optional<double> bit_acc;
    std::optional<double> distance;
    std::optional<double> p_value;
    bool detected = false;
    std::optional<bool> attributed;
    std::optional<double> psnr_db;
    std::optional<double> ssim;
    double wall_s = 0.0;
};

// Shortest round-trip decimal form; +/-infinity render as "inf"/"-inf".
std::string format_double(double v);

// rows.csv with the fixed header
// scenario,target,watermark,attack,cover_id,bit_acc,distance,p_value,
// detected,attributed,psnr_db,ssim,wall_s
void write_rows_csv(const std::vector<RowResult>& rows, const std::string& path);
std::vector<RowResult> read_rows_csv(const std::string& path);

// Per-scenario aggregates (rates, medians/means, timing under "timing").
nlohmann::json summarize_rows(const std::vector<RowResult>& rows);

// Null distance table for a frequency-ring key: clean latents pushed through
// generate -> decode -> encode -> invert on the given bundle, then scored.
// Seeded by content, not by the experiment master seed, so tables are
// reusable across configs.
std::vector<double> tr_pipeline_nulls(const ModelBundle& bundle, const TrKey& key, int n,
                                      int n_steps);

// File-backed cache for the above keyed by (model json, key json, n, n_steps).
std::vector<double> load_or_build_tr_nulls(const std::string& cache_dir,
                                           const nlohmann::json& model_json,
                                           const nlohmann::json& key_json,
                                           const ModelBundle& bundle, const TrKey& key, int n,
                                           int n_steps);

struct MatrixResult {
    std::vector<RowResult> rows;
    nlohmann::json summary;
};

// Runs every scenario over its covers. Validates the whole config up front
// (unknown names, empty cover sets, bad parameters all fail before any file
// is touched). `jobs` caps worker threads; results do not depend on it.
MatrixResult run_matrix(const ExperimentConfig& cfg, int jobs = 1, std::ostream* log = nullptr);

// run_matrix + rows.csv + summary.json under cfg.output_dir.
MatrixResult run_matrix_to_files(const ExperimentConfig& cfg, int jobs = 1,
                                 std::ostream* log = nullptr);

}  // namespace latentmark
