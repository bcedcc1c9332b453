// End-to-end checks of the command-line tool as a subprocess. The binary path
// arrives through the LM_CLI_PATH compile definition.
#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "latentmark/image_io.hpp"
#include "latentmark/watermark_gs.hpp"

using namespace latentmark;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("lm_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    static int& counter() {
        static int c = 0;
        return c;
    }
    std::string str(const std::string& name = "") const {
        return name.empty() ? path.string() : (path / name).string();
    }
};

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

struct CmdResult {
    int code = -1;
    std::string out;
    std::string err;
};

CmdResult run_cli(const TempDir& tmp, const std::string& args) {
    const std::string out_path = tmp.str("_stdout.txt");
    const std::string err_path = tmp.str("_stderr.txt");
    const std::string cmd =
        std::string(LM_CLI_PATH) + " " + args + " >" + out_path + " 2>" + err_path;
    const int rc = std::system(cmd.c_str());
    CmdResult r;
    r.code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    r.out = slurp(out_path);
    r.err = slurp(err_path);
    return r;
}

std::vector<nlohmann::json> json_lines(const std::string& text) {
    std::vector<nlohmann::json> lines;
    std::istringstream ss(text);
    std::string line;
    while (std::getline(ss, line))
        if (!line.empty()) lines.push_back(nlohmann::json::parse(line));
    return lines;
}

// 1x8x8 world, thresholds picked so single-bit slips don't flip outcomes.
std::string write_config(const TempDir& tmp) {
    nlohmann::json j = {
        {"master_seed", 4242},
        {"output_dir", tmp.str("out")},
        {"defaults",
         {{"fpr_gs", 0.05},
          {"fpr_tr", 0.1},
          {"null_n", 40},
          {"n_users", 2},
          {"n_steps", 20}}},
        {"models",
         {{"m",
           {{"mixture",
             {{"shape", {1, 8, 8}},
              {"generator",
               {{"components", 2},
                {"seed", 3},
                {"mean_scale", 0.8},
                {"cov_scale", 1.0},
                {"classes", true}}}}},
            {"codec", {{"seed", 13}}}}},
          {"m4",
           {{"mixture",
             {{"shape", {4, 8, 8}},
              {"generator",
               {{"components", 2},
                {"seed", 3},
                {"mean_scale", 0.8},
                {"cov_scale", 1.0}}}}},
            {"codec", {{"seed", 13}}}}}}},
        {"keys",
         {{"g", {{"type", "gs"}, {"seed", 5}, {"k", 8}, {"rho", 8}}},
          {"t", {{"type", "tr"}, {"radius", 2}, {"channel", 0}, {"seed", 77}}}}},
        {"scenarios",
         {{{"name", "clean-g"},
           {"model", "m"},
           {"key", "g"},
           {"attack", "none"},
           {"covers", {{"count", 2}, {"seed", 9}}}},
          {{"name", "clean-t"},
           {"model", "m"},
           {"key", "t"},
           {"attack", "none"},
           {"covers", {{"count", 2}, {"seed", 11}}}}}}};
    const std::string path = tmp.str("config.json");
    std::ofstream f(path);
    f << j.dump(2) << "\n";
    return path;
}

}  // namespace

TEST_CASE("cli: argument errors exit 2 with usage text") {
    TempDir tmp;
    CmdResult r = run_cli(tmp, "");
    CHECK(r.code == 2);
    CHECK(r.err.find("Usage") != std::string::npos);

    r = run_cli(tmp, "frobnicate");
    CHECK(r.code == 2);

    r = run_cli(tmp, "detect --key g");  // missing required --config/--image
    CHECK(r.code == 2);
}

TEST_CASE("cli: config problems exit 2 with a pointed message") {
    TempDir tmp;
    CmdResult r = run_cli(tmp, "generate --config " + tmp.str("absent.json"));
    CHECK(r.code == 2);
    CHECK(r.err.find("config error:") != std::string::npos);
    CHECK(r.err.find("cannot open") != std::string::npos);

    {
        std::ofstream f(tmp.str("broken.json"));
        f << "{ \"master_seed\": 1, nope";
    }
    r = run_cli(tmp, "generate --config " + tmp.str("broken.json"));
    CHECK(r.code == 2);
    CHECK(r.err.find("at byte") != std::string::npos);

    const std::string cfg = write_config(tmp);
    r = run_cli(tmp, "generate --config " + cfg + " --model nope");
    CHECK(r.code == 2);
    CHECK(r.err.find("unknown model") != std::string::npos);
}

TEST_CASE("cli: generate writes images and optional latents deterministically") {
    TempDir tmp;
    const std::string cfg = write_config(tmp);
    const std::string gdir = tmp.str("gen");
    CmdResult r = run_cli(tmp, "generate --config " + cfg + " --model m --key g --count 2 --save-latents --out " + gdir);
    REQUIRE(r.code == 0);
    REQUIRE(fs::exists(gdir + "/gen_0000.pgm"));
    REQUIRE(fs::exists(gdir + "/gen_0001.pgm"));
    REQUIRE(fs::exists(gdir + "/gen_0000_z0.lmf1"));

    // the saved latent decodes the configured message perfectly
    LatentTensor z = load_latent_lmf1(gdir + "/gen_0000_z0.lmf1");
    GsKey key = gs_make_key(5, 8, 8);
    CHECK(gs_recover(key, z).bit_accuracy == 1.0);

    // re-running reproduces the same bytes
    const std::string before = slurp(gdir + "/gen_0000.pgm");
    r = run_cli(tmp, "generate --config " + cfg + " --model m --key g --count 1 --out " + gdir);
    REQUIRE(r.code == 0);
    CHECK(slurp(gdir + "/gen_0000.pgm") == before);

    // a seed override changes the draw
    r = run_cli(tmp, "generate --config " + cfg + " --model m --key g --count 1 --seed 777 --out " + gdir);
    REQUIRE(r.code == 0);
    CHECK(slurp(gdir + "/gen_0000.pgm") != before);
}

TEST_CASE("cli: tensor-container images and saved latents never collide") {
    // a 4-channel model has no portable pixmap, so the image itself is stored
    // as an .lmf1 container; the initial-noise file must keep a distinct name
    TempDir tmp;
    const std::string cfg = write_config(tmp);
    const std::string gdir = tmp.str("gen4");
    CmdResult r = run_cli(
        tmp, "generate --config " + cfg + " --model m4 --count 1 --save-latents --out " + gdir);
    REQUIRE(r.code == 0);
    REQUIRE(fs::exists(gdir + "/gen_0000.lmf1"));
    REQUIRE(fs::exists(gdir + "/gen_0000_z0.lmf1"));
    const LatentTensor img = load_latent_lmf1(gdir + "/gen_0000.lmf1");
    const LatentTensor z0 = load_latent_lmf1(gdir + "/gen_0000_z0.lmf1");
    CHECK(img.data != z0.data);
    // pixel container holds exact integers in the 8-bit range; noise does not
    bool integral = true;
    for (double v : img.data) integral = integral && v == std::floor(v) && v >= 0 && v <= 255;
    CHECK(integral);
}

TEST_CASE("cli: embed emits decodable latents") {
    TempDir tmp;
    const std::string cfg = write_config(tmp);
    const std::string edir = tmp.str("emb");
    CmdResult r = run_cli(tmp, "embed --config " + cfg + " --model m --key g --count 2 --out " + edir);
    REQUIRE(r.code == 0);
    GsKey key = gs_make_key(5, 8, 8);
    for (const char* name : {"latent_0000.lmf1", "latent_0001.lmf1"}) {
        LatentTensor z = load_latent_lmf1(edir + "/" + name);
        CHECK(gs_recover(key, z).bit_accuracy == 1.0);
    }
}

TEST_CASE("cli: detect scores images as one json line each") {
    TempDir tmp;
    const std::string cfg = write_config(tmp);
    const std::string gdir = tmp.str("gen");
    REQUIRE(run_cli(tmp, "generate --config " + cfg + " --model m --key g --count 2 --out " + gdir).code == 0);

    CmdResult r = run_cli(tmp, "detect --config " + cfg + " --model m --key g --image " + gdir +
                                   "/gen_0000.pgm " + gdir + "/gen_0001.pgm");
    REQUIRE(r.code == 0);
    std::vector<nlohmann::json> lines = json_lines(r.out);
    REQUIRE(lines.size() == 2);
    for (const nlohmann::json& l : lines) {
        CHECK(l.at("type") == "gs");
        CHECK(l.at("threshold").get<double>() == 0.75);  // k=8 at fpr 0.05
        CHECK(l.at("bit_accuracy").get<double>() == 1.0);
        CHECK(l.at("detected").get<bool>());
    }

    // zero-bit key: the first run builds the null cache, the second reuses it
    REQUIRE(run_cli(tmp, "generate --config " + cfg + " --model m --key t --count 1 --out " + gdir +
                             "_t")
                .code == 0);
    r = run_cli(tmp, "detect --config " + cfg + " --model m --key t --image " + tmp.str("gen_t") +
                         "/gen_0000.pgm");
    REQUIRE(r.code == 0);
    std::vector<nlohmann::json> tr_lines = json_lines(r.out);
    REQUIRE(tr_lines.size() == 1);
    CHECK(tr_lines[0].at("type") == "tr");
    CHECK(tr_lines[0].at("detected").get<bool>());
    CHECK(tr_lines[0].at("distance").get<double>() > 0.0);
    CHECK(tr_lines[0].at("p_value").get<double>() <= 1.0);
    CHECK(fs::exists(tmp.str("out") + "/cache"));

    CmdResult r2 = run_cli(tmp, "detect --config " + cfg + " --model m --key t --image " +
                                    tmp.str("gen_t") + "/gen_0000.pgm");
    REQUIRE(r2.code == 0);
    CHECK(r2.out == r.out);
}

TEST_CASE("cli: runtime failures exit 1") {
    TempDir tmp;
    const std::string cfg = write_config(tmp);
    // an image whose shape does not match the model
    {
        std::ofstream f(tmp.str("tiny.pgm"), std::ios::binary);
        f << "P5\n4 4\n255\n";
        for (int i = 0; i < 16; ++i) f.put(static_cast<char>(i));
    }
    CmdResult r = run_cli(tmp, "detect --config " + cfg + " --model m --key g --image " + tmp.str("tiny.pgm"));
    CHECK(r.code == 1);
    CHECK(r.err.find("error:") != std::string::npos);

    // a missing image file
    r = run_cli(tmp, "detect --config " + cfg + " --model m --key g --image " + tmp.str("ghost.pgm"));
    CHECK(r.code == 1);
}

TEST_CASE("cli: forge round-trips through all three attacks") {
    TempDir tmp;
    const std::string cfg = write_config(tmp);
    const std::string gdir = tmp.str("gen");
    REQUIRE(run_cli(tmp, "generate --config " + cfg + " --model m --key g --count 1 --out " + gdir).code == 0);
    REQUIRE(run_cli(tmp, "generate --config " + cfg + " --model m --count 1 --seed 31337 --out " +
                             tmp.str("cov"))
                .code == 0);
    const std::string target = gdir + "/gen_0000.pgm";
    const std::string cover = tmp.str("cov") + "/gen_0000.pgm";

    const std::string fdir = tmp.str("pnp");
    CmdResult r = run_cli(tmp, "forge pnp --config " + cfg + " --model m --target-image " + target +
                                   " --cover " + cover +
                                   " --lambda 0.1 --invert-steps 20 --regen-steps 20 --out " +
                                   fdir);
    REQUIRE(r.code == 0);
    REQUIRE(fs::exists(fdir + "/forged.pgm"));
    REQUIRE(fs::exists(fdir + "/forged_z0.lmf1"));

    // the transplanted mark still reads back through the defender pipeline
    r = run_cli(tmp, "detect --config " + cfg + " --model m --key g --image " + fdir + "/forged.pgm");
    REQUIRE(r.code == 0);
    std::vector<nlohmann::json> lines = json_lines(r.out);
    REQUIRE(lines.size() == 1);
    CHECK(lines[0].at("detected").get<bool>());

    r = run_cli(tmp, "forge imprint --config " + cfg + " --model m --target-image " + target +
                         " --cover " + cover +
                         " --n-iters 2 --invert-steps 10 --out " + tmp.str("imp"));
    REQUIRE(r.code == 0);
    CHECK(fs::exists(tmp.str("imp") + "/forged.pgm"));

    r = run_cli(tmp, "forge reprompt --config " + cfg + " --model m --target-image " + target +
                         " --reprompt-condition c1 --invert-steps 20 --regen-steps 20 --out " +
                         tmp.str("rp"));
    REQUIRE(r.code == 0);
    CHECK(fs::exists(tmp.str("rp") + "/forged.pgm"));

    // pnp and imprint require a cover
    r = run_cli(tmp, "forge pnp --config " + cfg + " --model m --target-image " + target);
    CHECK(r.code == 2);
    CHECK(r.err.find("--cover is required") != std::string::npos);

    // method outside the fixed choices is a parse error
    r = run_cli(tmp, "forge melt --config " + cfg + " --model m --target-image " + target);
    CHECK(r.code == 2);
}

TEST_CASE("cli: calibrate prints thresholds") {
    TempDir tmp;
    const std::string cfg = write_config(tmp);
    CmdResult r = run_cli(tmp, "calibrate --config " + cfg + " --model m --key g");
    REQUIRE(r.code == 0);
    std::vector<nlohmann::json> lines = json_lines(r.out);
    REQUIRE(lines.size() == 1);
    CHECK(lines[0].at("type") == "gs");
    CHECK(lines[0].at("k") == 8);
    CHECK(lines[0].at("threshold").get<double>() == 0.75);

    r = run_cli(tmp, "calibrate --config " + cfg + " --model m --key t");
    REQUIRE(r.code == 0);
    lines = json_lines(r.out);
    REQUIRE(lines.size() == 1);
    CHECK(lines[0].at("type") == "tr");
    CHECK(lines[0].at("null_n") == 40);
    CHECK(lines[0].at("threshold").get<double>() > 0.0);

    // calibration is reproducible (cache hit or rebuild, same numbers)
    CmdResult r2 = run_cli(tmp, "calibrate --config " + cfg + " --model m --key t");
    REQUIRE(r2.code == 0);
    CHECK(r2.out == r.out);
}

TEST_CASE("cli: bench runs the matrix and report re-aggregates it") {
    TempDir tmp;
    const std::string cfg = write_config(tmp);
    const std::string bdir = tmp.str("bench");
    CmdResult r = run_cli(tmp, "bench --config " + cfg + " --jobs 2 --out " + bdir);
    REQUIRE(r.code == 0);
    std::vector<nlohmann::json> lines = json_lines(r.out);
    REQUIRE(lines.size() == 1);
    CHECK(lines[0].at("rows") == 4);
    CHECK(lines[0].at("output_dir") == bdir);
    REQUIRE(fs::exists(bdir + "/rows.csv"));
    REQUIRE(fs::exists(bdir + "/summary.json"));

    r = run_cli(tmp, "report --rows " + bdir + "/rows.csv --out " + tmp.str("summary2.json"));
    REQUIRE(r.code == 0);
    nlohmann::json reported = nlohmann::json::parse(r.out);
    CHECK(reported.at("n_rows") == 4);
    CHECK(reported.at("scenarios").contains("clean-g"));
    CHECK(reported.at("scenarios").contains("clean-t"));
    nlohmann::json from_file = nlohmann::json::parse(slurp(tmp.str("summary2.json")));
    CHECK(from_file == reported);

    // the persisted summary matches the report rebuilt from rows.csv
    nlohmann::json persisted = nlohmann::json::parse(slurp(bdir + "/summary.json"));
    CHECK(persisted == reported);

    r = run_cli(tmp, "report --rows " + tmp.str("no_such.csv"));
    CHECK(r.code == 1);
}
