// End-to-end exit-code and file-layout checks for the dynavatar binary.

#include <dyav/model.hpp>

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace {

const std::string kBin = DYNAVATAR_BIN;

struct CmdResult {
    int code = -1;
    std::string output;
};

CmdResult run(const std::string& args) {
    fs::path log = fs::temp_directory_path() / "dyav_cli_log.txt";
    std::string cmd = kBin + " " + args + " > " + log.string() + " 2>&1";
    int rc = std::system(cmd.c_str());
    CmdResult r;
    r.code = WEXITSTATUS(rc);
    std::ifstream f(log);
    std::stringstream ss;
    ss << f.rdbuf();
    r.output = ss.str();
    return r;
}

std::vector<uint8_t> slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    return std::vector<uint8_t>(std::istreambuf_iterator<char>(f), {});
}

fs::path workdir() {
    fs::path d = fs::temp_directory_path() / "dyav_cli";
    fs::create_directories(d);
    return d;
}

std::string write_config(const std::string& preset) {
    fs::path p = workdir() / ("cfg_" + preset + ".json");
    std::ofstream f(p);
    f << R"({
  "model": {"d_model": 16, "heads": 2, "static_layers": 1, "dynamic_layers": 1,
            "num_points": 64, "body_res": 32, "head_res": 16, "patch": 8,
            "joints": 22, "lora_rank": 2},
  "synth": {"frames": 3, "views": 2, "res": 32, "focal": 40,
            "body_points": 48, "cloth_points": 16, "preset": ")" << preset << R"("},
  "train": {"iterations": 2, "static_iterations": 2, "batch_frames": 1,
            "batch_views": 1, "log_every": 1}
})";
    return p.string();
}

}  // namespace

TEST_CASE("no subcommand is a usage error") {
    CHECK(run("").code == 2);
}

TEST_CASE("gradcheck exits cleanly") {
    CmdResult r = run("--seed 5 gradcheck");
    CHECK(r.code == 0);
    CHECK(r.output.find("FAIL") == std::string::npos);
}

TEST_CASE("synth writes the dataset layout") {
    fs::path out = workdir() / "ds";
    fs::remove_all(out);
    CmdResult r = run("--config " + write_config("walk") + " --seed 9 --out " + out.string() +
                      " synth");
    CHECK(r.code == 0);
    CHECK(fs::exists(out / "scene.json"));
    CHECK(fs::exists(out / "poses.jsonl"));
    CHECK(fs::exists(out / "frames/2/1.png"));
    CHECK(fs::exists(out / "masks/0/0.png"));
    CHECK(fs::exists(out / "gt_gaussians/1.bin"));
    CHECK(fs::exists(out / "matches/1_2.jsonl"));
}

TEST_CASE("synth is deterministic per seed") {
    fs::path a = workdir() / "ds_a", b = workdir() / "ds_b";
    fs::remove_all(a);
    fs::remove_all(b);
    std::string cfg = write_config("spin");
    REQUIRE(run("--config " + cfg + " --seed 11 --out " + a.string() + " synth").code == 0);
    REQUIRE(run("--config " + cfg + " --seed 11 --out " + b.string() + " synth").code == 0);
    CHECK(slurp(a / "frames/1/0.png") == slurp(b / "frames/1/0.png"));
    CHECK(slurp(a / "gt_gaussians/2.bin") == slurp(b / "gt_gaussians/2.bin"));
}

TEST_CASE("invalid preset lists the options") {
    CmdResult r = run("--config " + write_config("moonwalk") + " --out " +
                      (workdir() / "nope").string() + " synth");
    CHECK(r.code == 2);
    CHECK(r.output.find("available") != std::string::npos);
    CHECK(r.output.find("walk") != std::string::npos);
}

TEST_CASE("unknown config keys are rejected") {
    fs::path p = workdir() / "typo.json";
    {
        std::ofstream f(p);
        f << R"({"train": {"iterattions": 10}})";
    }
    CmdResult r = run("--config " + p.string() + " gradcheck");
    CHECK(r.code == 2);
    CHECK(r.output.find("iterattions") != std::string::npos);
}

TEST_CASE("missing dataset is a usage error") {
    CmdResult r = run("--config " + write_config("walk") + " --out " +
                      (workdir() / "x").string() + " pretrain-static --data /nonexistent");
    CHECK(r.code == 2);
}

TEST_CASE("refit without keypoints is a usage error") {
    fs::path out = workdir() / "ds";
    if (!fs::exists(out / "scene.json"))
        REQUIRE(run("--config " + write_config("walk") + " --seed 9 --out " + out.string() +
                    " synth").code == 0);
    CmdResult r = run("--out " + (workdir() / "rf").string() + " refit --data " + out.string() +
                      " --keypoints /nonexistent.jsonl");
    CHECK(r.code == 2);
}

TEST_CASE("eval --self reports the identity sentinels") {
    fs::path out = workdir() / "ds";
    if (!fs::exists(out / "scene.json"))
        REQUIRE(run("--config " + write_config("walk") + " --seed 9 --out " + out.string() +
                    " synth").code == 0);
    fs::path ev = workdir() / "ev";
    CmdResult r = run("--out " + ev.string() + " eval --data " + out.string() + " --self");
    CHECK(r.code == 0);
    std::ifstream f(ev / "eval.csv");
    std::string header, line;
    std::getline(f, header);
    CHECK(header == "frame,view,psnr,ssim");
    REQUIRE(bool(std::getline(f, line)));
    CHECK(line.find(",inf,") != std::string::npos);
    CHECK(line.substr(line.rfind(',') + 1) == "1");
}

TEST_CASE("config-hash mismatch refuses the checkpoint with exit 3") {
    fs::path out = workdir() / "ds";
    if (!fs::exists(out / "scene.json"))
        REQUIRE(run("--config " + write_config("walk") + " --seed 9 --out " + out.string() +
                    " synth").code == 0);
    fs::path ck = workdir() / "wrong_hash.ckpt";
    dyav::save_checkpoint(ck.string(), dyav::Params{}, 0xdeadbeefULL);
    CmdResult r = run("--config " + write_config("walk") + " --out " +
                      (workdir() / "r").string() + " render --data " + out.string() + " --ckpt " +
                      ck.string());
    CHECK(r.code == 3);
    CHECK(r.output.find("hash") != std::string::npos);
}

TEST_CASE("unsupported checkpoint version exits 3") {
    fs::path ck = workdir() / "future.ckpt";
    {
        std::ofstream f(ck, std::ios::binary);
        f.write("DYAV", 4);
        uint32_t v = 7, count = 0;
        f.write(reinterpret_cast<const char*>(&v), 4);
        f.write(reinterpret_cast<const char*>(&count), 4);
    }
    fs::path out = workdir() / "ds";
    CmdResult r = run("--config " + write_config("walk") + " --out " +
                      (workdir() / "r2").string() + " render --data " + out.string() +
                      " --ckpt " + ck.string());
    CHECK(r.code == 3);
}
