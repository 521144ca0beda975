// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dsrt/runcfg.hpp"

using namespace dsrt;
namespace fs = std::filesystem;

namespace {

fs::path work_dir() {
    auto dir = fs::temp_directory_path() / "dsrt_cli_tests";
    fs::create_directories(dir);
    return dir;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(DSRT_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::string read_all(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

json smoke_config() {
    return json{
        {"run_id", "smoke"},
        {"seed", 1},
        {"world",
         {{"d_a", 2}, {"d_v", 2}, {"tokens_per_frame", 2}, {"num_video_frames", 4},
          {"lead_delta", 1}, {"ar_coeff", 0.9}, {"obs_noise", 0.2}, {"n_conditions", 2}}},
        {"model",
         {{"depth", 1}, {"model_dim", 8}, {"heads", 2}, {"mlp_mult", 2}, {"d_v", 2}, {"d_a", 2},
          {"cond_vocab", 2}}},
        {"flow", {{"sampler", "uniform"}}},
        {"train", {{"steps", 40}, {"batch", 2}, {"lr", 2e-3}, {"eval_every", 20}}},
        {"distill",
         {{"stage1_steps", 20}, {"stage2_joint_steps", 2}, {"stage2_audio_steps", 3},
          {"batch", 2}, {"fake_ratio", 2}}},
        {"stream", {{"blocks", 4}, {"frames_per_block", 1}, {"window", 1}}},
        {"data", {{"train_clips", 32}, {"heldout_clips", 8}}},
    };
}

fs::path write_config(const json& j, const std::string& name) {
    auto p = work_dir() / name;
    std::ofstream f(p, std::ios::trunc);
    f << j.dump(2);
    return p;
}

}  // namespace

TEST_CASE("config schema: unknown keys are rejected with a JSON pointer") {
    auto j = smoke_config();
    j["distill"]["stage1_stepz"] = 10;
    try {
        parse_run_config(j);
        CHECK(false);
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("/distill/stage1_stepz") != std::string::npos);
    }
    auto j2 = smoke_config();
    j2["train"]["steps"] = "many";
    CHECK_THROWS_AS(parse_run_config(j2), ConfigError);
}

TEST_CASE("config consistency checks") {
    auto j = smoke_config();
    j["model"]["d_v"] = 3;  // does not match the world
    CHECK_THROWS_AS(parse_run_config(j), ConfigError);

    auto j3 = smoke_config();
    j3["stream"]["blocks"] = 3;  // 3 blocks x 1 frame != 4 frames
    CHECK_THROWS_AS(parse_run_config(j3), ConfigError);
}

TEST_CASE("dotted --set overrides parse typed values") {
    auto j = smoke_config();
    apply_override(j, "train.steps=7");
    apply_override(j, "flow.sampler=logit_normal");
    apply_override(j, "train.independent_stream_times=false");
    auto cfg = parse_run_config(j);
    CHECK(cfg.train.steps == 7);
    CHECK(cfg.flow.sampler == FlowSchedule::TimeSampler::logit_normal);
    CHECK_FALSE(cfg.train.independent_stream_times);
    CHECK_THROWS_AS(apply_override(j, "nonsense"), ConfigError);
}

TEST_CASE("cli exit codes: config=2, prerequisite=3, numeric=4") {
    auto cfg_path = write_config(smoke_config(), "smoke.json");

    // unknown key in config -> 2
    auto bad = smoke_config();
    bad["wat"] = 1;
    auto bad_path = write_config(bad, "bad.json");
    CHECK(run_cli("synth --config " + bad_path.string() + " --out " +
                  (work_dir() / "r0").string()) == 2);

    // stage2 without a stage-1 checkpoint -> 3
    CHECK(run_cli("stage2 --config " + cfg_path.string() + " --teacher " +
                  (work_dir() / "nope/teacher").string() + " --stage1 " +
                  (work_dir() / "nope/student").string() + " --out " +
                  (work_dir() / "r1").string()) == 3);

    // corrupt checkpoint payload (NaN) -> 4
    {
        auto dir = work_dir() / "corrupt";
        fs::create_directories(dir);
        // hand-build a DSRT container with a NaN payload
        std::string blob = "DSRT";
        auto put_u32 = [&blob](uint32_t v) {
            for (int i = 0; i < 4; ++i) blob.push_back(char((v >> (8 * i)) & 0xFF));
        };
        put_u32(1);
        put_u32(1);  // one entry
        const std::string name = "video.in_proj.w";
        put_u32(static_cast<uint32_t>(name.size()));
        blob += name;
        put_u32(2);
        for (uint64_t e : {2ull, 8ull}) {
            for (int i = 0; i < 8; ++i) blob.push_back(char((e >> (8 * i)) & 0xFF));
        }
        blob.push_back(char(2));
        const double nan = std::nan("");
        for (int i = 0; i < 16; ++i) {
            const char* b = reinterpret_cast<const char*>(&nan);
            blob.append(b, 8);
        }
        std::ofstream f(dir / "student.dsrt", std::ios::binary);
        f << blob;
        // sidecar that matches the smoke model config
        auto cfg = parse_run_config(smoke_config());
        json side{{"model", model_to_json(cfg.model)},
                  {"config_hash", model_config_hash(cfg.model)}};
        std::ofstream s(dir / "student.json");
        s << side.dump();
    }
    CHECK(run_cli("stream --config " + cfg_path.string() + " --ckpt " +
                  (work_dir() / "corrupt/student").string() + " --out " +
                  (work_dir() / "r2").string()) == 4);
}

TEST_CASE("full pipeline smoke through the cli, deterministic summaries") {
    auto cfg_path = write_config(smoke_config(), "pipe.json");
    const auto base = work_dir() / "pipe";
    fs::remove_all(base);

    CHECK(run_cli("synth --config " + cfg_path.string() + " --out " +
                  (base / "synth").string()) == 0);
    CHECK(fs::exists(base / "synth/dataset/clips.jsonl"));
    CHECK(fs::exists(base / "synth/dataset/clips.dsrt"));

    CHECK(run_cli("train-teacher --config " + cfg_path.string() + " --out " +
                  (base / "teacher").string()) == 0);
    CHECK(fs::exists(base / "teacher/teacher.dsrt"));
    CHECK(fs::exists(base / "teacher/metrics.jsonl"));

    CHECK(run_cli("stage1 --config " + cfg_path.string() + " --teacher " +
                  (base / "teacher/teacher").string() + " --out " +
                  (base / "s1").string()) == 0);
    CHECK(fs::exists(base / "s1/student_stage1.dsrt"));

    CHECK(run_cli("stage2 --config " + cfg_path.string() + " --teacher " +
                  (base / "teacher/teacher").string() + " --stage1 " +
                  (base / "s1/student_stage1").string() + " --betas sync=2,visual=0,audio=0" +
                  " --out " + (base / "s2").string()) == 0);
    CHECK(fs::exists(base / "s2/student.dsrt"));
    {
        auto summary = json::parse(read_all(base / "s2/summary.json"));
        CHECK(summary.at("video_frozen_in_audio_phase").get<bool>());
    }

    CHECK(run_cli("stream --config " + cfg_path.string() + " --ckpt " +
                  (base / "s2/student").string() + " --blocks 4 --window 1 --seed 5 --out " +
                  (base / "stream").string()) == 0);
    CHECK(fs::exists(base / "stream/stream.bin"));
    CHECK(fs::exists(base / "stream/latency.csv"));

    // rerun with the run directory's own config: identical summary bytes
    CHECK(run_cli("train-teacher --config " + (base / "teacher/config.json").string() +
                  " --out " + (base / "teacher2").string()) == 0);
    CHECK(read_all(base / "teacher/summary.json") ==
          read_all(base / "teacher2/summary.json"));

    // and the stream reruns bit-identically too
    CHECK(run_cli("stream --config " + (base / "stream/config.json").string() + " --ckpt " +
                  (base / "s2/student").string() + " --out " + (base / "stream2").string()) == 0);
    CHECK(read_all(base / "stream/stream.bin") == read_all(base / "stream2/stream.bin"));
    CHECK(read_all(base / "stream/summary.json") == read_all(base / "stream2/summary.json"));
}

TEST_CASE("precision env var switches the numeric type") {
    auto cfg_path = write_config(smoke_config(), "prec.json");
    const auto base = work_dir() / "prec";
    fs::remove_all(base);
    const std::string cmd = std::string("DSRT_PRECISION=f32 ") + DSRT_CLI_PATH +
                            " train-teacher --config " + cfg_path.string() + " --set train.steps=5 --out " +
                            (base / "t32").string() + " > /dev/null 2>&1";
    CHECK(WEXITSTATUS(std::system(cmd.c_str())) == 0);
    const std::string bad = std::string("DSRT_PRECISION=f16 ") + DSRT_CLI_PATH +
                            " synth --config " + cfg_path.string() + " --out " +
                            (base / "t16").string() + " > /dev/null 2>&1";
    CHECK(WEXITSTATUS(std::system(bad.c_str())) == 2);
}
