// SPDX-License-Identifier: Apache-2.0
//
// dsrt <subcommand> --config <file> [--set key=value ...] --out <dir>
//
// Subcommands: synth, train-teacher, stage1, stage2, stream, ablate-window,
// ablate-beta, bench. DSRT_PRECISION selects f32 or f64 (default f64).
// Exit codes: 0 success, 2 config error, 3 missing prerequisite, 4 numeric
// failure.
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dsrt/drivers.hpp"

namespace {

using dsrt::json;

json load_config(const std::string& path, const std::vector<std::string>& overrides) {
    json j;
    if (!path.empty()) {
        std::ifstream f(path);
        if (!f) throw dsrt::PrereqError("config: cannot open " + path);
        try {
            j = json::parse(f);
        } catch (const json::exception& e) {
            throw dsrt::ConfigError(std::string("config: ") + e.what());
        }
    } else {
        j = json::object();
    }
    for (const auto& o : overrides) dsrt::apply_override(j, o);
    return j;
}

struct CommonArgs {
    std::string config_path;
    std::string out = "runs/out";
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "JSON run configuration");
    cmd->add_option("--set", args.overrides, "dotted-path overrides, key=value");
    cmd->add_option("--out", args.out, "run directory");
}

template <typename R>
int dispatch(const std::string& name, const CommonArgs& args, const std::string& teacher,
             const std::string& stage1, const std::string& ckpt) {
    auto cfg = dsrt::parse_run_config(load_config(args.config_path, args.overrides));
    json summary;
    if (name == "synth") {
        summary = dsrt::cmd_synth<R>(cfg, args.out);
    } else if (name == "train-teacher") {
        summary = dsrt::cmd_train_teacher<R>(cfg, args.out);
    } else if (name == "stage1") {
        summary = dsrt::cmd_stage1<R>(cfg, args.out, teacher);
    } else if (name == "stage2") {
        summary = dsrt::cmd_stage2<R>(cfg, args.out, stage1, teacher);
    } else if (name == "stream") {
        summary = dsrt::cmd_stream<R>(cfg, args.out, ckpt);
    } else if (name == "ablate-window") {
        summary = dsrt::cmd_ablate_window<R>(cfg, args.out);
    } else if (name == "ablate-beta") {
        summary = dsrt::cmd_ablate_beta<R>(cfg, args.out);
    } else if (name == "bench") {
        summary = dsrt::cmd_bench<R>(cfg, args.out, ckpt);
    }
    std::cout << summary.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dsrt: streaming dual-stream latent flow lab"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string teacher, stage1, ckpt;
    std::string betas;
    long long freeze_after = -1;
    long long blocks = -1, window = -1, capacity = -1, seed_flag = -1;

    auto* c_synth = app.add_subcommand("synth", "generate a synthetic dataset");
    auto* c_teacher = app.add_subcommand("train-teacher", "pretrain the bidirectional teacher");
    auto* c_stage1 = app.add_subcommand("stage1", "causal-mask regression to the teacher");
    auto* c_stage2 = app.add_subcommand("stage2", "self-rollout distillation with rewards");
    auto* c_stream = app.add_subcommand("stream", "block-wise streaming generation");
    auto* c_ablw = app.add_subcommand("ablate-window", "look-ahead window ablation");
    auto* c_ablb = app.add_subcommand("ablate-beta", "reward coefficient ablation");
    auto* c_bench = app.add_subcommand("bench", "streaming vs full-recompute benchmark");
    for (auto* cmd : {c_synth, c_teacher, c_stage1, c_stage2, c_stream, c_ablw, c_ablb, c_bench}) {
        add_common(cmd, args);
    }
    c_stage1->add_option("--teacher", teacher, "teacher checkpoint base path");
    c_stage2->add_option("--teacher", teacher, "teacher checkpoint base path");
    c_stage2->add_option("--stage1", stage1, "stage-1 student checkpoint base path");
    c_stage2->add_option("--betas", betas, "metric weights, e.g. sync=2,visual=0,audio=0");
    c_stage2->add_option("--freeze-video-after", freeze_after,
                         "joint steps before the audio-only phase");
    c_stream->add_option("--ckpt", ckpt, "student checkpoint base path");
    c_stream->add_option("--blocks", blocks, "number of blocks K");
    c_stream->add_option("--window", window, "look-ahead window W in frames");
    c_stream->add_option("--capacity", capacity, "cache capacity in blocks (0 = unlimited)");
    c_stream->add_option("--seed", seed_flag, "stream seed");
    c_bench->add_option("--ckpt", ckpt, "student checkpoint base path");

    CLI11_PARSE(app, argc, argv);

    try {
        // flag sugar lowers onto --set overrides
        if (!betas.empty()) {
            std::stringstream ss(betas);
            std::string part;
            while (std::getline(ss, part, ',')) {
                const auto eq = part.find('=');
                if (eq == std::string::npos) {
                    throw dsrt::ConfigError("stage2: --betas expects name=value pairs");
                }
                args.overrides.push_back("rewards.beta_" + part.substr(0, eq) + "=" +
                                         part.substr(eq + 1));
            }
        }
        if (freeze_after >= 0) {
            args.overrides.push_back("distill.stage2_joint_steps=" +
                                     std::to_string(freeze_after));
        }
        if (blocks >= 0) args.overrides.push_back("stream.blocks=" + std::to_string(blocks));
        if (window >= 0) args.overrides.push_back("stream.window=" + std::to_string(window));
        if (capacity >= 0) {
            args.overrides.push_back("stream.capacity_blocks=" + std::to_string(capacity));
        }
        if (seed_flag >= 0) args.overrides.push_back("seed=" + std::to_string(seed_flag));

        const char* prec = std::getenv("DSRT_PRECISION");
        const std::string precision = prec ? prec : "f64";
        const std::string name = app.get_subcommands().front()->get_name();
        if (precision == "f64") {
            return dispatch<double>(name, args, teacher, stage1, ckpt);
        }
        if (precision == "f32") {
            return dispatch<float>(name, args, teacher, stage1, ckpt);
        }
        throw dsrt::ConfigError("DSRT_PRECISION must be f32 or f64, got '" + precision + "'");
    } catch (const dsrt::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const dsrt::PrereqError& e) {
        std::cerr << "prerequisite error: " << e.what() << "\n";
        return 3;
    } catch (const dsrt::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
