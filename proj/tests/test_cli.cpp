// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "ntrm/synth.hpp"

using namespace ntrm;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "ntrm_cli_test";

int run(const std::string& args) {
    const std::string cmd = std::string(NTRM_CLI) + " " + args + " > " + (kRoot / "stdout.txt").string() +
                            " 2> " + (kRoot / "stderr.txt").string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

const std::string kSmall =
    "--synth.train_count 4 --synth.val_count 2 --synth.test_count 2 --synth.image_size 32 "
    "--model.base_width 4 --model.node_dim 8 --train.batch_size 2 --train.lr 1e-3";

std::string data_arg() { return "--paths.data " + (kRoot / "data").string(); }
std::string out_arg() { return "--paths.out " + (kRoot / "run").string(); }

}  // namespace

TEST_CASE("command line end to end") {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);

    SUBCASE("usage errors") {
        CHECK(run("") == 1);
        CHECK(run("frobnicate") == 1);
        CHECK(run("--help") == 0);
        CHECK(run("synth " + data_arg() + " --synth.bogus 3") == 1);
        CHECK(run("synth " + data_arg() + " --synth.num_classes 13 --model.num_classes 13") == 1);
        CHECK(run("synth " + data_arg() + " --synth.num_classes 4") == 1);
        CHECK(run("gradcheck --scope nonsense") == 1);
        CHECK(run("train --config " + (kRoot / "missing.json").string()) != 0);
    }

    SUBCASE("synth, train, resume, eval, infer, graph dump") {
        REQUIRE(run("synth " + kSmall + " " + data_arg()) == 0);
        const json manifest = read_json(kRoot / "data" / "manifest");
        CHECK(manifest["splits"]["train"].size() == 4);
        CHECK(read_json(kRoot / "data" / "config.json")["synth"]["image_size"] == 32);
        CHECK(run("synth " + kSmall + " " + data_arg()) == 0);
        CHECK(read_json(kRoot / "data" / "manifest")["data_checksum"] == manifest["data_checksum"]);
        // A different config does not overwrite without --force.
        CHECK(run("synth " + kSmall + " " + data_arg() + " --synth.seed 9") == 2);
        CHECK(read_json(kRoot / "data" / "manifest") == manifest);

        // A config file with an override on top.
        {
            std::ofstream cfg(kRoot / "cfg.json");
            cfg << R"({"train": {"max_epochs": 3, "seed": 11}, "model": {"gnn_variant": "simple"}})";
        }
        const std::string train_args = "train -c " + (kRoot / "cfg.json").string() + " " + kSmall + " " + data_arg() +
                                       " " + out_arg() + " --train.max_epochs=2";
        REQUIRE(run(train_args + " --epochs 1") == 0);
        const json echo = read_json(kRoot / "run" / "config.json");
        CHECK(echo["train"]["max_epochs"] == 2);
        CHECK(echo["train"]["seed"] == 11);
        CHECK(echo["model"]["gnn_variant"] == "simple");
        REQUIRE(run(train_args + " --resume") == 0);
        const std::string log = slurp(kRoot / "run" / "train_log.csv");
        CHECK(std::count(log.begin(), log.end(), '\n') == 3);
        CHECK(fs::exists(kRoot / "run" / "best.ckpt"));
        CHECK(run(train_args + " --resume --train.lr 5e-4") == 1);

        const std::string ckpt = (kRoot / "run" / "last.ckpt").string();
        REQUIRE(run("eval --checkpoint " + ckpt + " --split val --out " + (kRoot / "eval").string()) == 0);
        const json report = read_json(kRoot / "eval" / "report.json");
        CHECK(report["samples"] == 2);
        for (int c = 0; c < 5; ++c) CHECK(report.contains("per_class." + std::to_string(c) + ".iou"));
        REQUIRE(run("eval --checkpoint " + ckpt + " --split val --out " + (kRoot / "eval2").string()) == 0);
        CHECK(read_json(kRoot / "eval2" / "report.json") == report);
        CHECK(run("eval --checkpoint " + (kRoot / "nope.ckpt").string()) == 2);

        const fs::path img = kRoot / "data" / "test" / "img_00006.ppm";
        REQUIRE(run("infer --checkpoint " + ckpt + " --image " + img.string() + " --out " + (kRoot / "infer").string()) == 0);
        const Image overlay = read_image(kRoot / "infer" / "img_00006_overlay.ppm");
        CHECK(overlay.height == 32);
        CHECK(overlay.width == 32);
        const LabelMap pred = read_label(kRoot / "infer" / "img_00006_label.pgm", 5);
        CHECK(pred.size() == 32 * 32);
        const std::string first = slurp(kRoot / "infer" / "img_00006_overlay.ppm");
        REQUIRE(run("infer --checkpoint " + ckpt + " --image " + img.string() + " --out " + (kRoot / "infer").string()) == 0);
        CHECK(slurp(kRoot / "infer" / "img_00006_overlay.ppm") == first);

        Image odd;
        odd.height = odd.width = 40;
        odd.data.assign(3 * 40 * 40, 0.5);
        write_image(kRoot / "odd.ppm", odd);
        CHECK(run("infer --checkpoint " + ckpt + " --image " + (kRoot / "odd.ppm").string()) == 2);

        REQUIRE(run("graph-dump --checkpoint " + ckpt + " --image " + img.string() + " --out " + (kRoot / "graphs").string()) == 0);
        const json graph = read_json(kRoot / "graphs" / "img_00006_graph.json");
        CHECK(graph["nodes"].size() == 5);
        CHECK(graph["nodes"][0]["embedding"].size() == 8);
        for (const auto& e : graph["edges"]) {
            bool mirrored = false;
            for (const auto& f : graph["edges"]) mirrored = mirrored || (f["i"] == e["j"] && f["j"] == e["i"]);
            CHECK(mirrored);
        }
        CHECK(graph["config"]["gnn_variant"] == "simple");

        // A diverging learning rate aborts as a numerical failure.
        CHECK(run("train " + kSmall + " " + data_arg() + " --paths.out " + (kRoot / "nan").string() +
                  " --train.lr 1e300 --train.max_epochs 3") == 3);
        CHECK(slurp(kRoot / "stderr.txt").find("non-finite") != std::string::npos);
    }

    SUBCASE("gradcheck scopes") {
        CHECK(run("gradcheck --scope op") == 0);
        CHECK(slurp(kRoot / "stdout.txt").find("0 group(s) above") != std::string::npos);
    }
    fs::remove_all(kRoot);
}
