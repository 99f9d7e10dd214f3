// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0
//
// ntrm: synth | train | eval | infer | graph-dump | gradcheck.
//
// Every command reads one JSON config (--config) and then applies dotted
// overrides such as `--train.lr 3e-4`; overrides win. The fully resolved
// config is written as config.json into the command's output directory.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "ntrm/grad_suite.hpp"
#include "ntrm/loss.hpp"
#include "ntrm/model.hpp"
#include "ntrm/synth.hpp"
#include "ntrm/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Twelve fixed, well separated RGB colors; class c uses entry c.
constexpr unsigned char kPalette[ntrm::kMaxClasses][3] = {
    {230, 25, 75},  {60, 180, 75},   {255, 225, 25}, {0, 130, 200},  {245, 130, 48}, {145, 30, 180},
    {70, 240, 240}, {240, 50, 230},  {210, 245, 60}, {250, 190, 212}, {0, 128, 128}, {170, 110, 40}};

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw UsageError(path.string() + ": " + e.what());
    }
}

void write_json_file(const fs::path& path, const json& doc) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    out << doc.dump(2) << "\n";
    if (!out) throw DataError("cannot write " + path.string());
}

// Applies "--a.b value" pairs left over by the option parser. Keys must
// already exist in the resolved default document.
void apply_overrides(json& doc, const std::vector<std::string>& extras) {
    for (std::size_t i = 0; i < extras.size(); ++i) {
        std::string key = extras[i];
        std::string value;
        if (key.rfind("--", 0) != 0) throw UsageError("unexpected argument '" + key + "'");
        key = key.substr(2);
        if (const auto eq = key.find('='); eq != std::string::npos) {
            value = key.substr(eq + 1);
            key = key.substr(0, eq);
        } else {
            if (i + 1 >= extras.size()) throw UsageError("override --" + key + " needs a value");
            value = extras[++i];
        }
        std::string pointer = "/" + key;
        std::replace(pointer.begin(), pointer.end(), '.', '/');
        const json::json_pointer ptr(pointer);
        if (key.find('.') == std::string::npos || !doc.contains(ptr)) {
            throw UsageError("unknown option or config key --" + key);
        }
        json parsed;
        try {
            parsed = json::parse(value);
        } catch (const json::exception&) {
            parsed = value;
        }
        doc[ptr] = parsed;
    }
}

ntrm::RunConfig resolve_config(const std::string& config_path, const std::vector<std::string>& extras) {
    json doc = ntrm::RunConfig{};
    if (!config_path.empty()) doc.merge_patch(read_json_file(config_path));
    apply_overrides(doc, extras);
    ntrm::RunConfig cfg;
    try {
        cfg = doc.get<ntrm::RunConfig>();
    } catch (const json::exception& e) {
        throw UsageError(std::string("config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

struct LoadedModel {
    ntrm::RunConfig config;
    std::unique_ptr<ntrm::Model> model;
};

LoadedModel load_model(const fs::path& checkpoint) {
    const ntrm::Checkpoint ckpt = ntrm::load_checkpoint(checkpoint);
    LoadedModel out;
    try {
        out.config = ckpt.config.get<ntrm::RunConfig>();
    } catch (const json::exception& e) {
        throw DataError(checkpoint.string() + ": bad config echo: " + e.what());
    }
    out.model = std::make_unique<ntrm::Model>(out.config.model);
    ntrm::restore_checkpoint(ckpt, *out.model, nullptr);
    return out;
}

ntrm::Sample load_input_image(const fs::path& path) {
    ntrm::Sample s;
    s.image = ntrm::read_image(path);
    if (s.image.height % 32 != 0 || s.image.width % 32 != 0) {
        throw DataError(path.string() + ": image size " + std::to_string(s.image.height) + "x" +
                        std::to_string(s.image.width) + " is not divisible by 32");
    }
    return s;
}

ntrm::Dataset load_checked_dataset(const fs::path& root, int model_classes) {
    ntrm::Dataset ds = ntrm::load_dataset(root);
    if (ds.config.num_classes != model_classes) {
        throw DataError("dataset " + root.string() + " has K = " + std::to_string(ds.config.num_classes) +
                        " but the model expects K = " + std::to_string(model_classes));
    }
    return ds;
}

int cmd_synth(const ntrm::RunConfig& cfg, bool force) {
    const fs::path root = cfg.data_dir;
    if (fs::exists(root / "manifest")) {
        const json old = ntrm::read_manifest(root);
        std::ostringstream sum;
        sum << std::hex << std::setw(16) << std::setfill('0') << ntrm::config_checksum(cfg.synth);
        if (old.value("config_checksum", "") != sum.str() && !force) {
            throw DataError(root.string() +
                            " holds a dataset generated from a different config; pass --force to overwrite");
        }
    }
    const json manifest = ntrm::write_dataset(root, cfg.synth);
    write_json_file(root / "config.json", cfg);
    std::cout << "wrote " << cfg.synth.train_count + cfg.synth.val_count + cfg.synth.test_count
              << " samples to " << root.string() << " (data checksum " << manifest.at("data_checksum").get<std::string>()
              << ")\n";
    return 0;
}

int cmd_train(const ntrm::RunConfig& cfg, bool resume, int epoch_limit) {
    const ntrm::Dataset data = load_checked_dataset(cfg.data_dir, cfg.model.num_classes);
    ntrm::Model model(cfg.model);
    const fs::path out = cfg.out_dir;
    const json echo = cfg;
    if (resume) {
        const ntrm::Checkpoint last = ntrm::load_checkpoint(out / "last.ckpt");
        if (last.config.at("model") != echo.at("model") || last.config.at("train") != echo.at("train")) {
            throw UsageError("--resume: config differs from the one stored in " + (out / "last.ckpt").string());
        }
    }
    write_json_file(out / "config.json", echo);
    std::cout << "model parameters: " << model.params().total_size() << "\n";

    ntrm::TrainOptions opt;
    opt.out_dir = out;
    opt.resume = resume;
    opt.epoch_limit = epoch_limit;
    opt.on_epoch = [](const ntrm::EpochRecord& r) {
        std::printf("epoch %3d  train %.5f (final %.5f aux %.5f)  val %.5f  mIoU %.4f  Dice %.4f  lr %.3g\n",
                    r.epoch, r.train_total, r.train_final, r.train_aux, r.val_loss, r.val_miou, r.val_dice, r.lr);
        std::fflush(stdout);
    };
    const ntrm::TrainState st = ntrm::train(model, data, cfg.train, echo, opt);
    std::cout << "best val loss " << st.best_val << " at epoch " << st.best_epoch
              << (st.stopped ? " (early stop)" : "") << "\n";
    return 0;
}

int cmd_eval(const fs::path& checkpoint, const std::string& split, const std::string& data_dir,
             const std::string& out_dir) {
    LoadedModel lm = load_model(checkpoint);
    const std::string root = data_dir.empty() ? lm.config.data_dir : data_dir;
    const ntrm::Dataset data = load_checked_dataset(root, lm.config.model.num_classes);
    const auto& samples = data.split(split);
    if (samples.empty()) throw DataError("split '" + split + "' of " + root + " is empty");
    const ntrm::EvalResult r =
        ntrm::evaluate(*lm.model, samples, lm.config.train.batch_size, lm.config.train.lambda);
    json doc = ntrm::report_document(r.metrics);
    doc["split"] = split;
    doc["samples"] = samples.size();
    doc["loss"] = r.loss;
    doc["loss_final"] = r.final_term;
    doc["loss_aux"] = r.aux_term;
    const fs::path out = out_dir.empty() ? checkpoint.parent_path() / ("eval_" + split) : fs::path(out_dir);
    lm.config.data_dir = root;
    write_json_file(out / "config.json", lm.config);
    write_json_file(out / "report.json", doc);
    std::cout << doc.dump(2) << "\n";
    return 0;
}

int cmd_infer(const fs::path& checkpoint, const std::vector<std::string>& images, const std::string& out_dir,
              bool graph_only) {
    LoadedModel lm = load_model(checkpoint);
    const fs::path out = out_dir.empty() ? checkpoint.parent_path() / (graph_only ? "graphs" : "infer")
                                         : fs::path(out_dir);
    write_json_file(out / "config.json", lm.config);
    const int k = lm.config.model.num_classes;
    for (const auto& file : images) {
        const ntrm::Sample s = load_input_image(file);
        const ntrm::Tensor x = ntrm::stack_images({&s}, lm.config.model.dtype);
        ntrm::NoGradGuard ng;
        const ntrm::ForwardOutput fwd = lm.model->forward(x, false);
        const std::string stem = fs::path(file).stem().string();
        if (graph_only) {
            const fs::path dst = out / (stem + "_graph.json");
            write_json_file(dst, ntrm::graph_document(fwd.trm.images.at(0), lm.config.model));
            std::cout << dst.string() << "\n";
            continue;
        }
        const ntrm::LabelMap pred = ntrm::argmax_labels(fwd.final_logits);
        ntrm::Image overlay = s.image;
        const auto plane = s.image.height * s.image.width;
        for (std::int64_t p = 0; p < plane; ++p) {
            const int c = std::clamp(pred.data[static_cast<std::size_t>(p)], 0, k - 1);
            for (int ch = 0; ch < 3; ++ch) {
                auto& v = overlay.data[static_cast<std::size_t>(ch * plane + p)];
                v = 0.5 * v + 0.5 * kPalette[c][ch] / 255.0;
            }
        }
        ntrm::write_label(out / (stem + "_label.pgm"), pred);
        ntrm::write_image(out / (stem + "_overlay.ppm"), overlay);
        std::cout << (out / (stem + "_label.pgm")).string() << "\n" << (out / (stem + "_overlay.ppm")).string() << "\n";
    }
    return 0;
}

int cmd_gradcheck(const std::string& scope, std::uint64_t seed) {
    std::vector<std::string> scopes;
    if (scope == "all") {
        scopes = ntrm::gradient_scopes();
    } else {
        const auto& known = ntrm::gradient_scopes();
        if (std::find(known.begin(), known.end(), scope) == known.end()) {
            throw UsageError("unknown scope '" + scope + "' (expected op, module, full-model-tiny or all)");
        }
        scopes = {scope};
    }
    constexpr double kTolerance = 1e-4;
    int failures = 0;
    double worst = 0.0;
    std::printf("%-16s %-52s %8s %12s  %s\n", "scope", "group", "entries", "max_rel_err", "status");
    for (const auto& sc : scopes) {
        for (const auto& r : ntrm::run_gradient_suite(sc, seed)) {
            const bool ok = r.entries > 0 && r.max_rel_error < kTolerance;
            failures += ok ? 0 : 1;
            worst = std::max(worst, r.max_rel_error);
            std::printf("%-16s %-52s %8lld %12.3e  %s\n", r.scope.c_str(), r.group.c_str(),
                        static_cast<long long>(r.entries), r.max_rel_error, ok ? "ok" : "FAIL");
            if (!ok) {
                std::printf("    worst at %s[%lld]: analytic %.9e numeric %.9e\n", r.worst_leaf.c_str(),
                            static_cast<long long>(r.worst_index), r.worst_analytic, r.worst_numeric);
            }
        }
    }
    std::printf("worst relative error %.3e, %d group(s) above %.0e\n", worst, failures, kTolerance);
    return failures == 0 ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Tissue relation segmentation: data synthesis, training and inference"};
    app.require_subcommand(1);

    std::string config_path;
    auto add_config = [&](CLI::App* sub) {
        sub->add_option("-c,--config", config_path, "JSON config file");
        sub->allow_extras();
    };

    auto* synth = app.add_subcommand("synth", "Generate the synthetic dataset");
    bool force = false;
    add_config(synth);
    synth->add_flag("--force", force, "Overwrite a dataset generated from a different config");

    auto* train = app.add_subcommand("train", "Train a model");
    bool resume = false;
    int epoch_limit = 0;
    add_config(train);
    train->add_flag("--resume", resume, "Continue from <out>/last.ckpt");
    train->add_option("--epochs", epoch_limit, "Stop after this many epochs in total")->check(CLI::PositiveNumber);

    std::string checkpoint, split = "test", data_dir, out_dir;
    std::vector<std::string> images;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
    eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    eval->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
    eval->add_option("--data", data_dir, "Dataset root (default: from the checkpoint config)");
    eval->add_option("--out", out_dir, "Output directory");

    auto* infer = app.add_subcommand("infer", "Write label maps and color overlays");
    infer->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    infer->add_option("--image", images, "Input PPM image(s)")->required();
    infer->add_option("--out", out_dir, "Output directory");

    auto* graph = app.add_subcommand("graph-dump", "Write the tissue graph of each image as JSON");
    graph->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    graph->add_option("--image", images, "Input PPM image(s)")->required();
    graph->add_option("--out", out_dir, "Output directory");

    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
    std::string scope = "all";
    std::uint64_t seed = 7;
    gradcheck->add_option("--scope", scope, "op, module, full-model-tiny or all");
    gradcheck->add_option("--seed", seed, "Seed for the random test instances");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*synth) return cmd_synth(resolve_config(config_path, synth->remaining()), force);
        if (*train) return cmd_train(resolve_config(config_path, train->remaining()), resume, epoch_limit);
        if (*eval) return cmd_eval(checkpoint, split, data_dir, out_dir);
        if (*infer) return cmd_infer(checkpoint, images, out_dir, false);
        if (*graph) return cmd_infer(checkpoint, images, out_dir, true);
        if (*gradcheck) return cmd_gradcheck(scope, seed);
    } catch (const ntrm::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ntrm::FormatError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const ntrm::ShapeError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
