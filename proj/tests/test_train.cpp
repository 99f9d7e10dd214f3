// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "ntrm/train.hpp"
#include "test_util.hpp"

using namespace ntrm;
using namespace ntrm::testing;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("ntrm_train_" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

ModelConfig tiny_config(int k = 3) {
    ModelConfig cfg;
    cfg.num_classes = k;
    cfg.base_width = 4;
    cfg.node_dim = 8;
    return cfg;
}

Dataset tiny_dataset(int k = 3, int train = 4, int val = 2) {
    Dataset d;
    d.config.num_classes = k;
    d.config.image_size = 32;
    d.config.train_count = train;
    d.config.val_count = val;
    d.config.test_count = 0;
    for (int i = 0; i < train; ++i) d.train.push_back(generate(d.config, i));
    for (int i = 0; i < val; ++i) d.val.push_back(generate(d.config, train + i));
    return d;
}

TrainConfig quick_train(int epochs) {
    TrainConfig t;
    t.max_epochs = epochs;
    t.batch_size = 2;
    t.lr = 1e-3;
    t.seed = 5;
    return t;
}

/// One scalar parameter whose gradient is set to `g` by a probe loss.
void set_grad(ParamStore& store, double g) {
    store.zero_grad();
    sum(scale(store.get("w"), g)).backward();
}

std::map<std::string, std::vector<double>> snapshot(const ParamStore& store) {
    std::map<std::string, std::vector<double>> out;
    for (const auto& p : store.paths()) out[p] = store.get(p).values();
    return out;
}

}  // namespace

TEST_CASE("plateau scheduler traces") {
    SUBCASE("improving losses keep the rate") {
        PlateauScheduler s;
        for (double l : {1.0, 0.9, 0.8}) CHECK(s.step(l) == 1e-4);
    }
    SUBCASE("flat losses halve after patience epochs, twice") {
        PlateauScheduler s;
        std::vector<double> trace;
        for (int e = 0; e < 11; ++e) trace.push_back(s.step(1.0));
        // Epoch 1 sets the best; epochs 2..6 are flat; the fifth flat epoch reduces.
        const std::vector<double> want{1e-4, 1e-4, 1e-4, 1e-4, 1e-4, 5e-5, 5e-5, 5e-5, 5e-5, 5e-5, 2.5e-5};
        CHECK(trace == want);
        CHECK(s.reductions == 2);
        CHECK(s.lr == 1e-4 * 0.5 * 0.5);
    }
    SUBCASE("an improvement resets the counter") {
        PlateauScheduler s;
        for (double l : {1.0, 1.0, 1.0, 1.0, 0.5, 0.6, 0.6, 0.6, 0.6}) CHECK(s.step(l) == 1e-4);
        CHECK(s.step(0.6) == 5e-5);
    }
    SUBCASE("equal is not an improvement; the floor holds; never increases") {
        PlateauScheduler s;
        s.patience = 1;
        s.min_lr = 3e-5;
        CHECK(s.step(1.0) == 1e-4);
        CHECK(s.step(1.0) == 5e-5);
        CHECK(s.step(1.0) == 3e-5);
        CHECK(s.step(1.0) == 3e-5);
        std::mt19937_64 rng(1);
        PlateauScheduler r;
        double prev = r.lr;
        for (int e = 0; e < 200; ++e) {
            const double lr = r.step(uniform({1}, rng, 0.0, 1.0).item());
            CHECK(lr <= prev);
            CHECK(lr == std::max(1e-4 * std::pow(0.5, r.reductions), r.min_lr));
            prev = lr;
        }
    }
}

TEST_CASE("early stopping") {
    EarlyStopping e;
    e.patience = 3;
    for (int i = 0; i < 50; ++i) CHECK_FALSE(e.step(1.0 / (i + 1)));
    CHECK_FALSE(e.step(1.0));
    CHECK_FALSE(e.step(1.0));
    CHECK(e.step(1.0));
}

TEST_CASE("Adam matches a scalar oracle") {
    ParamStore store;
    store.add("w", {1}, InitScheme::zeros);
    store.initialize(0);
    store.get("w").assign(std::vector<double>{0.3});
    SUBCASE("first step with g = 1 moves by lr") {
        AdamState st;
        set_grad(store, 1.0);
        adam_step(store, st, {0.1, 0.9, 0.999, 1e-8});
        CHECK(std::abs(store.get("w").item() - (0.3 - 0.1 / (1.0 + 1e-8))) < 1e-12);
        CHECK(st.step == 1);
        CHECK(st.m.at("w").item() == doctest::Approx(0.1).epsilon(1e-15));
        CHECK(st.v.at("w").item() == doctest::Approx(0.001).epsilon(1e-15));
    }
    SUBCASE("random gradient sequences") {
        std::mt19937_64 rng(2);
        std::normal_distribution<double> n(0.0, 2.0);
        for (int run = 0; run < 100; ++run) {
            AdamState st;
            const AdamHyper h{0.01 * (run + 1), 0.9, 0.999, 1e-8};
            double w = 0.3, m = 0.0, v = 0.0;
            store.get("w").assign(std::vector<double>{w});
            for (int t = 1; t <= 5; ++t) {
                const double g = n(rng);
                set_grad(store, g);
                adam_step(store, st, h);
                m = 0.9 * m + 0.1 * g;
                v = 0.999 * v + 0.001 * g * g;
                w -= h.lr * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
                CHECK(std::abs(store.get("w").item() - w) < 1e-12);
            }
        }
    }
    SUBCASE("zero gradient leaves the parameter and advances the step") {
        AdamState st;
        set_grad(store, 0.0);
        adam_step(store, st, {});
        CHECK(store.get("w").item() == 0.3);
        CHECK(st.step == 1);
    }
    SUBCASE("missing gradient is an error") {
        store.get("w").clear_grad();
        AdamState st;
        CHECK_THROWS_AS(adam_step(store, st, {}), std::logic_error);
    }
}

TEST_CASE("log rows and state documents") {
    CHECK(std::string(kLogHeader) == "epoch,train_total,train_final,train_aux,val_loss,val_miou,val_dice,lr");
    EpochRecord r;
    r.epoch = 3;
    r.train_total = 0.5;
    r.lr = 1e-4;
    CHECK(log_row(r) == "3,0.5,0,0,0,0,0,0.0001");

    TrainState s;
    s.history.push_back(r);
    const nlohmann::json doc = state_document(s);
    CHECK(doc["best_val"].is_null());
    CHECK(state_document(state_from_document(doc)) == doc);
    CHECK(std::isinf(state_from_document(doc).scheduler.best));
}

TEST_CASE("checkpoints") {
    TempDir dir("ckpt");
    Model model(tiny_config());
    model.params().initialize(3);
    const nlohmann::json cfg = {{"model", model.config()}};
    SUBCASE("save, load, save is byte-identical") {
        AdamState adam;
        adam.step = 4;
        for (const auto& p : model.params().paths()) {
            adam.m[p] = Tensor::full(model.params().get(p).shape(), 0.25);
            adam.v[p] = Tensor::full(model.params().get(p).shape(), 0.5);
        }
        nlohmann::json state = state_document(TrainState{});
        state["adam_step"] = adam.step;
        save_checkpoint(dir.path / "a.ckpt", make_checkpoint(model, &adam, cfg, state));
        const Checkpoint back = load_checkpoint(dir.path / "a.ckpt");
        save_checkpoint(dir.path / "b.ckpt", back);
        CHECK(slurp(dir.path / "a.ckpt") == slurp(dir.path / "b.ckpt"));
        CHECK(slurp(dir.path / "a.ckpt").substr(0, 8) == "NTRMCKPT");

        Model other(tiny_config());
        other.params().initialize(99);
        AdamState restored;
        restore_checkpoint(back, other, &restored);
        CHECK(snapshot(other.params()) == snapshot(model.params()));
        CHECK(restored.step == 4);
        const auto& first = model.params().paths().front();
        CHECK(restored.v.at(first).values()[0] == 0.5);
    }
    SUBCASE("a model with another K lists the offending paths") {
        save_checkpoint(dir.path / "k3.ckpt", make_checkpoint(model, nullptr, cfg, state_document(TrainState{})));
        Model four(tiny_config(4));
        four.params().initialize(1);
        try {
            restore_checkpoint(load_checkpoint(dir.path / "k3.ckpt"), four, nullptr);
            FAIL("expected a mismatch");
        } catch (const FormatError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("trm.global_embeddings") != std::string::npos);
            CHECK(msg.find("head.final.weight") != std::string::npos);
        }
        ModelConfig edge = tiny_config();
        edge.use_edge_weights = true;
        Model extra(edge);
        try {
            restore_checkpoint(load_checkpoint(dir.path / "k3.ckpt"), extra, nullptr);
            FAIL("expected a mismatch");
        } catch (const FormatError& e) {
            CHECK(std::string(e.what()).find("missing: param/trm.edge_weight") != std::string::npos);
        }
    }
    SUBCASE("bad magic") {
        std::ofstream(dir.path / "bad.ckpt") << "NOTACKPT0000";
        CHECK_THROWS_AS(load_checkpoint(dir.path / "bad.ckpt"), FormatError);
    }
}

TEST_CASE("zero learning rate leaves parameters untouched") {
    TempDir dir("lr0");
    const Dataset data = tiny_dataset();
    Model model(tiny_config());
    TrainConfig t = quick_train(1);
    t.lr = 0.0;
    train(model, data, t, {}, {dir.path, false, 0, {}});
    Model fresh(tiny_config());
    fresh.params().initialize(t.seed);
    CHECK(snapshot(model.params()) == snapshot(fresh.params()));
}

TEST_CASE("training log, loss decomposition and resume") {
    TempDir dir("run");
    const Dataset data = tiny_dataset();
    const TrainConfig t = quick_train(3);
    Model model(tiny_config());
    std::vector<EpochRecord> seen;
    const TrainState st = train(model, data, t, {{"tag", 1}}, {dir.path / "full", false, 0, [&](const EpochRecord& r) {
                                    seen.push_back(r);
                                }});
    CHECK(st.epochs_done == 3);
    CHECK(seen.size() == 3);
    const std::string log = slurp(dir.path / "full" / "train_log.csv");
    CHECK(std::count(log.begin(), log.end(), '\n') == 4);
    CHECK(log.rfind(kLogHeader, 0) == 0);
    for (const auto& r : st.history) {
        CHECK(std::abs(r.train_total - (r.train_final + t.lambda * r.train_aux)) < 1e-12);
        CHECK(std::abs(r.val_loss - (r.val_final + t.lambda * r.val_aux)) < 1e-12);
        CHECK(std::isfinite(r.val_miou));
    }
    CHECK(fs::exists(dir.path / "full" / "best.ckpt"));

    // Two epochs, then resume for the third.
    Model part(tiny_config());
    train(part, data, t, {{"tag", 1}}, {dir.path / "split", false, 2, {}});
    const std::string partial = slurp(dir.path / "split" / "train_log.csv");
    CHECK(std::count(partial.begin(), partial.end(), '\n') == 3);
    Model resumed(tiny_config());
    train(resumed, data, t, {{"tag", 1}}, {dir.path / "split", true, 0, {}});
    CHECK(slurp(dir.path / "split" / "train_log.csv") == log);
    CHECK(slurp(dir.path / "split" / "last.ckpt") == slurp(dir.path / "full" / "last.ckpt"));
    CHECK(snapshot(resumed.params()) == snapshot(model.params()));
}

TEST_CASE("training rejects mismatched data and non-finite losses") {
    TempDir dir("bad");
    Dataset data = tiny_dataset();
    Model wrong(tiny_config(4));
    CHECK_THROWS_AS(train(wrong, data, quick_train(1), {}, {dir.path, false, 0, {}}), std::invalid_argument);

    data.train[0].image.data[5] = std::nan("");
    TrainConfig t = quick_train(1);
    t.augment = false;
    t.batch_size = 4;
    Model model(tiny_config());
    try {
        train(model, data, t, {}, {dir.path, false, 0, {}});
        FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
        CHECK(std::string(e.what()).find("non-finite") != std::string::npos);
        CHECK(std::string(e.what()).find("encoder.stem.conv") != std::string::npos);
    }
}

TEST_CASE("training configuration documents") {
    RunConfig rc;
    rc.train.lr = 3e-4;
    rc.model.num_classes = 4;
    rc.synth.num_classes = 4;
    const nlohmann::json j = rc;
    CHECK(nlohmann::json(j.get<RunConfig>()) == j);
    nlohmann::json bad = j;
    bad["train"]["batch"] = 4;
    CHECK_THROWS_AS(bad.get<RunConfig>(), std::invalid_argument);
    RunConfig mismatch = rc;
    mismatch.synth.num_classes = 5;
    CHECK_THROWS_AS(mismatch.validate(), std::invalid_argument);
    TrainConfig tc;
    tc.plateau_factor = 1.0;
    CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
}

TEST_CASE("a single sample can be overfit") {
    TempDir dir("overfit");
    Dataset data = tiny_dataset(3, 1, 0);
    data.config.image_size = 64;
    data.train = {generate(data.config, 0)};
    ModelConfig mc = tiny_config();
    mc.base_width = 8;
    Model model(mc);
    TrainConfig t;
    t.max_epochs = 200;
    t.batch_size = 1;
    t.lr = 3e-3;
    t.augment = false;
    t.early_stop_patience = 200;
    t.plateau_patience = 200;
    // The auxiliary term compares a 2 x 2 coarse map with 64 x 64 labels and
    // cannot reach zero, so the bound applies to the final-stage term.
    double best_final = INFINITY;
    int epochs = 0;
    train(model, data, t, {}, {dir.path, false, 0, [&](const EpochRecord& r) {
                                   best_final = std::min(best_final, r.train_final);
                                   ++epochs;
                               }});
    CHECK(epochs == 200);
    CHECK(best_final < 0.05);
}
