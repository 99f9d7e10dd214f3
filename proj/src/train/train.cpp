// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0

#include "ntrm/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "ntrm/json_util.hpp"
#include "ntrm/loss.hpp"

namespace ntrm {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
    if (!(lr >= 0.0)) fail("lr must be >= 0");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (max_epochs < 1) fail("max_epochs must be >= 1");
    if (!(lambda >= 0.0)) fail("lambda must be >= 0");
    if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) fail("plateau_factor must lie in (0, 1)");
    if (plateau_patience < 1) fail("plateau_patience must be >= 1");
    if (early_stop_patience < 1) fail("early_stop_patience must be >= 1");
    if (!(min_lr >= 0.0)) fail("min_lr must be >= 0");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
        fail("Adam betas must lie in [0, 1)");
    }
    if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"lr", c.lr},
                       {"batch_size", c.batch_size},
                       {"max_epochs", c.max_epochs},
                       {"lambda", c.lambda},
                       {"plateau_factor", c.plateau_factor},
                       {"plateau_patience", c.plateau_patience},
                       {"min_lr", c.min_lr},
                       {"early_stop_patience", c.early_stop_patience},
                       {"adam_beta1", c.adam_beta1},
                       {"adam_beta2", c.adam_beta2},
                       {"adam_eps", c.adam_eps},
                       {"seed", c.seed},
                       {"augment", c.augment}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    reject_unknown_keys(j,
                        {"lr", "batch_size", "max_epochs", "lambda", "plateau_factor", "plateau_patience",
                         "min_lr", "early_stop_patience", "adam_beta1", "adam_beta2", "adam_eps", "seed",
                         "augment"},
                        "train");
    read_key(j, "lr", c.lr);
    read_key(j, "batch_size", c.batch_size);
    read_key(j, "max_epochs", c.max_epochs);
    read_key(j, "lambda", c.lambda);
    read_key(j, "plateau_factor", c.plateau_factor);
    read_key(j, "plateau_patience", c.plateau_patience);
    read_key(j, "min_lr", c.min_lr);
    read_key(j, "early_stop_patience", c.early_stop_patience);
    read_key(j, "adam_beta1", c.adam_beta1);
    read_key(j, "adam_beta2", c.adam_beta2);
    read_key(j, "adam_eps", c.adam_eps);
    read_key(j, "seed", c.seed);
    read_key(j, "augment", c.augment);
}

void RunConfig::validate() const {
    model.validate();
    train.validate();
    synth.validate();
    if (model.num_classes != synth.num_classes) {
        throw std::invalid_argument("config: model.num_classes (" + std::to_string(model.num_classes) +
                                    ") differs from synth.num_classes (" + std::to_string(synth.num_classes) + ")");
    }
}

void to_json(nlohmann::json& j, const RunConfig& c) {
    j = nlohmann::json{{"model", c.model},
                       {"train", c.train},
                       {"synth", c.synth},
                       {"paths", {{"data", c.data_dir}, {"out", c.out_dir}}}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
    reject_unknown_keys(j, {"model", "train", "synth", "paths"}, "config");
    if (j.contains("model")) from_json(j.at("model"), c.model);
    if (j.contains("train")) from_json(j.at("train"), c.train);
    if (j.contains("synth")) from_json(j.at("synth"), c.synth);
    if (j.contains("paths")) {
        const auto& p = j.at("paths");
        reject_unknown_keys(p, {"data", "out"}, "paths");
        read_key(p, "data", c.data_dir);
        read_key(p, "out", c.out_dir);
    }
}

void adam_step(ParamStore& store, AdamState& state, const AdamHyper& h) {
    for (const auto& path : store.paths()) {
        if (!store.get(path).has_grad()) {
            throw std::logic_error("adam_step: parameter '" + path + "' has no gradient");
        }
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
    for (const auto& path : store.paths()) {
        Tensor& p = store.get(path);
        auto& m = state.m[path];
        auto& v = state.v[path];
        if (!m.defined()) {
            m = Tensor::zeros(p.shape(), p.dtype());
            v = Tensor::zeros(p.shape(), p.dtype());
        }
        visit_dtype(p.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto pv = p.mutable_data<T>();
            auto mv = m.mutable_data<T>();
            auto vv = v.mutable_data<T>();
            const auto g = p.grad<T>();
            for (std::size_t i = 0; i < pv.size(); ++i) {
                const double gi = static_cast<double>(g[i]);
                const double mi = h.beta1 * static_cast<double>(mv[i]) + (1.0 - h.beta1) * gi;
                const double vi = h.beta2 * static_cast<double>(vv[i]) + (1.0 - h.beta2) * gi * gi;
                mv[i] = static_cast<T>(mi);
                vv[i] = static_cast<T>(vi);
                const double next = static_cast<double>(pv[i]) - h.lr * (mi / c1) / (std::sqrt(vi / c2) + h.eps);
                if (!std::isfinite(next)) {
                    throw NumericalError("Adam update produced a non-finite value in parameter '" + path +
                                         "' at flat index " + std::to_string(i));
                }
                pv[i] = static_cast<T>(next);
            }
        });
    }
}

double PlateauScheduler::step(double val_loss) {
    if (val_loss < best) {
        best = val_loss;
        bad_epochs = 0;
        return lr;
    }
    if (++bad_epochs >= patience) {
        lr = std::max(lr * factor, min_lr);
        ++reductions;
        bad_epochs = 0;
    }
    return lr;
}

bool EarlyStopping::step(double val_loss) {
    if (val_loss < best) {
        best = val_loss;
        bad_epochs = 0;
        return false;
    }
    return ++bad_epochs >= patience;
}

std::string log_row(const EpochRecord& r) {
    std::ostringstream os;
    os.precision(17);
    os << r.epoch << ',' << r.train_total << ',' << r.train_final << ',' << r.train_aux << ',' << r.val_loss
       << ',' << r.val_miou << ',' << r.val_dice << ',' << r.lr;
    return os.str();
}

namespace {

nlohmann::json num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

double num_from(const nlohmann::json& j) {
    return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>();
}

}  // namespace

nlohmann::json state_document(const TrainState& s) {
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& r : s.history) {
        hist.push_back({{"epoch", r.epoch},
                        {"train_total", r.train_total},
                        {"train_final", r.train_final},
                        {"train_aux", r.train_aux},
                        {"val_loss", r.val_loss},
                        {"val_final", r.val_final},
                        {"val_aux", r.val_aux},
                        {"val_miou", r.val_miou},
                        {"val_dice", r.val_dice},
                        {"lr", r.lr}});
    }
    return {{"epochs_done", s.epochs_done},
            {"scheduler",
             {{"lr", s.scheduler.lr},
              {"factor", s.scheduler.factor},
              {"patience", s.scheduler.patience},
              {"min_lr", s.scheduler.min_lr},
              {"best", num(s.scheduler.best)},
              {"bad_epochs", s.scheduler.bad_epochs},
              {"reductions", s.scheduler.reductions}}},
            {"early_stopping",
             {{"patience", s.early.patience}, {"best", num(s.early.best)}, {"bad_epochs", s.early.bad_epochs}}},
            {"best_val", num(s.best_val)},
            {"best_epoch", s.best_epoch},
            {"stopped", s.stopped},
            {"history", hist}};
}

TrainState state_from_document(const nlohmann::json& j) {
    TrainState s;
    s.epochs_done = j.at("epochs_done").get<int>();
    const auto& sc = j.at("scheduler");
    s.scheduler.lr = sc.at("lr").get<double>();
    s.scheduler.factor = sc.at("factor").get<double>();
    s.scheduler.patience = sc.at("patience").get<int>();
    s.scheduler.min_lr = sc.at("min_lr").get<double>();
    s.scheduler.best = num_from(sc.at("best"));
    s.scheduler.bad_epochs = sc.at("bad_epochs").get<int>();
    s.scheduler.reductions = sc.at("reductions").get<int>();
    const auto& es = j.at("early_stopping");
    s.early.patience = es.at("patience").get<int>();
    s.early.best = num_from(es.at("best"));
    s.early.bad_epochs = es.at("bad_epochs").get<int>();
    s.best_val = num_from(j.at("best_val"));
    s.best_epoch = j.at("best_epoch").get<int>();
    s.stopped = j.at("stopped").get<bool>();
    for (const auto& r : j.at("history")) {
        EpochRecord e;
        e.epoch = r.at("epoch").get<int>();
        e.train_total = r.at("train_total").get<double>();
        e.train_final = r.at("train_final").get<double>();
        e.train_aux = r.at("train_aux").get<double>();
        e.val_loss = r.at("val_loss").get<double>();
        e.val_final = r.at("val_final").get<double>();
        e.val_aux = r.at("val_aux").get<double>();
        e.val_miou = r.at("val_miou").get<double>();
        e.val_dice = r.at("val_dice").get<double>();
        e.lr = r.at("lr").get<double>();
        s.history.push_back(e);
    }
    return s;
}

Checkpoint make_checkpoint(const Model& model, const AdamState* adam, const nlohmann::json& config,
                           const nlohmann::json& state) {
    Checkpoint c;
    c.config = config;
    c.state = state;
    if (adam) c.state["adam_step"] = adam->step;
    const ParamStore& store = model.params();
    for (const auto& path : store.paths()) c.tensors.emplace_back("param/" + path, store.get(path).detach());
    for (const auto& [path, t] : store.buffers()) c.tensors.emplace_back("buffer/" + path, t.detach());
    if (adam && adam->step > 0) {
        for (const auto& path : store.paths()) {
            c.tensors.emplace_back("adam.m/" + path, adam->m.at(path).detach());
            c.tensors.emplace_back("adam.v/" + path, adam->v.at(path).detach());
        }
    }
    return c;
}

namespace {

void write_string(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is, std::uint32_t limit) {
    const auto n = read_u32(is);
    if (n > limit) throw FormatError("checkpoint string of " + std::to_string(n) + " bytes exceeds limit");
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw FormatError("unexpected end of checkpoint");
    return s;
}

}  // namespace

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    // Write to a sibling file, then rename, so a crash never leaves a torn checkpoint.
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw FormatError("cannot write checkpoint " + tmp.string());
        os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
        write_u8(os, kCheckpointVersion);
        write_string(os, ckpt.config.dump());
        write_string(os, ckpt.state.dump());
        write_u32(os, static_cast<std::uint32_t>(ckpt.tensors.size()));
        for (const auto& [name, t] : ckpt.tensors) write_string(os, name);
        for (const auto& [name, t] : ckpt.tensors) write_tensor(os, t);
        if (!os) throw FormatError("failed writing checkpoint " + tmp.string());
    }
    fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open checkpoint " + path.string());
    char magic[sizeof(kCheckpointMagic)] = {};
    is.read(magic, sizeof(magic));
    if (!is || !std::equal(std::begin(magic), std::end(magic), std::begin(kCheckpointMagic))) {
        throw FormatError(path.string() + ": bad checkpoint magic (expected NTRMCKPT)");
    }
    const auto version = read_u8(is);
    if (version != kCheckpointVersion) {
        throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint c;
    try {
        c.config = nlohmann::json::parse(read_string(is, 1u << 24));
        c.state = nlohmann::json::parse(read_string(is, 1u << 26));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": corrupt checkpoint header: " + e.what());
    }
    const auto n = read_u32(is);
    std::vector<std::string> names;
    for (std::uint32_t i = 0; i < n; ++i) names.push_back(read_string(is, 4096));
    for (auto& name : names) c.tensors.emplace_back(std::move(name), read_tensor(is));
    return c;
}

void restore_checkpoint(const Checkpoint& ckpt, Model& model, AdamState* adam) {
    ParamStore& store = model.params();
    std::map<std::string, const Tensor*> stored;
    for (const auto& [name, t] : ckpt.tensors) stored[name] = &t;

    std::vector<std::string> expected;
    for (const auto& p : store.paths()) expected.push_back("param/" + p);
    for (const auto& [p, t] : store.buffers()) expected.push_back("buffer/" + p);

    std::vector<std::string> missing, extra, mismatched;
    for (const auto& e : expected) {
        auto it = stored.find(e);
        if (it == stored.end()) {
            missing.push_back(e);
        }
    }
    for (const auto& [name, t] : stored) {
        const bool optimizer = name.rfind("adam.", 0) == 0;
        if (!optimizer && std::find(expected.begin(), expected.end(), name) == expected.end()) extra.push_back(name);
    }
    if (!missing.empty() || !extra.empty()) {
        std::ostringstream os;
        os << "checkpoint does not match the model configuration";
        if (!missing.empty()) {
            os << "; missing:";
            for (const auto& m : missing) os << ' ' << m;
        }
        if (!extra.empty()) {
            os << "; unexpected:";
            for (const auto& e : extra) os << ' ' << e;
        }
        throw FormatError(os.str());
    }
    for (const auto& p : store.paths()) {
        const Tensor& src = *stored.at("param/" + p);
        Tensor& dst = store.get(p);
        if (src.shape() != dst.shape()) mismatched.push_back(p + " " + shape_str(src.shape()) + " vs " + shape_str(dst.shape()));
    }
    if (!mismatched.empty()) {
        std::string msg = "checkpoint shapes differ from the model:";
        for (const auto& m : mismatched) msg += " " + m + ";";
        throw FormatError(msg);
    }
    for (const auto& p : store.paths()) {
        Tensor& dst = store.get(p);
        dst.assign(stored.at("param/" + p)->values());
        dst.clear_grad();
    }
    for (const auto& [p, t] : store.buffers()) store.set_buffer(p, *stored.at("buffer/" + p));
    if (adam) {
        *adam = AdamState{};
        adam->step = ckpt.state.value("adam_step", std::int64_t{0});
        for (const auto& p : store.paths()) {
            auto m = stored.find("adam.m/" + p);
            auto v = stored.find("adam.v/" + p);
            if (m != stored.end() && v != stored.end()) {
                adam->m[p] = m->second->to(store.dtype());
                adam->v[p] = v->second->to(store.dtype());
            }
        }
    }
}

EvalResult evaluate(Model& model, const std::vector<Sample>& samples, int batch_size, double lambda) {
    NoGradGuard ng;
    const int k = model.config().num_classes;
    EvalResult r;
    std::vector<std::int64_t> conf(static_cast<std::size_t>(k * k), 0);
    double n = 0;
    for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size)) {
        std::vector<const Sample*> batch;
        for (std::size_t i = start; i < std::min(samples.size(), start + static_cast<std::size_t>(batch_size)); ++i) {
            batch.push_back(&samples[i]);
        }
        const Tensor x = stack_images(batch, model.config().dtype);
        const LabelMap y = stack_labels(batch);
        const ForwardOutput out = model.forward(x, false);
        const CompositeLoss loss = composite_loss(out.final_logits, out.init_logits, y, lambda);
        const auto b = static_cast<double>(batch.size());
        r.loss += loss.total.item() * b;
        r.final_term += loss.final_term.item() * b;
        r.aux_term += loss.aux_term.item() * b;
        n += b;
        const auto c = confusion_matrix(argmax_labels(out.final_logits), y, k);
        for (std::size_t i = 0; i < conf.size(); ++i) conf[i] += c[i];
    }
    if (n > 0) {
        r.loss /= n;
        r.final_term /= n;
        r.aux_term /= n;
    }
    r.metrics = metrics_from_confusion(conf, k);
    return r;
}

namespace {

std::uint64_t epoch_seed(std::uint64_t seed, int epoch) {
    std::uint64_t x = seed + 0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(epoch + 1);
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

bool all_finite(const Tensor& t) {
    for (double v : t.values()) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

/// Names the first tensor holding a NaN or infinity, in forward order.
std::string first_nonfinite(const Tensor& x, const ParamStore& store, const ForwardOutput& out,
                            const CompositeLoss& loss) {
    if (!all_finite(x)) return "input batch";
    for (const auto& p : store.paths()) {
        if (!all_finite(store.get(p))) return "parameter " + p;
    }
    const std::pair<const char*, const Tensor*> stages[] = {
        {"init_logits", &out.init_logits}, {"trm.fused", &out.trm.fused}, {"final_logits", &out.final_logits},
        {"loss.final", &loss.final_term},  {"loss.aux", &loss.aux_term}};
    for (const auto& [name, t] : stages) {
        if (!all_finite(*t)) return name;
    }
    return "loss.total";
}

void rewrite_log(const fs::path& path, const std::vector<EpochRecord>& history) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw FormatError("cannot write " + path.string());
    os << kLogHeader << '\n';
    for (const auto& r : history) os << log_row(r) << '\n';
}

}  // namespace

TrainState train(Model& model, const Dataset& data, const TrainConfig& cfg, const nlohmann::json& run_config,
                 const TrainOptions& options) {
    cfg.validate();
    if (data.config.num_classes != model.config().num_classes) {
        throw std::invalid_argument("dataset has K = " + std::to_string(data.config.num_classes) +
                                    " classes but the model expects K = " +
                                    std::to_string(model.config().num_classes));
    }
    if (data.train.empty()) throw std::invalid_argument("training split is empty");
    fs::create_directories(options.out_dir);
    const fs::path log_path = options.out_dir / "train_log.csv";
    const fs::path last_path = options.out_dir / "last.ckpt";
    const fs::path best_path = options.out_dir / "best.ckpt";

    TrainState st;
    AdamState adam;
    if (options.resume) {
        const Checkpoint ckpt = load_checkpoint(last_path);
        restore_checkpoint(ckpt, model, &adam);
        st = state_from_document(ckpt.state);
    } else {
        model.params().initialize(cfg.seed);
        st.scheduler.lr = cfg.lr;
        st.scheduler.factor = cfg.plateau_factor;
        st.scheduler.patience = cfg.plateau_patience;
        st.scheduler.min_lr = cfg.min_lr;
        st.early.patience = cfg.early_stop_patience;
    }
    rewrite_log(log_path, st.history);

    const int last_epoch = options.epoch_limit > 0 ? std::min(cfg.max_epochs, options.epoch_limit) : cfg.max_epochs;
    ParamStore& store = model.params();
    std::vector<std::size_t> order(data.train.size());

    for (int epoch = st.epochs_done + 1; epoch <= last_epoch && !st.stopped; ++epoch) {
        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = st.scheduler.lr;
        const AdamHyper hyper{st.scheduler.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps};

        std::mt19937_64 rng(epoch_seed(cfg.seed, epoch));
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);

        double seen = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            std::vector<Sample> owned;
            const auto end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            for (std::size_t i = start; i < end; ++i) {
                const Sample& s = data.train[order[i]];
                owned.push_back(cfg.augment ? augment(s, rng) : s);
            }
            std::vector<const Sample*> batch;
            for (const auto& s : owned) batch.push_back(&s);
            const Tensor x = stack_images(batch, model.config().dtype);
            const LabelMap y = stack_labels(batch);

            const ForwardOutput out = model.forward(x, true);
            const CompositeLoss loss = composite_loss(out.final_logits, out.init_logits, y, cfg.lambda);
            if (!std::isfinite(loss.total.item())) {
                throw NumericalError("non-finite training loss in epoch " + std::to_string(epoch) +
                                     "; first non-finite tensor: " + first_nonfinite(x, store, out, loss));
            }
            store.zero_grad();
            loss.total.backward();
            adam_step(store, adam, hyper);

            const auto b = static_cast<double>(batch.size());
            rec.train_total += loss.total.item() * b;
            rec.train_final += loss.final_term.item() * b;
            rec.train_aux += loss.aux_term.item() * b;
            seen += b;
        }
        rec.train_total /= seen;
        rec.train_final /= seen;
        rec.train_aux /= seen;

        const EvalResult val = evaluate(model, data.val.empty() ? data.train : data.val, cfg.batch_size, cfg.lambda);
        rec.val_loss = val.loss;
        rec.val_final = val.final_term;
        rec.val_aux = val.aux_term;
        rec.val_miou = val.metrics.mean_iou;
        rec.val_dice = val.metrics.mean_dice;

        st.scheduler.step(rec.val_loss);
        st.stopped = st.early.step(rec.val_loss);
        st.epochs_done = epoch;
        st.history.push_back(rec);

        {
            std::ofstream os(log_path, std::ios::app);
            os << log_row(rec) << '\n';
        }
        if (rec.val_loss < st.best_val) {
            st.best_val = rec.val_loss;
            st.best_epoch = epoch;
            save_checkpoint(best_path, make_checkpoint(model, &adam, run_config, state_document(st)));
        }
        save_checkpoint(last_path, make_checkpoint(model, &adam, run_config, state_document(st)));
        if (options.on_epoch) options.on_epoch(rec);
    }
    return st;
}

}  // namespace ntrm
