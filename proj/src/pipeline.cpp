#include "scop/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "scop/autodiff.hpp"
#include "scop/common.hpp"
#include "scop/digest.hpp"
#include "scop/knockoff.hpp"
#include "scop/optim.hpp"
#include "scop/synth_digits.hpp"

namespace scop {

using nlohmann::json;

// ---- config -----------------------------------------------------------------

static void check_stage(const StageConfig& s, const char* name) {
    require(s.lr > 0.0, name, ".lr must be positive");
    require(s.epochs >= 0, name, ".epochs must be non-negative");
    require(s.batch > 0, name, ".batch must be positive");
}

static void check_config(const ExperimentConfig& cfg) {
    require(cfg.arch == "small-cnn" || cfg.arch == "resnet-tiny",
            "arch must be small-cnn or resnet-tiny, got '", cfg.arch, "'");
    require(cfg.dataset == "mnist" || cfg.dataset == "cifar10",
            "dataset must be mnist or cifar10, got '", cfg.dataset, "'");
    check_stage(cfg.pretrain, "pretrain");
    check_stage(cfg.finetune, "finetune");
    require(cfg.selection.lr > 0.0, "selection.lr must be positive");
    require(cfg.selection.epochs >= 0, "selection.epochs must be non-negative");
    require(cfg.selection.batch > 0, "selection.batch must be positive");
    require(cfg.prune_rate >= 0.0 && cfg.prune_rate < 1.0,
            "prune.rate must lie in [0, 1), got ", cfg.prune_rate);
    require(cfg.train_limit >= 0 && cfg.test_limit >= 0,
            "dataset limits must be non-negative");
}

std::string config_to_json(const ExperimentConfig& cfg) {
    json j;
    j["arch"] = cfg.arch;
    j["dataset"] = cfg.dataset;
    j["data_dir"] = cfg.data_dir;
    j["artifacts_dir"] = cfg.artifacts_dir;
    j["seed"] = cfg.seed;
    j["train_limit"] = cfg.train_limit;
    j["test_limit"] = cfg.test_limit;
    j["augment"] = cfg.augment;
    j["pretrain"] = {{"lr", cfg.pretrain.lr},
                     {"epochs", cfg.pretrain.epochs},
                     {"batch", cfg.pretrain.batch}};
    j["selection"] = {{"lr", cfg.selection.lr},
                      {"epochs", cfg.selection.epochs},
                      {"batch", cfg.selection.batch},
                      {"control", control_mode_name(cfg.selection.control)},
                      {"bias", cfg.selection.bias},
                      {"detach_knockoff", cfg.selection.detach_knockoff}};
    j["prune"] = {{"rate", cfg.prune_rate}};
    j["finetune"] = {{"lr", cfg.finetune.lr},
                     {"epochs", cfg.finetune.epochs},
                     {"batch", cfg.finetune.batch}};
    return j.dump(2) + "\n";
}

template <class T>
static void read_field(const json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        fail("config field '", key, "' has the wrong type: ", e.what());
    }
}

static void reject_unknown(const json& j, std::initializer_list<const char*> allowed,
                           const char* where) {
    for (const auto& [key, value] : j.items()) {
        bool known = false;
        for (const char* a : allowed) known = known || key == a;
        require(known, "unknown config field '", key, "' in ", where);
    }
}

static void read_stage(const json& j, const char* key, StageConfig& s) {
    if (!j.contains(key)) return;
    const json& sub = j.at(key);
    require(sub.is_object(), "config field '", key, "' must be an object");
    reject_unknown(sub, {"lr", "epochs", "batch"}, key);
    read_field(sub, "lr", s.lr);
    read_field(sub, "epochs", s.epochs);
    read_field(sub, "batch", s.batch);
}

ExperimentConfig config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        fail("config is not valid JSON: ", e.what());
    }
    require(j.is_object(), "config must be a JSON object");
    require(j.contains("seed"), "config must set a seed");
    reject_unknown(j,
                   {"arch", "dataset", "data_dir", "artifacts_dir", "seed", "train_limit",
                    "test_limit", "augment", "pretrain", "selection", "prune", "finetune"},
                   "config");
    ExperimentConfig cfg;
    read_field(j, "arch", cfg.arch);
    read_field(j, "dataset", cfg.dataset);
    read_field(j, "data_dir", cfg.data_dir);
    read_field(j, "artifacts_dir", cfg.artifacts_dir);
    read_field(j, "seed", cfg.seed);
    read_field(j, "train_limit", cfg.train_limit);
    read_field(j, "test_limit", cfg.test_limit);
    read_field(j, "augment", cfg.augment);
    read_stage(j, "pretrain", cfg.pretrain);
    read_stage(j, "finetune", cfg.finetune);
    if (j.contains("selection")) {
        const json& s = j.at("selection");
        require(s.is_object(), "config field 'selection' must be an object");
        reject_unknown(s, {"lr", "epochs", "batch", "bias", "detach_knockoff", "control"},
                       "selection");
        read_field(s, "lr", cfg.selection.lr);
        read_field(s, "epochs", cfg.selection.epochs);
        read_field(s, "batch", cfg.selection.batch);
        read_field(s, "bias", cfg.selection.bias);
        read_field(s, "detach_knockoff", cfg.selection.detach_knockoff);
        if (s.contains("control"))
            cfg.selection.control = control_mode_from_name(s.at("control").get<std::string>());
    }
    if (j.contains("prune")) {
        require(j.at("prune").is_object(), "config field 'prune' must be an object");
        reject_unknown(j.at("prune"), {"rate"}, "prune");
        read_field(j.at("prune"), "rate", cfg.prune_rate);
    }
    check_config(cfg);
    return cfg;
}

// ---- data -------------------------------------------------------------------

static Dataset dataset_head(const Dataset& d, int64_t limit) {
    if (limit <= 0 || limit >= d.size()) return d;
    std::vector<int64_t> idx(static_cast<size_t>(limit));
    std::iota(idx.begin(), idx.end(), 0);
    Dataset out;
    out.images = d.batch(idx);
    out.labels = d.batch_labels(idx);
    out.split = d.split;
    out.num_classes = d.num_classes;
    out.mean = d.mean;
    out.std = d.std;
    out.data_min = d.data_min;
    out.data_max = d.data_max;
    return out;
}

std::pair<Dataset, Dataset> load_dataset(const ExperimentConfig& cfg) {
    std::pair<Dataset, Dataset> splits;
    if (cfg.dataset == "mnist") {
        ensure_synthetic_digit_corpus(cfg.data_dir, false);
        splits = load_mnist(cfg.data_dir);
    } else if (cfg.dataset == "cifar10") {
        splits = load_cifar10(cfg.data_dir);
    } else {
        fail("unknown dataset '", cfg.dataset, "'; valid names: mnist, cifar10");
    }
    return {dataset_head(splits.first, cfg.train_limit),
            dataset_head(splits.second, cfg.test_limit)};
}

// ---- training ---------------------------------------------------------------

// Random +-2 pixel translation with zero fill, one offset pair per example.
static void shift_images(Tensor& batch, Rng& rng) {
    const int64_t n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
    Tensor shifted(batch.shape);
    for (int64_t i = 0; i < n; ++i) {
        const int64_t dy = rng.uniform_int(5) - 2;
        const int64_t dx = rng.uniform_int(5) - 2;
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t y = 0; y < h; ++y) {
                const int64_t sy = y - dy;
                if (sy < 0 || sy >= h) continue;
                for (int64_t x = 0; x < w; ++x) {
                    const int64_t sx = x - dx;
                    if (sx < 0 || sx >= w) continue;
                    shifted.at4(i, ch, y, x) = batch.at4(i, ch, sy, sx);
                }
            }
    }
    batch = std::move(shifted);
}

double evaluate(const NetworkSpec& net, const Dataset& test, int64_t batch) {
    require(batch > 0, "evaluate: batch size must be positive");
    int64_t correct = 0;
    for (int64_t start = 0; start < test.size(); start += batch) {
        const int64_t end = std::min<int64_t>(start + batch, test.size());
        std::vector<int64_t> idx(static_cast<size_t>(end - start));
        std::iota(idx.begin(), idx.end(), start);
        Tensor logits = forward_eval(net, test.batch(idx));
        std::vector<int64_t> pred = argmax_rows(logits);
        for (size_t i = 0; i < idx.size(); ++i)
            if (pred[i] == test.labels[static_cast<size_t>(idx[i])]) ++correct;
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(test.size());
}

TrainResult train_sgd(NetworkSpec& net, const Dataset& train, const Dataset& test,
                      const StageConfig& cfg, uint64_t seed, const std::string& stream_name,
                      bool augment) {
    check_stage(cfg, stream_name.c_str());
    std::map<std::string, Tensor*> params = named_params(net);
    SgdState sgd;
    const int64_t batches_per_epoch = (train.size() + cfg.batch - 1) / cfg.batch;
    const int64_t steps_total = cfg.epochs * batches_per_epoch;
    int64_t step = 0;

    TrainResult result;
    std::vector<int64_t> order(static_cast<size_t>(train.size()));
    std::iota(order.begin(), order.end(), 0);
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng =
            Rng::stream(seed, stream_name + ".shuffle", static_cast<uint64_t>(epoch));
        Rng aug_rng = Rng::stream(seed, stream_name + ".augment", static_cast<uint64_t>(epoch));
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        for (int64_t start = 0; start < train.size(); start += cfg.batch) {
            const int64_t end = std::min<int64_t>(start + cfg.batch, train.size());
            std::vector<int64_t> idx(order.begin() + start, order.begin() + end);
            Tensor x = train.batch(idx);
            if (augment) shift_images(x, aug_rng);
            Tape tape;
            Var logits = forward_tape(net, tape, tape.input(std::move(x)), true, true);
            Var loss = tape.softmax_xent(logits, train.batch_labels(idx));
            loss_sum += tape.value(loss).data[0];
            auto grads = tape.backward(loss);
            sgd_momentum_step(params, grads, sgd, cosine_lr(cfg.lr, step, steps_total));
            ++step;
        }
        const double epoch_loss = loss_sum / static_cast<double>(batches_per_epoch);
        require(std::isfinite(epoch_loss),
                "training diverged: loss is not finite at epoch ", epoch);
        result.epoch_losses.push_back(epoch_loss);
    }
    result.accuracy_pct = evaluate(net, test);
    return result;
}

// ---- metrics ------------------------------------------------------------------

static std::string iso_timestamp() {
    const std::time_t now =
        std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string metrics_to_json(const ScopMetrics& m, bool with_timestamp) {
    json j;
    if (with_timestamp) j["timestamp"] = iso_timestamp();
    j["arch"] = m.arch;
    j["dataset"] = m.dataset;
    j["criterion"] = m.criterion;
    j["control"] = m.control_mode;
    j["bias"] = m.bias;
    j["seed"] = m.seed;
    j["rate"] = m.rate;
    j["baseline_acc"] = m.baseline_acc;
    j["pruned_acc"] = m.pruned_acc;
    j["final_acc"] = m.final_acc;
    j["params_before"] = m.reduction.params_before;
    j["params_after"] = m.reduction.params_after;
    j["macs_before"] = m.reduction.macs_before;
    j["macs_after"] = m.reduction.macs_after;
    j["params_drop_pct"] = m.reduction.params_drop_pct;
    j["flops_drop_pct"] = m.reduction.flops_drop_pct;
    json betas = json::object();
    json hists = json::object();
    for (const auto& [layer, vals] : m.betas) {
        const std::string key = "layer" + std::to_string(layer);
        betas[key] = vals;
        std::vector<int64_t> counts(10, 0);
        for (double v : vals) {
            int64_t bin = static_cast<int64_t>(std::floor(v * 10.0));
            bin = std::clamp<int64_t>(bin, 0, 9);
            ++counts[static_cast<size_t>(bin)];
        }
        hists[key] = counts;
    }
    j["beta"] = betas;
    j["beta_hist"] = hists;
    return j.dump();
}

void append_metrics(const std::string& jsonl_path, const ScopMetrics& m) {
    std::ofstream out(jsonl_path, std::ios::app | std::ios::binary);
    require(out.good(), "cannot open metrics file ", jsonl_path, " for append");
    out << metrics_to_json(m, true) << "\n";
    require(out.good(), "failed to append metrics to ", jsonl_path);
}

// ---- staged pipeline ------------------------------------------------------------

static std::string short_key(const std::string& material) {
    return sha256_hex(material).substr(0, 16);
}

static bool file_exists(const std::string& path) {
    std::error_code ec;
    return std::filesystem::exists(path, ec);
}

static void save_network(const std::string& path, const NetworkSpec& net) {
    SectionMap sections;
    network_to_sections(net, sections);
    save_checkpoint(path, sections);
}

static NetworkSpec load_network(const std::string& path) {
    return network_from_sections(load_checkpoint(path));
}

static void note(const RunOptions& opts, const std::string& msg) {
    if (opts.verbose) std::fprintf(stderr, "[scop] %s\n", msg.c_str());
}

static std::string artifact_path(const ExperimentConfig& cfg, const std::string& stage,
                                 const std::string& key, const std::string& ext) {
    std::filesystem::create_directories(cfg.artifacts_dir);
    return cfg.artifacts_dir + "/" + stage + "-" + key + ext;
}

static std::string key_data(const ExperimentConfig& cfg) {
    std::ostringstream os;
    os << "data|v1|" << cfg.dataset << "|" << cfg.train_limit << "|" << cfg.test_limit;
    return short_key(os.str());
}

static std::string key_pretrain(const ExperimentConfig& cfg) {
    std::ostringstream os;
    os << "pretrain|v1|" << key_data(cfg) << "|" << cfg.arch << "|" << cfg.seed << "|"
       << cfg.pretrain.lr << "|" << cfg.pretrain.epochs << "|" << cfg.pretrain.batch << "|"
       << cfg.augment;
    return short_key(os.str());
}

static std::string key_knockoff(const ExperimentConfig& cfg) {
    std::ostringstream os;
    os << "knockoff|v1|" << key_data(cfg) << "|" << cfg.seed;
    return short_key(os.str());
}

static std::string key_selection(const ExperimentConfig& cfg) {
    std::ostringstream os;
    os << "select|v1|" << key_pretrain(cfg) << "|" << key_knockoff(cfg) << "|"
       << control_mode_name(cfg.selection.control) << "|" << cfg.selection.bias << "|"
       << cfg.selection.detach_knockoff << "|" << cfg.selection.lr << "|"
       << cfg.selection.epochs << "|" << cfg.selection.batch;
    return short_key(os.str());
}

static std::string key_plan(const ExperimentConfig& cfg, const std::string& criterion) {
    std::ostringstream os;
    os << "plan|v1|" << (criterion == "scop" ? key_selection(cfg) : key_pretrain(cfg)) << "|"
       << criterion << "|" << cfg.prune_rate << "|" << cfg.seed;
    return short_key(os.str());
}

PretrainOutcome run_pretrain(const ExperimentConfig& cfg, const RunOptions& opts) {
    check_config(cfg);
    auto [train, test] = load_dataset(cfg);
    PretrainOutcome out;
    out.path = artifact_path(cfg, "pretrain", key_pretrain(cfg), ".ckpt");
    if (!opts.force && file_exists(out.path)) {
        note(opts, "pretrain: reusing " + out.path);
        out.net = load_network(out.path);
    } else {
        note(opts, "pretrain: training " + cfg.arch + " on " + cfg.dataset);
        Rng init_rng = Rng::stream(cfg.seed, "init");
        out.net = build_arch(cfg.arch, train.num_classes, init_rng);
        train_sgd(out.net, train, test, cfg.pretrain, cfg.seed, "pretrain", cfg.augment);
        save_network(out.path, out.net);
    }
    out.accuracy_pct = evaluate(out.net, test);
    note(opts, "pretrain: test accuracy " + std::to_string(out.accuracy_pct) + "%");
    return out;
}

KnockoffOutcome run_knockoff(const ExperimentConfig& cfg, const RunOptions& opts) {
    check_config(cfg);
    auto [train, test] = load_dataset(cfg);
    (void)test;
    KnockoffOutcome out;
    out.path = artifact_path(cfg, "knockoff", key_knockoff(cfg), ".knk");
    const int64_t d = train.images.numel() / train.size();
    if (!opts.force && file_exists(out.path)) {
        note(opts, "knockoff: reusing " + out.path);
        Tensor images = read_knockoff_cache(out.path);
        require(images.dim(0) == train.size() && images.numel() == train.images.numel(),
                "knockoff cache ", out.path, " does not match the dataset");
        out.knockoffs = train;
        out.knockoffs.images = images.reshaped(train.images.shape);
        out.knockoffs.split = "knockoff";
    } else {
        note(opts, "knockoff: fitting Gaussian model (d = " + std::to_string(d) + ")");
        KnockoffModel km = fit_knockoff_model(train.images.reshaped({train.size(), d}));
        note(opts, "knockoff: sampling " + std::to_string(train.size()) + " counterparts");
        out.knockoffs = generate_knockoff_dataset(km, train, cfg.seed, out.path);
    }
    return out;
}

SelectionOutcome run_selection(const ExperimentConfig& cfg, const RunOptions& opts) {
    check_config(cfg);
    PretrainOutcome pre = run_pretrain(cfg, opts);
    auto [train, test] = load_dataset(cfg);
    (void)test;
    SelectionOutcome out;
    out.path = artifact_path(cfg, "select", key_selection(cfg), ".ckpt");
    if (!opts.force && file_exists(out.path)) {
        note(opts, "select: reusing " + out.path);
        out.state = selection_state_from_sections(load_checkpoint(out.path), pre.net);
        return out;
    }
    Dataset knockoffs;
    const Dataset* control = nullptr;
    if (cfg.selection.control == ControlMode::knockoff) {
        knockoffs = run_knockoff(cfg, opts).knockoffs;
        control = &knockoffs;
    }
    note(opts, "select: optimizing, control = " + control_mode_name(cfg.selection.control) +
                   (cfg.selection.bias ? ", bias on" : ", bias off"));
    SelectionConfig sc;
    sc.lr = cfg.selection.lr;
    sc.batch = cfg.selection.batch;
    sc.epochs = cfg.selection.epochs;
    sc.seed = cfg.seed;
    sc.mode = cfg.selection.control;
    sc.bias = cfg.selection.bias;
    sc.detach_knockoff = cfg.selection.detach_knockoff;
    out.state = optimize_scaling(pre.net, train, control, sc, nullptr);
    SectionMap sections;
    selection_state_to_sections(out.state, sections);
    save_checkpoint(out.path, sections);
    return out;
}

PruneOutcome run_prune(const ExperimentConfig& cfg, const std::string& criterion,
                       const RunOptions& opts) {
    check_config(cfg);
    require(criterion == "scop" || criterion == "l1" || criterion == "random",
            "unknown pruning criterion '", criterion, "'; valid: scop, l1, random");
    PretrainOutcome pre = run_pretrain(cfg, opts);
    PruneOutcome out;
    if (criterion == "scop") {
        SelectionOutcome sel = run_selection(cfg, opts);
        out.report = compute_importance(sel.state, pre.net);
    } else if (criterion == "l1") {
        out.report = l1_importance(pre.net);
    } else {
        out.report = random_importance(pre.net, cfg.seed);
    }
    out.plan = make_plan(out.report, cfg.prune_rate);
    out.plan_path = artifact_path(cfg, "plan", key_plan(cfg, criterion), ".json");
    {
        std::ofstream f(out.plan_path, std::ios::binary | std::ios::trunc);
        require(f.good(), "cannot write plan to ", out.plan_path);
        f << plan_to_json(out.plan);
        require(f.good(), "failed writing plan ", out.plan_path);
    }
    out.pruned = apply_plan(pre.net, out.plan);
    out.reduction = reduction_summary(pre.net, out.pruned);
    auto [train, test] = load_dataset(cfg);
    (void)train;
    out.pruned_acc = evaluate(out.pruned, test);
    note(opts, "prune: " + criterion + " accuracy before finetune " +
                   std::to_string(out.pruned_acc) + "%");
    return out;
}

RunResult run_scop(const ExperimentConfig& cfg, const std::string& criterion,
                   const RunOptions& opts) {
    PretrainOutcome pre = run_pretrain(cfg, opts);
    PruneOutcome pruned = run_prune(cfg, criterion, opts);
    auto [train, test] = load_dataset(cfg);

    std::ostringstream ft_material;
    ft_material << "finetune|v1|" << key_plan(cfg, criterion) << "|" << cfg.finetune.lr << "|"
                << cfg.finetune.epochs << "|" << cfg.finetune.batch << "|" << cfg.augment;
    const std::string ft_path =
        artifact_path(cfg, "finetune", short_key(ft_material.str()), ".ckpt");
    NetworkSpec net = std::move(pruned.pruned);
    if (!opts.force && file_exists(ft_path)) {
        note(opts, "finetune: reusing " + ft_path);
        net = load_network(ft_path);
    } else {
        note(opts, "finetune: training pruned network");
        train_sgd(net, train, test, cfg.finetune, cfg.seed, "finetune", cfg.augment);
        save_network(ft_path, net);
    }
    const double final_acc = evaluate(net, test);
    note(opts, "final accuracy " + std::to_string(final_acc) + "%");

    RunResult result;
    result.metrics.arch = cfg.arch;
    result.metrics.dataset = cfg.dataset;
    result.metrics.criterion = criterion;
    result.metrics.control_mode =
        criterion == "scop" ? control_mode_name(cfg.selection.control) : "-";
    result.metrics.bias = criterion == "scop" && cfg.selection.bias;
    result.metrics.seed = cfg.seed;
    result.metrics.rate = cfg.prune_rate;
    result.metrics.baseline_acc = pre.accuracy_pct;
    result.metrics.pruned_acc = pruned.pruned_acc;
    result.metrics.final_acc = final_acc;
    result.metrics.reduction = pruned.reduction;
    for (const LayerImportance& li : pruned.report.layers)
        result.metrics.betas.emplace_back(
            li.conv_layer, std::vector<double>(li.beta.data.begin(), li.beta.data.end()));
    result.net = std::move(net);
    append_metrics(cfg.artifacts_dir + "/metrics.jsonl", result.metrics);
    return result;
}

std::vector<ScopMetrics> run_ablation(const ExperimentConfig& cfg, const RunOptions& opts) {
    std::vector<ScopMetrics> rows;
    for (ControlMode mode : {ControlMode::knockoff, ControlMode::noise,
                             ControlMode::random_sample, ControlMode::none}) {
        for (bool bias : {true, false}) {
            ExperimentConfig c = cfg;
            c.selection.control = mode;
            c.selection.bias = bias;
            note(opts, "ablation: control = " + control_mode_name(mode) +
                           (bias ? ", bias on" : ", bias off"));
            rows.push_back(run_scop(c, "scop", opts).metrics);
        }
    }
    return rows;
}

// ---- planted diagnostic ----------------------------------------------------------

// E[relu(N(m, 1))] = m Phi(m) + phi(m)
static double relu_gaussian_mean(double m) {
    const double phi = std::exp(-0.5 * m * m) / std::sqrt(2.0 * M_PI);
    const double Phi = 0.5 * std::erfc(-m / std::sqrt(2.0));
    return m * Phi + phi;
}

// Teacher: 1x1 conv with 2K signal filters (+-row pairs of the label
// projection plus a label-irrelevant nuisance direction) and `noise_dim`
// mean-shifted taps on the noise coordinates, channel order shuffled by seed.
// Noise coordinate i is a noisy copy of the class-(i % K) score, so a ranker
// without a control group sees cleaner value in the redundant taps than in
// the nuisance-laden signal pairs, while knockoffs reproduce the taps'
// correlation structure and cancel them out.
static NetworkSpec build_planted_teacher(const PlantedData& pd, uint64_t seed,
                                         std::vector<int64_t>& signal_channels) {
    const int64_t sd = pd.projection.dim(1);
    const int64_t k = pd.projection.dim(0);
    const int64_t nd = static_cast<int64_t>(pd.signal_mask.size()) - sd;
    const int64_t d = sd + nd;
    const int64_t m = 2 * k + nd;
    const double noise_shift = 2.0;
    const double noise_gain = 1.5;
    const double pair_gain = 0.5;
    const double nuis_gain = 0.8;

    // nuisance direction per class: orthogonal to every label projection row
    require(sd > k, "planted teacher needs signal_dim > num_classes");
    Rng nuis_rng = Rng::stream(seed, "planted.nuis");
    Tensor nuis({k, sd});
    for (int64_t t = 0; t < k; ++t) {
        std::vector<double> r(static_cast<size_t>(sd));
        double norm = 0.0;
        for (int attempt = 0; attempt < 50 && norm < 1e-6; ++attempt) {
            for (auto& v : r) v = nuis_rng.normal();
            for (int sweep = 0; sweep < 4; ++sweep)
                for (int64_t c = 0; c < k; ++c) {
                    double dot = 0.0;
                    for (int64_t j = 0; j < sd; ++j) dot += pd.projection.at2(c, j) * r[static_cast<size_t>(j)];
                    for (int64_t j = 0; j < sd; ++j) r[static_cast<size_t>(j)] -= dot * pd.projection.at2(c, j);
                }
            norm = 0.0;
            for (double v : r) norm += v * v;
            norm = std::sqrt(norm);
        }
        require(norm >= 1e-6, "planted teacher could not build a nuisance direction");
        for (int64_t j = 0; j < sd; ++j) nuis.at2(t, j) = r[static_cast<size_t>(j)] / norm;
    }

    Tensor conv_w({m, d, 1, 1}), conv_b({m});
    Tensor head_w({k, m}), head_b({k});
    for (int64_t t = 0; t < k; ++t)
        for (int64_t j = 0; j < sd; ++j) {
            const double row = pd.projection.at2(t, j) + nuis_gain * nuis.at2(t, j);
            conv_w.data[(2 * t) * d + j] = row;
            conv_w.data[(2 * t + 1) * d + j] = -row;
        }
    for (int64_t i = 0; i < nd; ++i) {
        conv_w.data[(2 * k + i) * d + sd + i] = 1.0;
        conv_b.data[2 * k + i] = noise_shift;
    }
    const double feat_mean = relu_gaussian_mean(noise_shift);
    for (int64_t t = 0; t < k; ++t) {
        head_w.at2(t, 2 * t) = pair_gain;
        head_w.at2(t, 2 * t + 1) = -pair_gain;
        double comp = 0.0;
        for (int64_t i = 0; i < nd; ++i) {
            if (i % k != t) continue;
            head_w.at2(t, 2 * k + i) = noise_gain;
            comp += noise_gain * feat_mean;
        }
        head_b.data[t] = -comp;
    }

    std::vector<int64_t> perm(static_cast<size_t>(m));
    std::iota(perm.begin(), perm.end(), 0);
    Rng perm_rng = Rng::stream(seed, "planted.perm");
    perm_rng.shuffle(perm);

    Tensor conv_wp(conv_w.shape), conv_bp(conv_b.shape), head_wp(head_w.shape);
    signal_channels.clear();
    for (int64_t j = 0; j < m; ++j) {
        std::copy_n(conv_w.ptr() + perm[static_cast<size_t>(j)] * d, d,
                    conv_wp.ptr() + j * d);
        conv_bp.data[j] = conv_b.data[perm[static_cast<size_t>(j)]];
        for (int64_t t = 0; t < k; ++t)
            head_wp.at2(t, j) = head_w.at2(t, perm[static_cast<size_t>(j)]);
        if (perm[static_cast<size_t>(j)] < 2 * k) signal_channels.push_back(j);
    }

    NetworkSpec net;
    net.arch = "planted-teacher";
    net.input_shape = {d, 1, 1};
    net.num_classes = k;
    LayerSpec conv;
    conv.kind = LayerKind::conv;
    conv.input = -1;
    conv.in_ch = d;
    conv.out_ch = m;
    conv.k = 1;
    conv.weight = std::move(conv_wp);
    conv.bias = std::move(conv_bp);
    net.layers.push_back(std::move(conv));
    LayerSpec act;
    act.kind = LayerKind::activation;
    act.input = 0;
    act.act = ActKind::relu;
    net.layers.push_back(std::move(act));
    LayerSpec flat;
    flat.kind = LayerKind::flatten;
    flat.input = 1;
    net.layers.push_back(std::move(flat));
    LayerSpec head;
    head.kind = LayerKind::linear;
    head.input = 2;
    head.in_ch = m;
    head.out_ch = k;
    head.weight = std::move(head_wp);
    head.bias = std::move(head_b);
    net.layers.push_back(std::move(head));
    infer_shapes(net);
    return net;
}

PlantedOutcome planted_diagnostic(uint64_t seed, const PlantedConfig& pc) {
    require(pc.signal_dim > 0 && pc.noise_dim > 0 && pc.num_classes > 1,
            "planted diagnostic needs positive dims and at least two classes");
    PlantedData pd = make_planted_dataset(seed, pc.n_train, pc.n_test, pc.signal_dim,
                                          pc.noise_dim, pc.num_classes);
    std::vector<int64_t> signal_channels;
    NetworkSpec net = build_planted_teacher(pd, seed, signal_channels);

    Dataset knockoffs;
    const Dataset* control = nullptr;
    if (pc.control == ControlMode::knockoff) {
        const int64_t d = pd.train.images.numel() / pd.train.size();
        KnockoffModel km = fit_knockoff_model(pd.train.images.reshaped({pd.train.size(), d}));
        knockoffs = generate_knockoff_dataset(km, pd.train, seed, "");
        control = &knockoffs;
    }
    SelectionConfig sc;
    sc.lr = pc.lr;
    sc.batch = pc.batch;
    sc.epochs = pc.epochs;
    sc.seed = seed;
    sc.mode = pc.control;
    sc.bias = false;
    SelectionState state = optimize_scaling(net, pd.train, control, sc, nullptr);
    ImportanceReport report = compute_importance(state, net);
    const Tensor& imp = report.layers.at(0).importance;

    std::vector<int64_t> idx(static_cast<size_t>(imp.numel()));
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
        if (imp.data[a] != imp.data[b]) return imp.data[a] > imp.data[b];
        return a < b;
    });
    PlantedOutcome out;
    out.signal_channels = signal_channels;
    out.importance = imp;
    out.top.assign(idx.begin(),
                   idx.begin() + static_cast<int64_t>(signal_channels.size()));
    int64_t hit = 0;
    for (int64_t ch : out.top)
        if (std::find(signal_channels.begin(), signal_channels.end(), ch) !=
            signal_channels.end())
            ++hit;
    out.precision = static_cast<double>(hit) / static_cast<double>(signal_channels.size());
    return out;
}

}  // namespace scop
