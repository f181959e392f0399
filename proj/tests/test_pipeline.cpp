#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "scop/common.hpp"
#include "scop/pipeline.hpp"
#include "scop/report.hpp"
#include "scop/rng.hpp"
#include "test_util.hpp"

using namespace scop;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Small but real end-to-end config over the synthetic corpus.
ExperimentConfig tiny_cfg(const fs::path& root, uint64_t seed = 1) {
    ExperimentConfig cfg;
    cfg.arch = "small-cnn";
    cfg.dataset = "mnist";
    cfg.data_dir = (root / "data").string();
    cfg.artifacts_dir = (root / "artifacts").string();
    cfg.seed = seed;
    cfg.train_limit = 512;
    cfg.test_limit = 256;
    cfg.pretrain = {0.05, 1, 128};
    cfg.selection.epochs = 1;
    cfg.selection.batch = 128;
    cfg.prune_rate = 0.5;
    cfg.finetune = {0.02, 1, 128};
    return cfg;
}

std::string strip_timestamp(const std::string& line) {
    json j = json::parse(line);
    j.erase("timestamp");
    return j.dump();
}

}  // namespace

TEST_CASE("config json round trip") {
    ExperimentConfig cfg;
    cfg.arch = "resnet-tiny";
    cfg.dataset = "cifar10";
    cfg.seed = 77;
    cfg.train_limit = 1000;
    cfg.augment = true;
    cfg.pretrain = {0.1, 3, 64};
    cfg.selection.lr = 0.002;
    cfg.selection.control = ControlMode::noise;
    cfg.selection.bias = false;
    cfg.selection.detach_knockoff = true;
    cfg.prune_rate = 0.3;
    cfg.finetune = {0.01, 5, 32};
    ExperimentConfig back = config_from_json(config_to_json(cfg));
    CHECK(back.arch == cfg.arch);
    CHECK(back.dataset == cfg.dataset);
    CHECK(back.seed == cfg.seed);
    CHECK(back.train_limit == cfg.train_limit);
    CHECK(back.augment == cfg.augment);
    CHECK(back.pretrain.lr == cfg.pretrain.lr);
    CHECK(back.pretrain.epochs == cfg.pretrain.epochs);
    CHECK(back.selection.control == ControlMode::noise);
    CHECK(back.selection.bias == false);
    CHECK(back.selection.detach_knockoff == true);
    CHECK(back.prune_rate == cfg.prune_rate);
    CHECK(back.finetune.batch == cfg.finetune.batch);
}

TEST_CASE("config json validation") {
    CHECK_THROWS_WITH_AS(config_from_json("{}"), doctest::Contains("seed"), Error);
    CHECK_THROWS_AS(config_from_json("not json"), Error);
    CHECK_THROWS_AS(config_from_json(R"({"seed": 1, "prune_rate": 1.5})"), Error);
    CHECK_THROWS_AS(config_from_json(R"({"seed": 1, "pretrain": {"lr": -1}})"), Error);
    CHECK_THROWS_WITH_AS(
        config_from_json(R"({"seed": 1, "selection": {"control": "bogus"}})"),
        doctest::Contains("knockoff"), Error);
    CHECK_THROWS_WITH_AS(config_from_json(R"({"seed": 1, "dataset": "imagenet"})"),
                         doctest::Contains("mnist"), Error);
}

TEST_CASE("load_dataset applies limits") {
    tu::TempDir tmp("pipe_load");
    ExperimentConfig cfg = tiny_cfg(tmp.path());
    auto [train, test] = load_dataset(cfg);
    CHECK(train.size() == 512);
    CHECK(test.size() == 256);
    CHECK(train.images.shape == std::vector<int64_t>{512, 1, 28, 28});
}

TEST_CASE("untrained accuracy sits near chance") {
    tu::TempDir tmp("pipe_chance");
    ExperimentConfig cfg = tiny_cfg(tmp.path());
    cfg.test_limit = 2000;
    auto [train, test] = load_dataset(cfg);
    Rng rng = Rng::stream(cfg.seed, "init");
    NetworkSpec net = build_arch(cfg.arch, 10, rng);
    double acc = evaluate(net, test);
    CHECK(acc >= 3.0);
    CHECK(acc <= 25.0);
}

TEST_CASE("train_sgd learns the planted problem quickly") {
    PlantedData pd = make_planted_dataset(3, 1500, 400, 4, 4, 3);
    NetworkSpec net;
    net.arch = "custom";
    net.input_shape = {8, 1, 1};
    net.num_classes = 3;
    Rng rng(4);
    LayerSpec fl;
    fl.kind = LayerKind::flatten;
    fl.input = -1;
    net.layers.push_back(fl);
    LayerSpec lin;
    lin.kind = LayerKind::linear;
    lin.input = 0;
    lin.in_ch = 8;
    lin.out_ch = 3;
    lin.weight = tu::rand_tensor({3, 8}, rng, -0.3, 0.3);
    lin.bias = Tensor({3});
    net.layers.push_back(lin);

    StageConfig cfg{0.05, 6, 64};
    TrainResult res = train_sgd(net, pd.train, pd.test, cfg, 5, "t", false);
    CHECK(res.epoch_losses.size() == 6);
    CHECK(res.epoch_losses.back() < res.epoch_losses.front());
    CHECK(res.accuracy_pct > 90.0);
}

TEST_CASE("train_sgd is deterministic across runs") {
    PlantedData pd = make_planted_dataset(6, 600, 100, 4, 4, 3);
    auto make_net = [] {
        NetworkSpec net;
        net.arch = "custom";
        net.input_shape = {8, 1, 1};
        net.num_classes = 3;
        Rng rng(7);
        LayerSpec fl;
        fl.kind = LayerKind::flatten;
        fl.input = -1;
        net.layers.push_back(fl);
        LayerSpec lin;
        lin.kind = LayerKind::linear;
        lin.input = 0;
        lin.in_ch = 8;
        lin.out_ch = 3;
        lin.weight = tu::rand_tensor({3, 8}, rng, -0.3, 0.3);
        lin.bias = Tensor({3});
        net.layers.push_back(lin);
        return net;
    };
    NetworkSpec a = make_net(), b = make_net();
    StageConfig cfg{0.05, 2, 64};
    train_sgd(a, pd.train, pd.test, cfg, 9, "t", false);
    train_sgd(b, pd.train, pd.test, cfg, 9, "t", false);
    CHECK(weights_digest(a) == weights_digest(b));
}

TEST_CASE("metrics json carries the full record") {
    ScopMetrics m;
    m.arch = "small-cnn";
    m.dataset = "mnist";
    m.criterion = "scop";
    m.control_mode = "knockoff";
    m.bias = true;
    m.seed = 5;
    m.rate = 0.5;
    m.baseline_acc = 98.5;
    m.pruned_acc = 90.0;
    m.final_acc = 98.0;
    m.reduction.params_before = 1000;
    m.reduction.params_after = 400;
    m.reduction.params_drop_pct = 60.0;
    m.betas.push_back({0, {0.9, 0.1, 0.5}});

    std::string with_ts = metrics_to_json(m, true);
    json j = json::parse(with_ts);
    CHECK(j.contains("timestamp"));
    std::string ts = j["timestamp"];
    CHECK(ts.size() == 20);  // 2026-08-14T12:00:00Z
    CHECK(ts[10] == 'T');
    CHECK(ts.back() == 'Z');
    CHECK(j["criterion"] == "scop");
    CHECK(j["seed"] == 5);
    CHECK(j["control"] == "knockoff");
    CHECK(j["final_acc"] == doctest::Approx(98.0));
    CHECK(j["params_drop_pct"] == doctest::Approx(60.0));
    REQUIRE(j.contains("beta_hist"));
    REQUIRE(j["beta_hist"].contains("layer0"));
    double total = 0.0;
    for (const auto& b : j["beta_hist"]["layer0"]) total += double(b);
    CHECK(total == doctest::Approx(3.0));  // three filters recorded
    CHECK(j["beta"]["layer0"].size() == 3);

    std::string without = metrics_to_json(m, false);
    CHECK(!json::parse(without).contains("timestamp"));
}

TEST_CASE("append_metrics writes one line per record") {
    tu::TempDir tmp("metrics");
    std::string path = (tmp.path() / "metrics.jsonl").string();
    ScopMetrics m;
    m.arch = "small-cnn";
    m.dataset = "mnist";
    m.seed = 1;
    append_metrics(path, m);
    m.seed = 2;
    append_metrics(path, m);
    std::ifstream in(path);
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        CHECK(j["seed"] == ++lines);
    }
    CHECK(lines == 2);
}

TEST_CASE("pipeline stages cache and reuse artifacts") {
    tu::TempDir tmp("stages");
    ExperimentConfig cfg = tiny_cfg(tmp.path());

    PretrainOutcome p1 = run_pretrain(cfg);
    REQUIRE(fs::exists(p1.path));
    auto mtime = fs::last_write_time(p1.path);
    PretrainOutcome p2 = run_pretrain(cfg);
    CHECK(p2.path == p1.path);
    CHECK(fs::last_write_time(p1.path) == mtime);  // untouched on reuse
    CHECK(weights_digest(p1.net) == weights_digest(p2.net));
    CHECK(p1.accuracy_pct == p2.accuracy_pct);

    KnockoffOutcome k1 = run_knockoff(cfg);
    REQUIRE(fs::exists(k1.path));
    KnockoffOutcome k2 = run_knockoff(cfg);
    CHECK(tu::max_abs_diff(k1.knockoffs.images, k2.knockoffs.images) == 0.0);

    SelectionOutcome s1 = run_selection(cfg);
    REQUIRE(fs::exists(s1.path));
    SelectionOutcome s2 = run_selection(cfg);
    REQUIRE(s1.state.theta.size() == s2.state.theta.size());
    for (size_t i = 0; i < s1.state.theta.size(); ++i)
        CHECK(tu::max_abs_diff(s1.state.theta[i], s2.state.theta[i]) == 0.0);

    // changing the seed changes the pretrain artifact path
    ExperimentConfig cfg2 = tiny_cfg(tmp.path(), 2);
    PretrainOutcome p3 = run_pretrain(cfg2);
    CHECK(p3.path != p1.path);

    // changing selection config does not invalidate pretrain/knockoff paths
    ExperimentConfig cfg3 = tiny_cfg(tmp.path());
    cfg3.selection.control = ControlMode::noise;
    CHECK(run_pretrain(cfg3).path == p1.path);
    CHECK(run_knockoff(cfg3).path == k1.path);
    CHECK(run_selection(cfg3).path != s1.path);
}

TEST_CASE("force re-runs a stage and reproduces identical bytes") {
    tu::TempDir tmp("force");
    ExperimentConfig cfg = tiny_cfg(tmp.path(), 3);
    PretrainOutcome p1 = run_pretrain(cfg);
    std::string bytes1 = tu::read_file(p1.path);
    RunOptions opts;
    opts.force = true;
    PretrainOutcome p2 = run_pretrain(cfg, opts);
    CHECK(tu::read_file(p2.path) == bytes1);
}

TEST_CASE("run_prune at rate zero keeps every parameter") {
    tu::TempDir tmp("prune0");
    ExperimentConfig cfg = tiny_cfg(tmp.path(), 4);
    cfg.prune_rate = 0.0;
    PruneOutcome out = run_prune(cfg, "l1");
    CHECK(out.reduction.params_drop_pct == 0.0);
    CHECK(out.reduction.flops_drop_pct == 0.0);
    CHECK(fs::exists(out.plan_path));
}

TEST_CASE("run_prune rejects unknown criteria") {
    tu::TempDir tmp("prunebad");
    ExperimentConfig cfg = tiny_cfg(tmp.path(), 5);
    CHECK_THROWS_WITH_AS(run_prune(cfg, "taylor"), doctest::Contains("l1"), Error);
}

TEST_CASE("full scop run emits a metrics record and prunes the model") {
    tu::TempDir tmp("run");
    ExperimentConfig cfg = tiny_cfg(tmp.path(), 6);
    RunResult res = run_scop(cfg);
    CHECK(res.metrics.criterion == "scop");
    CHECK(res.metrics.rate == doctest::Approx(0.5));
    CHECK(res.metrics.reduction.params_drop_pct > 20.0);
    CHECK(res.metrics.final_acc >= 0.0);
    CHECK(!res.metrics.betas.empty());
    std::string jsonl = tu::read_file(fs::path(cfg.artifacts_dir) / "metrics.jsonl");
    CHECK(jsonl.find("\"criterion\":\"scop\"") != std::string::npos);

    // l1 criterion reports no control mode
    RunResult l1 = run_scop(cfg, "l1");
    CHECK(l1.metrics.control_mode == "-");
}

TEST_CASE("repeated runs are identical modulo timestamp") {
    tu::TempDir tmp("det");
    ExperimentConfig cfg = tiny_cfg(tmp.path(), 7);
    RunResult a = run_scop(cfg);
    RunOptions opts;
    opts.force = true;
    RunResult b = run_scop(cfg, "scop", opts);
    CHECK(weights_digest(a.net) == weights_digest(b.net));
    CHECK(strip_timestamp(metrics_to_json(a.metrics, true)) ==
          strip_timestamp(metrics_to_json(b.metrics, true)));
}

TEST_CASE("feature histograms conserve counts and detect identical streams") {
    tu::TempDir tmp("hist");
    Rng rng(8);
    NetworkSpec net;
    {
        Rng init = Rng::stream(9, "init");
        net = build_arch("small-cnn", 10, init);
    }
    Tensor real = tu::rand_tensor({8, 1, 28, 28}, rng);
    Tensor knock = tu::rand_tensor({8, 1, 28, 28}, rng);
    auto prunable = prunable_convs(net);
    std::vector<int32_t> layers;
    for (const auto& p : prunable) layers.push_back(p.mix_layer);

    auto files = emit_feature_histograms(net, real, knock, layers, tmp.path().string());
    REQUIRE(files.size() == layers.size());
    for (const auto& f : files) {
        REQUIRE(fs::exists(f.path));
        std::ifstream in(f.path);
        std::string header;
        std::getline(in, header);
        CHECK(header == "bin_left,bin_right,real_count,knockoff_count");
        double real_total = 0.0, knock_total = 0.0;
        std::string line;
        int rows = 0;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            ++rows;
            double a, b, c, d;
            REQUIRE(std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf", &a, &b, &c, &d) == 4);
            real_total += c;
            knock_total += d;
        }
        CHECK(rows == 64);
        // counts sum to the feature element count at that layer
        auto feats = forward_all_eval(net, real);
        CHECK(real_total == doctest::Approx(double(feats[size_t(f.layer)].numel())));
        CHECK(knock_total == real_total);
        CHECK(f.tv_distance >= 0.0);
        CHECK(f.tv_distance <= 1.0);
    }

    // identical streams give identical columns and zero distance
    auto same = emit_feature_histograms(net, real, real, layers, tmp.path().string());
    for (const auto& f : same) CHECK(f.tv_distance == 0.0);
}

TEST_CASE("metrics table renders one row per record") {
    ScopMetrics m;
    m.arch = "small-cnn";
    m.dataset = "mnist";
    m.seed = 3;
    m.rate = 0.5;
    m.baseline_acc = 98.0;
    m.final_acc = 97.5;
    std::string two_rows = metrics_to_json(m, true) + "\n" + metrics_to_json(m, true) + "\n";
    std::string table = render_metrics_table(two_rows);
    CHECK(table.find("criterion") != std::string::npos);
    CHECK(table.find("98.0") != std::string::npos);
    int newlines = 0;
    for (char c : table) newlines += c == '\n';
    CHECK(newlines >= 3);
    CHECK_THROWS_AS(render_metrics_table("{broken"), Error);
}

TEST_CASE("planted diagnostic at zero epochs reflects the permutation") {
    PlantedConfig pc;
    pc.epochs = 0;
    pc.n_train = 256;
    pc.n_test = 64;
    PlantedOutcome out = planted_diagnostic(11, pc);
    REQUIRE(out.signal_channels.size() == 8);
    REQUIRE(out.top.size() == 8);
    // with beta stuck at 0.5, importance ties break to the lowest channels
    std::vector<int64_t> want_top = {0, 1, 2, 3, 4, 5, 6, 7};
    CHECK(out.top == want_top);
    int overlap = 0;
    for (int64_t t : out.top)
        overlap += std::count(out.signal_channels.begin(), out.signal_channels.end(), t);
    CHECK(out.precision == doctest::Approx(double(overlap) / 8.0));
}
