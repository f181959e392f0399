#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "scop/common.hpp"
#include "scop/knockoff.hpp"
#include "scop/pipeline.hpp"
#include "scop/report.hpp"

namespace {

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in.good()) scop::fail("cannot read file ", path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Shared flags; values land in the config only when the flag was given.
struct CommonFlags {
    std::string config_path;
    uint64_t seed = 1;
    std::string arch, dataset, data_dir, artifacts_dir;
    int64_t train_limit = 0, test_limit = 0;
    bool augment = false;
    bool force = false, verbose = false;

    CLI::Option *o_seed = nullptr, *o_arch = nullptr, *o_dataset = nullptr,
                *o_data_dir = nullptr, *o_artifacts = nullptr, *o_train_limit = nullptr,
                *o_test_limit = nullptr, *o_augment = nullptr;

    void attach(CLI::App* sub) {
        sub->add_option("--config", config_path,
                        "JSON experiment config; explicit flags override its fields");
        o_seed = sub->add_option("--seed", seed, "root RNG seed (all stages derive from it)");
        o_arch = sub->add_option("--arch", arch, "architecture: small-cnn | resnet-tiny");
        o_dataset = sub->add_option("--dataset", dataset, "dataset: mnist | cifar10");
        o_data_dir = sub->add_option("--data-dir", data_dir, "dataset directory");
        o_artifacts = sub->add_option("--artifacts", artifacts_dir, "stage artifact directory");
        o_train_limit =
            sub->add_option("--train-limit", train_limit, "cap on train examples (0 = all)");
        o_test_limit =
            sub->add_option("--test-limit", test_limit, "cap on test examples (0 = all)");
        o_augment = sub->add_flag("--augment", augment,
                                  "random +-2px shifts on real images (pretrain/finetune)");
        sub->add_flag("--force", force, "recompute cached stage artifacts");
        sub->add_flag("--verbose", verbose, "stage progress on stderr");
    }

    scop::ExperimentConfig resolve() const {
        scop::ExperimentConfig cfg;
        if (!config_path.empty()) cfg = scop::config_from_json(read_text_file(config_path));
        if (o_seed->count()) cfg.seed = seed;
        if (o_arch->count()) cfg.arch = arch;
        if (o_dataset->count()) cfg.dataset = dataset;
        if (o_data_dir->count()) cfg.data_dir = data_dir;
        if (o_artifacts->count()) cfg.artifacts_dir = artifacts_dir;
        if (o_train_limit->count()) cfg.train_limit = train_limit;
        if (o_test_limit->count()) cfg.test_limit = test_limit;
        if (o_augment->count()) cfg.augment = augment;
        return cfg;
    }

    scop::RunOptions options() const { return {force, verbose}; }
};

struct StageFlags {
    double lr = 0.0;
    int64_t epochs = -1, batch = 0;
    CLI::Option *o_lr = nullptr, *o_epochs = nullptr, *o_batch = nullptr;

    void attach(CLI::App* sub, const char* what) {
        o_lr = sub->add_option("--lr", lr, std::string("initial learning rate for ") + what);
        o_epochs = sub->add_option("--epochs", epochs, std::string("epochs for ") + what);
        o_batch = sub->add_option("--batch", batch, std::string("batch size for ") + what);
    }
    void apply(scop::StageConfig& s) const {
        if (o_lr->count()) s.lr = lr;
        if (o_epochs->count()) s.epochs = epochs;
        if (o_batch->count()) s.batch = batch;
    }
};

void echo_config(const scop::ExperimentConfig& cfg) {
    std::cout << scop::config_to_json(cfg);
}

scop::ControlMode parse_control(const std::string& s) {
    return scop::control_mode_from_name(s);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"scop: filter pruning with knockoff controls"};
    app.require_subcommand(1);
    std::function<void()> action;

    // pretrain
    auto* cmd_pre = app.add_subcommand("pretrain", "Train the dense baseline network");
    auto fl_pre = std::make_shared<CommonFlags>();
    auto st_pre = std::make_shared<StageFlags>();
    fl_pre->attach(cmd_pre);
    st_pre->attach(cmd_pre, "pretraining");
    cmd_pre->callback([&action, fl_pre, st_pre] {
        action = [fl_pre, st_pre] {
            scop::ExperimentConfig cfg = fl_pre->resolve();
            st_pre->apply(cfg.pretrain);
            echo_config(cfg);
            scop::PretrainOutcome out = scop::run_pretrain(cfg, fl_pre->options());
            std::printf("pretrain: accuracy %.2f%%\n", out.accuracy_pct);
            std::printf("pretrain: checkpoint %s\n", out.path.c_str());
        };
    });

    // knockoff
    auto* cmd_kn = app.add_subcommand("knockoff", "Fit the knockoff model and cache samples");
    auto fl_kn = std::make_shared<CommonFlags>();
    fl_kn->attach(cmd_kn);
    cmd_kn->callback([&action, fl_kn] {
        action = [fl_kn] {
            scop::ExperimentConfig cfg = fl_kn->resolve();
            echo_config(cfg);
            scop::KnockoffOutcome out = scop::run_knockoff(cfg, fl_kn->options());
            std::printf("knockoff: %lld counterparts cached at %s\n",
                        static_cast<long long>(out.knockoffs.size()), out.path.c_str());
        };
    });

    // select
    auto* cmd_sel = app.add_subcommand("select", "Optimize the adversarial scaling factors");
    auto fl_sel = std::make_shared<CommonFlags>();
    auto st_sel = std::make_shared<StageFlags>();
    auto sel_control = std::make_shared<std::string>("knockoff");
    auto sel_bias = std::make_shared<std::string>("on");
    auto sel_detach = std::make_shared<bool>(false);
    fl_sel->attach(cmd_sel);
    st_sel->attach(cmd_sel, "selection");
    auto* o_control = cmd_sel->add_option("--control", *sel_control,
                                          "control stream: knockoff | noise | random-sample | none");
    auto* o_bias = cmd_sel->add_option("--bias", *sel_bias, "bias pairs: on | off");
    auto* o_detach = cmd_sel->add_flag("--detach-knockoff", *sel_detach,
                                       "treat the knockoff mixing weight as a constant");
    cmd_sel->callback([&action, fl_sel, st_sel, sel_control, sel_bias, sel_detach, o_control,
                       o_bias, o_detach] {
        action = [fl_sel, st_sel, sel_control, sel_bias, sel_detach, o_control, o_bias,
                  o_detach] {
            scop::ExperimentConfig cfg = fl_sel->resolve();
            if (st_sel->o_lr->count()) cfg.selection.lr = st_sel->lr;
            if (st_sel->o_epochs->count()) cfg.selection.epochs = st_sel->epochs;
            if (st_sel->o_batch->count()) cfg.selection.batch = st_sel->batch;
            if (o_control->count()) cfg.selection.control = parse_control(*sel_control);
            if (o_bias->count()) {
                scop::require(*sel_bias == "on" || *sel_bias == "off",
                              "--bias takes on|off, got '", *sel_bias, "'");
                cfg.selection.bias = *sel_bias == "on";
            }
            if (o_detach->count()) cfg.selection.detach_knockoff = *sel_detach;
            echo_config(cfg);
            scop::SelectionOutcome out = scop::run_selection(cfg, fl_sel->options());
            for (size_t i = 0; i < out.state.prunable.size(); ++i) {
                scop::Tensor beta = out.state.beta(i);
                double lo = 1.0, hi = 0.0, sum = 0.0;
                for (double v : beta.data) {
                    lo = std::min(lo, v);
                    hi = std::max(hi, v);
                    sum += v;
                }
                std::printf("select: layer %d beta mean %.3f min %.3f max %.3f\n",
                            out.state.prunable[i].conv_layer,
                            sum / static_cast<double>(beta.numel()), lo, hi);
            }
            std::printf("select: state %s\n", out.path.c_str());
        };
    });

    // prune
    auto* cmd_pr = app.add_subcommand("prune", "Build a plan and apply filter surgery");
    auto fl_pr = std::make_shared<CommonFlags>();
    auto pr_rate = std::make_shared<double>(0.5);
    auto pr_criterion = std::make_shared<std::string>("scop");
    fl_pr->attach(cmd_pr);
    auto* o_rate = cmd_pr->add_option("--rate", *pr_rate, "fraction of filters to remove, in [0, 1)");
    cmd_pr->add_option("--criterion", *pr_criterion, "ranking criterion: scop | l1 | random")
        ->check(CLI::IsMember({"scop", "l1", "random"}));
    cmd_pr->callback([&action, fl_pr, pr_rate, pr_criterion, o_rate] {
        action = [fl_pr, pr_rate, pr_criterion, o_rate] {
            scop::ExperimentConfig cfg = fl_pr->resolve();
            if (o_rate->count()) cfg.prune_rate = *pr_rate;
            echo_config(cfg);
            scop::PruneOutcome out = scop::run_prune(cfg, *pr_criterion, fl_pr->options());
            std::printf("prune: params %lld -> %lld (%.1f%% drop)\n",
                        static_cast<long long>(out.reduction.params_before),
                        static_cast<long long>(out.reduction.params_after),
                        out.reduction.params_drop_pct);
            std::printf("prune: MACs %lld -> %lld (%.1f%% drop)\n",
                        static_cast<long long>(out.reduction.macs_before),
                        static_cast<long long>(out.reduction.macs_after),
                        out.reduction.flops_drop_pct);
            std::printf("prune: accuracy before finetune %.2f%%\n", out.pruned_acc);
            std::printf("prune: plan %s\n", out.plan_path.c_str());
        };
    });

    // finetune
    auto* cmd_ft = app.add_subcommand("finetune", "Fine-tune the pruned network");
    auto fl_ft = std::make_shared<CommonFlags>();
    auto st_ft = std::make_shared<StageFlags>();
    auto ft_rate = std::make_shared<double>(0.5);
    auto ft_criterion = std::make_shared<std::string>("scop");
    fl_ft->attach(cmd_ft);
    st_ft->attach(cmd_ft, "fine-tuning");
    auto* o_ft_rate = cmd_ft->add_option("--rate", *ft_rate, "fraction of filters to remove");
    cmd_ft->add_option("--criterion", *ft_criterion, "ranking criterion: scop | l1 | random")
        ->check(CLI::IsMember({"scop", "l1", "random"}));
    cmd_ft->callback([&action, fl_ft, st_ft, ft_rate, ft_criterion, o_ft_rate] {
        action = [fl_ft, st_ft, ft_rate, ft_criterion, o_ft_rate] {
            scop::ExperimentConfig cfg = fl_ft->resolve();
            st_ft->apply(cfg.finetune);
            if (o_ft_rate->count()) cfg.prune_rate = *ft_rate;
            echo_config(cfg);
            scop::RunResult res = scop::run_scop(cfg, *ft_criterion, fl_ft->options());
            std::printf("finetune: baseline %.2f%% pruned %.2f%% final %.2f%%\n",
                        res.metrics.baseline_acc, res.metrics.pruned_acc,
                        res.metrics.final_acc);
        };
    });

    // eval
    auto* cmd_ev = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
    auto fl_ev = std::make_shared<CommonFlags>();
    auto ev_ckpt = std::make_shared<std::string>();
    fl_ev->attach(cmd_ev);
    cmd_ev->add_option("--checkpoint", *ev_ckpt, "network checkpoint to evaluate")->required();
    cmd_ev->callback([&action, fl_ev, ev_ckpt] {
        action = [fl_ev, ev_ckpt] {
            scop::ExperimentConfig cfg = fl_ev->resolve();
            echo_config(cfg);
            scop::NetworkSpec net =
                scop::network_from_sections(scop::load_checkpoint(*ev_ckpt));
            auto [train, test] = scop::load_dataset(cfg);
            (void)train;
            std::printf("eval: accuracy %.2f%% on %lld examples\n",
                        scop::evaluate(net, test), static_cast<long long>(test.size()));
        };
    });

    // run
    auto* cmd_run = app.add_subcommand("run", "Full pipeline: pretrain through fine-tune");
    auto fl_run = std::make_shared<CommonFlags>();
    auto run_rate = std::make_shared<double>(0.5);
    auto run_criterion = std::make_shared<std::string>("scop");
    auto run_control = std::make_shared<std::string>("knockoff");
    auto run_bias = std::make_shared<std::string>("on");
    fl_run->attach(cmd_run);
    auto* o_run_rate = cmd_run->add_option("--rate", *run_rate, "fraction of filters to remove");
    cmd_run->add_option("--criterion", *run_criterion, "ranking criterion: scop | l1 | random")
        ->check(CLI::IsMember({"scop", "l1", "random"}));
    auto* o_run_control = cmd_run->add_option(
        "--control", *run_control, "control stream: knockoff | noise | random-sample | none");
    auto* o_run_bias = cmd_run->add_option("--bias", *run_bias, "bias pairs: on | off");
    cmd_run->callback([&action, fl_run, run_rate, run_criterion, run_control, run_bias,
                       o_run_rate, o_run_control, o_run_bias] {
        action = [fl_run, run_rate, run_criterion, run_control, run_bias, o_run_rate,
                  o_run_control, o_run_bias] {
            scop::ExperimentConfig cfg = fl_run->resolve();
            if (o_run_rate->count()) cfg.prune_rate = *run_rate;
            if (o_run_control->count()) cfg.selection.control = parse_control(*run_control);
            if (o_run_bias->count()) {
                scop::require(*run_bias == "on" || *run_bias == "off",
                              "--bias takes on|off, got '", *run_bias, "'");
                cfg.selection.bias = *run_bias == "on";
            }
            echo_config(cfg);
            scop::RunResult res = scop::run_scop(cfg, *run_criterion, fl_run->options());
            std::cout << scop::metrics_to_json(res.metrics, false) << "\n";
        };
    });

    // ablate
    auto* cmd_ab = app.add_subcommand("ablate", "Control-mode x bias ablation matrix");
    auto fl_ab = std::make_shared<CommonFlags>();
    auto ab_rate = std::make_shared<double>(0.5);
    fl_ab->attach(cmd_ab);
    auto* o_ab_rate = cmd_ab->add_option("--rate", *ab_rate, "fraction of filters to remove");
    cmd_ab->callback([&action, fl_ab, ab_rate, o_ab_rate] {
        action = [fl_ab, ab_rate, o_ab_rate] {
            scop::ExperimentConfig cfg = fl_ab->resolve();
            if (o_ab_rate->count()) cfg.prune_rate = *ab_rate;
            echo_config(cfg);
            std::vector<scop::ScopMetrics> rows = scop::run_ablation(cfg, fl_ab->options());
            std::ostringstream jsonl;
            for (const scop::ScopMetrics& m : rows)
                jsonl << scop::metrics_to_json(m, false) << "\n";
            std::cout << scop::render_metrics_table(jsonl.str());
        };
    });

    // diagnose
    auto* cmd_dg = app.add_subcommand("diagnose", "Planted-filter recovery and swap tests");
    auto fl_dg = std::make_shared<CommonFlags>();
    auto dg_seeds = std::make_shared<int64_t>(5);
    auto dg_epochs = std::make_shared<int64_t>(12);
    fl_dg->attach(cmd_dg);
    cmd_dg->add_option("--seeds", *dg_seeds, "number of seeds for the planted test");
    cmd_dg->add_option("--epochs", *dg_epochs, "selection epochs for the planted test");
    cmd_dg->callback([&action, fl_dg, dg_seeds, dg_epochs] {
        action = [fl_dg, dg_seeds, dg_epochs] {
            const uint64_t base = fl_dg->o_seed->count() ? fl_dg->seed : 1;
            std::vector<double> with_control, no_control;
            for (int64_t i = 0; i < *dg_seeds; ++i) {
                scop::PlantedConfig pc;
                pc.epochs = *dg_epochs;
                pc.control = scop::ControlMode::knockoff;
                scop::PlantedOutcome a =
                    scop::planted_diagnostic(base + static_cast<uint64_t>(i), pc);
                pc.control = scop::ControlMode::none;
                scop::PlantedOutcome b =
                    scop::planted_diagnostic(base + static_cast<uint64_t>(i), pc);
                with_control.push_back(a.precision);
                no_control.push_back(b.precision);
                std::printf("planted seed %llu: knockoff %.3f  none %.3f\n",
                            static_cast<unsigned long long>(base + i), a.precision,
                            b.precision);
            }
            std::printf("planted median: knockoff %.3f  none %.3f\n", median(with_control),
                        median(no_control));

            // synthetic correlated 10-d swap check
            scop::Rng rng = scop::Rng::stream(base, "diagnose.data");
            const int64_t n = 20000, d = 10;
            scop::Tensor mix({d, d});
            for (auto& v : mix.data) v = rng.normal() * 0.4;
            for (int64_t i = 0; i < d; ++i) mix.at2(i, i) += 1.0;
            scop::Tensor data({n, d});
            for (int64_t r = 0; r < n; ++r) {
                std::vector<double> z(static_cast<size_t>(d));
                for (auto& v : z) v = rng.normal();
                for (int64_t c = 0; c < d; ++c) {
                    double acc = 0.0;
                    for (int64_t t = 0; t < d; ++t)
                        acc += mix.at2(c, t) * z[static_cast<size_t>(t)];
                    data.at2(r, c) = acc;
                }
            }
            scop::KnockoffModel km = scop::fit_knockoff_model(data);
            scop::Tensor knock(data.shape);
            for (int64_t r = 0; r < n; ++r) {
                scop::Tensor row({d});
                std::copy_n(data.ptr() + r * d, d, row.ptr());
                scop::Rng krng = scop::Rng::stream(base, "diagnose.knockoff",
                                                   static_cast<uint64_t>(r));
                scop::Tensor kr = scop::sample_knockoff(km, row, krng);
                std::copy_n(kr.ptr(), d, knock.ptr() + r * d);
            }
            std::vector<int64_t> full(static_cast<size_t>(d));
            for (int64_t i = 0; i < d; ++i) full[static_cast<size_t>(i)] = i;
            double worst = scop::swap_moment_test(data, knock, full);
            scop::Rng sub_rng = scop::Rng::stream(base, "diagnose.subsets");
            for (int64_t s = 0; s < 10; ++s) {
                std::vector<int64_t> subset;
                for (int64_t i = 0; i < d; ++i)
                    if (sub_rng.uniform() < 0.5) subset.push_back(i);
                worst = std::max(worst, scop::swap_moment_test(data, knock, subset));
            }
            std::printf("swap test: worst moment gap %.4f over 11 subsets\n", worst);
        };
    });

    // report
    auto* cmd_rp = app.add_subcommand("report", "Metrics table and feature histograms");
    auto fl_rp = std::make_shared<CommonFlags>();
    auto rp_hist = std::make_shared<bool>(false);
    auto rp_out = std::make_shared<std::string>("report");
    fl_rp->attach(cmd_rp);
    cmd_rp->add_flag("--histograms", *rp_hist, "emit real-vs-knockoff feature histogram CSVs");
    cmd_rp->add_option("--out", *rp_out, "output directory for histogram CSVs");
    cmd_rp->callback([&action, fl_rp, rp_hist, rp_out] {
        action = [fl_rp, rp_hist, rp_out] {
            scop::ExperimentConfig cfg = fl_rp->resolve();
            const std::string metrics_path = cfg.artifacts_dir + "/metrics.jsonl";
            std::ifstream in(metrics_path, std::ios::binary);
            if (in.good()) {
                std::ostringstream ss;
                ss << in.rdbuf();
                std::cout << scop::render_metrics_table(ss.str());
            } else {
                std::printf("no metrics at %s yet\n", metrics_path.c_str());
            }
            if (*rp_hist) {
                scop::PretrainOutcome pre = scop::run_pretrain(cfg, fl_rp->options());
                scop::KnockoffOutcome kn = scop::run_knockoff(cfg, fl_rp->options());
                auto [train, test] = scop::load_dataset(cfg);
                (void)test;
                const int64_t n = std::min<int64_t>(256, train.size());
                std::vector<int64_t> idx(static_cast<size_t>(n));
                for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
                std::vector<int32_t> layers;
                for (const scop::PrunableConv& pc : scop::prunable_convs(pre.net))
                    layers.push_back(pc.mix_layer);
                auto files = scop::emit_feature_histograms(pre.net, train.batch(idx),
                                                           kn.knockoffs.batch(idx), layers,
                                                           *rp_out);
                for (const auto& f : files)
                    std::printf("histogram: layer %d tv %.3f -> %s\n", f.layer,
                                f.tv_distance, f.path.c_str());
            }
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }
    try {
        if (action) action();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
