// Command-line front end: run, eval, probe, finetune, montage, presets.
#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "infoclust/trainer.hpp"

using namespace infoclust;

namespace {

struct DataArgs {
    std::string name;
    std::string path;
    std::string labels;
    int classes = 10;
    std::size_t limit = 0;

    void add(CLI::App* app)
    {
        app->add_option("--dataset", name, "mnist | cifar10 | blobs | raw (default: the checkpoint's)");
        app->add_option("--data-path", path, "dataset directory or raw image file");
        app->add_option("--labels", labels, "IDX1 label file for --dataset raw");
        app->add_option("--classes", classes, "class count for --dataset raw");
        app->add_option("--limit", limit, "use only the first N samples");
    }

    /// Dataset named on the command line, else the one the checkpoint was trained on.
    [[nodiscard]] DatasetConfig resolve(const Checkpoint& ck) const
    {
        DatasetConfig d;
        if (ck.metadata.contains("config")) {
            d = ck.metadata.at("config").get<ExperimentConfig>().dataset;
        }
        if (!name.empty()) {
            d = DatasetConfig{};
            d.name = name;
        }
        if (!path.empty()) d.path = path;
        if (!labels.empty()) d.labels = labels;
        if (name == "raw") d.classes = classes;
        if (limit > 0) d.limit = limit;
        return d;
    }
};

void print_eval(const ClusterModel& model, const LabeledDataset& ds)
{
    const auto r = make_evaluator(ds.data, ds.labels)(model);
    for (std::size_t i = 0; i < r.heads.size(); ++i) {
        std::printf("head %zu accuracy %.4f\n", r.heads[i], r.accuracy[i]);
    }
}

int run(const CLI::App& app, const std::string& config_path, const std::string& preset_name, const std::string& dataset,
        int seeds, const std::string& out, bool resume, bool quiet)
{
    ExperimentConfig c;
    if (!config_path.empty() && !preset_name.empty()) {
        // the file overrides the named preset
        std::ifstream in(config_path);
        auto j = nlohmann::json::parse(in);
        j["preset"] = preset_name;
        if (!dataset.empty()) j["dataset"]["name"] = dataset;
        c = j.get<ExperimentConfig>();
    } else if (!config_path.empty()) {
        c = load_config(config_path);
    } else if (!preset_name.empty()) {
        c = preset(preset_name, dataset.empty() ? "mnist" : dataset);
    } else {
        throw CLI::RequiredError("--config or --preset");
    }
    if (!out.empty()) c.out_dir = out;
    if (app.count("--epochs") > 0) c.epochs = app.get_option("--epochs")->as<int>();
    if (app.count("--seed") > 0) c.seed = app.get_option("--seed")->as<std::uint64_t>();
    if (app.count("--batch-size") > 0) c.batch_size = app.get_option("--batch-size")->as<std::size_t>();
    if (app.count("--lr") > 0) c.optimizer.learning_rate = app.get_option("--lr")->as<double>();
    if (app.count("--eval-limit") > 0) c.eval_limit = app.get_option("--eval-limit")->as<std::size_t>();
    if (app.count("--data-path") > 0) c.dataset.path = app.get_option("--data-path")->as<std::string>();
    if (app.count("--limit") > 0) c.dataset.limit = app.get_option("--limit")->as<std::size_t>();
    c.validate();

    const auto ds = load_dataset(c.dataset);
    const auto evaluate = make_evaluator(ds.data, ds.labels, c.eval_limit);
    const RunOptions options{resume, true, quiet};
    if (seeds > 1) {
        const auto s = train_seeds(c, seeds, ds.data, evaluate, options);
        std::printf("%s: selected-head accuracy %.4f +- %.4f over %d seeds\n", c.name.c_str(), s.mean, s.stddev, seeds);
    } else {
        const auto r = train(c, ds.data, evaluate, options);
        std::printf("%s: selected head %zu accuracy %.4f\n", c.name.c_str(), r.selected_head,
                    r.final_selected_accuracy);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Mutual-information deep clustering: training and evaluation"};
    app.require_subcommand(1);

    auto* run_cmd = app.add_subcommand("run", "train a preset or a JSON config");
    std::string config_path;
    std::string preset_name;
    std::string run_dataset;
    std::string out;
    int seeds = 1;
    bool resume = false;
    bool quiet = false;
    run_cmd->add_option("--config", config_path, "JSON experiment config")->check(CLI::ExistingFile);
    run_cmd->add_option("--preset", preset_name, "a..w, best_1h1o, best_5h5o");
    run_cmd->add_option("--dataset", run_dataset, "dataset for --preset (mnist, cifar10, blobs)");
    run_cmd->add_option("--seeds", seeds, "consecutive seeds to run")->check(CLI::PositiveNumber);
    run_cmd->add_option("--out", out, "output directory");
    run_cmd->add_flag("--resume", resume, "continue from out/checkpoint.bin");
    run_cmd->add_flag("--quiet", quiet, "no per-epoch log");
    run_cmd->add_option("--epochs", "override epochs");
    run_cmd->add_option("--seed", "override the first seed");
    run_cmd->add_option("--batch-size", "override batch size");
    run_cmd->add_option("--lr", "override learning rate");
    run_cmd->add_option("--eval-limit", "evaluate on the first N samples");
    run_cmd->add_option("--data-path", "dataset directory or raw image file");
    run_cmd->add_option("--limit", "use only the first N samples");

    auto* eval_cmd = app.add_subcommand("eval", "accuracy of every primary head");
    std::string checkpoint;
    DataArgs data;
    eval_cmd->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
    data.add(eval_cmd);

    auto* probe_cmd = app.add_subcommand("probe", "linear classifier on frozen features");
    std::string tap = "fc";
    double test_fraction = 0.2;
    ProbeConfig probe_config;
    probe_cmd->add_option("--checkpoint", checkpoint)->check(CLI::ExistingFile);
    probe_cmd->add_option("--tap", tap, "fc | conv | y | pixels")->check(CLI::IsMember({"fc", "conv", "y", "pixels"}));
    probe_cmd->add_option("--test-fraction", test_fraction);
    probe_cmd->add_option("--epochs", probe_config.epochs);
    probe_cmd->add_option("--lr", probe_config.learning_rate);
    data.add(probe_cmd);

    auto* ft_cmd = app.add_subcommand("finetune", "supervised training from a checkpoint (or scratch)");
    FinetuneConfig ft;
    bool scratch = false;
    ft_cmd->add_option("--checkpoint", checkpoint)->check(CLI::ExistingFile);
    ft_cmd->add_flag("--scratch", scratch, "ignore the checkpoint weights (same architecture)");
    ft_cmd->add_flag("--augment", ft.augment, "geometric augmentation of the labeled batches");
    ft_cmd->add_option("--labeled", ft.labeled);
    ft_cmd->add_option("--test", ft.test);
    ft_cmd->add_option("--epochs", ft.epochs);
    ft_cmd->add_option("--batch-size", ft.batch_size);
    ft_cmd->add_option("--lr", ft.learning_rate);
    ft_cmd->add_option("--seed", ft.seed);
    data.add(ft_cmd);

    auto* montage_cmd = app.add_subcommand("montage", "K x S grid of samples per cluster as PNG");
    int per_cluster = 10;
    std::size_t head = 0;
    std::string png = "montage.png";
    std::uint64_t montage_seed = 0;
    montage_cmd->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
    montage_cmd->add_option("--per-cluster", per_cluster)->required();
    montage_cmd->add_option("--head", head, "one head only (default: every head, <out>_head<h>.png)");
    montage_cmd->add_option("--out", png);
    montage_cmd->add_option("--seed", montage_seed);
    data.add(montage_cmd);

    auto* presets_cmd = app.add_subcommand("presets", "list presets or print one as JSON");
    std::string show;
    std::string show_dataset = "mnist";
    presets_cmd->add_option("--show", show);
    presets_cmd->add_option("--dataset", show_dataset);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run_cmd) {
            return run(*run_cmd, config_path, preset_name, run_dataset, seeds, out, resume, quiet);
        }
        if (*presets_cmd) {
            if (show.empty()) {
                for (const auto& n : preset_names()) std::cout << n << '\n';
            } else {
                std::cout << nlohmann::json(preset(show, show_dataset)).dump(2) << '\n';
            }
            return 0;
        }

        Checkpoint ck;
        if (!checkpoint.empty()) ck = load_checkpoint(checkpoint);
        const auto dcfg = data.resolve(ck);
        const auto ds = load_dataset(dcfg);

        if (*eval_cmd) {
            print_eval(ck.model, ds);
        } else if (*probe_cmd) {
            Matrix features;
            if (tap == "pixels") {
                const auto& im = ds.data.images();
                features = Eigen::Map<const Eigen::Matrix<float, -1, -1, Eigen::RowMajor>>(
                               im.values().data(), static_cast<Eigen::Index>(im.size()),
                               static_cast<Eigen::Index>(im.image_size()))
                               .cast<double>();
            } else {
                if (checkpoint.empty()) throw CLI::RequiredError("--checkpoint");
                features = extract_features(ck.model, ds.data.images(), tap_from_string(tap));
            }
            const auto split = random_split(ds.data.size(), test_fraction, 0);
            const auto r = ds.labels.probe(features, split, probe_config);
            std::printf("probe %s: train %.4f test %.4f\n", tap.c_str(), r.train_accuracy, r.test_accuracy);
        } else if (*ft_cmd) {
            if (checkpoint.empty() && !scratch) throw CLI::RequiredError("--checkpoint (or --scratch)");
            Architecture arch;
            if (checkpoint.empty()) {
                ExperimentConfig c;
                c.dataset = dcfg;
                arch = architecture_for(c, ds.data);
            } else {
                arch = ck.model.architecture();
            }
            const auto r = finetune(scratch ? nullptr : &ck.model, arch, ds.data, ds.labels, ft);
            for (std::size_t e = 0; e < r.accuracy_per_epoch.size(); ++e) {
                std::printf("epoch %zu test %.4f\n", e, r.accuracy_per_epoch[e]);
            }
            std::printf("finetune%s%s: test accuracy %.4f\n", scratch ? " (scratch)" : "", ft.augment ? " +aug" : "",
                        r.test_accuracy);
        } else if (*montage_cmd) {
            std::vector<std::pair<std::size_t, std::filesystem::path>> jobs;
            if (montage_cmd->count("--head") > 0) {
                jobs.emplace_back(head, png);
            } else {
                const std::filesystem::path base(png);
                for (std::size_t h = 0; h < ck.model.head_count(); ++h) {
                    auto p = base;
                    p.replace_filename(base.stem().string() + "_head" + std::to_string(h) + base.extension().string());
                    jobs.emplace_back(h, p);
                }
            }
            for (const auto& [h, path] : jobs) {
                const auto layout = write_montage(ck.model, ds.data, h, per_cluster, montage_seed, path);
                std::printf("wrote %s (%d x %d, %zu rows)\n", path.c_str(), layout.width, layout.height,
                            layout.rows.size());
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
