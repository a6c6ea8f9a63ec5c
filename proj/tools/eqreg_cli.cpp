// Command-line entry points: phantom, train, register, evaluate, ablate, overlay.

#include "eqreg/eval.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

using namespace eqreg;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

enum Exit { ok = 0, usage = 1, data = 2, numerical = 3 };

struct Common {
    std::string config;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string out = ".";
    std::string format = "nifti";
};

VolumeFormat parse_format(const std::string& s) { return s == "raw" ? VolumeFormat::raw : VolumeFormat::nifti; }

TrainConfig config_from(const Common& c)
{
    TrainConfig cfg = c.config.empty() ? TrainConfig{} : load_train_config(c.config);
    if (c.seed_set)
        cfg.seed = c.seed;
    cfg.validate();
    return cfg;
}

void write_text(const fs::path& path, const std::string& text)
{
    if (!path.parent_path().empty())
        fs::create_directories(path.parent_path());
    std::ofstream out(path);
    out << text;
    if (!out)
        throw DataError("cannot write '" + path.string() + "'");
}

TrainState state_from_checkpoint(const std::string& path)
{
    TrainState state;
    json manifest;
    state.params = load_checkpoint(path, &manifest);
    state.stage = manifest.contains("training") ? manifest["training"].value("stage", 0) : 0;
    return state;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Deformable 3D registration with jointly trained features"};
    app.require_subcommand(1);
    Common common;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", common.config, "TrainConfig JSON");
        sub->add_option_function<std::uint64_t>(
            "--seed", [&](const std::uint64_t& s) { common.seed = s, common.seed_set = true; }, "Random seed");
        sub->add_option("--out", common.out, "Output directory");
        sub->add_option("--format", common.format, "Volume format")->check(CLI::IsMember({"nifti", "raw"}));
    };

    int train_pairs = 12, test_pairs = 4;
    Index size = 48;
    auto* phantom = app.add_subcommand("phantom", "Generate a phantom dataset with a manifest");
    add_common(phantom);
    phantom->add_option("--train", train_pairs, "Training pairs")->check(CLI::NonNegativeNumber);
    phantom->add_option("--test", test_pairs, "Test pairs")->check(CLI::NonNegativeNumber);
    phantom->add_option("--size", size, "Cubic volume extent")->check(CLI::Range(16, 512));

    std::string manifest, split_train = "train", split_test = "test";
    auto* train = app.add_subcommand("train", "Staged self-training; writes per-stage checkpoints");
    add_common(train);
    train->add_option("--data", manifest, "Dataset manifest")->required();
    train->add_option("--split", split_train, "Training split");

    std::string checkpoint, fixed_path, moving_path;
    auto* reg = app.add_subcommand("register", "Register one pair; writes the field and the warped volume");
    add_common(reg);
    reg->add_option("--checkpoint", checkpoint, "Trained checkpoint")->required();
    reg->add_option("fixed", fixed_path, "Fixed volume")->required();
    reg->add_option("moving", moving_path, "Moving volume")->required();

    int reps = 3;
    std::string method = "eqreg";
    auto* evaluate_cmd = app.add_subcommand("evaluate", "Score a checkpoint on a dataset split");
    add_common(evaluate_cmd);
    evaluate_cmd->add_option("--checkpoint", checkpoint, "Trained checkpoint")->required();
    evaluate_cmd->add_option("--data", manifest, "Dataset manifest")->required();
    evaluate_cmd->add_option("--split", split_test, "Evaluation split");
    evaluate_cmd->add_option("--repetitions", reps, "Timing repetitions")->check(CLI::PositiveNumber);
    evaluate_cmd->add_option("--method", method, "Method name in the report");

    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    int pretrain_iters = 0;
    auto* ablate = app.add_subcommand("ablate", "Loss x augmentation ablation grid");
    add_common(ablate);
    ablate->add_option("--data", manifest, "Dataset manifest")->required();
    ablate->add_option("--seeds", seeds, "Seeds per cell");
    ablate->add_option("--pretrain-iters", pretrain_iters, "Contrastive pretraining iterations");

    std::string labels_fixed, labels_moving, field_path;
    auto* overlay = app.add_subcommand("overlay", "Axial and coronal label overlays as PNG");
    add_common(overlay);
    overlay->add_option("fixed", fixed_path, "Fixed volume")->required();
    overlay->add_option("fixed_labels", labels_fixed, "Fixed label map")->required();
    overlay->add_option("moving_labels", labels_moving, "Moving label map")->required();
    overlay->add_option("--field", field_path, "Displacement field (raw); identity when omitted");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? Exit::ok : Exit::usage;
    }

    try {
        const fs::path out(common.out);
        if (*phantom) {
            PhantomSpec spec;
            spec.shape = {size, size, size};
            spec.seed = common.seed;
            const auto path = write_phantom_dataset(out, spec, train_pairs, test_pairs, parse_format(common.format));
            std::cout << path.string() << "\n";
        } else if (*train) {
            TrainConfig cfg = config_from(common);
            if (cfg.checkpoint_dir.empty())
                cfg.checkpoint_dir = (out / "checkpoints").string();
            if (cfg.history_path.empty())
                cfg.history_path = (out / "history.jsonl").string();
            const auto pairs = load_all(build_dataset(manifest, split_train));
            run_training(pairs, cfg, [](TrainState& s, int t) {
                const auto& sm = s.stages.back();
                std::cerr << "stage " << t << ": loss " << sm.mean_loss << ", pseudo-labels " << sm.pseudo_seconds
                          << " s, training " << sm.train_seconds << " s, fallbacks " << sm.fallbacks << "\n";
            });
            write_text(out / "config.json", to_json(cfg).dump(2) + "\n");
        } else if (*reg) {
            TrainConfig cfg = config_from(common);
            TrainState state = state_from_checkpoint(checkpoint);
            NiftiMeta meta;
            const Volume<float> fixed = read_volume(fixed_path, &meta);
            const Volume<float> moving = read_volume(moving_path);
            const Registration r = register_images(state, cfg.pipeline.solver, fixed, moving);
            const VolumeFormat fmt = parse_format(common.format);
            write_field(r.field, out / "field.raw");
            write_volume(warp(moving, r.field), out / ("warped" + extension_for(fmt)), fmt == VolumeFormat::nifti ? &meta : nullptr);
            std::cerr << "registered in " << r.seconds << " s\n";
        } else if (*evaluate_cmd) {
            TrainConfig cfg = config_from(common);
            TrainState state = state_from_checkpoint(checkpoint);
            const auto pairs = load_all(build_dataset(manifest, split_test));
            EvalReport report = evaluate(state, cfg.pipeline.solver, pairs, reps);
            report.method = method;
            report.seed = cfg.seed;
            report.config_fingerprint = config_fingerprint(cfg);
            for (const auto& w : report.warnings)
                std::cerr << "warning: " << w << "\n";
            write_text(out / "report.json", to_json(report).dump(2) + "\n");
        } else if (*ablate) {
            TrainConfig cfg = config_from(common);
            const auto train_set = load_all(build_dataset(manifest, split_train));
            const auto test_set = load_all(build_dataset(manifest, split_test));
            AblationSettings settings;
            settings.seeds = seeds;
            settings.pretrain_iters = pretrain_iters;
            const auto results = ablation_run(train_set, test_set, cfg, settings, [](const std::string& s) { std::cerr << s << "\n"; });
            write_text(out / "ablation.json", ablation_json(results).dump(2) + "\n");
            write_text(out / "ablation.md", ablation_markdown(results));
        } else if (*overlay) {
            const Volume<float> fixed = read_volume(fixed_path);
            const LabelMap lf = read_labels(labels_fixed);
            const LabelMap lm = read_labels(labels_moving);
            const LabelMap lw = field_path.empty() ? lm : warp_labels(lm, read_field(field_path));
            write_overlay_png(out / "overlay.png", fixed, lf, lm, lw);
        }
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return Exit::data;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return Exit::numerical;
    } catch (const ContractError& e) {
        std::cerr << "invalid input: " << e.what() << "\n";
        return Exit::usage;
    }
    return Exit::ok;
}
