// wseg — weakly supervised segmentation with size-constrained losses.
//
// Subcommands:
//   gen-data       generate a synthetic corpus
//   weaken         derive weak annotations from the full masks
//   train          train one model from a JSON config
//   eval           score a checkpoint on a split
//   bench          per-batch step-time comparison across modes
//   sweep-bounds   penalty training across a grid of fixed (a, b) bounds
//
// Every command exits 0 on success and nonzero with a single
// "error: ..." line on stderr otherwise. All randomness flows from --seed.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <numeric>

#include "wseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace wseg;

namespace {

void write_text(const std::string& path, const std::string& body) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path);
    out << body;
}

std::vector<double> parse_double_list(const std::string& csv, const char* what) {
    std::vector<double> out;
    std::size_t pos = 0;
    while (pos < csv.size()) {
        std::size_t next = csv.find(',', pos);
        if (next == std::string::npos) next = csv.size();
        try {
            out.push_back(std::stod(csv.substr(pos, next - pos)));
        } catch (const std::exception&) {
            throw std::runtime_error(std::string(what) + ": malformed number list '" + csv + "'");
        }
        pos = next + 1;
    }
    if (out.empty()) throw std::runtime_error(std::string(what) + ": empty list");
    return out;
}

std::vector<std::string> parse_name_list(const std::string& csv) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (pos < csv.size()) {
        std::size_t next = csv.find(',', pos);
        if (next == std::string::npos) next = csv.size();
        out.push_back(csv.substr(pos, next - pos));
        pos = next + 1;
    }
    return out;
}

const char* kDiceCurveScript =
    "set datafile separator \",\"\n"
    "set xlabel \"epoch\"\n"
    "set ylabel \"validation Dice\"\n"
    "set yrange [0:1]\n"
    "set key bottom right\n"
    "plot \"metrics.csv\" every ::1 using 1:4 with lines title \"val dice\"\n";

// ---- gen-data --------------------------------------------------------------

int cmd_gen_data(const std::string& out, GeneratorSpec spec, bool force) {
    if (fs::exists(out) && !fs::is_empty(out) && !force)
        throw std::runtime_error("output directory " + out +
                                 " is not empty (pass --force to overwrite)");
    fs::create_directories(out);
    data::generate_dataset(spec, out);
    std::printf("%s\n", (fs::path(out) / "manifest.json").string().c_str());
    return 0;
}

// ---- weaken ----------------------------------------------------------------

int cmd_weaken(const std::string& root, const std::string& strategy, std::uint64_t seed,
               const std::string& schedule_csv) {
    std::vector<int> schedule;
    for (double v : parse_double_list(schedule_csv, "--erosion-schedule"))
        schedule.push_back(static_cast<int>(v));
    data::WeakenStats stats = data::apply_weak_labels(root, strategy, seed, stderr, schedule);
    std::printf("strategy=%s labeled_pixels=%zu total_pixels=%zu fraction=%.6f%% tag_only=%d\n",
                strategy.c_str(), stats.labeled_pixels, stats.total_pixels,
                100.0 * stats.fraction(), stats.tag_only_samples);
    return 0;
}

// ---- train -----------------------------------------------------------------

int cmd_train(const std::string& data_dir, const std::string& config_path,
              const std::string& out) {
    TrainConfig cfg = config::load_train_config(config_path);
    Dataset ds = data::load_dataset(data_dir);
    fs::create_directories(out);

    std::ofstream csv(fs::path(out) / "metrics.csv");
    if (!csv) throw std::runtime_error("cannot open metrics.csv under " + out);
    csv << trainer::kMetricsHeader << "\n";
    csv.flush();

    TrainResult res = trainer::train(cfg, ds, [&](const MetricsRecord& r) {
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.epoch,
                      r.loss_ce, r.loss_penalty, r.val_dice, r.violation_rate, r.ms_per_batch,
                      r.lr);
        csv << buf;
        csv.flush();
        std::fprintf(stderr, "epoch %3d  ce %.4f  penalty %.5f  val_dice %.4f  lr %g\n", r.epoch,
                     r.loss_ce, r.loss_penalty, r.val_dice, r.lr);
    });

    segnet::save_checkpoint((fs::path(out) / "best.ckpt").string(), res.best_params);
    segnet::save_checkpoint((fs::path(out) / "final.ckpt").string(), res.final_params);
    write_text((fs::path(out) / "config.json").string(),
               config::train_config_to_json(cfg).dump(2) + "\n");
    write_text((fs::path(out) / "dice_curve.gp").string(), kDiceCurveScript);

    std::printf("best_val_dice=%.6f best_epoch=%d final_val_dice=%.6f out=%s\n",
                res.best_val_dice, res.best_epoch, res.metrics.back().val_dice, out.c_str());
    return 0;
}

// ---- eval ------------------------------------------------------------------

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& split_s,
             bool per_volume, bool per_sample) {
    Parameters params = segnet::load_checkpoint(ckpt);
    Dataset ds = data::load_dataset(data_dir);
    const Split split = parse_split(split_s);
    EvalResult res = trainer::evaluate(params, ds, split, per_volume);
    if (per_sample)
        for (const auto& [id, d] : res.per_sample) std::printf("%s,%.17g\n", id.c_str(), d);
    std::printf("mean_dice=%.17g split=%s aggregation=%s n=%zu\n", res.mean_dice, split_s.c_str(),
                per_volume ? "per-volume" : "per-slice", res.per_sample.size());
    return 0;
}

// ---- info ------------------------------------------------------------------

int cmd_info(const std::string& data_dir, int reference_subject) {
    Dataset ds = data::load_dataset(data_dir);
    long mn = std::numeric_limits<long>::max(), mx = 0;
    int present = 0;
    for (const auto& s : ds.samples)
        if (s.present) {
            mn = std::min(mn, s.tau);
            mx = std::max(mx, s.tau);
            ++present;
        }
    std::vector<double> ref;
    for (std::size_t i : ds.groups(Split::Train).at(reference_subject))
        if (ds.samples[i].present) ref.push_back(static_cast<double>(ds.samples[i].tau));
    const Bounds common = bounds::common_bounds(ref, true);
    std::printf("size=%dx%d train=%zu val=%zu present=%d tau_min=%ld tau_max=%ld\n",
                ds.manifest.height, ds.manifest.width, ds.train_indices.size(),
                ds.val_indices.size(), present, mn, mx);
    std::printf("common_bounds subject=%d lower=%.17g upper=%.17g\n", reference_subject,
                common.lo, common.hi);
    if (ds.manifest.weak_strategy)
        std::printf("weak_strategy=%s\n", ds.manifest.weak_strategy->c_str());
    return 0;
}

// ---- bench -----------------------------------------------------------------

int cmd_bench(const std::string& data_dir, const std::string& modes_csv,
              const std::string& config_path, int batches) {
    Dataset ds = data::load_dataset(data_dir);
    TrainConfig base;
    if (!config_path.empty()) base = config::load_train_config(config_path);

    std::printf("%-44s %s\n", "Method", "Training time (ms/batch)");
    for (const std::string& name : parse_name_list(modes_csv)) {
        TrainConfig cfg = base;
        std::string label = name;
        if (name == "lagrangian_no_early_stop") {
            cfg.mode = TrainMode::Lagrangian;
            cfg.lagrangian.early_stop = false;
            label = "lagrangian (no early stop)";
        } else {
            cfg.mode = parse_train_mode(name);
            if (cfg.mode == TrainMode::Lagrangian) {
                cfg.lagrangian.early_stop = true;
                label = "lagrangian (w/ early stop)";
            }
        }
        const double ms = trainer::benchmark_step_time(cfg, ds, batches);
        std::printf("%-44s %.1f\n", label.c_str(), ms);
    }
    return 0;
}

// ---- sweep-bounds ----------------------------------------------------------

int cmd_sweep_bounds(const std::string& data_dir, const std::string& lowers_csv,
                     const std::string& uppers_csv, const std::string& seeds_csv, int epochs,
                     const std::string& out) {
    Dataset ds = data::load_dataset(data_dir);
    const std::vector<double> lowers = parse_double_list(lowers_csv, "--lowers");
    const std::vector<double> uppers = parse_double_list(uppers_csv, "--uppers");
    const std::vector<double> seeds = parse_double_list(seeds_csv, "--seeds");

    std::string table = "lower,upper,seed,best_val_dice\n";
    std::printf("%-10s %-10s %-8s %s\n", "lower", "upper", "seeds", "mean best dice");
    for (double lo : lowers) {
        for (double hi : uppers) {
            if (hi < lo) continue;
            double acc = 0.0;
            for (double seed : seeds) {
                TrainConfig cfg;
                cfg.mode = TrainMode::Penalty;
                cfg.epochs = epochs;
                cfg.seed = static_cast<std::uint64_t>(seed);
                cfg.fixed_bounds = Bounds{lo, hi};
                TrainResult res = trainer::train(cfg, ds);
                acc += res.best_val_dice;
                char row[128];
                std::snprintf(row, sizeof(row), "%.17g,%.17g,%g,%.17g\n", lo, hi, seed,
                              res.best_val_dice);
                table += row;
            }
            std::printf("%-10g %-10g %-8zu %.4f\n", lo, hi, seeds.size(),
                        acc / static_cast<double>(seeds.size()));
        }
    }
    if (!out.empty()) {
        fs::create_directories(out);
        write_text((fs::path(out) / "sweep.csv").string(), table);
        write_text((fs::path(out) / "sweep.gp").string(),
                   "set datafile separator \",\"\n"
                   "set xlabel \"upper bound\"\n"
                   "set ylabel \"best validation Dice\"\n"
                   "set logscale x\n"
                   "plot \"sweep.csv\" every ::1 using 2:4 with points title \"runs\"\n");
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"weakly supervised segmentation with size-constrained losses"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus");
    std::string gen_out;
    GeneratorSpec spec;
    int size = 64;
    bool force = false;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--seed", spec.seed, "generator seed");
    gen->add_option("--train-n", spec.n_train, "training images");
    gen->add_option("--val-n", spec.n_val, "validation images");
    gen->add_option("--size", size, "square image size");
    gen->add_option("--absent-frac", spec.absent_frac, "fraction of target-absent images");
    gen->add_option("--slices-per-volume", spec.slices_per_volume, "slices per 3D group");
    gen->add_option("--min-area", spec.min_area, "smallest target area");
    gen->add_option("--max-area", spec.max_area, "largest target area");
    gen->add_option("--noise-sd", spec.noise_sd, "intensity noise level");
    gen->add_flag("--force", force, "write into a non-empty directory");

    // weaken
    auto* weaken = app.add_subcommand("weaken", "derive weak annotations");
    std::string weaken_data, strategy, erosion_schedule = "10,7,5,3,1";
    std::uint64_t weaken_seed = 0;
    weaken->add_option("--data", weaken_data, "dataset root")->required();
    weaken->add_option("--strategy", strategy, "erosion|point")->required();
    weaken->add_option("--seed", weaken_seed, "strategy seed");
    weaken->add_option("--erosion-schedule", erosion_schedule,
                       "decreasing kernel sizes for the erosion strategy");

    // train
    auto* train = app.add_subcommand("train", "train one model");
    std::string train_data, train_config, train_out;
    train->add_option("--data", train_data, "dataset root")->required();
    train->add_option("--config", train_config, "JSON training config")->required();
    train->add_option("--out", train_out, "output directory")->required();

    // eval
    auto* eval = app.add_subcommand("eval", "score a checkpoint");
    std::string eval_ckpt, eval_data, eval_split = "val";
    bool per_volume = false, per_sample = false;
    eval->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
    eval->add_option("--data", eval_data, "dataset root")->required();
    eval->add_option("--split", eval_split, "train|val");
    eval->add_flag("--per-volume", per_volume, "pool slices per group before Dice");
    eval->add_flag("--per-sample", per_sample, "print one line per sample");

    // info
    auto* info = app.add_subcommand("info", "print corpus statistics and common bounds");
    std::string info_data;
    int info_subject = 0;
    info->add_option("--data", info_data, "dataset root")->required();
    info->add_option("--reference-subject", info_subject, "subject for common bounds");

    // bench
    auto* bench = app.add_subcommand("bench", "per-batch step-time comparison");
    std::string bench_data, bench_modes = "partial_ce,penalty,lagrangian,lagrangian_no_early_stop,full";
    std::string bench_config;
    int bench_batches = 100;
    bench->add_option("--data", bench_data, "dataset root")->required();
    bench->add_option("--modes", bench_modes, "comma-separated mode list");
    bench->add_option("--config", bench_config, "base JSON config for all modes");
    bench->add_option("--batches", bench_batches, "measured batches (after 5 warm-up)");

    // sweep-bounds
    auto* sweep = app.add_subcommand("sweep-bounds", "penalty runs over fixed bound pairs");
    std::string sweep_data, lowers, uppers, sweep_seeds = "0,1,2", sweep_out;
    int sweep_epochs = 100;
    sweep->add_option("--data", sweep_data, "dataset root")->required();
    sweep->add_option("--lowers", lowers, "comma-separated lower bounds")->required();
    sweep->add_option("--uppers", uppers, "comma-separated upper bounds")->required();
    sweep->add_option("--seeds", sweep_seeds, "comma-separated seeds");
    sweep->add_option("--epochs", sweep_epochs, "epochs per run");
    sweep->add_option("--out", sweep_out, "directory for sweep.csv + gnuplot script");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            spec.height = spec.width = size;
            return cmd_gen_data(gen_out, spec, force);
        }
        if (*weaken) return cmd_weaken(weaken_data, strategy, weaken_seed, erosion_schedule);
        if (*info) return cmd_info(info_data, info_subject);
        if (*train) return cmd_train(train_data, train_config, train_out);
        if (*eval) return cmd_eval(eval_ckpt, eval_data, eval_split, per_volume, per_sample);
        if (*bench) return cmd_bench(bench_data, bench_modes, bench_config, bench_batches);
        if (*sweep)
            return cmd_sweep_bounds(sweep_data, lowers, uppers, sweep_seeds, sweep_epochs,
                                    sweep_out);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
