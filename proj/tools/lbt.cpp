// Command-line front end: dataset generation, training, evaluation,
// label-fraction sweeps and plot emission.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "lbt/checkpoint.hpp"
#include "lbt/data.hpp"
#include "lbt/eval.hpp"
#include "lbt/plot.hpp"
#include "lbt/sweep.hpp"
#include "lbt/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string default_out(const std::string& leaf) {
    const char* root = std::getenv("LBT_RUN_ROOT");
    return ((root && *root) ? fs::path(root) : fs::path("runs")) / leaf;
}

int cmd_gen_data(const std::string& config_path, std::uint64_t seed,
                 bool seed_given, std::string out) {
    lbt::ShapesConfig config;
    if (!config_path.empty())
        config = lbt::shapes_config_from_json_string(read_file(config_path));
    if (out.empty()) out = default_out("dataset");
    const std::uint64_t use_seed = seed_given ? seed : 7;
    const lbt::DatasetManifest manifest =
        lbt::generate_dataset(config, use_seed, out);
    std::printf("generated %zu train / %zu test images in %s\n",
                manifest.train_ids.size(), manifest.test_ids.size(), out.c_str());
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              std::string out, const std::string& resume) {
    lbt::TrainConfig config;
    if (!config_path.empty())
        config = lbt::train_config_from_json_string(read_file(config_path));
    if (out.empty()) out = default_out("train");
    const lbt::Dataset dataset = lbt::Dataset::load(data_dir);
    const lbt::TrainResult result = lbt::train(config, dataset, out, resume);
    std::printf("student: AP50=%.4f mAP=%.4f\n", result.final_student_eval.ap50,
                result.final_student_eval.ap50_95);
    if (result.final_teacher_eval)
        std::printf("teacher: AP50=%.4f mAP=%.4f\n",
                    result.final_teacher_eval->ap50,
                    result.final_teacher_eval->ap50_95);
    std::printf("metrics: %s\n", result.metrics_path.c_str());
    if (!result.checkpoint_path.empty())
        std::printf("checkpoint: %s\n", result.checkpoint_path.c_str());
    return 0;
}

lbt::DetectorParams params_from_checkpoint(const std::string& path,
                                           const std::string& model) {
    const lbt::TensorArchive archive = lbt::load_archive(path);
    const auto kind = archive.meta.find("kind");
    if (kind != archive.meta.end() && kind->second == "train_state") {
        lbt::DetectorParams p;
        p.arch = archive.arch;
        const bool has_teacher = archive.tensors.count("teacher/roi.cls.bias") > 0;
        std::string prefix = "student/";
        if (model == "teacher" || (model == "auto" && has_teacher))
            prefix = "teacher/";
        if (prefix == "teacher/" && !has_teacher)
            throw std::runtime_error("checkpoint has no teacher parameters");
        for (const auto& [name, t] : archive.tensors)
            if (name.starts_with(prefix)) p.tensors[name.substr(prefix.size())] = t;
        return p;
    }
    return lbt::load_params(path);
}

int cmd_eval(const std::string& checkpoint, const std::string& detections_path,
             const std::string& data_dir, const std::string& out,
             const std::string& model) {
    const lbt::Dataset dataset = lbt::Dataset::load(data_dir);
    lbt::EvalReport report;
    if (!detections_path.empty()) {
        // Score an external detection dump against the test annotations.
        std::map<std::string, std::vector<lbt::Detection>> dets;
        std::map<std::string, std::vector<lbt::Annotation>> gt;
        for (const auto& id : dataset.manifest().test_ids) {
            gt[id] = dataset.annotations(id);
            dets[id] = {};
        }
        const json arr = json::parse(read_file(detections_path));
        for (const auto& entry : arr) {
            const std::string id = entry.at("image_id").get<std::string>();
            if (!gt.count(id)) continue;
            for (const auto& obj : entry.at("objects")) {
                dets[id].push_back(lbt::Detection{
                    lbt::Box{obj.at("x1").get<double>(), obj.at("y1").get<double>(),
                             obj.at("x2").get<double>(), obj.at("y2").get<double>()},
                    obj.at("class").get<int>(), obj.at("score").get<double>()});
            }
        }
        report = lbt::evaluate_detections(dets, gt, dataset.num_classes());
    } else {
        const lbt::DetectorParams params = params_from_checkpoint(checkpoint, model);
        report = lbt::evaluate(params, dataset, dataset.manifest().test_ids);
    }
    std::printf("AP50=%.4f mAP=%.4f (%d images, %d gt, %d detections)\n",
                report.ap50, report.ap50_95, report.n_images,
                report.n_ground_truth, report.n_detections);
    if (!out.empty()) {
        std::ofstream f(out, std::ios::binary);
        if (!f) throw std::runtime_error("cannot write " + out);
        f << lbt::eval_report_to_json_string(report);
        std::printf("report: %s\n", out.c_str());
    }
    return 0;
}

int cmd_sweep(const std::string& spec_path, const std::string& data_dir,
              std::string out, int jobs) {
    lbt::SweepSpec spec;
    if (!spec_path.empty())
        spec = lbt::sweep_spec_from_json_string(read_file(spec_path));
    if (out.empty()) out = default_out("sweep");
    const lbt::Dataset dataset = lbt::Dataset::load(data_dir);
    const lbt::SweepResults results = lbt::run_sweep(spec, dataset, out, jobs);
    for (const auto& method : results.spec.methods) {
        for (double f : results.spec.fractions) {
            const auto agg = results.aggregate(method, f);
            std::printf("%-22s f=%.3f  AP50 %.2f±%.2f  mAP %.2f±%.2f  (n=%d)\n",
                        method.c_str(), f, 100 * agg.ap50_mean, 100 * agg.ap50_std,
                        100 * agg.map_mean, 100 * agg.map_std, agg.n);
        }
    }
    std::printf("results: %s\n", (fs::path(out) / "results.json").string().c_str());
    return 0;
}

int cmd_plot(const std::string& run_dir, std::string out) {
    if (out.empty()) out = default_out("plots");
    for (const auto& f : lbt::plot_run_dir(run_dir, out))
        std::printf("wrote %s\n", f.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Semi-supervised shapes detector: teacher-student training "
                 "with flip-consistency localization loss"};
    app.require_subcommand(1);

    std::string config_path, data_dir, out, resume, checkpoint, detections;
    std::string spec_path, run_dir, model = "auto";
    std::uint64_t seed = 7;
    int jobs = 1;

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic shapes dataset");
    gen->add_option("--config", config_path, "Generation config JSON");
    auto* seed_opt = gen->add_option("--seed", seed, "Generation seed");
    gen->add_option("--out", out, "Output dataset directory");

    auto* tr = app.add_subcommand("train", "Train a detector");
    tr->add_option("--config", config_path, "Train config JSON");
    tr->add_option("--data", data_dir, "Dataset directory")->required();
    tr->add_option("--out", out, "Run directory");
    tr->add_option("--resume", resume, "Checkpoint to resume from");

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint or detection dump");
    ev->add_option("--checkpoint", checkpoint, "Parameter archive or checkpoint");
    ev->add_option("--detections", detections, "External detection dump JSON");
    ev->add_option("--data", data_dir, "Dataset directory")->required();
    ev->add_option("--out", out, "Eval report JSON path");
    ev->add_option("--model", model, "auto | teacher | student")
        ->check(CLI::IsMember({"auto", "teacher", "student"}));

    auto* sw = app.add_subcommand("sweep", "Run the method x fraction x seed grid");
    sw->add_option("--spec", spec_path, "Sweep spec JSON");
    sw->add_option("--data", data_dir, "Dataset directory")->required();
    sw->add_option("--out", out, "Sweep output directory");
    sw->add_option("--jobs", jobs, "Concurrent cells");

    auto* pl = app.add_subcommand("plot", "Emit loss/AP curves and sweep bars");
    pl->add_option("--run-dir", run_dir, "Training run or sweep directory")->required();
    pl->add_option("--out", out, "Plot output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (gen->parsed())
            return cmd_gen_data(config_path, seed, seed_opt->count() > 0, out);
        if (tr->parsed()) return cmd_train(config_path, data_dir, out, resume);
        if (ev->parsed()) {
            if (checkpoint.empty() && detections.empty()) {
                std::cerr << "eval: need --checkpoint or --detections\n";
                return 1;
            }
            return cmd_eval(checkpoint, detections, data_dir, out, model);
        }
        if (sw->parsed()) return cmd_sweep(spec_path, data_dir, out, jobs);
        if (pl->parsed()) return cmd_plot(run_dir, out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
