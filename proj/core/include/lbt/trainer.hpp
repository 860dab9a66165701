#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lbt/data.hpp"
#include "lbt/detector.hpp"
#include "lbt/eval.hpp"
#include "lbt/losses.hpp"
#include "lbt/pseudolabel.hpp"
#include "lbt/tensor.hpp"

namespace lbt {

struct TrainConfig {
    int burn_in_iterations = 1000;
    int total_iterations = 5000;
    int batch_labeled = 8;
    int batch_unlabeled = 8;

    double learning_rate = 0.01;
    double momentum = 0.9;

    double ema_alpha = 0.99;
    double delta = 0.7;  // pseudo-label confidence threshold
    double pseudo_nms_threshold = 0.5;
    LossWeights weights;

    double iou_pos = 0.6;
    double iou_neg = 0.3;
    double iou_fg = 0.5;
    double smooth_l1_beta = 1.0;

    double label_fraction = 0.05;
    AugmentationConfig augment;

    int eval_interval = 500;
    int checkpoint_interval = 1000;
    std::uint64_t seed = 1;

    // Ablation switches.
    bool disable_con_loc = false;
    bool disable_focal = false;  // focal -> plain cross-entropy (gamma = 0)
    bool disable_mutual = false;
    bool unsup_regression = false;  // pseudo-box regression losses (off: cls only)
    bool conloc_rpn = true;
    bool conloc_roi = true;
    bool conloc_labeled = true;
    bool conloc_unlabeled = true;

    bool dump_pseudo = false;
    ArchConfig arch;

    void validate() const;
};

std::string train_config_to_json_string(const TrainConfig& config);
TrainConfig train_config_from_json_string(const std::string& text);

enum class Stage { burn_in, mutual };

struct TrainState {
    int iteration = 0;
    Stage stage = Stage::burn_in;
    DetectorParams student;
    std::optional<DetectorParams> teacher;
    std::map<std::string, Tensor> momentum;  // keyed by student tensor names
};

// theta_t <- alpha * theta_t + (1 - alpha) * theta_s, element-wise over every
// named array. Throws on structure mismatch.
void ema_update(DetectorParams& teacher, const DetectorParams& student,
                double alpha);

// Micro-averaged pseudo-label accuracy over one step's unlabeled batch.
struct PseudoBatchStats {
    double precision = 1.0;
    double recall = 1.0;
    int count = 0;
};

struct TrainResult {
    std::string metrics_path;
    std::string checkpoint_path;
    std::optional<EvalReport> final_teacher_eval;
    EvalReport final_student_eval;
};

// Two-stage training driver. Owns the train state, batch sampling, metrics
// log, checkpointing and the labeled split. run_dir may be empty for
// in-memory use (no files written).
class Trainer {
public:
    Trainer(TrainConfig config, const Dataset& dataset, std::string run_dir);

    const TrainConfig& config() const { return config_; }
    TrainState& state() { return state_; }
    const LabeledSplit& split() const { return split_; }
    const PseudoBatchStats& last_pseudo_stats() const { return last_pseudo_; }

    // One supervised step (forward on each labeled image and its flipped copy,
    // consistency localization loss unless disabled, one SGD-momentum step).
    LossBreakdown burn_in_step(const std::vector<std::string>& labeled_batch);

    // Deep-copies the student into the teacher and enters the mutual stage.
    // Only valid once, at the burn-in boundary.
    void init_teacher();

    // Supervised losses on the labeled batch plus pseudo-label classification
    // losses and unlabeled consistency, one SGD step, then the EMA update.
    LossBreakdown mutual_step(const std::vector<std::string>& labeled_batch,
                              const std::vector<std::string>& unlabeled_batch);

    // Batch sampling for a given 1-based iteration (stateless in the RNG:
    // derived from the run seed, so resume continues identically).
    std::vector<std::string> sample_labeled_batch(int iteration) const;
    std::vector<std::string> sample_unlabeled_batch(int iteration) const;

    EvalReport evaluate_model(const DetectorParams& params) const;

    // Runs to total_iterations, appending metrics and checkpoints.
    TrainResult run();

    // Restores iteration/stage/parameters/momentum from a checkpoint written
    // by this class, then continues.
    void restore(const std::string& checkpoint_path);
    void save_checkpoint(const std::string& path) const;

private:
    struct ImageTask;
    void apply_sgd_step(const std::map<std::string, Tensor>& grads);
    void supervised_image(ImageTask& task) const;
    void unsupervised_image(ImageTask& task) const;
    LossBreakdown step_impl(const std::vector<std::string>& labeled_batch,
                            const std::vector<std::string>* unlabeled_batch);
    void write_metrics_line(const LossBreakdown& lb,
                            const std::optional<EvalReport>& teacher_eval,
                            const std::optional<EvalReport>& student_eval,
                            bool has_pseudo);

    TrainConfig config_;
    const Dataset& dataset_;
    std::string run_dir_;
    LabeledSplit split_;
    std::vector<Box> anchors_;
    std::vector<int> mirror_perm_;
    TrainState state_;
    PseudoBatchStats last_pseudo_;
    std::vector<PseudoLabelSet> last_pls_;
    bool teacher_initialized_ = false;
};

// Convenience wrapper: construct, optionally restore, run.
TrainResult train(const TrainConfig& config, const Dataset& dataset,
                  const std::string& run_dir,
                  const std::string& resume_checkpoint = "");

}  // namespace lbt
