#include "lbt/pseudolabel.hpp"

#include <limits>
#include <stdexcept>

#include <json.hpp>

using nlohmann::json;

namespace lbt {

PseudoLabelSet generate_pseudo_labels(const DetectorParams& teacher,
                                      const Image& image, double delta,
                                      double nms_threshold,
                                      const std::string& image_id,
                                      int teacher_iteration) {
    if (!(delta > 0.0 && delta < 1.0))
        throw std::invalid_argument("generate_pseudo_labels: delta must be in (0,1)");
    PseudoLabelSet pls;
    pls.image_id = image_id;
    pls.delta_used = delta;
    pls.teacher_iteration = teacher_iteration;
    // detect() implements exactly the required pipeline order: decode, drop
    // background, class-wise NMS, then the confidence threshold.
    pls.labels = detect(teacher, image, delta, nms_threshold,
                        std::numeric_limits<int>::max());
    return pls;
}

PseudoLabelStats pseudo_label_stats(const PseudoLabelSet& pls,
                                    std::span<const Annotation> ground_truth,
                                    double iou_threshold, int num_classes) {
    PseudoLabelStats stats;
    stats.n_pseudo = static_cast<int>(pls.labels.size());
    stats.n_ground_truth = static_cast<int>(ground_truth.size());
    stats.per_class_pseudo.assign(static_cast<std::size_t>(num_classes), 0);
    stats.per_class_correct.assign(static_cast<std::size_t>(num_classes), 0);

    std::vector<std::uint8_t> used(ground_truth.size(), 0);
    for (const Detection& d : pls.labels) {
        if (d.class_id >= 0 && d.class_id < num_classes)
            ++stats.per_class_pseudo[static_cast<std::size_t>(d.class_id)];
        double best = 0.0;
        int best_j = -1;
        for (std::size_t j = 0; j < ground_truth.size(); ++j) {
            if (used[j] || ground_truth[j].class_id != d.class_id) continue;
            const double v = iou(d.box, ground_truth[j].box);
            if (v >= iou_threshold && v > best) {
                best = v;
                best_j = static_cast<int>(j);
            }
        }
        if (best_j >= 0) {
            used[static_cast<std::size_t>(best_j)] = 1;
            ++stats.n_correct;
            if (d.class_id >= 0 && d.class_id < num_classes)
                ++stats.per_class_correct[static_cast<std::size_t>(d.class_id)];
        }
    }
    stats.precision = stats.n_pseudo == 0
                          ? 1.0
                          : static_cast<double>(stats.n_correct) / stats.n_pseudo;
    stats.recall = stats.n_ground_truth == 0
                       ? 1.0
                       : static_cast<double>(stats.n_correct) / stats.n_ground_truth;
    return stats;
}

std::string pseudo_labels_to_json_line(const PseudoLabelSet& pls, int iteration) {
    json labels = json::array();
    for (const Detection& d : pls.labels) {
        labels.push_back({{"x1", d.box.x1},
                          {"y1", d.box.y1},
                          {"x2", d.box.x2},
                          {"y2", d.box.y2},
                          {"class", d.class_id},
                          {"score", d.score}});
    }
    json j = {{"iteration", iteration},
              {"image_id", pls.image_id},
              {"labels", std::move(labels)},
              {"delta", pls.delta_used}};
    return j.dump();
}

}  // namespace lbt
