#include "lbt/eval.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

using nlohmann::json;

namespace lbt {

namespace {

std::vector<std::size_t> score_order(const std::vector<Detection>& dets) {
    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
        if (dets[a].class_id != dets[b].class_id)
            return dets[a].class_id < dets[b].class_id;
        if (dets[a].box.x1 != dets[b].box.x1) return dets[a].box.x1 < dets[b].box.x1;
        return a < b;
    });
    return order;
}

}  // namespace

std::vector<std::uint8_t> match_detections(
    const std::vector<Detection>& dets,
    const std::vector<Annotation>& ground_truth, double iou_threshold) {
    const std::vector<std::size_t> order = score_order(dets);
    std::vector<std::uint8_t> gt_used(ground_truth.size(), 0);
    std::vector<std::uint8_t> flags(dets.size(), 0);
    for (std::size_t k = 0; k < order.size(); ++k) {
        const Detection& d = dets[order[k]];
        double best = 0.0;
        int best_j = -1;
        for (std::size_t j = 0; j < ground_truth.size(); ++j) {
            if (gt_used[j] || ground_truth[j].class_id != d.class_id) continue;
            const double v = iou(d.box, ground_truth[j].box);
            if (v >= iou_threshold && v > best) {
                best = v;
                best_j = static_cast<int>(j);
            }
        }
        if (best_j >= 0) {
            gt_used[static_cast<std::size_t>(best_j)] = 1;
            flags[k] = 1;
        }
    }
    return flags;
}

double average_precision(const std::vector<std::uint8_t>& flags, int n_gt) {
    if (n_gt < 0) throw std::invalid_argument("average_precision: n_gt < 0");
    if (n_gt == 0) return flags.empty() ? 1.0 : 0.0;
    if (flags.empty()) return 0.0;

    const std::size_t n = flags.size();
    std::vector<double> precision(n), recall(n);
    int tp = 0;
    for (std::size_t k = 0; k < n; ++k) {
        tp += flags[k] ? 1 : 0;
        precision[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
        recall[k] = static_cast<double>(tp) / static_cast<double>(n_gt);
    }
    // Monotone precision envelope from the right.
    std::vector<double> envelope(n);
    envelope[n - 1] = precision[n - 1];
    for (std::size_t k = n - 1; k > 0; --k)
        envelope[k - 1] = std::max(precision[k - 1], envelope[k]);

    double ap = 0.0;
    for (int r = 0; r <= 100; ++r) {
        const double target = r / 100.0;
        // First index with recall >= target.
        const auto it = std::lower_bound(recall.begin(), recall.end(), target);
        if (it != recall.end())
            ap += envelope[static_cast<std::size_t>(it - recall.begin())];
    }
    return ap / 101.0;
}

EvalReport evaluate_detections(
    const std::map<std::string, std::vector<Detection>>& detections,
    const std::map<std::string, std::vector<Annotation>>& ground_truth,
    int num_classes) {
    EvalReport report;
    for (int t = 0; t < 10; ++t) report.iou_thresholds.push_back(0.50 + 0.05 * t);

    report.n_images = static_cast<int>(ground_truth.size());
    std::vector<int> gt_count(static_cast<std::size_t>(num_classes), 0);
    for (const auto& [id, anns] : ground_truth) {
        report.n_ground_truth += static_cast<int>(anns.size());
        for (const auto& a : anns) {
            if (a.class_id < 0 || a.class_id >= num_classes)
                throw std::invalid_argument("evaluate: class id out of range");
            ++gt_count[static_cast<std::size_t>(a.class_id)];
        }
    }
    for (const auto& [id, dets] : detections)
        report.n_detections += static_cast<int>(dets.size());

    // Global score order per class: (score desc, image id asc, x1 asc).
    struct Entry {
        double score;
        const std::string* image_id;
        const Detection* det;
    };
    for (int c = 0; c < num_classes; ++c) {
        if (gt_count[static_cast<std::size_t>(c)] == 0) continue;

        std::vector<Entry> entries;
        for (const auto& [id, dets] : detections)
            for (const auto& d : dets)
                if (d.class_id == c) entries.push_back(Entry{d.score, &id, &d});
        std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
            if (a.score != b.score) return a.score > b.score;
            if (*a.image_id != *b.image_id) return *a.image_id < *b.image_id;
            return a.det->box.x1 < b.det->box.x1;
        });

        std::vector<double> aps;
        for (double threshold : report.iou_thresholds) {
            std::map<std::string, std::vector<std::uint8_t>> used;
            std::vector<std::uint8_t> flags;
            flags.reserve(entries.size());
            for (const Entry& e : entries) {
                auto git = ground_truth.find(*e.image_id);
                std::uint8_t flag = 0;
                if (git != ground_truth.end()) {
                    const auto& anns = git->second;
                    auto& mask = used[*e.image_id];
                    if (mask.empty()) mask.assign(anns.size(), 0);
                    double best = 0.0;
                    int best_j = -1;
                    for (std::size_t j = 0; j < anns.size(); ++j) {
                        if (mask[j] || anns[j].class_id != c) continue;
                        const double v = iou(e.det->box, anns[j].box);
                        if (v >= threshold && v > best) {
                            best = v;
                            best_j = static_cast<int>(j);
                        }
                    }
                    if (best_j >= 0) {
                        mask[static_cast<std::size_t>(best_j)] = 1;
                        flag = 1;
                    }
                }
                flags.push_back(flag);
            }
            aps.push_back(
                average_precision(flags, gt_count[static_cast<std::size_t>(c)]));
        }
        report.per_class_ap[c] = std::move(aps);
    }

    if (!report.per_class_ap.empty()) {
        double sum50 = 0.0, sum_all = 0.0;
        for (const auto& [c, aps] : report.per_class_ap) {
            sum50 += aps[0];
            for (double ap : aps) sum_all += ap;
        }
        const double n_classes = static_cast<double>(report.per_class_ap.size());
        report.ap50 = sum50 / n_classes;
        report.ap50_95 =
            sum_all / (n_classes * static_cast<double>(report.iou_thresholds.size()));
    }
    return report;
}

EvalReport evaluate(const DetectorParams& params, const Dataset& dataset,
                    std::span<const std::string> image_ids,
                    const DetectSettings& settings) {
    if (image_ids.empty())
        throw std::invalid_argument("evaluate: empty test split");

    std::vector<std::vector<Detection>> per_image(image_ids.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (std::size_t i = 0; i < image_ids.size(); ++i) {
        const AnnotatedImage img = dataset.load_image(image_ids[i]);
        per_image[i] = detect(params, img.pixels, settings.score_threshold,
                              settings.nms_threshold, settings.max_detections);
    }

    std::map<std::string, std::vector<Detection>> detections;
    std::map<std::string, std::vector<Annotation>> ground_truth;
    for (std::size_t i = 0; i < image_ids.size(); ++i) {
        detections[image_ids[i]] = std::move(per_image[i]);
        ground_truth[image_ids[i]] = dataset.annotations(image_ids[i]);
    }
    return evaluate_detections(detections, ground_truth, dataset.num_classes());
}

std::string eval_report_to_json_string(const EvalReport& report) {
    json per_class = json::object();
    for (const auto& [c, aps] : report.per_class_ap)
        per_class[std::to_string(c)] = aps;
    json j = {{"ap50", report.ap50},
              {"ap50_95", report.ap50_95},
              {"iou_thresholds", report.iou_thresholds},
              {"per_class_ap", std::move(per_class)},
              {"n_images", report.n_images},
              {"n_ground_truth", report.n_ground_truth},
              {"n_detections", report.n_detections}};
    return j.dump(2) + "\n";
}

}  // namespace lbt
