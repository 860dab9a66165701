#include "lbt/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "lbt/nn.hpp"
#include "lbt/rng.hpp"

using nlohmann::json;

namespace lbt {

// ---------------------------------------------------------------------------
// ArchConfig
// ---------------------------------------------------------------------------

int ArchConfig::feature_stride() const {
    int s = 1;
    for (int st : backbone_strides) s *= st;
    return s;
}

int ArchConfig::feature_size() const { return image_size / feature_stride(); }

void ArchConfig::validate() const {
    if (backbone_channels.empty() ||
        backbone_channels.size() != backbone_strides.size())
        throw std::invalid_argument("arch: backbone channel/stride mismatch");
    if (anchor_scales.empty() || anchor_ratios.empty())
        throw std::invalid_argument("arch: need anchor scales and ratios");
    if (num_classes < 1) throw std::invalid_argument("arch: num_classes < 1");
    if (roi_pool_size < 1 || fc_dim < 1 || rpn_channels < 1 || proposal_count < 1)
        throw std::invalid_argument("arch: invalid head sizes");
    if (!(rpn_nms_threshold > 0.0 && rpn_nms_threshold < 1.0))
        throw std::invalid_argument("arch: rpn_nms_threshold must be in (0,1)");
    int size = image_size;
    for (int st : backbone_strides) {
        if (st != 1 && st != 2)
            throw std::invalid_argument("arch: strides must be 1 or 2");
        if (st == 2 && size % 2 != 0)
            throw std::invalid_argument("arch: stride-2 layer on odd size");
        size /= st;
    }
    if (size * feature_stride() != image_size)
        throw std::invalid_argument("arch: image size not divisible by stride");
}

std::string arch_to_json_string(const ArchConfig& a) {
    json j = {{"image_size", a.image_size},
              {"backbone_channels", a.backbone_channels},
              {"backbone_strides", a.backbone_strides},
              {"rpn_channels", a.rpn_channels},
              {"anchor_scales", a.anchor_scales},
              {"anchor_ratios", a.anchor_ratios},
              {"roi_pool_size", a.roi_pool_size},
              {"fc_dim", a.fc_dim},
              {"num_classes", a.num_classes},
              {"proposal_count", a.proposal_count},
              {"rpn_nms_threshold", a.rpn_nms_threshold}};
    return j.dump();
}

ArchConfig arch_from_json_string(const std::string& text) {
    json j = json::parse(text);
    ArchConfig a;  // missing keys keep their defaults
    a.image_size = j.value("image_size", a.image_size);
    a.backbone_channels = j.value("backbone_channels", a.backbone_channels);
    a.backbone_strides = j.value("backbone_strides", a.backbone_strides);
    a.rpn_channels = j.value("rpn_channels", a.rpn_channels);
    a.anchor_scales = j.value("anchor_scales", a.anchor_scales);
    a.anchor_ratios = j.value("anchor_ratios", a.anchor_ratios);
    a.roi_pool_size = j.value("roi_pool_size", a.roi_pool_size);
    a.fc_dim = j.value("fc_dim", a.fc_dim);
    a.num_classes = j.value("num_classes", a.num_classes);
    a.proposal_count = j.value("proposal_count", a.proposal_count);
    a.rpn_nms_threshold = j.value("rpn_nms_threshold", a.rpn_nms_threshold);
    a.validate();
    return a;
}

Tensor& DetectorParams::at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end())
        throw std::out_of_range("DetectorParams: no tensor named " + name);
    return it->second;
}

const Tensor& DetectorParams::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end())
        throw std::out_of_range("DetectorParams: no tensor named " + name);
    return it->second;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace {

void fill_normal(Tensor& t, Rng& rng, double stddev) {
    for (double& v : t.v) v = stddev * rng.normal();
}

std::size_t fan_in(const Tensor& t) {
    std::size_t f = 1;
    for (std::size_t i = 1; i < t.shape.size(); ++i)
        f *= static_cast<std::size_t>(t.shape[i]);
    return f;
}

}  // namespace

DetectorParams init_params(const ArchConfig& arch, std::uint64_t seed) {
    arch.validate();
    DetectorParams p;
    p.arch = arch;

    const int num_layers = static_cast<int>(arch.backbone_channels.size());
    int cin = 3;
    for (int i = 0; i < num_layers; ++i) {
        const int cout = arch.backbone_channels[i];
        p.tensors["backbone.conv" + std::to_string(i) + ".weight"] =
            Tensor{{cout, cin, 3, 3}};
        p.tensors["backbone.conv" + std::to_string(i) + ".bias"] = Tensor{{cout}};
        cin = cout;
    }
    const int feat_c = arch.backbone_channels.back();
    const int A = arch.anchors_per_cell();
    p.tensors["rpn.conv.weight"] = Tensor{{arch.rpn_channels, feat_c, 3, 3}};
    p.tensors["rpn.conv.bias"] = Tensor{{arch.rpn_channels}};
    p.tensors["rpn.obj.weight"] = Tensor{{A, arch.rpn_channels}};
    p.tensors["rpn.obj.bias"] = Tensor{{A}};
    p.tensors["rpn.delta.weight"] = Tensor{{4 * A, arch.rpn_channels}};
    p.tensors["rpn.delta.bias"] = Tensor{{4 * A}};
    const int pooled_dim = feat_c * arch.roi_pool_size * arch.roi_pool_size;
    p.tensors["roi.fc1.weight"] = Tensor{{arch.fc_dim, pooled_dim}};
    p.tensors["roi.fc1.bias"] = Tensor{{arch.fc_dim}};
    p.tensors["roi.cls.weight"] = Tensor{{arch.num_classes + 1, arch.fc_dim}};
    p.tensors["roi.cls.bias"] = Tensor{{arch.num_classes + 1}};
    p.tensors["roi.reg.weight"] = Tensor{{4, arch.fc_dim}};
    p.tensors["roi.reg.bias"] = Tensor{{4}};

    for (auto& [name, tensor] : p.tensors) {
        Rng rng(derive_seed(seed, name));
        if (name.ends_with(".bias")) {
            tensor.fill(0.0);
        } else if (name.starts_with("rpn.obj") || name.starts_with("rpn.delta") ||
                   name.starts_with("roi.cls")) {
            fill_normal(tensor, rng, 0.01);
        } else if (name.starts_with("roi.reg")) {
            fill_normal(tensor, rng, 0.001);
        } else {
            fill_normal(tensor, rng, std::sqrt(2.0 / static_cast<double>(fan_in(tensor))));
        }
    }
    // Start objectness pessimistic so the proposal set is not all-positive.
    p.at("rpn.obj.bias").fill(-2.0);
    return p;
}

// ---------------------------------------------------------------------------
// Anchors
// ---------------------------------------------------------------------------

std::vector<Box> anchor_boxes(const ArchConfig& arch) {
    const int fs = arch.feature_size();
    const double stride = arch.feature_stride();
    std::vector<Box> anchors;
    anchors.reserve(static_cast<std::size_t>(arch.num_anchors()));
    for (int row = 0; row < fs; ++row) {
        for (int col = 0; col < fs; ++col) {
            const double cx = (col + 0.5) * stride;
            const double cy = (row + 0.5) * stride;
            for (double scale : arch.anchor_scales) {
                for (double ratio : arch.anchor_ratios) {
                    const double w = scale / std::sqrt(ratio);
                    const double h = scale * std::sqrt(ratio);
                    anchors.push_back(
                        Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
                }
            }
        }
    }
    return anchors;
}

std::vector<int> anchor_mirror_permutation(const ArchConfig& arch) {
    const int fs = arch.feature_size();
    const int A = arch.anchors_per_cell();
    std::vector<int> perm(static_cast<std::size_t>(arch.num_anchors()));
    for (int row = 0; row < fs; ++row)
        for (int col = 0; col < fs; ++col)
            for (int a = 0; a < A; ++a)
                perm[(static_cast<std::size_t>(row) * fs + col) * A + a] =
                    (row * fs + (fs - 1 - col)) * A + a;
    return perm;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace {

Tensor image_to_chw(const Image& img) {
    Tensor t{{3, img.height, img.width}};
    const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                t.v[plane * c + static_cast<std::size_t>(y) * img.width + x] =
                    img.at(y, x, c);
    return t;
}

void select_proposals(const ArchConfig& arch, const std::vector<Box>& anchors,
                      const std::vector<double>& obj_probs,
                      const std::vector<DeltaVector>& deltas,
                      std::vector<Box>& proposals, std::vector<double>& scores) {
    const double W = arch.image_size;
    std::vector<Detection> cands(anchors.size());
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        cands[i] = Detection{decode_deltas_clipped(anchors[i], deltas[i], W, W), 0,
                             obj_probs[i]};
    }
    std::vector<std::size_t> kept = nms(cands, arch.rpn_nms_threshold, false);
    if (kept.size() > static_cast<std::size_t>(arch.proposal_count))
        kept.resize(static_cast<std::size_t>(arch.proposal_count));
    proposals.clear();
    scores.clear();
    for (std::size_t k : kept) {
        proposals.push_back(cands[k].box);
        scores.push_back(cands[k].score);
    }
}

}  // namespace

ForwardCache forward_cached(const DetectorParams& params, const Image& image,
                            const ForwardOptions& options) {
    const ArchConfig& arch = params.arch;
    if (image.width != arch.image_size || image.height != arch.image_size)
        throw std::invalid_argument("forward: image does not match configured size");

    ForwardCache cache;
    cache.backbone.push_back(image_to_chw(image));

    // Backbone.
    int cin = 3, size = arch.image_size;
    for (std::size_t layer = 0; layer < arch.backbone_channels.size(); ++layer) {
        const int cout = arch.backbone_channels[layer];
        const int stride = arch.backbone_strides[layer];
        const int out_size = (size - 1) / stride + 1;
        Tensor out{{cout, out_size, out_size}};
        const Tensor& w =
            params.at("backbone.conv" + std::to_string(layer) + ".weight");
        const Tensor& b =
            params.at("backbone.conv" + std::to_string(layer) + ".bias");
        nn::conv3x3_forward(cache.backbone.back().data(), cin, size, size,
                            w.data(), b.data(), cout, stride, out.data(),
                            out_size, out_size);
        nn::relu_inplace(out.data(), out.numel());
        cache.backbone.push_back(std::move(out));
        cin = cout;
        size = out_size;
    }

    const Tensor& feat = cache.backbone.back();
    const int fs = arch.feature_size();
    const int hw = fs * fs;
    const int feat_c = arch.backbone_channels.back();
    const int A = arch.anchors_per_cell();

    // RPN.
    cache.rpn_hidden = Tensor{{arch.rpn_channels, fs, fs}};
    nn::conv3x3_forward(feat.data(), feat_c, fs, fs,
                        params.at("rpn.conv.weight").data(),
                        params.at("rpn.conv.bias").data(), arch.rpn_channels, 1,
                        cache.rpn_hidden.data(), fs, fs);
    nn::relu_inplace(cache.rpn_hidden.data(), cache.rpn_hidden.numel());

    Tensor obj_map{{A, fs, fs}};
    nn::conv1x1_forward(cache.rpn_hidden.data(), arch.rpn_channels, hw,
                        params.at("rpn.obj.weight").data(),
                        params.at("rpn.obj.bias").data(), A, obj_map.data());
    Tensor delta_map{{4 * A, fs, fs}};
    nn::conv1x1_forward(cache.rpn_hidden.data(), arch.rpn_channels, hw,
                        params.at("rpn.delta.weight").data(),
                        params.at("rpn.delta.bias").data(), 4 * A,
                        delta_map.data());

    const int n_anchors = arch.num_anchors();
    cache.obj_logits.resize(static_cast<std::size_t>(n_anchors));
    cache.outputs.rpn_objectness.resize(static_cast<std::size_t>(n_anchors));
    cache.outputs.rpn_deltas.resize(static_cast<std::size_t>(n_anchors));
    for (int row = 0; row < fs; ++row) {
        for (int col = 0; col < fs; ++col) {
            const int cell = row * fs + col;
            for (int a = 0; a < A; ++a) {
                const int idx = cell * A + a;
                const double logit = obj_map.v[static_cast<std::size_t>(a) * hw + cell];
                cache.obj_logits[idx] = logit;
                cache.outputs.rpn_objectness[idx] = nn::sigmoid(logit);
                cache.outputs.rpn_deltas[idx] = DeltaVector{
                    delta_map.v[static_cast<std::size_t>(4 * a + 0) * hw + cell],
                    delta_map.v[static_cast<std::size_t>(4 * a + 1) * hw + cell],
                    delta_map.v[static_cast<std::size_t>(4 * a + 2) * hw + cell],
                    delta_map.v[static_cast<std::size_t>(4 * a + 3) * hw + cell]};
            }
        }
    }

    // Proposals.
    if (options.proposal_override.has_value()) {
        for (const Box& b : *options.proposal_override)
            if (!b.valid())
                throw std::invalid_argument("forward: invalid proposal_override box");
        cache.outputs.proposals = *options.proposal_override;
        cache.outputs.proposal_scores.assign(cache.outputs.proposals.size(), 0.0);
    } else {
        const std::vector<Box> anchors = anchor_boxes(arch);
        select_proposals(arch, anchors, cache.outputs.rpn_objectness,
                         cache.outputs.rpn_deltas, cache.outputs.proposals,
                         cache.outputs.proposal_scores);
        for (const Box& b : options.extra_proposals) {
            if (!b.valid())
                throw std::invalid_argument("forward: invalid extra proposal");
            cache.outputs.proposals.push_back(b);
            cache.outputs.proposal_scores.push_back(0.0);
        }
    }

    // ROI head.
    const int pool = arch.roi_pool_size;
    const int pooled_dim = feat_c * pool * pool;
    const std::size_t n_rois = cache.outputs.proposals.size();
    cache.pooled.resize(n_rois);
    cache.fc1_out.resize(n_rois);
    cache.outputs.roi_class_probs.resize(n_rois);
    cache.outputs.roi_deltas.resize(n_rois);

    const Tensor& fc1_w = params.at("roi.fc1.weight");
    const Tensor& fc1_b = params.at("roi.fc1.bias");
    const Tensor& cls_w = params.at("roi.cls.weight");
    const Tensor& cls_b = params.at("roi.cls.bias");
    const Tensor& reg_w = params.at("roi.reg.weight");
    const Tensor& reg_b = params.at("roi.reg.bias");
    const int n_cls = arch.num_classes + 1;

    for (std::size_t r = 0; r < n_rois; ++r) {
        cache.pooled[r].assign(static_cast<std::size_t>(pooled_dim), 0.0);
        nn::roi_align_forward(feat.data(), feat_c, fs, fs,
                              arch.feature_stride(), cache.outputs.proposals[r],
                              pool, cache.pooled[r].data());
        cache.fc1_out[r].assign(static_cast<std::size_t>(arch.fc_dim), 0.0);
        nn::linear_forward(cache.pooled[r].data(), pooled_dim, fc1_w.data(),
                           fc1_b.data(), arch.fc_dim, cache.fc1_out[r].data());
        nn::relu_inplace(cache.fc1_out[r].data(), cache.fc1_out[r].size());

        std::vector<double> cls_logits(static_cast<std::size_t>(n_cls));
        nn::linear_forward(cache.fc1_out[r].data(), arch.fc_dim, cls_w.data(),
                           cls_b.data(), n_cls, cls_logits.data());
        cache.outputs.roi_class_probs[r].assign(static_cast<std::size_t>(n_cls), 0.0);
        nn::softmax(cls_logits.data(), n_cls,
                    cache.outputs.roi_class_probs[r].data());

        double reg[4];
        nn::linear_forward(cache.fc1_out[r].data(), arch.fc_dim, reg_w.data(),
                           reg_b.data(), 4, reg);
        cache.outputs.roi_deltas[r] = DeltaVector{reg[0], reg[1], reg[2], reg[3]};
    }
    return cache;
}

DetectorOutputs forward(const DetectorParams& params, const Image& image,
                        const std::optional<std::vector<Box>>& proposal_override) {
    ForwardOptions options;
    options.proposal_override = proposal_override;
    return forward_cached(params, image, options).outputs;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

namespace {

Tensor& grad_slot(std::map<std::string, Tensor>& grads, const std::string& name,
                  const Tensor& like) {
    auto it = grads.find(name);
    if (it == grads.end()) it = grads.emplace(name, Tensor{like.shape}).first;
    else if (!it->second.same_shape(like))
        throw std::invalid_argument("backward: gradient shape mismatch for " + name);
    return it->second;
}

}  // namespace

void backward(const DetectorParams& params, const ForwardCache& cache,
              const OutputGrads& g, std::map<std::string, Tensor>& grads) {
    const ArchConfig& arch = params.arch;
    const int fs = arch.feature_size();
    const int hw = fs * fs;
    const int feat_c = arch.backbone_channels.back();
    const int A = arch.anchors_per_cell();
    const int n_anchors = arch.num_anchors();
    const int n_cls = arch.num_classes + 1;
    const int pool = arch.roi_pool_size;
    const int pooled_dim = feat_c * pool * pool;
    const std::size_t n_rois = cache.outputs.proposals.size();

    if (!g.d_obj_logits.empty() &&
        g.d_obj_logits.size() != static_cast<std::size_t>(n_anchors))
        throw std::invalid_argument("backward: d_obj_logits size mismatch");
    if (!g.d_rpn_deltas.empty() &&
        g.d_rpn_deltas.size() != static_cast<std::size_t>(n_anchors))
        throw std::invalid_argument("backward: d_rpn_deltas size mismatch");
    if (!g.d_roi_probs.empty() && g.d_roi_probs.size() != n_rois)
        throw std::invalid_argument("backward: d_roi_probs size mismatch");
    if (!g.d_roi_deltas.empty() && g.d_roi_deltas.size() != n_rois)
        throw std::invalid_argument("backward: d_roi_deltas size mismatch");

    const Tensor& feat = cache.backbone.back();
    Tensor dfeat{feat.shape};

    // ROI head backward.
    if (!g.d_roi_probs.empty() || !g.d_roi_deltas.empty()) {
        const Tensor& fc1_w = params.at("roi.fc1.weight");
        const Tensor& cls_w = params.at("roi.cls.weight");
        const Tensor& reg_w = params.at("roi.reg.weight");
        Tensor& d_fc1_w = grad_slot(grads, "roi.fc1.weight", fc1_w);
        Tensor& d_fc1_b = grad_slot(grads, "roi.fc1.bias", params.at("roi.fc1.bias"));
        Tensor& d_cls_w = grad_slot(grads, "roi.cls.weight", cls_w);
        Tensor& d_cls_b = grad_slot(grads, "roi.cls.bias", params.at("roi.cls.bias"));
        Tensor& d_reg_w = grad_slot(grads, "roi.reg.weight", reg_w);
        Tensor& d_reg_b = grad_slot(grads, "roi.reg.bias", params.at("roi.reg.bias"));

        std::vector<double> d_fc1(static_cast<std::size_t>(arch.fc_dim));
        std::vector<double> d_pooled(static_cast<std::size_t>(pooled_dim));
        std::vector<double> d_cls_logits(static_cast<std::size_t>(n_cls));
        for (std::size_t r = 0; r < n_rois; ++r) {
            std::fill(d_fc1.begin(), d_fc1.end(), 0.0);

            if (!g.d_roi_probs.empty() && !g.d_roi_probs[r].empty()) {
                if (g.d_roi_probs[r].size() != static_cast<std::size_t>(n_cls))
                    throw std::invalid_argument("backward: d_roi_probs row size");
                std::fill(d_cls_logits.begin(), d_cls_logits.end(), 0.0);
                nn::softmax_backward(cache.outputs.roi_class_probs[r].data(), n_cls,
                                     g.d_roi_probs[r].data(), d_cls_logits.data());
                nn::linear_backward(cache.fc1_out[r].data(), arch.fc_dim,
                                    cls_w.data(), n_cls, d_cls_logits.data(),
                                    d_fc1.data(), d_cls_w.data(), d_cls_b.data());
            }
            if (!g.d_roi_deltas.empty()) {
                const DeltaVector& dd = g.d_roi_deltas[r];
                const double d_reg[4] = {dd.dcx, dd.dcy, dd.dw, dd.dh};
                nn::linear_backward(cache.fc1_out[r].data(), arch.fc_dim,
                                    reg_w.data(), 4, d_reg, d_fc1.data(),
                                    d_reg_w.data(), d_reg_b.data());
            }
            nn::relu_backward_inplace(cache.fc1_out[r].data(), d_fc1.data(),
                                      d_fc1.size());
            std::fill(d_pooled.begin(), d_pooled.end(), 0.0);
            nn::linear_backward(cache.pooled[r].data(), pooled_dim, fc1_w.data(),
                                arch.fc_dim, d_fc1.data(), d_pooled.data(),
                                d_fc1_w.data(), d_fc1_b.data());
            nn::roi_align_backward(feat_c, fs, fs, arch.feature_stride(),
                                   cache.outputs.proposals[r], pool,
                                   d_pooled.data(), dfeat.data());
        }
    }

    // RPN backward.
    if (!g.d_obj_logits.empty() || !g.d_rpn_deltas.empty()) {
        Tensor d_hidden{cache.rpn_hidden.shape};
        if (!g.d_obj_logits.empty()) {
            Tensor d_obj_map{{A, fs, fs}};
            for (int idx = 0; idx < n_anchors; ++idx) {
                const int cell = idx / A, a = idx % A;
                d_obj_map.v[static_cast<std::size_t>(a) * hw + cell] =
                    g.d_obj_logits[static_cast<std::size_t>(idx)];
            }
            nn::conv1x1_backward(cache.rpn_hidden.data(), arch.rpn_channels, hw,
                                 params.at("rpn.obj.weight").data(), A,
                                 d_obj_map.data(), d_hidden.data(),
                                 grad_slot(grads, "rpn.obj.weight",
                                           params.at("rpn.obj.weight"))
                                     .data(),
                                 grad_slot(grads, "rpn.obj.bias",
                                           params.at("rpn.obj.bias"))
                                     .data());
        }
        if (!g.d_rpn_deltas.empty()) {
            Tensor d_delta_map{{4 * A, fs, fs}};
            for (int idx = 0; idx < n_anchors; ++idx) {
                const int cell = idx / A, a = idx % A;
                const DeltaVector& dd = g.d_rpn_deltas[static_cast<std::size_t>(idx)];
                d_delta_map.v[static_cast<std::size_t>(4 * a + 0) * hw + cell] = dd.dcx;
                d_delta_map.v[static_cast<std::size_t>(4 * a + 1) * hw + cell] = dd.dcy;
                d_delta_map.v[static_cast<std::size_t>(4 * a + 2) * hw + cell] = dd.dw;
                d_delta_map.v[static_cast<std::size_t>(4 * a + 3) * hw + cell] = dd.dh;
            }
            nn::conv1x1_backward(cache.rpn_hidden.data(), arch.rpn_channels, hw,
                                 params.at("rpn.delta.weight").data(), 4 * A,
                                 d_delta_map.data(), d_hidden.data(),
                                 grad_slot(grads, "rpn.delta.weight",
                                           params.at("rpn.delta.weight"))
                                     .data(),
                                 grad_slot(grads, "rpn.delta.bias",
                                           params.at("rpn.delta.bias"))
                                     .data());
        }
        nn::relu_backward_inplace(cache.rpn_hidden.data(), d_hidden.data(),
                                  d_hidden.numel());
        nn::conv3x3_backward(
            feat.data(), feat_c, fs, fs, params.at("rpn.conv.weight").data(),
            arch.rpn_channels, 1, d_hidden.data(), fs, fs, dfeat.data(),
            grad_slot(grads, "rpn.conv.weight", params.at("rpn.conv.weight")).data(),
            grad_slot(grads, "rpn.conv.bias", params.at("rpn.conv.bias")).data());
    }

    // Backbone backward.
    Tensor dout = std::move(dfeat);
    for (int layer = static_cast<int>(arch.backbone_channels.size()) - 1;
         layer >= 0; --layer) {
        const Tensor& in = cache.backbone[static_cast<std::size_t>(layer)];
        const Tensor& out = cache.backbone[static_cast<std::size_t>(layer) + 1];
        nn::relu_backward_inplace(out.data(), dout.data(), dout.numel());
        const std::string prefix = "backbone.conv" + std::to_string(layer);
        const Tensor& w = params.at(prefix + ".weight");
        Tensor din{in.shape};
        nn::conv3x3_backward(in.data(), in.shape[0], in.shape[1], in.shape[2],
                             w.data(), out.shape[0], arch.backbone_strides
                             [static_cast<std::size_t>(layer)],
                             dout.data(), out.shape[1], out.shape[2],
                             layer > 0 ? din.data() : nullptr,
                             grad_slot(grads, prefix + ".weight", w).data(),
                             grad_slot(grads, prefix + ".bias",
                                       params.at(prefix + ".bias"))
                                 .data());
        dout = std::move(din);
    }
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

std::vector<Detection> detect(const DetectorParams& params, const Image& image,
                              double score_threshold, double nms_threshold,
                              int max_detections) {
    if (max_detections <= 0) return {};
    const DetectorOutputs out = forward(params, image);
    const ArchConfig& arch = params.arch;
    const double W = arch.image_size;

    std::vector<Detection> decoded;
    decoded.reserve(out.proposals.size());
    for (std::size_t r = 0; r < out.proposals.size(); ++r) {
        const auto& probs = out.roi_class_probs[r];
        int best = 0;
        for (int c = 1; c < arch.num_classes; ++c)
            if (probs[static_cast<std::size_t>(c)] > probs[static_cast<std::size_t>(best)])
                best = c;
        decoded.push_back(Detection{
            decode_deltas_clipped(out.proposals[r], out.roi_deltas[r], W, W), best,
            probs[static_cast<std::size_t>(best)]});
    }

    const std::vector<std::size_t> kept = nms(decoded, nms_threshold, true);
    std::vector<Detection> result;
    for (std::size_t k : kept) {
        if (decoded[k].score >= score_threshold) result.push_back(decoded[k]);
        if (result.size() >= static_cast<std::size_t>(max_detections)) break;
    }
    return result;
}

// ---------------------------------------------------------------------------
// Target assignment
// ---------------------------------------------------------------------------

TargetAssignment assign_anchor_targets(std::span<const Box> anchors,
                                       std::span<const Annotation> ground_truth,
                                       double iou_pos, double iou_neg) {
    if (iou_neg > iou_pos)
        throw std::invalid_argument("assign_anchor_targets: iou_neg > iou_pos");
    const std::size_t n = anchors.size();
    const std::size_t m = ground_truth.size();
    TargetAssignment t;
    t.labels.assign(n, 0);
    t.matched_gt.assign(n, -1);
    t.regression_targets.assign(n, DeltaVector{});

    if (m == 0) return t;

    std::vector<double> table(n * m);
    std::vector<double> best_iou(n, 0.0);
    std::vector<int> argmax_gt(n, -1);
    std::vector<double> gt_best(m, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            const double v = iou(anchors[i], ground_truth[j].box);
            table[i * m + j] = v;
            if (v > best_iou[i]) {
                best_iou[i] = v;
                argmax_gt[i] = static_cast<int>(j);
            }
            if (v > gt_best[j]) gt_best[j] = v;
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (best_iou[i] >= iou_pos) t.labels[i] = 1;
        else if (best_iou[i] < iou_neg) t.labels[i] = 0;
        else t.labels[i] = -1;
        // An anchor that realizes some ground truth's best (nonzero) overlap
        // is positive even below iou_pos, so every object keeps an anchor.
        for (std::size_t j = 0; j < m && t.labels[i] != 1; ++j)
            if (gt_best[j] > 0.0 && table[i * m + j] == gt_best[j]) t.labels[i] = 1;
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (t.labels[i] == 1 && argmax_gt[i] >= 0) {
            t.matched_gt[i] = argmax_gt[i];
            t.regression_targets[i] = encode_deltas(
                anchors[i], ground_truth[static_cast<std::size_t>(argmax_gt[i])].box);
        }
    }
    return t;
}

TargetAssignment assign_roi_targets(std::span<const Box> proposals,
                                    std::span<const Annotation> ground_truth,
                                    double iou_fg) {
    if (!(iou_fg > 0.0 && iou_fg < 1.0))
        throw std::invalid_argument("assign_roi_targets: iou_fg must be in (0,1)");
    const std::size_t n = proposals.size();
    TargetAssignment t;
    t.labels.assign(n, 0);
    t.matched_gt.assign(n, -1);
    t.regression_targets.assign(n, DeltaVector{});
    for (std::size_t i = 0; i < n; ++i) {
        double best = 0.0;
        int best_j = -1;
        for (std::size_t j = 0; j < ground_truth.size(); ++j) {
            const double v = iou(proposals[i], ground_truth[j].box);
            if (v > best) {
                best = v;
                best_j = static_cast<int>(j);
            }
        }
        if (best >= iou_fg && best_j >= 0) {
            t.labels[i] = 1;
            t.matched_gt[i] = best_j;
            t.regression_targets[i] = encode_deltas(
                proposals[i], ground_truth[static_cast<std::size_t>(best_j)].box);
        }
    }
    return t;
}

}  // namespace lbt
