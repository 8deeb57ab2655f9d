#pragma once

#include <dyav/animation.hpp>
#include <dyav/losses.hpp>
#include <dyav/model.hpp>
#include <dyav/optim.hpp>
#include <dyav/synthcloth.hpp>

#include <json.hpp>

#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace dyav {

// ---------------------------------------------------------------------------
// configuration

struct TrainParams {
    int iterations = 4000;      // stage-2 desk schedule; flow joins at the midpoint
    int static_iterations = 2000;
    int batch_frames = 4;
    int batch_views = 4;
    float lr = 4e-4f;
    float clip = 0.1f;
    float weight_decay = 0.01f;  // stage-2 only; keeps unused adapter paths small
    int log_every = 50;
    int heldout_view = -1;      // -1 = last view; excluded from training batches
    bool use_dynamic = true;    // ablation switch for the Dynamic Transformer
    LossWeights weights;
};

struct TrainConfig {
    ModelConfig model;
    SynthConfig synth;
    TrainParams train;

    // architecture identity embedded in checkpoints
    uint64_t hash() const { return model.hash(); }
};

namespace cfg_detail {

inline void reject_unknown(const nlohmann::json& j, const std::string& scope,
                           std::initializer_list<const char*> allowed) {
    check(j.is_object(), "config: " + scope + " must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* a : allowed)
            if (it.key() == a) { ok = true; break; }
        check(ok, "config: unknown key \"" + it.key() + "\" in " + scope);
    }
}

template <typename T>
void opt(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace cfg_detail

inline TrainConfig config_from_json(const nlohmann::json& j) {
    using cfg_detail::opt;
    cfg_detail::reject_unknown(j, "top level", {"model", "synth", "train"});
    TrainConfig c;
    if (j.contains("model")) {
        const auto& m = j.at("model");
        cfg_detail::reject_unknown(
            m, "model",
            {"d_model", "heads", "static_layers", "dynamic_layers", "num_points", "body_res",
             "head_res", "patch", "joints", "lora_rank", "lora_alpha", "lora_dropout",
             "learned_point_embed"});
        opt(m, "d_model", c.model.d_model);
        opt(m, "heads", c.model.heads);
        opt(m, "static_layers", c.model.static_layers);
        opt(m, "dynamic_layers", c.model.dynamic_layers);
        opt(m, "num_points", c.model.num_points);
        opt(m, "body_res", c.model.body_res);
        opt(m, "head_res", c.model.head_res);
        opt(m, "patch", c.model.patch);
        opt(m, "joints", c.model.joints);
        opt(m, "lora_rank", c.model.lora_rank);
        opt(m, "lora_alpha", c.model.lora_alpha);
        opt(m, "lora_dropout", c.model.lora_dropout);
        opt(m, "learned_point_embed", c.model.learned_point_embed);
    }
    if (j.contains("synth")) {
        const auto& s = j.at("synth");
        cfg_detail::reject_unknown(s, "synth",
                                   {"frames", "views", "res", "focal", "camera_radius",
                                    "camera_height", "body_points", "cloth_points", "preset",
                                    "stiffness", "damping"});
        opt(s, "frames", c.synth.frames);
        opt(s, "views", c.synth.views);
        opt(s, "res", c.synth.res);
        opt(s, "focal", c.synth.focal);
        opt(s, "camera_radius", c.synth.camera_radius);
        opt(s, "camera_height", c.synth.camera_height);
        opt(s, "body_points", c.synth.body_points);
        opt(s, "cloth_points", c.synth.cloth_points);
        opt(s, "preset", c.synth.preset);
        opt(s, "stiffness", c.synth.cloth.stiffness);
        opt(s, "damping", c.synth.cloth.damping);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        cfg_detail::reject_unknown(
            t, "train",
            {"iterations", "static_iterations", "batch_frames", "batch_views", "lr", "clip",
             "log_every", "heldout_view", "use_dynamic", "weight_decay", "weight_l1",
             "weight_ssim", "weight_mask", "weight_laplacian", "weight_flow"});
        opt(t, "iterations", c.train.iterations);
        opt(t, "static_iterations", c.train.static_iterations);
        opt(t, "batch_frames", c.train.batch_frames);
        opt(t, "batch_views", c.train.batch_views);
        opt(t, "lr", c.train.lr);
        opt(t, "clip", c.train.clip);
        opt(t, "weight_decay", c.train.weight_decay);
        opt(t, "log_every", c.train.log_every);
        opt(t, "heldout_view", c.train.heldout_view);
        opt(t, "use_dynamic", c.train.use_dynamic);
        opt(t, "weight_l1", c.train.weights.l1);
        opt(t, "weight_ssim", c.train.weights.ssim);
        opt(t, "weight_mask", c.train.weights.mask);
        opt(t, "weight_laplacian", c.train.weights.laplacian);
        opt(t, "weight_flow", c.train.weights.flow);
    }
    return c;
}

inline TrainConfig load_config(const std::string& path) {
    std::ifstream f(path);
    check(f.good(), "config: cannot open " + path);
    return config_from_json(nlohmann::json::parse(f));
}

// ---------------------------------------------------------------------------
// evaluation metrics

// PSNR over the union of the GT mask and the predicted coverage; identical
// images report infinity.
inline float psnr_masked(const Tensor& pred_rgb, const Tensor& pred_alpha, const Image& gt,
                         const Image& gt_mask) {
    const int H = gt.h, W = gt.w;
    double se = 0;
    long count = 0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            bool in = gt_mask.at(y, x, 0) > 0.5f ||
                      pred_alpha.at((size_t(y) * W + x)) > 0.5f;
            if (!in) continue;
            for (int c = 0; c < 3; ++c) {
                double d = double(pred_rgb.at((size_t(y) * W + x) * 3 + c)) - gt.at(y, x, c);
                se += d * d;
            }
            count += 3;
        }
    if (count == 0) return std::numeric_limits<float>::infinity();
    double mse = se / double(count);
    if (mse <= 0) return std::numeric_limits<float>::infinity();
    return float(10.0 * std::log10(1.0 / mse));
}

inline float ssim_metric(const Tensor& pred_rgb, const Image& gt) {
    Tensor target = Tensor::from({gt.h, gt.w, 3}, gt.data);
    return 1.f - ssim_loss(pred_rgb, target).item();
}

// mean endpoint error (pixels) of the rendered xy map against GT matches
inline float endpoint_error(const RenderOutput& out, const CorrespondenceSet& matches) {
    double sum = 0;
    long n = 0;
    for (const auto& m : matches.pairs) {
        int px = int(std::floor(m.src[0])), py = int(std::floor(m.src[1]));
        if (px < 0 || px >= out.W || py < 0 || py >= out.H) continue;
        if (!out.coverage[size_t(py) * size_t(out.W) + size_t(px)]) continue;
        Tensor s = grid_sample_bilinear(out.xy_map, {{m.src[0] - 0.5f, m.src[1] - 0.5f}});
        float dx = s.at(0) - m.tgt[0], dy = s.at(1) - m.tgt[1];
        sum += std::sqrt(double(dx) * dx + double(dy) * dy);
        ++n;
    }
    return n == 0 ? std::numeric_limits<float>::infinity() : float(sum / double(n));
}

// ---------------------------------------------------------------------------
// trainer

struct MetricsRow {
    long iteration = 0;
    float l1 = 0, ssim = 0, mask = 0, laplacian = 0, flow = 0, total = 0, psnr = 0;
};

inline void write_metrics(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::ofstream f(path);
    check(f.good(), "metrics: cannot open " + path);
    f << "iteration,l1,ssim,mask,laplacian,flow,total,psnr\n";
    for (const auto& r : rows)
        f << r.iteration << "," << r.l1 << "," << r.ssim << "," << r.mask << "," << r.laplacian
          << "," << r.flow << "," << r.total << "," << r.psnr << "\n";
}

struct Trainer {
    TrainConfig cfg;
    std::vector<LoadedDataset> data;
    AvatarModel model;
    Rng rng{1};

    Tensor diffused;  // [N,K] base skinning weights, constant
    Tensor tpl;       // [N,3] canonical template positions
    LaplacianGraph lap;
    Image ref_body, ref_head;

    std::map<std::tuple<int, int, int>, Image> img_cache, mask_cache;
    std::map<std::pair<int, int>, CorrespondenceSet> match_cache;

    int heldout_view() const {
        return cfg.train.heldout_view >= 0 ? cfg.train.heldout_view : data[0].views - 1;
    }

    static Trainer create(const TrainConfig& cfg, const std::vector<std::string>& dataset_dirs,
                          uint64_t seed) {
        check(!dataset_dirs.empty(), "trainer: need at least one dataset");
        Trainer tr;
        tr.cfg = cfg;
        tr.rng = Rng(seed);
        for (const auto& d : dataset_dirs) tr.data.push_back(load_dataset(d));
        const auto& d0 = tr.data[0];
        check(d0.views >= 2, "trainer: need a held-out view, got a single view");
        check(cfg.model.joints == d0.skel.joints(),
              "trainer: config joints=" + std::to_string(cfg.model.joints) + " but dataset has " +
                  std::to_string(d0.skel.joints()));
        check(cfg.model.num_points == int(d0.skel.template_points.size()),
              "trainer: config num_points=" + std::to_string(cfg.model.num_points) +
                  " but dataset template has " + std::to_string(d0.skel.template_points.size()));

        tr.model = AvatarModel::create(cfg.model, tr.rng);

        const int N = cfg.model.num_points;
        std::vector<Vec3> pos;
        std::vector<float> tf(size_t(N) * 3);
        for (int i = 0; i < N; ++i) {
            pos.push_back(d0.skel.template_points[size_t(i)].pos);
            for (int c = 0; c < 3; ++c) tf[size_t(i) * 3 + c] = pos.back()[c];
        }
        tr.tpl = Tensor::from({N, 3}, std::move(tf));
        tr.diffused = Tensor::from({N, d0.skel.joints()}, diffuse_weights(pos, d0.skel));
        tr.lap = LaplacianGraph::build(tr.tpl);

        // reference crops from the first frame of the first dataset
        Image ref = load_png(d0.frame_path(0, 0));
        tr.ref_body = resize_bilinear(ref, cfg.model.body_res, cfg.model.body_res);
        Image head_crop(ref.h / 3, ref.w / 3, ref.channels);
        int x0 = ref.w / 3;
        for (int y = 0; y < head_crop.h; ++y)
            for (int x = 0; x < head_crop.w; ++x)
                for (int c = 0; c < ref.channels; ++c)
                    head_crop.at(y, x, c) = ref.at(y, x0 + x, c);
        tr.ref_head = resize_bilinear(head_crop, cfg.model.head_res, cfg.model.head_res);
        return tr;
    }

    const Image& target(int ds, int f, int v) {
        auto key = std::make_tuple(ds, f, v);
        auto it = img_cache.find(key);
        if (it == img_cache.end())
            it = img_cache.emplace(key, load_png(data[size_t(ds)].frame_path(f, v))).first;
        return it->second;
    }
    const Image& mask(int ds, int f, int v) {
        auto key = std::make_tuple(ds, f, v);
        auto it = mask_cache.find(key);
        if (it == mask_cache.end())
            it = mask_cache.emplace(key, load_png(data[size_t(ds)].mask_path(f, v))).first;
        return it->second;
    }
    const CorrespondenceSet& matches(int ds, int f_src) {
        auto key = std::make_pair(ds, f_src);
        auto it = match_cache.find(key);
        if (it == match_cache.end()) {
            std::string p = data[size_t(ds)].root + "/matches/" + std::to_string(f_src) + "_" +
                            std::to_string(f_src + 1) + ".jsonl";
            it = match_cache.emplace(key, load_matches(p)).first;
        }
        return it->second;
    }

    MotionHistory history(int ds, int f) const {
        const auto& poses = data[size_t(ds)].poses;
        int lo = std::max(0, f - (kMotionSteps - 1));
        PoseSequence window(poses.begin() + lo, poses.begin() + f + 1);
        return build_history(window, data[size_t(ds)].skel);
    }

    // full forward to a posed GaussianSet; zero history = static demo mode
    GaussianSet forward_posed(int ds, int f, bool dynamic, const FwdCtx& ctx,
                              const MotionHistory* hist_override = nullptr) const {
        ImageTokens it = model.encode_image(ref_body, ref_head, ctx);
        Tensor pts = model.point_tokens(data[size_t(ds)].skel.template_points, ctx);
        pts = model.static_forward(it, pts, ctx);
        if (dynamic && cfg.train.use_dynamic) {
            MotionHistory h = hist_override ? *hist_override : history(ds, f);
            pts = model.dynamic_forward(pts, model.motion_enc.forward(h, ctx), ctx);
        }
        GaussianSet canon = model.decode_gaussians(pts, data[size_t(ds)].skel.template_points);
        Tensor w = refine_weights(diffused, canon.skin_offset);
        GaussianSet posed = pose_gaussians(canon, w, data[size_t(ds)].poses[size_t(f)],
                                           data[size_t(ds)].skel);
        posed.skin_offset = canon.mean;  // stash canonical means for the regularizer
        return posed;
    }

    // forward at an arbitrary pose with an explicit (possibly zero) history
    GaussianSet forward_posed_at(const Pose& pose, bool dynamic,
                                 const MotionHistory* hist = nullptr) const {
        FwdCtx ctx{};
        ImageTokens it = model.encode_image(ref_body, ref_head, ctx);
        Tensor pts = model.point_tokens(data[0].skel.template_points, ctx);
        pts = model.static_forward(it, pts, ctx);
        if (dynamic && cfg.train.use_dynamic) {
            MotionHistory h;
            if (hist) {
                h = *hist;
            } else {
                PoseSequence only{pose};
                h = build_history(only, data[0].skel);
            }
            pts = model.dynamic_forward(pts, model.motion_enc.forward(h, ctx), ctx);
        }
        GaussianSet canon = model.decode_gaussians(pts, data[0].skel.template_points);
        Tensor w = refine_weights(diffused, canon.skin_offset);
        GaussianSet posed = pose_gaussians(canon, w, pose, data[0].skel);
        posed.skin_offset = Tensor();
        return posed;
    }

    // one optimizer step over a sampled batch; returns the averaged report
    LossReport train_step(AdamW& opt, long it, long total, bool dynamic) {
        opt.zero_grad();
        FwdCtx ctx{true, &rng};

        const int BF = cfg.train.batch_frames;
        const int BV = std::min(cfg.train.batch_views, data[0].views - 1);
        LossReport rep;
        rep.weights = cfg.train.weights;
        rep.flow_active = dynamic && cfg.train.weights.flow > 0 && flow_gate(it, total);

        std::vector<Tensor> terms;
        int photometric = 0, flow_terms = 0;
        for (int bf = 0; bf < BF; ++bf) {
            int ds = int(rng.below(uint64_t(data.size())));
            int f = int(rng.below(uint64_t(data[size_t(ds)].frames)));
            GaussianSet posed = forward_posed(ds, f, dynamic, ctx);
            Tensor canon_mean = posed.skin_offset;
            posed.skin_offset = Tensor();
            Tensor lp = laplacian_reg(canon_mean, tpl, lap);
            rep.laplacian += lp.item();
            terms.push_back(scale(lp, cfg.train.weights.laplacian / float(BF)));

            for (int bv = 0; bv < BV; ++bv) {
                int v = int(rng.below(uint64_t(data[size_t(ds)].views)));
                if (v == heldout_view()) v = (v + 1) % data[size_t(ds)].views;
                RenderOutput out = render(data[size_t(ds)].cams[size_t(v)], posed, RenderMode::rgb);
                const Image& gt = target(ds, f, v);
                const Image& gm = mask(ds, f, v);
                Tensor tgt = Tensor::from({gt.h, gt.w, 3}, gt.data);
                Tensor tmask = Tensor::from({gm.h, gm.w, 1}, gm.data);
                Tensor l1 = l1_loss(out.rgb, tgt);
                Tensor ss = ssim_loss(out.rgb, tgt);
                Tensor mk = mask_loss(out.alpha, tmask);
                rep.l1 += l1.item();
                rep.ssim += ss.item();
                rep.mask += mk.item();
                ++photometric;
                const float inv = 1.f / float(BF * BV);
                terms.push_back(scale(l1, cfg.train.weights.l1 * inv));
                terms.push_back(scale(ss, cfg.train.weights.ssim * inv));
                terms.push_back(scale(mk, cfg.train.weights.mask * inv));
            }

            if (rep.flow_active && f > 0) {
                RenderOutput xy = render(data[size_t(ds)].cams[0], posed, RenderMode::xy);
                bool empty = false;
                Tensor fl = dynaflow_loss(xy, matches(ds, f - 1), &empty);
                if (!empty) {
                    rep.flow += fl.item();
                    ++flow_terms;
                    terms.push_back(scale(fl, cfg.train.weights.flow / float(BF)));
                }
            }
        }

        check(photometric > 0, "train_step: empty batch");
        Tensor total_loss;
        for (auto& t : terms) total_loss = total_loss.defined() ? add(total_loss, t) : t;
        total_loss.backward();
        opt.step();

        rep.l1 /= float(photometric);
        rep.ssim /= float(photometric);
        rep.mask /= float(photometric);
        rep.laplacian /= float(BF);
        if (flow_terms > 0) rep.flow /= float(flow_terms);
        rep.flow_empty = rep.flow_active && flow_terms == 0;
        return rep;
    }

    float eval_psnr(int ds, int f, int v, bool dynamic) {
        GaussianSet posed = forward_posed(ds, f, dynamic, FwdCtx{});
        RenderOutput out = render(data[size_t(ds)].cams[size_t(v)], posed, RenderMode::rgb);
        return psnr_masked(out.rgb, out.alpha, target(ds, f, v), mask(ds, f, v));
    }

    std::vector<Tensor> trainables(bool dynamic) const {
        Params all;
        model.collect(all);
        std::vector<Tensor> out;
        if (dynamic) {
            for (auto& [name, t] : model.dynamic_trainables().items)
                if (t.requires_grad()) out.push_back(t);
        } else {
            for (auto& [name, t] : all.items)
                if (t.requires_grad() && name.rfind("dynamic.", 0) != 0 &&
                    name.rfind("motion.", 0) != 0)
                    out.push_back(t);
        }
        return out;
    }

    std::vector<MetricsRow> run(bool dynamic, std::vector<LossReport>* trace = nullptr) {
        const long total = dynamic ? cfg.train.iterations : cfg.train.static_iterations;
        AdamW opt(trainables(dynamic));
        opt.lr = cfg.train.lr;
        opt.clip = cfg.train.clip;
        if (dynamic) opt.weight_decay = cfg.train.weight_decay;

        std::vector<MetricsRow> rows;
        const int eval_frame = data[0].frames / 2;
        for (long it = 0; it < total; ++it) {
            LossReport rep = train_step(opt, it, total, dynamic);
            if (trace) trace->push_back(rep);
            if (it % cfg.train.log_every == 0 || it == total - 1) {
                MetricsRow r;
                r.iteration = it;
                r.l1 = rep.l1;
                r.ssim = rep.ssim;
                r.mask = rep.mask;
                r.laplacian = rep.laplacian;
                r.flow = rep.flow_active ? rep.flow : 0.f;
                r.total = rep.total();
                r.psnr = eval_psnr(0, eval_frame, heldout_view(), dynamic);
                rows.push_back(r);
            }
        }
        return rows;
    }

    Params checkpoint_params() const {
        Params p;
        model.collect(p);
        return p;
    }
};

}  // namespace dyav
