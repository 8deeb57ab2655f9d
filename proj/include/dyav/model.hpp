#pragma once

#include <dyav/image.hpp>
#include <dyav/motion.hpp>
#include <dyav/nn.hpp>
#include <dyav/splatter.hpp>

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

namespace dyav {

struct ModelConfig {
    int d_model = 256;
    int heads = 4;
    int static_layers = 4;
    int dynamic_layers = 4;
    int num_points = 512;     // template points = point tokens
    int body_res = 128;
    int head_res = 64;
    int patch = 16;
    int joints = 22;
    int lora_rank = 32;
    float lora_alpha = 64.f;
    float lora_dropout = 0.1f;
    bool learned_point_embed = true;

    int decoder_width() const { return 3 + 3 + 6 + 1 + 3 + joints; }

    uint64_t hash() const {
        std::string s = std::to_string(d_model) + "," + std::to_string(heads) + "," +
                        std::to_string(static_layers) + "," + std::to_string(dynamic_layers) + "," +
                        std::to_string(num_points) + "," + std::to_string(body_res) + "," +
                        std::to_string(head_res) + "," + std::to_string(patch) + "," +
                        std::to_string(joints) + "," + std::to_string(lora_rank) + "," +
                        std::to_string(lora_alpha) + "," + std::to_string(lora_dropout) + "," +
                        std::to_string(int(learned_point_embed));
        return fnv1a(s.data(), s.size());
    }
};

struct ImageTokens {
    Tensor body;  // [Nb, d_model]
    Tensor head;  // [Nh, d_model]
    Tensor f_i;   // [1, d_model] = mean of body tokens
};

// Deterministic stand-in for a frozen vision backbone: non-overlapping
// patchify, linear embed, learned 2D positional embedding.
struct PatchEncoder {
    int res = 0, patch = 0;
    Linear embed;
    Tensor pos;  // [num_patches, d_model]

    static PatchEncoder create(int res, int patch, int d_model, Rng& rng) {
        check(res % patch == 0, "patch encoder: resolution not divisible by patch size");
        PatchEncoder e;
        e.res = res;
        e.patch = patch;
        int n = (res / patch) * (res / patch);
        e.embed = Linear::create(patch * patch * 3, d_model, rng);
        e.pos = Tensor::randn({n, d_model}, rng, 0.02f, true);
        return e;
    }

    int tokens() const { return pos.dim(0); }

    Tensor forward(const Image& img, const FwdCtx& ctx = {}) const {
        check(img.h == res && img.w == res && img.channels == 3,
              "patch encoder: expected " + std::to_string(res) + "x" + std::to_string(res) +
                  "x3, got " + std::to_string(img.h) + "x" + std::to_string(img.w) + "x" +
                  std::to_string(img.channels));
        const int g = res / patch, pd = patch * patch * 3;
        Tensor flat = Tensor::make({g * g, pd});
        for (int py = 0; py < g; ++py)
            for (int px = 0; px < g; ++px) {
                float* dst = flat.data() + size_t(py * g + px) * pd;
                for (int y = 0; y < patch; ++y)
                    for (int x = 0; x < patch; ++x)
                        for (int c = 0; c < 3; ++c)
                            *dst++ = img.at(py * patch + y, px * patch + x, c);
            }
        return add(embed.forward(flat, ctx), pos);
    }

    void collect(const std::string& prefix, Params& p) const {
        embed.collect(prefix + ".embed", p);
        p.add(prefix + ".pos", pos);
    }

    void freeze() {
        embed.freeze_base();
        set_trainable(pos, false);
    }
};

struct AvatarModel {
    ModelConfig cfg;
    PatchEncoder body_enc, head_enc;
    Linear point_proj;        // posenc(template) -> d_model
    Tensor point_embed;       // [Np, d_model] learned bias (optional)
    std::vector<MmBlock> static_body, static_head;
    std::vector<MmBlock> dynamic_blocks;
    MotionEncoder motion_enc;
    Linear decoder;           // d_model -> decoder_width()

    static constexpr int kPointPosencL = 6;

    static AvatarModel create(const ModelConfig& cfg, Rng& rng) {
        AvatarModel m;
        m.cfg = cfg;
        m.body_enc = PatchEncoder::create(cfg.body_res, cfg.patch, cfg.d_model, rng);
        m.head_enc = PatchEncoder::create(cfg.head_res, cfg.patch, cfg.d_model, rng);
        m.point_proj = Linear::create(3 * 2 * kPointPosencL, cfg.d_model, rng);
        m.point_embed = Tensor::randn({cfg.num_points, cfg.d_model}, rng, 0.02f, true);
        for (int i = 0; i < cfg.static_layers; ++i) {
            m.static_body.push_back(MmBlock::create(cfg.d_model, cfg.heads, rng));
            m.static_head.push_back(MmBlock::create(cfg.d_model, cfg.heads, rng));
        }
        for (int i = 0; i < cfg.dynamic_layers; ++i)
            m.dynamic_blocks.push_back(MmBlock::create(cfg.d_model, cfg.heads, rng));
        m.motion_enc = MotionEncoder::create(cfg.d_model, cfg.joints, rng);
        m.decoder = Linear::create(cfg.d_model, cfg.decoder_width(), rng);
        return m;
    }

    ImageTokens encode_image(const Image& person_crop, const Image& head_crop,
                             const FwdCtx& ctx = {}) const {
        ImageTokens t;
        t.body = body_enc.forward(person_crop, ctx);
        t.head = head_enc.forward(head_crop, ctx);
        t.f_i = mean_rows(t.body);
        return t;
    }

    // query tokens from the template point cloud
    Tensor point_tokens(const std::vector<TemplatePoint>& tpl, const FwdCtx& ctx = {}) const {
        check(int(tpl.size()) == cfg.num_points,
              "point_tokens: template size != configured point count");
        const int enc = 3 * 2 * kPointPosencL;
        Tensor in = Tensor::make({cfg.num_points, enc});
        for (int i = 0; i < cfg.num_points; ++i) {
            float xyz[3] = {tpl[size_t(i)].pos.x(), tpl[size_t(i)].pos.y(), tpl[size_t(i)].pos.z()};
            auto pe = positional_encode(xyz, 3, kPointPosencL);
            std::copy(pe.begin(), pe.end(), in.data() + size_t(i) * enc);
        }
        Tensor tok = point_proj.forward(in, ctx);
        if (cfg.learned_point_embed) tok = add(tok, point_embed);
        return tok;
    }

    Tensor static_forward(const ImageTokens& img, Tensor pts, const FwdCtx& ctx = {}) const {
        Tensor body = img.body, head = img.head;
        for (size_t l = 0; l < static_body.size(); ++l) {
            auto [p1, b1] = static_body[l].forward(pts, body, img.f_i, ctx);
            pts = p1;
            body = b1;
            auto [p2, h1] = static_head[l].forward(pts, head, img.f_i, ctx);
            pts = p2;
            head = h1;
        }
        return pts;
    }

    Tensor dynamic_forward(Tensor pts, const MotionTokens& motion, const FwdCtx& ctx = {}) const {
        check(motion.tokens.rows() == kMotionSteps, "dynamic_forward: bad motion token count");
        Tensor kv = motion.tokens;
        for (const auto& blk : dynamic_blocks) {
            auto [p1, k1] = blk.forward(pts, kv, motion.f_m, ctx);
            pts = p1;
            kv = k1;
        }
        return pts;
    }

    // single linear head; rotation is predicted as a residual from the
    // identity 6D frame so a zero map yields identity quaternions
    GaussianSet decode_gaussians(const Tensor& pts, const std::vector<TemplatePoint>& tpl,
                                 const FwdCtx& ctx = {}) const {
        check(pts.rows() == int(tpl.size()), "decode_gaussians: one token per template point");
        const int n = pts.rows(), K = cfg.joints;
        Tensor out = decoder.forward(pts, ctx);
        check(out.cols() == cfg.decoder_width(), "decode_gaussians: bad decoder width");

        std::vector<float> tpos(size_t(n) * 3);
        for (int i = 0; i < n; ++i)
            for (int c = 0; c < 3; ++c) tpos[size_t(i) * 3 + c] = tpl[size_t(i)].pos[c];
        Tensor tmpl = Tensor::from({n, 3}, std::move(tpos));

        std::vector<float> id6(size_t(n) * 6, 0.f);
        for (int i = 0; i < n; ++i) {
            id6[size_t(i) * 6 + 0] = 1.f;
            id6[size_t(i) * 6 + 4] = 1.f;
        }
        // biased so a fresh decoder yields small, mostly-opaque blobs on the
        // template instead of meter-scale fog that training can only erase
        GaussianSet gs;
        gs.mean = add(scale(slice_cols(out, 0, 3), 0.1f), tmpl);
        gs.log_scale = clamp_(add_const(slice_cols(out, 3, 3), std::log(0.05f)), -8.f, 2.f);
        gs.quat = rot6d_to_quat(add(slice_cols(out, 6, 6), Tensor::from({n, 6}, std::move(id6))));
        gs.opacity_logit = add_const(slice_cols(out, 12, 1), 2.f);
        gs.color = sigmoid_(slice_cols(out, 13, 3));
        gs.skin_offset = slice_cols(out, 16, K);
        return gs;
    }

    // Adapters on every linear layer of the Static Transformer.
    void add_lora(Rng& rng) {
        for (auto* blocks : {&static_body, &static_head})
            for (auto& blk : *blocks)
                blk.each_linear([&](Linear& l) {
                    l.add_lora(cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout, rng);
                });
    }

    void merge_lora() {
        for (auto* blocks : {&static_body, &static_head})
            for (auto& blk : *blocks)
                blk.each_linear([&](Linear& l) {
                    if (l.lora.active()) l.merge_lora();
                });
    }

    // Freezes everything pretrained in stage 1: image encoders, point
    // tokenizer, and the Static Transformer base weights.
    void freeze_static_base() {
        body_enc.freeze();
        head_enc.freeze();
        point_proj.freeze_base();
        set_trainable(point_embed, false);
        for (auto* blocks : {&static_body, &static_head})
            for (auto& blk : *blocks)
                blk.each_linear([](Linear& l) { l.freeze_base(); });
    }

    void collect(Params& p) const {
        body_enc.collect("body_enc", p);
        head_enc.collect("head_enc", p);
        point_proj.collect("point_proj", p);
        p.add("point_embed", point_embed);
        for (size_t l = 0; l < static_body.size(); ++l) {
            static_body[l].collect("static.body." + std::to_string(l), p);
            static_head[l].collect("static.head." + std::to_string(l), p);
        }
        for (size_t l = 0; l < dynamic_blocks.size(); ++l)
            dynamic_blocks[l].collect("dynamic." + std::to_string(l), p);
        motion_enc.collect("motion", p);
        decoder.collect("decoder", p);
    }

    // Parameters trained in stage 2: adapters, dynamic transformer, motion
    // encoder, and the Gaussian decoder.
    Params dynamic_trainables() const {
        Params all;
        collect(all);
        Params out;
        for (const auto& [name, t] : all.items) {
            bool keep = name.rfind("lora.", 0) == 0 || name.rfind("dynamic.", 0) == 0 ||
                        name.rfind("motion.", 0) == 0 || name.rfind("decoder.", 0) == 0;
            if (keep) out.items.emplace_back(name, t);
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// checkpoint container

namespace detail {

inline void write_u32(std::ostream& f, uint32_t v) {
    f.write(reinterpret_cast<const char*>(&v), 4);
}
inline uint32_t read_u32(std::istream& f) {
    uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Params& params,
                            uint64_t config_hash) {
    std::ofstream f(path, std::ios::binary);
    check(bool(f), "checkpoint: cannot open " + path + " for writing");
    f.write("DYAV", 4);
    detail::write_u32(f, 1);  // version
    detail::write_u32(f, uint32_t(params.items.size() + 1));

    auto write_entry = [&](const std::string& name, const Shape& shape, const float* data,
                           size_t n) {
        uint16_t len = uint16_t(name.size());
        f.write(reinterpret_cast<const char*>(&len), 2);
        f.write(name.data(), len);
        uint8_t dtype = 0, rank = uint8_t(shape.size());
        f.write(reinterpret_cast<const char*>(&dtype), 1);
        f.write(reinterpret_cast<const char*>(&rank), 1);
        for (int d : shape) detail::write_u32(f, uint32_t(d));
        f.write(reinterpret_cast<const char*>(data), std::streamsize(n * sizeof(float)));
    };

    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(config_hash));
    write_entry(std::string("meta.config_hash.") + hex, Shape{}, nullptr, 0);
    for (const auto& [name, t] : params.items)
        write_entry(name, t.shape(), t.data(), t.numel());
    check(bool(f), "checkpoint: write failed for " + path);
}

// Loads by name into the already-constructed parameter set; shapes must
// match and the stored config hash must equal `config_hash`.
inline void load_checkpoint(const std::string& path, Params& params, uint64_t config_hash) {
    std::ifstream f(path, std::ios::binary);
    check(bool(f), "checkpoint: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    check(bool(f) && std::memcmp(magic, "DYAV", 4) == 0, "checkpoint: bad magic in " + path);
    uint32_t version = detail::read_u32(f);
    check(version == 1, "checkpoint: unsupported version " + std::to_string(version));
    uint32_t count = detail::read_u32(f);

    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(config_hash));
    const std::string want_meta = std::string("meta.config_hash.") + hex;

    std::vector<std::string> loaded;
    bool meta_ok = false;
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t len = 0;
        f.read(reinterpret_cast<char*>(&len), 2);
        std::string name(len, '\0');
        f.read(name.data(), len);
        uint8_t dtype = 0, rank = 0;
        f.read(reinterpret_cast<char*>(&dtype), 1);
        f.read(reinterpret_cast<char*>(&rank), 1);
        check(bool(f) && dtype == 0, "checkpoint: bad tensor header in " + path);
        Shape shape(rank);
        size_t n = 1;
        for (auto& d : shape) {
            d = int(detail::read_u32(f));
            n *= size_t(d);
        }
        if (rank == 0) n = 0;
        if (name.rfind("meta.config_hash.", 0) == 0) {
            check(name == want_meta, "checkpoint: config hash mismatch (got " + name +
                                         ", expected " + want_meta + ")");
            meta_ok = true;
            continue;
        }
        Tensor t = params.find(name);
        check(t.shape() == shape, "checkpoint: shape mismatch for " + name);
        f.read(reinterpret_cast<char*>(t.data()), std::streamsize(n * sizeof(float)));
        check(bool(f), "checkpoint: truncated payload for " + name);
        loaded.push_back(name);
    }
    check(meta_ok, "checkpoint: missing config hash in " + path);
    check(loaded.size() == params.items.size(),
          "checkpoint: expected " + std::to_string(params.items.size()) + " tensors, loaded " +
              std::to_string(loaded.size()));
}

}  // namespace dyav
