#include "ofa/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace ofa {

ModelConfig ModelConfig::preset(const std::string& name) {
    ModelConfig c;
    c.preset_name = name;
    if (name == "nano") {
        c.hidden = 64;
        c.intermediate = 256;
        c.heads = 4;
        c.enc_layers = 2;
        c.dec_layers = 2;
        c.image_px = 64;
    } else if (name == "tiny") {
        c.hidden = 256;
        c.intermediate = 1024;
        c.heads = 4;
        c.enc_layers = 4;
        c.dec_layers = 4;
        c.image_px = 256;
    } else if (name == "medium") {
        c.hidden = 512;
        c.intermediate = 2048;
        c.heads = 8;
        c.enc_layers = 4;
        c.dec_layers = 4;
        c.image_px = 256;
    } else if (name == "base") {
        c.hidden = 768;
        c.intermediate = 3072;
        c.heads = 12;
        c.enc_layers = 6;
        c.dec_layers = 6;
        c.image_px = 384;
    } else if (name == "large") {
        c.hidden = 1024;
        c.intermediate = 4096;
        c.heads = 16;
        c.enc_layers = 12;
        c.dec_layers = 12;
        c.image_px = 480;
    } else if (name == "huge") {
        c.hidden = 1280;
        c.intermediate = 5120;
        c.heads = 16;
        c.enc_layers = 24;
        c.dec_layers = 12;
        c.image_px = 480;
    } else {
        throw UsageError("unknown model preset '" + name + "'");
    }
    return c;
}

void ModelConfig::validate() const {
    if (hidden % heads != 0) throw UsageError("model config: hidden must be divisible by heads");
    if (hidden % 4 != 0) throw UsageError("model config: hidden must be divisible by 4 (stem widths)");
    if (image_px % patch_px != 0) throw UsageError("model config: image_px must be divisible by patch_px");
    if (patch_px != 16) throw UsageError("model config: patch_px must be 16");
    if (vocab_size <= 0) throw UsageError("model config: vocab_size not set");
    if (max_text_len < 2) throw UsageError("model config: max_text_len too small");
}

int rel_bucket(int relative_position, int num_buckets, int max_distance, bool bidirectional) {
    int bucket = 0;
    int n = num_buckets;
    if (bidirectional) {
        n /= 2;
        if (relative_position > 0) bucket += n;
        relative_position = std::abs(relative_position);
    } else {
        relative_position = -std::min(relative_position, 0);
    }
    const int max_exact = n / 2;
    if (relative_position < max_exact) return bucket + relative_position;
    const double v = max_exact + std::log(static_cast<double>(relative_position) / max_exact) /
                                     std::log(static_cast<double>(max_distance) / max_exact) *
                                     (n - max_exact);
    return bucket + std::min(static_cast<int>(v), n - 1);
}

double rel_bias_1d(int i, int j, int head, const Tensor& table, int max_distance, bool bidirectional) {
    const int buckets = table.dim(0);
    const int heads = table.dim(1);
    // Convention: relative position is j - i (key minus query).
    const int b = rel_bucket(j - i, buckets, max_distance, bidirectional);
    return table.data()[static_cast<size_t>(b) * heads + head];
}

double rel_bias_2d(int r1, int c1, int r2, int c2, int head, const Tensor& row_table,
                   const Tensor& col_table, int max_distance) {
    const int heads = row_table.dim(1);
    const int br = rel_bucket(r2 - r1, row_table.dim(0), max_distance, true);
    const int bc = rel_bucket(c2 - c1, col_table.dim(0), max_distance, true);
    return row_table.data()[static_cast<size_t>(br) * heads + head] +
           col_table.data()[static_cast<size_t>(bc) * heads + head];
}

// ---- construction -----------------------------------------------------------

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build_params(nullptr);
}

Model::Model(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    build_params(&rng);
}

Tensor Model::create(const std::string& path, Shape shape, Rng* rng, double std_dev) {
    Tensor t = (rng && std_dev > 0.0) ? Tensor::randn(shape, *rng, std_dev) : Tensor::zeros(shape);
    t.set_requires_grad(true);
    params_.emplace(path, t);
    return t;
}

void Model::build_params(Rng* rng) {
    const int h = cfg_.hidden;
    const double std_dev = 0.02;
    auto weight = [&](const std::string& p, Shape s) { create(p, std::move(s), rng, std_dev); };
    auto zeros = [&](const std::string& p, Shape s) { create(p, std::move(s), nullptr, 0.0); };
    auto ones = [&](const std::string& p, Shape s) {
        Tensor t = Tensor::full(std::move(s), 1.0);
        t.set_requires_grad(true);
        params_.emplace(p, t);
    };
    auto layer_norm_params = [&](const std::string& p, int width) {
        ones(p + ".g", {width});
        zeros(p + ".b", {width});
    };
    auto attention_params = [&](const std::string& p, bool head_scaled) {
        for (const char* m : {"wq", "wk", "wv", "wo"}) weight(p + "." + m, {h, h});
        for (const char* m : {"bq", "bk", "bv", "bo"}) zeros(p + "." + m, {h});
        if (head_scaled) ones(p + ".hscale", {cfg_.heads});
        layer_norm_params(p + ".ln_post", h);
    };

    weight("embed.token", {cfg_.vocab_size, h});
    weight("embed.pos_text", {cfg_.max_text_len, h});
    weight("embed.pos_image", {cfg_.num_patches(), h});

    // Patch stem: patchify strides 4,2,2 with widths h/4, h/2, h.
    const int widths[4] = {3, h / 4, h / 2, h};
    const int strides[3] = {4, 2, 2};
    int grid = cfg_.image_px;
    for (int s = 0; s < 3; ++s) {
        const std::string p = "stem.s" + std::to_string(s + 1);
        weight(p + ".w", {strides[s] * strides[s] * widths[s], widths[s + 1]});
        zeros(p + ".b", {widths[s + 1]});
        layer_norm_params(p + ".ln", widths[s + 1]);
        // Row-gather index groups mapping the (y,x) feature map to patchified rows.
        const int g_out = grid / strides[s];
        std::vector<std::vector<int>> groups(static_cast<size_t>(g_out) * g_out);
        for (int oy = 0; oy < g_out; ++oy)
            for (int ox = 0; ox < g_out; ++ox) {
                auto& g = groups[static_cast<size_t>(oy) * g_out + ox];
                for (int dy = 0; dy < strides[s]; ++dy)
                    for (int dx = 0; dx < strides[s]; ++dx)
                        g.push_back((oy * strides[s] + dy) * grid + ox * strides[s] + dx);
            }
        stem_groups_.push_back(std::move(groups));
        stem_out_grid_.push_back(g_out);
        grid = g_out;
    }

    for (const char* mod : {"enc", "dec"}) {
        weight(std::string(mod) + ".pos.q", {h, h});
        weight(std::string(mod) + ".pos.k", {h, h});
    }
    for (int l = 0; l < cfg_.enc_layers; ++l) {
        const std::string p = "enc.l" + std::to_string(l);
        layer_norm_params(p + ".ln_attn", h);
        attention_params(p + ".attn", true);
        layer_norm_params(p + ".ln_ffn", h);
        weight(p + ".ffn.w1", {h, cfg_.intermediate});
        zeros(p + ".ffn.b1", {cfg_.intermediate});
        layer_norm_params(p + ".ffn.ln_mid", cfg_.intermediate);
        weight(p + ".ffn.w2", {cfg_.intermediate, h});
        zeros(p + ".ffn.b2", {h});
        zeros(p + ".rel1d", {cfg_.rel_buckets_1d, cfg_.heads});
        zeros(p + ".rel2d_row", {cfg_.rel_buckets_2d, cfg_.heads});
        zeros(p + ".rel2d_col", {cfg_.rel_buckets_2d, cfg_.heads});
    }
    layer_norm_params("enc.ln_final", h);
    for (int l = 0; l < cfg_.dec_layers; ++l) {
        const std::string p = "dec.l" + std::to_string(l);
        layer_norm_params(p + ".ln_self", h);
        attention_params(p + ".self", true);
        layer_norm_params(p + ".ln_cross", h);
        attention_params(p + ".cross", false);
        layer_norm_params(p + ".ln_ffn", h);
        weight(p + ".ffn.w1", {h, cfg_.intermediate});
        zeros(p + ".ffn.b1", {cfg_.intermediate});
        layer_norm_params(p + ".ffn.ln_mid", cfg_.intermediate);
        weight(p + ".ffn.w2", {cfg_.intermediate, h});
        zeros(p + ".ffn.b2", {h});
        zeros(p + ".rel1d", {cfg_.rel_buckets_1d, cfg_.heads});
    }
    layer_norm_params("dec.ln_final", h);
}

Tensor& Model::param(const std::string& path) {
    auto it = params_.find(path);
    if (it == params_.end()) throw UsageError("no parameter at path '" + path + "'");
    return it->second;
}

int64_t Model::num_params() const {
    int64_t n = 0;
    for (const auto& [path, t] : params_) n += t.numel();
    return n;
}

// ---- forward helpers -----------------------------------------------------------

bool Model::keep_layer(const Pass& pass, double* branch_scale) {
    *branch_scale = 1.0;
    if (!pass.training || cfg_.stochastic_depth <= 0.0) return true;
    if (!pass.rng) throw UsageError("training pass requires an rng");
    if (pass.rng->uniform() < cfg_.stochastic_depth) return false;
    *branch_scale = 1.0 / (1.0 - cfg_.stochastic_depth);
    return true;
}

std::vector<Tensor> Model::position_logits(const std::string& module, const Tensor& pos_emb) {
    const int dh = cfg_.hidden / cfg_.heads;
    const double inv_scale = 1.0 / std::sqrt(2.0 * dh);
    const Tensor pq = matmul(pos_emb, param(module + ".pos.q"));
    const Tensor pk = matmul(pos_emb, param(module + ".pos.k"));
    std::vector<Tensor> out;
    out.reserve(static_cast<size_t>(cfg_.heads));
    for (int hd = 0; hd < cfg_.heads; ++hd) {
        const Tensor qh = slice(pq, 1, hd * dh, (hd + 1) * dh);
        const Tensor kh = slice(pk, 1, hd * dh, (hd + 1) * dh);
        out.push_back(scale(matmul(qh, transpose(kh)), inv_scale));
    }
    return out;
}

namespace {
// Per-head [L,L] block-diagonal bias: 2-D table over patch pairs, 1-D over
// text pairs, zeros across modalities.
std::vector<Tensor> block_bias(const Tensor* patch_bias, int p, const Tensor* text_bias, int t,
                               int heads) {
    std::vector<Tensor> out;
    out.reserve(static_cast<size_t>(heads));
    for (int hd = 0; hd < heads; ++hd) {
        Tensor pb, tb;
        if (p > 0) pb = reshape(slice(*patch_bias, 1, hd, hd + 1), {p, p});
        if (t > 0) tb = reshape(slice(*text_bias, 1, hd, hd + 1), {t, t});
        if (p == 0) {
            out.push_back(tb);
            continue;
        }
        if (t == 0) {
            out.push_back(pb);
            continue;
        }
        const Tensor top = concat({pb, Tensor::zeros({p, t})}, 1);
        const Tensor bottom = concat({Tensor::zeros({t, p}), tb}, 1);
        out.push_back(concat({top, bottom}, 0));
    }
    return out;
}
}  // namespace

std::vector<Tensor> Model::encoder_rel_bias(int layer, int num_patches, int text_len) {
    const std::string p = "enc.l" + std::to_string(layer);
    Tensor patch_bias, text_bias;
    if (num_patches > 0) {
        const int g = cfg_.patch_grid();
        std::vector<int> row_ids, col_ids;
        row_ids.reserve(static_cast<size_t>(num_patches) * num_patches);
        col_ids.reserve(row_ids.capacity());
        for (int a = 0; a < num_patches; ++a)
            for (int b = 0; b < num_patches; ++b) {
                row_ids.push_back(rel_bucket(b / g - a / g, cfg_.rel_buckets_2d, cfg_.rel_max_dist_2d, true));
                col_ids.push_back(rel_bucket(b % g - a % g, cfg_.rel_buckets_2d, cfg_.rel_max_dist_2d, true));
            }
        patch_bias = add(embedding_lookup(param(p + ".rel2d_row"), row_ids),
                         embedding_lookup(param(p + ".rel2d_col"), col_ids));
    }
    if (text_len > 0) {
        std::vector<int> ids;
        ids.reserve(static_cast<size_t>(text_len) * text_len);
        for (int i = 0; i < text_len; ++i)
            for (int j = 0; j < text_len; ++j)
                ids.push_back(rel_bucket(j - i, cfg_.rel_buckets_1d, cfg_.rel_max_dist_1d, true));
        text_bias = embedding_lookup(param(p + ".rel1d"), ids);
    }
    return block_bias(num_patches > 0 ? &patch_bias : nullptr, num_patches,
                      text_len > 0 ? &text_bias : nullptr, text_len, cfg_.heads);
}

std::vector<Tensor> Model::decoder_rel_bias(int layer, int len) {
    const std::string p = "dec.l" + std::to_string(layer);
    std::vector<int> ids;
    ids.reserve(static_cast<size_t>(len) * len);
    for (int i = 0; i < len; ++i)
        for (int j = 0; j < len; ++j)
            ids.push_back(rel_bucket(j - i, cfg_.rel_buckets_1d, cfg_.rel_max_dist_1d, false));
    Tensor bias = embedding_lookup(param(p + ".rel1d"), ids);
    std::vector<Tensor> out;
    out.reserve(static_cast<size_t>(cfg_.heads));
    for (int hd = 0; hd < cfg_.heads; ++hd)
        out.push_back(reshape(slice(bias, 1, hd, hd + 1), {len, len}));
    return out;
}

Tensor Model::attention(const Tensor& x_ln, const std::string& prefix, const Tensor* kv_ln,
                        const std::vector<Tensor>* pos_logits, const std::vector<Tensor>* rel_bias,
                        const Tensor* causal, bool head_scaling, double inv_scale) {
    const int dh = cfg_.hidden / cfg_.heads;
    const Tensor& kv = kv_ln ? *kv_ln : x_ln;
    const Tensor q = add(matmul(x_ln, param(prefix + ".wq")), param(prefix + ".bq"));
    const Tensor k = add(matmul(kv, param(prefix + ".wk")), param(prefix + ".bk"));
    const Tensor v = add(matmul(kv, param(prefix + ".wv")), param(prefix + ".bv"));
    Tensor hscale;
    if (head_scaling) hscale = reshape(param(prefix + ".hscale"), {1, cfg_.heads});

    std::vector<Tensor> heads_out;
    heads_out.reserve(static_cast<size_t>(cfg_.heads));
    for (int hd = 0; hd < cfg_.heads; ++hd) {
        const Tensor qh = slice(q, 1, hd * dh, (hd + 1) * dh);
        const Tensor kh = slice(k, 1, hd * dh, (hd + 1) * dh);
        const Tensor vh = slice(v, 1, hd * dh, (hd + 1) * dh);
        Tensor logits = scale(matmul(qh, transpose(kh)), inv_scale);
        if (pos_logits) logits = add(logits, (*pos_logits)[static_cast<size_t>(hd)]);
        if (rel_bias) logits = add(logits, (*rel_bias)[static_cast<size_t>(hd)]);
        if (causal) logits = add(logits, *causal);
        Tensor oh = matmul(softmax(logits), vh);
        if (head_scaling) oh = mul(oh, slice(hscale, 1, hd, hd + 1));
        heads_out.push_back(oh);
    }
    const Tensor o = concat(heads_out, 1);
    return add(matmul(o, param(prefix + ".wo")), param(prefix + ".bo"));
}

Tensor Model::ffn_block(const Tensor& x, const std::string& prefix, const Pass& pass,
                        double branch_scale) {
    Tensor h = layer_norm(x, param(prefix + ".ln_ffn.g"), param(prefix + ".ln_ffn.b"));
    h = gelu(add(matmul(h, param(prefix + ".ffn.w1")), param(prefix + ".ffn.b1")));
    h = layer_norm(h, param(prefix + ".ffn.ln_mid.g"), param(prefix + ".ffn.ln_mid.b"));
    h = add(matmul(h, param(prefix + ".ffn.w2")), param(prefix + ".ffn.b2"));
    if (pass.training && cfg_.dropout > 0.0) h = dropout(h, cfg_.dropout, *pass.rng, true);
    if (branch_scale != 1.0) h = scale(h, branch_scale);
    return add(x, h);
}

Tensor Model::embed_patches(const ImageGrid& img, const Pass& pass) {
    (void)pass;  // the stem is never dropped by stochastic depth
    if (img.width != cfg_.image_px || img.height != cfg_.image_px) {
        throw ShapeError("embed_patches: image " + std::to_string(img.width) + "x" +
                         std::to_string(img.height) + " but config expects " +
                         std::to_string(cfg_.image_px));
    }
    std::vector<double> px(img.pixels.size());
    for (size_t i = 0; i < img.pixels.size(); ++i) px[i] = img.pixels[i] / 127.5 - 1.0;
    Tensor x = Tensor::from({cfg_.image_px * cfg_.image_px, 3}, std::move(px));
    for (int s = 0; s < 3; ++s) {
        const std::string p = "stem.s" + std::to_string(s + 1);
        x = gather_rows(x, stem_groups_[static_cast<size_t>(s)]);
        x = add(matmul(x, param(p + ".w")), param(p + ".b"));
        x = layer_norm(x, param(p + ".ln.g"), param(p + ".ln.b"));
        if (s < 2) x = gelu(x);
    }
    return x;
}

Tensor Model::encode(std::span<const int> source_ids, const ImageGrid* img, const Pass& pass) {
    const int t_len = static_cast<int>(source_ids.size());
    if (t_len > cfg_.max_text_len) {
        throw UsageError("encode: source length " + std::to_string(t_len) + " exceeds max " +
                         std::to_string(cfg_.max_text_len));
    }
    if (t_len == 0 && !img) throw UsageError("encode: empty input");

    std::vector<Tensor> parts;
    std::vector<Tensor> pos_parts;
    int p_len = 0;
    if (img) {
        parts.push_back(embed_patches(*img, pass));
        p_len = cfg_.num_patches();
        std::vector<int> ids(static_cast<size_t>(p_len));
        for (int i = 0; i < p_len; ++i) ids[static_cast<size_t>(i)] = i;
        pos_parts.push_back(embedding_lookup(param("embed.pos_image"), ids));
    }
    if (t_len > 0) {
        parts.push_back(embedding_lookup(param("embed.token"), source_ids));
        std::vector<int> ids(static_cast<size_t>(t_len));
        for (int i = 0; i < t_len; ++i) ids[static_cast<size_t>(i)] = i;
        pos_parts.push_back(embedding_lookup(param("embed.pos_text"), ids));
    }
    Tensor x = parts.size() == 1 ? parts[0] : concat(parts, 0);
    const Tensor pos_emb = pos_parts.size() == 1 ? pos_parts[0] : concat(pos_parts, 0);
    const std::vector<Tensor> pos = position_logits("enc", pos_emb);
    const double inv_scale = 1.0 / std::sqrt(2.0 * (cfg_.hidden / cfg_.heads));

    for (int l = 0; l < cfg_.enc_layers; ++l) {
        const std::string p = "enc.l" + std::to_string(l);
        double branch_scale = 1.0;
        if (!keep_layer(pass, &branch_scale)) continue;
        const std::vector<Tensor> rel = encoder_rel_bias(l, p_len, t_len);
        Tensor h = layer_norm(x, param(p + ".ln_attn.g"), param(p + ".ln_attn.b"));
        h = attention(h, p + ".attn", nullptr, &pos, &rel, nullptr, true, inv_scale);
        h = layer_norm(h, param(p + ".attn.ln_post.g"), param(p + ".attn.ln_post.b"));
        if (pass.training && cfg_.dropout > 0.0) h = dropout(h, cfg_.dropout, *pass.rng, true);
        if (branch_scale != 1.0) h = scale(h, branch_scale);
        x = add(x, h);
        x = ffn_block(x, p, pass, branch_scale);
    }
    return layer_norm(x, param("enc.ln_final.g"), param("enc.ln_final.b"));
}

Tensor Model::decode(const Tensor& enc_states, std::span<const int> prefix_ids, const Pass& pass) {
    const int len = static_cast<int>(prefix_ids.size());
    if (len == 0) throw UsageError("decode: empty prefix");
    if (prefix_ids[0] != 0) throw UsageError("decode: prefix must start with BOS");
    if (len > cfg_.max_text_len) {
        throw UsageError("decode: prefix length " + std::to_string(len) + " exceeds max " +
                         std::to_string(cfg_.max_text_len));
    }

    Tensor x = embedding_lookup(param("embed.token"), prefix_ids);
    std::vector<int> pos_ids(static_cast<size_t>(len));
    for (int i = 0; i < len; ++i) pos_ids[static_cast<size_t>(i)] = i;
    const Tensor pos_emb = embedding_lookup(param("embed.pos_text"), pos_ids);
    const std::vector<Tensor> pos = position_logits("dec", pos_emb);

    std::vector<double> causal_mask(static_cast<size_t>(len) * len, 0.0);
    for (int i = 0; i < len; ++i)
        for (int j = i + 1; j < len; ++j) causal_mask[static_cast<size_t>(i) * len + j] = -1e9;
    const Tensor causal = Tensor::from({len, len}, std::move(causal_mask));

    const int dh = cfg_.hidden / cfg_.heads;
    const double self_scale = 1.0 / std::sqrt(2.0 * dh);
    const double cross_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    for (int l = 0; l < cfg_.dec_layers; ++l) {
        const std::string p = "dec.l" + std::to_string(l);
        double branch_scale = 1.0;
        if (!keep_layer(pass, &branch_scale)) continue;
        const std::vector<Tensor> rel = decoder_rel_bias(l, len);
        Tensor h = layer_norm(x, param(p + ".ln_self.g"), param(p + ".ln_self.b"));
        h = attention(h, p + ".self", nullptr, &pos, &rel, &causal, true, self_scale);
        h = layer_norm(h, param(p + ".self.ln_post.g"), param(p + ".self.ln_post.b"));
        if (pass.training && cfg_.dropout > 0.0) h = dropout(h, cfg_.dropout, *pass.rng, true);
        if (branch_scale != 1.0) h = scale(h, branch_scale);
        x = add(x, h);

        h = layer_norm(x, param(p + ".ln_cross.g"), param(p + ".ln_cross.b"));
        h = attention(h, p + ".cross", &enc_states, nullptr, nullptr, nullptr, false, cross_scale);
        h = layer_norm(h, param(p + ".cross.ln_post.g"), param(p + ".cross.ln_post.b"));
        if (pass.training && cfg_.dropout > 0.0) h = dropout(h, cfg_.dropout, *pass.rng, true);
        if (branch_scale != 1.0) h = scale(h, branch_scale);
        x = add(x, h);

        x = ffn_block(x, p, pass, branch_scale);
    }
    x = layer_norm(x, param("dec.ln_final.g"), param("dec.ln_final.b"));
    // Weight tying: the output projection IS the token embedding.
    return matmul(x, transpose(param("embed.token")));
}

// ---- persistence -----------------------------------------------------------------

void Model::save(const std::string& prefix) const {
    std::ofstream mf(prefix + ".manifest", std::ios::binary);
    if (!mf) throw DataError("cannot write " + prefix + ".manifest");
    mf << "#ofa-ckpt v1\n";
    mf << "preset " << cfg_.preset_name << "\n";
    mf << "hidden " << cfg_.hidden << "\n";
    mf << "intermediate " << cfg_.intermediate << "\n";
    mf << "heads " << cfg_.heads << "\n";
    mf << "enc_layers " << cfg_.enc_layers << "\n";
    mf << "dec_layers " << cfg_.dec_layers << "\n";
    mf << "patch_px " << cfg_.patch_px << "\n";
    mf << "image_px " << cfg_.image_px << "\n";
    mf << "num_loc_bins " << cfg_.num_loc_bins << "\n";
    mf << "codebook_size " << cfg_.codebook_size << "\n";
    mf << "rel_buckets_1d " << cfg_.rel_buckets_1d << "\n";
    mf << "rel_max_dist_1d " << cfg_.rel_max_dist_1d << "\n";
    mf << "rel_buckets_2d " << cfg_.rel_buckets_2d << "\n";
    mf << "rel_max_dist_2d " << cfg_.rel_max_dist_2d << "\n";
    mf << "max_text_len " << cfg_.max_text_len << "\n";
    mf << "vocab_size " << cfg_.vocab_size << "\n";
    mf << "params " << params_.size() << "\n";

    std::ofstream bf(prefix + ".blob", std::ios::binary);
    if (!bf) throw DataError("cannot write " + prefix + ".blob");
    int64_t offset = 0;
    for (const auto& [path, t] : params_) {
        mf << path << " " << t.ndim();
        for (int d : t.shape()) mf << " " << d;
        mf << " " << offset << "\n";
        std::vector<float> buf(t.data().size());
        for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(t.data()[i]);
        bf.write(reinterpret_cast<const char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(float)));
        offset += static_cast<int64_t>(buf.size() * sizeof(float));
    }
    if (!mf || !bf) throw DataError("checkpoint write failed at " + prefix);
}

Model Model::load(const std::string& prefix) {
    std::ifstream mf(prefix + ".manifest");
    if (!mf) throw DataError("cannot read " + prefix + ".manifest");
    std::string line;
    std::getline(mf, line);
    if (line != "#ofa-ckpt v1") throw DataError("bad checkpoint header in " + prefix);

    ModelConfig cfg;
    size_t n_params = 0;
    while (std::getline(mf, line)) {
        std::istringstream is(line);
        std::string key;
        is >> key;
        if (key == "preset") is >> cfg.preset_name;
        else if (key == "hidden") is >> cfg.hidden;
        else if (key == "intermediate") is >> cfg.intermediate;
        else if (key == "heads") is >> cfg.heads;
        else if (key == "enc_layers") is >> cfg.enc_layers;
        else if (key == "dec_layers") is >> cfg.dec_layers;
        else if (key == "patch_px") is >> cfg.patch_px;
        else if (key == "image_px") is >> cfg.image_px;
        else if (key == "num_loc_bins") is >> cfg.num_loc_bins;
        else if (key == "codebook_size") is >> cfg.codebook_size;
        else if (key == "rel_buckets_1d") is >> cfg.rel_buckets_1d;
        else if (key == "rel_max_dist_1d") is >> cfg.rel_max_dist_1d;
        else if (key == "rel_buckets_2d") is >> cfg.rel_buckets_2d;
        else if (key == "rel_max_dist_2d") is >> cfg.rel_max_dist_2d;
        else if (key == "max_text_len") is >> cfg.max_text_len;
        else if (key == "vocab_size") is >> cfg.vocab_size;
        else if (key == "params") {
            is >> n_params;
            break;
        }
    }

    Model m(cfg);
    std::ifstream bf(prefix + ".blob", std::ios::binary);
    if (!bf) throw DataError("cannot read " + prefix + ".blob");
    for (size_t i = 0; i < n_params; ++i) {
        if (!std::getline(mf, line)) throw DataError("truncated manifest " + prefix);
        std::istringstream is(line);
        std::string path;
        int ndim = 0;
        is >> path >> ndim;
        Shape shape(static_cast<size_t>(ndim));
        for (int d = 0; d < ndim; ++d) is >> shape[static_cast<size_t>(d)];
        int64_t offset = 0;
        is >> offset;
        Tensor& t = m.param(path);
        if (t.shape() != shape) {
            throw DataError("checkpoint " + prefix + ": shape of " + path + " is " +
                            shape_str(shape) + ", model expects " + shape_str(t.shape()));
        }
        bf.seekg(offset);
        std::vector<float> buf(t.data().size());
        bf.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!bf) throw DataError("truncated blob " + prefix);
        for (size_t j = 0; j < buf.size(); ++j) t.data()[j] = static_cast<double>(buf[j]);
    }
    return m;
}

}  // namespace ofa
