#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "ofa/coord.hpp"
#include "ofa/tensor.hpp"

namespace ofa {

struct ModelConfig {
    int hidden = 64;
    int intermediate = 256;
    int heads = 4;
    int enc_layers = 2;
    int dec_layers = 2;
    int patch_px = 16;
    int image_px = 64;
    int num_loc_bins = 1000;
    int codebook_size = 128;
    double dropout = 0.1;
    double stochastic_depth = 0.1;
    int rel_buckets_1d = 32;
    int rel_max_dist_1d = 128;
    int rel_buckets_2d = 16;
    int rel_max_dist_2d = 32;
    int max_text_len = 256;
    int vocab_size = 0;
    std::string preset_name = "nano";

    // nano / tiny / medium / base / large / huge.
    static ModelConfig preset(const std::string& name);
    int patch_grid() const { return image_px / patch_px; }
    int num_patches() const { return patch_grid() * patch_grid(); }
    void validate() const;
};

// T5-style relative position bucket. Bidirectional splits the buckets by
// sign (encoder); unidirectional folds the future onto bucket 0 (decoder).
int rel_bucket(int relative_position, int num_buckets, int max_distance, bool bidirectional);

// Bias table reads for one (query, key) pair; table is [buckets, heads].
// 1D bias depends only on i - j; 2D bias is row-bias + col-bias.
double rel_bias_1d(int i, int j, int head, const Tensor& table, int max_distance, bool bidirectional);
double rel_bias_2d(int r1, int c1, int r2, int c2, int head, const Tensor& row_table,
                   const Tensor& col_table, int max_distance);

// Encoder-decoder transformer over the unified vocabulary with:
//  - a 3-stage convolutional patch stem (stride 16) for image inputs,
//  - per-head output scaling, post-attention LN and mid-FFN LN,
//  - absolute positions decoupled from content: position embeddings enter
//    self-attention through separate Q/K projections as additive logits
//    (shared across layers within encoder and decoder; both the content and
//    position terms are scaled by 1/sqrt(2*head_dim)),
//  - per-layer per-head relative bias: 1D bucketed for text pairs, additive
//    row+col 2D for patch pairs, zero across modalities and in cross-attention,
//  - the output projection tied to the token embedding.
class Model {
public:
    struct Pass {
        bool training = false;
        Rng* rng = nullptr;  // required when training and dropout/stochastic depth > 0
    };

    Model(ModelConfig cfg, uint64_t seed);

    // [P, hidden] patch features; image side must equal cfg.image_px.
    Tensor embed_patches(const ImageGrid& img, const Pass& pass);
    // Input sequence is [patch features | text embeddings]; text length
    // (including BOS/EOS framing) must be <= max_text_len.
    Tensor encode(std::span<const int> source_ids, const ImageGrid* img, const Pass& pass);
    // Per-position next-token logits [len(prefix), vocab]; prefix starts with BOS.
    Tensor decode(const Tensor& enc_states, std::span<const int> prefix_ids, const Pass& pass);

    const ModelConfig& config() const { return cfg_; }
    // Runtime-adjustable knobs (dropout, stochastic depth); structure is fixed.
    ModelConfig& mutable_config() { return cfg_; }
    std::map<std::string, Tensor>& params() { return params_; }
    const std::map<std::string, Tensor>& params() const { return params_; }
    Tensor& param(const std::string& path);

    int64_t num_params() const;

    // Manifest + little-endian float32 blob; save/load roundtrip is bit-exact.
    void save(const std::string& prefix) const;
    static Model load(const std::string& prefix);

private:
    explicit Model(ModelConfig cfg);  // zero-initialized skeleton
    void build_params(Rng* rng);
    Tensor create(const std::string& path, Shape shape, Rng* rng, double std_dev);
    Tensor attention(const Tensor& x_ln, const std::string& prefix, const Tensor* kv_ln,
                     const std::vector<Tensor>* pos_logits, const std::vector<Tensor>* rel_bias,
                     const Tensor* causal, bool head_scaling, double inv_scale);
    Tensor ffn_block(const Tensor& x, const std::string& prefix, const Pass& pass, double branch_scale);
    std::vector<Tensor> position_logits(const std::string& module, const Tensor& pos_emb);
    std::vector<Tensor> encoder_rel_bias(int layer, int num_patches, int text_len);
    std::vector<Tensor> decoder_rel_bias(int layer, int len);
    bool keep_layer(const Pass& pass, double* branch_scale);

    ModelConfig cfg_;
    std::map<std::string, Tensor> params_;
    // Row-gather groups for the three stem stages, fixed by the config.
    std::vector<std::vector<std::vector<int>>> stem_groups_;
    std::vector<int> stem_out_grid_;
};

}  // namespace ofa
