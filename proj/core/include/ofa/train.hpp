#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "ofa/model.hpp"
#include "ofa/tasks.hpp"
#include "ofa/tensor.hpp"

namespace ofa {

struct TrainConfig {
    double peak_lr = 2e-4;
    double warmup_ratio = 0.01;
    int total_steps = 1000;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    double dropout = 0.1;
    double stochastic_depth = 0.1;
    double label_smoothing = 0.1;
    bool use_ema = false;
    double ema_decay = 0.9999;
    int batch_size = 8;
    uint64_t seed = 0;
    double clip_norm = 1.0;
    int ckpt_every = 0;  // 0 = final checkpoint only
    bool trie_train = true;
    // vl : det : img : txt group ratio; 0 excludes a group from mixing.
    std::array<int64_t, kNumGroups> mix_ratios{2048, 256, 256, 512};

    void validate() const;
};

// Linear warmup to peak_lr over round(warmup_ratio * total_steps) steps, then
// linear decay to zero at total_steps.
double lr_at(int step, const TrainConfig& cfg);

// Decoupled weight decay; bias-corrected moments; missing grads act as zeros.
class AdamW {
public:
    explicit AdamW(const TrainConfig& cfg)
        : beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.adam_eps), decay_(cfg.weight_decay) {}
    AdamW(double beta1, double beta2, double eps, double decay)
        : beta1_(beta1), beta2_(beta2), eps_(eps), decay_(decay) {}

    void step(std::map<std::string, Tensor>& params, double lr);
    int64_t steps_taken() const { return t_; }

private:
    double beta1_, beta2_, eps_, decay_;
    int64_t t_ = 0;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

double global_grad_norm(const std::map<std::string, Tensor>& params);
// Scales all grads so the global norm is at most max_norm; returns the pre-clip norm.
double clip_gradients(std::map<std::string, Tensor>& params, double max_norm);

struct EmaState {
    std::map<std::string, std::vector<double>> shadow;
    void init(const std::map<std::string, Tensor>& params);
    bool initialized() const { return !shadow.empty(); }
};

// shadow <- decay * shadow + (1 - decay) * weights, per tensor.
void ema_update(EmaState& ema, const std::map<std::string, Tensor>& params, double decay);

struct TrainResult {
    std::vector<double> loss_per_step;
    double final_loss = 0.0;
    std::string metrics_path;
    std::string final_checkpoint;  // prefix (.manifest/.blob)
};

// Mixed-batch optimization loop: per step draw a batch, forward per sample,
// average the per-sample token-mean losses, backprop, clip the global grad
// norm, AdamW update, optional EMA. Writes metrics.csv
// (step,lr,loss_total,loss_vl,loss_det,loss_img,loss_txt) and checkpoints
// under out_dir. Fully reproducible per seed.
TrainResult train(Model& model, const PreparedDataset& data, const TrainConfig& cfg,
                  const std::string& out_dir);

}  // namespace ofa
