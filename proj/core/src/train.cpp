#include "ofa/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;

namespace ofa {

void TrainConfig::validate() const {
    if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
        throw UsageError("train config: label_smoothing must be in [0,1)");
    }
    if (total_steps < 1) throw UsageError("train config: total_steps must be >= 1");
    if (warmup_ratio * total_steps < 1.0) {
        throw UsageError("train config: warmup_ratio * total_steps must be >= 1");
    }
    if (batch_size < 1) throw UsageError("train config: batch_size must be >= 1");
    if (use_ema && (ema_decay < 0.0 || ema_decay > 1.0)) {
        throw UsageError("train config: ema_decay must be in [0,1]");
    }
}

double lr_at(int step, const TrainConfig& cfg) {
    if (step < 0 || step > cfg.total_steps) throw UsageError("lr_at: step outside [0,total]");
    const int warmup = std::max<int>(1, static_cast<int>(std::llround(cfg.warmup_ratio * cfg.total_steps)));
    if (step <= warmup) return cfg.peak_lr * step / warmup;
    if (warmup >= cfg.total_steps) return 0.0;
    return cfg.peak_lr * (cfg.total_steps - step) / static_cast<double>(cfg.total_steps - warmup);
}

void AdamW::step(std::map<std::string, Tensor>& params, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& [path, p] : params) {
        auto& w = p.data();
        auto& [m, v] = moments_[path];
        if (m.empty()) {
            m.assign(w.size(), 0.0);
            v.assign(w.size(), 0.0);
        }
        const bool has_grad = p.has_grad();
        const std::vector<double>* g = has_grad ? &p.impl()->grad : nullptr;
        for (size_t i = 0; i < w.size(); ++i) {
            const double gi = g ? (*g)[i] : 0.0;
            if (!std::isfinite(gi)) throw NumericError("non-finite gradient at parameter '" + path + "'");
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            const double next = w[i] - lr * decay_ * w[i] - lr * mhat / (std::sqrt(vhat) + eps_);
            w[i] = round_to_precision(next);
        }
    }
}

double global_grad_norm(const std::map<std::string, Tensor>& params) {
    double sq = 0.0;
    for (const auto& [path, p] : params) {
        if (!p.has_grad()) continue;
        for (double g : p.impl()->grad) sq += g * g;
    }
    return std::sqrt(sq);
}

double clip_gradients(std::map<std::string, Tensor>& params, double max_norm) {
    const double norm = global_grad_norm(params);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (auto& [path, p] : params) {
            if (!p.has_grad()) continue;
            for (double& g : p.impl()->grad) g *= s;
        }
    }
    return norm;
}

void EmaState::init(const std::map<std::string, Tensor>& params) {
    shadow.clear();
    for (const auto& [path, p] : params) shadow[path] = p.data();
}

void ema_update(EmaState& ema, const std::map<std::string, Tensor>& params, double decay) {
    if (!ema.initialized()) {
        ema.init(params);
        return;
    }
    for (const auto& [path, p] : params) {
        auto it = ema.shadow.find(path);
        if (it == ema.shadow.end() || it->second.size() != p.data().size()) {
            throw ShapeError("ema_update: shadow shape mismatch at '" + path + "'");
        }
        auto& s = it->second;
        const auto& w = p.data();
        for (size_t i = 0; i < s.size(); ++i) s[i] = decay * s[i] + (1.0 - decay) * w[i];
    }
}

namespace {

void zero_all_grads(std::map<std::string, Tensor>& params) {
    for (auto& [path, p] : params) p.zero_grad();
}

void scale_all_grads(std::map<std::string, Tensor>& params, double s) {
    for (auto& [path, p] : params) {
        if (!p.has_grad()) continue;
        for (double& g : p.impl()->grad) g *= s;
    }
}

std::string ckpt_name(const std::string& out_dir, int step) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "ckpt_%06d", step);
    return (fs::path(out_dir) / buf).string();
}

}  // namespace

TrainResult train(Model& model, const PreparedDataset& data, const TrainConfig& cfg,
                  const std::string& out_dir) {
    cfg.validate();
    fs::create_directories(out_dir);
    model.mutable_config().dropout = cfg.dropout;
    model.mutable_config().stochastic_depth = cfg.stochastic_depth;

    // Only groups with a positive ratio join the mix; a positive ratio over an
    // empty group is the mixer's DataError.
    std::vector<std::vector<int>> streams;
    std::vector<int64_t> ratios;
    std::array<bool, kNumGroups> present{};
    for (size_t g = 0; g < kNumGroups; ++g) {
        if (cfg.mix_ratios[g] <= 0) continue;
        present[g] = true;
        streams.push_back(data.by_group[g]);
        ratios.push_back(cfg.mix_ratios[g]);
    }
    if (streams.empty()) throw UsageError("train: no groups selected by mix_ratios");

    Rng base(cfg.seed);
    Rng mix_rng = base.split(1);
    Rng drop_rng = base.split(2);
    BatchMixer mixer(std::move(streams), ratios, cfg.batch_size, mix_rng);

    const std::string metrics_path = (fs::path(out_dir) / "metrics.csv").string();
    std::ofstream csv(metrics_path, std::ios::binary);
    if (!csv) throw DataError("cannot write " + metrics_path);
    csv << "step,lr,loss_total,loss_vl,loss_det,loss_img,loss_txt\n";

    EmaState ema;
    if (cfg.use_ema) ema.init(model.params());
    AdamW opt(cfg);
    TrainResult result;
    result.metrics_path = metrics_path;
    const std::string final_prefix = (fs::path(out_dir) / "final").string();
    result.final_checkpoint = final_prefix;

    Model::Pass pass;
    pass.training = true;
    pass.rng = &drop_rng;

    for (int step = 1; step <= cfg.total_steps; ++step) {
        const double lr = lr_at(step, cfg);
        const std::vector<int> batch = mixer.next();
        zero_all_grads(model.params());

        double total_loss = 0.0;
        std::array<double, kNumGroups> group_loss{};
        std::array<int, kNumGroups> group_count{};
        for (int idx : batch) {
            const InstructionSample& s = data.samples[static_cast<size_t>(idx)];
            const Tensor enc = model.encode(s.source_ids, s.patches.get(), pass);
            std::vector<int> dec_in;
            dec_in.reserve(s.target_ids.size());
            dec_in.push_back(UnifiedVocab::kBos);
            dec_in.insert(dec_in.end(), s.target_ids.begin(), s.target_ids.end() - 1);
            const Tensor logits = model.decode(enc, dec_in, pass);
            const bool masked = cfg.trie_train && !s.allowed.empty();
            const Tensor loss = cross_entropy_logits(logits, s.target_ids, cfg.label_smoothing,
                                                     UnifiedVocab::kPad, masked ? &s.allowed : nullptr);
            const double lv = loss.item();
            if (!std::isfinite(lv)) {
                model.save(final_prefix);
                throw NumericError("loss became non-finite at step " + std::to_string(step) +
                                   "; last good checkpoint retained at " + final_prefix);
            }
            backward(loss);
            total_loss += lv;
            group_loss[static_cast<size_t>(s.group)] += lv;
            group_count[static_cast<size_t>(s.group)] += 1;
        }
        scale_all_grads(model.params(), 1.0 / batch.size());
        clip_gradients(model.params(), cfg.clip_norm);
        try {
            opt.step(model.params(), lr);
        } catch (const NumericError&) {
            model.save(final_prefix);
            throw;
        }
        if (cfg.use_ema) ema_update(ema, model.params(), cfg.ema_decay);

        total_loss /= batch.size();
        result.loss_per_step.push_back(total_loss);
        char row[256];
        std::string line;
        std::snprintf(row, sizeof(row), "%d,%.8g,%.6f", step, lr, total_loss);
        line = row;
        for (size_t g = 0; g < kNumGroups; ++g) {
            if (present[g] && group_count[g] > 0) {
                std::snprintf(row, sizeof(row), ",%.6f", group_loss[g] / group_count[g]);
            } else {
                std::snprintf(row, sizeof(row), ",nan");
            }
            line += row;
        }
        csv << line << "\n";
        if (cfg.ckpt_every > 0 && step % cfg.ckpt_every == 0) model.save(ckpt_name(out_dir, step));
    }
    csv.close();

    model.save(final_prefix);
    if (cfg.use_ema) {
        // Persist EMA weights alongside the raw ones: swap in, save, restore.
        std::map<std::string, std::vector<double>> raw;
        for (auto& [path, p] : model.params()) raw[path] = p.data();
        for (auto& [path, p] : model.params()) {
            const auto& s = ema.shadow.at(path);
            for (size_t i = 0; i < s.size(); ++i) p.data()[i] = round_to_precision(s[i]);
        }
        model.save(final_prefix + "_ema");
        for (auto& [path, p] : model.params()) p.data() = raw.at(path);
    }
    result.final_loss = result.loss_per_step.empty() ? 0.0 : result.loss_per_step.back();
    return result;
}

}  // namespace ofa
