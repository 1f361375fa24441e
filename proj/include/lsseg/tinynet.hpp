#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lsseg/data_synth.hpp"
#include "lsseg/grid.hpp"
#include "lsseg/heaviside.hpp"
#include "lsseg/ls_loss.hpp"
#include "lsseg/metrics.hpp"

namespace lsseg {

struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        std::size_t n = 1;
        for (int d : shape) n *= static_cast<std::size_t>(d);
        v.assign(n, 0.0);
    }
};

struct TinyNetConfig {
    int in_channels = 1;
    int width1 = 16;
    int width2 = 32;
    int num_classes = 4;

    void validate() const;
};

/// Minimal segmentation convnet:
///   conv3x3(in->w1) relu, conv3x3(w1->w1) relu, maxpool2,
///   conv3x3(w1->w2) relu, bilinear x2, conv1x1(w2->K).
/// All convolutions are zero padded; the output keeps the input's spatial
/// size (which must be even for the pool stage).
class TinyNet {
public:
    explicit TinyNet(TinyNetConfig cfg);

    /// He-scaled normal weights, zero biases, reproducible per seed.
    static TinyNet he_init(TinyNetConfig cfg, std::uint64_t seed);

    const TinyNetConfig& config() const { return cfg_; }
    std::vector<Tensor>& params() { return params_; }
    const std::vector<Tensor>& params() const { return params_; }
    std::size_t param_count() const;

private:
    TinyNetConfig cfg_;
    std::vector<Tensor> params_;  // w1,b1,w2,b2,w3,b3,w4,b4
};

struct ForwardCache {
    Grid input{1, 1, 1};
    Grid z1{1, 1, 1}, a1{1, 1, 1};
    Grid z2{1, 1, 1}, a2{1, 1, 1};
    Grid pooled{1, 1, 1};
    std::vector<std::int32_t> pool_argmax;  // flat in-plane source index per pooled entry
    Grid z3{1, 1, 1}, a3{1, 1, 1};
    Grid upsampled{1, 1, 1};
    Grid logits{1, 1, 1};
};

struct ForwardResult {
    Grid logits{1, 1, 1};
    ProbMaps probs{1, 1, 1};
    ForwardCache cache;
};

ForwardResult forward(const TinyNet& net, const Image& img);

/// Parameter gradients for a logit gradient, using the matching forward
/// cache. The gradient structure mirrors net.params().
std::vector<Tensor> backward(const TinyNet& net, const ForwardCache& cache, const Grid& logit_grad);

struct SgdConfig {
    double lr0 = 0.00025;
    double momentum = 0.9;
    double weight_decay = 0.0001;
    int max_iter = 1000;
    double poly_power = 0.9;

    void validate() const;
};

/// Poly schedule: lr0 * (1 - iter/max_iter)^power.
double poly_lr(const SgdConfig& cfg, int iter);

/// v <- momentum v - lr (g + weight_decay w);  w <- w + v.
void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
              std::vector<Tensor>& velocity, const SgdConfig& cfg, int iter);

/// Flip image and labels together when coin is set.
std::pair<Image, LabelMap> augment_hflip(const Image& img, const LabelMap& gt, bool coin);

struct TrainConfig {
    SgdConfig sgd;
    LossWeights weights;
    HeavisideKind loss_heaviside = HeavisideKind::tanh_approx();
    int batch_size = 8;
    int crop = 64;
    bool hflip = true;
    int eval_every = 100;  // 0 disables periodic evaluation
    bool ls_enabled = true;
    std::uint64_t seed = 0;
    int threads = 0;  // 0 = LSSEG_THREADS if set, else hardware

    void validate() const;
};

struct TrainResult {
    TinyNet net;
    std::vector<CurvePoint> curve;  // one point per iteration, miou on eval points
    bool diverged = false;
};

/// Deterministic given (seed, dataset, config); batches are drawn with the
/// project RNG and per-sample gradients are reduced in sample order even when
/// computed on several threads.
TrainResult train(TinyNet net, const Dataset& train_ds, const Dataset* eval_ds,
                  const TrainConfig& cfg);

/// IoU over a dataset with the network's argmax predictions.
IouResult evaluate_dataset(const TinyNet& net, const Dataset& ds);

/// Versioned binary checkpoint: "LSSEG1" magic, tensor count, then per-tensor
/// dimension headers and little-endian float64 payloads.
void save_checkpoint(const std::string& path, const TinyNet& net);
TinyNet load_checkpoint(const std::string& path);

}  // namespace lsseg
