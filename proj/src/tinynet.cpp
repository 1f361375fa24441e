#include "lsseg/tinynet.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include "lsseg/error.hpp"
#include "lsseg/rng.hpp"

namespace lsseg {

void TinyNetConfig::validate() const {
    if (in_channels < 1 || width1 < 1 || width2 < 1) throw ConfigError("channel widths must be >= 1");
    if (num_classes < 2) throw ConfigError("need at least 2 output classes");
}

TinyNet::TinyNet(TinyNetConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    params_.clear();
    params_.emplace_back(std::vector<int>{cfg.width1, cfg.in_channels, 3, 3});
    params_.emplace_back(std::vector<int>{cfg.width1});
    params_.emplace_back(std::vector<int>{cfg.width1, cfg.width1, 3, 3});
    params_.emplace_back(std::vector<int>{cfg.width1});
    params_.emplace_back(std::vector<int>{cfg.width2, cfg.width1, 3, 3});
    params_.emplace_back(std::vector<int>{cfg.width2});
    params_.emplace_back(std::vector<int>{cfg.num_classes, cfg.width2, 1, 1});
    params_.emplace_back(std::vector<int>{cfg.num_classes});
}

TinyNet TinyNet::he_init(TinyNetConfig cfg, std::uint64_t seed) {
    TinyNet net(cfg);
    Rng rng(seed);
    for (std::size_t t = 0; t < net.params_.size(); t += 2) {
        Tensor& w = net.params_[t];
        const int fan_in = w.shape[1] * w.shape[2] * w.shape[3];
        const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (auto& v : w.v) v = std_dev * rng.normal();
        // biases (params_[t+1]) stay zero
    }
    return net;
}

std::size_t TinyNet::param_count() const {
    std::size_t n = 0;
    for (const auto& t : params_) n += t.v.size();
    return n;
}

namespace {

// ---- layer primitives ------------------------------------------------------

void conv_forward(std::span<const double> in, int in_ch, int h, int w, const Tensor& weight,
                  const Tensor& bias, int k, std::span<double> out) {
    const int out_ch = weight.shape[0];
    const int pad = k / 2;
    const std::size_t plane = static_cast<std::size_t>(h) * w;

    for (int oc = 0; oc < out_ch; ++oc) {
        double* orow0 = out.data() + static_cast<std::size_t>(oc) * plane;
        std::fill(orow0, orow0 + plane, bias.v[oc]);
        for (int ic = 0; ic < in_ch; ++ic) {
            const double* iplane = in.data() + static_cast<std::size_t>(ic) * plane;
            for (int kh = 0; kh < k; ++kh) {
                const int dr = kh - pad;
                for (int kw = 0; kw < k; ++kw) {
                    const int dc = kw - pad;
                    const double wv = weight.v[((static_cast<std::size_t>(oc) * in_ch + ic) * k + kh) * k + kw];
                    if (wv == 0.0) continue;
                    const int r_lo = std::max(0, -dr);
                    const int r_hi = std::min(h, h - dr);
                    const int c_lo = std::max(0, -dc);
                    const int c_hi = std::min(w, w - dc);
                    for (int r = r_lo; r < r_hi; ++r) {
                        const double* irow = iplane + static_cast<std::size_t>(r + dr) * w + dc;
                        double* orow = orow0 + static_cast<std::size_t>(r) * w;
                        for (int c = c_lo; c < c_hi; ++c) orow[c] += wv * irow[c];
                    }
                }
            }
        }
    }
}

void conv_backward(std::span<const double> in, int in_ch, int h, int w, const Tensor& weight,
                   int k, std::span<const double> d_out, Tensor& d_weight, Tensor& d_bias,
                   std::span<double> d_in) {
    const int out_ch = weight.shape[0];
    const int pad = k / 2;
    const std::size_t plane = static_cast<std::size_t>(h) * w;

    for (int oc = 0; oc < out_ch; ++oc) {
        const double* dout0 = d_out.data() + static_cast<std::size_t>(oc) * plane;
        double acc_b = 0.0;
        for (std::size_t i = 0; i < plane; ++i) acc_b += dout0[i];
        d_bias.v[oc] += acc_b;

        for (int ic = 0; ic < in_ch; ++ic) {
            const double* iplane = in.data() + static_cast<std::size_t>(ic) * plane;
            double* dplane = d_in.empty() ? nullptr : d_in.data() + static_cast<std::size_t>(ic) * plane;
            for (int kh = 0; kh < k; ++kh) {
                const int dr = kh - pad;
                for (int kw = 0; kw < k; ++kw) {
                    const int dc = kw - pad;
                    const std::size_t widx =
                        ((static_cast<std::size_t>(oc) * in_ch + ic) * k + kh) * k + kw;
                    const double wv = weight.v[widx];
                    const int r_lo = std::max(0, -dr);
                    const int r_hi = std::min(h, h - dr);
                    const int c_lo = std::max(0, -dc);
                    const int c_hi = std::min(w, w - dc);
                    double acc_w = 0.0;
                    for (int r = r_lo; r < r_hi; ++r) {
                        const double* irow = iplane + static_cast<std::size_t>(r + dr) * w + dc;
                        const double* drow = dout0 + static_cast<std::size_t>(r) * w;
                        for (int c = c_lo; c < c_hi; ++c) acc_w += drow[c] * irow[c];
                    }
                    d_weight.v[widx] += acc_w;
                    if (dplane != nullptr && wv != 0.0) {
                        for (int r = r_lo; r < r_hi; ++r) {
                            double* dirow = dplane + static_cast<std::size_t>(r + dr) * w + dc;
                            const double* drow = dout0 + static_cast<std::size_t>(r) * w;
                            for (int c = c_lo; c < c_hi; ++c) dirow[c] += wv * drow[c];
                        }
                    }
                }
            }
        }
    }
}

void relu_forward(std::span<const double> z, std::span<double> a) {
    for (std::size_t i = 0; i < z.size(); ++i) a[i] = z[i] > 0.0 ? z[i] : 0.0;
}

void relu_backward(std::span<const double> z, std::span<double> d) {
    for (std::size_t i = 0; i < z.size(); ++i) {
        if (z[i] <= 0.0) d[i] = 0.0;
    }
}

void maxpool2_forward(std::span<const double> in, int ch, int h, int w, std::span<double> out,
                      std::vector<std::int32_t>& argmax) {
    const int ho = h / 2, wo = w / 2;
    const std::size_t in_plane = static_cast<std::size_t>(h) * w;
    const std::size_t out_plane = static_cast<std::size_t>(ho) * wo;
    argmax.assign(static_cast<std::size_t>(ch) * out_plane, 0);
    for (int c = 0; c < ch; ++c) {
        const double* ip = in.data() + static_cast<std::size_t>(c) * in_plane;
        double* op = out.data() + static_cast<std::size_t>(c) * out_plane;
        std::int32_t* am = argmax.data() + static_cast<std::size_t>(c) * out_plane;
        for (int r = 0; r < ho; ++r) {
            for (int q = 0; q < wo; ++q) {
                const int r0 = 2 * r, c0 = 2 * q;
                // scan order fixes tie-breaking
                std::int32_t best_idx = r0 * w + c0;
                double best = ip[best_idx];
                const std::int32_t cand[3] = {r0 * w + c0 + 1, (r0 + 1) * w + c0,
                                              (r0 + 1) * w + c0 + 1};
                for (std::int32_t idx : cand) {
                    if (ip[idx] > best) {
                        best = ip[idx];
                        best_idx = idx;
                    }
                }
                op[static_cast<std::size_t>(r) * wo + q] = best;
                am[static_cast<std::size_t>(r) * wo + q] = best_idx;
            }
        }
    }
}

void maxpool2_backward(std::span<const double> d_out, int ch, int h, int w,
                       const std::vector<std::int32_t>& argmax, std::span<double> d_in) {
    const int ho = h / 2, wo = w / 2;
    const std::size_t in_plane = static_cast<std::size_t>(h) * w;
    const std::size_t out_plane = static_cast<std::size_t>(ho) * wo;
    std::fill(d_in.begin(), d_in.end(), 0.0);
    for (int c = 0; c < ch; ++c) {
        const double* dop = d_out.data() + static_cast<std::size_t>(c) * out_plane;
        double* dip = d_in.data() + static_cast<std::size_t>(c) * in_plane;
        const std::int32_t* am = argmax.data() + static_cast<std::size_t>(c) * out_plane;
        for (std::size_t i = 0; i < out_plane; ++i) dip[am[i]] += dop[i];
    }
}

struct LinearTap {
    int lo = 0, hi = 0;
    double w_hi = 0.0;  // weight of hi; lo gets 1 - w_hi
};

/// Source taps for x2 bilinear upsampling without corner alignment:
/// source coordinate of output i is i/2 - 0.25, clamped at the borders.
std::vector<LinearTap> upsample_taps(int out_len, int in_len) {
    std::vector<LinearTap> taps(out_len);
    for (int i = 0; i < out_len; ++i) {
        const double s = 0.5 * i - 0.25;
        double flo = std::floor(s);
        double frac = s - flo;
        int lo = static_cast<int>(flo);
        int hi = lo + 1;
        lo = std::clamp(lo, 0, in_len - 1);
        hi = std::clamp(hi, 0, in_len - 1);
        taps[i] = {lo, hi, frac};
    }
    return taps;
}

void upsample2_forward(std::span<const double> in, int ch, int hi_h, int hi_w,
                       std::span<double> out) {
    const int lo_h = hi_h / 2, lo_w = hi_w / 2;
    const auto ry = upsample_taps(hi_h, lo_h);
    const auto rx = upsample_taps(hi_w, lo_w);
    const std::size_t in_plane = static_cast<std::size_t>(lo_h) * lo_w;
    const std::size_t out_plane = static_cast<std::size_t>(hi_h) * hi_w;
    for (int c = 0; c < ch; ++c) {
        const double* ip = in.data() + static_cast<std::size_t>(c) * in_plane;
        double* op = out.data() + static_cast<std::size_t>(c) * out_plane;
        for (int r = 0; r < hi_h; ++r) {
            const auto& ty = ry[r];
            const double* row_lo = ip + static_cast<std::size_t>(ty.lo) * lo_w;
            const double* row_hi = ip + static_cast<std::size_t>(ty.hi) * lo_w;
            double* orow = op + static_cast<std::size_t>(r) * hi_w;
            for (int q = 0; q < hi_w; ++q) {
                const auto& tx = rx[q];
                const double top = row_lo[tx.lo] * (1.0 - tx.w_hi) + row_lo[tx.hi] * tx.w_hi;
                const double bot = row_hi[tx.lo] * (1.0 - tx.w_hi) + row_hi[tx.hi] * tx.w_hi;
                orow[q] = top * (1.0 - ty.w_hi) + bot * ty.w_hi;
            }
        }
    }
}

void upsample2_backward(std::span<const double> d_out, int ch, int hi_h, int hi_w,
                        std::span<double> d_in) {
    const int lo_h = hi_h / 2, lo_w = hi_w / 2;
    const auto ry = upsample_taps(hi_h, lo_h);
    const auto rx = upsample_taps(hi_w, lo_w);
    const std::size_t in_plane = static_cast<std::size_t>(lo_h) * lo_w;
    const std::size_t out_plane = static_cast<std::size_t>(hi_h) * hi_w;
    std::fill(d_in.begin(), d_in.end(), 0.0);
    for (int c = 0; c < ch; ++c) {
        const double* dop = d_out.data() + static_cast<std::size_t>(c) * out_plane;
        double* dip = d_in.data() + static_cast<std::size_t>(c) * in_plane;
        for (int r = 0; r < hi_h; ++r) {
            const auto& ty = ry[r];
            double* row_lo = dip + static_cast<std::size_t>(ty.lo) * lo_w;
            double* row_hi = dip + static_cast<std::size_t>(ty.hi) * lo_w;
            const double* drow = dop + static_cast<std::size_t>(r) * hi_w;
            for (int q = 0; q < hi_w; ++q) {
                const auto& tx = rx[q];
                const double g = drow[q];
                row_lo[tx.lo] += g * (1.0 - ty.w_hi) * (1.0 - tx.w_hi);
                row_lo[tx.hi] += g * (1.0 - ty.w_hi) * tx.w_hi;
                row_hi[tx.lo] += g * ty.w_hi * (1.0 - tx.w_hi);
                row_hi[tx.hi] += g * ty.w_hi * tx.w_hi;
            }
        }
    }
}

void softmax_per_pixel(const Grid& logits, Grid& probs) {
    const int k = logits.planes();
    const std::size_t plane = static_cast<std::size_t>(logits.rows()) * logits.cols();
    auto src = logits.data();
    auto dst = probs.data_mut();
    for (std::size_t i = 0; i < plane; ++i) {
        double m = src[i];
        for (int c = 1; c < k; ++c) m = std::max(m, src[static_cast<std::size_t>(c) * plane + i]);
        double sum = 0.0;
        for (int c = 0; c < k; ++c) {
            const double e = std::exp(src[static_cast<std::size_t>(c) * plane + i] - m);
            dst[static_cast<std::size_t>(c) * plane + i] = e;
            sum += e;
        }
        for (int c = 0; c < k; ++c) dst[static_cast<std::size_t>(c) * plane + i] /= sum;
    }
}

}  // namespace

ForwardResult forward(const TinyNet& net, const Image& img) {
    const auto& cfg = net.config();
    if (img.channels() != cfg.in_channels) {
        throw ShapeError("input has " + std::to_string(img.channels()) + " channels, network expects " +
                         std::to_string(cfg.in_channels));
    }
    const int h = img.rows(), w = img.cols();
    if (h % 2 != 0 || w % 2 != 0) {
        throw ShapeError("spatial size must be even for the pooling stage, got " +
                         std::to_string(h) + "x" + std::to_string(w));
    }
    const auto& p = net.params();

    ForwardResult r;
    ForwardCache& cache = r.cache;
    cache.input = img.px;

    cache.z1 = Grid(cfg.width1, h, w);
    conv_forward(img.px.data(), cfg.in_channels, h, w, p[0], p[1], 3, cache.z1.data_mut());
    cache.a1 = Grid(cfg.width1, h, w);
    relu_forward(cache.z1.data(), cache.a1.data_mut());

    cache.z2 = Grid(cfg.width1, h, w);
    conv_forward(cache.a1.data(), cfg.width1, h, w, p[2], p[3], 3, cache.z2.data_mut());
    cache.a2 = Grid(cfg.width1, h, w);
    relu_forward(cache.z2.data(), cache.a2.data_mut());

    cache.pooled = Grid(cfg.width1, h / 2, w / 2);
    maxpool2_forward(cache.a2.data(), cfg.width1, h, w, cache.pooled.data_mut(), cache.pool_argmax);

    cache.z3 = Grid(cfg.width2, h / 2, w / 2);
    conv_forward(cache.pooled.data(), cfg.width1, h / 2, w / 2, p[4], p[5], 3, cache.z3.data_mut());
    cache.a3 = Grid(cfg.width2, h / 2, w / 2);
    relu_forward(cache.z3.data(), cache.a3.data_mut());

    cache.upsampled = Grid(cfg.width2, h, w);
    upsample2_forward(cache.a3.data(), cfg.width2, h, w, cache.upsampled.data_mut());

    cache.logits = Grid(cfg.num_classes, h, w);
    conv_forward(cache.upsampled.data(), cfg.width2, h, w, p[6], p[7], 1, cache.logits.data_mut());

    r.logits = cache.logits;
    r.probs = ProbMaps(Grid(cfg.num_classes, h, w));
    softmax_per_pixel(r.logits, r.probs.maps);
    return r;
}

std::vector<Tensor> backward(const TinyNet& net, const ForwardCache& cache, const Grid& logit_grad) {
    const auto& cfg = net.config();
    if (!logit_grad.same_shape(cache.logits)) {
        throw ShapeError("logit gradient shape " + logit_grad.shape_str() +
                         " does not match cached forward " + cache.logits.shape_str());
    }
    if (cache.input.planes() != cfg.in_channels || cache.a1.planes() != cfg.width1 ||
        cache.a3.planes() != cfg.width2) {
        throw ShapeError("forward cache does not match this network");
    }
    const int h = cache.input.rows(), w = cache.input.cols();
    const auto& p = net.params();

    std::vector<Tensor> grads;
    grads.reserve(p.size());
    for (const auto& t : p) grads.emplace_back(t.shape);

    // head conv 1x1
    Grid d_up(cfg.width2, h, w);
    conv_backward(cache.upsampled.data(), cfg.width2, h, w, p[6], 1, logit_grad.data(), grads[6],
                  grads[7], d_up.data_mut());

    // bilinear upsample
    Grid d_a3(cfg.width2, h / 2, w / 2);
    upsample2_backward(d_up.data(), cfg.width2, h, w, d_a3.data_mut());
    relu_backward(cache.z3.data(), d_a3.data_mut());

    // conv3
    Grid d_pool(cfg.width1, h / 2, w / 2);
    conv_backward(cache.pooled.data(), cfg.width1, h / 2, w / 2, p[4], 3, d_a3.data(), grads[4],
                  grads[5], d_pool.data_mut());

    // maxpool
    Grid d_a2(cfg.width1, h, w);
    maxpool2_backward(d_pool.data(), cfg.width1, h, w, cache.pool_argmax, d_a2.data_mut());
    relu_backward(cache.z2.data(), d_a2.data_mut());

    // conv2
    Grid d_a1(cfg.width1, h, w);
    conv_backward(cache.a1.data(), cfg.width1, h, w, p[2], 3, d_a2.data(), grads[2], grads[3],
                  d_a1.data_mut());
    relu_backward(cache.z1.data(), d_a1.data_mut());

    // conv1; input gradient is not needed
    conv_backward(cache.input.data(), cfg.in_channels, h, w, p[0], 3, d_a1.data(), grads[0],
                  grads[1], {});
    return grads;
}

void SgdConfig::validate() const {
    if (!(lr0 > 0.0)) throw ConfigError("lr0 must be > 0");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (max_iter < 1) throw ConfigError("max_iter must be >= 1");
    if (poly_power < 0.0) throw ConfigError("poly_power must be >= 0");
}

double poly_lr(const SgdConfig& cfg, int iter) {
    cfg.validate();
    if (iter < 0 || iter > cfg.max_iter) {
        throw ConfigError("iteration " + std::to_string(iter) + " outside [0, max_iter=" +
                          std::to_string(cfg.max_iter) + "]");
    }
    const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(cfg.max_iter);
    return cfg.lr0 * std::pow(frac, cfg.poly_power);
}

void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
              std::vector<Tensor>& velocity, const SgdConfig& cfg, int iter) {
    if (params.size() != grads.size() || params.size() != velocity.size()) {
        throw ShapeError("sgd_step: parameter/gradient/velocity tensor counts differ");
    }
    const double lr = poly_lr(cfg, iter);
    for (std::size_t t = 0; t < params.size(); ++t) {
        auto& w = params[t].v;
        const auto& g = grads[t].v;
        auto& vel = velocity[t].v;
        if (w.size() != g.size() || w.size() != vel.size()) {
            throw ShapeError("sgd_step: tensor " + std::to_string(t) + " size mismatch");
        }
        for (std::size_t i = 0; i < w.size(); ++i) {
            if (!std::isfinite(g[i])) {
                throw NumericError("non-finite gradient in tensor " + std::to_string(t) +
                                   " at index " + std::to_string(i));
            }
            vel[i] = cfg.momentum * vel[i] - lr * (g[i] + cfg.weight_decay * w[i]);
            w[i] += vel[i];
        }
    }
}

std::pair<Image, LabelMap> augment_hflip(const Image& img, const LabelMap& gt, bool coin) {
    if (!coin) return {img, gt};
    Image out_img(img.rows(), img.cols(), img.channels());
    for (int p = 0; p < img.channels(); ++p) {
        for (int r = 0; r < img.rows(); ++r) {
            for (int c = 0; c < img.cols(); ++c) {
                out_img.px.at_mut(p, r, c) = img.px.at(p, r, img.cols() - 1 - c);
            }
        }
    }
    LabelMap out_gt(gt.rows(), gt.cols());
    for (int r = 0; r < gt.rows(); ++r) {
        for (int c = 0; c < gt.cols(); ++c) {
            out_gt.at_mut(r, c) = gt.at(r, gt.cols() - 1 - c);
        }
    }
    return {std::move(out_img), std::move(out_gt)};
}

void TrainConfig::validate() const {
    sgd.validate();
    weights.validate();
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (crop < 0 || (crop > 0 && crop % 2 != 0)) throw ConfigError("crop must be 0 or even");
    if (eval_every < 0) throw ConfigError("eval_every must be >= 0");
    if (!loss_heaviside.is_smooth()) {
        throw ConfigError("the exact heaviside has no usable gradient; train with mahf or ahf");
    }
}

namespace {

int resolve_threads(int requested, int jobs) {
    int t = requested > 0 ? requested : static_cast<int>(std::thread::hardware_concurrency());
    if (t <= 0) t = 1;
    // LSSEG_THREADS caps the worker count no matter how it was chosen
    if (const char* env = std::getenv("LSSEG_THREADS")) {
        const int cap = std::atoi(env);
        if (cap > 0) t = std::min(t, cap);
    }
    return std::clamp(t, 1, std::max(1, jobs));
}

struct BatchEntry {
    std::size_t sample = 0;
    int r0 = 0, c0 = 0;
    bool flip = false;
};

struct SampleWork {
    LossReport report;
    std::vector<Tensor> grads;
};

Image crop_image(const Image& img, int r0, int c0, int size) {
    Image out(size, size, img.channels());
    for (int p = 0; p < img.channels(); ++p) {
        for (int r = 0; r < size; ++r) {
            for (int c = 0; c < size; ++c) {
                out.px.at_mut(p, r, c) = img.px.at(p, r0 + r, c0 + c);
            }
        }
    }
    return out;
}

LabelMap crop_labels(const LabelMap& gt, int r0, int c0, int size) {
    LabelMap out(size, size);
    for (int r = 0; r < size; ++r) {
        for (int c = 0; c < size; ++c) out.at_mut(r, c) = gt.at(r0 + r, c0 + c);
    }
    return out;
}

}  // namespace

IouResult evaluate_dataset(const TinyNet& net, const Dataset& ds) {
    if (ds.samples.empty()) throw ConfigError("evaluation dataset is empty");
    if (net.config().num_classes != ds.spec.num_classes) {
        throw ConfigError("network predicts " + std::to_string(net.config().num_classes) +
                          " classes but dataset has " + std::to_string(ds.spec.num_classes));
    }
    ConfusionMatrix cm(ds.spec.num_classes);
    for (const auto& s : ds.samples) {
        const ForwardResult fwd = forward(net, s.image);
        accumulate(cm, s.labels, argmax_labels(fwd.probs));
    }
    return mean_iou(cm);
}

TrainResult train(TinyNet net, const Dataset& train_ds, const Dataset* eval_ds,
                  const TrainConfig& cfg) {
    cfg.validate();
    if (train_ds.samples.empty()) throw ConfigError("training dataset is empty");

    const bool use_ls = cfg.ls_enabled && cfg.weights.lambda_ls > 0.0;
    const int threads = resolve_threads(cfg.threads, cfg.batch_size);
    const double inv_batch = 1.0 / static_cast<double>(cfg.batch_size);

    Rng rng(cfg.seed);
    std::vector<Tensor> velocity;
    velocity.reserve(net.params().size());
    for (const auto& t : net.params()) velocity.emplace_back(t.shape);

    TrainResult result{std::move(net), {}, false};
    result.curve.reserve(static_cast<std::size_t>(cfg.sgd.max_iter));

    std::vector<BatchEntry> batch(static_cast<std::size_t>(cfg.batch_size));
    std::vector<SampleWork> work(batch.size());

    for (int iter = 0; iter < cfg.sgd.max_iter; ++iter) {
        // All random draws happen here, on one thread, in a fixed order.
        for (auto& e : batch) {
            e.sample = static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(train_ds.samples.size()) - 1));
            const auto& img = train_ds.samples[e.sample].image;
            e.r0 = 0;
            e.c0 = 0;
            if (cfg.crop > 0 && img.rows() > cfg.crop) {
                e.r0 = static_cast<int>(rng.uniform_int(0, img.rows() - cfg.crop));
            }
            if (cfg.crop > 0 && img.cols() > cfg.crop) {
                e.c0 = static_cast<int>(rng.uniform_int(0, img.cols() - cfg.crop));
            }
            e.flip = cfg.hflip && rng.coin();
        }

        auto process = [&](std::size_t slot) {
            const BatchEntry& e = batch[slot];
            const Sample& s = train_ds.samples[e.sample];
            Image img = s.image;
            LabelMap gt = s.labels;
            if (cfg.crop > 0 && (img.rows() > cfg.crop || img.cols() > cfg.crop)) {
                img = crop_image(img, e.r0, e.c0, cfg.crop);
                gt = crop_labels(gt, e.r0, e.c0, cfg.crop);
            }
            if (e.flip) std::tie(img, gt) = augment_hflip(img, gt, true);

            const ForwardResult fwd = forward(result.net, img);
            SampleWork& out = work[slot];
            if (use_ls) {
                CombinedLoss loss =
                    combined_loss(fwd.probs, gt, cfg.weights, cfg.loss_heaviside);
                out.report = loss.report;
                out.grads = backward(result.net, fwd.cache, loss.logit_grad);
            } else {
                CeResult ce = cross_entropy(fwd.probs, gt);
                out.report = LossReport{ce.loss, 0.0, ce.loss, {}};
                out.grads = backward(result.net, fwd.cache, ce.logit_grad);
            }
        };

        if (threads == 1) {
            for (std::size_t slot = 0; slot < batch.size(); ++slot) process(slot);
        } else {
            std::vector<std::thread> pool;
            std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
            for (int t = 0; t < threads; ++t) {
                pool.emplace_back([&, t]() {
                    try {
                        for (std::size_t slot = static_cast<std::size_t>(t); slot < batch.size();
                             slot += static_cast<std::size_t>(threads)) {
                            process(slot);
                        }
                    } catch (...) {
                        errors[static_cast<std::size_t>(t)] = std::current_exception();
                    }
                });
            }
            for (auto& th : pool) th.join();
            for (auto& err : errors) {
                if (err) std::rethrow_exception(err);
            }
        }

        // Reduce in slot order so results do not depend on thread scheduling.
        LossReport mean;
        std::vector<Tensor> grads;
        grads.reserve(result.net.params().size());
        for (const auto& t : result.net.params()) grads.emplace_back(t.shape);
        for (const auto& sw : work) {
            mean.ce += sw.report.ce * inv_batch;
            mean.ls += sw.report.ls * inv_batch;
            mean.total += sw.report.total * inv_batch;
            for (std::size_t t = 0; t < grads.size(); ++t) {
                auto& acc = grads[t].v;
                const auto& g = sw.grads[t].v;
                for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i] * inv_batch;
            }
        }

        bool finite = std::isfinite(mean.total);
        for (std::size_t t = 0; finite && t < grads.size(); ++t) {
            for (double g : grads[t].v) {
                if (!std::isfinite(g)) {
                    finite = false;
                    break;
                }
            }
        }
        if (!finite) {
            // keep the parameters from before this iteration as the last good state
            result.diverged = true;
            break;
        }

        sgd_step(result.net.params(), grads, velocity, cfg.sgd, iter);

        CurvePoint point{iter + 1, mean.ce, mean.ls, mean.total, std::nullopt};
        if (eval_ds != nullptr && cfg.eval_every > 0 &&
            ((iter + 1) % cfg.eval_every == 0 || iter + 1 == cfg.sgd.max_iter)) {
            point.miou = evaluate_dataset(result.net, *eval_ds).miou;
        }
        result.curve.push_back(point);
    }
    return result;
}

// ---- checkpoint io ----------------------------------------------------------

namespace {

constexpr char kMagic[6] = {'L', 'S', 'S', 'E', 'G', '1'};

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double d) {
    const auto bits = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class ByteReader {
public:
    ByteReader(std::string bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

    void expect_magic() {
        if (bytes_.size() < sizeof(kMagic) ||
            !std::equal(kMagic, kMagic + sizeof(kMagic), bytes_.begin())) {
            throw IoError(path_ + ": not a checkpoint (bad magic)");
        }
        pos_ = sizeof(kMagic);
    }

    std::uint32_t get_u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += 4;
        return v;
    }

    double get_f64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += 8;
        return std::bit_cast<double>(v);
    }

private:
    void need(std::size_t n) {
        if (bytes_.size() - pos_ < n) throw IoError(path_ + ": truncated checkpoint");
    }
    std::string bytes_;
    std::string path_;
    std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::string& path, const TinyNet& net) {
    std::string out(kMagic, sizeof(kMagic));
    put_u32(out, static_cast<std::uint32_t>(net.params().size()));
    for (const auto& t : net.params()) {
        put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
        for (int d : t.shape) put_u32(out, static_cast<std::uint32_t>(d));
        for (double v : t.v) put_f64(out, v);
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("failed writing " + path);
}

TinyNet load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();

    ByteReader reader(ss.str(), path);
    reader.expect_magic();
    const std::uint32_t count = reader.get_u32();
    if (count != 8) throw IoError(path + ": expected 8 tensors, found " + std::to_string(count));

    std::vector<Tensor> tensors;
    tensors.reserve(count);
    for (std::uint32_t t = 0; t < count; ++t) {
        const std::uint32_t ndims = reader.get_u32();
        if (ndims < 1 || ndims > 4) throw IoError(path + ": bad tensor rank");
        std::vector<int> shape(ndims);
        std::size_t n = 1;
        for (auto& d : shape) {
            d = static_cast<int>(reader.get_u32());
            if (d < 1 || d > (1 << 20)) throw IoError(path + ": bad tensor dimension");
            n *= static_cast<std::size_t>(d);
        }
        Tensor tensor(shape);
        for (std::size_t i = 0; i < n; ++i) tensor.v[i] = reader.get_f64();
        tensors.push_back(std::move(tensor));
    }

    const auto& w1 = tensors[0].shape;
    const auto& w3 = tensors[4].shape;
    const auto& w4 = tensors[6].shape;
    if (w1.size() != 4 || w3.size() != 4 || w4.size() != 4) {
        throw IoError(path + ": conv tensors must be rank 4");
    }
    TinyNetConfig cfg{w1[1], w1[0], w3[0], w4[0]};
    TinyNet net(cfg);
    for (std::size_t t = 0; t < tensors.size(); ++t) {
        if (tensors[t].shape != net.params()[t].shape) {
            throw IoError(path + ": tensor " + std::to_string(t) + " has inconsistent shape");
        }
        net.params()[t] = std::move(tensors[t]);
    }
    return net;
}

}  // namespace lsseg
