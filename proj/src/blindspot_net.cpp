#include "despeckle/blindspot_net.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace despeckle {

namespace {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using ConstMapRM = Eigen::Map<const MatRM>;
using StridedMapRM = Eigen::Map<MatRM, 0, Eigen::OuterStride<>>;
using ConstStridedMapRM = Eigen::Map<const MatRM, 0, Eigen::OuterStride<>>;

constexpr float kNormEps = 1e-5f;
constexpr double kNormMomentum = 0.1;
// Upper bound on the im2col scratch buffer, in floats.
constexpr std::size_t kColBudget = std::size_t{8} << 20;

inline float leaky(float v, float slope) { return v > 0.0f ? v : slope * v; }

} // namespace

// Shapes of the 4N rotated instances of a batch. Instance b = 4 n + k holds
// image n rotated k quarter turns counter-clockwise.
struct BlindSpotNet::Geometry {
    int batch;
    int height;
    int width;
    std::size_t pixels;
    // src_index[k][q]: pixel of the original image shown at instance pixel q.
    std::array<std::vector<int>, 4> src_index;

    Geometry(int n, int h, int w)
        : batch(n), height(h), width(w), pixels(static_cast<std::size_t>(h) * w)
    {
        for (int k = 0; k < 4; ++k) {
            const int ih = inst_h(k), iw = inst_w(k);
            auto& map = src_index[k];
            map.resize(pixels);
            for (int r = 0; r < ih; ++r) {
                for (int c = 0; c < iw; ++c) {
                    int R = r, C = c;
                    switch (k) {
                    case 1: R = c; C = w - 1 - r; break;
                    case 2: R = h - 1 - r; C = w - 1 - c; break;
                    case 3: R = h - 1 - c; C = r; break;
                    default: break;
                    }
                    map[static_cast<std::size_t>(r) * iw + c] = R * w + C;
                }
            }
        }
    }

    int instances() const { return 4 * batch; }
    std::size_t columns() const { return static_cast<std::size_t>(instances()) * pixels; }
    int inst_h(int k) const { return k % 2 == 0 ? height : width; }
    int inst_w(int k) const { return k % 2 == 0 ? width : height; }
};

namespace {

// Column matrix of one causal convolution for instances [first, first + count).
// Row (ci * T + t), column (j * P + q).
void im2col(const float* src, std::size_t src_cols, int cin,
            const std::vector<std::pair<int, int>>& taps, int first, int count, int height,
            int width, std::size_t pixels, float* col)
{
    const std::size_t chunk_cols = static_cast<std::size_t>(count) * pixels;
    const int ntaps = static_cast<int>(taps.size());
    for (int ci = 0; ci < cin; ++ci) {
        for (int t = 0; t < ntaps; ++t) {
            const auto [dr, dc] = taps[t];
            float* row = col + (static_cast<std::size_t>(ci) * ntaps + t) * chunk_cols;
            for (int j = 0; j < count; ++j) {
                const int b = first + j;
                const int k = b % 4;
                const int h = k % 2 == 0 ? height : width;
                const int w = k % 2 == 0 ? width : height;
                const float* plane = src + ci * src_cols + static_cast<std::size_t>(b) * pixels;
                float* dst = row + static_cast<std::size_t>(j) * pixels;
                const int c0 = std::max(0, -dc);
                const int c1 = std::min(w, w - dc);
                for (int r = 0; r < h; ++r) {
                    float* out = dst + static_cast<std::size_t>(r) * w;
                    const int rr = r + dr;
                    if (rr < 0 || rr >= h || c0 >= c1) {
                        std::fill(out, out + w, 0.0f);
                        continue;
                    }
                    const float* in = plane + static_cast<std::size_t>(rr) * w;
                    std::fill(out, out + c0, 0.0f);
                    std::copy(in + c0 + dc, in + c1 + dc, out + c0);
                    std::fill(out + c1, out + w, 0.0f);
                }
            }
        }
    }
}

// Adjoint of im2col: accumulates a column-matrix gradient into the source.
void col2im(const float* col, int cin, const std::vector<std::pair<int, int>>& taps, int first,
            int count, int height, int width, std::size_t pixels, float* dst,
            std::size_t dst_cols)
{
    const std::size_t chunk_cols = static_cast<std::size_t>(count) * pixels;
    const int ntaps = static_cast<int>(taps.size());
    for (int ci = 0; ci < cin; ++ci) {
        for (int t = 0; t < ntaps; ++t) {
            const auto [dr, dc] = taps[t];
            const float* row = col + (static_cast<std::size_t>(ci) * ntaps + t) * chunk_cols;
            for (int j = 0; j < count; ++j) {
                const int b = first + j;
                const int k = b % 4;
                const int h = k % 2 == 0 ? height : width;
                const int w = k % 2 == 0 ? width : height;
                float* plane = dst + ci * dst_cols + static_cast<std::size_t>(b) * pixels;
                const float* src = row + static_cast<std::size_t>(j) * pixels;
                const int c0 = std::max(0, -dc);
                const int c1 = std::min(w, w - dc);
                for (int r = 0; r < h; ++r) {
                    const int rr = r + dr;
                    if (rr < 0 || rr >= h)
                        continue;
                    const float* g = src + static_cast<std::size_t>(r) * w;
                    float* out = plane + static_cast<std::size_t>(rr) * w;
                    for (int c = c0; c < c1; ++c)
                        out[c + dc] += g[c];
                }
            }
        }
    }
}

int instances_per_chunk(std::size_t rows, std::size_t pixels, int instances)
{
    const std::size_t per = std::max<std::size_t>(1, kColBudget / std::max<std::size_t>(1, rows * pixels));
    return static_cast<int>(std::min<std::size_t>(per, static_cast<std::size_t>(instances)));
}

} // namespace

void NetConfig::validate() const
{
    if (depth < 1)
        throw std::invalid_argument("network depth must be >= 1");
    if (width < 1)
        throw std::invalid_argument("network width must be >= 1");
    if (kernel < 3 || kernel % 2 == 0)
        throw std::invalid_argument("kernel size must be odd and >= 3");
    if (head_layers < 1)
        throw std::invalid_argument("head must have at least one 1x1 layer");
    if (!(leaky_slope >= 0.0 && leaky_slope < 1.0))
        throw std::invalid_argument("leaky slope must lie in [0, 1)");
}

BlindSpotNet::BlindSpotNet(NetState state) : state_(std::move(state))
{
    state_.config.validate();
    build_layout();
    if (state_.params.size() != param_count_)
        throw std::invalid_argument("parameter vector size " + std::to_string(state_.params.size()) +
                                    " does not match the configuration (" +
                                    std::to_string(param_count_) + ")");
    if (state_.buffers.size() != buffer_count_)
        throw std::invalid_argument("normalization buffer size does not match the configuration");
    grads_.assign(param_count_, 0.0f);
}

void BlindSpotNet::build_layout()
{
    const auto& cfg = state_.config;
    const int half = cfg.kernel / 2;
    std::size_t p = 0, b = 0;
    stack_.clear();
    norms_.clear();
    head_.clear();
    for (int l = 0; l < cfg.depth; ++l) {
        ConvSpec conv;
        conv.in = l == 0 ? 1 : cfg.width;
        conv.out = cfg.width;
        // first layer: own row only; later layers: own row and the rows above
        const int top = l == 0 ? 0 : -half;
        for (int dr = top; dr <= 0; ++dr)
            for (int dc = -half; dc <= half; ++dc)
                conv.taps.emplace_back(dr, dc);
        conv.weight = p;
        p += static_cast<std::size_t>(conv.out) * conv.in * conv.taps.size();
        stack_.push_back(conv);

        NormSpec norm;
        norm.gamma = p;
        p += cfg.width;
        norm.beta = p;
        p += cfg.width;
        norm.running_mean = b;
        b += cfg.width;
        norm.running_var = b;
        b += cfg.width;
        norms_.push_back(norm);
    }
    for (int h = 0; h < cfg.head_layers; ++h) {
        ConvSpec conv;
        conv.in = h == 0 ? 4 * cfg.width : cfg.width;
        conv.out = h + 1 == cfg.head_layers ? NetConfig::out_channels : cfg.width;
        conv.taps = {{0, 0}};
        conv.weight = p;
        p += static_cast<std::size_t>(conv.out) * conv.in;
        conv.bias = p;
        p += conv.out;
        head_.push_back(conv);
    }
    param_count_ = p;
    buffer_count_ = b;
}

void BlindSpotNet::zero_grad() { std::fill(grads_.begin(), grads_.end(), 0.0f); }

BlindSpotNet::BlindSpotNet(const NetConfig& config, std::uint64_t seed)
{
    config.validate();
    state_.config = config;
    build_layout();
    state_.params.assign(param_count_, 0.0f);
    state_.buffers.assign(buffer_count_, 0.0f);
    grads_.assign(param_count_, 0.0f);

    std::mt19937_64 rng(seed);
    const double slope = config.leaky_slope;
    const double gain = std::sqrt(2.0 / (1.0 + slope * slope));
    auto fill_normal = [&](std::size_t offset, std::size_t count, double stddev) {
        std::normal_distribution<double> normal(0.0, stddev);
        for (std::size_t i = 0; i < count; ++i)
            state_.params[offset + i] = static_cast<float>(normal(rng));
    };
    for (std::size_t l = 0; l < stack_.size(); ++l) {
        const auto& conv = stack_[l];
        const std::size_t fan_in = static_cast<std::size_t>(conv.in) * conv.taps.size();
        fill_normal(conv.weight, fan_in * conv.out, gain / std::sqrt(static_cast<double>(fan_in)));
        const auto& norm = norms_[l];
        std::fill_n(state_.params.begin() + static_cast<std::ptrdiff_t>(norm.gamma), config.width,
                    1.0f);
        std::fill_n(state_.buffers.begin() + static_cast<std::ptrdiff_t>(norm.running_var),
                    config.width, 1.0f);
    }
    for (std::size_t h = 0; h < head_.size(); ++h) {
        const auto& conv = head_[h];
        const bool last = h + 1 == head_.size();
        // near-zero raw outputs at start: alpha, beta ~ 1
        const double stddev = (last ? 0.1 : gain) / std::sqrt(static_cast<double>(conv.in));
        fill_normal(conv.weight, static_cast<std::size_t>(conv.in) * conv.out, stddev);
    }
}

BlindSpotNet build_network(const NetConfig& config, std::uint64_t seed)
{
    return BlindSpotNet(config, seed);
}

std::size_t parameter_count(const NetConfig& config)
{
    config.validate();
    const std::size_t half = config.kernel / 2;
    const std::size_t k = config.kernel, w = config.width;
    std::size_t n = k * w + 2 * w; // first layer + its normalization
    n += (config.depth - 1) * ((half + 1) * k * w * w + 2 * w);
    for (int h = 0; h < config.head_layers; ++h) {
        const std::size_t in = h == 0 ? 4 * w : w;
        const std::size_t out = h + 1 == config.head_layers ? NetConfig::out_channels : w;
        n += in * out + out;
    }
    return n;
}

BatchPrediction BlindSpotNet::run(std::span<const float> images, int batch, int height, int width,
                                  Mode mode, ForwardCache* cache,
                                  std::vector<float>* running) const
{
    const auto& cfg = state_.config;
    if (batch < 1)
        throw std::invalid_argument("batch must contain at least one image");
    if (height < cfg.kernel || width < cfg.kernel)
        throw std::invalid_argument("input of " + std::to_string(height) + "x" +
                                    std::to_string(width) + " is smaller than the kernel");
    if (images.size() != static_cast<std::size_t>(batch) * height * width)
        throw std::invalid_argument("image buffer size does not match batch geometry");
    for (float v : images)
        if (!std::isfinite(v))
            throw std::invalid_argument("non-finite value in network input");

    const Geometry geo(batch, height, width);
    const std::size_t P = geo.pixels;
    const std::size_t cols = geo.columns();
    const float slope = static_cast<float>(cfg.leaky_slope);
    const float* params = state_.params.data();

    // rotated copies of the input
    std::vector<float> act(cols);
    for (int n = 0; n < batch; ++n)
        for (int k = 0; k < 4; ++k) {
            const float* img = images.data() + static_cast<std::size_t>(n) * P;
            float* dst = act.data() + static_cast<std::size_t>(4 * n + k) * P;
            const auto& map = geo.src_index[k];
            for (std::size_t q = 0; q < P; ++q)
                dst[q] = img[map[q]];
        }

    if (cache) {
        *cache = ForwardCache{};
        cache->batch = batch;
        cache->height = height;
        cache->width = width;
        cache->mode = mode;
        cache->input = act;
    }

    std::vector<float> z, col;
    for (std::size_t l = 0; l < stack_.size(); ++l) {
        const auto& conv = stack_[l];
        const std::size_t rows = static_cast<std::size_t>(conv.in) * conv.taps.size();
        z.assign(static_cast<std::size_t>(conv.out) * cols, 0.0f);
        ConstMapRM weight(params + conv.weight, conv.out, static_cast<Eigen::Index>(rows));
        const int chunk = instances_per_chunk(rows, P, geo.instances());
        col.resize(rows * chunk * P);
        for (int first = 0; first < geo.instances(); first += chunk) {
            const int count = std::min(chunk, geo.instances() - first);
            const std::size_t ccols = static_cast<std::size_t>(count) * P;
            im2col(act.data(), cols, conv.in, conv.taps, first, count, height, width, P, col.data());
            ConstMapRM colmat(col.data(), static_cast<Eigen::Index>(rows),
                              static_cast<Eigen::Index>(ccols));
            StridedMapRM out(z.data() + static_cast<std::size_t>(first) * P, conv.out,
                             static_cast<Eigen::Index>(ccols), Eigen::OuterStride<>(cols));
            out.noalias() = weight * colmat;
        }

        // batch normalization + leaky ReLU
        const auto& norm = norms_[l];
        std::vector<float> mean(conv.out), inv_std(conv.out);
        for (int c = 0; c < conv.out; ++c) {
            const float* zc = z.data() + static_cast<std::size_t>(c) * cols;
            if (mode == Mode::train) {
                double s = 0.0;
                for (std::size_t i = 0; i < cols; ++i)
                    s += zc[i];
                const double m = s / static_cast<double>(cols);
                double ss = 0.0;
                for (std::size_t i = 0; i < cols; ++i) {
                    const double d = zc[i] - m;
                    ss += d * d;
                }
                const double var = ss / static_cast<double>(cols);
                mean[c] = static_cast<float>(m);
                inv_std[c] = static_cast<float>(1.0 / std::sqrt(var + kNormEps));
                if (running) {
                    const double unbiased = cols > 1 ? ss / static_cast<double>(cols - 1) : var;
                    float& rm = (*running)[norm.running_mean + c];
                    float& rv = (*running)[norm.running_var + c];
                    rm = static_cast<float>((1.0 - kNormMomentum) * rm + kNormMomentum * m);
                    rv = static_cast<float>((1.0 - kNormMomentum) * rv + kNormMomentum * unbiased);
                }
            } else {
                mean[c] = state_.buffers[norm.running_mean + c];
                inv_std[c] = 1.0f / std::sqrt(state_.buffers[norm.running_var + c] + kNormEps);
            }
        }
        if (cache) {
            cache->pre_norm.push_back(z);
            cache->mean.push_back(mean);
            cache->inv_std.push_back(inv_std);
        }
        act.resize(z.size());
        for (int c = 0; c < conv.out; ++c) {
            const float g = params[norm.gamma + c] * inv_std[c];
            const float bshift = params[norm.beta + c] - g * mean[c];
            const float* zc = z.data() + static_cast<std::size_t>(c) * cols;
            float* ac = act.data() + static_cast<std::size_t>(c) * cols;
            for (std::size_t i = 0; i < cols; ++i)
                ac[i] = leaky(g * zc[i] + bshift, slope);
        }
    }

    // shift down one row, rotate back, concatenate branches
    const int W = cfg.width;
    const std::size_t head_cols = static_cast<std::size_t>(batch) * P;
    std::vector<float> feat(static_cast<std::size_t>(4 * W) * head_cols, 0.0f);
    for (int n = 0; n < batch; ++n)
        for (int k = 0; k < 4; ++k) {
            const int iw = geo.inst_w(k);
            const auto& map = geo.src_index[k];
            const std::size_t inst = static_cast<std::size_t>(4 * n + k) * P;
            for (int c = 0; c < W; ++c) {
                const float* a = act.data() + static_cast<std::size_t>(c) * cols + inst;
                float* f = feat.data() + static_cast<std::size_t>(k * W + c) * head_cols +
                           static_cast<std::size_t>(n) * P;
                for (std::size_t q = static_cast<std::size_t>(iw); q < P; ++q)
                    f[map[q]] = a[q - iw];
            }
        }

    std::vector<float> x = std::move(feat);
    for (std::size_t h = 0; h < head_.size(); ++h) {
        const auto& conv = head_[h];
        if (cache)
            cache->head_in.push_back(x);
        std::vector<float> y(static_cast<std::size_t>(conv.out) * head_cols);
        ConstMapRM weight(params + conv.weight, conv.out, conv.in);
        ConstMapRM xin(x.data(), conv.in, static_cast<Eigen::Index>(head_cols));
        MapRM out(y.data(), conv.out, static_cast<Eigen::Index>(head_cols));
        out.noalias() = weight * xin;
        const bool last = h + 1 == head_.size();
        for (int c = 0; c < conv.out; ++c) {
            const float bias = params[conv.bias + c];
            float* yc = y.data() + static_cast<std::size_t>(c) * head_cols;
            for (std::size_t i = 0; i < head_cols; ++i)
                yc[i] = last ? yc[i] + bias : leaky(yc[i] + bias, slope);
        }
        x = std::move(y);
    }

    BatchPrediction pred;
    pred.batch = batch;
    pred.height = height;
    pred.width = width;
    pred.alpha.resize(head_cols);
    pred.beta.resize(head_cols);
    for (std::size_t i = 0; i < head_cols; ++i) {
        const double ra = std::clamp(static_cast<double>(x[i]), -kRawClamp, kRawClamp);
        const double rb = std::clamp(static_cast<double>(x[head_cols + i]), -kRawClamp, kRawClamp);
        pred.alpha[i] = static_cast<float>(std::exp(ra) + kAlphaFloor);
        pred.beta[i] = static_cast<float>(std::exp(rb) + kBetaFloor);
    }
    pred.raw = std::move(x);
    if (cache)
        cache->raw = pred.raw;
    return pred;
}

BatchPrediction BlindSpotNet::forward(std::span<const float> images, int batch, int height,
                                      int width, Mode mode, ForwardCache* cache)
{
    return run(images, batch, height, width, mode, cache,
               mode == Mode::train ? &state_.buffers : nullptr);
}

std::vector<float> BlindSpotNet::backward(const ForwardCache& cache, std::span<const float> d_alpha,
                                          std::span<const float> d_beta,
                                          const BackwardOptions& options)
{
    return backward_into(cache, d_alpha, d_beta, options,
                         options.parameter_gradient ? grads_.data() : nullptr);
}

std::vector<float> BlindSpotNet::backward_into(const ForwardCache& cache,
                                               std::span<const float> d_alpha,
                                               std::span<const float> d_beta,
                                               const BackwardOptions& options, float* grads) const
{
    const auto& cfg = state_.config;
    if (cache.raw.empty() || cache.pre_norm.size() != stack_.size())
        throw std::invalid_argument("backward requires a cache from a forward pass");
    const Geometry geo(cache.batch, cache.height, cache.width);
    const std::size_t P = geo.pixels;
    const std::size_t cols = geo.columns();
    const std::size_t head_cols = static_cast<std::size_t>(cache.batch) * P;
    if (d_alpha.size() != head_cols || d_beta.size() != head_cols)
        throw std::invalid_argument("output gradient size does not match the cached batch");
    const float slope = static_cast<float>(cfg.leaky_slope);
    const float* params = state_.params.data();
    const bool want_params = grads != nullptr;

    // d(loss)/d(raw)
    std::vector<float> dx(2 * head_cols);
    for (std::size_t i = 0; i < head_cols; ++i) {
        if (options.gradient_wrt_raw) {
            dx[i] = d_alpha[i];
            dx[head_cols + i] = d_beta[i];
            continue;
        }
        const double ra = cache.raw[i], rb = cache.raw[head_cols + i];
        dx[i] = std::abs(ra) < kRawClamp ? static_cast<float>(d_alpha[i] * std::exp(ra)) : 0.0f;
        dx[head_cols + i] =
            std::abs(rb) < kRawClamp ? static_cast<float>(d_beta[i] * std::exp(rb)) : 0.0f;
    }

    // head
    for (std::size_t hh = head_.size(); hh-- > 0;) {
        const auto& conv = head_[hh];
        const auto& xin = cache.head_in[hh];
        ConstMapRM xmat(xin.data(), conv.in, static_cast<Eigen::Index>(head_cols));
        MapRM dz(dx.data(), conv.out, static_cast<Eigen::Index>(head_cols));
        if (want_params) {
            MapRM dw(grads + conv.weight, conv.out, conv.in);
            dw.noalias() += dz * xmat.transpose();
            // plain loop: Eigen's vectorized sum peels by alignment and
            // would make the result depend on where the buffer landed
            for (int c = 0; c < conv.out; ++c) {
                const float* row = dx.data() + static_cast<std::size_t>(c) * head_cols;
                double s = 0.0;
                for (std::size_t i = 0; i < head_cols; ++i)
                    s += row[i];
                grads[conv.bias + c] += static_cast<float>(s);
            }
        }
        std::vector<float> dprev(static_cast<std::size_t>(conv.in) * head_cols);
        MapRM dp(dprev.data(), conv.in, static_cast<Eigen::Index>(head_cols));
        ConstMapRM weight(params + conv.weight, conv.out, conv.in);
        dp.noalias() = weight.transpose() * dz;
        if (hh > 0) {
            // input of this layer is the leaky output of the previous one
            for (std::size_t i = 0; i < dprev.size(); ++i)
                if (!(xin[i] > 0.0f))
                    dprev[i] *= slope;
        }
        dx = std::move(dprev);
    }

    // undo concatenation, rotation and shift
    const int W = cfg.width;
    std::vector<float> dact(static_cast<std::size_t>(W) * cols, 0.0f);
    for (int n = 0; n < cache.batch; ++n)
        for (int k = 0; k < 4; ++k) {
            if (!options.branches[k])
                continue;
            const int iw = geo.inst_w(k);
            const auto& map = geo.src_index[k];
            const std::size_t inst = static_cast<std::size_t>(4 * n + k) * P;
            for (int c = 0; c < W; ++c) {
                float* da = dact.data() + static_cast<std::size_t>(c) * cols + inst;
                const float* df = dx.data() + static_cast<std::size_t>(k * W + c) * head_cols +
                                  static_cast<std::size_t>(n) * P;
                for (std::size_t q = static_cast<std::size_t>(iw); q < P; ++q)
                    da[q - iw] = df[map[q]];
            }
        }

    // convolution stack
    std::vector<float> prev_act, col, dcol;
    auto activation_of = [&](std::size_t l, std::vector<float>& out) {
        const auto& norm = norms_[l];
        const int C = stack_[l].out;
        const auto& z = cache.pre_norm[l];
        out.resize(z.size());
        for (int c = 0; c < C; ++c) {
            const float g = params[norm.gamma + c] * cache.inv_std[l][c];
            const float bshift = params[norm.beta + c] - g * cache.mean[l][c];
            const float* zc = z.data() + static_cast<std::size_t>(c) * cols;
            float* ac = out.data() + static_cast<std::size_t>(c) * cols;
            for (std::size_t i = 0; i < cols; ++i)
                ac[i] = leaky(g * zc[i] + bshift, slope);
        }
    };

    std::vector<float> dinput;
    for (std::size_t l = stack_.size(); l-- > 0;) {
        const auto& conv = stack_[l];
        const auto& norm = norms_[l];
        const auto& z = cache.pre_norm[l];
        const int C = conv.out;

        // leaky ReLU and normalization, in place on dact -> dz
        for (int c = 0; c < C; ++c) {
            const float gamma = params[norm.gamma + c];
            const float beta = params[norm.beta + c];
            const float m = cache.mean[l][c];
            const float is = cache.inv_std[l][c];
            const float* zc = z.data() + static_cast<std::size_t>(c) * cols;
            float* dc = dact.data() + static_cast<std::size_t>(c) * cols;
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (std::size_t i = 0; i < cols; ++i) {
                const float xhat = (zc[i] - m) * is;
                if (!(gamma * xhat + beta > 0.0f))
                    dc[i] *= slope;
                sum_dy += dc[i];
                sum_dy_xhat += static_cast<double>(dc[i]) * xhat;
            }
            if (want_params) {
                grads[norm.gamma + c] += static_cast<float>(sum_dy_xhat);
                grads[norm.beta + c] += static_cast<float>(sum_dy);
            }
            if (cache.mode == Mode::train) {
                const double M = static_cast<double>(cols);
                const float mean_dy = static_cast<float>(sum_dy / M);
                const float mean_dy_xhat = static_cast<float>(sum_dy_xhat / M);
                for (std::size_t i = 0; i < cols; ++i) {
                    const float xhat = (zc[i] - m) * is;
                    dc[i] = gamma * is * (dc[i] - mean_dy - xhat * mean_dy_xhat);
                }
            } else {
                const float scale = gamma * is;
                for (std::size_t i = 0; i < cols; ++i)
                    dc[i] *= scale;
            }
        }

        const bool need_dprev = l > 0 || options.input_gradient;
        const float* input = nullptr;
        if (l == 0) {
            input = cache.input.data();
        } else {
            activation_of(l - 1, prev_act);
            input = prev_act.data();
        }
        const std::size_t rows = static_cast<std::size_t>(conv.in) * conv.taps.size();
        ConstMapRM weight(params + conv.weight, C, static_cast<Eigen::Index>(rows));
        std::vector<float> dprev;
        if (need_dprev)
            dprev.assign(static_cast<std::size_t>(conv.in) * cols, 0.0f);
        const int chunk = instances_per_chunk(rows, P, geo.instances());
        for (int first = 0; first < geo.instances(); first += chunk) {
            const int count = std::min(chunk, geo.instances() - first);
            const std::size_t ccols = static_cast<std::size_t>(count) * P;
            ConstStridedMapRM dz(dact.data() + static_cast<std::size_t>(first) * P, C,
                                 static_cast<Eigen::Index>(ccols), Eigen::OuterStride<>(cols));
            if (want_params) {
                col.resize(rows * ccols);
                im2col(input, cols, conv.in, conv.taps, first, count, geo.height, geo.width, P,
                       col.data());
                ConstMapRM colmat(col.data(), static_cast<Eigen::Index>(rows),
                                  static_cast<Eigen::Index>(ccols));
                MapRM dw(grads + conv.weight, C, static_cast<Eigen::Index>(rows));
                dw.noalias() += dz * colmat.transpose();
            }
            if (need_dprev) {
                dcol.resize(rows * ccols);
                MapRM dcolmat(dcol.data(), static_cast<Eigen::Index>(rows),
                              static_cast<Eigen::Index>(ccols));
                dcolmat.noalias() = weight.transpose() * dz;
                col2im(dcol.data(), conv.in, conv.taps, first, count, geo.height, geo.width, P,
                       dprev.data(), cols);
            }
        }
        if (l == 0) {
            dinput = std::move(dprev);
        } else {
            dact = std::move(dprev);
        }
    }

    if (!options.input_gradient)
        return {};
    std::vector<float> dimg(head_cols, 0.0f);
    for (int n = 0; n < cache.batch; ++n)
        for (int k = 0; k < 4; ++k) {
            const float* src = dinput.data() + static_cast<std::size_t>(4 * n + k) * P;
            float* dst = dimg.data() + static_cast<std::size_t>(n) * P;
            const auto& map = geo.src_index[k];
            for (std::size_t q = 0; q < P; ++q)
                dst[map[q]] += src[q];
        }
    return dimg;
}

namespace {

std::vector<float> to_float(const IntensityImage& img)
{
    std::vector<float> out(img.size());
    for (std::size_t i = 0; i < img.size(); ++i)
        out[i] = static_cast<float>(img[i]);
    return out;
}

InvGammaParams to_params(const BatchPrediction& pred)
{
    InvGammaParams params = InvGammaParams::uniform(pred.height, pred.width, 1.0, 1.0);
    for (std::size_t i = 0; i < params.alpha.size(); ++i) {
        params.alpha[i] = pred.alpha[i];
        params.beta[i] = pred.beta[i];
    }
    return params;
}

} // namespace

InvGammaParams BlindSpotNet::forward(const IntensityImage& noisy, Mode mode)
{
    const auto input = to_float(noisy);
    return to_params(forward(input, 1, noisy.height(), noisy.width(), mode));
}

InvGammaParams BlindSpotNet::predict(const IntensityImage& noisy) const
{
    const auto input = to_float(noisy);
    return to_params(run(input, 1, noisy.height(), noisy.width(), Mode::eval, nullptr, nullptr));
}

std::vector<float> BlindSpotNet::branch_features(const IntensityImage& noisy, int branch) const
{
    if (branch < 0 || branch > 3)
        throw std::invalid_argument("branch index must be 0..3");
    const auto input = to_float(noisy);
    ForwardCache cache;
    run(input, 1, noisy.height(), noisy.width(), Mode::eval, &cache, nullptr);
    const std::size_t n = static_cast<std::size_t>(state_.config.width) * noisy.size();
    const auto& feat = cache.head_in.front();
    return {feat.begin() + static_cast<std::ptrdiff_t>(branch * n),
            feat.begin() + static_cast<std::ptrdiff_t>((branch + 1) * n)};
}

SensitivityReport BlindSpotNet::receptive_field_report(int probe_size) const
{
    const int radius = receptive_radius();
    if (probe_size < 2 * radius + 1 || probe_size < state_.config.kernel)
        throw std::invalid_argument("probe must be at least 2 * radius + 1 = " +
                                    std::to_string(2 * radius + 1) + " pixels wide");
    SensitivityReport report;
    report.probe_size = probe_size;
    report.center_row = probe_size / 2;
    report.center_col = probe_size / 2;

    // strictly positive, non-constant probe content
    std::vector<float> probe(static_cast<std::size_t>(probe_size) * probe_size);
    std::mt19937_64 rng(0x5eed);
    std::uniform_real_distribution<float> uniform(0.5f, 1.5f);
    for (auto& v : probe)
        v = uniform(rng);

    ForwardCache cache;
    run(probe, 1, probe_size, probe_size, Mode::eval, &cache, nullptr);
    const std::size_t center =
        static_cast<std::size_t>(report.center_row) * probe_size + report.center_col;

    auto footprint_of = [&](std::array<bool, 4> branches) {
        std::vector<char> hit(probe.size(), 0);
        for (int channel = 0; channel < 2; ++channel) {
            std::vector<float> da(probe.size(), 0.0f), db(probe.size(), 0.0f);
            (channel == 0 ? da : db)[center] = 1.0f;
            BackwardOptions opts;
            opts.parameter_gradient = false;
            opts.input_gradient = true;
            opts.gradient_wrt_raw = true;
            opts.branches = branches;
            const auto g = backward_into(cache, da, db, opts, nullptr);
            for (std::size_t i = 0; i < g.size(); ++i)
                if (g[i] != 0.0f)
                    hit[i] = 1;
        }
        std::vector<std::pair<int, int>> positions;
        for (std::size_t i = 0; i < hit.size(); ++i)
            if (hit[i])
                positions.emplace_back(static_cast<int>(i) / probe_size,
                                       static_cast<int>(i) % probe_size);
        return positions;
    };

    report.footprint = footprint_of({true, true, true, true});
    std::vector<std::pair<int, int>> merged;
    report.branches_in_half_planes = true;
    const int cr = report.center_row, cc = report.center_col;
    for (int k = 0; k < 4; ++k) {
        std::array<bool, 4> only{};
        only[k] = true;
        report.branch_footprint[k] = footprint_of(only);
        for (const auto& [r, c] : report.branch_footprint[k]) {
            const bool inside = (k == 0 && r < cr) || (k == 1 && c > cc) || (k == 2 && r > cr) ||
                                (k == 3 && c < cc);
            report.branches_in_half_planes = report.branches_in_half_planes && inside;
            merged.emplace_back(r, c);
        }
    }
    std::sort(merged.begin(), merged.end());
    merged.erase(std::unique(merged.begin(), merged.end()), merged.end());
    report.union_matches = merged == report.footprint;
    report.center_excluded =
        std::find(report.footprint.begin(), report.footprint.end(), std::pair{cr, cc}) ==
        report.footprint.end();
    return report;
}

} // namespace despeckle
