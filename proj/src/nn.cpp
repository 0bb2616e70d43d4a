#include "up/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace up {

double activate(Activation a, double x) {
    switch (a) {
        case Activation::None: return x;
        case Activation::Relu: return x > 0 ? x : 0.0;
        case Activation::Softplus:
            if (x > 30.0) return x;
            if (x < -30.0) return std::exp(x);
            return std::log1p(std::exp(x));
        case Activation::Sigmoid: return 1.0 / (1.0 + std::exp(-x));
        case Activation::Tanh: return std::tanh(x);
    }
    return x;
}

double activate_grad(Activation a, double pre) {
    switch (a) {
        case Activation::None: return 1.0;
        case Activation::Relu: return pre > 0 ? 1.0 : 0.0;
        case Activation::Softplus: return 1.0 / (1.0 + std::exp(-pre));
        case Activation::Sigmoid: {
            const double s = 1.0 / (1.0 + std::exp(-pre));
            return s * (1.0 - s);
        }
        case Activation::Tanh: {
            const double t = std::tanh(pre);
            return 1.0 - t * t;
        }
    }
    return 1.0;
}

void MlpGrad::add(const MlpGrad& other) {
    for (size_t i = 0; i < d_weight.size(); ++i) {
        d_weight[i] += other.d_weight[i];
        d_bias[i] += other.d_bias[i];
    }
}

void MlpGrad::scale(double s) {
    for (size_t i = 0; i < d_weight.size(); ++i) {
        d_weight[i] *= s;
        d_bias[i] *= s;
    }
}

void MlpGrad::setZero() {
    for (size_t i = 0; i < d_weight.size(); ++i) {
        d_weight[i].setZero();
        d_bias[i].setZero();
    }
}

Mlp::Mlp(const std::vector<int>& dims, Activation hidden_act, Activation out_act,
         std::mt19937_64& rng) {
    if (dims.size() < 2) throw std::invalid_argument("mlp: need at least one layer");
    layers_.resize(dims.size() - 1);
    for (size_t i = 0; i + 1 < dims.size(); ++i) {
        const int in = dims[i], out = dims[i + 1];
        // uniform +-sqrt(6/(fan_in+fan_out)), biases zero
        const double bound = std::sqrt(6.0 / (in + out));
        std::uniform_real_distribution<double> dist(-bound, bound);
        MlpLayer& l = layers_[i];
        l.weight.resize(out, in);
        for (int r = 0; r < out; ++r)
            for (int c = 0; c < in; ++c) l.weight(r, c) = dist(rng);
        l.bias = Eigen::VectorXd::Zero(out);
        l.act = (i + 2 == dims.size()) ? out_act : hidden_act;
    }
}

int Mlp::in_dim() const { return layers_.empty() ? 0 : static_cast<int>(layers_.front().weight.cols()); }
int Mlp::out_dim() const { return layers_.empty() ? 0 : static_cast<int>(layers_.back().weight.rows()); }

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x, MlpCache* cache) const {
    if (x.rows() != in_dim()) throw std::invalid_argument("mlp forward: input dim mismatch");
    if (cache) {
        cache->input = x;
        cache->pre.clear();
        cache->pre.reserve(layers_.size());
    }
    Eigen::MatrixXd h = x;
    for (const MlpLayer& l : layers_) {
        Eigen::MatrixXd pre = (l.weight * h).colwise() + l.bias;
        if (cache) cache->pre.push_back(pre);
        h = pre.unaryExpr([&](double v) { return activate(l.act, v); });
    }
    return h;
}

Eigen::VectorXd Mlp::forward_vec(const Eigen::VectorXd& x, MlpCache* cache) const {
    return forward(Eigen::MatrixXd(x), cache).col(0);
}

Eigen::MatrixXd Mlp::backward(const MlpCache& cache, const Eigen::MatrixXd& grad_out,
                              MlpGrad* grad) const {
    if (cache.pre.size() != layers_.size()) throw std::invalid_argument("mlp backward: stale cache");
    if (grad_out.rows() != out_dim() || grad_out.cols() != cache.input.cols())
        throw std::invalid_argument("mlp backward: gradient shape mismatch");
    if (grad && grad->d_weight.empty()) *grad = zero_grad();

    Eigen::MatrixXd g = grad_out;
    for (int i = static_cast<int>(layers_.size()) - 1; i >= 0; --i) {
        const MlpLayer& l = layers_[static_cast<size_t>(i)];
        const Eigen::MatrixXd& pre = cache.pre[static_cast<size_t>(i)];
        // gradient through the activation
        Eigen::MatrixXd gp =
            g.cwiseProduct(pre.unaryExpr([&](double v) { return activate_grad(l.act, v); }));
        if (grad) {
            // input of layer i = activated output of layer i-1 (or the input)
            Eigen::MatrixXd layer_in =
                (i == 0) ? cache.input
                         : cache.pre[static_cast<size_t>(i - 1)].unaryExpr([&](double v) {
                               return activate(layers_[static_cast<size_t>(i - 1)].act, v);
                           }).eval();
            grad->d_weight[static_cast<size_t>(i)].noalias() += gp * layer_in.transpose();
            grad->d_bias[static_cast<size_t>(i)] += gp.rowwise().sum();
        }
        g.noalias() = l.weight.transpose() * gp;
    }
    return g;
}

MlpGrad Mlp::zero_grad() const {
    MlpGrad g;
    g.d_weight.reserve(layers_.size());
    g.d_bias.reserve(layers_.size());
    for (const MlpLayer& l : layers_) {
        g.d_weight.emplace_back(Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols()));
        g.d_bias.emplace_back(Eigen::VectorXd::Zero(l.bias.size()));
    }
    return g;
}

std::int64_t Mlp::param_count() const {
    std::int64_t n = 0;
    for (const MlpLayer& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
}

Eigen::VectorXd Mlp::flatten() const {
    Eigen::VectorXd p(param_count());
    std::int64_t at = 0;
    for (const MlpLayer& l : layers_) {
        for (int r = 0; r < l.weight.rows(); ++r)
            for (int c = 0; c < l.weight.cols(); ++c) p[at++] = l.weight(r, c);
        for (int r = 0; r < l.bias.size(); ++r) p[at++] = l.bias[r];
    }
    return p;
}

void Mlp::set_from_flat(const Eigen::VectorXd& p) {
    if (p.size() != param_count()) throw std::invalid_argument("mlp: flat size mismatch");
    std::int64_t at = 0;
    for (MlpLayer& l : layers_) {
        for (int r = 0; r < l.weight.rows(); ++r)
            for (int c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = p[at++];
        for (int r = 0; r < l.bias.size(); ++r) l.bias[r] = p[at++];
    }
}

Eigen::VectorXd Mlp::flatten_grad(const MlpGrad& g) const {
    Eigen::VectorXd out(param_count());
    std::int64_t at = 0;
    for (size_t i = 0; i < layers_.size(); ++i) {
        const auto& dw = g.d_weight[i];
        for (int r = 0; r < dw.rows(); ++r)
            for (int c = 0; c < dw.cols(); ++c) out[at++] = dw(r, c);
        for (int r = 0; r < g.d_bias[i].size(); ++r) out[at++] = g.d_bias[i][r];
    }
    return out;
}

// --- checkpoint format: magic "UPNN", version, layer dims + f32 params ----

namespace {
void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}
std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("UPNN: truncated stream");
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
           std::uint32_t(b[3]) << 24;
}
void put_f32s(std::ostream& os, const double* p, std::int64_t n) {
    std::vector<float> f(static_cast<size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) f[static_cast<size_t>(i)] = static_cast<float>(p[i]);
    os.write(reinterpret_cast<const char*>(f.data()), f.size() * sizeof(float));
}
void get_f32s(std::istream& is, double* p, std::int64_t n) {
    std::vector<float> f(static_cast<size_t>(n));
    is.read(reinterpret_cast<char*>(f.data()), f.size() * sizeof(float));
    if (!is) throw std::runtime_error("UPNN: truncated stream");
    for (std::int64_t i = 0; i < n; ++i) p[i] = f[static_cast<size_t>(i)];
}
}  // namespace

void Mlp::save(std::ostream& os) const {
    os.write("UPNN", 4);
    put_u32(os, 1);  // version
    put_u32(os, static_cast<std::uint32_t>(layers_.size()));
    for (const MlpLayer& l : layers_) {
        put_u32(os, static_cast<std::uint32_t>(l.weight.cols()));
        put_u32(os, static_cast<std::uint32_t>(l.weight.rows()));
        put_u32(os, static_cast<std::uint32_t>(l.act));
        const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> w = l.weight;
        put_f32s(os, w.data(), w.size());
        put_f32s(os, l.bias.data(), l.bias.size());
    }
    if (!os) throw std::runtime_error("UPNN: write failed");
}

Mlp Mlp::load(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "UPNN", 4) != 0) throw std::runtime_error("not a UPNN stream");
    if (get_u32(is) != 1) throw std::runtime_error("UPNN: unsupported version");
    const std::uint32_t n_layers = get_u32(is);
    if (n_layers > 64) throw std::runtime_error("UPNN: implausible layer count");
    Mlp mlp;
    mlp.layers_.resize(n_layers);
    for (MlpLayer& l : mlp.layers_) {
        const int in = static_cast<int>(get_u32(is));
        const int out = static_cast<int>(get_u32(is));
        const std::uint32_t act = get_u32(is);
        if (in <= 0 || out <= 0 || in > (1 << 20) || out > (1 << 20) || act > 4)
            throw std::runtime_error("UPNN: bad layer header");
        Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> w(out, in);
        get_f32s(is, w.data(), w.size());
        l.weight = w;
        l.bias.resize(out);
        get_f32s(is, l.bias.data(), out);
        l.act = static_cast<Activation>(act);
    }
    return mlp;
}

void Mlp::save_file(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    save(os);
}

Mlp Mlp::load_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    return load(is);
}

void AdamState::update(Eigen::Ref<Eigen::VectorXd> params, const Eigen::VectorXd& grads) {
    if (params.size() != grads.size()) throw std::invalid_argument("adam: size mismatch");
    if (m.size() != params.size()) {
        m = Eigen::VectorXd::Zero(params.size());
        v = Eigen::VectorXd::Zero(params.size());
        step = 0;
    }
    if (!grads.allFinite()) throw std::runtime_error("diverged");
    ++step;
    m = beta1 * m + (1.0 - beta1) * grads;
    v = beta2 * v + (1.0 - beta2) * grads.cwiseProduct(grads);
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    params -= (lr * (m / c1).array() / ((v / c2).array().sqrt() + eps)).matrix();
}

Eigen::Vector2d temporal_encode(double t) {
    if (!std::isfinite(t)) throw std::invalid_argument("temporal_encode: non-finite t");
    return {std::sin(M_PI * t), std::cos(M_PI * t)};
}

double grad_check(const std::function<double(const Eigen::VectorXd&)>& f,
                  const Eigen::VectorXd& params, const Eigen::VectorXd& analytic_grad,
                  int max_coords, std::mt19937_64& rng, double h) {
    if (params.size() != analytic_grad.size())
        throw std::invalid_argument("grad_check: size mismatch");
    const std::int64_t n = params.size();
    std::vector<std::int64_t> coords;
    if (n <= max_coords) {
        coords.resize(static_cast<size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    } else {
        std::uniform_int_distribution<std::int64_t> dist(0, n - 1);
        for (int i = 0; i < max_coords; ++i) coords.push_back(dist(rng));
    }
    double worst = 0.0;
    Eigen::VectorXd p = params;
    for (std::int64_t c : coords) {
        const double hc = h * std::max(1.0, std::abs(p[c]));
        const double orig = p[c];
        p[c] = orig + hc;
        const double fp = f(p);
        p[c] = orig - hc;
        const double fm = f(p);
        p[c] = orig;
        const double fd = (fp - fm) / (2.0 * hc);
        const double a = analytic_grad[c];
        const double scale = std::max(std::abs(a), std::abs(fd));
        if (scale < 1e-6) continue;  // both effectively zero
        worst = std::max(worst, std::abs(a - fd) / scale);
    }
    return worst;
}

}  // namespace up
