// Minimal dense / per-pixel MLP machinery with hand-written reverse-mode
// gradients, plus the temporal encoding and a bias-corrected adaptive-moment
// optimizer. Hosts every decoder and uncertainty head in the system; the
// "convolutions" of the per-pixel heads are 1x1, i.e. a dense layer applied
// independently at each pixel, which is what the batch interface does.

#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace up {

enum class Activation : std::uint32_t { None = 0, Relu = 1, Softplus = 2, Sigmoid = 3, Tanh = 4 };

double activate(Activation a, double x);
double activate_grad(Activation a, double pre);  // d act / d pre-activation

struct MlpLayer {
    Eigen::MatrixXd weight;  // out x in
    Eigen::VectorXd bias;    // out
    Activation act = Activation::None;
};

struct MlpGrad {
    std::vector<Eigen::MatrixXd> d_weight;
    std::vector<Eigen::VectorXd> d_bias;

    void add(const MlpGrad& other);
    void scale(double s);
    void setZero();
};

// Cached pre-activations from a batched forward pass; column i of each
// matrix belongs to input column i.
struct MlpCache {
    Eigen::MatrixXd input;
    std::vector<Eigen::MatrixXd> pre;  // per layer, out x n
};

class Mlp {
  public:
    Mlp() = default;
    // dims = {in, hidden..., out}; hidden_act applied to all but the last
    // layer, out_act to the last.
    Mlp(const std::vector<int>& dims, Activation hidden_act, Activation out_act,
        std::mt19937_64& rng);

    int in_dim() const;
    int out_dim() const;
    bool empty() const { return layers_.empty(); }
    const std::vector<MlpLayer>& layers() const { return layers_; }
    std::vector<MlpLayer>& layers_mut() { return layers_; }

    // x: in_dim x n (each column one sample). Deterministic.
    Eigen::MatrixXd forward(const Eigen::MatrixXd& x, MlpCache* cache = nullptr) const;
    Eigen::VectorXd forward_vec(const Eigen::VectorXd& x, MlpCache* cache = nullptr) const;

    // grad_out: out_dim x n gradients. Returns gradient w.r.t. the input and
    // accumulates parameter gradients into *grad (shape-checked lazily).
    Eigen::MatrixXd backward(const MlpCache& cache, const Eigen::MatrixXd& grad_out,
                             MlpGrad* grad) const;

    MlpGrad zero_grad() const;

    // Flattened parameter vector (row-major weights then bias, layer order).
    Eigen::VectorXd flatten() const;
    void set_from_flat(const Eigen::VectorXd& p);
    Eigen::VectorXd flatten_grad(const MlpGrad& g) const;
    std::int64_t param_count() const;

    void save(std::ostream& os) const;
    static Mlp load(std::istream& is);
    void save_file(const std::string& path) const;
    static Mlp load_file(const std::string& path);

  private:
    std::vector<MlpLayer> layers_;
};

// --- optimizer -------------------------------------------------------------

// Bias-corrected adaptive-moment update over a flat parameter vector.
struct AdamState {
    Eigen::VectorXd m, v;
    std::int64_t step = 0;
    double lr = 2e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    explicit AdamState(std::int64_t n = 0, double lr_ = 2e-3)
        : m(Eigen::VectorXd::Zero(n)), v(Eigen::VectorXd::Zero(n)), lr(lr_) {}

    // Throws "diverged" on non-finite gradients.
    void update(Eigen::Ref<Eigen::VectorXd> params, const Eigen::VectorXd& grads);
};

// --- temporal encoding -------------------------------------------------

// (sin(pi t), cos(pi t)); unit norm for every t.
Eigen::Vector2d temporal_encode(double t);

// --- gradient checking ----------------------------------------------------

// Central finite differences of f at params against analytic_grad, sampled
// at up to max_coords coordinates. Returns the max relative error.
double grad_check(const std::function<double(const Eigen::VectorXd&)>& f,
                  const Eigen::VectorXd& params, const Eigen::VectorXd& analytic_grad,
                  int max_coords, std::mt19937_64& rng, double h = 1e-5);

}  // namespace up
