#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "bathykl/cloud.hpp"
#include "bathykl/mccov.hpp"

namespace bathykl::net {

using cloud::NormalizedCloud;
using cloud::Submap;
using mccov::DatasetEntry;

enum class Mode { Train, Eval };

/// Architecture of the feature extractor (shared per-point MLP, max-pooled)
/// and the covariance head. The feature dimension Z is the last per-point
/// width; the head emits (M^2-M)/2 + M Cholesky parameters.
struct ModelConfig {
    std::vector<int> point_mlp_sizes{64, 64, 64, 128, 1024};
    std::vector<int> head_sizes{1000, 1000, 1000, 1000};
    int output_dim = 2;  // M
    double dropout_p = 0.4;
    bool use_input_transform = false;  // enables the input (3x3) and feature T-nets
    std::vector<int> tnet_mlp_sizes{64, 128, 1024};
    std::vector<int> tnet_fc_sizes{512, 256};
    double bn_eps = 1e-5;
    double bn_momentum = 0.1;
    // Bias of the log-variance outputs at init; the untrained model predicts
    // exp(this) * I, the flat-terrain limit.
    double init_log_variance = 2.1972245773362196;  // ln 9

    int feature_dim() const { return point_mlp_sizes.back(); }
    int n_cholesky() const { return (output_dim * output_dim - output_dim) / 2 + output_dim; }
    void validate() const;
};

/// Raw head outputs: l fills a lower unitriangular matrix in row-major
/// order, d holds log-variances.
struct CholeskyParams {
    Eigen::VectorXd l;
    Eigen::VectorXd d;
};

/// Sigma = L(l) diag(exp(d)) L(l)^T; positive definite for all finite inputs.
Eigen::MatrixXd compose_covariance(const CholeskyParams& cp);

/// D_KL(N(mean_target, target) || N(mean_predicted, predicted)).
/// Throws NotPositiveDefinite when either covariance is not PD.
double kl_divergence(const Eigen::MatrixXd& target, const Eigen::VectorXd& mean_target,
                     const Eigen::MatrixXd& predicted, const Eigen::VectorXd& mean_predicted);
/// Zero-mean shorthand used by the pipeline.
double kl_divergence(const Eigen::MatrixXd& target, const Eigen::MatrixXd& predicted);

/// Named view into the flat parameter / buffer vectors.
struct ArrayRef {
    std::string name;
    int offset = 0;
    int rows = 0;
    int cols = 0;
    bool decay = false;  // participates in L2 weight decay (linear weights only)
};

struct Batch {
    std::vector<const NormalizedCloud*> clouds;
    std::vector<Eigen::MatrixXd> targets;

    std::size_t size() const { return clouds.size(); }
};

Batch make_batch(const std::vector<DatasetEntry>& dataset, const std::vector<int>& indices);

/// The model: owns the flat trainable parameters and the batch-norm running
/// statistics. Forward evaluation with frozen parameters is const and safe
/// to call concurrently.
class Model {
public:
    Model(ModelConfig cfg, std::uint64_t init_seed);

    const ModelConfig& config() const { return cfg_; }
    Eigen::VectorXd& params() { return params_; }
    const Eigen::VectorXd& params() const { return params_; }
    Eigen::VectorXd& buffers() { return buffers_; }
    const Eigen::VectorXd& buffers() const { return buffers_; }
    const std::vector<ArrayRef>& param_arrays() const { return param_arrays_; }
    const std::vector<ArrayRef>& buffer_arrays() const { return buffer_arrays_; }
    std::vector<char> decay_mask() const;  // one flag per flat parameter element

    /// Mean KL over the batch. Train mode uses batch statistics and fresh
    /// dropout masks drawn from dropout_seed; running statistics are updated
    /// only when update_running is set.
    double loss_batch(const Batch& batch, Mode mode, std::uint64_t dropout_seed = 0,
                      bool update_running = false);

    /// Covariance emitted for every cloud of the batch under the same
    /// forward pass loss_batch would run.
    std::vector<Eigen::MatrixXd> covariances(const Batch& batch, Mode mode,
                                             std::uint64_t dropout_seed = 0);

    /// Exact reverse-mode gradient of the train-mode batch loss at the given
    /// dropout seed. Returns the loss. Throws NonFiniteGradient.
    double backward(const Batch& batch, std::uint64_t dropout_seed, Eigen::VectorXd& grad,
                    bool update_running = false);

    /// Z-dimensional descriptor of a single cloud. Throws EmptyCloud.
    Eigen::VectorXd forward_feature(const NormalizedCloud& cloud, Mode mode,
                                    std::uint64_t dropout_seed = 0);

    /// Head output for a single feature vector.
    CholeskyParams forward_head(const Eigen::VectorXd& feature, Mode mode,
                                std::uint64_t dropout_seed = 0);

    /// Eval-mode covariance prediction for a normalized cloud.
    Eigen::MatrixXd predict_cov(const NormalizedCloud& cloud) const;

private:
    friend struct ModelAccess;
    ModelConfig cfg_;
    Eigen::VectorXd params_;
    Eigen::VectorXd buffers_;
    std::vector<ArrayRef> param_arrays_;
    std::vector<ArrayRef> buffer_arrays_;
};

struct TrainConfig {
    double learning_rate = 1e-4;
    double weight_decay = 1e-4;
    int batch_size = 500;
    double validation_fraction = 0.2;
    int patience = 20;
    int max_episodes = 1000;
    std::uint64_t seed = 0;

    void validate() const;
};

struct AmsGradState {
    Eigen::VectorXd m, v, vmax;
    std::int64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    explicit AmsGradState(Eigen::Index n = 0)
        : m(Eigen::VectorXd::Zero(n)), v(Eigen::VectorXd::Zero(n)), vmax(Eigen::VectorXd::Zero(n)) {}
};

/// One AMSGrad update with bias correction; L2 weight decay is added to the
/// gradient of parameters flagged in decay_mask before the moment updates.
void amsgrad_step(Eigen::VectorXd& params, const Eigen::VectorXd& grads, AmsGradState& state,
                  double learning_rate, double weight_decay, const std::vector<char>& decay_mask);

struct EpisodeRow {
    int episode = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
};

struct TrainResult {
    Model model;  // best-validation parameters and buffers
    std::vector<EpisodeRow> history;
    int best_episode = 0;
    double best_val = 0.0;
    int episodes_run = 0;
};

/// Random-subset (with replacement) SGD with AMSGrad, early stopping on the
/// sampled validation loss. Episode 0 of the history is the untrained model.
TrainResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                  const std::vector<DatasetEntry>& dataset);

/// preprocess -> eval forward -> compose. Requires output_dim == 2.
Eigen::Matrix2d predict(const Model& model, const Submap& submap, double voxel_size);

// Checkpoint format: 5 magic bytes "PNKL1", little-endian u64 JSON header
// length, JSON header (config, array names/shapes in file order, episode,
// best validation loss), then the arrays as contiguous little-endian f64.
void save_checkpoint(const std::filesystem::path& path, const Model& model, int episode,
                     double best_validation_loss);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace bathykl::net
