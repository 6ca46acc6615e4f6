#include "bathykl/net.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "bathykl/errors.hpp"

namespace bathykl::net {

using Eigen::ArrayXd;
using Eigen::MatrixXd;
using Eigen::RowVectorXd;
using Eigen::VectorXd;

void ModelConfig::validate() const {
    if (point_mlp_sizes.empty() || head_sizes.empty()) {
        throw ConfigError("point_mlp_sizes and head_sizes must be non-empty");
    }
    for (int s : point_mlp_sizes) {
        if (s < 1) throw ConfigError("point_mlp_sizes entries must be >= 1");
    }
    for (int s : head_sizes) {
        if (s < 1) throw ConfigError("head_sizes entries must be >= 1");
    }
    if (output_dim < 1) throw ConfigError("output_dim must be >= 1");
    if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("dropout_p must lie in [0, 1)");
    if (bn_eps <= 0 || bn_momentum <= 0 || bn_momentum > 1) {
        throw ConfigError("bad batch-norm eps/momentum");
    }
    if (use_input_transform && (tnet_mlp_sizes.empty() || tnet_fc_sizes.empty())) {
        throw ConfigError("T-net sizes must be non-empty when the transform is enabled");
    }
}

void TrainConfig::validate() const {
    if (learning_rate <= 0 || weight_decay < 0 || batch_size < 1) {
        throw ConfigError("bad learning_rate / weight_decay / batch_size");
    }
    if (validation_fraction <= 0.0 || validation_fraction >= 1.0) {
        throw ConfigError("validation_fraction must lie in (0, 1)");
    }
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (max_episodes < 1) throw ConfigError("max_episodes must be >= 1");
}

// --- covariance composition ---------------------------------------------------

Eigen::MatrixXd compose_covariance(const CholeskyParams& cp) {
    const int t = static_cast<int>(cp.l.size());
    const int m = static_cast<int>(cp.d.size());
    if (t != (m * m - m) / 2) {
        throw ConfigError("compose_covariance: inconsistent l/d sizes");
    }
    MatrixXd lower = MatrixXd::Identity(m, m);
    int idx = 0;
    for (int i = 1; i < m; ++i) {
        for (int j = 0; j < i; ++j) {
            lower(i, j) = cp.l[idx++];
        }
    }
    return lower * cp.d.array().exp().matrix().asDiagonal() * lower.transpose();
}

namespace {

// Gradient of <g, Sigma> through Sigma = L diag(exp(d)) L^T back to (l, d).
void compose_backward(const MatrixXd& g, const MatrixXd& lower, const VectorXd& exp_d,
                      VectorXd& dl, VectorXd& dd) {
    const int m = static_cast<int>(exp_d.size());
    const MatrixXd dlower = 2.0 * g * lower * exp_d.asDiagonal();
    dl.resize((m * m - m) / 2);
    int idx = 0;
    for (int i = 1; i < m; ++i) {
        for (int j = 0; j < i; ++j) {
            dl[idx++] = dlower(i, j);
        }
    }
    const VectorXd de = (lower.transpose() * g * lower).diagonal();
    dd = de.cwiseProduct(exp_d);
}

double log_det_from_llt(const Eigen::LLT<MatrixXd>& llt) {
    return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

Eigen::LLT<MatrixXd> checked_llt(const MatrixXd& m, const char* what) {
    Eigen::LLT<MatrixXd> llt(m);
    if (llt.info() != Eigen::Success || (llt.matrixLLT().diagonal().array() <= 0.0).any()) {
        throw NotPositiveDefinite(std::string(what) + " is not positive definite");
    }
    return llt;
}

}  // namespace

double kl_divergence(const MatrixXd& target, const VectorXd& mean_target,
                     const MatrixXd& predicted, const VectorXd& mean_predicted) {
    const int m = static_cast<int>(target.rows());
    if (predicted.rows() != m || mean_target.size() != m || mean_predicted.size() != m) {
        throw ConfigError("kl_divergence: dimension mismatch");
    }
    const auto llt_p = checked_llt(predicted, "predicted covariance");
    const auto llt_t = checked_llt(target, "target covariance");
    const double trace = llt_p.solve(target).trace();
    const VectorXd delta = mean_predicted - mean_target;
    const double quad = delta.dot(llt_p.solve(delta));
    return 0.5 * (trace + quad - m + log_det_from_llt(llt_p) - log_det_from_llt(llt_t));
}

double kl_divergence(const MatrixXd& target, const MatrixXd& predicted) {
    const VectorXd zero = VectorXd::Zero(target.rows());
    return kl_divergence(target, zero, predicted, zero);
}

// --- layout -------------------------------------------------------------------

namespace {

struct LinearSpec {
    int w = -1, b = -1;
    int in = 0, out = 0;
};

struct BnSpec {
    int gamma = -1, beta = -1;  // params
    int rmean = -1, rvar = -1;  // buffers
    int dim = 0;
};

struct StackSpec {
    std::vector<LinearSpec> linear;
    std::vector<BnSpec> bn;
    bool dropout = false;
    int dropout_stream_base = 0;  // stream index of the first stage
};

struct TNetSpec {
    bool present = false;
    int dim = 0;
    StackSpec point_stack;
    StackSpec fc_stack;
    LinearSpec final_linear;
};

struct Layout {
    TNetSpec tnet_input;    // 3x3
    StackSpec phi_a;        // point stages before the feature transform
    TNetSpec tnet_feature;  // FxF, applied between phi_a and phi_b
    StackSpec phi_b;
    StackSpec head;
    LinearSpec out_linear;
    std::vector<ArrayRef> params;
    std::vector<ArrayRef> buffers;
    int param_size = 0;
    int buffer_size = 0;
};

struct Builder {
    Layout* layout;

    int add_param(const std::string& name, int rows, int cols, bool decay) {
        layout->params.push_back({name, layout->param_size, rows, cols, decay});
        layout->param_size += rows * cols;
        return static_cast<int>(layout->params.size()) - 1;
    }
    int add_buffer(const std::string& name, int rows, int cols) {
        layout->buffers.push_back({name, layout->buffer_size, rows, cols, false});
        layout->buffer_size += rows * cols;
        return static_cast<int>(layout->buffers.size()) - 1;
    }

    LinearSpec linear(const std::string& name, int in, int out) {
        LinearSpec spec;
        spec.in = in;
        spec.out = out;
        spec.w = add_param(name + ".weight", out, in, true);
        spec.b = add_param(name + ".bias", out, 1, false);
        return spec;
    }
    BnSpec bn(const std::string& name, int dim) {
        BnSpec spec;
        spec.dim = dim;
        spec.gamma = add_param(name + ".gamma", dim, 1, false);
        spec.beta = add_param(name + ".beta", dim, 1, false);
        spec.rmean = add_buffer(name + ".running_mean", dim, 1);
        spec.rvar = add_buffer(name + ".running_var", dim, 1);
        return spec;
    }
    StackSpec stack(const std::string& name, int in, const std::vector<int>& sizes, bool dropout) {
        StackSpec spec;
        spec.dropout = dropout;
        int d = in;
        for (std::size_t k = 0; k < sizes.size(); ++k) {
            const std::string stage = name + "." + std::to_string(k);
            spec.linear.push_back(linear(stage, d, sizes[k]));
            spec.bn.push_back(bn(stage + ".bn", sizes[k]));
            d = sizes[k];
        }
        return spec;
    }
    TNetSpec tnet(const std::string& name, int dim, const std::vector<int>& mlp_sizes,
                  const std::vector<int>& fc_sizes) {
        TNetSpec spec;
        spec.present = true;
        spec.dim = dim;
        spec.point_stack = stack(name + ".mlp", dim, mlp_sizes, false);
        spec.fc_stack = stack(name + ".fc", mlp_sizes.back(), fc_sizes, false);
        spec.final_linear = linear(name + ".final", fc_sizes.back(), dim * dim);
        return spec;
    }
};

Layout build_layout(const ModelConfig& cfg) {
    cfg.validate();
    Layout layout;
    Builder b{&layout};

    if (cfg.use_input_transform) {
        layout.tnet_input = b.tnet("tnet3", 3, cfg.tnet_mlp_sizes, cfg.tnet_fc_sizes);
    }

    // With the feature transform enabled the point MLP splits after its
    // second stage, mirroring the original extractor.
    const bool feature_tf = cfg.use_input_transform && cfg.point_mlp_sizes.size() >= 2;
    const std::size_t split = feature_tf ? 2 : cfg.point_mlp_sizes.size();
    const std::vector<int> sizes_a(cfg.point_mlp_sizes.begin(), cfg.point_mlp_sizes.begin() + split);
    const std::vector<int> sizes_b(cfg.point_mlp_sizes.begin() + split, cfg.point_mlp_sizes.end());
    layout.phi_a = b.stack("phi", 3, sizes_a, false);
    if (feature_tf) {
        layout.tnet_feature =
            b.tnet("tnetf", cfg.point_mlp_sizes[1], cfg.tnet_mlp_sizes, cfg.tnet_fc_sizes);
        StackSpec phi_b = b.stack("phi_b", cfg.point_mlp_sizes[1], sizes_b, false);
        layout.phi_b = phi_b;
    }

    layout.head = b.stack("head", cfg.feature_dim(), cfg.head_sizes, true);
    layout.out_linear = b.linear("out", cfg.head_sizes.back(), cfg.n_cholesky());
    return layout;
}

using MatMap = Eigen::Map<MatrixXd>;
using ConstMatMap = Eigen::Map<const MatrixXd>;

ConstMatMap cview(const VectorXd& flat, const ArrayRef& a) {
    return {flat.data() + a.offset, a.rows, a.cols};
}
MatMap view(VectorXd& flat, const ArrayRef& a) { return {flat.data() + a.offset, a.rows, a.cols}; }

/// Everything a forward/backward pass needs, with optional running-stat
/// output (nullptr = pure evaluation).
struct Tensors {
    const Layout& layout;
    const VectorXd& params;
    const VectorXd& buffers;
    VectorXd* buffers_out = nullptr;

    ConstMatMap p(int id) const { return cview(params, layout.params[id]); }
    ConstMatMap buf(int id) const { return cview(buffers, layout.buffers[id]); }
};

// --- forward caches -------------------------------------------------------

struct StageCache {
    MatrixXd input;
    MatrixXd xhat;
    ArrayXd inv_std;
    MatrixXd dropout_mask;
};

struct StackCache {
    std::vector<StageCache> stages;
    MatrixXd output;
};

struct PoolCache {
    std::vector<int> argmax;  // b * channels + c -> row index
};

struct TNetCache {
    StackCache point;
    PoolCache pool;
    StackCache fc;
    MatrixXd fc_input;    // pooled features (input to the fc stack)
    MatrixXd fc_out;      // fc stack output (input to the final linear)
    MatrixXd transforms;  // B x dim^2, row-major per cloud, identity added
    MatrixXd pre_transform;  // the matrix the transform was applied to
};

struct Trace {
    std::vector<int> offsets;
    MatrixXd x0;
    TNetCache tnet3;
    StackCache phi_a;
    TNetCache tnetf;
    StackCache phi_b;
    PoolCache pool;
    StackCache head;
    MatrixXd out;  // B x n_cholesky
    std::vector<MatrixXd> lower;
    std::vector<VectorXd> exp_d;
    std::vector<MatrixXd> sigma;
};

// --- primitive forward/backward operations ---------------------------------

MatrixXd linear_forward(const Tensors& t, const LinearSpec& spec, const MatrixXd& x) {
    MatrixXd y = x * t.p(spec.w).transpose();
    y.rowwise() += t.p(spec.b).transpose().row(0);
    return y;
}

void linear_backward(const Tensors& t, const LinearSpec& spec, const MatrixXd& input,
                     const MatrixXd& dout, VectorXd& grad, MatrixXd* dinput) {
    const Layout& lo = t.layout;
    view(grad, lo.params[spec.w]).noalias() += dout.transpose() * input;
    view(grad, lo.params[spec.b]).col(0).noalias() += dout.colwise().sum().transpose();
    if (dinput) {
        dinput->noalias() = dout * t.p(spec.w);
    }
}

void bn_forward(const Tensors& t, const BnSpec& spec, Mode mode, MatrixXd& x, StageCache* cache,
                double eps, double momentum) {
    const auto n = x.rows();
    const RowVectorXd gamma = t.p(spec.gamma).transpose().row(0);
    const RowVectorXd beta = t.p(spec.beta).transpose().row(0);

    ArrayXd inv_std;
    if (mode == Mode::Train) {
        const RowVectorXd mu = x.colwise().mean();
        x.rowwise() -= mu;
        const RowVectorXd var = x.array().square().colwise().mean();
        inv_std = 1.0 / (var.transpose().array() + eps).sqrt();
        if (t.buffers_out) {
            const double unbias = n > 1 ? static_cast<double>(n) / (n - 1.0) : 1.0;
            auto rm = view(*t.buffers_out, t.layout.buffers[spec.rmean]);
            auto rv = view(*t.buffers_out, t.layout.buffers[spec.rvar]);
            rm.col(0) = (1.0 - momentum) * rm.col(0) + momentum * mu.transpose();
            rv.col(0) = (1.0 - momentum) * rv.col(0) + momentum * unbias * var.transpose();
        }
    } else {
        const RowVectorXd rm = t.buf(spec.rmean).transpose().row(0);
        const RowVectorXd rv = t.buf(spec.rvar).transpose().row(0);
        inv_std = 1.0 / (rv.transpose().array() + eps).sqrt();
        x.rowwise() -= rm;
    }
    x.array().rowwise() *= inv_std.transpose();
    if (cache) {
        cache->xhat = x;
        cache->inv_std = std::move(inv_std);
    }
    x.array().rowwise() *= gamma.array();
    x.rowwise() += beta;
}

// Train-mode batch-statistics backward.
void bn_backward(const Tensors& t, const BnSpec& spec, const StageCache& cache, MatrixXd& dy,
                 VectorXd& grad) {
    const Layout& lo = t.layout;
    const auto n = static_cast<double>(dy.rows());
    const RowVectorXd gamma = t.p(spec.gamma).transpose().row(0);

    view(grad, lo.params[spec.gamma]).col(0) +=
        (dy.array() * cache.xhat.array()).colwise().sum().matrix().transpose();
    view(grad, lo.params[spec.beta]).col(0) += dy.colwise().sum().transpose();

    dy.array().rowwise() *= gamma.array();  // now dxhat
    const RowVectorXd sum_d = dy.colwise().sum();
    const RowVectorXd sum_dx = (dy.array() * cache.xhat.array()).colwise().sum();
    dy *= n;
    dy.rowwise() -= sum_d;
    dy -= (cache.xhat.array().rowwise() * sum_dx.array()).matrix();
    dy.array().rowwise() *= (cache.inv_std / n).transpose();
}

void dropout_forward(MatrixXd& x, double p, Rng& rng, StageCache& cache) {
    const double scale = 1.0 / (1.0 - p);
    cache.dropout_mask.resize(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        for (Eigen::Index c = 0; c < x.cols(); ++c) {
            cache.dropout_mask(r, c) = rng.uniform01() < p ? 0.0 : scale;
        }
    }
    x.array() *= cache.dropout_mask.array();
}

MatrixXd stack_forward(const Tensors& t, const StackSpec& spec, Mode mode, double dropout_p,
                       std::uint64_t dropout_seed, double eps, double momentum, MatrixXd x,
                       StackCache* cache) {
    if (cache) cache->stages.resize(spec.linear.size());
    for (std::size_t k = 0; k < spec.linear.size(); ++k) {
        StageCache* sc = cache ? &cache->stages[k] : nullptr;
        if (sc) sc->input = x;
        x = linear_forward(t, spec.linear[k], x);
        bn_forward(t, spec.bn[k], mode, x, sc, eps, momentum);
        if (spec.dropout && mode == Mode::Train && dropout_p > 0.0) {
            Rng rng(derive_seed(dropout_seed, 0xd70ULL,
                                static_cast<std::uint64_t>(spec.dropout_stream_base + k)));
            StageCache local;
            dropout_forward(x, dropout_p, rng, sc ? *sc : local);
        }
        x = x.cwiseMax(0.0);
    }
    if (cache) cache->output = x;
    return x;
}

// dout is consumed. Returns the gradient w.r.t. the stack input.
MatrixXd stack_backward(const Tensors& t, const StackSpec& spec, const StackCache& cache,
                        MatrixXd dout, VectorXd& grad) {
    for (int k = static_cast<int>(spec.linear.size()) - 1; k >= 0; --k) {
        const StageCache& sc = cache.stages[k];
        const MatrixXd& stage_out =
            k + 1 < static_cast<int>(spec.linear.size()) ? cache.stages[k + 1].input : cache.output;
        dout.array() *= (stage_out.array() > 0.0).cast<double>();
        if (sc.dropout_mask.size() > 0) {
            dout.array() *= sc.dropout_mask.array();
        }
        bn_backward(t, spec.bn[k], sc, dout, grad);
        MatrixXd dinput;
        linear_backward(t, spec.linear[k], sc.input, dout, grad, &dinput);
        dout = std::move(dinput);
    }
    return dout;
}

MatrixXd maxpool_forward(const MatrixXd& x, const std::vector<int>& offsets, PoolCache* cache) {
    const int n_clouds = static_cast<int>(offsets.size()) - 1;
    const auto channels = x.cols();
    MatrixXd pooled(n_clouds, channels);
    if (cache) cache->argmax.assign(static_cast<std::size_t>(n_clouds) * channels, 0);
    for (int b = 0; b < n_clouds; ++b) {
        const int begin = offsets[b], end = offsets[b + 1];
        for (Eigen::Index c = 0; c < channels; ++c) {
            int best = begin;
            double best_v = x(begin, c);
            for (int r = begin + 1; r < end; ++r) {
                if (x(r, c) > best_v) {
                    best_v = x(r, c);
                    best = r;
                }
            }
            pooled(b, c) = best_v;
            if (cache) cache->argmax[static_cast<std::size_t>(b) * channels + c] = best;
        }
    }
    return pooled;
}

MatrixXd maxpool_backward(const MatrixXd& dpooled, const std::vector<int>& offsets,
                          const PoolCache& cache, Eigen::Index n_rows) {
    const int n_clouds = static_cast<int>(offsets.size()) - 1;
    const auto channels = dpooled.cols();
    MatrixXd dx = MatrixXd::Zero(n_rows, channels);
    for (int b = 0; b < n_clouds; ++b) {
        for (Eigen::Index c = 0; c < channels; ++c) {
            dx(cache.argmax[static_cast<std::size_t>(b) * channels + c], c) += dpooled(b, c);
        }
    }
    return dx;
}

// Per-cloud transform produced by a mini point network; the final linear is
// zero-initialized with an identity bias so the untrained transform is I.
// Returns a B x dim^2 matrix, row-major transform per cloud.
MatrixXd tnet_forward(const Tensors& t, const TNetSpec& spec, Mode mode, double eps,
                      double momentum, const MatrixXd& x, const std::vector<int>& offsets,
                      TNetCache* cache) {
    const MatrixXd feat = stack_forward(t, spec.point_stack, mode, 0.0, 0, eps, momentum, x,
                                        cache ? &cache->point : nullptr);
    MatrixXd pooled = maxpool_forward(feat, offsets, cache ? &cache->pool : nullptr);
    if (cache) cache->fc_input = pooled;
    MatrixXd fc_out = stack_forward(t, spec.fc_stack, mode, 0.0, 0, eps, momentum,
                                    std::move(pooled), cache ? &cache->fc : nullptr);
    MatrixXd transforms = linear_forward(t, spec.final_linear, fc_out);
    for (int d = 0; d < spec.dim; ++d) {
        transforms.col(d * spec.dim + d).array() += 1.0;  // row-major identity
    }
    if (cache) {
        cache->fc_out = std::move(fc_out);
        cache->transforms = transforms;
        cache->pre_transform = x;
    }
    return transforms;
}

// Row b of the transform matrix holds vec(T_b) in row-major order.
MatrixXd unpack_transform(const MatrixXd& transforms, int b, int dim) {
    MatrixXd t(dim, dim);
    for (int r = 0; r < dim; ++r) {
        for (int c = 0; c < dim; ++c) t(r, c) = transforms(b, r * dim + c);
    }
    return t;
}

// Applies per-cloud transforms in place: rows of cloud b become X_b * T_b^T.
void apply_transforms(MatrixXd& x, const MatrixXd& transforms, int dim,
                      const std::vector<int>& offsets) {
    const int n_clouds = static_cast<int>(offsets.size()) - 1;
    for (int b = 0; b < n_clouds; ++b) {
        const MatrixXd tb = unpack_transform(transforms, b, dim);
        x.middleRows(offsets[b], offsets[b + 1] - offsets[b]) =
            (x.middleRows(offsets[b], offsets[b + 1] - offsets[b]) * tb.transpose()).eval();
    }
}

// Backward of y = x * T_b^T per cloud. dtransforms gets d<loss>/dT rows;
// returns dx (the main-branch contribution; the T-net contribution is added
// by tnet_backward).
MatrixXd transform_backward(const MatrixXd& dy, const MatrixXd& pre, const MatrixXd& transforms,
                            int dim, const std::vector<int>& offsets, MatrixXd& dtransforms) {
    const int n_clouds = static_cast<int>(offsets.size()) - 1;
    MatrixXd dx(dy.rows(), dy.cols());
    dtransforms.setZero(n_clouds, dim * dim);
    for (int b = 0; b < n_clouds; ++b) {
        const int begin = offsets[b], len = offsets[b + 1] - offsets[b];
        const MatrixXd tb = unpack_transform(transforms, b, dim);
        dx.middleRows(begin, len).noalias() = dy.middleRows(begin, len) * tb;
        const MatrixXd dt = dy.middleRows(begin, len).transpose() * pre.middleRows(begin, len);
        for (int r = 0; r < dim; ++r) {
            for (int c = 0; c < dim; ++c) dtransforms(b, r * dim + c) = dt(r, c);
        }
    }
    return dx;
}

MatrixXd tnet_backward(const Tensors& t, const TNetSpec& spec, const TNetCache& cache,
                       const MatrixXd& dtransforms, const std::vector<int>& offsets,
                       VectorXd& grad) {
    MatrixXd dfc_out;
    linear_backward(t, spec.final_linear, cache.fc_out, dtransforms, grad, &dfc_out);
    const MatrixXd dpooled = stack_backward(t, spec.fc_stack, cache.fc, std::move(dfc_out), grad);
    const MatrixXd dfeat =
        maxpool_backward(dpooled, offsets, cache.pool, cache.point.output.rows());
    return stack_backward(t, spec.point_stack, cache.point, dfeat, grad);
}

// --- full forward -----------------------------------------------------------

std::vector<int> concat_offsets(const std::vector<const NormalizedCloud*>& clouds) {
    std::vector<int> offsets(clouds.size() + 1, 0);
    for (std::size_t b = 0; b < clouds.size(); ++b) {
        const auto rows = clouds[b]->points.rows();
        if (rows < 1) throw EmptyCloud("cloud " + std::to_string(clouds[b]->source_id) +
                                       " has no points");
        offsets[b + 1] = offsets[b] + static_cast<int>(rows);
    }
    return offsets;
}

// Covariances for every cloud in the batch. `trace` enables backward.
std::vector<MatrixXd> forward_covs(const ModelConfig& cfg, const Tensors& t,
                                   const std::vector<const NormalizedCloud*>& clouds, Mode mode,
                                   std::uint64_t dropout_seed, Trace* trace) {
    if (clouds.empty()) throw EmptyDataset("forward on an empty batch");
    const std::vector<int> offsets = concat_offsets(clouds);
    MatrixXd x(offsets.back(), 3);
    for (std::size_t b = 0; b < clouds.size(); ++b) {
        x.middleRows(offsets[b], clouds[b]->points.rows()) = clouds[b]->points;
    }
    if (trace) {
        trace->offsets = offsets;
        trace->x0 = x;
    }

    const Layout& lo = t.layout;
    if (lo.tnet_input.present) {
        const MatrixXd transforms = tnet_forward(t, lo.tnet_input, mode, cfg.bn_eps,
                                                 cfg.bn_momentum, x, offsets,
                                                 trace ? &trace->tnet3 : nullptr);
        apply_transforms(x, transforms, 3, offsets);
    }

    x = stack_forward(t, lo.phi_a, mode, 0.0, 0, cfg.bn_eps, cfg.bn_momentum, std::move(x),
                      trace ? &trace->phi_a : nullptr);

    if (lo.tnet_feature.present) {
        const MatrixXd transforms = tnet_forward(t, lo.tnet_feature, mode, cfg.bn_eps,
                                                 cfg.bn_momentum, x, offsets,
                                                 trace ? &trace->tnetf : nullptr);
        apply_transforms(x, transforms, lo.tnet_feature.dim, offsets);
        x = stack_forward(t, lo.phi_b, mode, 0.0, 0, cfg.bn_eps, cfg.bn_momentum, std::move(x),
                          trace ? &trace->phi_b : nullptr);
    }

    MatrixXd pooled = maxpool_forward(x, offsets, trace ? &trace->pool : nullptr);
    x.resize(0, 0);

    MatrixXd h = stack_forward(t, lo.head, mode, cfg.dropout_p, dropout_seed, cfg.bn_eps,
                               cfg.bn_momentum, std::move(pooled), trace ? &trace->head : nullptr);
    MatrixXd out = linear_forward(t, lo.out_linear, h);

    const int m = cfg.output_dim;
    const int tl = (m * m - m) / 2;
    std::vector<MatrixXd> sigmas(clouds.size());
    if (trace) {
        trace->out = out;
        trace->lower.resize(clouds.size());
        trace->exp_d.resize(clouds.size());
        trace->sigma.resize(clouds.size());
    }
    for (std::size_t b = 0; b < clouds.size(); ++b) {
        MatrixXd lower = MatrixXd::Identity(m, m);
        int idx = 0;
        for (int i = 1; i < m; ++i) {
            for (int j = 0; j < i; ++j) {
                lower(i, j) = out(b, idx++);
            }
        }
        VectorXd exp_d(m);
        for (int i = 0; i < m; ++i) {
            exp_d[i] = std::exp(out(b, tl + i));
        }
        sigmas[b] = lower * exp_d.asDiagonal() * lower.transpose();
        if (trace) {
            trace->lower[b] = lower;
            trace->exp_d[b] = exp_d;
            trace->sigma[b] = sigmas[b];
        }
    }
    return sigmas;
}

double mean_kl(const std::vector<MatrixXd>& sigmas, const std::vector<MatrixXd>& targets) {
    double total = 0.0;
    for (std::size_t b = 0; b < sigmas.size(); ++b) {
        total += kl_divergence(targets[b], sigmas[b]);
    }
    return total / static_cast<double>(sigmas.size());
}

}  // namespace

// --- Model --------------------------------------------------------------------

Model::Model(ModelConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
    Layout layout = build_layout(cfg_);
    param_arrays_ = layout.params;
    buffer_arrays_ = layout.buffers;
    params_ = VectorXd::Zero(layout.param_size);
    buffers_ = VectorXd::Zero(layout.buffer_size);

    Rng rng(derive_seed(init_seed, 0x696e6974ULL));

    auto init_linear = [&](const LinearSpec& spec) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(spec.in));
        auto w = view(params_, layout.params[spec.w]);
        auto b = view(params_, layout.params[spec.b]);
        for (Eigen::Index j = 0; j < w.cols(); ++j) {
            for (Eigen::Index i = 0; i < w.rows(); ++i) {
                w(i, j) = rng.uniform(-bound, bound);
            }
        }
        for (Eigen::Index i = 0; i < b.rows(); ++i) {
            b(i, 0) = rng.uniform(-bound, bound);
        }
    };
    auto init_bn = [&](const BnSpec& spec) {
        view(params_, layout.params[spec.gamma]).setOnes();
        view(params_, layout.params[spec.beta]).setZero();
        view(buffers_, layout.buffers[spec.rmean]).setZero();
        view(buffers_, layout.buffers[spec.rvar]).setOnes();
    };
    auto init_stack = [&](const StackSpec& spec) {
        for (std::size_t k = 0; k < spec.linear.size(); ++k) {
            init_linear(spec.linear[k]);
            init_bn(spec.bn[k]);
        }
    };
    auto init_tnet = [&](const TNetSpec& spec) {
        if (!spec.present) return;
        init_stack(spec.point_stack);
        init_stack(spec.fc_stack);
        // Final layer zeroed with an identity bias: the untrained transform
        // leaves the points alone.
        view(params_, layout.params[spec.final_linear.w]).setZero();
        auto b = view(params_, layout.params[spec.final_linear.b]);
        b.setZero();
        for (int d = 0; d < spec.dim; ++d) {
            b(d * spec.dim + d, 0) = 1.0;
        }
    };

    init_tnet(layout.tnet_input);
    init_stack(layout.phi_a);
    init_tnet(layout.tnet_feature);
    init_stack(layout.phi_b);
    init_stack(layout.head);

    // Zero final layer with ln(a) bias on the log-variances: the untrained
    // model predicts exp(init_log_variance) * I.
    view(params_, layout.params[layout.out_linear.w]).setZero();
    auto out_b = view(params_, layout.params[layout.out_linear.b]);
    out_b.setZero();
    const int tl = (cfg_.output_dim * cfg_.output_dim - cfg_.output_dim) / 2;
    for (int i = 0; i < cfg_.output_dim; ++i) {
        out_b(tl + i, 0) = cfg_.init_log_variance;
    }
}

std::vector<char> Model::decay_mask() const {
    std::vector<char> mask(params_.size(), 0);
    for (const auto& a : param_arrays_) {
        if (!a.decay) continue;
        std::fill(mask.begin() + a.offset, mask.begin() + a.offset + a.rows * a.cols, char(1));
    }
    return mask;
}

double Model::loss_batch(const Batch& batch, Mode mode, std::uint64_t dropout_seed,
                         bool update_running) {
    if (batch.size() == 0) throw EmptyDataset("loss_batch on an empty batch");
    const Layout layout = build_layout(cfg_);
    Tensors t{layout, params_, buffers_, update_running ? &buffers_ : nullptr};
    const auto sigmas = forward_covs(cfg_, t, batch.clouds, mode, dropout_seed, nullptr);
    return mean_kl(sigmas, batch.targets);
}

std::vector<MatrixXd> Model::covariances(const Batch& batch, Mode mode,
                                         std::uint64_t dropout_seed) {
    if (batch.size() == 0) throw EmptyDataset("covariances on an empty batch");
    const Layout layout = build_layout(cfg_);
    Tensors t{layout, params_, buffers_, nullptr};
    return forward_covs(cfg_, t, batch.clouds, mode, dropout_seed, nullptr);
}

double Model::backward(const Batch& batch, std::uint64_t dropout_seed, VectorXd& grad,
                       bool update_running) {
    if (batch.size() == 0) throw EmptyDataset("backward on an empty batch");
    const Layout layout = build_layout(cfg_);
    Tensors t{layout, params_, buffers_, update_running ? &buffers_ : nullptr};

    Trace trace;
    const auto sigmas = forward_covs(cfg_, t, batch.clouds, Mode::Train, dropout_seed, &trace);
    const double loss = mean_kl(sigmas, batch.targets);

    grad = VectorXd::Zero(params_.size());
    const int m = cfg_.output_dim;
    const int tl = (m * m - m) / 2;
    const double inv_b = 1.0 / static_cast<double>(batch.size());

    MatrixXd dout = MatrixXd::Zero(trace.out.rows(), trace.out.cols());
    for (std::size_t b = 0; b < batch.size(); ++b) {
        // d(mean KL)/dSigma = 1/B * 0.5 (P^-1 - P^-1 S P^-1).
        const auto llt = checked_llt(trace.sigma[b], "predicted covariance");
        const MatrixXd p_inv = llt.solve(MatrixXd::Identity(m, m));
        const MatrixXd g = 0.5 * inv_b * (p_inv - p_inv * batch.targets[b] * p_inv);
        VectorXd dl, dd;
        compose_backward(g, trace.lower[b], trace.exp_d[b], dl, dd);
        for (int i = 0; i < tl; ++i) dout(b, i) = dl[i];
        for (int i = 0; i < m; ++i) dout(b, tl + i) = dd[i];
    }

    MatrixXd dh;
    linear_backward(t, layout.out_linear, trace.head.output, dout, grad, &dh);
    MatrixXd dpooled = stack_backward(t, layout.head, trace.head, std::move(dh), grad);

    const MatrixXd& last_point =
        layout.tnet_feature.present ? trace.phi_b.output : trace.phi_a.output;
    MatrixXd dx = maxpool_backward(dpooled, trace.offsets, trace.pool, last_point.rows());
    dpooled.resize(0, 0);

    if (layout.tnet_feature.present) {
        dx = stack_backward(t, layout.phi_b, trace.phi_b, std::move(dx), grad);
        MatrixXd dtransforms;
        dx = transform_backward(dx, trace.tnetf.pre_transform, trace.tnetf.transforms,
                                layout.tnet_feature.dim, trace.offsets, dtransforms);
        dx += tnet_backward(t, layout.tnet_feature, trace.tnetf, dtransforms, trace.offsets, grad);
    }

    dx = stack_backward(t, layout.phi_a, trace.phi_a, std::move(dx), grad);

    if (layout.tnet_input.present) {
        MatrixXd dtransforms;
        dx = transform_backward(dx, trace.x0, trace.tnet3.transforms, 3, trace.offsets,
                                dtransforms);
        dx += tnet_backward(t, layout.tnet_input, trace.tnet3, dtransforms, trace.offsets, grad);
    }

    if (!grad.allFinite()) {
        throw NonFiniteGradient("backward produced non-finite gradients");
    }
    return loss;
}

Eigen::VectorXd Model::forward_feature(const NormalizedCloud& cloud, Mode mode,
                                       std::uint64_t dropout_seed) {
    if (cloud.points.rows() < 1) throw EmptyCloud("forward_feature on an empty cloud");
    const Layout layout = build_layout(cfg_);
    Tensors t{layout, params_, buffers_, nullptr};
    std::vector<const NormalizedCloud*> clouds{&cloud};
    const std::vector<int> offsets = concat_offsets(clouds);
    MatrixXd x = cloud.points;
    if (layout.tnet_input.present) {
        TNetCache tmp;
        tnet_forward(t, layout.tnet_input, mode, cfg_.bn_eps, cfg_.bn_momentum, x, offsets, &tmp);
        apply_transforms(x, tmp.transforms, 3, offsets);
    }
    x = stack_forward(t, layout.phi_a, mode, 0.0, 0, cfg_.bn_eps, cfg_.bn_momentum, std::move(x),
                      nullptr);
    if (layout.tnet_feature.present) {
        TNetCache tmp;
        tnet_forward(t, layout.tnet_feature, mode, cfg_.bn_eps, cfg_.bn_momentum, x, offsets, &tmp);
        apply_transforms(x, tmp.transforms, layout.tnet_feature.dim, offsets);
        x = stack_forward(t, layout.phi_b, mode, 0.0, 0, cfg_.bn_eps, cfg_.bn_momentum,
                          std::move(x), nullptr);
    }
    const MatrixXd pooled = maxpool_forward(x, offsets, nullptr);
    (void)dropout_seed;
    return pooled.row(0).transpose();
}

CholeskyParams Model::forward_head(const Eigen::VectorXd& feature, Mode mode,
                                   std::uint64_t dropout_seed) {
    const Layout layout = build_layout(cfg_);
    Tensors t{layout, params_, buffers_, nullptr};
    MatrixXd h = feature.transpose();
    h = stack_forward(t, layout.head, mode, cfg_.dropout_p, dropout_seed, cfg_.bn_eps,
                      cfg_.bn_momentum, std::move(h), nullptr);
    const MatrixXd out = linear_forward(t, layout.out_linear, h);
    const int m = cfg_.output_dim;
    const int tl = (m * m - m) / 2;
    CholeskyParams cp;
    cp.l = out.row(0).head(tl).transpose();
    cp.d = out.row(0).tail(m).transpose();
    return cp;
}

Eigen::MatrixXd Model::predict_cov(const NormalizedCloud& cloud) const {
    const Layout layout = build_layout(cfg_);
    Tensors t{layout, params_, buffers_, nullptr};
    std::vector<const NormalizedCloud*> clouds{&cloud};
    const auto sigmas = forward_covs(cfg_, t, clouds, Mode::Eval, 0, nullptr);
    return sigmas[0];
}

Batch make_batch(const std::vector<DatasetEntry>& dataset, const std::vector<int>& indices) {
    Batch batch;
    batch.clouds.reserve(indices.size());
    batch.targets.reserve(indices.size());
    for (int i : indices) {
        batch.clouds.push_back(&dataset[i].cloud);
        batch.targets.push_back(dataset[i].target_cov);
    }
    return batch;
}

// --- optimizer ------------------------------------------------------------

void amsgrad_step(VectorXd& params, const VectorXd& grads, AmsGradState& state,
                  double learning_rate, double weight_decay, const std::vector<char>& decay_mask) {
    const auto n = params.size();
    if (grads.size() != n || state.m.size() != n ||
        static_cast<Eigen::Index>(decay_mask.size()) != n) {
        throw ConfigError("amsgrad_step: shape mismatch");
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (Eigen::Index i = 0; i < n; ++i) {
        const double g = grads[i] + (decay_mask[i] ? weight_decay * params[i] : 0.0);
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        state.vmax[i] = std::max(state.vmax[i], state.v[i]);
        const double m_hat = state.m[i] / bc1;
        const double v_hat = state.vmax[i] / bc2;
        params[i] -= learning_rate * m_hat / (std::sqrt(v_hat) + state.eps);
    }
}

// --- training loop ----------------------------------------------------------

namespace {

std::vector<int> sample_with_replacement(const std::vector<int>& pool, int count, Rng& rng) {
    std::vector<int> out(count);
    for (int i = 0; i < count; ++i) {
        out[i] = pool[rng.uniform_index(pool.size())];
    }
    return out;
}

}  // namespace

TrainResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                  const std::vector<DatasetEntry>& dataset) {
    model_cfg.validate();
    train_cfg.validate();
    if (dataset.size() < 2) {
        throw EmptyDataset("training needs at least 2 dataset entries");
    }

    // Seeded split: shuffled indices, first ceil(f*n) go to validation.
    std::vector<int> indices(dataset.size());
    for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = static_cast<int>(i);
    Rng split_rng(derive_seed(train_cfg.seed, 0x73706c69ULL));
    for (std::size_t i = indices.size() - 1; i > 0; --i) {
        std::swap(indices[i], indices[split_rng.uniform_index(i + 1)]);
    }
    const int n_val = std::clamp(
        static_cast<int>(std::lround(train_cfg.validation_fraction * dataset.size())), 1,
        static_cast<int>(dataset.size()) - 1);
    const std::vector<int> val_idx(indices.begin(), indices.begin() + n_val);
    const std::vector<int> train_idx(indices.begin() + n_val, indices.end());

    TrainResult result{Model(model_cfg, derive_seed(train_cfg.seed, 0x77696e69ULL)), {}, 0, 0.0, 0};
    Model model = result.model;
    AmsGradState opt(model.params().size());
    const std::vector<char> mask = model.decay_mask();

    auto sample_batch = [&](const std::vector<int>& pool, int episode, std::uint64_t tag) {
        Rng rng(derive_seed(train_cfg.seed, tag, static_cast<std::uint64_t>(episode)));
        return make_batch(dataset, sample_with_replacement(pool, train_cfg.batch_size, rng));
    };

    // Episode 0: the untrained model.
    {
        Batch tb = sample_batch(train_idx, 0, 0x7462ULL);
        Batch vb = sample_batch(val_idx, 0, 0x7662ULL);
        EpisodeRow row;
        row.episode = 0;
        row.train_loss = model.loss_batch(tb, Mode::Eval);
        row.val_loss = model.loss_batch(vb, Mode::Eval);
        result.history.push_back(row);
        result.best_val = row.val_loss;
        result.best_episode = 0;
        result.model = model;
    }

    VectorXd grad;
    int since_best = 0;
    for (int episode = 1; episode <= train_cfg.max_episodes; ++episode) {
        Batch tb = sample_batch(train_idx, episode, 0x7462ULL);
        const double train_loss =
            model.backward(tb, derive_seed(train_cfg.seed, 0x64726f70ULL,
                                           static_cast<std::uint64_t>(episode)),
                           grad, /*update_running=*/true);
        amsgrad_step(model.params(), grad, opt, train_cfg.learning_rate, train_cfg.weight_decay,
                     mask);

        Batch vb = sample_batch(val_idx, episode, 0x7662ULL);
        const double val_loss = model.loss_batch(vb, Mode::Eval);

        result.history.push_back({episode, train_loss, val_loss});
        result.episodes_run = episode;

        if (val_loss < result.best_val) {
            result.best_val = val_loss;
            result.best_episode = episode;
            result.model = model;
            since_best = 0;
        } else {
            ++since_best;
            if (since_best >= train_cfg.patience) break;
        }
    }
    return result;
}

Eigen::Matrix2d predict(const Model& model, const Submap& submap, double voxel_size) {
    if (model.config().output_dim != 2) {
        throw ConfigError("predict requires output_dim == 2");
    }
    const NormalizedCloud cloud = cloud::preprocess(submap, voxel_size);
    return model.predict_cov(cloud);
}

// --- checkpoint io ------------------------------------------------------------

namespace {
constexpr char kMagic[5] = {'P', 'N', 'K', 'L', '1'};

nlohmann::json config_to_json(const ModelConfig& cfg) {
    return nlohmann::json{{"point_mlp_sizes", cfg.point_mlp_sizes},
                          {"head_sizes", cfg.head_sizes},
                          {"output_dim", cfg.output_dim},
                          {"dropout_p", cfg.dropout_p},
                          {"use_input_transform", cfg.use_input_transform},
                          {"tnet_mlp_sizes", cfg.tnet_mlp_sizes},
                          {"tnet_fc_sizes", cfg.tnet_fc_sizes},
                          {"bn_eps", cfg.bn_eps},
                          {"bn_momentum", cfg.bn_momentum},
                          {"init_log_variance", cfg.init_log_variance}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.point_mlp_sizes = j.at("point_mlp_sizes").get<std::vector<int>>();
    cfg.head_sizes = j.at("head_sizes").get<std::vector<int>>();
    cfg.output_dim = j.at("output_dim").get<int>();
    cfg.dropout_p = j.at("dropout_p").get<double>();
    cfg.use_input_transform = j.at("use_input_transform").get<bool>();
    cfg.tnet_mlp_sizes = j.at("tnet_mlp_sizes").get<std::vector<int>>();
    cfg.tnet_fc_sizes = j.at("tnet_fc_sizes").get<std::vector<int>>();
    cfg.bn_eps = j.at("bn_eps").get<double>();
    cfg.bn_momentum = j.at("bn_momentum").get<double>();
    cfg.init_log_variance = j.at("init_log_variance").get<double>();
    return cfg;
}

nlohmann::json arrays_to_json(const std::vector<ArrayRef>& arrays) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& a : arrays) {
        out.push_back({{"name", a.name}, {"rows", a.rows}, {"cols", a.cols}});
    }
    return out;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model, int episode,
                     double best_validation_loss) {
    nlohmann::json header{{"config", config_to_json(model.config())},
                          {"params", arrays_to_json(model.param_arrays())},
                          {"buffers", arrays_to_json(model.buffer_arrays())},
                          {"episode", episode},
                          {"best_validation_loss", best_validation_loss},
                          {"layout", "col-major"}};
    const std::string header_str = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path.string());
    out.write(kMagic, 5);
    const std::uint64_t len = header_str.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    out.write(reinterpret_cast<const char*>(model.params().data()),
              static_cast<std::streamsize>(model.params().size() * sizeof(double)));
    out.write(reinterpret_cast<const char*>(model.buffers().data()),
              static_cast<std::streamsize>(model.buffers().size() * sizeof(double)));
    if (!out) throw DataError("write failed: " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open: " + path.string());
    char magic[5];
    in.read(magic, 5);
    if (!in || std::memcmp(magic, kMagic, 5) != 0) {
        throw DataError("bad checkpoint magic in " + path.string());
    }
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string header_str(len, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(len));
    if (!in) throw DataError("truncated checkpoint header in " + path.string());

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_str);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("bad checkpoint header: ") + e.what());
    }

    Model model(config_from_json(header.at("config")), 0);
    auto check_arrays = [&](const nlohmann::json& j, const std::vector<ArrayRef>& arrays) {
        if (j.size() != arrays.size()) throw DataError("checkpoint array list mismatch");
        for (std::size_t i = 0; i < arrays.size(); ++i) {
            if (j[i].at("name") != arrays[i].name || j[i].at("rows") != arrays[i].rows ||
                j[i].at("cols") != arrays[i].cols) {
                throw DataError("checkpoint array mismatch at " + arrays[i].name);
            }
        }
    };
    check_arrays(header.at("params"), model.param_arrays());
    check_arrays(header.at("buffers"), model.buffer_arrays());

    in.read(reinterpret_cast<char*>(model.params().data()),
            static_cast<std::streamsize>(model.params().size() * sizeof(double)));
    in.read(reinterpret_cast<char*>(model.buffers().data()),
            static_cast<std::streamsize>(model.buffers().size() * sizeof(double)));
    if (!in) throw DataError("truncated checkpoint arrays in " + path.string());
    return model;
}

}  // namespace bathykl::net
