#include "bathykl/registration.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "bathykl/errors.hpp"

namespace bathykl::registration {

void GicpConfig::validate() const {
    if (max_iterations <= 0 || translation_tolerance <= 0 || max_correspondence_distance <= 0 ||
        k_neighbors <= 0 || epsilon_plane <= 0 || cost_rel_tol <= 0) {
        throw ConfigError("all GicpConfig fields must be positive");
    }
}

PreparedTarget prepare_target(const Submap& target, const GicpConfig& cfg) {
    cfg.validate();
    PreparedTarget prepared;
    prepared.index = NeighborIndex(target.points);
    prepared.covariances =
        point_covariances(target.points, prepared.index, cfg.k_neighbors, cfg.epsilon_plane);
    return prepared;
}

namespace {

struct Correspondence {
    int source = 0;
    int target = 0;
    geom::Mat3 weight;  // (C_tgt + C_src)^-1
};

std::vector<Correspondence> find_correspondences(const cloud::PointMatrix& source_points,
                                                 const PointCovariances& source_covs,
                                                 const PreparedTarget& target,
                                                 const Eigen::Vector2d& t,
                                                 const GicpConfig& cfg) {
    std::vector<Correspondence> out;
    out.reserve(source_points.rows());
    for (Eigen::Index i = 0; i < source_points.rows(); ++i) {
        geom::Vec3 p = source_points.row(i);
        p.x() += t.x();
        p.y() += t.y();
        const auto [j, dist] = target.index.nearest(p);
        if (j < 0 || dist > cfg.max_correspondence_distance) continue;
        Correspondence c;
        c.source = static_cast<int>(i);
        c.target = j;
        c.weight = (target.covariances.cov[j] + source_covs.cov[i]).inverse();
        out.push_back(c);
    }
    return out;
}

double sum_cost(const std::vector<Correspondence>& corr, const cloud::PointMatrix& source_points,
                const PreparedTarget& target, const Eigen::Vector2d& t) {
    double cost = 0.0;
    for (const auto& c : corr) {
        geom::Vec3 d = source_points.row(c.source).transpose() -
                       target.index.points().row(c.target).transpose();
        d.x() += t.x();
        d.y() += t.y();
        cost += d.dot(c.weight * d);
    }
    return cost;
}

}  // namespace

RegistrationResult gicp_register_xy(const Submap& source, const PreparedTarget& target,
                                    PlanarShift init, const GicpConfig& cfg) {
    cfg.validate();
    source.validate();
    if (source.points.rows() < cfg.k_neighbors ||
        target.index.size() < cfg.k_neighbors) {
        throw DegenerateCloud("gicp_register_xy: fewer points than k_neighbors");
    }

    NeighborIndex source_index(source.points);
    const PointCovariances source_covs =
        point_covariances(source.points, source_index, cfg.k_neighbors, cfg.epsilon_plane);

    Eigen::Vector2d t(init.dx, init.dy);
    RegistrationResult result;
    double prev_mean_cost = std::numeric_limits<double>::infinity();

    for (int iter = 0; iter < cfg.max_iterations; ++iter) {
        auto corr = find_correspondences(source.points, source_covs, target, t, cfg);
        if (corr.empty()) {
            throw NoCorrespondences("no correspondences at iteration " + std::to_string(iter));
        }
        const double cost0 = sum_cost(corr, source.points, target, t);
        const double mean_cost = cost0 / static_cast<double>(corr.size());
        result.iteration_costs.push_back(mean_cost);
        result.iterations = iter + 1;
        result.n_correspondences = static_cast<int>(corr.size());
        result.final_cost = mean_cost;

        // Plateau: the step no longer buys a meaningful relative improvement.
        if (iter > 0 && prev_mean_cost > 0 &&
            (prev_mean_cost - mean_cost) < cfg.cost_rel_tol * prev_mean_cost) {
            result.stop = StopReason::CostPlateau;
            result.shift = {t.x(), t.y()};
            return result;
        }
        prev_mean_cost = mean_cost;

        // Gauss-Newton on t: H = sum of xy blocks of the weights,
        // g = sum of xy components of W d.
        Eigen::Matrix2d h = Eigen::Matrix2d::Zero();
        Eigen::Vector2d g = Eigen::Vector2d::Zero();
        for (const auto& c : corr) {
            geom::Vec3 d = source.points.row(c.source).transpose() -
                           target.index.points().row(c.target).transpose();
            d.x() += t.x();
            d.y() += t.y();
            const geom::Vec3 wd = c.weight * d;
            h += c.weight.topLeftCorner<2, 2>();
            g += wd.head<2>();
        }
        Eigen::Vector2d step = -h.ldlt().solve(g);
        if (!step.allFinite()) {
            throw SingularSystem("gicp_register_xy: singular Gauss-Newton system");
        }

        // Step halving against the current correspondence set keeps the cost
        // non-increasing even through the re-matching that follows.
        double new_cost = sum_cost(corr, source.points, target, t + step);
        int halvings = 0;
        while (new_cost > cost0 && halvings < 8) {
            step *= 0.5;
            new_cost = sum_cost(corr, source.points, target, t + step);
            ++halvings;
        }
        if (new_cost > cost0) {
            result.stop = StopReason::CostPlateau;
            result.shift = {t.x(), t.y()};
            return result;
        }
        t += step;

        if (step.norm() <= cfg.translation_tolerance) {
            result.converged = true;
            result.stop = StopReason::Converged;
            result.shift = {t.x(), t.y()};
            // Refresh the final bookkeeping at the accepted solution.
            auto final_corr = find_correspondences(source.points, source_covs, target, t, cfg);
            if (!final_corr.empty()) {
                result.n_correspondences = static_cast<int>(final_corr.size());
                result.final_cost = sum_cost(final_corr, source.points, target, t) /
                                    static_cast<double>(final_corr.size());
            }
            return result;
        }
    }

    result.stop = StopReason::MaxIterations;
    result.shift = {t.x(), t.y()};
    return result;
}

RegistrationResult gicp_register_xy(const Submap& source, const Submap& target, PlanarShift init,
                                    const GicpConfig& cfg) {
    return gicp_register_xy(source, prepare_target(target, cfg), init, cfg);
}

NaiveInformation naive_information_xy(const Submap& source, const PreparedTarget& target,
                                      PlanarShift at, const GicpConfig& cfg) {
    cfg.validate();
    NeighborIndex source_index(source.points);
    const PointCovariances source_covs =
        point_covariances(source.points, source_index, cfg.k_neighbors, cfg.epsilon_plane);
    const auto corr = find_correspondences(source.points, source_covs, target,
                                           Eigen::Vector2d(at.dx, at.dy), cfg);
    if (corr.empty()) {
        throw NoCorrespondences("naive_information_xy: no correspondences");
    }
    Eigen::Matrix2d info = Eigen::Matrix2d::Zero();
    for (const auto& c : corr) {
        info += c.weight.topLeftCorner<2, 2>();
    }
    info /= static_cast<double>(corr.size());

    NaiveInformation out;
    out.information = info;
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> eig(info);
    const double lo = eig.eigenvalues()(0), hi = eig.eigenvalues()(1);
    if (lo <= 0 || hi / lo > 1e12) {
        out.jittered = true;
        info += 1e-9 * Eigen::Matrix2d::Identity();
    }
    out.covariance = info.inverse();
    return out;
}

NaiveInformation naive_information_xy(const Submap& source, const Submap& target, PlanarShift at,
                                      const GicpConfig& cfg) {
    return naive_information_xy(source, prepare_target(target, cfg), at, cfg);
}

}  // namespace bathykl::registration
