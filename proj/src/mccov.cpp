#include "bathykl/mccov.hpp"

#include <atomic>
#include <thread>

#include "bathykl/errors.hpp"

namespace bathykl::mccov {

void PerturbationPrior::validate() const {
    if (!(a > 0)) {
        throw ConfigError("perturbation prior requires a > 0");
    }
}

void McConfig::validate() const {
    if (iterations < 2) {
        throw InsufficientIterations("MC requires L >= 2 (divisor L-1)");
    }
    if ((sigma_xyz.array() < 0).any()) {
        throw ConfigError("MC sensor noise sigma must be >= 0");
    }
    if (max_failure_fraction < 0 || max_failure_fraction > 1) {
        throw ConfigError("max_failure_fraction must lie in [0, 1]");
    }
}

PlanarShift sample_perturbation(const PerturbationPrior& prior, std::uint64_t seed) {
    prior.validate();
    Rng rng(derive_seed(seed, 0x70657274ULL));
    const double s = std::sqrt(prior.a);
    return {rng.normal(0.0, s), rng.normal(0.0, s)};
}

CovMatrix2 mc_covariance(const Submap& s, const PerturbationPrior& prior, const McConfig& cfg,
                         const registration::GicpConfig& gicp, int threads, McStats* stats) {
    prior.validate();
    cfg.validate();
    s.validate();

    const auto prepared = registration::prepare_target(s, gicp);
    const int total = cfg.iterations;

    std::vector<Eigen::Vector2d> errors(total, Eigen::Vector2d::Zero());
    std::vector<char> valid(total, 0);

    auto run_iteration = [&](int l) {
        const std::uint64_t stream =
            derive_seed(cfg.seed, static_cast<std::uint64_t>(s.id), static_cast<std::uint64_t>(l));
        const PlanarShift shift = sample_perturbation(prior, stream);

        Submap perturbed = s;
        perturbed.points.col(0).array() += shift.dx;
        perturbed.points.col(1).array() += shift.dy;
        perturbed = cloud::add_noise(perturbed, cfg.sigma_xyz, derive_seed(stream, 0x6e7aULL));

        registration::RegistrationResult reg;
        try {
            reg = registration::gicp_register_xy(perturbed, prepared, PlanarShift{}, gicp);
        } catch (const NoCorrespondences&) {
            return;  // skipped, counted by the valid[] flag staying 0
        }

        // e_l = xy of log(exp(That_j)^-1 T_j); the estimated perturbation is
        // the negated correction the registration applied.
        const geom::RigidTransform t_true = geom::translate(shift.dx, shift.dy, 0.0);
        const geom::RigidTransform t_est = geom::translate(-reg.shift.dx, -reg.shift.dy, 0.0);
        const geom::TangentVector e = geom::log_map(geom::relative(t_est, t_true));
        errors[l] = e.head<2>();
        valid[l] = 1;
    };

    threads = std::max(1, threads);
    if (threads == 1) {
        for (int l = 0; l < total; ++l) run_iteration(l);
    } else {
        std::atomic<int> next{0};
        std::vector<std::thread> pool;
        pool.reserve(threads);
        for (int w = 0; w < threads; ++w) {
            pool.emplace_back([&] {
                for (int l = next.fetch_add(1); l < total; l = next.fetch_add(1)) {
                    run_iteration(l);
                }
            });
        }
        for (auto& t : pool) t.join();
    }

    int n_valid = 0;
    CovMatrix2 q = CovMatrix2::Zero();
    for (int l = 0; l < total; ++l) {  // fixed index order keeps the sum deterministic
        if (valid[l]) {
            q += errors[l] * errors[l].transpose();
            ++n_valid;
        }
    }
    const int n_failed = total - n_valid;
    if (stats) {
        stats->attempted = total;
        stats->failed = n_failed;
    }
    if (static_cast<double>(n_failed) > cfg.max_failure_fraction * total) {
        throw TooManyFailures("mc_covariance: " + std::to_string(n_failed) + "/" +
                              std::to_string(total) + " registrations failed");
    }
    if (n_valid < 2) {
        throw InsufficientIterations("mc_covariance: fewer than 2 valid iterations");
    }
    return q / static_cast<double>(n_valid - 1);
}

std::vector<DatasetEntry> build_dataset(std::span<const Submap> submaps,
                                        const PerturbationPrior& prior, const McConfig& cfg,
                                        const registration::GicpConfig& gicp, double voxel_size,
                                        int threads) {
    std::vector<DatasetEntry> out;
    out.reserve(submaps.size());
    for (const Submap& s : submaps) {
        try {
            DatasetEntry entry;
            entry.submap_id = s.id;
            entry.cloud = cloud::preprocess(s, voxel_size);
            entry.target_cov = mc_covariance(s, prior, cfg, gicp, threads);
            out.push_back(std::move(entry));
        } catch (const Error& e) {
            throw Error("submap " + std::to_string(s.id) + ": " + e.what());
        }
    }
    return out;
}

CovMatrix2 constant_q(std::span<const DatasetEntry> dataset) {
    if (dataset.empty()) {
        throw EmptyDataset("constant_q of an empty dataset");
    }
    CovMatrix2 mean = CovMatrix2::Zero();
    for (const auto& entry : dataset) {
        mean += entry.target_cov;
    }
    return mean / static_cast<double>(dataset.size());
}

}  // namespace bathykl::mccov
