#include "bathykl/slam.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "bathykl/errors.hpp"
#include "bathykl/rng.hpp"

namespace bathykl::slam {

void LcPolicy::validate() const {
    if (coverage <= 0.0 || coverage > 1.0) {
        throw ConfigError("LC coverage threshold must lie in (0, 1]");
    }
    prior.validate();
    if ((dr_sigma.array() <= 0).any()) {
        throw ConfigError("DR sigmas must be positive");
    }
}

// --- footprint overlap ---------------------------------------------------

namespace {

using Point2 = Eigen::Vector2d;

double cross2(const Point2& o, const Point2& a, const Point2& b) {
    return (a.x() - o.x()) * (b.y() - o.y()) - (a.y() - o.y()) * (b.x() - o.x());
}

// Andrew monotone chain, CCW hull without collinear points.
std::vector<Point2> convex_hull(std::vector<Point2> pts) {
    std::sort(pts.begin(), pts.end(), [](const Point2& a, const Point2& b) {
        return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y());
    });
    pts.erase(std::unique(pts.begin(), pts.end(),
                          [](const Point2& a, const Point2& b) { return a == b; }),
              pts.end());
    const int n = static_cast<int>(pts.size());
    if (n < 3) return pts;
    std::vector<Point2> hull(2 * n);
    int k = 0;
    for (int i = 0; i < n; ++i) {
        while (k >= 2 && cross2(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
        hull[k++] = pts[i];
    }
    const int lower = k + 1;
    for (int i = n - 2; i >= 0; --i) {
        while (k >= lower && cross2(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
        hull[k++] = pts[i];
    }
    hull.resize(k - 1);
    return hull;
}

bool inside_convex(const std::vector<Point2>& hull, const Point2& p) {
    if (hull.size() < 3) return false;
    constexpr double eps = 1e-12;
    for (std::size_t i = 0; i < hull.size(); ++i) {
        const Point2& a = hull[i];
        const Point2& b = hull[(i + 1) % hull.size()];
        if (cross2(a, b, p) < -eps) return false;
    }
    return true;
}

std::vector<Point2> xy_of(const Submap& s) {
    std::vector<Point2> pts(s.points.rows());
    for (Eigen::Index i = 0; i < s.points.rows(); ++i) {
        pts[i] = Point2(s.points(i, 0), s.points(i, 1));
    }
    return pts;
}

}  // namespace

double footprint_overlap(const Submap& candidate, const Submap& prior) {
    const auto hull = convex_hull(xy_of(prior));
    if (hull.size() < 3 || candidate.points.rows() == 0) return 0.0;
    Eigen::Index inside = 0;
    for (Eigen::Index i = 0; i < candidate.points.rows(); ++i) {
        if (inside_convex(hull, Point2(candidate.points(i, 0), candidate.points(i, 1)))) {
            ++inside;
        }
    }
    return static_cast<double>(inside) / static_cast<double>(candidate.points.rows());
}

std::vector<int> detect_lc(const Submap& candidate, std::span<const Submap> priors,
                           const LcPolicy& policy) {
    policy.validate();
    std::vector<int> matched;
    for (std::size_t i = 0; i < priors.size(); ++i) {
        if (footprint_overlap(candidate, priors[i]) >= policy.coverage) {
            matched.push_back(static_cast<int>(i));
        }
    }
    return matched;
}

// --- graph construction ----------------------------------------------------

BuildResult build_corrupted_graph(std::span<const Submap> submaps, const LcPolicy& policy,
                                  const registration::GicpConfig& gicp,
                                  const CorruptionConfig& corruption) {
    policy.validate();
    if (submaps.size() < 2) {
        throw ConfigError("build_corrupted_graph needs at least 2 submaps");
    }

    BuildResult result;
    PoseGraph& graph = result.graph;
    const int n = static_cast<int>(submaps.size());
    result.gt_poses.reserve(n);
    for (const Submap& s : submaps) result.gt_poses.push_back(s.frame);

    std::vector<Submap> prior_submaps;  // corrected copies, Algorithm-style S_graph
    std::vector<int> prior_nodes;
    prior_submaps.reserve(n);
    prior_nodes.reserve(n);

    for (int i = 0; i < n; ++i) {
        if (i > 0) {
            DrEdge edge;
            edge.a = i - 1;
            edge.b = i;
            edge.rel = geom::relative(result.gt_poses[i - 1], result.gt_poses[i]);
            edge.sigma = policy.dr_sigma;
            graph.dr_edges.push_back(edge);
        }

        const auto matched = detect_lc(submaps[i], prior_submaps, policy);
        if (matched.empty()) {
            prior_submaps.push_back(submaps[i]);
            prior_nodes.push_back(i);
            continue;
        }

        // Perturb the candidate with a draw from the prior, register against
        // the fused matches, correct.
        const PlanarShift o = mccov::sample_perturbation(
            policy.prior, derive_seed(corruption.seed, 0x4c43ULL, static_cast<std::uint64_t>(i)));
        Submap perturbed = submaps[i];
        perturbed.points.col(0).array() += o.dx;
        perturbed.points.col(1).array() += o.dy;

        Eigen::Index fused_rows = 0;
        for (int m : matched) fused_rows += prior_submaps[m].points.rows();
        Submap fused;
        fused.id = -1;
        fused.points.resize(fused_rows, 3);
        Eigen::Index row = 0;
        for (int m : matched) {
            fused.points.middleRows(row, prior_submaps[m].points.rows()) =
                prior_submaps[m].points;
            row += prior_submaps[m].points.rows();
        }

        registration::RegistrationResult reg;
        registration::NaiveInformation naive;
        try {
            const auto prepared = registration::prepare_target(fused, gicp);
            reg = registration::gicp_register_xy(perturbed, prepared, PlanarShift{}, gicp);
            naive = registration::naive_information_xy(perturbed, prepared, reg.shift, gicp);
        } catch (const Error&) {
            ++result.n_lc_dropped;
            prior_submaps.push_back(submaps[i]);
            prior_nodes.push_back(i);
            continue;
        }

        // Residual measurement error; with a perfect registration the
        // correction cancels the perturbation exactly.
        const Eigen::Vector2d delta(o.dx + reg.shift.dx, o.dy + reg.shift.dy);

        Submap corrected = std::move(perturbed);
        corrected.points.col(0).array() += reg.shift.dx;
        corrected.points.col(1).array() += reg.shift.dy;
        corrected.frame = geom::compose(
            geom::translate(delta.x(), delta.y(), 0.0), submaps[i].frame);

        for (int m : matched) {
            LcEdge edge;
            edge.a = prior_nodes[m];
            edge.b = i;
            const RigidTransform& ta = result.gt_poses[edge.a];
            const Eigen::Vector2d measured_b =
                result.gt_poses[i].translation.head<2>() + delta;
            const Eigen::Vector2d dp = measured_b - ta.translation.head<2>();
            const double yaw_a = geom::yaw_of(ta);
            const double c = std::cos(yaw_a), s = std::sin(yaw_a);
            edge.z = PlanarShift{c * dp.x() + s * dp.y(), -s * dp.x() + c * dp.y()};
            edge.naive = naive;
            graph.lc_edges.push_back(edge);
        }
        result.lc_candidate_ids.push_back(static_cast<int>(submaps[i].id));
        prior_submaps.push_back(std::move(corrected));
        prior_nodes.push_back(i);
    }

    // Corrupt: integrate per-step noise along the DR chain. The drift lands
    // in both the DR measurements and the initial estimates, so DR residuals
    // start at zero and loop closures carry the correcting information.
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 6, 6>> eig(corruption.rc);
    const Eigen::Matrix<double, 6, 6> noise_root =
        eig.eigenvectors() *
        eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
        eig.eigenvectors().transpose();
    Rng rng(derive_seed(corruption.seed, 0x636f7272ULL));

    graph.nodes.resize(n);
    graph.nodes[0] = result.gt_poses[0];
    for (auto& edge : graph.dr_edges) {
        geom::TangentVector eta;
        for (int k = 0; k < 6; ++k) eta[k] = rng.normal();
        eta = noise_root * eta;
        edge.rel = geom::compose(edge.rel, geom::exp_map(eta));
        graph.nodes[edge.b] = geom::compose(graph.nodes[edge.a], edge.rel);
    }
    return result;
}

// --- optimization ------------------------------------------------------------

namespace {

double wrap_angle(double a) {
    while (a > M_PI) a -= 2.0 * M_PI;
    while (a <= -M_PI) a += 2.0 * M_PI;
    return a;
}

struct PlanarState {
    Eigen::VectorXd v;  // 3 per node: x, y, yaw

    double x(int i) const { return v[3 * i]; }
    double y(int i) const { return v[3 * i + 1]; }
    double yaw(int i) const { return v[3 * i + 2]; }
};

struct DrMeasurement {
    double mx, my, myaw;
    Eigen::Vector3d w;  // whitening weights 1/sigma
};

double graph_cost(const PoseGraph& graph, const std::vector<DrMeasurement>& dr_meas,
                  const std::vector<Eigen::Matrix2d>& lc_whiten, const PlanarState& s) {
    double cost = 0.0;
    for (std::size_t k = 0; k < graph.dr_edges.size(); ++k) {
        const auto& e = graph.dr_edges[k];
        const auto& m = dr_meas[k];
        const double ca = std::cos(s.yaw(e.a)), sa = std::sin(s.yaw(e.a));
        const double dx = s.x(e.b) - s.x(e.a), dy = s.y(e.b) - s.y(e.a);
        const double rx = (ca * dx + sa * dy - m.mx) * m.w[0];
        const double ry = (-sa * dx + ca * dy - m.my) * m.w[1];
        const double ryaw = wrap_angle(s.yaw(e.b) - s.yaw(e.a) - m.myaw) * m.w[2];
        cost += rx * rx + ry * ry + ryaw * ryaw;
    }
    for (std::size_t k = 0; k < graph.lc_edges.size(); ++k) {
        const auto& e = graph.lc_edges[k];
        const double ca = std::cos(s.yaw(e.a)), sa = std::sin(s.yaw(e.a));
        const double dx = s.x(e.b) - s.x(e.a), dy = s.y(e.b) - s.y(e.a);
        const Eigen::Vector2d r(ca * dx + sa * dy - e.z.dx, -sa * dx + ca * dy - e.z.dy);
        cost += (lc_whiten[k] * r).squaredNorm();
    }
    return cost;
}

}  // namespace

std::vector<RigidTransform> optimize(const PoseGraph& graph, OptimizeReport* report) {
    const int n = static_cast<int>(graph.nodes.size());
    if (n == 0) throw ConfigError("optimize on an empty graph");

    PlanarState state;
    state.v.resize(3 * n);
    std::vector<double> z_of(n);
    for (int i = 0; i < n; ++i) {
        state.v[3 * i] = graph.nodes[i].translation.x();
        state.v[3 * i + 1] = graph.nodes[i].translation.y();
        state.v[3 * i + 2] = geom::yaw_of(graph.nodes[i]);
        z_of[i] = graph.nodes[i].translation.z();
    }

    std::vector<DrMeasurement> dr_meas;
    dr_meas.reserve(graph.dr_edges.size());
    for (const auto& e : graph.dr_edges) {
        DrMeasurement m;
        m.mx = e.rel.translation.x();
        m.my = e.rel.translation.y();
        m.myaw = geom::yaw_of(e.rel);
        m.w = Eigen::Vector3d(1.0 / e.sigma[0], 1.0 / e.sigma[1], 1.0 / e.sigma[2]);
        dr_meas.push_back(m);
    }
    std::vector<Eigen::Matrix2d> lc_whiten;
    lc_whiten.reserve(graph.lc_edges.size());
    for (const auto& e : graph.lc_edges) {
        CovMatrix2 q = e.q;
        Eigen::LLT<Eigen::Matrix2d> llt(q);
        if (llt.info() != Eigen::Success) {
            q += 1e-9 * Eigen::Matrix2d::Identity();
            llt.compute(q);
            if (llt.info() != Eigen::Success) {
                throw NotPositiveDefinite("LC edge weight is not positive definite");
            }
        }
        // Whitening W with W^T W = Q^-1.
        lc_whiten.push_back(Eigen::Matrix2d(
            llt.matrixL().solve(Eigen::Matrix2d::Identity())));
    }

    const int dim = 3 * (n - 1);  // node 0 anchored
    auto col_of = [](int node, int comp) { return 3 * (node - 1) + comp; };

    double cost = graph_cost(graph, dr_meas, lc_whiten, state);
    const double initial_cost = cost;
    double lambda = 1e-6;
    bool converged = false;
    int iterations = 0;

    Eigen::MatrixXd h(dim, dim);
    Eigen::VectorXd g(dim);
    for (int outer = 0; outer < 100 && dim > 0; ++outer) {
        iterations = outer + 1;
        h.setZero();
        g.setZero();

        // Accumulate J^T J and J^T r over whitened residuals.
        auto accumulate = [&](const std::vector<std::pair<int, Eigen::VectorXd>>& jac_cols,
                              const Eigen::VectorXd& residual) {
            for (std::size_t p = 0; p < jac_cols.size(); ++p) {
                const int cp = jac_cols[p].first;
                if (cp < 0) continue;
                g[cp] += jac_cols[p].second.dot(residual);
                for (std::size_t q2 = 0; q2 < jac_cols.size(); ++q2) {
                    const int cq = jac_cols[q2].first;
                    if (cq < 0) continue;
                    h(cp, cq) += jac_cols[p].second.dot(jac_cols[q2].second);
                }
            }
        };

        for (std::size_t k = 0; k < graph.dr_edges.size(); ++k) {
            const auto& e = graph.dr_edges[k];
            const auto& m = dr_meas[k];
            const double ca = std::cos(state.yaw(e.a)), sa = std::sin(state.yaw(e.a));
            const double dx = state.x(e.b) - state.x(e.a), dy = state.y(e.b) - state.y(e.a);
            Eigen::Vector3d r(ca * dx + sa * dy - m.mx, -sa * dx + ca * dy - m.my,
                              wrap_angle(state.yaw(e.b) - state.yaw(e.a) - m.myaw));
            r = r.cwiseProduct(m.w);

            // Columns: xa ya yawa xb yb yawb (whitened rows).
            std::vector<std::pair<int, Eigen::VectorXd>> cols;
            auto wcol = [&](double r0, double r1, double r2) {
                return Eigen::Vector3d(r0 * m.w[0], r1 * m.w[1], r2 * m.w[2]);
            };
            const int ca0 = e.a == 0 ? -1 : col_of(e.a, 0);
            const int ca1 = e.a == 0 ? -1 : col_of(e.a, 1);
            const int ca2 = e.a == 0 ? -1 : col_of(e.a, 2);
            cols.emplace_back(ca0, wcol(-ca, sa, 0));
            cols.emplace_back(ca1, wcol(-sa, -ca, 0));
            cols.emplace_back(ca2, wcol(-sa * dx + ca * dy, -ca * dx - sa * dy, -1));
            cols.emplace_back(e.b == 0 ? -1 : col_of(e.b, 0), wcol(ca, -sa, 0));
            cols.emplace_back(e.b == 0 ? -1 : col_of(e.b, 1), wcol(sa, ca, 0));
            cols.emplace_back(e.b == 0 ? -1 : col_of(e.b, 2), wcol(0, 0, 1));
            accumulate(cols, r);
        }

        for (std::size_t k = 0; k < graph.lc_edges.size(); ++k) {
            const auto& e = graph.lc_edges[k];
            const Eigen::Matrix2d& w = lc_whiten[k];
            const double ca = std::cos(state.yaw(e.a)), sa = std::sin(state.yaw(e.a));
            const double dx = state.x(e.b) - state.x(e.a), dy = state.y(e.b) - state.y(e.a);
            const Eigen::Vector2d r =
                w * Eigen::Vector2d(ca * dx + sa * dy - e.z.dx, -sa * dx + ca * dy - e.z.dy);

            std::vector<std::pair<int, Eigen::VectorXd>> cols;
            auto wcol = [&](double r0, double r1) {
                return Eigen::Vector2d(w(0, 0) * r0 + w(0, 1) * r1, w(1, 0) * r0 + w(1, 1) * r1);
            };
            cols.emplace_back(e.a == 0 ? -1 : col_of(e.a, 0), wcol(-ca, sa));
            cols.emplace_back(e.a == 0 ? -1 : col_of(e.a, 1), wcol(-sa, -ca));
            cols.emplace_back(e.a == 0 ? -1 : col_of(e.a, 2),
                              wcol(-sa * dx + ca * dy, -ca * dx - sa * dy));
            cols.emplace_back(e.b == 0 ? -1 : col_of(e.b, 0), wcol(ca, -sa));
            cols.emplace_back(e.b == 0 ? -1 : col_of(e.b, 1), wcol(sa, ca));
            accumulate(cols, r);
        }

        // Levenberg-Marquardt inner loop on the damping.
        bool accepted = false;
        for (int inner = 0; inner < 20; ++inner) {
            Eigen::MatrixXd damped = h;
            damped.diagonal() += lambda * h.diagonal().cwiseMax(1e-12);
            const Eigen::VectorXd delta = damped.ldlt().solve(-g);
            if (!delta.allFinite()) {
                throw SingularSystem("optimize: singular normal equations");
            }
            PlanarState trial = state;
            for (int i = 1; i < n; ++i) {
                trial.v[3 * i] += delta[col_of(i, 0)];
                trial.v[3 * i + 1] += delta[col_of(i, 1)];
                trial.v[3 * i + 2] = wrap_angle(trial.v[3 * i + 2] + delta[col_of(i, 2)]);
            }
            const double trial_cost = graph_cost(graph, dr_meas, lc_whiten, trial);
            if (trial_cost <= cost) {
                const double improvement = cost - trial_cost;
                state = trial;
                const double prev = cost;
                cost = trial_cost;
                lambda = std::max(lambda / 3.0, 1e-12);
                accepted = true;
                if (prev <= 1e-300 || improvement < 1e-9 * prev) converged = true;
                break;
            }
            lambda *= 4.0;
        }
        if (!accepted || converged) {
            converged = converged || !accepted;
            break;
        }
    }

    std::vector<RigidTransform> out(n);
    for (int i = 0; i < n; ++i) {
        out[i] = geom::compose(geom::translate(state.x(i), state.y(i), z_of[i]),
                               geom::rot_z(state.yaw(i)));
    }
    if (report) {
        report->initial_cost = initial_cost;
        report->final_cost = cost;
        report->iterations = iterations;
        report->converged = converged;
    }
    return out;
}

// --- metrics -------------------------------------------------------------

double rmse_xyz(std::span<const RigidTransform> estimated, std::span<const RigidTransform> gt) {
    if (estimated.size() != gt.size()) {
        throw LengthMismatch("rmse_xyz: trajectory lengths differ");
    }
    if (estimated.empty()) throw LengthMismatch("rmse_xyz: empty trajectories");
    double sum = 0.0;
    for (std::size_t i = 0; i < estimated.size(); ++i) {
        sum += (estimated[i].translation - gt[i].translation).squaredNorm();
    }
    return std::sqrt(sum / static_cast<double>(estimated.size()));
}

double map_to_map(std::span<const Submap> submaps, std::span<const RigidTransform> gt_poses,
                  std::span<const RigidTransform> estimated_poses,
                  std::span<const std::pair<int, int>> pairs, double cell_size) {
    if (pairs.empty()) throw NoOverlap("map_to_map: no overlapping pairs");
    if (cell_size <= 0) throw ConfigError("map_to_map: cell_size must be positive");

    using Cell = std::pair<std::int64_t, std::int64_t>;
    auto rasterize = [&](int idx) {
        std::map<Cell, std::pair<double, int>> grid;
        const RigidTransform move =
            geom::compose(estimated_poses[idx], geom::inverse(gt_poses[idx]));
        const auto pts = geom::apply(move, submaps[idx].points);
        for (Eigen::Index i = 0; i < pts.rows(); ++i) {
            const Cell c{static_cast<std::int64_t>(std::floor(pts(i, 0) / cell_size)),
                         static_cast<std::int64_t>(std::floor(pts(i, 1) / cell_size))};
            auto& slot = grid[c];
            slot.first += pts(i, 2);
            slot.second += 1;
        }
        return grid;
    };

    double sum_sq = 0.0;
    std::int64_t n_cells = 0;
    for (const auto& [a, b] : pairs) {
        const auto grid_a = rasterize(a);
        const auto grid_b = rasterize(b);
        for (const auto& [cell, slot_a] : grid_a) {
            const auto it = grid_b.find(cell);
            if (it == grid_b.end()) continue;
            const double mean_a = slot_a.first / slot_a.second;
            const double mean_b = it->second.first / it->second.second;
            const double d = std::abs(mean_a - mean_b);
            sum_sq += d * d;
            ++n_cells;
        }
    }
    if (n_cells == 0) throw NoOverlap("map_to_map: no co-occupied cells");
    return std::sqrt(sum_sq / static_cast<double>(n_cells));
}

// --- graph text format --------------------------------------------------------

namespace {
std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}
}  // namespace

void save_graph(const std::filesystem::path& path, const PoseGraph& graph) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open for writing: " + path.string());
    for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
        const auto p = geom::pose_to_seven(graph.nodes[i]);
        out << "NODE " << i;
        for (double v : p) out << " " << fmt(v);
        out << "\n";
    }
    for (const auto& e : graph.dr_edges) {
        const auto p = geom::pose_to_seven(e.rel);
        out << "EDGE_DR " << e.a << " " << e.b;
        for (double v : p) out << " " << fmt(v);
        Eigen::Matrix<double, 6, 6> info = Eigen::Matrix<double, 6, 6>::Zero();
        info(0, 0) = 1.0 / (e.sigma[0] * e.sigma[0]);
        info(1, 1) = 1.0 / (e.sigma[1] * e.sigma[1]);
        info(5, 5) = 1.0 / (e.sigma[2] * e.sigma[2]);
        for (int r = 0; r < 6; ++r) {
            for (int c = r; c < 6; ++c) out << " " << fmt(info(r, c));
        }
        out << "\n";
    }
    for (const auto& e : graph.lc_edges) {
        const Eigen::Matrix2d info = e.q.inverse();
        out << "EDGE_LC " << e.a << " " << e.b << " " << fmt(e.z.dx) << " " << fmt(e.z.dy) << " "
            << fmt(info(0, 0)) << " " << fmt(info(0, 1)) << " " << fmt(info(1, 1)) << "\n";
    }
    if (!out) throw DataError("write failed: " + path.string());
}

PoseGraph load_graph(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open: " + path.string());
    PoseGraph graph;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string tag;
        ss >> tag;
        if (tag == "NODE") {
            std::size_t id;
            std::array<double, 7> p;
            ss >> id;
            for (double& v : p) ss >> v;
            if (!ss) throw DataError("bad NODE line: " + line);
            if (graph.nodes.size() <= id) graph.nodes.resize(id + 1);
            graph.nodes[id] = geom::pose_from_seven(p);
        } else if (tag == "EDGE_DR") {
            DrEdge e;
            std::array<double, 7> p;
            ss >> e.a >> e.b;
            for (double& v : p) ss >> v;
            Eigen::Matrix<double, 6, 6> info;
            for (int r = 0; r < 6; ++r) {
                for (int c = r; c < 6; ++c) {
                    double v;
                    ss >> v;
                    info(r, c) = info(c, r) = v;
                }
            }
            if (!ss) throw DataError("bad EDGE_DR line: " + line);
            e.rel = geom::pose_from_seven(p);
            auto sigma_from = [&](double i) { return i > 0 ? 1.0 / std::sqrt(i) : 1e6; };
            e.sigma = geom::Vec3(sigma_from(info(0, 0)), sigma_from(info(1, 1)),
                                 sigma_from(info(5, 5)));
            graph.dr_edges.push_back(e);
        } else if (tag == "EDGE_LC") {
            LcEdge e;
            double ixx, ixy, iyy;
            ss >> e.a >> e.b >> e.z.dx >> e.z.dy >> ixx >> ixy >> iyy;
            if (!ss) throw DataError("bad EDGE_LC line: " + line);
            Eigen::Matrix2d info;
            info << ixx, ixy, ixy, iyy;
            e.q = info.inverse();
            graph.lc_edges.push_back(e);
        } else {
            throw DataError("unknown graph line tag: " + tag);
        }
    }
    return graph;
}

}  // namespace bathykl::slam
