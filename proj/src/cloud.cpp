#include "bathykl/cloud.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "bathykl/errors.hpp"

namespace bathykl::cloud {

void Submap::validate() const {
    if (points.rows() < 1) {
        throw DegenerateCloud("submap " + std::to_string(id) + " has no points");
    }
    if (!points.allFinite()) {
        throw DegenerateCloud("submap " + std::to_string(id) + " has non-finite coordinates");
    }
}

// --- NeighborIndex -----------------------------------------------------------

namespace {
constexpr int kLeafSize = 16;
}

NeighborIndex::NeighborIndex(PointMatrix points) : points_(std::move(points)) {
    const int n = static_cast<int>(points_.rows());
    order_.resize(n);
    for (int i = 0; i < n; ++i) order_[i] = i;
    nodes_.reserve(n > 0 ? 2 * n / kLeafSize + 2 : 1);
    if (n > 0) root_ = build(0, n);
}

int NeighborIndex::build(int begin, int end) {
    Node node;
    node.begin = begin;
    node.end = end;
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(node);
    if (end - begin <= kLeafSize) {
        return id;
    }

    Vec3 lo = points_.row(order_[begin]);
    Vec3 hi = lo;
    for (int i = begin + 1; i < end; ++i) {
        lo = lo.cwiseMin(points_.row(order_[i]).transpose());
        hi = hi.cwiseMax(points_.row(order_[i]).transpose());
    }
    int axis;
    (hi - lo).maxCoeff(&axis);
    if (hi[axis] - lo[axis] <= 0.0) {
        return id;  // all points identical along every axis: keep as leaf
    }

    const int mid = (begin + end) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](int a, int b) {
                         const double pa = points_(a, axis), pb = points_(b, axis);
                         return pa < pb || (pa == pb && a < b);
                     });
    nodes_[id].axis = axis;
    nodes_[id].split = points_(order_[mid], axis);
    const int left = build(begin, mid);
    const int right = build(mid, end);
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
}

template <class Visitor>
void NeighborIndex::search(int node_id, const Vec3& query, double& worst, Visitor&& visit) const {
    const Node& node = nodes_[node_id];
    if (node.axis < 0 || node.left < 0) {
        for (int i = node.begin; i < node.end; ++i) {
            const int idx = order_[i];
            const double d2 = (points_.row(idx).transpose() - query).squaredNorm();
            visit(d2, idx);
        }
        return;
    }
    const double delta = query[node.axis] - node.split;
    const int near = delta < 0 ? node.left : node.right;
    const int far = delta < 0 ? node.right : node.left;
    search(near, query, worst, visit);
    if (delta * delta <= worst) {
        search(far, query, worst, visit);
    }
}

std::vector<int> NeighborIndex::knn(const Vec3& query, int k) const {
    const int n = size();
    const int want = std::min(k, n);
    if (want <= 0) return {};

    // Best-k kept as a sorted vector of (d2, index); ties prefer lower index.
    std::vector<std::pair<double, int>> best;
    best.reserve(want + 1);
    double worst = std::numeric_limits<double>::infinity();
    auto visit = [&](double d2, int idx) {
        if (static_cast<int>(best.size()) == want) {
            const auto& back = best.back();
            if (d2 > back.first || (d2 == back.first && idx > back.second)) return;
        }
        const std::pair<double, int> entry(d2, idx);
        best.insert(std::upper_bound(best.begin(), best.end(), entry), entry);
        if (static_cast<int>(best.size()) > want) best.pop_back();
        if (static_cast<int>(best.size()) == want) worst = best.back().first;
    };
    search(root_, query, worst, visit);

    std::vector<int> out(best.size());
    for (std::size_t i = 0; i < best.size(); ++i) out[i] = best[i].second;
    return out;
}

std::pair<int, double> NeighborIndex::nearest(const Vec3& query) const {
    double worst = std::numeric_limits<double>::infinity();
    int best_idx = -1;
    auto visit = [&](double d2, int idx) {
        if (d2 < worst || (d2 == worst && idx < best_idx)) {
            worst = d2;
            best_idx = idx;
        }
    };
    search(root_, query, worst, visit);
    return {best_idx, std::sqrt(worst)};
}

// --- preprocessing -----------------------------------------------------------

PointMatrix voxel_downsample(const PointMatrix& points, double voxel_size) {
    if (voxel_size <= 0.0) {
        throw ConfigError("voxel_size must be positive");
    }
    if (points.rows() == 0) return points;

    const Vec3 min_corner = points.colwise().minCoeff();
    std::map<std::array<std::int64_t, 3>, std::pair<Vec3, std::int64_t>> cells;
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
        const Vec3 p = points.row(i);
        std::array<std::int64_t, 3> key;
        for (int a = 0; a < 3; ++a) {
            key[a] = static_cast<std::int64_t>(std::floor((p[a] - min_corner[a]) / voxel_size));
        }
        auto& cell =
            cells.try_emplace(key, std::pair<Vec3, std::int64_t>(Vec3::Zero(), 0)).first->second;
        cell.first += p;
        cell.second += 1;
    }
    PointMatrix out(cells.size(), 3);
    Eigen::Index row = 0;
    for (const auto& [key, cell] : cells) {
        out.row(row++) = (cell.first / static_cast<double>(cell.second)).transpose();
    }
    return out;
}

NormalizedCloud preprocess(const Submap& s, double voxel_size) {
    if (s.points.rows() < 2) {
        throw DegenerateCloud("preprocess requires at least 2 points");
    }
    // Canonical (lexicographic) point order first: every later reduction
    // then sums in a fixed order, making the output bitwise independent of
    // the input permutation.
    std::vector<Eigen::Index> order(s.points.rows());
    for (Eigen::Index i = 0; i < s.points.rows(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
        for (int c = 0; c < 3; ++c) {
            if (s.points(a, c) != s.points(b, c)) return s.points(a, c) < s.points(b, c);
        }
        return false;
    });
    PointMatrix centered(s.points.rows(), 3);
    for (Eigen::Index i = 0; i < s.points.rows(); ++i) centered.row(i) = s.points.row(order[i]);

    const Vec3 centroid = centered.colwise().mean();
    centered.rowwise() -= centroid.transpose();
    const double scale = centered.rowwise().norm().maxCoeff();
    if (scale <= 0.0) {
        throw DegenerateCloud("all points identical, cannot sphere-normalize");
    }
    centered /= scale;
    NormalizedCloud out;
    out.points = voxel_downsample(centered, voxel_size);
    out.source_id = s.id;
    return out;
}

double sigma_z(const NormalizedCloud& c) {
    if (c.points.rows() == 0) return 0.0;
    const double mean = c.points.col(2).mean();
    return std::sqrt((c.points.col(2).array() - mean).square().mean());
}

// --- GICP per-point covariances ----------------------------------------------

PointCovariances point_covariances(const PointMatrix& points, const NeighborIndex& index, int k,
                                   double epsilon) {
    if (k < 3) {
        throw ConfigError("point_covariances requires k >= 3");
    }
    const Eigen::Index n = points.rows();
    PointCovariances out;
    out.cov.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto nn = index.knn(points.row(i), k);
        Vec3 mean = Vec3::Zero();
        for (int j : nn) mean += index.points().row(j).transpose();
        mean /= static_cast<double>(nn.size());
        Mat3 cov = Mat3::Zero();
        for (int j : nn) {
            const Vec3 d = index.points().row(j).transpose() - mean;
            cov += d * d.transpose();
        }
        cov /= static_cast<double>(nn.size());
        // Replace eigenvalues by (epsilon, 1, 1), ascending: the distribution
        // is squashed along the local normal and left free in the tangent
        // plane, the plane-to-plane model.
        Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
        const Mat3 v = eig.eigenvectors();
        Vec3 replaced(epsilon, 1.0, 1.0);
        out.cov[i] = v * replaced.asDiagonal() * v.transpose();
    }
    return out;
}

PointCovariances point_covariances(const Submap& s, int k, double epsilon) {
    NeighborIndex index(s.points);
    return point_covariances(s.points, index, k, epsilon);
}

Submap add_noise(const Submap& s, const Vec3& sigma_xyz, std::uint64_t seed) {
    if ((sigma_xyz.array() < 0).any()) {
        throw ConfigError("noise sigma components must be >= 0");
    }
    Submap out = s;
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(s.id), 0x6e6f6973ULL));
    for (Eigen::Index i = 0; i < out.points.rows(); ++i) {
        for (int a = 0; a < 3; ++a) {
            if (sigma_xyz[a] > 0) {
                out.points(i, a) += rng.normal(0.0, sigma_xyz[a]);
            }
        }
    }
    return out;
}

// --- file formats ------------------------------------------------------------

namespace {

constexpr char kTextHeader[] = "BATHYKL-SUBMAP v1";
constexpr char kBinaryMagic[4] = {'B', 'K', 'S', 'M'};

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

void save_submap_text(const std::filesystem::path& path, const Submap& s) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open for writing: " + path.string());
    out << kTextHeader << "\n";
    const auto pose = geom::pose_to_seven(s.frame);
    for (int i = 0; i < 7; ++i) out << (i ? " " : "") << fmt(pose[i]);
    out << "\n";
    for (Eigen::Index i = 0; i < s.points.rows(); ++i) {
        out << fmt(s.points(i, 0)) << " " << fmt(s.points(i, 1)) << " " << fmt(s.points(i, 2))
            << "\n";
    }
    if (!out) throw DataError("write failed: " + path.string());
}

Submap load_submap_text(const std::filesystem::path& path, std::int64_t id) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open: " + path.string());
    std::string header;
    std::getline(in, header);
    if (header != kTextHeader) {
        throw DataError("bad submap header in " + path.string());
    }
    std::array<double, 7> pose;
    for (double& v : pose) {
        if (!(in >> v)) throw DataError("bad pose line in " + path.string());
    }
    std::vector<Vec3> pts;
    double x, y, z;
    while (in >> x >> y >> z) pts.emplace_back(x, y, z);

    Submap s;
    s.id = id;
    s.frame = geom::pose_from_seven(pose);
    s.points.resize(pts.size(), 3);
    for (std::size_t i = 0; i < pts.size(); ++i) s.points.row(i) = pts[i].transpose();
    s.validate();
    return s;
}

void save_submap_binary(const std::filesystem::path& path, const Submap& s) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path.string());
    out.write(kBinaryMagic, 4);
    const std::uint64_t n = static_cast<std::uint64_t>(s.points.rows());
    out.write(reinterpret_cast<const char*>(&n), sizeof(n));
    const auto pose = geom::pose_to_seven(s.frame);
    out.write(reinterpret_cast<const char*>(pose.data()), 7 * sizeof(double));
    for (Eigen::Index i = 0; i < s.points.rows(); ++i) {
        const double row[3] = {s.points(i, 0), s.points(i, 1), s.points(i, 2)};
        out.write(reinterpret_cast<const char*>(row), sizeof(row));
    }
    if (!out) throw DataError("write failed: " + path.string());
}

Submap load_submap_binary(const std::filesystem::path& path, std::int64_t id) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open: " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kBinaryMagic, 4) != 0) {
        throw DataError("bad submap magic in " + path.string());
    }
    std::uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), sizeof(n));
    std::array<double, 7> pose;
    in.read(reinterpret_cast<char*>(pose.data()), 7 * sizeof(double));
    Submap s;
    s.id = id;
    s.frame = geom::pose_from_seven(pose);
    s.points.resize(n, 3);
    for (std::uint64_t i = 0; i < n; ++i) {
        double row[3];
        in.read(reinterpret_cast<char*>(row), sizeof(row));
        if (!in) throw DataError("truncated submap file: " + path.string());
        s.points.row(i) = Eigen::RowVector3d(row[0], row[1], row[2]);
    }
    s.validate();
    return s;
}

Submap load_submap(const std::filesystem::path& path, std::int64_t id) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open: " + path.string());
    char magic[4] = {0, 0, 0, 0};
    in.read(magic, 4);
    in.close();
    if (std::memcmp(magic, kBinaryMagic, 4) == 0) {
        return load_submap_binary(path, id);
    }
    return load_submap_text(path, id);
}

}  // namespace bathykl::cloud
