#include <doctest.h>

#include <Eigen/Dense>
#include <filesystem>
#include <fstream>

#include "bathykl/errors.hpp"
#include "bathykl/net.hpp"

using namespace bathykl;
using namespace bathykl::net;

namespace {

ModelConfig tiny_config(bool transforms = false) {
    ModelConfig cfg;
    cfg.point_mlp_sizes = {8, 8};
    cfg.head_sizes = {8, 8};
    cfg.output_dim = 2;
    cfg.dropout_p = 0.4;
    cfg.use_input_transform = transforms;
    cfg.tnet_mlp_sizes = {6, 8};
    cfg.tnet_fc_sizes = {8};
    return cfg;
}

NormalizedCloud random_cloud(Rng& rng, int n) {
    NormalizedCloud c;
    c.points.resize(n, 3);
    for (int i = 0; i < c.points.size(); ++i) c.points.data()[i] = rng.uniform(-1.0, 1.0);
    const double scale = c.points.rowwise().norm().maxCoeff();
    if (scale > 1.0) c.points /= scale;
    return c;
}

Eigen::MatrixXd random_spd(Rng& rng, int m, double jitter = 0.1) {
    Eigen::MatrixXd a(m, m);
    for (int i = 0; i < a.size(); ++i) a.data()[i] = rng.normal();
    return a * a.transpose() + jitter * Eigen::MatrixXd::Identity(m, m);
}

void randomize_params(Model& model, std::uint64_t seed, double scale = 0.5) {
    Rng rng(seed);
    for (int i = 0; i < model.params().size(); ++i) {
        model.params()[i] = rng.uniform(-scale, scale);
    }
}

}  // namespace

TEST_SUITE_BEGIN("unit");

TEST_CASE("compose_covariance hand cases") {
    CholeskyParams cp;
    cp.l = Eigen::VectorXd::Zero(1);
    cp.d = Eigen::VectorXd::Zero(2);
    CHECK((compose_covariance(cp) - Eigen::Matrix2d::Identity()).norm() < 1e-15);

    cp.l[0] = 0.5;
    cp.d[0] = 0.0;
    cp.d[1] = std::log(2.0);
    Eigen::Matrix2d expected;
    expected << 1.0, 0.5, 0.5, 2.25;
    CHECK((compose_covariance(cp) - expected).norm() < 1e-12);
}

TEST_CASE("compose_covariance is PD for any finite parameters") {
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const int m = 2 + static_cast<int>(rng.uniform_index(3));
        CholeskyParams cp;
        cp.l.resize((m * m - m) / 2);
        cp.d.resize(m);
        for (int i = 0; i < cp.l.size(); ++i) cp.l[i] = rng.uniform(-4, 4);
        for (int i = 0; i < cp.d.size(); ++i) cp.d[i] = rng.uniform(-6, 4);
        const Eigen::MatrixXd sigma = compose_covariance(cp);
        CHECK((sigma - sigma.transpose()).norm() < 1e-12);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sigma);
        CHECK(eig.eigenvalues()(0) > 0.0);
    }
}

TEST_CASE("kl_divergence closed forms") {
    const Eigen::Matrix2d identity = Eigen::Matrix2d::Identity();
    CHECK(kl_divergence(identity, identity) == doctest::Approx(0.0).epsilon(1e-12));

    // D_KL(N(0,2I) || N(0,I)) = 0.5 (4 - 2 + ln(1/4)) = 1 - ln 2.
    CHECK(kl_divergence(2.0 * identity, identity) ==
          doctest::Approx(1.0 - std::log(2.0)).epsilon(1e-12));

    // D_KL(N(0,diag(4,1)) || N(0,I)) = 0.5 (5 - 2 + ln(1/4)).
    Eigen::Matrix2d diag41 = identity;
    diag41(0, 0) = 4.0;
    CHECK(kl_divergence(diag41, identity) ==
          doctest::Approx(0.5 * (3.0 - std::log(4.0))).epsilon(1e-12));

    // Mean term: D_KL(N(mu,I) || N(0,I)) = 0.5 |mu|^2.
    Eigen::VectorXd mu(2);
    mu << 1.0, 2.0;
    CHECK(kl_divergence(identity, mu, identity, Eigen::VectorXd::Zero(2)) ==
          doctest::Approx(2.5).epsilon(1e-12));
}

TEST_CASE("kl_divergence properties and errors") {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const Eigen::MatrixXd s = random_spd(rng, 2);
        const Eigen::MatrixXd p = random_spd(rng, 2);
        CHECK(kl_divergence(s, p) >= -1e-12);
        CHECK(kl_divergence(s, s) < 1e-9);
    }
    Eigen::Matrix2d indefinite;
    indefinite << 1.0, 2.0, 2.0, 1.0;
    CHECK_THROWS_AS((void)kl_divergence(indefinite, Eigen::Matrix2d::Identity()),
                    NotPositiveDefinite);
    CHECK_THROWS_AS((void)kl_divergence(Eigen::Matrix2d::Identity(), indefinite),
                    NotPositiveDefinite);
}

TEST_CASE("untrained model predicts the prior covariance") {
    Model model(tiny_config(), 1);
    Rng rng(7);
    const NormalizedCloud cloud = random_cloud(rng, 20);
    CHECK((model.predict_cov(cloud) - 9.0 * Eigen::Matrix2d::Identity()).norm() < 1e-12);
}

TEST_CASE("forward_feature is permutation and duplication invariant") {
    Model model(tiny_config(), 11);
    randomize_params(model, 13);

    Rng rng(17);
    const NormalizedCloud cloud = random_cloud(rng, 30);
    const Eigen::VectorXd feat = model.forward_feature(cloud, Mode::Eval);
    CHECK(feat.size() == tiny_config().feature_dim());

    NormalizedCloud shuffled = cloud;
    for (Eigen::Index i = shuffled.points.rows() - 1; i > 0; --i) {
        const Eigen::Index j = static_cast<Eigen::Index>(rng.uniform_index(i + 1));
        shuffled.points.row(i).swap(shuffled.points.row(j));
    }
    CHECK((feat - model.forward_feature(shuffled, Mode::Eval)).cwiseAbs().maxCoeff() <= 1e-12);

    NormalizedCloud duplicated = cloud;
    duplicated.points.conservativeResize(cloud.points.rows() + 1, 3);
    duplicated.points.row(cloud.points.rows()) = cloud.points.row(0);
    CHECK((feat - model.forward_feature(duplicated, Mode::Eval)).cwiseAbs().maxCoeff() <= 1e-12);

    NormalizedCloud empty;
    empty.points.resize(0, 3);
    CHECK_THROWS_AS((void)model.forward_feature(empty, Mode::Eval), EmptyCloud);
}

TEST_CASE("default feature dimension is 1024") {
    ModelConfig cfg;  // paper-sized
    Model model(cfg, 1);
    Rng rng(19);
    const NormalizedCloud cloud = random_cloud(rng, 8);
    CHECK(model.forward_feature(cloud, Mode::Eval).size() == 1024);
}

TEST_CASE("forward_head output layout is deterministic in eval mode") {
    ModelConfig cfg = tiny_config();
    Model model(cfg, 23);
    Rng rng(29);
    Eigen::VectorXd feat(cfg.feature_dim());
    for (int i = 0; i < feat.size(); ++i) feat[i] = rng.uniform(0, 1);

    const CholeskyParams a = model.forward_head(feat, Mode::Eval);
    CHECK(a.l.size() == 1);
    CHECK(a.d.size() == 2);
    const CholeskyParams b = model.forward_head(feat, Mode::Eval);
    CHECK((a.l - b.l).norm() == 0.0);
    CHECK((a.d - b.d).norm() == 0.0);
}

TEST_CASE("dropout zero makes train-mode output seed independent") {
    ModelConfig cfg = tiny_config();
    cfg.dropout_p = 0.0;
    Model model(cfg, 31);
    randomize_params(model, 37);

    Rng rng(41);
    std::vector<DatasetEntry> entries(4);
    for (auto& e : entries) {
        e.cloud = random_cloud(rng, 12);
        e.target_cov = Eigen::Matrix2d::Identity();
    }
    Batch batch = make_batch(entries, {0, 1, 2, 3});
    const auto a = model.covariances(batch, Mode::Train, 0);
    const auto b = model.covariances(batch, Mode::Train, 999);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK((a[i] - b[i]).norm() == 0.0);
    }
}

TEST_CASE("batch-norm eval equals train when statistics are forced") {
    // Directly freeze running stats to the biased batch statistics by
    // momentum 1 plus a manual unbias correction, then compare outputs.
    ModelConfig cfg = tiny_config();
    cfg.dropout_p = 0.0;
    cfg.bn_momentum = 1.0;
    Model model(cfg, 43);
    randomize_params(model, 47);

    Rng rng(53);
    std::vector<DatasetEntry> entries(3);
    for (auto& e : entries) {
        e.cloud = random_cloud(rng, 10);
        e.target_cov = Eigen::Matrix2d::Identity();
    }
    Batch batch = make_batch(entries, {0, 1, 2});

    const auto train_covs = model.covariances(batch, Mode::Train);
    (void)model.loss_batch(batch, Mode::Train, 0, true);  // running := batch stats (unbiased var)

    // Scale running variances back to the biased estimate: phi layers pooled
    // n = total points, head layers n = batch size.
    const Eigen::Index n_points = 3 * 10;
    const Eigen::Index n_rows = 3;
    for (std::size_t i = 0; i < model.buffer_arrays().size(); ++i) {
        const auto& a = model.buffer_arrays()[i];
        if (a.name.find("running_var") == std::string::npos) continue;
        const bool head = a.name.rfind("head", 0) == 0;
        const double n = head ? static_cast<double>(n_rows) : static_cast<double>(n_points);
        for (int k = 0; k < a.rows * a.cols; ++k) {
            model.buffers()[a.offset + k] *= (n - 1.0) / n;
        }
    }
    const auto eval_covs = model.covariances(batch, Mode::Eval);
    for (std::size_t i = 0; i < train_covs.size(); ++i) {
        CHECK((train_covs[i] - eval_covs[i]).norm() < 1e-9);
    }
}

TEST_CASE("loss_batch basics") {
    ModelConfig cfg = tiny_config();
    Model model(cfg, 43);
    Rng rng(47);
    std::vector<DatasetEntry> entries(3);
    for (auto& e : entries) {
        e.cloud = random_cloud(rng, 10);
        e.target_cov = 9.0 * Eigen::Matrix2d::Identity();
    }
    Batch batch = make_batch(entries, {0, 1, 2});

    // Untrained model emits exactly 9I, so against 9I targets the loss is 0.
    CHECK(model.loss_batch(batch, Mode::Eval) == doctest::Approx(0.0).epsilon(1e-12));

    randomize_params(model, 53);
    const double a = model.loss_batch(batch, Mode::Eval);
    Batch reversed = make_batch(entries, {2, 1, 0});
    CHECK(a == doctest::Approx(model.loss_batch(reversed, Mode::Eval)).epsilon(1e-12));
    CHECK(a >= 0.0);
}

TEST_CASE("backward at an exact minimum has zero gradient") {
    ModelConfig cfg = tiny_config();
    Model model(cfg, 59);
    randomize_params(model, 61, 0.3);

    Rng rng(67);
    std::vector<DatasetEntry> entries(3);
    for (auto& e : entries) e.cloud = random_cloud(rng, 8);
    Batch batch = make_batch(entries, {0, 1, 2});

    // Targets equal the train-mode outputs at this dropout seed: the KL
    // gradient in Sigma vanishes there, so every parameter gradient is zero.
    const std::uint64_t seed = 7;
    const auto covs = model.covariances(batch, Mode::Train, seed);
    for (int i = 0; i < 3; ++i) batch.targets[i] = covs[i];

    Eigen::VectorXd grad;
    const double loss = model.backward(batch, seed, grad);
    CHECK(loss < 1e-12);
    CHECK(grad.norm() <= 1e-8);
}

TEST_CASE("duplicated batch leaves the mean-loss gradient unchanged") {
    ModelConfig cfg = tiny_config();
    cfg.dropout_p = 0.0;
    Model model(cfg, 71);
    randomize_params(model, 73, 0.4);

    Rng rng(79);
    std::vector<DatasetEntry> entries(2);
    for (auto& e : entries) {
        e.cloud = random_cloud(rng, 9);
        e.target_cov = random_spd(rng, 2, 0.5);
    }
    Eigen::VectorXd grad_once, grad_twice;
    Batch once = make_batch(entries, {0, 1});
    Batch twice = make_batch(entries, {0, 1, 0, 1});
    const double loss_once = model.backward(once, 0, grad_once);
    const double loss_twice = model.backward(twice, 0, grad_twice);
    CHECK(loss_once == doctest::Approx(loss_twice).epsilon(1e-10));
    CHECK((grad_once - grad_twice).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("amsgrad_step") {
    SUBCASE("zero gradient leaves parameters untouched without decay") {
        Eigen::VectorXd params(3);
        params << 1.0, -2.0, 0.5;
        const Eigen::VectorXd before = params;
        AmsGradState state(3);
        amsgrad_step(params, Eigen::VectorXd::Zero(3), state, 1e-2, 0.0,
                     std::vector<char>{1, 1, 1});
        CHECK((params - before).norm() == 0.0);
    }
    SUBCASE("weight decay only shrinks flagged parameters") {
        Eigen::VectorXd params(2);
        params << 1.0, 1.0;
        AmsGradState state(2);
        amsgrad_step(params, Eigen::VectorXd::Zero(2), state, 1e-2, 1e-2,
                     std::vector<char>{1, 0});
        CHECK(params[0] < 1.0);
        CHECK(params[1] == 1.0);
    }
    SUBCASE("first step magnitude is the learning rate") {
        Eigen::VectorXd params(1);
        params << 0.0;
        AmsGradState state(1);
        Eigen::VectorXd g(1);
        g << 1.0;
        amsgrad_step(params, g, state, 1e-3, 0.0, std::vector<char>{0});
        CHECK(params[0] == doctest::Approx(-1e-3).epsilon(1e-6));
    }
    SUBCASE("max second moment never decreases") {
        Rng rng(83);
        Eigen::VectorXd params = Eigen::VectorXd::Zero(5);
        AmsGradState state(5);
        Eigen::VectorXd prev_vmax = state.vmax;
        for (int step = 0; step < 100; ++step) {
            Eigen::VectorXd g(5);
            for (int i = 0; i < 5; ++i) g[i] = rng.normal();
            amsgrad_step(params, g, state, 1e-3, 0.0, std::vector<char>(5, 0));
            CHECK(((state.vmax - prev_vmax).array() >= -1e-18).all());
            prev_vmax = state.vmax;
        }
    }
}

TEST_CASE("train converges on a two-entry dataset") {
    ModelConfig cfg = tiny_config();
    cfg.dropout_p = 0.0;
    TrainConfig tc;
    tc.batch_size = 8;
    tc.learning_rate = 1e-2;
    tc.weight_decay = 0.0;
    tc.validation_fraction = 0.5;
    tc.patience = 200;
    tc.max_episodes = 200;
    tc.seed = 2;

    Rng rng(89);
    std::vector<DatasetEntry> entries(2);
    entries[0].cloud = random_cloud(rng, 15);
    entries[0].target_cov = Eigen::Matrix2d::Identity();
    entries[1].cloud = random_cloud(rng, 15);
    entries[1].target_cov << 9.0, 0.0, 0.0, 1.0;

    const TrainResult result = net::train(cfg, tc, entries);
    REQUIRE(result.history.size() >= 2);
    CHECK(result.history.back().train_loss < result.history.front().train_loss);
    CHECK(result.best_val <= result.history.front().val_loss);
}

TEST_CASE("train rejects patience below one") {
    TrainConfig tc;
    tc.patience = 0;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
}

TEST_CASE("training history is reproducible") {
    ModelConfig cfg = tiny_config();
    TrainConfig tc;
    tc.batch_size = 4;
    tc.max_episodes = 12;
    tc.patience = 12;
    tc.seed = 77;

    Rng rng(97);
    std::vector<DatasetEntry> entries(6);
    for (auto& e : entries) {
        e.cloud = random_cloud(rng, 10);
        e.target_cov = random_spd(rng, 2, 0.4);
    }
    const TrainResult a = net::train(cfg, tc, entries);
    const TrainResult b = net::train(cfg, tc, entries);
    REQUIRE(a.history.size() == b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) {
        CHECK(a.history[i].train_loss == b.history[i].train_loss);
        CHECK(a.history[i].val_loss == b.history[i].val_loss);
    }
    CHECK((a.model.params() - b.model.params()).norm() == 0.0);
}

TEST_CASE("predict is permutation invariant and PD") {
    ModelConfig cfg = tiny_config();
    Model model(cfg, 101);
    randomize_params(model, 103);

    Rng rng(107);
    for (int trial = 0; trial < 50; ++trial) {
        cloud::Submap s;
        s.id = trial;
        s.points.resize(20 + rng.uniform_index(30), 3);
        for (int i = 0; i < s.points.size(); ++i) s.points.data()[i] = rng.uniform(-10, 10);
        const Eigen::Matrix2d q = net::predict(model, s, 0.05);
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> eig(q);
        CHECK(eig.eigenvalues()(0) > 0.0);

        cloud::Submap shuffled = s;
        for (Eigen::Index i = shuffled.points.rows() - 1; i > 0; --i) {
            const Eigen::Index j = static_cast<Eigen::Index>(rng.uniform_index(i + 1));
            shuffled.points.row(i).swap(shuffled.points.row(j));
        }
        const Eigen::Matrix2d q2 = net::predict(model, shuffled, 0.05);
        CHECK((q - q2).cwiseAbs().maxCoeff() <= 1e-12);
    }
}

TEST_CASE("checkpoint round trip preserves predictions") {
    ModelConfig cfg = tiny_config(true);
    Model model(cfg, 113);
    randomize_params(model, 127);
    Rng brng(129);
    for (int i = 0; i < model.buffers().size(); ++i) model.buffers()[i] = brng.uniform(0.5, 1.5);

    const auto dir = std::filesystem::temp_directory_path() / "bathykl_test_ckpt";
    std::filesystem::create_directories(dir);
    const auto path = dir / "model.pnkl";
    save_checkpoint(path, model, 42, 0.125);

    const Model loaded = load_checkpoint(path);
    CHECK((loaded.params() - model.params()).norm() == 0.0);
    CHECK((loaded.buffers() - model.buffers()).norm() == 0.0);
    CHECK(loaded.config().use_input_transform == true);

    Rng rng(131);
    const NormalizedCloud cloud = random_cloud(rng, 25);
    CHECK((model.predict_cov(cloud) - loaded.predict_cov(cloud)).norm() == 0.0);

    {
        std::ofstream bad(dir / "bad.pnkl", std::ios::binary);
        bad << "NOPE!stuff";
    }
    CHECK_THROWS_AS((void)load_checkpoint(dir / "bad.pnkl"), DataError);
}

TEST_SUITE_END();
