#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "pointpc/geometry.hpp"
#include "pointpc/random.hpp"

using namespace pointpc;

namespace {

PointCloud cloud(std::initializer_list<Point3> pts) { return PointCloud{std::vector<Point3>(pts)}; }

}  // namespace

TEST(Cosine, Examples) {
  const std::vector<double> u{1, 2, 3}, v{-1, -2, -3}, w{2, -1, 0};
  EXPECT_NEAR(cosine_similarity(u, u), 1.0, 1e-15);
  EXPECT_NEAR(cosine_similarity(u, v), -1.0, 1e-15);
  EXPECT_NEAR(cosine_similarity(u, w), 0.0, 1e-15);
  EXPECT_THROW(cosine_similarity(u, std::vector<double>{0, 0, 0}), DomainError);
  EXPECT_THROW(cosine_similarity(u, std::vector<double>{1, 2}), ContractError);
}

TEST(Chamfer, HandExamples) {
  const PointCloud o = cloud({{0, 0, 0}});
  EXPECT_EQ(chamfer_l2(o, cloud({{1, 0, 0}})), 2.0);
  EXPECT_EQ(chamfer_l1_metric(o, cloud({{1, 0, 0}})), 1.0);
  EXPECT_EQ(chamfer_l1_literal(o, cloud({{1, 1, 0}})), 4.0);
  EXPECT_EQ(chamfer_l1_literal(o, cloud({{0, 3, 4}})), 14.0);
  EXPECT_EQ(chamfer_l2(o, o), 0.0);
}

TEST(Chamfer, OneSidedTermOfLiteralForm) {
  // The Eq. 14 term from input into output: for {(0,0,0)} -> {(0,3,4)} it is 3 + 4 = 7,
  // and a subset of the output contributes nothing.
  const PointCloud in = cloud({{0, 0, 0}});
  const PointCloud out = cloud({{0, 3, 4}});
  EXPECT_EQ(chamfer_l1_literal(in, out) / 2.0, 7.0);
  const PointCloud big = cloud({{0, 0, 0}, {1, 1, 1}});
  EXPECT_EQ(oracle::mean_min(in, big, oracle::l1_dist), 0.0);
}

TEST(Chamfer, EmptyCloudIsContractError) {
  const PointCloud o = cloud({{0, 0, 0}});
  EXPECT_THROW(chamfer_l2(o, PointCloud{}), ContractError);
  EXPECT_THROW(chamfer_l1_metric(PointCloud{}, o), ContractError);
  EXPECT_THROW(chamfer_l1_literal(o, PointCloud{}), ContractError);
  EXPECT_THROW(f_score(o, PointCloud{}), ContractError);
  EXPECT_THROW(fidelity(PointCloud{}, o), ContractError);
  EXPECT_THROW(mmd(o, std::span<const PointCloud>{}), ContractError);
}

TEST(Chamfer, MatchesBruteForceOracle) {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const PointCloud a = oracle::random_cloud(rng, 1 + rng.index(64));
    const PointCloud b = oracle::random_cloud(rng, 1 + rng.index(64));
    EXPECT_NEAR(chamfer_l2(a, b), oracle::chamfer_l2(a, b), 1e-9);
    EXPECT_NEAR(chamfer_l1_metric(a, b), oracle::chamfer_l1_metric(a, b), 1e-9);
    EXPECT_NEAR(chamfer_l1_literal(a, b), oracle::chamfer_l1_literal(a, b), 1e-9);
  }
}

TEST(Chamfer, GridSearchMatchesBruteForce) {
  Rng rng(22);
  for (int trial = 0; trial < 6; ++trial) {
    // Clustered data stresses empty cells and long shell walks.
    PointCloud a = oracle::random_cloud(rng, 700);
    for (std::size_t i = 0; i < 300; ++i) a.points[i] = {0.3 + 0.01 * rng.uniform(), -0.2, 0.1 * rng.uniform()};
    const PointCloud b = oracle::random_cloud(rng, 600, -0.7, 0.7);
    ASSERT_TRUE(NeighborIndex(a).uses_grid());
    EXPECT_NEAR(chamfer_l2(a, b), oracle::chamfer_l2(a, b), 1e-9);
    EXPECT_NEAR(chamfer_l1_metric(a, b), oracle::chamfer_l1_metric(a, b), 1e-9);
    EXPECT_NEAR(chamfer_l1_literal(a, b), oracle::chamfer_l1_literal(a, b), 1e-9);
    const NeighborIndex index(a);
    for (std::size_t q = 0; q < b.size(); q += 7) {
      EXPECT_EQ(index.nearest(b[q], Norm::squared_l2).index, oracle::nearest(b[q], a, oracle::sq_dist));
      EXPECT_EQ(index.nearest(b[q], Norm::l1).index, oracle::nearest(b[q], a, oracle::l1_dist));
    }
  }
}

TEST(Chamfer, GridBreaksTiesTowardLowestIndex) {
  // A lattice with duplicated points: every query has exact ties.
  PointCloud a;
  for (int rep = 0; rep < 2; ++rep)
    for (int x = 0; x < 8; ++x)
      for (int y = 0; y < 8; ++y)
        for (int z = 0; z < 5; ++z) a.points.push_back({x * 0.125, y * 0.125, z * 0.125});
  ASSERT_TRUE(NeighborIndex(a).uses_grid());
  const NeighborIndex index(a);
  Rng rng(3);
  for (int q = 0; q < 300; ++q) {
    const Point3 p{0.0625 * static_cast<double>(rng.index(16)), 0.0625 * static_cast<double>(rng.index(16)),
                   0.0625 * static_cast<double>(rng.index(10))};
    EXPECT_EQ(index.nearest(p, Norm::squared_l2).index, oracle::nearest(p, a, oracle::sq_dist));
    EXPECT_EQ(index.nearest(p, Norm::l1).index, oracle::nearest(p, a, oracle::l1_dist));
  }
}

TEST(Chamfer, SymmetricAndZeroOnSelf) {
  Rng rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    const PointCloud a = oracle::random_cloud(rng, 1 + rng.index(40));
    const PointCloud b = oracle::random_cloud(rng, 1 + rng.index(40));
    EXPECT_NEAR(chamfer_l2(a, b), chamfer_l2(b, a), 1e-15);
    EXPECT_NEAR(chamfer_l1_metric(a, b), chamfer_l1_metric(b, a), 1e-15);
    EXPECT_NEAR(chamfer_l1_literal(a, b), chamfer_l1_literal(b, a), 1e-15);
    EXPECT_EQ(chamfer_l2(a, a), 0.0);
    EXPECT_GT(chamfer_l2(a, b), 0.0);
  }
}

TEST(Chamfer, LiteralIsBoundedByMetric) {
  // Coordinate l1 norms lie between the Euclidean norm and sqrt(3) times it, so
  // 2 * metric <= literal <= 2 * sqrt(3) * metric.
  Rng rng(24);
  for (int trial = 0; trial < 100; ++trial) {
    const PointCloud a = oracle::random_cloud(rng, 1 + rng.index(40));
    const PointCloud b = oracle::random_cloud(rng, 1 + rng.index(40));
    const double metric = chamfer_l1_metric(a, b);
    const double literal = chamfer_l1_literal(a, b);
    EXPECT_GE(literal, 2.0 * metric - 1e-12);
    EXPECT_LE(literal, 2.0 * std::sqrt(3.0) * metric + 1e-12);
  }
}

TEST(Chamfer, DifferentiableLiteralMatchesValueAndFiniteDifferences) {
  Rng rng(25);
  int checked = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const PointCloud a = oracle::random_cloud(rng, 5 + rng.index(10));
    const PointCloud b = oracle::random_cloud(rng, 5 + rng.index(10));
    nd::Tape t;
    EXPECT_NEAR(chamfer_l1_literal(t.constant(a.to_array()), t.constant(b.to_array())).item(),
                chamfer_l1_literal(a, b), 1e-15);
    const nd::Array bv = b.to_array();
    const auto report = nd::gradient_check(
        [&](nd::Var x) { return chamfer_l1_literal(x, x.tape().constant(bv)); }, a.to_array());
    EXPECT_TRUE(report.passed) << report.max_error;
    checked += report.excluded < a.size() * 3 ? 1 : 0;
  }
  EXPECT_EQ(checked, 20);
}

TEST(Fps, CollinearExample) {
  const PointCloud c = cloud({{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}});
  EXPECT_EQ(fps_indices(c, 2, 0), (std::vector<std::size_t>{0, 3}));
  EXPECT_EQ(fps_indices(c, 1, 2), (std::vector<std::size_t>{2}));
  EXPECT_THROW(fps(c, 5), ContractError);
  EXPECT_THROW(fps(c, 0), ContractError);
}

TEST(Fps, MatchesOracleAndIsSubset) {
  Rng rng(26);
  for (int trial = 0; trial < 30; ++trial) {
    const PointCloud c = oracle::random_cloud(rng, 2 + rng.index(60));
    const std::size_t m = 1 + rng.index(c.size());
    const std::size_t seed = rng.index(c.size());
    const auto idx = fps_indices(c, m, seed);
    EXPECT_EQ(idx, oracle::fps(c, m, seed));
    EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), m);
    EXPECT_EQ(fps_indices(c, m, seed), idx);
  }
}

TEST(Fps, FullSizeIsPermutation) {
  Rng rng(27);
  const PointCloud c = oracle::random_cloud(rng, 30);
  auto idx = fps_indices(c, 30, 4);
  std::sort(idx.begin(), idx.end());
  for (std::size_t i = 0; i < 30; ++i) EXPECT_EQ(idx[i], i);
}

TEST(ViewpointCrop, Examples) {
  const PointCloud c = cloud({{1, 0, 0}, {-1, 0, 0}});
  EXPECT_EQ(viewpoint_crop(c, Viewpoint({1, 0, 0}), 1), cloud({{1, 0, 0}}));
  EXPECT_EQ(viewpoint_crop(c, Viewpoint({1, 0, 0}), 2), c);
  EXPECT_THROW(viewpoint_crop(c, Viewpoint({1, 0, 0}), 0), ContractError);
  EXPECT_THROW(viewpoint_crop(c, Viewpoint({1, 0, 0}), 3), ContractError);
  EXPECT_THROW(Viewpoint({0, 0, 0}), DomainError);
}

TEST(ViewpointCrop, KeepsNearestSubset) {
  Rng rng(28);
  for (int trial = 0; trial < 50; ++trial) {
    const PointCloud c = oracle::random_cloud(rng, 1 + rng.index(80));
    const Viewpoint vp({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1) + 2.0});
    const std::size_t keep = 1 + rng.index(c.size());
    const PointCloud out = viewpoint_crop(c, vp, keep);
    ASSERT_EQ(out.size(), keep);
    double worst_kept = 0.0;
    for (const auto& p : out) {
      EXPECT_NE(std::find(c.begin(), c.end(), p), c.end());
      worst_kept = std::max(worst_kept, oracle::sq_dist(p, vp.anchor()));
    }
    std::size_t closer = 0;
    for (const auto& p : c) closer += oracle::sq_dist(p, vp.anchor()) < worst_kept ? 1 : 0;
    EXPECT_LE(closer, keep);
  }
}

TEST(ViewpointDirection, UnitNorm) {
  const Viewpoint vp({3, 4, 12});
  const auto& d = vp.direction();
  EXPECT_NEAR(std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]), 1.0, 1e-9);
  EXPECT_NEAR(vp.anchor()[2], 2.0 * 12.0 / 13.0, 1e-12);
}

TEST(FScore, Examples) {
  const PointCloud gt = cloud({{0, 0, 0}, {1, 0, 0}});
  EXPECT_EQ(f_score(gt, gt), 1.0);
  EXPECT_EQ(f_score(cloud({{5, 5, 5}}), gt), 0.0);
  // Half of each side is matched: P = R = 0.5.
  const PointCloud pred = cloud({{0, 0, 0.001}, {0, 0.5, 0}});
  EXPECT_DOUBLE_EQ(f_score(pred, gt, 0.01), 0.5);
  EXPECT_THROW(f_score(gt, gt, 0.0), ContractError);
}

TEST(FScore, ThresholdIsStrict) {
  EXPECT_EQ(f_score(cloud({{0, 0, 0}}), cloud({{0.5, 0, 0}}), 0.5), 0.0);
  EXPECT_EQ(f_score(cloud({{0, 0, 0}}), cloud({{0.5, 0, 0}}), 0.50001), 1.0);
}

TEST(FScore, SymmetricAndMatchesOracle) {
  Rng rng(29);
  for (int trial = 0; trial < 100; ++trial) {
    const PointCloud a = oracle::random_cloud(rng, 1 + rng.index(64), -0.05, 0.05);
    const PointCloud b = oracle::random_cloud(rng, 1 + rng.index(64), -0.05, 0.05);
    const double d = rng.uniform(0.005, 0.05);
    EXPECT_EQ(f_score(a, b, d), f_score(b, a, d));
    EXPECT_NEAR(f_score(a, b, d), oracle::f_score(a, b, d), 1e-12);
  }
}

TEST(Fidelity, OneDirectional) {
  const PointCloud in = cloud({{0, 0, 0}});
  const PointCloud out = cloud({{0, 3, 4}, {0, 0, 1}});
  EXPECT_EQ(fidelity(in, out), 1.0);
  EXPECT_EQ(fidelity(out, in), 3.0);
}

TEST(Mmd, Properties) {
  Rng rng(30);
  std::vector<PointCloud> refs;
  for (int i = 0; i < 5; ++i) refs.push_back(oracle::random_cloud(rng, 20));
  EXPECT_EQ(mmd(refs[2], refs), 0.0);
  EXPECT_EQ(mmd(refs[0], std::span(refs).subspan(1, 1)), chamfer_l2(refs[0], refs[1]));
  const PointCloud out = oracle::random_cloud(rng, 20);
  const double m = mmd(out, refs);
  for (const auto& r : refs) EXPECT_LE(m, chamfer_l2(out, r));
  EXPECT_NEAR(m, oracle::mmd_l2(out, refs), 1e-12);
  EXPECT_EQ(mmd(out, refs, ChamferKind::l1_metric), std::min({chamfer_l1_metric(out, refs[0]), chamfer_l1_metric(out, refs[1]),
                                                               chamfer_l1_metric(out, refs[2]), chamfer_l1_metric(out, refs[3]),
                                                               chamfer_l1_metric(out, refs[4])}));
}
