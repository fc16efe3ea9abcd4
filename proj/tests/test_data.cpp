#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <set>
#include <filesystem>
#include <fstream>

#include "pointpc/data.hpp"

using namespace pointpc;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("pointpc_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<char> slurp(const fs::path& p) { return io::read_file(p); }

}  // namespace

TEST(SampleSurface, UnitSphereRadius) {
  Rng rng(1);
  data::ShapeSpec s;
  s.family = data::Family::sphere;
  s.params = {1.0, 0.0, 0.0};
  for (const auto& p : data::sample_surface(s, 2000, rng)) {
    EXPECT_NEAR(std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]), 1.0, 1e-9);
  }
}

TEST(SampleSurface, BoxFaceFrequenciesFollowAreas) {
  Rng rng(2);
  data::ShapeSpec s;
  s.family = data::Family::box;
  s.params = {0.4, 0.7, 1.0};
  const std::size_t n = 100000;
  const auto c = data::sample_surface(s, n, rng);
  std::array<double, 3> counts{};  // points on the +-x, +-y, +-z face pairs
  for (const auto& p : c) {
    for (int d = 0; d < 3; ++d) {
      if (std::abs(std::abs(p[d]) - 0.5 * s.params[d]) < 1e-12) {
        counts[d] += 1;
        break;
      }
    }
  }
  const double a = 0.4, b = 0.7, h = 1.0;
  const double total = 2 * (b * h + a * h + a * b);
  const std::array<double, 3> probs{2 * b * h / total, 2 * a * h / total, 2 * a * b / total};
  for (int d = 0; d < 3; ++d) {
    const double expected = probs[d] * n;
    const double sigma = std::sqrt(n * probs[d] * (1 - probs[d]));
    EXPECT_NEAR(counts[d], expected, 3 * sigma) << "axis " << d;
  }
}

TEST(SampleSurface, DegenerateParametersAreContractErrors) {
  Rng rng(3);
  data::ShapeSpec s;
  s.family = data::Family::box;
  s.params = {1.0, 0.0, 1.0};
  EXPECT_THROW(data::sample_surface(s, 10, rng), ContractError);
  s.params = {1.0, 1.0, 1.0};
  EXPECT_THROW(data::sample_surface(s, 0, rng), ContractError);
  s.family = data::Family::torus;
  s.params = {-0.5, 0.1, 0.0};
  EXPECT_THROW(data::sample_surface(s, 10, rng), ContractError);
}

TEST(GenerateShape, DeterministicAndInUnitCube) {
  for (const auto family : {data::Family::sphere, data::Family::box, data::Family::cylinder, data::Family::cone,
                            data::Family::torus, data::Family::capsule}) {
    Rng spec_rng(4);
    const auto spec = data::random_spec(family, spec_rng);
    Rng r1(9), r2(9);
    const auto a = data::generate_shape(spec, 512, r1);
    const auto b = data::generate_shape(spec, 512, r2);
    EXPECT_EQ(a, b);
    ASSERT_EQ(a.size(), 512u);
    double extent = 0.0;
    for (const auto& p : a)
      for (double v : p) {
        EXPECT_LE(std::abs(v), 0.5 + 1e-6);
        extent = std::max(extent, std::abs(v));
      }
    EXPECT_NEAR(extent, 0.5, 1e-3) << data::to_string(family);
  }
}

TEST(Viewpoints, CubeCornersInDocumentedOrder) {
  const double s = 1.0 / std::sqrt(3.0);
  EXPECT_NEAR(data::fixed_viewpoint(0).direction()[0], s, 1e-15);
  EXPECT_NEAR(data::fixed_viewpoint(0).direction()[2], s, 1e-15);
  EXPECT_NEAR(data::fixed_viewpoint(1).direction()[2], -s, 1e-15);
  EXPECT_NEAR(data::fixed_viewpoint(4).direction()[0], -s, 1e-15);
  EXPECT_NEAR(data::fixed_viewpoint(7).direction()[1], -s, 1e-15);
  EXPECT_THROW(data::fixed_viewpoint(8), ContractError);
}

TEST(MakePartial, SizeSubsetAndDeterminism) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const auto spec = data::random_spec(data::Family::cone, rng);
    const auto complete = data::generate_shape(spec, 512, rng);
    for (std::size_t v = 0; v < 8; ++v) {
      for (double f : {0.25, 0.5, 0.75}) {
        const auto p = data::make_partial(complete, v, f, 128);
        ASSERT_EQ(p.size(), 128u);
        for (const auto& pt : p) EXPECT_NE(std::find(complete.begin(), complete.end(), pt), complete.end());
        EXPECT_EQ(p, data::make_partial(complete, v, f, 128));
      }
    }
  }
}

TEST(MakePartial, FullFractionIsFpsOfWholeCloud) {
  Rng rng(6);
  const auto complete = data::generate_shape(data::random_spec(data::Family::box, rng), 256, rng);
  EXPECT_EQ(data::make_partial(complete, 3, 1.0, 64), fps(complete, 64, 0));
}

TEST(MakePartial, InvalidArgumentsAreContractErrors) {
  Rng rng(7);
  const auto complete = data::generate_shape(data::random_spec(data::Family::box, rng), 512, rng);
  EXPECT_THROW(data::make_partial(complete, 8, 0.5, 128), ContractError);
  EXPECT_THROW(data::make_partial(complete, 0, 0.0, 128), ContractError);
  EXPECT_THROW(data::make_partial(complete, 0, 1.5, 128), ContractError);
  EXPECT_THROW(data::make_partial(complete, 0, 0.1, 128), ContractError);
}

TEST(CloudFile, RoundTripAtFloatPrecision) {
  const fs::path dir = scratch_dir("roundtrip");
  Rng rng(8);
  PointCloud c;
  for (int i = 0; i < 100; ++i) c.points.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
  data::write_cloud(dir / "c.npc", c);
  const auto back = data::read_cloud(dir / "c.npc");
  ASSERT_EQ(back.size(), c.size());
  for (std::size_t i = 0; i < c.size(); ++i)
    for (int d = 0; d < 3; ++d) EXPECT_EQ(back[i][d], static_cast<double>(static_cast<float>(c[i][d])));
  // Float-exact clouds round-trip bit for bit.
  data::write_cloud(dir / "d.npc", back);
  EXPECT_EQ(data::read_cloud(dir / "d.npc"), back);
}

TEST(CloudFile, ByteLayout) {
  const auto bytes = data::encode_cloud(PointCloud{{{1.0, -2.0, 0.5}}});
  ASSERT_EQ(bytes.size(), 4u + 4u + 12u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "NPC1");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  float x = 0;
  std::memcpy(&x, bytes.data() + 8, 4);
  EXPECT_EQ(x, 1.0f);
}

TEST(CloudFile, Rejections) {
  auto good = data::encode_cloud(PointCloud{{{1.0, 2.0, 3.0}}});
  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(data::decode_cloud(bad_magic, "t"), FormatError);
  auto truncated = good;
  truncated.pop_back();
  EXPECT_THROW(data::decode_cloud(truncated, "t"), FormatError);
  const std::vector<char> zero{'N', 'P', 'C', '1', 0, 0, 0, 0};
  EXPECT_THROW(data::decode_cloud(zero, "t"), FormatError);
  auto trailing = good;
  trailing.push_back(0);
  EXPECT_THROW(data::decode_cloud(trailing, "t"), FormatError);
  EXPECT_THROW(data::read_cloud("/nonexistent/pointpc/x.npc"), IoError);
}

TEST(Xyz, OneLinePerPoint) {
  const fs::path dir = scratch_dir("xyz");
  data::write_xyz(dir / "c.xyz", PointCloud{{{1, 2, 3}, {4, 5, 6}}});
  std::ifstream in(dir / "c.xyz");
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, 2);
}

TEST(Dataset, BuildCountsSplitAndDeterminism) {
  const fs::path a = scratch_dir("build_a"), b = scratch_dir("build_b");
  data::DatasetConfig cfg;
  cfg.samples_per_category = 80;
  const auto manifest = data::build_dataset(cfg, a);
  data::build_dataset(cfg, b);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(a / "clouds")) {
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(b / "clouds" / e.path().filename()));
  }
  EXPECT_EQ(files, 240u);
  EXPECT_EQ(slurp(a / "manifest.json"), slurp(b / "manifest.json"));
  EXPECT_EQ(manifest["train"].size(), 192u);
  EXPECT_EQ(manifest["test"].size(), 48u);

  const auto ds = data::load_dataset(a);
  EXPECT_EQ(ds.samples.size(), 240u);
  EXPECT_EQ(ds.train.size(), 192u);
  std::set<std::size_t> train(ds.train.begin(), ds.train.end());
  for (std::size_t i : ds.test) EXPECT_EQ(train.count(i), 0u);
  const auto mem = data::generate_dataset(cfg);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) EXPECT_EQ(ds.samples[i].complete, mem.samples[i].complete);
}

TEST(Dataset, DifferentSeedsDiffer) {
  data::DatasetConfig a, b;
  a.samples_per_category = b.samples_per_category = 3;
  b.seed = a.seed + 1;
  EXPECT_NE(data::generate_dataset(a).samples[0].complete, data::generate_dataset(b).samples[0].complete);
}

TEST(Dataset, LoadRejectsMissingFilesAndOverlappingSplits) {
  const fs::path dir = scratch_dir("broken");
  data::DatasetConfig cfg;
  cfg.samples_per_category = 5;
  auto manifest = data::build_dataset(cfg, dir);
  fs::remove(dir / "clouds" / "box_0000.npc");
  EXPECT_THROW(data::load_dataset(dir), IoError);
  data::build_dataset(cfg, dir);
  manifest["test"].push_back(manifest["train"][0]);
  io::write_text(dir / "manifest.json", manifest.dump());
  EXPECT_THROW(data::load_dataset(dir), FormatError);
  EXPECT_THROW(data::load_dataset(dir / "nope"), IoError);
}
