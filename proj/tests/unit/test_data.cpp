#include <numeric>
#include <algorithm>
#include <fstream>
#include <map>

#include "clusterbreak/data.hpp"
#include "helpers.hpp"

namespace cb = clusterbreak;
namespace d = clusterbreak::data;
namespace fs = std::filesystem;

namespace {

void write_pgm(const fs::path& path, int h, int w, unsigned char value) {
  std::ofstream os(path, std::ios::binary);
  os << "P5\n" << w << " " << h << "\n255\n";
  for (int i = 0; i < h * w; ++i) os.put(static_cast<char>(value));
}

}  // namespace

TEST(Synthetic, CountsAndRange) {
  d::SyntheticSpec s;
  s.n_per_class = 10;
  s.height = 8;
  s.width = 8;
  const auto ds = d::make_synthetic_image_dataset(s);
  EXPECT_EQ(ds.n(), 40);
  std::map<int, int> counts;
  for (int y : ds.labels()) ++counts[y];
  ASSERT_EQ(counts.size(), 4u);
  for (auto [k, c] : counts) EXPECT_EQ(c, 10);
  EXPECT_NO_THROW(d::check_pixel_range(ds.images().pixels()));
}

TEST(Synthetic, Deterministic) {
  d::SyntheticSpec s;
  s.n_per_class = 5;
  const auto a = d::make_synthetic_image_dataset(s), b = d::make_synthetic_image_dataset(s);
  EXPECT_EQ(a.images().pixels(), b.images().pixels());
  EXPECT_EQ(a.labels(), b.labels());
  s.seed = 1;
  EXPECT_NE(d::make_synthetic_image_dataset(s).images().pixels(), a.images().pixels());
}

TEST(Synthetic, ZeroSeparationRejected) {
  d::SyntheticSpec s;
  s.class_separation = 0.0;
  EXPECT_CODE(d::make_synthetic_image_dataset(s), cb::ErrorCode::invalid_parameter);
}

TEST(Synthetic, ClassMeansAreSeparationTimesNoiseApart) {
  // Empirical class means over many samples; the noise contributes a bias
  // of about 2 * pixels * sigma^2 / n to the squared distance.
  d::SyntheticSpec s;
  s.n_per_class = 2000;
  s.class_separation = 3.0;
  const auto ds = d::make_synthetic_image_dataset(s);
  const cb::Matrix x = ds.images().pixels().as_matrix();
  cb::Matrix means = cb::Matrix::Zero(4, x.cols());
  for (int i = 0; i < ds.n(); ++i) means.row(ds.labels()[i]) += x.row(i) / 2000.0;
  for (int i = 0; i < 4; ++i)
    for (int j = i + 1; j < 4; ++j) EXPECT_NEAR((means.row(i) - means.row(j)).norm(), 0.3, 0.01);
}

TEST(Batches, SizesOrderAndDeterminism) {
  const auto b = d::batch_indices(10, 4, false, 0);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0], (std::vector<int>{0, 1, 2, 3}));
  EXPECT_EQ(b[2].size(), 2u);
  EXPECT_EQ(d::batch_indices(10, 4, true, 3), d::batch_indices(10, 4, true, 3));
  EXPECT_CODE(d::batch_indices(10, 0, false, 0), cb::ErrorCode::invalid_parameter);
}

TEST(Batches, EpochCoversEveryIndexOnce) {
  for (std::uint64_t seed : {0, 1, 2}) {
    std::vector<int> all;
    for (const auto& b : d::batch_indices(37, 8, true, seed)) all.insert(all.end(), b.begin(), b.end());
    std::sort(all.begin(), all.end());
    std::vector<int> want(37);
    std::iota(want.begin(), want.end(), 0);
    EXPECT_EQ(all, want);
  }
}
TEST(Split, PartitionsAllSamples) {
  const auto ds = testkit::small_dataset(10);
  const auto [a, b] = d::split(ds, 0.25, 4);
  EXPECT_EQ(a.n() + b.n(), ds.n());
  EXPECT_EQ(b.n(), 10);
  EXPECT_EQ(a.k_true(), 4);
}

TEST(DatasetFile, RoundTrip) {
  const auto dir = testkit::temp_dir("ds");
  const auto ds = testkit::small_dataset(3);
  d::save_dataset(dir / "x.cbds", ds);
  const auto back = d::load_dataset(dir / "x.cbds");
  EXPECT_EQ(back.labels(), ds.labels());
  EXPECT_EQ(back.k_true(), 4);
  const auto& p = ds.images().pixels();
  const auto& q = back.images().pixels();
  ASSERT_EQ(p.shape(), q.shape());
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], q[i], 1e-7);
  EXPECT_CODE(d::load_dataset(dir / "missing"), cb::ErrorCode::io_error);
  fs::remove_all(dir);
}

TEST(ImageFolder, LoadsClassesAndReportsErrors) {
  const auto dir = testkit::temp_dir("folder");
  for (const char* cls : {"alice", "bob"}) {
    fs::create_directories(dir / cls);
    for (int i = 0; i < 3; ++i) write_pgm(dir / cls / ("img" + std::to_string(i) + ".pgm"), 6, 5, cls[0] == 'a' ? 0 : 255);
  }
  const auto ds = d::load_image_folder(dir, 4, 4);
  EXPECT_EQ(ds.n(), 6);
  EXPECT_EQ(ds.k_true(), 2);
  EXPECT_EQ(ds.class_names(), (std::vector<std::string>{"alice", "bob"}));
  EXPECT_DOUBLE_EQ(ds.images().pixels().at(0, 0, 0, 0), 0.0);
  EXPECT_DOUBLE_EQ(ds.images().pixels().at(5, 0, 3, 3), 1.0);

  fs::create_directories(dir / "carol");
  EXPECT_CODE(d::load_image_folder(dir, 4, 4), cb::ErrorCode::empty_class);
  const auto empty = testkit::temp_dir("empty");
  EXPECT_CODE(d::load_image_folder(empty, 4, 4), cb::ErrorCode::io_error);
  fs::remove_all(dir);
  fs::remove_all(empty);
}

TEST(ImageSet, PixelRangeChecked) {
  cb::Tensor t({1, 1, 2, 2}, std::vector<double>{0, 0.5, 1.0, 1.2});
  EXPECT_CODE(d::check_pixel_range(t), cb::ErrorCode::invalid_parameter);
}

TEST(DeriveSeed, DistinctStreams) {
  EXPECT_NE(d::derive_seed(0, 1), d::derive_seed(0, 2));
  EXPECT_NE(d::derive_seed(0, 1), d::derive_seed(1, 1));
  EXPECT_EQ(d::derive_seed(5, 9), d::derive_seed(5, 9));
}
