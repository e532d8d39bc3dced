#include "clusterbreak/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include <png.h>

#include "clusterbreak/error.hpp"

namespace clusterbreak::data {

namespace fs = std::filesystem;

SampleShape sample_shape_of(const Tensor& images) {
  require(images.rank() == 4, ErrorCode::invalid_shape,
          "images must be (n, c, h, w), got " + shape_string(images.shape()));
  return {images.dim(1), images.dim(2), images.dim(3)};
}

void check_pixel_range(const Tensor& pixels) {
  for (double v : pixels.values())
    require(std::isfinite(v) && v >= 0.0 && v <= 1.0, ErrorCode::invalid_parameter,
            "pixel value outside [0, 1]");
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  // splitmix64 finaliser over a stream-offset state
  std::uint64_t z = master + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------- ImageSet / Dataset

ImageSet::ImageSet(Tensor images) : images_(std::move(images)) {
  const SampleShape s = sample_shape_of(images_);
  require(s.channels > 0 && s.height > 0 && s.width > 0, ErrorCode::invalid_shape, "empty sample shape");
  check_pixel_range(images_);
}

ImageBatch ImageSet::batch(std::span<const int> ids) const {
  require(!ids.empty(), ErrorCode::invalid_parameter, "a batch needs at least one sample");
  return ImageBatch{gather_samples(images_, ids), std::vector<int>(ids.begin(), ids.end())};
}

ImageBatch ImageSet::all() const {
  std::vector<int> ids(static_cast<std::size_t>(size()));
  std::iota(ids.begin(), ids.end(), 0);
  return ImageBatch{images_, std::move(ids)};
}

ImageSet ImageSet::subset(std::span<const int> ids) const {
  ImageSet out;
  out.images_ = gather_samples(images_, ids);
  return out;
}

Dataset::Dataset(Tensor images, std::vector<int> labels, int k_true, std::vector<std::string> class_names)
    : images_(std::move(images)), labels_(std::move(labels)), k_true_(k_true),
      class_names_(std::move(class_names)) {
  require(static_cast<int>(labels_.size()) == images_.size(), ErrorCode::length_mismatch,
          "label count does not match image count");
  require(k_true_ >= 1, ErrorCode::invalid_parameter, "k_true must be positive");
  for (int y : labels_)
    require(y >= 0 && y < k_true_, ErrorCode::invalid_parameter, "label outside [0, k_true)");
}

Dataset Dataset::subset(std::span<const int> indices) const {
  std::vector<int> labels;
  labels.reserve(indices.size());
  for (int i : indices) labels.push_back(labels_.at(static_cast<std::size_t>(i)));
  return Dataset(gather_samples(images_.pixels(), indices), std::move(labels), k_true_, class_names_);
}

// ---------------------------------------------------------------- synthetic

namespace {

std::vector<double> smooth_pattern(const SyntheticSpec& spec, int cls) {
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(cls), 0x7e3aU};
  std::mt19937_64 rng(seq);
  std::uniform_int_distribution<int> freq(0, 2);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> amp(0.5, 1.0);

  std::vector<double> t(static_cast<std::size_t>(spec.channels) * spec.height * spec.width, 0.0);
  for (int c = 0; c < spec.channels; ++c) {
    for (int term = 0; term < 3; ++term) {
      const int fy = freq(rng), fx = freq(rng);
      const double ph = phase(rng), a = amp(rng);
      for (int y = 0; y < spec.height; ++y)
        for (int x = 0; x < spec.width; ++x)
          t[(static_cast<std::size_t>(c) * spec.height + y) * spec.width + x] +=
              a * std::cos(2.0 * std::numbers::pi * (fy * (y + 0.5) / spec.height + fx * (x + 0.5) / spec.width) + ph);
    }
  }
  return t;
}

// Orthonormal class templates; Gram-Schmidt over the smooth patterns, with a
// random fallback direction if a pattern is (numerically) dependent.
std::vector<Vector> class_templates(const SyntheticSpec& spec) {
  const auto dim = static_cast<Eigen::Index>(spec.channels) * spec.height * spec.width;
  std::vector<Vector> out;
  std::mt19937_64 fallback(derive_seed(spec.seed, 991));
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int k = 0; k < spec.k_true; ++k) {
    const auto pattern = smooth_pattern(spec, k);
    Vector v = Eigen::Map<const Vector>(pattern.data(), dim);
    for (int attempt = 0;; ++attempt) {
      for (const Vector& u : out) v -= u.dot(v) * u;
      if (v.norm() > 1e-6) break;
      require(attempt < 16, ErrorCode::invalid_shape, "cannot build distinct class templates");
      for (Eigen::Index i = 0; i < dim; ++i) v(i) = gauss(fallback);
    }
    out.push_back(v.normalized());
  }
  return out;
}

}  // namespace

Dataset make_synthetic_image_dataset(const SyntheticSpec& spec) {
  require(spec.n_per_class >= 1, ErrorCode::invalid_parameter, "n_per_class must be >= 1");
  require(spec.k_true >= 2, ErrorCode::invalid_parameter, "k_true must be >= 2");
  require(spec.class_separation > 0.0, ErrorCode::invalid_parameter, "class_separation must be > 0");
  require(spec.noise_std >= 0.0, ErrorCode::invalid_parameter, "noise_std must be >= 0");
  require(spec.channels > 0 && spec.height > 0 && spec.width > 0, ErrorCode::invalid_shape,
          "image extents must be positive");
  const std::size_t dim = static_cast<std::size_t>(spec.channels) * spec.height * spec.width;
  require(dim >= static_cast<std::size_t>(spec.k_true), ErrorCode::invalid_shape,
          "c*h*w must be at least k_true for distinct templates");

  const auto templates = class_templates(spec);
  // Orthonormal templates are sqrt(2) apart; scale so means are sep * sigma apart.
  const double amplitude = spec.class_separation * spec.noise_std / std::numbers::sqrt2;
  const double half_width = std::sqrt(3.0) * spec.noise_std;

  const int n = spec.n_per_class * spec.k_true;
  Tensor images({n, spec.channels, spec.height, spec.width});
  std::vector<int> labels(static_cast<std::size_t>(n));
  std::mt19937_64 rng(derive_seed(spec.seed, 1));
  std::uniform_real_distribution<double> noise(-half_width, half_width);
  for (int i = 0; i < n; ++i) {
    const int cls = i % spec.k_true;
    labels[static_cast<std::size_t>(i)] = cls;
    auto px = images.sample(static_cast<std::size_t>(i));
    for (std::size_t p = 0; p < dim; ++p)
      px[p] = std::clamp(0.5 + amplitude * templates[static_cast<std::size_t>(cls)](static_cast<Eigen::Index>(p)) +
                             noise(rng),
                         0.0, 1.0);
  }
  std::vector<std::string> names;
  for (int k = 0; k < spec.k_true; ++k) names.push_back("class_" + std::to_string(k));
  return Dataset(std::move(images), std::move(labels), spec.k_true, std::move(names));
}

// ---------------------------------------------------------------- image folder

namespace {

struct RawImage {
  int channels = 0, height = 0, width = 0;
  std::vector<double> values;  // (h, w, c) interleaved, in [0, 1]
};

RawImage read_png(const fs::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    fail(ErrorCode::io_error, "cannot read PNG " + path.string() + ": " + image.message);
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<unsigned char> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&image);
    fail(ErrorCode::io_error, "cannot decode PNG " + path.string() + ": " + image.message);
  }
  RawImage out{color ? 3 : 1, static_cast<int>(image.height), static_cast<int>(image.width), {}};
  out.values.reserve(buffer.size());
  for (unsigned char b : buffer) out.values.push_back(b / 255.0);
  return out;
}

RawImage read_pnm(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::io_error, "cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    char ch;
    while (is.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(is, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
        continue;
      }
      t += ch;
    }
    if (t.empty()) fail(ErrorCode::io_error, "truncated PNM header in " + path.string());
    return t;
  };
  const std::string magic = token();
  const bool ascii = magic == "P2" || magic == "P3";
  const bool rgb = magic == "P3" || magic == "P6";
  if (magic != "P2" && magic != "P3" && magic != "P5" && magic != "P6")
    fail(ErrorCode::io_error, path.string() + " is not a PGM/PPM file");
  RawImage out;
  out.channels = rgb ? 3 : 1;
  out.width = std::stoi(token());
  out.height = std::stoi(token());
  const int maxval = std::stoi(token());
  if (out.width <= 0 || out.height <= 0 || maxval <= 0 || maxval > 65535)
    fail(ErrorCode::io_error, "bad PNM header in " + path.string());
  const std::size_t count = static_cast<std::size_t>(out.width) * out.height * out.channels;
  out.values.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    int v = 0;
    if (ascii) {
      v = std::stoi(token());
    } else if (maxval < 256) {
      const int b = is.get();
      if (b == EOF) fail(ErrorCode::io_error, "truncated PNM data in " + path.string());
      v = b;
    } else {
      const int hi = is.get(), lo = is.get();
      if (lo == EOF) fail(ErrorCode::io_error, "truncated PNM data in " + path.string());
      v = (hi << 8) | lo;
    }
    out.values[i] = static_cast<double>(v) / maxval;
  }
  return out;
}

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".pgm" || ext == ".ppm" || ext == ".pnm";
}

RawImage read_image(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" ? read_png(p) : read_pnm(p);
}

// Bilinear resample (align-corners=false) plus channel conversion into sample i.
void resample_into(const RawImage& src, Tensor& dst, int i) {
  const int c = dst.dim(1), h = dst.dim(2), w = dst.dim(3);
  auto fetch = [&](int y, int x, int ch) {
    if (src.channels == c) return src.values[(static_cast<std::size_t>(y) * src.width + x) * src.channels + ch];
    if (src.channels == 1) return src.values[static_cast<std::size_t>(y) * src.width + x];
    const std::size_t base = (static_cast<std::size_t>(y) * src.width + x) * src.channels;
    return 0.299 * src.values[base] + 0.587 * src.values[base + 1] + 0.114 * src.values[base + 2];
  };
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      const double sy = std::clamp((y + 0.5) * src.height / h - 0.5, 0.0, src.height - 1.0);
      const int y0 = static_cast<int>(sy), y1 = std::min(y0 + 1, src.height - 1);
      const double fy = sy - y0;
      for (int x = 0; x < w; ++x) {
        const double sx = std::clamp((x + 0.5) * src.width / w - 0.5, 0.0, src.width - 1.0);
        const int x0 = static_cast<int>(sx), x1 = std::min(x0 + 1, src.width - 1);
        const double fx = sx - x0;
        const double v = (1 - fy) * ((1 - fx) * fetch(y0, x0, ch) + fx * fetch(y0, x1, ch)) +
                         fy * ((1 - fx) * fetch(y1, x0, ch) + fx * fetch(y1, x1, ch));
        dst.at(i, ch, y, x) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
}

}  // namespace

Dataset load_image_folder(const fs::path& root, int height, int width, int channels) {
  require(height > 0 && width > 0, ErrorCode::invalid_parameter, "image_size must be positive");
  std::error_code ec;
  if (!fs::is_directory(root, ec)) fail(ErrorCode::io_error, "not a directory: " + root.string());

  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) fail(ErrorCode::io_error, "no class subdirectories in " + root.string());

  std::vector<std::pair<fs::path, int>> files;
  std::vector<std::string> names;
  for (std::size_t k = 0; k < class_dirs.size(); ++k) {
    std::vector<fs::path> imgs;
    for (const auto& entry : fs::directory_iterator(class_dirs[k]))
      if (entry.is_regular_file() && is_image_file(entry.path())) imgs.push_back(entry.path());
    std::sort(imgs.begin(), imgs.end());
    if (imgs.empty()) fail(ErrorCode::empty_class, "class directory has no images: " + class_dirs[k].string());
    for (auto& p : imgs) files.emplace_back(std::move(p), static_cast<int>(k));
    names.push_back(class_dirs[k].filename().string());
  }

  std::vector<RawImage> raw;
  raw.reserve(files.size());
  for (const auto& f : files) raw.push_back(read_image(f.first));
  if (channels <= 0) channels = raw.front().channels;
  require(channels == 1 || channels == 3, ErrorCode::invalid_parameter, "channels must be 1 or 3");

  const int n = static_cast<int>(files.size());
  Tensor images({n, channels, height, width});
  std::vector<int> labels;
  for (int i = 0; i < n; ++i) {
    resample_into(raw[static_cast<std::size_t>(i)], images, i);
    labels.push_back(files[static_cast<std::size_t>(i)].second);
  }
  return Dataset(std::move(images), std::move(labels), static_cast<int>(class_dirs.size()), std::move(names));
}

// ---------------------------------------------------------------- binary format

namespace {
constexpr char kDatasetMagic[4] = {'C', 'B', 'D', 'S'};
constexpr std::uint32_t kDatasetVersion = 1;
}  // namespace

void save_dataset(const fs::path& path, const Dataset& dataset) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorCode::io_error, "cannot open " + path.string() + " for writing");
  const SampleShape s = dataset.sample_shape();
  os.write(kDatasetMagic, 4);
  os.write(reinterpret_cast<const char*>(&kDatasetVersion), sizeof(kDatasetVersion));
  const std::int32_t header[5] = {dataset.n(), s.channels, s.height, s.width, dataset.k_true()};
  os.write(reinterpret_cast<const char*>(header), sizeof(header));
  for (double v : dataset.images().pixels().values()) {
    const float f = static_cast<float>(v);
    os.write(reinterpret_cast<const char*>(&f), sizeof(f));
  }
  for (int y : dataset.labels()) {
    const std::int32_t l = y;
    os.write(reinterpret_cast<const char*>(&l), sizeof(l));
  }
  if (!os) fail(ErrorCode::io_error, "failed writing " + path.string());
}

Dataset load_dataset(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::io_error, "cannot open dataset " + path.string());
  char magic[4];
  std::uint32_t version = 0;
  std::int32_t header[5];
  is.read(magic, 4);
  is.read(reinterpret_cast<char*>(&version), sizeof(version));
  is.read(reinterpret_cast<char*>(header), sizeof(header));
  if (!is || std::memcmp(magic, kDatasetMagic, 4) != 0) fail(ErrorCode::io_error, path.string() + " is not a dataset");
  require(version == kDatasetVersion, ErrorCode::schema_mismatch, "unsupported dataset version");
  const auto [n, c, h, w, k] = std::tie(header[0], header[1], header[2], header[3], header[4]);
  require(n > 0 && c > 0 && h > 0 && w > 0 && k > 0, ErrorCode::io_error, "corrupt dataset header");
  Tensor images({n, c, h, w});
  std::vector<float> buf(images.size());
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  std::vector<std::int32_t> labels(static_cast<std::size_t>(n));
  is.read(reinterpret_cast<char*>(labels.data()), static_cast<std::streamsize>(labels.size() * sizeof(std::int32_t)));
  if (!is) fail(ErrorCode::io_error, "truncated dataset " + path.string());
  std::copy(buf.begin(), buf.end(), images.data());
  return Dataset(std::move(images), std::vector<int>(labels.begin(), labels.end()), k);
}

// ---------------------------------------------------------------- batching

std::vector<std::vector<int>> batch_indices(int n, int batch_size, bool shuffle, std::uint64_t seed) {
  require(batch_size >= 1 && batch_size <= n, ErrorCode::invalid_parameter, "batch_size must be in [1, n]");
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) {
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<int>> out;
  for (int start = 0; start < n; start += batch_size) {
    const int end = std::min(n, start + batch_size);
    out.emplace_back(order.begin() + start, order.begin() + end);
  }
  return out;
}

std::vector<ImageBatch> batches(const ImageSet& images, int batch_size, bool shuffle, std::uint64_t seed) {
  std::vector<ImageBatch> out;
  for (const auto& ids : batch_indices(images.size(), batch_size, shuffle, seed)) out.push_back(images.batch(ids));
  return out;
}

std::pair<Dataset, Dataset> split(const Dataset& dataset, double holdout_fraction, std::uint64_t seed) {
  require(holdout_fraction > 0.0 && holdout_fraction < 1.0, ErrorCode::invalid_parameter,
          "holdout_fraction must be in (0, 1)");
  std::vector<int> order(static_cast<std::size_t>(dataset.n()));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto held = static_cast<std::size_t>(std::lround(holdout_fraction * dataset.n()));
  require(held >= 1 && held < order.size(), ErrorCode::invalid_parameter, "split leaves an empty part");
  std::vector<int> a(order.begin(), order.end() - static_cast<std::ptrdiff_t>(held));
  std::vector<int> b(order.end() - static_cast<std::ptrdiff_t>(held), order.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return {dataset.subset(a), dataset.subset(b)};
}

}  // namespace clusterbreak::data
