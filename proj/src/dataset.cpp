#include "dcp/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>

#include <json.hpp>

#include "dcp/errors.hpp"
#include "dcp/rng.hpp"

namespace dcp {

namespace {

constexpr char kMagic[4] = {'D', 'C', 'P', 'D'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "container IO assumes little-endian");

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T take(const std::string& in, std::size_t& pos, const std::string& path) {
  if (pos + sizeof(T) > in.size()) {
    throw FormatError(path + ": truncated dataset file");
  }
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

void append_images(std::string& body, const Tensor& t) {
  for (double v : t.data()) {
    put(body, static_cast<float>(v));
  }
}

void append_labels(std::string& body, const std::vector<int>& labels) {
  for (int y : labels) {
    put(body, static_cast<std::uint16_t>(y));
  }
}

}  // namespace

void Dataset::validate() const {
  if (classes < 1) {
    throw InputError("dataset has no classes");
  }
  if (train_labels.size() != train_images.dim(0) || test_labels.size() != test_images.dim(0)) {
    throw InputError("dataset label count does not match the image count");
  }
  if (!test_images.empty() && (test_images.dim(1) != train_images.dim(1) ||
                               test_images.dim(2) != train_images.dim(2) ||
                               test_images.dim(3) != train_images.dim(3))) {
    throw InputError("train and test images have different shapes");
  }
  for (const auto* labels : {&train_labels, &test_labels}) {
    for (int y : *labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= classes) {
        throw InputError("label " + std::to_string(y) + " outside [0, " +
                         std::to_string(classes) + ")");
      }
    }
  }
}

void save_dataset(const Dataset& ds, const std::string& path) {
  ds.validate();
  if (ds.classes > 65536) {
    throw InputError("u16 labels hold at most 65536 classes");
  }
  std::string body;
  append_images(body, ds.train_images);
  append_images(body, ds.test_images);
  append_labels(body, ds.train_labels);
  append_labels(body, ds.test_labels);

  nlohmann::json header{{"name", ds.name},
                        {"classes", ds.classes},
                        {"shape", {ds.channels(), ds.height(), ds.width()}},
                        {"n_train", ds.train_labels.size()},
                        {"n_test", ds.test_labels.size()},
                        {"normalization",
                         {{"mean", ds.normalization.mean},
                          {"stddev", ds.normalization.stddev},
                          {"applied", ds.normalization.applied}}},
                        {"checksum", fnv1a(body)}};
  const std::string text = header.dump();
  std::string out(kMagic, 4);
  put(out, kVersion);
  put(out, static_cast<std::uint64_t>(text.size()));
  out += text;
  out += body;
  std::ofstream f(path, std::ios::binary);
  if (!f || !f.write(out.data(), static_cast<std::streamsize>(out.size()))) {
    throw FormatError(path + ": cannot write dataset");
  }
}

Dataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) {
    throw FormatError(path + ": cannot open dataset");
  }
  const std::string in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (in.size() < 4 || std::memcmp(in.data(), kMagic, 4) != 0) {
    throw FormatError(path + ": not a DCPD dataset (bad magic)");
  }
  std::size_t pos = 4;
  const auto version = take<std::uint32_t>(in, pos, path);
  if (version != kVersion) {
    throw FormatError(path + ": unsupported dataset version " + std::to_string(version));
  }
  const auto hlen = take<std::uint64_t>(in, pos, path);
  if (pos + hlen > in.size()) {
    throw FormatError(path + ": truncated dataset header");
  }
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(in.substr(pos, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": corrupt dataset header: " + e.what());
  }
  pos += hlen;

  Dataset ds;
  std::size_t c = 0, hh = 0, ww = 0, n_train = 0, n_test = 0;
  std::uint64_t checksum = 0;
  try {
    ds.name = h.value("name", std::string{});
    ds.classes = h.at("classes").get<std::size_t>();
    const auto shape = h.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 3) {
      throw FormatError(path + ": shape must list channels, height and width");
    }
    c = shape[0];
    hh = shape[1];
    ww = shape[2];
    n_train = h.at("n_train").get<std::size_t>();
    n_test = h.at("n_test").get<std::size_t>();
    checksum = h.at("checksum").get<std::uint64_t>();
    const auto& nrm = h.at("normalization");
    ds.normalization.mean = nrm.at("mean").get<std::vector<double>>();
    ds.normalization.stddev = nrm.at("stddev").get<std::vector<double>>();
    ds.normalization.applied = nrm.at("applied").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": dataset header field missing or mistyped: " + e.what());
  }
  if (n_train == 0) {
    throw FormatError(path + ": dataset has no training samples");
  }
  if (c == 0 || hh == 0 || ww == 0 || ds.classes == 0) {
    throw FormatError(path + ": degenerate dataset shape");
  }
  const std::size_t per = c * hh * ww;
  const std::size_t expect = (n_train + n_test) * (per * 4 + 2);
  if (in.size() - pos != expect) {
    throw FormatError(path + ": body has " + std::to_string(in.size() - pos) +
                      " bytes, header implies " + std::to_string(expect));
  }
  if (fnv1a(in.substr(pos)) != checksum) {
    throw FormatError(path + ": checksum mismatch");
  }
  auto read_images = [&](std::size_t n) {
    Tensor t({n, c, hh, ww}, 0.0, DType::Float32);
    for (double& v : t.data()) {
      v = take<float>(in, pos, path);
    }
    return t;
  };
  ds.train_images = read_images(n_train);
  ds.test_images = read_images(n_test);
  auto read_labels = [&](std::size_t n) {
    std::vector<int> y(n);
    for (int& v : y) {
      v = take<std::uint16_t>(in, pos, path);
      if (static_cast<std::size_t>(v) >= ds.classes) {
        throw FormatError(path + ": label " + std::to_string(v) + " outside [0, " +
                          std::to_string(ds.classes) + ")");
      }
    }
    return y;
  };
  ds.train_labels = read_labels(n_train);
  ds.test_labels = read_labels(n_test);
  if (!ds.train_images.all_finite() || !ds.test_images.all_finite()) {
    throw FormatError(path + ": non-finite pixel values");
  }
  return ds;
}

namespace {

struct Blob {
  double y, x, sigma;
  std::vector<double> color;
};

struct ClassSignature {
  std::vector<Blob> blobs;
  double freq, angle;
  std::vector<double> tint;
};

void add_blob(double* img, std::size_t c, std::size_t h, std::size_t w, const Blob& b,
              double amp, double dy, double dx) {
  const double inv = 1.0 / (2.0 * b.sigma * b.sigma);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double ry = static_cast<double>(y) - b.y - dy;
      const double rx = static_cast<double>(x) - b.x - dx;
      const double g = amp * std::exp(-(ry * ry + rx * rx) * inv);
      for (std::size_t ch = 0; ch < c; ++ch) {
        img[(ch * h + y) * w + x] += g * b.color[ch];
      }
    }
  }
}

std::vector<double> random_color(Rng& rng, std::size_t c) {
  std::vector<double> col(c);
  for (double& v : col) {
    v = rng.uniform(-1.0, 1.0);
  }
  return col;
}

}  // namespace

Dataset synth_classification(const SynthOptions& o) {
  if (o.classes < 2) {
    throw ConfigError("synthetic data needs at least two classes");
  }
  if (o.n_train == 0 || o.channels == 0 || o.height == 0 || o.width == 0) {
    throw ConfigError("synthetic data needs a positive sample count and image shape");
  }
  if (o.separability < 0.0 || o.texture < 0.0 || o.noise < 0.0) {
    throw ConfigError("synthetic data amplitudes must be non-negative");
  }
  const std::size_t c = o.channels, h = o.height, w = o.width;
  const double hd = static_cast<double>(h), wd = static_cast<double>(w);

  Rng sig_rng(derive_seed(o.seed, 1));
  std::vector<ClassSignature> sigs(o.classes);
  for (ClassSignature& s : sigs) {
    for (int b = 0; b < 2; ++b) {
      s.blobs.push_back({sig_rng.uniform(0.2, 0.8) * hd, sig_rng.uniform(0.2, 0.8) * wd,
                         sig_rng.uniform(0.08, 0.16) * hd, random_color(sig_rng, c)});
    }
    s.freq = sig_rng.uniform(0.25, 0.9);
    s.angle = sig_rng.uniform(0.0, std::numbers::pi);
    s.tint = random_color(sig_rng, c);
  }

  auto make = [&](std::size_t n, std::uint64_t stream, Tensor& images, std::vector<int>& labels) {
    images = Tensor({n, c, h, w}, 0.0, DType::Float32);
    labels.resize(n);
    Rng rng(derive_seed(o.seed, stream));
    for (std::size_t i = 0; i < n; ++i) {
      const int y = static_cast<int>(rng.below(o.classes));
      labels[i] = y;
      const ClassSignature& s = sigs[y];
      double* img = images.raw() + i * c * h * w;
      const double dy = rng.uniform(-2.0, 2.0), dx = rng.uniform(-2.0, 2.0);
      for (const Blob& b : s.blobs) {
        add_blob(img, c, h, w, b, o.separability, dy, dx);
      }
      // Grating with random phase: invisible to a pixel-wise linear model
      // on average, but easy for conv + ReLU + pooling.
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double ky = s.freq * std::sin(s.angle), kx = s.freq * std::cos(s.angle);
      for (std::size_t yy = 0; yy < h; ++yy) {
        for (std::size_t xx = 0; xx < w; ++xx) {
          const double v = o.texture * std::sin(ky * static_cast<double>(yy) +
                                                kx * static_cast<double>(xx) + phase);
          for (std::size_t ch = 0; ch < c; ++ch) {
            img[(ch * h + yy) * w + xx] += v * s.tint[ch];
          }
        }
      }
      for (int d = 0; d < 2; ++d) {
        const Blob distractor{rng.uniform(0.0, hd), rng.uniform(0.0, wd),
                              rng.uniform(0.06, 0.15) * hd, random_color(rng, c)};
        add_blob(img, c, h, w, distractor, 1.0, 0.0, 0.0);
      }
      for (std::size_t q = 0; q < c * h * w; ++q) {
        img[q] = static_cast<double>(static_cast<float>(img[q] + o.noise * rng.normal()));
      }
    }
  };

  Dataset ds;
  ds.name = "synth";
  ds.classes = o.classes;
  make(o.n_train, 2, ds.train_images, ds.train_labels);
  make(o.n_test, 3, ds.test_images, ds.test_labels);
  return ds;
}

Normalization compute_normalization(const Dataset& ds) {
  const std::size_t n = ds.train_images.dim(0), c = ds.channels(),
                    plane = ds.train_images.plane_size();
  Normalization out;
  out.mean.assign(c, 0.0);
  out.stddev.assign(c, 0.0);
  const double count = static_cast<double>(n * plane);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = ds.train_images.raw() + (i * c + ch) * plane;
      s = std::accumulate(p, p + plane, s);
    }
    const double mu = s / count;
    double v = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = ds.train_images.raw() + (i * c + ch) * plane;
      for (std::size_t q = 0; q < plane; ++q) {
        v += (p[q] - mu) * (p[q] - mu);
      }
    }
    out.mean[ch] = mu;
    out.stddev[ch] = std::sqrt(v / count);
    if (out.stddev[ch] == 0.0) {
      out.stddev[ch] = 1.0;
    }
  }
  return out;
}

void normalize(Dataset& ds) {
  if (ds.normalization.applied) {
    throw ContractError("dataset '" + ds.name + "' is already normalized");
  }
  ds.normalization = compute_normalization(ds);
  const std::size_t c = ds.channels();
  for (Tensor* t : {&ds.train_images, &ds.test_images}) {
    const std::size_t plane = t->plane_size();
    for (std::size_t i = 0; i < t->dim(0); ++i) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        double* p = t->raw() + (i * c + ch) * plane;
        for (std::size_t q = 0; q < plane; ++q) {
          p[q] = (p[q] - ds.normalization.mean[ch]) / ds.normalization.stddev[ch];
        }
      }
    }
  }
  ds.normalization.applied = true;
}

std::vector<std::size_t> sample_subset(std::size_t n, std::size_t n_s, std::uint64_t seed) {
  if (n_s > n) {
    throw ConfigError("subset size " + std::to_string(n_s) + " exceeds the " +
                      std::to_string(n) + " available samples");
  }
  // Partial Fisher-Yates: the first n_s slots end up a uniform sample.
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = 0; i < n_s; ++i) {
    std::swap(idx[i], idx[i + rng.below(n - i)]);
  }
  idx.resize(n_s);
  return idx;
}

void flip_horizontal(Tensor& images, const std::vector<std::uint8_t>& flip) {
  const std::size_t c = images.dim(1), h = images.dim(2), w = images.dim(3);
  for (std::size_t i = 0; i < images.dim(0); ++i) {
    if (!flip[i]) {
      continue;
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < h; ++y) {
        double* row = images.raw() + ((i * c + ch) * h + y) * w;
        std::reverse(row, row + w);
      }
    }
  }
}

}  // namespace dcp
