#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "gattn/digits.hpp"
#include "gattn/tensor.hpp"

namespace gattn {

// ---------------------------------------------------------------------------
// IDX files (the MNIST distribution format; big-endian)
// ---------------------------------------------------------------------------

struct IdxArray {
  Shape shape;
  std::vector<std::uint8_t> bytes;
};

namespace detail {

inline std::uint32_t read_be32(const std::uint8_t* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

inline void write_be32(std::ofstream& out, std::uint32_t v) {
  const std::uint8_t b[4] = {static_cast<std::uint8_t>(v >> 24), static_cast<std::uint8_t>(v >> 16),
                             static_cast<std::uint8_t>(v >> 8), static_cast<std::uint8_t>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace detail

/// Parses an unsigned-byte IDX file. Header: two zero bytes, a dtype byte
/// (0x08 = u8), a rank byte, then rank big-endian u32 extents, then the
/// row-major payload.
inline IdxArray load_idx_u8(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open IDX file: " + path);
  std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  if (raw.size() < 4)
    throw FormatError("IDX " + path + ": file too short for magic (offset 0, have " +
                      std::to_string(raw.size()) + " bytes)");
  if (raw[0] != 0 || raw[1] != 0)
    throw FormatError("IDX " + path + ": bad magic at offset 0");
  if (raw[2] != 0x08)
    throw FormatError("IDX " + path + ": unsupported dtype 0x" + std::to_string(raw[2]) +
                      " at offset 2 (only unsigned byte 0x08)");
  const int rank = raw[3];
  if (rank < 1 || rank > 4)
    throw FormatError("IDX " + path + ": implausible rank " + std::to_string(rank) +
                      " at offset 3");
  const std::size_t header = 4 + 4 * static_cast<std::size_t>(rank);
  if (raw.size() < header)
    throw FormatError("IDX " + path + ": truncated extent list at offset 4");
  IdxArray arr;
  std::int64_t numel = 1;
  for (int i = 0; i < rank; ++i) {
    const std::int64_t d = detail::read_be32(raw.data() + 4 + 4 * i);
    arr.shape.push_back(d);
    numel *= d;
  }
  if (raw.size() != header + static_cast<std::size_t>(numel))
    throw FormatError("IDX " + path + ": payload of " + std::to_string(raw.size() - header) +
                      " bytes at offset " + std::to_string(header) + ", expected " +
                      std::to_string(numel));
  arr.bytes.assign(raw.begin() + static_cast<std::ptrdiff_t>(header), raw.end());
  return arr;
}

/// IDX u8 payload scaled to [0,1].
template <typename T>
Tensor<T> load_idx(const std::string& path) {
  IdxArray arr = load_idx_u8(path);
  Tensor<T> t = Tensor<T>::zeros(arr.shape);
  for (std::size_t i = 0; i < arr.bytes.size(); ++i)
    t.data()[i] = static_cast<T>(arr.bytes[i]) / T(255);
  return t;
}

inline void save_idx_u8(const std::string& path, const Shape& shape,
                        const std::vector<std::uint8_t>& bytes) {
  if (numel_of(shape) != static_cast<std::int64_t>(bytes.size()))
    throw ShapeError("save_idx_u8: " + std::to_string(bytes.size()) + " bytes for shape " +
                     shape_str(shape));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write IDX file: " + path);
  const std::uint8_t magic[4] = {0, 0, 0x08, static_cast<std::uint8_t>(shape.size())};
  out.write(reinterpret_cast<const char*>(magic), 4);
  for (auto d : shape) detail::write_be32(out, static_cast<std::uint32_t>(d));
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write on IDX file: " + path);
}

// ---------------------------------------------------------------------------
// Cluttered Translated MNIST generation
// ---------------------------------------------------------------------------

enum class Split : int { Train = 0, Val = 1, Test = 2 };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    default: return "test";
  }
}

struct DatasetSpec {
  std::int64_t train_n = 200000, val_n = 100000, test_n = 100000;
  int distractors = 8;     // D
  std::string mnist_dir;   // directory with the four MNIST IDX files; empty = synthetic corpus
  std::int64_t synthetic_train = 4000, synthetic_test = 1000;
  std::uint64_t master_seed = 1;
};

struct ClutteredSample {
  std::array<std::uint8_t, 40 * 40> image;  // [0,255], scale by 1/255 for training
  int label = 0;
  std::uint64_t seed = 0;
  int distractors = 0;
};

/// Deterministic per-index generator of 40x40 cluttered digit images: one
/// translated 28x28 digit plus D 8x8 patches cropped from other digits,
/// max-composited. Each sample's RNG is seeded from (master seed, split,
/// index), and the digit draws happen before any distractor draw, so
/// changing D never moves the digit.
class ClutteredGenerator {
 public:
  ClutteredGenerator(DigitPool train_pool, DigitPool test_pool, DatasetSpec spec)
      : train_pool_(std::move(train_pool)), test_pool_(std::move(test_pool)),
        spec_(std::move(spec)) {
    if (train_pool_.count < 2)
      throw ValueError("cluttered generator: train digit pool needs at least 2 digits");
    if (test_pool_.count < 1)
      throw ValueError("cluttered generator: test digit pool is empty");
    if (spec_.train_n < 1 || spec_.val_n < 1 || spec_.test_n < 1)
      throw ValueError("cluttered generator: split sizes must be positive");
    if (spec_.distractors < 0)
      throw ValueError("cluttered generator: distractor count must be >= 0");
  }

  /// Builds pools from spec.mnist_dir (standard IDX file names) or, when the
  /// directory is empty, from the procedural digit corpus.
  static ClutteredGenerator from_spec(const DatasetSpec& spec) {
    if (spec.mnist_dir.empty()) {
      DigitPool train = make_digit_corpus(spec.synthetic_train,
                                          hash_combine(spec.master_seed, 0xD161751ull));
      DigitPool test = make_digit_corpus(spec.synthetic_test,
                                         hash_combine(spec.master_seed, 0xD16175Eull));
      return ClutteredGenerator(std::move(train), std::move(test), spec);
    }
    auto pool_from = [](const std::string& images_path, const std::string& labels_path) {
      IdxArray images = load_idx_u8(images_path);
      IdxArray labels = load_idx_u8(labels_path);
      if (images.shape.size() != 3 || images.shape[1] != 28 || images.shape[2] != 28)
        throw FormatError("digit images " + images_path + ": expected [n,28,28], got " +
                          shape_str(images.shape));
      if (labels.shape.size() != 1 || labels.shape[0] != images.shape[0])
        throw FormatError("digit labels " + labels_path + ": count does not match images");
      DigitPool p;
      p.count = images.shape[0];
      p.images = std::move(images.bytes);
      p.labels = std::move(labels.bytes);
      return p;
    };
    const std::string d = spec.mnist_dir + "/";
    return ClutteredGenerator(
        pool_from(d + "train-images-idx3-ubyte", d + "train-labels-idx1-ubyte"),
        pool_from(d + "t10k-images-idx3-ubyte", d + "t10k-labels-idx1-ubyte"), spec);
  }

  std::int64_t split_size(Split s) const {
    switch (s) {
      case Split::Train: return spec_.train_n;
      case Split::Val: return spec_.val_n;
      default: return spec_.test_n;
    }
  }

  const DatasetSpec& spec() const { return spec_; }
  const DigitPool& train_pool() const { return train_pool_; }

  ClutteredSample generate(Split split, std::int64_t index) const {
    return generate(split, index, spec_.distractors);
  }

  ClutteredSample generate(Split split, std::int64_t index, int distractors) const {
    if (index < 0 || index >= split_size(split))
      throw ValueError("cluttered generator: index " + std::to_string(index) +
                       " out of range for " + std::string(split_name(split)) + " split of " +
                       std::to_string(split_size(split)));
    ClutteredSample sample;
    sample.distractors = distractors;
    sample.seed = hash_combine(hash_combine(spec_.master_seed, static_cast<std::uint64_t>(split)),
                               static_cast<std::uint64_t>(index));
    Rng rng(sample.seed);

    // Digit pool: train/val samples draw from the train digits, test samples
    // from the held-out test digits. Distractors always come from the train
    // digits, excluding the sample's own source digit when pools coincide.
    const bool test_split = split == Split::Test;
    const DigitPool& digit_pool = test_split ? test_pool_ : train_pool_;

    const std::int64_t digit_idx = rng.below(static_cast<std::uint32_t>(digit_pool.count));
    const int x0 = static_cast<int>(rng.below(13));  // 40 - 28 + 1
    const int y0 = static_cast<int>(rng.below(13));
    sample.label = digit_pool.labels[static_cast<std::size_t>(digit_idx)];

    sample.image.fill(0);
    const std::uint8_t* digit = digit_pool.images.data() + digit_idx * 28 * 28;
    for (int y = 0; y < 28; ++y)
      for (int x = 0; x < 28; ++x) {
        auto& dst = sample.image[static_cast<std::size_t>((y0 + y) * 40 + x0 + x)];
        dst = std::max(dst, digit[y * 28 + x]);
      }

    for (int k = 0; k < distractors; ++k) {
      std::int64_t src;
      if (test_split) {
        src = rng.below(static_cast<std::uint32_t>(train_pool_.count));
      } else {
        src = rng.below(static_cast<std::uint32_t>(train_pool_.count - 1));
        if (src >= digit_idx) ++src;
      }
      const int px = static_cast<int>(rng.below(21));  // 28 - 8 + 1
      const int py = static_cast<int>(rng.below(21));
      const int dx = static_cast<int>(rng.below(33));  // 40 - 8 + 1
      const int dy = static_cast<int>(rng.below(33));
      const std::uint8_t* patch = train_pool_.images.data() + src * 28 * 28;
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
          auto& dst = sample.image[static_cast<std::size_t>((dy + y) * 40 + dx + x)];
          dst = std::max(dst, patch[(py + y) * 28 + px + x]);
        }
    }
    return sample;
  }

 private:
  DigitPool train_pool_, test_pool_;
  DatasetSpec spec_;
};

// ---------------------------------------------------------------------------
// In-memory datasets and the on-disk cache
// ---------------------------------------------------------------------------

struct U8Dataset {
  std::int64_t n = 0, c = 1, h = 0, w = 0;
  std::vector<std::uint8_t> images;  // n*c*h*w
  std::vector<int> labels;           // n
};

template <typename T>
struct Dataset {
  Tensor<T> images;  // [N,C,H,W]
  std::vector<int> labels;
  std::int64_t size() const { return images.defined() ? images.dim(0) : 0; }
};

inline U8Dataset materialize(const ClutteredGenerator& gen, Split split,
                             std::optional<int> distractors = std::nullopt) {
  U8Dataset ds;
  ds.n = gen.split_size(split);
  ds.c = 1;
  ds.h = ds.w = 40;
  ds.images.resize(static_cast<std::size_t>(ds.n) * 1600);
  ds.labels.resize(static_cast<std::size_t>(ds.n));
  const int d = distractors.value_or(gen.spec().distractors);
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < ds.n; ++i) {
    auto s = gen.generate(split, i, d);
    std::copy(s.image.begin(), s.image.end(), ds.images.begin() + i * 1600);
    ds.labels[static_cast<std::size_t>(i)] = s.label;
  }
  return ds;
}

template <typename T>
Dataset<T> to_float(const U8Dataset& u8) {
  Dataset<T> ds;
  ds.images = Tensor<T>::zeros({u8.n, u8.c, u8.h, u8.w});
  for (std::size_t i = 0; i < u8.images.size(); ++i)
    ds.images.data()[i] = static_cast<T>(u8.images[i]) / T(255);
  ds.labels = u8.labels;
  return ds;
}

// Cache container (all integers little-endian):
//   bytes 0..7  magic "GATNDSET", u32 version (1),
//   u64 master seed, u32 split id, u32 distractor count,
//   u64 sample count, u32 channels, u32 height, u32 width,
//   u8 images [count*c*h*w], u8 labels [count]
inline constexpr char kDatasetMagic[8] = {'G', 'A', 'T', 'N', 'D', 'S', 'E', 'T'};
inline constexpr std::uint32_t kDatasetVersion = 1;

struct DatasetCacheHeader {
  std::uint64_t master_seed = 0;
  std::uint32_t split_id = 0;
  std::uint32_t distractors = 0;
};

inline void write_dataset_cache(const std::string& path, const U8Dataset& ds,
                                const DatasetCacheHeader& hdr) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write dataset cache: " + path);
  auto w32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
  auto w64 = [&](std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); };
  out.write(kDatasetMagic, 8);
  w32(kDatasetVersion);
  w64(hdr.master_seed);
  w32(hdr.split_id);
  w32(hdr.distractors);
  w64(static_cast<std::uint64_t>(ds.n));
  w32(static_cast<std::uint32_t>(ds.c));
  w32(static_cast<std::uint32_t>(ds.h));
  w32(static_cast<std::uint32_t>(ds.w));
  out.write(reinterpret_cast<const char*>(ds.images.data()),
            static_cast<std::streamsize>(ds.images.size()));
  std::vector<std::uint8_t> lab(ds.labels.begin(), ds.labels.end());
  out.write(reinterpret_cast<const char*>(lab.data()), static_cast<std::streamsize>(lab.size()));
  if (!out) throw IoError("short write on dataset cache: " + path);
}

inline std::pair<U8Dataset, DatasetCacheHeader> read_dataset_cache(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset cache: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kDatasetMagic, 8) != 0)
    throw FormatError("dataset cache " + path + ": bad magic");
  auto r32 = [&] {
    std::uint32_t v;
    in.read(reinterpret_cast<char*>(&v), 4);
    if (!in) throw FormatError("dataset cache " + path + ": truncated header");
    return v;
  };
  auto r64 = [&] {
    std::uint64_t v;
    in.read(reinterpret_cast<char*>(&v), 8);
    if (!in) throw FormatError("dataset cache " + path + ": truncated header");
    return v;
  };
  if (r32() != kDatasetVersion) throw FormatError("dataset cache " + path + ": bad version");
  DatasetCacheHeader hdr;
  hdr.master_seed = r64();
  hdr.split_id = r32();
  hdr.distractors = r32();
  U8Dataset ds;
  ds.n = static_cast<std::int64_t>(r64());
  ds.c = r32();
  ds.h = r32();
  ds.w = r32();
  ds.images.resize(static_cast<std::size_t>(ds.n * ds.c * ds.h * ds.w));
  in.read(reinterpret_cast<char*>(ds.images.data()),
          static_cast<std::streamsize>(ds.images.size()));
  std::vector<std::uint8_t> lab(static_cast<std::size_t>(ds.n));
  in.read(reinterpret_cast<char*>(lab.data()), static_cast<std::streamsize>(lab.size()));
  if (!in) throw FormatError("dataset cache " + path + ": truncated payload");
  ds.labels.assign(lab.begin(), lab.end());
  return {std::move(ds), hdr};
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches
// ---------------------------------------------------------------------------

template <typename T>
struct CifarData {
  Dataset<T> train, test;
  std::array<double, 3> mean{}, stddev{};  // train-split statistics
};

/// Loads the standard CIFAR-10 binary batches (1 label byte + 3072 pixel
/// bytes per record, R/G/B planes) and normalizes both splits per channel
/// with mean/std computed from the training split.
template <typename T>
CifarData<T> load_cifar10(const std::string& dir) {
  auto read_records = [](const std::string& path, std::vector<std::uint8_t>& pixels,
                         std::vector<int>& labels) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open CIFAR batch: " + path);
    std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
    if (raw.empty() || raw.size() % 3073 != 0)
      throw FormatError("CIFAR batch " + path + ": size " + std::to_string(raw.size()) +
                        " is not a multiple of 3073-byte records");
    const std::size_t n = raw.size() / 3073;
    for (std::size_t i = 0; i < n; ++i) {
      labels.push_back(raw[i * 3073]);
      pixels.insert(pixels.end(), raw.begin() + static_cast<std::ptrdiff_t>(i * 3073 + 1),
                    raw.begin() + static_cast<std::ptrdiff_t>((i + 1) * 3073));
    }
  };
  std::vector<std::uint8_t> train_px, test_px;
  std::vector<int> train_lab, test_lab;
  for (int b = 1; b <= 5; ++b)
    read_records(dir + "/data_batch_" + std::to_string(b) + ".bin", train_px, train_lab);
  read_records(dir + "/test_batch.bin", test_px, test_lab);

  CifarData<T> out;
  const std::int64_t ntr = static_cast<std::int64_t>(train_lab.size());
  const std::int64_t nte = static_cast<std::int64_t>(test_lab.size());
  // Per-channel moments of the [0,1]-scaled training pixels.
  for (int c = 0; c < 3; ++c) {
    double s = 0.0, s2 = 0.0;
    const std::int64_t per = 1024;
    for (std::int64_t i = 0; i < ntr; ++i)
      for (std::int64_t p = 0; p < per; ++p) {
        const double v = train_px[static_cast<std::size_t>(i * 3072 + c * per + p)] / 255.0;
        s += v;
        s2 += v * v;
      }
    const double m = s / static_cast<double>(ntr * per);
    out.mean[static_cast<std::size_t>(c)] = m;
    out.stddev[static_cast<std::size_t>(c)] =
        std::sqrt(std::max(s2 / static_cast<double>(ntr * per) - m * m, 1e-12));
  }
  auto build = [&](const std::vector<std::uint8_t>& px, std::vector<int>& lab, std::int64_t n) {
    Dataset<T> ds;
    ds.images = Tensor<T>::zeros({n, 3, 32, 32});
    for (std::int64_t i = 0; i < n * 3072; ++i) {
      const int c = static_cast<int>((i % 3072) / 1024);
      ds.images.data()[static_cast<std::size_t>(i)] =
          static_cast<T>((px[static_cast<std::size_t>(i)] / 255.0 - out.mean[static_cast<std::size_t>(c)]) /
                         out.stddev[static_cast<std::size_t>(c)]);
    }
    ds.labels = std::move(lab);
    return ds;
  };
  out.train = build(train_px, train_lab, ntr);
  out.test = build(test_px, test_lab, nte);
  return out;
}

// ---------------------------------------------------------------------------
// Batch iteration
// ---------------------------------------------------------------------------

template <typename T>
struct Batch {
  Tensor<T> images;
  std::vector<int> labels;
};

/// CIFAR-style augmentation: 4-pixel zero-pad random crop plus horizontal
/// flip with probability 1/2. Draw order per sample: crop dy, crop dx, flip.
template <typename T>
void augment_sample(const T* src, T* dst, std::int64_t c, std::int64_t h, std::int64_t w,
                    Rng& rng) {
  const int dy = static_cast<int>(rng.below(9)) - 4;
  const int dx = static_cast<int>(rng.below(9)) - 4;
  const bool flip = rng.below(2) == 1;
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const std::int64_t sy = y + dy;
        const std::int64_t sx = (flip ? w - 1 - x : x) + dx;
        dst[(ch * h + y) * w + x] = (sy < 0 || sy >= h || sx < 0 || sx >= w)
                                        ? T(0)
                                        : src[(ch * h + sy) * w + sx];
      }
}

/// Deterministic epoch iterator: optional Fisher-Yates shuffle from the
/// epoch seed, optional augmentation, final partial batch kept.
template <typename T>
class BatchIterator {
 public:
  BatchIterator(const Dataset<T>& data, std::int64_t batch, std::uint64_t seed, bool shuffle,
                bool augment)
      : data_(&data), batch_(batch), rng_(seed), augment_(augment) {
    if (batch < 1) throw ValueError("batch iterator: batch size must be >= 1");
    const std::int64_t n = data.size();
    order_.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order_[static_cast<std::size_t>(i)] = i;
    if (shuffle)
      for (std::int64_t i = n - 1; i > 0; --i)
        std::swap(order_[static_cast<std::size_t>(i)],
                  order_[rng_.below(static_cast<std::uint32_t>(i + 1))]);
  }

  std::optional<Batch<T>> next() {
    const std::int64_t n = data_->size();
    if (pos_ >= n) return std::nullopt;
    const std::int64_t take = std::min(batch_, n - pos_);
    const std::int64_t c = data_->images.dim(1), h = data_->images.dim(2),
                       w = data_->images.dim(3);
    Batch<T> b;
    b.images = Tensor<T>::zeros({take, c, h, w});
    b.labels.resize(static_cast<std::size_t>(take));
    const std::int64_t plane = c * h * w;
    for (std::int64_t i = 0; i < take; ++i) {
      const std::int64_t src = order_[static_cast<std::size_t>(pos_ + i)];
      const T* sp = data_->images.data().data() + src * plane;
      T* dp = b.images.data().data() + i * plane;
      if (augment_) {
        augment_sample(sp, dp, c, h, w, rng_);
      } else {
        std::copy(sp, sp + plane, dp);
      }
      b.labels[static_cast<std::size_t>(i)] = data_->labels[static_cast<std::size_t>(src)];
    }
    pos_ += take;
    return b;
  }

 private:
  const Dataset<T>* data_;
  std::int64_t batch_;
  Rng rng_;
  bool augment_;
  std::vector<std::int64_t> order_;
  std::int64_t pos_ = 0;
};

/// FNV-1a over the raw bytes; used to freeze generation goldens.
inline std::uint64_t fnv1a(const std::uint8_t* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace gattn
