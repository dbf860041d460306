#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "gattn/models.hpp"

namespace gattn {

/// Binary PGM (P5), maxval 255.
inline void write_pgm(const std::string& path, std::int64_t width, std::int64_t height,
                      const std::vector<std::uint8_t>& pixels) {
  if (static_cast<std::int64_t>(pixels.size()) != width * height)
    throw ShapeError("write_pgm: " + std::to_string(pixels.size()) + " pixels for " +
                     std::to_string(width) + "x" + std::to_string(height));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write PGM: " + path);
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
  if (!out) throw IoError("short write on PGM: " + path);
}

/// Min-max scales a mask to 0..255; constant masks map to all-zero.
template <typename T>
std::vector<std::uint8_t> mask_to_u8(const T* m, std::int64_t n) {
  T lo = m[0], hi = m[0];
  for (std::int64_t i = 1; i < n; ++i) {
    lo = std::min(lo, m[i]);
    hi = std::max(hi, m[i]);
  }
  std::vector<std::uint8_t> out(static_cast<std::size_t>(n), 0);
  if (hi > lo) {
    const T inv = T(255) / (hi - lo);
    for (std::int64_t i = 0; i < n; ++i)
      out[static_cast<std::size_t>(i)] =
          static_cast<std::uint8_t>(std::lround(static_cast<double>((m[i] - lo) * inv)));
  }
  return out;
}

/// Nearest-neighbor upsample of an h*w mask to H*W.
template <typename T>
std::vector<T> upsample_nearest(const T* m, std::int64_t h, std::int64_t w, std::int64_t H,
                                std::int64_t W) {
  std::vector<T> out(static_cast<std::size_t>(H * W));
  for (std::int64_t y = 0; y < H; ++y) {
    const std::int64_t sy = y * h / H;
    for (std::int64_t x = 0; x < W; ++x) {
      const std::int64_t sx = x * w / W;
      out[static_cast<std::size_t>(y * W + x)] = m[sy * w + sx];
    }
  }
  return out;
}

/// Writes one mask heatmap plus a 50% overlay onto the input for every
/// (module, head) of the model, for every image in the batch. Filenames
/// encode the image index, module depth (1 = deepest) and head. Returns the
/// number of files written.
template <typename T, typename Base>
std::int64_t export_masks(const Augmented<T, Base>& model, const Tensor<T>& images,
                          const std::string& outdir, std::int64_t first_index = 0) {
  auto bundle = model.forward(images, /*train=*/false);
  const std::int64_t n = images.dim(0);
  const std::int64_t H = images.dim(2), W = images.dim(3);
  std::int64_t files = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const T* img = images.data().data() + i * images.dim(1) * H * W;  // channel 0
    for (std::size_t mi = 0; mi < bundle.modules.size(); ++mi) {
      const auto& masks = bundle.modules[mi].masks;
      const std::int64_t K = masks.dim(1), mh = masks.dim(2), mw = masks.dim(3);
      for (std::int64_t k = 0; k < K; ++k) {
        const T* m = masks.data().data() + ((i * K + k) * mh * mw);
        char name[128];
        std::snprintf(name, sizeof(name), "img%03lld_mod%zu_head%lld",
                      static_cast<long long>(first_index + i), mi + 1,
                      static_cast<long long>(k + 1));
        auto up = upsample_nearest(m, mh, mw, H, W);
        write_pgm(outdir + "/" + name + "_mask.pgm", W, H, mask_to_u8(up.data(), H * W));
        ++files;
        // 50% blend of the (min-max scaled) mask onto the input image.
        auto mu8 = mask_to_u8(up.data(), H * W);
        std::vector<std::uint8_t> blend(static_cast<std::size_t>(H * W));
        for (std::int64_t p = 0; p < H * W; ++p) {
          const double iv = 255.0 * std::clamp(static_cast<double>(img[p]), 0.0, 1.0);
          blend[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(
              std::lround(0.5 * iv + 0.5 * mu8[static_cast<std::size_t>(p)]));
        }
        write_pgm(outdir + "/" + std::string(name) + "_overlay.pgm", W, H, blend);
        ++files;
      }
    }
  }
  return files;
}

}  // namespace gattn
