// Naive reference implementations used as independent oracles in tests.
// These intentionally share no code with the library kernels.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace oracle {

// Plain 7-nested-loop cross-correlation over NCHW input / OIHW kernel.
inline std::vector<double> conv2d(const std::vector<double>& x, std::int64_t N, std::int64_t Cin,
                                  std::int64_t H, std::int64_t W, const std::vector<double>& w,
                                  std::int64_t Cout, std::int64_t kh, std::int64_t kw,
                                  const std::vector<double>& bias, std::int64_t stride,
                                  std::int64_t pad) {
  const std::int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  const std::int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(N * Cout * Ho * Wo), 0.0);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t co = 0; co < Cout; ++co)
      for (std::int64_t oy = 0; oy < Ho; ++oy)
        for (std::int64_t ox = 0; ox < Wo; ++ox) {
          double s = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(co)];
          for (std::int64_t ci = 0; ci < Cin; ++ci)
            for (std::int64_t ki = 0; ki < kh; ++ki)
              for (std::int64_t kj = 0; kj < kw; ++kj) {
                const std::int64_t iy = oy * stride + ki - pad;
                const std::int64_t ix = ox * stride + kj - pad;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                s += x[static_cast<std::size_t>(((n * Cin + ci) * H + iy) * W + ix)] *
                     w[static_cast<std::size_t>(((co * Cin + ci) * kh + ki) * kw + kj)];
              }
          out[static_cast<std::size_t>(((n * Cout + co) * Ho + oy) * Wo + ox)] = s;
        }
  return out;
}

// Softmax of one vector, exp-normalize form.
inline std::vector<double> softmax_vec(const std::vector<double>& v) {
  double mx = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double z = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    z += out[i];
  }
  for (auto& e : out) e /= z;
  return out;
}

// Explicit double-loop weighted spatial sum.
inline std::vector<double> weighted_sum(const std::vector<double>& mask,
                                        const std::vector<double>& maps, std::int64_t N,
                                        std::int64_t K, std::int64_t L, std::int64_t P) {
  std::vector<double> out(static_cast<std::size_t>(N * K * L), 0.0);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t k = 0; k < K; ++k)
      for (std::int64_t l = 0; l < L; ++l) {
        double s = 0.0;
        for (std::int64_t p = 0; p < P; ++p)
          s += mask[static_cast<std::size_t>((n * K + k) * P + p)] *
               maps[static_cast<std::size_t>(((n * K + k) * L + l) * P + p)];
        out[static_cast<std::size_t>((n * K + k) * L + l)] = s;
      }
  return out;
}

// 2x2/stride-2 max pool.
inline std::vector<double> max_pool(const std::vector<double>& x, std::int64_t NC, std::int64_t H,
                                    std::int64_t W) {
  const std::int64_t Ho = H / 2, Wo = W / 2;
  std::vector<double> out(static_cast<std::size_t>(NC * Ho * Wo));
  for (std::int64_t nc = 0; nc < NC; ++nc)
    for (std::int64_t oy = 0; oy < Ho; ++oy)
      for (std::int64_t ox = 0; ox < Wo; ++ox) {
        double m = -1e300;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx)
            m = std::max(m, x[static_cast<std::size_t>(nc * H * W + (2 * oy + dy) * W +
                                                       (2 * ox + dx))]);
        out[static_cast<std::size_t>(nc * Ho * Wo + oy * Wo + ox)] = m;
      }
  return out;
}

// Pairwise squared dot products of flattened masks, ordered pairs i != j,
// summed over the batch then divided by batch size.
inline double head_reg(const std::vector<double>& masks, std::int64_t N, std::int64_t K,
                       std::int64_t P) {
  double total = 0.0;
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t i = 0; i < K; ++i)
      for (std::int64_t j = 0; j < K; ++j) {
        if (i == j) continue;
        double dot = 0.0;
        for (std::int64_t p = 0; p < P; ++p)
          dot += masks[static_cast<std::size_t>((n * K + i) * P + p)] *
                 masks[static_cast<std::size_t>((n * K + j) * P + p)];
        total += dot * dot;
      }
  return total / static_cast<double>(N);
}

// Weighted mixture: out[n,l] = sum_g w[n,g] * comps[n,g,l].
inline std::vector<double> mix(const std::vector<double>& w, const std::vector<double>& comps,
                               std::int64_t N, std::int64_t G, std::int64_t L) {
  std::vector<double> out(static_cast<std::size_t>(N * L), 0.0);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t g = 0; g < G; ++g)
      for (std::int64_t l = 0; l < L; ++l)
        out[static_cast<std::size_t>(n * L + l)] +=
            w[static_cast<std::size_t>(n * G + g)] *
            comps[static_cast<std::size_t>((n * G + g) * L + l)];
  return out;
}

}  // namespace oracle
