// Copyright 2026 The dssdrv Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <algorithm>
#include <complex>
#include <span>
#include <vector>

#include <unsupported/Eigen/FFT>

namespace dssdrv {

using Complex = std::complex<double>;

// Real FFT of a fixed size returning the n/2+1 non-negative bins.
// Not thread-safe; keep one per thread.
class RealFft {
 public:
  explicit RealFft(std::size_t n) : n_(n), in_(n) { fft_.SetFlag(Eigen::FFT<double>::HalfSpectrum); }

  std::size_t size() const { return n_; }
  std::size_t bins() const { return n_ / 2 + 1; }

  // `x` shorter than n is zero-padded.
  void forward(std::span<const double> x, std::vector<Complex>& spectrum) {
    std::fill(in_.begin(), in_.end(), 0.0);
    std::copy_n(x.begin(), std::min(x.size(), n_), in_.begin());
    fft_.fwd(spectrum, in_);
    spectrum.resize(bins());
  }

  void inverse(std::span<const Complex> spectrum, std::vector<double>& x) {
    half_.assign(spectrum.begin(), spectrum.end());
    fft_.inv(x, half_, n_);
  }

 private:
  std::size_t n_;
  std::vector<double> in_;
  std::vector<Complex> half_;
  Eigen::FFT<double> fft_;
};

inline std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

// Linear convolution via FFT; output length a.size() + b.size() - 1.
inline std::vector<double> fft_convolve(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) return {};
  const std::size_t len = a.size() + b.size() - 1;
  RealFft fft(next_pow2(std::max<std::size_t>(len, 16)));
  std::vector<Complex> fa, fb;
  fft.forward(a, fa);
  fft.forward(b, fb);
  for (std::size_t k = 0; k < fa.size(); ++k) fa[k] *= fb[k];
  std::vector<double> y;
  fft.inverse(fa, y);
  y.resize(len);
  return y;
}

}  // namespace dssdrv
