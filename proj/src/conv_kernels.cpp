// Raw convolution kernels behind the conv2d op.
//
// Shapes follow the op contract: input [N,Cin,H,W], kernel [Cout,Cin,kh,kw],
// output [N,Cout,OH,OW] with OH = H + 2*pad_h - kh + 1 (cross-correlation,
// zero padding, stride 1). Everything here works on raw double pointers; the
// autograd layer owns shape validation.
//
// The fast path copies the input into a zero-padded scratch whose rows carry
// extra tail headroom, so the vector loops never need bounds checks or masked
// loads: reads beyond the valid region hit explicit zeros and contribute
// nothing. The padded scratch is reused across calls (thread-local) to avoid
// re-faulting pages; every row is rewritten in full before use.
//
// Vector loads are the scarce resource on the target machine, so both kernels
// are shaped to maximize FMAs per load: the forward pass amortizes each input
// load over four output channels, and the kernel-gradient pass materializes
// the kw shifted views of an input row with register shifts (valignq) instead
// of overlapping loads.

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <vector>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace golf::detail {

namespace {

constexpr std::size_t round_up(std::size_t x, std::size_t m) { return (x + m - 1) / m * m; }

thread_local std::vector<double> t_pin;   // padded input scratch
thread_local std::vector<double> t_padj;  // padded adjoint scratch (gradient pass)
thread_local std::vector<double> t_obuf;  // output tile scratch (tail cases)
thread_local std::vector<double> t_kpad;  // zero-extended kernel (channel tails)

// Fills scratch [n_planes][ph][pw] with the image planes surrounded by
// zeros; single pass, every row written in full.
double* fill_padded(std::vector<double>& scratch, const double* in, int n_planes, int h, int w, int pad_h,
                    int pad_w, std::size_t ph, std::size_t pw) {
  scratch.resize(static_cast<std::size_t>(n_planes) * ph * pw);
  double* pin = scratch.data();
  for (int i = 0; i < n_planes; ++i) {
    double* dst = pin + static_cast<std::size_t>(i) * ph * pw;
    const double* src = in + static_cast<std::size_t>(i) * h * w;
    std::fill(dst, dst + static_cast<std::size_t>(pad_h) * pw, 0.0);
    for (int y = 0; y < h; ++y) {
      double* row = dst + (static_cast<std::size_t>(pad_h) + y) * pw;
      std::fill(row, row + pad_w, 0.0);
      std::memcpy(row + pad_w, src + static_cast<std::size_t>(y) * w, sizeof(double) * w);
      std::fill(row + pad_w + w, row + pw, 0.0);
    }
    double* bottom = dst + (static_cast<std::size_t>(pad_h) + h) * pw;
    std::fill(bottom, dst + ph * pw, 0.0);
  }
  return pin;
}

#if defined(__AVX512F__)

// Computes one block of four consecutive output channels for one image.
// VEC zmm registers per channel cover VEC*8 output columns per tile;
// KW_T > 0 bakes the kernel width in at compile time for full unrolling.
template <int VEC, int KW_T>
void fwd_tile_avx512(const double* pin_img, std::size_t cplane, std::size_t pw, const double* kbase,
                     std::size_t kstride, int c_in, int kh, int kw_rt, double* obuf, std::size_t owp,
                     int oh) {
  const int kw = KW_T > 0 ? KW_T : kw_rt;
  const std::size_t oplane = static_cast<std::size_t>(oh) * owp;
  for (int y = 0; y < oh; ++y) {
    for (std::size_t xt = 0; xt < owp; xt += static_cast<std::size_t>(VEC) * 8) {
      __m512d acc[4][VEC];
      for (int j = 0; j < 4; ++j)
        for (int t = 0; t < VEC; ++t) acc[j][t] = _mm512_setzero_pd();
      for (int ci = 0; ci < c_in; ++ci) {
        const double* iplane = pin_img + static_cast<std::size_t>(ci) * cplane;
        const double* k0 = kbase + static_cast<std::size_t>(ci) * kh * kw;
        for (int u = 0; u < kh; ++u) {
          const double* irow = iplane + static_cast<std::size_t>(y + u) * pw + xt;
          const double* kr = k0 + static_cast<std::size_t>(u) * kw;
          for (int v = 0; v < kw; ++v) {
            const __m512d w0 = _mm512_set1_pd(kr[v]);
            const __m512d w1 = _mm512_set1_pd(kr[v + kstride]);
            const __m512d w2 = _mm512_set1_pd(kr[v + 2 * kstride]);
            const __m512d w3 = _mm512_set1_pd(kr[v + 3 * kstride]);
            for (int t = 0; t < VEC; ++t) {
              const __m512d iv = _mm512_loadu_pd(irow + v + 8 * t);
              acc[0][t] = _mm512_fmadd_pd(w0, iv, acc[0][t]);
              acc[1][t] = _mm512_fmadd_pd(w1, iv, acc[1][t]);
              acc[2][t] = _mm512_fmadd_pd(w2, iv, acc[2][t]);
              acc[3][t] = _mm512_fmadd_pd(w3, iv, acc[3][t]);
            }
          }
        }
      }
      for (int j = 0; j < 4; ++j) {
        double* orow = obuf + static_cast<std::size_t>(j) * oplane + static_cast<std::size_t>(y) * owp + xt;
        for (int t = 0; t < VEC; ++t) _mm512_storeu_pd(orow + 8 * t, acc[j][t]);
      }
    }
  }
}

template <int VEC>
void fwd_tile_dispatch_kw(const double* pin_img, std::size_t cplane, std::size_t pw, const double* kbase,
                          std::size_t kstride, int c_in, int kh, int kw, double* obuf, std::size_t owp,
                          int oh) {
  switch (kw) {
    case 1: fwd_tile_avx512<VEC, 1>(pin_img, cplane, pw, kbase, kstride, c_in, kh, kw, obuf, owp, oh); break;
    case 3: fwd_tile_avx512<VEC, 3>(pin_img, cplane, pw, kbase, kstride, c_in, kh, kw, obuf, owp, oh); break;
    case 5: fwd_tile_avx512<VEC, 5>(pin_img, cplane, pw, kbase, kstride, c_in, kh, kw, obuf, owp, oh); break;
    case 7: fwd_tile_avx512<VEC, 7>(pin_img, cplane, pw, kbase, kstride, c_in, kh, kw, obuf, owp, oh); break;
    case 9: fwd_tile_avx512<VEC, 9>(pin_img, cplane, pw, kbase, kstride, c_in, kh, kw, obuf, owp, oh); break;
    default: fwd_tile_avx512<VEC, 0>(pin_img, cplane, pw, kbase, kstride, c_in, kh, kw, obuf, owp, oh); break;
  }
}

// Accumulates kernel-gradient entries [v0, v0+NV) for one (output-channel
// pair, input channel, row offset) slice. One aligned-ish input load per
// step; the NV shifted views come from register shifts, and each is shared
// by the two adjoint channels.
template <int NV>
void dk_block_avx512(const double* adj0, const double* adj1, std::size_t adj_row, const double* inrow0,
                     std::size_t in_row, int oh, std::size_t ow8, int n, std::size_t adj_img,
                     std::size_t in_img, double* out0, double* out1) {
  __m512d acc0[NV], acc1[NV];
  for (int t = 0; t < NV; ++t) acc0[t] = acc1[t] = _mm512_setzero_pd();
  for (int i = 0; i < n; ++i) {
    const double* a0 = adj0 + static_cast<std::size_t>(i) * adj_img;
    const double* a1 = adj1 + static_cast<std::size_t>(i) * adj_img;
    const double* ir = inrow0 + static_cast<std::size_t>(i) * in_img;
    for (int y = 0; y < oh; ++y) {
      const double* a0r = a0 + static_cast<std::size_t>(y) * adj_row;
      const double* a1r = a1 + static_cast<std::size_t>(y) * adj_row;
      const double* irr = ir + static_cast<std::size_t>(y) * in_row;
      __m512i lo = _mm512_castpd_si512(_mm512_loadu_pd(irr));
      for (std::size_t x = 0; x < ow8; x += 8) {
        const __m512d av0 = _mm512_loadu_pd(a0r + x);
        const __m512d av1 = _mm512_loadu_pd(a1r + x);
        const __m512i hi = _mm512_castpd_si512(_mm512_loadu_pd(irr + x + 8));
        for (int t = 0; t < NV; ++t) {
          const __m512d iv =
              t == 0 ? _mm512_castsi512_pd(lo) : _mm512_castsi512_pd(_mm512_alignr_epi64(hi, lo, t));
          acc0[t] = _mm512_fmadd_pd(av0, iv, acc0[t]);
          acc1[t] = _mm512_fmadd_pd(av1, iv, acc1[t]);
        }
        lo = hi;
      }
    }
  }
  for (int t = 0; t < NV; ++t) {
    out0[t] = _mm512_reduce_add_pd(acc0[t]);
    if (out1) out1[t] = _mm512_reduce_add_pd(acc1[t]);
  }
}

using DkBlockFn = void (*)(const double*, const double*, std::size_t, const double*, std::size_t, int,
                           std::size_t, int, std::size_t, std::size_t, double*, double*);

constexpr DkBlockFn kDkBlock[9] = {nullptr,
                                   dk_block_avx512<1>,
                                   dk_block_avx512<2>,
                                   dk_block_avx512<3>,
                                   dk_block_avx512<4>,
                                   dk_block_avx512<5>,
                                   dk_block_avx512<6>,
                                   dk_block_avx512<7>,
                                   dk_block_avx512<8>};

#endif  // __AVX512F__

// Reference row-accumulator forward, also the fallback without AVX-512.
void fwd_portable(const double* pin, int n, int c_in, std::size_t cplane, std::size_t pw, const double* ker,
                  int c_out, int kh, int kw, double* out, int oh, int ow) {
  std::vector<double> row(static_cast<std::size_t>(ow));
  for (int i = 0; i < n; ++i) {
    const double* img = pin + static_cast<std::size_t>(i) * c_in * cplane;
    for (int co = 0; co < c_out; ++co) {
      double* oplane = out + (static_cast<std::size_t>(i) * c_out + co) * oh * ow;
      for (int y = 0; y < oh; ++y) {
        std::fill(row.begin(), row.end(), 0.0);
        for (int ci = 0; ci < c_in; ++ci) {
          const double* iplane = img + static_cast<std::size_t>(ci) * cplane;
          const double* k0 = ker + (static_cast<std::size_t>(co) * c_in + ci) * kh * kw;
          for (int u = 0; u < kh; ++u) {
            const double* irow = iplane + static_cast<std::size_t>(y + u) * pw;
            const double* kr = k0 + static_cast<std::size_t>(u) * kw;
            for (int v = 0; v < kw; ++v) {
              const double wv = kr[v];
              const double* ir = irow + v;
              for (int x = 0; x < ow; ++x) row[x] += wv * ir[x];
            }
          }
        }
        std::memcpy(oplane + static_cast<std::size_t>(y) * ow, row.data(), sizeof(double) * ow);
      }
    }
  }
}

}  // namespace

void conv2d_forward(const double* in, int n, int c_in, int h, int w, const double* ker, int c_out, int kh,
                    int kw, int pad_h, int pad_w, double* out) {
  const int oh = h + 2 * pad_h - kh + 1;
  const int ow = w + 2 * pad_w - kw + 1;
#if defined(__AVX512F__)
  const int vec = ow >= 32 ? 4 : (ow >= 16 ? 2 : 1);
  const std::size_t owp = round_up(static_cast<std::size_t>(ow), static_cast<std::size_t>(vec) * 8);
  const std::size_t pw = std::max<std::size_t>(static_cast<std::size_t>(w) + 2 * pad_w, owp + kw) + 8;
  const std::size_t ph = static_cast<std::size_t>(h) + 2 * pad_h;
  const std::size_t cplane = ph * pw;
  const double* pin = fill_padded(t_pin, in, n * c_in, h, w, pad_h, pad_w, ph, pw);

  // round the channel count up to the block size with zero kernel planes so
  // the channel loop needs no tail case
  const int co4 = static_cast<int>(round_up(static_cast<std::size_t>(c_out), 4));
  const std::size_t kstride = static_cast<std::size_t>(c_in) * kh * kw;
  const double* kuse = ker;
  if (co4 != c_out) {
    t_kpad.assign(static_cast<std::size_t>(co4) * kstride, 0.0);
    std::memcpy(t_kpad.data(), ker, sizeof(double) * static_cast<std::size_t>(c_out) * kstride);
    kuse = t_kpad.data();
  }

  const bool direct = owp == static_cast<std::size_t>(ow);
  t_obuf.resize(4 * static_cast<std::size_t>(oh) * owp);
  for (int i = 0; i < n; ++i) {
    const double* pin_img = pin + static_cast<std::size_t>(i) * c_in * cplane;
    for (int cb = 0; cb < co4; cb += 4) {
      // write straight into the output when a full block of four channels
      // lines up with it; otherwise go through the tile scratch
      double* dst0 = out + (static_cast<std::size_t>(i) * c_out + cb) * oh * ow;
      double* tile = (direct && cb + 4 <= c_out) ? dst0 : t_obuf.data();
      if (vec == 4)
        fwd_tile_dispatch_kw<4>(pin_img, cplane, pw, kuse + static_cast<std::size_t>(cb) * kstride, kstride,
                                c_in, kh, kw, tile, owp, oh);
      else if (vec == 2)
        fwd_tile_dispatch_kw<2>(pin_img, cplane, pw, kuse + static_cast<std::size_t>(cb) * kstride, kstride,
                                c_in, kh, kw, tile, owp, oh);
      else
        fwd_tile_dispatch_kw<1>(pin_img, cplane, pw, kuse + static_cast<std::size_t>(cb) * kstride, kstride,
                                c_in, kh, kw, tile, owp, oh);
      if (tile != dst0)
        for (int j = 0; j < 4 && cb + j < c_out; ++j) {
          double* dst = dst0 + static_cast<std::size_t>(j) * oh * ow;
          const double* src = t_obuf.data() + static_cast<std::size_t>(j) * oh * owp;
          for (int y = 0; y < oh; ++y)
            std::memcpy(dst + static_cast<std::size_t>(y) * ow, src + static_cast<std::size_t>(y) * owp,
                        sizeof(double) * ow);
        }
    }
  }
#else
  const std::size_t pw = static_cast<std::size_t>(w) + 2 * pad_w;
  const std::size_t ph = static_cast<std::size_t>(h) + 2 * pad_h;
  const double* pin = fill_padded(t_pin, in, n * c_in, h, w, pad_h, pad_w, ph, pw);
  fwd_portable(pin, n, c_in, ph * pw, pw, ker, c_out, kh, kw, out, oh, ow);
#endif
}

void conv2d_grad_kernel(const double* in, int n, int c_in, int h, int w, const double* out_adj, int c_out,
                        int kh, int kw, int pad_h, int pad_w, double* d_ker) {
  const int oh = h + 2 * pad_h - kh + 1;
  const int ow = w + 2 * pad_w - kw + 1;
#if defined(__AVX512F__)
  const std::size_t ow8 = round_up(static_cast<std::size_t>(ow), 8);
  const std::size_t pw =
      std::max<std::size_t>(static_cast<std::size_t>(w) + 2 * pad_w, ow8 + round_up(kw, 8)) + 8;
  const std::size_t ph = static_cast<std::size_t>(h) + 2 * pad_h;
  const double* pin = fill_padded(t_pin, in, n * c_in, h, w, pad_h, pad_w, ph, pw);
  // adjoint rows rounded up to full vectors with zeros: whole-width loads
  // read zeros past the true row end and add nothing
  const double* padj =
      fill_padded(t_padj, out_adj, n * c_out, oh, ow, 0, 0, static_cast<std::size_t>(oh), ow8);

  const std::size_t adj_img = static_cast<std::size_t>(c_out) * oh * ow8;
  const std::size_t in_img = static_cast<std::size_t>(c_in) * ph * pw;
  for (int co = 0; co < c_out; co += 2) {
    const bool pair = co + 1 < c_out;
    const double* adj0 = padj + static_cast<std::size_t>(co) * oh * ow8;
    const double* adj1 = padj + static_cast<std::size_t>(pair ? co + 1 : co) * oh * ow8;
    for (int ci = 0; ci < c_in; ++ci)
      for (int u = 0; u < kh; ++u) {
        const double* inrow0 = pin + (static_cast<std::size_t>(ci) * ph + u) * pw;
        double* out0 = d_ker + ((static_cast<std::size_t>(co) * c_in + ci) * kh + u) * kw;
        double* out1 =
            pair ? d_ker + ((static_cast<std::size_t>(co + 1) * c_in + ci) * kh + u) * kw : nullptr;
        for (int v0 = 0; v0 < kw; v0 += 8) {
          const int nv = std::min(8, kw - v0);
          kDkBlock[nv](adj0, adj1, ow8, inrow0 + v0, pw, oh, ow8, n, adj_img, in_img, out0 + v0,
                       out1 ? out1 + v0 : nullptr);
        }
      }
  }
#else
  const std::size_t pw = static_cast<std::size_t>(w) + 2 * pad_w;
  const std::size_t ph = static_cast<std::size_t>(h) + 2 * pad_h;
  const double* pin = fill_padded(t_pin, in, n * c_in, h, w, pad_h, pad_w, ph, pw);
  for (int co = 0; co < c_out; ++co)
    for (int ci = 0; ci < c_in; ++ci)
      for (int u = 0; u < kh; ++u)
        for (int v = 0; v < kw; ++v) {
          double s = 0.0;
          for (int i = 0; i < n; ++i) {
            const double* adj = out_adj + (static_cast<std::size_t>(i) * c_out + co) * oh * ow;
            const double* ip = pin + (static_cast<std::size_t>(i) * c_in + ci) * ph * pw +
                               static_cast<std::size_t>(u) * pw + v;
            for (int y = 0; y < oh; ++y) {
              const double* ar = adj + static_cast<std::size_t>(y) * ow;
              const double* ir = ip + static_cast<std::size_t>(y) * pw;
              for (int x = 0; x < ow; ++x) s += ar[x] * ir[x];
            }
          }
          d_ker[((static_cast<std::size_t>(co) * c_in + ci) * kh + u) * kw + v] = s;
        }
#endif
}

}  // namespace golf::detail
