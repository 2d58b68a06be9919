#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "patchgd/parallel.hpp"
#include "patchgd/tensor.hpp"

namespace patchgd {

namespace detail {

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapRM = Eigen::Map<MatRM<S>>;
template <typename S>
using CMapRM = Eigen::Map<const MatRM<S>>;

template <typename S>
void check_4d(const Tensor<S>& t, const char* op, const char* name) {
  if (!t.defined() || t.ndim() != 4) {
    throw ShapeError(std::string(op) + ": " + name + " must be 4-d, got " +
                     (t.defined() ? shape_str(t.shape()) : std::string("undefined")));
  }
}

// Unpacks one image into column form: row (c*kh+i)*kw+j, column oh*out_w+ow.
// Out-of-range taps (from padding) become zeros. `row_stride` is the full
// column count of the destination matrix; `col_offset` places this image's
// block, so a whole batch shares one matrix and one GEMM.
// Valid output range [lo, hi) for which tap `k` stays inside [0, limit).
inline std::pair<std::size_t, std::size_t> tap_bounds(std::size_t k,
                                                      std::size_t stride,
                                                      std::size_t pad,
                                                      std::size_t limit,
                                                      std::size_t out_extent) {
  // in = out*stride + k - pad must satisfy 0 <= in < limit.
  std::size_t lo = 0;
  if (k < pad) lo = (pad - k + stride - 1) / stride;
  const std::ptrdiff_t top =
      static_cast<std::ptrdiff_t>(limit) + static_cast<std::ptrdiff_t>(pad) -
      static_cast<std::ptrdiff_t>(k);
  std::size_t hi = 0;
  if (top > 0) {
    hi = (static_cast<std::size_t>(top) + stride - 1) / stride;
  }
  return {std::min(lo, out_extent), std::min(hi, out_extent)};
}

template <typename S>
void im2col(const S* img, std::size_t channels, std::size_t height,
            std::size_t width, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, std::size_t out_h,
            std::size_t out_w, S* cols, std::size_t row_stride,
            std::size_t col_offset) {
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    const S* plane = img + c * height * width;
    for (std::size_t i = 0; i < kh; ++i) {
      const auto [oh_lo, oh_hi] = tap_bounds(i, stride, pad, height, out_h);
      for (std::size_t j = 0; j < kw; ++j, ++row) {
        const auto [ow_lo, ow_hi] = tap_bounds(j, stride, pad, width, out_w);
        S* dst = cols + row * row_stride + col_offset;
        if (oh_lo > 0) std::fill(dst, dst + oh_lo * out_w, S(0));
        for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
          S* line = dst + oh * out_w;
          const S* src = plane + (oh * stride + i - pad) * width;
          if (ow_lo > 0) std::fill(line, line + ow_lo, S(0));
          if (stride == 1) {
            const S* from = src + ow_lo + j - pad;
            std::copy(from, from + (ow_hi - ow_lo), line + ow_lo);
          } else {
            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) {
              line[ow] = src[ow * stride + j - pad];
            }
          }
          if (ow_hi < out_w) std::fill(line + ow_hi, line + out_w, S(0));
        }
        if (oh_hi < out_h) {
          std::fill(dst + oh_hi * out_w, dst + out_h * out_w, S(0));
        }
        if (oh_hi < oh_lo) std::fill(dst, dst + out_h * out_w, S(0));
      }
    }
  }
}

// Scatters column-form gradients back onto the image, accumulating overlaps.
// Reads one image's block out of a batch-wide column matrix.
template <typename S>
void col2im_accumulate(const S* cols, std::size_t channels, std::size_t height,
                       std::size_t width, std::size_t kh, std::size_t kw,
                       std::size_t stride, std::size_t pad, std::size_t out_h,
                       std::size_t out_w, S* img_grad, std::size_t row_stride,
                       std::size_t col_offset) {
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    S* plane = img_grad + c * height * width;
    for (std::size_t i = 0; i < kh; ++i) {
      const auto [oh_lo, oh_hi] = tap_bounds(i, stride, pad, height, out_h);
      for (std::size_t j = 0; j < kw; ++j, ++row) {
        const auto [ow_lo, ow_hi] = tap_bounds(j, stride, pad, width, out_w);
        const S* src = cols + row * row_stride + col_offset;
        for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
          const S* line = src + oh * out_w;
          S* dst = plane + (oh * stride + i - pad) * width;
          if (stride == 1) {
            S* to = dst + ow_lo + j - pad;
            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) {
              to[ow - ow_lo] += line[ow];
            }
          } else {
            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) {
              dst[ow * stride + j - pad] += line[ow];
            }
          }
        }
      }
    }
  }
}

// Reusable per-thread scratch; convolution working sets come and go at a high
// rate during inner iterations.
template <typename S, int Slot>
std::vector<S>& scratch_buffer(std::size_t size) {
  thread_local std::vector<S> buf;
  if (buf.size() < size) buf.resize(size);
  return buf;
}

}  // namespace detail

// 2-d cross-correlation over NCHW input. Each batch item runs through its own
// GEMM, so a patch's result does not depend on what else shares the batch.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& weight,
                 const Tensor<S>& bias, std::size_t stride = 1,
                 std::size_t padding = 0) {
  detail::check_4d(input, "conv2d", "input");
  detail::check_4d(weight, "conv2d", "weight");
  if (stride == 0) throw ValueError("conv2d: stride must be >= 1");

  const std::size_t batch = input.dim(0), channels = input.dim(1);
  const std::size_t height = input.dim(2), width = input.dim(3);
  const std::size_t filters = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);

  if (weight.dim(1) != channels) {
    throw ShapeError("conv2d: input channel axis (" + std::to_string(channels) +
                     ") != weight channel axis (" + std::to_string(weight.dim(1)) + ")");
  }
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != filters)) {
    throw ShapeError("conv2d: bias axis (" + shape_str(bias.shape()) +
                     ") != filter count (" + std::to_string(filters) + ")");
  }
  if (kh > height + 2 * padding || kw > width + 2 * padding) {
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " exceeds padded input " + std::to_string(height + 2 * padding) +
                     "x" + std::to_string(width + 2 * padding));
  }

  const std::size_t out_h = (height + 2 * padding - kh) / stride + 1;
  const std::size_t out_w = (width + 2 * padding - kw) / stride + 1;
  const std::size_t k_dim = channels * kh * kw;
  const std::size_t patch_cols = out_h * out_w;

  // Strictly per-item GEMMs: an item's values must not depend on what else
  // shares the batch (cells are independent; patch batches in any order give
  // bit-identical embeddings). A batch-wide GEMM would tie the rounding to
  // the column layout. Items split across two lanes with disjoint outputs.
  std::vector<S> out(batch * filters * patch_cols);
  detail::split_items(batch, [&](int, std::size_t begin, std::size_t end) {
    auto& cols = detail::scratch_buffer<S, 0>(k_dim * patch_cols);
    detail::CMapRM<S> wmat(weight.values().data(), static_cast<Eigen::Index>(filters),
                           static_cast<Eigen::Index>(k_dim));
    for (std::size_t b = begin; b < end; ++b) {
      detail::im2col(input.values().data() + b * channels * height * width, channels,
                     height, width, kh, kw, stride, padding, out_h, out_w,
                     cols.data(), patch_cols, 0);
      detail::CMapRM<S> cmat(cols.data(), static_cast<Eigen::Index>(k_dim),
                             static_cast<Eigen::Index>(patch_cols));
      detail::MapRM<S> omat(out.data() + b * filters * patch_cols,
                            static_cast<Eigen::Index>(filters),
                            static_cast<Eigen::Index>(patch_cols));
      omat.noalias() = wmat * cmat;
      if (bias.defined()) {
        Eigen::Map<const Eigen::Vector<S, Eigen::Dynamic>> bvec(
            bias.values().data(), static_cast<Eigen::Index>(filters));
        omat.colwise() += bvec;
      }
    }
  });

  auto xi = input.impl();
  auto wi = weight.impl();
  auto bi = bias.defined() ? bias.impl() : nullptr;
  auto backward = [xi, wi, bi, batch, channels, height, width, filters, kh, kw,
                   stride, padding, out_h, out_w, k_dim,
                   patch_cols](detail::TensorImpl<S>& node) {
    const bool need_dx = xi->requires_grad;
    const bool need_dw = wi->requires_grad;
    const bool need_db = bi && bi->requires_grad;
    if (!need_dx && !need_dw && !need_db) return;
    if (need_dx) xi->ensure_grad();
    if (need_dw) wi->ensure_grad();
    if (need_db) bi->ensure_grad();

    // Weight/bias gradients contract across batch items, so they accumulate
    // per item in double: the result must not depend on batch order (patch
    // batches arrive in sampler order; the full-sampling path has to match
    // the whole-image composite). Each lane owns a partial; partials combine
    // in lane order, a pure function of the batch size.
    std::vector<std::vector<double>> dw_partial(2), db_partial(2);
    for (auto& p : dw_partial) p.assign(need_dw ? filters * k_dim : 0, 0.0);
    for (auto& p : db_partial) p.assign(need_db ? filters : 0, 0.0);

    detail::split_items(batch, [&](int lane, std::size_t begin, std::size_t end) {
      auto& cols = detail::scratch_buffer<S, 0>(k_dim * patch_cols);
      auto& dcols = detail::scratch_buffer<S, 1>(k_dim * patch_cols);
      auto& dw_item = detail::scratch_buffer<S, 2>(need_dw ? filters * k_dim : 1);
      detail::CMapRM<S> wmat(wi->values.data(), static_cast<Eigen::Index>(filters),
                             static_cast<Eigen::Index>(k_dim));
      for (std::size_t b = begin; b < end; ++b) {
        detail::CMapRM<S> dout(node.grad.data() + b * filters * patch_cols,
                               static_cast<Eigen::Index>(filters),
                               static_cast<Eigen::Index>(patch_cols));
        if (need_dw) {
          detail::im2col(xi->values.data() + b * channels * height * width, channels,
                         height, width, kh, kw, stride, padding, out_h, out_w,
                         cols.data(), patch_cols, 0);
          detail::CMapRM<S> cmat(cols.data(), static_cast<Eigen::Index>(k_dim),
                                 static_cast<Eigen::Index>(patch_cols));
          detail::MapRM<S> dwmat(dw_item.data(), static_cast<Eigen::Index>(filters),
                                 static_cast<Eigen::Index>(k_dim));
          dwmat.noalias() = dout * cmat.transpose();
          for (std::size_t i = 0; i < filters * k_dim; ++i) {
            dw_partial[lane][i] += static_cast<double>(dw_item[i]);
          }
        }
        if (need_db) {
          for (std::size_t f = 0; f < filters; ++f) {
            double acc = 0.0;
            const S* row = node.grad.data() + (b * filters + f) * patch_cols;
            for (std::size_t p = 0; p < patch_cols; ++p) {
              acc += static_cast<double>(row[p]);
            }
            db_partial[lane][f] += acc;
          }
        }
        if (need_dx) {
          detail::MapRM<S> dcmat(dcols.data(), static_cast<Eigen::Index>(k_dim),
                                 static_cast<Eigen::Index>(patch_cols));
          dcmat.noalias() = wmat.transpose() * dout;
          detail::col2im_accumulate(dcols.data(), channels, height, width, kh, kw,
                                    stride, padding, out_h, out_w,
                                    xi->grad.data() + b * channels * height * width,
                                    patch_cols, 0);
        }
      }
    });
    if (need_dw) {
      for (std::size_t i = 0; i < filters * k_dim; ++i) {
        wi->grad[i] += static_cast<S>(dw_partial[0][i] + dw_partial[1][i]);
      }
    }
    if (need_db) {
      for (std::size_t f = 0; f < filters; ++f) {
        bi->grad[f] += static_cast<S>(db_partial[0][f] + db_partial[1][f]);
      }
    }
  };

  return detail::make_result<S>({batch, filters, out_h, out_w}, std::move(out),
                                {input, weight, bias}, std::move(backward));
}

template <typename S>
Tensor<S> relu(const Tensor<S>& input) {
  std::vector<S> out(input.values().begin(), input.values().end());
  for (S& v : out) v = v > S(0) ? v : S(0);
  auto xi = input.impl();
  auto backward = [xi](detail::TensorImpl<S>& node) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (std::size_t i = 0; i < node.grad.size(); ++i) {
      if (xi->values[i] > S(0)) xi->grad[i] += node.grad[i];
    }
  };
  return detail::make_result<S>(input.shape(), std::move(out), {input},
                                std::move(backward));
}

// Max pooling without padding. Gradient routes to the window argmax; ties go
// to the first element in row-major scan order.
template <typename S>
Tensor<S> max_pool2d(const Tensor<S>& input, std::size_t kernel,
                     std::size_t stride) {
  detail::check_4d(input, "max_pool2d", "input");
  if (kernel == 0 || stride == 0) throw ValueError("max_pool2d: kernel and stride must be >= 1");
  const std::size_t batch = input.dim(0), channels = input.dim(1);
  const std::size_t height = input.dim(2), width = input.dim(3);
  if (kernel > height || kernel > width) {
    throw ShapeError("max_pool2d: kernel " + std::to_string(kernel) +
                     " exceeds input " + std::to_string(height) + "x" +
                     std::to_string(width));
  }
  const std::size_t out_h = (height - kernel) / stride + 1;
  const std::size_t out_w = (width - kernel) / stride + 1;

  std::vector<S> out(batch * channels * out_h * out_w);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const S* in = input.values().data();
  std::size_t o = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const S* plane = in + (b * channels + c) * height * width;
      const std::size_t plane_off = (b * channels + c) * height * width;
      for (std::size_t oh = 0; oh < out_h; ++oh) {
        for (std::size_t ow = 0; ow < out_w; ++ow, ++o) {
          S best = plane[oh * stride * width + ow * stride];
          std::size_t best_idx = oh * stride * width + ow * stride;
          for (std::size_t i = 0; i < kernel; ++i) {
            for (std::size_t j = 0; j < kernel; ++j) {
              const std::size_t idx = (oh * stride + i) * width + (ow * stride + j);
              if (plane[idx] > best) {
                best = plane[idx];
                best_idx = idx;
              }
            }
          }
          out[o] = best;
          (*argmax)[o] = plane_off + best_idx;
        }
      }
    }
  }

  auto xi = input.impl();
  auto backward = [xi, argmax](detail::TensorImpl<S>& node) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (std::size_t i = 0; i < node.grad.size(); ++i) {
      xi->grad[(*argmax)[i]] += node.grad[i];
    }
  };
  return detail::make_result<S>({batch, channels, out_h, out_w}, std::move(out),
                                {input}, std::move(backward));
}

// [B,C,H,W] -> [B,C], mean over the spatial extent.
template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& input) {
  detail::check_4d(input, "global_avg_pool", "input");
  const std::size_t batch = input.dim(0), channels = input.dim(1);
  const std::size_t area = input.dim(2) * input.dim(3);
  std::vector<S> out(batch * channels);
  const S* in = input.values().data();
  for (std::size_t bc = 0; bc < batch * channels; ++bc) {
    S acc = S(0);
    for (std::size_t i = 0; i < area; ++i) acc += in[bc * area + i];
    out[bc] = acc / static_cast<S>(area);
  }
  auto xi = input.impl();
  auto backward = [xi, area](detail::TensorImpl<S>& node) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (std::size_t bc = 0; bc < node.grad.size(); ++bc) {
      const S g = node.grad[bc] / static_cast<S>(area);
      for (std::size_t i = 0; i < area; ++i) xi->grad[bc * area + i] += g;
    }
  };
  return detail::make_result<S>({batch, channels}, std::move(out), {input},
                                std::move(backward));
}

// y = x * W^T + b with x:[B,in], W:[out,in], b:[out].
template <typename S>
Tensor<S> linear(const Tensor<S>& input, const Tensor<S>& weight,
                 const Tensor<S>& bias) {
  if (input.ndim() != 2 || weight.ndim() != 2) {
    throw ShapeError("linear: expected 2-d input and weight, got " +
                     shape_str(input.shape()) + " and " + shape_str(weight.shape()));
  }
  const std::size_t batch = input.dim(0), in_dim = input.dim(1);
  const std::size_t out_dim = weight.dim(0);
  if (weight.dim(1) != in_dim) {
    throw ShapeError("linear: input feature axis (" + std::to_string(in_dim) +
                     ") != weight feature axis (" + std::to_string(weight.dim(1)) + ")");
  }
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != out_dim)) {
    throw ShapeError("linear: bias axis (" + shape_str(bias.shape()) +
                     ") != output axis (" + std::to_string(out_dim) + ")");
  }

  std::vector<S> out(batch * out_dim);
  {
    detail::CMapRM<S> x(input.values().data(), static_cast<Eigen::Index>(batch),
                        static_cast<Eigen::Index>(in_dim));
    detail::CMapRM<S> w(weight.values().data(), static_cast<Eigen::Index>(out_dim),
                        static_cast<Eigen::Index>(in_dim));
    detail::MapRM<S> y(out.data(), static_cast<Eigen::Index>(batch),
                       static_cast<Eigen::Index>(out_dim));
    y.noalias() = x * w.transpose();
    if (bias.defined()) {
      Eigen::Map<const Eigen::RowVector<S, Eigen::Dynamic>> bvec(
          bias.values().data(), static_cast<Eigen::Index>(out_dim));
      y.rowwise() += bvec;
    }
  }

  auto xi = input.impl();
  auto wi = weight.impl();
  auto bi = bias.defined() ? bias.impl() : nullptr;
  auto backward = [xi, wi, bi, batch, in_dim, out_dim](detail::TensorImpl<S>& node) {
    detail::CMapRM<S> dy(node.grad.data(), static_cast<Eigen::Index>(batch),
                         static_cast<Eigen::Index>(out_dim));
    if (xi->requires_grad) {
      xi->ensure_grad();
      detail::CMapRM<S> w(wi->values.data(), static_cast<Eigen::Index>(out_dim),
                          static_cast<Eigen::Index>(in_dim));
      detail::MapRM<S> dx(xi->grad.data(), static_cast<Eigen::Index>(batch),
                          static_cast<Eigen::Index>(in_dim));
      dx.noalias() += dy * w;
    }
    if (wi->requires_grad) {
      wi->ensure_grad();
      detail::CMapRM<S> x(xi->values.data(), static_cast<Eigen::Index>(batch),
                          static_cast<Eigen::Index>(in_dim));
      detail::MapRM<S> dw(wi->grad.data(), static_cast<Eigen::Index>(out_dim),
                          static_cast<Eigen::Index>(in_dim));
      dw.noalias() += dy.transpose() * x;
    }
    if (bi && bi->requires_grad) {
      bi->ensure_grad();
      Eigen::Map<Eigen::RowVector<S, Eigen::Dynamic>> db(
          bi->grad.data(), static_cast<Eigen::Index>(out_dim));
      db += dy.colwise().sum();
    }
  };
  return detail::make_result<S>({batch, out_dim}, std::move(out),
                                {input, weight, bias}, std::move(backward));
}

// Row-wise softmax over [B,c].
template <typename S>
Tensor<S> softmax(const Tensor<S>& logits) {
  if (logits.ndim() != 2) {
    throw ShapeError("softmax: expected 2-d logits, got " + shape_str(logits.shape()));
  }
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  std::vector<S> out(batch * classes);
  const S* in = logits.values().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const S* row = in + b * classes;
    S m = row[0];
    for (std::size_t c = 1; c < classes; ++c) m = std::max(m, row[c]);
    S denom = S(0);
    for (std::size_t c = 0; c < classes; ++c) {
      out[b * classes + c] = std::exp(row[c] - m);
      denom += out[b * classes + c];
    }
    for (std::size_t c = 0; c < classes; ++c) out[b * classes + c] /= denom;
  }
  auto xi = logits.impl();
  auto probs = std::make_shared<std::vector<S>>(out);
  auto backward = [xi, probs, batch, classes](detail::TensorImpl<S>& node) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (std::size_t b = 0; b < batch; ++b) {
      const S* p = probs->data() + b * classes;
      const S* dy = node.grad.data() + b * classes;
      S dot = S(0);
      for (std::size_t c = 0; c < classes; ++c) dot += dy[c] * p[c];
      for (std::size_t c = 0; c < classes; ++c) {
        xi->grad[b * classes + c] += (dy[c] - dot) * p[c];
      }
    }
  };
  return detail::make_result<S>(logits.shape(), std::move(out), {logits},
                                std::move(backward));
}

// Mean over the batch of -log softmax(logits)[label].
template <typename S>
Tensor<S> softmax_cross_entropy(const Tensor<S>& logits,
                                const std::vector<int>& labels) {
  if (logits.ndim() != 2) {
    throw ShapeError("softmax_cross_entropy: expected 2-d logits, got " +
                     shape_str(logits.shape()));
  }
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for batch of " + std::to_string(batch));
  }
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= classes) {
      throw ValueError("softmax_cross_entropy: label " + std::to_string(labels[b]) +
                       " out of range [0," + std::to_string(classes) + ") at row " +
                       std::to_string(b));
    }
  }

  auto probs = std::make_shared<std::vector<S>>(batch * classes);
  const S* in = logits.values().data();
  S loss = S(0);
  for (std::size_t b = 0; b < batch; ++b) {
    const S* row = in + b * classes;
    S m = row[0];
    for (std::size_t c = 1; c < classes; ++c) m = std::max(m, row[c]);
    S denom = S(0);
    for (std::size_t c = 0; c < classes; ++c) {
      (*probs)[b * classes + c] = std::exp(row[c] - m);
      denom += (*probs)[b * classes + c];
    }
    for (std::size_t c = 0; c < classes; ++c) (*probs)[b * classes + c] /= denom;
    loss += std::log(denom) + m - row[labels[b]];
  }
  loss /= static_cast<S>(batch);

  auto xi = logits.impl();
  auto labels_copy = std::make_shared<std::vector<int>>(labels);
  auto backward = [xi, probs, labels_copy, batch, classes](detail::TensorImpl<S>& node) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    const S g = node.grad[0] / static_cast<S>(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t c = 0; c < classes; ++c) {
        S d = (*probs)[b * classes + c];
        if (static_cast<std::size_t>((*labels_copy)[b]) == c) d -= S(1);
        xi->grad[b * classes + c] += g * d;
      }
    }
  };
  return detail::make_result<S>({1}, {loss}, {logits}, std::move(backward));
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape " + shape_str(a.shape()) + " != " + shape_str(b.shape()));
  }
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value_at(i) + b.value_at(i);
  auto ai = a.impl();
  auto bi = b.impl();
  auto backward = [ai, bi](detail::TensorImpl<S>& node) {
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (std::size_t i = 0; i < node.grad.size(); ++i) ai->grad[i] += node.grad[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (std::size_t i = 0; i < node.grad.size(); ++i) bi->grad[i] += node.grad[i];
    }
  };
  return detail::make_result<S>(a.shape(), std::move(out), {a, b}, std::move(backward));
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shape " + shape_str(a.shape()) + " != " + shape_str(b.shape()));
  }
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value_at(i) * b.value_at(i);
  auto ai = a.impl();
  auto bi = b.impl();
  auto backward = [ai, bi](detail::TensorImpl<S>& node) {
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (std::size_t i = 0; i < node.grad.size(); ++i) {
        ai->grad[i] += node.grad[i] * bi->values[i];
      }
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (std::size_t i = 0; i < node.grad.size(); ++i) {
        bi->grad[i] += node.grad[i] * ai->values[i];
      }
    }
  };
  return detail::make_result<S>(a.shape(), std::move(out), {a, b}, std::move(backward));
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value_at(i) * factor;
  auto ai = a.impl();
  auto backward = [ai, factor](detail::TensorImpl<S>& node) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (std::size_t i = 0; i < node.grad.size(); ++i) {
      ai->grad[i] += node.grad[i] * factor;
    }
  };
  return detail::make_result<S>(a.shape(), std::move(out), {a}, std::move(backward));
}

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  S acc = S(0);
  for (std::size_t i = 0; i < a.size(); ++i) acc += a.value_at(i);
  auto ai = a.impl();
  auto backward = [ai](detail::TensorImpl<S>& node) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (std::size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += node.grad[0];
  };
  return detail::make_result<S>({1}, {acc}, {a}, std::move(backward));
}

// Same data, new shape. The copy keeps graph bookkeeping simple.
template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  }
  std::vector<S> out(a.values().begin(), a.values().end());
  auto ai = a.impl();
  auto backward = [ai](detail::TensorImpl<S>& node) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (std::size_t i = 0; i < node.grad.size(); ++i) ai->grad[i] += node.grad[i];
  };
  return detail::make_result<S>(std::move(shape), std::move(out), {a},
                                std::move(backward));
}

// Stacks equal-shaped tensors along a new leading axis. Data movement only;
// inputs must not track gradients.
template <typename S>
Tensor<S> stack(const std::vector<Tensor<S>>& items) {
  if (items.empty()) throw ValueError("stack: empty input list");
  const Shape& inner = items[0].shape();
  for (const auto& t : items) {
    if (t.shape() != inner) {
      throw ShapeError("stack: mixed shapes " + shape_str(inner) + " and " +
                       shape_str(t.shape()));
    }
    if (t.requires_grad()) {
      throw ValueError("stack: gradient-tracking inputs are not supported");
    }
  }
  Shape out_shape;
  out_shape.push_back(items.size());
  out_shape.insert(out_shape.end(), inner.begin(), inner.end());
  std::vector<S> out;
  out.reserve(items.size() * items[0].size());
  for (const auto& t : items) {
    out.insert(out.end(), t.values().begin(), t.values().end());
  }
  return Tensor<S>::from_values(std::move(out_shape), std::move(out));
}

// Grid cell coordinate: image slot in the batch plus (row, col) in the grid.
struct GridPos {
  std::size_t image;
  std::size_t row;
  std::size_t col;
  friend bool operator==(const GridPos&, const GridPos&) = default;
};

// Overlays live cell embeddings onto a detached base grid. Output [B,m,n,s]
// equals `base` except at `positions`, which take rows of `cells` [K,s].
// Backward routes gradient only into `cells` — the base never sees any.
template <typename S>
Tensor<S> assemble_grid(const Tensor<S>& base, const Tensor<S>& cells,
                        const std::vector<GridPos>& positions) {
  if (base.ndim() != 4) {
    throw ShapeError("assemble_grid: base must be [B,m,n,s], got " +
                     shape_str(base.shape()));
  }
  if (base.requires_grad()) {
    throw ValueError("assemble_grid: base grid must be detached");
  }
  const std::size_t batch = base.dim(0), rows = base.dim(1), cols = base.dim(2);
  const std::size_t embed = base.dim(3);

  std::vector<S> out(base.values().begin(), base.values().end());
  std::size_t count = 0;
  if (!positions.empty()) {
    if (!cells.defined() || cells.ndim() != 2 || cells.dim(1) != embed) {
      throw ShapeError("assemble_grid: cells must be [K," + std::to_string(embed) +
                       "], got " + (cells.defined() ? shape_str(cells.shape())
                                                    : std::string("undefined")));
    }
    if (cells.dim(0) != positions.size()) {
      throw ShapeError("assemble_grid: " + std::to_string(positions.size()) +
                       " positions for " + std::to_string(cells.dim(0)) + " cells");
    }
    for (const GridPos& p : positions) {
      if (p.image >= batch || p.row >= rows || p.col >= cols) {
        throw ValueError("assemble_grid: position (" + std::to_string(p.image) + "," +
                         std::to_string(p.row) + "," + std::to_string(p.col) +
                         ") outside grid " + shape_str(base.shape()));
      }
      const std::size_t off = ((p.image * rows + p.row) * cols + p.col) * embed;
      for (std::size_t j = 0; j < embed; ++j) {
        out[off + j] = cells.value_at(count * embed + j);
      }
      ++count;
    }
  }

  auto ci = cells.defined() ? cells.impl() : nullptr;
  auto pos = std::make_shared<std::vector<GridPos>>(positions);
  auto backward = [ci, pos, rows, cols, embed](detail::TensorImpl<S>& node) {
    if (!ci || !ci->requires_grad) return;
    ci->ensure_grad();
    for (std::size_t k = 0; k < pos->size(); ++k) {
      const GridPos& p = (*pos)[k];
      const std::size_t off = ((p.image * rows + p.row) * cols + p.col) * embed;
      for (std::size_t j = 0; j < embed; ++j) {
        ci->grad[k * embed + j] += node.grad[off + j];
      }
    }
  };
  return detail::make_result<S>(base.shape(), std::move(out), {base, cells},
                                std::move(backward));
}

// [B,m,n,s] -> [B,s,m,n]; the head consumes the grid as channel maps.
template <typename S>
Tensor<S> grid_to_nchw(const Tensor<S>& grid) {
  if (grid.ndim() != 4) {
    throw ShapeError("grid_to_nchw: expected [B,m,n,s], got " + shape_str(grid.shape()));
  }
  const std::size_t batch = grid.dim(0), rows = grid.dim(1), cols = grid.dim(2);
  const std::size_t embed = grid.dim(3);
  std::vector<S> out(grid.size());
  const S* in = grid.values().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        const S* cell = in + ((b * rows + r) * cols + c) * embed;
        for (std::size_t e = 0; e < embed; ++e) {
          out[((b * embed + e) * rows + r) * cols + c] = cell[e];
        }
      }
    }
  }
  auto gi = grid.impl();
  auto backward = [gi, batch, rows, cols, embed](detail::TensorImpl<S>& node) {
    if (!gi->requires_grad) return;
    gi->ensure_grad();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          S* cell = gi->grad.data() + ((b * rows + r) * cols + c) * embed;
          for (std::size_t e = 0; e < embed; ++e) {
            cell[e] += node.grad[((b * embed + e) * rows + r) * cols + c];
          }
        }
      }
    }
  };
  return detail::make_result<S>({batch, embed, rows, cols}, std::move(out), {grid},
                                std::move(backward));
}

template <typename S>
std::vector<int> argmax_rows(const Tensor<S>& t) {
  if (t.ndim() != 2) {
    throw ShapeError("argmax_rows: expected 2-d tensor, got " + shape_str(t.shape()));
  }
  const std::size_t batch = t.dim(0), width = t.dim(1);
  std::vector<int> out(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < width; ++c) {
      if (t.value_at(b * width + c) > t.value_at(b * width + best)) best = c;
    }
    out[b] = static_cast<int>(best);
  }
  return out;
}

}  // namespace patchgd
