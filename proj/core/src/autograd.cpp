#include "advdiff/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace advdiff::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

void require_rank(const Var& v, int rank, const char* op) {
  if (v.value().rank() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                " got " + shape_string(v.shape()));
  }
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct ConvGeometry {
  int n, cin, h, w, cout, k, stride, pad, ho, wo;
  int rows() const { return cin * k * k; }
  int cols() const { return ho * wo; }  // per image
  std::size_t in_plane() const { return static_cast<std::size_t>(cin) * h * w; }
  std::size_t out_plane() const { return static_cast<std::size_t>(cout) * ho * wo; }
};

// Scratch reused across calls on the same thread.
std::vector<double>& col_buffer(std::size_t size) {
  thread_local std::vector<double> buf;
  if (buf.size() < size) buf.resize(size);
  return buf;
}

// col[(ci*k + ky)*k + kx][oy*wo + ox] = x[ci][oy*s - p + ky][ox*s - p + kx] for one image.
void im2col(const ConvGeometry& g, const double* x, double* col) {
  const std::size_t cols = static_cast<std::size_t>(g.cols());
  for (int ci = 0; ci < g.cin; ++ci) {
    const double* plane = x + static_cast<std::size_t>(ci) * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        double* row = col + static_cast<std::size_t>((ci * g.k + ky) * g.k + kx) * cols;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          double* drow = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(drow, drow + g.wo, 0.0);
            continue;
          }
          const double* srow = plane + iy * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            drow[ox] = (ix >= 0 && ix < g.w) ? srow[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const double* col, double* dx) {
  const std::size_t cols = static_cast<std::size_t>(g.cols());
  for (int ci = 0; ci < g.cin; ++ci) {
    double* plane = dx + static_cast<std::size_t>(ci) * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const double* row = col + static_cast<std::size_t>((ci * g.k + ky) * g.k + kx) * cols;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          const double* srow = row + oy * g.wo;
          double* drow = plane + iy * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) drow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

}  // namespace

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, true, {}});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  bool needs = false;
  for (const Var& in : inputs) {
    if (in.valid()) {
      if (&in.tape() != this) throw std::invalid_argument("Var belongs to a different tape");
      needs = needs || requires_grad(in);
    }
  }
  nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : BackwardFn{}});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Tape::backward(Var output) {
  if (&output.tape() != this) throw std::invalid_argument("backward: Var from another tape");
  if (output.value().size() != 1) {
    throw std::invalid_argument("backward: output must be a single element, got " +
                                shape_string(output.shape()));
  }
  grad_buffer(output.id())[0] += 1.0;
  for (int id = output.id(); id >= 0; --id) {
    Node& node = nodes_[static_cast<std::size_t>(id)];
    if (!node.requires_grad || !node.backward || node.grad.empty()) continue;
    node.backward(*this, node.grad);
  }
}

Tensor Tape::grad(Var v) const {
  const Node& node = nodes_[static_cast<std::size_t>(v.id())];
  if (node.grad.empty()) return Tensor(node.value.shape());
  return node.grad;
}

Tensor& Tape::grad_buffer(int id) {
  Node& node = nodes_[static_cast<std::size_t>(id)];
  if (node.grad.empty()) node.grad = Tensor(node.value.shape());
  return node.grad;
}

void Tape::accumulate(int id, const Tensor& g) {
  if (!nodes_[static_cast<std::size_t>(id)].requires_grad) return;
  grad_buffer(id) += g;
}

// ---- elementwise -----------------------------------------------------------

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value() + b.value();
  const int ia = a.id(), ib = b.id();
  const Var inputs[] = {a, b};
  return a.tape().record(std::move(out), inputs, [ia, ib](Tape& t, const Tensor& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value() - b.value();
  const int ia = a.id(), ib = b.id();
  const Var inputs[] = {a, b};
  return a.tape().record(std::move(out), inputs, [ia, ib](Tape& t, const Tensor& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g * -1.0);
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const int ia = a.id(), ib = b.id();
  const Var inputs[] = {a, b};
  return a.tape().record(std::move(out), inputs, [ia, ib](Tape& t, const Tensor& g) {
    const Tensor& va = t.value(ia);
    const Tensor& vb = t.value(ib);
    Tensor ga = g, gb = g;
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] *= vb[i];
      gb[i] *= va[i];
    }
    t.accumulate(ia, ga);
    t.accumulate(ib, gb);
  });
}

Var scale(Var a, double s) {
  const int ia = a.id();
  const Var inputs[] = {a};
  return a.tape().record(a.value() * s, inputs,
                         [ia, s](Tape& t, const Tensor& g) { t.accumulate(ia, g * s); });
}

Var silu(Var x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = v * sigmoid_scalar(v);
  const int ix = x.id();
  const Var inputs[] = {x};
  return x.tape().record(std::move(out), inputs, [ix](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(ix);
    Tensor gx = g;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = sigmoid_scalar(xv[i]);
      gx[i] *= s * (1.0 + xv[i] * (1.0 - s));
    }
    t.accumulate(ix, gx);
  });
}

Var sigmoid(Var x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = sigmoid_scalar(v);
  const int ix = x.id();
  Tape& tape = x.tape();
  const int iy = static_cast<int>(tape.size());
  const Var inputs[] = {x};
  return tape.record(std::move(out), inputs, [ix, iy](Tape& t, const Tensor& g) {
    const Tensor& yv = t.value(iy);
    Tensor gx = g;
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] *= yv[i] * (1.0 - yv[i]);
    t.accumulate(ix, gx);
  });
}

// ---- shape -----------------------------------------------------------------

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const int ix = x.id();
  const Shape in_shape = x.shape();
  const Var inputs[] = {x};
  return x.tape().record(std::move(out), inputs, [ix, in_shape](Tape& t, const Tensor& g) {
    t.accumulate(ix, g.reshaped(in_shape));
  });
}

Var concat_channels(Var a, Var b) {
  require_rank(a, 4, "concat_channels");
  require_rank(b, 4, "concat_channels");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3]) {
    throw std::invalid_argument("concat_channels: incompatible shapes " + shape_string(sa) +
                                " and " + shape_string(sb));
  }
  const int n = sa[0], ca = sa[1], cb = sb[1];
  const std::size_t hw = static_cast<std::size_t>(sa[2]) * sa[3];
  Tensor out({n, ca + cb, sa[2], sa[3]});
  for (int i = 0; i < n; ++i) {
    std::copy_n(a.value().ptr() + i * ca * hw, ca * hw, out.ptr() + i * (ca + cb) * hw);
    std::copy_n(b.value().ptr() + i * cb * hw, cb * hw, out.ptr() + (i * (ca + cb) + ca) * hw);
  }
  const int ia = a.id(), ib = b.id();
  const Shape shape_a = sa, shape_b = sb;
  const Var inputs[] = {a, b};
  return a.tape().record(std::move(out), inputs,
                         [=](Tape& t, const Tensor& g) {
                           Tensor ga(shape_a), gb(shape_b);
                           for (int i = 0; i < n; ++i) {
                             std::copy_n(g.ptr() + i * (ca + cb) * hw, ca * hw, ga.ptr() + i * ca * hw);
                             std::copy_n(g.ptr() + (i * (ca + cb) + ca) * hw, cb * hw,
                                         gb.ptr() + i * cb * hw);
                           }
                           t.accumulate(ia, ga);
                           t.accumulate(ib, gb);
                         });
}

Var upsample2x(Var x) {
  require_rank(x, 4, "upsample2x");
  const Shape s = x.shape();
  const int planes = s[0] * s[1], h = s[2], w = s[3];
  Tensor out({s[0], s[1], 2 * h, 2 * w});
  const double* src = x.value().ptr();
  double* dst = out.ptr();
  for (int p = 0; p < planes; ++p) {
    for (int y = 0; y < 2 * h; ++y) {
      const double* srow = src + (static_cast<std::size_t>(p) * h + y / 2) * w;
      double* drow = dst + (static_cast<std::size_t>(p) * 2 * h + y) * 2 * w;
      for (int xx = 0; xx < 2 * w; ++xx) drow[xx] = srow[xx / 2];
    }
  }
  const int ix = x.id();
  const Var inputs[] = {x};
  return x.tape().record(std::move(out), inputs, [ix, s, planes, h, w](Tape& t, const Tensor& g) {
    Tensor gx(s);
    for (int p = 0; p < planes; ++p) {
      for (int y = 0; y < 2 * h; ++y) {
        const double* grow = g.ptr() + (static_cast<std::size_t>(p) * 2 * h + y) * 2 * w;
        double* drow = gx.ptr() + (static_cast<std::size_t>(p) * h + y / 2) * w;
        for (int xx = 0; xx < 2 * w; ++xx) drow[xx / 2] += grow[xx];
      }
    }
    t.accumulate(ix, gx);
  });
}

namespace {

// out[i] = in[source[i]]; the backward pass scatters back through the same map.
Var gather(Var x, Shape out_shape, std::vector<std::size_t> source) {
  Tensor out(std::move(out_shape));
  const double* src = x.value().ptr();
  for (std::size_t i = 0; i < source.size(); ++i) out[i] = src[source[i]];
  const int ix = x.id();
  const Shape in_shape = x.shape();
  const Var inputs[] = {x};
  return x.tape().record(std::move(out), inputs,
                         [ix, in_shape, source = std::move(source)](Tape& t, const Tensor& g) {
                           Tensor gx(in_shape);
                           for (std::size_t i = 0; i < source.size(); ++i) gx[source[i]] += g[i];
                           t.accumulate(ix, gx);
                         });
}

}  // namespace

Var space_to_depth2(Var x) {
  require_rank(x, 4, "space_to_depth2");
  const Shape s = x.shape();
  const int n = s[0], c = s[1], h = s[2], w = s[3];
  if (h % 2 != 0 || w % 2 != 0) throw std::invalid_argument("space_to_depth2: odd spatial size");
  const int ho = h / 2, wo = w / 2;
  std::vector<std::size_t> source(x.value().size());
  std::size_t i = 0;
  for (int b = 0; b < n; ++b)
    for (int ci = 0; ci < c; ++ci)
      for (int d = 0; d < 4; ++d)
        for (int y = 0; y < ho; ++y)
          for (int xx = 0; xx < wo; ++xx)
            source[i++] = ((static_cast<std::size_t>(b) * c + ci) * h + 2 * y + d / 2) * w + 2 * xx + d % 2;
  return gather(x, {n, c * 4, ho, wo}, std::move(source));
}

Var depth_to_space2(Var x) {
  require_rank(x, 4, "depth_to_space2");
  const Shape s = x.shape();
  const int n = s[0], c4 = s[1], h = s[2], w = s[3];
  if (c4 % 4 != 0) throw std::invalid_argument("depth_to_space2: channels not divisible by 4");
  const int c = c4 / 4;
  std::vector<std::size_t> source(x.value().size());
  std::size_t i = 0;
  for (int b = 0; b < n; ++b)
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx)
          source[i++] = ((static_cast<std::size_t>(b) * c4 + ci * 4 + (y % 2) * 2 + xx % 2) * h + y / 2) * w + xx / 2;
  return gather(x, {n, c, 2 * h, 2 * w}, std::move(source));
}

Var global_avg_pool(Var x) {
  require_rank(x, 4, "global_avg_pool");
  const Shape s = x.shape();
  const int planes = s[0] * s[1];
  const int hw = s[2] * s[3];
  Tensor out({s[0], s[1]});
  for (int p = 0; p < planes; ++p) {
    double acc = 0.0;
    const double* src = x.value().ptr() + static_cast<std::size_t>(p) * hw;
    for (int i = 0; i < hw; ++i) acc += src[i];
    out[static_cast<std::size_t>(p)] = acc / hw;
  }
  const int ix = x.id();
  const Var inputs[] = {x};
  return x.tape().record(std::move(out), inputs, [ix, s, planes, hw](Tape& t, const Tensor& g) {
    Tensor gx(s);
    for (int p = 0; p < planes; ++p) {
      const double v = g[static_cast<std::size_t>(p)] / hw;
      std::fill_n(gx.ptr() + static_cast<std::size_t>(p) * hw, hw, v);
    }
    t.accumulate(ix, gx);
  });
}

// ---- linear algebra --------------------------------------------------------

Var conv2d(Var x, Var w, Var b, int stride, int pad) {
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (ws[1] != xs[1] || ws[2] != ws[3]) {
    throw std::invalid_argument("conv2d: weight " + shape_string(ws) + " incompatible with input " +
                                shape_string(xs));
  }
  if (b.valid() && (b.value().rank() != 1 || b.shape()[0] != ws[0])) {
    throw std::invalid_argument("conv2d: bias shape " + shape_string(b.shape()));
  }
  ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], stride, pad, 0, 0};
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;
  if (g.ho <= 0 || g.wo <= 0) throw std::invalid_argument("conv2d: empty output");

  const std::size_t csize = static_cast<std::size_t>(g.rows()) * g.cols();
  double* col = col_buffer(csize).data();
  ConstMatMap wmat(w.value().ptr(), g.cout, g.rows());
  ConstMatMap colmat(col, g.rows(), g.cols());
  Tensor out({g.n, g.cout, g.ho, g.wo});
  for (int n = 0; n < g.n; ++n) {
    im2col(g, x.value().ptr() + n * g.in_plane(), col);
    MatMap omat(out.ptr() + n * g.out_plane(), g.cout, g.cols());
    omat.noalias() = wmat * colmat;
    if (b.valid()) {
      for (int co = 0; co < g.cout; ++co) omat.row(co).array() += b.value()[static_cast<std::size_t>(co)];
    }
  }

  const int ix = x.id(), iw = w.id(), ib = b.valid() ? b.id() : -1;
  const Var inputs[] = {x, w, b};
  Tape& tape = x.tape();
  return tape.record(std::move(out), inputs, [g, ix, iw, ib](Tape& t, const Tensor& gout) {
    const Tensor& wv = t.value(iw);
    const Tensor& xv = t.value(ix);
    const bool want_w = t.needs_grad(iw), want_x = t.needs_grad(ix);
    if (ib >= 0) {
      Tensor gb({g.cout});
      // Plain loops: Eigen's vectorised sum peels by address, which makes the
      // rounding depend on where the buffer was allocated.
      for (int n = 0; n < g.n; ++n) {
        const double* row = gout.ptr() + n * g.out_plane();
        for (int co = 0; co < g.cout; ++co, row += g.cols())
          gb[static_cast<std::size_t>(co)] += std::accumulate(row, row + g.cols(), 0.0);
      }
      t.accumulate(ib, gb);
    }
    if (!want_w && !want_x) return;
    const std::size_t csize = static_cast<std::size_t>(g.rows()) * g.cols();
    double* col = col_buffer(csize).data();
    ConstMatMap wmat(wv.ptr(), g.cout, g.rows());
    Tensor gw(want_w ? wv.shape() : Shape{0});
    Tensor gx(want_x ? xv.shape() : Shape{0});
    for (int n = 0; n < g.n; ++n) {
      ConstMatMap gmat(gout.ptr() + n * g.out_plane(), g.cout, g.cols());
      if (want_w) {
        im2col(g, xv.ptr() + n * g.in_plane(), col);
        MatMap(gw.ptr(), g.cout, g.rows()).noalias() += gmat * ConstMatMap(col, g.rows(), g.cols()).transpose();
      }
      if (want_x) {
        MatMap gcol(col, g.rows(), g.cols());
        gcol.noalias() = wmat.transpose() * gmat;
        col2im_add(g, col, gx.ptr() + n * g.in_plane());
      }
    }
    if (want_w) t.accumulate(iw, gw);
    if (want_x) t.accumulate(ix, gx);
  });
}

Var linear(Var x, Var w, Var b) {
  require_rank(x, 2, "linear input");
  require_rank(w, 2, "linear weight");
  const int n = x.shape()[0], in = x.shape()[1], out_dim = w.shape()[0];
  if (w.shape()[1] != in) {
    throw std::invalid_argument("linear: weight " + shape_string(w.shape()) + " vs input " +
                                shape_string(x.shape()));
  }
  Tensor out({n, out_dim});
  MatMap omat(out.ptr(), n, out_dim);
  omat.noalias() = ConstMatMap(x.value().ptr(), n, in) *
                   ConstMatMap(w.value().ptr(), out_dim, in).transpose();
  if (b.valid()) {
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < out_dim; ++j) omat(i, j) += b.value()[static_cast<std::size_t>(j)];
  }
  const int ix = x.id(), iw = w.id(), ib = b.valid() ? b.id() : -1;
  const Var inputs[] = {x, w, b};
  return x.tape().record(std::move(out), inputs, [=](Tape& t, const Tensor& g) {
    ConstMatMap gmat(g.ptr(), n, out_dim);
    const Tensor& xv = t.value(ix);
    const Tensor& wv = t.value(iw);
    Tensor gx(xv.shape());
    MatMap(gx.ptr(), n, in).noalias() = gmat * ConstMatMap(wv.ptr(), out_dim, in);
    t.accumulate(ix, gx);
    Tensor gw(wv.shape());
    MatMap(gw.ptr(), out_dim, in).noalias() = gmat.transpose() * ConstMatMap(xv.ptr(), n, in);
    t.accumulate(iw, gw);
    if (ib >= 0) {
      Tensor gb({out_dim});
      for (int j = 0; j < out_dim; ++j) gb[static_cast<std::size_t>(j)] = gmat.col(j).sum();
      t.accumulate(ib, gb);
    }
  });
}

Var add_channel_offset(Var x, Var e) {
  require_rank(x, 4, "add_channel_offset");
  require_rank(e, 2, "add_channel_offset offset");
  const Shape s = x.shape();
  if (e.shape()[0] != s[0] || e.shape()[1] != s[1]) {
    throw std::invalid_argument("add_channel_offset: offset " + shape_string(e.shape()) +
                                " vs " + shape_string(s));
  }
  const int planes = s[0] * s[1];
  const int hw = s[2] * s[3];
  Tensor out = x.value();
  for (int p = 0; p < planes; ++p) {
    const double v = e.value()[static_cast<std::size_t>(p)];
    double* dst = out.ptr() + static_cast<std::size_t>(p) * hw;
    for (int i = 0; i < hw; ++i) dst[i] += v;
  }
  const int ix = x.id(), ie = e.id();
  const Shape es = e.shape();
  const Var inputs[] = {x, e};
  return x.tape().record(std::move(out), inputs, [=](Tape& t, const Tensor& g) {
    t.accumulate(ix, g);
    Tensor ge(es);
    for (int p = 0; p < planes; ++p) {
      double acc = 0.0;
      const double* src = g.ptr() + static_cast<std::size_t>(p) * hw;
      for (int i = 0; i < hw; ++i) acc += src[i];
      ge[static_cast<std::size_t>(p)] = acc;
    }
    t.accumulate(ie, ge);
  });
}

Var l2_normalize_rows(Var x) {
  require_rank(x, 2, "l2_normalize_rows");
  const int n = x.shape()[0], d = x.shape()[1];
  Tensor out = x.value();
  std::vector<double> norms(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double ss = 0.0;
    for (int j = 0; j < d; ++j) ss += out[static_cast<std::size_t>(i * d + j)] * out[static_cast<std::size_t>(i * d + j)];
    const double norm = std::sqrt(ss + 1e-24);
    norms[static_cast<std::size_t>(i)] = norm;
    for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(i * d + j)] /= norm;
  }
  const int ix = x.id();
  const Var inputs[] = {x};
  Tensor y = out;
  return x.tape().record(std::move(out), inputs, [=](Tape& t, const Tensor& g) {
    Tensor gx({n, d});
    for (int i = 0; i < n; ++i) {
      double dot = 0.0;
      for (int j = 0; j < d; ++j) dot += y[static_cast<std::size_t>(i * d + j)] * g[static_cast<std::size_t>(i * d + j)];
      const double inv = 1.0 / norms[static_cast<std::size_t>(i)];
      for (int j = 0; j < d; ++j) {
        const std::size_t k = static_cast<std::size_t>(i * d + j);
        gx[k] = (g[k] - y[k] * dot) * inv;
      }
    }
    t.accumulate(ix, gx);
  });
}

Var row_dot(Var a, Var b) {
  require_rank(a, 2, "row_dot");
  require_same_shape(a.value(), b.value(), "row_dot");
  const int n = a.shape()[0], d = a.shape()[1];
  Tensor out({n});
  for (int i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int j = 0; j < d; ++j) acc += a.value()[static_cast<std::size_t>(i * d + j)] * b.value()[static_cast<std::size_t>(i * d + j)];
    out[static_cast<std::size_t>(i)] = acc;
  }
  const int ia = a.id(), ib = b.id();
  const Var inputs[] = {a, b};
  return a.tape().record(std::move(out), inputs, [=](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(ia);
    const Tensor& bv = t.value(ib);
    Tensor ga(av.shape()), gb(bv.shape());
    for (int i = 0; i < n; ++i) {
      const double gi = g[static_cast<std::size_t>(i)];
      for (int j = 0; j < d; ++j) {
        const std::size_t k = static_cast<std::size_t>(i * d + j);
        ga[k] = gi * bv[k];
        gb[k] = gi * av[k];
      }
    }
    t.accumulate(ia, ga);
    t.accumulate(ib, gb);
  });
}

// ---- reductions / losses ---------------------------------------------------

Var sum(Var x) {
  const int ix = x.id();
  const Shape s = x.shape();
  const Var inputs[] = {x};
  return x.tape().record(Tensor({1}, {x.value().sum()}), inputs,
                         [ix, s](Tape& t, const Tensor& g) { t.accumulate(ix, Tensor(s, g[0])); });
}

Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  return scale(sum(x), 1.0 / n);
}

Var mse(Var a, Var b) {
  Var d = sub(a, b);
  return mean(mul(d, d));
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const int n = logits.shape()[0], k = logits.shape()[1];
  if (static_cast<int>(labels.size()) != n) throw std::invalid_argument("cross_entropy: label count");
  Tensor probs = logits.value();
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    double* row = probs.ptr() + static_cast<std::size_t>(i) * k;
    const double m = *std::max_element(row, row + k);
    double z = 0.0;
    for (int j = 0; j < k; ++j) z += std::exp(row[j] - m);
    const int label = labels[static_cast<std::size_t>(i)];
    if (label < 0 || label >= k) throw std::invalid_argument("cross_entropy: label out of range");
    loss += -(row[label] - m - std::log(z));
    for (int j = 0; j < k; ++j) row[j] = std::exp(row[j] - m) / z;
  }
  const int il = logits.id();
  std::vector<int> lab(labels.begin(), labels.end());
  const Var inputs[] = {logits};
  return logits.tape().record(Tensor({1}, {loss / n}), inputs,
                              [=](Tape& t, const Tensor& g) {
                                Tensor gl = probs;
                                for (int i = 0; i < n; ++i) gl[static_cast<std::size_t>(i * k + lab[static_cast<std::size_t>(i)])] -= 1.0;
                                gl *= g[0] / n;
                                t.accumulate(il, gl);
                              });
}

}  // namespace advdiff::ag
