#pragma once

// Reverse-mode computation tape for small detection networks.
//
// Nodes are created in topological order by the op builders below; backward()
// seeds a scalar loss and replays the recorded closures in reverse, then
// flushes leaf gradients into the Registry in registration order. A parameter
// used by several branches maps to a single node, so fan-out gradients
// accumulate naturally. All math is double precision.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "codetect/box.hpp"
#include "codetect/errors.hpp"
#include "codetect/registry.hpp"
#include "codetect/tensor.hpp"

namespace codetect {

struct Value {
  int id = -1;
  bool ok() const { return id >= 0; }
};

class Tape {
 public:
  enum class Padding { same, valid };

  explicit Tape(Registry& reg) : reg_(&reg) {}

  // ---- leaves ----

  Value constant(Tensor t) { return push(std::move(t.shape), std::move(t.v), nullptr); }

  Value constant(std::vector<int> shape, std::vector<double> v) {
    if (static_cast<int>(v.size()) != shape_numel(shape))
      throw invalid_input("tape constant: data size does not match shape");
    return push(std::move(shape), std::move(v), nullptr);
  }

  Value scalar_constant(double x) { return constant({1}, {x}); }

  // Leaf bound to a registry entry; memoized, so two uses of the same entry
  // share one node and its gradient accumulates from both consumers.
  Value param(const std::string& name) {
    const int ridx = reg_->find(name);
    if (ridx < 0) throw invalid_input("tape param: unknown entry '" + name + "'");
    auto it = param_nodes_.find(ridx);
    if (it != param_nodes_.end()) return Value{it->second};
    const auto& e = reg_->entry(ridx);
    Value v = push(e.shape, e.value, nullptr);
    param_nodes_.emplace(ridx, v.id);
    return v;
  }

  // ---- access ----

  const std::vector<double>& val(Value v) const { return node(v).val; }
  const std::vector<double>& grad(Value v) const { return node(v).grad; }
  const std::vector<int>& shape(Value v) const { return node(v).shape; }

  // id-based accessors used by backward closures and fused ops
  const std::vector<double>& val_at(int id) const { return nodes_[static_cast<std::size_t>(id)].val; }
  std::vector<double>& grad_at(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }

  double scalar(Value v) const {
    const auto& n = node(v);
    if (n.val.size() != 1) throw invalid_input("tape scalar: node is not a scalar");
    return n.val[0];
  }

  Registry& registry() { return *reg_; }

  // ---- layers ----

  // x: (C,H,W), w: (O,C,kh,kw), b: (O). Stride 1. Same padding keeps H,W.
  Value conv2d(Value xv, Value wv, Value bv, Padding pad = Padding::same) {
    const auto& xs = shape(xv);
    const auto& ws = shape(wv);
    const auto& bs = shape(bv);
    if (xs.size() != 3 || ws.size() != 4 || bs.size() != 1)
      throw invalid_input("conv2d: expected x(C,H,W), w(O,C,kh,kw), b(O)");
    const int C = xs[0], H = xs[1], W = xs[2];
    const int O = ws[0], kh = ws[2], kw = ws[3];
    if (ws[1] != C) throw invalid_input("conv2d: channel mismatch");
    if (bs[0] != O) throw invalid_input("conv2d: bias size mismatch");
    const int ph = pad == Padding::same ? kh / 2 : 0;
    const int pw = pad == Padding::same ? kw / 2 : 0;
    const int OH = H + 2 * ph - kh + 1;
    const int OW = W + 2 * pw - kw + 1;
    if (OH <= 0 || OW <= 0) throw invalid_input("conv2d: kernel larger than padded input");

    const int Hp = H + 2 * ph, Wp = W + 2 * pw;
    auto xpad = std::make_shared<std::vector<double>>(static_cast<std::size_t>(C) * Hp * Wp, 0.0);
    {
      const auto& x = val(xv);
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y) {
          const double* src = &x[(static_cast<std::size_t>(c) * H + y) * W];
          double* dst = &(*xpad)[(static_cast<std::size_t>(c) * Hp + (y + ph)) * Wp + pw];
          std::copy(src, src + W, dst);
        }
    }

    std::vector<double> out(static_cast<std::size_t>(O) * OH * OW, 0.0);
    {
      const auto& w = val(wv);
      const auto& b = val(bv);
      for (int o = 0; o < O; ++o) {
        double* ob = &out[static_cast<std::size_t>(o) * OH * OW];
        for (int i = 0; i < OH * OW; ++i) ob[i] = b[static_cast<std::size_t>(o)];
        for (int c = 0; c < C; ++c)
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
              const double wgt = w[((static_cast<std::size_t>(o) * C + c) * kh + ky) * kw + kx];
              for (int y = 0; y < OH; ++y) {
                const double* rx =
                    &(*xpad)[(static_cast<std::size_t>(c) * Hp + (y + ky)) * Wp + kx];
                double* ry = &ob[static_cast<std::size_t>(y) * OW];
                for (int x = 0; x < OW; ++x) ry[x] += wgt * rx[x];
              }
            }
      }
    }

    const int xid = xv.id, wid = wv.id, bid = bv.id;
    return push({O, OH, OW}, std::move(out),
                [=](Tape& t, int self) {
      const auto& g = t.cgrad_at(self);
      auto& dx = t.grad_at(xid);
      auto& dw = t.grad_at(wid);
      auto& db = t.grad_at(bid);
      const auto& w = t.val_at(wid);
      std::vector<double> dxpad(static_cast<std::size_t>(C) * Hp * Wp, 0.0);
      for (int o = 0; o < O; ++o) {
        const double* go = &g[static_cast<std::size_t>(o) * OH * OW];
        double acc = 0.0;
        for (int i = 0; i < OH * OW; ++i) acc += go[i];
        db[static_cast<std::size_t>(o)] += acc;
        for (int c = 0; c < C; ++c)
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
              const std::size_t widx =
                  ((static_cast<std::size_t>(o) * C + c) * kh + ky) * kw + kx;
              const double wgt = w[widx];
              double wacc = 0.0;
              for (int y = 0; y < OH; ++y) {
                const double* rx =
                    &(*xpad)[(static_cast<std::size_t>(c) * Hp + (y + ky)) * Wp + kx];
                double* rdx = &dxpad[(static_cast<std::size_t>(c) * Hp + (y + ky)) * Wp + kx];
                const double* gy = &go[static_cast<std::size_t>(y) * OW];
                for (int x = 0; x < OW; ++x) {
                  wacc += gy[x] * rx[x];
                  rdx[x] += gy[x] * wgt;
                }
              }
              dw[widx] += wacc;
            }
      }
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y) {
          const double* src = &dxpad[(static_cast<std::size_t>(c) * Hp + (y + ph)) * Wp + pw];
          double* dst = &dx[(static_cast<std::size_t>(c) * H + y) * W];
          for (int x = 0; x < W; ++x) dst[x] += src[x];
        }
    });
  }

  Value relu(Value xv) {
    const auto& x = val(xv);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
    const int xid = xv.id;
    return push(shape(xv), std::move(out), [xid](Tape& t, int self) {
      const auto& g = t.cgrad_at(self);
      auto& dx = t.grad_at(xid);
      const auto& x = t.val_at(xid);
      for (std::size_t i = 0; i < x.size(); ++i)
        if (x[i] > 0.0) dx[i] += g[i];
    });
  }

  // 2x2 max pooling with stride 2; trailing odd row/column is dropped.
  Value max_pool2(Value xv) {
    const auto& xs = shape(xv);
    if (xs.size() != 3) throw invalid_input("max_pool2: expected (C,H,W)");
    const int C = xs[0], H = xs[1], W = xs[2];
    const int OH = H / 2, OW = W / 2;
    if (OH == 0 || OW == 0) throw invalid_input("max_pool2: input too small");
    const auto& x = val(xv);
    std::vector<double> out(static_cast<std::size_t>(C) * OH * OW);
    auto arg = std::make_shared<std::vector<int>>(out.size());
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < OH; ++y)
        for (int xo = 0; xo < OW; ++xo) {
          double best = -1e300;
          int best_i = -1;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const int ii = (c * H + 2 * y + dy) * W + 2 * xo + dx;
              if (x[static_cast<std::size_t>(ii)] > best) {
                best = x[static_cast<std::size_t>(ii)];
                best_i = ii;
              }
            }
          const int oi = (c * OH + y) * OW + xo;
          out[static_cast<std::size_t>(oi)] = best;
          (*arg)[static_cast<std::size_t>(oi)] = best_i;
        }
    const int xid = xv.id;
    return push({C, OH, OW}, std::move(out), [xid, arg](Tape& t, int self) {
      const auto& g = t.cgrad_at(self);
      auto& dx = t.grad_at(xid);
      for (std::size_t i = 0; i < g.size(); ++i)
        dx[static_cast<std::size_t>((*arg)[i])] += g[i];
    });
  }

  // x: (N,D), w: (D,M), b: (M) -> (N,M).
  Value fully_connected(Value xv, Value wv, Value bv) {
    const auto& xs = shape(xv);
    const auto& ws = shape(wv);
    const auto& bs = shape(bv);
    if (xs.size() != 2 || ws.size() != 2 || bs.size() != 1)
      throw invalid_input("fully_connected: expected x(N,D), w(D,M), b(M)");
    const int N = xs[0], D = xs[1], M = ws[1];
    if (ws[0] != D || bs[0] != M) throw invalid_input("fully_connected: shape mismatch");
    const auto& x = val(xv);
    const auto& w = val(wv);
    const auto& b = val(bv);
    std::vector<double> out(static_cast<std::size_t>(N) * M);
    for (int n = 0; n < N; ++n) {
      double* on = &out[static_cast<std::size_t>(n) * M];
      for (int m = 0; m < M; ++m) on[m] = b[static_cast<std::size_t>(m)];
      for (int d = 0; d < D; ++d) {
        const double xnd = x[static_cast<std::size_t>(n) * D + d];
        if (xnd == 0.0) continue;
        const double* wr = &w[static_cast<std::size_t>(d) * M];
        for (int m = 0; m < M; ++m) on[m] += xnd * wr[m];
      }
    }
    const int xid = xv.id, wid = wv.id, bid = bv.id;
    return push({N, M}, std::move(out), [=](Tape& t, int self) {
      const auto& g = t.cgrad_at(self);
      auto& dx = t.grad_at(xid);
      auto& dw = t.grad_at(wid);
      auto& db = t.grad_at(bid);
      const auto& x = t.val_at(xid);
      const auto& w = t.val_at(wid);
      for (int n = 0; n < N; ++n) {
        const double* gn = &g[static_cast<std::size_t>(n) * M];
        for (int m = 0; m < M; ++m) db[static_cast<std::size_t>(m)] += gn[m];
        for (int d = 0; d < D; ++d) {
          const double* wr = &w[static_cast<std::size_t>(d) * M];
          double* dwr = &dw[static_cast<std::size_t>(d) * M];
          const double xnd = x[static_cast<std::size_t>(n) * D + d];
          double acc = 0.0;
          for (int m = 0; m < M; ++m) {
            acc += gn[m] * wr[m];
            dwr[m] += gn[m] * xnd;
          }
          dx[static_cast<std::size_t>(n) * D + d] += acc;
        }
      }
    });
  }

  // Rank-2 input: axis 1 normalizes each row, axis 0 each column.
  // Rank-1 input with axis 0 normalizes the whole vector.
  Value softmax(Value xv, int axis) {
    const auto& xs = shape(xv);
    int N, M;
    if (xs.size() == 1) {
      if (axis != 0) throw invalid_input("softmax: rank-1 input takes axis 0");
      N = 1;
      M = xs[0];
      axis = 1;
    } else if (xs.size() == 2) {
      N = xs[0];
      M = xs[1];
    } else {
      throw invalid_input("softmax: expected rank-1 or rank-2 input");
    }
    if (axis != 0 && axis != 1) throw invalid_input("softmax: axis must be 0 or 1");

    const auto& x = val(xv);
    std::vector<double> out(x.size());
    const int slices = axis == 1 ? N : M;
    const int len = axis == 1 ? M : N;
    const int stride = axis == 1 ? 1 : M;
    for (int s = 0; s < slices; ++s) {
      const std::size_t base =
          axis == 1 ? static_cast<std::size_t>(s) * M : static_cast<std::size_t>(s);
      double mx = -1e300;
      for (int k = 0; k < len; ++k)
        mx = std::max(mx, x[base + static_cast<std::size_t>(k) * stride]);
      double z = 0.0;
      for (int k = 0; k < len; ++k) {
        const double e = std::exp(x[base + static_cast<std::size_t>(k) * stride] - mx);
        out[base + static_cast<std::size_t>(k) * stride] = e;
        z += e;
      }
      for (int k = 0; k < len; ++k) out[base + static_cast<std::size_t>(k) * stride] /= z;
    }
    const int xid = xv.id;
    return push(shape(xv), std::move(out),
                [xid, slices, len, stride, M, axis](Tape& t, int self) {
      const auto& sv = t.val_at(self);
      const auto& g = t.cgrad_at(self);
      auto& dx = t.grad_at(xid);
      for (int s = 0; s < slices; ++s) {
        const std::size_t base =
            axis == 1 ? static_cast<std::size_t>(s) * M : static_cast<std::size_t>(s);
        double dot = 0.0;
        for (int k = 0; k < len; ++k) {
          const std::size_t i = base + static_cast<std::size_t>(k) * stride;
          dot += g[i] * sv[i];
        }
        for (int k = 0; k < len; ++k) {
          const std::size_t i = base + static_cast<std::size_t>(k) * stride;
          dx[i] += sv[i] * (g[i] - dot);
        }
      }
    });
  }

  Value sigmoid(Value xv) {
    const auto& x = val(xv);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
      out[i] = x[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-x[i]))
                           : std::exp(x[i]) / (1.0 + std::exp(x[i]));
    const int xid = xv.id;
    return push(shape(xv), std::move(out), [xid](Tape& t, int self) {
      const auto& sv = t.val_at(self);
      const auto& g = t.cgrad_at(self);
      auto& dx = t.grad_at(xid);
      for (std::size_t i = 0; i < sv.size(); ++i) dx[i] += g[i] * sv[i] * (1.0 - sv[i]);
    });
  }

  // Max pooling of one box into a fixed bins_h x bins_w grid per channel.
  // Box coordinates are image-space and mapped by spatial_scale. An empty
  // sub-window falls back to the nearest valid cell.
  Value roi_pool(Value fv, const Box& box, int bins_h, int bins_w, double spatial_scale) {
    Value rows = roi_pool_rows(fv, std::span<const Box>(&box, 1), bins_h, bins_w, spatial_scale);
    const auto& fs = shape(fv);
    const int C = fs[0];
    std::vector<double> out = val(rows);
    const int rid = rows.id;
    return push({C, bins_h, bins_w}, std::move(out), [rid](Tape& t, int self) {
      const auto& g = t.cgrad_at(self);
      auto& dr = t.grad_at(rid);
      for (std::size_t i = 0; i < g.size(); ++i) dr[i] += g[i];
    });
  }

  // Pool many boxes at once into a (B, C*bins_h*bins_w) matrix.
  Value roi_pool_rows(Value fv, std::span<const Box> boxes, int bins_h, int bins_w,
                      double spatial_scale) {
    const auto& fs = shape(fv);
    if (fs.size() != 3) throw invalid_input("roi_pool: expected feature map (C,H,W)");
    if (bins_h <= 0 || bins_w <= 0) throw invalid_input("roi_pool: bins must be positive");
    const int C = fs[0], H = fs[1], W = fs[2];
    const int B = static_cast<int>(boxes.size());
    const int D = C * bins_h * bins_w;
    const auto& f = val(fv);
    std::vector<double> out(static_cast<std::size_t>(B) * D);
    auto arg = std::make_shared<std::vector<int>>(out.size());

    for (int b = 0; b < B; ++b) {
      const Box& bx = boxes[static_cast<std::size_t>(b)];
      check_box(bx, "roi_pool");
      const double fx1 = bx.x1 * spatial_scale, fx2 = bx.x2 * spatial_scale;
      const double fy1 = bx.y1 * spatial_scale, fy2 = bx.y2 * spatial_scale;
      if (fx2 <= 0.0 || fy2 <= 0.0 || fx1 >= static_cast<double>(W) ||
          fy1 >= static_cast<double>(H))
        throw invalid_input("roi_pool: box fully outside feature map");
      for (int by = 0; by < bins_h; ++by)
        for (int bxi = 0; bxi < bins_w; ++bxi) {
          const double wy0 = fy1 + (fy2 - fy1) * by / bins_h;
          const double wy1 = fy1 + (fy2 - fy1) * (by + 1) / bins_h;
          const double wx0 = fx1 + (fx2 - fx1) * bxi / bins_w;
          const double wx1 = fx1 + (fx2 - fx1) * (bxi + 1) / bins_w;
          const auto [y0, y1] = bin_window(wy0, wy1, H);
          const auto [x0, x1] = bin_window(wx0, wx1, W);
          for (int c = 0; c < C; ++c) {
            double best = -1e300;
            int best_i = -1;
            for (int y = y0; y < y1; ++y)
              for (int x = x0; x < x1; ++x) {
                const int ii = (c * H + y) * W + x;
                if (f[static_cast<std::size_t>(ii)] > best) {
                  best = f[static_cast<std::size_t>(ii)];
                  best_i = ii;
                }
              }
            const std::size_t oi = static_cast<std::size_t>(b) * D +
                                   static_cast<std::size_t>(c) * bins_h * bins_w +
                                   static_cast<std::size_t>(by) * bins_w + bxi;
            out[oi] = best;
            (*arg)[oi] = best_i;
          }
        }
    }
    const int fid = fv.id;
    return push({B, D}, std::move(out), [fid, arg](Tape& t, int self) {
      const auto& g = t.cgrad_at(self);
      auto& df = t.grad_at(fid);
      for (std::size_t i = 0; i < g.size(); ++i)
        df[static_cast<std::size_t>((*arg)[i])] += g[i];
    });
  }

  // ---- elementwise / reductions ----

  Value mul(Value av, Value bv) {
    if (shape(av) != shape(bv)) throw invalid_input("mul: shape mismatch");
    const auto& a = val(av);
    const auto& b = val(bv);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    const int aid = av.id, bid = bv.id;
    return push(shape(av), std::move(out), [aid, bid](Tape& t, int self) {
      const auto& g = t.cgrad_at(self);
      auto& da = t.grad_at(aid);
      auto& db = t.grad_at(bid);
      const auto& a = t.val_at(aid);
      const auto& b = t.val_at(bid);
      for (std::size_t i = 0; i < g.size(); ++i) {
        da[i] += g[i] * b[i];
        db[i] += g[i] * a[i];
      }
    });
  }

  Value add(Value av, Value bv) {
    if (shape(av) != shape(bv)) throw invalid_input("add: shape mismatch");
    const auto& a = val(av);
    const auto& b = val(bv);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    const int aid = av.id, bid = bv.id;
    return push(shape(av), std::move(out), [aid, bid](Tape& t, int self) {
      const auto& g = t.cgrad_at(self);
      auto& da = t.grad_at(aid);
      auto& db = t.grad_at(bid);
      for (std::size_t i = 0; i < g.size(); ++i) {
        da[i] += g[i];
        db[i] += g[i];
      }
    });
  }

  Value offset(Value xv, double k) {
    const auto& x = val(xv);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + k;
    const int xid = xv.id;
    return push(shape(xv), std::move(out), [xid](Tape& t, int self) {
      const auto& g = t.cgrad_at(self);
      auto& dx = t.grad_at(xid);
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
    });
  }

  // Row-wise RMS normalization of an (N,D) matrix: y = x / sqrt(mean(x^2) + eps).
  Value rms_normalize_rows(Value xv, double eps = 1e-6) {
    const auto& xs = shape(xv);
    if (xs.size() != 2) throw invalid_input("rms_normalize_rows: expected rank-2 input");
    const int N = xs[0], D = xs[1];
    const auto& x = val(xv);
    std::vector<double> out(x.size());
    auto inv_r = std::make_shared<std::vector<double>>(static_cast<std::size_t>(N));
    for (int n = 0; n < N; ++n) {
      double m = 0.0;
      for (int d = 0; d < D; ++d) {
        const double v = x[static_cast<std::size_t>(n) * D + d];
        m += v * v;
      }
      const double r = std::sqrt(m / D + eps);
      (*inv_r)[static_cast<std::size_t>(n)] = 1.0 / r;
      for (int d = 0; d < D; ++d)
        out[static_cast<std::size_t>(n) * D + d] = x[static_cast<std::size_t>(n) * D + d] / r;
    }
    const int xid = xv.id;
    return push(shape(xv), std::move(out), [xid, N, D, inv_r](Tape& t, int self) {
      const auto& g = t.cgrad_at(self);
      auto& dx = t.grad_at(xid);
      const auto& x = t.val_at(xid);
      for (int n = 0; n < N; ++n) {
        const double ir = (*inv_r)[static_cast<std::size_t>(n)];
        double s = 0.0;
        for (int d = 0; d < D; ++d)
          s += g[static_cast<std::size_t>(n) * D + d] * x[static_cast<std::size_t>(n) * D + d];
        const double k = s * ir * ir * ir / D;
        for (int d = 0; d < D; ++d)
          dx[static_cast<std::size_t>(n) * D + d] +=
              g[static_cast<std::size_t>(n) * D + d] * ir -
              x[static_cast<std::size_t>(n) * D + d] * k;
      }
    });
  }

  // Per-location RMS normalization of a (C,H,W) map across channels.
  Value rms_normalize_cells(Value xv, double eps = 1e-6) {
    const auto& xs = shape(xv);
    if (xs.size() != 3) throw invalid_input("rms_normalize_cells: expected (C,H,W)");
    const int C = xs[0], HW = xs[1] * xs[2];
    const auto& x = val(xv);
    std::vector<double> out(x.size());
    auto inv_r = std::make_shared<std::vector<double>>(static_cast<std::size_t>(HW));
    for (int i = 0; i < HW; ++i) {
      double m = 0.0;
      for (int c = 0; c < C; ++c) {
        const double v = x[static_cast<std::size_t>(c) * HW + i];
        m += v * v;
      }
      const double ir = 1.0 / std::sqrt(m / C + eps);
      (*inv_r)[static_cast<std::size_t>(i)] = ir;
      for (int c = 0; c < C; ++c)
        out[static_cast<std::size_t>(c) * HW + i] = x[static_cast<std::size_t>(c) * HW + i] * ir;
    }
    const int xid = xv.id;
    return push(shape(xv), std::move(out), [xid, C, HW, inv_r](Tape& t, int self) {
      const auto& g = t.cgrad_at(self);
      auto& dx = t.grad_at(xid);
      const auto& x = t.val_at(xid);
      for (int i = 0; i < HW; ++i) {
        const double ir = (*inv_r)[static_cast<std::size_t>(i)];
        double s = 0.0;
        for (int c = 0; c < C; ++c)
          s += g[static_cast<std::size_t>(c) * HW + i] * x[static_cast<std::size_t>(c) * HW + i];
        const double k = s * ir * ir * ir / C;
        for (int c = 0; c < C; ++c)
          dx[static_cast<std::size_t>(c) * HW + i] +=
              g[static_cast<std::size_t>(c) * HW + i] * ir -
              x[static_cast<std::size_t>(c) * HW + i] * k;
      }
    });
  }

  Value scale(Value xv, double k) {
    const auto& x = val(xv);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = k * x[i];
    const int xid = xv.id;
    return push(shape(xv), std::move(out), [xid, k](Tape& t, int self) {
      const auto& g = t.cgrad_at(self);
      auto& dx = t.grad_at(xid);
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += k * g[i];
    });
  }

  Value sum(Value xv) {
    const auto& x = val(xv);
    double acc = 0.0;
    for (double v : x) acc += v;
    const int xid = xv.id;
    return push({1}, {acc}, [xid](Tape& t, int self) {
      const double g = t.cgrad_at(self)[0];
      auto& dx = t.grad_at(xid);
      for (auto& d : dx) d += g;
    });
  }

  // (N,M): axis 0 sums over rows -> (M); axis 1 sums over columns -> (N).
  Value sum_axis(Value xv, int axis) {
    const auto& xs = shape(xv);
    if (xs.size() != 2) throw invalid_input("sum_axis: expected rank-2 input");
    if (axis != 0 && axis != 1) throw invalid_input("sum_axis: axis must be 0 or 1");
    const int N = xs[0], M = xs[1];
    const auto& x = val(xv);
    std::vector<double> out(static_cast<std::size_t>(axis == 0 ? M : N), 0.0);
    for (int n = 0; n < N; ++n)
      for (int m = 0; m < M; ++m)
        out[static_cast<std::size_t>(axis == 0 ? m : n)] +=
            x[static_cast<std::size_t>(n) * M + m];
    const int xid = xv.id;
    return push({axis == 0 ? M : N}, std::move(out), [xid, N, M, axis](Tape& t, int self) {
      const auto& g = t.cgrad_at(self);
      auto& dx = t.grad_at(xid);
      for (int n = 0; n < N; ++n)
        for (int m = 0; m < M; ++m)
          dx[static_cast<std::size_t>(n) * M + m] +=
              g[static_cast<std::size_t>(axis == 0 ? m : n)];
    });
  }

  // ---- losses ----

  // Multi-label binary cross-entropy of predictions y_hat (rank-1, values in
  // (0,1)) against a 0/1 target vector. Predictions are clamped to
  // [eps, 1-eps] inside the logs.
  Value multilabel_bce(Value yv, std::span<const double> y, double eps = 1e-7) {
    const auto& ys = shape(yv);
    if (ys.size() != 1 || ys[0] != static_cast<int>(y.size()))
      throw invalid_input("multilabel_bce: prediction/target size mismatch");
    for (double t : y)
      if (t != 0.0 && t != 1.0) throw invalid_input("multilabel_bce: targets must be 0 or 1");
    const auto& p = val(yv);
    double loss = 0.0;
    for (std::size_t c = 0; c < y.size(); ++c) {
      const double q = std::clamp(p[c], eps, 1.0 - eps);
      loss -= y[c] * std::log(q) + (1.0 - y[c]) * std::log(1.0 - q);
    }
    const int yid = yv.id;
    std::vector<double> tgt(y.begin(), y.end());
    return push({1}, {loss}, [yid, tgt = std::move(tgt), eps](Tape& t, int self) {
      const double g = t.cgrad_at(self)[0];
      auto& dp = t.grad_at(yid);
      const auto& p = t.val_at(yid);
      for (std::size_t c = 0; c < tgt.size(); ++c) {
        if (p[c] <= eps || p[c] >= 1.0 - eps) continue;  // clamped, flat
        dp[c] += g * (-tgt[c] / p[c] + (1.0 - tgt[c]) / (1.0 - p[c]));
      }
    });
  }

  // ---- plumbing for fused ops defined elsewhere ----

  Value make_node(std::vector<int> shape, std::vector<double> v,
                  std::function<void(Tape&, int)> back) {
    if (static_cast<int>(v.size()) != shape_numel(shape))
      throw invalid_input("make_node: data size does not match shape");
    return push(std::move(shape), std::move(v), std::move(back));
  }

  const std::vector<double>& cgrad_at(int id) const {
    return nodes_[static_cast<std::size_t>(id)].grad;
  }

  // ---- backward ----

  // Seeds a scalar loss with gradient 1, replays the tape in reverse, then
  // accumulates leaf gradients into the registry (in registration order).
  // May be called several times on one tape; node gradients are reset per
  // call while registry gradients keep accumulating across calls.
  void backward(Value loss) {
    const auto& ln = node(loss);
    if (ln.val.size() != 1) throw invalid_input("backward: loss must be a scalar");
    for (auto& n : nodes_) std::fill(n.grad.begin(), n.grad.end(), 0.0);
    nodes_[static_cast<std::size_t>(loss.id)].grad[0] = 1.0;
    for (int i = loss.id; i >= 0; --i)
      if (nodes_[static_cast<std::size_t>(i)].back) nodes_[static_cast<std::size_t>(i)].back(*this, i);
    for (const auto& [ridx, nid] : param_nodes_) {
      auto& e = reg_->entry(ridx);
      const auto& g = nodes_[static_cast<std::size_t>(nid)].grad;
      for (std::size_t i = 0; i < g.size(); ++i) e.grad[i] += g[i];
    }
  }

  int size() const { return static_cast<int>(nodes_.size()); }

 private:
  struct Node {
    std::vector<int> shape;
    std::vector<double> val;
    std::vector<double> grad;
    std::function<void(Tape&, int)> back;
  };

  static std::pair<int, int> bin_window(double lo, double hi, int limit) {
    int a = static_cast<int>(std::floor(lo));
    int b = static_cast<int>(std::ceil(hi));
    a = std::clamp(a, 0, limit);
    b = std::clamp(b, 0, limit);
    if (a >= b) {  // empty: nearest valid cell to the window center
      int c = static_cast<int>(std::floor(0.5 * (lo + hi)));
      c = std::clamp(c, 0, limit - 1);
      a = c;
      b = c + 1;
    }
    return {a, b};
  }

  Node& node(Value v) {
    if (!v.ok() || v.id >= size()) throw invalid_input("tape: bad value handle");
    return nodes_[static_cast<std::size_t>(v.id)];
  }
  const Node& node(Value v) const {
    if (!v.ok() || v.id >= size()) throw invalid_input("tape: bad value handle");
    return nodes_[static_cast<std::size_t>(v.id)];
  }

  Value push(std::vector<int> shape, std::vector<double> v,
             std::function<void(Tape&, int)> back) {
    Node n;
    n.shape = std::move(shape);
    n.grad.assign(v.size(), 0.0);
    n.val = std::move(v);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Value{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
  Registry* reg_;
  std::map<int, int> param_nodes_;  // registry index -> node id (ordered)
};

}  // namespace codetect
