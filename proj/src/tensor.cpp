#include "golf/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace golf {

std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("tensor shape has non-positive dimension " + std::to_string(d));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape) : d_(std::make_shared<TensorData>()) {
  d_->values.assign(shape_size(shape), 0.0);
  d_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : d_(std::make_shared<TensorData>()) {
  if (shape_size(shape) != values.size())
    throw std::invalid_argument("tensor data size " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
  d_->shape = std::move(shape);
  d_->values = std::move(values);
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::zeros(Shape shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(Shape shape, double v) {
  Tensor t(std::move(shape));
  std::fill(t.values().begin(), t.values().end(), v);
  return t;
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

double Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
  return d_->values[0];
}

Tensor Tensor::detached() const {
  Tensor t;
  t.d_->shape = d_->shape;
  t.d_->values = d_->values;
  return t;
}

// ---- adjoint bookkeeping -------------------------------------------------

std::vector<double>& Adjoints::of(const std::shared_ptr<TensorData>& t) {
  auto it = slots_.find(t.get());
  if (it == slots_.end()) {
    Slot s;
    s.holder = t;
    s.buf.assign(t->values.size(), 0.0);
    it = slots_.emplace(t.get(), std::move(s)).first;
  }
  return it->second.buf;
}

const std::vector<double>* Adjoints::find(const TensorData* t) const {
  auto it = slots_.find(t);
  return it == slots_.end() ? nullptr : &it->second.buf;
}

void Adjoints::seed(const std::shared_ptr<TensorData>& t, double v) {
  of(t).assign(t->values.size(), v);
}

void Adjoints::accumulate_leaf_grads() {
  for (auto& [ptr, slot] : slots_) {
    TensorData* t = slot.holder.get();
    if (!t->requires_grad) continue;
    if (t->grad.size() != t->values.size()) t->grad.assign(t->values.size(), 0.0);
    const std::vector<double>& b = slot.buf;
    for (std::size_t i = 0; i < b.size(); ++i) t->grad[i] += b[i];
  }
}

// ---- tape ----------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;
std::atomic<std::uint64_t> g_next_tape_id{1};
}  // namespace

Tape::Tape() : id_(g_next_tape_id.fetch_add(1)), prev_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::shared_ptr<TensorData> out, BackwardFn fn) {
  out->tape_id = id_;
  ops_.push_back(Op{std::move(out), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw std::invalid_argument("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  if (loss.impl()->tape_id != id_)
    throw std::invalid_argument("backward: loss was not produced on this tape");
  Adjoints adj;
  adj.seed(loss.impl(), 1.0);
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    const std::vector<double>* out_adj = adj.find(it->out.get());
    if (!out_adj) continue;  // not on the path to the loss
    it->fn(*out_adj, adj);
  }
  adj.accumulate_leaf_grads();
}

bool tracked(const Tensor& t) {
  Tape* tp = Tape::active();
  if (!tp) return false;
  return t.requires_grad() || t.impl()->tape_id == tp->id();
}

void backward(const Tensor& loss) {
  Tape* tp = Tape::active();
  if (!tp) throw std::logic_error("backward called with no active tape");
  tp->backward(loss);
}

namespace detail {

void check_finite(const double* p, std::size_t n, const char* op) {
#ifndef NDEBUG
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(p[i]))
      throw std::runtime_error(std::string(op) + " produced a non-finite value at index " + std::to_string(i));
#else
  (void)p;
  (void)n;
  (void)op;
#endif
}

}  // namespace detail

// ---- elementwise / reduction ops ----------------------------------------

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  const double* xv = x.data();
  double* ov = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) ov[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  if (tracked(x)) {
    auto xi = x.impl();
    Tape::active()->record(out.impl(), [xi](const std::vector<double>& oa, Adjoints& adj) {
      std::vector<double>& g = adj.of(xi);
      for (std::size_t i = 0; i < oa.size(); ++i)
        if (xi->values[i] > 0.0) g[i] += oa[i];
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  const double* av = a.data();
  const double* bv = b.data();
  double* ov = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) ov[i] = av[i] + bv[i];
  bool ta = tracked(a), tb = tracked(b);
  if (ta || tb) {
    auto ai = a.impl();
    auto bi = b.impl();
    Tape::active()->record(out.impl(), [ai, bi, ta, tb](const std::vector<double>& oa, Adjoints& adj) {
      if (ta) {
        std::vector<double>& g = adj.of(ai);
        for (std::size_t i = 0; i < oa.size(); ++i) g[i] += oa[i];
      }
      if (tb) {
        std::vector<double>& g = adj.of(bi);
        for (std::size_t i = 0; i < oa.size(); ++i) g[i] += oa[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  const double* av = a.data();
  const double* bv = b.data();
  double* ov = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) ov[i] = av[i] - bv[i];
  bool ta = tracked(a), tb = tracked(b);
  if (ta || tb) {
    auto ai = a.impl();
    auto bi = b.impl();
    Tape::active()->record(out.impl(), [ai, bi, ta, tb](const std::vector<double>& oa, Adjoints& adj) {
      if (ta) {
        std::vector<double>& g = adj.of(ai);
        for (std::size_t i = 0; i < oa.size(); ++i) g[i] += oa[i];
      }
      if (tb) {
        std::vector<double>& g = adj.of(bi);
        for (std::size_t i = 0; i < oa.size(); ++i) g[i] -= oa[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double c) {
  Tensor out(x.shape());
  const double* xv = x.data();
  double* ov = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) ov[i] = xv[i] * c;
  if (tracked(x)) {
    auto xi = x.impl();
    Tape::active()->record(out.impl(), [xi, c](const std::vector<double>& oa, Adjoints& adj) {
      std::vector<double>& g = adj.of(xi);
      for (std::size_t i = 0; i < oa.size(); ++i) g[i] += c * oa[i];
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  const double* xv = x.data();
  for (std::size_t i = 0; i < x.size(); ++i) s += xv[i];
  Tensor out = Tensor::scalar(s);
  if (tracked(x)) {
    auto xi = x.impl();
    Tape::active()->record(out.impl(), [xi](const std::vector<double>& oa, Adjoints& adj) {
      std::vector<double>& g = adj.of(xi);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += oa[0];
    });
  }
  return out;
}

Tensor select(const Tensor& x, std::size_t flat_index) {
  if (flat_index >= x.size())
    throw std::invalid_argument("select: index " + std::to_string(flat_index) +
                                " out of range for size " + std::to_string(x.size()));
  Tensor out = Tensor::scalar(x.data()[flat_index]);
  if (tracked(x)) {
    auto xi = x.impl();
    Tape::active()->record(out.impl(), [xi, flat_index](const std::vector<double>& oa, Adjoints& adj) {
      adj.of(xi)[flat_index] += oa[0];
    });
  }
  return out;
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  const double* av = a.data();
  const double* bv = b.data();
  const std::size_t n = a.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = av[i] - bv[i];
    s += d * d;
  }
  Tensor out = Tensor::scalar(s / static_cast<double>(n));
  bool ta = tracked(a), tb = tracked(b);
  if (ta || tb) {
    auto ai = a.impl();
    auto bi = b.impl();
    Tape::active()->record(out.impl(), [ai, bi, ta, tb, n](const std::vector<double>& oa, Adjoints& adj) {
      const double c = 2.0 * oa[0] / static_cast<double>(n);
      if (ta) {
        std::vector<double>& g = adj.of(ai);
        for (std::size_t i = 0; i < n; ++i) g[i] += c * (ai->values[i] - bi->values[i]);
      }
      if (tb) {
        std::vector<double>& g = adj.of(bi);
        for (std::size_t i = 0; i < n; ++i) g[i] -= c * (ai->values[i] - bi->values[i]);
      }
    });
  }
  return out;
}

// ---- linear / softmax / cross entropy -----------------------------------

static void linear_checks(const Tensor& x, const Tensor& w, const Tensor* bias) {
  if (x.ndim() != 2 || w.ndim() != 2)
    throw std::invalid_argument("linear: expected 2-D x and w, got " + shape_str(x.shape()) + " and " +
                                shape_str(w.shape()));
  if (x.dim(1) != w.dim(0))
    throw std::invalid_argument("linear: x columns (" + std::to_string(x.dim(1)) +
                                ") != w rows (" + std::to_string(w.dim(0)) + ")");
  if (bias && (bias->ndim() != 1 || bias->dim(0) != w.dim(1)))
    throw std::invalid_argument("linear: bias shape " + shape_str(bias->shape()) +
                                " does not match output width " + std::to_string(w.dim(1)));
}

static Tensor linear_impl(const Tensor& x, const Tensor& w, const Tensor* bias) {
  linear_checks(x, w, bias);
  const int n = x.dim(0), din = x.dim(1), dout = w.dim(1);
  Tensor out({n, dout});
  const double* xv = x.data();
  const double* wv = w.data();
  double* ov = out.data();
  for (int i = 0; i < n; ++i) {
    double* orow = ov + static_cast<std::size_t>(i) * dout;
    if (bias) {
      const double* bv = bias->data();
      for (int j = 0; j < dout; ++j) orow[j] = bv[j];
    }
    const double* xrow = xv + static_cast<std::size_t>(i) * din;
    for (int k = 0; k < din; ++k) {
      const double xk = xrow[k];
      const double* wrow = wv + static_cast<std::size_t>(k) * dout;
      for (int j = 0; j < dout; ++j) orow[j] += xk * wrow[j];
    }
  }
  bool tx = tracked(x), tw = tracked(w), tb = bias && tracked(*bias);
  if (tx || tw || tb) {
    auto xi = x.impl();
    auto wi = w.impl();
    std::shared_ptr<TensorData> bi = bias ? bias->impl() : nullptr;
    Tape::active()->record(out.impl(), [xi, wi, bi, tx, tw, tb, n, din, dout](const std::vector<double>& oa,
                                                                              Adjoints& adj) {
      if (tx) {
        std::vector<double>& g = adj.of(xi);
        for (int i = 0; i < n; ++i)
          for (int k = 0; k < din; ++k) {
            double s = 0.0;
            const double* wrow = wi->values.data() + static_cast<std::size_t>(k) * dout;
            const double* oarow = oa.data() + static_cast<std::size_t>(i) * dout;
            for (int j = 0; j < dout; ++j) s += oarow[j] * wrow[j];
            g[static_cast<std::size_t>(i) * din + k] += s;
          }
      }
      if (tw) {
        std::vector<double>& g = adj.of(wi);
        for (int i = 0; i < n; ++i) {
          const double* xrow = xi->values.data() + static_cast<std::size_t>(i) * din;
          const double* oarow = oa.data() + static_cast<std::size_t>(i) * dout;
          for (int k = 0; k < din; ++k) {
            double* grow = g.data() + static_cast<std::size_t>(k) * dout;
            const double xk = xrow[k];
            for (int j = 0; j < dout; ++j) grow[j] += xk * oarow[j];
          }
        }
      }
      if (tb) {
        std::vector<double>& g = adj.of(bi);
        for (int i = 0; i < n; ++i) {
          const double* oarow = oa.data() + static_cast<std::size_t>(i) * dout;
          for (int j = 0; j < dout; ++j) g[j] += oarow[j];
        }
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w) { return linear_impl(x, w, nullptr); }

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) { return linear_impl(x, w, &bias); }

Tensor softmax(const Tensor& x) {
  if (x.ndim() != 2) throw std::invalid_argument("softmax: expected 2-D input, got " + shape_str(x.shape()));
  const int n = x.dim(0), k = x.dim(1);
  Tensor out(x.shape());
  const double* xv = x.data();
  double* ov = out.data();
  for (int i = 0; i < n; ++i) {
    const double* xrow = xv + static_cast<std::size_t>(i) * k;
    double* orow = ov + static_cast<std::size_t>(i) * k;
    double m = xrow[0];
    for (int j = 1; j < k; ++j) m = std::max(m, xrow[j]);
    double z = 0.0;
    for (int j = 0; j < k; ++j) {
      orow[j] = std::exp(xrow[j] - m);
      z += orow[j];
    }
    for (int j = 0; j < k; ++j) orow[j] /= z;
  }
  if (tracked(x)) {
    auto xi = x.impl();
    auto oi = out.impl();
    Tape::active()->record(oi, [xi, oi, n, k](const std::vector<double>& oa, Adjoints& adj) {
      std::vector<double>& g = adj.of(xi);
      for (int i = 0; i < n; ++i) {
        const double* y = oi->values.data() + static_cast<std::size_t>(i) * k;
        const double* oarow = oa.data() + static_cast<std::size_t>(i) * k;
        double dot = 0.0;
        for (int j = 0; j < k; ++j) dot += oarow[j] * y[j];
        double* grow = g.data() + static_cast<std::size_t>(i) * k;
        for (int j = 0; j < k; ++j) grow[j] += y[j] * (oarow[j] - dot);
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& probs, const std::vector<int>& labels) {
  if (probs.ndim() != 2)
    throw std::invalid_argument("cross_entropy: expected 2-D probs, got " + shape_str(probs.shape()));
  const int n = probs.dim(0), k = probs.dim(1);
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(n) + " rows");
  for (int i = 0; i < n; ++i)
    if (labels[i] < 0 || labels[i] >= k)
      throw std::invalid_argument("cross_entropy: label " + std::to_string(labels[i]) +
                                  " out of range for " + std::to_string(k) + " classes");
  const double* pv = probs.data();
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    const double p = pv[static_cast<std::size_t>(i) * k + labels[i]];
    if (p <= 0.0) throw std::domain_error("cross_entropy: probability for the true class is not positive");
    s -= std::log(p);
  }
  Tensor out = Tensor::scalar(s / n);
  if (tracked(probs)) {
    auto pi = probs.impl();
    Tape::active()->record(out.impl(), [pi, labels, n, k](const std::vector<double>& oa, Adjoints& adj) {
      std::vector<double>& g = adj.of(pi);
      const double c = oa[0] / n;
      for (int i = 0; i < n; ++i) {
        const std::size_t at = static_cast<std::size_t>(i) * k + labels[i];
        g[at] -= c / pi->values[at];
      }
    });
  }
  return out;
}

// ---- instance norm -------------------------------------------------------

Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.ndim() != 4)
    throw std::invalid_argument("instance_norm: expected NCHW input, got " + shape_str(x.shape()));
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (gamma.ndim() != 1 || gamma.dim(0) != c || beta.ndim() != 1 || beta.dim(0) != c)
    throw std::invalid_argument("instance_norm: gamma/beta must have shape [" + std::to_string(c) + "]");
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Tensor out(x.shape());
  // per-(n,c) statistics, kept for the backward pass
  auto mean = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * c);
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * c);
  const double* xv = x.data();
  double* ov = out.data();
  const double* gv = gamma.data();
  const double* bv = beta.data();
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * hw;
      const double* p = xv + base;
      double mu = 0.0;
      for (std::size_t t = 0; t < hw; ++t) mu += p[t];
      mu /= static_cast<double>(hw);
      double var = 0.0;
      for (std::size_t t = 0; t < hw; ++t) {
        const double d = p[t] - mu;
        var += d * d;
      }
      var /= static_cast<double>(hw);
      const double is = 1.0 / std::sqrt(var + eps);
      (*mean)[static_cast<std::size_t>(i) * c + ch] = mu;
      (*inv_std)[static_cast<std::size_t>(i) * c + ch] = is;
      const double ga = gv[ch], be = bv[ch];
      double* o = ov + base;
      for (std::size_t t = 0; t < hw; ++t) o[t] = ga * (p[t] - mu) * is + be;
    }
  bool tx = tracked(x), tg = tracked(gamma), tb = tracked(beta);
  if (tx || tg || tb) {
    auto xi = x.impl();
    auto gi = gamma.impl();
    auto bi = beta.impl();
    Tape::active()->record(
        out.impl(), [xi, gi, bi, tx, tg, tb, mean, inv_std, n, c, hw](const std::vector<double>& oa,
                                                                      Adjoints& adj) {
          const double inv_hw = 1.0 / static_cast<double>(hw);
          std::vector<double>* gx = tx ? &adj.of(xi) : nullptr;
          std::vector<double>* gg = tg ? &adj.of(gi) : nullptr;
          std::vector<double>* gb = tb ? &adj.of(bi) : nullptr;
          for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch) {
              const std::size_t sc = static_cast<std::size_t>(i) * c + ch;
              const std::size_t base = sc * hw;
              const double mu = (*mean)[sc];
              const double is = (*inv_std)[sc];
              const double ga = gi->values[ch];
              const double* x = xi->values.data() + base;
              const double* o = oa.data() + base;
              double s_oa = 0.0, s_oa_xhat = 0.0;
              for (std::size_t t = 0; t < hw; ++t) {
                s_oa += o[t];
                s_oa_xhat += o[t] * (x[t] - mu) * is;
              }
              if (gb) (*gb)[ch] += s_oa;
              if (gg) (*gg)[ch] += s_oa_xhat;
              if (gx) {
                // d/dx of gamma * (x - mu) / sqrt(var + eps), var and mu both
                // functions of x over the spatial extent
                double* g = gx->data() + base;
                for (std::size_t t = 0; t < hw; ++t) {
                  const double xhat = (x[t] - mu) * is;
                  g[t] += ga * is * (o[t] - inv_hw * (s_oa + xhat * s_oa_xhat));
                }
              }
            }
        });
  }
  return out;
}

// ---- pooling -------------------------------------------------------------

Tensor avg_pool2(const Tensor& x) {
  if (x.ndim() != 4)
    throw std::invalid_argument("avg_pool2: expected NCHW input, got " + shape_str(x.shape()));
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = h / 2, ow = w / 2;
  if (oh < 1 || ow < 1)
    throw std::invalid_argument("avg_pool2: spatial extent " + std::to_string(h) + "x" + std::to_string(w) +
                                " too small to pool");
  Tensor out({n, c, oh, ow});
  const double* xv = x.data();
  double* ov = out.data();
  for (int i = 0; i < n * c; ++i) {
    const double* plane = xv + static_cast<std::size_t>(i) * h * w;
    double* oplane = ov + static_cast<std::size_t>(i) * oh * ow;
    for (int y = 0; y < oh; ++y)
      for (int xcol = 0; xcol < ow; ++xcol) {
        const double* r0 = plane + static_cast<std::size_t>(2 * y) * w + 2 * xcol;
        const double* r1 = r0 + w;
        oplane[static_cast<std::size_t>(y) * ow + xcol] = 0.25 * (r0[0] + r0[1] + r1[0] + r1[1]);
      }
  }
  if (tracked(x)) {
    auto xi = x.impl();
    Tape::active()->record(out.impl(), [xi, n, c, h, w, oh, ow](const std::vector<double>& oa, Adjoints& adj) {
      std::vector<double>& g = adj.of(xi);
      for (int i = 0; i < n * c; ++i) {
        double* gplane = g.data() + static_cast<std::size_t>(i) * h * w;
        const double* oplane = oa.data() + static_cast<std::size_t>(i) * oh * ow;
        for (int y = 0; y < oh; ++y)
          for (int xcol = 0; xcol < ow; ++xcol) {
            const double v = 0.25 * oplane[static_cast<std::size_t>(y) * ow + xcol];
            double* r0 = gplane + static_cast<std::size_t>(2 * y) * w + 2 * xcol;
            double* r1 = r0 + w;
            r0[0] += v;
            r0[1] += v;
            r1[0] += v;
            r1[1] += v;
          }
      }
    });
  }
  return out;
}

// ---- convolution ---------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& kernel, int pad) {
  if (input.ndim() != 4)
    throw std::invalid_argument("conv2d: expected NCHW input, got " + shape_str(input.shape()));
  if (kernel.ndim() != 4)
    throw std::invalid_argument("conv2d: expected OIHW kernel, got " + shape_str(kernel.shape()));
  const int n = input.dim(0), c_in = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int c_out = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != c_in)
    throw std::invalid_argument("conv2d: input channels (" + std::to_string(c_in) +
                                ") != kernel in-channels (" + std::to_string(kernel.dim(1)) + ")");
  if (pad < 0) throw std::invalid_argument("conv2d: negative padding " + std::to_string(pad));
  const int oh = h + 2 * pad - kh + 1;
  const int ow = w + 2 * pad - kw + 1;
  if (oh < 1 || ow < 1)
    throw std::invalid_argument("conv2d: output extent " + std::to_string(oh) + "x" + std::to_string(ow) +
                                " is empty for input " + shape_str(input.shape()) + ", kernel " +
                                shape_str(kernel.shape()) + ", pad " + std::to_string(pad));

  Tensor out({n, c_out, oh, ow});
  detail::conv2d_forward(input.data(), n, c_in, h, w, kernel.data(), c_out, kh, kw, pad, pad, out.data());
  detail::check_finite(out.data(), out.size(), "conv2d");

  bool ti = tracked(input), tk = tracked(kernel);
  if (ti || tk) {
    auto ii = input.impl();
    auto ki = kernel.impl();
    Tape::active()->record(out.impl(), [ii, ki, ti, tk, n, c_in, h, w, c_out, kh, kw, pad, oh,
                                        ow](const std::vector<double>& oa, Adjoints& adj) {
      if (ti) {
        // d_input is the adjoint cross-correlated with the kernel
        // transposed in its channel axes and flipped spatially
        std::vector<double> kt(ki->values.size());
        const double* kv = ki->values.data();
        for (int o = 0; o < c_out; ++o)
          for (int ci = 0; ci < c_in; ++ci)
            for (int u = 0; u < kh; ++u)
              for (int v = 0; v < kw; ++v)
                kt[((static_cast<std::size_t>(ci) * c_out + o) * kh + (kh - 1 - u)) * kw + (kw - 1 - v)] =
                    kv[((static_cast<std::size_t>(o) * c_in + ci) * kh + u) * kw + v];
        std::vector<double>& g = adj.of(ii);
        std::vector<double> buf(g.size());
        detail::conv2d_forward(oa.data(), n, c_out, oh, ow, kt.data(), c_in, kh, kw, kh - 1 - pad,
                               kw - 1 - pad, buf.data());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += buf[i];
      }
      if (tk) {
        std::vector<double>& g = adj.of(ki);
        std::vector<double> buf(g.size());
        detail::conv2d_grad_kernel(ii->values.data(), n, c_in, h, w, oa.data(), c_out, kh, kw, pad, pad,
                                   buf.data());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += buf[i];
      }
    });
  }
  return out;
}

// ---- numeric gradient audit ---------------------------------------------

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
  Tensor probe = x.detached();
  probe.set_requires_grad(true);
  std::vector<double> analytic;
  {
    Tape tape;
    Tensor y = f(probe);
    if (y.size() != 1) throw std::invalid_argument("grad_check requires a scalar-valued function");
    tape.backward(y);
    analytic = probe.grad();
  }
  double worst = 0.0;
  Tensor plain = x.detached();
  for (std::size_t i = 0; i < plain.size(); ++i) {
    const double saved = plain.data()[i];
    plain.data()[i] = saved + h;
    const double up = f(plain).item();
    plain.data()[i] = saved - h;
    const double dn = f(plain).item();
    plain.data()[i] = saved;
    const double fd = (up - dn) / (2.0 * h);
    const double a = analytic[i];
    const double rel = std::abs(a - fd) / (std::abs(a) + std::abs(fd) + 1e-12);
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace golf
