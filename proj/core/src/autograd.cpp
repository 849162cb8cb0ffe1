#include "trida/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "trida/errors.hpp"

namespace trida {

namespace {

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<Node>;

Var make_result(Tensor value, std::initializer_list<Var> inputs, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const Var& v : inputs) any = any || v.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const Var& v : inputs) {
        if (v.requires_grad()) node->parents.push_back(v.node());
      }
      node->backward = std::move(backward);
    }
  }
  return Var::from_node(std::move(node));
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ValidationError(std::string(op) + ": shape " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

void require_rank(const Var& x, int rank, const char* op) {
  if (x.value().rank() != rank) {
    throw ValidationError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                          shape_string(x.shape()));
  }
}

// Accumulates `scale * g` into `target` elementwise.
void axpy(Tensor& target, const Tensor& g, double scale = 1.0) {
  double* t = target.data();
  const double* s = g.data();
  for (std::size_t i = 0; i < target.size(); ++i) t[i] += scale * s[i];
}

struct ChannelLayout {
  int outer;
  int channels;
  int inner;
  int count() const { return outer * inner; }
};

ChannelLayout channel_layout(const Tensor& x) {
  if (x.rank() < 2) throw ValidationError("channel op needs rank >= 2, got " + shape_string(x.shape()));
  int inner = 1;
  for (int a = 2; a < x.rank(); ++a) inner *= x.dim(a);
  return {x.dim(0), x.dim(1), inner};
}

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.empty()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var Var::constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return from_node(std::move(node));
}

Var Var::parameter(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return from_node(std::move(node));
}

Var Var::from_node(std::shared_ptr<Node> node) {
  Var v;
  v.node_ = std::move(node);
  return v;
}

void Var::zero_grad() {
  if (node_ && !node_->grad.empty()) node_->grad.fill(0.0);
}

void Var::backward() const {
  if (!node_ || !node_->requires_grad) return;
  if (node_->value.size() != 1) throw ValidationError("backward() needs a scalar root, got " + shape_string(shape()));

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer().fill(0.0);
  node_->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace ops {

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  axpy(out, b.value());
  NodePtr na = a.node(), nb = b.node();
  return make_result(std::move(out), {a, b}, [na, nb](Node& self) {
    if (na->requires_grad) axpy(na->grad_buffer(), self.grad);
    if (nb->requires_grad) axpy(nb->grad_buffer(), self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  axpy(out, b.value(), -1.0);
  NodePtr na = a.node(), nb = b.node();
  return make_result(std::move(out), {a, b}, [na, nb](Node& self) {
    if (na->requires_grad) axpy(na->grad_buffer(), self.grad);
    if (nb->requires_grad) axpy(nb->grad_buffer(), self.grad, -1.0);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  NodePtr na = a.node(), nb = b.node();
  return make_result(std::move(out), {a, b}, [na, nb](Node& self) {
    if (na->requires_grad) {
      Tensor& g = na->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * nb->value[i];
    }
    if (nb->requires_grad) {
      Tensor& g = nb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * na->value[i];
    }
  });
}

Var scale(const Var& a, double factor) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= factor;
  NodePtr na = a.node();
  return make_result(std::move(out), {a},
                     [na, factor](Node& self) { axpy(na->grad_buffer(), self.grad, factor); });
}

Var add_scalar(const Var& a, double value) {
  Tensor out = a.value();
  for (double& v : out.values()) v += value;
  NodePtr na = a.node();
  return make_result(std::move(out), {a}, [na](Node& self) { axpy(na->grad_buffer(), self.grad); });
}

Var lerp(const Var& a, const Var& b, double alpha) {
  require_same_shape(a, b, "lerp");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * a.value()[i] + (1.0 - alpha) * b.value()[i];
  NodePtr na = a.node(), nb = b.node();
  return make_result(std::move(out), {a, b}, [na, nb, alpha](Node& self) {
    if (na->requires_grad) axpy(na->grad_buffer(), self.grad, alpha);
    if (nb->requires_grad) axpy(nb->grad_buffer(), self.grad, 1.0 - alpha);
  });
}

Var relu(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  NodePtr nx = x.node();
  return make_result(std::move(out), {x}, [nx](Node& self) {
    Tensor& g = nx->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (nx->value[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

Var abs(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = std::abs(v);
  NodePtr nx = x.node();
  return make_result(std::move(out), {x}, [nx](Node& self) {
    Tensor& g = nx->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = nx->value[i];
      g[i] += v > 0.0 ? self.grad[i] : (v < 0.0 ? -self.grad[i] : 0.0);
    }
  });
}

Var log(const Var& x, double eps) {
  Tensor out = x.value();
  for (double& v : out.values()) v = std::log(v + eps);
  NodePtr nx = x.node();
  return make_result(std::move(out), {x}, [nx, eps](Node& self) {
    Tensor& g = nx->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / (nx->value[i] + eps);
  });
}

Var square(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.values()) v *= v;
  NodePtr nx = x.node();
  return make_result(std::move(out), {x}, [nx](Node& self) {
    Tensor& g = nx->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * nx->value[i] * self.grad[i];
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  NodePtr nx = x.node();
  return make_result(std::move(out), {x}, [nx](Node& self) { axpy(nx->grad_buffer(), self.grad); });
}

Var flatten(const Var& x) { return reshape(x, {x.value().rows(), x.value().cols()}); }

Var detach(const Var& x) { return Var::constant(x.value()); }

Var sum(const Var& x) {
  double total = 0.0;
  for (double v : x.value().values()) total += v;
  NodePtr nx = x.node();
  return make_result(Tensor::scalar(total), {x}, [nx](Node& self) {
    const double g0 = self.grad[0];
    for (double& g : nx->grad_buffer().values()) g += g0;
  });
}

Var mean(const Var& x) {
  const double n = static_cast<double>(x.value().size());
  return scale(sum(x), 1.0 / n);
}

Var mean_rows(const Var& x) {
  require_rank(x, 2, "mean_rows");
  const int n = x.value().rows();
  const int d = x.value().cols();
  Tensor out({1, d});
  out.matrix() = x.value().matrix().colwise().mean();
  NodePtr nx = x.node();
  return make_result(std::move(out), {x}, [nx, n](Node& self) {
    nx->grad_buffer().matrix().rowwise() += self.grad.matrix().row(0) / static_cast<double>(n);
  });
}

Var sum_cols(const Var& x) {
  require_rank(x, 2, "sum_cols");
  const int n = x.value().rows();
  Tensor out({n, 1});
  out.matrix() = x.value().matrix().rowwise().sum();
  NodePtr nx = x.node();
  return make_result(std::move(out), {x}, [nx](Node& self) {
    nx->grad_buffer().matrix().colwise() += self.grad.matrix().col(0);
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  if (x.value().cols() != weight.value().cols()) {
    throw ValidationError("linear: input " + shape_string(x.shape()) + " vs weight " + shape_string(weight.shape()));
  }
  const int n = x.value().rows();
  const int o = weight.value().rows();
  Tensor out({n, o});
  out.matrix().noalias() = x.value().matrix() * weight.value().matrix().transpose();
  if (bias.defined()) {
    if (static_cast<int>(bias.value().size()) != o) throw ValidationError("linear: bias size mismatch");
    out.matrix().rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.value().data(), o);
  }
  NodePtr nx = x.node(), nw = weight.node();
  NodePtr nb = bias.defined() ? bias.node() : nullptr;
  return make_result(std::move(out), {x, weight, bias.defined() ? bias : Var()}, [nx, nw, nb, o](Node& self) {
    const auto g = self.grad.matrix();
    if (nx->requires_grad) nx->grad_buffer().matrix().noalias() += g * nw->value.matrix();
    if (nw->requires_grad) nw->grad_buffer().matrix().noalias() += g.transpose() * nx->value.matrix();
    if (nb && nb->requires_grad) {
      Eigen::Map<Eigen::RowVectorXd>(nb->grad_buffer().data(), o) += g.colwise().sum();
    }
  });
}

Var weight_norm_rows(const Var& v, const Var& g) {
  require_rank(v, 2, "weight_norm_rows");
  const int o = v.value().rows();
  if (static_cast<int>(g.value().size()) != o) throw ValidationError("weight_norm_rows: gain size mismatch");
  Tensor out = v.value();
  std::vector<double> norms(static_cast<std::size_t>(o));
  for (int r = 0; r < o; ++r) {
    norms[static_cast<std::size_t>(r)] = v.value().matrix().row(r).norm();
    out.matrix().row(r) *= g.value()[static_cast<std::size_t>(r)] / norms[static_cast<std::size_t>(r)];
  }
  NodePtr nv = v.node(), ng = g.node();
  return make_result(std::move(out), {v, g}, [nv, ng, norms, o](Node& self) {
    for (int r = 0; r < o; ++r) {
      const double norm = norms[static_cast<std::size_t>(r)];
      const Eigen::RowVectorXd dir = nv->value.matrix().row(r) / norm;
      const Eigen::RowVectorXd dw = self.grad.matrix().row(r);
      const double proj = dw.dot(dir);
      if (ng->requires_grad) ng->grad_buffer()[static_cast<std::size_t>(r)] += proj;
      if (nv->requires_grad) {
        const double gain = ng->value[static_cast<std::size_t>(r)];
        nv->grad_buffer().matrix().row(r) += gain / norm * (dw - proj * dir);
      }
    }
  });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d");
  const int n = x.value().dim(0), c = x.value().dim(1), h = x.value().dim(2), w = x.value().dim(3);
  const int o = weight.value().dim(0), k = weight.value().dim(2);
  if (weight.value().dim(1) != c || weight.value().dim(3) != k) {
    throw ValidationError("conv2d: input " + shape_string(x.shape()) + " vs weight " + shape_string(weight.shape()));
  }
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (w + 2 * pad - k) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ValidationError("conv2d: input too small for kernel");
  const int patch = c * k * k;
  const int spatial = ho * wo;

  // cols[n] is patch x spatial
  auto cols = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * patch * spatial, 0.0);
  const double* xd = x.value().data();
  for (int b = 0; b < n; ++b) {
    double* col = cols->data() + static_cast<std::size_t>(b) * patch * spatial;
    for (int ch = 0; ch < c; ++ch) {
      const double* plane = xd + (static_cast<std::size_t>(b) * c + ch) * h * w;
      for (int ki = 0; ki < k; ++ki) {
        for (int kj = 0; kj < k; ++kj) {
          double* dst = col + static_cast<std::size_t>((ch * k + ki) * k + kj) * spatial;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride - pad + ki;
            if (iy < 0 || iy >= h) continue;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - pad + kj;
              if (ix >= 0 && ix < w) dst[oy * wo + ox] = plane[iy * w + ix];
            }
          }
        }
      }
    }
  }

  Tensor out({n, o, ho, wo});
  const ConstMatrixMap wmat(weight.value().data(), o, patch);
  for (int b = 0; b < n; ++b) {
    const ConstMatrixMap col(cols->data() + static_cast<std::size_t>(b) * patch * spatial, patch, spatial);
    MatrixMap dst(out.data() + static_cast<std::size_t>(b) * o * spatial, o, spatial);
    dst.noalias() = wmat * col;
    if (bias.defined()) {
      for (int oc = 0; oc < o; ++oc) dst.row(oc).array() += bias.value()[static_cast<std::size_t>(oc)];
    }
  }

  NodePtr nx = x.node(), nw = weight.node();
  NodePtr nb = bias.defined() ? bias.node() : nullptr;
  return make_result(
      std::move(out), {x, weight, bias.defined() ? bias : Var()},
      [nx, nw, nb, cols, n, c, h, w, o, k, stride, pad, ho, wo, patch, spatial](Node& self) {
        const ConstMatrixMap wmat(nw->value.data(), o, patch);
        RowMatrix dcol(patch, spatial);
        for (int b = 0; b < n; ++b) {
          const ConstMatrixMap g(self.grad.data() + static_cast<std::size_t>(b) * o * spatial, o, spatial);
          const ConstMatrixMap col(cols->data() + static_cast<std::size_t>(b) * patch * spatial, patch, spatial);
          if (nw->requires_grad) {
            MatrixMap(nw->grad_buffer().data(), o, patch).noalias() += g * col.transpose();
          }
          if (nb && nb->requires_grad) {
            for (int oc = 0; oc < o; ++oc) nb->grad_buffer()[static_cast<std::size_t>(oc)] += g.row(oc).sum();
          }
          if (nx->requires_grad) {
            dcol.noalias() = wmat.transpose() * g;
            double* dx = nx->grad_buffer().data();
            for (int ch = 0; ch < c; ++ch) {
              double* plane = dx + (static_cast<std::size_t>(b) * c + ch) * h * w;
              for (int ki = 0; ki < k; ++ki) {
                for (int kj = 0; kj < k; ++kj) {
                  const double* src = dcol.data() + static_cast<std::size_t>((ch * k + ki) * k + kj) * spatial;
                  for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < wo; ++ox) {
                      const int ix = ox * stride - pad + kj;
                      if (ix >= 0 && ix < w) plane[iy * w + ix] += src[oy * wo + ox];
                    }
                  }
                }
              }
            }
          }
        }
      });
}

Var channel_mean(const Var& x) {
  const ChannelLayout L = channel_layout(x.value());
  Tensor out({L.channels}, 0.0);
  const double* xd = x.value().data();
  for (int b = 0; b < L.outer; ++b)
    for (int ch = 0; ch < L.channels; ++ch)
      for (int i = 0; i < L.inner; ++i) out[static_cast<std::size_t>(ch)] += xd[(static_cast<std::size_t>(b) * L.channels + ch) * L.inner + i];
  for (double& v : out.values()) v /= L.count();
  NodePtr nx = x.node();
  return make_result(std::move(out), {x}, [nx, L](Node& self) {
    double* g = nx->grad_buffer().data();
    for (int b = 0; b < L.outer; ++b)
      for (int ch = 0; ch < L.channels; ++ch)
        for (int i = 0; i < L.inner; ++i)
          g[(static_cast<std::size_t>(b) * L.channels + ch) * L.inner + i] += self.grad[static_cast<std::size_t>(ch)] / L.count();
  });
}

namespace {

std::vector<double> channel_means(const Tensor& x, const ChannelLayout& L) {
  std::vector<double> m(static_cast<std::size_t>(L.channels), 0.0);
  const double* xd = x.data();
  for (int b = 0; b < L.outer; ++b)
    for (int ch = 0; ch < L.channels; ++ch) {
      const double* p = xd + (static_cast<std::size_t>(b) * L.channels + ch) * L.inner;
      for (int i = 0; i < L.inner; ++i) m[static_cast<std::size_t>(ch)] += p[i];
    }
  for (double& v : m) v /= L.count();
  return m;
}

std::vector<double> channel_vars(const Tensor& x, const ChannelLayout& L, const std::vector<double>& m) {
  std::vector<double> var(static_cast<std::size_t>(L.channels), 0.0);
  const double* xd = x.data();
  for (int b = 0; b < L.outer; ++b)
    for (int ch = 0; ch < L.channels; ++ch) {
      const double* p = xd + (static_cast<std::size_t>(b) * L.channels + ch) * L.inner;
      const double mu = m[static_cast<std::size_t>(ch)];
      for (int i = 0; i < L.inner; ++i) var[static_cast<std::size_t>(ch)] += (p[i] - mu) * (p[i] - mu);
    }
  for (double& v : var) v /= L.count();
  return var;
}

}  // namespace

Var channel_var(const Var& x) {
  const ChannelLayout L = channel_layout(x.value());
  const std::vector<double> m = channel_means(x.value(), L);
  Tensor out({L.channels}, channel_vars(x.value(), L, m));
  NodePtr nx = x.node();
  return make_result(std::move(out), {x}, [nx, L, m](Node& self) {
    double* g = nx->grad_buffer().data();
    const double* xd = nx->value.data();
    for (int b = 0; b < L.outer; ++b)
      for (int ch = 0; ch < L.channels; ++ch) {
        const std::size_t base = (static_cast<std::size_t>(b) * L.channels + ch) * L.inner;
        const double coeff = 2.0 * self.grad[static_cast<std::size_t>(ch)] / L.count();
        for (int i = 0; i < L.inner; ++i) g[base + i] += coeff * (xd[base + i] - m[static_cast<std::size_t>(ch)]);
      }
  });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, const NormStats& running, bool training, double eps,
               NormStats* update, double momentum) {
  const ChannelLayout L = channel_layout(x.value());
  const std::size_t C = static_cast<std::size_t>(L.channels);
  if (gamma.value().size() != C || beta.value().size() != C) {
    throw ValidationError("batch_norm: parameter size mismatch for input " + shape_string(x.shape()));
  }
  std::vector<double> mu, var;
  if (training) {
    mu = channel_means(x.value(), L);
    var = channel_vars(x.value(), L, mu);
    if (update) {
      const double n = L.count();
      for (std::size_t ch = 0; ch < C; ++ch) {
        const double unbiased = n > 1 ? var[ch] * n / (n - 1) : var[ch];
        update->mean[ch] = (1.0 - momentum) * update->mean[ch] + momentum * mu[ch];
        update->var[ch] = (1.0 - momentum) * update->var[ch] + momentum * unbiased;
      }
    }
  } else {
    if (running.mean.size() != C) throw ValidationError("batch_norm: running statistics size mismatch");
    mu.assign(running.mean.values().begin(), running.mean.values().end());
    var.assign(running.var.values().begin(), running.var.values().end());
  }
  std::vector<double> inv_std(C);
  for (std::size_t ch = 0; ch < C; ++ch) inv_std[ch] = 1.0 / std::sqrt(var[ch] + eps);

  auto xhat = std::make_shared<Tensor>(x.shape());
  Tensor out(x.shape());
  const double* xd = x.value().data();
  for (int b = 0; b < L.outer; ++b)
    for (std::size_t ch = 0; ch < C; ++ch) {
      const std::size_t base = (static_cast<std::size_t>(b) * C + ch) * L.inner;
      for (int i = 0; i < L.inner; ++i) {
        const double h = (xd[base + i] - mu[ch]) * inv_std[ch];
        (*xhat)[base + i] = h;
        out[base + i] = gamma.value()[ch] * h + beta.value()[ch];
      }
    }

  NodePtr nx = x.node(), ng = gamma.node(), nb = beta.node();
  return make_result(std::move(out), {x, gamma, beta}, [nx, ng, nb, xhat, inv_std, L, C, training](Node& self) {
    std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
    for (int b = 0; b < L.outer; ++b)
      for (std::size_t ch = 0; ch < C; ++ch) {
        const std::size_t base = (static_cast<std::size_t>(b) * C + ch) * L.inner;
        for (int i = 0; i < L.inner; ++i) {
          sum_dy[ch] += self.grad[base + i];
          sum_dy_xhat[ch] += self.grad[base + i] * (*xhat)[base + i];
        }
      }
    if (ng->requires_grad) {
      for (std::size_t ch = 0; ch < C; ++ch) ng->grad_buffer()[ch] += sum_dy_xhat[ch];
    }
    if (nb->requires_grad) {
      for (std::size_t ch = 0; ch < C; ++ch) nb->grad_buffer()[ch] += sum_dy[ch];
    }
    if (!nx->requires_grad) return;
    double* dx = nx->grad_buffer().data();
    const double n = L.count();
    for (int b = 0; b < L.outer; ++b)
      for (std::size_t ch = 0; ch < C; ++ch) {
        const std::size_t base = (static_cast<std::size_t>(b) * C + ch) * L.inner;
        const double g = ng->value[ch];
        for (int i = 0; i < L.inner; ++i) {
          const double dy = self.grad[base + i];
          if (training) {
            dx[base + i] += g * inv_std[ch] / n * (n * dy - sum_dy[ch] - (*xhat)[base + i] * sum_dy_xhat[ch]);
          } else {
            dx[base + i] += g * inv_std[ch] * dy;
          }
        }
      }
  });
}

namespace {

Tensor softmax_values(const Tensor& logits) {
  Tensor out = logits;
  auto m = out.matrix();
  for (int r = 0; r < m.rows(); ++r) {
    const double mx = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - mx).exp();
    m.row(r) /= m.row(r).sum();
  }
  return out;
}

}  // namespace

Var softmax(const Var& logits) {
  require_rank(logits, 2, "softmax");
  Tensor out = softmax_values(logits.value());
  NodePtr nx = logits.node();
  auto probs = std::make_shared<Tensor>(out);
  return make_result(std::move(out), {logits}, [nx, probs](Node& self) {
    const auto p = probs->matrix();
    const auto g = self.grad.matrix();
    const Eigen::VectorXd dot = (p.array() * g.array()).rowwise().sum();
    auto dx = nx->grad_buffer().matrix();
    for (int r = 0; r < p.rows(); ++r) dx.row(r).array() += p.row(r).array() * (g.row(r).array() - dot(r));
  });
}

Var log_softmax(const Var& logits) {
  require_rank(logits, 2, "log_softmax");
  Tensor out = logits.value();
  auto m = out.matrix();
  for (int r = 0; r < m.rows(); ++r) {
    const double mx = m.row(r).maxCoeff();
    const double lse = mx + std::log((m.row(r).array() - mx).exp().sum());
    m.row(r).array() -= lse;
  }
  auto probs = std::make_shared<Tensor>(out);
  for (double& v : probs->values()) v = std::exp(v);
  NodePtr nx = logits.node();
  return make_result(std::move(out), {logits}, [nx, probs](Node& self) {
    const auto g = self.grad.matrix();
    const Eigen::VectorXd gsum = g.rowwise().sum();
    auto dx = nx->grad_buffer().matrix();
    const auto p = probs->matrix();
    for (int r = 0; r < p.rows(); ++r) dx.row(r) += g.row(r) - gsum(r) * p.row(r);
  });
}

Var l2_normalize_rows(const Var& x, double eps) {
  require_rank(x, 2, "l2_normalize_rows");
  Tensor out = x.value();
  auto m = out.matrix();
  std::vector<double> norms(static_cast<std::size_t>(m.rows()));
  for (int r = 0; r < m.rows(); ++r) {
    norms[static_cast<std::size_t>(r)] = std::max(m.row(r).norm(), eps);
    m.row(r) /= norms[static_cast<std::size_t>(r)];
  }
  auto y = std::make_shared<Tensor>(out);
  NodePtr nx = x.node();
  return make_result(std::move(out), {x}, [nx, y, norms](Node& self) {
    const auto ym = y->matrix();
    const auto g = self.grad.matrix();
    auto dx = nx->grad_buffer().matrix();
    for (int r = 0; r < ym.rows(); ++r) {
      const double proj = g.row(r).dot(ym.row(r));
      dx.row(r) += (g.row(r) - proj * ym.row(r)) / norms[static_cast<std::size_t>(r)];
    }
  });
}

Var cross_entropy(const Var& logits, std::span<const int> labels, double smoothing) {
  require_rank(logits, 2, "cross_entropy");
  const int n = logits.value().rows();
  const int k = logits.value().cols();
  if (static_cast<int>(labels.size()) != n) {
    throw ValidationError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                          " rows");
  }
  if (n == 0) throw ValidationError("cross_entropy: empty batch");
  auto target = std::make_shared<Tensor>(Shape{n, k}, smoothing / k);
  for (int r = 0; r < n; ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= k) throw ValidationError("cross_entropy: label " + std::to_string(y) + " outside [0," + std::to_string(k) + ")");
    (*target)[static_cast<std::size_t>(r) * k + y] += 1.0 - smoothing;
  }
  double loss = 0.0;
  const auto z = logits.value().matrix();
  for (int r = 0; r < n; ++r) {
    const double mx = z.row(r).maxCoeff();
    const double lse = mx + std::log((z.row(r).array() - mx).exp().sum());
    for (int c = 0; c < k; ++c) {
      const double t = (*target)[static_cast<std::size_t>(r) * k + c];
      if (t != 0.0) loss -= t * (z(r, c) - lse);
    }
  }
  loss /= n;
  NodePtr nx = logits.node();
  return make_result(Tensor::scalar(loss), {logits}, [nx, target, n](Node& self) {
    Tensor p = softmax_values(nx->value);
    nx->grad_buffer().matrix() += self.grad[0] / n * (p.matrix() - target->matrix());
  });
}

Var bce_with_logits(const Var& logits, std::span<const double> targets) {
  const std::size_t n = logits.value().size();
  if (targets.size() != n) throw ValidationError("bce_with_logits: target count mismatch");
  if (n == 0) throw ValidationError("bce_with_logits: empty batch");
  std::vector<double> y(targets.begin(), targets.end());
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = logits.value()[i];
    loss += std::max(z, 0.0) - z * y[i] + std::log1p(std::exp(-std::abs(z)));
  }
  loss /= static_cast<double>(n);
  NodePtr nx = logits.node();
  return make_result(Tensor::scalar(loss), {logits}, [nx, y, n](Node& self) {
    Tensor& g = nx->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) {
      const double s = 1.0 / (1.0 + std::exp(-nx->value[i]));
      g[i] += self.grad[0] * (s - y[i]) / static_cast<double>(n);
    }
  });
}

Var grad_reverse(const Var& x, double coeff) {
  NodePtr nx = x.node();
  return make_result(x.value(), {x}, [nx, coeff](Node& self) { axpy(nx->grad_buffer(), self.grad, -coeff); });
}

Var total_variation(const Var& images) {
  require_rank(images, 4, "total_variation");
  const int n = images.value().dim(0), c = images.value().dim(1), h = images.value().dim(2), w = images.value().dim(3);
  const double count_x = static_cast<double>(n) * c * h * (w - 1);
  const double count_y = static_cast<double>(n) * c * (h - 1) * w;
  const double* d = images.value().data();
  double tv = 0.0;
  double sx = 0.0, sy = 0.0;
  for (int p = 0; p < n * c; ++p) {
    const double* plane = d + static_cast<std::size_t>(p) * h * w;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        if (j + 1 < w) sx += (plane[i * w + j + 1] - plane[i * w + j]) * (plane[i * w + j + 1] - plane[i * w + j]);
        if (i + 1 < h) sy += (plane[(i + 1) * w + j] - plane[i * w + j]) * (plane[(i + 1) * w + j] - plane[i * w + j]);
      }
  }
  if (count_x > 0) tv += sx / count_x;
  if (count_y > 0) tv += sy / count_y;
  NodePtr nx = images.node();
  return make_result(Tensor::scalar(tv), {images}, [nx, n, c, h, w, count_x, count_y](Node& self) {
    const double g0 = self.grad[0];
    const double* d = nx->value.data();
    double* g = nx->grad_buffer().data();
    for (int p = 0; p < n * c; ++p) {
      const std::size_t off = static_cast<std::size_t>(p) * h * w;
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          const std::size_t a = off + static_cast<std::size_t>(i * w + j);
          if (j + 1 < w) {
            const double diff = 2.0 * g0 * (d[a + 1] - d[a]) / count_x;
            g[a + 1] += diff;
            g[a] -= diff;
          }
          if (i + 1 < h) {
            const double diff = 2.0 * g0 * (d[a + static_cast<std::size_t>(w)] - d[a]) / count_y;
            g[a + static_cast<std::size_t>(w)] += diff;
            g[a] -= diff;
          }
        }
    }
  });
}

}  // namespace ops
}  // namespace trida
