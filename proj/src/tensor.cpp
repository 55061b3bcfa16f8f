#include "sgg/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <thread>
#include <unordered_set>

namespace sgg {

namespace {

ExecMode g_mode = ExecMode::kReference;
std::atomic<uint64_t> g_next_id{1};

void round_to_f32(std::vector<double>& v) {
  for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

std::vector<double> finalize(std::vector<double> v) {
  if (g_mode == ExecMode::kFast) round_to_f32(v);
  return v;
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

void require_2d(const Tensor& t, const char* op) {
  if (t.rank() != 2)
    throw DimensionError(std::string(op) + ": expected a 2-d tensor, got shape " +
                         shape_str(t.shape()));
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

// C[m,n] += A[m,k] * B[k,n], double accumulation, fixed order.
void matmul_kernel_ref(int m, int k, int n, const double* a, const double* b, double* c) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<int64_t>(i) * k;
    double* crow = c + static_cast<int64_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + static_cast<int64_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// Float accumulation over a row range; used by the fast mode.
void matmul_kernel_f32(int i0, int i1, int k, int n, const double* a, const double* b,
                       double* c) {
  std::vector<float> acc(n);
  for (int i = i0; i < i1; ++i) {
    const double* arow = a + static_cast<int64_t>(i) * k;
    std::fill(acc.begin(), acc.end(), 0.0f);
    for (int p = 0; p < k; ++p) {
      float av = static_cast<float>(arow[p]);
      const double* brow = b + static_cast<int64_t>(p) * n;
      for (int j = 0; j < n; ++j) acc[j] += av * static_cast<float>(brow[j]);
    }
    double* crow = c + static_cast<int64_t>(i) * n;
    for (int j = 0; j < n; ++j) crow[j] = static_cast<double>(acc[j]);
  }
}

}  // namespace

ExecMode exec_mode() { return g_mode; }
void set_exec_mode(ExecMode mode) { g_mode = mode; }

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw DimensionError("shape extents must be positive, got " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

static std::shared_ptr<TensorNode> new_node(Shape shape, std::vector<double> data) {
  auto node = std::make_shared<TensorNode>();
  int64_t n = shape_numel(shape);
  if (static_cast<int64_t>(data.size()) != n)
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->id = g_next_id.fetch_add(1);
  return node;
}

Tensor Tensor::zeros(Shape shape) {
  int64_t n = shape_numel(shape);
  return Tensor(new_node(std::move(shape), std::vector<double>(n, 0.0)));
}

Tensor Tensor::full(Shape shape, double value) {
  int64_t n = shape_numel(shape);
  return Tensor(new_node(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
  return Tensor(new_node(std::move(shape), std::move(data)));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

int Tensor::rows() const {
  require_2d(*this, "rows");
  return node_->shape[0];
}

int Tensor::cols() const {
  require_2d(*this, "cols");
  return node_->shape[1];
}

double Tensor::value() const {
  if (size() != 1)
    throw ContractError("value(): tensor has " + std::to_string(size()) + " elements");
  return node_->data[0];
}

double Tensor::at(int r, int c) const {
  require_2d(*this, "at");
  return node_->data[static_cast<int64_t>(r) * cols() + c];
}

Tensor& Tensor::set_requires_grad(bool flag) {
  if (flag && node_->backward_fn)
    throw ContractError("set_requires_grad: tensor is already an op output");
  node_->requires_grad = flag;
  return *this;
}

const std::vector<double>& Tensor::grad() const {
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
               std::function<void(TensorNode&)> backward_fn) {
  auto node = new_node(std::move(shape), std::move(data));
  bool needs = false;
  for (const Tensor& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (Tensor& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(node);
}

// ---------------------------------------------------------------------------
// matmul / transpose

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner extents disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  const int m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(static_cast<int64_t>(m) * n, 0.0);
  if (g_mode == ExecMode::kReference) {
    matmul_kernel_ref(m, k, n, a.data().data(), b.data().data(), out.data());
  } else {
    const int64_t work = static_cast<int64_t>(m) * k * n;
    unsigned hw = std::thread::hardware_concurrency();
    int nthreads = (work > (1 << 18) && hw > 1) ? static_cast<int>(std::min(4u, hw)) : 1;
    if (nthreads <= 1 || m < 2 * nthreads) {
      matmul_kernel_f32(0, m, k, n, a.data().data(), b.data().data(), out.data());
    } else {
      std::vector<std::thread> threads;
      int chunk = (m + nthreads - 1) / nthreads;
      for (int t = 0; t < nthreads; ++t) {
        int i0 = t * chunk, i1 = std::min(m, i0 + chunk);
        if (i0 >= i1) break;
        threads.emplace_back(matmul_kernel_f32, i0, i1, k, n, a.data().data(),
                             b.data().data(), out.data());
      }
      for (auto& th : threads) th.join();
    }
  }
  return make_op({m, n}, std::move(out), {a, b}, [m, k, n](TensorNode& self) {
    const auto& g = self.grad;
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      // dA[i,p] += sum_j g[i,j] * B[p,j]
      for (int i = 0; i < m; ++i) {
        const double* grow = g.data() + static_cast<int64_t>(i) * n;
        double* darow = pa.grad.data() + static_cast<int64_t>(i) * k;
        for (int p = 0; p < k; ++p) {
          const double* brow = pb.data.data() + static_cast<int64_t>(p) * n;
          double s = 0.0;
          for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
          darow[p] += s;
        }
      }
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      // dB[p,j] += sum_i A[i,p] * g[i,j]
      for (int i = 0; i < m; ++i) {
        const double* arow = pa.data.data() + static_cast<int64_t>(i) * k;
        const double* grow = g.data() + static_cast<int64_t>(i) * n;
        for (int p = 0; p < k; ++p) {
          double av = arow[p];
          if (av == 0.0) continue;
          double* dbrow = pb.grad.data() + static_cast<int64_t>(p) * n;
          for (int j = 0; j < n; ++j) dbrow[j] += av * grow[j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const int m = a.rows(), n = a.cols();
  std::vector<double> out(static_cast<int64_t>(m) * n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<int64_t>(j) * m + i] = a.data()[static_cast<int64_t>(i) * n + j];
  return make_op({n, m}, finalize(std::move(out)), {a}, [m, n](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < m; ++i)
        p.grad[static_cast<int64_t>(i) * n + j] += self.grad[static_cast<int64_t>(j) * m + i];
  });
}

// ---------------------------------------------------------------------------
// pointwise arithmetic

Tensor add(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b))
    throw DimensionError("add: shapes disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  std::vector<double> out(a.size());
  for (int64_t i = 0; i < a.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_op(a.shape(), finalize(std::move(out)), {a, b}, [](TensorNode& self) {
    for (int side = 0; side < 2; ++side) {
      auto& p = *self.parents[side];
      if (!p.requires_grad) continue;
      p.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    }
  });
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  require_2d(a, "add_rowvec");
  const int n = a.rows(), d = a.cols();
  bool ok = (v.rank() == 1 && v.dim(0) == d) ||
            (v.rank() == 2 && v.dim(0) == 1 && v.dim(1) == d);
  if (!ok)
    throw DimensionError("add_rowvec: vector shape " + shape_str(v.shape()) +
                         " does not broadcast over " + shape_str(a.shape()));
  std::vector<double> out(a.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      out[static_cast<int64_t>(i) * d + j] = a.data()[static_cast<int64_t>(i) * d + j] + v.data()[j];
  return make_op(a.shape(), finalize(std::move(out)), {a, v}, [n, d](TensorNode& self) {
    auto& pa = *self.parents[0];
    auto& pv = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    }
    if (pv.requires_grad) {
      pv.ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) pv.grad[j] += self.grad[static_cast<int64_t>(i) * d + j];
    }
  });
}

Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (int64_t i = 0; i < a.size(); ++i) out[i] = a.data()[i] + c;
  return make_op(a.shape(), finalize(std::move(out)), {a}, [](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b))
    throw DimensionError("sub: shapes disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  std::vector<double> out(a.size());
  for (int64_t i = 0; i < a.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_op(a.shape(), finalize(std::move(out)), {a, b}, [](TensorNode& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b))
    throw DimensionError("mul: shapes disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  std::vector<double> out(a.size());
  for (int64_t i = 0; i < a.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_op(a.shape(), finalize(std::move(out)), {a, b}, [](TensorNode& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.data[i];
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b))
    throw DimensionError("div: shapes disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  std::vector<double> out(a.size());
  for (int64_t i = 0; i < a.size(); ++i) {
    if (b.data()[i] == 0.0) throw NumericError("div: zero denominator at index " + std::to_string(i));
    out[i] = a.data()[i] / b.data()[i];
  }
  return make_op(a.shape(), finalize(std::move(out)), {a, b}, [](TensorNode& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] / pb.data[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        pb.grad[i] -= self.grad[i] * pa.data[i] / (pb.data[i] * pb.data[i]);
    }
  });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (int64_t i = 0; i < a.size(); ++i) out[i] = a.data()[i] * c;
  return make_op(a.shape(), finalize(std::move(out)), {a}, [c](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * c;
  });
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
  if (s.size() != 1)
    throw DimensionError("scale_by: scale must be a single element, got " + shape_str(s.shape()));
  const double c = s.data()[0];
  std::vector<double> out(a.size());
  for (int64_t i = 0; i < a.size(); ++i) out[i] = a.data()[i] * c;
  return make_op(a.shape(), finalize(std::move(out)), {a, s}, [c](TensorNode& self) {
    auto& pa = *self.parents[0];
    auto& ps = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * c;
    }
    if (ps.requires_grad) {
      ps.ensure_grad();
      double s_acc = 0.0;
      for (size_t i = 0; i < self.grad.size(); ++i) s_acc += self.grad[i] * pa.data[i];
      ps.grad[0] += s_acc;
    }
  });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

// ---------------------------------------------------------------------------
// pointwise nonlinearities

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (int64_t i = 0; i < a.size(); ++i) out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  return make_op(a.shape(), finalize(std::move(out)), {a}, [](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      if (p.data[i] > 0.0) p.grad[i] += self.grad[i];
  });
}

Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.size());
  for (int64_t i = 0; i < a.size(); ++i) {
    double x = a.data()[i];
    out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return make_op(a.shape(), finalize(std::move(out)), {a}, [](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      double y = self.data[i];
      p.grad[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

Tensor exp(const Tensor& a) {
  std::vector<double> out(a.size());
  for (int64_t i = 0; i < a.size(); ++i) out[i] = std::exp(a.data()[i]);
  return make_op(a.shape(), finalize(std::move(out)), {a}, [](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * self.data[i];
  });
}

Tensor log(const Tensor& a) {
  std::vector<double> out(a.size());
  for (int64_t i = 0; i < a.size(); ++i) {
    if (!(a.data()[i] > 0.0))
      throw NumericError("log: non-positive entry " + std::to_string(a.data()[i]) +
                         " at index " + std::to_string(i));
    out[i] = std::log(a.data()[i]);
  }
  return make_op(a.shape(), finalize(std::move(out)), {a}, [](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] / p.data[i];
  });
}

Tensor abs(const Tensor& a) {
  std::vector<double> out(a.size());
  for (int64_t i = 0; i < a.size(); ++i) out[i] = std::fabs(a.data()[i]);
  return make_op(a.shape(), finalize(std::move(out)), {a}, [](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      double x = p.data[i];
      if (x > 0.0)
        p.grad[i] += self.grad[i];
      else if (x < 0.0)
        p.grad[i] -= self.grad[i];
    }
  });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b))
    throw DimensionError("minimum: shapes disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  std::vector<double> out(a.size());
  for (int64_t i = 0; i < a.size(); ++i) out[i] = std::min(a.data()[i], b.data()[i]);
  return make_op(a.shape(), finalize(std::move(out)), {a, b}, [](TensorNode& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) pa.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      // ties route to the first argument
      if (pa.data[i] <= pb.data[i]) {
        if (pa.requires_grad) pa.grad[i] += self.grad[i];
      } else if (pb.requires_grad) {
        pb.grad[i] += self.grad[i];
      }
    }
  });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b))
    throw DimensionError("maximum: shapes disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  std::vector<double> out(a.size());
  for (int64_t i = 0; i < a.size(); ++i) out[i] = std::max(a.data()[i], b.data()[i]);
  return make_op(a.shape(), finalize(std::move(out)), {a, b}, [](TensorNode& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) pa.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.data[i] >= pb.data[i]) {
        if (pa.requires_grad) pa.grad[i] += self.grad[i];
      } else if (pb.requires_grad) {
        pb.grad[i] += self.grad[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// softmax family

namespace {

// Normalizes a 1-d or 2-d tensor to (rows, cols, row-major) for row ops.
struct RowView {
  int n;
  int d;
};

RowView row_view(const Tensor& t, int axis, const char* op) {
  if (t.rank() == 1) {
    if (axis != 0)
      throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                           " invalid for shape " + shape_str(t.shape()));
    return {1, t.dim(0)};
  }
  require_2d(t, op);
  if (axis != 0 && axis != 1)
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " invalid for shape " + shape_str(t.shape()));
  return {t.dim(0), t.dim(1)};
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) {
  for (int64_t i = 0; i < a.size(); ++i)
    if (!std::isfinite(a.data()[i]))
      throw NumericError("softmax: non-finite input at index " + std::to_string(i));
  RowView rv = row_view(a, axis == 0 && a.rank() == 1 ? 0 : axis, "softmax");
  bool along_cols = (a.rank() == 1) || (axis == 1);
  Tensor src = along_cols ? a : transpose(a);
  int n = along_cols ? rv.n : rv.d;
  int d = along_cols ? rv.d : rv.n;
  std::vector<double> out(src.size());
  const auto& x = src.data();
  for (int i = 0; i < n; ++i) {
    const double* row = x.data() + static_cast<int64_t>(i) * d;
    double m = row[0];
    for (int j = 1; j < d; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += std::exp(row[j] - m);
    for (int j = 0; j < d; ++j) out[static_cast<int64_t>(i) * d + j] = std::exp(row[j] - m) / s;
  }
  Tensor y = make_op(src.shape(), finalize(std::move(out)), {src}, [n, d](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int i = 0; i < n; ++i) {
      const double* yrow = self.data.data() + static_cast<int64_t>(i) * d;
      const double* grow = self.grad.data() + static_cast<int64_t>(i) * d;
      double dot = 0.0;
      for (int j = 0; j < d; ++j) dot += yrow[j] * grow[j];
      double* prow = p.grad.data() + static_cast<int64_t>(i) * d;
      for (int j = 0; j < d; ++j) prow[j] += yrow[j] * (grow[j] - dot);
    }
  });
  return along_cols ? y : transpose(y);
}

Tensor log_softmax(const Tensor& a, int axis) {
  for (int64_t i = 0; i < a.size(); ++i)
    if (!std::isfinite(a.data()[i]))
      throw NumericError("log_softmax: non-finite input at index " + std::to_string(i));
  RowView rv = row_view(a, axis == 0 && a.rank() == 1 ? 0 : axis, "log_softmax");
  if (a.rank() == 2 && axis != 1)
    throw DimensionError("log_softmax: only axis 1 supported for 2-d input");
  int n = rv.n, d = rv.d;
  std::vector<double> out(a.size());
  const auto& x = a.data();
  for (int i = 0; i < n; ++i) {
    const double* row = x.data() + static_cast<int64_t>(i) * d;
    double m = row[0];
    for (int j = 1; j < d; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += std::exp(row[j] - m);
    double lse = m + std::log(s);
    for (int j = 0; j < d; ++j) out[static_cast<int64_t>(i) * d + j] = row[j] - lse;
  }
  return make_op(a.shape(), finalize(std::move(out)), {a}, [n, d](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int i = 0; i < n; ++i) {
      const double* lrow = self.data.data() + static_cast<int64_t>(i) * d;
      const double* grow = self.grad.data() + static_cast<int64_t>(i) * d;
      double gsum = 0.0;
      for (int j = 0; j < d; ++j) gsum += grow[j];
      double* prow = p.grad.data() + static_cast<int64_t>(i) * d;
      for (int j = 0; j < d; ++j) prow[j] += grow[j] - std::exp(lrow[j]) * gsum;
    }
  });
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return make_op({1}, finalize({s}), {a}, [](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  const double inv = 1.0 / static_cast<double>(a.size());
  return make_op({1}, finalize({s * inv}), {a}, [inv](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += self.grad[0] * inv;
  });
}

Tensor sum_axis(const Tensor& a, int axis) {
  require_2d(a, "sum_axis");
  if (axis != 0 && axis != 1)
    throw DimensionError("sum_axis: axis " + std::to_string(axis) + " invalid");
  const int n = a.rows(), d = a.cols();
  if (axis == 1) {
    std::vector<double> out(n, 0.0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) out[i] += a.data()[static_cast<int64_t>(i) * d + j];
    return make_op({n, 1}, finalize(std::move(out)), {a}, [n, d](TensorNode& self) {
      auto& p = *self.parents[0];
      if (!p.requires_grad) return;
      p.ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) p.grad[static_cast<int64_t>(i) * d + j] += self.grad[i];
    });
  }
  std::vector<double> out(d, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out[j] += a.data()[static_cast<int64_t>(i) * d + j];
  return make_op({1, d}, finalize(std::move(out)), {a}, [n, d](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) p.grad[static_cast<int64_t>(i) * d + j] += self.grad[j];
  });
}

// ---------------------------------------------------------------------------
// layout ops

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  if (axis != 0 && axis != 1)
    throw DimensionError("concat: axis " + std::to_string(axis) + " invalid");
  for (const Tensor& p : parts) require_2d(p, "concat");
  const int fixed = axis == 0 ? parts[0].cols() : parts[0].rows();
  int total = 0;
  for (const Tensor& p : parts) {
    int f = axis == 0 ? p.cols() : p.rows();
    if (f != fixed)
      throw DimensionError("concat: axis mismatch, " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    total += axis == 0 ? p.rows() : p.cols();
  }
  int out_rows = axis == 0 ? total : parts[0].rows();
  int out_cols = axis == 0 ? parts[0].cols() : total;
  std::vector<double> out(static_cast<int64_t>(out_rows) * out_cols);
  if (axis == 0) {
    int64_t off = 0;
    for (const Tensor& p : parts) {
      std::copy(p.data().begin(), p.data().end(), out.begin() + off);
      off += p.size();
    }
  } else {
    int coff = 0;
    for (const Tensor& p : parts) {
      int pc = p.cols();
      for (int i = 0; i < out_rows; ++i)
        std::copy(p.data().begin() + static_cast<int64_t>(i) * pc,
                  p.data().begin() + static_cast<int64_t>(i + 1) * pc,
                  out.begin() + static_cast<int64_t>(i) * out_cols + coff);
      coff += pc;
    }
  }
  std::vector<Tensor> parents = parts;
  return make_op({out_rows, out_cols}, finalize(std::move(out)), std::move(parents),
                 [axis, out_cols](TensorNode& self) {
                   int64_t roff = 0;
                   int coff = 0;
                   for (auto& pp : self.parents) {
                     auto& p = *pp;
                     int pr = p.shape[0], pc = p.shape[1];
                     if (p.requires_grad) {
                       p.ensure_grad();
                       if (axis == 0) {
                         for (int64_t i = 0; i < static_cast<int64_t>(pr) * pc; ++i)
                           p.grad[i] += self.grad[roff + i];
                       } else {
                         for (int i = 0; i < pr; ++i)
                           for (int j = 0; j < pc; ++j)
                             p.grad[static_cast<int64_t>(i) * pc + j] +=
                                 self.grad[static_cast<int64_t>(i) * out_cols + coff + j];
                       }
                     }
                     roff += static_cast<int64_t>(pr) * pc;
                     coff += pc;
                   }
                 });
}

Tensor slice(const Tensor& a, int axis, int start, int len) {
  require_2d(a, "slice");
  if (axis != 0 && axis != 1)
    throw DimensionError("slice: axis " + std::to_string(axis) + " invalid");
  const int extent = a.dim(axis);
  if (start < 0 || len <= 0 || start + len > extent)
    throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of extent " +
                         std::to_string(extent));
  const int n = a.rows(), d = a.cols();
  if (axis == 0) {
    std::vector<double> out(a.data().begin() + static_cast<int64_t>(start) * d,
                            a.data().begin() + static_cast<int64_t>(start + len) * d);
    return make_op({len, d}, finalize(std::move(out)), {a}, [start, d](TensorNode& self) {
      auto& p = *self.parents[0];
      if (!p.requires_grad) return;
      p.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        p.grad[static_cast<int64_t>(start) * d + i] += self.grad[i];
    });
  }
  std::vector<double> out(static_cast<int64_t>(n) * len);
  for (int i = 0; i < n; ++i)
    std::copy(a.data().begin() + static_cast<int64_t>(i) * d + start,
              a.data().begin() + static_cast<int64_t>(i) * d + start + len,
              out.begin() + static_cast<int64_t>(i) * len);
  return make_op({n, len}, finalize(std::move(out)), {a}, [start, len, n, d](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < len; ++j)
        p.grad[static_cast<int64_t>(i) * d + start + j] += self.grad[static_cast<int64_t>(i) * len + j];
  });
}

Tensor row_gather(const Tensor& a, const std::vector<int>& rows) {
  require_2d(a, "row_gather");
  const int n = a.rows(), d = a.cols();
  for (int r : rows)
    if (r < 0 || r >= n)
      throw DimensionError("row_gather: row " + std::to_string(r) + " out of " + std::to_string(n));
  std::vector<double> out(static_cast<int64_t>(rows.size()) * d);
  for (size_t i = 0; i < rows.size(); ++i)
    std::copy(a.data().begin() + static_cast<int64_t>(rows[i]) * d,
              a.data().begin() + static_cast<int64_t>(rows[i] + 1) * d,
              out.begin() + static_cast<int64_t>(i) * d);
  return make_op({static_cast<int>(rows.size()), d}, finalize(std::move(out)), {a},
                 [rows, d](TensorNode& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   for (size_t i = 0; i < rows.size(); ++i)
                     for (int j = 0; j < d; ++j)
                       p.grad[static_cast<int64_t>(rows[i]) * d + j] +=
                           self.grad[static_cast<int64_t>(i) * d + j];
                 });
}

Tensor col_pick(const Tensor& a, const std::vector<int>& cols) {
  require_2d(a, "col_pick");
  const int n = a.rows(), d = a.cols();
  if (static_cast<int>(cols.size()) != n)
    throw DimensionError("col_pick: need one column index per row, got " +
                         std::to_string(cols.size()) + " for " + std::to_string(n) + " rows");
  for (int c : cols)
    if (c < 0 || c >= d)
      throw DimensionError("col_pick: column " + std::to_string(c) + " out of " + std::to_string(d));
  std::vector<double> out(n);
  for (int i = 0; i < n; ++i) out[i] = a.data()[static_cast<int64_t>(i) * d + cols[i]];
  return make_op({n, 1}, finalize(std::move(out)), {a}, [cols, d](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < cols.size(); ++i)
      p.grad[static_cast<int64_t>(i) * d + cols[i]] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// normalization

Tensor l2_normalize(const Tensor& a) {
  const bool vec = a.rank() == 1;
  const int n = vec ? 1 : a.rows();
  const int d = vec ? a.dim(0) : a.cols();
  constexpr double kZeroTol = 1e-12;
  std::vector<double> out(a.size());
  std::vector<double> norms(n, 0.0);
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    const double* row = a.data().data() + static_cast<int64_t>(i) * d;
    for (int j = 0; j < d; ++j) s += row[j] * row[j];
    double nr = std::sqrt(s);
    norms[i] = nr;
    for (int j = 0; j < d; ++j)
      out[static_cast<int64_t>(i) * d + j] = nr < kZeroTol ? 0.0 : row[j] / nr;
  }
  return make_op(a.shape(), finalize(std::move(out)), {a}, [n, d, norms](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int i = 0; i < n; ++i) {
      double nr = norms[i];
      if (nr < kZeroTol) continue;  // zero rows: zero output, zero gradient
      const double* row = p.data.data() + static_cast<int64_t>(i) * d;
      const double* grow = self.grad.data() + static_cast<int64_t>(i) * d;
      double dot = 0.0;
      for (int j = 0; j < d; ++j) dot += row[j] * grow[j];
      double inv = 1.0 / nr;
      double inv3 = inv * inv * inv;
      double* prow = p.grad.data() + static_cast<int64_t>(i) * d;
      for (int j = 0; j < d; ++j) prow[j] += grow[j] * inv - row[j] * dot * inv3;
    }
  });
}

Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps) {
  require_2d(a, "layer_norm");
  const int n = a.rows(), d = a.cols();
  auto check_param = [&](const Tensor& t, const char* name) {
    bool ok = (t.rank() == 1 && t.dim(0) == d);
    if (!ok)
      throw DimensionError(std::string("layer_norm: ") + name + " shape " + shape_str(t.shape()) +
                           " does not match width " + std::to_string(d));
  };
  check_param(gamma, "gamma");
  check_param(beta, "beta");
  std::vector<double> out(a.size());
  std::vector<double> inv_std(n), means(n);
  for (int i = 0; i < n; ++i) {
    const double* row = a.data().data() + static_cast<int64_t>(i) * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += row[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= d;
    double is = 1.0 / std::sqrt(var + eps);
    means[i] = mu;
    inv_std[i] = is;
    for (int j = 0; j < d; ++j)
      out[static_cast<int64_t>(i) * d + j] = gamma.data()[j] * (row[j] - mu) * is + beta.data()[j];
  }
  return make_op(a.shape(), finalize(std::move(out)), {a, gamma, beta},
                 [n, d, inv_std, means](TensorNode& self) {
                   auto& px = *self.parents[0];
                   auto& pg = *self.parents[1];
                   auto& pb = *self.parents[2];
                   if (px.requires_grad) px.ensure_grad();
                   if (pg.requires_grad) pg.ensure_grad();
                   if (pb.requires_grad) pb.ensure_grad();
                   for (int i = 0; i < n; ++i) {
                     const double* row = px.data.data() + static_cast<int64_t>(i) * d;
                     const double* grow = self.grad.data() + static_cast<int64_t>(i) * d;
                     double mu = means[i], is = inv_std[i];
                     if (pg.requires_grad || pb.requires_grad) {
                       for (int j = 0; j < d; ++j) {
                         double xhat = (row[j] - mu) * is;
                         if (pg.requires_grad) pg.grad[j] += grow[j] * xhat;
                         if (pb.requires_grad) pb.grad[j] += grow[j];
                       }
                     }
                     if (px.requires_grad) {
                       double m1 = 0.0, m2 = 0.0;
                       for (int j = 0; j < d; ++j) {
                         double xhat = (row[j] - mu) * is;
                         double dh = grow[j] * pg.data[j];
                         m1 += dh;
                         m2 += dh * xhat;
                       }
                       m1 /= d;
                       m2 /= d;
                       double* prow = px.grad.data() + static_cast<int64_t>(i) * d;
                       for (int j = 0; j < d; ++j) {
                         double xhat = (row[j] - mu) * is;
                         double dh = grow[j] * pg.data[j];
                         prow[j] += is * (dh - m1 - xhat * m2);
                       }
                     }
                   }
                 });
}

Tensor detach(const Tensor& a) {
  return Tensor::from_data(a.shape(), a.data());
}

// ---------------------------------------------------------------------------
// reverse pass

void backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  std::vector<TensorNode*> stack{loss.node().get()};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    TensorNode* cur = stack.back();
    stack.pop_back();
    order.push_back(cur);
    for (auto& p : cur->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  // children always have larger ids than their parents
  std::sort(order.begin(), order.end(),
            [](const TensorNode* a, const TensorNode* b) { return a->id > b->id; });

  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (TensorNode* node : order) {
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

}  // namespace sgg
