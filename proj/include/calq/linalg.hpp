#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "calq/error.hpp"
#include "calq/matrix.hpp"
#include "calq/random.hpp"

namespace calq {

enum class Axis { rows, cols };

inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: cannot multiply " + a.shape_string() + " by " + b.shape_string());
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  DenseMatrix c(n, m);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* ci = pc + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = pa[i * k + p];
      if (aip == 0.0) continue;
      const double* bp = pb + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
    }
  }
  return c;
}

// aᵀ·b without materializing the transpose.
inline DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: cannot multiply transpose of " + a.shape_string() + " by " + b.shape_string());
  }
  const std::size_t n = a.cols(), k = a.rows(), m = b.cols();
  DenseMatrix c(n, m);
  for (std::size_t p = 0; p < k; ++p) {
    auto ap = a.row(p);
    auto bp = b.row(p);
    for (std::size_t i = 0; i < n; ++i) {
      const double aip = ap[i];
      if (aip == 0.0) continue;
      auto ci = c.row(i);
      for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
    }
  }
  return c;
}

// a·bᵀ.
inline DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: cannot multiply " + a.shape_string() + " by transpose of " + b.shape_string());
  }
  return matmul(a, b.transpose());
}

inline double frobenius(const DenseMatrix& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return std::sqrt(s);
}

// Largest absolute entry.
inline double infinity_norm(const DenseMatrix& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

inline std::vector<double> channel_abs_max(const DenseMatrix& a, Axis axis) {
  if (axis == Axis::rows) {
    std::vector<double> out(a.rows(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i)
      for (double v : a.row(i)) out[i] = std::max(out[i], std::abs(v));
    return out;
  }
  std::vector<double> out(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    for (std::size_t j = 0; j < a.cols(); ++j) out[j] = std::max(out[j], std::abs(r[j]));
  }
  return out;
}

inline DenseMatrix gaussian_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  DenseMatrix m(rows, cols);
  for (double& v : m.data()) v = rng.normal();
  return m;
}

// ---------------------------------------------------------------------------
// LU with partial pivoting

struct LuDecomposition {
  DenseMatrix lu;
  std::vector<std::size_t> perm;
  int parity = 1;
  bool singular = false;
};

inline LuDecomposition lu_decompose(const DenseMatrix& a) {
  if (a.rows() != a.cols()) throw ShapeError("lu_decompose: matrix must be square, got " + a.shape_string());
  const std::size_t n = a.rows();
  LuDecomposition d{a, std::vector<std::size_t>(n), 1, false};
  std::iota(d.perm.begin(), d.perm.end(), std::size_t{0});
  DenseMatrix& lu = d.lu;
  const double scale = infinity_norm(a);
  const double tiny = std::max(scale, 1e-300) * 1e-14;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    double best = std::abs(lu(k, k));
    for (std::size_t i = k + 1; i < n; ++i) {
      if (std::abs(lu(i, k)) > best) {
        best = std::abs(lu(i, k));
        piv = i;
      }
    }
    if (!(best > tiny)) {
      d.singular = true;
      continue;
    }
    if (piv != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(lu(k, j), lu(piv, j));
      std::swap(d.perm[k], d.perm[piv]);
      d.parity = -d.parity;
    }
    const double inv = 1.0 / lu(k, k);
    for (std::size_t i = k + 1; i < n; ++i) {
      const double f = lu(i, k) * inv;
      lu(i, k) = f;
      if (f == 0.0) continue;
      for (std::size_t j = k + 1; j < n; ++j) lu(i, j) -= f * lu(k, j);
    }
  }
  return d;
}

inline double determinant(const DenseMatrix& a) {
  auto d = lu_decompose(a);
  double det = d.parity;
  for (std::size_t i = 0; i < a.rows(); ++i) det *= d.lu(i, i);
  return d.singular ? 0.0 : det;
}

// Solves a·x = b for every column of b.
inline DenseMatrix lu_solve(const LuDecomposition& d, const DenseMatrix& b) {
  const std::size_t n = d.lu.rows();
  if (b.rows() != n) throw ShapeError("lu_solve: rhs " + b.shape_string() + " does not match " + d.lu.shape_string());
  if (d.singular) throw NumericalError("lu_solve: matrix is singular");
  DenseMatrix x(n, b.cols());
  for (std::size_t i = 0; i < n; ++i) std::copy_n(b.row(d.perm[i]).data(), b.cols(), x.row(i).data());
  const DenseMatrix& lu = d.lu;
  for (std::size_t i = 0; i < n; ++i) {
    auto xi = x.row(i);
    for (std::size_t k = 0; k < i; ++k) {
      const double f = lu(i, k);
      if (f == 0.0) continue;
      auto xk = x.row(k);
      for (std::size_t j = 0; j < xi.size(); ++j) xi[j] -= f * xk[j];
    }
  }
  for (std::size_t ii = n; ii-- > 0;) {
    auto xi = x.row(ii);
    for (std::size_t k = ii + 1; k < n; ++k) {
      const double f = lu(ii, k);
      if (f == 0.0) continue;
      auto xk = x.row(k);
      for (std::size_t j = 0; j < xi.size(); ++j) xi[j] -= f * xk[j];
    }
    const double inv = 1.0 / lu(ii, ii);
    for (double& v : xi) v *= inv;
  }
  return x;
}

inline DenseMatrix inverse(const DenseMatrix& a) {
  auto d = lu_decompose(a);
  if (d.singular) throw NumericalError("inverse: matrix " + a.shape_string() + " is singular");
  auto inv = lu_solve(d, DenseMatrix::identity(a.rows()));
  if (!inv.all_finite()) throw NumericalError("inverse: non-finite result");
  return inv;
}

// ---------------------------------------------------------------------------
// Householder QR of a square or tall matrix. q has orthonormal columns, r is upper triangular
// with a non-negative diagonal.

struct QrResult {
  DenseMatrix q;
  DenseMatrix r;
};

inline QrResult qr(const DenseMatrix& a) {
  const std::size_t m = a.rows(), n = a.cols();
  if (m < n) throw ShapeError("qr: expected rows >= cols, got " + a.shape_string());
  DenseMatrix r = a;
  std::vector<std::vector<double>> reflectors;
  reflectors.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::vector<double> v(m - k);
    double norm = 0.0;
    for (std::size_t i = k; i < m; ++i) {
      v[i - k] = r(i, k);
      norm += v[i - k] * v[i - k];
    }
    norm = std::sqrt(norm);
    if (norm == 0.0) {
      reflectors.emplace_back();
      continue;
    }
    const double alpha = v[0] >= 0.0 ? -norm : norm;
    v[0] -= alpha;
    double vnorm2 = 0.0;
    for (double x : v) vnorm2 += x * x;
    if (vnorm2 == 0.0) {
      reflectors.emplace_back();
      continue;
    }
    for (std::size_t j = k; j < n; ++j) {
      double s = 0.0;
      for (std::size_t i = k; i < m; ++i) s += v[i - k] * r(i, j);
      s = 2.0 * s / vnorm2;
      for (std::size_t i = k; i < m; ++i) r(i, j) -= s * v[i - k];
    }
    for (double& x : v) x /= std::sqrt(vnorm2);
    reflectors.push_back(std::move(v));
  }
  // Accumulate the thin Q by applying the reflectors to the first n columns of I.
  DenseMatrix q(m, n);
  for (std::size_t j = 0; j < n; ++j) q(j, j) = 1.0;
  for (std::size_t k = n; k-- > 0;) {
    const auto& v = reflectors[k];
    if (v.empty()) continue;
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t i = k; i < m; ++i) s += v[i - k] * q(i, j);
      s *= 2.0;
      for (std::size_t i = k; i < m; ++i) q(i, j) -= s * v[i - k];
    }
  }
  DenseMatrix rr(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) rr(i, j) = r(i, j);
  // Sign convention: positive diagonal of R.
  for (std::size_t i = 0; i < n; ++i) {
    if (rr(i, i) < 0.0) {
      for (std::size_t j = i; j < n; ++j) rr(i, j) = -rr(i, j);
      for (std::size_t p = 0; p < m; ++p) q(p, i) = -q(p, i);
    }
  }
  return {std::move(q), std::move(rr)};
}

// ---------------------------------------------------------------------------
// SVD by one-sided (Hestenes) Jacobi.

struct SvdResult {
  DenseMatrix u;                       // m x p, orthonormal columns, p = min(m, n)
  std::vector<double> singular_values; // non-increasing
  DenseMatrix v;                       // n x p, orthonormal columns
};

struct SvdOptions {
  int max_sweeps = 100;
  double tolerance = 1e-12;
};

namespace detail {

// Fills zero columns of q (m x p, columns listed in `missing`) with unit vectors orthogonal to the rest.
inline void complete_orthonormal_columns(DenseMatrix& q, const std::vector<std::size_t>& missing) {
  const std::size_t m = q.rows(), p = q.cols();
  std::vector<bool> filled(p, true);
  for (auto c : missing) filled[c] = false;
  std::size_t candidate = 0;
  for (auto c : missing) {
    while (candidate < m) {
      std::vector<double> v(m, 0.0);
      v[candidate++] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t j = 0; j < p; ++j) {
          if (!filled[j]) continue;
          double s = 0.0;
          for (std::size_t i = 0; i < m; ++i) s += q(i, j) * v[i];
          for (std::size_t i = 0; i < m; ++i) v[i] -= s * q(i, j);
        }
      }
      double n2 = 0.0;
      for (double x : v) n2 += x * x;
      if (n2 > 1e-6) {
        const double inv = 1.0 / std::sqrt(n2);
        for (std::size_t i = 0; i < m; ++i) q(i, c) = v[i] * inv;
        filled[c] = true;
        break;
      }
    }
  }
}

// Jacobi on the rows of `work` (p vectors of length m; rows of Aᵀ), accumulating rotations into vt.
inline SvdResult svd_tall(const DenseMatrix& a, const SvdOptions& opt) {
  const std::size_t m = a.rows(), n = a.cols();
  DenseMatrix work = a.transpose();  // n x m: row j is column j of a
  DenseMatrix vt = DenseMatrix::identity(n);
  int sweep = 0;
  bool converged = n < 2;
  for (; sweep < opt.max_sweeps && !converged; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        auto wp = work.row(p);
        auto wq = work.row(q);
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += wp[i] * wp[i];
          beta += wq[i] * wq[i];
          gamma += wp[i] * wq[i];
        }
        if (gamma == 0.0 || std::abs(gamma) <= opt.tolerance * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = wp[i], y = wq[i];
          wp[i] = c * x - s * y;
          wq[i] = s * x + c * y;
        }
        auto vp = vt.row(p);
        auto vq = vt.row(q);
        for (std::size_t i = 0; i < n; ++i) {
          const double x = vp[i], y = vq[i];
          vp[i] = c * x - s * y;
          vq[i] = s * x + c * y;
        }
      }
    }
    converged = !rotated;
  }
  if (!converged) throw ConvergenceError("svd: one-sided Jacobi did not converge", sweep);

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (double x : work.row(j)) s += x * x;
    sigma[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  SvdResult res{DenseMatrix(m, n), std::vector<double>(n), DenseMatrix(n, n)};
  const double cutoff = (sigma.empty() ? 0.0 : sigma[order[0]]) * std::numeric_limits<double>::epsilon() * 8.0;
  std::vector<std::size_t> missing;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    res.singular_values[k] = sigma[j];
    for (std::size_t i = 0; i < n; ++i) res.v(i, k) = vt(j, i);
    if (sigma[j] > cutoff && sigma[j] > 0.0) {
      const double inv = 1.0 / sigma[j];
      auto wj = work.row(j);
      for (std::size_t i = 0; i < m; ++i) res.u(i, k) = wj[i] * inv;
    } else {
      missing.push_back(k);
    }
  }
  if (!missing.empty()) complete_orthonormal_columns(res.u, missing);
  return res;
}

}  // namespace detail

inline SvdResult svd(const DenseMatrix& a, const SvdOptions& opt = {}) {
  if (!a.all_finite()) throw DomainError("svd: matrix has non-finite entries");
  if (a.rows() >= a.cols()) return detail::svd_tall(a, opt);
  auto t = detail::svd_tall(a.transpose(), opt);
  return {std::move(t.v), std::move(t.singular_values), std::move(t.u)};
}

inline constexpr double kDefaultRcond = 1e-10;

// Moore-Penrose pseudoinverse; reciprocals of singular values below rcond * sigma_max are zeroed.
inline DenseMatrix pinv(const DenseMatrix& a, double rcond = kDefaultRcond) {
  if (!(rcond > 0.0 && rcond < 1.0)) throw ConfigError("pinv: rcond must lie in (0, 1)");
  auto s = svd(a);
  DenseMatrix out(a.cols(), a.rows());
  if (s.singular_values.empty() || s.singular_values[0] == 0.0) return out;
  const double cut = rcond * s.singular_values[0];
  // out = V · diag(1/sigma) · Uᵀ
  for (std::size_t k = 0; k < s.singular_values.size(); ++k) {
    const double sv = s.singular_values[k];
    if (sv < cut) continue;
    const double inv = 1.0 / sv;
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double vik = s.v(i, k) * inv;
      if (vik == 0.0) continue;
      auto oi = out.row(i);
      for (std::size_t j = 0; j < a.rows(); ++j) oi[j] += vik * s.u(j, k);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Random orthogonal matrices.

// Haar-distributed rotation: QR of a Gaussian draw, positive diag(R), determinant forced to +1.
inline DenseMatrix random_rotation(std::size_t d, Seed seed) {
  if (d == 0) throw DomainError("random_rotation: dimension must be positive");
  Rng rng(seed);
  auto g = gaussian_matrix(d, d, rng);
  auto q = qr(g).q;
  if (determinant(q) < 0.0) {
    for (std::size_t i = 0; i < d; ++i) q(i, 0) = -q(i, 0);
  }
  return q;
}

inline bool is_power_of_two(std::size_t d) { return d != 0 && std::has_single_bit(d); }

// Unnormalized Sylvester Walsh-Hadamard matrix with ±1 entries.
inline DenseMatrix sylvester_hadamard(std::size_t d) {
  if (!is_power_of_two(d)) throw DomainError("hadamard: dimension " + std::to_string(d) + " is not a power of two");
  DenseMatrix h(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) h(i, j) = (std::popcount(i & j) & 1) ? -1.0 : 1.0;
  return h;
}

// (1/sqrt(d)) · H_d · diag(random ±1).
inline DenseMatrix randomized_hadamard(std::size_t d, Seed seed) {
  auto h = sylvester_hadamard(d);
  Rng rng(seed);
  std::vector<double> signs(d);
  for (double& s : signs) s = rng.sign();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) h(i, j) *= scale * signs[j];
  return h;
}

inline double orthogonality_defect(const DenseMatrix& m) {
  auto e = matmul_nt(m, m);
  for (std::size_t i = 0; i < e.rows(); ++i) e(i, i) -= 1.0;
  return frobenius(e);
}

}  // namespace calq
