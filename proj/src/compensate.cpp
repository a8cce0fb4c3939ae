// SPDX-License-Identifier: Apache-2.0
#include "cwac/compensate.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "cwac/refnet.hpp"

namespace cwac {

namespace {

void check_finite(const TensorF &t, const char *what) {
  for (float v : t.data()) {
    if (!std::isfinite(v)) throw FitError(std::string("non-finite value in ") + what);
  }
}

}  // namespace

void ActivationPair::validate() const {
  if (y_full.rank() != 2 || y_quant.rank() != 2) {
    throw ShapeError("activation pair tensors must be [N, C]");
  }
  if (y_full.shape() != y_quant.shape()) {
    throw ShapeError("y_full " + shape_str(y_full.shape()) + " vs y_quant " +
                     shape_str(y_quant.shape()));
  }
  if (rows() < 2) throw FitError("activation pair needs N >= 2 rows");
  if (x_quant && (x_quant->rank() != 2 || x_quant->rows() != rows())) {
    throw ShapeError("x_quant rows do not match the pair");
  }
  check_finite(y_full, "y_full");
  check_finite(y_quant, "y_quant");
  if (x_quant) check_finite(*x_quant, "x_quant");
}

CwacParams CwacParams::identity(std::size_t channels) {
  CwacParams p;
  p.alpha.assign(channels, 1.0f);
  p.beta.assign(channels, 0.0f);
  p.fallback_mask.assign(channels, false);
  p.clamped_mask.assign(channels, false);
  return p;
}

std::size_t CwacParams::fallback_count() const {
  return static_cast<std::size_t>(std::count(fallback_mask.begin(), fallback_mask.end(), true));
}

std::size_t CwacParams::clamped_count() const {
  return static_cast<std::size_t>(std::count(clamped_mask.begin(), clamped_mask.end(), true));
}

void CwacParams::validate() const {
  const std::size_t c = alpha.size();
  if (beta.size() != c || fallback_mask.size() != c || clamped_mask.size() != c) {
    throw ShapeError("cwac parameter arrays differ in length");
  }
  for (std::size_t i = 0; i < c; ++i) {
    if (!std::isfinite(alpha[i]) || alpha[i] == 0.0f || !std::isfinite(beta[i])) {
      throw FitError("cwac channel " + std::to_string(i) +
                     " has a zero or non-finite gain/offset");
    }
  }
}

CwacParams fit_cwac(const ActivationPair &pair, CwacFitOptions options) {
  pair.validate();
  const std::size_t n = pair.rows(), channels = pair.channels();
  const double inv_n = 1.0 / static_cast<double>(n);
  CwacParams p = CwacParams::identity(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    double mf = 0.0, mq = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      mf += pair.y_full.at(r, c);
      mq += pair.y_quant.at(r, c);
    }
    mf *= inv_n;
    mq *= inv_n;
    double cov = 0.0, var = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      const double dq = pair.y_quant.at(r, c) - mq;
      cov += (pair.y_full.at(r, c) - mf) * dq;
      var += dq * dq;
    }
    cov *= inv_n;
    var *= inv_n;

    double alpha = 1.0;
    if (var < 1e-12 * (1.0 + mq * mq)) {
      p.fallback_mask[c] = true;
    } else {
      alpha = cov / var;
      if (options.clamp_non_positive_alpha && !(alpha > 0.0)) {
        alpha = 1.0;
        p.clamped_mask[c] = true;
      }
    }
    p.alpha[c] = static_cast<float>(alpha);
    p.beta[c] = static_cast<float>(mf - alpha * mq);
    if (p.alpha[c] == 0.0f) {
      // gain below f32 resolution
      p.alpha[c] = 1.0f;
      p.beta[c] = static_cast<float>(mf - mq);
      p.clamped_mask[c] = true;
    }
  }
  p.validate();
  return p;
}

TensorF apply_cwac(const TensorF &y, const CwacParams &params) {
  if (y.rank() < 2 || y.dim(1) != params.channels()) {
    throw ShapeError("cwac for " + std::to_string(params.channels()) +
                     " channels cannot apply to " + shape_str(y.shape()));
  }
  TensorF out = y;
  const std::size_t c = params.channels();
  const std::size_t inner = y.size() / (y.dim(0) * c);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t ch = (i / inner) % c;
    out[i] = params.alpha[ch] * out[i] + params.beta[ch];
  }
  return out;
}

QwtParams fit_qwt(const ActivationPair &pair, QwtFitOptions options) {
  pair.validate();
  if (!pair.x_quant) throw FitError("full-matrix fit needs the quant-path input x_quant");
  const TensorF &xt = *pair.x_quant;
  const auto n = static_cast<Eigen::Index>(pair.rows());
  const auto c_in = static_cast<Eigen::Index>(xt.cols());
  const auto c_out = static_cast<Eigen::Index>(pair.channels());

  Eigen::MatrixXd x(n, c_in), t(n, c_out);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index j = 0; j < c_in; ++j) x(r, j) = xt.at(r, j);
    for (Eigen::Index c = 0; c < c_out; ++c) {
      t(r, c) = static_cast<double>(pair.y_full.at(r, c)) - pair.y_quant.at(r, c);
    }
  }
  const Eigen::RowVectorXd mx = x.colwise().mean();
  const Eigen::RowVectorXd mt = t.colwise().mean();
  x.rowwise() -= mx;
  t.rowwise() -= mt;

  Eigen::MatrixXd gram = x.transpose() * x;
  const double lambda =
      options.ridge.value_or(1e-6 * gram.trace() / static_cast<double>(c_in));
  if (lambda < 0.0) throw ConfigError("ridge damping must be >= 0");
  gram.diagonal().array() += lambda;

  Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  const double max_pivot = ldlt.vectorD().cwiseAbs().maxCoeff();
  const double min_pivot = ldlt.vectorD().minCoeff();
  if (ldlt.info() != Eigen::Success || !(min_pivot > 1e-12 * std::max(max_pivot, 1e-300))) {
    throw FitError("rank-deficient design matrix; use ridge damping");
  }
  const Eigen::MatrixXd w = ldlt.solve(x.transpose() * t);  // [C_in, C_out]
  const Eigen::RowVectorXd b = mt - mx * w;

  QwtParams q{TensorF({pair.channels(), xt.cols()}), TensorF({pair.channels()})};
  for (Eigen::Index c = 0; c < c_out; ++c) {
    for (Eigen::Index j = 0; j < c_in; ++j) {
      q.weight.at(static_cast<std::size_t>(c), static_cast<std::size_t>(j)) =
          static_cast<float>(w(j, c));
    }
    q.bias[static_cast<std::size_t>(c)] = static_cast<float>(b(c));
  }
  return q;
}

TensorF apply_qwt(const TensorF &y_quant, const TensorF &x_quant,
                  const QwtParams &params) {
  if (y_quant.rank() != 2 || x_quant.rank() != 2 || y_quant.rows() != x_quant.rows() ||
      y_quant.cols() != params.weight.rows() || x_quant.cols() != params.weight.cols()) {
    throw ShapeError("full-matrix compensation shape mismatch");
  }
  TensorF out = y_quant;
  const std::size_t c_in = x_quant.cols();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = 0; c < out.cols(); ++c) {
      double acc = params.bias[c];
      for (std::size_t j = 0; j < c_in; ++j) {
        acc += static_cast<double>(params.weight.at(c, j)) * x_quant.at(r, j);
      }
      out.at(r, c) += static_cast<float>(acc);
    }
  }
  return out;
}

double diagonal_energy(const TensorF &w) {
  if (w.rank() != 2 || w.rows() != w.cols()) {
    throw ShapeError("diagonal energy needs a square matrix, got " + shape_str(w.shape()));
  }
  double diag = 0.0, total = 0.0;
  for (std::size_t i = 0; i < w.rows(); ++i) {
    for (std::size_t j = 0; j < w.cols(); ++j) {
      const double a = std::abs(static_cast<double>(w.at(i, j)));
      total += a;
      if (i == j) diag += a;
    }
  }
  return total > 0.0 ? diag / total : 0.0;
}

double mse(const TensorF &a, const TensorF &b) {
  if (a.shape() != b.shape()) throw ShapeError("mse shape mismatch");
  if (a.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

std::vector<double> per_channel_mse(const TensorF &a, const TensorF &b) {
  if (a.shape() != b.shape() || a.rank() != 2) throw ShapeError("per-channel mse needs equal [N, C]");
  std::vector<double> out(a.cols(), 0.0);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t c = 0; c < a.cols(); ++c) {
      const double d = static_cast<double>(a.at(r, c)) - b.at(r, c);
      out[c] += d * d;
    }
  }
  for (double &v : out) v /= static_cast<double>(a.rows());
  return out;
}

}  // namespace cwac
