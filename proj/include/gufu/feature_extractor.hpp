#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "gufu/error.hpp"
#include "gufu/numerics/matrix.hpp"
#include "gufu/numerics/params.hpp"
#include "gufu/numerics/rng.hpp"
#include "gufu/numerics/tape.hpp"

namespace gufu {

inline constexpr std::size_t kCodeDim = 32;

struct AutoencoderShape {
  std::size_t hidden = 128;
  std::size_t code = kCodeDim;
  double dropout = 0.5;
};

struct TrainOptions {
  int epochs = 50;
  double lr = 0.01;
  OptimizerKind optimizer = OptimizerKind::adam;
};

/// Terms of the consistency-constrained reconstruction loss.
struct ConsistencyLoss {
  double reconstruction = 0.0;  // ||X - D(E(X))||_F
  double encoder = 0.0;         // ||E(X) - Z||_F
  double decoder = 0.0;         // ||D(Z) - Xhat||_F
  double total() const { return reconstruction + 0.5 * (encoder + decoder); }
};

/// Normalized RSS <-> 32-dim code. Encoder: n_in -> hidden (relu, dropout) -> code
/// (linear). Decoder: code -> hidden (relu, dropout) -> n_in (sigmoid).
class Autoencoder {
 public:
  Autoencoder() = default;

  static Autoencoder create(std::size_t n_in, Rng& rng, AutoencoderShape shape = {}) {
    Autoencoder ae;
    ae.n_in_ = n_in;
    ae.shape_ = shape;
    ae.params_.add("ae.enc.w1", xavier_uniform(n_in, shape.hidden, rng));
    ae.params_.add("ae.enc.b1", Matrix(1, shape.hidden));
    ae.params_.add("ae.enc.w2", xavier_uniform(shape.hidden, shape.code, rng));
    ae.params_.add("ae.enc.b2", Matrix(1, shape.code));
    ae.params_.add("ae.dec.w1", xavier_uniform(shape.code, shape.hidden, rng));
    ae.params_.add("ae.dec.b1", Matrix(1, shape.hidden));
    ae.params_.add("ae.dec.w2", xavier_uniform(shape.hidden, n_in, rng));
    ae.params_.add("ae.dec.b2", Matrix(1, n_in));
    return ae;
  }

  std::size_t input_dim() const { return n_in_; }
  std::size_t code_dim() const { return shape_.code; }
  const AutoencoderShape& shape() const { return shape_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  Var encode(Tape& t, Var x, Rng& rng, bool training) {
    require_cols(t.value(x), n_in_, "encode");
    Var h = t.relu(t.affine(x, t.param(params_, "ae.enc.w1"), t.param(params_, "ae.enc.b1")));
    h = t.dropout(h, shape_.dropout, rng, training);
    return t.affine(h, t.param(params_, "ae.enc.w2"), t.param(params_, "ae.enc.b2"));
  }

  Var decode(Tape& t, Var z, Rng& rng, bool training) {
    require_cols(t.value(z), shape_.code, "decode");
    Var h = t.relu(t.affine(z, t.param(params_, "ae.dec.w1"), t.param(params_, "ae.dec.b1")));
    h = t.dropout(h, shape_.dropout, rng, training);
    return t.sigmoid(
        t.affine(h, t.param(params_, "ae.dec.w2"), t.param(params_, "ae.dec.b2")));
  }

  /// Inference-mode encoding (dropout off).
  Matrix encode(const Matrix& x_norm) const {
    require_cols(x_norm, n_in_, "encode");
    Matrix h = affine(x_norm, "ae.enc.w1", "ae.enc.b1");
    relu_inplace(h);
    return affine(h, "ae.enc.w2", "ae.enc.b2");
  }

  /// Inference-mode decoding; output in [0, 1].
  Matrix decode(const Matrix& z) const {
    require_cols(z, shape_.code, "decode");
    Matrix h = affine(z, "ae.dec.w1", "ae.dec.b1");
    relu_inplace(h);
    Matrix out = affine(h, "ae.dec.w2", "ae.dec.b2");
    for (double& v : out.values())
      v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    return out;
  }

 private:
  static void require_cols(const Matrix& m, std::size_t cols, const char* op) {
    if (m.cols() != cols) {
      throw DimensionError(std::string("Autoencoder::") + op + ": expected " +
                           std::to_string(cols) + " columns, got " + m.shape_string());
    }
  }
  static void relu_inplace(Matrix& m) {
    for (double& v : m.values()) v = v > 0.0 ? v : 0.0;
  }
  Matrix affine(const Matrix& x, const char* w, const char* b) const {
    Matrix out = matmul(x, params_.value(w));
    const Matrix& bias = params_.value(b);
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += bias(0, j);
    return out;
  }

  std::size_t n_in_ = 0;
  AutoencoderShape shape_;
  ParamSet params_;
};

inline double reconstruction_loss(const Autoencoder& ae, const Matrix& x_norm) {
  return frobenius_norm(x_norm - ae.decode(ae.encode(x_norm)));
}

inline ConsistencyLoss consistency_loss(const Autoencoder& ae, const Matrix& x_norm,
                                        const Matrix& z_target, const Matrix& xhat_target) {
  ConsistencyLoss l;
  l.reconstruction = reconstruction_loss(ae, x_norm);
  l.encoder = frobenius_norm(ae.encode(x_norm) - z_target);
  l.decoder = frobenius_norm(ae.decode(z_target) - xhat_target);
  return l;
}

/// Minimizes ||X - D(E(X))||_F with full-batch steps. Returns the post-step
/// inference-mode loss of every epoch.
inline std::vector<double> train_initial(Autoencoder& ae, const Matrix& x_norm,
                                         const TrainOptions& opts, Rng& rng) {
  if (x_norm.rows() < 2 && opts.epochs > 0) {
    throw ContractError("train_initial: need at least 2 rows, got " +
                        std::to_string(x_norm.rows()));
  }
  std::vector<double> history;
  history.reserve(static_cast<std::size_t>(std::max(opts.epochs, 0)));
  Optimizer opt({.kind = opts.optimizer, .lr = opts.lr});
  ae.params().zero_grad();
  ae.params().reset_optimizer_state();
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    Tape t;
    Var x = t.constant(x_norm);
    Var xhat = ae.decode(t, ae.encode(t, x, rng, true), rng, true);
    Var loss = t.frobenius_diff(x, xhat);
    t.require_finite(loss, "reconstruction (epoch " + std::to_string(epoch) + ")");
    t.backward(loss);
    opt.step(ae.params());
    const double eval = reconstruction_loss(ae, x_norm);
    if (!std::isfinite(eval)) {
      throw TrainingError("train_initial: reconstruction loss diverged at epoch " +
                          std::to_string(epoch));
    }
    history.push_back(eval);
  }
  return history;
}

/// Retraining against post-update targets:
///   ||X - D(E(X))||_F + 1/2 (||E(X) - Z||_F + ||D(Z) - Xhat||_F).
inline std::vector<ConsistencyLoss> retrain_consistent(Autoencoder& ae, const Matrix& x_norm,
                                                       const Matrix& z_target,
                                                       const Matrix& xhat_target,
                                                       const TrainOptions& opts, Rng& rng) {
  if (z_target.rows() != x_norm.rows() || z_target.cols() != ae.code_dim()) {
    throw DimensionError("retrain_consistent: z_target " + z_target.shape_string());
  }
  if (xhat_target.rows() != x_norm.rows() || xhat_target.cols() != ae.input_dim()) {
    throw DimensionError("retrain_consistent: xhat_target " + xhat_target.shape_string());
  }
  std::vector<ConsistencyLoss> history;
  Optimizer opt({.kind = opts.optimizer, .lr = opts.lr});
  ae.params().zero_grad();
  ae.params().reset_optimizer_state();
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    Tape t;
    Var x = t.constant(x_norm);
    Var z = t.constant(z_target);
    Var xh = t.constant(xhat_target);
    Var rec = t.frobenius_diff(x, ae.decode(t, ae.encode(t, x, rng, true), rng, true));
    Var enc = t.frobenius_diff(ae.encode(t, x, rng, true), z);
    Var dec = t.frobenius_diff(ae.decode(t, z, rng, true), xh);
    t.require_finite(rec, "reconstruction");
    t.require_finite(enc, "encoder consistency");
    t.require_finite(dec, "decoder consistency");
    Var loss = t.add(rec, t.scale(t.add(enc, dec), 0.5));
    t.backward(loss);
    opt.step(ae.params());
    history.push_back(consistency_loss(ae, x_norm, z_target, xhat_target));
    if (!std::isfinite(history.back().total())) {
      throw TrainingError("retrain_consistent: loss diverged at epoch " + std::to_string(epoch));
    }
  }
  return history;
}

/// Per-dimension standardization of codes, fitted on database rows. Codes enter
/// the signal graph in this form.
struct CodeScaler {
  std::vector<double> mean;
  std::vector<double> scale;

  static CodeScaler fit(const Matrix& codes) {
    CodeScaler s{std::vector<double>(codes.cols(), 0.0), std::vector<double>(codes.cols(), 1.0)};
    if (codes.rows() == 0) return s;
    const double n = static_cast<double>(codes.rows());
    for (std::size_t j = 0; j < codes.cols(); ++j) {
      double m = 0.0;
      for (std::size_t i = 0; i < codes.rows(); ++i) m += codes(i, j);
      m /= n;
      double v = 0.0;
      for (std::size_t i = 0; i < codes.rows(); ++i) v += (codes(i, j) - m) * (codes(i, j) - m);
      s.mean[j] = m;
      s.scale[j] = v / n > 1e-24 ? 1.0 / std::sqrt(v / n) : 1.0;
    }
    return s;
  }

  Matrix apply(const Matrix& codes) const {
    if (codes.cols() != mean.size()) {
      throw DimensionError("CodeScaler: expected " + std::to_string(mean.size()) + " columns, got " +
                           codes.shape_string());
    }
    Matrix out = codes;
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) = (out(i, j) - mean[j]) * scale[j];
    return out;
  }
};

/// Fits the decoder alone so that D(Z) ~ X; the encoder is left untouched.
/// Returns the inference-mode ||D(Z) - X||_F after every epoch.
inline std::vector<double> align_decoder(Autoencoder& ae, const Matrix& z, const Matrix& x_norm,
                                         const TrainOptions& opts, Rng& rng) {
  if (z.rows() != x_norm.rows() || z.cols() != ae.code_dim() || x_norm.cols() != ae.input_dim()) {
    throw DimensionError("align_decoder: z " + z.shape_string() + ", x " + x_norm.shape_string());
  }
  std::vector<double> history;
  Optimizer opt({.kind = opts.optimizer, .lr = opts.lr});
  ae.params().zero_grad();
  ae.params().reset_optimizer_state();
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    Tape t;
    Var loss = t.frobenius_diff(ae.decode(t, t.constant(z), rng, true), t.constant(x_norm));
    t.require_finite(loss, "decoder alignment");
    t.backward(loss);
    opt.step(ae.params());
    history.push_back(frobenius_norm(ae.decode(z) - x_norm));
  }
  return history;
}

/// Rebuilds the input/output layers for a new AP column set. `old_to_new[j]` is
/// the new position of old column j, or -1 when the column is dropped. Columns
/// that receive no old column are Xavier-initialized; hidden layers are copied.
inline Autoencoder resize_for_aps(const Autoencoder& ae, std::size_t new_n_in,
                                  const std::vector<long>& old_to_new, Rng& rng) {
  if (old_to_new.size() != ae.input_dim()) {
    throw ContractError("resize_for_aps: map has " + std::to_string(old_to_new.size()) +
                        " entries for " + std::to_string(ae.input_dim()) + " columns");
  }
  std::vector<long> new_to_old(new_n_in, -1);
  for (std::size_t j = 0; j < old_to_new.size(); ++j) {
    const long t = old_to_new[j];
    if (t < 0) continue;
    if (static_cast<std::size_t>(t) >= new_n_in || new_to_old[t] != -1) {
      throw ContractError("resize_for_aps: bad target " + std::to_string(t) + " for column " +
                          std::to_string(j));
    }
    new_to_old[t] = static_cast<long>(j);
  }

  const std::size_t hidden = ae.shape().hidden;
  Autoencoder out = Autoencoder::create(new_n_in, rng, ae.shape());
  const Matrix& ew1 = ae.params().value("ae.enc.w1");
  const Matrix& dw2 = ae.params().value("ae.dec.w2");
  const Matrix& db2 = ae.params().value("ae.dec.b2");
  Matrix new_ew1 = out.params().value("ae.enc.w1");
  Matrix new_dw2 = out.params().value("ae.dec.w2");
  Matrix new_db2 = out.params().value("ae.dec.b2");
  for (std::size_t t = 0; t < new_n_in; ++t) {
    if (new_to_old[t] < 0) continue;
    const auto j = static_cast<std::size_t>(new_to_old[t]);
    for (std::size_t h = 0; h < hidden; ++h) {
      new_ew1(t, h) = ew1(j, h);
      new_dw2(h, t) = dw2(h, j);
    }
    new_db2(0, t) = db2(0, j);
  }
  out.params().set("ae.enc.w1", std::move(new_ew1));
  out.params().set("ae.dec.w2", std::move(new_dw2));
  out.params().set("ae.dec.b2", std::move(new_db2));
  for (const char* name : {"ae.enc.b1", "ae.enc.w2", "ae.enc.b2", "ae.dec.w1", "ae.dec.b1"})
    out.params().set(name, ae.params().value(name));
  return out;
}

}  // namespace gufu
