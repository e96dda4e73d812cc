#include "caselab/heads.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "caselab/adam.hpp"
#include "caselab/errors.hpp"
#include "caselab/rng.hpp"
#include "caselab/tape.hpp"
#include "kernels.hpp"

namespace caselab {

namespace {

// Sums in sorted order so the result is exactly independent of row order.
double canonical_sum(std::vector<double>& vals) {
  std::sort(vals.begin(), vals.end());
  double s = 0.0;
  for (double v : vals) s += v;
  return s;
}

// Per-class row index lists; throws if any class in [0, way) is empty.
std::vector<std::vector<int>> class_rows(const EmbeddingBuffer& buffer) {
  int way = buffer.way();
  std::vector<std::vector<int>> rows(static_cast<size_t>(way));
  for (int i = 0; i < buffer.size(); ++i)
    rows[static_cast<size_t>(buffer.labels[static_cast<size_t>(i)])].push_back(
        i);
  for (int k = 0; k < way; ++k)
    if (rows[static_cast<size_t>(k)].empty())
      throw ConfigError("class " + std::to_string(k) +
                        " has no context examples");
  return rows;
}

// Order-canonical mean of the given rows, one value per column.
std::vector<double> mean_of_rows(const Tensor& z, const std::vector<int>& rows,
                                 int d) {
  std::vector<double> mean(static_cast<size_t>(d));
  std::vector<double> vals(rows.size());
  for (int c = 0; c < d; ++c) {
    for (size_t i = 0; i < rows.size(); ++i)
      vals[i] = z.data[size_t(rows[i]) * d + size_t(c)];
    mean[static_cast<size_t>(c)] =
        canonical_sum(vals) / static_cast<double>(rows.size());
  }
  return mean;
}

// Population covariance of the rows around the given mean, order-canonical.
std::vector<double> covariance_of_rows(const Tensor& z,
                                       const std::vector<int>& rows,
                                       const std::vector<double>& mean, int d) {
  std::vector<double> cov(size_t(d) * size_t(d));
  std::vector<double> vals(rows.size());
  for (int a = 0; a < d; ++a) {
    for (int b = a; b < d; ++b) {
      for (size_t i = 0; i < rows.size(); ++i) {
        double va = z.data[size_t(rows[i]) * d + size_t(a)] - mean[size_t(a)];
        double vb = z.data[size_t(rows[i]) * d + size_t(b)] - mean[size_t(b)];
        vals[i] = va * vb;
      }
      double e = canonical_sum(vals) / static_cast<double>(rows.size());
      cov[size_t(a) * d + size_t(b)] = e;
      cov[size_t(b) * d + size_t(a)] = e;
    }
  }
  return cov;
}

// Lower-triangular Cholesky factor of an SPD matrix.
std::vector<double> cholesky(const std::vector<double>& a, int d) {
  std::vector<double> l(size_t(d) * size_t(d), 0.0);
  for (int j = 0; j < d; ++j) {
    double diag = a[size_t(j) * d + size_t(j)];
    for (int k = 0; k < j; ++k) {
      double v = l[size_t(j) * d + size_t(k)];
      diag -= v * v;
    }
    if (diag <= 0.0)
      throw NumericError("covariance lost positive definiteness");
    l[size_t(j) * d + size_t(j)] = std::sqrt(diag);
    for (int i = j + 1; i < d; ++i) {
      double v = a[size_t(i) * d + size_t(j)];
      for (int k = 0; k < j; ++k)
        v -= l[size_t(i) * d + size_t(k)] * l[size_t(j) * d + size_t(k)];
      l[size_t(i) * d + size_t(j)] = v / l[size_t(j) * d + size_t(j)];
    }
  }
  return l;
}

void check_embedding_dim(int have, int want, const char* head) {
  if (have != want)
    throw ShapeError(std::string(head) + ": embeddings have dim " +
                     std::to_string(have) + ", head expects " +
                     std::to_string(want));
}

}  // namespace

int EmbeddingBuffer::way() const {
  int w = 0;
  for (int lbl : labels) w = std::max(w, lbl + 1);
  return w;
}

void EmbeddingBuffer::validate() const {
  if (embeddings.rank() != 2) throw ShapeError("buffer wants [n, d] embeddings");
  if (embeddings.dim(0) < 1) throw ShapeError("buffer is empty");
  if (static_cast<int>(labels.size()) != embeddings.dim(0))
    throw ShapeError("buffer rows and labels disagree");
  for (int lbl : labels)
    if (lbl < 0) throw ShapeError("negative label in buffer");
}

LinearHead fit_head(const EmbeddingBuffer& buffer, const HeadFitConfig& cfg,
                    uint64_t seed) {
  buffer.validate();
  if (cfg.steps < 0) throw ConfigError("fit steps must be >= 0");
  if (cfg.batch_size < 1) throw ConfigError("fit batch_size must be >= 1");
  int way = buffer.way();
  int d = buffer.dim();
  int n = buffer.size();

  LinearHead head;
  head.w = Tensor::zeros({way, d});
  head.b = Tensor::zeros({way});
  if (cfg.steps == 0) return head;

  head.w.requires_grad = true;
  head.b.requires_grad = true;
  AdamState opt({{"head/w", &head.w}, {"head/b", &head.b}});
  RandomStream rng(seed);

  Tensor batch = Tensor::zeros({cfg.batch_size, d});
  std::vector<int> batch_labels(static_cast<size_t>(cfg.batch_size));
  for (int step = 0; step < cfg.steps; ++step) {
    for (int r = 0; r < cfg.batch_size; ++r) {
      int pick = rng.uniform_int(0, n - 1);
      std::copy(buffer.embeddings.data.begin() + int64_t(pick) * d,
                buffer.embeddings.data.begin() + int64_t(pick + 1) * d,
                batch.data.begin() + int64_t(r) * d);
      batch_labels[static_cast<size_t>(r)] =
          buffer.labels[static_cast<size_t>(pick)];
    }
    Tape t;
    Var logits = linear(t.input(batch), t.leaf(head.w), t.leaf(head.b));
    Var loss = softmax_cross_entropy(logits, batch_labels);
    t.backward(loss);
    opt.step(linear_lr(cfg.lr_start, cfg.lr_end, step, cfg.steps));
  }
  head.w.requires_grad = false;
  head.b.requires_grad = false;
  head.w.clear_grad();
  head.b.clear_grad();
  return head;
}

MahalanobisHead fit_mahalanobis(const EmbeddingBuffer& buffer) {
  buffer.validate();
  int way = buffer.way();
  int d = buffer.dim();
  std::vector<std::vector<int>> rows = class_rows(buffer);

  std::vector<int> all(static_cast<size_t>(buffer.size()));
  for (int i = 0; i < buffer.size(); ++i) all[static_cast<size_t>(i)] = i;
  std::vector<double> global_mean = mean_of_rows(buffer.embeddings, all, d);
  std::vector<double> shared =
      covariance_of_rows(buffer.embeddings, all, global_mean, d);

  MahalanobisHead head;
  head.means = Tensor::zeros({way, d});
  for (int k = 0; k < way; ++k) {
    const std::vector<int>& rk = rows[static_cast<size_t>(k)];
    std::vector<double> mu = mean_of_rows(buffer.embeddings, rk, d);
    for (int c = 0; c < d; ++c)
      head.means.data[size_t(k) * d + size_t(c)] =
          static_cast<float>(mu[static_cast<size_t>(c)]);

    std::vector<double> own =
        covariance_of_rows(buffer.embeddings, rk, mu, d);
    double nk = static_cast<double>(rk.size());
    double lambda = nk / (nk + 1.0);
    Tensor cov = Tensor::zeros({d, d});
    for (int64_t i = 0; i < int64_t(d) * d; ++i)
      cov.data[static_cast<size_t>(i)] = static_cast<float>(
          lambda * own[static_cast<size_t>(i)] +
          (1.0 - lambda) * shared[static_cast<size_t>(i)]);
    for (int i = 0; i < d; ++i) cov.data[size_t(i) * d + size_t(i)] += 1.f;

    // Factor exactly what is stored so solves and the matrix agree.
    std::vector<double> a(cov.data.begin(), cov.data.end());
    std::vector<double> l = cholesky(a, d);
    Tensor lf = Tensor::zeros({d, d});
    for (size_t i = 0; i < l.size(); ++i)
      lf.data[i] = static_cast<float>(l[i]);
    head.covariances.push_back(std::move(cov));
    head.chol.push_back(std::move(lf));
  }
  return head;
}

ProtoHead fit_proto(const EmbeddingBuffer& buffer) {
  buffer.validate();
  int way = buffer.way();
  int d = buffer.dim();
  std::vector<std::vector<int>> rows = class_rows(buffer);
  ProtoHead head;
  head.prototypes = Tensor::zeros({way, d});
  for (int k = 0; k < way; ++k) {
    std::vector<double> mu =
        mean_of_rows(buffer.embeddings, rows[static_cast<size_t>(k)], d);
    for (int c = 0; c < d; ++c)
      head.prototypes.data[size_t(k) * d + size_t(c)] =
          static_cast<float>(mu[static_cast<size_t>(c)]);
  }
  return head;
}

Tensor predict(const LinearHead& head, const Tensor& embeddings) {
  if (embeddings.rank() != 2) throw ShapeError("predict wants [m, d]");
  int m = embeddings.dim(0);
  int d = embeddings.dim(1);
  int way = head.w.dim(0);
  check_embedding_dim(d, head.w.dim(1), "linear head");
  Tensor logits = Tensor::zeros({m, way});
  kernels::gemm_nt(logits.data.data(), embeddings.data.data(),
                   head.w.data.data(), m, way, d);
  for (int r = 0; r < m; ++r)
    for (int k = 0; k < way; ++k)
      logits.data[size_t(r) * way + size_t(k)] +=
          head.b.data[static_cast<size_t>(k)];
  return logits;
}

Tensor predict(const MahalanobisHead& head, const Tensor& embeddings) {
  if (embeddings.rank() != 2) throw ShapeError("predict wants [m, d]");
  int m = embeddings.dim(0);
  int d = embeddings.dim(1);
  int way = head.means.dim(0);
  check_embedding_dim(d, head.means.dim(1), "mahalanobis head");
  Tensor logits = Tensor::zeros({m, way});
  std::vector<double> v(static_cast<size_t>(d)), y(static_cast<size_t>(d));
  for (int r = 0; r < m; ++r) {
    for (int k = 0; k < way; ++k) {
      const Tensor& l = head.chol[static_cast<size_t>(k)];
      for (int c = 0; c < d; ++c)
        v[static_cast<size_t>(c)] =
            double(embeddings.data[size_t(r) * d + size_t(c)]) -
            double(head.means.data[size_t(k) * d + size_t(c)]);
      // Forward substitution L y = v; the squared norm of y is the distance.
      double dist = 0.0;
      for (int i = 0; i < d; ++i) {
        double s = v[static_cast<size_t>(i)];
        for (int j = 0; j < i; ++j)
          s -= double(l.data[size_t(i) * d + size_t(j)]) *
               y[static_cast<size_t>(j)];
        y[static_cast<size_t>(i)] = s / double(l.data[size_t(i) * d + size_t(i)]);
        dist += y[static_cast<size_t>(i)] * y[static_cast<size_t>(i)];
      }
      logits.data[size_t(r) * way + size_t(k)] = static_cast<float>(-dist);
    }
  }
  return logits;
}

Tensor predict(const ProtoHead& head, const Tensor& embeddings) {
  if (embeddings.rank() != 2) throw ShapeError("predict wants [m, d]");
  int m = embeddings.dim(0);
  int d = embeddings.dim(1);
  int way = head.prototypes.dim(0);
  check_embedding_dim(d, head.prototypes.dim(1), "proto head");
  Tensor logits = Tensor::zeros({m, way});
  for (int r = 0; r < m; ++r) {
    for (int k = 0; k < way; ++k) {
      double dist = 0.0;
      for (int c = 0; c < d; ++c) {
        double diff = double(embeddings.data[size_t(r) * d + size_t(c)]) -
                      double(head.prototypes.data[size_t(k) * d + size_t(c)]);
        dist += diff * diff;
      }
      logits.data[size_t(r) * way + size_t(k)] = static_cast<float>(-dist);
    }
  }
  return logits;
}

}  // namespace caselab
