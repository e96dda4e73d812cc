#pragma once

#include <cstdint>
#include <vector>

#include "caselab/tensor.hpp"

namespace caselab {

// Frozen context embeddings a task head is fitted against.
struct EmbeddingBuffer {
  Tensor embeddings;  // [n, d]
  std::vector<int> labels;

  int size() const { return embeddings.rank() ? embeddings.dim(0) : 0; }
  int dim() const { return embeddings.rank() ? embeddings.dim(1) : 0; }
  int way() const;  // max label + 1
  void validate() const;
};

struct LinearHead {
  Tensor w;  // [way, d]
  Tensor b;  // [way]
};

struct HeadFitConfig {
  int steps = 500;
  int batch_size = 128;
  float lr_start = 1e-3f;
  float lr_end = 1e-5f;
};

// Zero-initialized linear head trained by Adam on with-replacement
// mini-batches of the buffer; mean cross-entropy, linearly decayed lr.
// Never touches the body: only buffer rows are read.
LinearHead fit_head(const EmbeddingBuffer& buffer, const HeadFitConfig& cfg,
                    uint64_t seed);

struct MahalanobisHead {
  Tensor means;                     // [way, d]
  std::vector<Tensor> covariances;  // per class [d, d], regularized
  std::vector<Tensor> chol;         // lower-triangular factors of the above
};

// Class-blended covariances: sigma_k = l*S_k + (1-l)*S + I with
// l = n_k/(n_k+1); the +I ridge keeps every factor well defined.
MahalanobisHead fit_mahalanobis(const EmbeddingBuffer& buffer);

struct ProtoHead {
  Tensor prototypes;  // [way, d]
};

ProtoHead fit_proto(const EmbeddingBuffer& buffer);

// Logits [m, way]; argmax is the decision. Linear: w*z + b. Mahalanobis:
// negative squared distance under the class factorization. Proto: negative
// squared Euclidean distance.
Tensor predict(const LinearHead& head, const Tensor& embeddings);
Tensor predict(const MahalanobisHead& head, const Tensor& embeddings);
Tensor predict(const ProtoHead& head, const Tensor& embeddings);

}  // namespace caselab
