#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace caselab {

uint64_t fnv1a64(std::string_view s);
uint64_t splitmix64_next(uint64_t& state);

// Seed for a named substream of `root_seed`. Adding a new stream name never
// perturbs draws made from existing streams.
uint64_t derive_stream(uint64_t root_seed, std::string_view name);

// Deterministic random stream. The generator and every distribution are
// implemented here so sampled sequences are pinned by this code rather than
// by a standard-library implementation.
class RandomStream {
 public:
  explicit RandomStream(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() { return splitmix64_next(state_); }

  // [0, 1)
  double uniform();
  float uniform(float lo, float hi);
  // Inclusive bounds.
  int uniform_int(int lo, int hi);
  // Box-Muller; consumes two uniforms per pair of values.
  float normal(float mean = 0.f, float stddev = 1.f);

  void fill_uniform(std::vector<float>& out, float lo, float hi);
  void fill_normal(std::vector<float>& out, float mean, float stddev);

  // Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(0, static_cast<int>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct ints from [0, n), in draw order.
  std::vector<int> sample_without_replacement(int n, int k);

 private:
  uint64_t state_;
  bool have_spare_ = false;
  float spare_ = 0.f;
};

}  // namespace caselab
