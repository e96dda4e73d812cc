#include "caselab/rng.hpp"

#include <cmath>

#include "caselab/errors.hpp"

namespace caselab {

uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

uint64_t splitmix64_next(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

uint64_t derive_stream(uint64_t root_seed, std::string_view name) {
  uint64_t mixed = root_seed ^ fnv1a64(name);
  // One extra mix so adjacent roots with related names do not correlate.
  return splitmix64_next(mixed);
}

double RandomStream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

float RandomStream::uniform(float lo, float hi) {
  return lo + static_cast<float>(uniform()) * (hi - lo);
}

int RandomStream::uniform_int(int lo, int hi) {
  if (hi < lo) throw StateError("uniform_int: hi < lo");
  uint64_t span = static_cast<uint64_t>(hi) - static_cast<uint64_t>(lo) + 1;
  return lo + static_cast<int>(next_u64() % span);
}

float RandomStream::normal(float mean, float stddev) {
  if (have_spare_) {
    have_spare_ = false;
    return mean + stddev * spare_;
  }
  double u1 = uniform();
  double u2 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * 3.14159265358979323846 * u2;
  spare_ = static_cast<float>(r * std::sin(theta));
  have_spare_ = true;
  return mean + stddev * static_cast<float>(r * std::cos(theta));
}

void RandomStream::fill_uniform(std::vector<float>& out, float lo, float hi) {
  for (auto& x : out) x = uniform(lo, hi);
}

void RandomStream::fill_normal(std::vector<float>& out, float mean, float stddev) {
  for (auto& x : out) x = normal(mean, stddev);
}

std::vector<int> RandomStream::sample_without_replacement(int n, int k) {
  if (k > n) throw StateError("sample_without_replacement: k > n");
  // Partial Fisher-Yates over an index table.
  std::vector<int> idx(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  std::vector<int> out;
  out.reserve(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) {
    int j = uniform_int(i, n - 1);
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    out.push_back(idx[static_cast<size_t>(i)]);
  }
  return out;
}

}  // namespace caselab
