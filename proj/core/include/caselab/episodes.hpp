#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "caselab/rng.hpp"
#include "caselab/tensor.hpp"

namespace caselab {

struct Task {
  Tensor context_images;  // [n, ch, H, W]
  std::vector<int> context_labels;
  Tensor target_images;  // [m, ch, H, W]
  std::vector<int> target_labels;
  int way = 0;
  int domain_id = 0;
  // Source-unique sample ids backing the disjointness guarantee.
  std::vector<int64_t> context_ids;
  std::vector<int64_t> target_ids;
};

struct SamplerConfig {
  int way_min = 2;
  int way_max = 10;
  int shot_min = 1;
  int shot_max = 5;
  int targets_per_class = 2;
  bool variable_way = true;  // false pins way to way_min
  // When true each class draws its own shot (class-imbalanced contexts).
  bool variable_shot_per_class = false;
  void validate() const;
};

// Anything tasks can be sampled from: a synthetic domain or a disk dataset.
class TaskSource {
 public:
  virtual ~TaskSource() = default;
  virtual int num_classes() const = 0;
  virtual int num_instances(int cls) const = 0;
  virtual Tensor image(int cls, int instance) const = 0;  // [ch, H, W]
  virtual int64_t instance_uid(int cls, int instance) const = 0;
  virtual int domain_id() const = 0;
};

// Procedural 32x32 glyph domains. Each domain renders one parametric family
// (bars, crosses, rings, checkers, gradients, dot-grids) under domain-wide
// shift parameters (rotation, inversion, noise, stroke thickness, channel
// tint). Domains 0-3 are meta-train, 4-5 meta-test. The same
// (domain, class, instance) triple always renders the same image.
class SyntheticDomain : public TaskSource {
 public:
  static constexpr int kNumDomains = 6;
  static constexpr int kMetaTrainDomains = 4;

  SyntheticDomain(int domain_id, uint64_t seed, int resolution = 32,
                  int channels = 3, int classes = 16,
                  int instances_per_class = 100000);

  int num_classes() const override { return classes_; }
  int num_instances(int) const override { return instances_per_class_; }
  Tensor image(int cls, int instance) const override;
  int64_t instance_uid(int cls, int instance) const override;
  int domain_id() const override { return domain_id_; }

  int resolution() const { return resolution_; }
  int channels() const { return channels_; }
  const char* family_name() const;

 private:
  struct ClassParams {
    float a = 0.f, b = 0.f, c = 0.f;
  };

  int domain_id_ = 0;
  uint64_t seed_ = 0;
  int resolution_ = 32;
  int channels_ = 3;
  int classes_ = 16;
  int instances_per_class_ = 0;
  std::vector<ClassParams> class_table_;
  // Domain-wide shift.
  float rotation_ = 0.f;
  bool invert_ = false;
  float noise_ = 0.f;
  float stroke_ = 1.f;
  float tint_[3] = {1.f, 1.f, 1.f};
};

std::vector<SyntheticDomain> make_synthetic_domains(uint64_t seed);

// Class-folder image dataset (binary pgm/ppm). Class order is lexicographic
// by directory name unless root/manifest.txt lists the directories.
class DiskDataset : public TaskSource {
 public:
  int num_classes() const override;
  int num_instances(int cls) const override;
  Tensor image(int cls, int instance) const override;
  int64_t instance_uid(int cls, int instance) const override;
  int domain_id() const override { return domain_id_; }

  const std::vector<std::string>& class_names() const { return class_names_; }

 private:
  friend DiskDataset load_disk_dataset(const std::string&, int, int, float,
                                       float, int);
  int domain_id_ = 0;
  std::vector<std::string> class_names_;
  std::vector<std::vector<Tensor>> images_;  // [class][instance]
};

DiskDataset load_disk_dataset(const std::string& root, int out_channels = 3,
                              int out_resolution = 32, float mean = 0.5f,
                              float stddev = 0.5f, int domain_id = 0);

// Draws one episodic task: way classes, per-class shots into the context,
// targets_per_class into the target set, labels compacted to [0, way).
Task sample_task(const SamplerConfig& cfg, const TaskSource& source,
                 RandomStream& rng);

struct BaseDataset {
  Tensor images;  // [n, ch, H, W]
  std::vector<int> labels;
  int num_classes = 0;
};

// Flattens (domain, class) pairs of the given domains into one labeled
// dataset for backbone pretraining.
BaseDataset make_synthetic_base(const std::vector<SyntheticDomain>& domains,
                                int instances_per_class);

}  // namespace caselab
