#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "caselab/episodes.hpp"
#include "caselab/errors.hpp"
#include "caselab/image_io.hpp"
#include "caselab/rng.hpp"

using namespace caselab;
namespace fs = std::filesystem;

namespace {

// Cheap stand-in source for sampler-only tests: no real rendering.
class FakeSource : public TaskSource {
 public:
  FakeSource(int classes, int instances)
      : classes_(classes), instances_(instances) {}
  int num_classes() const override { return classes_; }
  int num_instances(int) const override { return instances_; }
  Tensor image(int cls, int instance) const override {
    return Tensor::full({1, 2, 2},
                        static_cast<float>(cls * 1000 + instance));
  }
  int64_t instance_uid(int cls, int instance) const override {
    return int64_t(cls) * 1000000 + instance;
  }
  int domain_id() const override { return 0; }

 private:
  int classes_, instances_;
};

bool tasks_identical(const Task& a, const Task& b) {
  return a.way == b.way && a.context_labels == b.context_labels &&
         a.target_labels == b.target_labels && a.context_ids == b.context_ids &&
         a.target_ids == b.target_ids &&
         a.context_images.shape == b.context_images.shape &&
         std::memcmp(a.context_images.data.data(), b.context_images.data.data(),
                     a.context_images.data.size() * sizeof(float)) == 0 &&
         std::memcmp(a.target_images.data.data(), b.target_images.data.data(),
                     a.target_images.data.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("synthetic rendering is a pure function of the triple") {
  SyntheticDomain d1(2, 99);
  SyntheticDomain d2(2, 99);
  Tensor a = d1.image(3, 17);
  Tensor b = d2.image(3, 17);
  Tensor c = d1.image(3, 17);
  CHECK(std::memcmp(a.data.data(), b.data.data(),
                    a.data.size() * sizeof(float)) == 0);
  CHECK(std::memcmp(a.data.data(), c.data.data(),
                    a.data.size() * sizeof(float)) == 0);

  Tensor other = d1.image(3, 18);
  CHECK(std::memcmp(a.data.data(), other.data.data(),
                    a.data.size() * sizeof(float)) != 0);
}

TEST_CASE("all six domains render in range with distinct families") {
  std::vector<SyntheticDomain> domains = make_synthetic_domains(7);
  REQUIRE(domains.size() == 6);
  std::set<std::string> names;
  for (const SyntheticDomain& d : domains) {
    names.insert(d.family_name());
    Tensor img = d.image(0, 0);
    CHECK(img.shape == std::vector<int>{3, 32, 32});
    for (float v : img.data) {
      CHECK(v >= -1.f);
      CHECK(v <= 1.f);
    }
  }
  CHECK(names.size() == 6);
}

TEST_CASE("forced sampler config pins the task layout") {
  SamplerConfig cfg;
  cfg.way_min = cfg.way_max = 5;
  cfg.shot_min = cfg.shot_max = 1;
  cfg.targets_per_class = 2;
  FakeSource source(9, 30);
  RandomStream rng(4);
  Task task = sample_task(cfg, source, rng);
  CHECK(task.way == 5);
  CHECK(task.context_labels.size() == 5);
  CHECK(task.target_labels.size() == 10);
  CHECK(task.context_images.shape == std::vector<int>{5, 1, 2, 2});
  CHECK(task.target_images.shape == std::vector<int>{10, 1, 2, 2});
  std::set<int> labels(task.context_labels.begin(), task.context_labels.end());
  CHECK(labels == std::set<int>{0, 1, 2, 3, 4});
}

TEST_CASE("task stream is a pure function of the seed") {
  SyntheticDomain dom(0, 42, 16, 3, 8, 50);
  SamplerConfig cfg;
  cfg.way_min = 2;
  cfg.way_max = 5;
  RandomStream r1(123), r2(123);
  for (int i = 0; i < 3; ++i) {
    Task a = sample_task(cfg, dom, r1);
    Task b = sample_task(cfg, dom, r2);
    CHECK(tasks_identical(a, b));
  }
  RandomStream r3(124);
  Task c = sample_task(cfg, dom, r3);
  Task d = sample_task(cfg, dom, r1);
  CHECK(!tasks_identical(c, d));
}

TEST_CASE("context and target stay disjoint with compact labels") {
  FakeSource source(15, 12);
  SamplerConfig cfg;
  cfg.way_min = 2;
  cfg.way_max = 10;
  cfg.shot_min = 1;
  cfg.shot_max = 5;
  cfg.targets_per_class = 3;
  RandomStream rng(77);
  for (int i = 0; i < 200; ++i) {
    Task t = sample_task(cfg, source, rng);
    std::set<int64_t> ctx(t.context_ids.begin(), t.context_ids.end());
    std::set<int64_t> tgt(t.target_ids.begin(), t.target_ids.end());
    CHECK(ctx.size() == t.context_ids.size());
    CHECK(tgt.size() == t.target_ids.size());
    for (int64_t id : tgt) CHECK(ctx.count(id) == 0);

    std::set<int> seen(t.context_labels.begin(), t.context_labels.end());
    CHECK(static_cast<int>(seen.size()) == t.way);
    CHECK(*seen.begin() == 0);
    CHECK(*seen.rbegin() == t.way - 1);
    for (int lbl : t.target_labels) {
      CHECK(lbl >= 0);
      CHECK(lbl < t.way);
    }
  }
}

TEST_CASE("variable way draws uniformly") {
  FakeSource source(15, 40);
  SamplerConfig cfg;
  cfg.way_min = 2;
  cfg.way_max = 10;
  RandomStream rng(11);
  const int n = 1000;
  std::vector<int> hist(9, 0);
  for (int i = 0; i < n; ++i) {
    Task t = sample_task(cfg, source, rng);
    ++hist[static_cast<size_t>(t.way - 2)];
  }
  double expected = n / 9.0;
  double chi2 = 0.0;
  for (int h : hist) {
    double d = h - expected;
    chi2 += d * d / expected;
  }
  // 8 degrees of freedom, p > 0.01.
  CHECK(chi2 < 20.09);
}

TEST_CASE("per-class shots honor the configured range") {
  FakeSource source(10, 30);
  SamplerConfig cfg;
  cfg.way_min = cfg.way_max = 4;
  cfg.shot_min = 2;
  cfg.shot_max = 4;
  cfg.variable_shot_per_class = true;
  RandomStream rng(5);
  bool saw_imbalance = false;
  for (int i = 0; i < 50; ++i) {
    Task t = sample_task(cfg, source, rng);
    std::vector<int> counts(static_cast<size_t>(t.way), 0);
    for (int lbl : t.context_labels) ++counts[static_cast<size_t>(lbl)];
    for (int c : counts) {
      CHECK(c >= 2);
      CHECK(c <= 4);
    }
    if (*std::min_element(counts.begin(), counts.end()) !=
        *std::max_element(counts.begin(), counts.end()))
      saw_imbalance = true;
  }
  CHECK(saw_imbalance);
}

TEST_CASE("sampler errors name the shortfall") {
  FakeSource tiny_classes(3, 50);
  SamplerConfig cfg;
  cfg.way_min = cfg.way_max = 8;
  RandomStream rng(1);
  CHECK_THROWS_WITH_AS(sample_task(cfg, tiny_classes, rng),
                       doctest::Contains("8 classes"), ConfigError);

  FakeSource tiny_instances(10, 2);
  SamplerConfig cfg2;
  cfg2.way_min = cfg2.way_max = 2;
  cfg2.shot_min = cfg2.shot_max = 3;
  cfg2.targets_per_class = 2;
  RandomStream rng2(1);
  CHECK_THROWS_AS(sample_task(cfg2, tiny_instances, rng2), ConfigError);

  SamplerConfig bad;
  bad.way_min = 5;
  bad.way_max = 3;
  RandomStream rng3(1);
  CHECK_THROWS_AS(sample_task(bad, tiny_classes, rng3), ConfigError);
}

TEST_CASE("disk datasets follow the folder layout") {
  fs::path root = fs::temp_directory_path() / "caselab_disk_test";
  fs::remove_all(root);
  fs::create_directories(root / "a");
  fs::create_directories(root / "b");

  RawImage gray;
  gray.width = 8;
  gray.height = 6;
  gray.channels = 1;
  gray.pixels.resize(48);
  for (size_t i = 0; i < 48; ++i) gray.pixels[i] = static_cast<uint8_t>(i * 5);
  for (int i = 0; i < 3; ++i)
    write_pnm((root / "a" / ("img" + std::to_string(i) + ".pgm")).string(),
              gray);

  RawImage rgb;
  rgb.width = 4;
  rgb.height = 4;
  rgb.channels = 3;
  rgb.pixels.resize(48);
  for (size_t i = 0; i < 48; ++i) rgb.pixels[i] = static_cast<uint8_t>(i);
  for (int i = 0; i < 2; ++i)
    write_pnm((root / "b" / ("img" + std::to_string(i) + ".ppm")).string(),
              rgb);

  DiskDataset ds = load_disk_dataset(root.string(), 3, 8, 0.5f, 0.5f);
  CHECK(ds.num_classes() == 2);
  CHECK(ds.class_names()[0] == "a");
  CHECK(ds.num_instances(0) == 3);
  CHECK(ds.num_instances(1) == 2);
  Tensor img = ds.image(0, 0);
  CHECK(img.shape == std::vector<int>{3, 8, 8});
  // Grayscale replicated across channels.
  for (int64_t p = 0; p < 64; ++p)
    CHECK(img.data[static_cast<size_t>(p)] ==
          img.data[static_cast<size_t>(64 + p)]);

  // Manifest overrides lexicographic order.
  {
    std::ofstream m(root / "manifest.txt");
    m << "b\na\n";
  }
  DiskDataset ds2 = load_disk_dataset(root.string(), 3, 8, 0.5f, 0.5f);
  CHECK(ds2.class_names()[0] == "b");
  CHECK(ds2.num_instances(0) == 2);

  // Empty class directory errors by name.
  fs::remove(root / "manifest.txt");
  fs::create_directories(root / "c");
  CHECK_THROWS_WITH_AS(load_disk_dataset(root.string(), 3, 8, 0.5f, 0.5f),
                       doctest::Contains("'c'"), IoError);
  fs::remove_all(root);
}

TEST_CASE("pnm round-trip preserves pixels to quantization") {
  SyntheticDomain dom(4, 13);
  Tensor img = dom.image(2, 5);
  RawImage raw = tensor_to_image(img, 0.5f, 0.5f);
  fs::path p = fs::temp_directory_path() / "caselab_roundtrip.ppm";
  write_pnm(p.string(), raw);
  RawImage back = read_pnm(p.string());
  CHECK(back.width == 32);
  CHECK(back.channels == 3);
  Tensor re = image_to_tensor(back, 3, 32, 0.5f, 0.5f);
  // Half-step quantization in [0,1] doubles under the (x-0.5)/0.5 scaling.
  double max_err = 0;
  for (size_t i = 0; i < img.data.size(); ++i)
    max_err = std::max(max_err,
                       std::fabs(double(re.data[i]) - double(img.data[i])));
  CHECK(max_err <= 2.0 / 255.0 + 1e-6);
  fs::remove(p);
}

TEST_CASE("malformed pnm files fail with the path") {
  fs::path p = fs::temp_directory_path() / "caselab_bad.pgm";
  {
    std::ofstream out(p, std::ios::binary);
    out << "P5\n4 4\n255\n";
    out << "xx";  // truncated raster
  }
  CHECK_THROWS_WITH_AS(read_pnm(p.string()), doctest::Contains("caselab_bad"),
                       IoError);
  CHECK_THROWS_AS(read_pnm("/nonexistent/nope.pgm"), IoError);
  fs::remove(p);
}

TEST_CASE("base dataset flattens domain classes") {
  std::vector<SyntheticDomain> domains;
  domains.emplace_back(0, 3, 16, 3, 4, 100);
  domains.emplace_back(1, 3, 16, 3, 4, 100);
  BaseDataset base = make_synthetic_base(domains, 5);
  CHECK(base.num_classes == 8);
  CHECK(base.images.shape == std::vector<int>{40, 3, 16, 16});
  CHECK(base.labels.size() == 40);
  CHECK(base.labels.front() == 0);
  CHECK(base.labels.back() == 7);
}
