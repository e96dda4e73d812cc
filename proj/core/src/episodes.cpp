#include "caselab/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "caselab/errors.hpp"
#include "caselab/image_io.hpp"
#include "kernels.hpp"

namespace caselab {

namespace {

constexpr float kPi = 3.14159265358979323846f;

struct DomainShift {
  const char* family;
  float rotation;
  bool invert;
  float noise;
  float stroke;
  float tint[3];
};

// Domains 0-3 meta-train, 4-5 meta-test. The test families (gradients,
// dot-grids) are never seen in training, and their shifts (inversion, the
// strongest noise, extreme stroke widths, cold/magenta tints) sit outside
// the training range.
constexpr DomainShift kShifts[SyntheticDomain::kNumDomains] = {
    {"bars", 0.00f, false, 0.02f, 1.0f, {1.0f, 0.8f, 0.6f}},
    {"crosses", 0.26f, false, 0.03f, 1.2f, {0.7f, 1.0f, 0.8f}},
    {"rings", 0.00f, true, 0.02f, 0.9f, {0.9f, 0.7f, 1.0f}},
    {"checkers", 0.52f, false, 0.04f, 1.1f, {1.0f, 1.0f, 0.7f}},
    {"gradients", 0.79f, true, 0.06f, 1.3f, {0.6f, 0.9f, 1.0f}},
    {"dot-grids", 0.35f, false, 0.08f, 0.7f, {1.0f, 0.6f, 0.9f}},
};

}  // namespace

SyntheticDomain::SyntheticDomain(int domain_id, uint64_t seed, int resolution,
                                 int channels, int classes,
                                 int instances_per_class)
    : domain_id_(domain_id),
      seed_(seed),
      resolution_(resolution),
      channels_(channels),
      classes_(classes),
      instances_per_class_(instances_per_class) {
  if (domain_id < 0 || domain_id >= kNumDomains)
    throw ConfigError("domain id out of range: " + std::to_string(domain_id));
  if (channels != 1 && channels != 3)
    throw ConfigError("synthetic domains render 1 or 3 channels");
  const DomainShift& sh = kShifts[domain_id];
  rotation_ = sh.rotation;
  invert_ = sh.invert;
  noise_ = sh.noise;
  stroke_ = sh.stroke;
  for (int c = 0; c < 3; ++c) tint_[c] = sh.tint[c];

  RandomStream rng(derive_stream(seed_, "classes"));
  class_table_.resize(static_cast<size_t>(classes_));
  for (ClassParams& p : class_table_) {
    switch (domain_id_) {
      case 0:  // bars: frequency, orientation, sharpness
        p = {rng.uniform(1.5f, 5.5f), rng.uniform(0.f, kPi),
             rng.uniform(2.f, 6.f)};
        break;
      case 1:  // crosses: arm thickness, orientation, arm length
        p = {rng.uniform(0.06f, 0.20f), rng.uniform(0.f, kPi / 2),
             rng.uniform(0.5f, 0.95f)};
        break;
      case 2:  // rings: frequency, outer radius, sharpness
        p = {rng.uniform(1.5f, 5.f), rng.uniform(0.6f, 1.f),
             rng.uniform(2.f, 6.f)};
        break;
      case 3:  // checkers: fx, fy, softness
        p = {rng.uniform(1.f, 4.f), rng.uniform(1.f, 4.f),
             rng.uniform(2.f, 6.f)};
        break;
      case 4:  // gradients: frequency, direction, waveform mix
        p = {rng.uniform(0.5f, 3.f), rng.uniform(0.f, kPi),
             rng.uniform(0.f, 1.f)};
        break;
      default:  // dot-grids: pitch, dot radius (cell fraction), skew
        p = {rng.uniform(0.25f, 0.6f), rng.uniform(0.15f, 0.45f),
             rng.uniform(-0.3f, 0.3f)};
        break;
    }
  }
}

const char* SyntheticDomain::family_name() const {
  return kShifts[domain_id_].family;
}

int64_t SyntheticDomain::instance_uid(int cls, int instance) const {
  return (int64_t(domain_id_) << 40) | (int64_t(cls) << 24) | int64_t(instance);
}

Tensor SyntheticDomain::image(int cls, int instance) const {
  if (cls < 0 || cls >= classes_)
    throw ConfigError("class out of range: " + std::to_string(cls));
  const ClassParams& cp = class_table_[static_cast<size_t>(cls)];
  RandomStream rng(derive_stream(
      seed_, "img/" + std::to_string(cls) + "/" + std::to_string(instance)));
  float dx = rng.uniform(-0.15f, 0.15f);
  float dy = rng.uniform(-0.15f, 0.15f);
  float rot = rotation_ + rng.uniform(-0.1f, 0.1f);
  float phase = rng.uniform(0.f, 2.f * kPi);
  float zoom = rng.uniform(0.9f, 1.1f);
  float phase2 = rng.uniform(0.f, 2.f * kPi);

  int res = resolution_;
  Tensor out = Tensor::zeros({channels_, res, res});
  float cr = std::cos(rot), sr = std::sin(rot);
  for (int i = 0; i < res; ++i) {
    for (int j = 0; j < res; ++j) {
      float v0 = 2.f * (static_cast<float>(i) + 0.5f) / res - 1.f;
      float u0 = 2.f * (static_cast<float>(j) + 0.5f) / res - 1.f;
      float u = (cr * u0 + sr * v0) / zoom - dx;
      float v = (-sr * u0 + cr * v0) / zoom - dy;
      float val = 0.f;
      switch (domain_id_) {
        case 0: {  // bars
          float w = std::cos(kPi * cp.a * (u * std::cos(cp.b) + v * std::sin(cp.b)) + phase);
          val = kernels::sigmoid_val(cp.c * stroke_ * w * 2.f);
          break;
        }
        case 1: {  // crosses
          float co = std::cos(cp.b), so = std::sin(cp.b);
          float au = co * u + so * v, av = -so * u + co * v;
          float t = cp.a * stroke_;
          float a1 = kernels::sigmoid_val(20.f * (t - std::fabs(av))) *
                     kernels::sigmoid_val(20.f * (cp.c - std::fabs(au)));
          float a2 = kernels::sigmoid_val(20.f * (t - std::fabs(au))) *
                     kernels::sigmoid_val(20.f * (cp.c - std::fabs(av)));
          val = std::max(a1, a2);
          break;
        }
        case 2: {  // rings
          float r = std::hypot(u, v);
          float w = std::cos(2.f * kPi * cp.a * r + phase);
          val = kernels::sigmoid_val(cp.c * stroke_ * w * 2.f) *
                kernels::sigmoid_val(12.f * (cp.b - r));
          break;
        }
        case 3: {  // checkers
          float w = std::sin(kPi * cp.a * u + phase) *
                    std::sin(kPi * cp.b * v + phase2);
          val = kernels::sigmoid_val(cp.c * stroke_ * w * 2.f);
          break;
        }
        case 4: {  // gradients
          float t = u * std::cos(cp.b) + v * std::sin(cp.b);
          float wave = 0.5f + 0.5f * std::sin(kPi * cp.a * t * stroke_ + phase);
          float ramp = std::clamp(0.5f + 0.45f * t, 0.f, 1.f);
          val = cp.c * wave + (1.f - cp.c) * ramp;
          break;
        }
        default: {  // dot-grids
          float gu = u + cp.c * v;
          float du = gu / cp.a + phase * 0.159155f;  // phase/(2*pi) cell offset
          float dv = v / cp.a + phase2 * 0.159155f;
          float fu = du - std::round(du);
          float fv = dv - std::round(dv);
          float rr = std::hypot(fu, fv);
          val = kernels::sigmoid_val(24.f * (cp.b * stroke_ - rr));
          break;
        }
      }
      if (invert_) val = 1.f - val;
      val = std::clamp(val + noise_ * rng.normal(0.f, 1.f), 0.f, 1.f);
      for (int c = 0; c < channels_; ++c) {
        float tinted = channels_ == 3 ? val * tint_[c] : val;
        out.data[(size_t(c) * res + size_t(i)) * res + size_t(j)] =
            (tinted - 0.5f) / 0.5f;
      }
    }
  }
  return out;
}

std::vector<SyntheticDomain> make_synthetic_domains(uint64_t seed) {
  std::vector<SyntheticDomain> domains;
  domains.reserve(SyntheticDomain::kNumDomains);
  for (int d = 0; d < SyntheticDomain::kNumDomains; ++d)
    domains.emplace_back(d, derive_stream(seed, "domain-" + std::to_string(d)));
  return domains;
}

void SamplerConfig::validate() const {
  if (way_min < 1) throw ConfigError("way_min must be at least 1");
  if (way_max < way_min) throw ConfigError("way range is empty");
  if (shot_min < 1) throw ConfigError("shot_min must be at least 1");
  if (shot_max < shot_min) throw ConfigError("shot range is empty");
  if (targets_per_class < 1)
    throw ConfigError("targets_per_class must be at least 1");
}

Task sample_task(const SamplerConfig& cfg, const TaskSource& source,
                 RandomStream& rng) {
  cfg.validate();
  int way = cfg.variable_way ? rng.uniform_int(cfg.way_min, cfg.way_max)
                             : cfg.way_min;
  if (way > source.num_classes())
    throw ConfigError("task needs " + std::to_string(way) +
                      " classes but source has " +
                      std::to_string(source.num_classes()));
  std::vector<int> classes =
      rng.sample_without_replacement(source.num_classes(), way);
  int task_shot = cfg.variable_shot_per_class
                      ? 0
                      : rng.uniform_int(cfg.shot_min, cfg.shot_max);

  Task task;
  task.way = way;
  task.domain_id = source.domain_id();
  std::vector<Tensor> ctx, tgt;
  for (int label = 0; label < way; ++label) {
    int cls = classes[static_cast<size_t>(label)];
    int shot = cfg.variable_shot_per_class
                   ? rng.uniform_int(cfg.shot_min, cfg.shot_max)
                   : task_shot;
    int need = shot + cfg.targets_per_class;
    int avail = source.num_instances(cls);
    if (need > avail)
      throw ConfigError("class " + std::to_string(cls) + " has " +
                        std::to_string(avail) + " instances, task needs " +
                        std::to_string(need));
    std::vector<int> picks = rng.sample_without_replacement(avail, need);
    for (int s = 0; s < shot; ++s) {
      ctx.push_back(source.image(cls, picks[static_cast<size_t>(s)]));
      task.context_labels.push_back(label);
      task.context_ids.push_back(
          source.instance_uid(cls, picks[static_cast<size_t>(s)]));
    }
    for (int s = shot; s < need; ++s) {
      tgt.push_back(source.image(cls, picks[static_cast<size_t>(s)]));
      task.target_labels.push_back(label);
      task.target_ids.push_back(
          source.instance_uid(cls, picks[static_cast<size_t>(s)]));
    }
  }
  task.context_images = stack(ctx);
  task.target_images = stack(tgt);
  return task;
}

int DiskDataset::num_classes() const {
  return static_cast<int>(class_names_.size());
}

int DiskDataset::num_instances(int cls) const {
  return static_cast<int>(images_.at(static_cast<size_t>(cls)).size());
}

Tensor DiskDataset::image(int cls, int instance) const {
  return images_.at(static_cast<size_t>(cls)).at(static_cast<size_t>(instance));
}

int64_t DiskDataset::instance_uid(int cls, int instance) const {
  return (int64_t(domain_id_) << 40) | (int64_t(cls) << 24) | int64_t(instance);
}

DiskDataset load_disk_dataset(const std::string& root, int out_channels,
                              int out_resolution, float mean, float stddev,
                              int domain_id) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw IoError("dataset root not found: " + root);

  std::vector<std::string> names;
  fs::path manifest = fs::path(root) / "manifest.txt";
  if (fs::exists(manifest)) {
    std::ifstream in(manifest);
    if (!in) throw IoError("cannot open " + manifest.string());
    std::string line;
    while (std::getline(in, line)) {
      while (!line.empty() && (line.back() == '\r' || line.back() == ' '))
        line.pop_back();
      if (!line.empty()) names.push_back(line);
    }
  } else {
    for (const fs::directory_entry& e : fs::directory_iterator(root))
      if (e.is_directory()) names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
  }
  if (names.empty()) throw IoError("no class directories in " + root);

  DiskDataset ds;
  ds.domain_id_ = domain_id;
  ds.class_names_ = names;
  for (const std::string& name : names) {
    fs::path dir = fs::path(root) / name;
    if (!fs::is_directory(dir))
      throw IoError("missing class directory: " + dir.string());
    std::vector<std::string> files;
    for (const fs::directory_entry& e : fs::directory_iterator(dir))
      if (e.is_regular_file()) files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    std::vector<Tensor> imgs;
    for (const std::string& f : files) {
      RawImage raw = read_pnm(f);
      imgs.push_back(
          image_to_tensor(raw, out_channels, out_resolution, mean, stddev));
    }
    if (imgs.empty()) throw IoError("class '" + name + "' has no images");
    ds.images_.push_back(std::move(imgs));
  }
  return ds;
}

BaseDataset make_synthetic_base(const std::vector<SyntheticDomain>& domains,
                                int instances_per_class) {
  if (domains.empty()) throw ConfigError("no domains for base dataset");
  BaseDataset base;
  std::vector<Tensor> images;
  int label = 0;
  for (const SyntheticDomain& dom : domains) {
    for (int cls = 0; cls < dom.num_classes(); ++cls) {
      for (int inst = 0; inst < instances_per_class; ++inst) {
        images.push_back(dom.image(cls, inst));
        base.labels.push_back(label);
      }
      ++label;
    }
  }
  base.num_classes = label;
  base.images = stack(images);
  return base;
}

}  // namespace caselab
