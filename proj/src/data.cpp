#include "sptnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "sptnet/io.hpp"

namespace sptnet {

namespace {

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

}  // namespace

ImageBatch<float> Dataset::gather(const std::vector<std::size_t>& indices) const {
  ImageBatch<float> batch(static_cast<Index>(indices.size()), height, width);
  for (std::size_t i = 0; i < indices.size(); ++i) batch.data.row(static_cast<Index>(i)) = images.row(static_cast<Index>(indices[i]));
  return batch;
}

Matrix<float> synthetic_templates(const SyntheticSpec& spec) {
  if (spec.height < 1 || spec.width < 1 || spec.num_classes < 2 || spec.per_class < 1 || spec.noise < 0.0 ||
      spec.max_frequency < 1 || spec.components < 1 || spec.template_rms <= 0.0)
    throw ConfigError("synthetic spec: invalid size, class count, noise or template parameters");
  const Index pixels = Index{kChannels} * spec.height * spec.width;
  Matrix<float> templates(spec.num_classes, pixels);
  Rng rng(spec.seed, 0x7e3b1a7eULL);
  std::vector<double> t(static_cast<std::size_t>(pixels));
  for (int c = 0; c < spec.num_classes; ++c) {
    std::fill(t.begin(), t.end(), 0.0);
    for (int ch = 0; ch < kChannels; ++ch) {
      for (int k = 0; k < spec.components; ++k) {
        const auto fy = static_cast<double>(rng.below(static_cast<std::uint64_t>(spec.max_frequency) + 1));
        const auto fx = static_cast<double>(rng.below(static_cast<std::uint64_t>(spec.max_frequency) + 1));
        const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double amp = rng.normal();
        for (int y = 0; y < spec.height; ++y)
          for (int x = 0; x < spec.width; ++x)
            t[static_cast<std::size_t>((ch * spec.height + y) * spec.width + x)] +=
                amp * std::cos(2.0 * std::numbers::pi * (fx * x / spec.width + fy * y / spec.height) + phase);
      }
    }
    double ss = 0.0;
    for (double v : t) ss += v * v;
    const double scale = spec.template_rms / std::sqrt(std::max(ss / static_cast<double>(pixels), 1e-12));
    for (Index i = 0; i < pixels; ++i) templates(c, i) = static_cast<float>(t[static_cast<std::size_t>(i)] * scale);
  }
  for (int a = 0; a < spec.num_classes; ++a)
    for (int b = a + 1; b < spec.num_classes; ++b) {
      const double dist = (templates.row(a) - templates.row(b)).cast<double>().norm();
      if (!(dist > 3.0 * spec.noise)) {
        std::ostringstream os;
        os << "synthetic spec: templates " << a << " and " << b << " are closer (" << dist << ") than 3 sigma";
        throw ConfigError(os.str());
      }
    }
  return templates;
}

Dataset gen_synthetic(const SyntheticSpec& spec) {
  const Matrix<float> templates = synthetic_templates(spec);
  Dataset data;
  data.height = spec.height;
  data.width = spec.width;
  data.num_classes = spec.num_classes;
  data.images.resize(Index{spec.num_classes} * spec.per_class, templates.cols());
  data.labels.reserve(static_cast<std::size_t>(data.images.rows()));
  Rng rng(spec.seed, 0x401e5eULL);
  Index row = 0;
  for (int c = 0; c < spec.num_classes; ++c) {
    for (int i = 0; i < spec.per_class; ++i, ++row) {
      for (Index k = 0; k < templates.cols(); ++k)
        data.images(row, k) = templates(c, k) + static_cast<float>(spec.noise * rng.normal());
      data.labels.push_back(c);
    }
  }
  return data;
}

Index TrainingSet::labelled_count() const {
  return static_cast<Index>(std::count_if(labels.begin(), labels.end(), [](int y) { return y != kUnlabelled; }));
}

TrainingSet GCDSplit::training_set() const {
  TrainingSet set;
  for (const auto& [index, label] : labelled) {
    set.indices.push_back(index);
    set.labels.push_back(label);
  }
  for (std::size_t index : unlabelled) {
    set.indices.push_back(index);
    set.labels.push_back(kUnlabelled);
  }
  return set;
}

HiddenLabels GCDSplit::hidden_labels(const Dataset& data) const {
  HiddenLabels h;
  h.indices = unlabelled;
  for (std::size_t index : unlabelled) {
    const int y = data.labels[index];
    h.labels.push_back(y);
    h.is_old.push_back(std::find(old_classes.begin(), old_classes.end(), y) != old_classes.end());
  }
  return h;
}

GCDSplit make_split(const Dataset& data, int old_class_count, double rho, std::uint64_t seed) {
  if (old_class_count < 1 || old_class_count > data.num_classes)
    throw ConfigError("split: old class count must lie in [1, num_classes]");
  if (!(rho > 0.0 && rho <= 1.0)) throw ConfigError("split: rho must lie in (0, 1]");
  GCDSplit split;
  split.rho = rho;
  for (int c = 0; c < data.num_classes; ++c) (c < old_class_count ? split.old_classes : split.new_classes).push_back(c);

  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(data.num_classes));
  for (std::size_t i = 0; i < data.labels.size(); ++i) {
    const int y = data.labels[i];
    if (y < 0 || y >= data.num_classes) throw ConfigError("split: dataset label out of range");
    by_class[static_cast<std::size_t>(y)].push_back(i);
  }
  std::vector<bool> is_labelled(data.labels.size(), false);
  for (int c = 0; c < old_class_count; ++c) {
    auto members = by_class[static_cast<std::size_t>(c)];
    Rng rng(seed, 0x5b117ULL, static_cast<std::uint64_t>(c));
    shuffle(members, rng);
    const auto take = static_cast<std::size_t>(std::llround(rho * static_cast<double>(members.size())));
    for (std::size_t k = 0; k < take && k < members.size(); ++k) is_labelled[members[k]] = true;
  }
  for (std::size_t i = 0; i < data.labels.size(); ++i) {
    if (is_labelled[i])
      split.labelled.emplace_back(i, data.labels[i]);
    else
      split.unlabelled.push_back(i);
  }
  split.degenerate = split.unlabelled.empty();
  return split;
}

void AugmentConfig::validate() const {
  if (!(crop_min > 0.0 && crop_min <= crop_max && crop_max <= 1.0))
    throw ConfigError("augmentation: crop bounds must satisfy 0 < crop_min <= crop_max <= 1");
  if (!(jitter >= 0.0 && jitter < 1.0)) throw ConfigError("augmentation: jitter must lie in [0, 1)");
}

namespace {

RowVector<float> augment(const Eigen::Ref<const RowVector<float>>& image, int height, int width,
                         const AugmentConfig& config, Rng& rng) {
  const double area = rng.uniform(config.crop_min, config.crop_max);
  const double side = std::sqrt(area);
  const int ch = std::clamp(static_cast<int>(std::lround(side * height)), 1, height);
  const int cw = std::clamp(static_cast<int>(std::lround(side * width)), 1, width);
  const int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(height - ch + 1)));
  const int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(width - cw + 1)));
  const bool flip = config.flip && rng.uniform() < 0.5;
  float gain[kChannels];
  for (float& g : gain) g = static_cast<float>(1.0 - config.jitter * rng.uniform());

  RowVector<float> out = RowVector<float>::Zero(image.size());
  for (int c = 0; c < kChannels; ++c)
    for (int y = y0; y < y0 + ch; ++y)
      for (int x = x0; x < x0 + cw; ++x) {
        const int dx = flip ? width - 1 - x : x;
        out((Index{c} * height + y) * width + dx) = gain[c] * image((Index{c} * height + y) * width + x);
      }
  return out;
}

}  // namespace

std::pair<RowVector<float>, RowVector<float>> two_views(const Eigen::Ref<const RowVector<float>>& image, int height,
                                                        int width, const AugmentConfig& config, std::uint64_t seed,
                                                        std::uint64_t instance, std::uint64_t epoch) {
  if (image.size() != Index{kChannels} * height * width) throw ShapeError("two_views: image size mismatch");
  if (!config.enabled) return {image, image};
  config.validate();
  Rng first(seed, instance, epoch, 1);
  Rng second(seed, instance, epoch, 2);
  return {augment(image, height, width, config, first), augment(image, height, width, config, second)};
}

std::vector<std::vector<std::size_t>> stratified_batches(const TrainingSet& set, int batch_size, std::uint64_t seed,
                                                         std::uint64_t epoch) {
  if (batch_size < 2) throw ConfigError("batch size must be >= 2");
  std::vector<std::size_t> lab, unl;
  for (std::size_t i = 0; i < set.labels.size(); ++i) (set.labels[i] == kUnlabelled ? unl : lab).push_back(i);
  Rng rng(seed, 0xba7c4ULL, epoch);
  shuffle(lab, rng);
  shuffle(unl, rng);
  const std::size_t total = set.labels.size();
  const std::size_t count = (total + static_cast<std::size_t>(batch_size) - 1) / static_cast<std::size_t>(batch_size);
  std::vector<std::vector<std::size_t>> batches(count);
  for (std::size_t b = 0; b < count; ++b) {
    for (std::size_t k = b * lab.size() / count; k < (b + 1) * lab.size() / count; ++k) batches[b].push_back(lab[k]);
    for (std::size_t k = b * unl.size() / count; k < (b + 1) * unl.size() / count; ++k) batches[b].push_back(unl[k]);
  }
  std::erase_if(batches, [](const auto& b) { return b.size() < 2; });
  return batches;
}

void write_dataset(const std::filesystem::path& dir, const Dataset& data, const GCDSplit& split) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_f32_le(dir / "images.bin", std::span<const float>(data.images.data(), static_cast<std::size_t>(data.images.size())));

  std::vector<int> label_of(static_cast<std::size_t>(data.size()), kUnlabelled);
  for (const auto& [index, label] : split.labelled) label_of[index] = label;
  const Index bytes_per_image = data.images.cols() * 4;

  std::ostringstream os;
  os << "sptnet-dataset 1\n";
  os << "images images.bin\n";
  os << "shape " << kChannels << ' ' << data.height << ' ' << data.width << '\n';
  os << "count " << data.size() << '\n';
  os << "classes " << data.num_classes << '\n';
  os << "old";
  for (int c : split.old_classes) os << ' ' << c;
  os << "\nnew";
  for (int c : split.new_classes) os << ' ' << c;
  os << "\nrho " << split.rho << '\n';
  os << "[instances]\n";
  for (Index i = 0; i < data.size(); ++i) {
    os << i << ' ' << i * bytes_per_image << ' ';
    const int y = label_of[static_cast<std::size_t>(i)];
    if (y == kUnlabelled)
      os << "UNLABELLED\n";
    else
      os << y << '\n';
  }
  os << "[hidden]\n";
  for (std::size_t index : split.unlabelled) os << index << ' ' << data.labels[index] << '\n';
  write_text(dir / "manifest.txt", os.str());
}

StoredDataset read_dataset(const std::filesystem::path& manifest) {
  std::istringstream in(read_text(manifest));
  auto fail = [&](const std::string& why) -> IoError { return IoError(manifest.string() + ": " + why); };
  std::string line, key;
  StoredDataset out;
  Dataset& data = out.data;
  GCDSplit& split = out.split;
  std::string blob;
  int channels = 0;
  Index count = -1;
  if (!std::getline(in, line) || line != "sptnet-dataset 1") throw fail("missing header");
  std::string section;
  std::vector<Index> offsets;
  std::vector<int> instance_labels;
  std::vector<std::pair<std::size_t, int>> hidden;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line == "[instances]" || line == "[hidden]") {
      section = line;
      continue;
    }
    std::istringstream ls(line);
    if (section.empty()) {
      ls >> key;
      if (key == "images") ls >> blob;
      else if (key == "shape") ls >> channels >> data.height >> data.width;
      else if (key == "count") ls >> count;
      else if (key == "classes") ls >> data.num_classes;
      else if (key == "old") for (int c; ls >> c;) split.old_classes.push_back(c);
      else if (key == "new") for (int c; ls >> c;) split.new_classes.push_back(c);
      else if (key == "rho") ls >> split.rho;
      else throw fail("unknown header key '" + key + "'");
    } else if (section == "[instances]") {
      Index id = 0, offset = 0;
      std::string label;
      if (!(ls >> id >> offset >> label) || id != static_cast<Index>(offsets.size())) throw fail("bad instance line: " + line);
      offsets.push_back(offset);
      instance_labels.push_back(label == "UNLABELLED" ? kUnlabelled : std::stoi(label));
    } else {
      std::size_t id = 0;
      int y = 0;
      if (!(ls >> id >> y)) throw fail("bad hidden line: " + line);
      hidden.emplace_back(id, y);
    }
  }
  if (channels != kChannels || data.height < 1 || data.width < 1 || count < 0 || blob.empty())
    throw fail("incomplete header");
  if (static_cast<Index>(offsets.size()) != count) throw fail("instance count mismatch");
  const std::vector<float> values = read_f32_le(manifest.parent_path() / blob);
  const Index pixels = Index{kChannels} * data.height * data.width;
  data.images.resize(count, pixels);
  data.labels.assign(static_cast<std::size_t>(count), kUnlabelled);
  for (Index i = 0; i < count; ++i) {
    const Index start = offsets[static_cast<std::size_t>(i)] / 4;
    if (offsets[static_cast<std::size_t>(i)] % 4 != 0 || start + pixels > static_cast<Index>(values.size()))
      throw fail("image offset out of range");
    for (Index k = 0; k < pixels; ++k) data.images(i, k) = values[static_cast<std::size_t>(start + k)];
    const int y = instance_labels[static_cast<std::size_t>(i)];
    if (y != kUnlabelled) {
      split.labelled.emplace_back(static_cast<std::size_t>(i), y);
      data.labels[static_cast<std::size_t>(i)] = y;
    } else {
      split.unlabelled.push_back(static_cast<std::size_t>(i));
    }
  }
  for (const auto& [id, y] : hidden) {
    if (id >= data.labels.size() || instance_labels[id] != kUnlabelled) throw fail("hidden label for a labelled row");
    data.labels[id] = y;
  }
  for (std::size_t id : split.unlabelled)
    if (data.labels[id] == kUnlabelled) throw fail("unlabelled row without a hidden label");
  split.degenerate = split.unlabelled.empty();
  return out;
}

}  // namespace sptnet
