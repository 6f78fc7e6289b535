#include "sptnet/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include "sptnet/io.hpp"

namespace sptnet {

const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> schema = {
      {"run.id", "run", "name of the run directory under run.output_dir"},
      {"run.output_dir", "runs", "parent directory for run outputs"},
      {"run.seed", "0", "seed for model init, prompt init, batching and augmentation"},

      {"data.manifest", "", "dataset manifest written by `split`; empty generates the synthetic set"},
      {"data.height", "224", "synthetic image height"},
      {"data.width", "224", "synthetic image width"},
      {"data.num_classes", "8", "synthetic class count"},
      {"data.num_old", "4", "classes [0, num_old) are old (labelled) classes"},
      {"data.per_class", "20", "synthetic instances per class"},
      {"data.noise", "0.3", "per-pixel Gaussian noise sigma"},
      {"data.max_frequency", "3", "highest spatial frequency of the class templates"},
      {"data.components", "6", "sinusoids per channel per template"},
      {"data.seed", "0", "seed of the synthetic generator"},

      {"split.rho", "0.5", "labelled fraction of each old class, in (0, 1]"},
      {"split.seed", "0", "seed of the labelled/unlabelled split"},

      {"aug.enabled", "true", "augment the two views"},
      {"aug.crop_min", "0.7", "smallest kept-window area fraction"},
      {"aug.crop_max", "1.0", "largest kept-window area fraction"},
      {"aug.flip", "true", "random horizontal flip"},
      {"aug.jitter", "0.1", "per-channel contrast drawn from [1 - jitter, 1]"},

      {"prompt.variant", "sptnet", "none | vpt | global | spt | shared | shared_global | sptnet"},
      {"prompt.m", "1", "per-patch border width m"},
      {"prompt.m_plus", "30", "image border width m+"},
      {"prompt.vpt_length", "4", "VPT tokens per layer"},
      {"prompt.vpt_deep", "true", "VPT tokens at every layer (false: first layer only)"},
      {"prompt.init", "0.03", "prompts start uniform in [-init, init]"},
      {"prompt.views", "one", "one: only the second view is prompted; both: both views"},

      {"model.patch", "16", "square patch side"},
      {"model.depth", "2", "encoder blocks"},
      {"model.dim", "32", "token width"},
      {"model.heads", "4", "attention heads"},
      {"model.mlp_ratio", "2", "MLP hidden width over token width"},
      {"model.proj_dim", "32", "projection head output width"},
      {"model.num_prototypes", "0", "prototype count; 0 uses data.num_classes"},
      {"model.trainable_blocks", "1", "top encoder blocks in the model group"},
      {"model.train_final_norm", "true", "final LayerNorm in the model group"},

      {"loss.lambda", "0.35", "supervised weight"},
      {"loss.epsilon", "1.0", "mean-entropy weight"},
      {"loss.tau_u", "0.07", "unsupervised contrastive temperature"},
      {"loss.tau_c", "1.0", "supervised contrastive temperature"},
      {"loss.tau_s", "0.1", "student temperature"},
      {"loss.tau_t", "0.07", "teacher temperature"},
      {"loss.denominator", "standard", "standard | paper_verbatim (negatives only)"},

      {"schedule.strategy", "alternate", "alternate | end_to_end | data_first | model_first"},
      {"schedule.k", "20", "iterations per stage when alternating"},
      {"schedule.lr_b", "3e-3", "model group learning rate"},
      {"schedule.wd_b", "5e-4", "model group weight decay"},
      {"schedule.lr_p", "1.0", "prompt group learning rate"},
      {"schedule.wd_p", "0", "prompt group weight decay"},
      {"schedule.momentum", "0.9", "SGD momentum"},
      {"schedule.lr_schedule", "constant", "constant | cosine"},
      {"schedule.epochs", "200", "training epochs"},
      {"schedule.batch_size", "64", "instances per batch"},
      {"schedule.phase_split", "0.5", "data_first / model_first: fraction of epochs in the first phase"},

      {"train.eval_every", "1", "evaluate ACC every this many epochs (the last epoch always)"},
      {"train.checkpoint_every", "50", "checkpoint every this many epochs; 0 only initial and final"},
      {"train.log_steps", "true", "write one metrics record per step"},

      {"attn.query", "cls", "cls or a patch index"},
      {"attn.top_fraction", "0.1", "fraction of patches kept per head"},
      {"attn.images", "4", "first images of D_u to dump"},
  };
  return schema;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

class Reader {
 public:
  explicit Reader(const ConfigValues& v) : v_(v) {}

  const std::string& str(const std::string& key) const { return v_.get(key); }

  long long integer(const std::string& key, long long lo, long long hi) const {
    const std::string& s = str(key);
    long long out = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc{} || ptr != s.data() + s.size()) fail(key, "expected an integer");
    if (out < lo || out > hi) fail(key, "out of range [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    return out;
  }

  std::uint64_t seed(const std::string& key) const {
    const std::string& s = str(key);
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc{} || ptr != s.data() + s.size()) fail(key, "expected a non-negative integer");
    return out;
  }

  double real(const std::string& key) const {
    const std::string& s = str(key);
    double out = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc{} || ptr != s.data() + s.size() || !std::isfinite(out)) fail(key, "expected a finite number");
    return out;
  }

  bool boolean(const std::string& key) const {
    const std::string& s = str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    fail(key, "expected true or false");
  }

  [[noreturn]] void fail(const std::string& key, const std::string& why) const {
    throw ConfigError(key + " = '" + str(key) + "': " + why);
  }

 private:
  const ConfigValues& v_;
};

// Re-labels errors thrown by the module validators with the key that feeds them.
template <typename Fn>
auto with_key(const std::string& key, Fn&& fn) {
  try {
    return fn();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

}  // namespace

ConfigValues::ConfigValues() {
  for (const auto& k : config_schema()) values_[k.key] = k.default_value;
}

bool ConfigValues::is_known(const std::string& key) const { return values_.count(key) > 0; }

void ConfigValues::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second = value;
}

const std::string& ConfigValues::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

void ConfigValues::merge_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(number) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    if (!is_known(key))
      throw ConfigError(origin + ":" + std::to_string(number) + ": unknown config key '" + key + "'");
    set(key, trim(line.substr(eq + 1)));
  }
}

void ConfigValues::merge_file(const std::filesystem::path& path) { merge_text(read_text(path), path.string()); }

std::string ConfigValues::dump() const {
  std::ostringstream out;
  for (const auto& k : config_schema()) out << k.key << " = " << values_.at(k.key) << '\n';
  return out.str();
}

ExperimentConfig resolve(const ConfigValues& values) {
  const Reader r(values);
  ExperimentConfig c;
  c.run_id = r.str("run.id");
  if (c.run_id.empty() || c.run_id.find('/') != std::string::npos) r.fail("run.id", "must be a plain name");
  c.output_dir = r.str("run.output_dir");
  c.seed = r.seed("run.seed");

  c.manifest = r.str("data.manifest");
  auto& s = c.synthetic;
  s.height = static_cast<int>(r.integer("data.height", 1, 4096));
  s.width = static_cast<int>(r.integer("data.width", 1, 4096));
  s.num_classes = static_cast<int>(r.integer("data.num_classes", 1, 100000));
  s.per_class = static_cast<int>(r.integer("data.per_class", 1, 1000000));
  s.noise = r.real("data.noise");
  if (s.noise < 0) r.fail("data.noise", "must be >= 0");
  s.max_frequency = static_cast<int>(r.integer("data.max_frequency", 1, 64));
  s.components = static_cast<int>(r.integer("data.components", 1, 1000));
  s.seed = r.seed("data.seed");
  c.num_old = static_cast<int>(r.integer("data.num_old", 1, 100000));
  if (c.manifest.empty() && c.num_old > s.num_classes) r.fail("data.num_old", "exceeds data.num_classes");

  c.rho = r.real("split.rho");
  if (!(c.rho > 0.0 && c.rho <= 1.0)) r.fail("split.rho", "must be in (0, 1]");
  c.split_seed = r.seed("split.seed");

  c.augment.enabled = r.boolean("aug.enabled");
  c.augment.crop_min = r.real("aug.crop_min");
  c.augment.crop_max = r.real("aug.crop_max");
  c.augment.flip = r.boolean("aug.flip");
  c.augment.jitter = r.real("aug.jitter");
  with_key("aug.*", [&] { c.augment.validate(); });

  c.prompt.variant = with_key("prompt.variant", [&] { return parse_prompt_variant(r.str("prompt.variant")); });
  c.prompt.margin = static_cast<int>(r.integer("prompt.m", 1, 4096));
  c.prompt.global_margin = static_cast<int>(r.integer("prompt.m_plus", 1, 4096));
  c.prompt.vpt_length = static_cast<int>(r.integer("prompt.vpt_length", 1, 4096));
  c.prompt.vpt_deep = r.boolean("prompt.vpt_deep");
  c.prompt.init_range = r.real("prompt.init");
  if (c.prompt.init_range < 0) r.fail("prompt.init", "must be >= 0");
  const std::string& views = r.str("prompt.views");
  if (views == "one") c.views = PromptViews::one;
  else if (views == "both") c.views = PromptViews::both;
  else r.fail("prompt.views", "expected one or both");

  auto& m = c.model;
  m.image_h = s.height;
  m.image_w = s.width;
  m.patch_h = m.patch_w = static_cast<int>(r.integer("model.patch", 1, 4096));
  m.depth = static_cast<int>(r.integer("model.depth", 1, 64));
  m.dim = static_cast<int>(r.integer("model.dim", 1, 8192));
  m.heads = static_cast<int>(r.integer("model.heads", 1, 256));
  m.mlp_ratio = r.real("model.mlp_ratio");
  m.proj_dim = static_cast<int>(r.integer("model.proj_dim", 1, 8192));
  m.num_prototypes = static_cast<int>(r.integer("model.num_prototypes", 0, 100000));
  if (m.num_prototypes == 0) m.num_prototypes = s.num_classes;
  m.trainable_blocks = static_cast<int>(r.integer("model.trainable_blocks", 0, 64));
  m.train_final_norm = r.boolean("model.train_final_norm");
  if (c.manifest.empty()) {
    with_key("model.*", [&] { m.validate(); });
    with_key("prompt.*", [&] { count_prompt_params(prompt_geometry(c.prompt, m)); });
  }

  auto& l = c.loss;
  l.lambda = r.real("loss.lambda");
  l.epsilon = r.real("loss.epsilon");
  l.tau_u = r.real("loss.tau_u");
  l.tau_c = r.real("loss.tau_c");
  l.tau_s = r.real("loss.tau_s");
  l.tau_t = r.real("loss.tau_t");
  const std::string& denom = r.str("loss.denominator");
  if (denom == "standard") l.denominator = NceDenominator::standard;
  else if (denom == "paper_verbatim") l.denominator = NceDenominator::paper_verbatim;
  else r.fail("loss.denominator", "expected standard or paper_verbatim");
  with_key("loss.*", [&] { l.validate(); });

  auto& sc = c.schedule;
  sc.strategy = with_key("schedule.strategy", [&] { return parse_strategy(r.str("schedule.strategy")); });
  sc.k = static_cast<int>(r.integer("schedule.k", 1, 1 << 30));
  sc.lr_b = r.real("schedule.lr_b");
  sc.wd_b = r.real("schedule.wd_b");
  sc.lr_p = r.real("schedule.lr_p");
  sc.wd_p = r.real("schedule.wd_p");
  sc.momentum = r.real("schedule.momentum");
  const std::string& lrs = r.str("schedule.lr_schedule");
  if (lrs == "constant") sc.cosine = false;
  else if (lrs == "cosine") sc.cosine = true;
  else r.fail("schedule.lr_schedule", "expected constant or cosine");
  sc.epochs = static_cast<int>(r.integer("schedule.epochs", 0, 1 << 30));
  sc.batch_size = static_cast<int>(r.integer("schedule.batch_size", 2, 1 << 20));
  sc.phase_split = r.real("schedule.phase_split");
  sc.seed = c.seed;
  with_key("schedule.*", [&] { sc.validate(); });

  c.eval_every = static_cast<int>(r.integer("train.eval_every", 1, 1 << 30));
  c.checkpoint_every = static_cast<int>(r.integer("train.checkpoint_every", 0, 1 << 30));
  c.log_steps = r.boolean("train.log_steps");

  if (r.str("attn.query") == "cls") c.attn_query.reset();
  else c.attn_query = static_cast<int>(r.integer("attn.query", 0, 1 << 30));
  c.attn_top_fraction = r.real("attn.top_fraction");
  if (!(c.attn_top_fraction > 0.0 && c.attn_top_fraction <= 1.0)) r.fail("attn.top_fraction", "must be in (0, 1]");
  c.attn_images = static_cast<int>(r.integer("attn.images", 1, 1 << 20));
  return c;
}

}  // namespace sptnet
