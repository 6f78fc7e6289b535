#include "sptnet/experiment.hpp"

#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "sptnet/io.hpp"
#include "sptnet/metrics.hpp"

namespace sptnet {

using nlohmann::json;

StoredDataset load_data(const ExperimentConfig& config) {
  if (!config.manifest.empty()) return read_dataset(config.manifest);
  StoredDataset out;
  out.data = gen_synthetic(config.synthetic);
  out.split = make_split(out.data, config.num_old, config.rho, config.split_seed);
  return out;
}

void bind_to_data(ExperimentConfig& config, const ConfigValues& values, const Dataset& data) {
  config.model.image_h = data.height;
  config.model.image_w = data.width;
  if (values.get("model.num_prototypes") == "0") config.model.num_prototypes = data.num_classes;
  try {
    config.model.validate();
    count_prompt_params(prompt_geometry(config.prompt, config.model));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model/prompt geometry does not fit the data: ") + e.what());
  }
}

TrainState build_state(const ExperimentConfig& config) {
  return init_state(init_model<float>(config.model, config.seed),
                    make_prompts<float>(config.prompt, config.model, mix_seed(config.seed, 0x70726f6d7074ULL)),
                    config.schedule);
}

void cmd_split(const ConfigValues& values, const std::filesystem::path& dir) {
  ExperimentConfig config = resolve(values);
  config.manifest.clear();
  const StoredDataset stored = load_data(config);
  write_dataset(dir, stored.data, stored.split);
}

ConfigValues checkpoint_config(const std::filesystem::path& dir) {
  ConfigValues values;
  values.merge_text(load_archive(dir).config, (dir / "manifest.txt").string());
  return values;
}

std::filesystem::path checkpoint_dir(const std::filesystem::path& run_dir, int epoch) {
  std::ostringstream name;
  name << "epoch_" << std::setw(4) << std::setfill('0') << epoch;
  return run_dir / "checkpoints" / name.str();
}

TrainResult cmd_train(const ConfigValues& values, const std::optional<std::filesystem::path>& resume,
                      std::ostream* log) {
  ExperimentConfig config = resolve(values);
  const StoredDataset stored = load_data(config);
  bind_to_data(config, values, stored.data);

  TrainResult result;
  result.run_dir = config.output_dir / config.run_id;
  std::error_code ec;
  std::filesystem::create_directories(result.run_dir, ec);
  if (ec) throw IoError("cannot create " + result.run_dir.string() + ": " + ec.message());
  const std::string resolved = values.dump();
  write_text(result.run_dir / "config.txt", resolved);

  result.state = build_state(config);
  if (resume) restore_state(load_archive(*resume), result.state);

  MetricsWriter metrics(result.run_dir / "metrics.jsonl", config.schedule);
  metrics.config(values);
  if (!resume) save_archive(checkpoint_dir(result.run_dir, 0), to_archive(result.state, resolved));

  TrainerConfig trainer{config.schedule, config.loss, config.augment, config.views, config.eval_every};
  RunCallbacks callbacks;
  if (config.log_steps) callbacks.on_step = [&](const StepRecord& r) { metrics.step(r); };
  callbacks.on_epoch = [&](const EpochRecord& r, const TrainState& state) {
    metrics.epoch(r);
    const bool last = r.epoch == config.schedule.epochs;
    if (last || (config.checkpoint_every > 0 && r.epoch % config.checkpoint_every == 0))
      save_archive(checkpoint_dir(result.run_dir, r.epoch), to_archive(state, resolved));
    if (log) {
      *log << "epoch " << r.epoch << '/' << config.schedule.epochs;
      for (const auto& [name, value] : r.mean_terms)
        if (name == "total") *log << " loss " << value;
      if (r.evaluated) *log << " acc_all " << r.acc.acc_all;
      *log << '\n';
    }
  };
  try {
    result.history = run(result.state, stored.data, stored.split, trainer, callbacks);
  } catch (const NumericError& e) {
    metrics.error(result.state.epoch, result.state.iteration, e.what());
    throw;
  }
  return result;
}

namespace {

struct LoadedRun {
  ExperimentConfig config;
  StoredDataset stored;
  TrainState state;
};

LoadedRun load_run(const std::filesystem::path& checkpoint, const std::optional<std::filesystem::path>& manifest) {
  const Archive archive = load_archive(checkpoint);
  ConfigValues values;
  values.merge_text(archive.config, (checkpoint / "manifest.txt").string());
  if (manifest) values.set("data.manifest", manifest->string());
  LoadedRun out;
  out.config = resolve(values);
  out.stored = load_data(out.config);
  bind_to_data(out.config, values, out.stored.data);
  out.state = build_state(out.config);
  restore_state(archive, out.state);
  return out;
}

}  // namespace

AccReport cmd_eval(const std::filesystem::path& checkpoint, const std::optional<std::filesystem::path>& manifest) {
  const LoadedRun run = load_run(checkpoint, manifest);
  const HiddenLabels hidden = run.stored.split.hidden_labels(run.stored.data);
  if (hidden.indices.empty()) throw ConfigError("the split has no unlabelled instances to evaluate");
  return evaluate(run.state.model, run.state.prompts, run.stored.data, hidden);
}

AccReport eval_predictions(const std::filesystem::path& predictions, const std::filesystem::path& manifest) {
  const StoredDataset stored = read_dataset(manifest);
  const HiddenLabels hidden = stored.split.hidden_labels(stored.data);
  std::istringstream in(read_text(predictions));
  std::vector<int> predicted;
  int k_pred = stored.data.num_classes;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    try {
      std::size_t used = 0;
      const int p = std::stoi(line, &used);
      if (used != line.size() || p < 0) throw std::invalid_argument("");
      predicted.push_back(p);
      k_pred = std::max(k_pred, p + 1);
    } catch (const std::logic_error&) {
      throw IoError(predictions.string() + ": line " + std::to_string(predicted.size() + 1) +
                    " is not a cluster id");
    }
  }
  if (predicted.size() != hidden.indices.size())
    throw IoError(predictions.string() + ": " + std::to_string(predicted.size()) + " predictions for " +
                  std::to_string(hidden.indices.size()) + " unlabelled instances");
  return hungarian_acc(make_prediction_set(predicted, hidden), k_pred, stored.data.num_classes);
}

std::string acc_json(const AccReport& r) {
  json j{{"acc_all", r.acc_all},
         {"acc_old", r.acc_old ? json(*r.acc_old) : json(nullptr)},
         {"acc_new", r.acc_new ? json(*r.acc_new) : json(nullptr)},
         {"total", r.total},
         {"count_old", r.count_old},
         {"count_new", r.count_new},
         {"matched_all", r.matched_all},
         {"matched_old", r.matched_old},
         {"matched_new", r.matched_new},
         {"matching", r.matching}};
  return j.dump();
}

std::string cmd_attn(const std::filesystem::path& checkpoint, AttentionQuery query, double top_fraction, int images) {
  const LoadedRun run = load_run(checkpoint, std::nullopt);
  const HiddenLabels hidden = run.stored.split.hidden_labels(run.stored.data);
  std::vector<std::size_t> rows = hidden.indices;
  if (rows.empty())
    for (Index i = 0; i < run.stored.data.size(); ++i) rows.push_back(static_cast<std::size_t>(i));
  if (rows.size() > static_cast<std::size_t>(images)) rows.resize(static_cast<std::size_t>(images));
  const auto& model = run.state.model;
  const Index n = model.config.patches();
  if (query && (*query < 0 || *query >= n))
    throw ConfigError("attn.query: patch index " + std::to_string(*query) + " outside [0, " + std::to_string(n) + ")");
  const PatchGrid<float> grid =
      compose_input(run.stored.data.gather(rows), &run.state.prompts, model.config.patch_h, model.config.patch_w);
  const VPTPrompts<float>* vpt = run.state.prompts.vpt.tokens.empty() ? nullptr : &run.state.prompts.vpt;
  const auto maps = extract_attention(model, grid, query, top_fraction, vpt);

  json out{{"query", query ? json(*query) : json("cls")},
           {"top_fraction", top_fraction},
           {"top_count", top_count(n, top_fraction)},
           {"patches", n},
           {"grid", {model.config.image_h / model.config.patch_h, model.config.image_w / model.config.patch_w}},
           {"images", json::array()}};
  for (std::size_t i = 0; i < maps.size(); ++i) {
    json heads = json::array();
    for (Index h = 0; h < maps[i].weights.rows(); ++h) {
      std::vector<float> w(maps[i].weights.row(h).data(), maps[i].weights.row(h).data() + maps[i].weights.cols());
      std::vector<Index> top;
      for (Index p = 0; p < maps[i].mask.cols(); ++p)
        if (maps[i].mask(h, p)) top.push_back(p);
      heads.push_back({{"weights", w}, {"top_patches", top}});
    }
    out["images"].push_back({{"row", rows[i]}, {"heads", heads}});
  }
  return out.dump();
}

std::string ParamReport::text() const {
  std::ostringstream out;
  out << "variant " << to_string(variant) << '\n'
      << "spatial " << prompts.spatial << '\n'
      << "global " << prompts.global << '\n'
      << "vpt " << prompts.vpt << '\n'
      << "prompt_total " << prompts.total() << '\n'
      << std::fixed << std::setprecision(4)
      << "prompt_percent_of_86M " << 100.0 * static_cast<double>(prompts.total()) / 86e6 << '\n'
      << "model_trainable " << model_trainable << '\n'
      << "model_total " << model_total << '\n';
  return out.str();
}

ParamReport cmd_count_params(const ConfigValues& values) {
  const ExperimentConfig config = resolve(values);
  ParamReport r;
  r.variant = config.prompt.variant;
  r.prompts = count_prompt_params(prompt_geometry(config.prompt, config.model));
  ModelParams<float> model = init_model<float>(config.model, 0);
  model.visit([&](const std::string& name, const Matrix<float>& t) {
    r.model_total += t.size();
    if (is_trainable(config.model, name)) r.model_trainable += t.size();
  });
  return r;
}

}  // namespace sptnet
