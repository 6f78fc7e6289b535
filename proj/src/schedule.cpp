#include "sptnet/schedule.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace sptnet {

Strategy parse_strategy(const std::string& name) {
  if (name == "alternate") return Strategy::alternate;
  if (name == "end_to_end") return Strategy::end_to_end;
  if (name == "data_first") return Strategy::data_first;
  if (name == "model_first") return Strategy::model_first;
  throw ConfigError("unknown strategy '" + name + "'");
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::alternate: return "alternate";
    case Strategy::end_to_end: return "end_to_end";
    case Strategy::data_first: return "data_first";
    case Strategy::model_first: return "model_first";
  }
  return "alternate";
}

std::string to_string(Stage s) {
  switch (s) {
    case Stage::data: return "data";
    case Stage::model: return "model";
    case Stage::joint: return "joint";
  }
  return "data";
}

Stage parse_stage(const std::string& name) {
  if (name == "data") return Stage::data;
  if (name == "model") return Stage::model;
  if (name == "joint") return Stage::joint;
  throw ConfigError("unknown stage '" + name + "'");
}

void ScheduleConfig::validate() const {
  std::ostringstream os;
  if (k < 1) os << "k must be >= 1; ";
  if (!(lr_b >= 0.0 && lr_p >= 0.0)) os << "learning rates must be >= 0; ";
  if (!(wd_b >= 0.0 && wd_p >= 0.0)) os << "weight decays must be >= 0; ";
  if (!(momentum >= 0.0 && momentum < 1.0)) os << "momentum must lie in [0, 1); ";
  if (epochs < 0) os << "epochs must be >= 0; ";
  if (batch_size < 2) os << "batch_size must be >= 2; ";
  if (!(phase_split >= 0.0 && phase_split <= 1.0)) os << "phase_split must lie in [0, 1]; ";
  if (!os.str().empty()) throw ConfigError("schedule config: " + os.str());
}

Stage stage_for(const ScheduleConfig& config, std::int64_t iteration, int epoch) {
  const int boundary = static_cast<int>(std::floor(config.epochs * config.phase_split));
  switch (config.strategy) {
    case Strategy::alternate: return (iteration / config.k) % 2 == 0 ? Stage::data : Stage::model;
    case Strategy::end_to_end: return Stage::joint;
    case Strategy::data_first: return epoch < boundary ? Stage::data : Stage::model;
    case Strategy::model_first: return epoch < boundary ? Stage::model : Stage::data;
  }
  return Stage::joint;
}

template <typename Scalar>
ObjectiveResult<Scalar> objective(const ModelParams<Scalar>& model, const PromptSet<Scalar>& prompts,
                                  const ImageBatch<Scalar>& view_a, const ImageBatch<Scalar>& view_b,
                                  const std::vector<int>& labels, const LossConfig& loss, PromptViews views,
                                  GradientRequest request, const TeacherTargets<Scalar>* fixed_teacher) {
  const TinyViTConfig& cfg = model.config;
  const Index b = view_a.batch();
  if (view_b.batch() != b || static_cast<Index>(labels.size()) != b) throw ShapeError("objective: view sizes differ");
  const bool has_pixel_prompts = prompts.spatial || prompts.global;
  const PromptSet<Scalar>* prompts_a = views == PromptViews::both ? &prompts : nullptr;
  const PatchGrid<Scalar> grid_a = compose_input(view_a, prompts_a, cfg.patch_h, cfg.patch_w);
  const PatchGrid<Scalar> grid_b = compose_input(view_b, &prompts, cfg.patch_h, cfg.patch_w);
  PatchGrid<Scalar> grid = grid_a;
  grid.data.resize(grid_a.data.rows() + grid_b.data.rows(), grid_a.data.cols());
  grid.data << grid_a.data, grid_b.data;

  const VPTPrompts<Scalar>* vpt = prompts.vpt.tokens.empty() ? nullptr : &prompts.vpt;
  ForwardTrace<Scalar> trace;
  const ModelOutput<Scalar> out = forward(model, grid, vpt, &trace);

  ViewBatch<Scalar> batch;
  batch.features_a = out.features.topRows(b);
  batch.features_b = out.features.bottomRows(b);
  batch.logits_a = out.logits.topRows(b);
  batch.logits_b = out.logits.bottomRows(b);
  batch.labels = labels;

  ObjectiveResult<Scalar> result;
  result.loss = total_loss(batch, loss, fixed_teacher);
  result.model_grad = model.zeros_like();
  result.prompt_grad = prompts.zeros_like();
  if (!std::isfinite(static_cast<double>(result.loss.total))) return result;

  const bool prompt_grads = request.prompts && !prompts.empty();
  if (!request.model && !prompt_grads) return result;
  BackwardRequest br;
  br.input_grad = prompt_grads && has_pixel_prompts;
  br.stop_block = (prompt_grads && vpt) ? 0 : (request.model ? cfg.depth - cfg.trainable_blocks : cfg.depth);

  Matrix<Scalar> d_features(2 * b, out.features.cols()), d_logits(2 * b, out.logits.cols());
  d_features << result.loss.d_features_a, result.loss.d_features_b;
  d_logits << result.loss.d_logits_a, result.loss.d_logits_b;
  ModelGradients<Scalar> grads = make_gradients(model, vpt);
  backward(model, trace, d_features, d_logits, br, grads);
  result.model_grad = std::move(grads.model);
  if (prompt_grads) {
    if (br.input_grad) {
      const Index rows = grid_b.data.rows();
      if (views == PromptViews::both) accumulate_prompt_gradient(prompts, grid_a, Matrix<Scalar>(grads.patches.topRows(rows)), result.prompt_grad);
      accumulate_prompt_gradient(prompts, grid_b, Matrix<Scalar>(grads.patches.bottomRows(rows)), result.prompt_grad);
    }
    for (std::size_t i = 0; i < grads.vpt.size(); ++i) result.prompt_grad.vpt.tokens[i] = grads.vpt[i];
  }
  return result;
}

TrainState init_state(ModelParams<float> model, PromptSet<float> prompts, const ScheduleConfig& config) {
  config.validate();
  TrainState s;
  s.model_momentum = model.zeros_like();
  s.prompt_momentum = prompts.zeros_like();
  s.model = std::move(model);
  s.prompts = std::move(prompts);
  s.stage = stage_for(config, 0, 0);
  return s;
}

namespace {

void sgd(Matrix<float>& param, Matrix<float>& buf, const Matrix<float>& grad, double lr, double wd, double momentum) {
  Matrix<float> g = grad;
  if (wd > 0.0) g += static_cast<float>(wd) * param;
  buf = static_cast<float>(momentum) * buf + g;
  param -= static_cast<float>(lr) * buf;
}

template <typename Set>
std::vector<std::pair<std::string, Matrix<float>*>> tensors(Set& set) {
  std::vector<std::pair<std::string, Matrix<float>*>> out;
  set.visit([&](const std::string& name, Matrix<float>& t) { out.emplace_back(name, &t); });
  return out;
}

std::string describe(const std::vector<std::pair<std::string, double>>& terms) {
  std::ostringstream os;
  for (const auto& [name, value] : terms) os << ' ' << name << '=' << value;
  return os.str();
}

}  // namespace

StepRecord step(TrainState& state, const TrainBatch& batch, const ScheduleConfig& config, const LossConfig& loss,
                const StepOptions& options) {
  const Stage stage = stage_for(config, state.iteration, state.epoch);
  state.stage = stage;
  GradientRequest request;
  request.model = stage != Stage::data;
  request.prompts = stage != Stage::model;

  ObjectiveResult<float> r =
      objective(state.model, state.prompts, batch.view_a, batch.view_b, batch.labels, loss, options.views, request);
  StepRecord rec;
  rec.epoch = state.epoch;
  rec.step = state.iteration;
  rec.stage = stage;
  rec.lr_scale = options.lr_scale;
  rec.terms = r.loss.terms();
  bool finite = true;
  for (const auto& [name, value] : rec.terms) finite = finite && std::isfinite(value);
  if (!finite) {
    std::ostringstream os;
    os << "non-finite loss at step " << state.iteration << " (epoch " << state.epoch << ", stage " << to_string(stage)
       << "):" << describe(rec.terms);
    throw NumericError(os.str());
  }

  if (request.model) {
    auto params = tensors(state.model);
    auto moms = tensors(state.model_momentum);
    auto grads = tensors(r.model_grad);
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!is_trainable(state.model.config, params[i].first)) continue;
      sgd(*params[i].second, *moms[i].second, *grads[i].second, config.lr_b * options.lr_scale, config.wd_b,
          config.momentum);
    }
  }
  if (request.prompts) {
    auto params = tensors(state.prompts);
    auto moms = tensors(state.prompt_momentum);
    auto grads = tensors(r.prompt_grad);
    for (std::size_t i = 0; i < params.size(); ++i)
      sgd(*params[i].second, *moms[i].second, *grads[i].second, config.lr_p * options.lr_scale, config.wd_p,
          config.momentum);
  }
  ++state.iteration;
  state.stage = stage_for(config, state.iteration, state.epoch);
  return rec;
}

AccReport evaluate(const ModelParams<float>& model, const PromptSet<float>& prompts, const Dataset& data,
                   const HiddenLabels& hidden) {
  constexpr std::size_t chunk = 256;
  std::vector<int> predicted;
  predicted.reserve(hidden.indices.size());
  const VPTPrompts<float>* vpt = prompts.vpt.tokens.empty() ? nullptr : &prompts.vpt;
  for (std::size_t start = 0; start < hidden.indices.size(); start += chunk) {
    const std::size_t end = std::min(hidden.indices.size(), start + chunk);
    const std::vector<std::size_t> ids(hidden.indices.begin() + static_cast<std::ptrdiff_t>(start),
                                       hidden.indices.begin() + static_cast<std::ptrdiff_t>(end));
    const PatchGrid<float> grid =
        compose_input(data.gather(ids), &prompts, model.config.patch_h, model.config.patch_w);
    const ModelOutput<float> out = forward(model, grid, vpt);
    const std::vector<int> ids_pred = assign_clusters(out.logits);
    predicted.insert(predicted.end(), ids_pred.begin(), ids_pred.end());
  }
  return hungarian_acc(make_prediction_set(predicted, hidden), model.config.num_prototypes, data.num_classes);
}

History run(TrainState& state, const Dataset& data, const GCDSplit& split, const TrainerConfig& config,
            const RunCallbacks& callbacks) {
  config.schedule.validate();
  config.loss.validate();
  if (config.augment.enabled) config.augment.validate();
  const TrainingSet training = split.training_set();
  const HiddenLabels hidden = split.hidden_labels(data);
  const auto seed = config.schedule.seed;
  const std::size_t per_epoch =
      stratified_batches(training, config.schedule.batch_size, seed, 0).size();
  const double total_steps = static_cast<double>(per_epoch) * config.schedule.epochs;

  History history;
  while (state.epoch < config.schedule.epochs) {
    const auto batches = stratified_batches(training, config.schedule.batch_size, seed, static_cast<std::uint64_t>(state.epoch));
    std::vector<std::pair<std::string, double>> sums;
    for (const auto& positions : batches) {
      TrainBatch batch;
      batch.view_a = ImageBatch<float>(static_cast<Index>(positions.size()), data.height, data.width);
      batch.view_b = batch.view_a;
      for (std::size_t i = 0; i < positions.size(); ++i) {
        const std::size_t row = training.indices[positions[i]];
        auto [a, b] = two_views(data.images.row(static_cast<Index>(row)), data.height, data.width, config.augment, seed,
                                row, static_cast<std::uint64_t>(state.epoch));
        batch.view_a.data.row(static_cast<Index>(i)) = a;
        batch.view_b.data.row(static_cast<Index>(i)) = b;
        batch.labels.push_back(training.labels[positions[i]]);
      }
      StepOptions options;
      options.views = config.views;
      if (config.schedule.cosine && total_steps > 0)
        options.lr_scale = 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(state.iteration) / total_steps));
      StepRecord rec = step(state, batch, config.schedule, config.loss, options);
      if (sums.empty()) sums.assign(rec.terms.begin(), rec.terms.end());
      else
        for (std::size_t i = 0; i < sums.size(); ++i) sums[i].second += rec.terms[i].second;
      if (callbacks.on_step) callbacks.on_step(rec);
      history.steps.push_back(std::move(rec));
    }
    ++state.epoch;
    state.stage = stage_for(config.schedule, state.iteration, state.epoch);
    EpochRecord er;
    er.epoch = state.epoch;
    er.iteration = state.iteration;
    for (auto& [name, value] : sums) er.mean_terms.emplace_back(name, value / static_cast<double>(batches.size()));
    const bool last = state.epoch == config.schedule.epochs;
    if (!hidden.indices.empty() && (last || (config.eval_every > 0 && state.epoch % config.eval_every == 0)))
    {
      er.acc = evaluate(state.model, state.prompts, data, hidden);
      er.evaluated = true;
    }
    if (callbacks.on_epoch) callbacks.on_epoch(er, state);
    history.epochs.push_back(std::move(er));
  }
  return history;
}

template ObjectiveResult<float> objective<float>(const ModelParams<float>&, const PromptSet<float>&,
                                                 const ImageBatch<float>&, const ImageBatch<float>&,
                                                 const std::vector<int>&, const LossConfig&, PromptViews,
                                                 GradientRequest, const TeacherTargets<float>*);
template ObjectiveResult<double> objective<double>(const ModelParams<double>&, const PromptSet<double>&,
                                                   const ImageBatch<double>&, const ImageBatch<double>&,
                                                   const std::vector<int>&, const LossConfig&, PromptViews,
                                                   GradientRequest, const TeacherTargets<double>*);

}  // namespace sptnet
