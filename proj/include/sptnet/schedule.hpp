#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sptnet/core.hpp"
#include "sptnet/data.hpp"
#include "sptnet/eval.hpp"
#include "sptnet/losses.hpp"
#include "sptnet/prompts.hpp"
#include "sptnet/vit.hpp"

namespace sptnet {

enum class Strategy { alternate, end_to_end, data_first, model_first };
enum class Stage { data, model, joint };

Strategy parse_strategy(const std::string& name);
std::string to_string(Strategy s);
std::string to_string(Stage s);
Stage parse_stage(const std::string& name);

/// Which views receive the pixel prompts: only the second (raw/prompted pair) or both.
enum class PromptViews { one, both };

struct ScheduleConfig {
  Strategy strategy = Strategy::alternate;
  int k = 20;
  double lr_b = 3e-3;
  double wd_b = 5e-4;
  double lr_p = 1.0;
  double wd_p = 0.0;
  double momentum = 0.9;
  bool cosine = false;
  int epochs = 200;
  int batch_size = 64;
  double phase_split = 0.5;  // data_first / model_first: fraction of epochs in the first phase
  std::uint64_t seed = 0;

  void validate() const;
};

/// Stage used for the step taken at `iteration` during `epoch`.
Stage stage_for(const ScheduleConfig& config, std::int64_t iteration, int epoch);

template <typename Scalar>
struct ObjectiveResult {
  LossBreakdown<Scalar> loss;
  ModelParams<Scalar> model_grad;
  PromptSet<Scalar> prompt_grad;
};

struct GradientRequest {
  bool model = true;
  bool prompts = true;
};

/// Loss of one two-view batch and its gradients w.r.t. the model and prompt groups.
template <typename Scalar>
ObjectiveResult<Scalar> objective(const ModelParams<Scalar>& model, const PromptSet<Scalar>& prompts,
                                  const ImageBatch<Scalar>& view_a, const ImageBatch<Scalar>& view_b,
                                  const std::vector<int>& labels, const LossConfig& loss, PromptViews views,
                                  GradientRequest request, const TeacherTargets<Scalar>* fixed_teacher = nullptr);

struct TrainState {
  ModelParams<float> model;
  PromptSet<float> prompts;
  ModelParams<float> model_momentum;
  PromptSet<float> prompt_momentum;
  Stage stage = Stage::data;
  std::int64_t iteration = 0;
  int epoch = 0;
};

TrainState init_state(ModelParams<float> model, PromptSet<float> prompts, const ScheduleConfig& config);

struct TrainBatch {
  ImageBatch<float> view_a, view_b;
  std::vector<int> labels;
};

struct StepRecord {
  int epoch = 0;
  std::int64_t step = 0;
  Stage stage = Stage::data;
  double lr_scale = 1.0;
  std::vector<std::pair<std::string, double>> terms;
};

struct StepOptions {
  PromptViews views = PromptViews::one;
  double lr_scale = 1.0;
};

/// One optimisation step on the group(s) active in the current stage.
StepRecord step(TrainState& state, const TrainBatch& batch, const ScheduleConfig& config, const LossConfig& loss,
                const StepOptions& options = {});

struct TrainerConfig {
  ScheduleConfig schedule;
  LossConfig loss;
  AugmentConfig augment;
  PromptViews views = PromptViews::one;
  int eval_every = 1;
};

struct EpochRecord {
  int epoch = 0;  // epochs completed
  std::int64_t iteration = 0;
  std::vector<std::pair<std::string, double>> mean_terms;
  bool evaluated = false;
  AccReport acc;
};

struct RunCallbacks {
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const EpochRecord&, const TrainState&)> on_epoch;
};

struct History {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
};

/// Clustering accuracy on D_u with the current parameters (prompts attached, no augmentation).
AccReport evaluate(const ModelParams<float>& model, const PromptSet<float>& prompts, const Dataset& data,
                   const HiddenLabels& hidden);

/// Runs from state.epoch to config.schedule.epochs; resumable from any epoch boundary.
History run(TrainState& state, const Dataset& data, const GCDSplit& split, const TrainerConfig& config,
            const RunCallbacks& callbacks = {});

}  // namespace sptnet
