#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cwcf/dataset.hpp"
#include "cwcf/environment.hpp"
#include "cwcf/evaluation.hpp"
#include "cwcf/model.hpp"

namespace cwcf {

struct TrainConfig {
  double lambda = 0.01;   // cost scale in the reward
  double gamma = 1.0;     // return discount
  int batch_size = 32;    // parallel episodes per step / pretraining minibatch
  int epoch_length = 1000;  // steps per validation round
  double lr0 = 3e-3;      // initial learning rate
  double alpha_v = 0.5;   // value-loss weight
  double alpha_h0 = 0.05;  // initial entropy-bonus weight
  double l2 = 1e-4;       // weight decay added to gradients
  double clip_norm = 0.1;  // global gradient-norm ceiling
  uint64_t seed = 0;
  int pretrain_epochs = 50;  // classifier pretraining cap; 0 disables
  int patience = 5;          // pretraining early-stop tolerance
  int embed_dim = kEmbedDim;

  // The policy trains for 100 epochs.
  int total_steps() const { return 100 * epoch_length; }
  // Stepwise-constant schedules: the learning rate halves every ten epochs,
  // the entropy weight every epoch.
  double lr_at(int step) const;
  double alpha_h_at(int step) const;
  // Throws DataError(BadConfig) when any field is out of range.
  void validate() const;

  bool operator==(const TrainConfig& other) const = default;
};

// JSON object with one key per field, same names. Parsing accepts partial
// documents (missing keys keep their defaults), rejects unknown keys, and
// validates the result.
std::string serialize_train_config(const TrainConfig& cfg);
TrainConfig parse_train_config(const std::string& text);

// --- random acquisition processes -----------------------------------------

// Draws rho ~ U(0,1), then buys uniformly random legal nodes until the
// acquired fraction (bought / (bought + still legal)) reaches rho or nothing
// is left. Used to expose the classifier to partial observations.
Observation random_mask_sample(const Sample& sample,
                               std::shared_ptr<const Schema> schema,
                               std::mt19937_64& rng);

// Buys uniformly random legal nodes under a strict budget: the walk stops at
// the first pick it cannot afford, without substituting a cheaper one. A zero
// budget buys nothing; a budget covering everything buys everything.
EpisodeState random_budget_episode(const Sample& sample,
                                   std::shared_ptr<const Schema> schema,
                                   double budget, std::mt19937_64& rng);

// --- actor-critic update ---------------------------------------------------

struct Transition {
  Observation obs;   // state the action was taken from
  Action action;
  double reward = 0.0;
  Observation next;  // state after the action
  bool done = false;
  int label = 0;
};

using StepBatch = std::vector<Transition>;

// State values of the successor observations under the current parameters
// (running batchnorm statistics, no mutation); zero where done.
std::vector<double> bootstrap_values(ModelParams& params, const StepBatch& batch);

// The per-transition constants of one update, captured from the forward pass
// the update starts from: these enter the objective as fixed numbers, so the
// gradient never flows through them.
struct A2CConstants {
  std::vector<double> advantage;  // target - V(obs)
  std::vector<double> target;     // reward + gamma * bootstrap (0 when done)
  std::vector<double> logp;       // log-probability of the performed action
};

struct A2CParts {
  NodeId objective = -1;      // mean over the batch of policy+entropy+value terms
  NodeId classifier_ce = -1;  // mean CE over terminal transitions; -1 if none
  NodeId total = -1;          // objective plus classifier term
  A2CConstants constants;
};

// Builds the update objective on the tape: per transition
//   -A * log pi(a|s) + alpha_h * [log pi(a|s)] * log pi(a|s)
//   + alpha_v * (target - V(s))^2
// averaged over the batch ([x] marks a frozen constant), plus the mean
// classification cross-entropy over terminal transitions. Observations are
// embedded in one training-mode batch (batch statistics; running stats
// updated once). Passing `frozen` reuses previously captured constants
// instead of reading them off this tape — gradient checks use that to keep
// the constants fixed while parameters move.
A2CParts a2c_objective(Tape& tape, const StepBatch& batch, ModelParams& params,
                       const TrainConfig& cfg, double alpha_h,
                       const std::vector<double>& bootstrap,
                       const A2CConstants* frozen = nullptr);

// --- training loops ---------------------------------------------------------

struct ValidationPoint {
  int step = 0;
  double val_reward = 0.0;
  double val_accuracy = 0.0;
  double val_cost = 0.0;
  double lr = 0.0;
  double alpha_h = 0.0;
};

// One JSON object per line: {"step":..., "val_reward":..., "val_accuracy":...,
// "val_cost":..., "lr":..., "alpha_h":...}.
std::string metrics_to_jsonl(const std::vector<ValidationPoint>& points);

struct TrainedModel {
  ModelParams params;                    // best-validation snapshot
  std::vector<ValidationPoint> metrics;  // one entry per validation round
  int best_index = -1;                   // metrics row the snapshot comes from
  double max_postclip_norm = 0.0;        // largest gradient norm after clipping
};

using ValidationCallback =
    std::function<void(const ValidationPoint&, const ModelParams&)>;

// A2C training of the acquisition policy. Runs cfg.batch_size episodes in
// lockstep, one action each per step; finished episodes are replaced by fresh
// uniformly drawn training samples. Every epoch_length steps the greedy
// policy is scored on the validation split; the best snapshot (highest
// val_reward, earliest wins) is returned. Parameters are taken by value, so
// a pretrained model can seed several runs.
TrainedModel train(const Dataset& dataset, ModelParams params,
                   const TrainConfig& cfg,
                   const ValidationCallback& on_validation = nullptr);

// --- masked-classifier training (pretraining and baselines) ----------------

enum class MaskMode { RandomFraction, Budget, Full };

struct ClassifierTrainResult {
  ModelParams params;           // best-validation snapshot
  std::vector<double> val_ce;   // validation cross-entropy per epoch
  int best_epoch = -1;
};

// Minibatch cross-entropy training of the classifier path (embedding layers,
// batchnorm, classifier head) on masked observations: fresh random masks
// every epoch, a fixed masked validation set, early stopping after
// cfg.patience epochs without improvement, at most cfg.pretrain_epochs
// epochs. `budget` only matters in Budget mode. With pretrain_epochs == 0 the
// parameters come back untouched.
ClassifierTrainResult train_masked_classifier(const Dataset& dataset,
                                              ModelParams params,
                                              const TrainConfig& cfg,
                                              MaskMode mode, double budget);

// Pretraining under randomly sized masks, the usual warm start for train().
ClassifierTrainResult pretrain_classifier(const Dataset& dataset,
                                          ModelParams params,
                                          const TrainConfig& cfg);

// Full-information classifier trained from scratch: the accuracy ceiling
// reference.
ClassifierTrainResult train_hmil_full(const Dataset& dataset,
                                      const TrainConfig& cfg);

// Random-search baseline: a classifier trained on random acquisitions under
// a budget, evaluated on fresh random acquisitions under the same budget.
struct RSPolicy {
  double budget = 0.0;
  ModelParams params;
};

RSPolicy train_rs_baseline(const Dataset& dataset, double budget,
                           const TrainConfig& cfg);

EvalPoint evaluate_random_budget(RSPolicy& policy, const Dataset& dataset,
                                 const std::string& split, double lambda,
                                 uint64_t seed);

}  // namespace cwcf
