#include "cwcf/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "json.hpp"

namespace cwcf {

namespace {

using nlohmann::ordered_json;

[[noreturn]] void bad_config(const std::string& msg) {
  throw DataError(DataErrorKind::BadConfig, "config: " + msg);
}

const std::vector<int>& split_indices(const Dataset& dataset,
                                      const std::string& split) {
  if (split == "train") return dataset.train;
  if (split == "val") return dataset.val;
  if (split == "test") return dataset.test;
  throw DataError(DataErrorKind::BadSplit, "unknown split: " + split);
}

// Weight decay enters as a gradient term, before clipping, so the clipped
// norm bounds the whole update direction.
void add_l2(const std::vector<Parameter*>& params, double l2) {
  if (l2 == 0.0) return;
  for (Parameter* p : params)
    for (size_t i = 0; i < p->grad.data.size(); ++i)
      p->grad.data[i] += l2 * p->value.data[i];
}

}  // namespace

double TrainConfig::lr_at(int step) const {
  return std::ldexp(lr0, -(step / (10 * epoch_length)));
}

double TrainConfig::alpha_h_at(int step) const {
  return std::ldexp(alpha_h0, -(step / epoch_length));
}

void TrainConfig::validate() const {
  if (!(lambda >= 0)) bad_config("lambda must be >= 0");
  if (!(gamma >= 0 && gamma <= 1)) bad_config("gamma must be in [0, 1]");
  if (batch_size < 1) bad_config("batch_size must be positive");
  if (epoch_length < 1) bad_config("epoch_length must be positive");
  if (!(lr0 > 0)) bad_config("lr0 must be positive");
  if (!(alpha_v >= 0)) bad_config("alpha_v must be >= 0");
  if (!(alpha_h0 >= 0)) bad_config("alpha_h0 must be >= 0");
  if (!(l2 >= 0)) bad_config("l2 must be >= 0");
  if (!(clip_norm > 0)) bad_config("clip_norm must be positive");
  if (pretrain_epochs < 0) bad_config("pretrain_epochs must be >= 0");
  if (patience < 1) bad_config("patience must be positive");
  if (embed_dim < 1) bad_config("embed_dim must be positive");
}

std::string serialize_train_config(const TrainConfig& cfg) {
  ordered_json j;
  j["lambda"] = cfg.lambda;
  j["gamma"] = cfg.gamma;
  j["batch_size"] = cfg.batch_size;
  j["epoch_length"] = cfg.epoch_length;
  j["lr0"] = cfg.lr0;
  j["alpha_v"] = cfg.alpha_v;
  j["alpha_h0"] = cfg.alpha_h0;
  j["l2"] = cfg.l2;
  j["clip_norm"] = cfg.clip_norm;
  j["seed"] = cfg.seed;
  j["pretrain_epochs"] = cfg.pretrain_epochs;
  j["patience"] = cfg.patience;
  j["embed_dim"] = cfg.embed_dim;
  return j.dump(2);
}

TrainConfig parse_train_config(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object())
    bad_config("document must be a JSON object");
  TrainConfig cfg;
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& key = it.key();
      if (key == "lambda") cfg.lambda = it.value().get<double>();
      else if (key == "gamma") cfg.gamma = it.value().get<double>();
      else if (key == "batch_size") cfg.batch_size = it.value().get<int>();
      else if (key == "epoch_length") cfg.epoch_length = it.value().get<int>();
      else if (key == "lr0") cfg.lr0 = it.value().get<double>();
      else if (key == "alpha_v") cfg.alpha_v = it.value().get<double>();
      else if (key == "alpha_h0") cfg.alpha_h0 = it.value().get<double>();
      else if (key == "l2") cfg.l2 = it.value().get<double>();
      else if (key == "clip_norm") cfg.clip_norm = it.value().get<double>();
      else if (key == "seed") cfg.seed = it.value().get<uint64_t>();
      else if (key == "pretrain_epochs")
        cfg.pretrain_epochs = it.value().get<int>();
      else if (key == "patience") cfg.patience = it.value().get<int>();
      else if (key == "embed_dim") cfg.embed_dim = it.value().get<int>();
      else bad_config("unknown key \"" + key + "\"");
    }
  } catch (const nlohmann::json::exception& e) {
    bad_config(e.what());
  }
  cfg.validate();
  return cfg;
}

Observation random_mask_sample(const Sample& sample,
                               std::shared_ptr<const Schema> schema,
                               std::mt19937_64& rng) {
  EpisodeState ep = make_episode(sample, schema);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double rho = u01(rng);
  int bought = 0;
  while (true) {
    std::vector<Action> legal = enumerate_actions(ep.observation);
    const int n_legal = static_cast<int>(legal.size()) - 1;  // minus Terminal
    if (n_legal == 0) break;
    const double fraction =
        static_cast<double>(bought) / static_cast<double>(bought + n_legal);
    if (fraction >= rho) break;
    std::uniform_int_distribution<int> pick(1, n_legal);
    apply_transition(ep, legal[static_cast<size_t>(pick(rng))]);
    ++bought;
  }
  return std::move(ep.observation);
}

EpisodeState random_budget_episode(const Sample& sample,
                                   std::shared_ptr<const Schema> schema,
                                   double budget, std::mt19937_64& rng) {
  EpisodeState ep = make_episode(sample, schema);
  while (true) {
    std::vector<Action> legal = enumerate_actions(ep.observation);
    const int n_legal = static_cast<int>(legal.size()) - 1;
    if (n_legal == 0) break;
    std::uniform_int_distribution<int> pick(1, n_legal);
    const Action& a = legal[static_cast<size_t>(pick(rng))];
    if (ep.accumulated_cost + feature_cost(*schema, a.path) > budget) break;
    apply_transition(ep, a);
  }
  return ep;
}

std::vector<double> bootstrap_values(ModelParams& params,
                                     const StepBatch& batch) {
  std::vector<double> out(batch.size(), 0.0);
  std::vector<const Observation*> obs;
  std::vector<size_t> rows;
  for (size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].done) continue;
    obs.push_back(&batch[i].next);
    rows.push_back(i);
  }
  if (obs.empty()) return out;
  Tape tape;
  EmbedResult emb = embed_batch(tape, obs, params, BnMode::Inference);
  HeadsResult heads = heads_batch(tape, emb.root, params);
  const Tensor& values = tape.value(heads.values);
  for (size_t k = 0; k < rows.size(); ++k)
    out[rows[k]] = values.at(static_cast<int>(k), 0);
  return out;
}

A2CParts a2c_objective(Tape& tape, const StepBatch& batch, ModelParams& params,
                       const TrainConfig& cfg, double alpha_h,
                       const std::vector<double>& bootstrap,
                       const A2CConstants* frozen) {
  if (batch.empty())
    throw DataError(DataErrorKind::BadConfig, "a2c: empty batch");
  if (bootstrap.size() != batch.size())
    throw DataError(DataErrorKind::BadConfig,
                    "a2c: one bootstrap value per transition required");

  const int n = static_cast<int>(batch.size());
  std::vector<const Observation*> obs;
  obs.reserve(batch.size());
  for (const Transition& t : batch) obs.push_back(&t.obs);
  EmbedResult emb = embed_batch(tape, obs, params, BnMode::Training);
  HeadsResult heads = heads_batch(tape, emb.root, params);
  const Tensor& values = tape.value(heads.values);

  A2CParts parts;
  parts.constants.advantage.resize(batch.size());
  parts.constants.target.resize(batch.size());
  parts.constants.logp.resize(batch.size());

  NodeId sum = -1;
  std::vector<NodeId> ce_terms;
  for (int i = 0; i < n; ++i) {
    const Transition& t = batch[static_cast<size_t>(i)];
    PolicyTree tree = build_policy(tape, t.obs, emb, i, params);
    NodeId lp = logprob_node(tape, tree, t.action);
    NodeId v = tape.select_entry(heads.values, i, 0);

    double target, advantage, lp_const;
    if (frozen) {
      target = frozen->target[static_cast<size_t>(i)];
      advantage = frozen->advantage[static_cast<size_t>(i)];
      lp_const = frozen->logp[static_cast<size_t>(i)];
    } else {
      target = t.reward +
               (t.done ? 0.0 : cfg.gamma * bootstrap[static_cast<size_t>(i)]);
      advantage = target - values.at(i, 0);
      lp_const = tape.value(lp).at(0, 0);
    }
    parts.constants.target[static_cast<size_t>(i)] = target;
    parts.constants.advantage[static_cast<size_t>(i)] = advantage;
    parts.constants.logp[static_cast<size_t>(i)] = lp_const;

    // -A*logpi and the sampled entropy bonus share the logpi node.
    NodeId policy_term = tape.affine(lp, -advantage + alpha_h * lp_const, 0.0);
    NodeId value_term = tape.affine(
        tape.square(tape.affine(v, -1.0, target)), cfg.alpha_v, 0.0);
    NodeId term = tape.add(policy_term, value_term);
    sum = sum < 0 ? term : tape.add(sum, term);

    if (t.done)
      ce_terms.push_back(tape.cross_entropy(
          tape.select_row(heads.class_probs, i), t.label));
  }

  parts.objective = tape.affine(sum, 1.0 / n, 0.0);
  if (ce_terms.empty()) {
    parts.total = parts.objective;
  } else {
    NodeId ce_sum = ce_terms[0];
    for (size_t k = 1; k < ce_terms.size(); ++k)
      ce_sum = tape.add(ce_sum, ce_terms[k]);
    parts.classifier_ce =
        tape.affine(ce_sum, 1.0 / static_cast<double>(ce_terms.size()), 0.0);
    parts.total = tape.add(parts.objective, parts.classifier_ce);
  }
  return parts;
}

std::string metrics_to_jsonl(const std::vector<ValidationPoint>& points) {
  std::string out;
  for (const ValidationPoint& p : points) {
    ordered_json j;
    j["step"] = p.step;
    j["val_reward"] = p.val_reward;
    j["val_accuracy"] = p.val_accuracy;
    j["val_cost"] = p.val_cost;
    j["lr"] = p.lr;
    j["alpha_h"] = p.alpha_h;
    out += j.dump();
    out += '\n';
  }
  return out;
}

TrainedModel train(const Dataset& dataset, ModelParams params,
                   const TrainConfig& cfg,
                   const ValidationCallback& on_validation) {
  cfg.validate();
  if (dataset.train.empty())
    throw DataError(DataErrorKind::BadSplit, "train: empty training split");
  if (dataset.val.empty())
    throw DataError(DataErrorKind::BadSplit, "train: empty validation split");

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<size_t> pick(0, dataset.train.size() - 1);
  auto fresh_episode = [&]() {
    const int idx = dataset.train[pick(rng)];
    return make_episode(dataset.samples[static_cast<size_t>(idx)],
                        dataset.schema);
  };

  std::vector<EpisodeState> envs;
  envs.reserve(static_cast<size_t>(cfg.batch_size));
  for (int b = 0; b < cfg.batch_size; ++b) envs.push_back(fresh_episode());

  std::vector<Parameter*> all = params.all_params();
  AdamState adam;

  TrainedModel out;
  ModelParams best = params;
  double best_reward = -std::numeric_limits<double>::infinity();

  for (int step = 0; step < cfg.total_steps(); ++step) {
    // Rollout: every episode advances one action under the sampling policy,
    // scored with running batchnorm statistics.
    StepBatch batch;
    batch.reserve(envs.size());
    {
      Tape tape;
      std::vector<const Observation*> obs;
      obs.reserve(envs.size());
      for (const EpisodeState& env : envs) obs.push_back(&env.observation);
      EmbedResult emb = embed_batch(tape, obs, params, BnMode::Inference);
      HeadsResult heads = heads_batch(tape, emb.root, params);
      const Tensor& class_probs = tape.value(heads.class_probs);

      for (int b = 0; b < cfg.batch_size; ++b) {
        EpisodeState& env = envs[static_cast<size_t>(b)];
        Transition t;
        t.obs = env.observation;
        t.label = env.label;
        PolicyTree tree = build_policy(tape, env.observation, emb, b, params);
        SampledAction sampled = sample_action(tape, tree, rng);
        t.action = sampled.action;
        const int pred =
            sampled.action.terminal ? argmax_row(class_probs, b) : -1;
        t.reward = reward(env, sampled.action, pred, cfg.lambda);
        apply_transition(env, sampled.action);
        t.done = env.done;
        t.next = env.observation;
        batch.push_back(std::move(t));
        if (env.done) env = fresh_episode();
      }
    }

    // Update: bootstrap under running statistics, objective under batch
    // statistics, then decay -> clip -> Adam.
    std::vector<double> boot = bootstrap_values(params, batch);
    Tape tape;
    A2CParts parts =
        a2c_objective(tape, batch, params, cfg, cfg.alpha_h_at(step), boot);
    tape.backward(parts.total);
    add_l2(all, cfg.l2);
    const double norm = clip_global_norm(all, cfg.clip_norm);
    out.max_postclip_norm = std::max(out.max_postclip_norm, norm);
    adam_step(all, adam, cfg.lr_at(step), 0.0);
    zero_grads(all);

    if ((step + 1) % cfg.epoch_length == 0) {
      const int logged = step + 1;
      EvalPoint ev =
          evaluate(params, dataset, "val", cfg.lambda, EvalMode::Greedy, 0);
      ValidationPoint vp;
      vp.step = logged;
      vp.val_reward = ev.avg_reward;
      vp.val_accuracy = ev.accuracy;
      vp.val_cost = ev.avg_cost;
      vp.lr = cfg.lr_at(logged);
      vp.alpha_h = cfg.alpha_h_at(logged);
      out.metrics.push_back(vp);
      if (on_validation) on_validation(vp, params);
      if (ev.avg_reward > best_reward) {
        best_reward = ev.avg_reward;
        out.best_index = static_cast<int>(out.metrics.size()) - 1;
        best = params;
      }
    }
  }

  out.params = std::move(best);
  return out;
}

namespace {

Observation masked_observation(const Sample& sample,
                               std::shared_ptr<const Schema> schema,
                               MaskMode mode, double budget,
                               std::mt19937_64& rng) {
  switch (mode) {
    case MaskMode::RandomFraction:
      return random_mask_sample(sample, std::move(schema), rng);
    case MaskMode::Budget:
      return std::move(
          random_budget_episode(sample, std::move(schema), budget, rng)
              .observation);
    case MaskMode::Full: {
      Observation obs = initial_observation(sample, std::move(schema));
      observe_all(obs);
      return obs;
    }
  }
  throw std::logic_error("unreachable");
}

double classifier_val_ce(ModelParams& params,
                         const std::vector<Observation>& obs,
                         const std::vector<int>& labels) {
  constexpr size_t kChunk = 256;
  double total = 0.0;
  for (size_t start = 0; start < obs.size(); start += kChunk) {
    const size_t end = std::min(obs.size(), start + kChunk);
    Tape tape;
    std::vector<const Observation*> ptrs;
    ptrs.reserve(end - start);
    for (size_t i = start; i < end; ++i) ptrs.push_back(&obs[i]);
    EmbedResult emb = embed_batch(tape, ptrs, params, BnMode::Inference);
    HeadsResult heads = heads_batch(tape, emb.root, params);
    const Tensor& probs = tape.value(heads.class_probs);
    for (size_t i = start; i < end; ++i) {
      const double p = probs.at(static_cast<int>(i - start), labels[i]);
      total += -std::log(std::max(p, 1e-300));
    }
  }
  return total / static_cast<double>(obs.size());
}

}  // namespace

ClassifierTrainResult train_masked_classifier(const Dataset& dataset,
                                              ModelParams params,
                                              const TrainConfig& cfg,
                                              MaskMode mode, double budget) {
  cfg.validate();
  ClassifierTrainResult out;
  if (cfg.pretrain_epochs == 0) {
    out.params = std::move(params);
    return out;
  }
  if (dataset.train.empty())
    throw DataError(DataErrorKind::BadSplit,
                    "classifier training: empty training split");
  if (dataset.val.empty())
    throw DataError(DataErrorKind::BadSplit,
                    "classifier training: empty validation split");

  std::mt19937_64 rng(cfg.seed);

  // The validation masks are drawn once so epoch scores are comparable.
  std::vector<Observation> val_obs;
  std::vector<int> val_labels;
  val_obs.reserve(dataset.val.size());
  for (int idx : dataset.val) {
    const Sample& s = dataset.samples[static_cast<size_t>(idx)];
    val_obs.push_back(masked_observation(s, dataset.schema, mode, budget, rng));
    val_labels.push_back(s.label);
  }

  std::vector<Parameter*> trainable = params.classifier_params();
  AdamState adam;
  std::vector<int> order(dataset.train.begin(), dataset.train.end());

  ModelParams best = params;
  double best_ce = std::numeric_limits<double>::infinity();
  int stale = 0;

  for (int epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t start = 0; start < order.size();
         start += static_cast<size_t>(cfg.batch_size)) {
      const size_t end =
          std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      std::vector<Observation> batch_obs;
      std::vector<int> batch_labels;
      batch_obs.reserve(end - start);
      for (size_t i = start; i < end; ++i) {
        const Sample& s = dataset.samples[static_cast<size_t>(order[i])];
        batch_obs.push_back(
            masked_observation(s, dataset.schema, mode, budget, rng));
        batch_labels.push_back(s.label);
      }

      Tape tape;
      std::vector<const Observation*> ptrs;
      ptrs.reserve(batch_obs.size());
      for (const Observation& o : batch_obs) ptrs.push_back(&o);
      EmbedResult emb = embed_batch(tape, ptrs, params, BnMode::Training);
      HeadsResult heads = heads_batch(tape, emb.root, params);
      NodeId sum = -1;
      for (size_t i = 0; i < ptrs.size(); ++i) {
        NodeId ce = tape.cross_entropy(
            tape.select_row(heads.class_probs, static_cast<int>(i)),
            batch_labels[i]);
        sum = sum < 0 ? ce : tape.add(sum, ce);
      }
      NodeId loss =
          tape.affine(sum, 1.0 / static_cast<double>(ptrs.size()), 0.0);
      tape.backward(loss);
      add_l2(trainable, cfg.l2);
      clip_global_norm(trainable, cfg.clip_norm);
      adam_step(trainable, adam, cfg.lr0, 0.0);
      zero_grads(trainable);
    }

    const double ce = classifier_val_ce(params, val_obs, val_labels);
    out.val_ce.push_back(ce);
    if (ce < best_ce) {
      best_ce = ce;
      out.best_epoch = epoch;
      best = params;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }

  out.params = std::move(best);
  return out;
}

ClassifierTrainResult pretrain_classifier(const Dataset& dataset,
                                          ModelParams params,
                                          const TrainConfig& cfg) {
  return train_masked_classifier(dataset, std::move(params), cfg,
                                 MaskMode::RandomFraction, 0.0);
}

ClassifierTrainResult train_hmil_full(const Dataset& dataset,
                                      const TrainConfig& cfg) {
  ModelParams params =
      init_model(dataset.schema, dataset.norm, cfg.seed, cfg.embed_dim);
  return train_masked_classifier(dataset, std::move(params), cfg,
                                 MaskMode::Full, 0.0);
}

RSPolicy train_rs_baseline(const Dataset& dataset, double budget,
                           const TrainConfig& cfg) {
  if (budget < 0)
    throw DataError(DataErrorKind::BadConfig, "baseline: budget must be >= 0");
  ModelParams params =
      init_model(dataset.schema, dataset.norm, cfg.seed, cfg.embed_dim);
  RSPolicy policy;
  policy.budget = budget;
  policy.params = train_masked_classifier(dataset, std::move(params), cfg,
                                          MaskMode::Budget, budget)
                      .params;
  return policy;
}

EvalPoint evaluate_random_budget(RSPolicy& policy, const Dataset& dataset,
                                 const std::string& split, double lambda,
                                 uint64_t seed) {
  const std::vector<int>& indices = split_indices(dataset, split);
  if (indices.empty())
    throw DataError(DataErrorKind::BadSplit, "empty split: " + split);

  std::mt19937_64 rng(seed);
  std::vector<EpisodeState> eps;
  eps.reserve(indices.size());
  for (int i : indices)
    eps.push_back(random_budget_episode(dataset.samples[static_cast<size_t>(i)],
                                        dataset.schema, policy.budget, rng));

  EvalPoint p;
  p.lambda = lambda;
  p.seed = seed;
  p.split = split;

  constexpr size_t kChunk = 256;
  for (size_t start = 0; start < eps.size(); start += kChunk) {
    const size_t end = std::min(eps.size(), start + kChunk);
    Tape tape;
    std::vector<const Observation*> ptrs;
    ptrs.reserve(end - start);
    for (size_t i = start; i < end; ++i) ptrs.push_back(&eps[i].observation);
    EmbedResult emb = embed_batch(tape, ptrs, policy.params, BnMode::Inference);
    HeadsResult heads = heads_batch(tape, emb.root, policy.params);
    const Tensor& probs = tape.value(heads.class_probs);
    for (size_t i = start; i < end; ++i) {
      const int pred = argmax_row(probs, static_cast<int>(i - start));
      const double miss = pred == eps[i].label ? 0.0 : 1.0;
      p.accuracy += 1.0 - miss;
      p.avg_cost += eps[i].accumulated_cost;
      p.avg_reward += -miss - lambda * eps[i].accumulated_cost;
    }
  }
  const double n = static_cast<double>(eps.size());
  p.accuracy /= n;
  p.avg_cost /= n;
  p.avg_reward /= n;
  return p;
}

}  // namespace cwcf
