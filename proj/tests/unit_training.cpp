#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "cwcf/checkpoint.hpp"
#include "cwcf/training.hpp"
#include "doctest.h"
#include "support/fixtures.hpp"

using namespace cwcf;
using cwcf::testing::kUserSampleLine;
using cwcf::testing::user_schema;

namespace {

Dataset user_dataset() {
  Dataset ds = load_dataset(user_schema(), std::string(kUserSampleLine) + "\n");
  ds.val = ds.train;
  ds.test = ds.train;
  return ds;
}

Dataset synthetic_dataset(int samples, uint64_t seed) {
  SynthConfig cfg;
  cfg.classes = 2;
  cfg.samples = samples;
  cfg.items_min = 1;
  cfg.items_max = 2;
  cfg.distractors = 1;
  auto [schema, ds] = generate_synthetic(cfg, seed);
  split_dataset(ds, samples - 20, 10, 10, seed + 1);
  return ds;
}

int count_observed(const ObsObject& obj, const ObjectSchema& os) {
  int n = 0;
  for (size_t fi = 0; fi < os.features.size(); ++fi) {
    const ObsNode& node = obj.nodes[fi];
    if (!node.observed) continue;
    ++n;
    if (os.features[fi].type.kind == FeatureKind::Set)
      for (const ObsObject& child : node.children)
        n += count_observed(child, *os.features[fi].type.child);
  }
  return n;
}

std::vector<double> collect_grads(const std::vector<Parameter*>& params) {
  std::vector<double> out;
  for (const Parameter* p : params)
    out.insert(out.end(), p->grad.data.begin(), p->grad.data.end());
  return out;
}

// A transition whose action is legal in `obs` (built by applying the listed
// acquisitions to a fresh episode on the sample).
Transition make_transition(const Sample& sample,
                           std::shared_ptr<const Schema> schema,
                           const std::vector<FeaturePath>& acquired,
                           const Action& action, double reward_value) {
  EpisodeState ep = make_episode(sample, schema);
  for (const FeaturePath& path : acquired)
    apply_transition(ep, acquire_action(path));
  Transition t;
  t.obs = ep.observation;
  t.label = ep.label;
  t.action = action;
  t.reward = reward_value;
  apply_transition(ep, action);
  t.done = ep.done;
  t.next = ep.observation;
  return t;
}

}  // namespace

TEST_CASE("the train config validates, serializes, and parses strictly") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.total_steps() == 100 * cfg.epoch_length);

  cfg.lambda = 0.125;
  cfg.epoch_length = 250;
  cfg.seed = 77;
  cfg.embed_dim = 16;
  const TrainConfig back = parse_train_config(serialize_train_config(cfg));
  CHECK(back == cfg);

  const TrainConfig partial = parse_train_config(R"({"lambda": 0.5})");
  CHECK(partial.lambda == 0.5);
  CHECK(partial.batch_size == TrainConfig{}.batch_size);
  CHECK(partial.lr0 == TrainConfig{}.lr0);

  CHECK_THROWS_AS(parse_train_config(R"({"lamda": 1.0})"), DataError);
  CHECK_THROWS_AS(parse_train_config("3"), DataError);
  CHECK_THROWS_AS(parse_train_config("{"), DataError);
  CHECK_THROWS_AS(parse_train_config(R"({"batch_size": 0})"), DataError);
  CHECK_THROWS_AS(parse_train_config(R"({"gamma": 2.0})"), DataError);
  CHECK_THROWS_AS(parse_train_config(R"({"lr0": 0.0})"), DataError);
  CHECK_THROWS_AS(parse_train_config(R"({"patience": 0})"), DataError);
  CHECK_THROWS_AS(parse_train_config(R"({"clip_norm": 0.0})"), DataError);
  try {
    parse_train_config(R"({"lamda": 1.0})");
  } catch (const DataError& e) {
    CHECK(e.kind() == DataErrorKind::BadConfig);
  }
}

TEST_CASE("schedules halve exactly on their boundaries") {
  TrainConfig cfg;
  cfg.epoch_length = 7;  // odd, to catch integer-division mistakes
  cfg.lr0 = 3e-3;
  cfg.alpha_h0 = 0.05;

  CHECK(cfg.lr_at(0) == 3e-3);
  CHECK(cfg.lr_at(69) == 3e-3);
  CHECK(cfg.lr_at(70) == 1.5e-3);
  CHECK(cfg.lr_at(139) == 1.5e-3);
  CHECK(cfg.lr_at(140) == 0.75e-3);

  CHECK(cfg.alpha_h_at(0) == 0.05);
  CHECK(cfg.alpha_h_at(6) == 0.05);
  CHECK(cfg.alpha_h_at(7) == 0.025);
  CHECK(cfg.alpha_h_at(13) == 0.025);
  CHECK(cfg.alpha_h_at(14) == 0.0125);
  // Ten epochs in, the entropy weight has halved ten times, exactly.
  CHECK(cfg.alpha_h_at(70) == std::ldexp(0.05, -10));
}

TEST_CASE("random masks cover the size spectrum") {
  Dataset ds = user_dataset();
  const Sample& sample = ds.samples[0];
  const int total = [&] {
    Observation all = initial_observation(sample, ds.schema);
    observe_all(all);
    return count_observed(all.root, ds.schema->root);
  }();

  std::mt19937_64 rng(3);
  std::set<int> sizes;
  int full = 0;
  for (int i = 0; i < 1000; ++i) {
    Observation obs = random_mask_sample(sample, ds.schema, rng);
    const int n = count_observed(obs.root, ds.schema->root);
    CHECK(n <= total);
    sizes.insert(n);
    if (n == total) ++full;
  }
  CHECK(sizes.size() >= 10);
  CHECK(full > 0);
}

TEST_CASE("budgeted walks never overshoot and stop strictly") {
  Dataset ds = user_dataset();
  const Sample& sample = ds.samples[0];
  std::mt19937_64 rng(5);

  SUBCASE("zero budget buys nothing") {
    EpisodeState ep = random_budget_episode(sample, ds.schema, 0.0, rng);
    CHECK(ep.accumulated_cost == 0.0);
    CHECK(count_observed(ep.observation.root, ds.schema->root) == 0);
  }

  SUBCASE("a covering budget buys everything") {
    const double total = total_information_cost(*ds.schema, sample);
    EpisodeState ep = random_budget_episode(sample, ds.schema, total + 1.0, rng);
    CHECK(forced_terminal(ep.observation));
    CHECK(ep.accumulated_cost == doctest::Approx(total).epsilon(1e-12));
  }

  SUBCASE("the walk respects the cap and stops at the first refusal") {
    const double budget = 2.5;
    int strict_stops = 0;
    for (int i = 0; i < 1000; ++i) {
      EpisodeState ep = random_budget_episode(sample, ds.schema, budget, rng);
      CHECK(ep.accumulated_cost <= budget);
      // A cheaper node that still fits proves the walk stopped on its first
      // unaffordable pick instead of substituting.
      for (const Action& a : enumerate_actions(ep.observation)) {
        if (a.terminal) continue;
        if (ep.accumulated_cost + feature_cost(*ds.schema, a.path) <= budget) {
          ++strict_stops;
          break;
        }
      }
    }
    CHECK(strict_stops > 0);
  }
}

TEST_CASE("bootstrap values equal single-observation values and vanish when done") {
  Dataset ds = user_dataset();
  ModelParams params = init_model(ds.schema, ds.norm, 17, 8);
  const Sample& sample = ds.samples[0];

  const FeaturePath posts{{"posts", std::nullopt}};
  const FeaturePath badges{{"badges", std::nullopt}};
  const FeaturePath reputation{{"reputation", std::nullopt}};

  StepBatch batch;
  batch.push_back(
      make_transition(sample, ds.schema, {posts}, terminal_action(), -1.0));
  batch.push_back(make_transition(sample, ds.schema, {posts},
                                  acquire_action(badges), -0.25));
  batch.push_back(make_transition(sample, ds.schema, {},
                                  acquire_action(reputation), -0.025));

  const std::vector<double> boot = bootstrap_values(params, batch);
  REQUIRE(boot.size() == 3);
  CHECK(boot[0] == 0.0);

  for (size_t i : {size_t{1}, size_t{2}}) {
    Tape tape;
    EmbedResult emb = embed(tape, batch[i].next, params, BnMode::Inference);
    HeadsResult heads = heads_batch(tape, emb.root, params);
    CHECK(boot[i] == tape.value(heads.values).at(0, 0));
  }
}

TEST_CASE("advantage and target constants match their definitions") {
  Dataset ds = user_dataset();
  ModelParams params = init_model(ds.schema, ds.norm, 21, 8);
  const Sample& sample = ds.samples[0];
  const FeaturePath posts{{"posts", std::nullopt}};
  const FeaturePath badges{{"badges", std::nullopt}};

  TrainConfig cfg;
  cfg.gamma = 0.5;
  cfg.alpha_v = 0.5;

  SUBCASE("acquisition bootstraps through gamma") {
    StepBatch batch{make_transition(sample, ds.schema, {posts},
                                    acquire_action(badges), -0.25)};

    // The same forward pass on an identical copy yields the reference
    // numbers (the copy keeps batchnorm statistics mutations separate).
    ModelParams probe = params;
    Tape ref;
    EmbedResult emb = embed(ref, batch[0].obs, probe, BnMode::Training);
    HeadsResult heads = heads_batch(ref, emb.root, probe);
    const double v = ref.value(heads.values).at(0, 0);
    PolicyTree tree = build_policy(ref, batch[0].obs, emb, 0, probe);
    const double lp = action_logprob(ref, tree, batch[0].action);

    Tape tape;
    A2CParts parts = a2c_objective(tape, batch, params, cfg, 0.05, {0.75});
    CHECK(parts.constants.target[0] == -0.25 + 0.5 * 0.75);
    CHECK(parts.constants.advantage[0] == parts.constants.target[0] - v);
    CHECK(parts.constants.logp[0] == lp);
    CHECK(parts.classifier_ce == -1);  // no terminal transition, no CE term
    CHECK(parts.total == parts.objective);
  }

  SUBCASE("terminal transitions ignore the bootstrap and add the CE term") {
    StepBatch batch{
        make_transition(sample, ds.schema, {posts}, terminal_action(), -1.0)};
    Tape tape;
    A2CParts parts = a2c_objective(tape, batch, params, cfg, 0.05, {123.0});
    CHECK(parts.constants.target[0] == -1.0);
    CHECK(parts.classifier_ce != -1);
    CHECK(tape.value(parts.classifier_ce).at(0, 0) > 0.0);
  }

  SUBCASE("malformed batches are rejected") {
    StepBatch empty;
    Tape tape;
    CHECK_THROWS_AS(a2c_objective(tape, empty, params, cfg, 0.0, {}),
                    DataError);
    StepBatch batch{make_transition(sample, ds.schema, {posts},
                                    acquire_action(badges), -0.25)};
    CHECK_THROWS_AS(a2c_objective(tape, batch, params, cfg, 0.0, {0.5, 0.5}),
                    DataError);
  }
}

TEST_CASE("zero advantage leaves only the entropy gradient") {
  Dataset ds = user_dataset();
  ModelParams params = init_model(ds.schema, ds.norm, 29, 8);
  const Sample& sample = ds.samples[0];
  const FeaturePath posts{{"posts", std::nullopt}};
  const FeaturePath badges{{"badges", std::nullopt}};

  StepBatch batch{make_transition(sample, ds.schema, {posts},
                                  acquire_action(badges), -0.25)};
  TrainConfig cfg;
  cfg.alpha_v = 0.5;
  const double alpha_h = 0.05;

  // Reference numbers from an identical pass.
  ModelParams probe = params;
  Tape ref;
  EmbedResult remb = embed(ref, batch[0].obs, probe, BnMode::Training);
  HeadsResult rheads = heads_batch(ref, remb.root, probe);
  const double v0 = ref.value(rheads.values).at(0, 0);
  PolicyTree rtree = build_policy(ref, batch[0].obs, remb, 0, probe);
  const double lp0 = action_logprob(ref, rtree, batch[0].action);

  // With A = 0 and target = V the value term and the policy term both lose
  // their gradients; only alpha_h * [logp] * d(logp) remains.
  A2CConstants frozen;
  frozen.advantage = {0.0};
  frozen.target = {v0};
  frozen.logp = {lp0};

  std::vector<Parameter*> all = params.all_params();
  zero_grads(all);
  {
    Tape tape;
    A2CParts parts =
        a2c_objective(tape, batch, params, cfg, alpha_h, {0.0}, &frozen);
    tape.backward(parts.total);
  }
  const std::vector<double> g = collect_grads(all);

  zero_grads(all);
  {
    Tape tape;
    EmbedResult emb = embed(tape, batch[0].obs, params, BnMode::Training);
    PolicyTree tree = build_policy(tape, batch[0].obs, emb, 0, params);
    tape.backward(logprob_node(tape, tree, batch[0].action));
  }
  const std::vector<double> h_lp = collect_grads(all);
  zero_grads(all);

  REQUIRE(g.size() == h_lp.size());
  for (size_t i = 0; i < g.size(); ++i)
    CHECK(g[i] ==
          doctest::Approx(alpha_h * lp0 * h_lp[i]).epsilon(1e-9).scale(1e-12));
}

TEST_CASE("the bootstrap enters the update only as a constant") {
  Dataset ds = user_dataset();
  ModelParams params = init_model(ds.schema, ds.norm, 31, 8);
  const Sample& sample = ds.samples[0];
  const FeaturePath posts{{"posts", std::nullopt}};
  const FeaturePath badges{{"badges", std::nullopt}};

  StepBatch batch{make_transition(sample, ds.schema, {posts},
                                  acquire_action(badges), -0.25)};
  TrainConfig cfg;
  cfg.gamma = 0.5;
  cfg.alpha_v = 0.5;
  const double delta = 0.25;

  std::vector<Parameter*> all = params.all_params();
  auto update_grads = [&](double bootstrap) {
    zero_grads(all);
    Tape tape;
    A2CParts parts =
        a2c_objective(tape, batch, params, cfg, 0.0, {bootstrap});
    tape.backward(parts.total);
    std::vector<double> g = collect_grads(all);
    zero_grads(all);
    return g;
  };

  const std::vector<double> g1 = update_grads(0.75);
  const std::vector<double> g2 = update_grads(0.75 + delta);

  zero_grads(all);
  {
    Tape tape;
    EmbedResult emb = embed(tape, batch[0].obs, params, BnMode::Training);
    PolicyTree tree = build_policy(tape, batch[0].obs, emb, 0, params);
    tape.backward(logprob_node(tape, tree, batch[0].action));
  }
  const std::vector<double> h_lp = collect_grads(all);

  zero_grads(all);
  {
    Tape tape;
    EmbedResult emb = embed(tape, batch[0].obs, params, BnMode::Training);
    HeadsResult heads = heads_batch(tape, emb.root, params);
    tape.backward(tape.select_entry(heads.values, 0, 0));
  }
  const std::vector<double> h_v = collect_grads(all);
  zero_grads(all);

  // Shifting the bootstrap by delta moves the advantage and the value target
  // by gamma*delta and nothing else: the gradient change must lie exactly in
  // the span of d(logp) and d(V).
  const double gd = cfg.gamma * delta;
  REQUIRE(g1.size() == h_lp.size());
  for (size_t i = 0; i < g1.size(); ++i) {
    const double residual =
        g2[i] - g1[i] + gd * h_lp[i] + 2.0 * cfg.alpha_v * gd * h_v[i];
    CHECK(std::abs(residual) <=
          1e-12 * (1.0 + std::abs(h_lp[i]) + std::abs(h_v[i])));
  }
}

TEST_CASE("the update objective passes a finite-difference check with frozen constants") {
  Dataset ds = user_dataset();
  ModelParams params = init_model(ds.schema, ds.norm, 23, 4);
  const Sample& sample = ds.samples[0];

  const FeaturePath posts{{"posts", std::nullopt}};
  const FeaturePath badges{{"badges", std::nullopt}};
  const FeaturePath reputation{{"reputation", std::nullopt}};
  const FeaturePath title{{"posts", 0}, {"title", std::nullopt}};

  StepBatch batch;
  batch.push_back(make_transition(sample, ds.schema, {posts},
                                  acquire_action(badges), -0.25));
  batch.push_back(make_transition(sample, ds.schema,
                                  {posts, badges, reputation},
                                  acquire_action(title), -0.1));
  batch.push_back(
      make_transition(sample, ds.schema, {posts}, terminal_action(), -1.0));

  TrainConfig cfg;
  cfg.gamma = 0.5;
  cfg.alpha_v = 0.5;
  const double alpha_h = 0.05;
  const std::vector<double> boot = bootstrap_values(params, batch);

  // Capture the constants once; the closure then rebuilds the same surrogate
  // with them held fixed, which is exactly the function the update
  // differentiates.
  A2CConstants frozen;
  {
    Tape tape;
    frozen = a2c_objective(tape, batch, params, cfg, alpha_h, boot).constants;
  }

  std::vector<Parameter*> all = params.all_params();
  auto f = [&](bool with_grad) {
    Tape tape;
    A2CParts parts =
        a2c_objective(tape, batch, params, cfg, alpha_h, boot, &frozen);
    // Small output scale keeps the finite-difference noise below the
    // relative-error guard at near-zero-gradient coordinates.
    NodeId scaled = tape.affine(parts.total, 1e-3, 0.0);
    if (with_grad) tape.backward(scaled);
    return tape.value(scaled).at(0, 0);
  };

  CHECK(grad_check(f, all, 1e-5) < 1e-4);
}

TEST_CASE("training is deterministic and respects its schedules") {
  Dataset ds = synthetic_dataset(60, 5);
  TrainConfig cfg;
  cfg.lambda = 0.25;
  cfg.batch_size = 8;
  cfg.epoch_length = 5;
  cfg.seed = 9;
  cfg.embed_dim = 8;
  cfg.pretrain_epochs = 0;

  auto run = [&] {
    return train(ds, init_model(ds.schema, ds.norm, cfg.seed, cfg.embed_dim),
                 cfg);
  };
  TrainedModel r1 = run();
  TrainedModel r2 = run();

  CHECK(metrics_to_jsonl(r1.metrics) == metrics_to_jsonl(r2.metrics));
  REQUIRE(r1.metrics.size() == 100);

  double best = -1e300;
  for (size_t i = 0; i < r1.metrics.size(); ++i) {
    const ValidationPoint& vp = r1.metrics[i];
    CHECK(vp.step == static_cast<int>(i + 1) * cfg.epoch_length);
    CHECK(vp.lr == cfg.lr_at(vp.step));
    CHECK(vp.alpha_h == cfg.alpha_h_at(vp.step));
    CHECK(vp.val_reward ==
          doctest::Approx(-(1.0 - vp.val_accuracy) -
                          cfg.lambda * vp.val_cost)
              .epsilon(1e-9));
    best = std::max(best, vp.val_reward);
  }
  // Halvings are visible in the logged schedule columns.
  CHECK(r1.metrics[0].alpha_h == cfg.alpha_h0 / 2);
  CHECK(r1.metrics[9].lr == cfg.lr0 / 2);
  CHECK(r1.metrics[99].lr == std::ldexp(cfg.lr0, -10));

  CHECK(r1.max_postclip_norm <= cfg.clip_norm + 1e-12);
  CHECK(r1.max_postclip_norm > 0.0);

  // The snapshot is the first validation hitting the best reward, and the
  // returned parameters reproduce that exact measurement.
  REQUIRE(r1.best_index >= 0);
  CHECK(r1.metrics[static_cast<size_t>(r1.best_index)].val_reward == best);
  for (int i = 0; i < r1.best_index; ++i)
    CHECK(r1.metrics[static_cast<size_t>(i)].val_reward < best);
  const EvalPoint ev = evaluate(r1.params, ds, "val", cfg.lambda);
  CHECK(ev.avg_reward ==
        r1.metrics[static_cast<size_t>(r1.best_index)].val_reward);

  // The callback sees every validation point in order.
  std::vector<int> seen;
  TrainedModel r3 = train(
      ds, init_model(ds.schema, ds.norm, cfg.seed, cfg.embed_dim), cfg,
      [&](const ValidationPoint& vp, const ModelParams&) {
        seen.push_back(vp.step);
      });
  CHECK(seen.size() == 100);
  CHECK(seen.front() == cfg.epoch_length);
  CHECK(seen.back() == cfg.total_steps());
}

TEST_CASE("pretraining improves the masked classifier and can be disabled") {
  Dataset ds = synthetic_dataset(90, 7);
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.seed = 3;
  cfg.embed_dim = 8;
  cfg.pretrain_epochs = 12;

  ModelParams fresh = init_model(ds.schema, ds.norm, 3, 8);

  SUBCASE("zero epochs leave the parameters untouched") {
    TrainConfig off = cfg;
    off.pretrain_epochs = 0;
    ClassifierTrainResult r = pretrain_classifier(ds, fresh, off);
    CHECK(serialize_model(r.params) == serialize_model(fresh));
    CHECK(r.val_ce.empty());
    CHECK(r.best_epoch == -1);
  }

  SUBCASE("masked pretraining beats chance-level cross-entropy") {
    ClassifierTrainResult r = pretrain_classifier(ds, fresh, cfg);
    REQUIRE(!r.val_ce.empty());
    CHECK(r.val_ce.size() <= 12);
    REQUIRE(r.best_epoch >= 0);
    const double best = *std::min_element(r.val_ce.begin(), r.val_ce.end());
    CHECK(r.val_ce[static_cast<size_t>(r.best_epoch)] == best);
    CHECK(best < std::log(2.0));
  }

  SUBCASE("a single-class problem drives the cross-entropy to zero") {
    Dataset flat = ds;
    for (Sample& s : flat.samples) s.label = 0;
    TrainConfig quick = cfg;
    // Adam moves each logit by about lr per step, so the tiny split needs a
    // hot learning rate to open a decisive gap within a few epochs.
    quick.lr0 = 0.05;
    quick.pretrain_epochs = 30;
    ClassifierTrainResult r = pretrain_classifier(flat, fresh, quick);
    REQUIRE(!r.val_ce.empty());
    CHECK(*std::min_element(r.val_ce.begin(), r.val_ce.end()) < 0.1);
  }
}

TEST_CASE("the random-acquisition baseline honors budgets end to end") {
  Dataset ds = synthetic_dataset(90, 13);
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.seed = 3;
  cfg.embed_dim = 8;
  cfg.pretrain_epochs = 6;

  SUBCASE("budgeted training and evaluation") {
    RSPolicy rs = train_rs_baseline(ds, 3.0, cfg);
    CHECK(rs.budget == 3.0);
    const EvalPoint ev = evaluate_random_budget(rs, ds, "test", 0.25, 11);
    CHECK(ev.avg_cost <= 3.0);
    CHECK(ev.avg_cost > 0.0);
    CHECK(ev.avg_reward ==
          doctest::Approx(-(1.0 - ev.accuracy) - 0.25 * ev.avg_cost)
              .epsilon(1e-12));
    CHECK(ev.split == "test");

    const EvalPoint again = evaluate_random_budget(rs, ds, "test", 0.25, 11);
    CHECK(again == ev);
  }

  SUBCASE("a zero budget acquires nothing") {
    RSPolicy rs;
    rs.budget = 0.0;
    rs.params = init_model(ds.schema, ds.norm, 3, 8);
    const EvalPoint ev = evaluate_random_budget(rs, ds, "val", 0.5, 2);
    CHECK(ev.avg_cost == 0.0);
    CHECK(ev.avg_reward == doctest::Approx(-(1.0 - ev.accuracy)).epsilon(1e-15));
  }

  SUBCASE("the full-information classifier trains from scratch") {
    ClassifierTrainResult full = train_hmil_full(ds, cfg);
    REQUIRE(!full.val_ce.empty());
    CHECK(full.val_ce[static_cast<size_t>(full.best_epoch)] <=
          full.val_ce.front());
    CHECK_THROWS_AS(train_rs_baseline(ds, -1.0, cfg), DataError);
  }
}
