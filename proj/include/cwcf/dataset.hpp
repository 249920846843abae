#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "cwcf/schema.hpp"

namespace cwcf {

struct Value;

struct ObjectInstance {
  // One entry per feature of the object's schema, in schema order.
  std::vector<Value> values;

  bool operator==(const ObjectInstance& other) const;
};

struct RealValue {
  double x = 0.0;
  bool operator==(const RealValue&) const = default;
};
struct CatValue {
  std::string symbol;
  bool operator==(const CatValue&) const = default;
};
struct TextValue {
  std::string text;
  bool operator==(const TextValue&) const = default;
};
struct SetValue {
  std::vector<ObjectInstance> objects;
  bool operator==(const SetValue&) const = default;
};

struct Value {
  std::variant<RealValue, CatValue, TextValue, SetValue> data;

  bool operator==(const Value& other) const = default;
};

struct Sample {
  ObjectInstance root;
  int label = 0;

  bool operator==(const Sample& other) const = default;
};

// Per real-valued schema position: (mean, stddev) over the training split.
using NormStats = std::map<std::string, std::pair<double, double>>;

struct Dataset {
  std::shared_ptr<const Schema> schema;
  std::vector<Sample> samples;
  std::vector<int> train, val, test;
  NormStats norm;
};

struct EncodedFeature {
  std::vector<double> vec;
  double mask = 0.0;
};

enum class DataErrorKind {
  Malformed,
  MissingFeature,
  UnknownFeature,
  TypeMismatch,
  UnknownCategory,
  UnknownLabel,
  BadSplit,
  BadConfig,
};

class DataError : public std::runtime_error {
 public:
  DataError(DataErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  DataErrorKind kind() const { return kind_; }

 private:
  DataErrorKind kind_;
};

inline constexpr int kTextDim = 13;

// Character tri-gram histogram of dimension 13. The string is wrapped in
// '^'/'$' boundary markers, each 3-byte window is hashed with
// h(c0,c1,c2) = (c0*31^2 + c1*31 + c2) mod 13 and the counts are
// L1-normalized. The empty string has no trigrams and maps to the zero
// vector.
std::array<double, kTextDim> trigram_histogram(const std::string& s);

// Encoded width of a feature at its schema position. Sets encode as the
// model's embedding vector.
int encoded_dim(const FeatureSpec& spec, int embed_dim);

// Encodes a scalar feature value (real/categorical/text). An absent value
// yields a zero vector with mask 0. Set features are encoded by the model.
EncodedFeature encode_feature(const FeatureSpec& spec, const Value* v,
                              const std::pair<double, double>* stats);

// Parses a JSON-lines samples document against the schema. All indices start
// in the training split; norm stats are computed from it.
Dataset load_dataset(std::shared_ptr<const Schema> schema,
                     const std::string& samples_document);

std::string serialize_sample(const Schema& schema, const Sample& sample);
std::string serialize_samples(const Dataset& dataset);

// Deterministic shuffle + partition into (train, val, test) of the given
// sizes. Norm stats are recomputed from the new training split. Indices not
// covered by the counts stay out of every split.
void split_dataset(Dataset& dataset, int n_train, int n_val, int n_test,
                   uint64_t seed);

// Recomputes dataset.norm from the current training split.
void recompute_norm_stats(Dataset& dataset);

struct SynthConfig {
  int classes = 2;
  int samples = 1000;
  int items_min = 2;
  int items_max = 4;
  int distractors = 3;
  double set_cost = 2.0;
  double signal_cost = 1.0;
  double distractor_cost = 1.0;
};

// Majority category with ties broken toward the lowest class index.
int majority_label(const std::vector<int>& signals, int classes);

// Depth-3 synthetic dataset: the root holds one costly set "items"; each
// item has one categorical "signal" and `distractors` random text features.
// The label is the majority signal. Labels are drawn uniformly over classes
// (signals are resampled toward a uniformly drawn target class), so the
// label distribution is balanced for any set-size range.
std::pair<std::shared_ptr<const Schema>, Dataset> generate_synthetic(
    const SynthConfig& cfg, uint64_t seed);

}  // namespace cwcf
