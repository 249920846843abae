#include "cwcf/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace cwcf {

namespace {

using ordered_json = nlohmann::ordered_json;

[[noreturn]] void fail(DataErrorKind kind, const std::string& msg) {
  throw DataError(kind, msg);
}

}  // namespace

bool ObjectInstance::operator==(const ObjectInstance& other) const {
  return values == other.values;
}

std::array<double, kTextDim> trigram_histogram(const std::string& s) {
  std::array<double, kTextDim> h{};
  const std::string wrapped = "^" + s + "$";
  if (wrapped.size() < 3) return h;
  int total = 0;
  for (size_t i = 0; i + 2 < wrapped.size(); ++i) {
    const unsigned c0 = static_cast<unsigned char>(wrapped[i]);
    const unsigned c1 = static_cast<unsigned char>(wrapped[i + 1]);
    const unsigned c2 = static_cast<unsigned char>(wrapped[i + 2]);
    h[(c0 * 31u * 31u + c1 * 31u + c2) % kTextDim] += 1.0;
    ++total;
  }
  for (double& x : h) x /= total;
  return h;
}

int encoded_dim(const FeatureSpec& spec, int embed_dim) {
  switch (spec.type.kind) {
    case FeatureKind::Real:
      return 1;
    case FeatureKind::Categorical:
      return static_cast<int>(spec.type.categories.size());
    case FeatureKind::Text:
      return kTextDim;
    case FeatureKind::Set:
      return embed_dim;
  }
  return 0;
}

EncodedFeature encode_feature(const FeatureSpec& spec, const Value* v,
                              const std::pair<double, double>* stats) {
  EncodedFeature out;
  out.vec.assign(encoded_dim(spec, /*embed_dim=*/0), 0.0);
  out.mask = 0.0;
  if (spec.type.kind == FeatureKind::Set)
    fail(DataErrorKind::TypeMismatch,
         "feature '" + spec.name + "': set features are encoded by the model");
  if (v == nullptr) return out;
  out.mask = 1.0;
  switch (spec.type.kind) {
    case FeatureKind::Real: {
      const auto* rv = std::get_if<RealValue>(&v->data);
      if (!rv)
        fail(DataErrorKind::TypeMismatch,
             "feature '" + spec.name + "': expected a number");
      double x = rv->x;
      if (stats) x = stats->second > 0.0 ? (x - stats->first) / stats->second : 0.0;
      out.vec[0] = x;
      break;
    }
    case FeatureKind::Categorical: {
      const auto* cv = std::get_if<CatValue>(&v->data);
      if (!cv)
        fail(DataErrorKind::TypeMismatch,
             "feature '" + spec.name + "': expected a category string");
      const auto& cats = spec.type.categories;
      const auto it = std::find(cats.begin(), cats.end(), cv->symbol);
      if (it == cats.end())
        fail(DataErrorKind::UnknownCategory, "feature '" + spec.name +
                                                 "': unknown category '" +
                                                 cv->symbol + "'");
      out.vec[it - cats.begin()] = 1.0;
      break;
    }
    case FeatureKind::Text: {
      const auto* tv = std::get_if<TextValue>(&v->data);
      if (!tv)
        fail(DataErrorKind::TypeMismatch,
             "feature '" + spec.name + "': expected a string");
      const auto h = trigram_histogram(tv->text);
      out.vec.assign(h.begin(), h.end());
      break;
    }
    case FeatureKind::Set:
      break;  // unreachable, rejected above
  }
  return out;
}

namespace {

Value parse_value(const FeatureSpec& spec, const ordered_json& j,
                  const std::string& where);

ObjectInstance parse_object(const ObjectSchema& os, const ordered_json& j,
                            const std::string& where) {
  if (!j.is_object())
    fail(DataErrorKind::Malformed, where + ": expected an object");
  for (const auto& [key, _] : j.items())
    if (os.find(key) < 0)
      fail(DataErrorKind::UnknownFeature,
           where + ": unknown feature '" + key + "'");
  ObjectInstance obj;
  obj.values.reserve(os.features.size());
  for (const auto& spec : os.features) {
    const auto it = j.find(spec.name);
    if (it == j.end())
      fail(DataErrorKind::MissingFeature,
           where + ": missing feature '" + spec.name + "'");
    obj.values.push_back(parse_value(spec, *it, where + "." + spec.name));
  }
  return obj;
}

Value parse_value(const FeatureSpec& spec, const ordered_json& j,
                  const std::string& where) {
  switch (spec.type.kind) {
    case FeatureKind::Real: {
      if (!j.is_number())
        fail(DataErrorKind::TypeMismatch, where + ": expected a number");
      return Value{RealValue{j.get<double>()}};
    }
    case FeatureKind::Categorical: {
      if (!j.is_string())
        fail(DataErrorKind::TypeMismatch,
             where + ": expected a category string");
      const std::string symbol = j.get<std::string>();
      const auto& cats = spec.type.categories;
      if (std::find(cats.begin(), cats.end(), symbol) == cats.end())
        fail(DataErrorKind::UnknownCategory,
             where + ": unknown category '" + symbol + "'");
      return Value{CatValue{symbol}};
    }
    case FeatureKind::Text: {
      if (!j.is_string())
        fail(DataErrorKind::TypeMismatch, where + ": expected a string");
      return Value{TextValue{j.get<std::string>()}};
    }
    case FeatureKind::Set: {
      if (!j.is_array())
        fail(DataErrorKind::TypeMismatch, where + ": expected an array");
      SetValue sv;
      sv.objects.reserve(j.size());
      for (size_t i = 0; i < j.size(); ++i)
        sv.objects.push_back(parse_object(
            *spec.type.child, j[i], where + "[" + std::to_string(i) + "]"));
      return Value{std::move(sv)};
    }
  }
  fail(DataErrorKind::Malformed, where + ": unhandled feature kind");
}

ordered_json value_to_json(const FeatureSpec& spec, const Value& v);

ordered_json object_to_json(const ObjectSchema& os, const ObjectInstance& obj) {
  ordered_json j = ordered_json::object();
  for (size_t i = 0; i < os.features.size(); ++i)
    j[os.features[i].name] = value_to_json(os.features[i], obj.values[i]);
  return j;
}

ordered_json value_to_json(const FeatureSpec& spec, const Value& v) {
  switch (spec.type.kind) {
    case FeatureKind::Real:
      return std::get<RealValue>(v.data).x;
    case FeatureKind::Categorical:
      return std::get<CatValue>(v.data).symbol;
    case FeatureKind::Text:
      return std::get<TextValue>(v.data).text;
    case FeatureKind::Set: {
      ordered_json arr = ordered_json::array();
      for (const auto& obj : std::get<SetValue>(v.data).objects)
        arr.push_back(object_to_json(*spec.type.child, obj));
      return arr;
    }
  }
  return nullptr;
}

// Accumulates (count, sum, sum of squares) per real-valued schema position.
struct RealAccum {
  long long n = 0;
  double sum = 0.0;
  double sum_sq = 0.0;
};

void accumulate_reals(const ObjectSchema& os, const ObjectInstance& obj,
                      const std::string& prefix,
                      std::map<std::string, RealAccum>& acc) {
  for (size_t i = 0; i < os.features.size(); ++i) {
    const auto& spec = os.features[i];
    const std::string key = prefix.empty() ? spec.name : prefix + "." + spec.name;
    if (spec.type.kind == FeatureKind::Real) {
      auto& a = acc[key];
      const double x = std::get<RealValue>(obj.values[i].data).x;
      ++a.n;
      a.sum += x;
      a.sum_sq += x * x;
    } else if (spec.type.kind == FeatureKind::Set) {
      for (const auto& child : std::get<SetValue>(obj.values[i].data).objects)
        accumulate_reals(*spec.type.child, child, key, acc);
    }
  }
}

void register_real_positions(const ObjectSchema& os, const std::string& prefix,
                             std::map<std::string, RealAccum>& acc) {
  for (const auto& spec : os.features) {
    const std::string key = prefix.empty() ? spec.name : prefix + "." + spec.name;
    if (spec.type.kind == FeatureKind::Real)
      acc.emplace(key, RealAccum{});
    else if (spec.type.kind == FeatureKind::Set)
      register_real_positions(*spec.type.child, key, acc);
  }
}

}  // namespace

void recompute_norm_stats(Dataset& dataset) {
  std::map<std::string, RealAccum> acc;
  register_real_positions(dataset.schema->root, "", acc);
  for (const int idx : dataset.train)
    accumulate_reals(dataset.schema->root, dataset.samples[idx].root, "", acc);
  dataset.norm.clear();
  for (const auto& [key, a] : acc) {
    if (a.n == 0) {
      dataset.norm[key] = {0.0, 0.0};
      continue;
    }
    const double mean = a.sum / a.n;
    const double var = std::max(0.0, a.sum_sq / a.n - mean * mean);
    dataset.norm[key] = {mean, std::sqrt(var)};
  }
}

Dataset load_dataset(std::shared_ptr<const Schema> schema,
                     const std::string& samples_document) {
  Dataset ds;
  ds.schema = schema;
  std::istringstream in(samples_document);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "line " + std::to_string(line_no);
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(DataErrorKind::Malformed, where + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("label") || !j.contains("features") ||
        j.size() != 2)
      fail(DataErrorKind::Malformed,
           where + ": expected an object with exactly 'label' and 'features'");
    if (!j["label"].is_string())
      fail(DataErrorKind::UnknownLabel, where + ": label must be a string");
    const std::string label = j["label"].get<std::string>();
    const auto& names = schema->class_names;
    const auto it = std::find(names.begin(), names.end(), label);
    if (it == names.end())
      fail(DataErrorKind::UnknownLabel,
           where + ": unknown label '" + label + "'");
    Sample s;
    s.label = static_cast<int>(it - names.begin());
    s.root = parse_object(schema->root, j["features"], where + ": features");
    ds.samples.push_back(std::move(s));
  }
  ds.train.resize(ds.samples.size());
  std::iota(ds.train.begin(), ds.train.end(), 0);
  recompute_norm_stats(ds);
  return ds;
}

std::string serialize_sample(const Schema& schema, const Sample& sample) {
  ordered_json j = ordered_json::object();
  j["label"] = schema.class_names.at(sample.label);
  j["features"] = object_to_json(schema.root, sample.root);
  return j.dump();
}

std::string serialize_samples(const Dataset& dataset) {
  std::string out;
  for (const auto& s : dataset.samples) {
    out += serialize_sample(*dataset.schema, s);
    out += '\n';
  }
  return out;
}

void split_dataset(Dataset& dataset, int n_train, int n_val, int n_test,
                   uint64_t seed) {
  const int n = static_cast<int>(dataset.samples.size());
  if (n_train < 0 || n_val < 0 || n_test < 0 ||
      n_train + n_val + n_test > n)
    fail(DataErrorKind::BadSplit,
         "split sizes " + std::to_string(n_train) + "/" +
             std::to_string(n_val) + "/" + std::to_string(n_test) +
             " do not fit " + std::to_string(n) + " samples");
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  dataset.train.assign(order.begin(), order.begin() + n_train);
  dataset.val.assign(order.begin() + n_train, order.begin() + n_train + n_val);
  dataset.test.assign(order.begin() + n_train + n_val,
                      order.begin() + n_train + n_val + n_test);
  recompute_norm_stats(dataset);
}

int majority_label(const std::vector<int>& signals, int classes) {
  std::vector<int> counts(classes, 0);
  for (const int s : signals) ++counts.at(s);
  return static_cast<int>(std::max_element(counts.begin(), counts.end()) -
                          counts.begin());
}

std::pair<std::shared_ptr<const Schema>, Dataset> generate_synthetic(
    const SynthConfig& cfg, uint64_t seed) {
  if (cfg.classes < 2 || cfg.samples < 1 || cfg.items_min < 1 ||
      cfg.items_max < cfg.items_min || cfg.distractors < 0)
    fail(DataErrorKind::BadConfig, "invalid synthetic-dataset configuration");

  auto item_schema = std::make_shared<ObjectSchema>();
  {
    FeatureSpec signal;
    signal.name = "signal";
    signal.type.kind = FeatureKind::Categorical;
    for (int c = 0; c < cfg.classes; ++c)
      signal.type.categories.push_back("s" + std::to_string(c));
    signal.cost = cfg.signal_cost;
    item_schema->features.push_back(std::move(signal));
    for (int d = 0; d < cfg.distractors; ++d) {
      FeatureSpec noise;
      noise.name = "noise" + std::to_string(d);
      noise.type.kind = FeatureKind::Text;
      noise.cost = cfg.distractor_cost;
      item_schema->features.push_back(std::move(noise));
    }
  }

  auto schema = std::make_shared<Schema>();
  {
    FeatureSpec items;
    items.name = "items";
    items.type.kind = FeatureKind::Set;
    items.type.child = item_schema;
    items.cost = cfg.set_cost;
    schema->root.features.push_back(std::move(items));
    for (int c = 0; c < cfg.classes; ++c)
      schema->class_names.push_back("c" + std::to_string(c));
  }

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> item_count(cfg.items_min, cfg.items_max);
  std::uniform_int_distribution<int> target_class(0, cfg.classes - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> other_offset(1, cfg.classes - 1);
  std::uniform_int_distribution<int> text_len(3, 8);
  std::uniform_int_distribution<int> letter(0, 25);

  Dataset ds;
  ds.schema = schema;
  ds.samples.reserve(cfg.samples);
  for (int i = 0; i < cfg.samples; ++i) {
    const int n_items = item_count(rng);
    const int target = target_class(rng);
    std::vector<int> signals(n_items);
    bool ok = false;
    for (int attempt = 0; attempt < 64 && !ok; ++attempt) {
      for (int k = 0; k < n_items; ++k)
        signals[k] = unit(rng) < 0.75
                         ? target
                         : (target + other_offset(rng)) % cfg.classes;
      ok = majority_label(signals, cfg.classes) == target;
    }
    if (!ok) std::fill(signals.begin(), signals.end(), target);

    SetValue items;
    items.objects.reserve(n_items);
    for (int k = 0; k < n_items; ++k) {
      ObjectInstance item;
      item.values.push_back(
          Value{CatValue{"s" + std::to_string(signals[k])}});
      for (int d = 0; d < cfg.distractors; ++d) {
        std::string text(text_len(rng), '\0');
        for (char& ch : text) ch = static_cast<char>('a' + letter(rng));
        item.values.push_back(Value{TextValue{std::move(text)}});
      }
      items.objects.push_back(std::move(item));
    }

    Sample s;
    s.label = majority_label(signals, cfg.classes);
    s.root.values.push_back(Value{std::move(items)});
    ds.samples.push_back(std::move(s));
  }

  ds.train.resize(ds.samples.size());
  std::iota(ds.train.begin(), ds.train.end(), 0);
  recompute_norm_stats(ds);
  return {schema, std::move(ds)};
}

}  // namespace cwcf
