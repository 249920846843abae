#include "cwcf/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <utility>
#include <vector>

#include "nlohmann/json.hpp"

namespace cwcf {

namespace {

constexpr char kMagic[8] = {'C', 'W', 'C', 'K', 'P', 'T', '0', '1'};
constexpr int kFormatVersion = 1;

[[noreturn]] void fail(const std::string& msg) {
  throw DataError(DataErrorKind::Malformed, "checkpoint: " + msg);
}

void put_u32(std::string& out, uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

uint32_t take_u32(const std::string& s, size_t& off) {
  if (off + 4 > s.size()) fail("truncated file");
  uint32_t v;
  std::memcpy(&v, s.data() + off, 4);
  off += 4;
  return v;
}

std::string take_bytes(const std::string& s, size_t& off, size_t n) {
  if (off + n > s.size()) fail("truncated file");
  std::string out = s.substr(off, n);
  off += n;
  return out;
}

void put_tensor(std::string& out, const std::string& name, int rows, int cols,
                const double* data) {
  put_u32(out, static_cast<uint32_t>(name.size()));
  out.append(name);
  put_u32(out, static_cast<uint32_t>(rows));
  put_u32(out, static_cast<uint32_t>(cols));
  out.append(reinterpret_cast<const char*>(data),
             static_cast<size_t>(rows) * cols * sizeof(double));
}

}  // namespace

std::string serialize_model(ModelParams& params) {
  nlohmann::ordered_json meta;
  meta["format_version"] = kFormatVersion;
  meta["embed_dim"] = params.embed_dim;
  nlohmann::ordered_json norm = nlohmann::ordered_json::object();
  for (const auto& [key, ms] : params.norm) norm[key] = {ms.first, ms.second};
  meta["norm"] = std::move(norm);
  const std::string meta_text = meta.dump();

  std::string out(kMagic, sizeof(kMagic));
  put_u32(out, static_cast<uint32_t>(meta_text.size()));
  out.append(meta_text);

  const std::vector<Parameter*> ps = params.all_params();
  put_u32(out, static_cast<uint32_t>(ps.size() + 2 * params.bn.size()));
  for (const Parameter* p : ps)
    put_tensor(out, p->name, p->value.rows, p->value.cols, p->value.data.data());
  for (const auto& [key, site] : params.bn) {
    put_tensor(out, key + "/bn/running_mean", 1,
               static_cast<int>(site.state.running_mean.size()),
               site.state.running_mean.data());
    put_tensor(out, key + "/bn/running_var", 1,
               static_cast<int>(site.state.running_var.size()),
               site.state.running_var.data());
  }
  return out;
}

ModelParams parse_model(const std::string& bytes,
                        std::shared_ptr<const Schema> schema) {
  size_t off = 0;
  if (take_bytes(bytes, off, sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic)))
    fail("bad magic");
  const uint32_t meta_len = take_u32(bytes, off);
  const std::string meta_text = take_bytes(bytes, off, meta_len);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(meta_text);
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("bad metadata: ") + e.what());
  }
  if (!meta.contains("format_version") || !meta["format_version"].is_number_integer())
    fail("missing format_version");
  if (meta["format_version"].get<int>() != kFormatVersion)
    fail("unsupported format version " + meta["format_version"].dump());
  if (!meta.contains("embed_dim") || !meta["embed_dim"].is_number_integer() ||
      meta["embed_dim"].get<int>() < 1)
    fail("missing embed_dim");
  NormStats norm;
  if (meta.contains("norm")) {
    if (!meta["norm"].is_object()) fail("norm must be an object");
    for (const auto& [key, value] : meta["norm"].items()) {
      if (!value.is_array() || value.size() != 2 || !value[0].is_number() ||
          !value[1].is_number())
        fail("norm entry '" + key + "' must be [mean, stddev]");
      norm[key] = {value[0].get<double>(), value[1].get<double>()};
    }
  }

  ModelParams params =
      init_model(std::move(schema), std::move(norm), /*seed=*/0,
                 meta["embed_dim"].get<int>());

  std::map<std::string, Parameter*> param_slots;
  for (Parameter* p : params.all_params()) param_slots[p->name] = p;
  std::map<std::string, std::vector<double>*> stat_slots;
  for (auto& [key, site] : params.bn) {
    stat_slots[key + "/bn/running_mean"] = &site.state.running_mean;
    stat_slots[key + "/bn/running_var"] = &site.state.running_var;
  }

  const uint32_t count = take_u32(bytes, off);
  if (count != param_slots.size() + stat_slots.size())
    fail("expected " + std::to_string(param_slots.size() + stat_slots.size()) +
         " tensors, file has " + std::to_string(count));

  std::set<std::string> seen;
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = take_u32(bytes, off);
    const std::string name = take_bytes(bytes, off, name_len);
    const int rows = static_cast<int>(take_u32(bytes, off));
    const int cols = static_cast<int>(take_u32(bytes, off));
    const std::string payload =
        take_bytes(bytes, off, static_cast<size_t>(rows) * cols * sizeof(double));
    if (!seen.insert(name).second) fail("duplicate tensor '" + name + "'");

    if (const auto pit = param_slots.find(name); pit != param_slots.end()) {
      Tensor& t = pit->second->value;
      if (t.rows != rows || t.cols != cols)
        fail("tensor '" + name + "' is " + std::to_string(rows) + "x" +
             std::to_string(cols) + ", expected " + std::to_string(t.rows) +
             "x" + std::to_string(t.cols));
      std::memcpy(t.data.data(), payload.data(), payload.size());
    } else if (const auto sit = stat_slots.find(name); sit != stat_slots.end()) {
      if (rows != 1 || cols != static_cast<int>(sit->second->size()))
        fail("tensor '" + name + "' has the wrong shape");
      std::memcpy(sit->second->data(), payload.data(), payload.size());
    } else {
      fail("unknown tensor '" + name + "'");
    }
  }
  if (seen.size() != param_slots.size() + stat_slots.size())
    fail("missing tensors");
  if (off != bytes.size()) fail("trailing bytes");
  return params;
}

void save_model(const std::string& path, ModelParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot open '" + path + "' for writing");
  const std::string bytes = serialize_model(params);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail("write to '" + path + "' failed");
}

ModelParams load_model(const std::string& path,
                       std::shared_ptr<const Schema> schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_model(buf.str(), std::move(schema));
}

}  // namespace cwcf
