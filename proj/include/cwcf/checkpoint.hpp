#pragma once

#include <memory>
#include <string>

#include "cwcf/model.hpp"

namespace cwcf {

// Versioned binary model checkpoint.
//
// Layout (all integers little-endian uint32):
//   bytes 0-7   magic "CWCKPT01"
//   u32         metadata length M
//   M bytes     metadata JSON: {"format_version": 1, "embed_dim": N,
//               "norm": {"<position>": [mean, stddev], ...}}
//   u32         tensor count
//   per tensor  u32 name length, name bytes, u32 rows, u32 cols,
//               rows*cols float64 values, row-major
//
// Tensors are every trainable parameter plus, per batchnorm site, its
// running mean and variance ("<bag>/bn/running_mean", ".../running_var").
// The schema itself is not embedded; loading against a different schema
// fails on the parameter names or shapes.

std::string serialize_model(ModelParams& params);

// Rebuilds a model for the schema from checkpoint bytes. Throws DataError
// (Malformed) on a bad magic, version, truncation, or any missing, unknown,
// or misshapen tensor.
ModelParams parse_model(const std::string& bytes,
                        std::shared_ptr<const Schema> schema);

void save_model(const std::string& path, ModelParams& params);
ModelParams load_model(const std::string& path,
                       std::shared_ptr<const Schema> schema);

}  // namespace cwcf
