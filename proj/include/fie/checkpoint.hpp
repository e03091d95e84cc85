#pragma once

#include <cstdint>
#include <filesystem>

#include <json.hpp>

#include "fie/autodiff.hpp"
#include "fie/optim.hpp"
#include "fie/text.hpp"

namespace fie {

// Layout: manifest.json (name -> {shape, dtype, offset, length}, run config,
// optimizer state), params.bin (little-endian values; parameters first, then
// Adam moments), vocab.json.
struct CheckpointMeta {
  nlohmann::json config;
  std::int64_t step = 0;
  Precision precision = Precision::kFloat64;
};

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const ParameterStore<T>& store,
                     const Adam<T>* adam, const Vocabulary& vocab, const nlohmann::json& config,
                     std::int64_t step);

// Fills `store` (and `adam`, when given) from a checkpoint. Names, shapes and
// precision must match.
template <typename T>
void load_checkpoint(const std::filesystem::path& dir, ParameterStore<T>& store, Adam<T>* adam);

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& dir);
Vocabulary load_vocabulary(const std::filesystem::path& dir);

}  // namespace fie
